//! Save a model with its optimizer step and RNG position, load it back,
//! and show that a second save reproduces the first byte for byte.

use gta_core::train::{Checkpoint, RngState};
use gta_core::vit::{ViTConfig, ViTModel};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> gta_core::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let model = ViTModel::init(ViTConfig::tiny(8), &mut rng)?;
    rng.next_u64();
    let ck = Checkpoint {
        rng: Some(RngState::capture(&rng)),
        ..Checkpoint::of_model(model)
    };
    let bytes = ck.to_bytes()?;
    let back = Checkpoint::from_bytes(&bytes)?;
    println!(
        "{} bytes, {} tensors, identical after reload: {}",
        bytes.len(),
        back.model.params().len(),
        back.to_bytes()? == bytes
    );
    let mut resumed = back.rng.expect("rng state").restore()?;
    println!("rng resumes in step: {}", resumed.next_u64() == rng.next_u64());
    match Checkpoint::from_bytes(&bytes[..bytes.len() - 3]) {
        Err(e) => println!("truncated file rejected: {e}"),
        Ok(_) => println!("truncated file accepted"),
    }
    Ok(())
}
