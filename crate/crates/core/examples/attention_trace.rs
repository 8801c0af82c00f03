//! Forward a batch through a fresh ViT and inspect the recorded attention:
//! one logit matrix per (block, head, sample), and the softmaxed `[cls]`
//! row that guidance and the attention maps are built from.

use gta_core::eval::softmaxed_cls_row;
use gta_core::tensor::{Tape, Tensor};
use gta_core::vit::{forward_batch, ViTConfig, ViTModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> gta_core::Result<()> {
    let cfg = ViTConfig::small(8);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = ViTModel::init(cfg, &mut rng)?;
    println!(
        "small ViT: {} patches of {}x{}, D={}, {} heads, depth {}, {} parameters",
        cfg.num_patches(),
        cfg.patch_size,
        cfg.patch_size,
        cfg.embed_dim,
        cfg.heads,
        cfg.depth,
        cfg.param_count()
    );

    let n = cfg.image_size;
    let images: Vec<Tensor> = (0..3)
        .map(|_| Tensor::new([3, n, n], (0..3 * n * n).map(|_| rng.gen()).collect()).unwrap())
        .collect();
    let refs: Vec<&Tensor> = images.iter().collect();
    let tape = Tape::new();
    let (logits, trace) = forward_batch(&refs, &model.bind(&tape, false), true)?;
    let trace = trace.expect("captured").freeze();
    println!("class logits {:?}", logits.shape());
    println!(
        "trace: {} blocks x {} heads x {} samples, each {:?}",
        trace.depth(),
        trace.heads(),
        trace.batch,
        trace.logits[0][0][0].shape()
    );

    let last = trace.depth() - 1;
    for head in 0..trace.heads() {
        let row = softmaxed_cls_row(&trace.logits[last][head][0])?;
        let top = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map_or(0, |(i, _)| i);
        println!(
            "final block, head {head}: {} patch weights, sum {:.12}, most attended patch {top}",
            row.len(),
            row.iter().sum::<f64>()
        );
    }
    Ok(())
}
