//! Turn `[cls]` attention into a foreground mask, score it against the
//! ground truth, and write attention overlays.
//!
//! `cargo run --example attention_segmentation -- /tmp/gta-overlays`

use gta_core::data::{generate_synthetic_dataset, Split, SyntheticSpec};
use gta_core::eval::{attention_map, emit_overlay, infer, jaccard, patch_jaccard, threshold_mask, MapMode, DEFAULT_MASS_FRACTION};
use gta_core::vit::{ViTConfig, ViTModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> gta_core::Result<()> {
    let out = std::env::args().nth(1).map(std::path::PathBuf::from);
    let cfg = ViTConfig::small(8);
    let model = ViTModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(5))?;
    let spec = SyntheticSpec {
        per_class: 1,
        image_size: cfg.image_size,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic_dataset(&spec, 0, Split::Test)?;
    let images: Vec<_> = data.samples.iter().map(|s| &s.image).collect();
    let (_, trace) = infer(&model, &images)?;

    for (i, sample) in data.samples.iter().enumerate().take(4) {
        let truth = sample.mask.as_ref().expect("synthetic masks");
        for mode in [MapMode::FinalBlock, MapMode::AllBlocksMax] {
            let map = attention_map(&trace, &cfg, i, mode)?;
            let pixel_mask = threshold_mask(&map.values, DEFAULT_MASS_FRACTION)?;
            let pixel = jaccard(&pixel_mask, &truth.bits)?;
            let grid = patch_jaccard(&map.grid, truth, &cfg, DEFAULT_MASS_FRACTION)?;
            println!(
                "sample {i} (foreground {:.0}%), {}: pixel Jaccard {pixel:.3}, patch Jaccard {grid:.3}",
                100.0 * truth.fraction(),
                mode.name()
            );
            if let Some(dir) = &out {
                std::fs::create_dir_all(dir)?;
                emit_overlay(&sample.image, &map, &dir.join(format!("sample{i}-{}.ppm", mode.name())))?;
            }
        }
    }
    Ok(())
}
