//! CutMix boxes and attention-weighted label mixing: paste a box from one
//! image into another and let the model's `[cls]` attention decide how much
//! of the label moves with it.

use gta_core::augment::{box_patch_mask, cls_patch_attention, mix_images, sample_cut_box, transmix_coefficient, MixedLabel};
use gta_core::data::{generate_synthetic_dataset, Split, SyntheticSpec};
use gta_core::tensor::Tape;
use gta_core::vit::{forward_batch, ViTConfig, ViTModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> gta_core::Result<()> {
    let cfg = ViTConfig::tiny(8);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = ViTModel::init(cfg, &mut rng)?;
    let spec = SyntheticSpec {
        per_class: 1,
        image_size: cfg.image_size,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic_dataset(&spec, 0, Split::Test)?;
    let (a, b) = (&data.samples[0], &data.samples[1]);

    for area in [0.0, 0.1, 0.25, 0.5, 1.0] {
        let cut = sample_cut_box(&mut rng, cfg.image_size, cfg.image_size, area);
        let mixed = mix_images(&a.image, &b.image, &cut)?;
        let tape = Tape::new();
        let (_, trace) = forward_batch(&[&mixed], &model.bind(&tape, false), true)?;
        let trace = trace.expect("captured").freeze();
        let last = trace.depth() - 1;
        let heads: Vec<_> = trace.logits[last].iter().map(|h| &h[0]).collect();
        let attn = cls_patch_attention(&heads)?;
        let lam = transmix_coefficient(&attn, &box_patch_mask(&cut, &cfg))?;
        let label = MixedLabel {
            label_a: a.label,
            label_b: b.label,
            coefficient: lam,
        };
        println!(
            "area {:.2}: box {}x{} ({:.0}% of pixels), pasted-label weight {lam:.3}, target {:?}",
            area,
            cut.x1 - cut.x0,
            cut.y1 - cut.y0,
            100.0 * cut.area() as f64 / (cfg.image_size * cfg.image_size) as f64,
            label.target(data.num_classes).iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        );
    }
    Ok(())
}
