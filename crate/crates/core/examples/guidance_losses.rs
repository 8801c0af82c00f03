//! The four regularizers between a source model and increasingly drifted
//! copies of it. All are zero at no drift; the attention-logit penalty only
//! looks at `[cls]` rows, the feature guides at whole token maps.

use gta_core::guidance::{feature_guide_loss, gta_loss, l2sp_penalty_values, FeatureKind};
use gta_core::tensor::{Tape, Tensor};
use gta_core::vit::{forward_batch, ViTConfig, ViTModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> gta_core::Result<()> {
    let cfg = ViTConfig::tiny(8);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let source = ViTModel::init(cfg, &mut rng)?;
    let n = cfg.image_size;
    let images: Vec<Tensor> = (0..4)
        .map(|_| Tensor::new([3, n, n], (0..3 * n * n).map(|_| rng.gen()).collect()).unwrap())
        .collect();
    let refs: Vec<&Tensor> = images.iter().collect();
    let src_trace = {
        let tape = Tape::new();
        let (_, tr) = forward_batch(&refs, &source.bind(&tape, false), true)?;
        tr.expect("captured").freeze()
    };

    println!("{:>6} {:>12} {:>12} {:>12} {:>12}", "drift", "attn-logit", "msa-out", "block-out", "l2sp");
    for scale in [0.0, 0.01, 0.03, 0.1] {
        let mut target = source.clone();
        for p in target.params_mut() {
            for v in p.value.data_mut() {
                *v += scale * rng.gen_range(-1.0..1.0);
            }
        }
        let tape = Tape::new();
        let (_, tr) = forward_batch(&refs, &target.bind(&tape, true), true)?;
        let tr = tr.expect("captured");
        println!(
            "{scale:>6} {:>12.5} {:>12.5} {:>12.5} {:>12.5}",
            gta_loss(&src_trace, &tr)?.item(),
            feature_guide_loss(FeatureKind::MsaOutput, &src_trace, &tr)?.item(),
            feature_guide_loss(FeatureKind::BlockOutput, &src_trace, &tr)?.item(),
            l2sp_penalty_values(&target, &source)?
        );
    }
    Ok(())
}
