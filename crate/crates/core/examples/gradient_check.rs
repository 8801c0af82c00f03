//! Central-difference check of the tape's gradients, first on single ops,
//! then on the full guided objective of a tiny model.

use gta_core::guidance::{total_loss, FreezePolicy, GuidanceInputs, GuidanceMethod, GuidanceSpec};
use gta_core::tensor::{finite_diff_check, Tape, Tensor};
use gta_core::vit::{forward_batch, ViTConfig, ViTModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> gta_core::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::new([3, 5], (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect())?;

    let softmax = finite_diff_check(|v| v.softmax_rows()?.square()?.sum(), &x, 1e-5)?;
    let gelu = finite_diff_check(|v| v.gelu()?.sum(), &x, 1e-5)?;
    let norm = finite_diff_check(
        |v| {
            let t = v.tape();
            let g = t.constant(Tensor::full([5], 1.3));
            let b = t.constant(Tensor::full([5], -0.2));
            v.layer_norm(g, b, 1e-6)?.square()?.sum()
        },
        &x,
        1e-5,
    )?;
    println!("softmax {softmax:.2e}  gelu {gelu:.2e}  layer_norm {norm:.2e}");

    // Guided objective w.r.t. every parameter coordinate we probe.
    let cfg = ViTConfig::tiny(4);
    let source = ViTModel::init(cfg, &mut rng)?;
    let mut target = source.clone();
    for p in target.params_mut() {
        for v in p.value.data_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
    let images: Vec<Tensor> = (0..2)
        .map(|_| Tensor::new([3, 16, 16], (0..768).map(|_| rng.gen()).collect()).unwrap())
        .collect();
    let refs: Vec<&Tensor> = images.iter().collect();
    let mut labels = Tensor::zeros([2, 4]);
    labels.data_mut()[1] = 1.0;
    labels.data_mut()[6] = 1.0;
    let spec = GuidanceSpec::new(GuidanceMethod::Gta, 0.5, FreezePolicy::None)?;
    let src_trace = {
        let tape = Tape::new();
        let (_, tr) = forward_batch(&refs, &source.bind(&tape, false), true)?;
        tr.expect("captured").freeze()
    };

    let objective = |m: &ViTModel, tape: &Tape| -> gta_core::Result<f64> {
        let bound = m.bind(tape, true);
        let (logits, tr) = forward_batch(&refs, &bound, true)?;
        let ce = logits.soft_cross_entropy(&labels)?;
        let inputs = GuidanceInputs {
            src_trace: Some(&src_trace),
            tgt_trace: tr.as_ref(),
            params: &bound,
            model: m,
            init: None,
        };
        Ok(total_loss(ce, &spec, &inputs)?.0.item())
    };

    let tape = Tape::new();
    let bound = target.bind(&tape, true);
    let (logits, tr) = forward_batch(&refs, &bound, true)?;
    let ce = logits.soft_cross_entropy(&labels)?;
    let inputs = GuidanceInputs {
        src_trace: Some(&src_trace),
        tgt_trace: tr.as_ref(),
        params: &bound,
        model: &target,
        init: None,
    };
    let grads = total_loss(ce, &spec, &inputs)?.0.backward()?;

    let h = 1e-5;
    let mut worst = 0.0f64;
    for (i, var) in bound.vars.iter().enumerate() {
        let analytic = grads.wrt(var);
        let j = rng.gen_range(0..analytic.len());
        let mut plus = target.clone();
        plus.params_mut()[i].value.data_mut()[j] += h;
        let mut minus = target.clone();
        minus.params_mut()[i].value.data_mut()[j] -= h;
        let numeric = (objective(&plus, &Tape::new())? - objective(&minus, &Tape::new())?) / (2.0 * h);
        let a = analytic.data()[j];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    println!("full objective, {} parameters probed: worst {worst:.2e}", bound.vars.len());
    Ok(())
}
