//! Transfer-learning regularizers and parameter-freezing policies.
//!
//! The attention-logit guide ties the target's `[cls]` logit rows (self
//! logit excluded) to a frozen source's:
//!
//! ```text
//! L = L_CE + λ · Σ_{blocks m, heads l} ‖A_cls\1(src) − A_cls\1(tgt)‖²
//! ```
//!
//! Both terms are averaged over the batch. The sum over blocks and heads
//! is not normalized, so `λ` absorbs the scale.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Var;
use crate::vit::{cls_attention_row, cls_row_values, AttentionTrace, BoundModel, FrozenTrace, ParamKind, ViTModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceMethod {
    None,
    /// Attention-logit guidance on the `[cls]` rows.
    Gta,
    /// Guide the per-block MSA outputs.
    MsaGuide,
    /// Guide the per-block transformer outputs.
    BlockGuide,
    /// Pull weights toward their pre-trained values.
    L2sp,
}

impl GuidanceMethod {
    pub const ALL: [GuidanceMethod; 5] = [
        GuidanceMethod::None,
        GuidanceMethod::Gta,
        GuidanceMethod::MsaGuide,
        GuidanceMethod::BlockGuide,
        GuidanceMethod::L2sp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GuidanceMethod::None => "none",
            GuidanceMethod::Gta => "gta",
            GuidanceMethod::MsaGuide => "msa-guide",
            GuidanceMethod::BlockGuide => "block-guide",
            GuidanceMethod::L2sp => "l2sp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown method `{s}`")))
    }

    /// Whether the regularizer compares source and target forward passes.
    pub fn needs_trace(self) -> bool {
        matches!(
            self,
            GuidanceMethod::Gta | GuidanceMethod::MsaGuide | GuidanceMethod::BlockGuide
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FreezePolicy {
    None,
    /// Train only query/key/value/projection weights and the head.
    AttentionOnly,
    /// Train only the feed-forward sublayers and the head.
    FfnOnly,
}

impl FreezePolicy {
    pub fn name(self) -> &'static str {
        match self {
            FreezePolicy::None => "none",
            FreezePolicy::AttentionOnly => "attention-only",
            FreezePolicy::FfnOnly => "ffn-only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [FreezePolicy::None, FreezePolicy::AttentionOnly, FreezePolicy::FfnOnly]
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown freeze policy `{s}`")))
    }
}

/// Which regularizer, how strongly, and which parameters may move.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSpec {
    pub method: GuidanceMethod,
    pub lambda: f64,
    pub freeze: FreezePolicy,
}

impl GuidanceSpec {
    pub fn new(method: GuidanceMethod, lambda: f64, freeze: FreezePolicy) -> Result<Self> {
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be finite and ≥ 0, got {lambda}")));
        }
        Ok(GuidanceSpec {
            method,
            lambda,
            freeze,
        })
    }

    pub fn plain() -> Self {
        GuidanceSpec {
            method: GuidanceMethod::None,
            lambda: 0.0,
            freeze: FreezePolicy::None,
        }
    }

    /// False when the regularizer is switched off entirely, either by the
    /// method or by `λ = 0`.
    pub fn active(&self) -> bool {
        self.method != GuidanceMethod::None && self.lambda != 0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub reg: f64,
    pub total: f64,
    pub lambda: f64,
}

fn check_traces(src: &FrozenTrace, tgt: &AttentionTrace<'_>) -> Result<()> {
    let shape_ok = src.batch == tgt.batch
        && src.logits.len() == tgt.logits.len()
        && src
            .logits
            .iter()
            .zip(&tgt.logits)
            .all(|(a, b)| {
                a.len() == b.len()
                    && a.iter().zip(b).all(|(sa, sb)| {
                        sa.len() == sb.len()
                            && sa.iter().zip(sb).all(|(x, y)| x.shape() == y.shape().as_slice())
                    })
            })
        && src.block_out.len() == tgt.block_out.len()
        && src.msa_out.len() == tgt.msa_out.len();
    if shape_ok {
        Ok(())
    } else {
        Err(Error::Config(
            "source and target traces come from differently shaped models or batches".into(),
        ))
    }
}

/// Batch mean of `Σ_{m,l} ‖A_cls\1(src) − A_cls\1(tgt)‖²`.
///
/// Gradient flows into the target trace only.
pub fn gta_loss<'t>(src: &FrozenTrace, tgt: &AttentionTrace<'t>) -> Result<Var<'t>> {
    check_traces(src, tgt)?;
    let mut terms = Vec::new();
    for (src_heads, tgt_heads) in src.logits.iter().zip(&tgt.logits) {
        for (src_samples, tgt_samples) in src_heads.iter().zip(tgt_heads) {
            for (s, t) in src_samples.iter().zip(tgt_samples) {
                let src_row = crate::tensor::Tensor::vector(cls_row_values(s)?);
                terms.push(cls_attention_row(*t)?.sub_const(&src_row)?.sum_squares()?);
            }
        }
    }
    sum_scaled(terms, 1.0 / tgt.batch as f64)
}

/// Which per-block feature a feature guide compares.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    MsaOutput,
    BlockOutput,
}

/// Batch mean of `Σ_m ‖F_m(src) − F_m(tgt)‖²` over full `(N+1)×D` features.
pub fn feature_guide_loss<'t>(
    kind: FeatureKind,
    src: &FrozenTrace,
    tgt: &AttentionTrace<'t>,
) -> Result<Var<'t>> {
    check_traces(src, tgt)?;
    let (s, t) = match kind {
        FeatureKind::MsaOutput => (&src.msa_out, &tgt.msa_out),
        FeatureKind::BlockOutput => (&src.block_out, &tgt.block_out),
    };
    let terms = s
        .iter()
        .zip(t)
        .map(|(sv, tv)| {
            if sv.shape() != tv.shape().as_slice() {
                return Err(Error::Config("feature shapes differ between traces".into()));
            }
            tv.sub_const(sv)?.sum_squares()
        })
        .collect::<Result<Vec<_>>>()?;
    sum_scaled(terms, 1.0 / tgt.batch as f64)
}

fn sum_scaled<'t>(terms: Vec<Var<'t>>, scale: f64) -> Result<Var<'t>> {
    let mut it = terms.into_iter();
    let first = it
        .next()
        .ok_or_else(|| Error::Contract("nothing to regularize".into()))?;
    let mut acc = first;
    for t in it {
        acc = acc.add(t)?;
    }
    acc.scale(scale)
}

/// `Σ ‖w − w⁰‖²` over every non-head parameter of the bound target.
pub fn l2sp_penalty<'t>(params: &BoundModel<'t>, kinds: &ViTModel, init: &ViTModel) -> Result<Var<'t>> {
    let pairs = l2sp_pairs(kinds, init)?;
    let terms = pairs
        .into_iter()
        .map(|(i, j)| params.vars[i].sub_const(&init.params()[j].value)?.sum_squares())
        .collect::<Result<Vec<_>>>()?;
    sum_scaled(terms, 1.0)
}

/// Plain-value L2-SP penalty between two models.
pub fn l2sp_penalty_values(model: &ViTModel, init: &ViTModel) -> Result<f64> {
    let pairs = l2sp_pairs(model, init)?;
    Ok(pairs
        .into_iter()
        .map(|(i, j)| {
            model.params()[i]
                .value
                .data()
                .iter()
                .zip(init.params()[j].value.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum())
}

/// Index pairs `(model, init)` of matching non-head parameters.
fn l2sp_pairs(model: &ViTModel, init: &ViTModel) -> Result<Vec<(usize, usize)>> {
    let mine: Vec<_> = model
        .params()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.kind != ParamKind::Head)
        .collect();
    let theirs: Vec<_> = init
        .params()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.kind != ParamKind::Head)
        .collect();
    if mine.len() != theirs.len() {
        return Err(Error::IncompatibleCheckpoint(format!(
            "{} non-head tensors vs {} in the starting point",
            mine.len(),
            theirs.len()
        )));
    }
    mine.into_iter()
        .map(|(i, p)| {
            let (j, q) = theirs
                .iter()
                .find(|(_, q)| q.name == p.name)
                .ok_or_else(|| {
                    Error::IncompatibleCheckpoint(format!("`{}` missing from the starting point", p.name))
                })?;
            if p.value.shape() != q.value.shape() {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "`{}` has shape {:?} but the starting point has {:?}",
                    p.name,
                    p.value.shape(),
                    q.value.shape()
                )));
            }
            Ok((i, *j))
        })
        .collect()
}

/// Per-parameter trainable flags, in registry order.
pub fn apply_freeze_policy(policy: FreezePolicy, model: &ViTModel) -> Vec<bool> {
    model
        .params()
        .iter()
        .map(|p| match policy {
            FreezePolicy::None => true,
            FreezePolicy::AttentionOnly => {
                matches!(p.kind, ParamKind::Attention | ParamKind::Head)
            }
            FreezePolicy::FfnOnly => matches!(p.kind, ParamKind::Ffn | ParamKind::Head),
        })
        .collect()
}

/// Inputs the regularizers may need besides the CE term.
pub struct GuidanceInputs<'a, 't> {
    pub src_trace: Option<&'a FrozenTrace>,
    pub tgt_trace: Option<&'a AttentionTrace<'t>>,
    pub params: &'a BoundModel<'t>,
    /// The target model whose values sit in `params`; supplies names/kinds.
    pub model: &'a ViTModel,
    /// Pre-trained starting point for L2-SP.
    pub init: Option<&'a ViTModel>,
}

/// `total = ce + λ · reg` for the configured method.
///
/// When the regularizer is inactive the CE node itself is returned and
/// `reg` is reported as exactly 0.
pub fn total_loss<'t>(
    ce: Var<'t>,
    spec: &GuidanceSpec,
    inputs: &GuidanceInputs<'_, 't>,
) -> Result<(Var<'t>, LossBreakdown)> {
    let ce_val = ce.item();
    if !spec.active() {
        return Ok((
            ce,
            LossBreakdown {
                ce: ce_val,
                reg: 0.0,
                total: ce_val,
                lambda: spec.lambda,
            },
        ));
    }
    let traces = || -> Result<(&FrozenTrace, &AttentionTrace<'t>)> {
        match (inputs.src_trace, inputs.tgt_trace) {
            (Some(s), Some(t)) => Ok((s, t)),
            _ => Err(Error::Contract(format!(
                "method `{}` needs source and target traces",
                spec.method.name()
            ))),
        }
    };
    let reg = match spec.method {
        GuidanceMethod::None => unreachable!("inactive spec handled above"),
        GuidanceMethod::Gta => {
            let (s, t) = traces()?;
            gta_loss(s, t)?
        }
        GuidanceMethod::MsaGuide => {
            let (s, t) = traces()?;
            feature_guide_loss(FeatureKind::MsaOutput, s, t)?
        }
        GuidanceMethod::BlockGuide => {
            let (s, t) = traces()?;
            feature_guide_loss(FeatureKind::BlockOutput, s, t)?
        }
        GuidanceMethod::L2sp => {
            let init = inputs
                .init
                .ok_or_else(|| Error::Contract("l2sp needs the pre-trained starting point".into()))?;
            l2sp_penalty(inputs.params, inputs.model, init)?
        }
    };
    let total = ce.add(reg.scale(spec.lambda)?)?;
    let breakdown = LossBreakdown {
        ce: ce_val,
        reg: reg.item(),
        total: total.item(),
        lambda: spec.lambda,
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};
    use crate::vit::{forward, forward_batch, ViTConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn micro() -> ViTConfig {
        ViTConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 8,
            heads: 2,
            depth: 2,
            num_classes: 3,
        }
    }

    fn image(cfg: &ViTConfig, seed: u64) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let s = cfg.image_size;
        Tensor::new([3, s, s], (0..3 * s * s).map(|_| r.gen::<f64>()).collect()).unwrap()
    }

    /// A hand-built single-block, single-head trace pair.
    fn one_head<'t>(tape: &'t Tape, src_row: &[f64], tgt_row: &[f64]) -> (FrozenTrace, AttentionTrace<'t>, Var<'t>) {
        let n = src_row.len() + 1;
        let mut s = vec![0.0; n * n];
        s[1..n].copy_from_slice(src_row);
        let mut t = vec![0.0; n * n];
        t[1..n].copy_from_slice(tgt_row);
        let tv = tape.param(Tensor::new([n, n], t).unwrap());
        let feat = tape.constant(Tensor::zeros([n, 2]));
        let tgt = AttentionTrace {
            pass_id: 1,
            batch: 1,
            logits: vec![vec![vec![tv]]],
            msa_out: vec![feat],
            block_out: vec![feat],
        };
        let src = FrozenTrace {
            pass_id: 2,
            batch: 1,
            logits: vec![vec![vec![Tensor::new([n, n], s).unwrap()]]],
            msa_out: vec![Tensor::zeros([n, 2])],
            block_out: vec![Tensor::zeros([n, 2])],
        };
        (src, tgt, tv)
    }

    #[test]
    fn gta_hand_values() {
        let tape = Tape::new();
        let (src, tgt, _) = one_head(&tape, &[1.0, 2.0], &[1.0, 3.0]);
        assert_eq!(gta_loss(&src, &tgt).unwrap().item(), 1.0);

        let (src, tgt, tv) = one_head(&tape, &[0.0, 0.0], &[1.0, -1.0]);
        let g = gta_loss(&src, &tgt).unwrap().backward().unwrap().wrt(&tv);
        assert_eq!(&g.row(0)[1..], &[2.0, -2.0]);
        assert_eq!(g.at(0, 0), 0.0);
        assert!(g.data()[3..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gta_identical_traces_is_zero() {
        let cfg = micro();
        let m = ViTModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let tape = Tape::new();
        let bm = m.bind(&tape, true);
        let (_, tr) = forward(&image(&cfg, 2), &bm, true).unwrap();
        let tr = tr.unwrap();
        assert_eq!(gta_loss(&tr.freeze(), &tr).unwrap().item(), 0.0);
        assert_eq!(
            feature_guide_loss(FeatureKind::BlockOutput, &tr.freeze(), &tr).unwrap().item(),
            0.0
        );
    }

    #[test]
    fn gta_shape_mismatch_is_config_error() {
        let tape = Tape::new();
        let (_, tgt, _) = one_head(&tape, &[1.0, 2.0], &[1.0, 3.0]);
        let (src, _, _) = one_head(&tape, &[1.0, 2.0, 3.0], &[1.0, 3.0, 0.0]);
        assert!(matches!(gta_loss(&src, &tgt), Err(Error::Config(_))));
    }

    #[test]
    fn feature_guide_all_ones_difference() {
        let tape = Tape::new();
        let f = tape.param(Tensor::full([2, 2], 1.0));
        let logit = tape.constant(Tensor::zeros([2, 2]));
        let tgt = AttentionTrace {
            pass_id: 1,
            batch: 1,
            logits: vec![vec![vec![logit]]],
            msa_out: vec![f],
            block_out: vec![f],
        };
        let src = FrozenTrace {
            pass_id: 2,
            batch: 1,
            logits: vec![vec![vec![Tensor::zeros([2, 2])]]],
            msa_out: vec![Tensor::zeros([2, 2])],
            block_out: vec![Tensor::zeros([2, 2])],
        };
        assert_eq!(feature_guide_loss(FeatureKind::BlockOutput, &src, &tgt).unwrap().item(), 4.0);
        assert_eq!(feature_guide_loss(FeatureKind::MsaOutput, &src, &tgt).unwrap().item(), 4.0);
    }

    #[test]
    fn msa_guide_zero_projection() {
        let cfg = micro();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut a = ViTModel::init(cfg, &mut rng).unwrap();
        let mut b = ViTModel::init(cfg, &mut rng).unwrap();
        for m in [&mut a, &mut b] {
            for p in m.params_mut() {
                if p.name.contains("attn.proj") {
                    p.value = Tensor::zeros(p.value.shape().to_vec());
                }
            }
        }
        let img = image(&cfg, 4);
        let tape = Tape::new();
        let (_, st) = forward(&img, &a.bind(&tape, false), true).unwrap();
        let (_, tt) = forward(&img, &b.bind(&tape, true), true).unwrap();
        let v = feature_guide_loss(FeatureKind::MsaOutput, &st.unwrap().freeze(), &tt.unwrap())
            .unwrap()
            .item();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn l2sp_values() {
        let cfg = micro();
        let m = ViTModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(l2sp_penalty_values(&m, &m).unwrap(), 0.0);
        let mut moved = m.clone();
        let d = moved.param_mut("blocks.0.ln1.beta").unwrap();
        d.value.data_mut()[0] += 1.0;
        d.value.data_mut()[1] += 1.0;
        // head changes are ignored
        moved.param_mut("head.bias").unwrap().value.data_mut()[0] += 5.0;
        assert_eq!(l2sp_penalty_values(&moved, &m).unwrap(), 2.0);
        let tape = Tape::new();
        let bm = moved.bind(&tape, true);
        assert_eq!(l2sp_penalty(&bm, &moved, &m).unwrap().item(), 2.0);

        let mut other = cfg;
        other.depth = 1;
        let o = ViTModel::init(other, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert!(matches!(
            l2sp_penalty_values(&m, &o),
            Err(Error::IncompatibleCheckpoint(_))
        ));
    }

    #[test]
    fn freeze_policy_masks() {
        let cfg = micro();
        let m = ViTModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert!(apply_freeze_policy(FreezePolicy::None, &m).iter().all(|&t| t));
        let att = apply_freeze_policy(FreezePolicy::AttentionOnly, &m);
        let names: Vec<_> = m
            .params()
            .iter()
            .zip(&att)
            .filter(|(_, &t)| t)
            .map(|(p, _)| p.name.as_str())
            .collect();
        // Per block: 2 heads × (q, k, v) + projection weight + projection bias;
        // then the head weight and bias.
        assert_eq!(names.len(), 2 * (3 * 2 + 2) + 2);
        assert!(names.iter().all(|n| n.contains(".attn.") || n.starts_with("head.")));
        let ffn = apply_freeze_policy(FreezePolicy::FfnOnly, &m);
        assert!(att.iter().zip(&ffn).zip(m.params()).all(|((a, f), p)| {
            p.kind == ParamKind::Head || !(*a && *f)
        }));
        let ffn_names: Vec<_> = m.params().iter().zip(&ffn).filter(|(_, &t)| t).map(|(p, _)| p.name.as_str()).collect();
        assert_eq!(ffn_names.len(), 2 * 4 + 2);
    }

    #[test]
    fn total_loss_arithmetic() {
        let cfg = micro();
        let m = ViTModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let tape = Tape::new();
        let bm = m.bind(&tape, true);
        let ce = tape.param(Tensor::scalar(0.7));
        let inputs = GuidanceInputs {
            src_trace: None,
            tgt_trace: None,
            params: &bm,
            model: &m,
            init: None,
        };
        let spec = GuidanceSpec::new(GuidanceMethod::Gta, 0.0, FreezePolicy::None).unwrap();
        let (t, b) = total_loss(ce, &spec, &inputs).unwrap();
        assert_eq!(t.id(), ce.id());
        assert_eq!(b.total.to_bits(), b.ce.to_bits());

        let spec = GuidanceSpec::new(GuidanceMethod::Gta, 2.0, FreezePolicy::None).unwrap();
        assert!(matches!(total_loss(ce, &spec, &inputs), Err(Error::Contract(_))));

        let (src, tgt, _) = one_head(&tape, &[0.0, 0.0], &[1.5f64.sqrt(), 0.0]);
        let inputs = GuidanceInputs {
            src_trace: Some(&src),
            tgt_trace: Some(&tgt),
            ..inputs
        };
        let (_, b) = total_loss(ce, &spec, &inputs).unwrap();
        assert!((b.reg - 1.5).abs() < 1e-15);
        assert!((b.total - 3.7).abs() < 1e-12);
        assert!(GuidanceSpec::new(GuidanceMethod::Gta, -1.0, FreezePolicy::None).is_err());
    }

    #[test]
    fn source_parameters_receive_no_gradient() {
        let cfg = micro();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let src_model = ViTModel::init(cfg, &mut rng).unwrap();
        let tgt_model = ViTModel::init(cfg, &mut rng).unwrap();
        let imgs = [image(&cfg, 9), image(&cfg, 10)];
        let refs: Vec<_> = imgs.iter().collect();
        let tape = Tape::new();
        let sb = src_model.bind(&tape, true);
        let tb = tgt_model.bind(&tape, true);
        let (_, st) = forward_batch(&refs, &sb, true).unwrap();
        let (y, tt) = forward_batch(&refs, &tb, true).unwrap();
        let target = Tensor::new([2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let ce = y.soft_cross_entropy(&target).unwrap();
        let frozen = st.unwrap().freeze();
        let tt = tt.unwrap();
        let spec = GuidanceSpec::new(GuidanceMethod::Gta, 10.0, FreezePolicy::None).unwrap();
        let inputs = GuidanceInputs {
            src_trace: Some(&frozen),
            tgt_trace: Some(&tt),
            params: &tb,
            model: &tgt_model,
            init: None,
        };
        let (total, b) = total_loss(ce, &spec, &inputs).unwrap();
        assert!(b.reg > 0.0);
        let g = total.backward().unwrap();
        for v in &sb.vars {
            assert!(g.wrt(v).data().iter().all(|&x| x == 0.0));
        }
        assert!(tb.vars.iter().any(|v| g.wrt(v).data().iter().any(|&x| x != 0.0)));
    }

    #[test]
    fn gta_ignores_self_logit_and_patch_rows() {
        let cfg = micro();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = ViTModel::init(cfg, &mut rng).unwrap();
        let b = ViTModel::init(cfg, &mut rng).unwrap();
        let img = image(&cfg, 12);
        let tape = Tape::new();
        let (_, st) = forward(&img, &a.bind(&tape, false), true).unwrap();
        let (_, tt) = forward(&img, &b.bind(&tape, false), true).unwrap();
        let st = st.unwrap().freeze();
        let tt = tt.unwrap();
        let base = gta_loss(&st, &tt).unwrap().item();
        let mut perturbed = st.clone();
        for heads in perturbed.logits.iter_mut() {
            for samples in heads.iter_mut() {
                let t = &mut samples[0];
                let n = t.shape()[1];
                t.data_mut()[0] += 3.0;
                for x in t.data_mut()[n..].iter_mut() {
                    *x -= 1.25;
                }
            }
        }
        assert_eq!(gta_loss(&perturbed, &tt).unwrap().item(), base);
    }
}
