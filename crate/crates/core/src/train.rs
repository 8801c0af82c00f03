//! AdamW with a cosine schedule, the fine-tuning loop, run reports, and
//! the checkpoint format.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::augment::{self, box_patch_mask, cls_patch_attention, mix_images, sample_cut_box, MixedLabel};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{self, EvalOptions, EvalRecord};
use crate::guidance::{apply_freeze_policy, total_loss, GuidanceInputs, GuidanceMethod, GuidanceSpec, LossBreakdown};
use crate::tensor::{Tape, Tensor};
use crate::vit::{forward_batch, Param, ViTConfig, ViTModel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransMixConfig {
    /// Probability that a batch is mixed.
    pub probability: f64,
    /// Box area as a fraction of the image.
    pub area: f64,
}

impl Default for TransMixConfig {
    fn default() -> Self {
        TransMixConfig {
            probability: 0.5,
            area: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub guidance: GuidanceSpec,
    pub transmix: Option<TransMixConfig>,
    /// Flip and pad-crop every training image.
    pub augment: bool,
    pub seed: u64,
    /// Evaluate every this many steps; 0 evaluates only after the last step.
    pub eval_interval: usize,
    pub eval: EvalOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 1500,
            batch_size: 32,
            lr: 3e-4,
            weight_decay: 0.05,
            betas: (0.9, 0.999),
            eps: 1e-8,
            guidance: GuidanceSpec::plain(),
            transmix: None,
            augment: true,
            seed: 0,
            eval_interval: 0,
            eval: EvalOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.iterations == 0 || self.batch_size == 0 {
            return fail("iterations and batch size must be ≥ 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("learning rate must be > 0, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.eps > 0.0) {
            return fail("weight decay must be ≥ 0 and eps > 0".into());
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return fail(format!("betas must lie in [0, 1), got ({b1}, {b2})"));
        }
        if let Some(t) = self.transmix {
            if !((0.0..=1.0).contains(&t.probability) && (0.0..=1.0).contains(&t.area)) {
                return fail("TransMix probability and area must lie in [0, 1]".into());
            }
        }
        if !(self.eval.mass_fraction > 0.0 && self.eval.mass_fraction <= 1.0) {
            return fail(format!("mass fraction must lie in (0, 1], got {}", self.eval.mass_fraction));
        }
        Ok(())
    }

    pub fn adam(&self, lr: f64) -> AdamHyper {
        AdamHyper {
            lr,
            betas: self.betas,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// `lr₀·½(1 + cos(π·step/T))`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64) -> f64 {
    let t = step.min(total) as f64 / total.max(1) as f64;
    (lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())).max(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Param]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One AdamW update of the tensors with `trainable[i]`. Decoupled weight
/// decay applies to tensors whose [`Param::decays`] holds.
pub fn adamw_step(
    params: &mut [Param],
    grads: &[Tensor],
    state: &mut AdamState,
    hyper: &AdamHyper,
    trainable: &[bool],
) -> Result<()> {
    if grads.len() != params.len() || trainable.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape(
            "adamw_step",
            &[params.len()],
            &[grads.len(), trainable.len(), state.m.len()],
        ));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(Error::shape("adamw_step", p.value.shape(), g.shape()));
        }
    }
    state.step += 1;
    let (b1, b2) = hyper.betas;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (i, p) in params.iter_mut().enumerate() {
        if !trainable[i] {
            continue;
        }
        let decay = if p.decays() { hyper.lr * hyper.weight_decay } else { 0.0 };
        let w = p.value.data_mut();
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, &gj) in grads[i].data().iter().enumerate() {
            w[j] -= decay * w[j];
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            w[j] -= hyper.lr * mh / (vh.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub ce: f64,
    pub reg: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_acc: Option<f64>,
    pub test: EvalRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    pub final_test_acc: Option<f64>,
    pub final_jaccard: Option<f64>,
    pub final_logit_distance: Option<f64>,
    pub mean_ce_last_10: f64,
}

pub const REPORT_SCHEMA: &str = "gta-run-report";
pub const REPORT_VERSION: u32 = 1;
/// How the TransMix coefficient is read from the model.
pub const TRANSMIX_ATTENTION: &str = "final-block cls row, softmax, head mean, renormalized over patches";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunReport {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalPoint>,
    pub summary: Option<RunSummary>,
}

impl RunReport {
    pub fn last_eval(&self) -> Option<&EvalPoint> {
        self.evals.last()
    }

    /// JSON Lines, header first. The header carries nothing that depends
    /// on the guidance method, so runs whose losses coincide serialize
    /// identically.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |v: serde_json::Value| {
            out.push_str(&v.to_string());
            out.push('\n');
        };
        push(json!({
            "schema": REPORT_SCHEMA,
            "version": REPORT_VERSION,
            "transmix_attention": TRANSMIX_ATTENTION,
        }));
        for s in &self.steps {
            let mut v = serde_json::to_value(s).expect("plain record");
            v["kind"] = json!("step");
            push(v);
        }
        for e in &self.evals {
            let mut v = serde_json::to_value(e).expect("plain record");
            v["kind"] = json!("eval");
            push(v);
        }
        if let Some(s) = &self.summary {
            let mut v = serde_json::to_value(s).expect("plain record");
            v["kind"] = json!("summary");
            push(v);
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header: serde_json::Value = serde_json::from_str(lines.next().unwrap_or(""))?;
        if header["schema"] != REPORT_SCHEMA {
            return Err(Error::Config("not a run report".into()));
        }
        let mut report = RunReport::default();
        for line in lines {
            let v: serde_json::Value = serde_json::from_str(line)?;
            match v["kind"].as_str() {
                Some("step") => report.steps.push(serde_json::from_value(v)?),
                Some("eval") => report.evals.push(serde_json::from_value(v)?),
                Some("summary") => report.summary = Some(serde_json::from_value(v)?),
                other => return Err(Error::Config(format!("unknown record kind {other:?}"))),
            }
        }
        Ok(report)
    }
}

/// Everything one run of the loop needs besides the model.
pub struct TrainInputs<'a> {
    pub train: &'a Dataset,
    /// Held-out data for periodic evaluation.
    pub test: Option<&'a Dataset>,
    /// Frozen source; required by trace-based guidance and L2-SP.
    pub source: Option<&'a ViTModel>,
}

/// Builds the fine-tuning target: source weights with a fresh head.
pub fn init_target(source: &ViTModel, num_classes: usize, seed: u64) -> Result<ViTModel> {
    let mut target = source.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4845_4144);
    target.reinit_head(num_classes, &mut rng)?;
    Ok(target)
}

/// Fine-tunes `target` against a frozen `source`.
pub fn finetune(
    source: &ViTModel,
    target: ViTModel,
    train: &Dataset,
    test: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<(ViTModel, RunReport)> {
    let (s, t) = (source.config, target.config);
    if (s.image_size, s.patch_size, s.embed_dim, s.heads, s.depth)
        != (t.image_size, t.patch_size, t.embed_dim, t.heads, t.depth)
    {
        return Err(Error::Config(format!(
            "source and target architectures differ: {s:?} vs {t:?}"
        )));
    }
    if t.num_classes != train.num_classes {
        return Err(Error::Config(format!(
            "target head has {} classes, dataset {}",
            t.num_classes, train.num_classes
        )));
    }
    let inputs = TrainInputs {
        train,
        test,
        source: Some(source),
    };
    run_training(target, &inputs, config)
}

/// Supervised training of a fresh model on upstream data.
pub fn pretrain_source(
    upstream: &Dataset,
    eval_set: Option<&Dataset>,
    vit: ViTConfig,
    config: &TrainConfig,
) -> Result<(ViTModel, RunReport)> {
    if vit.num_classes != upstream.num_classes {
        return Err(Error::Config(format!(
            "model has {} classes, upstream data {}",
            vit.num_classes, upstream.num_classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x494e_4954);
    let model = ViTModel::init(vit, &mut rng)?;
    let cfg = TrainConfig {
        guidance: GuidanceSpec::plain(),
        ..config.clone()
    };
    let inputs = TrainInputs {
        train: upstream,
        test: eval_set,
        source: None,
    };
    run_training(model, &inputs, &cfg)
}

/// The shared training loop.
pub fn run_training(mut model: ViTModel, inputs: &TrainInputs<'_>, config: &TrainConfig) -> Result<(ViTModel, RunReport)> {
    config.validate()?;
    let train = inputs.train;
    if train.is_empty() {
        return Err(Error::EmptyDataset("training set is empty".into()));
    }
    let spec = config.guidance;
    let needs_source = spec.active();
    if needs_source && inputs.source.is_none() {
        return Err(Error::Config(format!("method `{}` needs a source model", spec.method.name())));
    }
    let source_trace = spec.active() && spec.method.needs_trace();
    let init = (spec.active() && spec.method == GuidanceMethod::L2sp)
        .then_some(inputs.source)
        .flatten();
    let trainable = apply_freeze_policy(spec.freeze, &model);
    let mut state = AdamState::new(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = RunReport::default();
    let vit = model.config;
    let c = vit.num_classes;

    for step in 0..config.iterations {
        let lr = cosine_lr(step, config.iterations, config.lr);
        let idx: Vec<usize> = (0..config.batch_size).map(|_| rng.gen_range(0..train.len())).collect();
        let mut images: Vec<Tensor> = idx
            .iter()
            .map(|&i| {
                let img = &train.samples[i].image;
                if config.augment {
                    augment::basic_augment(img, &mut rng)
                } else {
                    img.clone()
                }
            })
            .collect();
        let labels: Vec<usize> = idx.iter().map(|&i| train.samples[i].label).collect();

        let mut mix = None;
        if let Some(tm) = config.transmix {
            if rng.gen::<f64>() < tm.probability {
                let perm: Vec<usize> = {
                    let mut p: Vec<usize> = (0..images.len()).collect();
                    rand::seq::SliceRandom::shuffle(p.as_mut_slice(), &mut rng);
                    p
                };
                let cut = sample_cut_box(&mut rng, vit.image_size, vit.image_size, tm.area);
                let mixed = (0..images.len())
                    .map(|i| mix_images(&images[i], &images[perm[i]], &cut))
                    .collect::<Result<Vec<_>>>()?;
                images = mixed;
                mix = Some((perm, box_patch_mask(&cut, &vit)));
            }
        }
        let refs: Vec<&Tensor> = images.iter().collect();

        let src_frozen = if source_trace {
            let tape = Tape::new();
            let src = inputs.source.expect("checked above");
            let (_, tr) = forward_batch(&refs, &src.bind(&tape, false), true)?;
            Some(tr.expect("capture requested").freeze())
        } else {
            None
        };

        let tape = Tape::new();
        let bound = model.bind(&tape, true);
        let capture = source_trace || mix.is_some();
        let (logits, trace) = forward_batch(&refs, &bound, capture)?;
        let mut target = vec![0.0; labels.len() * c];
        for (i, &l) in labels.iter().enumerate() {
            let row = &mut target[i * c..(i + 1) * c];
            match &mix {
                Some((perm, patch_mask)) => {
                    let tr = trace.as_ref().expect("captured for mixing");
                    let last = tr.logits.last().expect("depth ≥ 1");
                    let heads: Vec<std::rc::Rc<Tensor>> = last.iter().map(|h| h[i].value()).collect();
                    let refs: Vec<&Tensor> = heads.iter().map(|h| h.as_ref()).collect();
                    let attn = cls_patch_attention(&refs)?;
                    let coefficient = augment::transmix_coefficient(&attn, patch_mask)?;
                    let ml = MixedLabel {
                        label_a: l,
                        label_b: labels[perm[i]],
                        coefficient,
                    };
                    row.copy_from_slice(&ml.target(c));
                }
                None => row[l] = 1.0,
            }
        }
        let ce = logits.soft_cross_entropy(&Tensor::new([labels.len(), c], target)?)?;
        let guidance_inputs = GuidanceInputs {
            src_trace: src_frozen.as_ref(),
            tgt_trace: trace.as_ref(),
            params: &bound,
            model: &model,
            init,
        };
        let (loss, parts) = total_loss(ce, &spec, &guidance_inputs)?;
        check_finite(step, &parts)?;
        let grads = loss.backward()?;
        let g: Vec<Tensor> = bound.vars.iter().map(|v| grads.wrt(v)).collect();
        drop(guidance_inputs);
        drop(trace);
        drop(bound);
        if g.iter().any(|t| !t.is_finite()) {
            return Err(Error::NumericalAbort {
                step,
                msg: format!("non-finite gradient (ce {}, reg {}, total {})", parts.ce, parts.reg, parts.total),
            });
        }
        adamw_step(model.params_mut(), &g, &mut state, &config.adam(lr), &trainable)?;
        if !model.all_finite() {
            return Err(Error::NumericalAbort {
                step,
                msg: "parameters became non-finite after the update".into(),
            });
        }
        report.steps.push(StepRecord {
            step,
            lr,
            ce: parts.ce,
            reg: parts.reg,
            total: parts.total,
        });

        let last = step + 1 == config.iterations;
        let due = config.eval_interval > 0 && (step + 1) % config.eval_interval == 0;
        if let Some(test) = inputs.test {
            if last || due {
                report.evals.push(EvalPoint {
                    step: step + 1,
                    train_acc: Some(eval::accuracy(&model, train)?),
                    test: eval::evaluate(&model, inputs.source, test, &config.eval)?,
                });
            }
        }
    }
    let tail = &report.steps[report.steps.len().saturating_sub(10)..];
    report.summary = Some(RunSummary {
        steps: config.iterations,
        final_test_acc: report.last_eval().map(|e| e.test.accuracy),
        final_jaccard: report.last_eval().and_then(|e| e.test.jaccard),
        final_logit_distance: report.last_eval().and_then(|e| e.test.logit_distance),
        mean_ce_last_10: tail.iter().map(|s| s.ce).sum::<f64>() / tail.len() as f64,
    });
    Ok((model, report))
}

fn check_finite(step: usize, parts: &LossBreakdown) -> Result<()> {
    if parts.ce.is_finite() && parts.reg.is_finite() && parts.total.is_finite() {
        return Ok(());
    }
    Err(Error::NumericalAbort {
        step,
        msg: format!(
            "non-finite loss (ce {}, reg {}, λ {}, total {})",
            parts.ce, parts.reg, parts.lambda, parts.total
        ),
    })
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GTAC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the data section, in values.
    pub offset: usize,
}

/// Where a ChaCha8 stream stood when the checkpoint was taken.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::CorruptCheckpoint("malformed RNG state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ViTConfig,
    tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    optimizer_step: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rng: Option<RngState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train_config: Option<TrainConfig>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ViTModel,
    pub optimizer: Option<AdamState>,
    pub rng: Option<RngState>,
    pub train_config: Option<TrainConfig>,
}

impl Checkpoint {
    pub fn of_model(model: ViTModel) -> Self {
        Checkpoint {
            model,
            optimizer: None,
            rng: None,
            train_config: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tables: Vec<(String, &Tensor)> =
            self.model.params().iter().map(|p| (p.name.clone(), &p.value)).collect();
        if let Some(opt) = &self.optimizer {
            for (p, (m, v)) in self.model.params().iter().zip(opt.m.iter().zip(&opt.v)) {
                tables.push((format!("adam.m.{}", p.name), m));
                tables.push((format!("adam.v.{}", p.name), v));
            }
        }
        let mut offset = 0;
        let tensors = tables
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.len();
                e
            })
            .collect();
        let header = Header {
            config: self.model.config,
            tensors,
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            rng: self.rng.clone(),
            train_config: self.train_config.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * offset);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &tables {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: String| Error::CorruptCheckpoint(m);
        if bytes.len() < 16 {
            return Err(corrupt(format!("{} bytes is shorter than the preamble", bytes.len())));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16usize.checked_add(hlen).ok_or_else(|| corrupt("header length overflow".into()))?)
            .ok_or_else(|| corrupt("truncated header".into()))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| corrupt(format!("unreadable header: {e}")))?;
        let data = &bytes[16 + hlen..];
        let mut expect = 0usize;
        for e in &header.tensors {
            if e.offset != expect || e.shape.iter().any(|&d| d == 0) {
                return Err(corrupt(format!("inconsistent table entry `{}`", e.name)));
            }
            expect += e.shape.iter().product::<usize>();
        }
        if data.len() != 8 * expect {
            return Err(corrupt(format!(
                "data section holds {} bytes, table needs {}",
                data.len(),
                8 * expect
            )));
        }
        header.config.validate()?;
        let read = |e: &TensorEntry| {
            let n: usize = e.shape.iter().product();
            let vals = data[8 * e.offset..8 * (e.offset + n)]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Tensor::new(e.shape.clone(), vals)
        };
        let n_params = header.config.param_specs().len();
        if header.tensors.len() < n_params {
            return Err(corrupt("tensor table is missing parameters".into()));
        }
        let params = header.tensors[..n_params]
            .iter()
            .map(|e| Ok((e.name.clone(), read(e)?)))
            .collect::<Result<Vec<_>>>()?;
        let model = ViTModel::from_tensors(header.config, params).map_err(|e| corrupt(e.to_string()))?;
        let optimizer = match header.optimizer_step {
            None => None,
            Some(step) => {
                let rest = &header.tensors[n_params..];
                if rest.len() != 2 * n_params {
                    return Err(corrupt("optimizer state incomplete".into()));
                }
                let mut m = Vec::with_capacity(n_params);
                let mut v = Vec::with_capacity(n_params);
                for pair in rest.chunks(2) {
                    m.push(read(&pair[0])?);
                    v.push(read(&pair[1])?);
                }
                Some(AdamState { step, m, v })
            }
        };
        Ok(Checkpoint {
            model,
            optimizer,
            rng: header.rng,
            train_config: header.train_config,
        })
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = checkpoint.to_bytes()?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

/// Loads a model and checks it against an expected architecture before
/// handing anything back. The class count is not compared when
/// `ignore_classes` is set.
pub fn load_model(path: &Path, expected: Option<&ViTConfig>, ignore_classes: bool) -> Result<ViTModel> {
    let ck = load_checkpoint(path)?;
    if let Some(want) = expected {
        let got = ck.model.config;
        let same = if ignore_classes {
            ViTConfig {
                num_classes: want.num_classes,
                ..got
            } == *want
        } else {
            got == *want
        };
        if !same {
            return Err(Error::Config(format!(
                "checkpoint {} holds {got:?}, expected {want:?}",
                path.display()
            )));
        }
    }
    Ok(ck.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, Split, SyntheticSpec};
    use crate::guidance::FreezePolicy;
    use crate::vit::ParamKind;

    fn micro(c: usize) -> ViTConfig {
        ViTConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 8,
            heads: 2,
            depth: 2,
            num_classes: c,
        }
    }

    fn toy(n: usize) -> Dataset {
        let spec = SyntheticSpec {
            classes: 2,
            per_class: n,
            image_size: 8,
            correlation: 0.9,
            textures: 2,
            noise: 0.02,
        };
        generate_synthetic_dataset(&spec, 3, Split::Train).unwrap()
    }

    fn quick(method: GuidanceMethod, lambda: f64) -> TrainConfig {
        TrainConfig {
            iterations: 2,
            batch_size: 4,
            guidance: GuidanceSpec::new(method, lambda, FreezePolicy::None).unwrap(),
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 100, 0.1), 0.1);
        assert!(cosine_lr(100, 100, 0.1).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 0.1) - 0.05).abs() < 1e-15);
    }

    fn scalar_param(v: f64) -> Param {
        Param {
            name: "w".into(),
            kind: ParamKind::Ffn,
            value: Tensor::new([1, 1], vec![v]).unwrap(),
        }
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut p = vec![scalar_param(1.0)];
        let mut st = AdamState::new(&p);
        let h = AdamHyper {
            lr: 0.1,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.0,
        };
        adamw_step(&mut p, &[Tensor::new([1, 1], vec![1.0]).unwrap()], &mut st, &h, &[true]).unwrap();
        let want = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
        assert!((p[0].value.item() - want).abs() < 1e-15);
        assert!((p[0].value.item() - 0.9).abs() < 1e-7);
    }

    #[test]
    fn adam_zero_grad_and_frozen() {
        let mut p = vec![scalar_param(0.7), scalar_param(0.3)];
        let mut st = AdamState::new(&p);
        let h = AdamHyper {
            lr: 0.1,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let g = [Tensor::zeros([1, 1]), Tensor::full([1, 1], 5.0)];
        adamw_step(&mut p, &g, &mut st, &h, &[true, false]).unwrap();
        assert_eq!(p[0].value.item(), 0.7);
        assert_eq!(p[1].value.item(), 0.3);
        // decoupled decay applies before the adaptive step
        let h = AdamHyper { weight_decay: 0.5, ..h };
        adamw_step(&mut p, &g, &mut st, &h, &[true, false]).unwrap();
        assert!((p[0].value.item() - 0.7 * (1.0 - 0.05)).abs() < 1e-15);
        assert!(adamw_step(&mut p, &g[..1], &mut st, &h, &[true, false]).is_err());
    }

    #[test]
    fn two_step_smoke_run() {
        let d = toy(2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let src = ViTModel::init(micro(2), &mut rng).unwrap();
        let tgt = init_target(&src, 2, 1).unwrap();
        let (_, rep) = finetune(&src, tgt, &d, Some(&d), &quick(GuidanceMethod::Gta, 1.0)).unwrap();
        assert_eq!(rep.steps.len(), 2);
        assert!(rep.steps.iter().all(|s| s.total.is_finite()));
        assert_eq!(rep.evals.len(), 1);
        let parsed = RunReport::parse(&rep.to_jsonl()).unwrap();
        assert_eq!(parsed, rep);
    }

    #[test]
    fn report_floats_round_trip_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let steps = (1..=200)
            .map(|step| {
                let ce = rng.gen::<f64>() * 3.0;
                let reg = rng.gen::<f64>() * 900.0;
                StepRecord { step, lr: cosine_lr(step, 200, 3e-4), ce, reg, total: ce + 7.3 * reg }
            })
            .collect();
        let rep = RunReport { steps, ..RunReport::default() };
        assert_eq!(RunReport::parse(&rep.to_jsonl()).unwrap(), rep);
    }

    #[test]
    fn zero_lambda_matches_plain() {
        let d = toy(3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let src = ViTModel::init(micro(2), &mut rng).unwrap();
        let run = |m, l| {
            let tgt = init_target(&src, 2, 4).unwrap();
            finetune(&src, tgt, &d, Some(&d), &quick(m, l)).unwrap().1.to_jsonl()
        };
        assert_eq!(run(GuidanceMethod::Gta, 0.0), run(GuidanceMethod::None, 0.0));
    }

    #[test]
    fn identical_models_start_with_zero_guide() {
        let d = toy(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let src = ViTModel::init(micro(2), &mut rng).unwrap();
        let tgt = init_target(&src, 2, 5).unwrap();
        let cfg = TrainConfig {
            iterations: 1,
            ..quick(GuidanceMethod::Gta, 10.0)
        };
        let (_, rep) = finetune(&src, tgt, &d, None, &cfg).unwrap();
        assert!(rep.steps[0].reg < 1e-20);
    }

    #[test]
    fn frozen_tensors_never_move() {
        let d = toy(2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let src = ViTModel::init(micro(2), &mut rng).unwrap();
        let tgt = init_target(&src, 2, 6).unwrap();
        let mut cfg = quick(GuidanceMethod::None, 0.0);
        cfg.guidance.freeze = FreezePolicy::FfnOnly;
        cfg.iterations = 3;
        let (out, _) = finetune(&src, tgt.clone(), &d, None, &cfg).unwrap();
        let mask = apply_freeze_policy(FreezePolicy::FfnOnly, &tgt);
        for ((a, b), m) in tgt.params().iter().zip(out.params()).zip(mask) {
            if !m {
                assert_eq!(a.value, b.value, "{}", a.name);
            } else {
                assert_ne!(a.value, b.value, "{}", a.name);
            }
        }
    }

    #[test]
    fn transmix_run_is_finite() {
        let d = toy(3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let src = ViTModel::init(micro(2), &mut rng).unwrap();
        let tgt = init_target(&src, 2, 7).unwrap();
        let cfg = TrainConfig {
            transmix: Some(TransMixConfig {
                probability: 1.0,
                area: 0.3,
            }),
            iterations: 3,
            ..quick(GuidanceMethod::Gta, 1.0)
        };
        let (_, rep) = finetune(&src, tgt, &d, None, &cfg).unwrap();
        assert!(rep.steps.iter().all(|s| s.total.is_finite()));
    }

    #[test]
    fn mismatched_architectures_rejected() {
        let d = toy(2);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let src = ViTModel::init(micro(2), &mut rng).unwrap();
        let other = ViTModel::init(
            ViTConfig {
                depth: 1,
                ..micro(2)
            },
            &mut rng,
        )
        .unwrap();
        assert!(matches!(
            finetune(&src, other, &d, None, &quick(GuidanceMethod::None, 0.0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = ViTModel::init(micro(3), &mut rng).unwrap();
        let mut opt = AdamState::new(model.params());
        opt.step = 7;
        opt.m[0].data_mut()[0] = 0.125;
        let ck = Checkpoint {
            optimizer: Some(opt),
            rng: Some(RngState::capture(&rng)),
            train_config: Some(TrainConfig::default()),
            ..Checkpoint::of_model(model)
        };
        let a = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&a).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), a);
        let mut r = back.rng.unwrap().restore().unwrap();
        assert_eq!(r.gen::<u64>(), rng.gen::<u64>());
    }

    #[test]
    fn truncated_and_bad_checkpoints_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = ViTModel::init(micro(2), &mut rng).unwrap();
        let bytes = Checkpoint::of_model(model).to_bytes().unwrap();
        let cut = &bytes[..bytes.len() - 8];
        assert!(matches!(Checkpoint::from_bytes(cut), Err(Error::CorruptCheckpoint(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::CorruptCheckpoint(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..10]), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn load_checks_architecture() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.gtac");
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        save_checkpoint(&Checkpoint::of_model(ViTModel::init(micro(2), &mut rng).unwrap()), &path).unwrap();
        assert!(load_model(&path, Some(&micro(2)), false).is_ok());
        assert!(matches!(load_model(&path, Some(&micro(3)), false), Err(Error::Config(_))));
        assert!(load_model(&path, Some(&micro(3)), true).is_ok());
        let deeper = ViTConfig { depth: 3, ..micro(2) };
        assert!(matches!(load_model(&path, Some(&deeper), true), Err(Error::Config(_))));
    }
}
