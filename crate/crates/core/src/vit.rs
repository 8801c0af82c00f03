//! A miniature pre-norm Vision Transformer whose forward pass exposes the
//! pre-softmax attention logits of every head in every block.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{concat_cols, concat_rows, Tape, Tensor, Var};

/// Image channels; the lab works with RGB only.
pub const CHANNELS: usize = 3;
/// Hidden width of the feed-forward sublayer relative to `embed_dim`.
pub const FFN_RATIO: usize = 4;
pub const LN_EPS: f64 = 1e-6;
/// Standard deviation of the truncated-normal initializer.
pub const INIT_STD: f64 = 0.02;

/// Shape hyperparameters of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub num_classes: usize,
}

impl ViTConfig {
    /// 16×16 images, P=4, D=32, h=4, M=4.
    pub fn tiny(num_classes: usize) -> Self {
        ViTConfig {
            image_size: 16,
            patch_size: 4,
            embed_dim: 32,
            heads: 4,
            depth: 4,
            num_classes,
        }
    }

    /// 32×32 images, P=4, D=64, h=4, M=6.
    pub fn small(num_classes: usize) -> Self {
        ViTConfig {
            image_size: 32,
            patch_size: 4,
            embed_dim: 64,
            heads: 4,
            depth: 6,
            num_classes,
        }
    }

    pub fn by_name(name: &str, num_classes: usize) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny(num_classes)),
            "small" => Ok(Self::small(num_classes)),
            other => Err(Error::Config(format!(
                "unknown config size `{other}` (expected tiny or small)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.image_size == 0
            || self.patch_size == 0
            || self.embed_dim == 0
            || self.heads == 0
            || self.depth == 0
        {
            return fail(format!("all extents must be positive: {self:?}"));
        }
        if self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image size {} is not a multiple of patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.embed_dim % self.heads != 0 {
            return fail(format!(
                "embed dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            ));
        }
        if self.num_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.num_classes));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Number of patch tokens, `N = HW / P²`.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Sequence length including the `[cls]` token.
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn patch_dim(&self) -> usize {
        CHANNELS * self.patch_size * self.patch_size
    }

    pub fn hidden_dim(&self) -> usize {
        FFN_RATIO * self.embed_dim
    }

    /// Canonical parameter names and shapes, in registry order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>, ParamKind)> {
        let d = self.embed_dim;
        let k = self.head_dim();
        let hid = self.hidden_dim();
        let mut v = vec![
            ("patch.weight".into(), vec![self.patch_dim(), d], ParamKind::Embedding),
            ("patch.bias".into(), vec![d], ParamKind::Embedding),
            ("cls".into(), vec![1, d], ParamKind::Embedding),
            ("pos".into(), vec![self.tokens(), d], ParamKind::Embedding),
        ];
        for m in 0..self.depth {
            let p = format!("blocks.{m}");
            v.push((format!("{p}.ln1.gamma"), vec![d], ParamKind::LayerNorm));
            v.push((format!("{p}.ln1.beta"), vec![d], ParamKind::LayerNorm));
            for which in ["q", "k", "v"] {
                for l in 0..self.heads {
                    v.push((format!("{p}.attn.{which}.{l}"), vec![d, k], ParamKind::Attention));
                }
            }
            v.push((format!("{p}.attn.proj.weight"), vec![d, d], ParamKind::Attention));
            v.push((format!("{p}.attn.proj.bias"), vec![d], ParamKind::Attention));
            v.push((format!("{p}.ln2.gamma"), vec![d], ParamKind::LayerNorm));
            v.push((format!("{p}.ln2.beta"), vec![d], ParamKind::LayerNorm));
            v.push((format!("{p}.ffn.fc1.weight"), vec![d, hid], ParamKind::Ffn));
            v.push((format!("{p}.ffn.fc1.bias"), vec![hid], ParamKind::Ffn));
            v.push((format!("{p}.ffn.fc2.weight"), vec![hid, d], ParamKind::Ffn));
            v.push((format!("{p}.ffn.fc2.bias"), vec![d], ParamKind::Ffn));
        }
        v.push(("norm.gamma".into(), vec![d], ParamKind::LayerNorm));
        v.push(("norm.beta".into(), vec![d], ParamKind::LayerNorm));
        v.push(("head.weight".into(), vec![d, self.num_classes], ParamKind::Head));
        v.push(("head.bias".into(), vec![self.num_classes], ParamKind::Head));
        v
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.param_specs()
            .iter()
            .map(|(_, s, _)| s.iter().product::<usize>())
            .sum()
    }
}

/// Which part of the network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamKind {
    /// Patch projection, `[cls]` token and positional embeddings.
    Embedding,
    LayerNorm,
    /// Per-head query/key/value weights and the output projection.
    Attention,
    Ffn,
    /// Classifier head; has no pre-trained counterpart.
    Head,
}

/// One named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

impl Param {
    /// Whether decoupled weight decay applies: weight matrices only, never
    /// biases, layer norms, the `[cls]` token or positional embeddings.
    pub fn decays(&self) -> bool {
        self.kind != ParamKind::LayerNorm
            && self.value.shape().len() == 2
            && self.name != "cls"
            && self.name != "pos"
    }
}

/// All learnable parameters of a model plus its config.
#[derive(Clone, Debug, PartialEq)]
pub struct ViTModel {
    pub config: ViTConfig,
    params: Vec<Param>,
}

fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..n)
        .map(|_| loop {
            let z: f64 = normal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect()
}

impl ViTModel {
    /// Fresh model: truncated-normal (σ = 0.02) weights and positional
    /// embeddings, zero biases and `[cls]`, unit layer-norm gains.
    pub fn init<R: Rng + ?Sized>(config: ViTConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = config
            .param_specs()
            .into_iter()
            .map(|(name, shape, kind)| {
                let n: usize = shape.iter().product();
                let data = if name.ends_with(".gamma") {
                    vec![1.0; n]
                } else if name == "cls" || name.ends_with("bias") || name.ends_with(".beta") {
                    vec![0.0; n]
                } else {
                    truncated_normal(rng, n, INIT_STD)
                };
                Param {
                    name,
                    kind,
                    value: Tensor::new(shape, data).expect("spec shape"),
                }
            })
            .collect();
        Ok(ViTModel { config, params })
    }

    /// Rebuilds a model from named tensors, checking them against the
    /// registry of `config`. Nothing is kept on failure.
    pub fn from_tensors(config: ViTConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        if specs.len() != tensors.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                tensors.len()
            )));
        }
        let mut params = Vec::with_capacity(specs.len());
        for ((name, shape, kind), (tname, t)) in specs.into_iter().zip(tensors) {
            if name != tname || shape != t.shape() {
                return Err(Error::Config(format!(
                    "parameter `{tname}` {:?} does not match expected `{name}` {shape:?}",
                    t.shape()
                )));
            }
            params.push(Param {
                name,
                kind,
                value: t,
            });
        }
        Ok(ViTModel { config, params })
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    /// Re-draws the classifier head (weights σ = 0.02, zero bias), e.g. when
    /// a pre-trained model becomes the starting point of a new task.
    pub fn reinit_head<R: Rng + ?Sized>(&mut self, num_classes: usize, rng: &mut R) -> Result<()> {
        let mut cfg = self.config;
        cfg.num_classes = num_classes;
        cfg.validate()?;
        let d = cfg.embed_dim;
        self.config = cfg;
        for p in self.params.iter_mut() {
            if p.name == "head.weight" {
                p.value = Tensor::new([d, num_classes], truncated_normal(rng, d * num_classes, INIT_STD))?;
            } else if p.name == "head.bias" {
                p.value = Tensor::zeros([num_classes]);
            }
        }
        Ok(())
    }

    /// Places every parameter on `tape`, as trainable leaves or as constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundModel<'t> {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        BoundModel {
            config: self.config,
            vars,
        }
    }
}

/// Per-block weight handles.
pub struct BlockVars<'t> {
    pub ln1: (Var<'t>, Var<'t>),
    pub wq: Vec<Var<'t>>,
    pub wk: Vec<Var<'t>>,
    pub wv: Vec<Var<'t>>,
    pub proj: (Var<'t>, Var<'t>),
    pub ln2: (Var<'t>, Var<'t>),
    pub fc1: (Var<'t>, Var<'t>),
    pub fc2: (Var<'t>, Var<'t>),
}

/// A model's parameters living on a tape, in registry order.
pub struct BoundModel<'t> {
    pub config: ViTConfig,
    pub vars: Vec<Var<'t>>,
}

const EMBED_PARAMS: usize = 4;

impl<'t> BoundModel<'t> {
    fn per_block(&self) -> usize {
        3 * self.config.heads + 10
    }

    pub fn block(&self, m: usize) -> BlockVars<'t> {
        let h = self.config.heads;
        let base = EMBED_PARAMS + m * self.per_block();
        let v = &self.vars[base..base + self.per_block()];
        BlockVars {
            ln1: (v[0], v[1]),
            wq: v[2..2 + h].to_vec(),
            wk: v[2 + h..2 + 2 * h].to_vec(),
            wv: v[2 + 2 * h..2 + 3 * h].to_vec(),
            proj: (v[2 + 3 * h], v[3 + 3 * h]),
            ln2: (v[4 + 3 * h], v[5 + 3 * h]),
            fc1: (v[6 + 3 * h], v[7 + 3 * h]),
            fc2: (v[8 + 3 * h], v[9 + 3 * h]),
        }
    }

    fn tail(&self) -> &[Var<'t>] {
        &self.vars[EMBED_PARAMS + self.config.depth * self.per_block()..]
    }

    pub fn patch_weight(&self) -> (Var<'t>, Var<'t>) {
        (self.vars[0], self.vars[1])
    }

    pub fn cls_token(&self) -> Var<'t> {
        self.vars[2]
    }

    pub fn pos_embed(&self) -> Var<'t> {
        self.vars[3]
    }

    pub fn final_norm(&self) -> (Var<'t>, Var<'t>) {
        let t = self.tail();
        (t[0], t[1])
    }

    pub fn head(&self) -> (Var<'t>, Var<'t>) {
        let t = self.tail();
        (t[2], t[3])
    }
}

/// Logits, MSA outputs and block outputs captured during one forward pass.
///
/// `logits[m][l][b]` is the `(N+1)×(N+1)` logit matrix of head `l` in block
/// `m` for sample `b`. `msa_out[m]` and `block_out[m]` stack all samples'
/// `(N+1)×D` features row-wise.
pub struct AttentionTrace<'t> {
    pub pass_id: u64,
    pub batch: usize,
    pub logits: Vec<Vec<Vec<Var<'t>>>>,
    pub msa_out: Vec<Var<'t>>,
    pub block_out: Vec<Var<'t>>,
}

/// A trace detached from its tape: plain values, no gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenTrace {
    pub pass_id: u64,
    pub batch: usize,
    pub logits: Vec<Vec<Vec<Tensor>>>,
    pub msa_out: Vec<Tensor>,
    pub block_out: Vec<Tensor>,
}

impl<'t> AttentionTrace<'t> {
    pub fn freeze(&self) -> FrozenTrace {
        FrozenTrace {
            pass_id: self.pass_id,
            batch: self.batch,
            logits: self
                .logits
                .iter()
                .map(|heads| {
                    heads
                        .iter()
                        .map(|s| s.iter().map(|v| (*v.value()).clone()).collect())
                        .collect()
                })
                .collect(),
            msa_out: self.msa_out.iter().map(|v| (*v.value()).clone()).collect(),
            block_out: self.block_out.iter().map(|v| (*v.value()).clone()).collect(),
        }
    }
}

impl FrozenTrace {
    pub fn depth(&self) -> usize {
        self.logits.len()
    }

    pub fn heads(&self) -> usize {
        self.logits.first().map_or(0, |h| h.len())
    }
}

static PASS_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Flattens each `P×P×3` patch of a `3×H×W` image into one row, patches in
/// row-major grid order, channel-major within a patch.
pub fn extract_patches(image: &Tensor, config: &ViTConfig) -> Result<Tensor> {
    let s = config.image_size;
    if image.shape() != [CHANNELS, s, s] {
        return Err(Error::Config(format!(
            "image shape {:?} does not match config {}×{}×{}",
            image.shape(),
            CHANNELS,
            s,
            s
        )));
    }
    let p = config.patch_size;
    let g = config.grid();
    let px = image.data();
    let mut out = Vec::with_capacity(config.num_patches() * config.patch_dim());
    for gy in 0..g {
        for gx in 0..g {
            for c in 0..CHANNELS {
                for dy in 0..p {
                    let row = c * s * s + (gy * p + dy) * s + gx * p;
                    out.extend_from_slice(&px[row..row + p]);
                }
            }
        }
    }
    Tensor::new([config.num_patches(), config.patch_dim()], out)
}

/// Token sequences for a batch, `[cls]` first, positional embeddings added.
/// Output stacks the `B` sequences row-wise: `B(N+1) × D`.
pub fn patch_embed_batch<'t>(images: &[&Tensor], model: &BoundModel<'t>) -> Result<Var<'t>> {
    let cfg = model.config;
    let tape = model.cls_token().tape();
    if images.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let n = cfg.num_patches();
    let mut rows = Vec::with_capacity(images.len() * n * cfg.patch_dim());
    for img in images {
        rows.extend(extract_patches(img, &cfg)?.into_data());
    }
    let patches = tape.constant(Tensor::new([images.len() * n, cfg.patch_dim()], rows)?);
    let (w, b) = model.patch_weight();
    let tokens = patches.matmul(w)?.add_bias(b)?;
    // Row 0 is [cls]; rows 1.. are patch tokens of all samples.
    let with_cls = concat_rows(&[model.cls_token(), tokens])?;
    let t = cfg.tokens();
    let mut order = Vec::with_capacity(images.len() * t);
    let mut pos_order = Vec::with_capacity(images.len() * t);
    for s in 0..images.len() {
        order.push(0);
        order.extend((0..n).map(|i| 1 + s * n + i));
        pos_order.extend(0..t);
    }
    let seq = with_cls.gather_rows(&order)?;
    let pos = if images.len() == 1 {
        model.pos_embed()
    } else {
        model.pos_embed().gather_rows(&pos_order)?
    };
    seq.add(pos)
}

/// Single-image form of [`patch_embed_batch`]: `(N+1) × D`.
pub fn patch_embed<'t>(image: &Tensor, model: &BoundModel<'t>) -> Result<Var<'t>> {
    patch_embed_batch(&[image], model)
}

/// Scaled dot-product attention on given `q`, `k`, `v`.
///
/// Returns the pre-softmax logits `A = q kᵀ / √k` and `softmax_rows(A) · v`.
pub fn attend<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let head_dim = q.shape()[1];
    let logits = q.matmul_nt(k, 1.0 / (head_dim as f64).sqrt())?;
    let out = logits.softmax_rows()?.matmul(v)?;
    Ok((logits, out))
}

/// One attention head over a single sequence `z`.
pub fn attention_head<'t>(
    z: Var<'t>,
    wq: Var<'t>,
    wk: Var<'t>,
    wv: Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    attend(z.matmul(wq)?, z.matmul(wk)?, z.matmul(wv)?)
}

/// Multi-head self-attention over `batch` stacked sequences.
///
/// Returns the projected output (same shape as `z`) and the logits as
/// `[head][sample]`.
#[allow(clippy::type_complexity)]
pub fn msa<'t>(
    z: Var<'t>,
    block: &BlockVars<'t>,
    batch: usize,
) -> Result<(Var<'t>, Vec<Vec<Var<'t>>>)> {
    let heads = block.wq.len();
    let shape = z.shape();
    if shape.len() != 2 || shape[0] % batch != 0 {
        return Err(Error::shape("msa", &shape, &[batch]));
    }
    let t = shape[0] / batch;
    let k = block.wq[0].shape()[1];
    let mut w = Vec::with_capacity(3 * heads);
    w.extend_from_slice(&block.wq);
    w.extend_from_slice(&block.wk);
    w.extend_from_slice(&block.wv);
    let qkv = z.matmul(concat_cols(&w)?)?;
    let mut logits = vec![Vec::with_capacity(batch); heads];
    let mut per_sample = Vec::with_capacity(batch);
    for b in 0..batch {
        let rows = b * t..(b + 1) * t;
        let mut outs = Vec::with_capacity(heads);
        for (l, head_logits) in logits.iter_mut().enumerate() {
            let q = qkv.slice(rows.clone(), l * k..(l + 1) * k)?;
            let kk = qkv.slice(rows.clone(), (heads + l) * k..(heads + l + 1) * k)?;
            let v = qkv.slice(rows.clone(), (2 * heads + l) * k..(2 * heads + l + 1) * k)?;
            let (a, o) = attend(q, kk, v)?;
            head_logits.push(a);
            outs.push(o);
        }
        per_sample.push(if heads == 1 { outs[0] } else { concat_cols(&outs)? });
    }
    let cat = if batch == 1 {
        per_sample[0]
    } else {
        concat_rows(&per_sample)?
    };
    let out = cat.matmul(block.proj.0)?.add_bias(block.proj.1)?;
    Ok((out, logits))
}

/// Output of one transformer block.
pub struct BlockOutput<'t> {
    pub out: Var<'t>,
    pub msa_out: Var<'t>,
    pub logits: Vec<Vec<Var<'t>>>,
}

/// Pre-norm block: `z + MSA(LN(z))`, then `+ FFN(LN(·))`.
pub fn transformer_block<'t>(
    z: Var<'t>,
    block: &BlockVars<'t>,
    batch: usize,
) -> Result<BlockOutput<'t>> {
    let h = z.layer_norm(block.ln1.0, block.ln1.1, LN_EPS)?;
    let (msa_out, logits) = msa(h, block, batch)?;
    let z1 = z.add(msa_out)?;
    let h2 = z1.layer_norm(block.ln2.0, block.ln2.1, LN_EPS)?;
    let f = h2
        .matmul(block.fc1.0)?
        .add_bias(block.fc1.1)?
        .gelu()?
        .matmul(block.fc2.0)?
        .add_bias(block.fc2.1)?;
    Ok(BlockOutput {
        out: z1.add(f)?,
        msa_out,
        logits,
    })
}

/// Class logits (`B × C`) for a batch and, when `capture`, the trace.
pub fn forward_batch<'t>(
    images: &[&Tensor],
    model: &BoundModel<'t>,
    capture: bool,
) -> Result<(Var<'t>, Option<AttentionTrace<'t>>)> {
    let cfg = model.config;
    let batch = images.len();
    let mut z = patch_embed_batch(images, model)?;
    let mut trace = capture.then(|| AttentionTrace {
        pass_id: PASS_COUNTER.fetch_add(1, Ordering::Relaxed),
        batch,
        logits: Vec::with_capacity(cfg.depth),
        msa_out: Vec::with_capacity(cfg.depth),
        block_out: Vec::with_capacity(cfg.depth),
    });
    for m in 0..cfg.depth {
        let out = transformer_block(z, &model.block(m), batch)?;
        z = out.out;
        if let Some(tr) = trace.as_mut() {
            tr.logits.push(out.logits);
            tr.msa_out.push(out.msa_out);
            tr.block_out.push(z);
        }
    }
    let t = cfg.tokens();
    let cls_rows: Vec<usize> = (0..batch).map(|b| b * t).collect();
    let (g, bt) = model.final_norm();
    let cls = z.gather_rows(&cls_rows)?.layer_norm(g, bt, LN_EPS)?;
    let (w, b) = model.head();
    let logits = cls.matmul(w)?.add_bias(b)?;
    Ok((logits, trace))
}

/// Single-image forward: class logits of shape `1 × C`.
pub fn forward<'t>(
    image: &Tensor,
    model: &BoundModel<'t>,
    capture: bool,
) -> Result<(Var<'t>, Option<AttentionTrace<'t>>)> {
    forward_batch(&[image], model, capture)
}

/// Row 0 of a logit matrix without its first element: how the `[cls]`
/// query scores each of the `N` patch keys.
pub fn cls_attention_row<'t>(logits: Var<'t>) -> Result<Var<'t>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != shape[1] || shape[0] < 2 {
        return Err(Error::Contract(format!(
            "cls_attention_row needs a square matrix with side ≥ 2, got {shape:?}"
        )));
    }
    logits.slice(0..1, 1..shape[1])?.reshape([shape[1] - 1])
}

/// Plain-value counterpart of [`cls_attention_row`].
pub fn cls_row_values(logits: &Tensor) -> Result<&[f64]> {
    match logits.shape() {
        [r, c] if r == c && *r >= 2 => Ok(&logits.row(0)[1..]),
        s => Err(Error::Contract(format!(
            "cls_attention_row needs a square matrix with side ≥ 2, got {s:?}"
        ))),
    }
}
