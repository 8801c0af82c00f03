//! The `gta` command line: data generation, pre-training, fine-tuning,
//! evaluation, method comparison and attention overlays.
//!
//! Every run is described by a [`Manifest`] (TOML, one section per
//! concern). Values come from the defaults, then a `--manifest` file, then
//! flags; the resolved manifest is written next to the outputs and
//! re-running it reproduces the run.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{self, generate_synthetic_dataset, load_image_dir, subset_per_class, Dataset, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::{self, attention_map, emit_overlay, infer, EvalOptions, MapMode};
use crate::guidance::{FreezePolicy, GuidanceMethod, GuidanceSpec};
use crate::train::{
    finetune, init_target, load_model, pretrain_source, save_checkpoint, Checkpoint, RunReport, TrainConfig,
    TransMixConfig,
};
use crate::vit::{ViTConfig, ViTModel};

pub const BUILD_ID: &str = match option_env!("GTA_BUILD_ID") {
    Some(id) => id,
    None => concat!("gta-core ", env!("CARGO_PKG_VERSION")),
};

/// Sampling rates compared by default.
pub const DEFAULT_RATES: [f64; 4] = [0.15, 0.3, 0.5, 1.0];
/// The fixed grid used with `--lambda-grid paper`.
pub const PAPER_LAMBDAS: [f64; 4] = [0.1, 1.0, 10.0, 100.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub config_size: String,
    pub out: String,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            config_size: "small".into(),
            out: "gta-out".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Directory with `upstream/`, `train/` and `test/` splits; synthetic
    /// data is generated in memory when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
    pub seed: u64,
    pub classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub upstream_per_class: usize,
    pub correlation: f64,
    pub textures: usize,
    pub noise: f64,
    /// Share of each class kept for fine-tuning.
    pub rate: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        DataSection {
            dir: None,
            seed: 0,
            classes: s.classes,
            per_class: s.per_class,
            test_per_class: 25,
            upstream_per_class: 100,
            correlation: s.correlation,
            textures: s.textures,
            noise: s.noise,
            rate: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub augment: bool,
    pub eval_interval: usize,
    pub transmix: bool,
    pub transmix_probability: f64,
    pub transmix_area: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        let tm = TransMixConfig::default();
        TrainSection {
            iterations: t.iterations,
            batch_size: t.batch_size,
            lr: t.lr,
            weight_decay: t.weight_decay,
            beta1: t.betas.0,
            beta2: t.betas.1,
            eps: t.eps,
            augment: t.augment,
            eval_interval: t.eval_interval,
            transmix: false,
            transmix_probability: tm.probability,
            transmix_area: tm.area,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceSection {
    pub method: String,
    pub lambda: f64,
    pub freeze: String,
    /// Source checkpoint for fine-tuning.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        GuidanceSection {
            method: "none".into(),
            lambda: 0.0,
            freeze: "none".into(),
            source: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub mass_fraction: f64,
    pub map_mode: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            mass_fraction: eval::DEFAULT_MASS_FRACTION,
            map_mode: MapMode::FinalBlock.name().into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSection {
    /// Method names, plus `attention-only` / `ffn-only` for plain
    /// fine-tuning under a freeze policy.
    pub methods: Vec<String>,
    pub rates: Vec<f64>,
    pub seeds: Vec<u64>,
    /// `default` (0.1×α, α, 10×α around each method's α) or `paper`.
    pub lambda_grid: String,
    pub parallel: usize,
}

impl Default for CompareSection {
    fn default() -> Self {
        CompareSection {
            methods: vec!["none".into(), "gta".into()],
            rates: DEFAULT_RATES.to_vec(),
            seeds: vec![0, 1, 2],
            lambda_grid: "default".into(),
            parallel: 1,
        }
    }
}

/// Everything that determines a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Manifest {
    pub run: RunSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub guidance: GuidanceSection,
    pub eval: EvalSection,
    pub compare: CompareSection,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("manifest: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Manifest::parse(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn vit(&self) -> Result<ViTConfig> {
        ViTConfig::by_name(&self.run.config_size, self.data.classes)
    }

    pub fn synthetic(&self, per_class: usize, correlation: f64) -> Result<SyntheticSpec> {
        let spec = SyntheticSpec {
            classes: self.data.classes,
            per_class,
            image_size: self.vit()?.image_size,
            correlation,
            textures: self.data.textures,
            noise: self.data.noise,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn guidance_spec(&self) -> Result<GuidanceSpec> {
        GuidanceSpec::new(
            GuidanceMethod::parse(&self.guidance.method)?,
            self.guidance.lambda,
            FreezePolicy::parse(&self.guidance.freeze)?,
        )
    }

    pub fn eval_options(&self) -> Result<EvalOptions> {
        Ok(EvalOptions {
            mass_fraction: self.eval.mass_fraction,
            mode: MapMode::parse(&self.eval.map_mode)?,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let cfg = TrainConfig {
            iterations: t.iterations,
            batch_size: t.batch_size,
            lr: t.lr,
            weight_decay: t.weight_decay,
            betas: (t.beta1, t.beta2),
            eps: t.eps,
            guidance: self.guidance_spec()?,
            transmix: t.transmix.then_some(TransMixConfig {
                probability: t.transmix_probability,
                area: t.transmix_area,
            }),
            augment: t.augment,
            seed: self.run.seed,
            eval_interval: t.eval_interval,
            eval: self.eval_options()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.run.out)
    }

    /// Loads or generates one split.
    pub fn dataset(&self, split: SplitArg) -> Result<Dataset> {
        let d = &self.data;
        if let Some(dir) = &d.dir {
            let sub = match split {
                SplitArg::Upstream | SplitArg::UpstreamTest => "upstream",
                SplitArg::Train => "train",
                SplitArg::Test => "test",
            };
            let classes = if matches!(split, SplitArg::Upstream | SplitArg::UpstreamTest) {
                d.classes.min(8)
            } else {
                d.classes
            };
            return load_image_dir(&Path::new(dir).join(sub), classes);
        }
        match split {
            SplitArg::Upstream => generate_synthetic_dataset(
                &self.upstream_spec()?,
                d.seed,
                Split::UpstreamTrain,
            ),
            SplitArg::UpstreamTest => generate_synthetic_dataset(
                &SyntheticSpec {
                    per_class: d.test_per_class,
                    ..self.upstream_spec()?
                },
                d.seed.wrapping_add(1),
                Split::UpstreamTrain,
            ),
            SplitArg::Train => generate_synthetic_dataset(&self.synthetic(d.per_class, d.correlation)?, d.seed, Split::Train),
            SplitArg::Test => generate_synthetic_dataset(&self.synthetic(d.test_per_class, 0.0)?, d.seed, Split::Test),
        }
    }

    fn upstream_spec(&self) -> Result<SyntheticSpec> {
        Ok(SyntheticSpec {
            classes: self.data.classes.min(8),
            textures: self.data.textures.max(self.data.classes.min(8)),
            ..self.synthetic(self.data.upstream_per_class, 0.0)?
        })
    }

    /// Writes the resolved manifest and run identity into `dir`.
    pub fn persist(&self, dir: &Path, command: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("manifest.toml"), self.to_toml())?;
        let id = serde_json::json!({
            "build": BUILD_ID,
            "command": command,
            "seed": self.run.seed,
        });
        fs::write(dir.join("run.json"), format!("{id}\n"))?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitArg {
    Upstream,
    UpstreamTest,
    Train,
    Test,
}

#[derive(Parser, Debug)]
#[command(name = "gta", version, about = "Attention-guided ViT transfer-learning lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct CommonFlags {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// TOML manifest; flags override its values.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_parser = ["tiny", "small"])]
    pub config_size: Option<String>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct DataFlags {
    /// Directory written by `gen-data` (instead of in-memory generation).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub test_per_class: Option<usize>,
    #[arg(long)]
    pub upstream_per_class: Option<usize>,
    #[arg(long)]
    pub correlation: Option<f64>,
    #[arg(long)]
    pub textures: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long)]
    pub eval_interval: Option<usize>,
    /// Mix batches and weight labels by the model's own attention.
    #[arg(long)]
    pub transmix: bool,
    #[arg(long)]
    pub transmix_probability: Option<f64>,
    #[arg(long)]
    pub transmix_area: Option<f64>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct GuideFlags {
    /// none | gta | msa-guide | block-guide | l2sp
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// none | attention-only | ffn-only
    #[arg(long)]
    pub freeze: Option<String>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct EvalFlags {
    #[arg(long)]
    pub mass_fraction: Option<f64>,
    /// final-block | all-blocks-max
    #[arg(long)]
    pub map_mode: Option<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write upstream/train/test splits to disk.
    GenData {
        #[command(flatten)]
        common: CommonFlags,
        #[command(flatten)]
        data: DataFlags,
    },
    /// Train a source model on the upstream split.
    Pretrain {
        #[command(flatten)]
        common: CommonFlags,
        #[command(flatten)]
        data: DataFlags,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Fine-tune a source checkpoint on the downstream split.
    Finetune {
        #[command(flatten)]
        common: CommonFlags,
        #[command(flatten)]
        data: DataFlags,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        guide: GuideFlags,
        #[command(flatten)]
        eval: EvalFlags,
        #[arg(long)]
        source: Option<PathBuf>,
        /// Share of each class kept.
        #[arg(long)]
        rate: Option<f64>,
    },
    /// Score a checkpoint; prints one JSON line.
    Eval {
        #[command(flatten)]
        common: CommonFlags,
        #[command(flatten)]
        data: DataFlags,
        #[command(flatten)]
        eval: EvalFlags,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Source checkpoint for attention-drift statistics.
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Ignore ground-truth masks.
        #[arg(long)]
        no_masks: bool,
    },
    /// Methods × sampling rates × seeds, with a λ sweep per cell.
    Compare {
        #[command(flatten)]
        common: CommonFlags,
        #[command(flatten)]
        data: DataFlags,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        eval: EvalFlags,
        #[arg(long)]
        source: Option<PathBuf>,
        /// Comma-separated method names.
        #[arg(long)]
        methods: Option<String>,
        #[arg(long)]
        rates: Option<String>,
        #[arg(long)]
        seeds: Option<String>,
        /// default | paper
        #[arg(long)]
        lambda_grid: Option<String>,
        #[arg(long)]
        parallel: Option<usize>,
    },
    /// Attention overlays for up to three checkpoints.
    Visualize {
        #[command(flatten)]
        common: CommonFlags,
        #[command(flatten)]
        data: DataFlags,
        #[command(flatten)]
        eval: EvalFlags,
        /// Repeat for each model, e.g. source, fine-tuned, guided.
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        /// Comma-separated names used in file names.
        #[arg(long)]
        names: Option<String>,
        /// Comma-separated test-set indices.
        #[arg(long, default_value = "0,1,2,3")]
        samples: String,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn base_manifest(common: &CommonFlags) -> Result<Manifest> {
    let mut m = match &common.manifest {
        Some(p) => Manifest::load(p)?,
        None => Manifest::default(),
    };
    set(&mut m.run.seed, common.seed);
    set(&mut m.run.out, common.out.as_ref().map(|p| p.display().to_string()));
    set(&mut m.run.config_size, common.config_size.clone());
    Ok(m)
}

fn apply_data(m: &mut Manifest, f: &DataFlags) {
    if let Some(d) = &f.data {
        m.data.dir = Some(d.display().to_string());
    }
    set(&mut m.data.seed, f.data_seed);
    set(&mut m.data.classes, f.classes);
    set(&mut m.data.per_class, f.per_class);
    set(&mut m.data.test_per_class, f.test_per_class);
    set(&mut m.data.upstream_per_class, f.upstream_per_class);
    set(&mut m.data.correlation, f.correlation);
    set(&mut m.data.textures, f.textures);
    set(&mut m.data.noise, f.noise);
}

fn apply_train(m: &mut Manifest, f: &TrainFlags) {
    let t = &mut m.train;
    set(&mut t.iterations, f.iterations);
    set(&mut t.batch_size, f.batch_size);
    set(&mut t.lr, f.lr);
    set(&mut t.weight_decay, f.weight_decay);
    set(&mut t.beta1, f.beta1);
    set(&mut t.beta2, f.beta2);
    set(&mut t.eval_interval, f.eval_interval);
    set(&mut t.transmix_probability, f.transmix_probability);
    set(&mut t.transmix_area, f.transmix_area);
    if f.no_augment {
        t.augment = false;
    }
    if f.transmix {
        t.transmix = true;
    }
}

fn apply_guide(m: &mut Manifest, f: &GuideFlags) {
    set(&mut m.guidance.method, f.method.clone());
    set(&mut m.guidance.lambda, f.lambda);
    set(&mut m.guidance.freeze, f.freeze.clone());
}

fn apply_eval(m: &mut Manifest, f: &EvalFlags) {
    set(&mut m.eval.mass_fraction, f.mass_fraction);
    set(&mut m.eval.map_mode, f.map_mode.clone());
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|x| x.trim())
        .filter(|x| !x.is_empty())
        .map(|x| x.parse().map_err(|_| Error::Usage(format!("bad {what} `{x}`"))))
        .collect()
}

/// Parses arguments, runs, and maps the outcome to a process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("gta: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenData { common, data } => {
            let mut m = base_manifest(&common)?;
            apply_data(&mut m, &data);
            cmd_gen_data(&m)
        }
        Command::Pretrain { common, data, train } => {
            let mut m = base_manifest(&common)?;
            apply_data(&mut m, &data);
            apply_train(&mut m, &train);
            cmd_pretrain(&m)
        }
        Command::Finetune {
            common,
            data,
            train,
            guide,
            eval,
            source,
            rate,
        } => {
            let mut m = base_manifest(&common)?;
            apply_data(&mut m, &data);
            apply_train(&mut m, &train);
            apply_guide(&mut m, &guide);
            apply_eval(&mut m, &eval);
            if let Some(s) = source {
                m.guidance.source = Some(s.display().to_string());
            }
            set(&mut m.data.rate, rate);
            cmd_finetune(&m)
        }
        Command::Eval {
            common,
            data,
            eval,
            checkpoint,
            source,
            split,
            no_masks,
        } => {
            let mut m = base_manifest(&common)?;
            apply_data(&mut m, &data);
            apply_eval(&mut m, &eval);
            let line = cmd_eval(&m, &checkpoint, source.as_deref(), split, no_masks)?;
            println!("{line}");
            Ok(())
        }
        Command::Compare {
            common,
            data,
            train,
            eval,
            source,
            methods,
            rates,
            seeds,
            lambda_grid,
            parallel,
        } => {
            let mut m = base_manifest(&common)?;
            apply_data(&mut m, &data);
            apply_train(&mut m, &train);
            apply_eval(&mut m, &eval);
            if let Some(s) = source {
                m.guidance.source = Some(s.display().to_string());
            }
            if let Some(s) = methods {
                m.compare.methods = parse_list(&s, "method")?;
            }
            if let Some(s) = rates {
                m.compare.rates = parse_list(&s, "rate")?;
            }
            if let Some(s) = seeds {
                m.compare.seeds = parse_list(&s, "seed")?;
            }
            set(&mut m.compare.lambda_grid, lambda_grid);
            set(&mut m.compare.parallel, parallel);
            let failed = cmd_compare(&m)?;
            if failed > 0 {
                return Err(Error::Contract(format!("{failed} comparison cell(s) failed")));
            }
            Ok(())
        }
        Command::Visualize {
            common,
            data,
            eval,
            checkpoints,
            names,
            samples,
            split,
        } => {
            let mut m = base_manifest(&common)?;
            apply_data(&mut m, &data);
            apply_eval(&mut m, &eval);
            let names = names.map(|n| parse_list::<String>(&n, "name")).transpose()?;
            let samples = parse_list(&samples, "sample index")?;
            cmd_visualize(&m, &checkpoints, names, &samples, split).map(|_| ())
        }
    }
}

pub fn cmd_gen_data(m: &Manifest) -> Result<()> {
    let out = m.out_dir();
    m.persist(&out, "gen-data")?;
    let synthetic = Manifest {
        data: DataSection {
            dir: None,
            ..m.data.clone()
        },
        ..m.clone()
    };
    for (name, split) in [
        ("upstream", SplitArg::Upstream),
        ("train", SplitArg::Train),
        ("test", SplitArg::Test),
    ] {
        let d = synthetic.dataset(split)?;
        data::export_dataset(&d, &out.join(name))?;
        println!("{name}: {} samples", d.len());
    }
    Ok(())
}

pub fn cmd_pretrain(m: &Manifest) -> Result<()> {
    let out = m.out_dir();
    let upstream = m.dataset(SplitArg::Upstream)?;
    let held_out = match m.data.dir {
        Some(_) => None,
        None => Some(m.dataset(SplitArg::UpstreamTest)?),
    };
    let vit = ViTConfig {
        num_classes: upstream.num_classes,
        ..m.vit()?
    };
    let cfg = TrainConfig {
        guidance: GuidanceSpec::plain(),
        ..m.train_config()?
    };
    m.persist(&out, "pretrain")?;
    let (model, report) = pretrain_source(&upstream, held_out.as_ref().or(Some(&upstream)), vit, &cfg)?;
    save_run(&out, model, &report, "source.gtac", &cfg)?;
    if let Some(acc) = report.summary.as_ref().and_then(|s| s.final_test_acc) {
        println!("upstream accuracy {acc:.4}");
    }
    Ok(())
}

fn save_run(out: &Path, model: ViTModel, report: &RunReport, name: &str, cfg: &TrainConfig) -> Result<()> {
    report.write(&out.join("report.jsonl"))?;
    let ck = Checkpoint {
        train_config: Some(cfg.clone()),
        ..Checkpoint::of_model(model)
    };
    save_checkpoint(&ck, &out.join(name))
}

fn source_path(m: &Manifest) -> Result<PathBuf> {
    m.guidance
        .source
        .as_ref()
        .map(PathBuf::from)
        .ok_or_else(|| Error::Usage("--source <checkpoint> is required".into()))
}

fn load_source(m: &Manifest) -> Result<ViTModel> {
    let path = source_path(m)?;
    if !path.exists() {
        return Err(Error::Usage(format!("--source {} does not exist", path.display())));
    }
    load_model(&path, Some(&m.vit()?), true)
}

/// One fine-tuning run: returns the trained model and its report.
pub fn run_finetune(m: &Manifest, source: &ViTModel, train: &Dataset, test: &Dataset) -> Result<(ViTModel, RunReport)> {
    let cfg = m.train_config()?;
    let subset = subset_per_class(train, m.data.rate, m.run.seed)?;
    let target = init_target(source, train.num_classes, m.run.seed)?;
    finetune(source, target, &subset, Some(test), &cfg)
}

pub fn cmd_finetune(m: &Manifest) -> Result<()> {
    let source = load_source(m)?;
    let out = m.out_dir();
    let train = m.dataset(SplitArg::Train)?;
    let test = m.dataset(SplitArg::Test)?;
    m.persist(&out, "finetune")?;
    let (model, report) = run_finetune(m, &source, &train, &test)?;
    save_run(&out, model, &report, "target.gtac", &m.train_config()?)?;
    if let Some(e) = report.last_eval() {
        println!("test accuracy {:.4}", e.test.accuracy);
    }
    Ok(())
}

pub fn cmd_eval(m: &Manifest, checkpoint: &Path, source: Option<&Path>, split: SplitArg, no_masks: bool) -> Result<String> {
    if !checkpoint.exists() {
        return Err(Error::Usage(format!("--checkpoint {} does not exist", checkpoint.display())));
    }
    let model = load_model(checkpoint, None, false)?;
    let src = source.map(|p| load_model(p, Some(&model.config), true)).transpose()?;
    let mut data = m.dataset(split)?;
    if no_masks {
        data.samples.iter_mut().for_each(|s| s.mask = None);
    }
    if data.num_classes != model.config.num_classes {
        return Err(Error::Config(format!(
            "checkpoint predicts {} classes, dataset has {}",
            model.config.num_classes, data.num_classes
        )));
    }
    let rec = eval::evaluate(&model, src.as_ref(), &data, &m.eval_options()?)?;
    let line = serde_json::to_string(&rec)?;
    if m.run.out != RunSection::default().out || m.out_dir().exists() {
        fs::create_dir_all(m.out_dir())?;
        fs::write(m.out_dir().join("eval.json"), format!("{line}\n"))?;
    }
    Ok(line)
}

/// Default λ around which a method's sweep is centred.
pub fn default_lambda(method: GuidanceMethod) -> f64 {
    match method {
        GuidanceMethod::None => 0.0,
        GuidanceMethod::Gta => 10.0,
        GuidanceMethod::MsaGuide | GuidanceMethod::BlockGuide => 1.0,
        GuidanceMethod::L2sp => 0.01,
    }
}

/// A comparison row label resolved to a method and freeze policy.
pub fn parse_row(name: &str) -> Result<(GuidanceMethod, FreezePolicy)> {
    match name {
        "attention-only" => Ok((GuidanceMethod::None, FreezePolicy::AttentionOnly)),
        "ffn-only" => Ok((GuidanceMethod::None, FreezePolicy::FfnOnly)),
        other => Ok((GuidanceMethod::parse(other)?, FreezePolicy::None)),
    }
}

pub fn lambda_grid(method: GuidanceMethod, grid: &str) -> Result<Vec<f64>> {
    if method == GuidanceMethod::None {
        return Ok(vec![0.0]);
    }
    match grid {
        "paper" => Ok(PAPER_LAMBDAS.to_vec()),
        "default" => {
            let a = default_lambda(method);
            Ok(vec![0.1 * a, a, 10.0 * a])
        }
        other => Err(Error::Usage(format!("unknown λ grid `{other}` (expected default or paper)"))),
    }
}

/// Outcome of one (method, rate, seed, λ) fine-tune.
#[derive(Clone, Debug, PartialEq)]
pub struct CellRun {
    pub row: String,
    pub rate: f64,
    pub seed: u64,
    pub lambda: f64,
    pub result: std::result::Result<RunReport, String>,
}

/// Aggregated comparison row at the best λ.
#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub method: String,
    pub rate: f64,
    pub mean_acc: Option<f64>,
    pub std_acc: Option<f64>,
    pub mean_jaccard: Option<f64>,
    pub best_lambda: Option<f64>,
    pub failed: usize,
}

fn cell_dir(out: &Path, row: &str, rate: f64, seed: u64) -> PathBuf {
    out.join(format!("{row}-r{rate}-s{seed}"))
}

/// Runs every cell, writes per-run reports and `compare.csv`; returns the
/// number of failed runs.
pub fn cmd_compare(m: &Manifest) -> Result<usize> {
    let source = load_source(m)?;
    let out = m.out_dir();
    let train = m.dataset(SplitArg::Train)?;
    let test = m.dataset(SplitArg::Test)?;
    m.persist(&out, "compare")?;
    let rows = compare_runs(m, &source, &train, &test)?;
    fs::write(out.join("compare.csv"), compare_csv(&rows))?;
    Ok(rows.iter().map(|r| r.failed).sum())
}

/// Compare without touching the output directory's top level; each run
/// directory still gets its manifest and report.
pub fn compare_runs(m: &Manifest, source: &ViTModel, train: &Dataset, test: &Dataset) -> Result<Vec<CompareRow>> {
    let mut jobs = Vec::new();
    for row in &m.compare.methods {
        let (method, freeze) = parse_row(row)?;
        for &rate in &m.compare.rates {
            for &seed in &m.compare.seeds {
                for lambda in lambda_grid(method, &m.compare.lambda_grid)? {
                    let mut cm = m.clone();
                    cm.run.seed = seed;
                    cm.data.rate = rate;
                    cm.guidance.method = method.name().into();
                    cm.guidance.freeze = freeze.name().into();
                    cm.guidance.lambda = lambda;
                    jobs.push((row.clone(), cm));
                }
            }
        }
    }
    let out = m.out_dir();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<CellRun>>> = Mutex::new(vec![None; jobs.len()]);
    let workers = m.compare.parallel.max(1).min(jobs.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((row, cm)) = jobs.get(i) else { break };
                let dir = cell_dir(&out, row, cm.data.rate, cm.run.seed);
                let run = || -> Result<RunReport> {
                    let mut cm = cm.clone();
                    cm.run.out = dir.display().to_string();
                    fs::create_dir_all(&dir)?;
                    let id = serde_json::json!({"build": BUILD_ID, "command": "compare", "seed": cm.run.seed});
                    fs::write(dir.join("run.json"), format!("{id}\n"))?;
                    fs::write(dir.join(format!("manifest-l{}.toml", cm.guidance.lambda)), cm.to_toml())?;
                    let (_, report) = run_finetune(&cm, source, train, test)?;
                    report.write(&dir.join(format!("report-l{}.jsonl", cm.guidance.lambda)))?;
                    Ok(report)
                };
                let cell = CellRun {
                    row: row.clone(),
                    rate: cm.data.rate,
                    seed: cm.run.seed,
                    lambda: cm.guidance.lambda,
                    result: run().map_err(|e| e.to_string()),
                };
                if let Err(e) = &cell.result {
                    eprintln!("gta: cell {} rate {} seed {} λ {} failed: {e}", cell.row, cell.rate, cell.seed, cell.lambda);
                }
                results.lock().expect("results lock")[i] = Some(cell);
            });
        }
    });
    let cells: Vec<CellRun> = results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|c| c.expect("every job ran"))
        .collect();
    Ok(aggregate(&m.compare.methods, &m.compare.rates, &cells))
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Picks, per (method, rate), the λ with the best mean final test accuracy.
pub fn aggregate(methods: &[String], rates: &[f64], cells: &[CellRun]) -> Vec<CompareRow> {
    let mut rows = Vec::new();
    for method in methods {
        for &rate in rates {
            let mine: Vec<&CellRun> = cells.iter().filter(|c| &c.row == method && c.rate == rate).collect();
            let failed = mine.iter().filter(|c| c.result.is_err()).count();
            let mut lambdas: Vec<f64> = mine.iter().map(|c| c.lambda).collect();
            lambdas.dedup();
            let mut best: Option<(f64, f64, f64, Option<f64>)> = None;
            for &l in &lambdas {
                let runs: Vec<&RunReport> = mine
                    .iter()
                    .filter(|c| c.lambda == l)
                    .filter_map(|c| c.result.as_ref().ok())
                    .collect();
                let accs: Vec<f64> = runs.iter().filter_map(|r| r.last_eval()).map(|e| e.test.accuracy).collect();
                if accs.is_empty() || accs.len() != mine.iter().filter(|c| c.lambda == l).count() {
                    continue;
                }
                let (mean, std) = mean_std(&accs);
                let jac: Vec<f64> = runs.iter().filter_map(|r| r.last_eval()?.test.jaccard).collect();
                let mj = (!jac.is_empty()).then(|| jac.iter().sum::<f64>() / jac.len() as f64);
                if best.map_or(true, |b| mean > b.1) {
                    best = Some((l, mean, std, mj));
                }
            }
            rows.push(CompareRow {
                method: method.clone(),
                rate,
                mean_acc: best.map(|b| b.1),
                std_acc: best.map(|b| b.2),
                mean_jaccard: best.and_then(|b| b.3),
                best_lambda: best.map(|b| b.0),
                failed,
            });
        }
    }
    rows
}

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut s = String::from("method,rate,mean_acc,std_acc,mean_jaccard,best_lambda\n");
    let f = |v: Option<f64>| v.map_or_else(|| "failed".to_string(), |x| format!("{x:.6}"));
    for r in rows {
        let jac = match (r.mean_acc, r.mean_jaccard) {
            (Some(_), Some(j)) => format!("{j:.6}"),
            (Some(_), None) => String::new(),
            (None, _) => "failed".into(),
        };
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.method,
            r.rate,
            f(r.mean_acc),
            f(r.std_acc),
            jac,
            r.best_lambda.map_or_else(|| "failed".to_string(), |l| l.to_string())
        );
    }
    s
}

/// Writes `{name}-sample{index}.ppm` for every (checkpoint, sample) pair
/// and returns the paths.
pub fn cmd_visualize(
    m: &Manifest,
    checkpoints: &[PathBuf],
    names: Option<Vec<String>>,
    samples: &[usize],
    split: SplitArg,
) -> Result<Vec<PathBuf>> {
    if checkpoints.is_empty() || checkpoints.len() > 3 {
        return Err(Error::Usage(format!(
            "--checkpoint must be given one to three times, got {}",
            checkpoints.len()
        )));
    }
    let default_names = ["pretrained", "finetuned", "guided"];
    let names: Vec<String> = match names {
        Some(n) if n.len() == checkpoints.len() => n,
        Some(n) => {
            return Err(Error::Usage(format!(
                "--names lists {} names for {} checkpoints",
                n.len(),
                checkpoints.len()
            )))
        }
        None => default_names[..checkpoints.len()].iter().map(|s| s.to_string()).collect(),
    };
    for p in checkpoints {
        if !p.exists() {
            return Err(Error::Usage(format!("--checkpoint {} does not exist", p.display())));
        }
    }
    let data = m.dataset(split)?;
    if let Some(&bad) = samples.iter().find(|&&i| i >= data.len()) {
        return Err(Error::Usage(format!("sample {bad} outside a dataset of {}", data.len())));
    }
    let mode = MapMode::parse(&m.eval.map_mode)?;
    let out = m.out_dir();
    m.persist(&out, "visualize")?;
    let mut written = Vec::new();
    for (path, name) in checkpoints.iter().zip(&names) {
        let model = load_model(path, None, false)?;
        let images: Vec<&crate::tensor::Tensor> = samples.iter().map(|&i| &data.samples[i].image).collect();
        let (_, trace) = infer(&model, &images)?;
        for (k, &i) in samples.iter().enumerate() {
            let map = attention_map(&trace, &model.config, k, mode)?;
            let p = out.join(format!("{name}-sample{i}.ppm"));
            emit_overlay(&data.samples[i].image, &map, &p)?;
            written.push(p);
        }
    }
    Ok(written)
}
