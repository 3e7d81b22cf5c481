//! The `mext` command line: training, threshold sweeps and reports.
//!
//! Every command writes its artifacts plus a `<command>.manifest.json` into
//! `--out`; artifacts point back to that manifest by file name and carry its
//! input hash where the format has room for it.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::data::{encode_rows, gen_synthetic, read_tsv, vocab_from_tsv, Dataset, SyntheticSpec, TaskSpec};
use crate::error::{bail, Error, Result};
use crate::gradcheck::{self, GradcheckConfig};
use crate::gradreg::append_conflict_log;
use crate::inference::{layerwise_csv, sweep_csv, EntropyUnit, ExitProfile, HistogramReport};
use crate::model::{ModelConfig, ParamStore};
use crate::train::{train_from, EpochRecord, Regime, RegimeConfig};

#[derive(Debug, Parser)]
#[command(name = "mext", version, about = "Train and evaluate multi-exit transformer classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one regime and write a checkpoint plus metrics.
    Train(TrainArgs),
    /// Early-exit metric and expected time over a threshold grid.
    Sweep(SweepArgs),
    /// Fixed-exit metric of every layer.
    Layerwise(EvalArgs),
    /// Exit-layer counts at one threshold.
    Histogram(HistogramArgs),
    /// Train all four regimes and tabulate their layerwise metrics.
    Compare(CompareArgs),
    /// Finite-difference check of the analytic gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `synthetic` or a GLUE task name.
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Args)]
pub struct SdArgs {
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// deebert, deebert_sd, sd_only or romebert.
    #[arg(long)]
    pub regime: Option<String>,
    /// Gradient regularization for the one-stage regimes.
    #[arg(long, value_enum)]
    pub gr: Option<Switch>,
    #[command(flatten)]
    pub sd: SdArgs,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Defaults to `<out>/checkpoint.mext`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    /// Comma-separated entropy thresholds.
    #[arg(long)]
    pub thresholds: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct HistogramArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    #[arg(long)]
    pub threshold: f64,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub sd: SdArgs,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write `gradcheck.json` here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    pub name: String,
    pub synthetic: SyntheticSpec,
    pub train_path: Option<PathBuf>,
    pub dev_path: Option<PathBuf>,
    pub max_len: usize,
    pub vocab_size: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            synthetic: SyntheticSpec::default(),
            train_path: None,
            dev_path: None,
            max_len: 128,
            vocab_size: 30_000,
        }
    }
}

/// Everything a command needs; one JSON file, every field optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: RegimeConfig,
    pub task: TaskConfig,
    pub thresholds: Vec<f64>,
    pub entropy_unit: EntropyUnit,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: RegimeConfig::default(),
            task: TaskConfig::default(),
            thresholds: (0..20).map(|i| i as f64 * 0.05).collect(),
            entropy_unit: EntropyUnit::Nats,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    fn resolve(common: &Common) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(t) = &common.task {
            cfg.task.name = t.clone();
        }
        if let Some(s) = common.seed {
            cfg.model.seed = s;
            cfg.train.seed = s;
            cfg.task.synthetic.seed = s;
        }
        Ok(cfg)
    }

    fn set_regime(&mut self, regime: Regime) {
        let stages = if regime.is_two_stage() { 2 } else { 1 };
        if self.train.epochs.len() != stages {
            let e = self.train.epochs.first().copied().unwrap_or(1);
            self.train.epochs = vec![e; stages];
        }
        self.train.regime = regime;
    }

    fn apply_sd(&mut self, sd: &SdArgs) {
        if let Some(g) = sd.gamma {
            self.train.sd.gamma = g;
        }
        if let Some(t) = sd.temperature {
            self.train.sd.temperature = t;
        }
    }

    fn apply_train_flags(&mut self, args: &TrainArgs) -> Result<()> {
        if let Some(name) = &args.regime {
            let Some(r) = Regime::parse(name) else {
                bail!(Config, "unknown regime {name:?}");
            };
            self.set_regime(r);
        }
        match (args.gr, self.train.regime) {
            (None, _) => {}
            (Some(_), r) if r.is_two_stage() => {
                bail!(Config, "--gr applies only to the one-stage regimes, not {}", r.name())
            }
            (Some(Switch::On), _) => self.set_regime(Regime::Romebert),
            (Some(Switch::Off), _) => self.set_regime(Regime::SdOnly),
        }
        self.apply_sd(&args.sd);
        Ok(())
    }
}

/// Train and dev sets of the configured task; `model` is adjusted to the
/// task's vocabulary, length and class count.
pub fn load_task(cfg: &mut RunConfig) -> Result<(Dataset, Dataset, Vec<PathBuf>)> {
    let task = &cfg.task;
    if task.name == "synthetic" {
        let (train, dev) = gen_synthetic(&task.synthetic)?;
        cfg.model.vocab = task.synthetic.vocab_size;
        cfg.model.max_len = task.synthetic.seq_len;
        cfg.model.classes = task.synthetic.classes();
        return Ok((train, dev, Vec::new()));
    }
    let Some(spec) = TaskSpec::glue(&task.name) else {
        bail!(Config, "unknown task {:?}", task.name);
    };
    let (Some(train_path), Some(dev_path)) = (&task.train_path, &task.dev_path) else {
        bail!(Config, "task {} needs task.train_path and task.dev_path", task.name);
    };
    let train_rows = read_tsv(train_path, &spec)?;
    let dev_rows = read_tsv(dev_path, &spec)?;
    let vocab = vocab_from_tsv(&train_rows, task.vocab_size);
    let train = encode_rows(&train_rows, &spec, &vocab, task.max_len);
    let dev = encode_rows(&dev_rows, &spec, &vocab, task.max_len);
    if train.is_empty() || dev.is_empty() {
        bail!(Data, "task {} has an empty split", task.name);
    }
    cfg.model.vocab = task.vocab_size;
    cfg.model.max_len = task.max_len;
    cfg.model.classes = spec.classes();
    Ok((train, dev, vec![train_path.clone(), dev_path.clone()]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: RunConfig,
    /// Hash over the config snapshot and every input file.
    pub input_hash: String,
    pub inputs: Vec<String>,
    /// Artifact name to git-style blob hash of its bytes.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn file_name(command: &str) -> String {
        format!("{command}.manifest.json")
    }
}

/// Git blob id: `sha256("blob <len>\0" ++ bytes)`.
fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Tree-style hash of named blobs, in the given order.
pub fn content_hash(parts: &[(String, Vec<u8>)]) -> String {
    let listing: String = parts
        .iter()
        .map(|(name, bytes)| format!("{} {}\n", blob_hash(bytes), name))
        .collect();
    blob_hash(listing.as_bytes())
}

struct Run {
    command: &'static str,
    out: PathBuf,
    manifest: RunManifest,
}

impl Run {
    fn start(command: &'static str, out: &Path, cfg: &RunConfig, inputs: &[PathBuf]) -> Result<Self> {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let mut parts = vec![(
            "config".to_string(),
            serde_json::to_vec(cfg).expect("config serializes"),
        )];
        for p in inputs {
            let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            parts.push((p.display().to_string(), bytes));
        }
        Ok(Self {
            command,
            out: out.to_path_buf(),
            manifest: RunManifest {
                command: command.to_string(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                seed: cfg.model.seed,
                config: cfg.clone(),
                input_hash: content_hash(&parts),
                inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
                outputs: BTreeMap::new(),
            },
        })
    }

    fn reference(&self) -> serde_json::Value {
        serde_json::json!({
            "manifest": RunManifest::file_name(self.command),
            "input_hash": self.manifest.input_hash,
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.manifest.outputs.insert(name.to_string(), String::new());
        self.out.join(name)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(name);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    fn finish(mut self) -> Result<()> {
        for (name, hash) in self.manifest.outputs.iter_mut() {
            let p = self.out.join(name);
            *hash = blob_hash(&std::fs::read(&p).map_err(|e| Error::io(&p, e))?);
        }
        let path = self.out.join(RunManifest::file_name(self.command));
        let mut bytes = serde_json::to_vec_pretty(&self.manifest).expect("manifest serializes");
        bytes.push(b'\n');
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    }
}

fn epoch_line(r: &EpochRecord) -> String {
    let acc: Vec<String> = r.per_layer_dev_acc.iter().map(|a| format!("{:.4}", a)).collect();
    format!(
        "epoch {} L_final={:.4} L_multi={:.4} L_kld={:.4} conflict_rate={:.3} dev=[{}]",
        r.epoch,
        r.l_final,
        r.l_multi,
        r.l_kld,
        r.conflict_rate,
        acc.join(", ")
    )
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::resolve(&args.common)?;
    cfg.apply_train_flags(args)?;
    let (train_set, dev_set, inputs) = load_task(&mut cfg)?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    let mut run = Run::start("train", &args.common.out, &cfg, &inputs)?;
    let store = ParamStore::<f32>::init(&cfg.model)?;
    let n_stages = cfg.train.epochs.len();
    let mut current = None;
    let mut stage_no = 0;
    let outcome = train_from(store, &cfg.train, &train_set, &dev_set, |r| {
        if current != Some(r.stage) {
            stage_no += 1;
            current = Some(r.stage);
            eprintln!("stage {stage_no}/{n_stages}: {}", r.stage.name());
        }
        eprintln!("{}", epoch_line(r));
    })?;

    let mut meta = run.reference();
    meta["regime"] = serde_json::json!(cfg.train.regime.name());
    let ckpt = checkpoint::to_bytes(&outcome.store, Some(&meta));
    run.write("checkpoint.mext", &ckpt)?;
    let mut jsonl = Vec::new();
    for r in &outcome.log {
        serde_json::to_writer(&mut jsonl, r).expect("record serializes");
        jsonl.push(b'\n');
    }
    run.write("metrics.jsonl", &jsonl)?;
    if !outcome.conflicts.is_empty() {
        let path = run.path("conflicts.jsonl");
        let _ = std::fs::remove_file(&path);
        append_conflict_log(&path, &outcome.conflicts)?;
    }
    run.finish()
}

fn load_for_eval(args: &EvalArgs) -> Result<(RunConfig, Dataset, ParamStore<f32>, Vec<PathBuf>)> {
    let mut cfg = RunConfig::resolve(&args.common)?;
    let (_, dev, mut inputs) = load_task(&mut cfg)?;
    cfg.model.validate()?;
    let ckpt = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| args.common.out.join("checkpoint.mext"));
    let store = checkpoint::load_matching::<f32>(&ckpt, &cfg.model)?;
    inputs.push(ckpt);
    Ok((cfg, dev, store, inputs))
}

fn parse_thresholds(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            let t = t.trim();
            match t.parse::<f64>() {
                Ok(v) if v.is_finite() && v >= 0.0 => Ok(v),
                _ => Err(Error::Config(format!("bad threshold {t:?}"))),
            }
        })
        .collect()
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let (mut cfg, dev, store, inputs) = load_for_eval(&args.eval)?;
    if let Some(t) = &args.thresholds {
        cfg.thresholds = parse_thresholds(t)?;
    }
    if cfg.thresholds.is_empty() {
        bail!(Config, "no thresholds given");
    }
    let mut run = Run::start("sweep", &args.eval.common.out, &cfg, &inputs)?;
    let profile = ExitProfile::compute(&store, &dev)?;
    let records: Vec<_> = cfg.thresholds.iter().map(|&s| profile.record(s, cfg.entropy_unit)).collect();
    run.write("sweep.csv", sweep_csv(&records, cfg.model.layers).as_bytes())?;
    run.finish()
}

fn cmd_layerwise(args: &EvalArgs) -> Result<()> {
    let (cfg, dev, store, inputs) = load_for_eval(args)?;
    let mut run = Run::start("layerwise", &args.common.out, &cfg, &inputs)?;
    let metrics = ExitProfile::compute(&store, &dev)?.fixed_layers();
    run.write("layerwise.csv", layerwise_csv(&metrics).as_bytes())?;
    run.finish()
}

fn cmd_histogram(args: &HistogramArgs) -> Result<()> {
    if !(args.threshold >= 0.0) || !args.threshold.is_finite() {
        bail!(Config, "threshold must be a non-negative number");
    }
    let (cfg, dev, store, inputs) = load_for_eval(&args.eval)?;
    let mut run = Run::start("histogram", &args.eval.common.out, &cfg, &inputs)?;
    let counts = ExitProfile::compute(&store, &dev)?.histogram(args.threshold, cfg.entropy_unit);
    let mut report = HistogramReport::new(args.threshold, counts);
    report.manifest = Some(RunManifest::file_name("histogram"));
    let mut value = serde_json::to_value(&report).expect("report serializes");
    value["input_hash"] = serde_json::json!(run.manifest.input_hash);
    let mut bytes = serde_json::to_vec_pretty(&value).expect("report serializes");
    bytes.push(b'\n');
    run.write("histogram.json", &bytes)?;
    run.finish()
}

fn cmd_compare(args: &CompareArgs) -> Result<()> {
    let mut cfg = RunConfig::resolve(&args.common)?;
    cfg.apply_sd(&args.sd);
    let (train_set, dev_set, inputs) = load_task(&mut cfg)?;
    cfg.model.validate()?;
    let mut run = Run::start("compare", &args.common.out, &cfg, &inputs)?;
    let k = cfg.model.layers;
    let mut csv = String::from("regime,conflict_rate");
    for i in 1..=k {
        csv.push_str(&format!(",layer_{i}"));
    }
    csv.push_str(",mean\n");
    for regime in Regime::ALL {
        let mut rc = cfg.clone();
        rc.set_regime(regime);
        rc.train.validate()?;
        eprintln!("regime {}", regime.name());
        let store = ParamStore::<f32>::init(&rc.model)?;
        let outcome = train_from(store, &rc.train, &train_set, &dev_set, |r| eprintln!("{}", epoch_line(r)))?;
        let metrics = ExitProfile::compute(&outcome.store, &dev_set)?.fixed_layers();
        let mean = metrics.iter().sum::<f64>() / metrics.len() as f64;
        csv.push_str(&format!("{},{:.6}", regime.name(), outcome.conflict_rate()));
        for m in &metrics {
            csv.push_str(&format!(",{m:.6}"));
        }
        csv.push_str(&format!(",{mean:.6}\n"));
    }
    run.write("compare.csv", csv.as_bytes())?;
    run.finish()
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let mut cfg = GradcheckConfig::default();
    if let Some(s) = args.seed {
        cfg.model.seed = s;
    }
    let report = gradcheck::run(&cfg)?;
    let mut stdout = std::io::stdout().lock();
    for c in &report.checks {
        let verdict = if c.max_rel_err < report.tolerance { "ok" } else { "FAIL" };
        let _ = writeln!(
            stdout,
            "{:8} max_rel_err={:.3e} over {} params (worst {}) {}",
            c.loss, c.max_rel_err, c.checked, c.worst_param, verdict
        );
    }
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let path = out.join("gradcheck.json");
        let bytes = serde_json::to_vec_pretty(&report).expect("report serializes");
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    if !report.passed() {
        bail!(Contract, "gradient check failed (tolerance {:e})", report.tolerance);
    }
    Ok(())
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("MEXT_THREADS") else {
        return Ok(());
    };
    let n: usize = match v.trim().parse() {
        Ok(n) if n > 0 => n,
        _ => bail!(Config, "MEXT_THREADS must be a positive integer, got {v:?}"),
    };
    // A second initialization in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    init_threads()?;
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Layerwise(a) => cmd_layerwise(a),
        Command::Histogram(a) => cmd_histogram(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
