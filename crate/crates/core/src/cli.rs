//! Command-line front end.
//!
//! Every command resolves its flags into an [`ExperimentConfig`], validates
//! it as a whole, writes it to `OUT/manifest_<command>.txt` and then runs.
//! `tvseg rerun MANIFEST` replays a manifest.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime
//! failure, 3 gradient check failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::activation::{DEFAULT_KAPPA, DEFAULT_LAMBDA, DEFAULT_TAU, DEFAULT_TEST_ITERATIONS};
use crate::data::{
    corrupt_training_subset, load_dataset, save_dataset, Dataset, DatasetConfig, MANIFEST_NAME,
};
use crate::error::{Error, Result};
use crate::experiment::{
    gradcheck_csv, gradcheck_suite, metrics_csv, parse_sweep, svg_chart, sweep, Model, Perturb,
    DEFAULT_SWEEP, GRADCHECK_NAMES,
};
use crate::metrics::MetricsRow;
use crate::net::{
    read_checkpoint, train, write_checkpoint, FinalActivation, NetSpec, Network, TrainConfig,
    DEFAULT_CLIP_NORM, DEFAULT_LEARNING_RATE, DEFAULT_MOMENTUM,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_GRADCHECK: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "tvseg",
    version,
    about = "TV-regularized softmax segmentation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset to --dataset.
    Generate(Flags),
    /// Train plain and/or regularized networks.
    Train(Flags),
    /// Evaluate trained networks over a noise grid.
    Sweep(Flags),
    /// Validate analytic gradients against finite differences.
    Gradcheck(Flags),
    /// Replay a manifest written by an earlier command.
    Rerun {
        manifest: PathBuf,
        /// Write outputs here instead of the manifest's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args, Default)]
struct Flags {
    /// Generate the dataset if it does not exist.
    #[arg(long)]
    generate: bool,
    #[arg(long, value_name = "DIR")]
    dataset: Option<PathBuf>,
    /// plain, regularized or both.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    /// Test-time dual iterations.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// none or paper.
    #[arg(long = "noise-train")]
    noise_train: Option<String>,
    #[arg(long)]
    sweep: Option<String>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Also write an SVG chart of mIoU against sigma.
    #[arg(long)]
    svg: bool,
    #[arg(long)]
    lr: Option<f64>,
    /// Step size for lambda; 0 keeps lambda fixed.
    #[arg(long = "lambda-rate")]
    lambda_rate: Option<f64>,
    /// Gradient-norm clip; 0 disables clipping.
    #[arg(long)]
    clip: Option<f64>,
    /// Comma-separated encoder widths, e.g. 16,32.
    #[arg(long)]
    widths: Option<String>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long = "train-count")]
    train_count: Option<usize>,
    #[arg(long = "test-count")]
    test_count: Option<usize>,
    /// Random instances per activation gradient check.
    #[arg(long)]
    instances: Option<usize>,
    /// Post-TV lambda for the plain model in sweeps.
    #[arg(long = "post-tv-lambda")]
    post_tv_lambda: Option<f64>,
    /// Test hook: scale one check's analytic gradient so it fails.
    #[arg(long, hide = true)]
    perturb: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    Generate,
    Train,
    Sweep,
    Gradcheck,
}

impl CommandKind {
    fn name(self) -> &'static str {
        match self {
            CommandKind::Generate => "generate",
            CommandKind::Train => "train",
            CommandKind::Sweep => "sweep",
            CommandKind::Gradcheck => "gradcheck",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "generate" => CommandKind::Generate,
            "train" => CommandKind::Train,
            "sweep" => CommandKind::Sweep,
            "gradcheck" => CommandKind::Gradcheck,
            _ => return None,
        })
    }
}

/// Fully resolved settings of one command.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub command: CommandKind,
    pub dataset: Option<PathBuf>,
    pub generate: bool,
    pub size: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub mode: String,
    pub lambda: f64,
    pub kappa: f64,
    pub tau: f64,
    pub iters: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lambda_rate: f64,
    pub clip: f64,
    pub widths: String,
    pub seed: u64,
    pub noise_train: String,
    pub sweep: String,
    pub post_tv_lambda: f64,
    pub svg: bool,
    pub instances: usize,
    pub perturb: String,
    pub out: PathBuf,
}

impl ExperimentConfig {
    fn resolve(command: CommandKind, f: Flags) -> Self {
        let d = DatasetConfig::default();
        ExperimentConfig {
            command,
            dataset: f.dataset,
            generate: f.generate,
            size: f.size.unwrap_or(d.size),
            train_count: f.train_count.unwrap_or(d.train),
            test_count: f.test_count.unwrap_or(d.test),
            mode: f.mode.unwrap_or_else(|| "both".into()),
            lambda: f.lambda.unwrap_or(DEFAULT_LAMBDA),
            kappa: f.kappa.unwrap_or(DEFAULT_KAPPA),
            tau: f.tau.unwrap_or(DEFAULT_TAU),
            iters: f.iters.unwrap_or(DEFAULT_TEST_ITERATIONS),
            epochs: f.epochs.unwrap_or(20),
            batch: f.batch.unwrap_or(4),
            lr: f.lr.unwrap_or(DEFAULT_LEARNING_RATE),
            lambda_rate: f.lambda_rate.unwrap_or(DEFAULT_LEARNING_RATE),
            clip: f.clip.unwrap_or(DEFAULT_CLIP_NORM),
            widths: f.widths.unwrap_or_else(|| "16,32".into()),
            seed: f.seed.unwrap_or(0),
            noise_train: f.noise_train.unwrap_or_else(|| "none".into()),
            sweep: f.sweep.unwrap_or_else(|| DEFAULT_SWEEP.into()),
            post_tv_lambda: f.post_tv_lambda.unwrap_or(DEFAULT_LAMBDA),
            svg: f.svg,
            instances: f.instances.unwrap_or(10),
            perturb: f.perturb.unwrap_or_default(),
            out: f.out.unwrap_or_else(|| PathBuf::from("out")),
        }
    }

    fn modes(&self) -> Vec<FinalActivation> {
        match self.mode.as_str() {
            "plain" => vec![FinalActivation::Plain],
            "regularized" => vec![FinalActivation::Regularized],
            _ => vec![FinalActivation::Plain, FinalActivation::Regularized],
        }
    }

    fn parsed_widths(&self) -> Result<Vec<usize>> {
        if self.widths.trim().is_empty() {
            return Ok(Vec::new());
        }
        self.widths
            .split(',')
            .map(|w| {
                w.trim()
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("bad width {w:?}")))
            })
            .collect()
    }

    pub fn net_spec(&self, activation: FinalActivation) -> Result<NetSpec> {
        let mut spec = NetSpec {
            widths: self.parsed_widths()?,
            activation,
            ..NetSpec::default()
        };
        spec.reg.lambda = self.lambda;
        spec.reg.kappa = self.kappa;
        spec.reg.tau = self.tau;
        spec.reg.iterations = self.iters;
        Ok(spec)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch,
            seed: self.seed,
            learning_rate: self.lr,
            momentum: DEFAULT_MOMENTUM,
            lambda_rate: self.lambda_rate,
            clip_norm: (self.clip > 0.0).then_some(self.clip),
        }
    }

    fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            train: self.train_count,
            test: self.test_count,
            size: self.size,
            seed: self.seed,
        }
    }

    /// Every violated constraint, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !["plain", "regularized", "both"].contains(&self.mode.as_str()) {
            v.push(format!(
                "--mode must be plain, regularized or both (got {:?})",
                self.mode
            ));
        }
        if !["none", "paper"].contains(&self.noise_train.as_str()) {
            v.push(format!(
                "--noise-train must be none or paper (got {:?})",
                self.noise_train
            ));
        }
        match self.net_spec(FinalActivation::Regularized) {
            Ok(spec) => v.extend(spec.violations()),
            Err(e) => v.push(e.to_string()),
        }
        if let Ok(w) = self.parsed_widths() {
            let f = 1usize << w.len();
            if !self.size.is_multiple_of(f) {
                v.push(format!(
                    "--size {} is not divisible by {f} for {} levels",
                    self.size,
                    w.len()
                ));
            }
        }
        v.extend(self.train_config().violations());
        if !(self.clip.is_finite() && self.clip >= 0.0) {
            v.push(format!("--clip must be >= 0 (got {})", self.clip));
        }
        if self.size < 32 || !self.size.is_multiple_of(4) {
            v.push(format!(
                "--size must be >= 32 and divisible by 4 (got {})",
                self.size
            ));
        }
        if self.train_count == 0 || self.test_count == 0 {
            v.push("--train-count and --test-count must be >= 1".into());
        }
        if let Err(e) = parse_sweep(&self.sweep) {
            v.push(format!("--sweep: {e}"));
        }
        if !(self.post_tv_lambda.is_finite() && self.post_tv_lambda >= 0.0) {
            v.push(format!(
                "--post-tv-lambda must be >= 0 (got {})",
                self.post_tv_lambda
            ));
        }
        if self.instances == 0 {
            v.push("--instances must be >= 1".into());
        }
        if !self.perturb.is_empty() && !GRADCHECK_NAMES.contains(&self.perturb.as_str()) {
            v.push(format!("--perturb names no check ({:?})", self.perturb));
        }
        let needs_data = matches!(
            self.command,
            CommandKind::Generate | CommandKind::Train | CommandKind::Sweep
        );
        if needs_data {
            match &self.dataset {
                None => v.push("--dataset is required".into()),
                Some(d)
                    if self.command != CommandKind::Generate
                        && !self.generate
                        && !d.join(MANIFEST_NAME).exists() =>
                {
                    v.push(format!(
                        "dataset {} not found (pass --generate to create it)",
                        d.display()
                    ))
                }
                _ => {}
            }
        }
        v
    }

    pub fn to_manifest(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k}={v}").unwrap();
        kv("command", self.command.name().into());
        kv(
            "dataset",
            self.dataset
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        kv("generate", self.generate.to_string());
        kv("size", self.size.to_string());
        kv("train_count", self.train_count.to_string());
        kv("test_count", self.test_count.to_string());
        kv("mode", self.mode.clone());
        kv("lambda", self.lambda.to_string());
        kv("kappa", self.kappa.to_string());
        kv("tau", self.tau.to_string());
        kv("iters", self.iters.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch", self.batch.to_string());
        kv("lr", self.lr.to_string());
        kv("lambda_rate", self.lambda_rate.to_string());
        kv("clip", self.clip.to_string());
        kv("widths", self.widths.clone());
        kv("seed", self.seed.to_string());
        kv("noise_train", self.noise_train.clone());
        kv("sweep", self.sweep.clone());
        kv("post_tv_lambda", self.post_tv_lambda.to_string());
        kv("svg", self.svg.to_string());
        kv("instances", self.instances.to_string());
        kv("perturb", self.perturb.clone());
        kv("out", self.out.display().to_string());
        s
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let m = crate::data::parse_key_values(text)?;
        let get = |k: &str| -> Result<&str> {
            m.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Manifest(format!("missing key {k}")))
        };
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Manifest(format!("bad value for {k}: {v:?}")))
        }
        let command = CommandKind::parse(get("command")?)
            .ok_or_else(|| Error::Manifest(format!("unknown command {:?}", m["command"])))?;
        let dataset = get("dataset")?;
        Ok(ExperimentConfig {
            command,
            dataset: (!dataset.is_empty()).then(|| PathBuf::from(dataset)),
            generate: num("generate", get("generate")?)?,
            size: num("size", get("size")?)?,
            train_count: num("train_count", get("train_count")?)?,
            test_count: num("test_count", get("test_count")?)?,
            mode: get("mode")?.to_string(),
            lambda: num("lambda", get("lambda")?)?,
            kappa: num("kappa", get("kappa")?)?,
            tau: num("tau", get("tau")?)?,
            iters: num("iters", get("iters")?)?,
            epochs: num("epochs", get("epochs")?)?,
            batch: num("batch", get("batch")?)?,
            lr: num("lr", get("lr")?)?,
            lambda_rate: num("lambda_rate", get("lambda_rate")?)?,
            clip: num("clip", get("clip")?)?,
            widths: get("widths")?.to_string(),
            seed: num("seed", get("seed")?)?,
            noise_train: get("noise_train")?.to_string(),
            sweep: get("sweep")?.to_string(),
            post_tv_lambda: num("post_tv_lambda", get("post_tv_lambda")?)?,
            svg: num("svg", get("svg")?)?,
            instances: num("instances", get("instances")?)?,
            perturb: get("perturb")?.to_string(),
            out: PathBuf::from(get("out")?),
        })
    }
}

fn model_name(a: FinalActivation) -> &'static str {
    match a {
        FinalActivation::Plain => "plain",
        FinalActivation::Regularized => "regularized",
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn obtain_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let dir = cfg.dataset.as_ref().expect("validated");
    if !dir.join(MANIFEST_NAME).exists() {
        if !cfg.generate {
            return Err(Error::InvalidConfig(format!(
                "dataset {} not found",
                dir.display()
            )));
        }
        save_dataset(&Dataset::generate(cfg.dataset_config())?, dir)?;
    }
    load_dataset(dir)
}

/// Runs one resolved command; returns the exit code.
pub fn execute(cfg: &ExperimentConfig) -> i32 {
    let violations = cfg.violations();
    if !violations.is_empty() {
        eprintln!(
            "error: invalid configuration ({} problems)",
            violations.len()
        );
        for v in &violations {
            eprintln!("  - {v}");
        }
        return EXIT_USAGE;
    }
    let result = ensure_dir(&cfg.out)
        .and_then(|_| {
            write_file(
                &cfg.out.join(format!("manifest_{}.txt", cfg.command.name())),
                cfg.to_manifest(),
            )
        })
        .and_then(|_| match cfg.command {
            CommandKind::Generate => run_generate(cfg).map(|_| EXIT_OK),
            CommandKind::Train => run_train(cfg).map(|_| EXIT_OK),
            CommandKind::Sweep => run_sweep(cfg),
            CommandKind::Gradcheck => run_gradcheck(cfg),
        });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidConfig(_) => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            }
        }
    }
}

fn run_generate(cfg: &ExperimentConfig) -> Result<()> {
    let dir = cfg.dataset.as_ref().expect("validated");
    let ds = Dataset::generate(cfg.dataset_config())?;
    save_dataset(&ds, dir)?;
    println!(
        "wrote {} train + {} test samples to {}",
        ds.train.len(),
        ds.test.len(),
        dir.display()
    );
    Ok(())
}

pub fn run_train(cfg: &ExperimentConfig) -> Result<()> {
    let ds = obtain_dataset(cfg)?;
    let train_set = match cfg.noise_train.as_str() {
        // a third of the training images, as in the reference protocol
        "paper" => corrupt_training_subset(&ds.train, ds.train.len() / 3, cfg.seed ^ 0x6e6f697365)?,
        _ => ds.train.clone(),
    };
    for act in cfg.modes() {
        let name = model_name(act);
        let mut net = Network::build(cfg.net_spec(act)?, cfg.seed)?;
        let log = train(&mut net, &train_set, &cfg.train_config())?;
        write_checkpoint(&net, &cfg.out.join(format!("{name}.ckpt")))?;
        write_file(&cfg.out.join(format!("{name}_train_log.csv")), log.to_csv())?;
        println!(
            "{name}: {} iterations, final loss {:.6}, lambda {:.6}",
            log.iterations,
            log.losses.last().copied().unwrap_or(f64::NAN),
            net.lambda()
        );
    }
    Ok(())
}

fn failed_rows(name: &str, grid_len: usize, grid: &[crate::data::Noise]) -> Vec<MetricsRow> {
    grid.iter()
        .take(grid_len)
        .map(|n| {
            let (kind, level) = n.descriptor();
            MetricsRow {
                model: name.to_string(),
                noise_kind: kind.to_string(),
                level,
                miou: f64::NAN,
                accuracy: f64::NAN,
                re: f64::NAN,
            }
        })
        .collect()
}

/// Evaluates `plain`, `regularized` and `plain_posttv` (when the plain
/// checkpoint exists). A missing checkpoint yields NaN rows and exit code 2
/// once the remaining models are done.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<i32> {
    let ds = obtain_dataset(cfg)?;
    let grid = parse_sweep(&cfg.sweep)?;
    let mut rows = Vec::new();
    let mut missing = 0;
    let mut plain: Option<Network> = None;
    for act in cfg.modes() {
        let name = model_name(act);
        let path = cfg.out.join(format!("{name}.ckpt"));
        match read_checkpoint(&path) {
            Ok(net) => {
                let m = [(
                    name.to_string(),
                    Model::Net {
                        net: &net,
                        iterations: cfg.iters,
                    },
                )];
                rows.extend(sweep(&m, &ds.test, &grid, cfg.seed)?);
                if act == FinalActivation::Plain {
                    plain = Some(net);
                }
            }
            Err(e) => {
                eprintln!("warning: model {name}: {e}");
                missing += 1;
                rows.extend(failed_rows(name, grid.len(), &grid));
            }
        }
    }
    if let Some(net) = &plain {
        let m = [(
            "plain_posttv".to_string(),
            Model::PostTv {
                net,
                lambda: cfg.post_tv_lambda,
                iterations: cfg.iters,
            },
        )];
        rows.extend(sweep(&m, &ds.test, &grid, cfg.seed)?);
    }
    write_file(&cfg.out.join("metrics.csv"), metrics_csv(&rows))?;
    if cfg.svg {
        write_file(&cfg.out.join("miou.svg"), svg_chart(&rows))?;
    }
    for r in &rows {
        println!("{}", r.csv_row());
    }
    Ok(if missing > 0 { EXIT_RUNTIME } else { EXIT_OK })
}

pub fn run_gradcheck(cfg: &ExperimentConfig) -> Result<i32> {
    let perturb = Perturb((!cfg.perturb.is_empty()).then(|| cfg.perturb.clone()));
    let results = gradcheck_suite(cfg.instances, cfg.seed, &perturb)?;
    let csv = gradcheck_csv(&results);
    write_file(&cfg.out.join("gradcheck.csv"), &csv)?;
    print!("{csv}");
    Ok(if results.iter().all(|(_, r)| r.pass) {
        EXIT_OK
    } else {
        EXIT_GRADCHECK
    })
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let cfg = match cli.command {
        Command::Generate(f) => ExperimentConfig::resolve(CommandKind::Generate, f),
        Command::Train(f) => ExperimentConfig::resolve(CommandKind::Train, f),
        Command::Sweep(f) => ExperimentConfig::resolve(CommandKind::Sweep, f),
        Command::Gradcheck(f) => ExperimentConfig::resolve(CommandKind::Gradcheck, f),
        Command::Rerun { manifest, out } => {
            let text = match std::fs::read_to_string(&manifest) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("error: {}", Error::io(&manifest, e));
                    return EXIT_USAGE;
                }
            };
            match ExperimentConfig::from_manifest(&text) {
                Ok(mut c) => {
                    if let Some(o) = out {
                        c.out = o;
                    }
                    c
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    return EXIT_USAGE;
                }
            }
        }
    };
    execute(&cfg)
}
