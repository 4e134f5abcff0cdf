//! Command-line front end: dataset synthesis, training, evaluation, contour
//! evolution and gradient checks.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic_vessels, load_dataset, save_dataset, save_mask, DatasetManifest, Sample, Split, SynthParams};
use crate::elastic::{
    contour_evolve, indicator, signed_distance_init, stable_time_step, write_energy_csv, write_snapshots, ElasticConfig,
    Field2D, Scenario, ScenarioSetup,
};
use crate::error::{Error, Result};
use crate::gradcheck::{format_report, run_suite, GradcheckOptions, Suite};
use crate::metrics::{connected_components, EvaluationReport};
use crate::network::{evaluate_network, Checkpoint, EpochLog, GaeiUnetConfig, LossWeights, TrainConfig, Trainer, Variant};

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "GAEI_SEED";

#[derive(Debug, Parser)]
#[command(name = "gaei", version, about = "Retinal vessel segmentation with attention and an elastic interaction loss")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic vessel dataset with a manifest.
    Synth(SynthArgs),
    /// Train one variant and write its log, checkpoint and config echo.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset and write metrics and predicted masks.
    Eval(EvalArgs),
    /// Evolve a contour under the elastic energy and write snapshots.
    Evolve(EvolveArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub count: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    pub split: SplitArg,
    /// Depth of the network the data is meant for; sizes should be multiples of 2^depth.
    #[arg(long, default_value_t = 4)]
    pub depth: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Run configuration whose network section must match the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_variant, requires = "config")]
    pub variant: Option<Variant>,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["builtin_scenario", "target_image"]))]
pub struct EvolveArgs {
    /// Built-in scenario: gap or perturbed-disk.
    #[arg(long, value_parser = parse_scenario)]
    #[serde(serialize_with = "scenario_name")]
    pub builtin_scenario: Option<Scenario>,
    /// Binary mask used as the target contour.
    #[arg(long)]
    pub target_image: Option<PathBuf>,
    /// Binary mask for the initial contour (target image only; default a centred disk).
    #[arg(long, requires = "target_image")]
    pub init_image: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Time step; defaults to 0.5 / max|k| for the grid.
    #[arg(long)]
    pub dt: Option<f64>,
    /// Heaviside width for target-image runs.
    #[arg(long, default_value_t = 1.0)]
    pub width: f64,
    #[arg(long, default_value_t = 50)]
    pub snapshot_every: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn scenario_name<S: serde::Serializer>(s: &Option<Scenario>, ser: S) -> std::result::Result<S::Ok, S::Error> {
    match s {
        Some(s) => ser.serialize_some(s.name()),
        None => ser.serialize_none(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GradModule {
    Tensor,
    Elastic,
    Attention,
    Network,
    All,
}

impl GradModule {
    pub fn suites(self) -> Vec<Suite> {
        match self {
            GradModule::Tensor => vec![Suite::Tensor],
            GradModule::Elastic => vec![Suite::Elastic],
            GradModule::Attention => vec![Suite::Attention],
            GradModule::Network => vec![Suite::Network],
            GradModule::All => Suite::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = GradModule::All)]
    pub module: GradModule,
    #[arg(long, default_value_t = 10)]
    pub instances: usize,
    /// Offset added to every analytic gradient (self-test of the checker).
    #[arg(long, default_value_t = 0.0, hide = true)]
    pub perturb: f64,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    Variant::parse(s).ok_or_else(|| format!("unknown variant '{s}' (expected unet, unet+dropblock, unet+agca or gaei)"))
}

fn parse_scenario(s: &str) -> std::result::Result<Scenario, String> {
    Scenario::parse(s).map_err(|e| e.to_string())
}

/// Everything a training run needs, with defaults for every field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub network: GaeiUnetConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub elastic: ElasticConfig,
    /// Training set; relative paths are resolved against the config file.
    pub manifest: Option<PathBuf>,
    /// Optional validation set scored after every epoch.
    pub validation_manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: u64,
    /// When set, overrides the architecture flags and loss weights.
    pub variant: Option<Variant>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            network: GaeiUnetConfig::default(),
            train: TrainConfig::default(),
            loss: LossWeights::default(),
            elastic: ElasticConfig::default(),
            manifest: None,
            validation_manifest: None,
            out: None,
            seed: 0,
            variant: None,
        }
    }
}

impl RunConfig {
    /// Reads a config file, resolving relative dataset paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::load(path, format!("invalid run config: {e}")))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.manifest, &mut cfg.validation_manifest, &mut cfg.out].into_iter().flatten() {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Applies the variant, then the seed (from `seed_override` if given) to
    /// every seeded component.
    pub fn resolve(mut self, variant: Option<Variant>, seed_override: Option<u64>) -> Self {
        if let Some(v) = variant {
            self.variant = Some(v);
        }
        if let Some(v) = self.variant {
            v.apply(&mut self.network);
            self.loss = v.loss_weights();
        }
        if let Some(s) = seed_override {
            self.seed = s;
        }
        self.train.seed = self.seed;
        if let Some(a) = &mut self.train.augment {
            a.seed = self.seed;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.elastic.validate()
    }
}

/// Seed from [`SEED_ENV`], if set.
pub fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}='{v}' is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSummary {
    pub manifest: DatasetManifest,
    pub foreground_min: f64,
    pub foreground_mean: f64,
    pub foreground_max: f64,
    pub warnings: Vec<String>,
}

pub fn cmd_synth(args: &SynthArgs) -> Result<SynthSummary> {
    let divisor = 1usize
        .checked_shl(args.depth as u32)
        .ok_or_else(|| Error::Config(format!("depth {} too large", args.depth)))?;
    let mut warnings = Vec::new();
    let mut params = SynthParams {
        size_divisor: divisor,
        ..SynthParams::default()
    };
    if args.size % divisor != 0 {
        warnings.push(format!(
            "size {} is not divisible by {divisor}; a depth-{} network cannot take these images",
            args.size, args.depth
        ));
        params.size_divisor = 1;
    }
    create_dir(&args.out)?;
    let samples = generate_synthetic_vessels(args.count, args.size, args.size, args.seed, &params)?;
    let manifest = save_dataset(&args.out, &samples, args.split.into())?;
    write_json(&args.out.join("synth_config.json"), &(args, &params))?;
    let fractions: Vec<f64> = samples.iter().map(Sample::foreground_fraction).collect();
    let n = fractions.len().max(1) as f64;
    Ok(SynthSummary {
        manifest,
        foreground_min: fractions.iter().copied().fold(f64::INFINITY, f64::min),
        foreground_mean: fractions.iter().sum::<f64>() / n,
        foreground_max: fractions.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        warnings,
    })
}

fn load_samples(manifest: &Path, network: &GaeiUnetConfig) -> Result<Vec<Sample>> {
    let samples = load_dataset(&DatasetManifest::load(manifest)?)?;
    for s in &samples {
        network
            .check_input(s.height(), s.width())
            .map_err(|e| Error::load(manifest, format!("sample {}: {e}", s.id)))?;
    }
    Ok(samples)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub config: RunConfig,
    pub logs: Vec<EpochLog>,
    pub log_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

pub const TRAIN_LOG: &str = "train_log.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const CONFIG_ECHO: &str = "config.json";

/// Trains with `config` (already resolved) and writes log, checkpoint and config echo to its `out`.
pub fn train_run(config: RunConfig, mut progress: impl FnMut(&EpochLog)) -> Result<TrainSummary> {
    config.validate()?;
    let out = config
        .out
        .clone()
        .ok_or_else(|| Error::Config("no output directory (use --out or set 'out')".into()))?;
    let manifest = config
        .manifest
        .clone()
        .ok_or_else(|| Error::Config("no training manifest (set 'manifest' in the config)".into()))?;
    create_dir(&out)?;
    write_json(&out.join(CONFIG_ECHO), &config)?;
    let train = load_samples(&manifest, &config.network)?;
    let validation = match &config.validation_manifest {
        Some(p) => Some(load_samples(p, &config.network)?),
        None => None,
    };

    let mut trainer = Trainer::new(&config.network, config.train.clone(), config.loss, config.elastic)?;
    let log_path = out.join(TRAIN_LOG);
    let mut log = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    writeln!(log, "{}", EpochLog::CSV_HEADER).map_err(|e| Error::io(&log_path, e))?;
    let logs = trainer.fit(&train, validation.as_deref(), |row, _| {
        writeln!(log, "{}", row.csv_row()).map_err(|e| Error::io(&log_path, e))?;
        progress(row);
        Ok(())
    })?;
    let checkpoint_path = out.join(CHECKPOINT_FILE);
    trainer.checkpoint().save(&checkpoint_path)?;
    Ok(TrainSummary {
        config,
        logs,
        log_path,
        checkpoint_path,
    })
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainSummary> {
    let base = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut config = base.resolve(args.variant, seed_from_env()?);
    if let Some(out) = &args.out {
        config.out = Some(out.clone());
    }
    train_run(config, |row| {
        println!(
            "epoch {:>4}  lr {:<8} loss {:.6}  elastic {:.6}  ce {:.6}  val_F1 {}",
            row.epoch,
            row.lr,
            row.loss,
            row.loss_elastic,
            row.loss_ce,
            row.val_f1.map_or("NA".to_string(), |v| format!("{v:.4}"))
        );
    })
}

pub const METRICS_FILE: &str = "metrics.csv";

pub fn cmd_eval(args: &EvalArgs) -> Result<EvaluationReport> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let expected = match &args.config {
        Some(p) => Some(RunConfig::load(p)?.resolve(args.variant, None).network),
        None => None,
    };
    let mut network = ckpt.load_network(expected.as_ref())?;
    let samples = load_samples(&args.manifest, network.config())?;
    let report = evaluate_network(&mut network, &samples)?;

    let pred_dir = args.out.join("predictions");
    create_dir(&pred_dir)?;
    for s in &samples {
        let (prob, mask) = network.predict(&s.image)?;
        save_mask(&pred_dir.join(format!("{}_pred.pgm", s.id)), &mask)?;
        save_mask(&pred_dir.join(format!("{}_prob.pgm", s.id)), &prob)?;
    }
    let metrics = args.out.join(METRICS_FILE);
    fs::write(&metrics, report.to_csv()).map_err(|e| Error::io(&metrics, e))?;
    write_json(
        &args.out.join("eval_config.json"),
        &serde_json::json!({
            "checkpoint": args.checkpoint,
            "manifest": args.manifest,
            "network": network.config(),
            "epoch": ckpt.epoch,
        }),
    )?;
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct EvolveSummary {
    pub initial_components: usize,
    pub final_components: usize,
    pub energies: Vec<f64>,
    pub snapshots: usize,
}

fn centred_disk_mask(h: usize, w: usize) -> Field2D {
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let r = 0.3 * h.min(w) as f64;
    Field2D::from_fn(h, w, |y, x| {
        if (y as f64 + 0.5 - cy).hypot(x as f64 + 0.5 - cx) <= r {
            1.0
        } else {
            0.0
        }
    })
}

fn region_components(phi: &Field2D, config: &ElasticConfig) -> Result<usize> {
    Ok(connected_components(&indicator(phi, config).threshold(0.5))?.count)
}

/// Initial field, target and default schedule for an evolve invocation.
pub fn evolve_setup(args: &EvolveArgs) -> Result<ScenarioSetup> {
    let mut setup = match (&args.builtin_scenario, &args.target_image) {
        (Some(s), _) => s.setup()?,
        (None, Some(path)) => {
            let target = crate::data::load_mask(path)?;
            let (h, w) = target.dims();
            let init = match &args.init_image {
                Some(p) => {
                    let m = crate::data::load_mask(p)?;
                    if m.dims() != (h, w) {
                        return Err(Error::load(p, format!("initial mask is {:?}, target is {h}x{w}", m.dims())));
                    }
                    m
                }
                None => centred_disk_mask(h, w),
            };
            let config = ElasticConfig {
                alpha: 1.0,
                heaviside_width: args.width,
                pad_factor: 1,
            };
            config.validate()?;
            ScenarioSetup {
                phi0: signed_distance_init(&init, 4.0),
                target,
                dt: stable_time_step(h, w, &config)?,
                config,
                steps: 200,
            }
        }
        (None, None) => return Err(Error::Config("give --builtin-scenario or --target-image".into())),
    };
    if let Some(steps) = args.steps {
        setup.steps = steps;
    }
    if let Some(dt) = args.dt {
        setup.dt = dt;
    }
    Ok(setup)
}

pub const ENERGY_FILE: &str = "energy.csv";

pub fn cmd_evolve(args: &EvolveArgs) -> Result<EvolveSummary> {
    let setup = evolve_setup(args)?;
    let record = contour_evolve(&setup.phi0, &setup.target, &setup.config, setup.dt, setup.steps, args.snapshot_every)?;
    create_dir(&args.out)?;
    write_snapshots(&args.out.join("snapshots"), &record, &setup.config)?;
    save_mask(&args.out.join("target.pgm"), &setup.target)?;
    write_energy_csv(&args.out.join(ENERGY_FILE), &record.energies)?;
    write_json(
        &args.out.join("evolve_config.json"),
        &serde_json::json!({
            "args": args,
            "elastic": setup.config,
            "dt": setup.dt,
            "steps": setup.steps,
        }),
    )?;
    Ok(EvolveSummary {
        initial_components: region_components(&setup.phi0, &setup.config)?,
        final_components: region_components(record.final_phi(), &setup.config)?,
        energies: record.energies,
        snapshots: record.snapshots.len(),
    })
}

/// Runs the requested suites and returns the report text and whether every check passed.
pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<(String, bool)> {
    let opts = GradcheckOptions {
        instances: args.instances,
        perturb: args.perturb,
        ..GradcheckOptions::default()
    };
    let mut text = String::new();
    let mut ok = true;
    for suite in args.module.suites() {
        let results = run_suite(suite, &opts)?;
        ok &= results.iter().all(|r| r.passed());
        text.push_str(&format!("[{}]\n", suite.name()));
        text.push_str(&format_report(&results));
    }
    Ok((text, ok))
}

/// Executes a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Synth(args) => {
            let s = cmd_synth(&args)?;
            for w in &s.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "wrote {} samples to {} (foreground fraction min {:.4}, mean {:.4}, max {:.4})",
                s.manifest.entries.len(),
                args.out.display(),
                s.foreground_min,
                s.foreground_mean,
                s.foreground_max
            );
        }
        Command::Train(args) => {
            let s = cmd_train(&args)?;
            println!("log: {}", s.log_path.display());
            println!("checkpoint: {}", s.checkpoint_path.display());
        }
        Command::Eval(args) => {
            let report = cmd_eval(&args)?;
            print!("{}", report.to_table());
            println!("metrics: {}", args.out.join(METRICS_FILE).display());
        }
        Command::Evolve(args) => {
            let s = cmd_evolve(&args)?;
            println!("initial components: {}", s.initial_components);
            println!("final components: {}", s.final_components);
            if let (Some(first), Some(last)) = (s.energies.first(), s.energies.last()) {
                println!("energy: {first} -> {last}");
            }
        }
        Command::Gradcheck(args) => {
            let (text, ok) = cmd_gradcheck(&args)?;
            print!("{text}");
            if !ok {
                eprintln!("gradient check failed");
                return Ok(1);
            }
        }
    }
    Ok(0)
}
