//! Command implementations behind the `dsn` binary.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use dsn_core::checkpoint::Checkpoint;
use dsn_core::config::RunConfig;
use dsn_core::datagen::{self, DatasetSpec, Manifest};
use dsn_core::evaluation::{self, Estimator};
use dsn_core::losses::WeightingScheme;
use dsn_core::profiler::{self, MacConvention};
use dsn_core::separator::{Gating, Separator, SeparatorConfig};
use dsn_core::trainer::{self, Trainer};
use dsn_core::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Contract(_) => EXIT_CONFIG,
        Error::Format { .. } | Error::Checkpoint(_) | Error::Io { .. } | Error::Wav(_) => EXIT_DATA,
        Error::Numeric { .. } | Error::Shape { .. } => EXIT_NUMERIC,
    }
}

#[derive(Parser, Debug)]
#[command(name = "dsn", version, about = "Dynamic slimmable speech separation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic two-speaker dataset.
    GenData(GenDataArgs),
    /// Train a model from a TOML run configuration.
    Train(TrainArgs),
    /// Separate one WAV file.
    Separate(SeparateArgs),
    /// Evaluate a checkpoint on a dataset manifest.
    Evaluate(EvaluateArgs),
    /// Analytic complexity per utilization level.
    Profile(ProfileArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fixed overlap ratio; overrides the range.
    #[arg(long)]
    pub overlap: Option<f64>,
    #[arg(long, num_args = 2, value_names = ["MIN", "MAX"])]
    pub overlap_range: Option<Vec<f64>>,
    /// Fixed noise activity; overrides the range.
    #[arg(long)]
    pub noise_activity: Option<f64>,
    #[arg(long, num_args = 2, value_names = ["MIN", "MAX"])]
    pub noise_activity_range: Option<Vec<f64>>,
    #[arg(long, default_value_t = 4.0)]
    pub duration: f64,
    #[arg(long, default_value_t = 0.3)]
    pub pause_prob: f64,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    Si,
    Sd,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from the state saved in the output directory.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, value_enum)]
    pub weighting: Option<SchemeArg>,
    #[arg(long)]
    pub a: Option<f64>,
    #[arg(long)]
    pub b: Option<f64>,
}

#[derive(Args, Debug)]
pub struct SeparateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Constant level from the model's utilization set.
    #[arg(long)]
    pub external_utilization: Option<f64>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub external_utilization: Option<f64>,
    /// Also evaluate every constant level and write `gating.csv`.
    #[arg(long)]
    pub sweep: bool,
    /// Score the mixture itself as both estimates.
    #[arg(long)]
    pub bypass: bool,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ConventionArg {
    Dense,
    Sliced,
}

#[derive(Args, Debug)]
pub struct ProfileArgs {
    /// Run configuration; the full-size model when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0.125,0.25,0.5,0.75,1.0")]
    pub utilization: Vec<f64>,
    #[arg(long, default_value_t = 4.0)]
    pub duration: f64,
    #[arg(long, value_enum, default_value_t = ConventionArg::Dense)]
    pub convention: ConventionArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn write(path: &Path, text: &str) -> dsn_core::Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> dsn_core::Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn range(fixed: Option<f64>, pair: &Option<Vec<f64>>, default: [f64; 2]) -> [f64; 2] {
    match (fixed, pair) {
        (Some(v), _) => [v, v],
        (None, Some(p)) => [p[0], p[1]],
        (None, None) => default,
    }
}

pub fn gen_data(a: &GenDataArgs) -> dsn_core::Result<String> {
    let base = DatasetSpec::default();
    let spec = DatasetSpec {
        count: a.count,
        seed: a.seed,
        duration_s: a.duration,
        overlap_range: range(a.overlap, &a.overlap_range, base.overlap_range),
        noise_activity_range: range(a.noise_activity, &a.noise_activity_range, base.noise_activity_range),
        pause_prob: a.pause_prob,
        ..base
    };
    let m = datagen::generate_dataset(&a.out, &spec)?;
    let mean = m.records.iter().map(|r| r.measured_overlap).sum::<f64>() / m.records.len().max(1) as f64;
    Ok(format!(
        "wrote {} mixtures to {} (mean measured overlap {mean:.3})",
        m.records.len(),
        a.out.display()
    ))
}

pub fn train(a: &TrainArgs) -> dsn_core::Result<String> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = a.max_epochs {
        cfg.train.max_epochs = e;
    }
    if let Some(v) = a.alpha {
        cfg.train.alpha = v;
    }
    if let Some(w) = a.weighting {
        cfg.train.weighting.scheme = match w {
            SchemeArg::Si => WeightingScheme::Si,
            SchemeArg::Sd => WeightingScheme::Sd,
        };
    }
    if let Some(v) = a.a {
        cfg.train.weighting.a = v;
    }
    if let Some(v) = a.b {
        cfg.train.weighting.b = v;
    }
    cfg.train.validate()?;
    let train_set = datagen::load_examples(&Manifest::load(cfg.train_manifest()?)?)?;
    let val_set = match &cfg.data.val_manifest {
        Some(p) => datagen::load_examples(&Manifest::load(p)?)?,
        None => Vec::new(),
    };
    create_dir(&a.out)?;
    let state = a.out.join(trainer::STATE_FILE);
    let mut tr = if a.resume && state.exists() {
        Trainer::resume(&state, Some(cfg.train.clone()))?
    } else {
        Trainer::new(cfg.model.clone(), cfg.train.clone())?
    }
    .with_output(&a.out)?;
    write(&a.out.join("config.toml"), &cfg.to_toml()?)?;
    tr.fit(&train_set, &val_set)?;
    let last = tr.log.last();
    Ok(format!(
        "trained {} epochs; final val loss {}; artifacts in {}",
        tr.state.epoch,
        last.map_or(f64::NAN, |r| r.val_loss),
        a.out.display()
    ))
}

fn load_model(path: &Path) -> dsn_core::Result<Separator<f32>> {
    Checkpoint::<f32>::load(path)?.into_model()
}

fn gating_for(level: Option<f64>, cfg: &SeparatorConfig) -> dsn_core::Result<Gating> {
    match level {
        None => Ok(Gating::Internal),
        Some(u) if cfg.utilization.contains(u) => Ok(Gating::External(u)),
        Some(u) => Err(Error::Contract(format!(
            "external utilization {u} is not one of {:?}",
            cfg.utilization.levels()
        ))),
    }
}

pub fn separate(a: &SeparateArgs) -> dsn_core::Result<String> {
    let model = load_model(&a.checkpoint)?;
    let gating = gating_for(a.external_utilization, &model.config)?;
    let input = datagen::load_wav(&a.input, Some(model.config.sample_rate))?;
    let y: Vec<f32> = input.samples.iter().map(|&v| v as f32).collect();
    let sep = model.separate(&y, &gating)?;
    create_dir(&a.out)?;
    let stem = a.input.file_stem().and_then(|s| s.to_str()).unwrap_or("input");
    for (j, s) in sep.sources.iter().enumerate() {
        let data: Vec<f64> = s.iter().map(|&v| v as f64).collect();
        datagen::save_wav(&a.out.join(format!("{stem}_s{}.wav", j + 1)), &data, model.config.sample_rate)?;
    }
    let report = sep.report.to_key_values();
    write(&a.out.join(format!("{stem}_report.txt")), &report)?;
    Ok(report)
}

pub fn evaluate(a: &EvaluateArgs) -> dsn_core::Result<String> {
    let model = load_model(&a.checkpoint)?;
    let gating = gating_for(a.external_utilization, &model.config)?;
    let examples = datagen::load_examples(&Manifest::load(&a.manifest)?)?;
    let est = if a.bypass { Estimator::Bypass } else { Estimator::Model(gating) };
    let summary = evaluation::evaluate(&model, &examples, &est)?;
    create_dir(&a.out)?;
    write(&a.out.join("metrics.csv"), &summary.to_csv())?;
    write(&a.out.join("histogram.csv"), &summary.histogram_csv())?;
    let mut text = summary.to_csv();
    if a.sweep {
        let rows = evaluation::external_sweep(&model, &examples)?;
        let csv = evaluation::gating_rows_csv(&rows);
        write(&a.out.join("gating.csv"), &csv)?;
        text += &csv;
    }
    Ok(text)
}

pub fn profile(a: &ProfileArgs) -> dsn_core::Result<String> {
    let cfg = match &a.config {
        Some(p) => RunConfig::load(p)?.model,
        None => SeparatorConfig::default(),
    };
    let convention = match a.convention {
        ConventionArg::Dense => MacConvention::Dense,
        ConventionArg::Sliced => MacConvention::Sliced,
    };
    let rows = a
        .utilization
        .iter()
        .map(|&u| profiler::profile_row(&cfg, u, a.duration, convention))
        .collect::<dsn_core::Result<Vec<_>>>()?;
    let csv = profiler::rows_to_csv(&rows);
    if let Some(out) = &a.out {
        create_dir(out)?;
        write(&out.join("profile.csv"), &csv)?;
    }
    Ok(csv)
}

pub fn run(cli: &Cli) -> dsn_core::Result<String> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Separate(a) => separate(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Profile(a) => profile(a),
    }
}
