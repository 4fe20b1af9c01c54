//! `fragility-audit`: train, attack, defend, audit language drift and bundle
//! the results.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{DataSource, RunConfig, Target};
use fragility_core::stats::IntervalMethod;
use fragility_core::Error;

#[derive(Debug, Parser)]
#[command(name = "fragility-audit", version, about = "Adversarial robustness and cross-register drift audits")]
struct Cli {
    /// TOML or JSON run configuration. Flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Seed for data generation, initialization, shuffling and augmentation [default: 42]
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory [default: <runs-root>/<config hash>]
    #[arg(long, global = true, value_name = "DIR")]
    run_dir: Option<PathBuf>,

    /// Parent directory of hashed run directories
    #[arg(long, global = true, value_name = "DIR", default_value = "runs")]
    runs_root: PathBuf,

    /// Timestamp written into bundle documents instead of the current time
    #[arg(long, global = true)]
    timestamp: Option<String>,

    /// Log filter used when RUST_LOG is unset
    #[arg(long, global = true, default_value = "info")]
    log_level: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the dataset, train the classifier, save checkpoint and trace
    Train(TrainArgs),
    /// Sweep the epsilon grid and write the decay curve
    Attack(AttackArgs),
    /// Score the defenses against one adversarial batch
    Defend(DefendArgs),
    /// Query completion models with every vignette in every register
    LangAudit(LangArgs),
    /// Assemble the audit bundle from earlier outputs
    Report(ReportArgs),
    /// Run train, attack, defend, lang-audit and report in sequence
    AuditAll(AllArgs),
}

#[derive(Debug, Args, Default)]
struct DataFlags {
    /// Use the generated synthetic benchmark [default data source]
    #[arg(long, conflicts_with_all = ["data_dir", "manifest"])]
    synthetic: bool,

    /// Image root with one subdirectory per class
    #[arg(long, value_name = "DIR", conflicts_with = "manifest")]
    data_dir: Option<PathBuf>,

    /// JSON manifest listing path, label and split per image
    #[arg(long, value_name = "FILE")]
    manifest: Option<PathBuf>,

    /// Square input size in pixels [default: 32]
    #[arg(long)]
    image_size: Option<usize>,

    /// Training images per class [default: 200]
    #[arg(long)]
    per_class_train: Option<usize>,

    /// Test images per class [default: 50]
    #[arg(long)]
    per_class_test: Option<usize>,
}

#[derive(Debug, Args, Default)]
struct TrainFlags {
    /// Training epochs [default: 10]
    #[arg(long)]
    epochs: Option<usize>,

    /// Adam learning rate [default: 0.0001]
    #[arg(long)]
    learning_rate: Option<f64>,

    /// Mini-batch size [default: 30]
    #[arg(long)]
    batch_size: Option<usize>,

    /// Epochs between learning-rate decays [default: 3]
    #[arg(long)]
    step_size: Option<usize>,

    /// Learning-rate decay factor [default: 0.5]
    #[arg(long)]
    gamma: Option<f64>,

    /// Stem convolution channels [default: 24]
    #[arg(long)]
    stem_channels: Option<usize>,

    /// Channels added by each dense layer [default: 12]
    #[arg(long)]
    growth: Option<usize>,
}

#[derive(Debug, Args, Default)]
struct CheckpointFlag {
    /// Model checkpoint [default: <run-dir>/model.json]
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
struct AttackFlags {
    /// Interval method for accuracy, wilson or wald [default: wilson]
    #[arg(long, value_name = "METHOD")]
    ci: Option<IntervalMethod>,

    /// Interval confidence level [default: 0.95]
    #[arg(long)]
    confidence: Option<f64>,

    /// Largest epsilon of the grid [default: 0.3]
    #[arg(long)]
    max_epsilon: Option<f64>,

    /// Number of evenly spaced grid levels including zero [default: 15]
    #[arg(long)]
    levels: Option<usize>,
}

#[derive(Debug, Args, Default)]
struct DefendFlags {
    /// Attack budget for the stress test [default: first nonzero grid level, 0.3/14]
    #[arg(long, allow_negative_numbers = true)]
    epsilon: Option<f64>,

    /// Gaussian smoothing sigma in pixels [default: 1.0]
    #[arg(long, allow_negative_numbers = true)]
    sigma: Option<f64>,

    /// Augmented predictions per ensemble vote [default: 5]
    #[arg(long)]
    votes: Option<usize>,

    /// Largest ensemble shift in pixels [default: 5]
    #[arg(long)]
    max_shift: Option<i64>,

    /// Disable horizontal flips in the ensemble [default: flips enabled]
    #[arg(long)]
    no_flips: bool,

    /// Adversarial fine-tuning steps [default: 5]
    #[arg(long)]
    adv_steps: Option<usize>,

    /// Adversarial fine-tuning learning rate [default: 0.00001]
    #[arg(long)]
    adv_lr: Option<f64>,
}

#[derive(Debug, Args, Default)]
struct LinguaFlags {
    /// Completion endpoint base URL; repeat for several models
    #[arg(long, value_name = "URL", env = "AUDIT_ENDPOINT_URL")]
    endpoint: Vec<String>,

    /// Model name for each --endpoint, in the same order
    #[arg(long, value_name = "NAME", env = "AUDIT_MODEL_NAME")]
    model: Vec<String>,

    /// Scripted responses served from a local mock endpoint, as MODEL=PATH
    #[arg(long, value_name = "MODEL=PATH")]
    mock_fixture: Vec<String>,

    /// Audit the two bundled illustrative fixtures [default when no target is given]
    #[arg(long)]
    builtin_fixtures: bool,

    /// Vignette corpus JSON [default: bundled illustrative corpus]
    #[arg(long, value_name = "FILE")]
    corpus: Option<PathBuf>,

    /// Record endpoint failures as unparseable instead of aborting [default: strict]
    #[arg(long)]
    lenient: bool,

    /// Concurrent requests [default: 1]
    #[arg(long)]
    parallelism: Option<usize>,

    /// Per-request timeout in milliseconds [default: 60000]
    #[arg(long)]
    timeout_ms: Option<u64>,

    /// Retries after a failed request [default: 3]
    #[arg(long)]
    max_retries: Option<u32>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataFlags,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Debug, Args)]
struct AttackArgs {
    #[command(flatten)]
    data: DataFlags,
    #[command(flatten)]
    checkpoint: CheckpointFlag,
    #[command(flatten)]
    attack: AttackFlags,
}

#[derive(Debug, Args)]
struct DefendArgs {
    #[command(flatten)]
    data: DataFlags,
    #[command(flatten)]
    checkpoint: CheckpointFlag,
    #[command(flatten)]
    attack: AttackFlags,
    #[command(flatten)]
    defend: DefendFlags,
}

#[derive(Debug, Args)]
struct LangArgs {
    #[command(flatten)]
    lingua: LinguaFlags,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Directory holding earlier outputs [default: the run directory]
    #[arg(long, value_name = "DIR")]
    from: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AllArgs {
    #[command(flatten)]
    data: DataFlags,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    attack: AttackFlags,
    #[command(flatten)]
    defend: DefendFlags,
    #[command(flatten)]
    lingua: LinguaFlags,
}

impl DataFlags {
    fn apply(&self, c: &mut RunConfig) {
        if self.synthetic {
            c.data.source = DataSource::Synthetic;
            c.data.path = None;
        }
        if let Some(p) = &self.data_dir {
            c.data.source = DataSource::Directory;
            c.data.path = Some(p.clone());
        }
        if let Some(p) = &self.manifest {
            c.data.source = DataSource::Manifest;
            c.data.path = Some(p.clone());
        }
        set(&mut c.data.image_size, self.image_size);
        set(&mut c.data.per_class_train, self.per_class_train);
        set(&mut c.data.per_class_test, self.per_class_test);
    }
}

impl TrainFlags {
    fn apply(&self, c: &mut RunConfig) {
        set(&mut c.train.epochs, self.epochs);
        set(&mut c.train.learning_rate, self.learning_rate);
        set(&mut c.train.batch_size, self.batch_size);
        set(&mut c.train.step_size, self.step_size);
        set(&mut c.train.gamma, self.gamma);
        set(&mut c.train.stem_channels, self.stem_channels);
        set(&mut c.train.growth, self.growth);
    }
}

impl AttackFlags {
    fn apply(&self, c: &mut RunConfig) {
        set(&mut c.attack.ci, self.ci);
        set(&mut c.attack.confidence, self.confidence);
        set(&mut c.attack.max_epsilon, self.max_epsilon);
        set(&mut c.attack.levels, self.levels);
    }
}

impl DefendFlags {
    fn apply(&self, c: &mut RunConfig) {
        if self.epsilon.is_some() {
            c.defense.epsilon = self.epsilon;
        }
        set(&mut c.defense.sigma, self.sigma);
        set(&mut c.defense.votes, self.votes);
        set(&mut c.defense.max_shift, self.max_shift);
        if self.no_flips {
            c.defense.flips = false;
        }
        set(&mut c.defense.adv_steps, self.adv_steps);
        set(&mut c.defense.adv_learning_rate, self.adv_lr);
    }
}

impl LinguaFlags {
    fn apply(&self, c: &mut RunConfig) -> Result<(), Error> {
        let mut targets = Vec::new();
        if !self.endpoint.is_empty() {
            if self.model.len() != self.endpoint.len() {
                return Err(Error::Validation(format!(
                    "{} endpoints but {} model names; give one --model per --endpoint",
                    self.endpoint.len(),
                    self.model.len()
                )));
            }
            for (url, model) in self.endpoint.iter().zip(&self.model) {
                targets.push(Target::Http {
                    url: url.clone(),
                    model: model.clone(),
                });
            }
        }
        for spec in &self.mock_fixture {
            let (model, path) = spec
                .split_once('=')
                .ok_or_else(|| Error::Validation(format!("--mock-fixture expects MODEL=PATH, got {spec:?}")))?;
            targets.push(Target::Fixture {
                path: PathBuf::from(path),
                model: model.to_string(),
            });
        }
        if self.builtin_fixtures {
            targets.push(Target::Builtin);
        }
        if !targets.is_empty() {
            c.lingua.targets = targets;
        }
        if self.corpus.is_some() {
            c.lingua.corpus = self.corpus.clone();
        }
        if self.lenient {
            c.lingua.lenient = true;
        }
        set(&mut c.lingua.parallelism, self.parallelism);
        set(&mut c.lingua.timeout_ms, self.timeout_ms);
        set(&mut c.lingua.max_retries, self.max_retries);
        Ok(())
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig, Error> {
    let mut c = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    set(&mut c.seed, cli.seed);
    match &cli.command {
        Command::Train(a) => {
            a.data.apply(&mut c);
            a.train.apply(&mut c);
        }
        Command::Attack(a) => {
            a.data.apply(&mut c);
            a.attack.apply(&mut c);
        }
        Command::Defend(a) => {
            a.data.apply(&mut c);
            a.attack.apply(&mut c);
            a.defend.apply(&mut c);
        }
        Command::LangAudit(a) => a.lingua.apply(&mut c)?,
        Command::Report(_) => {}
        Command::AuditAll(a) => {
            a.data.apply(&mut c);
            a.train.apply(&mut c);
            a.attack.apply(&mut c);
            a.defend.apply(&mut c);
            a.lingua.apply(&mut c)?;
        }
    }
    c.validate()?;
    Ok(c)
}

fn run(cli: Cli) -> Result<(), Error> {
    let cfg = resolve(&cli)?;
    let run_dir = cli.run_dir.clone().unwrap_or_else(|| cli.runs_root.join(cfg.hash()));
    let timestamp = cli
        .timestamp
        .clone()
        .unwrap_or_else(|| chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true));
    let ctx = commands::Context::create(cfg, run_dir, timestamp)?;
    match cli.command {
        Command::Train(_) => commands::cmd_train(&ctx).map(|_| ()),
        Command::Attack(a) => commands::cmd_attack(&ctx, a.checkpoint.checkpoint.as_deref()),
        Command::Defend(a) => commands::cmd_defend(&ctx, a.checkpoint.checkpoint.as_deref()),
        Command::LangAudit(_) => commands::cmd_lang_audit(&ctx).map(|_| ()),
        Command::Report(a) => commands::cmd_report(&ctx, a.from.as_deref()),
        Command::AuditAll(_) => commands::cmd_audit_all(&ctx),
    }
}

/// 2 for bad input, 3 for file-system failures, 4 for endpoint failures.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io { .. } => 3,
        Error::Endpoint(_) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(&cli.log_level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
