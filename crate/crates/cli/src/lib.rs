//! The `llpfc` command line: bag generation, training, evaluation,
//! verification and the proportion-matching baseline.

pub mod config;

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use llpfc::baselines::{train_kl, KLBaselineConfig};
use llpfc::bags::{generate_bags, pooled_prior, read_bags_jsonl, read_dataset_csv, write_bags_jsonl, BagsMeta, Dataset, LLPInstance};
use llpfc::model::{evaluate, Classifier};
use llpfc::reduction::{write_group_models_jsonl, GroupNoiseModel, Mode};
use llpfc::simplex::ProbVector;
use llpfc::train::{GroupWeights, MetricsLog, OptimizerConfig, TrainConfig, Trainer};
use llpfc::verify::{run_suite, VerifyOptions};

pub use config::Settings;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_ASSUMPTION: i32 = 4;
pub const EXIT_VERIFICATION: i32 = 5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error(transparent)]
    Core(#[from] llpfc::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Verification(_) => EXIT_VERIFICATION,
            CliError::Core(llpfc::Error::AssumptionViolation { .. }) => EXIT_ASSUMPTION,
            CliError::Core(llpfc::Error::InvalidArgument(_)) => EXIT_CONFIG,
            CliError::Core(_) => EXIT_DATA,
        }
    }
}

fn data_err(context: impl std::fmt::Display) -> impl FnOnce(llpfc::Error) -> CliError {
    move |e| match e {
        e @ llpfc::Error::AssumptionViolation { .. } => CliError::Core(e),
        e => CliError::Data(format!("{context}: {e}")),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "llpfc", version, about = "Learning from label proportions with forward-corrected losses")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw bags from a labeled CSV and write them as JSON lines
    MakeBags(Flags),
    /// Train a classifier on bags with LLPFC
    Train(Flags),
    /// Report the accuracy of a saved model on a labeled CSV
    Eval(Flags),
    /// Run the numerical verification suite
    Verify(Flags),
    /// Train the proportion-matching baseline on minibatches of bags
    BaselineKl(Flags),
}

/// Each flag overrides the config key of the same name.
#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// Config file with [section] headers and key = value lines
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<String>,
    /// Output file (make-bags, eval, verify) or directory (train, baseline-kl)
    #[arg(long)]
    pub out: Option<String>,
    /// Labeled CSV: feature columns then an integer label column
    #[arg(long)]
    pub dataset: Option<String>,
    /// Labeled CSV used only for reporting test accuracy
    #[arg(long)]
    pub test: Option<String>,
    #[arg(long)]
    pub bags: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub bag_size: Option<String>,
    #[arg(long)]
    pub n_bags: Option<String>,
    #[arg(long, value_parser = ["ideal", "uniform", "approx"])]
    pub mode: Option<String>,
    #[arg(long, value_parser = ["uniform", "harmonic"])]
    pub weights: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    #[arg(long)]
    pub lr: Option<String>,
    #[arg(long)]
    pub momentum: Option<String>,
    #[arg(long)]
    pub weight_decay: Option<String>,
    /// Comma-separated epochs at which the learning rate decays
    #[arg(long)]
    pub decay_epochs: Option<String>,
    #[arg(long)]
    pub decay_factor: Option<String>,
    #[arg(long)]
    pub regroup_every: Option<String>,
    /// Comma-separated hidden layer widths; empty for a linear model
    #[arg(long)]
    pub hidden: Option<String>,
    /// Clean class prior, comma-separated (ideal mode)
    #[arg(long)]
    pub sigma: Option<String>,
    #[arg(long)]
    pub ideal_retries: Option<String>,
    #[arg(long)]
    pub bags_per_minibatch: Option<String>,
    #[arg(long)]
    pub track_train_accuracy: Option<String>,
    /// Write the final grouping's noise models here as JSON lines
    #[arg(long)]
    pub dump_groups: Option<String>,
    #[arg(long)]
    pub trials: Option<String>,
    /// Relative error injected into the closed-form norm check
    #[arg(long, hide = true)]
    pub perturb_closed_form: Option<f64>,
}

impl Flags {
    fn overrides(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("seed", &self.seed),
            ("out", &self.out),
            ("dataset", &self.dataset),
            ("test", &self.test),
            ("bags", &self.bags),
            ("model", &self.model),
            ("bag-size", &self.bag_size),
            ("n-bags", &self.n_bags),
            ("mode", &self.mode),
            ("weights", &self.weights),
            ("epochs", &self.epochs),
            ("batch-size", &self.batch_size),
            ("lr", &self.lr),
            ("momentum", &self.momentum),
            ("weight-decay", &self.weight_decay),
            ("decay-epochs", &self.decay_epochs),
            ("decay-factor", &self.decay_factor),
            ("regroup-every", &self.regroup_every),
            ("hidden", &self.hidden),
            ("sigma", &self.sigma),
            ("ideal-retries", &self.ideal_retries),
            ("bags-per-minibatch", &self.bags_per_minibatch),
            ("track-train-accuracy", &self.track_train_accuracy),
            ("dump-groups", &self.dump_groups),
            ("trials", &self.trials),
        ]
    }

    /// Defaults, then the config file, then flags.
    pub fn settings(&self) -> Result<Settings, CliError> {
        let mut settings = Settings::defaults();
        if let Some(path) = &self.config {
            settings.merge(Settings::load(path)?);
        }
        for (name, value) in self.overrides() {
            if let Some(v) = value {
                settings.set(name, v.clone())?;
            }
        }
        Ok(settings)
    }
}

/// Header embedded in every output.
#[derive(Debug, Serialize)]
struct Provenance {
    seed: u64,
    config_hash: String,
    settings: std::collections::BTreeMap<String, String>,
}

fn provenance(settings: &Settings) -> Result<Provenance, CliError> {
    Ok(Provenance {
        seed: settings.value("seed")?,
        config_hash: settings.hash(),
        settings: settings.echo(),
    })
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn load_dataset(settings: &Settings, key: &str) -> Result<Dataset, CliError> {
    let path = settings.path(key)?;
    read_dataset_csv(&path).map_err(data_err(path.display()))
}

fn parse_bool(settings: &Settings, key: &str) -> Result<bool, CliError> {
    settings.value(key)
}

fn optimizer(settings: &Settings) -> Result<OptimizerConfig, CliError> {
    Ok(OptimizerConfig {
        learning_rate: settings.value("lr")?,
        decay_epochs: settings.list("decay-epochs")?,
        decay_factor: settings.value("decay-factor")?,
        momentum: settings.value("momentum")?,
        weight_decay: settings.value("weight-decay")?,
    })
}

pub fn train_config(settings: &Settings) -> Result<TrainConfig, CliError> {
    let mode: Mode = settings
        .value::<String>("mode")?
        .parse()
        .map_err(|e: llpfc::Error| CliError::Config(e.to_string()))?;
    let weights: GroupWeights = settings
        .value::<String>("weights")?
        .parse()
        .map_err(|e: llpfc::Error| CliError::Config(e.to_string()))?;
    let clean_prior = settings
        .list::<f64>("sigma")?
        .map(|v| ProbVector::new(v).map_err(|e| CliError::Config(format!("sigma: {e}"))))
        .transpose()?;
    let cfg = TrainConfig {
        epochs: settings.value("epochs")?,
        batch_size: settings.value("batch-size")?,
        optimizer: optimizer(settings)?,
        regroup_every: settings.value("regroup-every")?,
        mode,
        weights,
        clean_prior,
        ideal_retries: settings.value("ideal-retries")?,
        seed: settings.value("seed")?,
        hidden: settings.list("hidden")?.unwrap_or_default(),
        track_train_accuracy: parse_bool(settings, "track-train-accuracy")?,
    };
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    if cfg.mode == Mode::Ideal && cfg.clean_prior.is_none() {
        return Err(CliError::Config("mode=ideal needs the clean prior in sigma".into()));
    }
    Ok(cfg)
}

pub fn kl_config(settings: &Settings) -> Result<KLBaselineConfig, CliError> {
    let cfg = KLBaselineConfig {
        epochs: settings.value("epochs")?,
        bags_per_minibatch: settings.value("bags-per-minibatch")?,
        optimizer: optimizer(settings)?,
        seed: settings.value("seed")?,
        hidden: settings.list("hidden")?.unwrap_or_default(),
        track_train_accuracy: parse_bool(settings, "track-train-accuracy")?,
    };
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

/// Dataset plus the bags file, checked against each other.
pub fn load_instance(settings: &Settings) -> Result<LLPInstance, CliError> {
    let mut ds = load_dataset(settings, "dataset")?;
    let bags_path = settings.path("bags")?;
    let file = File::open(&bags_path).map_err(io_err(&bags_path))?;
    let (meta, bags) = read_bags_jsonl(file).map_err(data_err(bags_path.display()))?;
    if meta.classes < ds.num_classes() {
        return Err(CliError::Data(format!(
            "bags file declares {} classes, dataset has labels up to {}",
            meta.classes,
            ds.num_classes() - 1
        )));
    }
    if meta.classes > ds.num_classes() {
        ds = ds.with_classes(meta.classes).map_err(data_err("dataset"))?;
    }
    LLPInstance::new(ds, bags, meta.seed).map_err(|e| CliError::Data(format!("{}: {e}", bags_path.display())))
}

fn optional_test_set(settings: &Settings) -> Result<Option<Dataset>, CliError> {
    settings.get("test").map(|_| load_dataset(settings, "test")).transpose()
}

pub struct TrainOutcome {
    pub classifier: Classifier,
    pub log: MetricsLog,
    pub groups: Vec<GroupNoiseModel>,
}

/// LLPFC training on a loaded instance.
pub fn train_instance(inst: &LLPInstance, cfg: &TrainConfig, test: Option<&Dataset>) -> Result<TrainOutcome, CliError> {
    if cfg.mode == Mode::Ideal {
        if let Some(k) = inst.bags.iter().position(|b| b.gamma_true.is_none()) {
            return Err(CliError::Data(format!("mode=ideal needs gamma_true, bag {k} has none")));
        }
    }
    let mut trainer = Trainer::new(inst, cfg.clone())?;
    let log = trainer.run_remaining(test)?;
    Ok(TrainOutcome {
        groups: trainer.group_models().to_vec(),
        classifier: trainer.classifier().clone(),
        log,
    })
}

fn write_model(path: &Path, clf: &Classifier, prov: &Provenance) -> Result<(), CliError> {
    let mut w = create(path)?;
    write!(w, "# seed {}\n# config-hash {}\n{}", prov.seed, prov.config_hash, clf.to_text())
        .and_then(|_| w.flush())
        .map_err(io_err(path))
}

fn write_metrics(path: &Path, log: &MetricsLog, prov: &Provenance) -> Result<(), CliError> {
    let mut w = create(path)?;
    log.write_jsonl(prov, &mut w)?;
    w.flush().map_err(io_err(path))
}

fn summarize(log: &MetricsLog) -> String {
    let last = log.epochs.last().expect("at least one epoch");
    let acc = last.test_acc.map_or("n/a".to_string(), |a| format!("{a:.4}"));
    format!(
        "epochs {}, final objective {:.6}, test accuracy {acc}, saturated steps {}",
        log.epochs.len(),
        last.objective,
        log.epochs.iter().map(|m| m.saturations).sum::<usize>()
    )
}

fn cmd_make_bags(settings: &Settings) -> Result<(), CliError> {
    let ds = load_dataset(settings, "dataset")?;
    let seed: u64 = settings.value("seed")?;
    let bag_size: usize = settings.value("bag-size")?;
    let n_bags: usize = settings.value("n-bags")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bags = generate_bags(&ds, bag_size, n_bags, &mut rng).map_err(|e| match e {
        e @ llpfc::Error::InvalidArgument(_) => CliError::Config(e.to_string()),
        e => CliError::Data(e.to_string()),
    })?;
    let meta = BagsMeta {
        n_bags,
        classes: ds.num_classes(),
        seed,
        config_hash: Some(settings.hash()),
    };
    let out = settings.path("out")?;
    let mut w = create(&out)?;
    write_bags_jsonl(&meta, &bags, &mut w).map_err(data_err(out.display()))?;
    let prior = pooled_prior(&bags)?;
    let shown: Vec<String> = prior.as_slice().iter().map(|p| format!("{p:.4}")).collect();
    println!(
        "wrote {n_bags} bags of {bag_size} points ({} classes) to {}; pooled prior [{}]; seed {seed}; config {}",
        meta.classes,
        out.display(),
        shown.join(", "),
        settings.hash()
    );
    Ok(())
}

fn cmd_train(settings: &Settings) -> Result<(), CliError> {
    let cfg = train_config(settings)?;
    let out = settings.path("out")?;
    let inst = load_instance(settings)?;
    let test = optional_test_set(settings)?;
    let outcome = train_instance(&inst, &cfg, test.as_ref())?;
    let prov = provenance(settings)?;
    write_model(&out.join("model.txt"), &outcome.classifier, &prov)?;
    write_metrics(&out.join("metrics.jsonl"), &outcome.log, &prov)?;
    if let Some(path) = settings.get("dump-groups") {
        let path = PathBuf::from(path);
        let mut w = create(&path)?;
        write_group_models_jsonl(&outcome.groups, &mut w)?;
        w.flush().map_err(io_err(&path))?;
    }
    println!(
        "llpfc-{}: {}; ideal retries {}; wrote {}",
        cfg.mode,
        summarize(&outcome.log),
        outcome.log.ideal_retries,
        out.display()
    );
    Ok(())
}

fn cmd_baseline_kl(settings: &Settings) -> Result<(), CliError> {
    let cfg = kl_config(settings)?;
    let out = settings.path("out")?;
    let inst = load_instance(settings)?;
    let test = optional_test_set(settings)?;
    let (clf, log) = train_kl(&inst, &cfg, test.as_ref())?;
    let prov = provenance(settings)?;
    write_model(&out.join("model.txt"), &clf, &prov)?;
    write_metrics(&out.join("metrics.jsonl"), &log, &prov)?;
    println!("kl baseline: {}; wrote {}", summarize(&log), out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    #[serde(flatten)]
    provenance: Provenance,
    rows: usize,
    accuracy: f64,
}

fn cmd_eval(settings: &Settings) -> Result<(), CliError> {
    let model_path = settings.path("model")?;
    let text = std::fs::read_to_string(&model_path).map_err(io_err(&model_path))?;
    let clf = Classifier::from_text(&text).map_err(data_err(model_path.display()))?;
    let ds = load_dataset(settings, "dataset")?;
    let accuracy = evaluate(&clf, &ds).map_err(data_err("evaluation"))?;
    let report = EvalReport {
        provenance: provenance(settings)?,
        rows: ds.len(),
        accuracy,
    };
    emit_json(settings, &report)?;
    println!("accuracy {accuracy:.6} on {} rows", ds.len());
    Ok(())
}

fn emit_json<T: Serialize>(settings: &Settings, value: &T) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    match settings.get("out") {
        Some(path) => {
            let path = PathBuf::from(path);
            let mut w = create(&path)?;
            writeln!(w, "{json}").and_then(|_| w.flush()).map_err(io_err(&path))
        }
        None => {
            println!("{json}");
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct VerifyOutput<'a> {
    #[serde(flatten)]
    provenance: Provenance,
    failing: Vec<llpfc::verify::Category>,
    report: &'a llpfc::verify::VerifyReport,
}

fn cmd_verify(settings: &Settings, perturbation: Option<f64>) -> Result<(), CliError> {
    let opts = VerifyOptions {
        trials: settings.value("trials")?,
        seed: settings.value("seed")?,
        closed_form_perturbation: perturbation.unwrap_or(0.0),
    };
    if opts.trials == 0 {
        return Err(CliError::Config("trials must be at least 1".into()));
    }
    let report = run_suite(&opts)?;
    for c in &report.checks {
        let tag = if c.passed { "ok  " } else { "FAIL" };
        eprintln!(
            "{tag} {:?}: {} checked, {} violations, worst {:e} (tolerance {:e})",
            c.category, c.checked, c.violations, c.worst, c.tolerance
        );
    }
    let failing = report.failing();
    emit_json(
        settings,
        &VerifyOutput {
            provenance: provenance(settings)?,
            failing: failing.clone(),
            report: &report,
        },
    )?;
    if failing.is_empty() {
        Ok(())
    } else {
        let names: Vec<String> = failing.iter().map(|c| format!("{c:?}")).collect();
        Err(CliError::Verification(names.join(", ")))
    }
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::MakeBags(flags) => cmd_make_bags(&flags.settings()?),
        Command::Train(flags) => cmd_train(&flags.settings()?),
        Command::Eval(flags) => cmd_eval(&flags.settings()?),
        Command::Verify(flags) => cmd_verify(&flags.settings()?, flags.perturb_closed_form),
        Command::BaselineKl(flags) => cmd_baseline_kl(&flags.settings()?),
    }
}

/// Parses `args`, runs the subcommand and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
