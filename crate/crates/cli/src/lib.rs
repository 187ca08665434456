//! The `hpn` command line: synthesize possessions, extract weak labels,
//! train the policy variants, roll them out, benchmark and render.
//!
//! Every command reads one [`RunConfig`] (from `--config` or the
//! `HPN_CONFIG` environment variable, else the defaults) with `--set`
//! overrides applied in order, and a mandatory `--seed`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use hpn_core::config::{parse_override, RunConfig};
use hpn_core::evalbench::{self, BenchmarkRow};
use hpn_core::policy_net::{HpnModel, OraclePolicy, Policy, Variant};
use hpn_core::rollout;
use hpn_core::training::{self, RunControl};
use hpn_core::trajdata::{self, IngestOptions, TrainingSequence};
use hpn_core::weak_labels::{self, WeakLabels};
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] hpn_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use hpn_core::Error as E;
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(E::Config(_) | E::Unsupported { .. }) => EXIT_USAGE,
            CliError::Core(E::Divergence { .. }) => EXIT_DIVERGENCE,
            CliError::Core(_) => EXIT_DATA,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "hpn", version, about = "Hierarchical policy network experiments")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Seed for every random stream. Required.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Configuration document.
    #[arg(long, global = true, env = "HPN_CONFIG")]
    pub config: Option<PathBuf>,
    /// Override one key, as section.key=value. May be repeated.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Worker threads (results do not depend on it).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a possession corpus.
    Synth,
    /// Window the corpus and write the weak-label sidecar.
    Label,
    /// Train one variant through its stage schedule.
    Train {
        /// Defaults to model.variant.
        #[arg(long)]
        variant: Option<String>,
        /// Checkpoint and stop after this many epochs; rerun to resume.
        #[arg(long)]
        stop_after: Option<usize>,
        /// Discard an existing checkpoint instead of resuming it.
        #[arg(long)]
        fresh: bool,
    },
    /// Roll out a trained variant on holdout sequences.
    Rollout {
        #[arg(long)]
        variant: Option<String>,
    },
    /// Benchmark trained variants on the holdout set.
    Bench {
        /// Variants to compare (comma separated); defaults to every trained
        /// variant of the repro list.
        #[arg(long, value_delimiter = ',')]
        variant: Vec<String>,
        /// Add a row for the weak-label oracle.
        #[arg(long)]
        oracle: bool,
    },
    /// Draw saved rollouts as SVG.
    Render {
        #[arg(long)]
        variant: Option<String>,
    },
    /// The whole pipeline: synth, label, train every repro variant, roll
    /// out, bench and render.
    Repro,
    /// Print the effective configuration.
    Config,
}

/// Parses `args` and runs the command, returning the process exit code.
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
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("hpn: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(&cli.global)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.threads.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    let p = Pipeline::new(cfg);
    pool.install(|| match &cli.command {
        Command::Synth => p.synth().map(drop),
        Command::Label => p.label().map(drop),
        Command::Train {
            variant,
            stop_after,
            fresh,
        } => {
            let v = p.variant_arg(variant.as_deref())?;
            p.train(v, *stop_after, *fresh)
        }
        Command::Rollout { variant } => {
            let v = p.variant_arg(variant.as_deref())?;
            p.rollout(v).map(drop)
        }
        Command::Bench { variant, oracle } => {
            let vs = variant.iter().map(|s| Variant::parse(s)).collect::<hpn_core::Result<Vec<_>>>()?;
            p.bench(&vs, *oracle).map(drop)
        }
        Command::Render { variant } => {
            let v = p.variant_arg(variant.as_deref())?;
            p.render(v).map(drop)
        }
        Command::Repro => p.repro(),
        Command::Config => {
            print!("{}", p.cfg.to_document()?);
            Ok(())
        }
    })
}

/// Loads the document, applies overrides and the seed, and validates.
pub fn resolve_config(g: &GlobalArgs) -> Result<RunConfig> {
    let seed = g
        .seed
        .ok_or_else(|| CliError::Usage("--seed is required; every run must name its seed".into()))?;
    let base = match &g.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let sets = g.overrides.iter().map(|s| parse_override(s)).collect::<hpn_core::Result<Vec<_>>>()?;
    let cfg = base.apply(&sets)?.with_seed(seed);
    cfg.validate()?;
    Ok(cfg)
}

/// The holdout split with labels attached.
pub struct Dataset {
    pub train: Vec<TrainingSequence>,
    pub train_labels: Vec<WeakLabels>,
    pub holdout: Vec<TrainingSequence>,
    pub holdout_labels: Vec<WeakLabels>,
}

/// Artifact locations and the steps that produce them.
pub struct Pipeline {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d)?;
    }
    Ok(())
}

fn remove_if_present(path: &Path) -> Result<()> {
    match std::fs::remove_file(path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(e.into()),
        _ => Ok(()),
    }
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> Self {
        let out = cfg.out_dir();
        Pipeline { cfg, out }
    }

    pub fn possessions_path(&self) -> PathBuf {
        if self.cfg.paths.possessions.is_empty() {
            self.out.join("possessions.jsonl")
        } else {
            PathBuf::from(&self.cfg.paths.possessions)
        }
    }

    pub fn labels_path(&self) -> PathBuf {
        self.out.join("labels.jsonl")
    }

    pub fn model_path(&self, v: Variant) -> PathBuf {
        self.out.join("models").join(format!("{v}.ckpt"))
    }

    pub fn report_path(&self, v: Variant) -> PathBuf {
        self.out.join("reports").join(format!("{v}.csv"))
    }

    pub fn rollout_path(&self, v: Variant) -> PathBuf {
        self.out.join("rollouts").join(format!("{v}.jsonl"))
    }

    pub fn render_dir(&self, v: Variant) -> PathBuf {
        self.out.join("render").join(v.name())
    }

    pub fn bench_path(&self) -> PathBuf {
        self.out.join("benchmark.csv")
    }

    fn variant_arg(&self, v: Option<&str>) -> Result<Variant> {
        Ok(match v {
            Some(s) => Variant::parse(s)?,
            None => self.cfg.model.variant,
        })
    }

    pub fn synth(&self) -> Result<PathBuf> {
        let possessions = trajdata::synthesize(&self.cfg.synth, &self.cfg.court)?;
        let path = self.out.join("possessions.jsonl");
        ensure_parent(&path)?;
        trajdata::save_possessions(&path, &possessions)?;
        println!("wrote {} possessions to {}", possessions.len(), path.display());
        Ok(path)
    }

    pub fn sequences(&self) -> Result<Vec<TrainingSequence>> {
        let opts = IngestOptions {
            court: self.cfg.court.clone(),
            ..IngestOptions::default()
        };
        let possessions = trajdata::ingest(&self.possessions_path(), &opts)?;
        Ok(trajdata::build_sequences(&possessions, &self.cfg.court, &self.cfg.window, self.cfg.seed()))
    }

    pub fn label(&self) -> Result<PathBuf> {
        let seqs = self.sequences()?;
        let labels = weak_labels::label_all(&seqs, &self.cfg.court, &self.cfg.labels);
        let path = self.labels_path();
        ensure_parent(&path)?;
        weak_labels::save_sidecar(&path, &seqs, &labels)?;
        println!("wrote labels for {} sequences to {}", seqs.len(), path.display());
        Ok(path)
    }

    /// Sequences and their sidecar labels, split into train and holdout.
    pub fn dataset(&self) -> Result<Dataset> {
        let seqs = self.sequences()?;
        let records = weak_labels::read_sidecar(&self.labels_path())?;
        if records.len() != seqs.len() {
            return Err(hpn_core::Error::Data(format!(
                "label sidecar has {} records for {} sequences; rerun label",
                records.len(),
                seqs.len()
            ))
            .into());
        }
        let mut pairs = Vec::with_capacity(seqs.len());
        for (s, r) in seqs.into_iter().zip(records) {
            if r.possession_id != s.possession_id || r.focal_agent != s.focal_agent || r.t0 != s.t0 || r.labels.len() != s.len() {
                return Err(hpn_core::Error::Data(format!(
                    "label sidecar does not match sequence {}/{} at {}; rerun label",
                    s.possession_id, s.focal_agent, s.t0
                ))
                .into());
            }
            pairs.push((s, r.labels));
        }
        let (train, holdout) = trajdata::split_by(pairs, |(s, _)| s.possession_id.as_str(), self.cfg.split.holdout_fraction, self.cfg.seed())?;
        let (train, train_labels) = train.into_iter().unzip();
        let (holdout, holdout_labels) = holdout.into_iter().unzip();
        Ok(Dataset {
            train,
            train_labels,
            holdout,
            holdout_labels,
        })
    }

    fn fresh_model(&self, v: Variant) -> Result<HpnModel> {
        let arch = self.cfg.model.clone().with_variant(v);
        arch.validate(&self.cfg.court)?;
        Ok(HpnModel::new(&self.cfg.court, &arch, self.cfg.seed())?)
    }

    pub fn load_model(&self, v: Variant) -> Result<HpnModel> {
        let path = self.model_path(v);
        if !path.exists() {
            return Err(hpn_core::Error::Data(format!("no checkpoint at {}; run train first", path.display())).into());
        }
        let mut m = self.fresh_model(v)?;
        m.load(&path)?;
        Ok(m)
    }

    fn check_trainable(&self, v: Variant) -> Result<()> {
        self.cfg.train.schedule_for(v)?;
        self.cfg.model.clone().with_variant(v).validate(&self.cfg.court)?;
        Ok(())
    }

    pub fn train(&self, v: Variant, stop_after: Option<usize>, fresh: bool) -> Result<()> {
        self.check_trainable(v)?;
        let data = self.dataset()?;
        let ckpt = self.model_path(v);
        if fresh {
            remove_if_present(&ckpt)?;
            remove_if_present(&training::best_path(&ckpt))?;
        }
        ensure_parent(&ckpt)?;
        let mut model = self.fresh_model(v)?;
        let td = training::TrainData {
            spec: &self.cfg.court,
            segmentation: &self.cfg.labels,
            train: &data.train,
            train_labels: &data.train_labels,
            holdout: &data.holdout,
            holdout_labels: &data.holdout_labels,
        };
        let ctl = RunControl {
            checkpoint: Some(ckpt.clone()),
            stop_after_epochs: stop_after,
        };
        let outcome = training::train_resumable(&mut model, &td, &self.cfg.train, &ctl)?;
        let report = self.report_path(v);
        ensure_parent(&report)?;
        std::fs::write(&report, outcome.report.to_csv()?)?;
        let epochs = outcome.report.epochs.len();
        if outcome.finished {
            println!("trained {v}: {epochs} epochs, checkpoint {}", ckpt.display());
        } else {
            println!("paused {v} after {epochs} epochs; rerun to resume from {}", ckpt.display());
        }
        Ok(())
    }

    pub fn rollout(&self, v: Variant) -> Result<PathBuf> {
        let model = self.load_model(v)?;
        let data = self.dataset()?;
        let n = self.cfg.eval.rollout_count.min(data.holdout.len());
        let results = rollout::batch_rollout(&model, &data.holdout[..n], &self.cfg.rollout)?;
        let path = self.rollout_path(v);
        ensure_parent(&path)?;
        rollout::save_jsonl(&path, &results)?;
        println!("wrote {} rollouts of {v} to {}", results.len(), path.display());
        Ok(path)
    }

    pub fn bench(&self, variants: &[Variant], oracle: bool) -> Result<Vec<BenchmarkRow>> {
        let variants: Vec<Variant> = if variants.is_empty() {
            self.cfg.repro.variants.iter().copied().filter(|&v| self.model_path(v).exists()).collect()
        } else {
            variants.to_vec()
        };
        if variants.is_empty() && !oracle {
            return Err(hpn_core::Error::Data("no trained variants to benchmark".into()).into());
        }
        let data = self.dataset()?;
        let models = variants.iter().map(|&v| self.load_model(v)).collect::<Result<Vec<_>>>()?;
        let oracle_policy = OraclePolicy {
            spec: self.cfg.court.clone(),
            labels: data.holdout_labels.clone(),
        };
        let mut policies: Vec<&dyn Policy> = models.iter().map(|m| m as &dyn Policy).collect();
        if oracle {
            policies.push(&oracle_policy);
        }
        let rows = evalbench::benchmark(&policies, &data.holdout, &data.holdout_labels, self.cfg.eval.burn_in_steps)?;
        let path = self.bench_path();
        ensure_parent(&path)?;
        std::fs::write(&path, evalbench::benchmark_csv(&rows)?)?;
        println!("wrote {} benchmark rows to {}", rows.len(), path.display());
        Ok(rows)
    }

    pub fn render(&self, v: Variant) -> Result<Vec<PathBuf>> {
        let results = rollout::read_jsonl(&self.rollout_path(v))?;
        let data = self.dataset()?;
        let n = self.cfg.eval.render_count.min(results.len());
        let mut seqs = Vec::with_capacity(n);
        for r in &results[..n] {
            let s = data
                .holdout
                .iter()
                .find(|s| s.possession_id == r.possession_id && s.focal_agent == r.focal_agent && s.t0 == r.t0)
                .ok_or_else(|| hpn_core::Error::Data(format!("rollout {}/{} has no holdout sequence", r.possession_id, r.focal_agent)))?;
            seqs.push(s.clone());
        }
        let dir = self.render_dir(v);
        let paths = evalbench::render(&results[..n], &seqs, &self.cfg.court, &self.cfg.render, &dir)?;
        println!("rendered {} rollouts of {v} into {}", paths.len(), dir.display());
        Ok(paths)
    }

    pub fn repro(&self) -> Result<()> {
        for &v in &self.cfg.repro.variants {
            self.check_trainable(v)?;
        }
        std::fs::create_dir_all(&self.out)?;
        std::fs::write(self.out.join("config.hpn"), format!("# --seed {}\n{}", self.cfg.seed(), self.cfg.to_document()?))?;
        if self.cfg.paths.possessions.is_empty() {
            self.synth()?;
        }
        self.label()?;
        for &v in &self.cfg.repro.variants {
            self.train(v, None, true)?;
            self.rollout(v)?;
        }
        self.bench(&self.cfg.repro.variants, false)?;
        for &v in &self.cfg.repro.variants {
            self.render(v)?;
        }
        Ok(())
    }
}
