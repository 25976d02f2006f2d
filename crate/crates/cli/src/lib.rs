//! The `prefdiff` command line: configuration, persistence and dispatch.

pub mod config;

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use prefdiff::denoiser::{read_checkpoint, write_checkpoint};
use prefdiff::sampling::SamplerConfig;
use prefdiff::toyworld::{self, Curated, DiffusionGenerator, Pipeline, TaskKind};
use prefdiff::trainer::{self, MetricRecord, MetricsCollector, TimePolicy, TrainObserver};
use prefdiff::variancelab::compare_variance;
use prefdiff::{checks, DenoiserParams};

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value for {key}: {msg}")]
    Value { key: String, msg: String },
    #[error("config line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error(
        "config version {0} cannot be read by this build, which reads version {v}; \
         regenerate the file or port its keys to version {v}",
        v = config::CONFIG_VERSION
    )]
    Version(u32),
    #[error("config has no version key; add version={} as the first line", config::CONFIG_VERSION)]
    MissingVersion,
    #[error("{path}: {source}")]
    File { path: PathBuf, source: io::Error },
    #[error("{0}")]
    Invalid(String),
    #[error("{count} of {total} checks failed")]
    ChecksFailed { count: usize, total: usize },
    #[error(transparent)]
    Core(#[from] prefdiff::Error),
}

impl CliError {
    /// Stable category used in the one-line error report.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::UnknownKey(_)
            | CliError::Value { .. }
            | CliError::Syntax { .. }
            | CliError::MissingVersion => "config",
            CliError::Version(_) => "migration",
            CliError::File { .. } => "io",
            CliError::Invalid(_) => "invalid",
            CliError::ChecksFailed { .. } => "verify",
            CliError::Core(prefdiff::Error::Io(_)) => "io",
            CliError::Core(prefdiff::Error::Diverged { .. }) => "diverged",
            CliError::Core(_) => "core",
        }
    }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

fn at(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::File {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Parser, Debug)]
#[command(name = "prefdiff", version, about = "Preference fine-tuning of toy conditional diffusion models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run configuration; flags given on the command line take precedence.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    /// Single worker; results do not depend on it, but reduction order is fixed.
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Args, Debug, Clone)]
pub struct OutDir {
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Discrete,
    Continuous,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Cpo,
    Dpo,
}

impl MethodArg {
    fn pipeline(self) -> Pipeline {
        match self {
            MethodArg::Cpo => Pipeline::Cpo,
            MethodArg::Dpo => Pipeline::Dpo,
        }
    }

    fn name(self) -> &'static str {
        match self {
            MethodArg::Cpo => "cpo",
            MethodArg::Dpo => "dpo",
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Pretrain the base denoiser on fresh task data.
    TrainBase {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        out: OutDir,
    },
    /// Build a preference dataset by sampling the base model.
    Curate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        out: OutDir,
        #[arg(long, value_enum)]
        method: MethodArg,
        /// Base checkpoint [default: OUT/base.ckpt].
        #[arg(long, value_name = "PATH")]
        base: Option<PathBuf>,
    },
    /// Fine-tune a copy of the base model on curated preferences.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        out: OutDir,
        #[arg(long, value_enum)]
        method: MethodArg,
        /// Base checkpoint [default: OUT/base.ckpt].
        #[arg(long, value_name = "PATH")]
        base: Option<PathBuf>,
        /// Curated records [default: OUT/METHOD.tsv].
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
    },
    /// Controllability, error rate and MMD of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        out: OutDir,
        /// Checkpoint to evaluate [default: OUT/base.ckpt].
        #[arg(long, value_name = "PATH")]
        model: Option<PathBuf>,
        /// Evaluate at every scale of eval.cfg_scales instead of eval.guidance.
        #[arg(long)]
        cfg_sweep: bool,
        /// Comma-separated guidance scales; implies a sweep.
        #[arg(long, value_name = "LIST", value_delimiter = ',')]
        cfg_scales: Option<Vec<f64>>,
    },
    /// Score-difference variance of matched CPO and DPO data.
    Variance {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        out: OutDir,
        /// Base checkpoint [default: OUT/base.ckpt].
        #[arg(long, value_name = "PATH")]
        base: Option<PathBuf>,
        /// CPO records [default: OUT/cpo.tsv].
        #[arg(long, value_name = "PATH")]
        cpo: Option<PathBuf>,
        /// DPO records [default: OUT/dpo.tsv].
        #[arg(long, value_name = "PATH")]
        dpo: Option<PathBuf>,
    },
    /// Exact-math and Monte Carlo checks that need no trained model.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Aggregate metrics logs into one sorted CSV.
    Report {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        out: OutDir,
        /// Metrics logs [default: OUT/metrics.tsv].
        logs: Vec<PathBuf>,
    },
}

/// Resolved configuration and worker count for one invocation.
struct Ctx {
    cfg: RunConfig,
    workers: usize,
}

impl Ctx {
    fn new(common: &Common, out: Option<&Path>) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(p) => RunConfig::parse(&fs::read_to_string(p).map_err(at(p))?)?,
            None => RunConfig::default(),
        };
        if let Some(s) = common.seed {
            cfg.run.seed = s;
        }
        if let Some(t) = common.task {
            cfg.task.kind = match t {
                TaskArg::Discrete => TaskKind::Discrete,
                TaskArg::Continuous => TaskKind::Continuous,
            };
        }
        cfg.run.deterministic |= common.deterministic;
        if let Some(o) = out {
            cfg.run.out = o.to_path_buf();
        }
        cfg.validate()?;
        let workers = if cfg.run.deterministic {
            1
        } else {
            worker_hint(std::env::var("PREFDIFF_THREADS").ok().as_deref())?
        };
        Ok(Self { cfg, workers })
    }

    fn out(&self, name: &str) -> PathBuf {
        self.cfg.run.out.join(name)
    }

    /// Creates the output directory and records the resolved configuration
    /// before any work starts.
    fn provenance(&self) -> Result<()> {
        let dir = &self.cfg.run.out;
        fs::create_dir_all(dir).map_err(at(dir))?;
        let p = self.out("run.cfg");
        fs::write(&p, self.cfg.to_text()).map_err(at(&p))
    }

    fn load_model(&self, path: Option<&PathBuf>, default: &str) -> Result<DenoiserParams> {
        let p = path.cloned().unwrap_or_else(|| self.out(default));
        let f = File::open(&p).map_err(at(&p))?;
        let params = read_checkpoint(BufReader::new(f))?;
        if params.arch().condition != self.cfg.task.condition_space() {
            return Err(CliError::Invalid(format!(
                "{} was trained for {:?}, the configured task uses {:?}",
                p.display(),
                params.arch().condition,
                self.cfg.task.condition_space()
            )));
        }
        Ok(params)
    }

    fn save_model(&self, params: &DenoiserParams, name: &str) -> Result<PathBuf> {
        save_checkpoint(params, &self.out(name))?;
        Ok(self.out(name))
    }

    fn append_metrics(&self, records: &[MetricRecord]) -> Result<()> {
        let p = self.out("metrics.tsv");
        let f = OpenOptions::new().create(true).append(true).open(&p).map_err(at(&p))?;
        let mut w = BufWriter::new(f);
        trainer::write_metrics(records, &mut w)?;
        w.flush().map_err(at(&p))
    }
}

fn save_checkpoint(params: &DenoiserParams, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(at(path))?);
    write_checkpoint(params, &mut w)?;
    w.flush().map_err(at(path))
}

/// Worker count from `PREFDIFF_THREADS`, else the available parallelism.
pub fn worker_hint(env: Option<&str>) -> Result<usize> {
    match env {
        Some(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Invalid(format!("PREFDIFF_THREADS must be a positive integer, got {s:?}"))),
        },
        None => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Records loss metrics and writes periodic checkpoints as `PREFIX-stepN.ckpt`.
struct RunObserver {
    metrics: MetricsCollector,
    dir: PathBuf,
    prefix: &'static str,
}

impl TrainObserver for RunObserver {
    fn metric(&mut self, step: usize, name: &str, value: f64) {
        self.metrics.push(step, name, value);
    }

    fn checkpoint(&mut self, step: usize, params: &DenoiserParams) -> prefdiff::Result<()> {
        let p = self.dir.join(format!("{}-step{step}.ckpt", self.prefix));
        save_checkpoint(params, &p).map_err(|e| prefdiff::Error::Checkpoint(e.to_string()))
    }
}

fn train_base(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let mut obs = RunObserver {
        metrics: MetricsCollector::new("base", cfg.run.seed),
        dir: cfg.run.out.clone(),
        prefix: "base",
    };
    let outcome = trainer::train_base_with_arch(&cfg.task, cfg.arch(), &cfg.schedule()?, &cfg.base_training(), &mut obs)?;
    let path = ctx.save_model(&outcome.params, "base.ckpt")?;
    ctx.append_metrics(&obs.metrics.records)?;
    let last = outcome.losses.last().copied().unwrap_or(f64::NAN);
    println!("steps={} final_loss={last:?} checkpoint={}", outcome.losses.len(), path.display());
    Ok(())
}

fn curate(ctx: &Ctx, method: MethodArg, base: Option<&PathBuf>) -> Result<()> {
    let cfg = &ctx.cfg;
    let params = ctx.load_model(base, "base.ckpt")?;
    let schedule = cfg.schedule()?;
    let generator = DiffusionGenerator {
        params: &params,
        schedule: &schedule,
        sampler: SamplerConfig {
            guidance: cfg.curate.guidance,
            workers: ctx.workers,
        },
    };
    let sources = toyworld::sample_dataset(&cfg.task, cfg.curate.sources, cfg.run.seed)?;
    let seed = cfg.run.seed;
    let (data, stats) = match method {
        MethodArg::Cpo => {
            let (v, s) = toyworld::curate_cpo(&cfg.task, &generator, &sources, seed)?;
            (Curated::Cpo(v), s)
        }
        MethodArg::Dpo => {
            let (v, s) = toyworld::curate_dpo(&cfg.task, &generator, &sources, &cfg.dpo_curation(), seed)?;
            (Curated::Dpo(v), s)
        }
    };
    let path = ctx.out(&format!("{}.tsv", method.name()));
    let mut w = BufWriter::new(File::create(&path).map_err(at(&path))?);
    toyworld::write_records(&data, &mut w)?;
    w.flush().map_err(at(&path))?;

    let mut m = MetricsCollector::new(format!("curate-{}", method.name()), seed);
    for (name, v) in [
        ("sources", stats.sources),
        ("generator_calls", stats.generator_calls),
        ("emitted", stats.emitted),
        ("same_condition", stats.same_condition),
        ("quality_filtered", stats.quality_filtered),
        ("tied", stats.tied),
        ("non_finite", stats.non_finite),
    ] {
        m.push(0, name, v as f64);
    }
    ctx.append_metrics(&m.records)?;
    println!(
        "method={} sources={} generator_calls={} emitted={} same_condition={} quality_filtered={} tied={} non_finite={} records={}",
        method.name(),
        stats.sources,
        stats.generator_calls,
        stats.emitted,
        stats.same_condition,
        stats.quality_filtered,
        stats.tied,
        stats.non_finite,
        path.display()
    );
    Ok(())
}

fn read_curated(path: &Path) -> Result<Curated> {
    let f = File::open(path).map_err(at(path))?;
    toyworld::read_records(BufReader::new(f))?
        .ok_or_else(|| CliError::Invalid(format!("{} holds no records", path.display())))
}

fn finetune(ctx: &Ctx, method: MethodArg, base: Option<&PathBuf>, data: Option<&PathBuf>) -> Result<()> {
    let cfg = &ctx.cfg;
    let params = ctx.load_model(base, "base.ckpt")?;
    let data_path = data.cloned().unwrap_or_else(|| ctx.out(&format!("{}.tsv", method.name())));
    let curated = read_curated(&data_path)?;
    let prefix = match method {
        MethodArg::Cpo => "cpo",
        MethodArg::Dpo => "dpo",
    };
    let mut obs = RunObserver {
        metrics: MetricsCollector::new(format!("finetune-{prefix}"), cfg.run.seed),
        dir: cfg.run.out.clone(),
        prefix,
    };
    let outcome = trainer::finetune(
        method.pipeline(),
        &params,
        &curated,
        &cfg.schedule()?,
        &cfg.finetuning(),
        &mut obs,
    )?;
    let path = ctx.save_model(&outcome.params, &format!("{prefix}.ckpt"))?;
    ctx.append_metrics(&obs.metrics.records)?;
    let last = outcome.losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "method={prefix} records={} steps={} final_loss={last:?} checkpoint={}",
        curated.len(),
        outcome.losses.len(),
        path.display()
    );
    Ok(())
}

fn eval(ctx: &Ctx, model: Option<&PathBuf>, sweep: bool, scales: Option<&Vec<f64>>) -> Result<()> {
    let cfg = &ctx.cfg;
    let path = model.cloned().unwrap_or_else(|| ctx.out("base.ckpt"));
    let params = ctx.load_model(Some(&path), "base.ckpt")?;
    let scales: Vec<f64> = match scales {
        Some(s) => s.clone(),
        None if sweep => cfg.eval.cfg_scales.clone(),
        None => vec![cfg.eval.guidance],
    };
    if scales.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(CliError::Invalid("guidance scales must be finite and non-negative".into()));
    }
    let reports = trainer::cfg_sweep(
        &params,
        &cfg.task,
        &cfg.schedule()?,
        &scales,
        cfg.eval.n_samples,
        cfg.run.seed,
        ctx.workers,
    )?;
    let stem = path.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
    let mut m = MetricsCollector::new(String::new(), cfg.run.seed);
    for r in &reports {
        m.run_id = format!("eval-{stem}-w{:?}", r.guidance);
        for (name, v) in r.records() {
            m.push(0, name, v);
        }
        println!(
            "model={stem} guidance={:?} controllability={:?} oracle_controllability={:?} error_rate={:?} mmd={:?} n_samples={} non_finite={} condition_hash={}",
            r.guidance,
            r.controllability,
            r.oracle_controllability,
            r.error_rate,
            r.mmd,
            r.n_samples,
            r.non_finite,
            r.condition_hash
        );
    }
    ctx.append_metrics(&m.records)
}

fn variance(ctx: &Ctx, base: Option<&PathBuf>, cpo: Option<&PathBuf>, dpo: Option<&PathBuf>) -> Result<()> {
    let cfg = &ctx.cfg;
    let params = ctx.load_model(base, "base.ckpt")?;
    let cpo = read_curated(&cpo.cloned().unwrap_or_else(|| ctx.out("cpo.tsv")))?;
    let dpo = read_curated(&dpo.cloned().unwrap_or_else(|| ctx.out("dpo.tsv")))?;
    if cpo.pipeline() != Pipeline::Cpo || dpo.pipeline() != Pipeline::Dpo {
        return Err(CliError::Invalid("variance needs CPO records for --cpo and DPO records for --dpo".into()));
    }
    let schedule = cfg.schedule()?;
    let path = ctx.out("variance.txt");
    let mut w = BufWriter::new(File::create(&path).map_err(at(&path))?);
    let (ce, de) = (cpo.examples(), dpo.examples());
    for &t in &cfg.variance.timesteps {
        let rep = compare_variance(
            &params,
            &schedule,
            &ce,
            &de,
            TimePolicy::Fixed(t),
            cfg.variance.n_draws,
            cfg.run.seed,
        )?;
        let line = format!("{} cpo_lower={}", rep.to_record(), rep.cpo_lower());
        println!("{line}");
        writeln!(w, "{line}").map_err(at(&path))?;
    }
    w.flush().map_err(at(&path))
}

fn verify(ctx: &Ctx, out: bool) -> Result<()> {
    let results = checks::run_all(ctx.cfg.run.seed)?;
    let mut text = String::from("check\tvalue\ttolerance\tresult\n");
    for c in &results {
        text.push_str(&format!("{c}\n"));
    }
    print!("{text}");
    if out {
        let p = ctx.out("verify.tsv");
        fs::write(&p, &text).map_err(at(&p))?;
    }
    let failed = results.iter().filter(|c| !c.pass).count();
    if failed > 0 {
        return Err(CliError::ChecksFailed {
            count: failed,
            total: results.len(),
        });
    }
    Ok(())
}

/// Every record of the given logs as CSV, sorted so the output only
/// depends on the set of input lines.
pub fn report_csv(logs: &[PathBuf]) -> Result<Vec<u8>> {
    let mut records = Vec::new();
    for p in logs {
        let f = File::open(p).map_err(at(p))?;
        records.extend(trainer::read_metrics(BufReader::new(f))?);
    }
    records.sort_by(|a, b| {
        (&a.run_id, &a.metric, a.step, a.seed)
            .cmp(&(&b.run_id, &b.metric, b.step, b.seed))
            .then(a.value.total_cmp(&b.value))
    });
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Invalid(format!("csv: {e}"));
    w.write_record(["run_id", "step", "metric", "value", "seed"]).map_err(csv_err)?;
    for r in &records {
        w.write_record([
            r.run_id.clone(),
            r.step.to_string(),
            r.metric.clone(),
            format!("{:?}", r.value),
            r.seed.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| CliError::Invalid(format!("csv: {e}")))
}

fn report(ctx: &Ctx, logs: &[PathBuf]) -> Result<()> {
    let logs = if logs.is_empty() {
        vec![ctx.out("metrics.tsv")]
    } else {
        logs.to_vec()
    };
    let csv = report_csv(&logs)?;
    let p = ctx.out("report.csv");
    fs::write(&p, &csv).map_err(at(&p))?;
    println!("rows={} report={}", csv.iter().filter(|&&b| b == b'\n').count().saturating_sub(1), p.display());
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::TrainBase { common, out } => {
            let ctx = Ctx::new(common, Some(&out.out))?;
            ctx.provenance()?;
            train_base(&ctx)
        }
        Command::Curate {
            common,
            out,
            method,
            base,
        } => {
            let ctx = Ctx::new(common, Some(&out.out))?;
            ctx.provenance()?;
            curate(&ctx, *method, base.as_ref())
        }
        Command::Finetune {
            common,
            out,
            method,
            base,
            data,
        } => {
            let ctx = Ctx::new(common, Some(&out.out))?;
            ctx.provenance()?;
            finetune(&ctx, *method, base.as_ref(), data.as_ref())
        }
        Command::Eval {
            common,
            out,
            model,
            cfg_sweep,
            cfg_scales,
        } => {
            let ctx = Ctx::new(common, Some(&out.out))?;
            ctx.provenance()?;
            eval(&ctx, model.as_ref(), *cfg_sweep, cfg_scales.as_ref())
        }
        Command::Variance {
            common,
            out,
            base,
            cpo,
            dpo,
        } => {
            let ctx = Ctx::new(common, Some(&out.out))?;
            ctx.provenance()?;
            variance(&ctx, base.as_ref(), cpo.as_ref(), dpo.as_ref())
        }
        Command::Verify { common, out } => {
            let ctx = Ctx::new(common, out.as_deref())?;
            if out.is_some() {
                ctx.provenance()?;
            }
            verify(&ctx, out.is_some())
        }
        Command::Report { common, out, logs } => {
            let ctx = Ctx::new(common, Some(&out.out))?;
            ctx.provenance()?;
            report(&ctx, logs)
        }
    }
}
