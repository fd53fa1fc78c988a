//! `lcmem` command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lcmem_core::atlas::fingerprint_hex;
use lcmem_core::metrics::{CalibrationResult, SweepEntry};
use lcmem_core::world::{generate_corpus, Corpus};
use serde::{Deserialize, Serialize};

use crate::config::{resolve_threads, RunConfig};
use crate::error::{Error, Result};
use crate::io::{self, LoadedModel, SCHEMA_VERSION};
use crate::pipeline::{self, TrainPlan};
use crate::report;

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";

#[derive(Debug, Parser)]
#[command(name = "lcmem", version, about = "Latent-space memorization detector: train, evaluate and audit")]
pub struct Cli {
    /// JSON run configuration; omitted sections take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Directory that receives every output.
    #[arg(long, global = true, value_name = "DIR", default_value = "lcmem-out")]
    pub out: PathBuf,
    /// Seed applied to every seeded stage.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Worker threads (0 = one per core); falls back to LCMEM_THREADS.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthetic corpus generation.
    #[command(subcommand)]
    Corpus(CorpusCommand),
    /// Detector training.
    #[command(subcommand)]
    Train(TrainCommand),
    /// Re-identification and copy-detection evaluation.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Feature atlas construction.
    #[command(subcommand)]
    Atlas(AtlasCommand),
    /// Exhaustive scoring and memorization rates.
    #[command(subcommand)]
    Audit(AuditCommand),
    /// Scoring-engine benchmarks.
    #[command(subcommand)]
    Bench(BenchCommand),
}

#[derive(Debug, Subcommand)]
pub enum CorpusCommand {
    /// Writes `<out>/corpus`.
    Gen,
}

#[derive(Debug, Clone, Args)]
pub struct CorpusArg {
    /// Corpus directory (default `<out>/corpus`).
    #[arg(long, value_name = "DIR")]
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArg {
    /// Parameter file with `detector.json` beside it (default `<out>/model/detector.lcmp`).
    #[arg(long, value_name = "PATH")]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum TrainCommand {
    Stage1 {
        #[command(flatten)]
        corpus: CorpusArg,
    },
    Stage2 {
        #[command(flatten)]
        corpus: CorpusArg,
        /// Stage-one checkpoint (default `<out>/model/stage1.lcmp`).
        #[arg(long, value_name = "PATH")]
        init: Option<PathBuf>,
    },
    Full {
        #[command(flatten)]
        corpus: CorpusArg,
    },
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    Reid {
        #[command(flatten)]
        corpus: CorpusArg,
        #[command(flatten)]
        model: ModelArg,
    },
    Copy {
        #[command(flatten)]
        corpus: CorpusArg,
        #[command(flatten)]
        model: ModelArg,
        /// Augmentation sweep JSON (default: the config's `eval.sweep`).
        #[arg(long, value_name = "PATH")]
        sweep: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum AtlasCommand {
    Build {
        #[command(flatten)]
        corpus: CorpusArg,
        #[command(flatten)]
        model: ModelArg,
    },
}

#[derive(Debug, Subcommand)]
pub enum AuditCommand {
    #[command(name = "one-vs-all")]
    OneVsAll {
        #[command(flatten)]
        model: ModelArg,
        /// Default `<out>/atlas/atlas.lcma`.
        #[arg(long, value_name = "PATH")]
        atlas: Option<PathBuf>,
        /// Query features (default `<out>/atlas/queries.lcma`).
        #[arg(long, value_name = "PATH")]
        queries: Option<PathBuf>,
        /// Needed only when `audit.calibration` is set.
        #[command(flatten)]
        corpus: CorpusArg,
    },
    Memrate {
        #[command(flatten)]
        corpus: CorpusArg,
        #[command(flatten)]
        model: ModelArg,
    },
}

#[derive(Debug, Subcommand)]
pub enum BenchCommand {
    Throughput {
        /// Trained parameters; a seeded default-size model otherwise.
        #[arg(long, value_name = "PATH")]
        model: Option<PathBuf>,
    },
}

/// Sweep file: either a bare list of entries or `{schema_version, sweep}`.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum SweepFile {
    List(Vec<SweepEntry>),
    Doc {
        #[serde(default = "schema_version")]
        schema_version: u32,
        sweep: Vec<SweepEntry>,
    },
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

#[derive(Debug, Serialize)]
struct AtlasSummary<'a> {
    schema_version: u32,
    fingerprint: String,
    split: lcmem_core::world::Split,
    atlas_rows: usize,
    query_rows: usize,
    atlas: &'a Path,
    queries: Option<&'a Path>,
}

#[derive(Debug, Serialize)]
struct AuditDoc<'a> {
    schema_version: u32,
    fingerprint: String,
    calibration: CalibrationResult,
    #[serde(flatten)]
    report: &'a lcmem_core::atlas::AuditReport,
}

#[derive(Debug, Serialize)]
struct TrainDoc<'a> {
    schema_version: u32,
    fingerprint: String,
    #[serde(flatten)]
    report: &'a lcmem_core::training::TrainReport,
}

struct Context {
    cfg: RunConfig,
    out: PathBuf,
    threads: usize,
}

impl Context {
    fn corpus_dir(&self, arg: &CorpusArg) -> PathBuf {
        arg.corpus.clone().unwrap_or_else(|| self.out.join("corpus"))
    }

    fn model_path(&self, arg: &ModelArg) -> PathBuf {
        arg.model.clone().unwrap_or_else(|| self.out.join("model").join("detector.lcmp"))
    }

    fn load_corpus(&self, arg: &CorpusArg) -> Result<Corpus> {
        io::load_corpus(&self.corpus_dir(arg))
    }

    /// Loads the corpus, generating and saving it first when no directory
    /// was named and the default one is absent.
    fn corpus_for_training(&self, arg: &CorpusArg) -> Result<Corpus> {
        let dir = self.corpus_dir(arg);
        if arg.corpus.is_none() && !dir.join(io::MANIFEST_FILE).exists() {
            log::info!("generating corpus into {}", dir.display());
            let corpus = generate_corpus(&self.cfg.corpus)?;
            io::save_corpus(&dir, &corpus)?;
            return Ok(corpus);
        }
        let corpus = io::load_corpus(&dir)?;
        if corpus.spec != self.cfg.corpus {
            log::warn!("corpus at {} was generated with a different spec than the resolved config", dir.display());
        }
        Ok(corpus)
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    }
    .resolve(cli.seed)?;
    let threads = resolve_threads(cli.threads, cfg.threads)?;
    let ctx = Context { cfg, out: cli.out.clone(), threads };
    std::fs::create_dir_all(&ctx.out).map_err(|e| Error::io(&ctx.out, e))?;
    io::write_json(&ctx.out.join(RESOLVED_CONFIG_FILE), &ctx.cfg)?;

    match cli.command {
        Command::Corpus(CorpusCommand::Gen) => {
            let corpus = generate_corpus(&ctx.cfg.corpus)?;
            let m = io::save_corpus(&ctx.out.join("corpus"), &corpus)?;
            for s in &m.splits {
                log::info!("{}: {} images", s.split.name(), s.images);
            }
        }
        Command::Train(t) => run_train(&ctx, t)?,
        Command::Eval(EvalCommand::Reid { corpus, model }) => {
            let corpus = ctx.load_corpus(&corpus)?;
            let model = LoadedModel::load(&ctx.model_path(&model))?;
            let report = pipeline::eval_reid(&model, &corpus, &ctx.cfg, ctx.threads)?;
            log::info!("re-ID auc {:.4}, specificity@0.99 {:.4}", report.metrics.auc, report.metrics.specificity_at_sensitivity_99);
            io::write_json(&ctx.out.join("reid.json"), &report)?;
        }
        Command::Eval(EvalCommand::Copy { corpus, model, sweep }) => {
            let sweep = match sweep {
                Some(path) => load_sweep(&path)?,
                None => ctx.cfg.eval.sweep.clone(),
            };
            let corpus = ctx.load_corpus(&corpus)?;
            let model = LoadedModel::load(&ctx.model_path(&model))?;
            let report = pipeline::eval_copy(&model, &corpus, &ctx.cfg, &sweep, ctx.threads)?;
            report::write_curve(&ctx.out.join("robustness.csv"), &report.detector.rows)?;
            if !report.baselines.is_empty() {
                report::write_method_curves(&ctx.out.join("robustness_baselines.csv"), &report.baselines)?;
            }
            io::write_json(&ctx.out.join("copy.json"), &report)?;
        }
        Command::Atlas(AtlasCommand::Build { corpus, model }) => {
            let corpus = ctx.load_corpus(&corpus)?;
            let model = LoadedModel::load(&ctx.model_path(&model))?;
            let images = corpus.split(ctx.cfg.atlas.split);
            let (atlas, queries) =
                pipeline::build_atlas_pair(&model.detector()?, images, ctx.cfg.atlas.holdout_queries, ctx.cfg.seed)?;
            let dir = ctx.out.join("atlas");
            let atlas_path = dir.join("atlas.lcma");
            let query_path = dir.join("queries.lcma");
            io::save_atlas(&atlas_path, &atlas)?;
            if let Some(q) = &queries {
                io::save_atlas(&query_path, q)?;
            }
            let summary = AtlasSummary {
                schema_version: SCHEMA_VERSION,
                fingerprint: fingerprint_hex(&atlas.fingerprint),
                split: ctx.cfg.atlas.split,
                atlas_rows: atlas.rows(),
                query_rows: queries.as_ref().map_or(0, |q| q.rows()),
                atlas: &atlas_path,
                queries: queries.as_ref().map(|_| query_path.as_path()),
            };
            io::write_json(&dir.join("atlas.json"), &summary)?;
        }
        Command::Audit(AuditCommand::OneVsAll { model, atlas, queries, corpus }) => {
            let model = LoadedModel::load(&ctx.model_path(&model))?;
            let atlas = io::load_atlas(&atlas.unwrap_or_else(|| ctx.out.join("atlas").join("atlas.lcma")))?;
            let queries = io::load_atlas(&queries.unwrap_or_else(|| ctx.out.join("atlas").join("queries.lcma")))?;
            let val;
            let calibration = match ctx.cfg.audit.calibration {
                Some(target) => {
                    val = ctx.load_corpus(&corpus)?.val;
                    Some((target, val.as_slice(), ctx.cfg.seed))
                }
                None => None,
            };
            let (report, cal) =
                pipeline::audit_one_vs_all(&model, &atlas, &queries, ctx.cfg.audit.score, calibration, ctx.threads)?;
            log::info!(
                "{} pairs, {} flagged, {:.0} pairs/s on {} threads",
                report.total_pairs,
                report.flagged,
                report.pairs_per_second,
                report.threads
            );
            let doc = AuditDoc { schema_version: SCHEMA_VERSION, fingerprint: fingerprint_hex(&model.fingerprint), calibration: cal, report: &report };
            io::write_json(&ctx.out.join("audit.json"), &doc)?;
        }
        Command::Audit(AuditCommand::Memrate { corpus, model }) => {
            let corpus = ctx.load_corpus(&corpus)?;
            let model = LoadedModel::load(&ctx.model_path(&model))?;
            let report = pipeline::audit_memrate(&model, &corpus, &ctx.cfg.audit.memrate, ctx.cfg.seed)?;
            log::info!("mem rate {:.4} (expected {:.4})", report.mem_rate.rate, report.expected_mem_rate);
            io::write_json(&ctx.out.join("memrate.json"), &report)?;
        }
        Command::Bench(BenchCommand::Throughput { model }) => {
            let params = match model {
                Some(path) => io::load_params(&path)?,
                None => pipeline::bench_params(ctx.cfg.seed)?,
            };
            let mut bench = ctx.cfg.bench.clone();
            if ctx.cfg.threads != 0 || std::env::var_os(crate::config::THREADS_ENV).is_some() {
                bench.thread_counts.retain(|&t| t <= ctx.threads);
            }
            let report = pipeline::bench_throughput(&params, &bench, ctx.cfg.seed)?;
            for r in &report.runs {
                log::info!("{} threads: {:.0} pairs/s (x{:.2})", r.threads, r.pairs_per_second, r.speedup);
            }
            io::write_json(&ctx.out.join("bench.json"), &report)?;
        }
    }
    Ok(())
}

fn load_sweep(path: &Path) -> Result<Vec<SweepEntry>> {
    let sweep = match io::read_json::<SweepFile>(path)? {
        SweepFile::List(s) => s,
        SweepFile::Doc { schema_version, sweep } => {
            io::check_schema(path, schema_version)?;
            sweep
        }
    };
    lcmem_core::metrics::validate_sweep(&sweep)?;
    Ok(sweep)
}

fn run_train(ctx: &Context, cmd: TrainCommand) -> Result<()> {
    let model_dir = ctx.out.join("model");
    let (corpus_arg, plan, init) = match cmd {
        TrainCommand::Stage1 { corpus } => (corpus, TrainPlan::Stage1, None),
        TrainCommand::Stage2 { corpus, init } => {
            let path = init.unwrap_or_else(|| model_dir.join("stage1.lcmp"));
            (corpus, TrainPlan::Stage2, Some(io::load_params(&path)?))
        }
        TrainCommand::Full { corpus } => (corpus, TrainPlan::Full, None),
    };
    let corpus = ctx.corpus_for_training(&corpus_arg)?;
    let outcome = pipeline::train(&corpus, &ctx.cfg.train, ctx.cfg.mixing_seed, plan, init)?;
    for (name, stage) in [("stage1", &outcome.stage1), ("stage2", &outcome.stage2)] {
        if let Some((params, report)) = stage {
            io::save_params(&model_dir.join(format!("{name}.lcmp")), params)?;
            let fp = fingerprint_hex(&lcmem_core::atlas::fingerprint(params));
            io::write_json(&ctx.out.join(format!("train_{name}.json")), &TrainDoc { schema_version: SCHEMA_VERSION, fingerprint: fp, report })?;
        }
    }
    io::save_params(&model_dir.join("detector.lcmp"), outcome.final_params())?;
    io::save_detector_manifest(&model_dir, corpus.spec.shape, ctx.cfg.mixing_seed, &outcome.latents.normalizer)?;
    Ok(())
}

/// Parses `args`, runs the command and maps errors to exit codes.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
