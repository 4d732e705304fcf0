//! `typguard`: fit, score, eval, verify-theory, simulate.
//!
//! Results go to stdout (or `--out`). Failures print
//! `{"error": <kind>, "message": <text>}` to stderr and exit with status 2.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use typguard::detectors::DetectorKind;
use typguard::pipeline::{
    evaluate_score_files, fit_bundle, load_views, write_score_records, DetectorChoice, ModelBundle, PipelineConfig,
    ScoreField, ScoreOptions, ViewSource,
};
use typguard::stream::{read_trace, run_simulation, MarkerScorer, PipelineScorer};
use typguard::theory::verify_theory;
use typguard::{Error, FeatureSubset};

const FAILURE: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "typguard", version, about = "Typicality-based OOD detection and guardrail simulation")]
struct Cli {
    /// JSON pipeline config; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file; stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    threshold: Option<f64>,
    #[arg(long, global = true, value_enum)]
    subset: Option<SubsetArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SubsetArg {
    Full,
    Rc,
    Pd,
}

impl From<SubsetArg> for FeatureSubset {
    fn from(s: SubsetArg) -> Self {
        match s {
            SubsetArg::Full => FeatureSubset::Full,
            SubsetArg::Rc => FeatureSubset::RC,
            SubsetArg::Pd => FeatureSubset::PD,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DetectorArg {
    Gmm,
    Ocsvm,
    Both,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    Gmm,
    Ocsvm,
}

impl From<KindArg> for DetectorKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Gmm => DetectorKind::Gmm,
            KindArg::Ocsvm => DetectorKind::Ocsvm,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FieldArg {
    Raw,
    Normalized,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit detectors on reference embeddings and write a model bundle.
    Fit {
        /// Reference embedding files, one per view (replaces `reference_views`).
        #[arg(long, num_args = 1..)]
        views: Vec<PathBuf>,
        #[arg(long, value_enum)]
        detector: Option<DetectorArg>,
        /// Comma-separated k values.
        #[arg(long, value_delimiter = ',')]
        k: Vec<usize>,
    },
    /// Score test embeddings; one JSON line per sample.
    Score {
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// Test embedding files, one per view (replaces `test_views`).
        #[arg(long, num_args = 1..)]
        views: Vec<PathBuf>,
        #[arg(long, value_enum)]
        detector: Option<KindArg>,
    },
    /// Metrics for an ID and an OOD score file, OOD positive.
    Eval {
        #[arg(long)]
        id: PathBuf,
        #[arg(long)]
        ood: PathBuf,
        #[arg(long, value_enum, default_value = "normalized")]
        score_field: FieldArg,
    },
    /// Run the Monte Carlo theory checks and print the report.
    VerifyTheory,
    /// Replay a generation trace through the guardrail scheduler.
    Simulate {
        #[arg(long)]
        trace: PathBuf,
        /// Score checkpoints with this bundle; the marker oracle otherwise.
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long, value_enum)]
        detector: Option<KindArg>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", &e.to_string()),
    };
    let level = env_logger::Env::new().filter_or("T3_LOG_LEVEL", "error");
    env_logger::Builder::from_env(level).format_timestamp(None).init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), &e.to_string()),
    }
}

fn fail(kind: &str, message: &str) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "message": message.trim_end() }));
    ExitCode::from(FAILURE)
}

fn run(cli: Cli) -> typguard::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.simulation.seed = seed;
        cfg.theory.seed = seed;
    }
    if let Some(t) = cli.threshold {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Parameter(format!("threshold {t} must lie in [0, 1]")));
        }
        cfg.threshold = t;
        cfg.simulation.scheduler.threshold = t;
    }
    let subset = cli.subset.map(FeatureSubset::from);
    let out = cli.out.as_deref();

    match cli.command {
        Command::Fit { views, detector, k } => {
            if !views.is_empty() {
                cfg.reference_views = sources(views);
            }
            if let Some(d) = detector {
                cfg.detector = match d {
                    DetectorArg::Gmm => DetectorChoice::Gmm,
                    DetectorArg::Ocsvm => DetectorChoice::Ocsvm,
                    DetectorArg::Both => DetectorChoice::Both,
                };
            }
            if !k.is_empty() {
                cfg.k_list = k;
            }
            if let Some(s) = subset {
                cfg.feature_subset = s;
            }
            cfg.validate()?;
            let path = out
                .map(Path::to_path_buf)
                .or(cfg.bundle_path.clone())
                .ok_or_else(|| Error::Parameter("fit needs --out or bundle_path".into()))?;
            if cfg.reference_views.is_empty() {
                return Err(Error::Parameter("no reference views given".into()));
            }
            let reference = load_views(&cfg.reference_views)?;
            log::info!("fitting on {} reference points, {} views", reference.len(), reference.num_views());
            let bundle = fit_bundle(&reference, &cfg)?;
            bundle.save(&path)?;
            let detectors: Vec<_> = bundle
                .detectors
                .iter()
                .map(|d| json!({ "subset": d.subset, "detector": d.kind(), "candidates": d.candidates }))
                .collect();
            print_json(
                None,
                &json!({
                    "bundle": path,
                    "reference_count": bundle.reference_count,
                    "counterpart_count": bundle.counterpart_count,
                    "scoring_detector": bundle.scoring_detector,
                    "detectors": detectors,
                }),
            )
        }
        Command::Score { bundle, views, detector } => {
            let bundle = open_bundle(bundle, &cfg)?;
            if !views.is_empty() {
                cfg.test_views = sources(views);
            }
            if cfg.test_views.is_empty() {
                return Err(Error::Parameter("no test views given".into()));
            }
            let test = load_views(&cfg.test_views)?;
            let opts = ScoreOptions { subset, detector: detector.map(DetectorKind::from), threshold: cli.threshold };
            let records = bundle.score(&test, opts)?;
            let path = out.map(Path::to_path_buf).or(cfg.scores_path.clone());
            let mut w = writer(path.as_deref())?;
            write_score_records(&mut w, &records)?;
            w.flush()?;
            Ok(())
        }
        Command::Eval { id, ood, score_field } => {
            let field = match score_field {
                FieldArg::Raw => ScoreField::Raw,
                FieldArg::Normalized => ScoreField::Normalized,
            };
            print_json(out, &evaluate_score_files(id, ood, field)?)
        }
        Command::VerifyTheory => {
            let report = verify_theory(&cfg.theory)?;
            if !report.all_passed {
                log::error!("theory checks failed: {:?}", failed_names(&report));
            }
            print_json(out, &report)
        }
        Command::Simulate { trace, bundle, detector } => {
            cfg.simulation.scheduler.validate()?;
            let events = read_trace(&trace)?;
            log::info!("replaying {} trace events", events.len());
            let report = match bundle.or(cfg.bundle_path.clone()) {
                Some(path) => {
                    let bundle = ModelBundle::load(path)?;
                    let opts = ScoreOptions { subset, detector: detector.map(DetectorKind::from), threshold: None };
                    let mut scorer = PipelineScorer::new(&bundle, opts);
                    run_simulation(&events, &mut scorer, &cfg.simulation)?
                }
                None => {
                    let mut scorer = MarkerScorer::new(cfg.simulation.marker.clone());
                    run_simulation(&events, &mut scorer, &cfg.simulation)?
                }
            };
            print_json(out, &report)
        }
    }
}

fn failed_names(report: &typguard::theory::TheoryReport) -> Vec<&str> {
    report.checks.iter().filter(|c| c.asserted && !c.passed).map(|c| c.name.as_str()).collect()
}

fn sources(paths: Vec<PathBuf>) -> Vec<ViewSource> {
    paths.into_iter().map(|path| ViewSource { path, id: None }).collect()
}

fn open_bundle(flag: Option<PathBuf>, cfg: &PipelineConfig) -> typguard::Result<ModelBundle> {
    let path = flag
        .or(cfg.bundle_path.clone())
        .ok_or_else(|| Error::Parameter("no model bundle given (--bundle or bundle_path)".into()))?;
    ModelBundle::load(path)
}

fn writer(path: Option<&Path>) -> typguard::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn print_json<T: Serialize>(path: Option<&Path>, value: &T) -> typguard::Result<()> {
    let mut w = writer(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}
