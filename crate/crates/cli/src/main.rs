use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use viewsel_cli::config::{diagnose, diagnose_file, has_errors, load_config, RunConfig, Stage};
use viewsel_cli::error::CliError;
use viewsel_cli::experiment::{calibrate_signal, learnability, make_world, WorldSpec};
use viewsel_cli::provenance::{write_stamped, Provenance};
use viewsel_cli::synthdata::{write_dataset, SynthOptions};
use viewsel_cli::{pipeline, tools};
use viewsel_core::fsutil::write_atomic;
use viewsel_core::scene::Trajectory;
use viewsel_core::selector::{gradient_check, load_params, SelectorConfig, TrainConfig};
use viewsel_core::strategy::Strategy;
use viewsel_core::NmsConfig;

#[derive(Parser)]
#[command(name = "viewsel", version, about = "Question-conditioned view selection for multi-view scene QA")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a mock LVLM script and run config.
    Synth(SynthArgs),
    /// Label candidate views of every question through the LVLM.
    Annotate(AnnotateArgs),
    /// Train the view scorer on annotator labels.
    Train(TrainArgs),
    /// Pick views for every question.
    Select(SelectArgs),
    /// Ask the LVLM each question over its selected views.
    Answer(ConfigArg),
    /// Score answers against gold.
    Eval(EvalArgs),
    /// Pose-aware NMS over one scored scene.
    Nms(NmsArgs),
    /// Compare analytic and finite-difference gradients of the scorer.
    Gradcheck(GradcheckArgs),
    /// Threshold and k sweep over synthetic scenes.
    Ablate(AblateArgs),
    /// Report every problem in a run config.
    ValidateConfig(ValidateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum TrajectoryArg {
    Orbit,
    Walk,
}

impl From<TrajectoryArg> for Trajectory {
    fn from(t: TrajectoryArg) -> Self {
        match t {
            TrajectoryArg::Orbit => Trajectory::Orbit,
            TrajectoryArg::Walk => Trajectory::Walk,
        }
    }
}

#[derive(Args)]
struct WorldArgs {
    #[arg(long, value_enum, default_value = "walk")]
    trajectory: TrajectoryArg,
    #[arg(long, default_value_t = 64)]
    views: usize,
    #[arg(long, default_value_t = 8)]
    objects: usize,
    #[arg(long = "d-in", default_value_t = 32)]
    d_in: usize,
    /// Tokens per view embedding.
    #[arg(long, default_value_t = 2)]
    tokens: usize,
    /// Concept strength in view tokens; calibrated to --separability when absent.
    #[arg(long)]
    signal: Option<f64>,
    #[arg(long, default_value_t = 0.9)]
    separability: f64,
}

impl WorldArgs {
    fn spec(&self) -> Result<WorldSpec, CliError> {
        let mut spec = WorldSpec {
            trajectory: self.trajectory.into(),
            n_views: self.views,
            n_objects: self.objects,
            d_in: self.d_in,
            view_tokens: self.tokens,
            ..WorldSpec::default()
        };
        spec.signal = match self.signal {
            Some(s) => s,
            None => calibrate_signal(&spec, self.separability, 0..10)?,
        };
        Ok(spec)
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    scenes: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "syn")]
    prefix: String,
    #[command(flatten)]
    world: WorldArgs,
}

#[derive(Args)]
struct ConfigArg {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct AnnotateArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Match views against the question-answer pair instead of a caption.
    #[arg(long)]
    direct: bool,
    #[arg(long)]
    views_per_scene: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SelectArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    answers: Option<PathBuf>,
    #[arg(long)]
    gold: Option<PathBuf>,
    /// Also write the report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct NmsArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// JSONL rows of {"view_id", "score"}.
    #[arg(long)]
    scores: PathBuf,
    #[arg(long, default_value_t = 9)]
    k: usize,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
    /// Write why each rejected view was rejected.
    #[arg(long)]
    witness: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Take the model shape from training.selector of this config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, conflicts_with = "config")]
    paper_scale: bool,
    #[arg(long, default_value_t = 1e-5)]
    epsilon: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Probe at most this many entries per tensor (all when absent).
    #[arg(long)]
    entries: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    out: PathBuf,
    /// Trained scorer; one is trained on oracle labels when absent.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    scenes: u64,
    #[arg(long, default_value_t = 9000)]
    seed: u64,
    #[arg(long, value_delimiter = ',', default_values_t = vec![9usize, 32])]
    ks: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.25, 0.5, 0.75, 1.0])]
    thresholds: Vec<f64>,
    #[command(flatten)]
    world: WorldArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Annotate,
    Train,
    Select,
    Answer,
    Eval,
}

#[derive(Args)]
struct ValidateArgs {
    config: PathBuf,
    /// Check as the given stage would before starting.
    #[arg(long, value_enum)]
    stage: Option<StageArg>,
}

fn config(path: &Path) -> Result<RunConfig, CliError> {
    Ok(load_config(path)?)
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializes"));
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(a) => {
            let opts = SynthOptions {
                scenes: a.scenes,
                seed: a.seed,
                prefix: a.prefix,
                world: a.world.spec()?,
            };
            print_json(&write_dataset(&a.out, &opts)?);
        }
        Command::Annotate(a) => {
            let mut cfg = config(&a.config.config)?;
            cfg.annotate.direct |= a.direct;
            if let Some(n) = a.views_per_scene {
                cfg.annotate.views_per_scene = n;
            }
            let (summary, stats) = pipeline::annotate(&cfg)?;
            print_json(&summary);
            eprintln!(
                "gateway: {} backend calls, {} cache hits",
                stats.backend_calls, stats.cache_hits
            );
            if summary.failed_questions > 0 || summary.view_errors > 0 {
                eprintln!(
                    "warning: {} questions failed, {} views errored; rerun to retry them",
                    summary.failed_questions, summary.view_errors
                );
            }
        }
        Command::Train(a) => {
            let mut cfg = config(&a.config.config)?;
            if let Some(e) = a.epochs {
                cfg.training.train.epochs = e;
            }
            if let Some(s) = a.seed {
                cfg.training.train.seed = s;
                cfg.training.selector.seed = s;
            }
            let r = pipeline::train(&cfg)?;
            eprintln!(
                "trained on {} questions, {} held out; final loss {:.4}, holdout AUC {}",
                r.train_questions,
                r.holdout_questions,
                r.stats.epoch_loss.last().copied().unwrap_or(f64::NAN),
                r.stats
                    .holdout_auc
                    .last()
                    .map(|a| format!("{a:.4}"))
                    .unwrap_or_else(|| "n/a".into())
            );
        }
        Command::Select(a) => {
            let mut cfg = config(&a.config.config)?;
            if let Some(s) = a.strategy {
                cfg.strategy.name = s;
            }
            if let Some(k) = a.k {
                cfg.strategy.k = k;
            }
            if let Some(t) = a.threshold {
                cfg.strategy.threshold = t;
            }
            if let Some(s) = a.seed {
                cfg.strategy.seed = s;
            }
            if let Some(o) = a.out {
                cfg.paths.selections = Some(o);
            }
            let rows = pipeline::select(&cfg)?;
            let views: usize = rows.iter().map(|r| r.view_ids.len()).sum();
            eprintln!(
                "{} selections, {:.2} views each",
                rows.len(),
                views as f64 / rows.len().max(1) as f64
            );
        }
        Command::Answer(a) => {
            let cfg = config(&a.config)?;
            let (answers, stats) = pipeline::answer(&cfg)?;
            eprintln!(
                "{} answers; gateway: {} backend calls, {} cache hits",
                answers.len(),
                stats.backend_calls,
                stats.cache_hits
            );
        }
        Command::Eval(a) => {
            let mut cfg = match &a.config {
                Some(p) => config(p)?,
                None => RunConfig::default(),
            };
            if let Some(p) = a.answers {
                cfg.paths.answers = Some(p);
            }
            if let Some(p) = a.gold {
                cfg.paths.gold = Some(p);
            }
            let report = pipeline::eval(&cfg)?;
            if cfg.metrics.text_metrics {
                println!("{report}");
            } else {
                println!("n {}\nEM@1 {:.2}", report.n_instances, 100.0 * report.em_at_1);
            }
            if let Some(out) = a.out {
                write_stamped(&out, &Provenance::new("eval", &cfg), &report).map_err(|e| CliError::io(&out, e))?;
            }
        }
        Command::Nms(a) => {
            let nms = NmsConfig::new(a.threshold, a.k);
            let (out, witnesses) = tools::run_nms(&a.manifest, &a.scores, &nms)?;
            let prov = Provenance::new("nms", &serde_json::json!({
                "manifest": a.manifest, "scores": a.scores, "nms": nms,
            }));
            write_stamped(&a.out, &prov, &out).map_err(|e| CliError::io(&a.out, e))?;
            if let Some(w) = a.witness {
                let body = serde_json::json!({ "witnesses": witnesses });
                write_stamped(&w, &prov, &body).map_err(|e| CliError::io(&w, e))?;
            }
            print_json(&out.selected);
        }
        Command::Gradcheck(a) => {
            let model = match (&a.config, a.paper_scale) {
                (Some(p), _) => config(p)?.training.selector,
                (None, true) => SelectorConfig::paper_scale(),
                (None, false) => SelectorConfig::desk(),
            };
            let (params, fixture) = tools::gradcheck_fixture(model, a.seed);
            let report = gradient_check(&params, &fixture.items(), a.epsilon, a.entries, a.seed)?;
            print_json(&report);
            let pass = report.max_relative_error < a.tolerance;
            println!(
                "{} max relative error {:.3e} (tolerance {:.0e}, {} entries)",
                if pass { "PASS" } else { "FAIL" },
                report.max_relative_error,
                a.tolerance,
                report.checked
            );
            if !pass {
                return Err(CliError::CheckFailed(format!(
                    "gradient check above tolerance in {}[{}]",
                    report.worst_tensor, report.worst_index
                )));
            }
        }
        Command::Ablate(a) => {
            let spec = a.world.spec()?;
            let params = match &a.params {
                Some(p) => load_params(p)?,
                None => {
                    let train_spec = WorldSpec {
                        trajectory: Trajectory::Walk,
                        n_views: 64,
                        ..spec.clone()
                    };
                    let model = SelectorConfig {
                        d_in: spec.d_in,
                        ..SelectorConfig::desk()
                    };
                    learnability(&train_spec, model, &TrainConfig::default(), 32, 4, 0.95)?.1
                }
            };
            let worlds = (a.seed..a.seed + a.scenes)
                .map(|s| make_world(&spec, "abl", s))
                .collect::<Result<Vec<_>, _>>()?;
            let rows = tools::ablation(&worlds, &params, &a.ks, &a.thresholds, a.seed)?;
            tools::write_ablation_csv(&a.out, &rows)?;
            let table = tools::ablation_table(&rows);
            let tsv = a.out.with_extension("table.tsv");
            write_atomic(&tsv, table.as_bytes()).map_err(|e| CliError::io(&tsv, e))?;
            Provenance::new("ablate", &serde_json::json!({
                "world": spec, "scenes": a.scenes, "seed": a.seed, "ks": a.ks,
                "thresholds": a.thresholds, "params": a.params,
            }))
            .write_sidecar(&a.out)
            .map_err(|e| CliError::io(&a.out, e))?;
            print!("{table}");
        }
        Command::ValidateConfig(a) => {
            let cfg = config(&a.config)?;
            let diags = match a.stage {
                None => diagnose_file(&cfg),
                Some(s) => diagnose(
                    &cfg,
                    match s {
                        StageArg::Annotate => Stage::Annotate,
                        StageArg::Train => Stage::Train,
                        StageArg::Select => Stage::Select,
                        StageArg::Answer => Stage::Answer,
                        StageArg::Eval => Stage::Eval,
                    },
                ),
            };
            for d in &diags {
                println!("{d}");
            }
            if has_errors(&diags) {
                return Err(CliError::Config(format!("{} has errors", a.config.display())));
            }
            println!("ok: {} warning(s)", diags.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
