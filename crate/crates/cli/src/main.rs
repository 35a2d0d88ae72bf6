//! `sceneal` command-line frontend.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error,
//! 4 kernel non-convergence.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use sceneal::diag::selection_report;
use sceneal::entropy::category_entropy;
use sceneal::kitti::{load_pool_dir, write_atomic, write_pool_dir, SidecarMode};
use sceneal::rounds::{reports_csv, round_metrics, stage_log_csv, Strategy};
use sceneal::synth::{generate_pool, GroundTruthOracle, SimulatedPredictor};
use sceneal::uncertainty::ranking_scores;
use sceneal::{
    load_round_state, pairwise_similarity_matrix, run_al_rounds, save_round_state, three_stage_select, Config, Error,
    RoundState, Scene,
};

#[derive(Parser, Debug)]
#[command(
    name = "sceneal",
    version,
    about = "Scene scoring and active-learning selection for 3D detection pools"
)]
struct Cli {
    /// TOML configuration file; `SCENEAL_<SECTION>_<KEY>` variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root seed for all randomness (defaults to `synth.rng_seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for scoring (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Score every scene of a pool.
    Score(ScoreArgs),
    /// Run one selection round against a persisted round state.
    Select(SelectArgs),
    /// Simulate full active-learning runs on a synthetic pool.
    Simulate(SimulateArgs),
    /// Dataset diagnostics of a pool or a selection from it.
    Stats(StatsArgs),
    /// Write a synthetic pool (ground truth plus simulated predictions).
    Synth,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Metric {
    Entropy,
    Similarity,
    Uncertainty,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    /// Directory of label files.
    #[arg(long)]
    pool: PathBuf,
    #[arg(long, value_enum)]
    metric: Metric,
    /// Output CSV (defaults to `<out>/<metric>.csv`).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SelectArgs {
    /// Directory of predicted label files with mixture sidecars.
    #[arg(long)]
    pool: PathBuf,
    /// Round state file.
    #[arg(long)]
    state: PathBuf,
    /// Create the state with `--n0` random labeled scenes instead of selecting.
    #[arg(long)]
    init: bool,
    #[arg(long, default_value_t = 0, requires = "init")]
    n0: usize,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Comma-separated strategies.
    #[arg(long, value_delimiter = ',', default_value = "random,joint", value_parser = parse_strategy)]
    strategies: Vec<Strategy>,
    /// Randomly labeled scenes before the first round.
    #[arg(long, default_value_t = 0)]
    n0: usize,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[arg(long)]
    pool: PathBuf,
    /// File of selected scene ids, one per line.
    #[arg(long)]
    selection: Option<PathBuf>,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

struct App {
    config: Config,
    seed: u64,
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config(_) => 2,
        Error::NonConvergence { .. } => 4,
        _ => 3,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let config = Config::load(cli.config.as_deref(), std::env::vars())?;
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let seed = cli.seed.unwrap_or(config.synth.rng_seed);
    let app = App {
        config,
        seed,
        out: cli.out,
    };
    match cli.command {
        Command::Score(a) => score(&app, &a),
        Command::Select(a) => select(&app, &a),
        Command::Simulate(a) => simulate(&app, &a),
        Command::Stats(a) => stats(&app, &a),
        Command::Synth => synth(&app),
    }
}

fn require_dir(path: &Path) -> Result<(), Error> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{} is not a directory", path.display())))
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            context: format!("creating {}", dir.display()),
            source: e,
        })?;
    }
    write_atomic(path, text.as_bytes())
}

fn to_json(value: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("json values serialize");
    s.push('\n');
    s
}

/// Every metric, scene uncertainty included, sees only detections with
/// confidence at or above `tau`.
fn filter_metadata(config: &Config) -> serde_json::Value {
    json!({ "tau": config.entropy.tau, "metrics_filtered": ["entropy", "similarity", "uncertainty"] })
}

fn load_pool(app: &App, dir: &Path, sidecars: SidecarMode) -> Result<Vec<Scene>, Error> {
    require_dir(dir)?;
    load_pool_dir(dir, &app.config.catalog, app.config.io.unknown_class, sidecars)
}

fn score(app: &App, a: &ScoreArgs) -> Result<(), Error> {
    let ctx = app.config.scoring();
    let (mode, name) = match a.metric {
        Metric::Entropy => (SidecarMode::Ignore, "entropy"),
        Metric::Similarity => (SidecarMode::Ignore, "similarity"),
        Metric::Uncertainty => (SidecarMode::Require, "uncertainty"),
    };
    let mut pool = load_pool(app, &a.pool, mode)?;
    pool.sort_by(|x, y| x.id.cmp(&y.id));
    let mut csv = String::new();
    match a.metric {
        Metric::Entropy => {
            csv.push_str("scene_id,entropy\n");
            for s in &pool {
                csv.push_str(&format!(
                    "{},{:.12}\n",
                    s.id,
                    category_entropy(s, &ctx.catalog, &ctx.entropy)
                ));
            }
        }
        Metric::Uncertainty => {
            let scores = ranking_scores(&pool, &ctx.anchors, ctx.tau(), &ctx.uncertainty)?;
            csv.push_str("scene_id,uncertainty\n");
            for (s, u) in pool.iter().zip(scores) {
                csv.push_str(&format!("{},{u:.12e}\n", s.id));
            }
        }
        Metric::Similarity => {
            let m = pairwise_similarity_matrix(&pool, &ctx.catalog, ctx.tau(), &ctx.kernel)?;
            csv.push_str("scene_id");
            for s in &pool {
                csv.push(',');
                csv.push_str(&s.id);
            }
            csv.push('\n');
            for (i, s) in pool.iter().enumerate() {
                csv.push_str(&s.id);
                for v in m.row(i) {
                    csv.push_str(&format!(",{v:.12}"));
                }
                csv.push('\n');
            }
        }
    }
    let path = a.output.clone().unwrap_or_else(|| app.out.join(format!("{name}.csv")));
    write_text(&path, &csv)?;
    log::info!("wrote {} scores to {}", pool.len(), path.display());
    Ok(())
}

fn select(app: &App, a: &SelectArgs) -> Result<(), Error> {
    if a.init {
        require_dir(&a.pool)?;
        let ids: Vec<String> = load_pool(app, &a.pool, SidecarMode::Ignore)?
            .into_iter()
            .map(|s| s.id)
            .collect();
        if a.n0 > ids.len() {
            return Err(Error::InsufficientPool {
                required: a.n0,
                available: ids.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(app.seed);
        let mut initial: Vec<String> = index::sample(&mut rng, ids.len(), a.n0)
            .into_iter()
            .map(|i| ids[i].clone())
            .collect();
        initial.sort();
        let state = RoundState::new(&ids, &initial, app.config.plan.budget(), app.seed)?;
        save_round_state(&state, &a.state)?;
        println!(
            "initialized {}: {} labeled, {} unlabeled",
            a.state.display(),
            state.labeled_ids.len(),
            state.unlabeled_ids.len()
        );
        return Ok(());
    }

    let mut state = load_round_state(&a.state)?;
    let ctx = app.config.scoring();
    let plan = app.config.plan.stage_plan()?;
    if state.unlabeled_ids.is_empty() {
        return Err(Error::InsufficientPool {
            required: plan.n_r,
            available: 0,
        });
    }
    if plan.n_r > state.remaining_budget() {
        return Err(Error::InvalidState(format!(
            "budget exhausted: {} of {} scenes already selected",
            state.selected_total(),
            state.budget_total
        )));
    }
    let pool = load_pool(app, &a.pool, SidecarMode::IfPresent)?;
    let unlabeled: Vec<Scene> = pool
        .iter()
        .filter(|s| state.unlabeled_ids.contains(&s.id))
        .cloned()
        .collect();
    if unlabeled.len() != state.unlabeled_ids.len() {
        return Err(Error::InvalidState(format!(
            "{} unlabeled scenes in the state are missing from {}",
            state.unlabeled_ids.len() - unlabeled.len(),
            a.pool.display()
        )));
    }
    let (fitted, degraded) = plan.fit_to_pool(unlabeled.len())?;
    if degraded {
        log::warn!(
            "pool of {} is below floor(k1 * n_r); using k1={:.4}, k2={:.4}",
            unlabeled.len(),
            fitted.k1,
            fitted.k2
        );
    }
    let mut selection = three_stage_select(&unlabeled, &fitted, &ctx)?;
    selection.log.degraded = degraded;

    let round = state.round_index + 1;
    let chosen: Vec<Scene> = selection
        .ids
        .iter()
        .map(|id| {
            unlabeled
                .iter()
                .find(|s| &s.id == id)
                .cloned()
                .expect("selected from the pool")
        })
        .collect();
    let mut report = round_metrics(Strategy::Joint, round, &chosen, &chosen, &ctx)?;
    report.selection_log = Some(selection.log.clone());
    let diag = selection_report(&chosen, &pool, &ctx, &app.config.diag, app.seed)?;

    let dir = &app.out;
    write_text(
        &dir.join(format!("selected_round_{round}.txt")),
        &(selection.ids.join("\n") + "\n"),
    )?;
    write_text(
        &dir.join(format!("stage_log_round_{round}.csv")),
        &stage_log_csv(std::slice::from_ref(&report)),
    )?;
    write_text(
        &dir.join(format!("report_round_{round}.json")),
        &to_json(&json!({ "round": report, "diagnostics": diag, "filter": filter_metadata(&app.config) })),
    )?;
    state.record_round(selection.ids.clone())?;
    save_round_state(&state, &a.state)?;
    println!(
        "round {round}: selected {} scenes into {}",
        selection.ids.len(),
        dir.display()
    );
    Ok(())
}

fn simulate(app: &App, a: &SimulateArgs) -> Result<(), Error> {
    let cfg = &app.config;
    let ctx = cfg.scoring();
    let plan = cfg.plan.stage_plan()?;
    let spec = sceneal::synth::PoolSpec {
        rng_seed: app.seed,
        ..cfg.synth.clone()
    };
    let pool = generate_pool(&spec, &ctx.catalog, &ctx.anchors)?;
    let predictor = SimulatedPredictor::new(
        &pool,
        cfg.noise.clone(),
        ctx.catalog.clone(),
        ctx.anchors.clone(),
        app.seed.wrapping_add(1),
    )?;
    let oracle = GroundTruthOracle::new(&pool);
    let ids: Vec<String> = pool.iter().map(|s| s.id.clone()).collect();
    if a.n0 > ids.len() {
        return Err(Error::InsufficientPool {
            required: a.n0,
            available: ids.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(app.seed.wrapping_add(2));
    let initial: Vec<String> = index::sample(&mut rng, ids.len(), a.n0)
        .into_iter()
        .map(|i| ids[i].clone())
        .collect();

    let mut all_reports = Vec::new();
    let mut seen = Vec::new();
    for &strategy in &a.strategies {
        if seen.contains(&strategy) {
            continue;
        }
        seen.push(strategy);
        let mut state = RoundState::new(&ids, &initial, cfg.plan.budget(), app.seed.wrapping_add(2))?;
        let run = run_al_rounds(&plan, cfg.plan.rounds, strategy, &predictor, &oracle, &mut state, &ctx)?;
        let dir = app.out.join(strategy.name());
        write_text(&dir.join("rounds.csv"), &reports_csv(&run.reports, &ctx))?;
        write_text(&dir.join("stage_log.csv"), &stage_log_csv(&run.reports))?;
        let selected: Vec<&str> = run.revealed.iter().map(|s| s.id.as_str()).collect();
        write_text(&dir.join("selected.txt"), &(selected.join("\n") + "\n"))?;
        write_text(
            &dir.join("report.json"),
            &to_json(
                &json!({ "strategy": strategy, "rounds": run.reports, "state": state, "filter": filter_metadata(cfg) }),
            ),
        )?;
        log::info!("{strategy}: {} rounds written to {}", run.reports.len(), dir.display());
        all_reports.extend(run.reports);
    }
    write_text(&app.out.join("comparison.csv"), &reports_csv(&all_reports, &ctx))?;
    println!("simulated {} strategies into {}", seen.len(), app.out.display());
    Ok(())
}

fn stats(app: &App, a: &StatsArgs) -> Result<(), Error> {
    let ctx = app.config.scoring();
    let pool = load_pool(app, &a.pool, SidecarMode::IfPresent)?;
    let selected: Vec<Scene> = match &a.selection {
        None => pool.clone(),
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                context: format!("reading {}", path.display()),
                source: e,
            })?;
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(|id| {
                    pool.iter()
                        .find(|s| s.id == id)
                        .cloned()
                        .ok_or_else(|| Error::InvalidArgument(format!("selected scene `{id}` is not in the pool")))
                })
                .collect::<Result<_, _>>()?
        }
    };
    let report = selection_report(&selected, &pool, &ctx, &app.config.diag, app.seed)?;
    let dir = &app.out;
    write_text(&dir.join("class_histogram.csv"), &report.class_histogram_csv())?;
    write_text(
        &dir.join("uncertainty_histogram.csv"),
        &report.uncertainty_histogram_csv(),
    )?;
    write_text(&dir.join("similarity_samples.dat"), &report.similarity_samples_dat())?;
    let mut summary = serde_json::to_value(&report).map_err(|e| Error::Json {
        context: "summary".into(),
        source: e,
    })?;
    if let Some(obj) = summary.as_object_mut() {
        obj.remove("similarity_samples");
        obj.insert("filter".into(), filter_metadata(&app.config));
    }
    write_text(&dir.join("summary.json"), &to_json(&summary))?;
    println!(
        "{} of {} scenes, {} boxes; reports in {}",
        report.selected_count,
        report.pool_count,
        report.box_count,
        dir.display()
    );
    Ok(())
}

fn synth(app: &App) -> Result<(), Error> {
    let cfg = &app.config;
    let spec = sceneal::synth::PoolSpec {
        rng_seed: app.seed,
        ..cfg.synth.clone()
    };
    let pool = generate_pool(&spec, &cfg.catalog, &cfg.anchors)?;
    let predictor = SimulatedPredictor::new(
        &pool,
        cfg.noise.clone(),
        cfg.catalog.clone(),
        cfg.anchors.clone(),
        app.seed.wrapping_add(1),
    )?;
    let preds: Vec<Scene> = pool
        .iter()
        .map(|s| sceneal::Predictor::predict(&predictor, &s.id, 0))
        .collect::<Result<_, _>>()?;
    write_pool_dir(&app.out.join("gt"), &pool, false)?;
    write_pool_dir(&app.out.join("pred"), &preds, true)?;
    println!("wrote {} scenes to {}", pool.len(), app.out.display());
    Ok(())
}
