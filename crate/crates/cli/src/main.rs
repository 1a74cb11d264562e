//! `advprune` command-line interface.
//!
//! Settings resolve in this order, later winning: built-in defaults, the
//! `--config` TOML file, `ADVPRUNE_OUT` / `ADVPRUNE_JOBS`, then flags.
//!
//! Exit codes: 0 success, 1 run failure, 2 configuration or IO error. On
//! failure a one-line JSON error object is written to stderr.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use advprune::datastats::{self, StatsConfig};
use advprune::exec::Exec;
use advprune::prune::{KeptAudit, Strategy};
use advprune::sweep::{self, Outcome, SweepOptions};
use advprune::toymodel::{self, ToyParams};
use advprune::train::{self, RunRecord, RunStatus};
use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use config::{parse_list, CommonArgs, ExperimentConfig, RunArgs};

const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "advprune", version, about = "Adversarial training with one-shot data pruning")]
struct Cli {
    /// More logging (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its run record.
    Train(TrainArgs),
    /// Run a grid of pruning settings, skipping completed runs.
    Sweep(SweepArgs),
    /// Check the robust/fragile toy-model claims.
    Toy(ToyArgs),
    /// Class density and separation statistics of a dataset.
    Stats(StatsArgs),
    /// Fit post-prune epoch time against dataset size.
    TimingReport(TimingArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    run: RunArgs,
    /// random, low, high, lowhigh, midband or none.
    #[arg(long)]
    strategy: Option<String>,
    /// Fraction of the training set kept.
    #[arg(long)]
    keep: Option<f64>,
    #[arg(long)]
    prune_epoch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated strategies.
    #[arg(long)]
    strategies: Option<String>,
    /// Comma-separated keep fractions.
    #[arg(long)]
    keeps: Option<String>,
    #[arg(long)]
    prune_epochs: Option<String>,
    #[arg(long)]
    seeds: Option<String>,
    /// Also train an unpruned model per seed.
    #[arg(long)]
    include_full: bool,
    /// Concurrent runs (env: ADVPRUNE_JOBS). Keep at 1 for timing.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct ToyArgs {
    #[arg(long, default_value_t = 100)]
    d: usize,
    /// Defaults to 3 / sqrt(d).
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long, default_value_t = 0.5)]
    p_r: f64,
    #[arg(long, default_value_t = 0.9)]
    p_robust: f64,
    #[arg(long, default_value_t = 0.7)]
    p_fragile: f64,
    /// Attack budget; defaults to 2 eta.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Samples for accuracy estimates.
    #[arg(long, default_value_t = 1_000_000)]
    n: usize,
    /// Samples for the dropout analysis.
    #[arg(long, default_value_t = 100_000)]
    n_dropout: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write per-sample losses of this many samples as CSV.
    #[arg(long)]
    losses_csv: Option<usize>,
    /// Output directory (env: ADVPRUNE_OUT).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Kept-id file (run audit or JSON array of ids); statistics are
    /// reported for the full and the pruned set.
    #[arg(long)]
    kept: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    components: usize,
    #[arg(long, default_value_t = 0.01)]
    tail_cut: f64,
    /// Use the test split instead of the training split.
    #[arg(long)]
    test_split: bool,
}

#[derive(Args)]
struct TimingArgs {
    /// Sweep directory (env: ADVPRUNE_OUT).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Only records with this strategy (`none` for unpruned runs).
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    prune_epoch: Option<usize>,
}

/// A failure that is not a configuration or IO problem.
#[derive(Debug)]
struct RunFailure(String);

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for RunFailure {}

fn exit_code(err: &anyhow::Error) -> (u8, &'static str) {
    if err.downcast_ref::<RunFailure>().is_some() {
        return (1, "run");
    }
    match err.downcast_ref::<advprune::Error>() {
        Some(advprune::Error::NonFinite { .. } | advprune::Error::Degenerate(_) | advprune::Error::EmptyClass(_)) => {
            (1, "run")
        }
        Some(advprune::Error::Config(_)) => (2, "config"),
        Some(_) => (2, "io"),
        None => (2, "config"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.cmd {
        Command::Train(a) => cmd_train(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Toy(a) => cmd_toy(a),
        Command::Stats(a) => cmd_stats(a),
        Command::TimingReport(a) => cmd_timing(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = exit_code(&e);
            let msg = message(&e);
            eprintln!("{}", json!({ "error": kind, "message": msg, "exit_code": code }));
            ExitCode::from(code)
        }
    }
}

/// The error chain joined with ": ", skipping causes already quoted by
/// their parent.
fn message(err: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !parts.last().is_some_and(|p| p.contains(&text)) {
            parts.push(text);
        }
    }
    parts.join(": ")
}

fn resolve(common: &CommonArgs, run: Option<&RunArgs>) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(common.config.as_deref())?;
    cfg.apply_common(common);
    if let Some(r) = run {
        cfg.apply_run(r)?;
    }
    Ok(cfg)
}

fn parse_strategy(s: &str) -> anyhow::Result<Option<Strategy>> {
    if s == "none" {
        Ok(None)
    } else {
        Ok(Some(s.parse::<Strategy>()?))
    }
}

fn experiment_json(cfg: &ExperimentConfig) -> anyhow::Result<serde_json::Value> {
    Ok(serde_json::to_value(cfg)?)
}

fn summary(r: &RunRecord) -> String {
    let pct = |v: Option<f64>| v.map_or("-".into(), |v| format!("{:.2}%", 100.0 * v));
    let sizes: Vec<String> = r.epochs.iter().map(|e| e.dataset_size.to_string()).collect();
    format!(
        "{}: clean {} robust {} total {:.1}s sizes [{}]",
        r.run_id,
        pct(r.clean_accuracy),
        pct(r.robust_accuracy),
        r.total_seconds,
        sizes.join(" ")
    )
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = resolve(&a.common, Some(&a.run))?;
    if let Some(s) = &a.strategy {
        cfg.prune.strategy = parse_strategy(s)?;
    }
    if let Some(k) = a.keep {
        cfg.prune.keep_fraction = k;
        if cfg.prune.strategy.is_none() && a.strategy.is_none() {
            cfg.prune.strategy = Some(Strategy::Random);
        }
    }
    cfg.prune.prune_epoch = a.prune_epoch.unwrap_or(cfg.prune.prune_epoch);
    cfg.train.seed = a.seed.unwrap_or(cfg.train.seed);
    let run_cfg = cfg.run_config()?;

    let (train_set, test_set) = cfg.load_data()?;
    let exp = experiment_json(&cfg)?;
    let outcome = sweep::run_one(&run_cfg, &train_set, Some(&test_set), Some(&cfg.out_dir), Some(&exp), false);
    let csv = sweep::write_aggregate(&cfg.out_dir)?;
    match outcome {
        Outcome::Failed(msg) => bail!(RunFailure(msg)),
        Outcome::Ran(r) | Outcome::Reused(r) => {
            println!("{}", summary(&r));
            println!("record: {}", sweep::run_path(&cfg.out_dir, &r.run_id).display());
            println!("aggregate: {}", csv.display());
            if let RunStatus::Diverged { epoch, step } = r.status {
                bail!(RunFailure(format!("training diverged at epoch {epoch} step {step}")));
            }
        }
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> anyhow::Result<()> {
    let mut cfg = resolve(&a.common, Some(&a.run))?;
    let g = &mut cfg.grid;
    if let Some(s) = &a.strategies {
        g.strategies = parse_list::<Strategy>(s)?;
    }
    if let Some(s) = &a.keeps {
        g.keep_fractions = parse_list(s)?;
    }
    if let Some(s) = &a.prune_epochs {
        g.prune_epochs = parse_list(s)?;
    }
    if let Some(s) = &a.seeds {
        g.seeds = parse_list(s)?;
    }
    g.include_full |= a.include_full;
    cfg.jobs = a.jobs.unwrap_or(cfg.jobs);
    cfg.validate_jobs()?;
    let configs = cfg.sweep_configs()?;

    let (train_set, test_set) = cfg.load_data()?;
    let opts = SweepOptions {
        out_dir: Some(cfg.out_dir.clone()),
        jobs: cfg.jobs,
        experiment: Some(experiment_json(&cfg)?),
    };
    let entries = sweep::run_configs(&configs, &train_set, Some(&test_set), &opts)?;
    let mut failed = 0;
    for e in &entries {
        match &e.outcome {
            Outcome::Ran(r) => println!("ran    {}", summary(r)),
            Outcome::Reused(r) => println!("reused {}", summary(r)),
            Outcome::Failed(msg) => {
                failed += 1;
                println!("failed {}: {msg}", e.config.run_id());
            }
        }
    }
    println!("aggregate: {}", cfg.out_dir.join("aggregate.csv").display());
    if failed == entries.len() {
        bail!(RunFailure(format!("all {failed} runs failed")));
    }
    Ok(())
}

fn out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(config::OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> anyhow::Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    std::fs::write(path, serde_json::to_string_pretty(v)?).with_context(|| format!("writing {}", path.display()))
}

fn cmd_toy(a: ToyArgs) -> anyhow::Result<()> {
    let mut params = ToyParams::new(a.d, a.p_r, a.p_robust, a.p_fragile);
    if let Some(eta) = a.eta {
        params.eta = eta;
    }
    params.validate()?;
    if a.n == 0 || a.n_dropout == 0 {
        bail!(advprune::Error::config("sample sizes must be at least 1"));
    }
    if a.epsilon.is_some_and(|e| !(e >= 0.0)) {
        bail!(advprune::Error::config("epsilon must be non-negative"));
    }
    let out = out_dir(a.out);
    let report = toymodel::verify(&params, a.epsilon, a.n, a.n_dropout, a.seed, Exec::default())?;
    for c in &report.claims {
        println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let path = out.join("toy").join("report.json");
    let resolved = json!({ "params": params, "epsilon": report.epsilon, "n": a.n, "n_dropout": a.n_dropout, "seed": a.seed });
    write_json(
        &path,
        &json!({ "schema_version": REPORT_SCHEMA_VERSION, "config": resolved, "report": report }),
    )?;
    println!("report: {}", path.display());
    if let Some(m) = a.losses_csv {
        let mut rng = advprune::rng::substream(a.seed, "toy-losses", 0);
        let rows = toymodel::loss_samples(&params, m.max(1), &mut rng)?;
        let p = out.join("toy").join("losses.csv");
        let mut w = csv::Writer::from_path(&p).with_context(|| format!("writing {}", p.display()))?;
        w.write_record(["origin", "y", "loss"])?;
        for (o, y, l) in rows {
            w.write_record([format!("{o:?}").to_lowercase(), y.to_string(), l.to_string()])?;
        }
        w.flush()?;
        println!("losses: {}", p.display());
    }
    if !report.all_pass() {
        bail!(RunFailure("some toy-model claims failed".into()));
    }
    Ok(())
}

fn read_kept_ids(path: &Path) -> anyhow::Result<(String, Vec<u64>)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| advprune::Error::io(path, e))
        .with_context(|| format!("reading kept ids {}", path.display()))?;
    if let Ok(audit) = serde_json::from_str::<KeptAudit>(&text) {
        return Ok((audit.run_id, audit.ids));
    }
    let ids: Vec<u64> = serde_json::from_str(&text)
        .map_err(advprune::Error::from)
        .with_context(|| format!("{} is neither a kept-id audit nor an id array", path.display()))?;
    let stem = path.file_stem().map_or("kept".into(), |s| s.to_string_lossy().into_owned());
    Ok((stem, ids))
}

fn cmd_stats(a: StatsArgs) -> anyhow::Result<()> {
    let cfg = resolve(&a.common, None)?;
    let scfg = StatsConfig {
        pca_components: a.components,
        tail_cut: a.tail_cut,
    };
    if scfg.pca_components == 0 || !(0.0..0.5).contains(&scfg.tail_cut) {
        scfg.validate(usize::MAX)?;
    }
    let (train_set, test_set) = cfg.load_data()?;
    let (ds, split) = if a.test_split { (test_set, "test") } else { (train_set, "train") };
    let base = format!("{:?}-{split}", cfg.dataset.kind).to_lowercase();
    let dir = cfg.out_dir.join("stats");
    let exp = json!({ "experiment": cfg, "stats": scfg, "split": split });

    let full = run_stats(&ds, &scfg, &dir, &base, &exp)?;
    if let Some(kept) = &a.kept {
        let (name, ids) = read_kept_ids(kept)?;
        let pruned_ds = advprune::prune::apply_prune(&ds, &ids)?;
        let mut pexp = exp.clone();
        pexp["kept_file"] = json!(kept.display().to_string());
        let pruned = run_stats(&pruned_ds, &scfg, &dir, &format!("{base}-{name}"), &pexp)?;
        let cmp = json!({
            "schema_version": REPORT_SCHEMA_VERSION,
            "config": pexp,
            "full": { "n": full.n, "rho": full.rho(), "delta": full.delta() },
            "pruned": { "n": pruned.n, "rho": pruned.rho(), "delta": pruned.delta() },
            "delta_rho": pruned.rho() - full.rho(),
            "delta_delta": pruned.delta() - full.delta(),
        });
        let p = dir.join(format!("{base}-{name}-comparison.json"));
        write_json(&p, &cmp)?;
        println!(
            "change: rho {:+.6} delta {:+.6} ({})",
            pruned.rho() - full.rho(),
            pruned.delta() - full.delta(),
            p.display()
        );
    }
    Ok(())
}

fn run_stats(
    ds: &advprune::data::Dataset,
    scfg: &StatsConfig,
    dir: &Path,
    name: &str,
    exp: &serde_json::Value,
) -> anyhow::Result<datastats::StatsReport> {
    let (mut report, projected) = datastats::dataset_statistics(ds, scfg, Exec::default())?;
    report.experiment = Some(exp.clone());
    let jp = dir.join(format!("{name}.json"));
    report.write(&jp)?;
    let cp = dir.join(format!("{name}-projection.csv"));
    if scfg.pca_components >= 2 {
        datastats::write_projection_csv(&cp, ds, &projected, scfg.pca_components)?;
    }
    println!("{name}: n {} rho {:.6} delta {:.6} ({})", report.n, report.rho(), report.delta(), jp.display());
    Ok(report)
}

fn cmd_timing(a: TimingArgs) -> anyhow::Result<()> {
    let out = out_dir(a.out);
    if !out.join("runs").is_dir() {
        bail!(advprune::Error::io(
            out.join("runs"),
            std::io::Error::new(std::io::ErrorKind::NotFound, "no run records")
        ));
    }
    let records: Vec<RunRecord> = sweep::load_records(&out)?
        .into_iter()
        .filter(|r| {
            let row = sweep::AggregateRow::from(r);
            a.strategy.as_ref().is_none_or(|s| *s == row.strategy)
                && a.prune_epoch.is_none_or(|e| e == row.prune_epoch || row.prune_epoch == 0)
        })
        .collect();
    let fit = train::timing_linearity(&records)?;
    let points: Vec<_> = records
        .iter()
        .filter(|r| r.is_completed())
        .map(|r| json!({ "run_id": r.run_id, "size": r.final_size(), "seconds_per_epoch": r.seconds_per_epoch_post_prune, "total_seconds": r.total_seconds }))
        .collect();
    for p in &points {
        println!("{}  size {}  {:.3} s/epoch", p["run_id"], p["size"], p["seconds_per_epoch"]);
    }
    println!(
        "slope {:.3e} s/example  intercept {:.3} s  R^2 {:.5}  ({} runs)",
        fit.slope, fit.intercept, fit.r_squared, fit.points
    );
    let path = out.join("timing.json");
    let filter = json!({ "strategy": a.strategy, "prune_epoch": a.prune_epoch });
    write_json(
        &path,
        &json!({ "schema_version": REPORT_SCHEMA_VERSION, "config": filter, "fit": fit, "points": points }),
    )?;
    println!("report: {}", path.display());
    Ok(())
}
