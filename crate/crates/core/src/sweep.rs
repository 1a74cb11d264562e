//! Grid sweeps over pruning settings and seeds, resumable from disk.
//!
//! Output layout under the sweep directory:
//! `runs/<run_id>.json`, `kept/<run_id>.json` and `aggregate.csv`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec::{self, Exec};
use crate::prune::{LossSource, PruneConfig, Strategy};
use crate::train::{self, RunConfig, RunRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub strategies: Vec<Strategy>,
    pub keep_fractions: Vec<f64>,
    pub prune_epochs: Vec<usize>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub loss_source: LossSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub strategy: Strategy,
    pub keep_fraction: f64,
    pub prune_epoch: usize,
    pub seed: u64,
}

impl Grid {
    /// Grid points in strategy, keep, epoch, seed order.
    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for &strategy in &self.strategies {
            for &keep_fraction in &self.keep_fractions {
                for &prune_epoch in &self.prune_epochs {
                    for &seed in &self.seeds {
                        out.push(GridPoint {
                            strategy,
                            keep_fraction,
                            prune_epoch,
                            seed,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn validate(&self, epochs: usize) -> Result<()> {
        if self.points().is_empty() {
            return Err(Error::config("sweep grid is empty"));
        }
        for p in self.points() {
            self.prune_config(&p).validate(epochs)?;
        }
        Ok(())
    }

    fn prune_config(&self, p: &GridPoint) -> PruneConfig {
        PruneConfig {
            strategy: p.strategy,
            prune_epoch: p.prune_epoch,
            keep_fraction: p.keep_fraction,
            loss_source: self.loss_source,
        }
    }

    /// `base` specialised to grid point `p`.
    pub fn config_for(&self, base: &RunConfig, p: &GridPoint) -> RunConfig {
        let mut cfg = base.clone();
        cfg.train.seed = p.seed;
        cfg.prune = Some(self.prune_config(p));
        cfg
    }
}

#[derive(Debug, Clone)]
pub enum Outcome {
    /// Loaded from an earlier sweep.
    Reused(RunRecord),
    Ran(RunRecord),
    Failed(String),
}

impl Outcome {
    pub fn record(&self) -> Option<&RunRecord> {
        match self {
            Outcome::Reused(r) | Outcome::Ran(r) => Some(r),
            Outcome::Failed(_) => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepEntry {
    pub config: RunConfig,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, Default)]
pub struct SweepOptions {
    /// Persist records here and skip grid points already on disk.
    pub out_dir: Option<PathBuf>,
    /// Concurrent runs; 1 keeps timings uncontended.
    pub jobs: usize,
    /// Copied into every record's `experiment` field.
    pub experiment: Option<serde_json::Value>,
}

pub fn run_path(out_dir: &Path, run_id: &str) -> PathBuf {
    out_dir.join("runs").join(format!("{run_id}.json"))
}

pub fn kept_path(out_dir: &Path, run_id: &str) -> PathBuf {
    out_dir.join("kept").join(format!("{run_id}.json"))
}

/// Runs one configuration, persisting its record and kept-id audit when
/// `out_dir` is given. With `reuse`, an existing record for the same run id
/// and config is returned instead of training again.
pub fn run_one(
    cfg: &RunConfig,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    out_dir: Option<&Path>,
    experiment: Option<&serde_json::Value>,
    reuse: bool,
) -> Outcome {
    let id = cfg.run_id();
    if let Some(dir) = out_dir.filter(|_| reuse) {
        let path = run_path(dir, &id);
        if path.exists() {
            match RunRecord::read(&path) {
                Ok(r) if r.config == *cfg => return Outcome::Reused(r),
                Ok(_) => log::warn!("{} holds a different config; rerunning", path.display()),
                Err(e) => log::warn!("unreadable record {}: {e}; rerunning", path.display()),
            }
        }
    }
    let result = (|| -> Result<RunRecord> {
        let out = train::run(train_set, eval_set, cfg)?;
        let mut rec = out.record;
        rec.experiment = experiment.cloned();
        if let Some(dir) = out_dir {
            if let (Some(kept), Some(ev)) = (&out.kept, rec.prune.as_mut()) {
                let kp = kept_path(dir, &id);
                kept.write(&kp)?;
                ev.kept_ids_file = Some(kp.display().to_string());
            }
            rec.write(&run_path(dir, &id))?;
        }
        Ok(rec)
    })();
    match result {
        Ok(r) => Outcome::Ran(r),
        Err(e) => {
            log::error!("run {id} failed: {e}");
            Outcome::Failed(e.to_string())
        }
    }
}

/// Runs every grid point; failures are recorded per entry.
pub fn sweep(
    base: &RunConfig,
    grid: &Grid,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    opts: &SweepOptions,
) -> Result<Vec<SweepEntry>> {
    grid.validate(base.train.epochs)?;
    let configs: Vec<RunConfig> = grid.points().iter().map(|p| grid.config_for(base, p)).collect();
    run_configs(&configs, train_set, eval_set, opts)
}

/// Like [`sweep`] over an explicit list of run configurations.
pub fn run_configs(
    configs: &[RunConfig],
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    opts: &SweepOptions,
) -> Result<Vec<SweepEntry>> {
    for c in configs {
        c.validate()?;
    }
    let mut ids: Vec<String> = configs.iter().map(RunConfig::run_id).collect();
    ids.sort();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::config(format!("duplicate run id {}", w[0])));
    }
    let jobs = opts.jobs.max(1);
    let go = |i: usize| SweepEntry {
        config: configs[i].clone(),
        outcome: run_one(
            &configs[i],
            train_set,
            eval_set,
            opts.out_dir.as_deref(),
            opts.experiment.as_ref(),
            true,
        ),
    };
    let entries = if jobs == 1 {
        Exec::Sequential.map(configs.len(), go)
    } else {
        exec::with_jobs(jobs, || Exec::Parallel.map(configs.len(), go))
    };
    if let Some(dir) = &opts.out_dir {
        write_aggregate(dir)?;
    }
    Ok(entries)
}

/// Every record under `<out_dir>/runs`, sorted by grid key.
pub fn load_records(out_dir: &Path) -> Result<Vec<RunRecord>> {
    let dir = out_dir.join("runs");
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        if path.extension().is_some_and(|e| e == "json") {
            out.push(RunRecord::read(&path)?);
        }
    }
    out.sort_by(|a, b| row_key(a).partial_cmp(&row_key(b)).unwrap_or(std::cmp::Ordering::Equal));
    Ok(out)
}

fn row_key(r: &RunRecord) -> (String, f64, usize, u64) {
    let row = AggregateRow::from(r);
    (row.strategy, row.keep_fraction, row.prune_epoch, row.seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub strategy: String,
    pub keep_fraction: f64,
    pub prune_epoch: usize,
    pub seed: u64,
    pub clean_acc: Option<f64>,
    pub robust_acc: Option<f64>,
    pub total_seconds: f64,
    pub seconds_per_epoch_post_prune: f64,
}

impl From<&RunRecord> for AggregateRow {
    fn from(r: &RunRecord) -> Self {
        let p = r.config.prune;
        Self {
            strategy: p.map_or("none".into(), |p| p.strategy.to_string()),
            keep_fraction: p.map_or(1.0, |p| p.keep_fraction),
            prune_epoch: p.map_or(0, |p| p.prune_epoch),
            seed: r.config.train.seed,
            clean_acc: r.clean_accuracy,
            robust_acc: r.robust_accuracy,
            total_seconds: r.total_seconds,
            seconds_per_epoch_post_prune: r.seconds_per_epoch_post_prune,
        }
    }
}

pub fn write_aggregate_csv(records: &[RunRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Degenerate(format!("{other:?}")),
    })?;
    for r in records {
        w.serialize(AggregateRow::from(r))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Rewrites `<out_dir>/aggregate.csv` from all stored records.
pub fn write_aggregate(out_dir: &Path) -> Result<PathBuf> {
    let records = load_records(out_dir)?;
    let path = out_dir.join("aggregate.csv");
    write_aggregate_csv(&records, &path)?;
    Ok(path)
}

pub fn read_aggregate(path: &Path) -> Result<Vec<AggregateRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Degenerate(format!("{other:?}")),
    })?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::AttackConfig;
    use crate::data::{gen_blobs, BlobsConfig};
    use crate::nn::{Architecture, LrSchedule};
    use crate::train::{EvalConfig, TrainConfig};

    fn setup() -> (RunConfig, Dataset) {
        let ds = gen_blobs(
            &BlobsConfig {
                classes: 2,
                per_class: 30,
                spacing: 4.0,
                spread: 0.5,
                dim: 2,
            },
            1,
        )
        .unwrap();
        let cfg = RunConfig {
            arch: Architecture::Linear,
            train: TrainConfig {
                epochs: 3,
                batch_size: 10,
                lr: LrSchedule::constant(0.05),
                momentum: 0.5,
                weight_decay: 0.0,
                seed: 0,
                eval_every: 0,
            },
            prune: None,
            attack: AttackConfig {
                clamp_input: false,
                ..AttackConfig::rs_fgsm(0.1, 0.1)
            },
            eval: EvalConfig {
                attack: AttackConfig {
                    clamp_input: false,
                    steps: 5,
                    restarts: 1,
                    ..AttackConfig::pgd_eval(0.1)
                },
                ..EvalConfig::pgd(0.1, 20)
            },
        };
        (cfg, ds)
    }

    fn grid(keeps: Vec<f64>, seeds: Vec<u64>) -> Grid {
        Grid {
            strategies: vec![Strategy::Random],
            keep_fractions: keeps,
            prune_epochs: vec![2],
            seeds,
            loss_source: LossSource::Clean,
        }
    }

    #[test]
    fn single_point_equals_direct_run() {
        let (base, ds) = setup();
        let g = grid(vec![0.5], vec![4]);
        let entries = sweep(&base, &g, &ds, Some(&ds), &SweepOptions::default()).unwrap();
        assert_eq!(entries.len(), 1);
        let direct = train::run(&ds, Some(&ds), &g.config_for(&base, &g.points()[0])).unwrap();
        let swept = entries[0].outcome.record().unwrap();
        assert_eq!(swept.epochs.len(), direct.record.epochs.len());
        assert_eq!(swept.robust_accuracy, direct.record.robust_accuracy);
        for (a, b) in swept.epochs.iter().zip(&direct.record.epochs) {
            assert_eq!(a.mean_train_loss, b.mean_train_loss);
        }
    }

    #[test]
    fn seeds_differ_but_configs_match() {
        let (base, ds) = setup();
        let entries = sweep(&base, &grid(vec![0.5], vec![1, 2]), &ds, None, &SweepOptions::default()).unwrap();
        assert_eq!(entries.len(), 2);
        let r: Vec<&RunRecord> = entries.iter().map(|e| e.outcome.record().unwrap()).collect();
        assert_eq!(r[0].config.prune, r[1].config.prune);
        assert_ne!(r[0].epochs[0].mean_train_loss, r[1].epochs[0].mean_train_loss);
    }

    #[test]
    fn resumes_from_disk() {
        let (base, ds) = setup();
        let dir = tempfile::tempdir().unwrap();
        let opts = SweepOptions {
            out_dir: Some(dir.path().to_path_buf()),
            jobs: 1,
            experiment: None,
        };
        let first = sweep(&base, &grid(vec![0.5, 0.8], vec![1]), &ds, None, &opts).unwrap();
        assert!(first.iter().all(|e| matches!(e.outcome, Outcome::Ran(_))));
        let second = sweep(&base, &grid(vec![0.5, 0.8], vec![1, 2]), &ds, None, &opts).unwrap();
        let ran = second.iter().filter(|e| matches!(e.outcome, Outcome::Ran(_))).count();
        let reused = second.iter().filter(|e| matches!(e.outcome, Outcome::Reused(_))).count();
        assert_eq!((ran, reused), (2, 2));

        let rows = read_aggregate(&dir.path().join("aggregate.csv")).unwrap();
        assert_eq!(rows.len(), 4);
        let keys: Vec<(f64, u64)> = rows.iter().map(|r| (r.keep_fraction, r.seed)).collect();
        assert_eq!(keys, vec![(0.5, 1), (0.5, 2), (0.8, 1), (0.8, 2)]);
        assert!(kept_path(dir.path(), &second[0].config.run_id()).exists());
    }

    #[test]
    fn parallel_jobs_give_identical_metrics() {
        let (base, ds) = setup();
        let g = grid(vec![0.4, 0.7], vec![1, 2]);
        let seq = sweep(&base, &g, &ds, Some(&ds), &SweepOptions { jobs: 1, ..Default::default() }).unwrap();
        let par = sweep(&base, &g, &ds, Some(&ds), &SweepOptions { jobs: 4, ..Default::default() }).unwrap();
        for (a, b) in seq.iter().zip(&par) {
            let (a, b) = (a.outcome.record().unwrap(), b.outcome.record().unwrap());
            assert_eq!(a.run_id, b.run_id);
            assert_eq!(a.robust_accuracy, b.robust_accuracy);
            assert_eq!(a.epochs[2].mean_train_loss, b.epochs[2].mean_train_loss);
        }
    }

    #[test]
    fn invalid_grid_is_rejected() {
        let (base, ds) = setup();
        assert!(sweep(&base, &grid(vec![], vec![1]), &ds, None, &SweepOptions::default()).is_err());
        assert!(sweep(&base, &grid(vec![1.7], vec![1]), &ds, None, &SweepOptions::default()).is_err());
    }
}
