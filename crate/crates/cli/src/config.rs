//! Experiment configuration: defaults, then a TOML file, then environment,
//! then command-line flags.

use std::path::{Path, PathBuf};

use advprune::attack::AttackConfig;
use advprune::data::{self, BlobsConfig, Dataset, Split};
use advprune::nn::{Architecture, LrPhase, LrSchedule};
use advprune::prune::{LossSource, PruneConfig, Strategy};
use advprune::sweep::Grid;
use advprune::train::{EvalConfig, RunConfig, TrainConfig};
use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

pub const OUT_ENV: &str = "ADVPRUNE_OUT";
pub const JOBS_ENV: &str = "ADVPRUNE_JOBS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
    Blobs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    /// Directory holding the IDX or CIFAR-10 binary files.
    pub dir: Option<PathBuf>,
    /// Use only the first this-many training examples.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub blobs: BlobsConfig,
    pub blobs_seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Mnist,
            dir: None,
            train_limit: None,
            test_limit: None,
            blobs: BlobsConfig::default(),
            blobs_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Reduced rate for the first `warmup_epochs` epochs.
    pub warmup_lr: Option<f64>,
    pub warmup_epochs: usize,
    /// Epoch from which the rate is multiplied by `lr_drop_factor`.
    pub lr_drop_epoch: Option<usize>,
    pub lr_drop_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 100,
            lr: 0.01,
            warmup_lr: Some(0.005),
            warmup_epochs: 1,
            lr_drop_epoch: Some(9),
            lr_drop_factor: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 1,
            eval_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneSection {
    /// `None` trains on the full dataset.
    pub strategy: Option<Strategy>,
    pub keep_fraction: f64,
    pub prune_epoch: usize,
    pub loss_source: LossSource,
}

impl Default for PruneSection {
    fn default() -> Self {
        Self {
            strategy: None,
            keep_fraction: 1.0,
            prune_epoch: 3,
            loss_source: LossSource::Clean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    /// Defaults to 0.3 for MNIST and blobs, 8/255 for CIFAR-10.
    pub epsilon: Option<f32>,
    /// Defaults to 1.25 epsilon.
    pub alpha: Option<f32>,
    /// Defaults to true for image datasets.
    pub clamp_input: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub enabled: bool,
    pub robust_examples: usize,
    pub clean_examples: Option<usize>,
    pub pgd_steps: usize,
    pub pgd_restarts: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            enabled: true,
            robust_examples: 1000,
            clean_examples: None,
            pgd_steps: 50,
            pgd_restarts: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub strategies: Vec<Strategy>,
    pub keep_fractions: Vec<f64>,
    pub prune_epochs: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Also run one unpruned model per seed.
    pub include_full: bool,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            strategies: vec![Strategy::Random],
            keep_fractions: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            prune_epochs: vec![3],
            seeds: vec![1],
            include_full: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    pub jobs: usize,
    pub arch: Option<Architecture>,
    pub dataset: DatasetSection,
    pub train: TrainSection,
    pub prune: PruneSection,
    pub attack: AttackSection,
    pub eval: EvalSection,
    pub grid: GridSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("out"),
            jobs: 1,
            arch: None,
            dataset: DatasetSection::default(),
            train: TrainSection::default(),
            prune: PruneSection::default(),
            attack: AttackSection::default(),
            eval: EvalSection::default(),
            grid: GridSection::default(),
        }
    }
}

/// Flags shared by every subcommand that builds an experiment.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct CommonArgs {
    /// TOML experiment file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub dataset: Option<DatasetKind>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Output directory (env: ADVPRUNE_OUT).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub train_limit: Option<usize>,
    #[arg(long)]
    pub test_limit: Option<usize>,
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct RunArgs {
    /// Architecture: linear, mlp:<h1>,<h2>,... or lenet.
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f32>,
    #[arg(long)]
    pub alpha: Option<f32>,
    #[arg(long)]
    pub loss_source: Option<String>,
    #[arg(long)]
    pub robust_examples: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Skip accuracy evaluation (timing runs).
    #[arg(long)]
    pub no_eval: bool,
}

pub fn parse_arch(s: &str) -> anyhow::Result<Architecture> {
    match s {
        "linear" => Ok(Architecture::Linear),
        "lenet" => Ok(Architecture::Lenet),
        _ => {
            let Some(rest) = s.strip_prefix("mlp:") else {
                bail!("unknown architecture `{s}` (expected linear, lenet or mlp:<sizes>)");
            };
            let hidden = rest
                .split(',')
                .map(|h| h.trim().parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .with_context(|| format!("bad hidden sizes in `{s}`"))?;
            Ok(Architecture::Mlp { hidden })
        }
    }
}

pub fn parse_list<T: std::str::FromStr>(s: &str) -> anyhow::Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<T>().map_err(|e| anyhow::anyhow!("bad list item `{p}`: {e}")))
        .collect()
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => Self::default(),
        };
        if let Ok(v) = std::env::var(OUT_ENV) {
            cfg.out_dir = PathBuf::from(v);
        }
        if let Ok(v) = std::env::var(JOBS_ENV) {
            cfg.jobs = v.parse().with_context(|| format!("{JOBS_ENV}={v} is not a job count"))?;
        }
        Ok(cfg)
    }

    pub fn apply_common(&mut self, a: &CommonArgs) {
        if let Some(d) = a.dataset {
            self.dataset.kind = d;
        }
        if let Some(d) = &a.data_dir {
            self.dataset.dir = Some(d.clone());
        }
        if let Some(o) = &a.out {
            self.out_dir = o.clone();
        }
        if a.train_limit.is_some() {
            self.dataset.train_limit = a.train_limit;
        }
        if a.test_limit.is_some() {
            self.dataset.test_limit = a.test_limit;
        }
    }

    pub fn apply_run(&mut self, a: &RunArgs) -> anyhow::Result<()> {
        if let Some(s) = &a.arch {
            self.arch = Some(parse_arch(s)?);
        }
        let t = &mut self.train;
        t.epochs = a.epochs.unwrap_or(t.epochs);
        t.batch_size = a.batch_size.unwrap_or(t.batch_size);
        t.lr = a.lr.unwrap_or(t.lr);
        t.momentum = a.momentum.unwrap_or(t.momentum);
        t.eval_every = a.eval_every.unwrap_or(t.eval_every);
        if a.epsilon.is_some() {
            self.attack.epsilon = a.epsilon;
        }
        if a.alpha.is_some() {
            self.attack.alpha = a.alpha;
        }
        if let Some(ls) = &a.loss_source {
            self.prune.loss_source = match ls.as_str() {
                "clean" => LossSource::Clean,
                "adversarial" => LossSource::Adversarial,
                _ => bail!("unknown loss source `{ls}` (expected clean or adversarial)"),
            };
        }
        self.eval.robust_examples = a.robust_examples.unwrap_or(self.eval.robust_examples);
        if a.no_eval {
            self.eval.enabled = false;
        }
        Ok(())
    }

    fn epsilon(&self) -> f32 {
        self.attack.epsilon.unwrap_or(match self.dataset.kind {
            DatasetKind::Cifar10 => 8.0 / 255.0,
            _ => 0.3,
        })
    }

    pub fn architecture(&self) -> Architecture {
        self.arch.clone().unwrap_or(match self.dataset.kind {
            DatasetKind::Mnist | DatasetKind::Cifar10 => Architecture::Lenet,
            DatasetKind::Blobs => Architecture::Mlp { hidden: vec![32] },
        })
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        let t = &self.train;
        let mut phases = vec![LrPhase { from_epoch: 1, lr: t.lr }];
        if let Some(w) = t.warmup_lr.filter(|_| t.warmup_epochs > 0 && t.warmup_epochs < t.epochs) {
            phases = vec![
                LrPhase { from_epoch: 1, lr: w },
                LrPhase {
                    from_epoch: t.warmup_epochs + 1,
                    lr: t.lr,
                },
            ];
        }
        let last = phases[phases.len() - 1].from_epoch;
        if let Some(e) = t.lr_drop_epoch.filter(|&e| e > last && e <= t.epochs) {
            phases.push(LrPhase {
                from_epoch: e,
                lr: t.lr * t.lr_drop_factor,
            });
        }
        LrSchedule { phases }
    }

    fn prune_config(&self, strategy: Strategy, keep: f64, epoch: usize) -> PruneConfig {
        PruneConfig {
            strategy,
            prune_epoch: epoch,
            keep_fraction: keep,
            loss_source: self.prune.loss_source,
        }
    }

    /// The single-run configuration described by this experiment.
    pub fn run_config(&self) -> anyhow::Result<RunConfig> {
        let eps = self.epsilon();
        let clamp = self
            .attack
            .clamp_input
            .unwrap_or(self.dataset.kind != DatasetKind::Blobs);
        let attack = AttackConfig {
            clamp_input: clamp,
            ..AttackConfig::rs_fgsm(eps, self.attack.alpha.unwrap_or(1.25 * eps))
        };
        let e = &self.eval;
        let eval = EvalConfig {
            enabled: e.enabled,
            attack: AttackConfig {
                steps: e.pgd_steps,
                restarts: e.pgd_restarts,
                clamp_input: clamp,
                ..AttackConfig::pgd_eval(eps)
            },
            robust_examples: e.robust_examples,
            clean_examples: e.clean_examples,
        };
        let t = &self.train;
        let cfg = RunConfig {
            arch: self.architecture(),
            train: TrainConfig {
                epochs: t.epochs,
                batch_size: t.batch_size,
                lr: self.lr_schedule(),
                momentum: t.momentum,
                weight_decay: t.weight_decay,
                seed: t.seed,
                eval_every: t.eval_every,
            },
            prune: self
                .prune
                .strategy
                .map(|s| self.prune_config(s, self.prune.keep_fraction, self.prune.prune_epoch)),
            attack,
            eval,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// All run configurations of the sweep grid, validated.
    pub fn sweep_configs(&self) -> anyhow::Result<Vec<RunConfig>> {
        let mut base = self.run_config()?;
        base.prune = None;
        let g = &self.grid;
        let grid = Grid {
            strategies: g.strategies.clone(),
            keep_fractions: g.keep_fractions.clone(),
            prune_epochs: g.prune_epochs.clone(),
            seeds: g.seeds.clone(),
            loss_source: self.prune.loss_source,
        };
        let mut out = Vec::new();
        if g.include_full {
            for &seed in &g.seeds {
                let mut c = base.clone();
                c.train.seed = seed;
                out.push(c);
            }
        }
        if !grid.strategies.is_empty() {
            grid.validate(base.train.epochs)?;
            out.extend(grid.points().iter().map(|p| grid.config_for(&base, p)));
        }
        if out.is_empty() {
            bail!(advprune::Error::config("sweep grid is empty"));
        }
        for c in &out {
            c.validate()?;
        }
        Ok(out)
    }

    pub fn validate_jobs(&self) -> anyhow::Result<()> {
        if self.jobs == 0 {
            bail!(advprune::Error::config("jobs must be at least 1"));
        }
        Ok(())
    }

    fn data_dir(&self) -> anyhow::Result<PathBuf> {
        match &self.dataset.dir {
            Some(d) => Ok(d.clone()),
            None => match self.dataset.kind {
                DatasetKind::Mnist => Ok(PathBuf::from("data/mnist")),
                DatasetKind::Cifar10 => Ok(PathBuf::from("data/cifar10")),
                DatasetKind::Blobs => bail!("blobs need no data directory"),
            },
        }
    }

    /// Loads `(train, test)`.
    pub fn load_data(&self) -> anyhow::Result<(Dataset, Dataset)> {
        let (train, test) = match self.dataset.kind {
            DatasetKind::Mnist => {
                let dir = self.data_dir()?;
                (
                    data::load_mnist_dir(&dir, Split::Train)?,
                    data::load_mnist_dir(&dir, Split::Test)?,
                )
            }
            DatasetKind::Cifar10 => {
                let dir = self.data_dir()?;
                let train: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
                (
                    data::load_cifar10(&train)?,
                    data::load_cifar10(&[dir.join("test_batch.bin")])?,
                )
            }
            DatasetKind::Blobs => {
                let b = &self.dataset.blobs;
                (
                    data::gen_blobs(b, self.dataset.blobs_seed)?,
                    data::gen_blobs(b, self.dataset.blobs_seed.wrapping_add(1))?,
                )
            }
        };
        let limit = |d: Dataset, n: Option<usize>| match n {
            Some(n) if n < d.len() => d.head(n),
            _ => d,
        };
        Ok((limit(train, self.dataset.train_limit), limit(test, self.dataset.test_limit)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let cfg = ExperimentConfig::default();
        let run = cfg.run_config().unwrap();
        assert_eq!(run.arch, Architecture::Lenet);
        assert_eq!(run.attack.epsilon, 0.3);
        assert_eq!(run.attack.alpha, 0.375);
        assert!(run.prune.is_none());
        assert_eq!(run.train.lr, advprune::train::TrainConfig::mnist(1).lr);
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let cfg = ExperimentConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert!(toml::from_str::<ExperimentConfig>("bogus = 1").is_err());
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: ExperimentConfig = toml::from_str(
            "[prune]\nstrategy = \"lowhigh\"\nkeep_fraction = 0.4\n[train]\nseed = 5\n",
        )
        .unwrap();
        let run = cfg.run_config().unwrap();
        let p = run.prune.unwrap();
        assert_eq!((p.strategy, p.keep_fraction, p.prune_epoch), (Strategy::LowHigh, 0.4, 3));
        assert_eq!(run.train.seed, 5);
        assert_eq!(run.train.epochs, 10);
    }

    #[test]
    fn arch_parsing() {
        assert_eq!(parse_arch("mlp:16,8").unwrap(), Architecture::Mlp { hidden: vec![16, 8] });
        assert!(parse_arch("resnet").is_err());
        assert!(parse_arch("mlp:a").is_err());
    }

    #[test]
    fn full_runs_join_the_grid() {
        let mut cfg = ExperimentConfig::default();
        cfg.grid.include_full = true;
        cfg.grid.seeds = vec![1, 2];
        cfg.grid.keep_fractions = vec![0.5];
        let runs = cfg.sweep_configs().unwrap();
        assert_eq!(runs.len(), 4);
        assert_eq!(runs.iter().filter(|r| r.prune.is_none()).count(), 2);
    }
}
