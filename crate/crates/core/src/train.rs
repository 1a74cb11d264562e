//! Timed RS+FGSM adversarial training with a single pruning event.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::nn::{Architecture, LrSchedule, Model, Sgd};
use crate::prune::{self, KeptAudit, PruneConfig, AUDIT_SCHEMA_VERSION};
use crate::rng;

pub const RECORD_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub seed: u64,
    /// Evaluate every this many epochs; 0 evaluates only after the last one.
    #[serde(default)]
    pub eval_every: usize,
}

impl TrainConfig {
    /// Desk-scale MNIST defaults: 10 epochs of batch 100, momentum SGD at
    /// 0.01 after a half-rate first epoch, cut 10x for the last two epochs.
    /// Without the warm-up some seeds stall at chance level under the full
    /// attack budget.
    pub fn mnist(seed: u64) -> Self {
        Self {
            epochs: 10,
            batch_size: 100,
            lr: LrSchedule {
                phases: vec![
                    crate::nn::LrPhase { from_epoch: 1, lr: 0.005 },
                    crate::nn::LrPhase { from_epoch: 2, lr: 0.01 },
                    crate::nn::LrPhase { from_epoch: 9, lr: 0.001 },
                ],
            },
            momentum: 0.9,
            weight_decay: 0.0,
            seed,
            eval_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::config("weight_decay must be finite and non-negative"));
        }
        self.lr.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Skip accuracy evaluation entirely (timing sweeps).
    #[serde(default = "yes")]
    pub enabled: bool,
    pub attack: AttackConfig,
    /// Robust accuracy is measured on the first this-many evaluation examples.
    pub robust_examples: usize,
    /// Clean accuracy subset; `None` uses the whole evaluation set.
    #[serde(default)]
    pub clean_examples: Option<usize>,
}

fn yes() -> bool {
    true
}

impl EvalConfig {
    pub fn pgd(epsilon: f32, robust_examples: usize) -> Self {
        Self {
            enabled: true,
            attack: AttackConfig::pgd_eval(epsilon),
            robust_examples,
            clean_examples: None,
        }
    }

    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::pgd(0.3, 0)
        }
    }
}

/// Everything that determines a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub arch: Architecture,
    pub train: TrainConfig,
    #[serde(default)]
    pub prune: Option<PruneConfig>,
    pub attack: AttackConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.attack.validate()?;
        if self.attack.steps != 1 {
            return Err(Error::config("the training attack is single-step"));
        }
        if self.eval.enabled {
            self.eval.attack.validate()?;
        }
        if let Some(p) = &self.prune {
            p.validate(self.train.epochs)?;
        }
        Ok(())
    }

    /// Stable identifier derived from the prune settings and seed.
    pub fn run_id(&self) -> String {
        match &self.prune {
            Some(p) => format!(
                "{}_k{:.3}_e{}_s{}",
                p.strategy, p.keep_fraction, p.prune_epoch, self.train.seed
            ),
            None => format!("full_s{}", self.train.seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Wall-clock seconds of this epoch's batch loop.
    pub seconds: f64,
    pub dataset_size: usize,
    /// Mean adversarial training loss over the epoch's examples.
    pub mean_train_loss: f64,
    pub lr: f64,
    #[serde(default)]
    pub clean_accuracy: Option<f64>,
    #[serde(default)]
    pub robust_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneEvent {
    pub epoch: usize,
    pub size_before: usize,
    pub size_after: usize,
    /// Loss-table and selection time, excluded from epoch timings.
    pub seconds: f64,
    /// Where the kept-id audit was written, if anywhere.
    #[serde(default)]
    pub kept_ids_file: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    /// A non-finite loss or gradient stopped the run.
    Diverged { epoch: usize, step: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub run_id: String,
    pub config: RunConfig,
    /// Free-form resolved experiment settings supplied by the caller.
    #[serde(default)]
    pub experiment: Option<serde_json::Value>,
    #[serde(flatten)]
    pub status: RunStatus,
    pub epochs: Vec<EpochRecord>,
    pub prune: Option<PruneEvent>,
    pub clean_accuracy: Option<f64>,
    pub robust_accuracy: Option<f64>,
    pub train_seconds: f64,
    pub total_seconds: f64,
    pub seconds_per_epoch_post_prune: f64,
}

impl RunRecord {
    pub fn is_completed(&self) -> bool {
        self.status == RunStatus::Completed
    }

    /// Training-set size after the last epoch.
    pub fn final_size(&self) -> Option<usize> {
        self.epochs.last().map(|e| e.dataset_size)
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        write_json_atomic(path, self)
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub(crate) fn write_json_atomic<T: Serialize>(path: &std::path::Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("json.tmp");
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub struct TrainOutcome {
    pub model: Model,
    pub record: RunRecord,
    pub kept: Option<KeptAudit>,
}

/// Builds the model for `cfg` and trains it.
pub fn run(train_set: &Dataset, eval_set: Option<&Dataset>, cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = Model::new(cfg.arch.clone(), train_set.shape(), train_set.classes(), cfg.train.seed)?;
    adversarial_train(model, train_set, eval_set, cfg)
}

pub fn adversarial_train(
    model: Model,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    cfg: &RunConfig,
) -> Result<TrainOutcome> {
    adversarial_train_observed(model, train_set, eval_set, cfg, &mut |_, _| {})
}

/// [`adversarial_train`] reporting each batch's example ids to `observer`
/// as `(epoch, ids)`.
pub fn adversarial_train_observed(
    mut model: Model,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    cfg: &RunConfig,
    observer: &mut dyn FnMut(usize, &[u64]),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Degenerate("training on an empty dataset".into()));
    }
    if model.input_shape() != train_set.shape() || model.classes() != train_set.classes() {
        return Err(Error::ShapeMismatch {
            expected: model.input_shape().to_vec(),
            found: train_set.shape().to_vec(),
        });
    }

    let tc = &cfg.train;
    let seed = tc.seed;
    let mut opt = Sgd::new(tc.momentum as f32, tc.weight_decay as f32, model.param_count());
    let mut data = std::borrow::Cow::Borrowed(train_set);
    let mut epochs = Vec::with_capacity(tc.epochs);
    let mut prune_event = None;
    let mut kept = None;
    let mut status = RunStatus::Completed;

    'epochs: for epoch in 1..=tc.epochs {
        if let Some(p) = cfg.prune.filter(|p| p.prune_epoch == epoch) {
            let start = Instant::now();
            let mut prng = rng::substream(seed, "prune", 0);
            let table =
                prune::compute_loss_table(&model, &data, p.loss_source, &cfg.attack, &mut prng, Exec::Sequential)?;
            let ids = prune::select_kept(&table, p.strategy, p.keep_fraction, &mut prng)?;
            let before = data.len();
            data = std::borrow::Cow::Owned(prune::apply_prune(&data, &ids)?);
            prune_event = Some(PruneEvent {
                epoch,
                size_before: before,
                size_after: data.len(),
                seconds: start.elapsed().as_secs_f64(),
                kept_ids_file: None,
            });
            kept = Some(KeptAudit {
                schema_version: AUDIT_SCHEMA_VERSION,
                run_id: cfg.run_id(),
                strategy: p.strategy,
                epoch,
                keep_fraction: p.keep_fraction,
                ids,
            });
        }

        let lr = tc.lr.lr_at(epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::substream(seed, "shuffle", epoch as u64));
        let mut arng = rng::substream(seed, "attack", epoch as u64);
        let mut loss_sum = 0.0f64;

        let start = Instant::now();
        for (step, chunk) in order.chunks(tc.batch_size).enumerate() {
            let batch = data.batch(chunk)?;
            let ids: Vec<u64> = chunk.iter().map(|&p| data.ids()[p]).collect();
            observer(epoch, &ids);
            let delta = attack::rs_fgsm(&model, &batch, &cfg.attack, &mut arng)?;
            let adv = attack::perturb(&batch, &delta, cfg.attack.clamp_input);
            let (grad, loss) = model.param_grad(&adv)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                log::warn!("run {} diverged at epoch {epoch} step {step}", cfg.run_id());
                status = RunStatus::Diverged { epoch, step };
                epochs.push(EpochRecord {
                    epoch,
                    seconds: start.elapsed().as_secs_f64(),
                    dataset_size: data.len(),
                    mean_train_loss: f64::NAN,
                    lr,
                    clean_accuracy: None,
                    robust_accuracy: None,
                });
                break 'epochs;
            }
            loss_sum += loss as f64 * chunk.len() as f64;
            opt.step(&mut model, &grad, lr as f32);
        }
        let seconds = start.elapsed().as_secs_f64();

        let mut rec = EpochRecord {
            epoch,
            seconds,
            dataset_size: data.len(),
            mean_train_loss: loss_sum / data.len() as f64,
            lr,
            clean_accuracy: None,
            robust_accuracy: None,
        };
        let due = epoch == tc.epochs || (tc.eval_every > 0 && epoch % tc.eval_every == 0);
        if due && cfg.eval.enabled {
            if let Some(ev) = eval_set {
                let (c, r) = evaluate(&model, ev, &cfg.eval, seed, epoch)?;
                rec.clean_accuracy = Some(c);
                rec.robust_accuracy = r;
            }
        }
        log::info!(
            "{} epoch {epoch}: n={} loss={:.4} {:.1}s",
            cfg.run_id(),
            rec.dataset_size,
            rec.mean_train_loss,
            rec.seconds
        );
        epochs.push(rec);
    }

    let train_seconds: f64 = epochs.iter().map(|e| e.seconds).sum();
    let prune_seconds = prune_event.as_ref().map_or(0.0, |p| p.seconds);
    let from = cfg.prune.map_or(1, |p| p.prune_epoch);
    let post: Vec<f64> = epochs.iter().filter(|e| e.epoch >= from).map(|e| e.seconds).collect();
    let last = epochs.last().filter(|_| status == RunStatus::Completed);
    let record = RunRecord {
        schema_version: RECORD_SCHEMA_VERSION,
        run_id: cfg.run_id(),
        config: cfg.clone(),
        experiment: None,
        clean_accuracy: last.and_then(|e| e.clean_accuracy),
        robust_accuracy: last.and_then(|e| e.robust_accuracy),
        status,
        epochs,
        prune: prune_event,
        train_seconds,
        total_seconds: train_seconds + prune_seconds,
        seconds_per_epoch_post_prune: if post.is_empty() {
            f64::NAN
        } else {
            post.iter().sum::<f64>() / post.len() as f64
        },
    };
    Ok(TrainOutcome { model, record, kept })
}

/// Clean accuracy and, when `robust_examples > 0`, PGD robust accuracy.
pub fn evaluate(
    model: &Model,
    eval_set: &Dataset,
    cfg: &EvalConfig,
    seed: u64,
    epoch: usize,
) -> Result<(f64, Option<f64>)> {
    let exec = Exec::default();
    let clean_set = match cfg.clean_examples {
        Some(n) => eval_set.head(n.min(eval_set.len())),
        None => eval_set.clone(),
    };
    let clean = attack::clean_accuracy(model, &clean_set, exec)?;
    let robust = if cfg.robust_examples > 0 {
        let sub = eval_set.head(cfg.robust_examples.min(eval_set.len()));
        let mut erng = rng::substream(seed, "eval", epoch as u64);
        Some(attack::robust_accuracy_with(model, &sub, &cfg.attack, &mut erng, exec)?)
    } else {
        None
    };
    Ok((clean, robust))
}

/// Least-squares line `y = slope * x + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub points: usize,
}

pub fn fit_line(points: &[(f64, f64)]) -> Result<LinearFit> {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    if points.len() < 2 || !(sxx > 0.0) {
        return Err(Error::Degenerate("line fit needs at least two distinct x values".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = points
        .iter()
        .map(|p| (p.1 - (slope * p.0 + intercept)).powi(2))
        .sum();
    let r_squared = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    Ok(LinearFit {
        slope,
        intercept,
        r_squared,
        points: points.len(),
    })
}

/// Fits post-prune seconds per epoch against post-prune dataset size.
pub fn timing_linearity(records: &[RunRecord]) -> Result<LinearFit> {
    let points: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.is_completed())
        .filter_map(|r| Some((r.final_size()? as f64, r.seconds_per_epoch_post_prune)))
        .collect();
    let mut sizes: Vec<u64> = points.iter().map(|p| p.0 as u64).collect();
    sizes.sort_unstable();
    sizes.dedup();
    if sizes.len() < 3 {
        return Err(Error::Degenerate(format!(
            "timing fit needs at least 3 distinct dataset sizes, got {}",
            sizes.len()
        )));
    }
    fit_line(&points)
}
