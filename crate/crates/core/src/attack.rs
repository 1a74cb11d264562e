//! l-infinity attacks: FGSM, RS+FGSM (the single-step training attack) and
//! multi-restart PGD (the evaluation attack).
//!
//! All generators return a perturbation `delta` shaped like the batch
//! inputs, with `|delta_i| <= epsilon` and, when `clamp_input` is set,
//! `x + delta` inside the `[0, 1]` box.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::nn::{argmax_rows, Batch, Model, Want};
use crate::rng;

/// Examples per batch when sweeping a whole dataset.
pub const EVAL_BATCH: usize = 250;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f32,
    pub alpha: f32,
    pub steps: usize,
    pub restarts: usize,
    pub clamp_input: bool,
    /// Start PGD from a uniform point in the ball instead of `delta = 0`.
    #[serde(default = "yes")]
    pub random_start: bool,
    /// Stop updating an example once it is misclassified (PGD only).
    #[serde(default = "yes")]
    pub early_stop: bool,
}

fn yes() -> bool {
    true
}

impl AttackConfig {
    pub fn rs_fgsm(epsilon: f32, alpha: f32) -> Self {
        Self {
            epsilon,
            alpha,
            steps: 1,
            restarts: 1,
            clamp_input: true,
            random_start: true,
            early_stop: false,
        }
    }

    /// MNIST training defaults: epsilon 0.3, alpha 0.375.
    pub fn mnist_train() -> Self {
        Self::rs_fgsm(0.3, 0.375)
    }

    /// CIFAR-10 training defaults: epsilon 8/255, alpha 10/255.
    pub fn cifar_train() -> Self {
        Self::rs_fgsm(8.0 / 255.0, 10.0 / 255.0)
    }

    /// Evaluation attack: 50 steps, 10 restarts, alpha = epsilon / 4.
    pub fn pgd_eval(epsilon: f32) -> Self {
        Self {
            epsilon,
            alpha: epsilon / 4.0,
            steps: 50,
            restarts: 10,
            clamp_input: true,
            random_start: true,
            early_stop: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || self.epsilon > 1.0 {
            return Err(Error::config(format!("epsilon {} outside [0, 1]", self.epsilon)));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::config(format!("alpha {} must be positive", self.alpha)));
        }
        if self.steps == 0 || self.restarts == 0 {
            return Err(Error::config("attack steps and restarts must be at least 1"));
        }
        Ok(())
    }
}

/// `sign` with `sign(0) = 0`.
pub fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Projects `delta` onto the epsilon ball and, optionally, onto the set
/// keeping `x + delta` in `[0, 1]`.
fn project(delta: &mut [f32], x: &[f32], eps: f32, clamp_input: bool) {
    for (d, &xi) in delta.iter_mut().zip(x) {
        let (mut lo, mut hi) = (-eps, eps);
        if clamp_input {
            lo = lo.max(-xi);
            hi = hi.min(1.0 - xi);
        }
        *d = d.clamp(lo, hi.max(lo));
    }
}

/// `x + delta` as a batch, clamped to `[0, 1]` when `clamp_input`.
pub fn perturb(batch: &Batch, delta: &[f32], clamp_input: bool) -> Batch {
    let x: Vec<f32> = batch
        .inputs()
        .iter()
        .zip(delta)
        .map(|(&x, &d)| {
            let v = x + d;
            if clamp_input {
                v.clamp(0.0, 1.0)
            } else {
                v
            }
        })
        .collect();
    batch.with_inputs(x)
}

fn uniform_start(n: usize, eps: f32, rng: &mut impl Rng) -> Vec<f32> {
    if eps == 0.0 {
        return vec![0.0; n];
    }
    (0..n).map(|_| rng.random_range(-eps..=eps)).collect()
}

fn input_grad(model: &Model, batch: &Batch) -> Result<(Vec<f32>, Vec<f32>, Vec<f32>)> {
    let ev = model.evaluate(
        batch,
        Want {
            input_grad: true,
            param_grad: false,
        },
    )?;
    Ok((ev.input_grad.expect("requested"), ev.logits, ev.losses))
}

/// Uniform random start in the ball, one signed-gradient step of size
/// `alpha` evaluated at the start point, then projection.
pub fn rs_fgsm(model: &Model, batch: &Batch, cfg: &AttackConfig, rng: &mut impl Rng) -> Result<Vec<f32>> {
    cfg.validate()?;
    if cfg.steps != 1 {
        return Err(Error::config("RS+FGSM takes exactly one step"));
    }
    let x = batch.inputs();
    let mut delta = uniform_start(x.len(), cfg.epsilon, rng);
    project(&mut delta, x, cfg.epsilon, cfg.clamp_input);
    let (g, _, _) = input_grad(model, &perturb(batch, &delta, cfg.clamp_input))?;
    for (d, gi) in delta.iter_mut().zip(&g) {
        *d += cfg.alpha * sign(*gi);
    }
    project(&mut delta, x, cfg.epsilon, cfg.clamp_input);
    Ok(delta)
}

/// `delta = epsilon * sign(grad_x loss)`, no random start.
pub fn fgsm(model: &Model, batch: &Batch, cfg: &AttackConfig) -> Result<Vec<f32>> {
    cfg.validate()?;
    let (g, _, _) = input_grad(model, batch)?;
    let mut delta: Vec<f32> = g.iter().map(|&gi| cfg.epsilon * sign(gi)).collect();
    project(&mut delta, batch.inputs(), cfg.epsilon, cfg.clamp_input);
    Ok(delta)
}

/// Per-example result of a PGD run.
#[derive(Debug, Clone)]
pub struct PgdOutcome {
    /// Highest-loss final iterate over all restarts.
    pub delta: Vec<f32>,
    pub loss: Vec<f32>,
    /// Misclassified at the final iterate of at least one restart.
    pub fooled: Vec<bool>,
}

/// Multi-restart PGD; returns the highest-loss perturbation per example.
pub fn pgd(model: &Model, batch: &Batch, cfg: &AttackConfig, rng: &mut impl RngCore) -> Result<Vec<f32>> {
    Ok(pgd_outcome(model, batch, cfg, rng)?.delta)
}

/// Multi-restart PGD with per-example bookkeeping.
///
/// Restart `r` draws its start from substream `r` of one seed taken from
/// `rng`, always for the full batch, so an example's trajectory does not
/// depend on which other examples are still being attacked. With
/// `early_stop`, an example stops moving once misclassified and is skipped
/// by later restarts.
pub fn pgd_outcome(
    model: &Model,
    batch: &Batch,
    cfg: &AttackConfig,
    rng: &mut impl RngCore,
) -> Result<PgdOutcome> {
    cfg.validate()?;
    let base = rng.next_u64();
    let n = batch.len();
    let per = batch.example_len();
    let classes = model.classes();
    let x = batch.inputs();
    let labels = batch.labels();

    let mut best = PgdOutcome {
        delta: vec![0.0; x.len()],
        loss: vec![f32::NEG_INFINITY; n],
        fooled: vec![false; n],
    };

    for r in 0..cfg.restarts {
        let mut sub = rng::substream(base, "pgd-restart", r as u64);
        let mut delta = if cfg.random_start {
            uniform_start(x.len(), cfg.epsilon, &mut sub)
        } else {
            vec![0.0; x.len()]
        };
        project(&mut delta, x, cfg.epsilon, cfg.clamp_input);

        let attempted: Vec<usize> = if cfg.early_stop {
            (0..n).filter(|&i| !best.fooled[i]).collect()
        } else {
            (0..n).collect()
        };
        if attempted.is_empty() {
            break;
        }
        let mut active = attempted.clone();
        for _ in 0..cfg.steps {
            if active.is_empty() {
                break;
            }
            let cur = perturb(&batch.select(&active), &gather(&delta, &active, per), cfg.clamp_input);
            let (g, logits, _) = input_grad(model, &cur)?;
            let preds = argmax_rows(&logits, classes);
            let mut still = Vec::with_capacity(active.len());
            for (j, &i) in active.iter().enumerate() {
                if cfg.early_stop && preds[j] != labels[i] {
                    continue;
                }
                let d = &mut delta[i * per..(i + 1) * per];
                for (dk, gk) in d.iter_mut().zip(&g[j * per..(j + 1) * per]) {
                    *dk += cfg.alpha * sign(*gk);
                }
                project(d, &x[i * per..(i + 1) * per], cfg.epsilon, cfg.clamp_input);
                still.push(i);
            }
            active = still;
        }

        let fin = perturb(&batch.select(&attempted), &gather(&delta, &attempted, per), cfg.clamp_input);
        let ev = model.evaluate(&fin, Want::default())?;
        let preds = argmax_rows(&ev.logits, classes);
        for (j, &i) in attempted.iter().enumerate() {
            if preds[j] != labels[i] {
                best.fooled[i] = true;
            }
            if ev.losses[j] > best.loss[i] {
                best.loss[i] = ev.losses[j];
                best.delta[i * per..(i + 1) * per].copy_from_slice(&delta[i * per..(i + 1) * per]);
            }
        }
    }
    Ok(best)
}

fn gather(v: &[f32], rows: &[usize], per: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows.len() * per);
    for &i in rows {
        out.extend_from_slice(&v[i * per..(i + 1) * per]);
    }
    out
}

fn batch_ranges(n: usize) -> Vec<Vec<usize>> {
    (0..n)
        .step_by(EVAL_BATCH)
        .map(|s| (s..(s + EVAL_BATCH).min(n)).collect())
        .collect()
}

/// Fraction of examples classified correctly on clean inputs.
pub fn clean_accuracy(model: &Model, dataset: &Dataset, exec: Exec) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Degenerate("accuracy of an empty dataset".into()));
    }
    let counts = exec.map_slice(&batch_ranges(dataset.len()), |pos| -> Result<usize> {
        let b = dataset.batch(pos)?;
        let preds = model.predict(&b)?;
        Ok(preds.iter().zip(b.labels()).filter(|(p, y)| p == y).count())
    });
    let correct = counts.into_iter().collect::<Result<Vec<_>>>()?.into_iter().sum::<usize>();
    Ok(correct as f64 / dataset.len() as f64)
}

/// Fraction of examples that are classified correctly on the clean input
/// and survive every PGD restart.
pub fn robust_accuracy(
    model: &Model,
    dataset: &Dataset,
    cfg: &AttackConfig,
    rng: &mut impl RngCore,
) -> Result<f64> {
    robust_accuracy_with(model, dataset, cfg, rng, Exec::default())
}

pub fn robust_accuracy_with(
    model: &Model,
    dataset: &Dataset,
    cfg: &AttackConfig,
    rng: &mut impl RngCore,
    exec: Exec,
) -> Result<f64> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Degenerate("accuracy of an empty dataset".into()));
    }
    let base = rng.next_u64();
    let ranges = batch_ranges(dataset.len());
    let counts = exec.map(ranges.len(), |k| -> Result<usize> {
        let b = dataset.batch(&ranges[k])?;
        let clean = model.predict(&b)?;
        let mut sub = rng::substream(base, "robust-eval", k as u64);
        let out = pgd_outcome(model, &b, cfg, &mut sub)?;
        Ok((0..b.len())
            .filter(|&i| clean[i] == b.labels()[i] && !out.fooled[i])
            .count())
    });
    let robust = counts.into_iter().collect::<Result<Vec<_>>>()?.into_iter().sum::<usize>();
    Ok(robust as f64 / dataset.len() as f64)
}
