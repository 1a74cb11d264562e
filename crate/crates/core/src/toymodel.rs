//! Robust/fragile feature toy model.
//!
//! Each sample has one discrete robust feature `x1 = +-y` and `d` Gaussian
//! fragile features `N(eta * y, 1)`. Samples come from a robust-origin
//! component (w.p. `p_r`, `x1 = y` w.p. `p_robust`) or a fragile-origin one
//! (`x1 = y` w.p. `p_fragile`).

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng;

const SHARD: usize = 16_384;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyParams {
    pub d: usize,
    pub eta: f64,
    pub p_r: f64,
    pub p_robust: f64,
    pub p_fragile: f64,
}

impl Default for ToyParams {
    fn default() -> Self {
        Self::new(100, 0.5, 0.9, 0.7)
    }
}

impl ToyParams {
    /// Parameters with the default `eta = 3 / sqrt(d)`.
    pub fn new(d: usize, p_r: f64, p_robust: f64, p_fragile: f64) -> Self {
        Self {
            d,
            eta: 3.0 / (d.max(1) as f64).sqrt(),
            p_r,
            p_robust,
            p_fragile,
        }
    }

    /// Checks `d >= 1`, `eta > 0`, `p_r` in `[0, 1]` and
    /// `0.5 < p_fragile <= p_robust <= 1`.
    ///
    /// Equality `p_fragile == p_robust` is admitted so the symmetric case
    /// can be studied.
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::config("toy model needs d >= 1"));
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::config(format!("eta {} must be positive", self.eta)));
        }
        if !(0.0..=1.0).contains(&self.p_r) {
            return Err(Error::config(format!("p_r {} outside [0, 1]", self.p_r)));
        }
        if !(self.p_fragile > 0.5 && self.p_fragile <= self.p_robust && self.p_robust <= 1.0) {
            return Err(Error::config(format!(
                "need 0.5 < p_fragile <= p_robust <= 1, got p_fragile {} p_robust {}",
                self.p_fragile, self.p_robust
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Robust,
    Fragile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySample {
    /// `-1.0` or `+1.0`.
    pub y: f64,
    pub x: Vec<f64>,
    pub origin: Origin,
}

/// Draws one sample into `x` (length `d + 1`).
fn draw(p: &ToyParams, rng: &mut impl Rng, x: &mut [f64]) -> (f64, Origin) {
    let origin = if rng.random_bool(p.p_r) {
        Origin::Robust
    } else {
        Origin::Fragile
    };
    let y = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let p_l = match origin {
        Origin::Robust => p.p_robust,
        Origin::Fragile => p.p_fragile,
    };
    x[0] = if rng.random_bool(p_l) { y } else { -y };
    for xi in &mut x[1..] {
        let z: f64 = rng.sample(StandardNormal);
        *xi = p.eta * y + z;
    }
    (y, origin)
}

pub fn sample(params: &ToyParams, n: usize, rng: &mut impl Rng) -> Result<Vec<ToySample>> {
    params.validate()?;
    if n == 0 {
        return Err(Error::config("sample size must be at least 1"));
    }
    Ok((0..n)
        .map(|_| {
            let mut x = vec![0.0; params.d + 1];
            let (y, origin) = draw(params, rng, &mut x);
            ToySample { y, x, origin }
        })
        .collect())
}

/// `f(x) = sign(w . x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyLinear {
    pub w: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Preset {
    Robust,
    Fragile,
}

impl ToyLinear {
    /// `[1, 0, ..., 0]`: reads only the robust feature.
    pub fn robust(d: usize) -> Self {
        let mut w = vec![0.0; d + 1];
        w[0] = 1.0;
        Self { w }
    }

    /// `[0, 1/d, ..., 1/d]`: averages the fragile features.
    pub fn fragile(d: usize) -> Self {
        let mut w = vec![1.0 / d as f64; d + 1];
        w[0] = 0.0;
        Self { w }
    }

    fn preset(&self) -> Option<Preset> {
        let d = self.w.len() - 1;
        if *self == Self::robust(d) {
            Some(Preset::Robust)
        } else if *self == Self::fragile(d) {
            Some(Preset::Fragile)
        } else {
            None
        }
    }

    /// `y * w . x`; positive means correct, zero counts as wrong.
    pub fn margin(&self, x: &[f64], y: f64) -> f64 {
        y * self.w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>()
    }

    fn check(&self, params: &ToyParams) -> Result<()> {
        if self.w.len() != params.d + 1 {
            return Err(Error::ShapeMismatch {
                expected: vec![params.d + 1],
                found: vec![self.w.len()],
            });
        }
        if self.w.iter().any(|w| !w.is_finite()) {
            return Err(Error::config("classifier weights must be finite"));
        }
        Ok(())
    }
}

/// Monte-Carlo proportion with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
    pub n: usize,
}

impl Estimate {
    fn from_count(hits: u64, n: usize) -> Self {
        let p = hits as f64 / n as f64;
        Self {
            value: p,
            std_error: (p * (1.0 - p) / n as f64).sqrt(),
            n,
        }
    }
}

/// Sums `f` over `n` samples drawn in fixed-size shards, each from its own
/// substream of `base`. Counts are summed, so the result does not depend on
/// scheduling.
fn mc_count<F>(params: &ToyParams, n: usize, base: u64, exec: Exec, f: F) -> [u64; 4]
where
    F: Fn(&[f64], f64, Origin) -> [u64; 4] + Sync + Send,
{
    let shards = n.div_ceil(SHARD);
    let parts = exec.map(shards, |k| {
        let mut r = rng::substream(base, "toy-shard", k as u64);
        let m = SHARD.min(n - k * SHARD);
        let mut x = vec![0.0; params.d + 1];
        let mut acc = [0u64; 4];
        for _ in 0..m {
            let (y, o) = draw(params, &mut r, &mut x);
            let c = f(&x, y, o);
            for (a, c) in acc.iter_mut().zip(c) {
                *a += c;
            }
        }
        acc
    });
    parts.into_iter().fold([0; 4], |mut acc, p| {
        for (a, c) in acc.iter_mut().zip(p) {
            *a += c;
        }
        acc
    })
}

fn phi(z: f64) -> f64 {
    Normal::standard().cdf(z)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CleanAccuracy {
    pub monte_carlo: Estimate,
    /// Closed form for the presets: `Phi(eta sqrt(d))` for the fragile one,
    /// `p_r p_robust + (1 - p_r) p_fragile` for the robust one.
    pub analytic: Option<f64>,
    /// The robust preset's mixture with the components swapped,
    /// `p_r p_fragile + (1 - p_r) p_robust`, as it is sometimes quoted.
    pub analytic_swapped: Option<f64>,
}

pub fn clean_accuracy(
    w: &ToyLinear,
    params: &ToyParams,
    n: usize,
    rng: &mut impl RngCore,
    exec: Exec,
) -> Result<CleanAccuracy> {
    adversarial_or_clean(w, params, 0.0, false, n, rng, exec).map(|(mc, analytic)| {
        let swapped = (w.preset() == Some(Preset::Robust))
            .then(|| params.p_r * params.p_fragile + (1.0 - params.p_r) * params.p_robust);
        CleanAccuracy {
            monte_carlo: mc,
            analytic,
            analytic_swapped: swapped,
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdversarialAccuracy {
    pub epsilon: f64,
    pub monte_carlo: Estimate,
    pub analytic: Option<f64>,
}

/// Accuracy under the worst-case l-infinity perturbation of size `epsilon`.
///
/// For a linear classifier the adversary moves every attackable coordinate
/// by `-epsilon * y * sign(w_i)`, lowering the margin by
/// `epsilon * sum |w_i|`. The discrete feature `x1` is attackable only when
/// `attack_robust_feature` is set.
pub fn adversarial_accuracy(
    w: &ToyLinear,
    params: &ToyParams,
    epsilon: f64,
    attack_robust_feature: bool,
    n: usize,
    rng: &mut impl RngCore,
    exec: Exec,
) -> Result<AdversarialAccuracy> {
    let (mc, analytic) = adversarial_or_clean(w, params, epsilon, attack_robust_feature, n, rng, exec)?;
    Ok(AdversarialAccuracy {
        epsilon,
        monte_carlo: mc,
        analytic,
    })
}

fn adversarial_or_clean(
    w: &ToyLinear,
    params: &ToyParams,
    epsilon: f64,
    attack_robust_feature: bool,
    n: usize,
    rng: &mut impl RngCore,
    exec: Exec,
) -> Result<(Estimate, Option<f64>)> {
    params.validate()?;
    w.check(params)?;
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(Error::config(format!("epsilon {epsilon} must be finite and >= 0")));
    }
    if n == 0 {
        return Err(Error::config("sample size must be at least 1"));
    }
    let skip = usize::from(!attack_robust_feature);
    let budget = epsilon * w.w[skip..].iter().map(|v| v.abs()).sum::<f64>();
    let base = rng.next_u64();
    let [hits, ..] = mc_count(params, n, base, exec, |x, y, _| {
        [u64::from(w.margin(x, y) - budget > 0.0), 0, 0, 0]
    });

    let analytic = match w.preset() {
        Some(Preset::Fragile) => Some(phi((params.eta - epsilon) * (params.d as f64).sqrt())),
        Some(Preset::Robust) if attack_robust_feature && epsilon >= 1.0 => Some(0.0),
        Some(Preset::Robust) => Some(params.p_r * params.p_robust + (1.0 - params.p_r) * params.p_fragile),
        None => None,
    };
    Ok((Estimate::from_count(hits, n), analytic))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutReport {
    pub n: usize,
    pub robust_origin: usize,
    pub fragile_origin: usize,
    pub removal_rate_robust: f64,
    pub removal_rate_fragile: f64,
    /// `removal_rate_fragile - removal_rate_robust`.
    pub gap: f64,
    pub robust_fraction_before: f64,
    pub robust_fraction_after: f64,
}

/// Scores every sample with the robust classifier under squared error,
/// `(x1 - y)^2`, which is 0 or 4, and drops the loss-4 samples.
pub fn high_loss_dropout_analysis(
    params: &ToyParams,
    n: usize,
    rng: &mut impl RngCore,
    exec: Exec,
) -> Result<DropoutReport> {
    params.validate()?;
    if n == 0 {
        return Err(Error::config("sample size must be at least 1"));
    }
    let base = rng.next_u64();
    // [robust total, robust dropped, fragile total, fragile dropped]
    let [rt, rd, ft, fd] = mc_count(params, n, base, exec, |x, y, o| {
        let dropped = u64::from((x[0] - y).powi(2) == 4.0);
        match o {
            Origin::Robust => [1, dropped, 0, 0],
            Origin::Fragile => [0, 0, 1, dropped],
        }
    });
    let rate = |d: u64, t: u64| if t == 0 { 0.0 } else { d as f64 / t as f64 };
    let kept = (rt - rd) + (ft - fd);
    Ok(DropoutReport {
        n,
        robust_origin: rt as usize,
        fragile_origin: ft as usize,
        removal_rate_robust: rate(rd, rt),
        removal_rate_fragile: rate(fd, ft),
        gap: rate(fd, ft) - rate(rd, rt),
        robust_fraction_before: rt as f64 / n as f64,
        robust_fraction_after: rate(rt - rd, kept),
    })
}

/// Per-sample squared-error losses under the robust classifier, for plotting.
pub fn loss_samples(params: &ToyParams, n: usize, rng: &mut impl Rng) -> Result<Vec<(Origin, f64, f64)>> {
    let samples = sample(params, n, rng)?;
    Ok(samples
        .into_iter()
        .map(|s| (s.origin, s.y, (s.x[0] - s.y).powi(2)))
        .collect())
}

/// One checked statement about the toy model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Claim {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    pub params: ToyParams,
    pub epsilon: f64,
    pub n_accuracy: usize,
    pub n_dropout: usize,
    pub fragile_clean: CleanAccuracy,
    pub robust_clean: CleanAccuracy,
    pub fragile_adversarial: AdversarialAccuracy,
    pub robust_adversarial: AdversarialAccuracy,
    pub dropout: DropoutReport,
    pub claims: Vec<Claim>,
}

impl ToyReport {
    pub fn all_pass(&self) -> bool {
        self.claims.iter().all(|c| c.pass)
    }
}

/// Runs every toy-model computation and checks the stated claims.
///
/// `epsilon` defaults to `2 eta` when `None`.
pub fn verify(
    params: &ToyParams,
    epsilon: Option<f64>,
    n_accuracy: usize,
    n_dropout: usize,
    seed: u64,
    exec: Exec,
) -> Result<ToyReport> {
    params.validate()?;
    let eps = epsilon.unwrap_or(2.0 * params.eta);
    let (fw, rw) = (ToyLinear::fragile(params.d), ToyLinear::robust(params.d));
    let r = |name: &str| rng::substream(seed, "toy", crate::rng::derive_seed(0, name, 0));
    let fragile_clean = clean_accuracy(&fw, params, n_accuracy, &mut r("fragile-clean"), exec)?;
    let robust_clean = clean_accuracy(&rw, params, n_accuracy, &mut r("robust-clean"), exec)?;
    let fragile_adversarial = adversarial_accuracy(&fw, params, eps, false, n_accuracy, &mut r("fragile-adv"), exec)?;
    let robust_adversarial = adversarial_accuracy(&rw, params, eps, false, n_accuracy, &mut r("robust-adv"), exec)?;
    let dropout = high_loss_dropout_analysis(params, n_dropout, &mut r("dropout"), exec)?;

    let within_3se = |e: &Estimate, a: Option<f64>| a.is_some_and(|a| (e.value - a).abs() <= 3.0 * e.std_error.max(1e-12));
    let mut claims = Vec::new();
    let mut claim = |name: &str, pass: bool, detail: String| {
        claims.push(Claim {
            name: name.into(),
            pass,
            detail,
        })
    };
    let fc = fragile_clean.monte_carlo.value;
    claim(
        "fragile classifier clean accuracy > 0.99",
        fc > 0.99,
        format!("{fc:.5} (analytic {:.5})", fragile_clean.analytic.unwrap_or(f64::NAN)),
    );
    claim(
        "fragile clean accuracy matches Phi(eta sqrt d) within 3 SE",
        within_3se(&fragile_clean.monte_carlo, fragile_clean.analytic),
        format!("{fc:.5} +- {:.5}", fragile_clean.monte_carlo.std_error),
    );
    let fa = fragile_adversarial.monte_carlo.value;
    let bound = phi(-params.eta * (params.d as f64).sqrt());
    claim(
        &format!("fragile adversarial accuracy at epsilon {eps:.4} < 0.01"),
        fa < 0.01,
        format!("{fa:.5}"),
    );
    if eps >= 2.0 * params.eta {
        claim(
            "fragile adversarial accuracy below P[N(-eta, 1/d) > 0] + 3 SE",
            fa <= bound + 3.0 * fragile_adversarial.monte_carlo.std_error,
            format!("{fa:.5} vs bound {bound:.5}"),
        );
    }
    claim(
        "robust clean accuracy matches its mixture within 3 SE",
        within_3se(&robust_clean.monte_carlo, robust_clean.analytic),
        format!(
            "{:.5} (mixture {:.5}, swapped {:.5})",
            robust_clean.monte_carlo.value,
            robust_clean.analytic.unwrap_or(f64::NAN),
            robust_clean.analytic_swapped.unwrap_or(f64::NAN)
        ),
    );
    claim(
        "robust classifier unaffected by fragile-feature attack",
        robust_adversarial.monte_carlo.value == robust_clean.monte_carlo.value
            || within_3se(&robust_adversarial.monte_carlo, robust_clean.analytic),
        format!("{:.5}", robust_adversarial.monte_carlo.value),
    );
    let want_gap = params.p_robust - params.p_fragile;
    claim(
        "dropout removal-rate gap equals p_robust - p_fragile within 0.01",
        (dropout.gap - want_gap).abs() <= 0.01,
        format!("{:.4} vs {want_gap:.4}", dropout.gap),
    );
    if params.p_fragile < params.p_robust {
        claim(
            "dropout raises the robust-origin fraction",
            dropout.robust_fraction_after > dropout.robust_fraction_before,
            format!(
                "{:.4} -> {:.4}",
                dropout.robust_fraction_before, dropout.robust_fraction_after
            ),
        );
    }
    Ok(ToyReport {
        params: *params,
        epsilon: eps,
        n_accuracy,
        n_dropout,
        fragile_clean,
        robust_clean,
        fragile_adversarial,
        robust_adversarial,
        dropout,
        claims,
    })
}
