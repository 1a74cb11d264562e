//! One-shot, loss-ranked data pruning.

use std::path::Path;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::nn::Model;
use crate::rng;

const LOSS_BATCH: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Drop a uniformly random subset.
    Random,
    /// Drop the lowest-loss examples.
    Low,
    /// Drop the highest-loss examples.
    High,
    /// Drop half the budget from each end of the loss ranking.
    LowHigh,
    /// Keep only the middle band of the ranking (same kept set as `lowhigh`
    /// up to rounding of the two tails; kept for parity with the literal
    /// per-tail formulation).
    MidBand,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Random,
        Strategy::Low,
        Strategy::High,
        Strategy::LowHigh,
        Strategy::MidBand,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Low => "low",
            Strategy::High => "high",
            Strategy::LowHigh => "lowhigh",
            Strategy::MidBand => "midband",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown strategy `{s}`")))
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Which inputs the ranking loss is computed on.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossSource {
    #[default]
    Clean,
    /// RS+FGSM perturbed inputs, same attack as training.
    Adversarial,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub strategy: Strategy,
    /// 1-based epoch at whose start pruning happens.
    pub prune_epoch: usize,
    /// Fraction of the training set retained.
    pub keep_fraction: f64,
    #[serde(default)]
    pub loss_source: LossSource,
}

impl PruneConfig {
    pub fn validate(&self, epochs: usize) -> Result<()> {
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::config(format!(
                "keep_fraction {} outside (0, 1]",
                self.keep_fraction
            )));
        }
        if self.prune_epoch == 0 || self.prune_epoch > epochs {
            return Err(Error::config(format!(
                "prune_epoch {} outside 1..={epochs}",
                self.prune_epoch
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossEntry {
    pub id: u64,
    pub loss: f32,
}

/// Per-example loss snapshot used for ranking.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTable {
    pub entries: Vec<LossEntry>,
}

impl LossTable {
    pub fn new(entries: Vec<LossEntry>) -> Result<Self> {
        let mut seen = std::collections::HashSet::with_capacity(entries.len());
        for e in &entries {
            if !seen.insert(e.id) {
                return Err(Error::DuplicateId(e.id));
            }
            if !(e.loss >= 0.0) || !e.loss.is_finite() {
                return Err(Error::NonFinite {
                    what: "ranking loss",
                    epoch: 0,
                    step: 0,
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn from_pairs(pairs: &[(u64, f32)]) -> Result<Self> {
        Self::new(pairs.iter().map(|&(id, loss)| LossEntry { id, loss }).collect())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Ids in ascending loss order, ties by ascending id.
    pub fn ranked_ids(&self) -> Vec<u64> {
        let mut e = self.entries.clone();
        e.sort_by(|a, b| a.loss.total_cmp(&b.loss).then(a.id.cmp(&b.id)));
        e.into_iter().map(|e| e.id).collect()
    }
}

/// Per-example loss of `model` over `dataset`, on clean or RS+FGSM inputs.
pub fn compute_loss_table(
    model: &Model,
    dataset: &Dataset,
    source: LossSource,
    attack_cfg: &AttackConfig,
    rng: &mut impl RngCore,
    exec: Exec,
) -> Result<LossTable> {
    let base = rng.next_u64();
    let n = dataset.len();
    let chunks: Vec<Vec<usize>> = (0..n)
        .step_by(LOSS_BATCH)
        .map(|s| (s..(s + LOSS_BATCH).min(n)).collect())
        .collect();
    let parts = exec.map(chunks.len(), |k| -> Result<Vec<f32>> {
        let b = dataset.batch(&chunks[k])?;
        match source {
            LossSource::Clean => model.loss_per_example(&b),
            LossSource::Adversarial => {
                let mut sub = rng::substream(base, "loss-table", k as u64);
                let d = attack::rs_fgsm(model, &b, attack_cfg, &mut sub)?;
                model.loss_per_example(&attack::perturb(&b, &d, attack_cfg.clamp_input))
            }
        }
    });
    let mut entries = Vec::with_capacity(n);
    for (k, part) in parts.into_iter().enumerate() {
        for (pos, loss) in chunks[k].iter().zip(part?) {
            entries.push(LossEntry {
                id: dataset.ids()[*pos],
                loss,
            });
        }
    }
    LossTable::new(entries)
}

/// Number of examples retained: `round(keep_fraction * n)`, at least one.
pub fn kept_count(n: usize, keep_fraction: f64) -> usize {
    ((keep_fraction * n as f64).round() as usize).clamp(1.min(n), n)
}

/// Ids retained by `strategy`, in ascending id order.
///
/// `rng` is only drawn from by [`Strategy::Random`].
pub fn select_kept(
    table: &LossTable,
    strategy: Strategy,
    keep_fraction: f64,
    rng: &mut impl Rng,
) -> Result<Vec<u64>> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::config(format!("keep_fraction {keep_fraction} outside (0, 1]")));
    }
    if table.is_empty() {
        return Err(Error::Degenerate("pruning an empty loss table".into()));
    }
    let n = table.len();
    let keep = kept_count(n, keep_fraction);
    let drop = n - keep;
    let mut kept: Vec<u64> = match strategy {
        Strategy::Random => rand::seq::index::sample(rng, n, keep)
            .into_iter()
            .map(|i| table.entries[i].id)
            .collect(),
        _ => {
            let ranked = table.ranked_ids();
            let (lo_drop, hi_drop) = match strategy {
                Strategy::Low => (drop, 0),
                Strategy::High => (0, drop),
                // the odd example goes to the high end
                Strategy::LowHigh => (drop / 2, drop - drop / 2),
                Strategy::MidBand => midband_tails(n, keep_fraction, keep),
                Strategy::Random => unreachable!(),
            };
            ranked[lo_drop..n - hi_drop].to_vec()
        }
    };
    kept.sort_unstable();
    Ok(kept)
}

/// Tail sizes for the middle-band formulation: the band starts at rank
/// `floor(n * (1 - k) / 2)` and holds the same number of examples as every
/// other strategy.
fn midband_tails(n: usize, keep_fraction: f64, keep: usize) -> (usize, usize) {
    let lo = ((n as f64 * (1.0 - keep_fraction) / 2.0).floor() as usize).min(n - keep);
    (lo, n - keep - lo)
}

/// Restricts `dataset` to `kept` ids, preserving dataset order.
pub fn apply_prune(dataset: &Dataset, kept: &[u64]) -> Result<Dataset> {
    if kept.is_empty() {
        return Err(Error::Degenerate("pruning would leave no examples".into()));
    }
    dataset.retain_ids(kept)
}

pub const AUDIT_SCHEMA_VERSION: u32 = 1;

/// On-disk record of which ids a run kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeptAudit {
    pub schema_version: u32,
    pub run_id: String,
    pub strategy: Strategy,
    pub epoch: usize,
    pub keep_fraction: f64,
    pub ids: Vec<u64>,
}

impl KeptAudit {
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
