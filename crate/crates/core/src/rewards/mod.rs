//! Episode returns: log-margin robustness and utility objectives on labelled
//! probes, the compression ramp, online normalization, and the flow-based
//! stability gate.

mod probes;
mod synflow;

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::pruner::MaskSet;
use crate::toyvlm::{self, ToyVlmParams};
use crate::types::Budget;

pub use probes::{
    ProbeInstance, ProbeSet, TaskTag, CHOICE_BASE, FIRST_CONTENT, NO, N_CHOICES, ROBUSTNESS_MARKER,
    UTILITY_MARKER, YES,
};
pub use synflow::{
    band_penalty, flow_log_ratio, gate_weight, quantile, synflow_score, FlowTable, GateConfig,
    GateOutput, StabilityGate,
};

/// Guard added inside both logarithms of [`log_margin`].
pub const MARGIN_EPS: f64 = 1e-12;

/// `ln(Σ_gt P + ε) − ln(Σ_neg P + ε)`.
pub fn log_margin(dist: &[f64], gt: &[usize], neg: &[usize]) -> Result<f64> {
    probes::check_sets(gt, neg, dist.len())?;
    let mass = |set: &[usize]| set.iter().map(|&t| dist[t]).sum::<f64>();
    Ok(libm::log(mass(gt) + MARGIN_EPS) - libm::log(mass(neg) + MARGIN_EPS))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveVector {
    pub j_rob: f64,
    pub j_util: f64,
    pub j_comp: f64,
}

impl ObjectiveVector {
    pub fn is_finite(&self) -> bool {
        self.j_rob.is_finite() && self.j_util.is_finite() && self.j_comp.is_finite()
    }
}

/// Linear ramp from 0 at `c_min` to 1 at `c_max`, flat outside.
pub fn compression_return(sparsity: f64, budget: Budget) -> f64 {
    ((sparsity - budget.c_min) / (budget.c_max - budget.c_min)).clamp(0.0, 1.0)
}

/// Log-margin of one probe under the masked model.
pub fn probe_margin(params: &ToyVlmParams, masks: Option<&MaskSet>, probe: &ProbeInstance) -> Result<f64> {
    let logits = toyvlm::logits_at(params, masks, &probe.tokens, probe.answer_position)?;
    log_margin(&toyvlm::softmax(&logits), &probe.gt_tokens, &probe.neg_tokens)
}

/// Mean log-margin over the probes carrying `tag`.
pub fn mean_margin(
    params: &ToyVlmParams,
    masks: Option<&MaskSet>,
    probes: &ProbeSet,
    tag: TaskTag,
) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for p in probes.by_task(tag) {
        total += probe_margin(params, masks, p)?;
        n += 1;
    }
    if n == 0 {
        bail!(Usage, "no {:?} probes to evaluate", tag);
    }
    Ok(total / n as f64)
}

/// Objective vector of a masked model whose realized sparsity is `sparsity`.
pub fn eval_objectives(
    params: &ToyVlmParams,
    masks: &MaskSet,
    probes: &ProbeSet,
    sparsity: f64,
    budget: Budget,
) -> Result<ObjectiveVector> {
    Ok(ObjectiveVector {
        j_rob: mean_margin(params, Some(masks), probes, TaskTag::Robustness)?,
        j_util: mean_margin(params, Some(masks), probes, TaskTag::Utility)?,
        j_comp: compression_return(sparsity, budget),
    })
}

/// Number of objectives passed through [`RunningNormalizer`] (rob, util).
pub const N_NORMALIZED: usize = 2;

/// Exponential-moving-average z-scoring of group scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningNormalizer {
    pub mean: [f64; N_NORMALIZED],
    pub std: [f64; N_NORMALIZED],
    pub momentum: f64,
    pub clip_bound: f64,
    pub initialized: bool,
}

impl Default for RunningNormalizer {
    fn default() -> Self {
        Self::new(0.99, 5.0)
    }
}

impl RunningNormalizer {
    /// Lower bound on the running std.
    pub const STD_FLOOR: f64 = 1e-6;
    pub const DENOM_EPS: f64 = 1e-8;

    pub fn new(momentum: f64, clip_bound: f64) -> Self {
        Self {
            mean: [0.0; N_NORMALIZED],
            std: [1.0; N_NORMALIZED],
            momentum,
            clip_bound,
            initialized: false,
        }
    }

    /// Folds the group's batch statistics into the running state, then
    /// returns the clipped z-scores. The first group sets the state directly.
    pub fn normalize(&mut self, group: &[[f64; N_NORMALIZED]]) -> Result<Vec<[f64; N_NORMALIZED]>> {
        if group.len() < 2 {
            bail!(Usage, "normalization needs a group of at least 2, got {}", group.len());
        }
        let n = group.len() as f64;
        for k in 0..N_NORMALIZED {
            let mean = group.iter().map(|g| g[k]).sum::<f64>() / n;
            let var = group.iter().map(|g| (g[k] - mean) * (g[k] - mean)).sum::<f64>() / n;
            let std = libm::sqrt(var);
            if self.initialized {
                let m = self.momentum;
                self.mean[k] = m * self.mean[k] + (1.0 - m) * mean;
                self.std[k] = m * self.std[k] + (1.0 - m) * std;
            } else {
                self.mean[k] = mean;
                self.std[k] = std;
            }
            self.std[k] = self.std[k].max(Self::STD_FLOOR);
        }
        self.initialized = true;
        Ok(group
            .iter()
            .map(|g| {
                let mut out = [0.0; N_NORMALIZED];
                for k in 0..N_NORMALIZED {
                    let z = (g[k] - self.mean[k]) / (self.std[k] + Self::DENOM_EPS);
                    out[k] = if z.is_nan() { 0.0 } else { z.clamp(-self.clip_bound, self.clip_bound) };
                }
                out
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn margin_examples() {
        let d = [0.8, 0.2];
        assert!((log_margin(&d, &[0], &[1]).unwrap() - libm::log(4.0)).abs() < 1e-10);
        assert!(log_margin(&[0.3, 0.3, 0.4], &[0], &[1]).unwrap().abs() < 1e-15);
        let zero = log_margin(&[0.0, 0.0, 1.0], &[0], &[1]).unwrap();
        assert_eq!(zero, 0.0);
        assert!(log_margin(&d, &[0], &[0]).is_err());
    }

    #[test]
    fn compression_ramp() {
        let b = Budget::default();
        assert_eq!(compression_return(0.2, b), 0.0);
        assert_eq!(compression_return(0.5, b), 1.0);
        assert!((compression_return(0.35, b) - 0.5).abs() < 1e-12);
        assert_eq!(compression_return(0.0, b), 0.0);
        assert_eq!(compression_return(0.9, b), 1.0);
    }

    #[test]
    fn normalizer_constant_group_is_zero() {
        let mut n = RunningNormalizer::default();
        let out = n.normalize(&[[3.0, -1.0]; 4]).unwrap();
        assert!(out.iter().all(|o| o[0] == 0.0 && o[1] == 0.0));
        assert!(n.std.iter().all(|&s| s > 0.0));
    }

    #[test]
    fn normalizer_clips_outliers() {
        let mut n = RunningNormalizer::default();
        n.normalize(&[[0.0, 0.0], [1.0, 1.0]]).unwrap();
        let out = n.normalize(&[[0.0, 0.0], [1e6, -1e6]]).unwrap();
        assert_eq!(out[1], [5.0, -5.0]);
    }

    #[test]
    fn normalizer_rejects_singletons() {
        let mut n = RunningNormalizer::default();
        assert!(n.normalize(&[[1.0, 1.0]]).is_err());
    }

    #[test]
    fn zero_momentum_is_batch_zscore() {
        let mut n = RunningNormalizer::new(0.0, 5.0);
        n.normalize(&[[10.0, 0.0], [20.0, 1.0]]).unwrap();
        let group = vec![[1.0, 2.0], [2.0, 4.0], [4.0, 5.0], [7.0, 1.0]];
        let out = n.normalize(&group).unwrap();
        for k in 0..2 {
            let mean: f64 = out.iter().map(|o| o[k]).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9);
        }
    }
}
