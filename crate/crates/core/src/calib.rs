//! Layer states for the plan policy: activation statistics, weight
//! statistics and visual sensitivity measured on a fixed calibration batch.
//!
//! Visual sensitivity of block `ℓ` for one input is the maximum, over
//! language rows, of the head-averaged attention mass placed on vision
//! columns. Batch values are the mean over calibration examples.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::Tensor2;
use crate::error::{bail, Result};
use crate::toyvlm::{forward, ForwardTrace, ToyVlmConfig, ToyVlmParams};
use crate::types::{Budget, Preference};

/// Version tag of [`LayerState::features`]; bump on any layout change.
pub const FEATURE_LAYOUT_VERSION: u32 = 1;
/// Length of [`LayerState::features`].
pub const N_FEATURES: usize = 15;
pub const DEFAULT_CALIBRATION_SIZE: usize = 16;

/// Fixed token sequences sharing the vision prefix length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibrationBatch {
    pub n_vision_tokens: usize,
    pub sequences: Vec<Vec<usize>>,
}

impl CalibrationBatch {
    /// `size` full-length sequences of uniformly drawn tokens.
    pub fn synthetic(cfg: &ToyVlmConfig, size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sequences = (0..size)
            .map(|_| {
                (0..cfg.max_seq)
                    .map(|_| rng.random_range(0..cfg.vocab_size))
                    .collect()
            })
            .collect();
        Self {
            n_vision_tokens: cfg.n_vision_tokens,
            sequences,
        }
    }

    pub fn validate(&self, cfg: &ToyVlmConfig) -> Result<()> {
        if self.sequences.is_empty() {
            bail!(Usage, "calibration batch is empty");
        }
        if self.n_vision_tokens != cfg.n_vision_tokens {
            bail!(
                Usage,
                "batch vision prefix {} does not match model {}",
                self.n_vision_tokens,
                cfg.n_vision_tokens
            );
        }
        let len = self.sequences[0].len();
        if self.sequences.iter().any(|s| s.len() != len) {
            bail!(Usage, "calibration sequences differ in length");
        }
        if len <= self.n_vision_tokens {
            bail!(Usage, "calibration sequences contain no language tokens");
        }
        Ok(())
    }

    fn traces(&self, params: &ToyVlmParams) -> Result<Vec<ForwardTrace>> {
        self.validate(&params.config)?;
        self.sequences
            .iter()
            .map(|s| forward(params, None, s))
            .collect()
    }
}

/// RMS of every MLP-input entry, per block, over all traces.
pub fn rms_from_traces(traces: &[ForwardTrace]) -> Vec<f64> {
    let n_blocks = traces.first().map_or(0, |t| t.mlp_inputs.len());
    (0..n_blocks)
        .map(|b| {
            let (sum_sq, count) = traces.iter().fold((0.0, 0usize), |(s, c), t| {
                let x = &t.mlp_inputs[b];
                (s + x.norm_sq(), c + x.data().len())
            });
            libm::sqrt(sum_sq / count as f64)
        })
        .collect()
}

/// Per-input sensitivity of one block from its per-head
/// `language × vision` attention slices.
pub fn sensitivity_of_heads(heads: &[Tensor2]) -> f64 {
    let Some(first) = heads.first() else {
        return 0.0;
    };
    let (rows, cols) = first.shape();
    let h = heads.len() as f64;
    let mut best = 0.0f64;
    for t in 0..rows {
        let mut mass = 0.0;
        for v in 0..cols {
            let mean: f64 = heads.iter().map(|a| a.get(t, v)).sum::<f64>() / h;
            mass += mean;
        }
        best = best.max(mass);
    }
    best
}

/// Mean over traces of the per-input sensitivity, clamped to `[0, 1]`.
pub fn sensitivity_from_traces(traces: &[ForwardTrace]) -> Vec<f64> {
    let n_blocks = traces.first().map_or(0, |t| t.attention.len());
    (0..n_blocks)
        .map(|b| {
            let total: f64 = traces
                .iter()
                .map(|t| sensitivity_of_heads(&t.attention[b]))
                .sum();
            (total / traces.len() as f64).clamp(0.0, 1.0)
        })
        .collect()
}

pub fn activation_rms(params: &ToyVlmParams, batch: &CalibrationBatch) -> Result<Vec<f64>> {
    Ok(rms_from_traces(&batch.traces(params)?))
}

pub fn visual_sensitivity(params: &ToyVlmParams, batch: &CalibrationBatch) -> Result<Vec<f64>> {
    Ok(sensitivity_from_traces(&batch.traces(params)?))
}

fn abs_mean_std(t: &Tensor2) -> (f64, f64) {
    let n = t.data().len() as f64;
    let mean = t.data().iter().map(|w| w.abs()).sum::<f64>() / n;
    let var = t
        .data()
        .iter()
        .map(|w| {
            let d = w.abs() - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean, libm::sqrt(var))
}

/// `(mean|W|, std|W|)` for gate, up and down, concatenated.
pub fn weight_stats(params: &ToyVlmParams) -> Vec<[f64; 6]> {
    params
        .blocks
        .iter()
        .map(|b| {
            let (gm, gs) = abs_mean_std(&b.gate);
            let (um, us) = abs_mean_std(&b.up);
            let (dm, ds) = abs_mean_std(&b.down);
            [gm, gs, um, us, dm, ds]
        })
        .collect()
}

/// Calibration-time descriptors of one prunable block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    pub act_rms: f64,
    pub visual_sensitivity: f64,
    pub weight_stats: [f64; 6],
}

/// Per-block descriptors measured once and reused for every state build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationProfile {
    pub layers: Vec<LayerProfile>,
}

impl CalibrationProfile {
    /// Runs the batch through the unpruned model once.
    pub fn compute(params: &ToyVlmParams, batch: &CalibrationBatch) -> Result<Self> {
        let traces = batch.traces(params)?;
        let rms = rms_from_traces(&traces);
        let sens = sensitivity_from_traces(&traces);
        let stats = weight_stats(params);
        let layers = rms
            .into_iter()
            .zip(sens)
            .zip(stats)
            .map(|((act_rms, visual_sensitivity), weight_stats)| LayerProfile {
                act_rms,
                visual_sensitivity,
                weight_stats,
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn act_rms(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.act_rms).collect()
    }

    pub fn visual_sensitivity(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.visual_sensitivity).collect()
    }

    /// Layer states in block order for a budget and preference.
    pub fn states(&self, budget: Budget, w: Preference) -> Result<Vec<LayerState>> {
        budget.validate()?;
        let n = self.layers.len();
        Ok(self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| LayerState {
                layer_index: i as f64 / n as f64,
                layer_type: [1.0],
                weight_stats: l.weight_stats,
                act_rms: l.act_rms,
                visual_sensitivity: l.visual_sensitivity,
                budget_context: (budget.c_min, budget.c_max),
                preference: w,
            })
            .collect())
    }
}

/// Policy input for one prunable block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerState {
    /// `ℓ / L`
    pub layer_index: f64,
    /// One-hot over layer kinds; only MLP neuron groups are prunable.
    pub layer_type: [f64; 1],
    pub weight_stats: [f64; 6],
    pub act_rms: f64,
    pub visual_sensitivity: f64,
    pub budget_context: (f64, f64),
    pub preference: Preference,
}

impl LayerState {
    /// Feature vector, layout version [`FEATURE_LAYOUT_VERSION`]:
    /// `[index, type(1), weight_stats(6), act_rms, vis_sens, c_min, c_max, w(3)]`.
    pub fn features(&self) -> [f64; N_FEATURES] {
        let mut f = [0.0; N_FEATURES];
        f[0] = self.layer_index;
        f[1] = self.layer_type[0];
        f[2..8].copy_from_slice(&self.weight_stats);
        f[8] = self.act_rms;
        f[9] = self.visual_sensitivity;
        f[10] = self.budget_context.0;
        f[11] = self.budget_context.1;
        f[12..15].copy_from_slice(&self.preference.0);
        f
    }
}

/// One-shot state construction; prefer [`CalibrationProfile`] when states are
/// rebuilt for many preferences.
pub fn build_states(
    params: &ToyVlmParams,
    batch: &CalibrationBatch,
    budget: Budget,
    w: Preference,
) -> Result<Vec<LayerState>> {
    budget.validate()?;
    CalibrationProfile::compute(params, batch)?.states(budget, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyvlm::init_model;
    use alloc::vec;

    fn rows(values: &[&[f64]]) -> Tensor2 {
        Tensor2::from_rows(values).unwrap()
    }

    fn trace_with_inputs(values: Vec<f64>) -> ForwardTrace {
        let n = values.len();
        ForwardTrace {
            logits: Tensor2::zeros(1, 1),
            attention: vec![],
            mlp_inputs: vec![Tensor2::from_vec(1, n, values).unwrap()],
        }
    }

    #[test]
    fn rms_of_constant_is_abs_value() {
        let traces = vec![trace_with_inputs(vec![-2.5; 6]), trace_with_inputs(vec![-2.5; 3])];
        assert!((rms_from_traces(&traces)[0] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn rms_of_three_and_four() {
        let traces = vec![trace_with_inputs(vec![3.0, 4.0])];
        assert!((rms_from_traces(&traces)[0] - libm::sqrt(12.5)).abs() < 1e-15);
    }

    #[test]
    fn sensitivity_takes_max_language_row() {
        // vision row sums 0.2, 0.7, 0.4
        let head = rows(&[&[0.1, 0.1], &[0.3, 0.4], &[0.4, 0.0]]);
        assert!((sensitivity_of_heads(std::slice::from_ref(&head)) - 0.7).abs() < 1e-15);
        assert!((sensitivity_of_heads(&[head.clone(), head]) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn empty_batch_rejected() {
        let p = init_model(&ToyVlmConfig::default()).unwrap();
        let batch = CalibrationBatch {
            n_vision_tokens: 8,
            sequences: vec![],
        };
        assert!(matches!(activation_rms(&p, &batch), Err(crate::Error::Usage(_))));
    }

    #[test]
    fn vision_only_batch_rejected() {
        let p = init_model(&ToyVlmConfig::default()).unwrap();
        let batch = CalibrationBatch {
            n_vision_tokens: 8,
            sequences: vec![vec![1; 8]],
        };
        assert!(visual_sensitivity(&p, &batch).is_err());
    }

    #[test]
    fn states_follow_inputs() {
        let cfg = ToyVlmConfig::default();
        let p = init_model(&cfg).unwrap();
        let batch = CalibrationBatch::synthetic(&cfg, DEFAULT_CALIBRATION_SIZE, 7);
        let w = Preference::new(0.6, 0.3, 0.1).unwrap();
        let a = build_states(&p, &batch, Budget::default(), w).unwrap();
        let b = build_states(&p, &batch, Budget::default(), w).unwrap();
        assert_eq!(a.len(), 4);
        assert_eq!(a, b);
        assert!(a.iter().all(|s| s.preference == w));
        for s in &a {
            assert!((0.0..=1.0).contains(&s.visual_sensitivity));
            assert!(s.act_rms >= 0.0);
        }

        let w2 = Preference::new(0.1, 0.1, 0.8).unwrap();
        let c = build_states(&p, &batch, Budget::default(), w2).unwrap();
        for (x, y) in a.iter().zip(&c) {
            let (fx, fy) = (x.features(), y.features());
            assert_eq!(fx[..12], fy[..12]);
            assert_ne!(fx[12..], fy[12..]);
        }
    }

    #[test]
    fn invalid_budget_rejected() {
        let cfg = ToyVlmConfig::default();
        let p = init_model(&cfg).unwrap();
        let batch = CalibrationBatch::synthetic(&cfg, 2, 7);
        let bad = Budget {
            c_min: 0.5,
            c_max: 0.2,
        };
        assert!(matches!(
            build_states(&p, &batch, bad, Preference::uniform()),
            Err(crate::Error::Config(_))
        ));
    }
}
