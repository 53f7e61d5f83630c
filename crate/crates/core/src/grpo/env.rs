use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calib::{CalibrationProfile, LayerState};
use crate::error::{bail, Result};
use crate::policy::PruningPlan;
use crate::pruner::{build_masks, pruned_rows, score_rows, RowScoreTable};
use crate::rewards::{compression_return, eval_objectives, FlowTable, ObjectiveVector, ProbeSet};
use crate::toyvlm::ToyVlmParams;
use crate::types::{Budget, Preference};

/// What the trainer needs from the thing being pruned.
pub trait PlanEnvironment: Sync {
    fn layer_widths(&self) -> Vec<usize>;
    fn states(&self, budget: Budget, w: Preference) -> Result<Vec<LayerState>>;
    fn evaluate(&self, plan: &PruningPlan, budget: Budget) -> Result<ObjectiveVector>;
    /// Path mass surviving `ratios`.
    fn flow(&self, ratios: &[f64]) -> Result<f64>;
    /// Path mass of the unpruned network.
    fn reference_flow(&self) -> f64;
}

/// Toy VLM with calibration statistics, neuron scores and probes.
#[derive(Debug, Clone)]
pub struct VlmEnvironment {
    pub params: ToyVlmParams,
    pub profile: CalibrationProfile,
    pub scores: RowScoreTable,
    pub probes: ProbeSet,
    pub flow_table: FlowTable,
}

impl VlmEnvironment {
    pub fn new(params: ToyVlmParams, profile: CalibrationProfile, probes: ProbeSet) -> Result<Self> {
        if profile.n_layers() != params.config.n_blocks {
            bail!(
                Usage,
                "calibration covers {} blocks, model has {}",
                profile.n_layers(),
                params.config.n_blocks
            );
        }
        probes.validate(&params.config)?;
        let scores = score_rows(&params, &profile.act_rms())?;
        let flow_table = FlowTable::new(&params);
        Ok(Self {
            params,
            profile,
            scores,
            probes,
            flow_table,
        })
    }
}

impl PlanEnvironment for VlmEnvironment {
    fn layer_widths(&self) -> Vec<usize> {
        alloc::vec![self.params.config.d_ff; self.params.config.n_blocks]
    }

    fn states(&self, budget: Budget, w: Preference) -> Result<Vec<LayerState>> {
        self.profile.states(budget, w)
    }

    fn evaluate(&self, plan: &PruningPlan, budget: Budget) -> Result<ObjectiveVector> {
        let masks = build_masks(&self.scores, &plan.ratios)?;
        eval_objectives(&self.params, &masks, &self.probes, plan.realized_sparsity, budget)
    }

    fn flow(&self, ratios: &[f64]) -> Result<f64> {
        self.flow_table.flow(&build_masks(&self.scores, ratios)?)
    }

    fn reference_flow(&self) -> f64 {
        self.flow_table.full_flow()
    }
}

/// Analytic pruning landscape. Robustness loses `a_ℓ ρ_ℓ²` and utility
/// loses `b_ℓ ρ_ℓ²` for the realized ratio `ρ_ℓ` of layer `ℓ`; the two
/// sensitivity profiles are opposed so the objectives disagree about which
/// layers to prune.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLandscape {
    pub widths: Vec<usize>,
    pub rob_sensitivity: Vec<f64>,
    pub util_sensitivity: Vec<f64>,
}

impl SyntheticLandscape {
    /// `n_layers` layers of `width` neurons. Robustness sensitivity falls
    /// with depth and utility sensitivity rises; `seed` jitters both by up
    /// to ±20%.
    pub fn opposed(n_layers: usize, width: usize, seed: u64) -> Result<Self> {
        if n_layers < 2 || width == 0 {
            bail!(Config, "landscape needs at least 2 non-empty layers");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut jitter = || 1.0 + rng.random_range(-0.2..0.2);
        let last = (n_layers - 1) as f64;
        let mut rob = Vec::with_capacity(n_layers);
        let mut util = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let t = l as f64 / last;
            rob.push((4.0 - 3.6 * t) * jitter());
            util.push((0.4 + 3.6 * t) * jitter());
        }
        Ok(Self {
            widths: alloc::vec![width; n_layers],
            rob_sensitivity: rob,
            util_sensitivity: util,
        })
    }

    fn realized(&self, ratios: &[f64]) -> Result<Vec<f64>> {
        if ratios.len() != self.widths.len() {
            bail!(Usage, "{} ratios for {} layers", ratios.len(), self.widths.len());
        }
        Ok(ratios
            .iter()
            .zip(&self.widths)
            .map(|(&r, &w)| pruned_rows(r, w) as f64 / w as f64)
            .collect())
    }
}

impl PlanEnvironment for SyntheticLandscape {
    fn layer_widths(&self) -> Vec<usize> {
        self.widths.clone()
    }

    fn states(&self, budget: Budget, w: Preference) -> Result<Vec<LayerState>> {
        budget.validate()?;
        let n = self.widths.len() as f64;
        Ok((0..self.widths.len())
            .map(|l| {
                let (a, b) = (self.rob_sensitivity[l], self.util_sensitivity[l]);
                LayerState {
                    layer_index: l as f64 / n,
                    layer_type: [1.0],
                    weight_stats: [a / 4.0, b / 4.0, 0.0, 0.0, 0.0, 0.0],
                    act_rms: 1.0,
                    visual_sensitivity: a / (a + b),
                    budget_context: (budget.c_min, budget.c_max),
                    preference: w,
                }
            })
            .collect())
    }

    fn evaluate(&self, plan: &PruningPlan, budget: Budget) -> Result<ObjectiveVector> {
        let rho = self.realized(&plan.ratios)?;
        let cost = |sens: &[f64]| -> f64 { sens.iter().zip(&rho).map(|(s, r)| s * r * r).sum() };
        Ok(ObjectiveVector {
            j_rob: -cost(&self.rob_sensitivity),
            j_util: -cost(&self.util_sensitivity),
            j_comp: compression_return(plan.realized_sparsity, budget),
        })
    }

    fn flow(&self, ratios: &[f64]) -> Result<f64> {
        Ok(self
            .realized(ratios)?
            .iter()
            .zip(&self.widths)
            .map(|(r, &w)| (1.0 - r) * w as f64)
            .sum())
    }

    fn reference_flow(&self) -> f64 {
        self.widths.iter().map(|&w| w as f64).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(ratios: &[f64], widths: &[usize]) -> PruningPlan {
        PruningPlan::from_ratios(ratios.to_vec(), widths, 0.0, Preference::uniform()).unwrap()
    }

    #[test]
    fn landscape_objectives_are_opposed() {
        let env = SyntheticLandscape::opposed(2, 64, 0).unwrap();
        let b = Budget::default();
        let early = env.evaluate(&plan(&[0.5, 0.1], &env.widths), b).unwrap();
        let late = env.evaluate(&plan(&[0.1, 0.5], &env.widths), b).unwrap();
        assert!(late.j_rob > early.j_rob);
        assert!(early.j_util > late.j_util);
        assert_eq!(early.j_comp, late.j_comp);
    }

    #[test]
    fn landscape_flow_is_kept_fraction() {
        let env = SyntheticLandscape::opposed(3, 10, 1).unwrap();
        assert_eq!(env.flow(&[0.0; 3]).unwrap(), env.reference_flow());
        assert_eq!(env.flow(&[1.0; 3]).unwrap(), 0.0);
        assert_eq!(env.flow(&[0.5, 0.0, 0.0]).unwrap(), 25.0);
    }
}
