use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::pruner::pruned_rows;
use crate::types::{Budget, Preference};

/// Maps `(s, p)` to layer ratios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanMapperConfig {
    pub c_min: f64,
    pub c_max: f64,
    pub kappa: f64,
}

impl Default for PlanMapperConfig {
    fn default() -> Self {
        Self {
            c_min: 0.2,
            c_max: 0.5,
            kappa: 1.0,
        }
    }
}

impl PlanMapperConfig {
    pub fn new(budget: Budget, kappa: f64) -> Result<Self> {
        let cfg = Self {
            c_min: budget.c_min,
            c_max: budget.c_max,
            kappa,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.budget().validate()?;
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            bail!(Config, "kappa must be positive, got {}", self.kappa);
        }
        Ok(())
    }

    pub fn budget(&self) -> Budget {
        Budget {
            c_min: self.c_min,
            c_max: self.c_max,
        }
    }

    /// `c_min + s (c_max − c_min)`.
    pub fn target_sparsity(&self, s: f64) -> f64 {
        self.c_min + s * (self.c_max - self.c_min)
    }
}

/// Layer-wise pruning ratios plus how they realize after integer rounding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    pub ratios: Vec<f64>,
    pub target_sparsity: f64,
    pub realized_sparsity: f64,
    pub preference: Preference,
    pub saturated_layers: Vec<usize>,
}

/// Pruned rows over total rows after rounding each layer.
pub fn realized_sparsity(ratios: &[f64], widths: &[usize]) -> f64 {
    let total: usize = widths.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let pruned: usize = ratios
        .iter()
        .zip(widths)
        .map(|(&r, &w)| pruned_rows(r, w))
        .sum();
    pruned as f64 / total as f64
}

impl PruningPlan {
    /// Plan from explicit ratios; nothing is flagged as saturated.
    pub fn from_ratios(
        ratios: Vec<f64>,
        widths: &[usize],
        target_sparsity: f64,
        preference: Preference,
    ) -> Result<Self> {
        if ratios.len() != widths.len() {
            bail!(Usage, "{} ratios for {} layers", ratios.len(), widths.len());
        }
        let ratios: Vec<f64> = ratios.into_iter().map(|r| r.clamp(0.0, 1.0)).collect();
        Ok(Self {
            realized_sparsity: realized_sparsity(&ratios, widths),
            ratios,
            target_sparsity,
            preference,
            saturated_layers: Vec::new(),
        })
    }

    pub fn n_layers(&self) -> usize {
        self.ratios.len()
    }
}

/// `r_ℓ = clip(κ s̃ L p_ℓ, 0, 1)` with `s̃ = c_min + s (c_max − c_min)`.
pub fn map_plan(
    s: f64,
    p: &[f64],
    cfg: &PlanMapperConfig,
    widths: &[usize],
    preference: Preference,
) -> Result<PruningPlan> {
    if p.len() != widths.len() {
        bail!(Usage, "allocation of {} for {} layers", p.len(), widths.len());
    }
    let target = cfg.target_sparsity(s);
    let l = p.len() as f64;
    let mut saturated_layers = Vec::new();
    let ratios: Vec<f64> = p
        .iter()
        .enumerate()
        .map(|(i, &pi)| {
            let raw = cfg.kappa * target * l * pi;
            if raw > 1.0 {
                saturated_layers.push(i);
            }
            if raw.is_nan() {
                0.0
            } else {
                raw.clamp(0.0, 1.0)
            }
        })
        .collect();
    Ok(PruningPlan {
        realized_sparsity: realized_sparsity(&ratios, widths),
        ratios,
        target_sparsity: target,
        preference,
        saturated_layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn cfg() -> PlanMapperConfig {
        PlanMapperConfig::default()
    }

    #[test]
    fn lower_budget_edge() {
        let plan = map_plan(0.0, &[0.25; 4], &cfg(), &[64; 4], Preference::uniform()).unwrap();
        assert!((plan.target_sparsity - 0.2).abs() < 1e-15);
        assert!(plan.ratios.iter().all(|&r| (r - 0.2).abs() < 1e-15));
        assert!(plan.saturated_layers.is_empty());
    }

    #[test]
    fn upper_budget_edge() {
        let plan = map_plan(1.0, &[0.25; 4], &cfg(), &[64; 4], Preference::uniform()).unwrap();
        assert!(plan.ratios.iter().all(|&r| (r - 0.5).abs() < 1e-15));
        assert_eq!(plan.realized_sparsity, 0.5);
    }

    #[test]
    fn saturation_undershoots_target() {
        let q = 0.1 / 3.0;
        let mapper = PlanMapperConfig {
            c_min: 0.3,
            c_max: 0.5,
            kappa: 1.0,
        };
        let plan = map_plan(0.0, &[0.9, q, q, q], &mapper, &[64; 4], Preference::uniform()).unwrap();
        assert_eq!(plan.ratios[0], 1.0);
        assert_eq!(plan.saturated_layers, vec![0]);
        // 64 + 3·round(2.56) = 73 rows of 256
        let pruned = 64 + 3 * 3;
        assert_eq!(plan.realized_sparsity, pruned as f64 / 256.0);
        assert!(plan.realized_sparsity < plan.target_sparsity);
    }

    #[test]
    fn kappa_and_budget_validated() {
        assert!(PlanMapperConfig::new(Budget::default(), 0.0).is_err());
        assert!(PlanMapperConfig::new(Budget::default(), 1.0).is_ok());
    }

    #[test]
    fn widths_must_match() {
        assert!(map_plan(0.5, &[0.5, 0.5], &cfg(), &[8; 3], Preference::uniform()).is_err());
    }
}
