use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// Trade-off weights `(rob, util, comp)` on the 2-simplex.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Preference(pub [f64; 3]);

impl Preference {
    pub const TOLERANCE: f64 = 1e-9;

    /// Strict constructor: entries non-negative and summing to one.
    pub fn new(rob: f64, util: f64, comp: f64) -> Result<Self> {
        let w = [rob, util, comp];
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            bail!(Input, "preference entries must be finite and non-negative: {:?}", w);
        }
        if (w.iter().sum::<f64>() - 1.0).abs() > Self::TOLERANCE {
            bail!(Input, "preference {:?} does not sum to 1", w);
        }
        Ok(Self(w))
    }

    /// Rescales non-negative weights onto the simplex. Weights already
    /// summing to one within `TOLERANCE` are kept bit for bit; the returned
    /// flag is set when rescaling happened.
    pub fn normalized(w: [f64; 3]) -> Result<(Self, bool)> {
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            bail!(Input, "preference entries must be finite and non-negative: {:?}", w);
        }
        let total: f64 = w.iter().sum();
        if total <= 0.0 {
            bail!(Input, "preference {:?} has zero mass", w);
        }
        if (total - 1.0).abs() <= Self::TOLERANCE {
            return Ok((Self(w), false));
        }
        Ok((Self([w[0] / total, w[1] / total, w[2] / total]), true))
    }

    pub fn uniform() -> Self {
        Self([1.0 / 3.0; 3])
    }

    pub fn rob(&self) -> f64 {
        self.0[0]
    }

    pub fn util(&self) -> f64 {
        self.0[1]
    }

    pub fn comp(&self) -> f64 {
        self.0[2]
    }
}

/// Target sparsity interval `[c_min, c_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Budget {
    pub c_min: f64,
    pub c_max: f64,
}

impl Budget {
    pub fn new(c_min: f64, c_max: f64) -> Result<Self> {
        let b = Self { c_min, c_max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.c_min && self.c_min < self.c_max && self.c_max <= 1.0) {
            bail!(
                Config,
                "budget requires 0 <= c_min < c_max <= 1, got [{}, {}]",
                self.c_min,
                self.c_max
            );
        }
        Ok(())
    }

    pub fn contains(&self, sparsity: f64) -> bool {
        self.c_min <= sparsity && sparsity <= self.c_max
    }
}

impl Default for Budget {
    fn default() -> Self {
        Self {
            c_min: 0.2,
            c_max: 0.5,
        }
    }
}
