use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::pruner::MaskSet;
use crate::toyvlm::ToyVlmParams;

/// Per-neuron path mass `(Σ_o |down_oj|)(Σ_i |gate_ji| + |up_ji|)` of every
/// MLP neuron; masked flow is the sum over surviving neurons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowTable {
    pub per_neuron: Vec<Vec<f64>>,
}

impl FlowTable {
    pub fn new(params: &ToyVlmParams) -> Self {
        let per_neuron = params
            .blocks
            .iter()
            .map(|b| {
                (0..b.gate.rows())
                    .map(|j| {
                        let fan_out: f64 = (0..b.down.rows()).map(|o| b.down.get(o, j).abs()).sum();
                        let fan_in: f64 = b.gate.row(j).iter().chain(b.up.row(j)).map(|w| w.abs()).sum();
                        fan_out * fan_in
                    })
                    .collect()
            })
            .collect();
        Self { per_neuron }
    }

    pub fn flow(&self, masks: &MaskSet) -> Result<f64> {
        if masks.n_blocks() != self.per_neuron.len()
            || masks
                .blocks()
                .iter()
                .zip(&self.per_neuron)
                .any(|(m, f)| m.len() != f.len())
        {
            bail!(Usage, "mask set does not match the flow table");
        }
        Ok(masks
            .blocks()
            .iter()
            .zip(&self.per_neuron)
            .map(|(m, f)| {
                m.iter()
                    .zip(f)
                    .filter(|(&k, _)| k)
                    .map(|(_, &v)| v)
                    .sum::<f64>()
            })
            .sum())
    }

    pub fn full_flow(&self) -> f64 {
        self.per_neuron.iter().map(|f| f.iter().sum::<f64>()).sum()
    }
}

/// All-ones input pushed through the absolute-valued masked MLP chains.
pub fn synflow_score(params: &ToyVlmParams, masks: &MaskSet) -> Result<f64> {
    crate::toyvlm::check_masks(&params.config, masks)?;
    FlowTable::new(params).flow(masks)
}

/// `ln((flow + ε) / (flow_ref + ε))`.
pub fn flow_log_ratio(flow: f64, flow_ref: f64, epsilon: f64) -> f64 {
    libm::log((flow + epsilon) / (flow_ref + epsilon))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConfig {
    pub lambda_syn: f64,
    pub beta_syn: f64,
    pub gamma_min: f64,
    pub epsilon: f64,
    pub warmup_episodes: usize,
    pub q_low: f64,
    pub q_high: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            lambda_syn: 2.0,
            beta_syn: 1.0,
            gamma_min: 0.1,
            epsilon: 1e-8,
            warmup_episodes: 50,
            q_low: 0.05,
            q_high: 0.95,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_syn >= 0.0 && self.beta_syn >= 0.0) {
            bail!(Config, "gate strengths must be non-negative");
        }
        if !(self.gamma_min > 0.0 && self.gamma_min <= 1.0) {
            bail!(Config, "gamma_min must lie in (0, 1], got {}", self.gamma_min);
        }
        if !(self.epsilon > 0.0) {
            bail!(Config, "flow epsilon must be positive");
        }
        if !(0.0 <= self.q_low && self.q_low <= self.q_high && self.q_high <= 1.0) {
            bail!(Config, "band quantiles must satisfy 0 <= q_low <= q_high <= 1");
        }
        Ok(())
    }
}

/// Result of gating one episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateOutput {
    pub rho: f64,
    pub psi: f64,
    pub gamma: f64,
    pub band: (f64, f64),
}

/// Band penalty `ψ`: zero inside `[low, high]`, linear outside.
pub fn band_penalty(rho: f64, band: (f64, f64), lambda_syn: f64) -> f64 {
    if rho < band.0 {
        -lambda_syn * (band.0 - rho)
    } else if rho > band.1 {
        -lambda_syn * (rho - band.1)
    } else {
        0.0
    }
}

/// `clip(exp(β ψ), γ_min, 1)`.
pub fn gate_weight(psi: f64, beta_syn: f64, gamma_min: f64) -> f64 {
    libm::exp(beta_syn * psi).clamp(gamma_min, 1.0)
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Flow-collapse detector. During warmup every episode gets weight 1 while
/// ρ values are collected; the reported band shrinks from infinite to the
/// empirical quantile band, which is then frozen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityGate {
    pub config: GateConfig,
    pub flow_ref: f64,
    pub buffer: Vec<f64>,
    pub band: Option<(f64, f64)>,
    pub episodes: usize,
}

impl StabilityGate {
    pub fn new(config: GateConfig, flow_ref: f64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            flow_ref,
            buffer: Vec::new(),
            band: None,
            episodes: 0,
        })
    }

    /// A gate whose band is fixed from the start.
    pub fn with_band(config: GateConfig, flow_ref: f64, band: (f64, f64)) -> Result<Self> {
        if !(band.0 <= band.1) {
            bail!(Config, "band lower bound {} exceeds upper {}", band.0, band.1);
        }
        let mut gate = Self::new(config, flow_ref)?;
        gate.band = Some(band);
        Ok(gate)
    }

    pub fn is_calibrated(&self) -> bool {
        self.band.is_some()
    }

    pub fn rho(&self, flow: f64) -> f64 {
        flow_log_ratio(flow, self.flow_ref, self.config.epsilon)
    }

    fn provisional_band(&self) -> (f64, f64) {
        let n = self.buffer.len();
        let warm = self.config.warmup_episodes;
        if n < 2 || warm == 0 {
            return (f64::NEG_INFINITY, f64::INFINITY);
        }
        let mut sorted = self.buffer.clone();
        sorted.sort_by(f64::total_cmp);
        let low = quantile(&sorted, self.config.q_low);
        let high = quantile(&sorted, self.config.q_high);
        let frac = n as f64 / warm as f64;
        let widen = (high - low) * (1.0 - frac) / frac;
        (low - widen, high + widen)
    }

    /// Gates an episode with flow log-ratio `rho`.
    pub fn step(&mut self, rho: f64) -> GateOutput {
        self.episodes += 1;
        if let Some(band) = self.band {
            let psi = band_penalty(rho, band, self.config.lambda_syn);
            let gamma = gate_weight(psi, self.config.beta_syn, self.config.gamma_min);
            return GateOutput { rho, psi, gamma, band };
        }
        if self.config.warmup_episodes == 0 {
            return GateOutput {
                rho,
                psi: 0.0,
                gamma: 1.0,
                band: (f64::NEG_INFINITY, f64::INFINITY),
            };
        }
        if rho.is_finite() {
            self.buffer.push(rho);
        }
        let band = self.provisional_band();
        if self.buffer.len() >= self.config.warmup_episodes {
            self.band = Some(band);
        }
        let psi = band_penalty(rho, band, self.config.lambda_syn);
        GateOutput {
            rho,
            psi,
            gamma: 1.0,
            band,
        }
    }
}
