//! Preference-conditioned plan policy: a shared per-layer encoder, a pooled
//! context, a Beta head for the global budget scalar and a Dirichlet head for
//! the layer allocation.

mod dist;
mod plan;

use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::calib::{LayerState, N_FEATURES};
use crate::diffmath::{Tape, Tensor2, Var};
use crate::error::{bail, Result};

pub use dist::{
    beta_entropy, beta_log_pdf, clamp_simplex, clamp_unit, dirichlet_entropy, dirichlet_log_pdf,
    entropy_taped, log_prob_and_entropy, log_prob_taped, sample_action, DistParams, HeadVars,
    PolicyAction, INTERIOR_EPS,
};
pub use plan::{map_plan, realized_sparsity, PlanMapperConfig, PruningPlan};

/// Lower bound added to every Dirichlet concentration.
pub const ETA_FLOOR: f64 = 0.1;

/// Width of the global context input: `[w_rob, w_util, w_comp, c_min, c_max]`.
pub const N_GLOBAL: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub hidden: usize,
    pub seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { hidden: 32, seed: 0 }
    }
}

/// Policy weights. Head weights start at zero so the initial policy is the
/// same for every state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub config: PolicyConfig,
    pub enc1_w: Tensor2,
    pub enc1_b: Tensor2,
    pub enc2_w: Tensor2,
    pub enc2_b: Tensor2,
    pub ctx_w: Tensor2,
    pub ctx_g_w: Tensor2,
    pub ctx_b: Tensor2,
    pub budget_w: Tensor2,
    pub budget_b: Tensor2,
    pub alloc_w: Tensor2,
    pub alloc_ctx_w: Tensor2,
    pub alloc_b: Tensor2,
}

const PARAM_NAMES: [&str; 12] = [
    "enc1_w",
    "enc1_b",
    "enc2_w",
    "enc2_b",
    "ctx_w",
    "ctx_g_w",
    "ctx_b",
    "budget_w",
    "budget_b",
    "alloc_w",
    "alloc_ctx_w",
    "alloc_b",
];

impl PolicyParams {
    pub fn init(config: PolicyConfig) -> Result<Self> {
        let h = config.hidden;
        if h == 0 {
            bail!(Config, "policy hidden width must be positive");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut dense = |rows: usize, cols: usize| {
            let std = 1.0 / libm::sqrt(rows as f64);
            let data = (0..rows * cols)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * std
                })
                .collect();
            Tensor2::from_vec(rows, cols, data)
        };
        let enc1_w = dense(N_FEATURES, h)?;
        let enc2_w = dense(h, h)?;
        let ctx_w = dense(h, h)?;
        let ctx_g_w = dense(N_GLOBAL, h)?;
        Ok(Self {
            config,
            enc1_w,
            enc1_b: Tensor2::zeros(1, h),
            enc2_w,
            enc2_b: Tensor2::zeros(1, h),
            ctx_w,
            ctx_g_w,
            ctx_b: Tensor2::zeros(1, h),
            budget_w: Tensor2::zeros(h, 2),
            budget_b: Tensor2::zeros(1, 2),
            alloc_w: Tensor2::zeros(h, 1),
            alloc_ctx_w: Tensor2::zeros(h, 1),
            alloc_b: Tensor2::zeros(1, 1),
        })
    }

    pub fn tensors(&self) -> [&Tensor2; 12] {
        [
            &self.enc1_w,
            &self.enc1_b,
            &self.enc2_w,
            &self.enc2_b,
            &self.ctx_w,
            &self.ctx_g_w,
            &self.ctx_b,
            &self.budget_w,
            &self.budget_b,
            &self.alloc_w,
            &self.alloc_ctx_w,
            &self.alloc_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor2; 12] {
        [
            &mut self.enc1_w,
            &mut self.enc1_b,
            &mut self.enc2_w,
            &mut self.enc2_b,
            &mut self.ctx_w,
            &mut self.ctx_g_w,
            &mut self.ctx_b,
            &mut self.budget_w,
            &mut self.budget_b,
            &mut self.alloc_w,
            &mut self.alloc_ctx_w,
            &mut self.alloc_b,
        ]
    }

    pub fn named_arrays(&self) -> Vec<(String, &Tensor2)> {
        PARAM_NAMES
            .iter()
            .zip(self.tensors())
            .map(|(n, t)| (String::from(*n), t))
            .collect()
    }

    /// Rebuilds parameters from named arrays, checking every shape.
    pub fn from_named_arrays<'a, F>(config: PolicyConfig, mut lookup: F) -> Result<Self>
    where
        F: FnMut(&str) -> Option<&'a Tensor2>,
    {
        let mut out = Self::init(config)?;
        for (name, slot) in PARAM_NAMES.iter().zip(out.tensors_mut()) {
            let Some(t) = lookup(name) else {
                bail!(Input, "policy array `{}` missing", name);
            };
            if t.shape() != slot.shape() {
                bail!(
                    Input,
                    "policy array `{}` has shape {:?}, expected {:?}",
                    name,
                    t.shape(),
                    slot.shape()
                );
            }
            *slot = t.clone();
        }
        Ok(out)
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data().len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

/// Policy weights registered on a tape, in [`PolicyParams::tensors`] order.
#[derive(Debug, Clone)]
pub struct PolicyVars {
    pub vars: Vec<Var>,
}

impl PolicyVars {
    /// Registers trainable leaves (`trainable = false` records constants).
    pub fn record(tape: &mut Tape, params: &PolicyParams, trainable: bool) -> Self {
        let vars = params
            .tensors()
            .iter()
            .map(|t| {
                if trainable {
                    tape.param((*t).clone())
                } else {
                    tape.constant((*t).clone())
                }
            })
            .collect();
        Self { vars }
    }
}

/// `L × N_FEATURES` state matrix and the `1 × N_GLOBAL` context row.
pub fn state_inputs(states: &[LayerState]) -> Result<(Tensor2, Tensor2)> {
    if states.len() < 2 {
        bail!(Config, "policy needs at least 2 prunable layers, got {}", states.len());
    }
    let mut data = Vec::with_capacity(states.len() * N_FEATURES);
    for s in states {
        let f = s.features();
        if f.iter().any(|x| !x.is_finite()) {
            bail!(Numeric, "non-finite layer feature in {:?}", f);
        }
        data.extend_from_slice(&f);
    }
    let x = Tensor2::from_vec(states.len(), N_FEATURES, data)?;
    let s0 = &states[0];
    let g = Tensor2::row_vector(&[
        s0.preference.0[0],
        s0.preference.0[1],
        s0.preference.0[2],
        s0.budget_context.0,
        s0.budget_context.1,
    ]);
    Ok((x, g))
}

/// Records the full policy on `tape` and returns the head parameters.
pub fn forward_taped(tape: &mut Tape, vars: &PolicyVars, states: &[LayerState]) -> Result<HeadVars> {
    let (x, g) = state_inputs(states)?;
    let v = &vars.vars;
    let x = tape.constant(x);
    let g = tape.constant(g);

    let h1 = tape.matmul(x, v[0])?;
    let h1 = tape.add_row(h1, v[1])?;
    let h1 = tape.tanh(h1);
    let h2 = tape.matmul(h1, v[2])?;
    let h2 = tape.add_row(h2, v[3])?;
    let h2 = tape.tanh(h2);

    let pooled = tape.mean_rows(h2);
    let c = tape.matmul(pooled, v[4])?;
    let cg = tape.matmul(g, v[5])?;
    let c = tape.add(c, cg)?;
    let c = tape.add(c, v[6])?;
    let ctx = tape.tanh(c);

    let braw = tape.matmul(ctx, v[7])?;
    let braw = tape.add(braw, v[8])?;
    let a_raw = tape.entry(braw, 0, 0)?;
    let b_raw = tape.entry(braw, 0, 1)?;
    let a_sp = tape.softplus(a_raw);
    let b_sp = tape.softplus(b_raw);
    let alpha = tape.offset(a_sp, 1.0);
    let beta = tape.offset(b_sp, 1.0);

    let logits = tape.matmul(h2, v[9])?;
    let shift = tape.matmul(ctx, v[10])?;
    let logits = tape.add_scalar(logits, shift)?;
    let logits = tape.add_scalar(logits, v[11])?;
    let e_sp = tape.softplus(logits);
    let eta = tape.offset(e_sp, ETA_FLOOR);
    Ok(HeadVars { alpha, beta, eta })
}

/// `(α, β, η)` for the given states.
pub fn policy_forward(params: &PolicyParams, states: &[LayerState]) -> Result<DistParams> {
    let mut tape = Tape::new();
    let vars = PolicyVars::record(&mut tape, params, false);
    let heads = forward_taped(&mut tape, &vars, states)?;
    let dp = heads.values(&tape);
    dp.validate()?;
    Ok(dp)
}

/// Mean action `(E[s], E[p])` with its density bookkeeping.
pub fn mean_action(dp: &DistParams) -> Result<PolicyAction> {
    let (s, p) = dp.means();
    let s = clamp_unit(s);
    let p = clamp_simplex(&p);
    let (log_prob, entropy) = log_prob_and_entropy(dp, s, &p)?;
    Ok(PolicyAction {
        s,
        p,
        log_prob,
        entropy,
    })
}
