//! Beta and Dirichlet densities and entropies, as plain functions and as
//! differentiable tape expressions.

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::diffmath::special::{digamma_unchecked, lgamma_unchecked};
use crate::diffmath::{Tape, Tensor2, Var};
use crate::error::{bail, Result};

/// Boundary samples are moved this far into the open domain.
pub const INTERIOR_EPS: f64 = 1e-6;

/// Parameters of the two action heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistParams {
    pub alpha: f64,
    pub beta: f64,
    pub eta: Vec<f64>,
}

impl DistParams {
    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x > 0.0;
        if !ok(self.alpha) || !ok(self.beta) || !self.eta.iter().all(|&e| ok(e)) {
            bail!(
                Numeric,
                "distribution parameters must be positive: alpha={} beta={} eta={:?}",
                self.alpha,
                self.beta,
                self.eta
            );
        }
        if self.eta.len() < 2 {
            bail!(Config, "Dirichlet needs at least 2 components, got {}", self.eta.len());
        }
        Ok(())
    }

    /// `(E[s], E[p])`.
    pub fn means(&self) -> (f64, Vec<f64>) {
        let total: f64 = self.eta.iter().sum();
        (
            self.alpha / (self.alpha + self.beta),
            self.eta.iter().map(|e| e / total).collect(),
        )
    }
}

/// A sampled `(s, p)` pair with its density bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyAction {
    pub s: f64,
    pub p: Vec<f64>,
    pub log_prob: f64,
    pub entropy: f64,
}

pub fn clamp_unit(s: f64) -> f64 {
    s.clamp(INTERIOR_EPS, 1.0 - INTERIOR_EPS)
}

/// Floors each component at [`INTERIOR_EPS`] and renormalizes.
pub fn clamp_simplex(p: &[f64]) -> Vec<f64> {
    let floored: Vec<f64> = p
        .iter()
        .map(|&x| if x.is_finite() { x.max(INTERIOR_EPS) } else { INTERIOR_EPS })
        .collect();
    let total: f64 = floored.iter().sum();
    floored.iter().map(|x| x / total).collect()
}

pub fn beta_log_pdf(alpha: f64, beta: f64, s: f64) -> f64 {
    let s = clamp_unit(s);
    (alpha - 1.0) * libm::log(s) + (beta - 1.0) * libm::log(1.0 - s) - ln_beta(alpha, beta)
}

fn ln_beta(alpha: f64, beta: f64) -> f64 {
    lgamma_unchecked(alpha) + lgamma_unchecked(beta) - lgamma_unchecked(alpha + beta)
}

pub fn dirichlet_log_pdf(eta: &[f64], p: &[f64]) -> f64 {
    let p = clamp_simplex(p);
    let total: f64 = eta.iter().sum();
    let norm = lgamma_unchecked(total) - eta.iter().map(|&e| lgamma_unchecked(e)).sum::<f64>();
    norm + eta
        .iter()
        .zip(&p)
        .map(|(&e, &x)| (e - 1.0) * libm::log(x))
        .sum::<f64>()
}

pub fn beta_entropy(alpha: f64, beta: f64) -> f64 {
    ln_beta(alpha, beta) - (alpha - 1.0) * digamma_unchecked(alpha) - (beta - 1.0) * digamma_unchecked(beta)
        + (alpha + beta - 2.0) * digamma_unchecked(alpha + beta)
}

pub fn dirichlet_entropy(eta: &[f64]) -> f64 {
    let total: f64 = eta.iter().sum();
    let k = eta.len() as f64;
    let ln_b = eta.iter().map(|&e| lgamma_unchecked(e)).sum::<f64>() - lgamma_unchecked(total);
    ln_b + (total - k) * digamma_unchecked(total)
        - eta
            .iter()
            .map(|&e| (e - 1.0) * digamma_unchecked(e))
            .sum::<f64>()
}

/// Joint log-density and joint entropy of an action.
pub fn log_prob_and_entropy(dp: &DistParams, s: f64, p: &[f64]) -> Result<(f64, f64)> {
    dp.validate()?;
    if p.len() != dp.eta.len() {
        bail!(Dimension, "allocation of {} for {} components", p.len(), dp.eta.len());
    }
    let lp = beta_log_pdf(dp.alpha, dp.beta, s) + dirichlet_log_pdf(&dp.eta, p);
    let ent = beta_entropy(dp.alpha, dp.beta) + dirichlet_entropy(&dp.eta);
    Ok((lp, ent))
}

/// Draws `s ~ Beta(α, β)` and `p ~ Dirichlet(η)`.
pub fn sample_action<R: Rng + ?Sized>(dp: &DistParams, rng: &mut R) -> Result<PolicyAction> {
    dp.validate()?;
    let beta = Beta::new(dp.alpha, dp.beta)
        .map_err(|e| crate::Error::Numeric(alloc::format!("beta: {}", e)))?;
    let s = clamp_unit(beta.sample(rng));
    let mut draws = Vec::with_capacity(dp.eta.len());
    for &e in &dp.eta {
        let g = Gamma::new(e, 1.0)
            .map_err(|err| crate::Error::Numeric(alloc::format!("gamma: {}", err)))?;
        draws.push(g.sample(rng));
    }
    let total: f64 = draws.iter().sum();
    let raw: Vec<f64> = if total > 0.0 && total.is_finite() {
        draws.iter().map(|d| d / total).collect()
    } else {
        alloc::vec![1.0 / dp.eta.len() as f64; dp.eta.len()]
    };
    let p = clamp_simplex(&raw);
    let (log_prob, entropy) = log_prob_and_entropy(dp, s, &p)?;
    Ok(PolicyAction {
        s,
        p,
        log_prob,
        entropy,
    })
}

/// Tape handles for `α`, `β` (each `1×1`) and `η` (`L×1`).
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub alpha: Var,
    pub beta: Var,
    pub eta: Var,
}

impl HeadVars {
    pub fn values(&self, tape: &Tape) -> DistParams {
        DistParams {
            alpha: tape.scalar(self.alpha),
            beta: tape.scalar(self.beta),
            eta: tape.value(self.eta).data().to_vec(),
        }
    }
}

fn ln_beta_taped(tape: &mut Tape, alpha: Var, beta: Var) -> Result<Var> {
    let la = tape.lgamma(alpha)?;
    let lb = tape.lgamma(beta)?;
    let ab = tape.add(alpha, beta)?;
    let lab = tape.lgamma(ab)?;
    let t = tape.add(la, lb)?;
    tape.sub(t, lab)
}

/// Differentiable `log Beta(s) + log Dirichlet(p)`.
pub fn log_prob_taped(tape: &mut Tape, heads: &HeadVars, s: f64, p: &[f64]) -> Result<Var> {
    let s = clamp_unit(s);
    let p = clamp_simplex(p);
    if p.len() != tape.value(heads.eta).rows() {
        bail!(Dimension, "allocation of {} for {} components", p.len(), tape.value(heads.eta).rows());
    }
    // Beta part
    let am1 = tape.offset(heads.alpha, -1.0);
    let bm1 = tape.offset(heads.beta, -1.0);
    let t1 = tape.scale(am1, libm::log(s));
    let t2 = tape.scale(bm1, libm::log(1.0 - s));
    let lnb = ln_beta_taped(tape, heads.alpha, heads.beta)?;
    let beta_lp = tape.add(t1, t2)?;
    let beta_lp = tape.sub(beta_lp, lnb)?;
    // Dirichlet part
    let log_p = tape.constant(Tensor2::from_vec(p.len(), 1, p.iter().map(|x| libm::log(*x)).collect())?);
    let em1 = tape.offset(heads.eta, -1.0);
    let weighted = tape.mul(em1, log_p)?;
    let kernel = tape.sum(weighted);
    let total = tape.sum(heads.eta);
    let lg_total = tape.lgamma(total)?;
    let lg_each = tape.lgamma(heads.eta)?;
    let lg_sum = tape.sum(lg_each);
    let norm = tape.sub(lg_total, lg_sum)?;
    let dir_lp = tape.add(norm, kernel)?;
    tape.add(beta_lp, dir_lp)
}

/// Differentiable Beta entropy plus Dirichlet entropy.
pub fn entropy_taped(tape: &mut Tape, heads: &HeadVars) -> Result<Var> {
    let (alpha, beta, eta) = (heads.alpha, heads.beta, heads.eta);
    let lnb = ln_beta_taped(tape, alpha, beta)?;
    let am1 = tape.offset(alpha, -1.0);
    let bm1 = tape.offset(beta, -1.0);
    let ab = tape.add(alpha, beta)?;
    let abm2 = tape.offset(ab, -2.0);
    let da = tape.digamma(alpha)?;
    let db = tape.digamma(beta)?;
    let dab = tape.digamma(ab)?;
    let x = tape.mul(am1, da)?;
    let y = tape.mul(bm1, db)?;
    let z = tape.mul(abm2, dab)?;
    let h = tape.sub(lnb, x)?;
    let h = tape.sub(h, y)?;
    let beta_h = tape.add(h, z)?;

    let k = tape.value(eta).rows() as f64;
    let total = tape.sum(eta);
    let lg_each = tape.lgamma(eta)?;
    let lg_sum = tape.sum(lg_each);
    let lg_total = tape.lgamma(total)?;
    let ln_b = tape.sub(lg_sum, lg_total)?;
    let tmk = tape.offset(total, -k);
    let d_total = tape.digamma(total)?;
    let mid = tape.mul(tmk, d_total)?;
    let em1 = tape.offset(eta, -1.0);
    let d_each = tape.digamma(eta)?;
    let w = tape.mul(em1, d_each)?;
    let last = tape.sum(w);
    let dh = tape.add(ln_b, mid)?;
    let dir_h = tape.sub(dh, last)?;
    tape.add(beta_h, dir_h)
}
