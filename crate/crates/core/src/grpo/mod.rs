//! Plan-level group-relative policy optimization: preference sampling, group
//! rollouts, mean-centred advantages and flow-gated, entropy-regularized
//! gradient steps on the plan policy.

mod env;

use alloc::vec::Vec;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution};
use serde::{Deserialize, Serialize};

use crate::calib::LayerState;
use crate::diffmath::{Tape, Tensor2};
use crate::error::{bail, Error, Result};
use crate::policy::{
    entropy_taped, forward_taped, log_prob_taped, map_plan, policy_forward, sample_action,
    PlanMapperConfig, PolicyAction, PolicyParams, PolicyVars, PruningPlan,
};
use crate::rewards::{GateConfig, GateOutput, ObjectiveVector, RunningNormalizer, StabilityGate};
use crate::types::Preference;

pub use env::{PlanEnvironment, SyntheticLandscape, VlmEnvironment};

/// Fixed trade-off points mixed into preference sampling.
pub const PREFERENCE_ANCHORS: [[f64; 3]; 4] = [
    [0.60, 0.30, 0.10],
    [0.45, 0.45, 0.10],
    [0.33, 0.33, 0.34],
    [0.30, 0.60, 0.10],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreferenceSampler {
    pub anchors: Vec<[f64; 3]>,
    pub concentration: [f64; 3],
    pub anchor_probability: f64,
}

impl Default for PreferenceSampler {
    fn default() -> Self {
        Self {
            anchors: PREFERENCE_ANCHORS.to_vec(),
            concentration: [1.0; 3],
            anchor_probability: 0.5,
        }
    }
}

impl PreferenceSampler {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.anchor_probability) {
            bail!(Config, "anchor probability {} outside [0, 1]", self.anchor_probability);
        }
        if self.anchor_probability > 0.0 && self.anchors.is_empty() {
            bail!(Config, "anchor probability is positive but no anchors are given");
        }
        for a in &self.anchors {
            Preference::normalized(*a)?;
        }
        if self.concentration.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
            bail!(Config, "Dirichlet concentration must be positive");
        }
        Ok(())
    }

    /// A uniformly chosen anchor with probability `anchor_probability`,
    /// otherwise a Dirichlet draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Preference> {
        let use_anchor = rng.random::<f64>() < self.anchor_probability;
        let w = if use_anchor {
            self.anchors[rng.random_range(0..self.anchors.len())]
        } else {
            Dirichlet::new(self.concentration)
                .map_err(|e| Error::Config(alloc::format!("dirichlet: {}", e)))?
                .sample(rng)
        };
        Ok(Preference::normalized(w)?.0)
    }
}

/// `w_rob n_rob + w_util n_util + w_comp j_comp`.
pub fn scalar_reward(w: Preference, n_rob: f64, n_util: f64, j_comp: f64) -> f64 {
    w.0[0] * n_rob + w.0[1] * n_util + w.0[2] * j_comp
}

/// Each reward minus the group mean.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        bail!(Usage, "group advantages need at least 2 rewards, got {}", rewards.len());
    }
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    Ok(rewards.iter().map(|r| r - mean).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub group_size: usize,
    pub episodes: usize,
    pub learning_rate: f64,
    pub entropy_coef: f64,
    pub grad_clip: f64,
    pub mapper: PlanMapperConfig,
    pub gate: GateConfig,
    pub sampler: PreferenceSampler,
    pub normalizer_momentum: f64,
    pub normalizer_clip: f64,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            episodes: 200,
            learning_rate: 3e-3,
            entropy_coef: 0.01,
            grad_clip: 1.0,
            mapper: PlanMapperConfig::default(),
            gate: GateConfig::default(),
            sampler: PreferenceSampler::default(),
            normalizer_momentum: 0.99,
            normalizer_clip: 5.0,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            bail!(Config, "group size must be at least 2, got {}", self.group_size);
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            bail!(Config, "learning rate must be positive");
        }
        if !(self.entropy_coef >= 0.0) {
            bail!(Config, "entropy coefficient must be non-negative");
        }
        if !(self.grad_clip > 0.0) {
            bail!(Config, "gradient clip must be positive");
        }
        if !(0.0..1.0).contains(&self.normalizer_momentum) || !(self.normalizer_clip > 0.0) {
            bail!(Config, "normalizer momentum must lie in [0, 1) and clip be positive");
        }
        self.mapper.validate()?;
        self.gate.validate()?;
        self.sampler.validate()
    }
}

/// One group member of an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberRecord {
    pub s: f64,
    pub p: Vec<f64>,
    pub log_prob: f64,
    pub ratios: Vec<f64>,
    pub sparsity: f64,
    pub objectives: ObjectiveVector,
    pub reward: f64,
    pub advantage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub preference: Preference,
    pub members: Vec<MemberRecord>,
    pub gate: GateOutput,
    pub mean_reward: f64,
    /// Group mean of `w · (j_rob, j_util, j_comp)` before normalization.
    pub mean_raw_reward: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub entropy: f64,
    pub skipped: bool,
}

/// Loss value and per-parameter gradients, in [`PolicyParams::tensors`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGradient {
    pub loss: f64,
    pub entropy: f64,
    pub grads: Vec<Tensor2>,
}

/// Gradient of `−γ (1/G) Σ log π(a_g) Â_g − λ_H H(π)` with respect to the
/// policy weights.
pub fn policy_gradient(
    policy: &PolicyParams,
    states: &[LayerState],
    actions: &[(f64, Vec<f64>)],
    advantages: &[f64],
    gamma: f64,
    entropy_coef: f64,
) -> Result<PolicyGradient> {
    if actions.len() != advantages.len() || actions.is_empty() {
        bail!(Usage, "{} actions for {} advantages", actions.len(), advantages.len());
    }
    let mut tape = Tape::new();
    let vars = PolicyVars::record(&mut tape, policy, true);
    let heads = forward_taped(&mut tape, &vars, states)?;
    let mut pg: Option<crate::diffmath::Var> = None;
    for ((s, p), &adv) in actions.iter().zip(advantages) {
        let lp = log_prob_taped(&mut tape, &heads, *s, p)?;
        let term = tape.scale(lp, adv);
        pg = Some(match pg {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let pg = tape.scale(pg.unwrap(), -gamma / actions.len() as f64);
    let h = entropy_taped(&mut tape, &heads)?;
    let bonus = tape.scale(h, -entropy_coef);
    let loss = tape.add(pg, bonus)?;
    let value = tape.scalar(loss);
    let entropy = tape.scalar(h);
    if !value.is_finite() {
        bail!(Numeric, "non-finite policy loss {}", value);
    }
    let g = tape.backward(loss)?;
    let grads = vars
        .vars
        .iter()
        .zip(policy.tensors())
        .map(|(&v, t)| g.get_or_zeros(v, t.shape()))
        .collect();
    Ok(PolicyGradient {
        loss: value,
        entropy,
        grads,
    })
}

/// Global gradient norm.
pub fn grad_norm(grads: &[Tensor2]) -> f64 {
    libm::sqrt(grads.iter().map(Tensor2::norm_sq).sum::<f64>())
}

/// Clipped gradient-descent step; returns the pre-clip gradient norm.
pub fn apply_gradient(policy: &mut PolicyParams, grads: &[Tensor2], lr: f64, clip: f64) -> Result<f64> {
    let norm = grad_norm(grads);
    if !norm.is_finite() {
        bail!(Numeric, "non-finite gradient norm");
    }
    let scale = if norm > clip { clip / norm } else { 1.0 };
    if grads.len() != 12 {
        bail!(Usage, "{} gradients for 12 policy tensors", grads.len());
    }
    for (t, g) in policy.tensors_mut().into_iter().zip(grads) {
        if t.shape() != g.shape() {
            bail!(Dimension, "gradient {:?} for tensor {:?}", g.shape(), t.shape());
        }
        t.add_assign_scaled(g, -lr * scale);
    }
    Ok(norm)
}

/// Mutable training state: policy, normalizer, gate and RNG.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainerConfig,
    pub policy: PolicyParams,
    pub normalizer: RunningNormalizer,
    pub gate: StabilityGate,
    pub episode: usize,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new<E: PlanEnvironment>(config: TrainerConfig, policy: PolicyParams, env: &E) -> Result<Self> {
        config.validate()?;
        let gate = StabilityGate::new(config.gate, env.reference_flow())?;
        Ok(Self {
            normalizer: RunningNormalizer::new(config.normalizer_momentum, config.normalizer_clip),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            policy,
            gate,
            episode: 0,
        })
    }

    /// Samples a preference and a group, evaluates it, and takes one step.
    pub fn step<E: PlanEnvironment>(&mut self, env: &E) -> Result<EpisodeRecord> {
        let cfg = &self.config;
        let budget = cfg.mapper.budget();
        let widths = env.layer_widths();
        let w = cfg.sampler.sample(&mut self.rng)?;
        let states = env.states(budget, w)?;
        let dist = policy_forward(&self.policy, &states)?;

        let mut actions: Vec<PolicyAction> = Vec::with_capacity(cfg.group_size);
        let mut plans: Vec<PruningPlan> = Vec::with_capacity(cfg.group_size);
        for _ in 0..cfg.group_size {
            let mut member_rng = ChaCha8Rng::seed_from_u64(self.rng.next_u64());
            let a = sample_action(&dist, &mut member_rng)?;
            plans.push(map_plan(a.s, &a.p, &cfg.mapper, &widths, w)?);
            actions.push(a);
        }
        let objectives = evaluate_group(env, &plans, budget)?;

        let n = widths.len();
        let mean_ratios: Vec<f64> = (0..n)
            .map(|l| plans.iter().map(|p| p.ratios[l]).sum::<f64>() / plans.len() as f64)
            .collect();
        let rho = self.gate.rho(env.flow(&mean_ratios)?);
        let gate = self.gate.step(rho);

        let raw: Vec<[f64; 2]> = objectives.iter().map(|o| [o.j_rob, o.j_util]).collect();
        let normed = self.normalizer.normalize(&raw)?;
        let rewards: Vec<f64> = normed
            .iter()
            .zip(&objectives)
            .map(|(z, o)| scalar_reward(w, z[0], z[1], o.j_comp))
            .collect();
        let advantages = group_advantages(&rewards)?;
        let g = cfg.group_size as f64;
        let mean_reward = rewards.iter().sum::<f64>() / g;
        let mean_raw_reward = objectives
            .iter()
            .map(|o| scalar_reward(w, o.j_rob, o.j_util, o.j_comp))
            .sum::<f64>()
            / g;

        let pairs: Vec<(f64, Vec<f64>)> = actions.iter().map(|a| (a.s, a.p.clone())).collect();
        let (loss, norm, entropy, skipped) =
            match policy_gradient(&self.policy, &states, &pairs, &advantages, gate.gamma, cfg.entropy_coef) {
                Ok(pg) => {
                    let mut next = self.policy.clone();
                    match apply_gradient(&mut next, &pg.grads, cfg.learning_rate, cfg.grad_clip) {
                        Ok(norm) if next.is_finite() => {
                            self.policy = next;
                            (pg.loss, norm, pg.entropy, false)
                        }
                        _ => (pg.loss, f64::NAN, pg.entropy, true),
                    }
                }
                Err(Error::Numeric(_)) => (f64::NAN, f64::NAN, f64::NAN, true),
                Err(e) => return Err(e),
            };

        let members = actions
            .into_iter()
            .zip(plans)
            .zip(objectives)
            .zip(rewards.iter().zip(&advantages))
            .map(|(((a, plan), o), (&r, &adv))| MemberRecord {
                s: a.s,
                p: a.p,
                log_prob: a.log_prob,
                ratios: plan.ratios,
                sparsity: plan.realized_sparsity,
                objectives: o,
                reward: r,
                advantage: adv,
            })
            .collect();
        let record = EpisodeRecord {
            episode: self.episode,
            preference: w,
            members,
            gate,
            mean_reward,
            mean_raw_reward,
            loss,
            grad_norm: norm,
            entropy,
            skipped,
        };
        self.episode += 1;
        Ok(record)
    }
}

#[cfg(feature = "parallel")]
fn evaluate_group<E: PlanEnvironment>(
    env: &E,
    plans: &[PruningPlan],
    budget: crate::types::Budget,
) -> Result<Vec<ObjectiveVector>> {
    use rayon::prelude::*;
    plans.par_iter().map(|p| env.evaluate(p, budget)).collect()
}

#[cfg(not(feature = "parallel"))]
fn evaluate_group<E: PlanEnvironment>(
    env: &E,
    plans: &[PruningPlan],
    budget: crate::types::Budget,
) -> Result<Vec<ObjectiveVector>> {
    plans.iter().map(|p| env.evaluate(p, budget)).collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: PolicyParams,
    /// Policy right after the episode with the highest mean group reward.
    pub best_policy: PolicyParams,
    pub best_mean_reward: f64,
    pub log: Vec<EpisodeRecord>,
}

/// Runs `config.episodes` steps; `on_episode` sees each record as it lands.
pub fn train<E, F>(config: TrainerConfig, policy: PolicyParams, env: &E, mut on_episode: F) -> Result<TrainOutcome>
where
    E: PlanEnvironment,
    F: FnMut(&EpisodeRecord, &PolicyParams),
{
    let episodes = config.episodes;
    let mut trainer = Trainer::new(config, policy, env)?;
    let mut best_policy = trainer.policy.clone();
    let mut best_mean_reward = f64::NEG_INFINITY;
    let mut log = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let record = trainer.step(env)?;
        if !record.skipped && record.mean_reward > best_mean_reward {
            best_mean_reward = record.mean_reward;
            best_policy = trainer.policy.clone();
        }
        on_episode(&record, &trainer.policy);
        log.push(record);
    }
    Ok(TrainOutcome {
        policy: trainer.policy,
        best_policy,
        best_mean_reward,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyConfig;

    #[test]
    fn anchors_only_sampler() {
        let s = PreferenceSampler {
            anchor_probability: 1.0,
            ..PreferenceSampler::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let w = s.sample(&mut rng).unwrap();
            assert!(PREFERENCE_ANCHORS.iter().any(|a| {
                let (n, _) = Preference::normalized(*a).unwrap();
                n == w
            }));
        }
    }

    #[test]
    fn samples_lie_on_simplex() {
        let s = PreferenceSampler::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let w = s.sample(&mut rng).unwrap();
            assert!((w.0.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(w.0.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn reward_arithmetic() {
        assert_eq!(scalar_reward(Preference([1.0, 0.0, 0.0]), 0.7, -3.0, 1.0), 0.7);
        assert_eq!(scalar_reward(Preference([0.0, 0.0, 1.0]), 0.7, -3.0, 1.0), 1.0);
        let r = scalar_reward(Preference([0.33, 0.33, 0.34]), 1.0, -1.0, 0.5);
        assert!((r - 0.17).abs() < 1e-12);
    }

    #[test]
    fn advantage_examples() {
        assert_eq!(group_advantages(&[1.0, 2.0, 3.0]).unwrap(), [-1.0, 0.0, 1.0]);
        assert_eq!(group_advantages(&[4.0; 5]).unwrap(), [0.0; 5]);
        assert!(group_advantages(&[1.0]).is_err());
    }

    #[test]
    fn zero_episodes_returns_initial_policy() {
        let env = SyntheticLandscape::opposed(2, 16, 0).unwrap();
        let p0 = PolicyParams::init(PolicyConfig::default()).unwrap();
        let cfg = TrainerConfig {
            episodes: 0,
            ..TrainerConfig::default()
        };
        let out = train(cfg, p0.clone(), &env, |_, _| {}).unwrap();
        assert_eq!(out.policy, p0);
        assert!(out.log.is_empty());
    }

    #[test]
    fn training_is_reproducible() {
        let env = SyntheticLandscape::opposed(3, 16, 2).unwrap();
        let p0 = PolicyParams::init(PolicyConfig { hidden: 8, seed: 1 }).unwrap();
        let cfg = TrainerConfig {
            episodes: 12,
            gate: GateConfig {
                warmup_episodes: 4,
                ..GateConfig::default()
            },
            ..TrainerConfig::default()
        };
        let a = train(cfg.clone(), p0.clone(), &env, |_, _| {}).unwrap();
        let b = train(cfg, p0, &env, |_, _| {}).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.policy, b.policy);
        for r in &a.log {
            let s: f64 = r.members.iter().map(|m| m.advantage).sum();
            assert!(s.abs() < 1e-9);
        }
    }

    #[test]
    fn zero_advantages_leave_only_entropy_gradient() {
        let env = SyntheticLandscape::opposed(2, 16, 0).unwrap();
        let p = PolicyParams::init(PolicyConfig { hidden: 6, seed: 4 }).unwrap();
        let states = env.states(Default::default(), Preference::uniform()).unwrap();
        let actions = alloc::vec![(0.3, alloc::vec![0.4, 0.6]), (0.8, alloc::vec![0.9, 0.1])];
        let pure = policy_gradient(&p, &states, &actions, &[0.0, 0.0], 1.0, 0.0).unwrap();
        assert_eq!(grad_norm(&pure.grads), 0.0);
        let ent = policy_gradient(&p, &states, &actions, &[0.0, 0.0], 1.0, 0.1).unwrap();
        assert!(grad_norm(&ent.grads) > 0.0);
    }

    #[test]
    fn gate_scales_policy_gradient() {
        let env = SyntheticLandscape::opposed(2, 16, 0).unwrap();
        let p = PolicyParams::init(PolicyConfig { hidden: 6, seed: 4 }).unwrap();
        let states = env.states(Default::default(), Preference::uniform()).unwrap();
        let actions = alloc::vec![(0.3, alloc::vec![0.4, 0.6]), (0.8, alloc::vec![0.9, 0.1])];
        let adv = [0.5, -0.5];
        let full = policy_gradient(&p, &states, &actions, &adv, 1.0, 0.0).unwrap();
        let damped = policy_gradient(&p, &states, &actions, &adv, 0.1, 0.0).unwrap();
        let ratio = grad_norm(&damped.grads) / grad_norm(&full.grads);
        assert!((ratio - 0.1).abs() < 1e-12);
    }
}
