//! Mask-fixed recovery fine-tuning of a small parameter subset, with class
//! balancing, a margin hinge and a yes-rate regularizer, plus balanced
//! accuracy evaluation.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{Tape, Tensor2, Var};
use crate::error::{bail, Result};
use crate::pruner::MaskSet;
use crate::rewards::{self, ProbeInstance, ProbeSet, TaskTag, NO, YES};
use crate::toyvlm::{self, block_forward_taped, BlockVars, ToyVlmParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecoveryConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub grad_clip: f64,
    /// MLP projections of this many final blocks are trained.
    pub last_n_blocks: usize,
    pub train_lm_head: bool,
    pub train_final_norm: bool,
    pub lambda_balance: f64,
    pub lambda_margin: f64,
    pub lambda_yes: f64,
    pub margin: f64,
    pub yes_rate_target: f64,
    /// Probability that a batch item is a robustness probe.
    pub mixture: f64,
    pub seed: u64,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            learning_rate: 0.05,
            batch_size: 16,
            grad_clip: 1.0,
            last_n_blocks: 1,
            train_lm_head: true,
            train_final_norm: true,
            lambda_balance: 0.1,
            lambda_margin: 0.1,
            lambda_yes: 0.1,
            margin: 0.5,
            yes_rate_target: 0.5,
            mixture: 0.5,
            seed: 0,
        }
    }
}

impl RecoveryConfig {
    pub fn validate(&self, n_blocks: usize) -> Result<()> {
        if self.last_n_blocks == 0 && !self.train_lm_head && !self.train_final_norm {
            bail!(Config, "recovery scope is empty");
        }
        if self.last_n_blocks > n_blocks {
            bail!(Config, "scope asks for {} blocks of {}", self.last_n_blocks, n_blocks);
        }
        if [self.lambda_balance, self.lambda_margin, self.lambda_yes]
            .iter()
            .any(|&l| !(l >= 0.0))
        {
            bail!(Config, "loss weights must be non-negative");
        }
        if self.lambda_balance > 1.0 {
            bail!(Config, "balance weight must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.mixture) || !(0.0..=1.0).contains(&self.yes_rate_target) {
            bail!(Config, "mixture and yes-rate target must lie in [0, 1]");
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) || !(self.grad_clip > 0.0) {
            bail!(Config, "batch size, learning rate and clip must be positive");
        }
        Ok(())
    }
}

/// Per-class accuracies (keyed by answer token) and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancedAccuracy {
    pub per_class: BTreeMap<usize, f64>,
    pub balanced: f64,
}

/// Balanced accuracy of `(label, prediction)` pairs.
pub fn balanced_accuracy_of(pairs: &[(usize, usize)]) -> BalancedAccuracy {
    let mut counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for &(label, pred) in pairs {
        let e = counts.entry(label).or_insert((0, 0));
        e.1 += 1;
        if label == pred {
            e.0 += 1;
        }
    }
    let per_class: BTreeMap<usize, f64> = counts
        .into_iter()
        .map(|(k, (hit, n))| (k, hit as f64 / n as f64))
        .collect();
    let balanced = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    BalancedAccuracy { per_class, balanced }
}

/// Most probable answer among the probe's candidates (ties: lowest id).
pub fn predict(dist: &[f64], probe: &ProbeInstance) -> usize {
    let mut candidates: Vec<usize> = probe.gt_tokens.iter().chain(&probe.neg_tokens).copied().collect();
    candidates.sort_unstable();
    let mut best = candidates[0];
    for &c in &candidates[1..] {
        if dist[c] > dist[best] {
            best = c;
        }
    }
    best
}

pub fn balanced_accuracy(
    params: &ToyVlmParams,
    masks: Option<&MaskSet>,
    probes: &ProbeSet,
    tag: TaskTag,
) -> Result<BalancedAccuracy> {
    let mut pairs = Vec::new();
    for p in probes.by_task(tag) {
        let logits = toyvlm::logits_at(params, masks, &p.tokens, p.answer_position)?;
        pairs.push((p.label(), predict(&toyvlm::softmax(&logits), p)));
    }
    Ok(balanced_accuracy_of(&pairs))
}

/// Held-out quality of one parameter state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryMetrics {
    pub rob_balanced_accuracy: f64,
    pub util_balanced_accuracy: f64,
    pub rob_margin: f64,
    pub util_margin: f64,
    /// Mean log-margin over all held-out probes.
    pub mean_margin: f64,
}

pub fn evaluate(params: &ToyVlmParams, masks: &MaskSet, probes: &ProbeSet) -> Result<RecoveryMetrics> {
    let mut total = 0.0;
    for p in &probes.instances {
        total += rewards::probe_margin(params, Some(masks), p)?;
    }
    if probes.is_empty() {
        bail!(Usage, "no held-out probes");
    }
    Ok(RecoveryMetrics {
        rob_balanced_accuracy: balanced_accuracy(params, Some(masks), probes, TaskTag::Robustness)?.balanced,
        util_balanced_accuracy: balanced_accuracy(params, Some(masks), probes, TaskTag::Utility)?.balanced,
        rob_margin: rewards::mean_margin(params, Some(masks), probes, TaskTag::Robustness)?,
        util_margin: rewards::mean_margin(params, Some(masks), probes, TaskTag::Utility)?,
        mean_margin: total / probes.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub pre: RecoveryMetrics,
    pub post: RecoveryMetrics,
    pub losses: Vec<f64>,
    pub mask_checksum_before: u64,
    pub mask_checksum_after: u64,
}

/// Trainable tensors on a tape.
struct ScopeVars {
    blocks: Vec<BlockVars>,
    keeps: Vec<Var>,
    final_norm: Var,
    lm_head: Var,
    final_norm_trainable: Option<Var>,
    lm_head_trainable: Option<Var>,
}

fn leaf(tape: &mut Tape, t: &Tensor2, trainable: bool) -> Var {
    if trainable {
        tape.param(t.clone())
    } else {
        tape.constant(t.clone())
    }
}

/// Loss terms of one batch item, recorded on the tape.
struct ItemTerms {
    ce: Var,
    margin: Var,
    yes: Option<Var>,
    label: usize,
}

fn item_terms(
    tape: &mut Tape,
    params: &ToyVlmParams,
    scope: &ScopeVars,
    prefix: &Tensor2,
    probe: &ProbeInstance,
) -> Result<ItemTerms> {
    let cfg = &params.config;
    let mut x = tape.constant(prefix.clone());
    for (vars, &keep) in scope.blocks.iter().zip(&scope.keeps) {
        x = block_forward_taped(tape, cfg, vars, keep, x)?;
    }
    let row = tape.select_row(x, probe.answer_position)?;
    let f = tape.rms_norm_rows(row, toyvlm::NORM_EPS);
    let f = tape.mul_row(f, scope.final_norm)?;
    let logits = tape.matmul_t(f, scope.lm_head)?;
    let gt = tape.log_mass(logits, &probe.gt_tokens)?;
    let neg = tape.log_mass(logits, &probe.neg_tokens)?;
    let ce = tape.scale(gt, -1.0);
    let margin = tape.sub(gt, neg)?;
    let yes = if probe.task_tag == TaskTag::Robustness {
        let y = tape.log_mass(logits, &[YES])?;
        let yn = tape.log_mass(logits, &[YES, NO])?;
        let d = tape.sub(y, yn)?;
        Some(tape.exp(d))
    } else {
        None
    };
    Ok(ItemTerms {
        ce,
        margin,
        yes,
        label: probe.label(),
    })
}

/// Weighted CE + λ_m·mean hinge + λ_y·(yes-rate − target)², as a tape scalar.
fn batch_loss(tape: &mut Tape, items: &[ItemTerms], cfg: &RecoveryConfig) -> Result<Var> {
    let n = items.len() as f64;
    let mut class_counts: BTreeMap<usize, usize> = BTreeMap::new();
    for it in items {
        *class_counts.entry(it.label).or_insert(0) += 1;
    }
    let n_classes = class_counts.len() as f64;
    let lb = cfg.lambda_balance;

    let mut loss: Option<Var> = None;
    let mut push = |tape: &mut Tape, v: Var| -> Result<()> {
        loss = Some(match loss {
            None => v,
            Some(acc) => tape.add(acc, v)?,
        });
        Ok(())
    };
    for it in items {
        let weight = (1.0 - lb) / n + lb / (n_classes * class_counts[&it.label] as f64);
        let term = tape.scale(it.ce, weight);
        push(tape, term)?;
        if cfg.lambda_margin > 0.0 {
            let neg = tape.scale(it.margin, -1.0);
            let gap = tape.offset(neg, cfg.margin);
            let hinge = tape.relu(gap);
            let term = tape.scale(hinge, cfg.lambda_margin / n);
            push(tape, term)?;
        }
    }
    let yes: Vec<Var> = items.iter().filter_map(|it| it.yes).collect();
    if cfg.lambda_yes > 0.0 && !yes.is_empty() {
        let mut acc = yes[0];
        for &y in &yes[1..] {
            acc = tape.add(acc, y)?;
        }
        let rate = tape.scale(acc, 1.0 / yes.len() as f64);
        let dev = tape.offset(rate, -cfg.yes_rate_target);
        let sq = tape.mul(dev, dev)?;
        let term = tape.scale(sq, cfg.lambda_yes);
        push(tape, term)?;
    }
    Ok(loss.expect("batch is non-empty"))
}

/// Loss of a fixed batch under the recovery objective.
pub fn recovery_loss(
    params: &ToyVlmParams,
    masks: &MaskSet,
    cfg: &RecoveryConfig,
    batch: &[&ProbeInstance],
) -> Result<f64> {
    cfg.validate(params.config.n_blocks)?;
    let frozen = params.config.n_blocks - cfg.last_n_blocks;
    let mut tape = Tape::new();
    let scope = record_scope(&mut tape, params, masks, cfg);
    let mut items = Vec::with_capacity(batch.len());
    for p in batch {
        let prefix = toyvlm::run_prefix(params, Some(masks), &p.tokens, frozen);
        items.push(item_terms(&mut tape, params, &scope, &prefix, p)?);
    }
    let loss = batch_loss(&mut tape, &items, cfg)?;
    Ok(tape.scalar(loss))
}

impl ScopeVars {
    /// Trainable leaves, in [`scoped_tensors_mut`] order.
    fn trainable(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.blocks.iter().flat_map(|b| [b.gate, b.up, b.down]).collect();
        out.extend(self.final_norm_trainable);
        out.extend(self.lm_head_trainable);
        out
    }
}

fn scoped_tensors_mut<'a>(params: &'a mut ToyVlmParams, cfg: &RecoveryConfig) -> Vec<&'a mut Tensor2> {
    let frozen = params.config.n_blocks - cfg.last_n_blocks;
    let mut out: Vec<&mut Tensor2> = params.blocks[frozen..]
        .iter_mut()
        .flat_map(|b| [&mut b.gate, &mut b.up, &mut b.down])
        .collect();
    if cfg.train_final_norm {
        out.push(&mut params.final_norm);
    }
    if cfg.train_lm_head {
        out.push(&mut params.lm_head);
    }
    out
}

fn record_scope(tape: &mut Tape, params: &ToyVlmParams, masks: &MaskSet, cfg: &RecoveryConfig) -> ScopeVars {
    let n_blocks = params.config.n_blocks;
    let frozen = n_blocks - cfg.last_n_blocks;
    let blocks = params.blocks[frozen..]
        .iter()
        .map(|b| BlockVars::record(tape, b, true))
        .collect();
    let keeps = (frozen..n_blocks).map(|b| tape.constant(masks.keep_row(b))).collect();
    let final_norm = leaf(tape, &params.final_norm, cfg.train_final_norm);
    let lm_head = leaf(tape, &params.lm_head, cfg.train_lm_head);
    ScopeVars {
        blocks,
        keeps,
        final_norm,
        lm_head,
        final_norm_trainable: cfg.train_final_norm.then_some(final_norm),
        lm_head_trainable: cfg.train_lm_head.then_some(lm_head),
    }
}

/// Fine-tunes the scoped parameters on `train` probes with `masks` held
/// fixed; metrics are reported on `heldout`.
pub fn recover(
    params: &ToyVlmParams,
    masks: &MaskSet,
    cfg: &RecoveryConfig,
    train: &ProbeSet,
    heldout: &ProbeSet,
) -> Result<(ToyVlmParams, RecoveryReport)> {
    let model_cfg = &params.config;
    cfg.validate(model_cfg.n_blocks)?;
    toyvlm::check_masks(model_cfg, masks)?;
    train.validate(model_cfg)?;
    heldout.validate(model_cfg)?;
    let rob: Vec<&ProbeInstance> = train.by_task(TaskTag::Robustness).collect();
    let util: Vec<&ProbeInstance> = train.by_task(TaskTag::Utility).collect();
    if rob.is_empty() && util.is_empty() {
        bail!(Usage, "no training probes");
    }
    let checksum_before = masks.checksum();
    let pre = evaluate(params, masks, heldout)?;

    let frozen = model_cfg.n_blocks - cfg.last_n_blocks;
    let prefix_of = |set: &[&ProbeInstance]| -> Vec<Tensor2> {
        set.iter()
            .map(|p| toyvlm::run_prefix(params, Some(masks), &p.tokens, frozen))
            .collect()
    };
    let rob_prefix = prefix_of(&rob);
    let util_prefix = prefix_of(&util);

    let mut current = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let scope = record_scope(&mut tape, &current, masks, cfg);
        let mut items = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let pick_rob = util.is_empty() || (!rob.is_empty() && rng.random::<f64>() < cfg.mixture);
            let (set, prefixes) = if pick_rob { (&rob, &rob_prefix) } else { (&util, &util_prefix) };
            let i = rng.random_range(0..set.len());
            items.push(item_terms(&mut tape, &current, &scope, &prefixes[i], set[i])?);
        }
        let loss = batch_loss(&mut tape, &items, cfg)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            bail!(Numeric, "non-finite recovery loss");
        }
        losses.push(value);
        let grads = tape.backward(loss)?;
        let steps: Vec<Tensor2> = scope
            .trainable()
            .iter()
            .map(|&v| grads.get_or_zeros(v, tape.value(v).shape()))
            .collect();
        let norm = libm::sqrt(steps.iter().map(Tensor2::norm_sq).sum::<f64>());
        let rate = -cfg.learning_rate * if norm > cfg.grad_clip { cfg.grad_clip / norm } else { 1.0 };
        for (t, g) in scoped_tensors_mut(&mut current, cfg).into_iter().zip(&steps) {
            t.add_assign_scaled(g, rate);
        }
    }

    let post = evaluate(&current, masks, heldout)?;
    Ok((
        current,
        RecoveryReport {
            pre,
            post,
            losses,
            mask_checksum_before: checksum_before,
            mask_checksum_after: masks.checksum(),
        },
    ))
}
