//! A miniature multimodal decoder: vision tokens occupy the leading
//! positions, language tokens follow. Every block is pre-norm with one causal
//! multi-head attention and a gated MLP `down · (tanh(gate·x) ∘ up·x)`.
//!
//! Weights are stored `out × in`; a linear layer computes `x · Wᵀ`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffmath::{rms_norm_rows, softmax_in_place, Tape, Tensor2, Var};
use crate::error::{bail, Error, Result};
use crate::pruner::MaskSet;

pub const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyVlmConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub n_vision_tokens: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for ToyVlmConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 4,
            n_blocks: 4,
            d_ff: 64,
            vocab_size: 32,
            n_vision_tokens: 8,
            max_seq: 16,
            seed: 0,
        }
    }
}

impl ToyVlmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0
            || self.n_heads == 0
            || self.n_blocks == 0
            || self.d_ff == 0
            || self.vocab_size == 0
            || self.max_seq == 0
        {
            bail!(Config, "model dimensions must be positive: {:?}", self);
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            bail!(
                Config,
                "d_model {} not divisible by n_heads {}",
                self.d_model,
                self.n_heads
            );
        }
        if self.n_vision_tokens >= self.max_seq {
            bail!(
                Config,
                "n_vision_tokens {} must be below max_seq {}",
                self.n_vision_tokens,
                self.max_seq
            );
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let embeddings = (2 * self.vocab_size + self.n_vision_tokens + self.max_seq) * d;
        let block = 2 * d + 4 * d * d + 3 * self.d_ff * d;
        embeddings + self.n_blocks * block + d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub attn_norm: Tensor2,
    pub wq: Tensor2,
    pub wk: Tensor2,
    pub wv: Tensor2,
    pub wo: Tensor2,
    pub mlp_norm: Tensor2,
    /// `d_ff × d_model`
    pub gate: Tensor2,
    /// `d_ff × d_model`
    pub up: Tensor2,
    /// `d_model × d_ff`
    pub down: Tensor2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyVlmParams {
    pub config: ToyVlmConfig,
    pub tok_emb: Tensor2,
    /// Per-slot embedding added at the vision positions.
    pub vis_emb: Tensor2,
    pub pos_emb: Tensor2,
    pub blocks: Vec<BlockParams>,
    pub final_norm: Tensor2,
    pub lm_head: Tensor2,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor2 {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor2::from_vec(rows, cols, data).expect("length matches")
}

/// Seeded parameters; equal seeds give bit-identical weights.
pub fn init_model(cfg: &ToyVlmConfig) -> Result<ToyVlmParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.d_model;
    let lin = |fan_in: usize| 1.0 / libm::sqrt(fan_in as f64);
    let tok_emb = gaussian(&mut rng, cfg.vocab_size, d, 1.0);
    let vis_emb = gaussian(&mut rng, cfg.n_vision_tokens, d, 1.0);
    let pos_emb = gaussian(&mut rng, cfg.max_seq, d, 0.5);
    let blocks = (0..cfg.n_blocks)
        .map(|_| BlockParams {
            attn_norm: Tensor2::ones(1, d),
            wq: gaussian(&mut rng, d, d, lin(d)),
            wk: gaussian(&mut rng, d, d, lin(d)),
            wv: gaussian(&mut rng, d, d, lin(d)),
            wo: gaussian(&mut rng, d, d, lin(d)),
            mlp_norm: Tensor2::ones(1, d),
            gate: gaussian(&mut rng, cfg.d_ff, d, lin(d)),
            up: gaussian(&mut rng, cfg.d_ff, d, lin(d)),
            down: gaussian(&mut rng, d, cfg.d_ff, lin(cfg.d_ff)),
        })
        .collect();
    let lm_head = gaussian(&mut rng, cfg.vocab_size, d, lin(d));
    Ok(ToyVlmParams {
        config: *cfg,
        tok_emb,
        vis_emb,
        pos_emb,
        blocks,
        final_norm: Tensor2::ones(1, d),
        lm_head,
    })
}

impl ToyVlmParams {
    /// Named arrays in a fixed order, used by checkpoint writers.
    pub fn named_arrays(&self) -> Vec<(String, &Tensor2)> {
        let mut out: Vec<(String, &Tensor2)> = Vec::new();
        out.push(("tok_emb".into(), &self.tok_emb));
        out.push(("vis_emb".into(), &self.vis_emb));
        out.push(("pos_emb".into(), &self.pos_emb));
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in [
                ("attn_norm", &b.attn_norm),
                ("wq", &b.wq),
                ("wk", &b.wk),
                ("wv", &b.wv),
                ("wo", &b.wo),
                ("mlp_norm", &b.mlp_norm),
                ("gate", &b.gate),
                ("up", &b.up),
                ("down", &b.down),
            ] {
                out.push((format!("blocks.{}.{}", i, name), t));
            }
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("lm_head".into(), &self.lm_head));
        out
    }

    /// Rebuilds parameters from named arrays, checking every shape.
    pub fn from_named_arrays(
        config: ToyVlmConfig,
        mut lookup: impl FnMut(&str) -> Option<Tensor2>,
    ) -> Result<Self> {
        config.validate()?;
        let mut take = |name: &str, shape: (usize, usize)| -> Result<Tensor2> {
            let t = lookup(name).ok_or_else(|| Error::Input(format!("missing array {}", name)))?;
            if t.shape() != shape {
                bail!(
                    Dimension,
                    "array {} has shape {:?}, expected {:?}",
                    name,
                    t.shape(),
                    shape
                );
            }
            Ok(t)
        };
        let d = config.d_model;
        let tok_emb = take("tok_emb", (config.vocab_size, d))?;
        let vis_emb = take("vis_emb", (config.n_vision_tokens, d))?;
        let pos_emb = take("pos_emb", (config.max_seq, d))?;
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for i in 0..config.n_blocks {
            let mut g = |n: &str, s| take(&format!("blocks.{}.{}", i, n), s);
            blocks.push(BlockParams {
                attn_norm: g("attn_norm", (1, d))?,
                wq: g("wq", (d, d))?,
                wk: g("wk", (d, d))?,
                wv: g("wv", (d, d))?,
                wo: g("wo", (d, d))?,
                mlp_norm: g("mlp_norm", (1, d))?,
                gate: g("gate", (config.d_ff, d))?,
                up: g("up", (config.d_ff, d))?,
                down: g("down", (d, config.d_ff))?,
            });
        }
        let final_norm = take("final_norm", (1, d))?;
        let lm_head = take("lm_head", (config.vocab_size, d))?;
        Ok(Self {
            config,
            tok_emb,
            vis_emb,
            pos_emb,
            blocks,
            final_norm,
            lm_head,
        })
    }

    pub fn param_count(&self) -> usize {
        self.named_arrays()
            .iter()
            .map(|(_, t)| t.data().len())
            .sum()
    }
}

/// Activations captured during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `seq × vocab`
    pub logits: Tensor2,
    /// `[block][head]`, each `n_language × n_vision`: the language-row,
    /// vision-column slice of the softmax attention matrix.
    pub attention: Vec<Vec<Tensor2>>,
    /// Per block, the normalized `seq × d_model` input to the MLP.
    pub mlp_inputs: Vec<Tensor2>,
}

pub(crate) fn check_tokens(cfg: &ToyVlmConfig, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() || tokens.len() > cfg.max_seq {
        bail!(
            Input,
            "sequence length {} outside 1..={}",
            tokens.len(),
            cfg.max_seq
        );
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        bail!(Input, "token id {} outside vocabulary of {}", t, cfg.vocab_size);
    }
    Ok(())
}

pub(crate) fn check_masks(cfg: &ToyVlmConfig, masks: &MaskSet) -> Result<()> {
    if masks.n_blocks() != cfg.n_blocks || masks.blocks().iter().any(|m| m.len() != cfg.d_ff) {
        bail!(
            Usage,
            "mask set does not match {} blocks of {} neurons",
            cfg.n_blocks,
            cfg.d_ff
        );
    }
    Ok(())
}

/// Token + position (+ vision slot) embeddings, `seq × d_model`.
pub fn embed(params: &ToyVlmParams, tokens: &[usize]) -> Tensor2 {
    let cfg = &params.config;
    let mut x = Tensor2::zeros(tokens.len(), cfg.d_model);
    for (p, &tok) in tokens.iter().enumerate() {
        let row = x.row_mut(p);
        for (j, v) in row.iter_mut().enumerate() {
            *v = params.tok_emb.get(tok, j) + params.pos_emb.get(p, j);
            if p < cfg.n_vision_tokens {
                *v += params.vis_emb.get(p, j);
            }
        }
    }
    x
}

fn scale_rows_by(x: &mut Tensor2, weight: &Tensor2) {
    for i in 0..x.rows() {
        for (v, w) in x.row_mut(i).iter_mut().zip(weight.data()) {
            *v *= w;
        }
    }
}

pub(crate) fn causal_scores(q: &Tensor2, k: &Tensor2, scale: f64) -> Tensor2 {
    let n = q.rows();
    let mut s = q.matmul_t(k).expect("head shapes agree").scale(scale);
    for i in 0..n {
        for j in (i + 1)..n {
            s.set(i, j, f64::NEG_INFINITY);
        }
    }
    s
}

/// Output of one block's attention sublayer.
pub(crate) struct AttentionOut {
    pub residual: Tensor2,
    pub probs: Vec<Tensor2>,
}

pub(crate) fn attention_sublayer(cfg: &ToyVlmConfig, block: &BlockParams, x: &Tensor2) -> AttentionOut {
    let mut a = rms_norm_rows(x, NORM_EPS);
    scale_rows_by(&mut a, &block.attn_norm);
    let q = a.matmul_t(&block.wq).expect("shape");
    let k = a.matmul_t(&block.wk).expect("shape");
    let v = a.matmul_t(&block.wv).expect("shape");
    let dh = cfg.head_dim();
    let scale = 1.0 / libm::sqrt(dh as f64);
    let n = x.rows();
    let mut concat = Tensor2::zeros(n, cfg.d_model);
    let mut probs = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = q.slice_cols(h * dh, dh);
        let kh = k.slice_cols(h * dh, dh);
        let vh = v.slice_cols(h * dh, dh);
        let mut p = causal_scores(&qh, &kh, scale);
        for i in 0..n {
            softmax_in_place(p.row_mut(i));
        }
        let out = p.matmul(&vh).expect("shape");
        for i in 0..n {
            concat.row_mut(i)[h * dh..(h + 1) * dh].copy_from_slice(out.row(i));
        }
        probs.push(p);
    }
    let o = concat.matmul_t(&block.wo).expect("shape");
    AttentionOut {
        residual: x.add(&o).expect("shape"),
        probs,
    }
}

/// Gated MLP with an optional keep-mask over intermediate neurons.
pub(crate) fn mlp(block: &BlockParams, m: &Tensor2, keep: Option<&[bool]>) -> Tensor2 {
    let g = m.matmul_t(&block.gate).expect("shape");
    let u = m.matmul_t(&block.up).expect("shape");
    let mut h = g.zip_map(&u, |a, b| libm::tanh(a) * b).expect("shape");
    if let Some(keep) = keep {
        for i in 0..h.rows() {
            for (v, &k) in h.row_mut(i).iter_mut().zip(keep) {
                if !k {
                    *v = 0.0;
                }
            }
        }
    }
    h.matmul_t(&block.down).expect("shape")
}

pub(crate) fn mlp_input(block: &BlockParams, x: &Tensor2) -> Tensor2 {
    let mut m = rms_norm_rows(x, NORM_EPS);
    scale_rows_by(&mut m, &block.mlp_norm);
    m
}

/// Runs the first `n_blocks` blocks and returns the residual stream.
pub(crate) fn run_prefix(
    params: &ToyVlmParams,
    masks: Option<&MaskSet>,
    tokens: &[usize],
    n_blocks: usize,
) -> Tensor2 {
    let mut x = embed(params, tokens);
    for (b, block) in params.blocks.iter().take(n_blocks).enumerate() {
        let att = attention_sublayer(&params.config, block, &x);
        let m = mlp_input(block, &att.residual);
        let out = mlp(block, &m, masks.map(|ms| ms.block(b)));
        x = att.residual.add(&out).expect("shape");
    }
    x
}

pub(crate) fn lm_logits(params: &ToyVlmParams, x: &Tensor2) -> Tensor2 {
    let mut f = rms_norm_rows(x, NORM_EPS);
    scale_rows_by(&mut f, &params.final_norm);
    f.matmul_t(&params.lm_head).expect("shape")
}

/// Full forward pass under optional neuron masks (`None` = unmasked).
pub fn forward(
    params: &ToyVlmParams,
    masks: Option<&MaskSet>,
    tokens: &[usize],
) -> Result<ForwardTrace> {
    let cfg = &params.config;
    check_tokens(cfg, tokens)?;
    if let Some(m) = masks {
        check_masks(cfg, m)?;
    }
    let n = tokens.len();
    let n_vis = cfg.n_vision_tokens.min(n);
    let mut x = embed(params, tokens);
    let mut attention = Vec::with_capacity(cfg.n_blocks);
    let mut mlp_inputs = Vec::with_capacity(cfg.n_blocks);
    for (b, block) in params.blocks.iter().enumerate() {
        let att = attention_sublayer(cfg, block, &x);
        attention.push(
            att.probs
                .iter()
                .map(|p| p.slice_rows(n_vis, n - n_vis).slice_cols(0, n_vis))
                .collect(),
        );
        let m = mlp_input(block, &att.residual);
        let out = mlp(block, &m, masks.map(|ms| ms.block(b)));
        mlp_inputs.push(m);
        x = att.residual.add(&out).expect("shape");
    }
    let logits = lm_logits(params, &x);
    Ok(ForwardTrace {
        logits,
        attention,
        mlp_inputs,
    })
}

/// Logits at a single position without collecting the trace.
pub fn logits_at(
    params: &ToyVlmParams,
    masks: Option<&MaskSet>,
    tokens: &[usize],
    position: usize,
) -> Result<Vec<f64>> {
    check_tokens(&params.config, tokens)?;
    if let Some(m) = masks {
        check_masks(&params.config, m)?;
    }
    if position >= tokens.len() {
        bail!(Input, "position {} outside sequence of {}", position, tokens.len());
    }
    let x = run_prefix(params, masks, tokens, params.config.n_blocks);
    let row = x.slice_rows(position, 1);
    Ok(lm_logits(params, &row).into_vec())
}

/// Softmax of the logits at `answer_position`.
pub fn answer_distribution(trace: &ForwardTrace, answer_position: usize) -> Result<Vec<f64>> {
    if answer_position >= trace.logits.rows() {
        bail!(
            Input,
            "answer position {} outside sequence of {}",
            answer_position,
            trace.logits.rows()
        );
    }
    Ok(softmax(trace.logits.row(answer_position)))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    p
}

/// Tape handles for one block's weights.
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub mlp_norm: Var,
    pub gate: Var,
    pub up: Var,
    pub down: Var,
}

impl BlockVars {
    /// Records `block` on the tape; only MLP projections become trainable
    /// when `train_mlp` is set.
    pub fn record(tape: &mut Tape, block: &BlockParams, train_mlp: bool) -> Self {
        let mlp_leaf = |t: &Tensor2, tape: &mut Tape| {
            if train_mlp {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let gate = mlp_leaf(&block.gate, tape);
        let up = mlp_leaf(&block.up, tape);
        let down = mlp_leaf(&block.down, tape);
        Self {
            attn_norm: tape.constant(block.attn_norm.clone()),
            wq: tape.constant(block.wq.clone()),
            wk: tape.constant(block.wk.clone()),
            wv: tape.constant(block.wv.clone()),
            wo: tape.constant(block.wo.clone()),
            mlp_norm: tape.constant(block.mlp_norm.clone()),
            gate,
            up,
            down,
        }
    }
}

/// Differentiable version of one block. `keep` is a `1 × d_ff` constant
/// row of 0/1 that is multiplied into the intermediate activations.
pub fn block_forward_taped(
    tape: &mut Tape,
    cfg: &ToyVlmConfig,
    vars: &BlockVars,
    keep: Var,
    x: Var,
) -> Result<Var> {
    let n = tape.value(x).rows();
    let a = tape.rms_norm_rows(x, NORM_EPS);
    let a = tape.mul_row(a, vars.attn_norm)?;
    let q = tape.matmul_t(a, vars.wq)?;
    let k = tape.matmul_t(a, vars.wk)?;
    let v = tape.matmul_t(a, vars.wv)?;
    let dh = cfg.head_dim();
    let scale = 1.0 / libm::sqrt(dh as f64);
    let mut mask = Tensor2::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            mask.set(i, j, f64::NEG_INFINITY);
        }
    }
    let mask = tape.constant(mask);
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let s = tape.matmul_t(qh, kh)?;
        let s = tape.scale(s, scale);
        let s = tape.add(s, mask)?;
        let p = tape.softmax_rows(s);
        heads.push(tape.matmul(p, vh)?);
    }
    let concat = tape.concat_cols(&heads)?;
    let o = tape.matmul_t(concat, vars.wo)?;
    let h1 = tape.add(x, o)?;
    let m = tape.rms_norm_rows(h1, NORM_EPS);
    let m = tape.mul_row(m, vars.mlp_norm)?;
    let g = tape.matmul_t(m, vars.gate)?;
    let g = tape.tanh(g);
    let u = tape.matmul_t(m, vars.up)?;
    let hid = tape.mul(g, u)?;
    let hid = tape.mul_row(hid, keep)?;
    let out = tape.matmul_t(hid, vars.down)?;
    tape.add(h1, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_param_count_is_closed_form() {
        // (2·32 + 8 + 16)·32 embeddings/head + 4·(2·32 + 4·32² + 3·64·32) + 32
        let expected = 88 * 32 + 4 * (64 + 4096 + 6144) + 32;
        assert_eq!(expected, 44_064);
        let cfg = ToyVlmConfig::default();
        assert_eq!(cfg.param_count(), expected);
        assert_eq!(init_model(&cfg).unwrap().param_count(), expected);
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = ToyVlmConfig::default();
        assert_eq!(init_model(&cfg).unwrap(), init_model(&cfg).unwrap());
        let other = ToyVlmConfig { seed: 2, ..cfg };
        let a = init_model(&ToyVlmConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a, init_model(&other).unwrap());
    }

    #[test]
    fn invalid_configs_rejected() {
        let base = ToyVlmConfig::default();
        assert!(init_model(&ToyVlmConfig { n_heads: 5, ..base }).is_err());
        assert!(init_model(&ToyVlmConfig { n_vision_tokens: 16, ..base }).is_err());
        assert!(init_model(&ToyVlmConfig { d_ff: 0, ..base }).is_err());
    }

    #[test]
    fn out_of_vocab_token_rejected() {
        let p = init_model(&ToyVlmConfig::default()).unwrap();
        assert!(matches!(forward(&p, None, &[0, 1, 32]), Err(Error::Input(_))));
        assert!(forward(&p, None, &[0; 17]).is_err());
    }

    #[test]
    fn full_mask_is_bit_identical() {
        let p = init_model(&ToyVlmConfig::default()).unwrap();
        let tokens: Vec<usize> = (0..16).map(|i| (i * 7) % 32).collect();
        let full = MaskSet::full(4, 64);
        let a = forward(&p, None, &tokens).unwrap();
        let b = forward(&p, Some(&full), &tokens).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_masks_equal_attention_only_model() {
        let p = init_model(&ToyVlmConfig::default()).unwrap();
        let tokens: Vec<usize> = (0..16).map(|i| (i * 5 + 3) % 32).collect();
        let zero = MaskSet::empty(4, 64);
        let masked = forward(&p, Some(&zero), &tokens).unwrap();
        let mut attn_only = p.clone();
        for b in &mut attn_only.blocks {
            b.down = Tensor2::zeros(32, 64);
        }
        let reference = forward(&attn_only, None, &tokens).unwrap();
        assert_eq!(masked.logits, reference.logits);
    }

    #[test]
    fn attention_rows_are_sub_stochastic() {
        let p = init_model(&ToyVlmConfig::default()).unwrap();
        let tokens: Vec<usize> = (0..16).map(|i| (i * 11 + 1) % 32).collect();
        let t = forward(&p, None, &tokens).unwrap();
        assert_eq!(t.attention.len(), 4);
        for block in &t.attention {
            assert_eq!(block.len(), 4);
            for head in block {
                assert_eq!(head.shape(), (8, 8));
                for r in 0..head.rows() {
                    let s: f64 = head.row(r).iter().sum();
                    assert!((0.0..=1.0 + 1e-12).contains(&s));
                }
            }
        }
        assert!(t.logits.is_finite());
    }

    #[test]
    fn answer_distribution_properties() {
        let uniform = ForwardTrace {
            logits: Tensor2::zeros(2, 4),
            attention: Vec::new(),
            mlp_inputs: Vec::new(),
        };
        let p = answer_distribution(&uniform, 1).unwrap();
        assert!(p.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        assert!(answer_distribution(&uniform, 2).is_err());

        let logits = [0.3, -1.2, 2.0, 0.7];
        let shifted: Vec<f64> = logits.iter().map(|x| x + 17.5).collect();
        let a = softmax(&logits);
        let b = softmax(&shifted);
        let z: f64 = logits.iter().map(|x| libm::exp(*x)).sum();
        for i in 0..4 {
            assert!((a[i] - b[i]).abs() < 1e-15);
            assert!((a[i] - libm::exp(logits[i]) / z).abs() < 1e-15);
        }
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn logits_at_matches_trace_row() {
        let p = init_model(&ToyVlmConfig::default()).unwrap();
        let tokens: Vec<usize> = (0..14).map(|i| (i * 3 + 2) % 32).collect();
        let t = forward(&p, None, &tokens).unwrap();
        let row = logits_at(&p, None, &tokens, 13).unwrap();
        for (a, b) in row.iter().zip(t.logits.row(13)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn taped_blocks_match_plain_forward() {
        let cfg = ToyVlmConfig::default();
        let p = init_model(&cfg).unwrap();
        let tokens: Vec<usize> = (0..16).map(|i| (i * 9 + 4) % 32).collect();
        let mut masks = MaskSet::full(4, 64);
        masks.block_mut(3)[5] = false;
        masks.block_mut(2)[17] = false;
        let plain = forward(&p, Some(&masks), &tokens).unwrap();

        let mut tape = Tape::new();
        let x0 = run_prefix(&p, Some(&masks), &tokens, 2);
        let mut x = tape.constant(x0);
        for b in 2..4 {
            let vars = BlockVars::record(&mut tape, &p.blocks[b], true);
            let keep = tape.constant(masks.keep_row(b));
            x = block_forward_taped(&mut tape, &cfg, &vars, keep, x).unwrap();
        }
        let logits = lm_logits(&p, tape.value(x));
        for (a, b) in logits.data().iter().zip(plain.logits.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
