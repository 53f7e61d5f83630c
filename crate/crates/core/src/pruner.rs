//! Structured row pruning of MLP neurons: Wanda-style scores, nested
//! lowest-score masks, and a non-destructive masked view of the model.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::diffmath::Tensor2;
use crate::error::{bail, Result};
use crate::toyvlm::{self, ForwardTrace, ToyVlmParams};

/// Number of rows removed from a layer of `width` at `ratio`, rounding half
/// to even.
pub fn pruned_rows(ratio: f64, width: usize) -> usize {
    let r = ratio.clamp(0.0, 1.0);
    (libm::rint(r * width as f64) as usize).min(width)
}

/// Per-block keep-masks over intermediate MLP neurons (`true` = kept).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSet {
    blocks: Vec<Vec<bool>>,
}

impl MaskSet {
    pub fn full(n_blocks: usize, width: usize) -> Self {
        Self {
            blocks: vec![vec![true; width]; n_blocks],
        }
    }

    pub fn empty(n_blocks: usize, width: usize) -> Self {
        Self {
            blocks: vec![vec![false; width]; n_blocks],
        }
    }

    pub fn from_blocks(blocks: Vec<Vec<bool>>) -> Self {
        Self { blocks }
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[Vec<bool>] {
        &self.blocks
    }

    pub fn block(&self, b: usize) -> &[bool] {
        &self.blocks[b]
    }

    pub fn block_mut(&mut self, b: usize) -> &mut [bool] {
        &mut self.blocks[b]
    }

    /// `1 × width` row of 1.0/0.0.
    pub fn keep_row(&self, b: usize) -> Tensor2 {
        let row: Vec<f64> = self.blocks[b]
            .iter()
            .map(|&k| if k { 1.0 } else { 0.0 })
            .collect();
        Tensor2::row_vector(&row)
    }

    pub fn zeroed_indices(&self, b: usize) -> Vec<usize> {
        self.blocks[b]
            .iter()
            .enumerate()
            .filter(|(_, &k)| !k)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn zero_count(&self, b: usize) -> usize {
        self.blocks[b].iter().filter(|&&k| !k).count()
    }

    pub fn total_zeros(&self) -> usize {
        (0..self.blocks.len()).map(|b| self.zero_count(b)).sum()
    }

    pub fn total_neurons(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }

    /// Zeroed neurons over all neurons.
    pub fn sparsity(&self) -> f64 {
        let total = self.total_neurons();
        if total == 0 {
            0.0
        } else {
            self.total_zeros() as f64 / total as f64
        }
    }

    /// FNV-1a over block lengths and mask bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for block in &self.blocks {
            for b in (block.len() as u64).to_le_bytes() {
                feed(b);
            }
            for &k in block {
                feed(k as u8);
            }
        }
        h
    }
}

/// Per-block importance of every intermediate neuron.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowScoreTable {
    pub scores: Vec<Vec<f64>>,
}

/// `(‖gate_i‖₁ + ‖up_i‖₁) · RMS(x_ℓ)` for every neuron `i` of block `ℓ`.
pub fn score_rows(params: &ToyVlmParams, act_rms: &[f64]) -> Result<RowScoreTable> {
    if act_rms.len() != params.blocks.len() {
        bail!(
            Usage,
            "{} activation RMS values for {} blocks",
            act_rms.len(),
            params.blocks.len()
        );
    }
    let scores = params
        .blocks
        .iter()
        .zip(act_rms)
        .map(|(block, &rms)| {
            (0..block.gate.rows())
                .map(|i| {
                    let l1 = |t: &Tensor2| t.row(i).iter().map(|w| w.abs()).sum::<f64>();
                    (l1(&block.gate) + l1(&block.up)) * rms
                })
                .collect()
        })
        .collect();
    Ok(RowScoreTable { scores })
}

/// Zeroes the `round(r_ℓ · width)` lowest-scoring neurons of each block;
/// ties prune the lower index first.
pub fn build_masks(scores: &RowScoreTable, ratios: &[f64]) -> Result<MaskSet> {
    if ratios.len() != scores.scores.len() {
        bail!(
            Usage,
            "plan has {} ratios for {} scored blocks",
            ratios.len(),
            scores.scores.len()
        );
    }
    let blocks = scores
        .scores
        .iter()
        .zip(ratios)
        .map(|(row, &r)| {
            let k = pruned_rows(r, row.len());
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
            let mut keep = vec![true; row.len()];
            for &i in order.iter().take(k) {
                keep[i] = false;
            }
            keep
        })
        .collect();
    Ok(MaskSet { blocks })
}

/// Read-only pairing of base weights and masks; the base is never mutated.
#[derive(Debug, Clone, Copy)]
pub struct MaskedModel<'a> {
    params: &'a ToyVlmParams,
    masks: &'a MaskSet,
}

pub fn apply_plan<'a>(params: &'a ToyVlmParams, masks: &'a MaskSet) -> Result<MaskedModel<'a>> {
    toyvlm::check_masks(&params.config, masks)?;
    Ok(MaskedModel { params, masks })
}

impl<'a> MaskedModel<'a> {
    pub fn params(&self) -> &'a ToyVlmParams {
        self.params
    }

    pub fn masks(&self) -> &'a MaskSet {
        self.masks
    }

    pub fn forward(&self, tokens: &[usize]) -> Result<ForwardTrace> {
        toyvlm::forward(self.params, Some(self.masks), tokens)
    }

    pub fn logits_at(&self, tokens: &[usize], position: usize) -> Result<Vec<f64>> {
        toyvlm::logits_at(self.params, Some(self.masks), tokens, position)
    }

    /// Copy of the weights with masked gate/up rows and down columns zeroed.
    pub fn materialize(&self) -> ToyVlmParams {
        let mut out = self.params.clone();
        for (b, block) in out.blocks.iter_mut().enumerate() {
            for j in self.masks.zeroed_indices(b) {
                block.gate.row_mut(j).iter_mut().for_each(|w| *w = 0.0);
                block.up.row_mut(j).iter_mut().for_each(|w| *w = 0.0);
                for o in 0..block.down.rows() {
                    block.down.set(o, j, 0.0);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyvlm::{init_model, ToyVlmConfig};

    #[test]
    fn score_is_l1_times_rms() {
        let mut p = init_model(&ToyVlmConfig {
            d_model: 2,
            n_heads: 1,
            n_blocks: 1,
            d_ff: 1,
            vocab_size: 4,
            n_vision_tokens: 1,
            max_seq: 3,
            seed: 0,
        })
        .unwrap();
        p.blocks[0].gate = Tensor2::from_rows(&[&[1.0, -2.0]]).unwrap();
        p.blocks[0].up = Tensor2::zeros(1, 2);
        let s = score_rows(&p, &[3.0]).unwrap();
        assert_eq!(s.scores[0][0], 9.0);
    }

    #[test]
    fn doubling_rms_doubles_scores() {
        let p = init_model(&ToyVlmConfig::default()).unwrap();
        let a = score_rows(&p, &[1.0, 2.0, 0.5, 1.5]).unwrap();
        let b = score_rows(&p, &[1.0, 4.0, 0.5, 1.5]).unwrap();
        for (x, y) in a.scores[1].iter().zip(&b.scores[1]) {
            assert_eq!(2.0 * x, *y);
        }
        assert_eq!(a.scores[0], b.scores[0]);
        assert!(a.scores.iter().flatten().all(|&s| s >= 0.0));
    }

    #[test]
    fn extreme_ratios() {
        let table = RowScoreTable {
            scores: vec![vec![0.5, 0.1, 0.3, 0.2]],
        };
        assert_eq!(build_masks(&table, &[0.0]).unwrap(), MaskSet::full(1, 4));
        assert_eq!(build_masks(&table, &[1.0]).unwrap(), MaskSet::empty(1, 4));
    }

    #[test]
    fn quarter_prunes_two_smallest() {
        let table = RowScoreTable {
            scores: vec![vec![0.9, 0.05, 0.7, 0.6, 0.01, 0.8, 0.3, 0.4]],
        };
        let m = build_masks(&table, &[0.25]).unwrap();
        assert_eq!(m.zeroed_indices(0), vec![1, 4]);
    }

    #[test]
    fn ties_prune_lower_index_first() {
        let table = RowScoreTable {
            scores: vec![vec![1.0, 1.0, 1.0, 1.0]],
        };
        let m = build_masks(&table, &[0.5]).unwrap();
        assert_eq!(m.zeroed_indices(0), vec![0, 1]);
    }

    #[test]
    fn rounding_is_half_to_even() {
        assert_eq!(pruned_rows(0.25, 2), 0); // 0.5 → 0
        assert_eq!(pruned_rows(0.75, 2), 2); // 1.5 → 2
        assert_eq!(pruned_rows(2.5 / 64.0, 64), 2);
        assert_eq!(pruned_rows(1.7, 8), 8);
    }

    #[test]
    fn length_mismatch_is_usage_error() {
        let table = RowScoreTable {
            scores: vec![vec![1.0]; 2],
        };
        assert!(build_masks(&table, &[0.1]).is_err());
    }

    #[test]
    fn materialize_is_idempotent_and_leaves_base_untouched() {
        let p = init_model(&ToyVlmConfig::default()).unwrap();
        let base = p.clone();
        let scores = score_rows(&p, &[1.0; 4]).unwrap();
        let masks = build_masks(&scores, &[0.1, 0.3, 0.5, 0.7]).unwrap();
        let once = apply_plan(&p, &masks).unwrap().materialize();
        let twice = apply_plan(&once, &masks).unwrap().materialize();
        assert_eq!(once, twice);
        assert_eq!(p, base);
        // materialized weights give the same logits as the overlay
        let tokens: Vec<usize> = (0..16).map(|i| (i * 13) % 32).collect();
        let view = apply_plan(&p, &masks).unwrap().forward(&tokens).unwrap();
        let dense = toyvlm::forward(&once, None, &tokens).unwrap();
        for (a, b) in view.logits.data().iter().zip(dense.logits.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn checksum_tracks_bits() {
        let a = MaskSet::full(2, 8);
        let mut b = a.clone();
        assert_eq!(a.checksum(), b.checksum());
        b.block_mut(1)[3] = false;
        assert_ne!(a.checksum(), b.checksum());
    }
}
