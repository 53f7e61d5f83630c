//! JSON artifact formats: plans, mask manifests and calibration profiles.

use std::collections::BTreeMap;
use std::path::Path;

use planforge_core::calib::{CalibrationProfile, FEATURE_LAYOUT_VERSION};
use planforge_core::policy::{realized_sparsity, PruningPlan};
use planforge_core::pruner::MaskSet;
use planforge_core::toyvlm::ToyVlmConfig;
use planforge_core::Preference;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::io::{read_json, to_json_bytes, write_bytes};

pub const PLAN_FORMAT_VERSION: u32 = 1;

pub fn layer_id(block: usize) -> String {
    format!("blocks.{}.mlp", block)
}

/// On-disk pruning plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanFile {
    pub version: u32,
    pub layer_ids: Vec<String>,
    pub ratios: Vec<f64>,
    pub target_sparsity: f64,
    pub realized_sparsity: f64,
    pub preference: Preference,
    pub saturated_layers: Vec<usize>,
}

impl PlanFile {
    pub fn from_plan(plan: &PruningPlan) -> Self {
        Self {
            version: PLAN_FORMAT_VERSION,
            layer_ids: (0..plan.n_layers()).map(layer_id).collect(),
            ratios: plan.ratios.clone(),
            target_sparsity: plan.target_sparsity,
            realized_sparsity: plan.realized_sparsity,
            preference: plan.preference,
            saturated_layers: plan.saturated_layers.clone(),
        }
    }

    /// Checks the file against a model with `widths` and returns the plan.
    pub fn to_plan(&self, widths: &[usize]) -> CliResult<PruningPlan> {
        let bad = |d: String| CliError::format("plan file", d);
        if self.version != PLAN_FORMAT_VERSION {
            return Err(bad(format!("unsupported version {}", self.version)));
        }
        if self.ratios.len() != widths.len() || self.layer_ids.len() != widths.len() {
            return Err(bad(format!(
                "plan covers {} layers, model has {}",
                self.ratios.len(),
                widths.len()
            )));
        }
        if let Some((i, _)) = self.layer_ids.iter().enumerate().find(|(i, id)| **id != layer_id(*i)) {
            return Err(bad(format!("unexpected layer id at position {}", i)));
        }
        if self.ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(bad("ratios must lie in [0, 1]".into()));
        }
        let realized = realized_sparsity(&self.ratios, widths);
        if realized.to_bits() != self.realized_sparsity.to_bits() {
            return Err(bad(format!(
                "realized sparsity {} disagrees with ratios ({})",
                self.realized_sparsity, realized
            )));
        }
        Ok(PruningPlan {
            ratios: self.ratios.clone(),
            target_sparsity: self.target_sparsity,
            realized_sparsity: self.realized_sparsity,
            preference: self.preference,
            saturated_layers: self.saturated_layers.clone(),
        })
    }

    pub fn to_bytes(&self) -> CliResult<Vec<u8>> {
        to_json_bytes(self)
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        write_bytes(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        if !path.exists() {
            return Err(CliError::MissingArtifact {
                what: "plan file",
                path: path.into(),
            });
        }
        read_json(path)
    }
}

/// Zeroed neuron indices per block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskFile {
    pub width: usize,
    pub zeroed: BTreeMap<usize, Vec<usize>>,
    pub checksum: u64,
}

impl MaskFile {
    pub fn from_masks(masks: &MaskSet) -> Self {
        let width = masks.blocks().first().map_or(0, Vec::len);
        Self {
            width,
            zeroed: (0..masks.n_blocks()).map(|b| (b, masks.zeroed_indices(b))).collect(),
            checksum: masks.checksum(),
        }
    }

    pub fn to_masks(&self, n_blocks: usize) -> CliResult<MaskSet> {
        let bad = |d: String| CliError::format("mask file", d);
        if self.zeroed.len() != n_blocks || self.zeroed.keys().copied().ne(0..n_blocks) {
            return Err(bad(format!("expected blocks 0..{}", n_blocks)));
        }
        let mut masks = MaskSet::full(n_blocks, self.width);
        for (&b, idx) in &self.zeroed {
            let row = masks.block_mut(b);
            for &i in idx {
                match row.get_mut(i) {
                    Some(k) if *k => *k = false,
                    Some(_) => return Err(bad(format!("block {} lists neuron {} twice", b, i))),
                    None => return Err(bad(format!("block {} neuron {} out of range", b, i))),
                }
            }
        }
        if masks.checksum() != self.checksum {
            return Err(bad("checksum mismatch".into()));
        }
        Ok(masks)
    }
}

/// Calibration statistics for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationFile {
    pub feature_layout_version: u32,
    pub model: ToyVlmConfig,
    pub batch_size: usize,
    pub seed: u64,
    pub profile: CalibrationProfile,
}

impl CalibrationFile {
    /// Loads a calibration artifact; a missing file is its own error.
    pub fn load(path: &Path) -> CliResult<Self> {
        if !path.exists() {
            return Err(CliError::CalibrationMissing(path.into()));
        }
        let file: Self = read_json(path)?;
        if file.feature_layout_version != FEATURE_LAYOUT_VERSION {
            return Err(CliError::LayoutVersion {
                found: file.feature_layout_version,
                expected: FEATURE_LAYOUT_VERSION,
            });
        }
        Ok(file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use planforge_core::policy::{map_plan, PlanMapperConfig};

    #[test]
    fn plan_bytes_survive_round_trip() {
        let plan = map_plan(
            0.37,
            &[0.1, 0.2, 0.3, 0.4],
            &PlanMapperConfig::default(),
            &[64; 4],
            Preference([0.2, 0.3, 0.5]),
        )
        .unwrap();
        let bytes = PlanFile::from_plan(&plan).to_bytes().unwrap();
        let back: PlanFile = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.to_plan(&[64; 4]).unwrap(), plan);
    }

    #[test]
    fn plan_for_other_model_rejected() {
        let plan = PruningPlan::from_ratios(vec![0.3, 0.3], &[8, 8], 0.3, Preference::uniform()).unwrap();
        let file = PlanFile::from_plan(&plan);
        assert!(file.to_plan(&[8, 8, 8]).is_err());
        assert!(file.to_plan(&[16, 16]).is_err());
    }

    #[test]
    fn mask_file_round_trip() {
        let mut m = MaskSet::full(2, 5);
        m.block_mut(0)[3] = false;
        m.block_mut(1)[0] = false;
        m.block_mut(1)[4] = false;
        let f = MaskFile::from_masks(&m);
        assert_eq!(f.zeroed[&1], vec![0, 4]);
        let json = serde_json::to_string(&f).unwrap();
        let back: MaskFile = serde_json::from_str(&json).unwrap();
        assert_eq!(back.to_masks(2).unwrap(), m);
        let mut tampered = back.clone();
        tampered.zeroed.get_mut(&0).unwrap().push(3);
        assert!(tampered.to_masks(2).is_err());
    }
}
