//! Named-array checkpoint container.
//!
//! Layout: the 8-byte magic `PLNFRG01`, a little-endian `u64` header
//! length, a JSON header `{arrays: [{name, shape, offset}], meta}`, then
//! every array as little-endian `f64` values. Offsets count bytes from the
//! start of the data section. Values are stored bit for bit, so a round
//! trip is exact.
//!
//! Policy checkpoints carry a JSON sidecar next to the container holding
//! the feature layout version and the plan mapper settings.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use planforge_core::calib::FEATURE_LAYOUT_VERSION;
use planforge_core::diffmath::Tensor2;
use planforge_core::policy::{PlanMapperConfig, PolicyConfig, PolicyParams};
use planforge_core::toyvlm::{ToyVlmConfig, ToyVlmParams};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};
use crate::io::{read_bytes, read_json, write_bytes, write_json};

pub const MAGIC: &[u8; 8] = b"PLNFRG01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub arrays: Vec<ArrayEntry>,
    pub meta: Value,
}

/// Decoded container contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub arrays: BTreeMap<String, Tensor2>,
    pub order: Vec<String>,
    pub meta: Value,
}

pub fn encode(arrays: &[(String, &Tensor2)], meta: &Value) -> CliResult<Vec<u8>> {
    let mut entries = Vec::with_capacity(arrays.len());
    let mut offset = 0u64;
    for (name, t) in arrays {
        entries.push(ArrayEntry {
            name: name.clone(),
            shape: [t.rows(), t.cols()],
            offset,
        });
        offset += 8 * t.data().len() as u64;
    }
    let header = serde_json::to_vec(&Header {
        arrays: entries,
        meta: meta.clone(),
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in arrays {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> CliResult<Container> {
    let bad = |d: &str| CliError::format("checkpoint", d);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = 16usize
        .checked_add(usize::try_from(header_len).map_err(|_| bad("header length overflow"))?)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| bad("header runs past end of file"))?;
    let header: Header = serde_json::from_slice(&bytes[16..header_end])?;
    let data = &bytes[header_end..];

    let mut arrays = BTreeMap::new();
    let mut order = Vec::with_capacity(header.arrays.len());
    let mut expected_offset = 0u64;
    for e in &header.arrays {
        if e.offset != expected_offset {
            return Err(bad(&format!("array `{}` is not contiguous", e.name)));
        }
        let n = e.shape[0]
            .checked_mul(e.shape[1])
            .ok_or_else(|| bad("shape overflow"))?;
        let start = usize::try_from(e.offset).map_err(|_| bad("offset overflow"))?;
        let end = n
            .checked_mul(8)
            .and_then(|b| b.checked_add(start))
            .filter(|&end| end <= data.len())
            .ok_or_else(|| bad(&format!("array `{}` runs past end of file", e.name)))?;
        let values = data[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor2::from_vec(e.shape[0], e.shape[1], values)?;
        if arrays.insert(e.name.clone(), t).is_some() {
            return Err(bad(&format!("duplicate array `{}`", e.name)));
        }
        order.push(e.name.clone());
        expected_offset = end as u64;
    }
    if expected_offset != data.len() as u64 {
        return Err(bad("trailing bytes after last array"));
    }
    Ok(Container {
        arrays,
        order,
        meta: header.meta,
    })
}

pub fn write_container(path: &Path, arrays: &[(String, &Tensor2)], meta: &Value) -> CliResult<()> {
    write_bytes(path, &encode(arrays, meta)?)
}

pub fn read_container(path: &Path) -> CliResult<Container> {
    decode(&read_bytes(path)?)
}

const MODEL_KIND: &str = "toyvlm";
const POLICY_KIND: &str = "policy";

pub fn save_model(path: &Path, params: &ToyVlmParams) -> CliResult<()> {
    let meta = serde_json::json!({ "kind": MODEL_KIND, "config": params.config });
    write_container(path, &params.named_arrays(), &meta)
}

pub fn load_model(path: &Path) -> CliResult<ToyVlmParams> {
    if !path.exists() {
        return Err(CliError::MissingArtifact {
            what: "model checkpoint",
            path: path.into(),
        });
    }
    let mut c = read_container(path)?;
    let meta: ModelMeta = serde_json::from_value(c.meta.clone())?;
    if meta.kind != MODEL_KIND {
        return Err(CliError::format("model checkpoint", format!("kind `{}`", meta.kind)));
    }
    if c.arrays.len() != meta.array_count() {
        return Err(CliError::format("model checkpoint", "unexpected array count"));
    }
    Ok(ToyVlmParams::from_named_arrays(meta.config, |n| c.arrays.remove(n))?)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelMeta {
    kind: String,
    config: ToyVlmConfig,
}

impl ModelMeta {
    fn array_count(&self) -> usize {
        5 + 9 * self.config.n_blocks
    }
}

/// Settings a policy checkpoint must travel with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySidecar {
    pub feature_layout_version: u32,
    pub policy: PolicyConfig,
    pub mapper: PlanMapperConfig,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn save_policy(path: &Path, policy: &PolicyParams, mapper: &PlanMapperConfig) -> CliResult<()> {
    let meta = serde_json::json!({ "kind": POLICY_KIND });
    write_container(path, &policy.named_arrays(), &meta)?;
    write_json(
        &sidecar_path(path),
        &PolicySidecar {
            feature_layout_version: FEATURE_LAYOUT_VERSION,
            policy: policy.config,
            mapper: *mapper,
        },
    )
}

/// Loads a policy and its mapper settings, rejecting other feature layouts.
pub fn load_policy(path: &Path) -> CliResult<(PolicyParams, PlanMapperConfig)> {
    let side = sidecar_path(path);
    for (what, p) in [("policy checkpoint", path), ("policy sidecar", side.as_path())] {
        if !p.exists() {
            return Err(CliError::MissingArtifact { what, path: p.into() });
        }
    }
    let sidecar: PolicySidecar = read_json(&side)?;
    if sidecar.feature_layout_version != FEATURE_LAYOUT_VERSION {
        return Err(CliError::LayoutVersion {
            found: sidecar.feature_layout_version,
            expected: FEATURE_LAYOUT_VERSION,
        });
    }
    sidecar.mapper.validate()?;
    let c = read_container(path)?;
    if c.meta.get("kind").and_then(Value::as_str) != Some(POLICY_KIND) {
        return Err(CliError::format("policy checkpoint", "not a policy container"));
    }
    let policy = PolicyParams::from_named_arrays(sidecar.policy, |n| c.arrays.get(n))?;
    Ok((policy, sidecar.mapper))
}

#[cfg(test)]
mod tests {
    use super::*;
    use planforge_core::toyvlm::init_model;

    #[test]
    fn container_round_trip_is_bitwise() {
        let a = Tensor2::from_vec(2, 2, vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap();
        let b = Tensor2::from_vec(1, 3, vec![f64::NAN, f64::INFINITY, -2.5]).unwrap();
        let meta = serde_json::json!({ "k": 1 });
        let bytes = encode(&[("a".into(), &a), ("b".into(), &b)], &meta).unwrap();
        let c = decode(&bytes).unwrap();
        assert_eq!(c.order, ["a", "b"]);
        assert_eq!(c.meta, meta);
        for (name, orig) in [("a", &a), ("b", &b)] {
            let got: Vec<u64> = c.arrays[name].data().iter().map(|x| x.to_bits()).collect();
            let want: Vec<u64> = orig.data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(got, want);
        }
        let again: Vec<(String, &Tensor2)> = c.order.iter().map(|n| (n.clone(), &c.arrays[n])).collect();
        assert_eq!(encode(&again, &c.meta).unwrap(), bytes);
    }

    #[test]
    fn truncated_and_corrupt_inputs_rejected() {
        let a = Tensor2::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let bytes = encode(&[("a".into(), &a)], &Value::Null).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(decode(&magic).is_err());
        assert!(decode(&bytes[..10]).is_err());
    }

    #[test]
    fn model_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let params = init_model(&ToyVlmConfig::default()).unwrap();
        save_model(&path, &params).unwrap();
        assert_eq!(load_model(&path).unwrap(), params);
    }
}
