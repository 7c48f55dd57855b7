//! The compiled item-to-item model and its persisted form.
//!
//! Per item the model keeps two bounded association lists over the same
//! targets: one sorted for prediction (by expected conditional
//! probability) and one for similarity (by the conservative percentile
//! weight), plus the marginal table they were computed from.
//!
//! On disk the model is a three-part container: a magic/version header
//! line, a checksum line over the payload, and a JSON payload. Floats
//! survive the round trip exactly (shortest round-trip decimals).

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::ItemId;
use crate::marginals::MarginalTable;

pub const MODEL_MAGIC: &str = "CFWMODEL";
pub const MODEL_VERSION: u32 = 1;
/// Default association list capacity per item.
pub const DEFAULT_LIST_CAPACITY: usize = 40;

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("failed to access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a model file: bad magic header")]
    BadMagic,
    #[error("model format version {found} is not supported (supported: {supported})")]
    Version { found: u32, supported: u32 },
    #[error("model file is truncated")]
    Truncated,
    #[error("model checksum mismatch: file is corrupted")]
    Checksum,
    #[error("model payload is malformed: {0}")]
    Payload(#[from] serde_json::Error),
}

/// One stored association from a source item to `target`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Association {
    pub target: ItemId,
    /// Posterior-expected probability of liking the target given the
    /// source item.
    pub theta_h_given_e: f64,
    /// Effective weight of evidence implied by `theta_h_given_e`.
    pub omega_eff: f64,
    /// Conservative percentile of the weight-of-evidence posterior.
    pub omega_p05: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub version: u32,
    pub seed: u64,
    pub n_users: u64,
}

/// The trained model: marginals plus per-item top-f association lists.
#[derive(Debug, Clone, PartialEq)]
pub struct CfwModel {
    pub vocab: Vec<String>,
    pub marginals: MarginalTable,
    /// Per source item, associations sorted by `theta_h_given_e`
    /// descending.
    pub predict_lists: Vec<Vec<Association>>,
    /// Per source item, associations sorted by `omega_p05` descending.
    pub similar_lists: Vec<Vec<Association>>,
    pub f: usize,
    pub meta: ModelMeta,
    index: HashMap<String, ItemId>,
}

impl CfwModel {
    pub fn new(
        vocab: Vec<String>,
        marginals: MarginalTable,
        predict_lists: Vec<Vec<Association>>,
        similar_lists: Vec<Vec<Association>>,
        f: usize,
        meta: ModelMeta,
    ) -> Self {
        let index = vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as ItemId))
            .collect();
        Self {
            vocab,
            marginals,
            predict_lists,
            similar_lists,
            f,
            meta,
            index,
        }
    }

    pub fn n_items(&self) -> usize {
        self.vocab.len()
    }

    pub fn token(&self, item: ItemId) -> &str {
        &self.vocab[item as usize]
    }

    pub fn lookup(&self, token: &str) -> Option<ItemId> {
        self.index.get(token).copied()
    }

    /// Prior log odds of an item, from its marginal median.
    pub fn omega_0(&self, item: ItemId) -> f64 {
        self.marginals.omega_0(item)
    }
}

#[derive(Serialize, Deserialize)]
struct Payload {
    meta: ModelMeta,
    f: usize,
    vocab: Vec<String>,
    marginals: MarginalTable,
    predict_lists: Vec<Vec<Association>>,
    similar_lists: Vec<Vec<Association>>,
}

/// Serializes a model to bytes: header line, checksum line, JSON payload.
pub fn model_to_bytes(model: &CfwModel) -> Result<Vec<u8>, ModelIoError> {
    let payload = Payload {
        meta: model.meta,
        f: model.f,
        vocab: model.vocab.clone(),
        marginals: model.marginals.clone(),
        predict_lists: model.predict_lists.clone(),
        similar_lists: model.similar_lists.clone(),
    };
    let body = serde_json::to_vec(&payload)?;
    let digest = Sha256::digest(&body);
    let mut out = format!(
        "{MODEL_MAGIC} {} f={} n_users={}\nsha256 {:x}\n",
        model.meta.version, model.f, model.meta.n_users, digest
    )
    .into_bytes();
    out.extend_from_slice(&body);
    Ok(out)
}

/// Parses bytes produced by [`model_to_bytes`].
pub fn model_from_bytes(bytes: &[u8]) -> Result<CfwModel, ModelIoError> {
    let (header, rest) = split_line(bytes).ok_or(ModelIoError::Truncated)?;
    let header = std::str::from_utf8(header).map_err(|_| ModelIoError::BadMagic)?;
    let mut fields = header.split_whitespace();
    if fields.next() != Some(MODEL_MAGIC) {
        return Err(ModelIoError::BadMagic);
    }
    let version: u32 = fields
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or(ModelIoError::BadMagic)?;
    if version != MODEL_VERSION {
        return Err(ModelIoError::Version {
            found: version,
            supported: MODEL_VERSION,
        });
    }
    let (checksum_line, body) = split_line(rest).ok_or(ModelIoError::Truncated)?;
    let checksum_line = std::str::from_utf8(checksum_line).map_err(|_| ModelIoError::Truncated)?;
    let expected = checksum_line
        .strip_prefix("sha256 ")
        .ok_or(ModelIoError::Truncated)?;
    if body.is_empty() {
        return Err(ModelIoError::Truncated);
    }
    let digest = format!("{:x}", Sha256::digest(body));
    if digest != expected.trim() {
        return Err(ModelIoError::Checksum);
    }
    let payload: Payload = serde_json::from_slice(body)?;
    Ok(CfwModel::new(
        payload.vocab,
        payload.marginals,
        payload.predict_lists,
        payload.similar_lists,
        payload.f,
        payload.meta,
    ))
}

fn split_line(bytes: &[u8]) -> Option<(&[u8], &[u8])> {
    let pos = bytes.iter().position(|&b| b == b'\n')?;
    Some((&bytes[..pos], &bytes[pos + 1..]))
}

pub fn save_model(model: &CfwModel, path: impl AsRef<Path>) -> Result<(), ModelIoError> {
    let path = path.as_ref();
    let bytes = model_to_bytes(model)?;
    std::fs::write(path, bytes).map_err(|source| ModelIoError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_model(path: impl AsRef<Path>) -> Result<CfwModel, ModelIoError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| ModelIoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    model_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::parse_dataset;
    use crate::marginals::count_marginals;

    fn tiny_model() -> CfwModel {
        let d = parse_dataset("u1\tA B\nu2\tA\nu3\tB C\n").unwrap();
        let marginals = count_marginals(&d).unwrap();
        let assoc = Association {
            target: 1,
            theta_h_given_e: 0.625,
            omega_eff: 1.25,
            omega_p05: 0.3333333333333333,
        };
        CfwModel::new(
            d.vocab().to_vec(),
            marginals,
            vec![vec![assoc], vec![], vec![]],
            vec![vec![assoc], vec![], vec![]],
            40,
            ModelMeta {
                version: MODEL_VERSION,
                seed: 7,
                n_users: 3,
            },
        )
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let model = tiny_model();
        let bytes = model_to_bytes(&model).unwrap();
        let back = model_from_bytes(&bytes).unwrap();
        assert_eq!(model, back);
        assert_eq!(bytes, model_to_bytes(&back).unwrap());
    }

    #[test]
    fn roundtrip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.cfw");
        let model = tiny_model();
        save_model(&model, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(model, back);
    }

    #[test]
    fn corrupted_body_fails_checksum() {
        let model = tiny_model();
        let mut bytes = model_to_bytes(&model).unwrap();
        let last = bytes.len() - 2;
        bytes[last] ^= 0x01;
        assert!(matches!(
            model_from_bytes(&bytes),
            Err(ModelIoError::Checksum)
        ));
    }

    #[test]
    fn future_version_is_rejected_with_both_versions() {
        let model = tiny_model();
        let bytes = model_to_bytes(&model).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        let bumped = text.replacen("CFWMODEL 1", "CFWMODEL 2", 1);
        match model_from_bytes(bumped.as_bytes()) {
            Err(ModelIoError::Version { found, supported }) => {
                assert_eq!(found, 2);
                assert_eq!(supported, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_and_foreign_files_are_rejected() {
        assert!(matches!(
            model_from_bytes(b"CFWMODEL 1 f=40 n_users=3\n"),
            Err(ModelIoError::Truncated)
        ));
        let model = tiny_model();
        let bytes = model_to_bytes(&model).unwrap();
        assert!(matches!(
            model_from_bytes(&bytes[..bytes.len() / 2]),
            Err(ModelIoError::Checksum)
        ));
        assert!(matches!(
            model_from_bytes(b"not a model\nat all\nbody"),
            Err(ModelIoError::BadMagic)
        ));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_model("/nonexistent/model.cfw"),
            Err(ModelIoError::Io { .. })
        ));
    }
}
