//! Binary payloads exchanged between the server and the sites.

use crate::autodiff::Tensor;
use crate::model::{AttentionMaps, Reader, WeightFormatError, WeightSet};

use super::FedError;

/// Bytes preceding the weight payload of a client update.
pub const UPDATE_HEADER_LEN: usize = 16;
/// Bytes preceding the tensor payload of a target-statistics message.
pub const STATS_HEADER_LEN: usize = 4;

/// Locally trained weights and the number of windows behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub round: u32,
    pub sample_count: u32,
    pub weights: WeightSet,
}

/// `round u32 | S_i u32 | schema hash u64 | FDWT payload`, little-endian.
pub fn serialize_update(update: &ClientUpdate) -> Result<Vec<u8>, FedError> {
    let body = update.weights.to_bytes()?;
    let mut out = Vec::with_capacity(UPDATE_HEADER_LEN + body.len());
    out.extend_from_slice(&update.round.to_le_bytes());
    out.extend_from_slice(&update.sample_count.to_le_bytes());
    out.extend_from_slice(&update.weights.schema_hash().to_le_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

pub fn deserialize_update(payload: &[u8]) -> Result<ClientUpdate, FedError> {
    let mut r = Reader { bytes: payload, pos: 0 };
    let round = r.u32()?;
    let sample_count = r.u32()?;
    let hash = r.u64()?;
    let weights = WeightSet::from_bytes(&payload[UPDATE_HEADER_LEN..])?;
    if weights.is_empty() {
        return Err(FedError::EmptyWeights);
    }
    let actual = weights.schema_hash();
    if actual != hash {
        return Err(FedError::HashMismatch { header: hash, actual });
    }
    Ok(ClientUpdate {
        round,
        sample_count,
        weights,
    })
}

/// What the target site publishes each round: no voxels, only derived
/// statistics of the current global model on a target batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetStats {
    pub round: u32,
    pub maps: AttentionMaps,
    /// patch-token features `[n, d_model]`
    pub features: Tensor,
    /// `[n, 2]`: foreground mass, background mass
    pub pseudo_labels: Tensor,
}

const STATS_FIELDS: [&str; 4] = ["features", "maps.spatial", "maps.temporal", "pseudo_labels"];

impl TargetStats {
    fn as_weight_set(&self) -> WeightSet {
        let mut w = WeightSet::new();
        w.insert("features", self.features.clone());
        w.insert("maps.spatial", self.maps.spatial.clone());
        w.insert("maps.temporal", self.maps.temporal.clone());
        w.insert("pseudo_labels", self.pseudo_labels.clone());
        w
    }

    /// `round u32 | FDWT payload` holding the four arrays.
    pub fn to_bytes(&self) -> Result<Vec<u8>, FedError> {
        let mut out = self.round.to_le_bytes().to_vec();
        out.extend_from_slice(&self.as_weight_set().to_bytes()?);
        Ok(out)
    }

    pub fn from_bytes(payload: &[u8]) -> Result<Self, FedError> {
        let mut r = Reader { bytes: payload, pos: 0 };
        let round = r.u32()?;
        let mut w = WeightSet::from_bytes(&payload[STATS_HEADER_LEN..])?.into_map();
        let names: Vec<&str> = w.keys().map(String::as_str).collect();
        if names != STATS_FIELDS {
            return Err(FedError::Schema {
                name: "target stats".into(),
                detail: format!("fields {names:?}, expected {STATS_FIELDS:?}"),
            });
        }
        let mut take = |k: &str| w.remove(k).expect("checked");
        Ok(Self {
            round,
            features: take("features"),
            maps: AttentionMaps {
                spatial: take("maps.spatial"),
                temporal: take("maps.temporal"),
            },
            pseudo_labels: take("pseudo_labels"),
        })
    }

    /// Exact serialized size; depends only on array shapes.
    pub fn encoded_len(&self) -> usize {
        STATS_HEADER_LEN + self.as_weight_set().encoded_len()
    }
}

impl From<WeightFormatError> for FedError {
    fn from(e: WeightFormatError) -> Self {
        FedError::Format(e)
    }
}
