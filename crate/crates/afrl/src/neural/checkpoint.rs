//! Checkpoint container: magic `AFRL`, format version, a JSON header with
//! tensor names/shapes and metadata, little-endian `f32` payloads in
//! header order, and a trailing CRC32 of the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{ParamTensors, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AFRL";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE: &str = "f32-le";

/// Training provenance stored alongside the tensors. `normalizer_scale`
/// is the metric normalization constant baked in at training start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub variant: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlr_sigma: Option<f64>,
    pub normalizer_scale: f64,
    pub train_steps: u64,
    pub experiences: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorInfo>,
    dtype: String,
    metadata: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_params<P: ParamTensors>(params: &P, meta: CheckpointMeta) -> Self {
        Checkpoint {
            meta,
            tensors: params
                .tensors()
                .into_iter()
                .map(|(name, t)| (name.to_string(), t.clone()))
                .collect(),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Copies tensors into `params`. Names, order, and shapes must match
    /// the target architecture exactly.
    pub fn load_into<P: ParamTensors>(&self, params: &mut P) -> Result<()> {
        let mut targets = params.tensors_mut();
        if targets.len() != self.tensors.len() {
            return Err(Error::ArchitectureMismatch(format!(
                "checkpoint has {} tensors, architecture expects {}",
                self.tensors.len(),
                targets.len()
            )));
        }
        for ((name, src), (want_name, dst)) in self.tensors.iter().zip(targets.iter_mut()) {
            if name != want_name {
                return Err(Error::ArchitectureMismatch(format!(
                    "tensor {name:?} where {want_name:?} was expected"
                )));
            }
            if src.shape != dst.shape {
                return Err(Error::ArchitectureMismatch(format!(
                    "tensor {name:?} has shape {:?}, expected {:?}",
                    src.shape, dst.shape
                )));
            }
            dst.data.copy_from_slice(&src.data);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorInfo {
                    name: name.clone(),
                    shape: t.shape.clone(),
                })
                .collect(),
            dtype: DTYPE.to_string(),
            metadata: self.meta.clone(),
        };
        let header_bytes = serde_json::to_vec(&header).expect("header serializes");

        let mut payload = Vec::new();
        for (_, t) in &self.tensors {
            for v in &t.data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&payload);

        let mut out = Vec::with_capacity(16 + header_bytes.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::CheckpointTruncated);
        }
        if &bytes[0..4] != CHECKPOINT_MAGIC {
            return Err(Error::CheckpointMagic);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion(version));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header_end = 12usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or(Error::CheckpointTruncated)?;
        let header: Header = serde_json::from_slice(&bytes[12..header_end])
            .map_err(|e| Error::CheckpointHeader(e.to_string()))?;
        if header.dtype != DTYPE {
            return Err(Error::CheckpointHeader(format!(
                "unsupported dtype {:?}",
                header.dtype
            )));
        }

        let total_values: usize = header
            .tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>())
            .sum();
        let payload_len = total_values
            .checked_mul(4)
            .ok_or_else(|| Error::CheckpointHeader("tensor sizes overflow".into()))?;
        let payload_end = header_end
            .checked_add(payload_len)
            .filter(|&e| e + 4 <= bytes.len())
            .ok_or(Error::CheckpointTruncated)?;
        let payload = &bytes[header_end..payload_end];
        let expected = u32::from_le_bytes(bytes[payload_end..payload_end + 4].try_into().unwrap());
        let actual = crc32fast::hash(payload);
        if expected != actual {
            return Err(Error::CheckpointChecksum { expected, actual });
        }

        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut off = 0usize;
        for info in header.tensors {
            let n: usize = info.shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for i in 0..n {
                let b = &payload[(off + i) * 4..(off + i) * 4 + 4];
                data.push(f32::from_le_bytes(b.try_into().unwrap()));
            }
            off += n;
            tensors.push((
                info.name,
                Tensor {
                    shape: info.shape,
                    data,
                },
            ));
        }
        Ok(Checkpoint {
            meta: header.metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{E2eParams, EncoderParams, QNetworkParams};

    fn meta(variant: &str) -> CheckpointMeta {
        CheckpointMeta {
            variant: variant.into(),
            metric: Some("mgm".into()),
            mlr_sigma: None,
            normalizer_scale: 1.5,
            train_steps: 10,
            experiences: 640,
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let params = QNetworkParams::new(16, 3);
        let ckpt = Checkpoint::from_params(&params, meta("rl-mgm"));
        let restored = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        assert_eq!(restored, ckpt);

        let mut target = QNetworkParams::new(16, 99);
        restored.load_into(&mut target).unwrap();
        assert_eq!(target, params);
    }

    #[test]
    fn truncation_and_corruption_are_distinct_errors() {
        let params = QNetworkParams::with_dims(4, 6, 3, 0);
        let bytes = Checkpoint::from_params(&params, meta("rl-mgm")).to_bytes();

        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 8]),
            Err(Error::CheckpointTruncated)
        ));
        let mut flipped = bytes.clone();
        let n = flipped.len();
        flipped[n - 10] ^= 0x01; // payload byte
        assert!(matches!(
            Checkpoint::from_bytes(&flipped),
            Err(Error::CheckpointChecksum { .. })
        ));
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad_magic),
            Err(Error::CheckpointMagic)
        ));
        let mut bad_header = bytes;
        bad_header[14] = b'!';
        assert!(matches!(
            Checkpoint::from_bytes(&bad_header),
            Err(Error::CheckpointHeader(_))
        ));
    }

    #[test]
    fn wrong_architecture_is_rejected() {
        let e2e = E2eParams {
            encoder: EncoderParams::new(0),
            qnet: QNetworkParams::new(72, 1),
        };
        let ckpt = Checkpoint::from_params(&e2e, meta("rl-cnn"));
        let mut scalar = QNetworkParams::new(16, 0);
        assert!(matches!(
            ckpt.load_into(&mut scalar),
            Err(Error::ArchitectureMismatch(_))
        ));

        // Same tensor count but different widths.
        let ckpt = Checkpoint::from_params(&QNetworkParams::new(72, 1), meta("rl-mgm"));
        let mut scalar = QNetworkParams::new(16, 0);
        assert!(matches!(
            ckpt.load_into(&mut scalar),
            Err(Error::ArchitectureMismatch(_))
        ));
    }
}
