//! Framed messages exchanged between the coordinator and experts.
//!
//! Every frame is `tag u8 | payload length u64 | payload`, little-endian.
//!
//! ```text
//! sync      (tag 1)  encoded ParamVector of the base model
//! artifact  (tag 2)  expert id u32 | epochs u32 | final loss f32 | wall secs f64
//!                    | param bytes u64 | encoded ParamVector
//!                    | buffer owner u32 | capacity u64 | exemplars u64 | dim u32
//!                    | per exemplar: dim x f32, class id u32, task id u32
//! failure   (tag 3)  expert id u32 | UTF-8 reason
//! ```

use crate::codec::Reader;
use crate::error::{Error, Result};
use crate::model::ParamVector;
use crate::replay::{Buffer, Exemplar, Origin};

pub const FRAME_HEADER_BYTES: usize = 1 + 8;
/// Artifact payload bytes that do not depend on model or buffer size.
pub const ARTIFACT_FIXED_BYTES: usize = 4 + 4 + 4 + 8 + 8 + 4 + 8 + 8 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Tag {
    Sync = 1,
    Artifact = 2,
    Failure = 3,
}

impl Tag {
    fn from_u8(v: u8) -> Option<Self> {
        match v {
            1 => Some(Tag::Sync),
            2 => Some(Tag::Artifact),
            3 => Some(Tag::Failure),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingStats {
    pub epochs: u32,
    pub final_loss: f32,
    pub wall_secs: f64,
}

/// Everything one expert uploads at the end of its training.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertArtifact {
    pub expert_id: u32,
    pub params: ParamVector,
    pub buffer: Buffer,
    pub stats: TrainingStats,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Sync(ParamVector),
    Artifact(ExpertArtifact),
    Failure { expert_id: u32, reason: String },
}

fn frame(tag: Tag, payload: Vec<u8>) -> Vec<u8> {
    let mut out = Vec::with_capacity(FRAME_HEADER_BYTES + payload.len());
    out.push(tag as u8);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

impl Message {
    pub fn encode(&self) -> Vec<u8> {
        match self {
            Message::Sync(pv) => frame(Tag::Sync, pv.to_bytes()),
            Message::Artifact(a) => frame(Tag::Artifact, encode_artifact(a)),
            Message::Failure { expert_id, reason } => {
                let mut p = expert_id.to_le_bytes().to_vec();
                p.extend_from_slice(reason.as_bytes());
                frame(Tag::Failure, p)
            }
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let tag = r.u8()?;
        let tag = Tag::from_u8(tag).ok_or_else(|| r.error_at(0, format!("unknown tag {tag}")))?;
        let len = r.u64()? as usize;
        if len != r.remaining() {
            return Err(r.error_at(
                1,
                format!("frame declares {len} payload bytes, {} present", r.remaining()),
            ));
        }
        let payload = r.take(len)?;
        let at = |e: Error| match e {
            Error::Decode { offset, detail } => Error::Decode {
                offset: offset + FRAME_HEADER_BYTES,
                detail,
            },
            other => other,
        };
        match tag {
            Tag::Sync => ParamVector::from_bytes(payload).map(Message::Sync).map_err(at),
            Tag::Artifact => decode_artifact(payload).map(Message::Artifact).map_err(at),
            Tag::Failure => {
                let mut p = Reader::new(payload);
                let expert_id = p.u32().map_err(at)?;
                let rest = p.take(p.remaining()).map_err(at)?;
                let reason = String::from_utf8(rest.to_vec()).map_err(|e| Error::Decode {
                    offset: FRAME_HEADER_BYTES + 4,
                    detail: e.to_string(),
                })?;
                Ok(Message::Failure { expert_id, reason })
            }
        }
    }
}

/// Exact frame size of an artifact message.
pub fn artifact_frame_len(param_bytes: usize, exemplars: usize, dim: usize) -> usize {
    FRAME_HEADER_BYTES + ARTIFACT_FIXED_BYTES + param_bytes + exemplars * Exemplar::encoded_len(dim)
}

/// Exact frame size of a sync message.
pub fn sync_frame_len(param_bytes: usize) -> usize {
    FRAME_HEADER_BYTES + param_bytes
}

fn encode_artifact(a: &ExpertArtifact) -> Vec<u8> {
    let pv = a.params.to_bytes();
    let ex = a.buffer.exemplars();
    let dim = ex.first().map_or(0, |e| e.features.len());
    let mut p = Vec::with_capacity(ARTIFACT_FIXED_BYTES + pv.len() + ex.len() * Exemplar::encoded_len(dim));
    p.extend_from_slice(&a.expert_id.to_le_bytes());
    p.extend_from_slice(&a.stats.epochs.to_le_bytes());
    p.extend_from_slice(&a.stats.final_loss.to_le_bytes());
    p.extend_from_slice(&a.stats.wall_secs.to_le_bytes());
    p.extend_from_slice(&(pv.len() as u64).to_le_bytes());
    p.extend_from_slice(&pv);
    p.extend_from_slice(&a.buffer.owner().to_le_bytes());
    p.extend_from_slice(&(a.buffer.capacity() as u64).to_le_bytes());
    p.extend_from_slice(&(ex.len() as u64).to_le_bytes());
    p.extend_from_slice(&(dim as u32).to_le_bytes());
    for e in ex {
        for v in &e.features {
            p.extend_from_slice(&v.to_le_bytes());
        }
        p.extend_from_slice(&e.class_id.to_le_bytes());
        p.extend_from_slice(&e.task_id.to_le_bytes());
    }
    p
}

fn decode_artifact(payload: &[u8]) -> Result<ExpertArtifact> {
    let mut r = Reader::new(payload);
    let expert_id = r.u32()?;
    let epochs = r.u32()?;
    let final_loss = r.f32()?;
    let wall_secs = r.f64()?;
    let pv_len = r.u64()? as usize;
    let pv_at = r.offset();
    let params = ParamVector::from_bytes(r.take(pv_len)?).map_err(|e| match e {
        Error::Decode { offset, detail } => Error::Decode {
            offset: offset + pv_at,
            detail,
        },
        other => other,
    })?;
    let owner = r.u32()?;
    let capacity = r.u64()? as usize;
    let n = r.u64()? as usize;
    let dim = r.u32()? as usize;
    let need = n.saturating_mul(Exemplar::encoded_len(dim));
    if need > r.remaining() {
        return Err(r.error_at(
            r.offset(),
            format!("truncated: {n} exemplars need {need} bytes, {} left", r.remaining()),
        ));
    }
    let mut exemplars = Vec::with_capacity(n);
    for _ in 0..n {
        let features = (0..dim).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        exemplars.push(Exemplar {
            features,
            class_id: r.u32()?,
            task_id: r.u32()?,
            origin: Origin::Buffer(owner),
        });
    }
    r.finish()?;
    let buffer = Buffer::new(owner, capacity, exemplars).map_err(|e| Error::Decode {
        offset: payload.len(),
        detail: e.to_string(),
    })?;
    Ok(ExpertArtifact {
        expert_id,
        params,
        buffer,
        stats: TrainingStats {
            epochs,
            final_loss,
            wall_secs,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};

    fn artifact(n: usize) -> ExpertArtifact {
        let cfg = ModelConfig {
            input_dim: 3,
            res_blocks: 1,
            res_layers_per_block: 1,
            res_dim: 4,
            hidden_dim: 4,
            dropout_p: 0.0,
            total_classes: 2,
        };
        let params = Model::build(&cfg, 1).unwrap().to_param_vector();
        let exemplars = (0..n)
            .map(|i| Exemplar {
                features: vec![i as f32, -1.5, 0.25],
                class_id: (i % 2) as u32,
                task_id: 4,
                origin: Origin::Buffer(7),
            })
            .collect();
        ExpertArtifact {
            expert_id: 7,
            params,
            buffer: Buffer::new(7, 10, exemplars).unwrap(),
            stats: TrainingStats {
                epochs: 2,
                final_loss: 0.5,
                wall_secs: 0.125,
            },
        }
    }

    #[test]
    fn artifact_roundtrip_and_size() {
        let a = artifact(5);
        let bytes = Message::Artifact(a.clone()).encode();
        assert_eq!(bytes.len(), artifact_frame_len(a.params.encoded_len(), 5, 3));
        assert_eq!(Message::decode(&bytes).unwrap(), Message::Artifact(a));
    }

    #[test]
    fn sync_and_failure_roundtrip() {
        let pv = artifact(0).params;
        let bytes = Message::Sync(pv.clone()).encode();
        assert_eq!(bytes.len(), sync_frame_len(pv.encoded_len()));
        assert_eq!(Message::decode(&bytes).unwrap(), Message::Sync(pv));
        let f = Message::Failure {
            expert_id: 3,
            reason: "non-finite loss".into(),
        };
        assert_eq!(Message::decode(&f.encode()).unwrap(), f);
    }

    #[test]
    fn corrupt_frames_are_rejected() {
        let bytes = Message::Artifact(artifact(2)).encode();
        assert!(matches!(
            Message::decode(&bytes[..bytes.len() - 1]),
            Err(Error::Decode { offset: 1, .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = 9;
        assert!(matches!(Message::decode(&bad), Err(Error::Decode { offset: 0, .. })));
        // Lie about the exemplar count inside an otherwise well-framed payload.
        let mut lie = bytes;
        let n_at = lie.len() - 2 * (12 + 8) - 4 - 8;
        lie[n_at..n_at + 8].copy_from_slice(&3u64.to_le_bytes());
        assert!(matches!(Message::decode(&lie), Err(Error::Decode { .. })));
    }
}
