//! Framed binary messages.
//!
//! ```text
//! +--------+------+-----------------+---------------+
//! | "FPL1" | type | payload_len u32 | payload bytes |
//! +--------+------+-----------------+---------------+
//!   4 B      1 B    4 B, LE
//! ```
//!
//! All integers and floats are little-endian. Parameter vectors use the
//! model's encoding (`u32` count, then `f64` values).

use thiserror::Error;

use crate::coordinator::weights::WeightingMode;
use crate::model::{read_raw_values, write_raw_values};
use crate::secagg::{MaskedUpdate, QuantizationSpec};
use crate::trainer::EvalMetrics;

pub const MAGIC: [u8; 4] = *b"FPL1";
pub const HEADER_LEN: usize = 9;
/// Frames larger than this are rejected before allocating.
pub const MAX_PAYLOAD: usize = 1 << 28;

pub mod msg_type {
    pub const JOIN_REQUEST: u8 = 1;
    pub const JOIN_ACCEPT: u8 = 2;
    pub const GLOBAL_MODEL: u8 = 3;
    pub const LOCAL_UPDATE_PLAIN: u8 = 4;
    pub const LOCAL_UPDATE_MASKED: u8 = 5;
    pub const ROUND_ACK: u8 = 6;
    pub const SHUTDOWN: u8 = 7;
    pub const PROTOCOL_ERROR: u8 = 8;
    pub const EVAL_REQUEST: u8 = 9;
    pub const EVAL_REPORT: u8 = 10;
}

/// Codes carried by [`Message::ProtocolError`].
pub mod error_code {
    pub const BAD_MAGIC: u16 = 1;
    pub const UNKNOWN_TYPE: u16 = 2;
    pub const TRUNCATED: u16 = 3;
    pub const LENGTH_MISMATCH: u16 = 4;
    pub const ROUND_REGRESSION: u16 = 5;
    pub const UNKNOWN_PLANT: u16 = 10;
    pub const ARCH_MISMATCH: u16 = 11;
    pub const DUPLICATE_PLANT: u16 = 12;
    pub const TIMEOUT: u16 = 13;
    pub const UNEXPECTED_MESSAGE: u16 = 14;
    pub const TRAINING_FAILED: u16 = 15;
    pub const ROUND_ABORTED: u16 = 16;
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrameError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("truncated frame: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("declared payload length {declared} but {actual} bytes present")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("malformed payload: {0}")]
    Payload(String),
}

impl FrameError {
    pub fn code(&self) -> u16 {
        match self {
            FrameError::BadMagic(_) => error_code::BAD_MAGIC,
            FrameError::UnknownType(_) => error_code::UNKNOWN_TYPE,
            FrameError::Truncated { .. } => error_code::TRUNCATED,
            FrameError::LengthMismatch { .. } | FrameError::Payload(_) => error_code::LENGTH_MISMATCH,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    JoinRequest {
        plant_id: u32,
        arch_hash: u64,
        n_samples: u64,
    },
    JoinAccept {
        round_count: u32,
        q: u32,
        quant: QuantizationSpec,
        /// Every participating plant, ascending; the joining plant included.
        peer_ids: Vec<u32>,
        weighting: WeightingMode,
        secure: bool,
    },
    GlobalModel {
        round: u32,
        params: Vec<f64>,
        /// Aggregation weights aligned with `peer_ids`.
        weights: Vec<f64>,
    },
    LocalUpdatePlain {
        round: u32,
        plant_id: u32,
        n_samples: u64,
        train_loss: f64,
        params: Vec<f64>,
    },
    LocalUpdateMasked {
        round: u32,
        update: MaskedUpdate,
        n_samples: u64,
        train_loss: f64,
    },
    RoundAck {
        round: u32,
    },
    Shutdown,
    ProtocolError {
        code: u16,
        text: String,
    },
    EvalRequest {
        round: u32,
        params: Vec<f64>,
    },
    EvalReport {
        round: u32,
        plant_id: u32,
        train_mse: f64,
        test: EvalMetrics,
    },
}

impl Message {
    pub fn msg_type(&self) -> u8 {
        use msg_type::*;
        match self {
            Message::JoinRequest { .. } => JOIN_REQUEST,
            Message::JoinAccept { .. } => JOIN_ACCEPT,
            Message::GlobalModel { .. } => GLOBAL_MODEL,
            Message::LocalUpdatePlain { .. } => LOCAL_UPDATE_PLAIN,
            Message::LocalUpdateMasked { .. } => LOCAL_UPDATE_MASKED,
            Message::RoundAck { .. } => ROUND_ACK,
            Message::Shutdown => SHUTDOWN,
            Message::ProtocolError { .. } => PROTOCOL_ERROR,
            Message::EvalRequest { .. } => EVAL_REQUEST,
            Message::EvalReport { .. } => EVAL_REPORT,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Message::JoinRequest { .. } => "JoinRequest",
            Message::JoinAccept { .. } => "JoinAccept",
            Message::GlobalModel { .. } => "GlobalModel",
            Message::LocalUpdatePlain { .. } => "LocalUpdatePlain",
            Message::LocalUpdateMasked { .. } => "LocalUpdateMasked",
            Message::RoundAck { .. } => "RoundAck",
            Message::Shutdown => "Shutdown",
            Message::ProtocolError { .. } => "ProtocolError",
            Message::EvalRequest { .. } => "EvalRequest",
            Message::EvalReport { .. } => "EvalReport",
        }
    }

    pub fn protocol_error(code: u16, text: impl Into<String>) -> Self {
        Message::ProtocolError {
            code,
            text: text.into(),
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    put_u32(out, values.len() as u32);
    for v in values {
        put_f64(out, *v);
    }
}

fn encode_payload(msg: &Message, out: &mut Vec<u8>) {
    match msg {
        Message::JoinRequest {
            plant_id,
            arch_hash,
            n_samples,
        } => {
            put_u32(out, *plant_id);
            put_u64(out, *arch_hash);
            put_u64(out, *n_samples);
        }
        Message::JoinAccept {
            round_count,
            q,
            quant,
            peer_ids,
            weighting,
            secure,
        } => {
            put_u32(out, *round_count);
            put_u32(out, *q);
            put_u32(out, quant.scale_bits);
            put_f64(out, quant.clip_range);
            put_u32(out, peer_ids.len() as u32);
            for id in peer_ids {
                put_u32(out, *id);
            }
            out.push(weighting.code());
            out.push(*secure as u8);
        }
        Message::GlobalModel { round, params, weights } => {
            put_u32(out, *round);
            write_raw_values(params, out);
            put_f64s(out, weights);
        }
        Message::LocalUpdatePlain {
            round,
            plant_id,
            n_samples,
            train_loss,
            params,
        } => {
            put_u32(out, *round);
            put_u32(out, *plant_id);
            put_u64(out, *n_samples);
            put_f64(out, *train_loss);
            write_raw_values(params, out);
        }
        Message::LocalUpdateMasked {
            round,
            update,
            n_samples,
            train_loss,
        } => {
            put_u32(out, *round);
            update.encode(out);
            put_u64(out, *n_samples);
            put_f64(out, *train_loss);
        }
        Message::RoundAck { round } => put_u32(out, *round),
        Message::Shutdown => {}
        Message::ProtocolError { code, text } => {
            out.extend_from_slice(&code.to_le_bytes());
            put_u32(out, text.len() as u32);
            out.extend_from_slice(text.as_bytes());
        }
        Message::EvalRequest { round, params } => {
            put_u32(out, *round);
            write_raw_values(params, out);
        }
        Message::EvalReport {
            round,
            plant_id,
            train_mse,
            test,
        } => {
            put_u32(out, *round);
            put_u32(out, *plant_id);
            put_f64(out, *train_mse);
            put_f64(out, test.mse);
            put_f64(out, test.mae);
            put_f64(out, test.r2);
        }
    }
}

/// Frames `msg` into a self-contained byte buffer.
pub fn encode(msg: &Message) -> Vec<u8> {
    let mut payload = Vec::new();
    encode_payload(msg, &mut payload);
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&MAGIC);
    out.push(msg.msg_type());
    put_u32(&mut out, payload.len() as u32);
    out.extend_from_slice(&payload);
    out
}

/// Validates a 9-byte header; returns the message type and payload length.
pub fn decode_header(header: &[u8]) -> Result<(u8, usize), FrameError> {
    if header.len() < HEADER_LEN {
        return Err(FrameError::Truncated {
            needed: HEADER_LEN,
            available: header.len(),
        });
    }
    let magic: [u8; 4] = header[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(FrameError::BadMagic(magic));
    }
    let ty = header[4];
    if !(msg_type::JOIN_REQUEST..=msg_type::EVAL_REPORT).contains(&ty) {
        return Err(FrameError::UnknownType(ty));
    }
    let len = u32::from_le_bytes(header[5..9].try_into().expect("4 bytes")) as usize;
    if len > MAX_PAYLOAD {
        return Err(FrameError::LengthMismatch {
            declared: len,
            actual: MAX_PAYLOAD,
        });
    }
    Ok((ty, len))
}

/// Decodes exactly one frame occupying all of `bytes`.
pub fn decode(bytes: &[u8]) -> Result<Message, FrameError> {
    let (ty, len) = decode_header(bytes)?;
    let body = &bytes[HEADER_LEN..];
    if body.len() < len {
        return Err(FrameError::Truncated {
            needed: HEADER_LEN + len,
            available: bytes.len(),
        });
    }
    if body.len() > len {
        return Err(FrameError::LengthMismatch {
            declared: len,
            actual: body.len(),
        });
    }
    decode_payload(ty, body)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FrameError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            FrameError::LengthMismatch {
                declared: self.bytes.len(),
                actual: self.at.saturating_add(n),
            }
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, FrameError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, FrameError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, FrameError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, FrameError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, FrameError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self) -> Result<Vec<f64>, FrameError> {
        let n = self.u32()? as usize;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| FrameError::Payload("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn params(&mut self) -> Result<Vec<f64>, FrameError> {
        let (values, used) = read_raw_values(&self.bytes[self.at..]).map_err(|e| FrameError::LengthMismatch {
            declared: self.bytes.len(),
            actual: match e {
                crate::model::ModelError::Truncated { needed, .. } => self.at.saturating_add(needed),
                _ => self.at,
            },
        })?;
        self.at += used;
        Ok(values)
    }

    fn flag(&mut self) -> Result<bool, FrameError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(FrameError::Payload(format!("invalid boolean {other}"))),
        }
    }

    fn finish(self) -> Result<(), FrameError> {
        if self.at != self.bytes.len() {
            return Err(FrameError::LengthMismatch {
                declared: self.bytes.len(),
                actual: self.at,
            });
        }
        Ok(())
    }
}

/// Decodes a payload of message type `ty`. The payload must be consumed
/// exactly; trailing or missing bytes are a length mismatch.
pub fn decode_payload(ty: u8, payload: &[u8]) -> Result<Message, FrameError> {
    use msg_type::*;
    let mut r = Reader { bytes: payload, at: 0 };
    let msg = match ty {
        JOIN_REQUEST => Message::JoinRequest {
            plant_id: r.u32()?,
            arch_hash: r.u64()?,
            n_samples: r.u64()?,
        },
        JOIN_ACCEPT => {
            let round_count = r.u32()?;
            let q = r.u32()?;
            let quant = QuantizationSpec {
                scale_bits: r.u32()?,
                clip_range: r.f64()?,
            };
            let n = r.u32()? as usize;
            let mut peer_ids = Vec::with_capacity(n.min(1 << 16));
            for _ in 0..n {
                peer_ids.push(r.u32()?);
            }
            let weighting = WeightingMode::from_code(r.u8()?)
                .ok_or_else(|| FrameError::Payload("unknown weighting mode".into()))?;
            Message::JoinAccept {
                round_count,
                q,
                quant,
                peer_ids,
                weighting,
                secure: r.flag()?,
            }
        }
        GLOBAL_MODEL => Message::GlobalModel {
            round: r.u32()?,
            params: r.params()?,
            weights: r.f64s()?,
        },
        LOCAL_UPDATE_PLAIN => Message::LocalUpdatePlain {
            round: r.u32()?,
            plant_id: r.u32()?,
            n_samples: r.u64()?,
            train_loss: r.f64()?,
            params: r.params()?,
        },
        LOCAL_UPDATE_MASKED => {
            let round = r.u32()?;
            let plant_id = r.u32()?;
            let update_round = r.u32()?;
            let q = r.u32()? as usize;
            let raw = r.take(q.checked_mul(8).ok_or_else(|| FrameError::Payload("length overflow".into()))?)?;
            let update = MaskedUpdate {
                plant_id,
                round: update_round,
                masked_values: raw
                    .chunks_exact(8)
                    .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            };
            Message::LocalUpdateMasked {
                round,
                update,
                n_samples: r.u64()?,
                train_loss: r.f64()?,
            }
        }
        ROUND_ACK => Message::RoundAck { round: r.u32()? },
        SHUTDOWN => Message::Shutdown,
        PROTOCOL_ERROR => {
            let code = r.u16()?;
            let n = r.u32()? as usize;
            let text = std::str::from_utf8(r.take(n)?)
                .map_err(|_| FrameError::Payload("error text is not UTF-8".into()))?
                .to_string();
            Message::ProtocolError { code, text }
        }
        EVAL_REQUEST => Message::EvalRequest {
            round: r.u32()?,
            params: r.params()?,
        },
        EVAL_REPORT => Message::EvalReport {
            round: r.u32()?,
            plant_id: r.u32()?,
            train_mse: r.f64()?,
            test: EvalMetrics {
                mse: r.f64()?,
                mae: r.f64()?,
                r2: r.f64()?,
            },
        },
        other => return Err(FrameError::UnknownType(other)),
    };
    r.finish()?;
    Ok(msg)
}
