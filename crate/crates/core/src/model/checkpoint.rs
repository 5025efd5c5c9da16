//! Checkpoint file: `CLF1`, u64 LE header length, JSON header, little-endian
//! f64 payload in parameter order, then the u64 LE FNV-1a hash of the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, ModelState};
use crate::tokenizer::Vocab;

const MAGIC: &[u8; 4] = b"CLF1";
const FORMAT_VERSION: u32 = 1;

pub(crate) struct Fnv1a(u64);

impl Fnv1a {
    pub fn new() -> Self {
        Fnv1a(0xcbf2_9ce4_8422_2325)
    }

    pub fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = Fnv1a::new();
    h.update(bytes);
    h.finish()
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    seed: u64,
    vocab: Vocab,
    params: Vec<NamedShape>,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct NamedShape {
    name: String,
    shape: Vec<usize>,
}

pub(crate) fn encode(state: &ModelState) -> Vec<u8> {
    let header = Header {
        version: FORMAT_VERSION,
        config: *state.config(),
        seed: state.seed(),
        vocab: Vocab::STANDARD,
        params: state.slots().iter().map(|s| NamedShape { name: s.name.clone(), shape: s.shape.clone() }).collect(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(4 + 8 + header.len() + state.num_params() * 8 + 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    let payload_start = out.len();
    for p in state.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    let hash = fnv1a64(&out[payload_start..]);
    out.extend_from_slice(&hash.to_le_bytes());
    out
}

pub(crate) fn decode(bytes: &[u8]) -> Result<ModelState, ModelError> {
    let corrupt = |m: &str| ModelError::CorruptCheckpoint(m.to_string());
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let header_len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let header_end =
        12usize.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or_else(|| corrupt("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[12..header_end])
        .map_err(|e| ModelError::CorruptCheckpoint(format!("header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(ModelError::CorruptCheckpoint(format!("unsupported version {}", header.version)));
    }
    if header.vocab != Vocab::STANDARD {
        return Err(corrupt("special-token layout differs from this build"));
    }
    header.config.validate()?;
    let expected: Vec<NamedShape> =
        header.config.param_shapes().into_iter().map(|(name, shape)| NamedShape { name, shape }).collect();
    if expected != header.params {
        return Err(corrupt("parameter names or shapes do not match the config"));
    }
    let n: usize = expected.iter().map(|s| s.shape.iter().product::<usize>()).sum();
    let payload_end = header_end + n * 8;
    if bytes.len() != payload_end + 8 {
        return Err(corrupt("payload length mismatch"));
    }
    let payload = &bytes[header_end..payload_end];
    let stored = u64::from_le_bytes(bytes[payload_end..].try_into().expect("8 bytes"));
    if fnv1a64(payload) != stored {
        return Err(corrupt("hash mismatch"));
    }
    let params: Vec<f64> =
        payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    if params.iter().any(|p| !p.is_finite()) {
        return Err(corrupt("non-finite parameter"));
    }
    ModelState::from_parts(header.config, header.seed, params)
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<(), ModelError> {
    std::fs::write(path, encode(state)).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState, ModelError> {
    let bytes = std::fs::read(path).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })?;
    decode(&bytes)
}
