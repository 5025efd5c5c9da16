//! Packing of rendered samples into fixed-length training chunks.
//!
//! Samples are laid end to end in input order and may straddle chunk
//! boundaries. Only the final chunk is right-padded. There is no attention
//! separation between samples that share a chunk.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chat::RenderedSample;
use crate::tokenizer::{TokenId, Vocab};

/// Full-scale chunk length.
pub const DEFAULT_CHUNK_LEN: usize = 8192;

#[derive(Debug, Error)]
pub enum PackError {
    #[error("chunk length must be at least 2, got {0}")]
    ChunkTooShort(usize),
    #[error("sample {0} is empty")]
    EmptySample(usize),
    #[error("sample {index}: token/mask length mismatch ({ids} vs {mask})")]
    MaskLength { index: usize, ids: usize, mask: usize },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: malformed shard: {reason}")]
    Malformed { path: PathBuf, reason: String },
}

/// A slice `[start, end)` of a chunk occupied by input sample `sample`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub sample: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedChunk {
    pub ids: Vec<TokenId>,
    pub loss_mask: Vec<bool>,
    pub boundaries: Vec<Span>,
}

impl PackedChunk {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn real_tokens(&self) -> usize {
        self.boundaries.last().map_or(0, |s| s.end)
    }

    pub fn mask_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&b| b).count()
    }
}

pub fn pack(samples: &[RenderedSample], chunk_len: usize) -> Result<Vec<PackedChunk>, PackError> {
    if chunk_len < 2 {
        return Err(PackError::ChunkTooShort(chunk_len));
    }
    for (index, s) in samples.iter().enumerate() {
        if s.is_empty() {
            return Err(PackError::EmptySample(index));
        }
        if s.ids.len() != s.loss_mask.len() {
            return Err(PackError::MaskLength { index, ids: s.ids.len(), mask: s.loss_mask.len() });
        }
    }

    let empty = || PackedChunk {
        ids: Vec::with_capacity(chunk_len),
        loss_mask: Vec::with_capacity(chunk_len),
        boundaries: Vec::new(),
    };
    let mut chunks = Vec::new();
    let mut current = empty();
    for (index, sample) in samples.iter().enumerate() {
        let mut offset = 0;
        while offset < sample.len() {
            let room = chunk_len - current.ids.len();
            let take = room.min(sample.len() - offset);
            let start = current.ids.len();
            current.ids.extend_from_slice(&sample.ids[offset..offset + take]);
            current.loss_mask.extend_from_slice(&sample.loss_mask[offset..offset + take]);
            current.boundaries.push(Span { start, end: start + take, sample: index });
            offset += take;
            if current.ids.len() == chunk_len {
                chunks.push(std::mem::replace(&mut current, empty()));
            }
        }
    }
    if !current.ids.is_empty() {
        current.ids.resize(chunk_len, Vocab::PAD);
        current.loss_mask.resize(chunk_len, false);
        chunks.push(current);
    }
    Ok(chunks)
}

#[derive(Debug, Serialize, Deserialize)]
struct ShardHeader {
    #[serde(rename = "L")]
    chunk_len: usize,
    vocab: usize,
    count: usize,
}

/// Serializes chunks: a JSON header line, then per chunk `L` little-endian
/// u16 ids followed by `ceil(L/8)` mask bytes (LSB-first).
pub fn encode_shard(chunks: &[PackedChunk], chunk_len: usize) -> Vec<u8> {
    let header = ShardHeader { chunk_len, vocab: Vocab::SIZE, count: chunks.len() };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    for chunk in chunks {
        assert_eq!(chunk.len(), chunk_len, "chunk length must equal the shard length");
        for id in &chunk.ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        let mut bits = vec![0u8; chunk_len.div_ceil(8)];
        for (i, _) in chunk.loss_mask.iter().enumerate().filter(|(_, &m)| m) {
            bits[i / 8] |= 1 << (i % 8);
        }
        out.extend_from_slice(&bits);
    }
    out
}

pub fn write_shard(path: &Path, chunks: &[PackedChunk], chunk_len: usize) -> Result<(), PackError> {
    let io_err = |source| PackError::Io { path: path.to_path_buf(), source };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    w.write_all(&encode_shard(chunks, chunk_len)).map_err(io_err)?;
    w.flush().map_err(io_err)
}

/// Reads a shard back. Sample spans are not stored on disk; they are
/// re-derived from `EOS` terminators, numbering samples from 0 at the start
/// of the shard.
pub fn read_shard(path: &Path) -> Result<(usize, Vec<PackedChunk>), PackError> {
    let io_err = |source| PackError::Io { path: path.to_path_buf(), source };
    let malformed = |reason: String| PackError::Malformed { path: path.to_path_buf(), reason };
    let mut r = BufReader::new(File::open(path).map_err(io_err)?);
    let mut line = String::new();
    r.read_line(&mut line).map_err(io_err)?;
    let header: ShardHeader = serde_json::from_str(line.trim_end()).map_err(|e| malformed(e.to_string()))?;
    if header.vocab != Vocab::SIZE {
        return Err(malformed(format!("vocab {} != {}", header.vocab, Vocab::SIZE)));
    }
    if header.chunk_len < 2 {
        return Err(malformed(format!("chunk length {}", header.chunk_len)));
    }
    let l = header.chunk_len;
    let mut id_bytes = vec![0u8; 2 * l];
    let mut bits = vec![0u8; l.div_ceil(8)];
    let mut chunks = Vec::with_capacity(header.count);
    let mut sample = 0;
    for c in 0..header.count {
        r.read_exact(&mut id_bytes).map_err(|_| malformed(format!("truncated at chunk {c}")))?;
        r.read_exact(&mut bits).map_err(|_| malformed(format!("truncated at chunk {c}")))?;
        let ids: Vec<TokenId> = id_bytes.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect();
        if let Some(bad) = ids.iter().find(|&&id| id as usize >= Vocab::SIZE) {
            return Err(malformed(format!("token id {bad} out of range")));
        }
        let loss_mask: Vec<bool> = (0..l).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
        let real = ids.iter().position(|&id| id == Vocab::PAD).unwrap_or(l);
        let mut boundaries = Vec::new();
        let mut start = 0;
        for (i, _) in ids[..real].iter().enumerate().filter(|(_, &id)| id == Vocab::EOS) {
            boundaries.push(Span { start, end: i + 1, sample });
            sample += 1;
            start = i + 1;
        }
        if start < real {
            boundaries.push(Span { start, end: real, sample });
        }
        chunks.push(PackedChunk { ids, loss_mask, boundaries });
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(io_err)?;
    if !rest.is_empty() {
        return Err(malformed(format!("{} trailing bytes", rest.len())));
    }
    Ok((l, chunks))
}
