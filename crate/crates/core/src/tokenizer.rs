//! Byte-level tokenizer shared by every pipeline stage.
//!
//! Bytes map to ids `0..=255` unchanged; seven reserved special tokens sit
//! directly above them. The layout is frozen into every checkpoint header so
//! artifacts produced by different runs remain mutually readable.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A single token id. Every valid id is `< Vocab::SIZE`.
pub type TokenId = u16;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TokenizerError {
    #[error("special token {id} at position {position} cannot be decoded to text")]
    SpecialInText { id: TokenId, position: usize },
}

/// The fixed vocabulary: 256 byte ids followed by the special tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub size: usize,
    pub pad: TokenId,
    pub bos: TokenId,
    pub eos: TokenId,
    pub sys: TokenId,
    pub user: TokenId,
    pub asst: TokenId,
    pub end: TokenId,
}

impl Vocab {
    pub const SIZE: usize = 263;
    pub const PAD: TokenId = 256;
    pub const BOS: TokenId = 257;
    pub const EOS: TokenId = 258;
    pub const SYS: TokenId = 259;
    pub const USER: TokenId = 260;
    pub const ASST: TokenId = 261;
    pub const END: TokenId = 262;

    pub const STANDARD: Vocab = Vocab {
        size: Self::SIZE,
        pad: Self::PAD,
        bos: Self::BOS,
        eos: Self::EOS,
        sys: Self::SYS,
        user: Self::USER,
        asst: Self::ASST,
        end: Self::END,
    };

    pub fn is_special(id: TokenId) -> bool {
        id >= 256
    }

    pub fn name(id: TokenId) -> Option<&'static str> {
        Some(match id {
            Self::PAD => "PAD",
            Self::BOS => "BOS",
            Self::EOS => "EOS",
            Self::SYS => "SYS",
            Self::USER => "USER",
            Self::ASST => "ASST",
            Self::END => "END",
            _ => return None,
        })
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Self::STANDARD
    }
}

pub fn encode(text: &[u8]) -> Vec<TokenId> {
    text.iter().map(|&b| TokenId::from(b)).collect()
}

pub fn decode(ids: &[TokenId]) -> Result<Vec<u8>, TokenizerError> {
    ids.iter()
        .enumerate()
        .map(|(position, &id)| u8::try_from(id).map_err(|_| TokenizerError::SpecialInText { id, position }))
        .collect()
}

/// Decodes the text prefix of `ids`, stopping at the first special token.
pub fn decode_until_special(ids: &[TokenId]) -> Vec<u8> {
    ids.iter().map_while(|&id| u8::try_from(id).ok()).collect()
}
