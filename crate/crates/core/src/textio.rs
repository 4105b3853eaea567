//! Byte-level tokenizer and evaluation corpus windows.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
pub const VOCAB_SIZE: usize = 259;

/// Byte tokenizer: ids 0..=255 are raw bytes, 256..=258 are BOS/EOS/PAD.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tokenizer;

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn encode(&self, text: &[u8]) -> Vec<u32> {
        text.iter().map(|&b| b as u32).collect()
    }

    /// Inverse of [`encode`](Self::encode). Special ids decode to nothing.
    pub fn decode(&self, tokens: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(tokens.len());
        for &t in tokens {
            match t {
                0..=255 => out.push(t as u8),
                BOS | EOS | PAD => {}
                _ => return Err(Error::Token(t)),
            }
        }
        Ok(out)
    }
}

/// Fixed-length token windows for teacher-forced evaluation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalCorpus {
    pub windows: Vec<Vec<u32>>,
    pub context_len: usize,
    pub stride: usize,
}

impl EvalCorpus {
    /// `floor((N - context_len) / stride) + 1` windows; a trailing partial
    /// window is dropped.
    pub fn from_tokens(tokens: &[u32], context_len: usize, stride: usize) -> Result<Self> {
        if context_len < 2 {
            return Err(Error::Corpus(format!("context_len {context_len} must be at least 2")));
        }
        if stride == 0 || stride > context_len {
            return Err(Error::Corpus(format!(
                "stride {stride} must lie in 1..={context_len}"
            )));
        }
        if tokens.len() < context_len {
            return Err(Error::Corpus(format!(
                "corpus has {} tokens, fewer than context_len {context_len}",
                tokens.len()
            )));
        }
        let count = (tokens.len() - context_len) / stride + 1;
        let windows = (0..count)
            .map(|i| tokens[i * stride..i * stride + context_len].to_vec())
            .collect();
        Ok(EvalCorpus {
            windows,
            context_len,
            stride,
        })
    }
}

pub fn load_corpus(path: impl AsRef<Path>, context_len: usize, stride: usize) -> Result<EvalCorpus> {
    let bytes = fs::read(path)?;
    EvalCorpus::from_tokens(&Tokenizer.encode(&bytes), context_len, stride)
}

/// One prompt per non-empty line.
pub fn load_prompts(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(str::trim_end)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}
