//! Population-size encodings.
//!
//! The binary encoding turns a population size into a fixed-width big-endian
//! bit vector so the network sees inputs of bounded magnitude regardless of
//! how large the population grows. The raw encoding (the unnormalized scalar
//! itself) is kept as an ablation variant.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Default encoding width; populations up to 4095 fit.
pub const DEFAULT_BITS: u32 = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncodingKind {
    /// Binary encoding, width `k`.
    Be,
    /// Raw scalar encoding, width 1.
    Re,
}

impl EncodingKind {
    pub fn width(self, bits: u32) -> usize {
        match self {
            EncodingKind::Be => bits as usize,
            EncodingKind::Re => 1,
        }
    }

    /// Feature vector fed to the embedding layer for population `n`.
    pub fn features(self, n: usize, bits: u32) -> Result<Vec<f64>> {
        match self {
            EncodingKind::Be => Ok(encode_population(n, bits)?.as_features()),
            EncodingKind::Re => Ok(raw_encoding(n)),
        }
    }
}

/// Big-endian bit vector of width `k` with `N = Σ_j 2^(k-j)·bits[j]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PopulationEncoding {
    bits: Vec<u8>,
}

impl PopulationEncoding {
    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn width(&self) -> usize {
        self.bits.len()
    }

    pub fn as_features(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| b as f64).collect()
    }

    /// Reconstructs the population size exactly.
    pub fn decode(&self) -> usize {
        self.bits
            .iter()
            .fold(0usize, |acc, &b| (acc << 1) | b as usize)
    }
}

pub fn encode_population(n: usize, bits: u32) -> Result<PopulationEncoding> {
    if n == 0 {
        return Err(Error::EncodingDomain(0));
    }
    if n >= 1usize << bits {
        return Err(Error::EncodingOverflow { n: n as u64, bits });
    }
    let bits = (0..bits)
        .rev()
        .map(|j| ((n >> j) & 1) as u8)
        .collect();
    Ok(PopulationEncoding { bits })
}

/// Length-1 vector `[N]`, deliberately unnormalized.
pub fn raw_encoding(n: usize) -> Vec<f64> {
    vec![n as f64]
}
