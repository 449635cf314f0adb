//! Feature-hashing text embedder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EMBEDDING_DIMS: usize = 64;

const FNV_OFFSET: u64 = 14_695_981_039_346_656_037;
const FNV_PRIME: u64 = 1_099_511_628_211;

/// A dense embedding. Produced vectors are either all-zero or unit length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn zeros(dims: usize) -> Self {
        Self(vec![0.0; dims])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn dims(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&x| x == 0.0)
    }
}

pub trait Embedder: Send + Sync {
    fn dims(&self) -> usize;
    fn embed(&self, text: &str) -> Vector;
}

/// Signed feature hashing over lowercase alphanumeric tokens.
///
/// Each token is hashed with 64-bit FNV-1a; the low six bits pick the
/// dimension and bit 6 picks the sign. The accumulated vector is
/// L2-normalized.
#[derive(Debug, Clone, Copy, Default)]
pub struct HashingEmbedder;

impl Embedder for HashingEmbedder {
    fn dims(&self) -> usize {
        EMBEDDING_DIMS
    }

    fn embed(&self, text: &str) -> Vector {
        let mut acc = [0.0f64; EMBEDDING_DIMS];
        for token in tokenize(text) {
            let h = fnv1a64(token.as_bytes());
            let index = (h % EMBEDDING_DIMS as u64) as usize;
            let sign = if (h >> 6) & 1 == 0 { 1.0 } else { -1.0 };
            acc[index] += sign;
        }
        let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            acc.iter_mut().for_each(|x| *x /= norm);
        }
        Vector(acc.to_vec())
    }
}

pub fn embed(text: &str) -> Vector {
    HashingEmbedder.embed(text)
}

fn is_token_char(c: char) -> bool {
    if c.is_ascii() {
        c.is_ascii_alphanumeric()
    } else {
        c.is_alphabetic()
    }
}

/// Lowercases and splits on every character that is neither ASCII
/// alphanumeric nor a non-ASCII letter.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !is_token_char(c))
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Cosine similarity; zero when either side is the zero vector.
pub fn cosine(a: &Vector, b: &Vector) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::DimensionMismatch { left: a.dims(), right: b.dims() });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}
