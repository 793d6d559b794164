use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{CaptionRecord, TaskError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn dims(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }
}

/// Text embedding provider.
pub trait Embedder: Send + Sync {
    fn dims(&self) -> usize;
    fn embed(&self, text: &str) -> Result<EmbeddingVector, TaskError>;
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Bag of words hashed into a fixed number of buckets with 64-bit FNV-1a,
/// then L2-normalised.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HashedBagOfWords {
    pub buckets: usize,
}

impl Default for HashedBagOfWords {
    fn default() -> Self {
        Self { buckets: 256 }
    }
}

impl HashedBagOfWords {
    pub fn bucket(&self, token: &str) -> usize {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in token.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        (h % self.buckets as u64) as usize
    }
}

impl Embedder for HashedBagOfWords {
    fn dims(&self) -> usize {
        self.buckets
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, TaskError> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(TaskError::EmptyText);
        }
        let mut values = vec![0.0; self.buckets];
        for t in &tokens {
            values[self.bucket(t)] += 1.0;
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        values.iter_mut().for_each(|v| *v /= norm);
        Ok(EmbeddingVector { values })
    }
}

pub fn embed_text(text: &str, embedder: &dyn Embedder) -> Result<EmbeddingVector, TaskError> {
    embedder.embed(text)
}

pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, TaskError> {
    if a.dims() != b.dims() {
        return Err(TaskError::DimMismatch {
            left: a.dims(),
            right: b.dims(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(TaskError::ZeroVector);
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedClip {
    pub clip_id: String,
    pub score: f64,
}

/// Top `min(k, n)` captions by descending cosine to `prompt`; equal scores
/// go to the smaller clip id.
pub fn rank_clips(
    prompt: &EmbeddingVector,
    captions: &[(CaptionRecord, EmbeddingVector)],
    k: usize,
) -> Result<Vec<RankedClip>, TaskError> {
    if k == 0 {
        return Err(TaskError::InvalidParams {
            field: "k",
            reason: "must be >= 1".into(),
        });
    }
    let mut scored = captions
        .iter()
        .map(|(rec, v)| {
            Ok(RankedClip {
                clip_id: rec.clip_id.clone(),
                score: cosine(prompt, v)?,
            })
        })
        .collect::<Result<Vec<_>, TaskError>>()?;
    scored.sort_by(|a, b| match b.score.total_cmp(&a.score) {
        Ordering::Equal => a.clip_id.cmp(&b.clip_id),
        o => o,
    });
    scored.truncate(k);
    Ok(scored)
}

/// Fraction of queries whose relevant clip is in the first `k` ranked ids.
pub fn recall_at_k(
    ranked: &BTreeMap<String, Vec<String>>,
    truth: &BTreeMap<String, String>,
    k: usize,
) -> Result<f64, TaskError> {
    if ranked.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (query, list) in ranked {
        let relevant = truth
            .get(query)
            .ok_or_else(|| TaskError::MissingTruth(query.clone()))?;
        if list.iter().take(k).any(|id| id == relevant) {
            hits += 1;
        }
    }
    Ok(hits as f64 / ranked.len() as f64)
}

/// Ranks `captions` against each query and keeps the best `k` ids per query.
pub fn retrieve(
    queries: &[String],
    captions: &[CaptionRecord],
    embedder: &dyn Embedder,
    k: usize,
) -> Result<BTreeMap<String, Vec<RankedClip>>, TaskError> {
    let indexed = captions
        .iter()
        .map(|c| Ok((c.clone(), embedder.embed(&c.text)?)))
        .collect::<Result<Vec<_>, TaskError>>()?;
    let mut out = BTreeMap::new();
    for q in queries {
        let v = embedder.embed(q)?;
        out.insert(q.clone(), rank_clips(&v, &indexed, k)?);
    }
    Ok(out)
}
