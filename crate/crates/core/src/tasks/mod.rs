//! Task logic for retrieval and assembly over captioned clips.
//!
//! Videos are cut into overlapping windows, every window is captioned, the
//! captions are embedded and ranked against a prompt, and the best matches
//! become either a retrieval result or an assembly manifest.

mod assembly;
mod catalogue;
mod retrieval;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use assembly::{
    assemble, build_manifest, compose_script, AssemblyManifest, CaptionProvider, ManifestClip,
    Script, ScriptGenerator, ScriptOrder, TemplateCaptioner, TemplateScript,
};
pub use catalogue::{
    read_catalogue, read_ground_truth, write_catalogue, Catalogue, CatalogueEntry,
};
pub use retrieval::{
    cosine, embed_text, rank_clips, recall_at_k, retrieve, tokenize, Embedder, EmbeddingVector,
    HashedBagOfWords, RankedClip,
};

const EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("duration must be > 0 (got {0})")]
    NonpositiveDuration(f64),
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParams { field: &'static str, reason: String },
    #[error("text has no tokens to embed")]
    EmptyText,
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("zero-norm vector")]
    ZeroVector,
    #[error("no ground truth for query `{0}`")]
    MissingTruth(String),
    #[error("nothing selected to compose")]
    EmptySelection,
    #[error("{clips} clips but {lines} script lines")]
    LengthMismatch { clips: usize, lines: usize },
    #[error("duplicate clip `{0}`")]
    DuplicateClip(String),
    #[error("unknown clip `{0}`")]
    UnknownClip(String),
    #[error("caption for `{clip_id}` has {tokens} tokens, limit is {limit}")]
    CaptionTooLong {
        clip_id: String,
        tokens: usize,
        limit: u32,
    },
    #[error("catalogue is empty")]
    EmptyCatalogue,
    #[error("{path}: record {record}: {message}")]
    Record {
        path: String,
        record: usize,
        message: String,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationParams {
    pub clip_len_s: f64,
    pub stride_s: f64,
}

impl Default for SegmentationParams {
    fn default() -> Self {
        Self {
            clip_len_s: 10.0,
            stride_s: 5.0,
        }
    }
}

impl SegmentationParams {
    pub fn new(clip_len_s: f64, stride_s: f64) -> Result<Self, TaskError> {
        let p = Self {
            clip_len_s,
            stride_s,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        if !(self.clip_len_s.is_finite() && self.clip_len_s > 0.0) {
            return Err(TaskError::InvalidParams {
                field: "clip_len_s",
                reason: format!("must be > 0 (got {})", self.clip_len_s),
            });
        }
        if !(self.stride_s.is_finite() && self.stride_s > 0.0) {
            return Err(TaskError::InvalidParams {
                field: "stride_s",
                reason: format!("must be > 0 (got {})", self.stride_s),
            });
        }
        if self.stride_s > self.clip_len_s {
            return Err(TaskError::InvalidParams {
                field: "stride_s",
                reason: format!(
                    "must not exceed clip_len_s ({} > {})",
                    self.stride_s, self.clip_len_s
                ),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipWindow {
    pub clip_id: String,
    pub source_id: String,
    pub start_s: f64,
    pub end_s: f64,
}

impl ClipWindow {
    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }
}

/// Frame sampling and caption decoding settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessSpec {
    pub fps: u32,
    pub frame_w: u32,
    pub frame_h: u32,
    pub max_caption_tokens: u32,
    pub beam_size: u32,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        Self {
            fps: 6,
            frame_w: 224,
            frame_h: 224,
            max_caption_tokens: 23,
            beam_size: 4,
        }
    }
}

impl PreprocessSpec {
    pub fn validate(&self) -> Result<(), TaskError> {
        for (field, v) in [
            ("fps", self.fps),
            ("frame_w", self.frame_w),
            ("frame_h", self.frame_h),
            ("max_caption_tokens", self.max_caption_tokens),
            ("beam_size", self.beam_size),
        ] {
            if v == 0 {
                return Err(TaskError::InvalidParams {
                    field,
                    reason: "must be > 0".into(),
                });
            }
        }
        Ok(())
    }

    /// Shape of the frame tensor fed to the encoder for one clip:
    /// `(batch, channels, frames, height, width)`.
    pub fn clip_tensor_shape(&self) -> [u32; 5] {
        [1, 3, self.fps, self.frame_h, self.frame_w]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub clip_id: String,
    pub text: String,
    pub token_count: usize,
}

impl CaptionRecord {
    /// Whitespace tokens, which is how the stub captioner counts them.
    pub fn new(
        clip_id: impl Into<String>,
        text: impl Into<String>,
        spec: &PreprocessSpec,
    ) -> Result<Self, TaskError> {
        let clip_id = clip_id.into();
        let text = text.into();
        let token_count = text.split_whitespace().count();
        if token_count > spec.max_caption_tokens as usize {
            return Err(TaskError::CaptionTooLong {
                clip_id,
                tokens: token_count,
                limit: spec.max_caption_tokens,
            });
        }
        Ok(Self {
            clip_id,
            text,
            token_count,
        })
    }
}

/// Cuts `[0, duration_s]` into overlapping windows.
///
/// Windows start every `stride_s`. A video shorter than one clip gives the
/// single window `[0, D]`; when the regular windows stop short of `D` a final
/// window `[D - clip_len_s, D]` is appended. Clip ids are
/// `{source_id}-{index:03}`.
pub fn segment(
    source_id: &str,
    duration_s: f64,
    params: &SegmentationParams,
) -> Result<Vec<ClipWindow>, TaskError> {
    if !(duration_s.is_finite() && duration_s > 0.0) {
        return Err(TaskError::NonpositiveDuration(duration_s));
    }
    params.validate()?;
    let (len, stride) = (params.clip_len_s, params.stride_s);
    let mut spans: Vec<(f64, f64)> = Vec::new();
    if duration_s < len {
        spans.push((0.0, duration_s));
    } else {
        let last = ((duration_s - len) / stride + EPS).floor() as usize;
        spans.extend((0..=last).map(|i| (i as f64 * stride, i as f64 * stride + len)));
        let end = spans.last().map(|s| s.1).unwrap_or(0.0);
        if end < duration_s - EPS {
            spans.push((duration_s - len, duration_s));
        }
    }
    Ok(spans
        .into_iter()
        .enumerate()
        .map(|(i, (start_s, end_s))| ClipWindow {
            clip_id: format!("{source_id}-{i:03}"),
            source_id: source_id.to_string(),
            start_s,
            end_s,
        })
        .collect())
}
