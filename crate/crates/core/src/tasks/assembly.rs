use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{
    rank_clips, CaptionRecord, Catalogue, ClipWindow, Embedder, PreprocessSpec, RankedClip,
    TaskError,
};

/// Caption provider. The decoder behind it is out of scope; the default
/// describes the clip from its metadata.
pub trait CaptionProvider: Send + Sync {
    fn caption(&self, clip: &ClipWindow, spec: &PreprocessSpec)
        -> Result<CaptionRecord, TaskError>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TemplateCaptioner;

impl CaptionProvider for TemplateCaptioner {
    fn caption(
        &self,
        clip: &ClipWindow,
        spec: &PreprocessSpec,
    ) -> Result<CaptionRecord, TaskError> {
        let text = format!(
            "footage from {} between {:.1} and {:.1} seconds",
            clip.source_id, clip.start_s, clip.end_s
        );
        let words: Vec<&str> = text
            .split_whitespace()
            .take(spec.max_caption_tokens as usize)
            .collect();
        CaptionRecord::new(clip.clip_id.clone(), words.join(" "), spec)
    }
}

/// Turns a selected caption into one line of the script.
pub trait ScriptGenerator: Send + Sync {
    /// `position` is 1-based.
    fn line(&self, position: usize, caption: &CaptionRecord) -> Result<String, TaskError>;
}

/// `Scene {n}: {caption}`.
#[derive(Clone, Copy, Debug, Default)]
pub struct TemplateScript;

impl ScriptGenerator for TemplateScript {
    fn line(&self, position: usize, caption: &CaptionRecord) -> Result<String, TaskError> {
        Ok(format!("Scene {position}: {}", caption.text))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptOrder {
    /// Keep the ranking order.
    #[default]
    Similarity,
    /// Sort by source, then start time.
    Temporal,
}

impl fmt::Display for ScriptOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScriptOrder::Similarity => "similarity",
            ScriptOrder::Temporal => "temporal",
        })
    }
}

impl FromStr for ScriptOrder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "similarity" => Ok(ScriptOrder::Similarity),
            "temporal" => Ok(ScriptOrder::Temporal),
            other => Err(format!(
                "unknown order `{other}` (expected `similarity` or `temporal`)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Script {
    pub clips: Vec<ClipWindow>,
    pub lines: Vec<String>,
}

/// Orders the selected clips and writes one script line per clip.
pub fn compose_script(
    topk: &[RankedClip],
    catalogue: &Catalogue,
    order: ScriptOrder,
    generator: Option<&dyn ScriptGenerator>,
) -> Result<Script, TaskError> {
    if topk.is_empty() {
        return Err(TaskError::EmptySelection);
    }
    let mut selected = topk
        .iter()
        .map(|r| {
            catalogue
                .get(&r.clip_id)
                .ok_or_else(|| TaskError::UnknownClip(r.clip_id.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if order == ScriptOrder::Temporal {
        selected.sort_by(|a, b| {
            a.clip
                .source_id
                .cmp(&b.clip.source_id)
                .then(a.clip.start_s.total_cmp(&b.clip.start_s))
                .then(a.clip.clip_id.cmp(&b.clip.clip_id))
        });
    }
    let generator = generator.unwrap_or(&TemplateScript);
    let lines = selected
        .iter()
        .enumerate()
        .map(|(i, e)| generator.line(i + 1, &e.caption))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Script {
        clips: selected.into_iter().map(|e| e.clip.clone()).collect(),
        lines,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestClip {
    pub clip_id: String,
    pub start_s: f64,
    pub end_s: f64,
}

/// Ordered clip windows plus their script lines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssemblyManifest {
    pub prompt: String,
    pub ordered_clips: Vec<ManifestClip>,
    pub script_lines: Vec<String>,
}

impl AssemblyManifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, TaskError> {
        let m: AssemblyManifest = serde_json::from_str(text)?;
        build_manifest(
            &m.prompt,
            &m.ordered_clips
                .iter()
                .map(|c| ClipWindow {
                    clip_id: c.clip_id.clone(),
                    source_id: String::new(),
                    start_s: c.start_s,
                    end_s: c.end_s,
                })
                .collect::<Vec<_>>(),
            m.script_lines.clone(),
        )?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<(), TaskError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, TaskError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub fn build_manifest(
    prompt: &str,
    clips: &[ClipWindow],
    script_lines: Vec<String>,
) -> Result<AssemblyManifest, TaskError> {
    if clips.len() != script_lines.len() {
        return Err(TaskError::LengthMismatch {
            clips: clips.len(),
            lines: script_lines.len(),
        });
    }
    let mut seen = BTreeSet::new();
    for c in clips {
        if !seen.insert(c.clip_id.as_str()) {
            return Err(TaskError::DuplicateClip(c.clip_id.clone()));
        }
    }
    Ok(AssemblyManifest {
        prompt: prompt.to_string(),
        ordered_clips: clips
            .iter()
            .map(|c| ManifestClip {
                clip_id: c.clip_id.clone(),
                start_s: c.start_s,
                end_s: c.end_s,
            })
            .collect(),
        script_lines,
    })
}

/// Ranks the catalogue against `prompt`, keeps the best `k`, composes the
/// script and returns the manifest together with the ranking.
pub fn assemble(
    catalogue: &Catalogue,
    prompt: &str,
    k: usize,
    order: ScriptOrder,
    embedder: &dyn Embedder,
    generator: Option<&dyn ScriptGenerator>,
) -> Result<(AssemblyManifest, Vec<RankedClip>), TaskError> {
    if catalogue.is_empty() {
        return Err(TaskError::EmptyCatalogue);
    }
    let indexed = catalogue
        .entries()
        .iter()
        .map(|e| Ok((e.caption.clone(), embedder.embed(&e.caption.text)?)))
        .collect::<Result<Vec<_>, TaskError>>()?;
    let ranked = rank_clips(&embedder.embed(prompt)?, &indexed, k)?;
    let script = compose_script(&ranked, catalogue, order, generator)?;
    let manifest = build_manifest(prompt, &script.clips, script.lines)?;
    Ok((manifest, ranked))
}
