use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{CaptionRecord, ClipWindow, PreprocessSpec, TaskError};

#[derive(Clone, Debug, PartialEq)]
pub struct CatalogueEntry {
    pub clip: ClipWindow,
    pub caption: CaptionRecord,
}

/// Captioned clips, in file order, with distinct ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Catalogue {
    entries: Vec<CatalogueEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    clip_id: String,
    source_id: String,
    start_s: f64,
    end_s: f64,
    caption: String,
}

impl Catalogue {
    pub fn new(entries: Vec<CatalogueEntry>) -> Result<Self, TaskError> {
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.clip.clip_id.as_str()) {
                return Err(TaskError::DuplicateClip(e.clip.clip_id.clone()));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[CatalogueEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, clip_id: &str) -> Option<&CatalogueEntry> {
        self.entries.iter().find(|e| e.clip.clip_id == clip_id)
    }

    pub fn captions(&self) -> Vec<CaptionRecord> {
        self.entries.iter().map(|e| e.caption.clone()).collect()
    }
}

/// Reads `clip_id,source_id,start_s,end_s,caption` records with a header
/// line. Lines starting with `#` are ignored.
pub fn read_catalogue<R: Read>(
    reader: R,
    origin: &str,
    spec: &PreprocessSpec,
) -> Result<Catalogue, TaskError> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut entries = Vec::new();
    for (i, row) in rdr.deserialize::<Row>().enumerate() {
        let record = i + 1;
        let bad = |message: String| TaskError::Record {
            path: origin.to_string(),
            record,
            message,
        };
        let row = row.map_err(|e| bad(e.to_string()))?;
        if !(row.start_s.is_finite()
            && row.end_s.is_finite()
            && row.start_s >= 0.0
            && row.end_s > row.start_s)
        {
            return Err(bad(format!(
                "need 0 <= start_s < end_s (got {} .. {})",
                row.start_s, row.end_s
            )));
        }
        if row.clip_id.is_empty() {
            return Err(bad("empty clip_id".into()));
        }
        let caption = CaptionRecord::new(row.clip_id.clone(), row.caption, spec)
            .map_err(|e| bad(e.to_string()))?;
        entries.push(CatalogueEntry {
            clip: ClipWindow {
                clip_id: row.clip_id,
                source_id: row.source_id,
                start_s: row.start_s,
                end_s: row.end_s,
            },
            caption,
        });
    }
    Catalogue::new(entries)
}

pub fn write_catalogue<W: Write>(writer: W, catalogue: &Catalogue) -> Result<(), TaskError> {
    let mut w = csv::Writer::from_writer(writer);
    for e in catalogue.entries() {
        w.serialize(Row {
            clip_id: e.clip.clip_id.clone(),
            source_id: e.clip.source_id.clone(),
            start_s: e.clip.start_s,
            end_s: e.clip.end_s,
            caption: e.caption.text.clone(),
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `query,clip_id` pairs with a header line.
pub fn read_ground_truth<R: Read>(
    reader: R,
    origin: &str,
) -> Result<BTreeMap<String, String>, TaskError> {
    #[derive(Deserialize)]
    struct Pair {
        query: String,
        clip_id: String,
    }
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut out = BTreeMap::new();
    for (i, pair) in rdr.deserialize::<Pair>().enumerate() {
        let pair = pair.map_err(|e| TaskError::Record {
            path: origin.to_string(),
            record: i + 1,
            message: e.to_string(),
        })?;
        if out.insert(pair.query.clone(), pair.clip_id).is_some() {
            return Err(TaskError::Record {
                path: origin.to_string(),
                record: i + 1,
                message: format!("query `{}` listed twice", pair.query),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "clip_id,source_id,start_s,end_s,caption\n\
        # a comment\n\
        k-000,kitchen,0,10,a chef is cooking pasta\n\
        p-000,park,0,10,\"a dog runs, then sits\"\n";

    #[test]
    fn reads_and_writes() {
        let cat = read_catalogue(SAMPLE.as_bytes(), "sample", &PreprocessSpec::default()).unwrap();
        assert_eq!(cat.len(), 2);
        assert_eq!(
            cat.get("p-000").unwrap().caption.text,
            "a dog runs, then sits"
        );
        let mut buf = Vec::new();
        write_catalogue(&mut buf, &cat).unwrap();
        let again = read_catalogue(buf.as_slice(), "buf", &PreprocessSpec::default()).unwrap();
        assert_eq!(cat, again);
    }

    #[test]
    fn rejects_bad_records() {
        let dup = format!("{SAMPLE}k-000,kitchen,5,15,again\n");
        assert!(matches!(
            read_catalogue(dup.as_bytes(), "x", &PreprocessSpec::default()),
            Err(TaskError::DuplicateClip(_))
        ));
        let inverted = "clip_id,source_id,start_s,end_s,caption\na,s,10,5,text\n";
        let err = read_catalogue(inverted.as_bytes(), "x", &PreprocessSpec::default()).unwrap_err();
        assert!(err.to_string().contains("record 1"), "{err}");
        let missing = "clip_id,source_id,start_s,end_s,caption\na,s,ten,15,text\n";
        assert!(read_catalogue(missing.as_bytes(), "x", &PreprocessSpec::default()).is_err());
    }

    #[test]
    fn ground_truth() {
        let text = "query,clip_id\ncooking,k-000\ndogs,p-000\n";
        let t = read_ground_truth(text.as_bytes(), "gt").unwrap();
        assert_eq!(t["dogs"], "p-000");
        let dup = "query,clip_id\ncooking,k-000\ncooking,p-000\n";
        assert!(read_ground_truth(dup.as_bytes(), "gt").is_err());
    }
}
