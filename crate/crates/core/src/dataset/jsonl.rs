use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenId;

use super::{DatasetManifest, Granularity, Sample, Scene, Span, Split};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: u64,
    granularity: Granularity,
    scene_id: u32,
    scene: Vec<TokenId>,
    prompt: Vec<TokenId>,
    response: Vec<TokenId>,
    token_labels: Vec<u8>,
    spans: Vec<(usize, usize, u8)>,
    split: Split,
}

fn flag(v: u8, what: &str) -> Result<bool> {
    match v {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(Error::Validation(format!("{what} must be 0 or 1, got {v}"))),
    }
}

impl From<&Sample> for Record {
    fn from(s: &Sample) -> Self {
        Record {
            id: s.id,
            granularity: s.granularity,
            scene_id: s.scene.id,
            scene: s.scene.objects.clone(),
            prompt: s.prompt.clone(),
            response: s.response.clone(),
            token_labels: s.token_labels.iter().map(|&b| b as u8).collect(),
            spans: s
                .spans
                .iter()
                .map(|sp| (sp.start, sp.end, sp.hallucinated as u8))
                .collect(),
            split: s.split,
        }
    }
}

impl TryFrom<Record> for Sample {
    type Error = Error;

    fn try_from(r: Record) -> Result<Self> {
        let token_labels = r
            .token_labels
            .iter()
            .map(|&v| flag(v, "token label"))
            .collect::<Result<_>>()?;
        let spans = r
            .spans
            .iter()
            .map(|&(start, end, h)| {
                Ok(Span {
                    start,
                    end,
                    hallucinated: flag(h, "span label")?,
                })
            })
            .collect::<Result<_>>()?;
        let s = Sample {
            id: r.id,
            granularity: r.granularity,
            scene: Scene {
                id: r.scene_id,
                objects: r.scene,
            },
            prompt: r.prompt,
            response: r.response,
            token_labels,
            spans,
            split: r.split,
        };
        s.validate()?;
        Ok(s)
    }
}

pub fn to_jsonl(samples: &[Sample]) -> Result<String> {
    let mut out = String::new();
    for s in samples {
        out.push_str(&serde_json::to_string(&Record::from(s))?);
        out.push('\n');
    }
    Ok(out)
}

/// Parses and validates one sample per nonblank line.
pub fn parse_jsonl(text: &str) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        let s = Sample::try_from(rec).map_err(|e| match e {
            Error::Validation(m) => Error::Validation(format!("line {}: {m}", i + 1)),
            other => other,
        })?;
        out.push(s);
    }
    Ok(out)
}

pub fn save_jsonl(samples: &[Sample], path: &Path) -> Result<()> {
    let text = to_jsonl(samples)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_jsonl(path: &Path) -> Result<Vec<Sample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text)
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
