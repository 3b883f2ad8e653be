//! Building two-round training conversations from region-annotated VQA
//! records.
//!
//! Records whose question could refer to more than one annotated object are
//! dropped. The test is lexical: content terms of the question are matched
//! against region descriptions, and two matching regions that overlap by
//! less than the IoU threshold count as different objects.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::LazyLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use crate::boxparse::format_box;
use crate::boxparse::{quantize, BoxFormat};
use crate::geometry::{normalize, GeometryError, NormBox, PixelBox};
use crate::prompting::{curation_target, ConversationMessage, PromptError};

pub const STOPWORDS_VERSION: &str = "v1";
static STOPWORDS: LazyLock<HashSet<&'static str>> = LazyLock::new(|| {
    include_str!("../resources/stopwords_v1.txt")
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .collect()
});

/// Records are processed in parallel in chunks of this size.
const CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum CurateError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("record {index}: field `{field}`: {message}")]
    Schema {
        index: usize,
        field: String,
        message: String,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

impl CurateError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        CurateError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Region {
    pub description: String,
    pub bbox: PixelBox,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VgRecord {
    pub image_id: String,
    pub image_w: u32,
    pub image_h: u32,
    pub question: String,
    pub answer: String,
    pub qa_box: PixelBox,
    pub regions: Vec<Region>,
}

fn schema(index: usize, field: &str, message: impl Into<String>) -> CurateError {
    CurateError::Schema {
        index,
        field: field.to_owned(),
        message: message.into(),
    }
}

fn get<'a>(obj: &'a Value, index: usize, field: &str) -> Result<&'a Value, CurateError> {
    obj.get(field).ok_or_else(|| schema(index, field, "missing"))
}

fn get_str(obj: &Value, index: usize, field: &str) -> Result<String, CurateError> {
    get(obj, index, field)?
        .as_str()
        .map(str::to_owned)
        .ok_or_else(|| schema(index, field, "expected a string"))
}

fn get_dim(obj: &Value, index: usize, field: &str) -> Result<u32, CurateError> {
    get(obj, index, field)?
        .as_u64()
        .and_then(|v| u32::try_from(v).ok())
        .filter(|&v| v >= 1)
        .ok_or_else(|| schema(index, field, "expected a positive integer"))
}

fn parse_pixel_box(v: &Value, w: u32, h: u32, index: usize, field: &str) -> Result<PixelBox, CurateError> {
    let coords: Vec<u32> = v
        .as_array()
        .filter(|a| a.len() == 4)
        .and_then(|a| a.iter().map(|c| c.as_u64().and_then(|c| u32::try_from(c).ok())).collect())
        .ok_or_else(|| schema(index, field, "expected [x1, y1, x2, y2] non-negative integers"))?;
    PixelBox::new(coords[0], coords[1], coords[2], coords[3], w, h)
        .map_err(|e| schema(index, field, e.to_string()))
}

/// Parses one record of the ingestion schema.
pub fn record_from_value(v: &Value, index: usize) -> Result<VgRecord, CurateError> {
    if !v.is_object() {
        return Err(schema(index, "<record>", "expected a JSON object"));
    }
    let image_id = match get(v, index, "image_id")? {
        Value::String(s) => s.clone(),
        Value::Number(n) => n.to_string(),
        _ => return Err(schema(index, "image_id", "expected a string or number")),
    };
    let image_w = get_dim(v, index, "image_w")?;
    let image_h = get_dim(v, index, "image_h")?;
    let question = get_str(v, index, "question")?;
    let answer = get_str(v, index, "answer")?;
    let qa_box = parse_pixel_box(get(v, index, "qa_box")?, image_w, image_h, index, "qa_box")?;
    let regions = match v.get("regions") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::Array(items)) => items
            .iter()
            .enumerate()
            .map(|(j, r)| {
                let field = format!("regions[{j}]");
                let description = r
                    .get("description")
                    .and_then(Value::as_str)
                    .ok_or_else(|| schema(index, &format!("{field}.description"), "expected a string"))?
                    .to_owned();
                let bbox_value = r
                    .get("box")
                    .ok_or_else(|| schema(index, &format!("{field}.box"), "missing"))?;
                let bbox = parse_pixel_box(bbox_value, image_w, image_h, index, &format!("{field}.box"))?;
                Ok(Region { description, bbox })
            })
            .collect::<Result<_, CurateError>>()?,
        Some(_) => return Err(schema(index, "regions", "expected an array")),
    };
    Ok(VgRecord {
        image_id,
        image_w,
        image_h,
        question,
        answer,
        qa_box,
        regions,
    })
}

/// Streams records from a JSONL file, or from a JSON array when the first
/// non-blank byte is `[`.
pub struct VgStream {
    source: Source,
    index: usize,
}

enum Source {
    Lines(std::io::Lines<BufReader<File>>),
    Array(std::vec::IntoIter<Value>),
}

impl Iterator for VgStream {
    type Item = Result<VgRecord, CurateError>;

    fn next(&mut self) -> Option<Self::Item> {
        let index = self.index;
        let value = match &mut self.source {
            Source::Array(values) => values.next()?,
            Source::Lines(lines) => loop {
                match lines.next()? {
                    Err(e) => {
                        self.index += 1;
                        return Some(Err(CurateError::Io {
                            path: format!("record {index}"),
                            source: e,
                        }));
                    }
                    Ok(line) if line.trim().is_empty() => continue,
                    Ok(line) => match serde_json::from_str(&line) {
                        Ok(v) => break v,
                        Err(e) => {
                            self.index += 1;
                            return Some(Err(schema(index, "<json>", e.to_string())));
                        }
                    },
                }
            },
        };
        self.index += 1;
        Some(record_from_value(&value, index))
    }
}

pub fn load_vg(path: impl AsRef<Path>) -> Result<VgStream, CurateError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| CurateError::io(path, e))?;
    let mut reader = BufReader::new(file);
    let first = loop {
        let buf = reader.fill_buf().map_err(|e| CurateError::io(path, e))?;
        if buf.is_empty() {
            break None;
        }
        match buf.iter().position(|b| !b.is_ascii_whitespace()) {
            Some(i) => break Some(buf[i]),
            None => {
                let n = buf.len();
                reader.consume(n);
            }
        }
    };
    let source = if first == Some(b'[') {
        let mut text = String::new();
        reader.read_to_string(&mut text).map_err(|e| CurateError::io(path, e))?;
        let values: Vec<Value> =
            serde_json::from_str(&text).map_err(|e| schema(0, "<json>", e.to_string()))?;
        Source::Array(values.into_iter())
    } else {
        Source::Lines(reader.lines())
    };
    Ok(VgStream { source, index: 0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurateConfig {
    /// Matching regions overlapping less than this are distinct objects.
    pub iou_threshold: f64,
    pub box_format: BoxFormat,
}

impl Default for CurateConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            box_format: BoxFormat::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    MultipleReferents,
    DegenerateBox,
    SchemaError,
}

impl DropReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            DropReason::MultipleReferents => "multiple_referents",
            DropReason::DegenerateBox => "degenerate_box",
            DropReason::SchemaError => "schema_error",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Kept,
    Dropped(DropReason),
}

fn stem(word: &str) -> String {
    let n = word.len();
    if n > 4 && word.ends_with("ies") {
        format!("{}y", &word[..n - 3])
    } else if word.ends_with("sses") || ["ches", "shes", "xes"].iter().any(|s| word.ends_with(s)) {
        word[..n - 2].to_owned()
    } else if n > 3 && word.ends_with('s') && !["ss", "us", "is"].iter().any(|s| word.ends_with(s)) {
        word[..n - 1].to_owned()
    } else {
        word.to_owned()
    }
}

/// Lowercased, stopword-free, singularized words of `text`.
pub fn content_terms(text: &str) -> BTreeSet<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| w.len() >= 2 && !w.chars().all(|c| c.is_ascii_digit()))
        .filter(|w| !STOPWORDS.contains(w))
        .map(stem)
        .filter(|w| !STOPWORDS.contains(w.as_str()))
        .collect()
}

/// Drops the record when two regions matching the question's terms are
/// different objects.
pub fn filter_ambiguous(rec: &VgRecord, config: &CurateConfig) -> Verdict {
    let terms = content_terms(&rec.question);
    let matching: Vec<&Region> = rec
        .regions
        .iter()
        .filter(|r| !content_terms(&r.description).is_disjoint(&terms))
        .collect();
    let distinct_pair = matching.iter().enumerate().any(|(i, a)| {
        matching[i + 1..]
            .iter()
            .any(|b| a.bbox.iou(&b.bbox) < config.iou_threshold)
    });
    if distinct_pair {
        Verdict::Dropped(DropReason::MultipleReferents)
    } else {
        Verdict::Kept
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurationRecord {
    pub record: VgRecord,
    pub norm_box: NormBox,
    pub conversation: Option<Vec<ConversationMessage>>,
    pub verdict: Verdict,
}

/// Builds the training conversation for a kept record.
///
/// Fails with a degenerate box when the emitted coordinates would collapse,
/// e.g. a one-pixel box once rounded to three decimals.
pub fn reformat(rec: &VgRecord, config: &CurateConfig) -> Result<CurationRecord, CurateError> {
    let norm_box = normalize(&rec.qa_box);
    if let BoxFormat::Normalized { decimals } = config.box_format {
        quantize(&norm_box, decimals)?;
    }
    let conversation = curation_target(
        &rec.question,
        &rec.answer,
        &norm_box,
        config.box_format,
        rec.image_w,
        rec.image_h,
    )?;
    Ok(CurationRecord {
        record: rec.clone(),
        norm_box,
        conversation: Some(conversation),
        verdict: Verdict::Kept,
    })
}

/// One line of the curated output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CuratedSample {
    pub image_id: String,
    pub image_w: u32,
    pub image_h: u32,
    pub question: String,
    pub answer: String,
    pub norm_box: NormBox,
    pub conversation: Vec<ConversationMessage>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CurationSummary {
    pub total: usize,
    pub kept: usize,
    pub dropped_by_reason: BTreeMap<String, usize>,
}

impl CurationSummary {
    pub fn dropped(&self) -> usize {
        self.dropped_by_reason.values().sum()
    }

    fn drop(&mut self, reason: DropReason) {
        *self.dropped_by_reason.entry(reason.as_str().to_owned()).or_default() += 1;
    }
}

fn process(rec: Result<VgRecord, CurateError>, config: &CurateConfig) -> Result<CuratedSample, DropReason> {
    let rec = match rec {
        Ok(r) => r,
        Err(e) => {
            log::warn!("skipping record: {e}");
            return Err(DropReason::SchemaError);
        }
    };
    if let Verdict::Dropped(reason) = filter_ambiguous(&rec, config) {
        return Err(reason);
    }
    match reformat(&rec, config) {
        Ok(c) => Ok(CuratedSample {
            image_id: c.record.image_id,
            image_w: c.record.image_w,
            image_h: c.record.image_h,
            question: c.record.question,
            answer: c.record.answer,
            norm_box: c.norm_box,
            conversation: c.conversation.unwrap_or_default(),
        }),
        Err(CurateError::Geometry(_)) => Err(DropReason::DegenerateBox),
        Err(e) => {
            log::warn!("record {}: {e}", rec.image_id);
            Err(DropReason::SchemaError)
        }
    }
}

/// Filters and reformats every record of `input`, writing kept samples to
/// `output` as JSONL in input order, and the summary to `summary_path`.
pub fn curate_all(
    input: &Path,
    output: &Path,
    summary_path: Option<&Path>,
    config: &CurateConfig,
) -> Result<CurationSummary, CurateError> {
    let mut stream = load_vg(input)?;
    let file = File::create(output).map_err(|e| CurateError::io(output, e))?;
    let mut out = BufWriter::new(file);
    let mut summary = CurationSummary::default();
    loop {
        let chunk: Vec<_> = stream.by_ref().take(CHUNK).collect();
        if chunk.is_empty() {
            break;
        }
        let processed: Vec<_> = chunk.into_par_iter().map(|r| process(r, config)).collect();
        for item in processed {
            summary.total += 1;
            match item {
                Ok(sample) => {
                    summary.kept += 1;
                    serde_json::to_writer(&mut out, &sample).expect("sample serializes");
                    out.write_all(b"\n").map_err(|e| CurateError::io(output, e))?;
                }
                Err(reason) => summary.drop(reason),
            }
        }
    }
    out.flush().map_err(|e| CurateError::io(output, e))?;
    if let Some(path) = summary_path {
        let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
        std::fs::write(path, text + "\n").map_err(|e| CurateError::io(path, e))?;
    }
    Ok(summary)
}
