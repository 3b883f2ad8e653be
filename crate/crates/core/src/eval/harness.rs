use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::metrics::{score_records, MetricsReport};
use super::{match_detail, EvalError, EvalItem, MatchMethod};
use crate::geometry::NormBox;
use crate::imageops::ImageBuf;
use crate::pipeline::{
    map_batch, run_ensemble, BatchConfig, EnsembleMember, EnsembleScoring, Engine, PipelineError,
    RunManifest, ScoredAnswer, SelectionReason,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Macro,
    Micro,
    Dual,
    Ensemble,
}

impl EvalMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            EvalMode::Macro => "macro",
            EvalMode::Micro => "micro",
            EvalMode::Dual => "dual",
            EvalMode::Ensemble => "ensemble",
        }
    }
}

impl std::str::FromStr for EvalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "macro" => Ok(EvalMode::Macro),
            "micro" => Ok(EvalMode::Micro),
            "dual" => Ok(EvalMode::Dual),
            "ensemble" => Ok(EvalMode::Ensemble),
            other => Err(format!("unknown mode {other:?} (expected macro, micro, dual or ensemble)")),
        }
    }
}

/// What to execute per benchmark item.
pub enum RunMode {
    Macro,
    Micro,
    Dual,
    Ensemble {
        members: Vec<EnsembleMember>,
        scoring: EnsembleScoring,
    },
}

impl RunMode {
    pub fn mode(&self) -> EvalMode {
        match self {
            RunMode::Macro => EvalMode::Macro,
            RunMode::Micro => EvalMode::Micro,
            RunMode::Dual => EvalMode::Dual,
            RunMode::Ensemble { .. } => EvalMode::Ensemble,
        }
    }
}

/// Per-item outcome line of a results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub item: EvalItem,
    pub mode: EvalMode,
    pub prediction: Option<String>,
    pub correct: bool,
    pub match_method: MatchMethod,
    #[serde(default)]
    pub fuzzy_match: bool,
    #[serde(rename = "macro", default, skip_serializing_if = "Option::is_none")]
    pub macro_answer: Option<ScoredAnswer>,
    #[serde(rename = "micro", default, skip_serializing_if = "Option::is_none")]
    pub micro_answer: Option<ScoredAnswer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_box: Option<NormBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection_reason: Option<SelectionReason>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<ScoredAnswer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub micro_failure: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl EvalRecord {
    fn empty(item: &EvalItem, mode: EvalMode) -> Self {
        Self {
            item: item.clone(),
            mode,
            prediction: None,
            correct: false,
            match_method: MatchMethod::Unmatched,
            fuzzy_match: false,
            macro_answer: None,
            micro_answer: None,
            predicted_box: None,
            selection_reason: None,
            candidates: Vec::new(),
            micro_failure: None,
            error: None,
        }
    }

    fn scored(mut self, prediction: String) -> Self {
        let outcome = match_detail(&prediction, &self.item);
        self.correct = outcome.correct;
        self.match_method = outcome.method;
        self.fuzzy_match = outcome.fuzzy;
        self.prediction = Some(prediction);
        self
    }
}

pub struct BenchmarkRun {
    pub records: Vec<EvalRecord>,
    pub report: MetricsReport,
}

fn run_item(item: &EvalItem, mode: &RunMode, engine: &Engine<'_>) -> Result<EvalRecord, PipelineError> {
    let img: Arc<ImageBuf> = crate::pipeline::ImageSource::Path(item.image.clone()).load()?;
    let prompt = item.prompt();
    let mut rec = EvalRecord::empty(item, mode.mode());
    let prediction = match mode {
        RunMode::Macro => {
            let a = engine.run_macro(&img, &prompt)?;
            let text = a.text.clone();
            rec.macro_answer = Some(a);
            text
        }
        RunMode::Micro => {
            let (a, b) = engine.run_micro(&img, &prompt)?;
            let text = a.text.clone();
            rec.micro_answer = Some(a);
            rec.predicted_box = Some(b);
            text
        }
        RunMode::Dual => {
            let d = engine.run_dual(&img, &prompt)?;
            rec.macro_answer = Some(d.macro_answer);
            rec.micro_answer = d.micro_answer;
            rec.predicted_box = d.predicted_box;
            rec.selection_reason = Some(d.selection_reason);
            rec.micro_failure = d.micro_failure;
            d.chosen
        }
        RunMode::Ensemble { members, scoring } => {
            let e = run_ensemble(members, *scoring, &engine.params, &img, &prompt)?;
            rec.candidates = e.candidates;
            e.chosen
        }
    };
    Ok(rec.scored(prediction))
}

/// Runs every item through `mode` and scores the predictions. Items that
/// fail are kept in the output, marked with their error and scored wrong.
pub fn run_benchmark(
    items: &[EvalItem],
    mode: &RunMode,
    engine: &Engine<'_>,
    batch: &BatchConfig,
) -> Result<BenchmarkRun, EvalError> {
    for item in items {
        item.validate()?;
    }
    let backend_id = match mode {
        RunMode::Ensemble { members, .. } => members
            .iter()
            .map(|m| format!("{}={}", m.id, m.backend.id()))
            .collect::<Vec<_>>()
            .join(","),
        _ => engine.backend.id(),
    };
    let out = map_batch(items, |i| i.item_id.clone(), backend_id, batch, |item| {
        run_item(item, mode, engine)
    })?;
    let records: Vec<EvalRecord> = out
        .results
        .into_iter()
        .zip(items)
        .map(|(r, item)| {
            r.unwrap_or_else(|failure| {
                let mut rec = EvalRecord::empty(item, mode.mode());
                rec.error = Some(failure.error);
                rec
            })
        })
        .collect();
    let report = report_for(&records, mode.mode(), out.manifest);
    Ok(BenchmarkRun { records, report })
}

fn report_for(records: &[EvalRecord], mode: EvalMode, manifest: RunManifest) -> MetricsReport {
    MetricsReport {
        metrics: score_records(records, mode),
        config_hash: Some(manifest.config_hash.clone()),
        manifest: Some(manifest),
    }
}

/// Reads a results JSONL file, reporting the first bad line.
pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<EvalRecord>, EvalError> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| EvalError::Io {
        path: shown.clone(),
        source,
    })?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| EvalError::Io {
            path: shown.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| EvalError::Parse {
            path: shown.clone(),
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(rec);
    }
    if records.is_empty() {
        return Err(EvalError::Parse {
            path: shown,
            line: 0,
            message: "no records".into(),
        });
    }
    Ok(records)
}
