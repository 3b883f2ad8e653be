//! Benchmark items, answer matching, metrics and reports.

mod harness;
mod metrics;
mod report;

use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::PipelineError;

pub use harness::{load_records, run_benchmark, BenchmarkRun, EvalMode, EvalRecord, RunMode};
pub use metrics::{
    dimension_breakdown, pope_metrics, pope_split_metrics, score_records, Confusion, DimensionRow,
    DimensionTable, Metrics, MetricsReport, PopeObservation, PopeScores, RateCell,
};
pub use report::{
    dimension_table_csv, ppl_distribution, ppl_histogram_csv, HistogramBin, HistogramSpec, PplGroup,
    PplPair,
};

/// Version of the answer-matching rules, recorded in every report.
pub const MATCH_RULES_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("item {item_id}: {message}")]
    InvalidItem { item_id: String, message: String },
    #[error("split {0} has no items")]
    EmptySplit(PopeSplit),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PopeSplit {
    Adversarial,
    Popular,
    Random,
    #[default]
    None,
}

impl fmt::Display for PopeSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PopeSplit::Adversarial => "adversarial",
            PopeSplit::Popular => "popular",
            PopeSplit::Random => "random",
            PopeSplit::None => "none",
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tags {
    pub benchmark: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dimension: Option<String>,
    pub pope_split: PopeSplit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerOption {
    pub letter: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalItem {
    pub item_id: String,
    pub image: PathBuf,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<AnswerOption>>,
    pub gold: String,
    #[serde(default)]
    pub tags: Tags,
}

impl EvalItem {
    pub fn validate(&self) -> Result<(), EvalError> {
        let invalid = |message: String| EvalError::InvalidItem {
            item_id: self.item_id.clone(),
            message,
        };
        if self.question.trim().is_empty() {
            return Err(invalid("empty question".into()));
        }
        if let Some(options) = &self.options {
            for o in options {
                if o.letter.chars().count() != 1 || !o.letter.chars().all(|c| c.is_ascii_alphabetic()) {
                    return Err(invalid(format!("option letter {:?} is not a single letter", o.letter)));
                }
            }
            if !options.iter().any(|o| o.letter.eq_ignore_ascii_case(&self.gold)) {
                return Err(invalid(format!("gold {:?} is not an option letter", self.gold)));
            }
        }
        if self.tags.pope_split != PopeSplit::None && yes_no(&self.gold).is_none() {
            return Err(invalid(format!("POPE gold {:?} is not yes/no", self.gold)));
        }
        Ok(())
    }

    /// Text sent to the model: the question, then one `X. text` line per option.
    pub fn prompt(&self) -> String {
        let mut p = self.question.trim().to_owned();
        for o in self.options.iter().flatten() {
            p.push_str(&format!("\n{}. {}", o.letter.to_ascii_uppercase(), o.text));
        }
        p
    }

    pub fn dimension(&self) -> &str {
        self.tags.dimension.as_deref().unwrap_or("untagged")
    }
}

/// Reads a JSONL benchmark file. Relative image paths resolve against the
/// file's directory.
pub fn load_items(path: impl AsRef<Path>) -> Result<Vec<EvalItem>, EvalError> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| EvalError::Io {
        path: shown.clone(),
        source,
    })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut items = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| EvalError::Io {
            path: shown.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut item: EvalItem = serde_json::from_str(&line).map_err(|e| EvalError::Parse {
            path: shown.clone(),
            line: i + 1,
            message: e.to_string(),
        })?;
        item.validate()?;
        if item.image.is_relative() {
            item.image = base.join(&item.image);
        }
        items.push(item);
    }
    Ok(items)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMethod {
    /// An option letter was found in the prediction.
    Letter,
    /// The prediction equals an option's text after normalization.
    OptionText,
    Exact,
    YesNo,
    Unmatched,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchOutcome {
    pub correct: bool,
    pub method: MatchMethod,
    /// Decided by something looser than a letter or exact match.
    pub fuzzy: bool,
}

/// Lowercase, punctuation stripped, whitespace collapsed.
pub fn normalize_answer(s: &str) -> String {
    s.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Maps an answer to yes/no by its first word.
pub fn yes_no(s: &str) -> Option<bool> {
    match normalize_answer(s).split(' ').next() {
        Some("yes") => Some(true),
        Some("no") => Some(false),
        _ => None,
    }
}

/// First option letter standing alone in `prediction`: bracketed (`(b)`),
/// uppercase and delimited (`B`, `B.`), lowercase followed by `.`, `)` or
/// `:`, or the whole prediction.
pub fn extract_letter(prediction: &str, letters: &[char]) -> Option<char> {
    let chars: Vec<char> = prediction.trim().chars().collect();
    let is_word = |c: Option<&char>| c.is_some_and(|c| c.is_alphanumeric());
    for (i, &c) in chars.iter().enumerate() {
        if !c.is_ascii_alphabetic() {
            continue;
        }
        let prev = if i == 0 { None } else { chars.get(i - 1) };
        let next = chars.get(i + 1);
        if is_word(prev) || is_word(next) {
            continue;
        }
        let upper = c.to_ascii_uppercase();
        if !letters.contains(&upper) {
            continue;
        }
        let bracketed = matches!(prev, Some('(' | '[')) && matches!(next, Some(')' | ']'));
        let marked = matches!(next, Some('.' | ')' | ':'));
        let alone = chars.len() == 1 || (chars.len() == 2 && i == 0 && matches!(next, Some('.')));
        if bracketed || c.is_ascii_uppercase() || marked || alone {
            return Some(upper);
        }
    }
    None
}

pub fn match_detail(prediction: &str, item: &EvalItem) -> MatchOutcome {
    if item.tags.pope_split != PopeSplit::None {
        let pred = yes_no(prediction).unwrap_or(false);
        return MatchOutcome {
            correct: Some(pred) == yes_no(&item.gold),
            method: if yes_no(prediction).is_some() { MatchMethod::YesNo } else { MatchMethod::Unmatched },
            fuzzy: false,
        };
    }
    if let Some(options) = &item.options {
        let letters: Vec<char> = options
            .iter()
            .filter_map(|o| o.letter.chars().next())
            .map(|c| c.to_ascii_uppercase())
            .collect();
        let gold = item.gold.to_ascii_uppercase().chars().next();
        if let Some(letter) = extract_letter(prediction, &letters) {
            return MatchOutcome {
                correct: Some(letter) == gold,
                method: MatchMethod::Letter,
                fuzzy: false,
            };
        }
        let norm = normalize_answer(prediction);
        if let Some(o) = options.iter().find(|o| normalize_answer(&o.text) == norm) {
            return MatchOutcome {
                correct: o.letter.eq_ignore_ascii_case(&item.gold),
                method: MatchMethod::OptionText,
                fuzzy: true,
            };
        }
        return MatchOutcome {
            correct: false,
            method: MatchMethod::Unmatched,
            fuzzy: false,
        };
    }
    let correct = normalize_answer(prediction) == normalize_answer(&item.gold);
    MatchOutcome {
        correct,
        method: if correct { MatchMethod::Exact } else { MatchMethod::Unmatched },
        fuzzy: false,
    }
}

pub fn match_answer(prediction: &str, item: &EvalItem) -> bool {
    match_detail(prediction, item).correct
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn mc_item(gold: &str) -> EvalItem {
        EvalItem {
            item_id: "1".into(),
            image: "img.png".into(),
            question: "Which car is parked?".into(),
            options: Some(
                [("A", "blue truck"), ("B", "red car"), ("C", "green van"), ("D", "bike")]
                    .iter()
                    .map(|(l, t)| AnswerOption { letter: (*l).into(), text: (*t).into() })
                    .collect(),
            ),
            gold: gold.into(),
            tags: Tags::default(),
        }
    }

    #[test]
    fn multiple_choice_matching() {
        let item = mc_item("B");
        assert!(match_answer("B", &item));
        assert!(match_answer("The answer is (b) red car.", &item));
        assert!(!match_answer("maybe", &item));
        assert!(match_answer("B. red car", &item));
        assert!(match_answer("b)", &item));
        assert!(!match_answer("A", &item));
        // "I" is a standalone capital but not an option letter
        assert!(match_answer("I think B", &item));
        // lowercase article is not a letter pick
        assert!(!match_answer("a bike", &item));

        let by_text = match_detail("Red car!", &item);
        assert_eq!(by_text, MatchOutcome { correct: true, method: MatchMethod::OptionText, fuzzy: true });
    }

    #[test]
    fn open_ended_matching() {
        let mut item = mc_item("B");
        item.options = None;
        item.gold = "Stop sign".into();
        assert!(match_answer("stop sign.", &item));
        assert!(!match_answer("a stop sign", &item));
    }

    #[test]
    fn yes_no_matching() {
        let mut item = mc_item("B");
        item.options = None;
        item.gold = "yes".into();
        item.tags.pope_split = PopeSplit::Random;
        assert!(match_answer("Yes, there is a dog.", &item));
        assert!(!match_answer("No.", &item));
        let unsure = match_detail("I cannot tell", &item);
        assert!(!unsure.correct);
        assert_eq!(unsure.method, MatchMethod::Unmatched);
    }

    #[test]
    fn validation() {
        assert!(mc_item("B").validate().is_ok());
        assert!(mc_item("E").validate().is_err());
        let mut pope = mc_item("B");
        pope.options = None;
        pope.tags.pope_split = PopeSplit::Adversarial;
        assert!(pope.validate().is_err());
        pope.gold = "no".into();
        assert!(pope.validate().is_ok());
    }

    #[test]
    fn prompt_lists_options() {
        assert_eq!(
            mc_item("B").prompt(),
            "Which car is parked?\nA. blue truck\nB. red car\nC. green van\nD. bike"
        );
    }

    #[test]
    fn load_items_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("items.jsonl");
        let good = serde_json::to_string(&mc_item("B")).unwrap();
        std::fs::write(&path, format!("{good}\n\n{{\"item_id\": 3}}\n")).unwrap();
        match load_items(&path) {
            Err(EvalError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        std::fs::write(&path, format!("{good}\n")).unwrap();
        let items = load_items(&path).unwrap();
        assert_eq!(items[0].image, dir.path().join("img.png"));
    }
}
