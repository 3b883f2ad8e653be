use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::harness::{EvalMode, EvalRecord};
use super::{yes_no, EvalError, PopeSplit, MATCH_RULES_VERSION};
use crate::pipeline::RunManifest;

/// Binary confusion counts with "yes" as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    /// `2TP / (2TP + FP + FN)`; 1.0 when there are no positives at all,
    /// since nothing was misclassified on the positive class.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }

    fn add(&mut self, gold_yes: bool, pred_yes: bool) {
        match (gold_yes, pred_yes) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
            (true, false) => self.fn_ += 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PopeObservation {
    pub split: PopeSplit,
    pub gold_yes: bool,
    pub pred_yes: bool,
    /// The prediction was neither yes nor no and was counted as "no".
    pub unparseable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopeScores {
    #[serde(flatten)]
    pub confusion: Confusion,
    pub f1: f64,
    pub accuracy: f64,
    pub unparseable: usize,
}

/// Scores for one split. Observations from other splits are ignored.
pub fn pope_split_metrics(split: PopeSplit, observations: &[PopeObservation]) -> Result<PopeScores, EvalError> {
    let mut confusion = Confusion::default();
    let mut unparseable = 0;
    for o in observations.iter().filter(|o| o.split == split) {
        confusion.add(o.gold_yes, o.pred_yes);
        unparseable += usize::from(o.unparseable);
    }
    if confusion.total() == 0 {
        return Err(EvalError::EmptySplit(split));
    }
    Ok(PopeScores {
        confusion,
        f1: confusion.f1(),
        accuracy: confusion.accuracy(),
        unparseable,
    })
}

/// Scores for every split that has observations.
pub fn pope_metrics(observations: &[PopeObservation]) -> BTreeMap<PopeSplit, PopeScores> {
    let mut splits: Vec<PopeSplit> = observations.iter().map(|o| o.split).collect();
    splits.sort();
    splits.dedup();
    splits
        .into_iter()
        .filter_map(|s| pope_split_metrics(s, observations).ok().map(|m| (s, m)))
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RateCell {
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
}

impl RateCell {
    fn add(&mut self, correct: bool) {
        self.n += 1;
        self.correct += usize::from(correct);
        self.accuracy = self.correct as f64 / self.n as f64;
    }
}

/// Everything that can be recomputed from a results file alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mode: EvalMode,
    pub match_rules_version: String,
    pub total: usize,
    pub answered: usize,
    pub failed: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub fuzzy_matches: usize,
    pub per_dimension: BTreeMap<String, RateCell>,
    pub per_benchmark: BTreeMap<String, RateCell>,
    pub pope: BTreeMap<PopeSplit, PopeScores>,
    pub selection_reasons: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(flatten)]
    pub metrics: Metrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<RunManifest>,
}

fn pope_observation(rec: &EvalRecord) -> Option<PopeObservation> {
    if rec.item.tags.pope_split == PopeSplit::None {
        return None;
    }
    let pred = rec.prediction.as_deref().and_then(yes_no);
    Some(PopeObservation {
        split: rec.item.tags.pope_split,
        gold_yes: yes_no(&rec.item.gold) == Some(true),
        pred_yes: pred == Some(true),
        unparseable: pred.is_none(),
    })
}

/// Aggregates a run's records. Failed items count as incorrect.
pub fn score_records(records: &[EvalRecord], mode: EvalMode) -> Metrics {
    let mut per_dimension: BTreeMap<String, RateCell> = BTreeMap::new();
    let mut per_benchmark: BTreeMap<String, RateCell> = BTreeMap::new();
    let mut selection_reasons: BTreeMap<String, usize> = BTreeMap::new();
    let mut correct = 0;
    let mut failed = 0;
    let mut fuzzy = 0;
    for rec in records {
        correct += usize::from(rec.correct);
        failed += usize::from(rec.error.is_some());
        fuzzy += usize::from(rec.fuzzy_match);
        per_dimension.entry(rec.item.dimension().to_owned()).or_default().add(rec.correct);
        per_benchmark.entry(rec.item.tags.benchmark.clone()).or_default().add(rec.correct);
        if let Some(reason) = rec.selection_reason {
            let key = serde_json::to_value(reason)
                .ok()
                .and_then(|v| v.as_str().map(str::to_owned))
                .unwrap_or_default();
            *selection_reasons.entry(key).or_default() += 1;
        }
    }
    let observations: Vec<PopeObservation> = records.iter().filter_map(pope_observation).collect();
    Metrics {
        mode,
        match_rules_version: MATCH_RULES_VERSION.to_owned(),
        total: records.len(),
        answered: records.len() - failed,
        failed,
        correct,
        accuracy: if records.is_empty() { 0.0 } else { correct as f64 / records.len() as f64 },
        fuzzy_matches: fuzzy,
        per_dimension,
        per_benchmark,
        pope: pope_metrics(&observations),
        selection_reasons,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionRow {
    pub dimension: String,
    /// One entry per run, aligned with [`DimensionTable::runs`].
    pub cells: Vec<Option<RateCell>>,
    /// `(label, rate(run) - rate(baseline))` for each non-baseline run.
    pub deltas: Vec<(String, Option<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionTable {
    pub runs: Vec<String>,
    pub rows: Vec<DimensionRow>,
}

/// Per-dimension accuracy for each labelled run, with deltas of every run
/// against the first.
pub fn dimension_breakdown(runs: &[(String, &[EvalRecord])]) -> DimensionTable {
    let mut labels: Vec<String> = Vec::with_capacity(runs.len());
    for (label, _) in runs {
        let mut l = label.clone();
        let mut k = 2;
        while labels.contains(&l) {
            l = format!("{label}#{k}");
            k += 1;
        }
        labels.push(l);
    }
    let per_run: Vec<BTreeMap<String, RateCell>> = runs
        .iter()
        .map(|(_, recs)| {
            let mut m: BTreeMap<String, RateCell> = BTreeMap::new();
            for r in recs.iter() {
                m.entry(r.item.dimension().to_owned()).or_default().add(r.correct);
            }
            m
        })
        .collect();
    let mut dims: Vec<&String> = per_run.iter().flat_map(|m| m.keys()).collect();
    dims.sort();
    dims.dedup();
    let rows = dims
        .into_iter()
        .map(|d| {
            let cells: Vec<Option<RateCell>> = per_run.iter().map(|m| m.get(d).copied()).collect();
            let base = cells.first().copied().flatten().map(|c| c.accuracy);
            let deltas = cells
                .iter()
                .enumerate()
                .skip(1)
                .map(|(i, c)| {
                    let delta = match (c, base) {
                        (Some(c), Some(b)) => Some(c.accuracy - b),
                        _ => None,
                    };
                    (format!("{}-{}", labels[i], labels[0]), delta)
                })
                .collect();
            DimensionRow {
                dimension: d.clone(),
                cells,
                deltas,
            }
        })
        .collect();
    DimensionTable { runs: labels, rows }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{EvalItem, MatchMethod, Tags};
    use proptest::prelude::*;

    fn obs(split: PopeSplit, gold_yes: bool, pred_yes: bool) -> PopeObservation {
        PopeObservation { split, gold_yes, pred_yes, unparseable: false }
    }

    fn counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Vec<PopeObservation> {
        let mut v = Vec::new();
        v.extend(std::iter::repeat_n(obs(PopeSplit::Random, true, true), tp));
        v.extend(std::iter::repeat_n(obs(PopeSplit::Random, false, true), fp));
        v.extend(std::iter::repeat_n(obs(PopeSplit::Random, true, false), fn_));
        v.extend(std::iter::repeat_n(obs(PopeSplit::Random, false, false), tn));
        v
    }

    #[test]
    fn worked_confusion() {
        let m = pope_split_metrics(PopeSplit::Random, &counts(9, 1, 1, 9)).unwrap();
        assert_eq!(m.f1, 0.9);
        assert_eq!(m.accuracy, 0.9);
        let perfect = pope_split_metrics(PopeSplit::Random, &counts(5, 0, 0, 5)).unwrap();
        assert_eq!((perfect.f1, perfect.accuracy), (1.0, 1.0));
        assert!(matches!(
            pope_split_metrics(PopeSplit::Popular, &counts(1, 1, 1, 1)),
            Err(EvalError::EmptySplit(PopeSplit::Popular))
        ));
    }

    #[test]
    fn splits_kept_apart() {
        let mut all = counts(3, 0, 0, 3);
        all.push(obs(PopeSplit::Adversarial, true, false));
        let m = pope_metrics(&all);
        assert_eq!(m.len(), 2);
        assert_eq!(m[&PopeSplit::Random].accuracy, 1.0);
        assert_eq!(m[&PopeSplit::Adversarial].accuracy, 0.0);
        assert_eq!(m[&PopeSplit::Adversarial].f1, 0.0);
    }

    fn record(dim: &str, correct: bool) -> EvalRecord {
        EvalRecord {
            item: EvalItem {
                item_id: "x".into(),
                image: "x.png".into(),
                question: "q".into(),
                options: None,
                gold: "g".into(),
                tags: Tags { benchmark: "b".into(), dimension: Some(dim.into()), ..Default::default() },
            },
            mode: EvalMode::Macro,
            prediction: Some(if correct { "g" } else { "h" }.into()),
            correct,
            match_method: if correct { MatchMethod::Exact } else { MatchMethod::Unmatched },
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

    #[test]
    fn breakdown_rates_and_deltas() {
        let macro_run: Vec<_> = [("attr", true), ("attr", false), ("attr", false), ("attr", false), ("scene", true), ("scene", true)]
            .iter()
            .map(|&(d, c)| record(d, c))
            .collect();
        let dual_run: Vec<_> = [("attr", true), ("attr", true), ("attr", true), ("attr", false), ("scene", true), ("scene", false)]
            .iter()
            .map(|&(d, c)| record(d, c))
            .collect();
        let table = dimension_breakdown(&[("macro".into(), &macro_run), ("dual".into(), &dual_run)]);
        assert_eq!(table.runs, ["macro", "dual"]);
        let attr = &table.rows[0];
        assert_eq!(attr.dimension, "attr");
        assert_eq!(attr.cells[0].unwrap().accuracy, 0.25);
        assert_eq!(attr.cells[1].unwrap().accuracy, 0.75);
        assert_eq!(attr.deltas, [("dual-macro".to_owned(), Some(0.5))]);
        let scene = &table.rows[1];
        assert_eq!(scene.deltas, [("dual-macro".to_owned(), Some(-0.5))]);
    }

    #[test]
    fn single_dimension_equals_overall() {
        let run: Vec<_> = [true, false, true].iter().map(|&c| record("only", c)).collect();
        let table = dimension_breakdown(&[("dual".into(), &run)]);
        assert_eq!(table.rows.len(), 1);
        let overall = score_records(&run, EvalMode::Dual);
        assert_eq!(table.rows[0].cells[0].unwrap().accuracy, overall.accuracy);
    }

    #[test]
    fn duplicate_labels_disambiguated() {
        let run = vec![record("d", true)];
        let table = dimension_breakdown(&[("dual".into(), &run), ("dual".into(), &run)]);
        assert_eq!(table.runs, ["dual", "dual#2"]);
    }

    proptest! {
        #[test]
        fn confusion_matches_counting_oracle(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..200)) {
            let observations: Vec<_> = pairs.iter().map(|&(g, p)| obs(PopeSplit::Random, g, p)).collect();
            let m = pope_split_metrics(PopeSplit::Random, &observations).unwrap();
            let tp = pairs.iter().filter(|&&(g, p)| g && p).count();
            let fp = pairs.iter().filter(|&&(g, p)| !g && p).count();
            let fn_ = pairs.iter().filter(|&&(g, p)| g && !p).count();
            let agree = pairs.iter().filter(|&&(g, p)| g == p).count();
            prop_assert_eq!(m.accuracy, agree as f64 / pairs.len() as f64);
            let expected_f1 = if 2 * tp + fp + fn_ == 0 { 1.0 } else { (2 * tp) as f64 / (2 * tp + fp + fn_) as f64 };
            prop_assert_eq!(m.f1, expected_f1);
            prop_assert!((0.0..=1.0).contains(&m.f1) && (0.0..=1.0).contains(&m.accuracy));
        }
    }
}
