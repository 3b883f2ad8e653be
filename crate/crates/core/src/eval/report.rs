use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::harness::EvalRecord;
use super::metrics::DimensionTable;
use super::EvalError;

/// Bin edges for `PPL_macro - PPL_micro`. Values below the first edge or at
/// or above the last edge land in open-ended underflow/overflow bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramSpec {
    pub edges: Vec<f64>,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        Self {
            edges: (0..=16).map(|i| -2.0 + 0.25 * i as f64).collect(),
        }
    }
}

impl HistogramSpec {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.edges.len() < 2 {
            return Err(EvalError::InvalidInput("histogram needs at least two edges".into()));
        }
        if self.edges.iter().any(|e| !e.is_finite()) || self.edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(EvalError::InvalidInput("histogram edges must be finite and strictly increasing".into()));
        }
        Ok(())
    }

    fn empty_bins(&self) -> Vec<HistogramBin> {
        let mut bins = Vec::with_capacity(self.edges.len() + 1);
        bins.push(HistogramBin { lo: None, hi: Some(self.edges[0]), count: 0 });
        for w in self.edges.windows(2) {
            bins.push(HistogramBin { lo: Some(w[0]), hi: Some(w[1]), count: 0 });
        }
        bins.push(HistogramBin { lo: self.edges.last().copied(), hi: None, count: 0 });
        bins
    }

    fn bin_index(&self, x: f64) -> usize {
        // Number of edges <= x: 0 is underflow, len is overflow.
        self.edges.partition_point(|&e| e <= x)
    }
}

/// Half-open interval `[lo, hi)`; a missing bound is unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PplPair {
    pub item_id: String,
    pub ppl_macro: f64,
    pub ppl_micro: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PplGroup {
    pub n: usize,
    /// Items where the micro pathway had strictly lower perplexity.
    pub micro_lower: usize,
    /// Mean of `PPL_macro - PPL_micro`.
    pub mean_diff: f64,
    pub histogram: Vec<HistogramBin>,
    pub pairs: Vec<PplPair>,
}

/// Groups `(PPL_macro, PPL_micro)` pairs by dimension tag, or by benchmark
/// when an item has no dimension. Records without both answers are skipped.
pub fn ppl_distribution(
    records: &[EvalRecord],
    spec: &HistogramSpec,
) -> Result<BTreeMap<String, PplGroup>, EvalError> {
    spec.validate()?;
    let mut groups: BTreeMap<String, PplGroup> = BTreeMap::new();
    for rec in records {
        let (Some(m), Some(u)) = (&rec.macro_answer, &rec.micro_answer) else {
            continue;
        };
        let tag = rec
            .item
            .tags
            .dimension
            .clone()
            .unwrap_or_else(|| rec.item.tags.benchmark.clone());
        let g = groups.entry(tag).or_insert_with(|| PplGroup {
            n: 0,
            micro_lower: 0,
            mean_diff: 0.0,
            histogram: spec.empty_bins(),
            pairs: Vec::new(),
        });
        let diff = m.ppl - u.ppl;
        g.n += 1;
        g.micro_lower += usize::from(u.ppl < m.ppl);
        g.histogram[spec.bin_index(diff)].count += 1;
        g.pairs.push(PplPair {
            item_id: rec.item.item_id.clone(),
            ppl_macro: m.ppl,
            ppl_micro: u.ppl,
        });
    }
    for g in groups.values_mut() {
        g.mean_diff = g.pairs.iter().map(|p| p.ppl_macro - p.ppl_micro).sum::<f64>() / g.n as f64;
    }
    Ok(groups)
}

fn csv_bytes(f: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>) -> Result<String, EvalError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    f(&mut w).map_err(|e| EvalError::InvalidInput(e.to_string()))?;
    let bytes = w.into_inner().map_err(|e| EvalError::InvalidInput(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| EvalError::InvalidInput(e.to_string()))
}

fn cell(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

/// One row per dimension: `n_<run>`, `acc_<run>` for each run, then one
/// `delta_<a>-<b>` column per comparison.
pub fn dimension_table_csv(table: &DimensionTable) -> Result<String, EvalError> {
    csv_bytes(|w| {
        let mut header = vec!["dimension".to_owned()];
        for r in &table.runs {
            header.push(format!("n_{r}"));
            header.push(format!("acc_{r}"));
        }
        if let Some(row) = table.rows.first() {
            header.extend(row.deltas.iter().map(|(l, _)| format!("delta_{l}")));
        }
        w.write_record(&header)?;
        for row in &table.rows {
            let mut rec = vec![row.dimension.clone()];
            for c in &row.cells {
                rec.push(c.map(|c| c.n.to_string()).unwrap_or_default());
                rec.push(cell(c.map(|c| c.accuracy)));
            }
            rec.extend(row.deltas.iter().map(|(_, d)| cell(*d)));
            w.write_record(&rec)?;
        }
        Ok(())
    })
}

/// Long format: `tag,lo,hi,count`, empty bounds for open bins.
pub fn ppl_histogram_csv(groups: &BTreeMap<String, PplGroup>) -> Result<String, EvalError> {
    csv_bytes(|w| {
        w.write_record(["tag", "lo", "hi", "count"])?;
        for (tag, g) in groups {
            for b in &g.histogram {
                w.write_record([tag.clone(), cell(b.lo), cell(b.hi), b.count.to_string()])?;
            }
        }
        Ok(())
    })
}
