//! The dual-path engine.
//!
//! The macro pathway answers from the full image. The micro pathway first
//! asks the model for the relevant region, crops and zooms it, then answers
//! with both views in context. Whichever answer has the lower perplexity
//! wins; ties go to the micro answer.

use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, GenParams, TokenLogprob};
use crate::boxparse::{parse_box, BoxParseError};
use crate::geometry::NormBox;
use crate::imageops::{crop_and_zoom, load_image, ImageBuf, ImageOpsError, ZoomPolicy};
use crate::prompting::{build_box_query, build_macro, extend_micro, PromptError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("answer has no tokens")]
    EmptyAnswer,
    #[error("box prediction failed on {raw:?}: {reason}")]
    BoxPredictionFailed { raw: String, reason: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Image(#[from] ImageOpsError),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Perplexity of an answer: `exp(-mean(logprob))`.
pub fn perplexity(tokens: &[TokenLogprob]) -> Result<f64, PipelineError> {
    if tokens.is_empty() {
        return Err(PipelineError::EmptyAnswer);
    }
    let total: f64 = tokens.iter().map(|t| t.logprob).sum();
    Ok((-total / tokens.len() as f64).exp())
}

/// Which pathway (or ensemble member) produced an answer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Pathway {
    Macro,
    Micro,
    Member(String),
}

impl fmt::Display for Pathway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Pathway::Macro => f.write_str("macro"),
            Pathway::Micro => f.write_str("micro"),
            Pathway::Member(id) => write!(f, "member:{id}"),
        }
    }
}

impl From<Pathway> for String {
    fn from(p: Pathway) -> Self {
        p.to_string()
    }
}

impl TryFrom<String> for Pathway {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        match s.as_str() {
            "macro" => Ok(Pathway::Macro),
            "micro" => Ok(Pathway::Micro),
            other => other
                .strip_prefix("member:")
                .map(|id| Pathway::Member(id.to_owned()))
                .ok_or_else(|| format!("unknown pathway {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredAnswer {
    pub text: String,
    pub tokens: Vec<TokenLogprob>,
    pub ppl: f64,
    pub pathway: Pathway,
}

impl ScoredAnswer {
    pub fn new(text: String, tokens: Vec<TokenLogprob>, pathway: Pathway) -> Result<Self, PipelineError> {
        let ppl = perplexity(&tokens)?;
        Ok(Self {
            text,
            tokens,
            ppl,
            pathway,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionReason {
    MicroLowerPpl,
    MacroLowerPpl,
    MicroFailedFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualResult {
    #[serde(rename = "macro")]
    pub macro_answer: ScoredAnswer,
    #[serde(rename = "micro")]
    pub micro_answer: Option<ScoredAnswer>,
    pub predicted_box: Option<NormBox>,
    pub chosen: String,
    pub selection_reason: SelectionReason,
    /// Why the micro pathway was abandoned, when it was.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub micro_failure: Option<String>,
}

/// Macro answer unless its perplexity is strictly lower than the micro one.
pub fn select<'a>(macro_answer: &'a ScoredAnswer, micro_answer: &'a ScoredAnswer) -> (&'a str, SelectionReason) {
    if macro_answer.ppl < micro_answer.ppl {
        (&macro_answer.text, SelectionReason::MacroLowerPpl)
    } else {
        (&micro_answer.text, SelectionReason::MicroLowerPpl)
    }
}

/// Index of the lowest-perplexity candidate; earlier candidates win ties.
pub fn ppl_ensemble(candidates: &[ScoredAnswer]) -> Result<usize, PipelineError> {
    if candidates.len() < 2 {
        return Err(PipelineError::InvalidInput(format!(
            "ensemble needs at least 2 candidates, got {}",
            candidates.len()
        )));
    }
    let mut best = 0;
    for (i, c) in candidates.iter().enumerate().skip(1) {
        if c.ppl < candidates[best].ppl {
            best = i;
        }
    }
    Ok(best)
}

/// One participant of a PPL ensemble: a backend plus a prompt template in
/// which `{question}` is replaced by the question.
#[derive(Clone)]
pub struct EnsembleMember {
    pub id: String,
    pub backend: Arc<dyn Backend>,
    pub template: String,
}

impl EnsembleMember {
    pub fn prompt(&self, question: &str) -> String {
        self.template.replace("{question}", question.trim())
    }
}

/// How ensemble candidates are made comparable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnsembleScoring {
    /// Each candidate keeps the logprobs it was generated with.
    OwnGeneration,
    /// Every candidate is re-scored under one member's context.
    CrossScore { judge: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleResult {
    pub candidates: Vec<ScoredAnswer>,
    pub chosen_index: usize,
    pub chosen: String,
    pub scoring: EnsembleScoring,
}

/// Runs pathways for one image/question pair against a single backend.
pub struct Engine<'a> {
    pub backend: &'a dyn Backend,
    pub zoom: ZoomPolicy,
    pub params: GenParams,
}

impl<'a> Engine<'a> {
    pub fn new(backend: &'a dyn Backend, zoom: ZoomPolicy, params: GenParams) -> Self {
        Self {
            backend,
            zoom,
            params,
        }
    }

    pub fn run_macro(&self, img: &Arc<ImageBuf>, question: &str) -> Result<ScoredAnswer, PipelineError> {
        let ctx = build_macro(img.clone(), question)?;
        let out = self.backend.generate(&ctx, &self.params)?;
        ScoredAnswer::new(out.text, out.tokens, Pathway::Macro)
    }

    /// Box query, crop and zoom, then the two-image answer.
    pub fn run_micro(
        &self,
        img: &Arc<ImageBuf>,
        question: &str,
    ) -> Result<(ScoredAnswer, NormBox), PipelineError> {
        let query = build_box_query(img.clone(), question)?;
        let box_reply = self.backend.generate(&query, &self.params)?;
        let failed = |reason: String| PipelineError::BoxPredictionFailed {
            raw: box_reply.text.clone(),
            reason,
        };
        let parsed = parse_box(&box_reply.text, img.width(), img.height()).map_err(|e| failed(e.to_string()))?;
        let sub = match crop_and_zoom(img, &parsed.bbox, &self.zoom) {
            Ok(sub) => sub,
            Err(ImageOpsError::Geometry(e)) => return Err(failed(BoxParseError::Degenerate(e).to_string())),
            Err(e) => return Err(e.into()),
        };
        let ctx = extend_micro(&query, &box_reply.text, Arc::new(sub), question)?;
        let out = self.backend.generate(&ctx, &self.params)?;
        let answer = ScoredAnswer::new(out.text, out.tokens, Pathway::Micro)?;
        Ok((answer, parsed.bbox))
    }

    /// Both pathways plus selection. A failed micro pathway (no usable box,
    /// or an empty micro answer) falls back to the macro answer.
    pub fn run_dual(&self, img: &Arc<ImageBuf>, question: &str) -> Result<DualResult, PipelineError> {
        let macro_answer = self.run_macro(img, question)?;
        match self.run_micro(img, question) {
            Ok((micro_answer, predicted_box)) => {
                let (chosen, reason) = select(&macro_answer, &micro_answer);
                let chosen = chosen.to_owned();
                Ok(DualResult {
                    macro_answer,
                    micro_answer: Some(micro_answer),
                    predicted_box: Some(predicted_box),
                    chosen,
                    selection_reason: reason,
                    micro_failure: None,
                })
            }
            Err(e @ (PipelineError::BoxPredictionFailed { .. } | PipelineError::EmptyAnswer)) => {
                log::info!("micro pathway failed, using macro answer: {e}");
                Ok(DualResult {
                    chosen: macro_answer.text.clone(),
                    macro_answer,
                    micro_answer: None,
                    predicted_box: None,
                    selection_reason: SelectionReason::MicroFailedFallback,
                    micro_failure: Some(e.to_string()),
                })
            }
            Err(e) => Err(e),
        }
    }
}

/// Generates one candidate per member and keeps the lowest-perplexity one.
pub fn run_ensemble(
    members: &[EnsembleMember],
    scoring: EnsembleScoring,
    params: &GenParams,
    img: &Arc<ImageBuf>,
    question: &str,
) -> Result<EnsembleResult, PipelineError> {
    if members.len() < 2 {
        return Err(PipelineError::InvalidInput(format!(
            "ensemble needs at least 2 members, got {}",
            members.len()
        )));
    }
    let mut candidates = Vec::with_capacity(members.len());
    for m in members {
        let ctx = build_macro(img.clone(), &m.prompt(question))?;
        let out = m.backend.generate(&ctx, params)?;
        candidates.push(ScoredAnswer::new(out.text, out.tokens, Pathway::Member(m.id.clone()))?);
    }

    let mut used = scoring;
    if let EnsembleScoring::CrossScore { judge } = scoring {
        let judge_member = members.get(judge).ok_or_else(|| {
            PipelineError::InvalidInput(format!("judge index {judge} out of range"))
        })?;
        let ctx = build_macro(img.clone(), &judge_member.prompt(question))?;
        let mut rescored = Vec::with_capacity(candidates.len());
        for c in &candidates {
            if c.text.is_empty() {
                rescored.push(c.clone());
                continue;
            }
            match judge_member.backend.score(&ctx, &c.text) {
                Ok(tokens) => rescored.push(ScoredAnswer::new(c.text.clone(), tokens, c.pathway.clone())?),
                Err(BackendError::UnsupportedByServer) => {
                    log::warn!("judge {} cannot score; using generation logprobs", judge_member.id);
                    rescored.clear();
                    used = EnsembleScoring::OwnGeneration;
                    break;
                }
                Err(e) => return Err(e.into()),
            }
        }
        if !rescored.is_empty() {
            candidates = rescored;
        }
    }

    let chosen_index = ppl_ensemble(&candidates)?;
    Ok(EnsembleResult {
        chosen: candidates[chosen_index].text.clone(),
        candidates,
        chosen_index,
        scoring: used,
    })
}

#[derive(Debug, Clone)]
pub enum ImageSource {
    Path(PathBuf),
    Loaded(Arc<ImageBuf>),
}

impl ImageSource {
    pub fn load(&self) -> Result<Arc<ImageBuf>, ImageOpsError> {
        match self {
            ImageSource::Path(p) => load_image(p).map(Arc::new),
            ImageSource::Loaded(img) => Ok(img.clone()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchItem {
    pub id: String,
    pub image: ImageSource,
    pub question: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchConfig {
    pub parallelism: usize,
    /// Hash of the resolved run configuration, copied into the manifest.
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemFailure {
    pub item_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemTiming {
    pub item_id: String,
    pub millis: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub backend_id: String,
    pub parallelism: usize,
    pub items: usize,
    pub succeeded: usize,
    pub failures: Vec<ItemFailure>,
    pub timings: Vec<ItemTiming>,
    pub total_millis: f64,
}

#[derive(Debug)]
pub struct BatchOutput<T> {
    /// One entry per input item, in input order.
    pub results: Vec<Result<T, ItemFailure>>,
    pub manifest: RunManifest,
}

/// Applies `f` to every item on a pool of `config.parallelism` threads.
/// Output order matches input order; per-item errors are recorded rather
/// than aborting the batch.
pub fn map_batch<I, T, F>(
    items: &[I],
    item_id: impl Fn(&I) -> String + Sync,
    backend_id: String,
    config: &BatchConfig,
    f: F,
) -> Result<BatchOutput<T>, PipelineError>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> Result<T, PipelineError> + Sync,
{
    if items.is_empty() {
        return Err(PipelineError::InvalidInput("batch has no items".into()));
    }
    if config.parallelism == 0 {
        return Err(PipelineError::InvalidInput("parallelism must be >= 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.parallelism)
        .build()
        .map_err(|e| PipelineError::InvalidInput(e.to_string()))?;
    let started = Instant::now();
    let outcomes: Vec<(Result<T, ItemFailure>, ItemTiming)> = pool.install(|| {
        items
            .par_iter()
            .map(|item| {
                let id = item_id(item);
                let t0 = Instant::now();
                let result = f(item).map_err(|e| ItemFailure {
                    item_id: id.clone(),
                    error: e.to_string(),
                });
                let timing = ItemTiming {
                    item_id: id,
                    millis: t0.elapsed().as_secs_f64() * 1e3,
                };
                (result, timing)
            })
            .collect()
    });
    let (results, timings): (Vec<_>, Vec<_>) = outcomes.into_iter().unzip();
    let failures: Vec<ItemFailure> = results
        .iter()
        .filter_map(|r| r.as_ref().err().cloned())
        .collect();
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_owned(),
        config_hash: config.config_hash.clone(),
        backend_id,
        parallelism: config.parallelism,
        items: items.len(),
        succeeded: items.len() - failures.len(),
        failures,
        timings,
        total_millis: started.elapsed().as_secs_f64() * 1e3,
    };
    Ok(BatchOutput { results, manifest })
}

impl Engine<'_> {
    /// Dual-path inference over a batch.
    pub fn run_batch(
        &self,
        items: &[BatchItem],
        config: &BatchConfig,
    ) -> Result<BatchOutput<DualResult>, PipelineError> {
        map_batch(
            items,
            |item| item.id.clone(),
            self.backend.id(),
            config,
            |item| {
                let img = item.image.load()?;
                self.run_dual(&img, &item.question)
            },
        )
    }
}
