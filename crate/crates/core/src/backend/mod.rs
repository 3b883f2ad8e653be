//! The model behind the pipeline, seen only through text generation with
//! per-token log-probabilities and forced-answer scoring.

mod mock;
mod remote;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::imageops::ImageOpsError;
use crate::prompting::{PromptContext, Role, Segment};

pub use mock::{
    Canned, Matcher, MockBackend, MockFailure, MockResponse, MockRule, MockScript, ScoreRule,
};
pub use remote::{RemoteBackend, RemoteConfig};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("backend response did not include token logprobs")]
    MissingLogprobs,
    #[error("backend request timed out")]
    Timeout,
    #[error("backend cannot score a forced answer")]
    UnsupportedByServer,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("malformed backend response: {0}")]
    Protocol(String),
    #[error(transparent)]
    Image(#[from] ImageOpsError),
}

/// One generated token with its natural-log probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

impl TokenLogprob {
    /// Fails unless `logprob` is finite and not positive.
    pub fn new(token: impl Into<String>, logprob: f64) -> Result<Self, BackendError> {
        if !logprob.is_finite() || logprob > 0.0 {
            return Err(BackendError::Protocol(format!(
                "logprob must be finite and <= 0, got {logprob}"
            )));
        }
        Ok(Self {
            token: token.into(),
            logprob,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    pub tokens: Vec<TokenLogprob>,
    pub finish_reason: FinishReason,
}

impl GenerationResult {
    /// Splits `text` into `logprobs.len()` contiguous pieces so the tokens
    /// concatenate back to `text` exactly.
    pub fn scripted(text: &str, logprobs: &[f64]) -> Result<Self, BackendError> {
        let tokens = split_even(text, logprobs.len())
            .into_iter()
            .zip(logprobs)
            .map(|(piece, &lp)| TokenLogprob::new(piece, lp))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            text: text.to_owned(),
            tokens,
            finish_reason: FinishReason::Stop,
        })
    }
}

fn split_even(text: &str, n: usize) -> Vec<String> {
    if n == 0 {
        return Vec::new();
    }
    let chars: Vec<char> = text.chars().collect();
    let (base, extra) = (chars.len() / n, chars.len() % n);
    let mut pieces = Vec::with_capacity(n);
    let mut at = 0;
    for i in 0..n {
        let len = base + usize::from(i < extra);
        pieces.push(chars[at..at + len].iter().collect());
        at += len;
    }
    pieces
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenParams {
    pub max_tokens: u32,
    pub temperature: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            max_tokens: 64,
            temperature: 0.0,
        }
    }
}

/// A multimodal language model reachable by the pipeline.
///
/// Implementations must be callable concurrently from many threads.
pub trait Backend: Send + Sync {
    /// Stable identifier recorded in run manifests.
    fn id(&self) -> String;

    fn generate(
        &self,
        ctx: &PromptContext,
        params: &GenParams,
    ) -> Result<GenerationResult, BackendError>;

    /// Log-probabilities of `forced_answer` as the assistant reply to `ctx`.
    fn score(&self, ctx: &PromptContext, forced_answer: &str)
        -> Result<Vec<TokenLogprob>, BackendError>;

    /// Cheap reachability check run before a batch starts.
    fn probe(&self) -> Result<(), BackendError> {
        Ok(())
    }
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn id(&self) -> String {
        (**self).id()
    }

    fn generate(
        &self,
        ctx: &PromptContext,
        params: &GenParams,
    ) -> Result<GenerationResult, BackendError> {
        (**self).generate(ctx, params)
    }

    fn score(
        &self,
        ctx: &PromptContext,
        forced_answer: &str,
    ) -> Result<Vec<TokenLogprob>, BackendError> {
        (**self).score(ctx, forced_answer)
    }

    fn probe(&self) -> Result<(), BackendError> {
        (**self).probe()
    }
}

/// Hex SHA-256 over roles, texts and image pixels of a context.
pub fn context_hash(ctx: &PromptContext) -> String {
    let mut hasher = Sha256::new();
    for turn in ctx.turns() {
        hasher.update(match turn.role {
            Role::User => b"U",
            Role::Assistant => b"A",
        });
        for seg in &turn.segments {
            match seg {
                Segment::Text(t) => {
                    hasher.update(b"T");
                    hasher.update((t.len() as u64).to_le_bytes());
                    hasher.update(t.as_bytes());
                }
                Segment::Image(img) => {
                    hasher.update(b"I");
                    hasher.update(img.width().to_le_bytes());
                    hasher.update(img.height().to_le_bytes());
                    hasher.update(img.data());
                }
            }
        }
    }
    hex::encode(hasher.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageops::ImageBuf;
    use crate::prompting::build_macro;
    use std::sync::Arc;

    #[test]
    fn scripted_tokens_concatenate_to_text() {
        let r = GenerationResult::scripted("(0.1, 0.1, 0.9, 0.9)", &[-0.1; 4]).unwrap();
        assert_eq!(r.tokens.len(), 4);
        let joined: String = r.tokens.iter().map(|t| t.token.as_str()).collect();
        assert_eq!(joined, r.text);
    }

    #[test]
    fn positive_logprob_rejected() {
        assert!(TokenLogprob::new("x", 0.1).is_err());
        assert!(TokenLogprob::new("x", f64::NEG_INFINITY).is_err());
        assert!(TokenLogprob::new("x", 0.0).is_ok());
    }

    #[test]
    fn hash_depends_on_pixels() {
        let a = build_macro(Arc::new(ImageBuf::filled(2, 2, [0; 3])), "q").unwrap();
        let b = build_macro(Arc::new(ImageBuf::filled(2, 2, [1; 3])), "q").unwrap();
        assert_ne!(context_hash(&a), context_hash(&b));
        assert_eq!(context_hash(&a), context_hash(&a.clone()));
        assert_eq!(context_hash(&a).len(), 64);
    }
}
