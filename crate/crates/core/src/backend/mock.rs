//! Scripted backend for tests and offline runs.
//!
//! Rules are tried in order; the first whose matcher accepts the context
//! supplies the reply. Everything is a pure function of the context, so
//! results are identical across threads and runs.

use serde::{Deserialize, Serialize};

use super::{context_hash, Backend, BackendError, GenParams, GenerationResult, TokenLogprob};
use crate::prompting::PromptContext;

/// Predicate over a prompt context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    Any,
    /// Some text segment contains the string.
    Contains(String),
    /// The last user turn's text contains the string.
    LastContains(String),
    TurnCount(usize),
    ImageCount(usize),
    ContextHash(String),
    All(Vec<Matcher>),
    Not(Box<Matcher>),
}

impl Matcher {
    pub fn matches(&self, ctx: &PromptContext) -> bool {
        match self {
            Matcher::Any => true,
            Matcher::Contains(s) => ctx.texts().any(|t| t.contains(s.as_str())),
            Matcher::LastContains(s) => ctx
                .turns()
                .last()
                .is_some_and(|t| t.segments.iter().filter_map(|s| s.as_text()).any(|t| t.contains(s.as_str()))),
            Matcher::TurnCount(n) => ctx.turns().len() == *n,
            Matcher::ImageCount(n) => ctx.images().count() == *n,
            Matcher::ContextHash(h) => context_hash(ctx) == *h,
            Matcher::All(ms) => ms.iter().all(|m| m.matches(ctx)),
            Matcher::Not(m) => !m.matches(ctx),
        }
    }
}

/// Canned generation: `text` is split evenly into one token per logprob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Canned {
    pub text: String,
    pub logprobs: Vec<f64>,
}

impl Canned {
    pub fn new(text: impl Into<String>, logprobs: &[f64]) -> Self {
        Self {
            text: text.into(),
            logprobs: logprobs.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockFailure {
    Timeout,
    Unavailable,
    MissingLogprobs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockResponse {
    Result(Canned),
    Error(MockFailure),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    pub when: Matcher,
    #[serde(flatten)]
    pub response: MockResponse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRule {
    pub when: Matcher,
    pub answer: String,
    pub logprobs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockScript {
    pub rules: Vec<MockRule>,
    pub default: Canned,
    pub scores: Vec<ScoreRule>,
    /// Per-token logprob for unscripted forced answers.
    pub default_score_logprob: f64,
}

impl Default for MockScript {
    fn default() -> Self {
        Self {
            rules: Vec::new(),
            default: Canned::new("unknown", &[-5.0]),
            scores: Vec::new(),
            default_score_logprob: -3.0,
        }
    }
}

impl MockScript {
    pub fn rule(mut self, when: Matcher, canned: Canned) -> Self {
        self.rules.push(MockRule {
            when,
            response: MockResponse::Result(canned),
        });
        self
    }

    pub fn failing(mut self, when: Matcher, failure: MockFailure) -> Self {
        self.rules.push(MockRule {
            when,
            response: MockResponse::Error(failure),
        });
        self
    }

    pub fn score_rule(mut self, when: Matcher, answer: &str, logprobs: &[f64]) -> Self {
        self.scores.push(ScoreRule {
            when,
            answer: answer.to_owned(),
            logprobs: logprobs.to_vec(),
        });
        self
    }
}

#[derive(Debug, Clone)]
pub struct MockBackend {
    name: String,
    script: MockScript,
}

impl MockBackend {
    /// Validates every canned reply up front.
    pub fn new(name: impl Into<String>, script: MockScript) -> Result<Self, BackendError> {
        let canned = script
            .rules
            .iter()
            .filter_map(|r| match &r.response {
                MockResponse::Result(c) => Some(c),
                MockResponse::Error(_) => None,
            })
            .chain(std::iter::once(&script.default));
        for c in canned {
            GenerationResult::scripted(&c.text, &c.logprobs)?;
        }
        for s in &script.scores {
            for &lp in &s.logprobs {
                TokenLogprob::new("", lp)?;
            }
        }
        TokenLogprob::new("", script.default_score_logprob)?;
        Ok(Self {
            name: name.into(),
            script,
        })
    }

    pub fn script(&self) -> &MockScript {
        &self.script
    }
}

/// Word-level split used for unscripted scoring: each piece keeps its
/// leading whitespace, so pieces concatenate back to the input.
fn word_pieces(text: &str) -> Vec<&str> {
    let mut pieces = Vec::new();
    let mut start = 0;
    let mut in_word = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if in_word {
                pieces.push(&text[start..i]);
                start = i;
                in_word = false;
            }
        } else {
            in_word = true;
        }
    }
    if start < text.len() {
        pieces.push(&text[start..]);
    }
    pieces
}

impl Backend for MockBackend {
    fn id(&self) -> String {
        format!("mock:{}", self.name)
    }

    fn generate(
        &self,
        ctx: &PromptContext,
        _params: &GenParams,
    ) -> Result<GenerationResult, BackendError> {
        let response = self
            .script
            .rules
            .iter()
            .find(|r| r.when.matches(ctx))
            .map(|r| &r.response);
        match response {
            Some(MockResponse::Result(c)) => GenerationResult::scripted(&c.text, &c.logprobs),
            Some(MockResponse::Error(MockFailure::Timeout)) => Err(BackendError::Timeout),
            Some(MockResponse::Error(MockFailure::Unavailable)) => {
                Err(BackendError::Unavailable("scripted outage".into()))
            }
            Some(MockResponse::Error(MockFailure::MissingLogprobs)) => {
                Err(BackendError::MissingLogprobs)
            }
            None => {
                let d = &self.script.default;
                GenerationResult::scripted(&d.text, &d.logprobs)
            }
        }
    }

    fn score(
        &self,
        ctx: &PromptContext,
        forced_answer: &str,
    ) -> Result<Vec<TokenLogprob>, BackendError> {
        if forced_answer.is_empty() {
            return Err(BackendError::InvalidRequest("forced answer is empty".into()));
        }
        if let Some(rule) = self
            .script
            .scores
            .iter()
            .find(|s| s.answer == forced_answer && s.when.matches(ctx))
        {
            return Ok(GenerationResult::scripted(forced_answer, &rule.logprobs)?.tokens);
        }
        let lp = self.script.default_score_logprob;
        let mut pieces = word_pieces(forced_answer);
        if pieces.is_empty() {
            // whitespace-only answers still count as one token
            pieces.push(forced_answer);
        }
        pieces
            .into_iter()
            .map(|p| TokenLogprob::new(p, lp))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageops::ImageBuf;
    use crate::prompting::{build_box_query, build_macro};
    use std::sync::Arc;

    fn img() -> Arc<ImageBuf> {
        Arc::new(ImageBuf::filled(3, 3, [9; 3]))
    }

    #[test]
    fn scripted_rule_and_default() {
        let script = MockScript::default().rule(
            Matcher::Contains("box coordinates".into()),
            Canned::new("(0.1, 0.1, 0.9, 0.9)", &[-0.1; 4]),
        );
        let mock = MockBackend::new("t", script).unwrap();
        let params = GenParams::default();

        let boxed = mock.generate(&build_box_query(img(), "where?").unwrap(), &params).unwrap();
        assert_eq!(boxed.text, "(0.1, 0.1, 0.9, 0.9)");
        assert_eq!(boxed.tokens.iter().map(|t| t.logprob).collect::<Vec<_>>(), [-0.1; 4]);

        let plain = mock.generate(&build_macro(img(), "what?").unwrap(), &params).unwrap();
        assert_eq!(plain.text, "unknown");
        assert_eq!(plain.tokens, [TokenLogprob::new("unknown", -5.0).unwrap()]);
    }

    #[test]
    fn scripted_failures() {
        let script = MockScript::default()
            .failing(Matcher::Contains("slow".into()), MockFailure::Timeout)
            .failing(Matcher::Contains("bare".into()), MockFailure::MissingLogprobs);
        let mock = MockBackend::new("t", script).unwrap();
        let p = GenParams::default();
        assert!(matches!(
            mock.generate(&build_macro(img(), "slow").unwrap(), &p),
            Err(BackendError::Timeout)
        ));
        assert!(matches!(
            mock.generate(&build_macro(img(), "bare").unwrap(), &p),
            Err(BackendError::MissingLogprobs)
        ));
    }

    #[test]
    fn scoring() {
        let ctx = build_macro(img(), "what color?").unwrap();
        let script = MockScript::default().score_rule(
            Matcher::ContextHash(context_hash(&ctx)),
            "red",
            &[-0.2],
        );
        let mock = MockBackend::new("t", script).unwrap();
        let scored = mock.score(&ctx, "red").unwrap();
        assert_eq!(scored, [TokenLogprob::new("red", -0.2).unwrap()]);

        let other = mock.score(&ctx, "dark blue").unwrap();
        assert_eq!(other.len(), 2);
        assert!(other.iter().all(|t| t.logprob == -3.0));
        assert_eq!(other.iter().map(|t| t.token.as_str()).collect::<String>(), "dark blue");

        assert!(matches!(mock.score(&ctx, ""), Err(BackendError::InvalidRequest(_))));
    }

    #[test]
    fn invalid_script_rejected() {
        let script = MockScript::default().rule(Matcher::Any, Canned::new("x", &[0.5]));
        assert!(MockBackend::new("t", script).is_err());
    }

    #[test]
    fn script_json_shape() {
        let json = r#"{
            "rules": [
                {"when": {"all": [{"contains": "box"}, {"turn_count": 1}]},
                 "result": {"text": "(0.1, 0.2, 0.3, 0.4)", "logprobs": [-0.1, -0.1]}},
                {"when": "any", "error": "timeout"}
            ],
            "scores": [{"when": "any", "answer": "red", "logprobs": [-0.2]}]
        }"#;
        let script: MockScript = serde_json::from_str(json).unwrap();
        assert_eq!(script.rules.len(), 2);
        assert_eq!(script.default, Canned::new("unknown", &[-5.0]));
        assert_eq!(script.rules[1].response, MockResponse::Error(MockFailure::Timeout));
    }

    #[test]
    fn word_pieces_keep_whitespace() {
        assert_eq!(word_pieces("a bc  d"), ["a", " bc", "  d"]);
        assert_eq!(word_pieces(" lead"), [" lead"]);
    }
}
