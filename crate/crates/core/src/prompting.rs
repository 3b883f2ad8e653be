//! Conversation contexts for the three model calls of a dual-path run,
//! and the four-message training conversation emitted by curation.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxparse::{format_box_with, BoxFormat};
use crate::geometry::NormBox;
use crate::imageops::ImageBuf;

/// Prefix of the subregion query; the question follows verbatim.
pub const BOX_QUERY_PREFIX: &str =
    "Provide the box coordinates of the region this question is asking about: ";
/// Prefix of the second-round question asked alongside the zoomed view.
pub const MICRO_PREFIX: &str = "Combine these two images and answer the question: ";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("question is empty")]
    EmptyQuestion,
    #[error("malformed context: {0}")]
    MalformedContext(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Segment {
    Text(String),
    Image(Arc<ImageBuf>),
}

impl Segment {
    pub fn as_text(&self) -> Option<&str> {
        match self {
            Segment::Text(t) => Some(t),
            Segment::Image(_) => None,
        }
    }

    pub fn is_image(&self) -> bool {
        matches!(self, Segment::Image(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Turn {
    pub role: Role,
    pub segments: Vec<Segment>,
}

/// Ordered turns, starting with the user and alternating roles. Images only
/// appear in user turns.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptContext {
    turns: Vec<Turn>,
}

impl PromptContext {
    pub fn new(turns: Vec<Turn>) -> Result<Self, PromptError> {
        for (i, turn) in turns.iter().enumerate() {
            let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
            if turn.role != expected {
                return Err(PromptError::MalformedContext(format!(
                    "turn {i} has role {:?}, expected {expected:?}",
                    turn.role
                )));
            }
            if turn.role == Role::Assistant && turn.segments.iter().any(Segment::is_image) {
                return Err(PromptError::MalformedContext(format!(
                    "assistant turn {i} carries an image"
                )));
            }
        }
        if turns.is_empty() {
            return Err(PromptError::MalformedContext("no turns".into()));
        }
        Ok(Self { turns })
    }

    pub fn turns(&self) -> &[Turn] {
        &self.turns
    }

    pub fn segments(&self) -> impl Iterator<Item = &Segment> {
        self.turns.iter().flat_map(|t| t.segments.iter())
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.segments().filter_map(Segment::as_text)
    }

    pub fn images(&self) -> impl Iterator<Item = &Arc<ImageBuf>> {
        self.segments().filter_map(|s| match s {
            Segment::Image(img) => Some(img),
            Segment::Text(_) => None,
        })
    }

    /// Segment kinds in order, `"image"` or `"text"`.
    pub fn segment_kinds(&self) -> Vec<&'static str> {
        self.segments()
            .map(|s| if s.is_image() { "image" } else { "text" })
            .collect()
    }
}

fn clean_question(question: &str) -> Result<&str, PromptError> {
    let q = question.trim();
    if q.is_empty() {
        Err(PromptError::EmptyQuestion)
    } else {
        Ok(q)
    }
}

fn user_turn(img: Arc<ImageBuf>, text: String) -> Turn {
    Turn {
        role: Role::User,
        segments: vec![Segment::Image(img), Segment::Text(text)],
    }
}

/// Plain single-image question: the macro pathway.
pub fn build_macro(img: Arc<ImageBuf>, question: &str) -> Result<PromptContext, PromptError> {
    let q = clean_question(question)?;
    Ok(PromptContext {
        turns: vec![user_turn(img, q.to_owned())],
    })
}

/// First round of the micro pathway: ask where to look.
pub fn build_box_query(img: Arc<ImageBuf>, question: &str) -> Result<PromptContext, PromptError> {
    let q = clean_question(question)?;
    Ok(PromptContext {
        turns: vec![user_turn(img, format!("{BOX_QUERY_PREFIX}{q}"))],
    })
}

/// Second round of the micro pathway: append the model's box answer and the
/// zoomed view, then ask the question again.
pub fn extend_micro(
    ctx: &PromptContext,
    box_answer_text: &str,
    sub_img: Arc<ImageBuf>,
    question: &str,
) -> Result<PromptContext, PromptError> {
    let is_box_query = match ctx.turns.as_slice() {
        [Turn { role: Role::User, segments }] => matches!(
            segments.as_slice(),
            [Segment::Image(_), Segment::Text(t)] if t.starts_with(BOX_QUERY_PREFIX)
        ),
        _ => false,
    };
    if !is_box_query {
        return Err(PromptError::MalformedContext(
            "expected a single-turn box query".into(),
        ));
    }
    let q = clean_question(question)?;
    let mut turns = ctx.turns.clone();
    turns.push(Turn {
        role: Role::Assistant,
        segments: vec![Segment::Text(box_answer_text.to_owned())],
    });
    turns.push(user_turn(sub_img, format!("{MICRO_PREFIX}{q}")));
    Ok(PromptContext { turns })
}

/// Which image a training message is attached to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSlot {
    Full,
    Sub,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationMessage {
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageSlot>,
    pub text: String,
}

/// The Q1/A1/Q2/A2 training conversation for one sample.
pub fn curation_target(
    question: &str,
    answer: &str,
    gold_box: &NormBox,
    format: BoxFormat,
    image_w: u32,
    image_h: u32,
) -> Result<Vec<ConversationMessage>, PromptError> {
    let q = clean_question(question)?;
    Ok(vec![
        ConversationMessage {
            role: Role::User,
            image: Some(ImageSlot::Full),
            text: format!("{BOX_QUERY_PREFIX}{q}"),
        },
        ConversationMessage {
            role: Role::Assistant,
            image: None,
            text: format_box_with(gold_box, format, image_w, image_h),
        },
        ConversationMessage {
            role: Role::User,
            image: Some(ImageSlot::Sub),
            text: format!("{MICRO_PREFIX}{q}"),
        },
        ConversationMessage {
            role: Role::Assistant,
            image: None,
            text: answer.to_owned(),
        },
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(v: u8) -> Arc<ImageBuf> {
        Arc::new(ImageBuf::filled(4, 4, [v; 3]))
    }

    #[test]
    fn macro_context() {
        let ctx = build_macro(img(0), "What color is the car?").unwrap();
        assert_eq!(ctx.turns().len(), 1);
        assert_eq!(ctx.segment_kinds(), ["image", "text"]);
        assert_eq!(ctx.texts().collect::<Vec<_>>(), ["What color is the car?"]);
        assert_eq!(build_macro(img(0), ""), Err(PromptError::EmptyQuestion));
        assert_eq!(build_macro(img(0), "   \n"), Err(PromptError::EmptyQuestion));
        let trimmed = build_macro(img(0), "  Why?\n").unwrap();
        assert_eq!(trimmed.texts().next(), Some("Why?"));
    }

    #[test]
    fn box_query_context() {
        let q = "What is the color of the small car?";
        let ctx = build_box_query(img(0), q).unwrap();
        let text = ctx.texts().next().unwrap();
        assert!(text.starts_with("Provide the box coordinates of the region"));
        assert!(text.ends_with(q));
        assert_eq!(build_box_query(img(0), q).unwrap(), ctx);
        assert_eq!(build_box_query(img(0), ""), Err(PromptError::EmptyQuestion));
    }

    #[test]
    fn micro_context_order() {
        let full = img(1);
        let sub = img(2);
        let q = "What is written on the sign?";
        let first = build_box_query(full.clone(), q).unwrap();
        let ctx = extend_micro(&first, "(0.1, 0.1, 0.5, 0.5)", sub.clone(), q).unwrap();
        let roles: Vec<_> = ctx.turns().iter().map(|t| t.role).collect();
        assert_eq!(roles, [Role::User, Role::Assistant, Role::User]);
        assert_eq!(ctx.segment_kinds(), ["image", "text", "text", "image", "text"]);
        let images: Vec<_> = ctx.images().collect();
        assert_eq!(images.len(), 2);
        assert!(Arc::ptr_eq(images[0], &full));
        assert!(Arc::ptr_eq(images[1], &sub));
        assert_eq!(
            ctx.texts().last().unwrap(),
            "Combine these two images and answer the question: What is written on the sign?"
        );
    }

    #[test]
    fn micro_rejects_other_contexts() {
        let mac = build_macro(img(0), "q").unwrap();
        assert!(matches!(
            extend_micro(&mac, "(0, 0, 1, 1)", img(1), "q"),
            Err(PromptError::MalformedContext(_))
        ));
        let first = build_box_query(img(0), "q").unwrap();
        let second = extend_micro(&first, "(0.1, 0.1, 0.5, 0.5)", img(1), "q").unwrap();
        assert!(extend_micro(&second, "x", img(1), "q").is_err());
    }

    #[test]
    fn context_validation() {
        let bad = PromptContext::new(vec![Turn {
            role: Role::Assistant,
            segments: vec![Segment::Text("hi".into())],
        }]);
        assert!(bad.is_err());
        let image_in_assistant = PromptContext::new(vec![
            user_turn(img(0), "q".into()),
            Turn { role: Role::Assistant, segments: vec![Segment::Image(img(0))] },
        ]);
        assert!(image_in_assistant.is_err());
    }

    #[test]
    fn training_conversation() {
        let b = NormBox::new(0.1, 0.2, 0.3, 0.4).unwrap();
        let conv =
            curation_target("What color is the kite?", "red", &b, BoxFormat::default(), 640, 480)
                .unwrap();
        assert_eq!(conv.len(), 4);
        assert_eq!(conv[1].text, "(0.100, 0.200, 0.300, 0.400)");
        assert_eq!(conv[3].text, "red");
        assert!(conv[2].text.contains("Combine these two images and answer the question:"));
        assert_eq!(conv[0].image, Some(ImageSlot::Full));
        assert_eq!(conv[2].image, Some(ImageSlot::Sub));
    }
}
