//! Extracting a bounding box from free-form model output, and the matching
//! emitter used when writing training conversations.
//!
//! Accepted grammar: the first run of exactly four numbers separated by
//! commas and/or whitespace, optionally wrapped in `()`, `[]` or `{}`.
//! Runs shorter than four are skipped. A longer run without brackets is
//! refused; a longer bracketed run is skipped as "not a box".

use std::ops::Range;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{clamp_to_unit, GeometryError, NormBox};

/// Largest value still read as a normalized coordinate.
pub const NORMALIZED_MAX: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BoxParseError {
    #[error("no run of four coordinates found")]
    NoCoordinates,
    #[error("found {count} undelimited numbers, expected four")]
    AmbiguousCount { count: usize },
    #[error(transparent)]
    Degenerate(GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoordinateMode {
    Normalized,
    Pixel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParseOutcome {
    pub bbox: NormBox,
    /// Byte range of `text` from the first to the last parsed number.
    pub source_span: Range<usize>,
    pub coordinate_mode: CoordinateMode,
}

static NUMBER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"[-+]?(?:\d+(?:\.\d+)?|\.\d+)").expect("valid regex"));

struct Number {
    value: f64,
    span: Range<usize>,
}

fn scan_numbers(text: &str) -> Vec<Number> {
    NUMBER
        .find_iter(text)
        .filter(|m| {
            // reject digits glued to words ("x1", "v2.0", "3rd")
            let before = text[..m.start()].chars().next_back();
            let after = text[m.end()..].chars().next();
            !before.is_some_and(|c| c.is_alphanumeric() || c == '_' || c == '.')
                && !after.is_some_and(|c| c.is_alphanumeric() || c == '_')
        })
        .filter_map(|m| {
            m.as_str().parse::<f64>().ok().map(|value| Number {
                value,
                span: m.range(),
            })
        })
        .collect()
}

fn is_separator(gap: &str) -> bool {
    let trimmed = gap.trim();
    trimmed.is_empty() || trimmed == ","
}

fn closing_for(open: char) -> Option<char> {
    match open {
        '(' => Some(')'),
        '[' => Some(']'),
        '{' => Some('}'),
        _ => None,
    }
}

fn is_bracketed(text: &str, span: &Range<usize>) -> bool {
    let open = text[..span.start].trim_end().chars().next_back();
    let close = text[span.end..].trim_start().chars().next();
    match (open.and_then(closing_for), close) {
        (Some(expected), Some(found)) => expected == found,
        _ => false,
    }
}

/// Finds the box in `text`, converting pixel coordinates with the image size.
pub fn parse_box(text: &str, image_w: u32, image_h: u32) -> Result<ParseOutcome, BoxParseError> {
    let numbers = scan_numbers(text);
    let mut runs: Vec<&[Number]> = Vec::new();
    let mut start = 0;
    for i in 1..=numbers.len() {
        let boundary = i == numbers.len()
            || !is_separator(&text[numbers[i - 1].span.end..numbers[i].span.start]);
        if boundary {
            runs.push(&numbers[start..i]);
            start = i;
        }
    }

    for run in runs.into_iter().filter(|r| !r.is_empty()) {
        let span = run[0].span.start..run[run.len() - 1].span.end;
        match run.len() {
            4 => {
                let raw = [run[0].value, run[1].value, run[2].value, run[3].value];
                let (coords, mode) = if raw.iter().all(|&v| v <= NORMALIZED_MAX) {
                    (raw, CoordinateMode::Normalized)
                } else {
                    let (w, h) = (f64::from(image_w), f64::from(image_h));
                    (
                        [raw[0] / w, raw[1] / h, raw[2] / w, raw[3] / h],
                        CoordinateMode::Pixel,
                    )
                };
                let bbox = clamp_to_unit(coords).map_err(BoxParseError::Degenerate)?;
                return Ok(ParseOutcome {
                    bbox,
                    source_span: span,
                    coordinate_mode: mode,
                });
            }
            n if n > 4 && !is_bracketed(text, &span) => {
                return Err(BoxParseError::AmbiguousCount { count: n });
            }
            _ => {}
        }
    }
    Err(BoxParseError::NoCoordinates)
}

/// How box coordinates are written into emitted text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum BoxFormat {
    Normalized { decimals: u8 },
    Pixel,
}

impl Default for BoxFormat {
    fn default() -> Self {
        BoxFormat::Normalized { decimals: 3 }
    }
}

/// `(x1, y1, x2, y2)` with three decimals, the default A1 text.
pub fn format_box(b: &NormBox) -> String {
    format_box_with(b, BoxFormat::default(), 1, 1)
}

pub fn format_box_with(b: &NormBox, format: BoxFormat, image_w: u32, image_h: u32) -> String {
    match format {
        BoxFormat::Normalized { decimals } => {
            let d = usize::from(decimals);
            let [x1, y1, x2, y2] = b.to_array();
            format!("({x1:.d$}, {y1:.d$}, {x2:.d$}, {y2:.d$})")
        }
        BoxFormat::Pixel => {
            let p = crate::geometry::denormalize(b, image_w, image_h);
            format!("({}, {}, {}, {})", p.x1(), p.y1(), p.x2(), p.y2())
        }
    }
}

/// Rounds each coordinate to `decimals` places, as the emitted text would.
pub fn quantize(b: &NormBox, decimals: u8) -> Result<NormBox, GeometryError> {
    let scale = 10f64.powi(i32::from(decimals));
    let [x1, y1, x2, y2] = b.to_array().map(|v| (v * scale).round() / scale);
    NormBox::new(x1, y1, x2, y2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalized_direct_read() {
        let out = parse_box("(0.12, 0.30, 0.55, 0.88)", 640, 480).unwrap();
        assert_eq!(out.bbox.to_array(), [0.12, 0.30, 0.55, 0.88]);
        assert_eq!(out.coordinate_mode, CoordinateMode::Normalized);
        assert_eq!(out.source_span, 1..23);
    }

    #[test]
    fn pixel_mode_divides_by_dims() {
        let text = "The region is [34, 50, 120, 200].";
        let out = parse_box(text, 448, 448).unwrap();
        assert_eq!(out.coordinate_mode, CoordinateMode::Pixel);
        let expected = [34.0 / 448.0, 50.0 / 448.0, 120.0 / 448.0, 200.0 / 448.0];
        assert_eq!(out.bbox.to_array(), expected);
        assert_eq!(&text[out.source_span], "34, 50, 120, 200");
    }

    #[test]
    fn error_classes() {
        assert_eq!(
            parse_box("I cannot locate the object.", 10, 10),
            Err(BoxParseError::NoCoordinates)
        );
        assert_eq!(
            parse_box("boxes: 1, 2, 3, 4, 5, 6", 10, 10),
            Err(BoxParseError::AmbiguousCount { count: 6 })
        );
        assert!(matches!(
            parse_box("(0.7, 0.2, 0.3, 0.9)", 10, 10),
            Err(BoxParseError::Degenerate(GeometryError::DegenerateBox { .. }))
        ));
    }

    #[test]
    fn first_quadruple_wins() {
        let out = parse_box("[0.1, 0.2, 0.3, 0.4] or maybe [0.5, 0.6, 0.7, 0.8]", 1, 1).unwrap();
        assert_eq!(out.bbox.to_array(), [0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn glued_digits_are_not_numbers() {
        assert_eq!(parse_box("x1 y1 x2 y2", 10, 10), Err(BoxParseError::NoCoordinates));
    }

    #[test]
    fn format_examples() {
        let b = NormBox::new(0.1, 0.2, 0.3, 0.4).unwrap();
        assert_eq!(format_box(&b), "(0.100, 0.200, 0.300, 0.400)");
        let half = NormBox::new(0.25, 0.25, 0.75, 0.75).unwrap();
        assert_eq!(format_box_with(&half, BoxFormat::Pixel, 200, 100), "(50, 25, 150, 75)");
        assert_eq!(
            format_box_with(&half, BoxFormat::Normalized { decimals: 1 }, 1, 1),
            "(0.2, 0.2, 0.8, 0.8)"
        );
    }

    #[test]
    fn quantize_can_collapse() {
        let tiny = NormBox::new(0.25, 0.25, 0.25025, 0.25025).unwrap();
        assert!(quantize(&tiny, 3).is_err());
        assert!(quantize(&tiny, 5).is_ok());
    }

    proptest! {
        #[test]
        fn emitted_boxes_parse_back(
            x1 in 0.0f64..0.99, y1 in 0.0f64..0.99, dx in 0.002f64..1.0, dy in 0.002f64..1.0,
            w in 1u32..4000, h in 1u32..4000,
        ) {
            let b = NormBox::new(x1, y1, (x1 + dx).min(1.0), (y1 + dy).min(1.0)).unwrap();
            let text = format_box(&b);
            let parsed = parse_box(&text, w, h).unwrap();
            prop_assert_eq!(parsed.coordinate_mode, CoordinateMode::Normalized);
            for (a, c) in b.to_array().iter().zip(parsed.bbox.to_array()) {
                prop_assert!((a - c).abs() <= 5e-4 + 1e-12);
            }
        }

        #[test]
        fn parsing_is_deterministic(text in ".{0,60}") {
            prop_assert_eq!(parse_box(&text, 100, 100), parse_box(&text, 100, 100));
        }
    }
}
