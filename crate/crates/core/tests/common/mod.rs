//! Fixtures shared by the integration test targets.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use dualfocus::backend::{Canned, Matcher, MockBackend, MockScript};
use dualfocus::eval::{AnswerOption, EvalItem, Tags};
use dualfocus::imageops::{encode_wire, ImageBuf};
use dualfocus::prompting::{BOX_QUERY_PREFIX, MICRO_PREFIX};

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn write_png(path: &Path, img: &ImageBuf) {
    std::fs::write(path, encode_wire(img).unwrap().bytes).unwrap();
}

pub const DETAIL_ITEMS: usize = 12;
pub const GLOBAL_ITEMS: usize = 8;

/// One scripted benchmark item.
pub struct Scripted {
    pub item: EvalItem,
    pub macro_reply: (&'static str, f64),
    pub micro_reply: (&'static str, f64),
}

fn tag(i: usize) -> String {
    format!("Item {i:02}:")
}

/// Twenty multiple-choice items: the first twelve are "detail" questions
/// that only the zoomed view answers correctly (and with lower perplexity),
/// the last eight are "global" questions where the full view wins.
pub fn ablation_items(dir: &Path) -> Vec<Scripted> {
    let options: Vec<AnswerOption> = ["A", "B", "C", "D"]
        .iter()
        .zip(["a cat", "a dog", "a bird", "a fish"])
        .map(|(l, t)| AnswerOption { letter: l.to_string(), text: t.to_string() })
        .collect();
    (0..DETAIL_ITEMS + GLOBAL_ITEMS)
        .map(|i| {
            let path = dir.join(format!("img{i:02}.png"));
            let img = ImageBuf::from_fn(64, 48, |x, y| [(x * 4) as u8, (y * 5) as u8, (i * 10) as u8]);
            write_png(&path, &img);
            let detail = i < DETAIL_ITEMS;
            let jitter = i as f64 * 0.01;
            let (question, gold, dimension, macro_reply, micro_reply) = if detail {
                ("what is printed on the small tag?", "B", "detail", ("A", -1.2 - jitter), ("B", -0.3 - jitter))
            } else {
                ("what is shown in the whole picture?", "C", "global", ("C", -0.4 - jitter), ("D", -1.1 - jitter))
            };
            Scripted {
                item: EvalItem {
                    item_id: format!("ab-{i:02}"),
                    image: path,
                    question: format!("{} {question}", tag(i)),
                    options: Some(options.clone()),
                    gold: gold.into(),
                    tags: Tags {
                        benchmark: "ablation".into(),
                        dimension: Some(dimension.into()),
                        ..Default::default()
                    },
                },
                macro_reply,
                micro_reply,
            }
        })
        .collect()
}

pub fn ablation_script(items: &[Scripted]) -> MockScript {
    let mut script = MockScript::default();
    for (i, s) in items.iter().enumerate() {
        let t = Matcher::Contains(tag(i));
        script = script
            .rule(
                Matcher::All(vec![t.clone(), Matcher::LastContains(BOX_QUERY_PREFIX.into())]),
                Canned::new("[0.25, 0.25, 0.75, 0.75]", &[-0.1]),
            )
            .rule(
                Matcher::All(vec![t.clone(), Matcher::LastContains(MICRO_PREFIX.into())]),
                Canned::new(s.micro_reply.0, &[s.micro_reply.1]),
            )
            .rule(
                Matcher::All(vec![t, Matcher::TurnCount(1)]),
                Canned::new(s.macro_reply.0, &[s.macro_reply.1]),
            );
    }
    script
}

pub fn ablation_backend(items: &[Scripted]) -> MockBackend {
    MockBackend::new("ablation", ablation_script(items)).unwrap()
}
