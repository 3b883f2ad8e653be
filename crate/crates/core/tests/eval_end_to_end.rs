mod common;

use std::io::Write;

use dualfocus::backend::{Canned, GenParams, Matcher, MockBackend, MockScript};
use dualfocus::eval::{
    dimension_breakdown, load_items, load_records, ppl_distribution, run_benchmark, score_records, EvalItem,
    EvalMode, HistogramSpec, PopeSplit, RunMode, Tags,
};
use dualfocus::imageops::{ImageBuf, ZoomPolicy};
use dualfocus::pipeline::{BatchConfig, Engine, SelectionReason};
use dualfocus::prompting::BOX_QUERY_PREFIX;

fn batch(parallelism: usize) -> BatchConfig {
    BatchConfig { parallelism, config_hash: "test".into() }
}

#[test]
fn results_file_rescores_identically() {
    let dir = tempfile::tempdir().unwrap();
    let scripted = common::ablation_items(dir.path());
    let items: Vec<_> = scripted.iter().map(|s| s.item.clone()).collect();
    let backend = common::ablation_backend(&scripted);
    let engine = Engine::new(&backend, ZoomPolicy::default(), GenParams::default());
    let run = run_benchmark(&items, &RunMode::Dual, &engine, &batch(4)).unwrap();

    let path = dir.path().join("results.jsonl");
    let mut f = std::fs::File::create(&path).unwrap();
    for r in &run.records {
        writeln!(f, "{}", serde_json::to_string(r).unwrap()).unwrap();
    }
    drop(f);
    let reloaded = load_records(&path).unwrap();
    assert_eq!(reloaded, run.records);
    assert_eq!(score_records(&reloaded, EvalMode::Dual), run.report.metrics);

    for r in &reloaded {
        let (m, u) = (r.macro_answer.as_ref().unwrap(), r.micro_answer.as_ref().unwrap());
        let lower = if m.ppl < u.ppl { &m.text } else { &u.text };
        assert_eq!(r.prediction.as_ref(), Some(lower), "{}", r.item.item_id);
    }
    let m = &run.report.metrics;
    assert_eq!(m.selection_reasons["micro_lower_ppl"], 12);
    assert_eq!(m.selection_reasons["macro_lower_ppl"], 8);
    assert_eq!(run.report.manifest.as_ref().unwrap().items, 20);
}

#[test]
fn breakdown_and_ppl_report_follow_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let scripted = common::ablation_items(dir.path());
    let items: Vec<_> = scripted.iter().map(|s| s.item.clone()).collect();
    let backend = common::ablation_backend(&scripted);
    let engine = Engine::new(&backend, ZoomPolicy::default(), GenParams::default());
    let macro_run = run_benchmark(&items, &RunMode::Macro, &engine, &batch(2)).unwrap();
    let dual_run = run_benchmark(&items, &RunMode::Dual, &engine, &batch(2)).unwrap();

    let table = dimension_breakdown(&[("macro".into(), &macro_run.records), ("dual".into(), &dual_run.records)]);
    let detail = table.rows.iter().find(|r| r.dimension == "detail").unwrap();
    assert_eq!(detail.cells[0].unwrap().accuracy, 0.0);
    assert_eq!(detail.deltas[0].1, Some(1.0));
    let global = table.rows.iter().find(|r| r.dimension == "global").unwrap();
    assert_eq!(global.deltas[0].1, Some(0.0));

    let groups = ppl_distribution(&dual_run.records, &HistogramSpec::default()).unwrap();
    assert_eq!((groups["detail"].n, groups["detail"].micro_lower), (12, 12));
    assert_eq!((groups["global"].n, groups["global"].micro_lower), (8, 0));
    assert!(groups["detail"].mean_diff > 0.0 && groups["global"].mean_diff < 0.0);
}

#[test]
fn unusable_box_falls_back_in_dual_and_fails_in_micro() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.png");
    common::write_png(&path, &ImageBuf::filled(32, 32, [40; 3]));
    let item = EvalItem {
        item_id: "nobox".into(),
        image: path,
        question: "Is there a cat?".into(),
        options: None,
        gold: "yes".into(),
        tags: Tags { benchmark: "pope".into(), pope_split: PopeSplit::Random, ..Default::default() },
    };
    let script = MockScript::default()
        .rule(Matcher::LastContains(BOX_QUERY_PREFIX.into()), Canned::new("somewhere on the left", &[-0.5]))
        .rule(Matcher::Any, Canned::new("Yes, there is.", &[-0.2, -0.3]));
    let backend = MockBackend::new("nobox", script).unwrap();
    let engine = Engine::new(&backend, ZoomPolicy::default(), GenParams::default());

    let dual = run_benchmark(std::slice::from_ref(&item), &RunMode::Dual, &engine, &batch(1)).unwrap();
    let r = &dual.records[0];
    assert!(r.correct);
    assert_eq!(r.selection_reason, Some(SelectionReason::MicroFailedFallback));
    assert!(r.micro_failure.is_some() && r.error.is_none());
    assert_eq!(dual.report.metrics.pope[&PopeSplit::Random].accuracy, 1.0);

    let micro = run_benchmark(std::slice::from_ref(&item), &RunMode::Micro, &engine, &batch(1)).unwrap();
    let r = &micro.records[0];
    assert!(!r.correct && r.error.is_some());
    assert_eq!(micro.report.metrics.failed, 1);
    assert_eq!(micro.report.metrics.pope[&PopeSplit::Random].unparseable, 1);
}

#[test]
fn item_file_paths_resolve_relative_to_file() {
    let dir = tempfile::tempdir().unwrap();
    common::write_png(&dir.path().join("img.png"), &ImageBuf::filled(8, 8, [1; 3]));
    let items_path = dir.path().join("items.jsonl");
    std::fs::write(
        &items_path,
        r#"{"item_id": "q1", "image": "img.png", "question": "What?", "gold": "A", "options": [{"letter": "A", "text": "x"}, {"letter": "B", "text": "y"}], "tags": {"benchmark": "seed", "dimension": "scene"}}
"#,
    )
    .unwrap();
    let items = load_items(&items_path).unwrap();
    assert_eq!(items[0].image, dir.path().join("img.png"));
    assert!(items[0].image.exists());
}
