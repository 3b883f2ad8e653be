//! `dualfocus` command-line runner.
//!
//! Exit codes: 0 success, 1 I/O or data error, 2 configuration error,
//! 3 backend unreachable.

mod config;

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use serde::Serialize;

use dualfocus::curate::curate_all;
use dualfocus::eval::{
    dimension_breakdown, dimension_table_csv, load_items, load_records, ppl_distribution, ppl_histogram_csv,
    run_benchmark, score_records, EvalMode, EvalRecord, HistogramSpec, Metrics, RunMode,
};
use dualfocus::pipeline::{BatchConfig, Engine};

use config::Loaded;

#[derive(Parser)]
#[command(name = "dualfocus", version, about = "Macro/micro dual-path question answering with perplexity-based selection")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter region-annotated QA records and write training conversations.
    Curate {
        /// Records as JSONL or a JSON array.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Kept samples, as JSONL.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Also write the summary as JSON here.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Answer a benchmark file and score it.
    Run {
        /// Benchmark items, one JSON object per line.
        #[arg(long)]
        items: Option<PathBuf>,
        /// Receives results.jsonl, report.json and manifest.json.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Overrides pipeline.mode.
        #[arg(long)]
        mode: Option<EvalMode>,
        /// Overrides pipeline.parallelism.
        #[arg(long)]
        parallelism: Option<usize>,
    },
    /// Metrics, per-dimension tables and perplexity distributions from
    /// results files. The first file is the baseline for deltas.
    Report {
        #[arg(required = true)]
        results: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

trait ExitWith<T> {
    fn exit_with(self, code: u8) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> ExitWith<T> for Result<T, E> {
    fn exit_with(self, code: u8) -> Result<T, Failure> {
        self.map_err(|e| Failure { code, error: e.into() })
    }
}

const EXIT_IO: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_UNREACHABLE: u8 = 3;

fn load_config(path: Option<&Path>) -> Result<Loaded, Failure> {
    config::load(path).exit_with(EXIT_CONFIG)
}

fn echo_hash(loaded: &Loaded) -> Result<String, Failure> {
    let hash = loaded.config_hash().exit_with(EXIT_CONFIG)?;
    println!("config_hash: {hash}");
    Ok(hash)
}

fn pick(arg: Option<PathBuf>, fallback: Option<&PathBuf>, loaded: &Loaded, what: &str) -> Result<PathBuf, Failure> {
    arg.or_else(|| fallback.map(|p| loaded.resolve(p)))
        .ok_or_else(|| anyhow!("no {what} given on the command line or under [paths]"))
        .exit_with(EXIT_CONFIG)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).exit_with(EXIT_IO)?;
    fs::write(path, text + "\n")
        .with_context(|| format!("writing {}", path.display()))
        .exit_with(EXIT_IO)
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .exit_with(EXIT_IO)
}

fn cmd_curate(cli_config: Option<&Path>, input: Option<PathBuf>, output: Option<PathBuf>, summary: Option<PathBuf>) -> Result<(), Failure> {
    let loaded = load_config(cli_config)?;
    echo_hash(&loaded)?;
    let paths = &loaded.config.paths;
    let input = pick(input, paths.curate_input.as_ref(), &loaded, "input (--input)")?;
    let output = pick(output, paths.curate_output.as_ref(), &loaded, "output (--output)")?;
    let summary_path = summary.or_else(|| paths.curate_summary.as_ref().map(|p| loaded.resolve(p)));
    let summary = curate_all(&input, &output, summary_path.as_deref(), &loaded.config.curation).exit_with(EXIT_IO)?;
    println!("{}", serde_json::to_string_pretty(&summary).exit_with(EXIT_IO)?);
    Ok(())
}

fn cmd_run(
    cli_config: Option<&Path>,
    items: Option<PathBuf>,
    out_dir: Option<PathBuf>,
    mode: Option<EvalMode>,
    parallelism: Option<usize>,
) -> Result<(), Failure> {
    let mut loaded = load_config(cli_config)?;
    if let Some(m) = mode {
        loaded.config.pipeline.mode = m;
    }
    if let Some(p) = parallelism {
        loaded.config.pipeline.parallelism = p;
    }
    loaded.config.validate().exit_with(EXIT_CONFIG)?;
    let hash = echo_hash(&loaded)?;
    let paths = &loaded.config.paths;
    let items_path = pick(items, paths.items.as_ref(), &loaded, "items file (--items)")?;
    let out_dir = pick(out_dir, paths.out_dir.as_ref(), &loaded, "output directory (--out-dir)")?;
    let cfg = &loaded.config;

    let backend = loaded.backend().exit_with(EXIT_CONFIG)?;
    let run_mode = match cfg.pipeline.mode {
        EvalMode::Macro => RunMode::Macro,
        EvalMode::Micro => RunMode::Micro,
        EvalMode::Dual => RunMode::Dual,
        EvalMode::Ensemble => {
            if cfg.ensemble.members.len() < 2 {
                return Err(anyhow!("ensemble mode needs at least two [[ensemble.members]]")).exit_with(EXIT_CONFIG);
            }
            RunMode::Ensemble {
                members: loaded.ensemble_members().exit_with(EXIT_CONFIG)?,
                scoring: cfg.ensemble.scoring,
            }
        }
    };
    let probe_targets: Vec<_> = match &run_mode {
        RunMode::Ensemble { members, .. } => members.iter().map(|m| m.backend.clone()).collect(),
        _ => vec![backend.clone()],
    };
    for b in &probe_targets {
        b.probe()
            .with_context(|| format!("backend {} is unreachable", b.id()))
            .exit_with(EXIT_UNREACHABLE)?;
    }

    let items = load_items(&items_path).exit_with(EXIT_IO)?;
    let engine = Engine::new(backend.as_ref(), cfg.zoom, cfg.gen_params());
    let batch = BatchConfig {
        parallelism: cfg.pipeline.parallelism,
        config_hash: hash,
    };
    let run = run_benchmark(&items, &run_mode, &engine, &batch).exit_with(EXIT_IO)?;

    fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))
        .exit_with(EXIT_IO)?;
    let mut lines = String::new();
    for r in &run.records {
        lines.push_str(&serde_json::to_string(r).exit_with(EXIT_IO)?);
        lines.push('\n');
    }
    write_text(&out_dir.join("results.jsonl"), &lines)?;
    write_json(&out_dir.join("report.json"), &run.report)?;
    if let Some(manifest) = &run.report.manifest {
        write_json(&out_dir.join("manifest.json"), manifest)?;
    }
    let m = &run.report.metrics;
    println!(
        "mode {}: {}/{} correct ({:.4}), {} failed",
        m.mode.as_str(),
        m.correct,
        m.total,
        m.accuracy,
        m.failed
    );
    Ok(())
}

#[derive(Serialize)]
struct RunSummary<'a> {
    label: &'a str,
    path: String,
    metrics: Metrics,
}

#[derive(Serialize)]
struct AccuracyDelta {
    label: String,
    delta: f64,
}

#[derive(Serialize)]
struct ReportSummary<'a> {
    runs: Vec<RunSummary<'a>>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    accuracy_deltas: Vec<AccuracyDelta>,
}

fn file_safe(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn cmd_report(results: &[PathBuf], out_dir: &Path) -> Result<(), Failure> {
    let mut runs: Vec<(String, Vec<EvalRecord>)> = Vec::new();
    for path in results {
        let records = load_records(path).exit_with(EXIT_IO)?;
        runs.push((records[0].mode.as_str().to_owned(), records));
    }
    let borrowed: Vec<(String, &[EvalRecord])> = runs.iter().map(|(l, r)| (l.clone(), r.as_slice())).collect();
    let table = dimension_breakdown(&borrowed);
    // breakdown labels are unique; reuse them everywhere
    let labels = table.runs.clone();

    let summaries: Vec<RunSummary> = labels
        .iter()
        .zip(&runs)
        .zip(results)
        .map(|((label, (_, records)), path)| RunSummary {
            label,
            path: path.display().to_string(),
            metrics: score_records(records, records[0].mode),
        })
        .collect();
    let accuracy_deltas = summaries
        .iter()
        .skip(1)
        .map(|s| AccuracyDelta {
            label: format!("{}-{}", s.label, summaries[0].label),
            delta: s.metrics.accuracy - summaries[0].metrics.accuracy,
        })
        .collect();

    fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))
        .exit_with(EXIT_IO)?;
    let summary = ReportSummary { runs: summaries, accuracy_deltas };
    write_json(&out_dir.join("metrics.json"), &summary)?;
    write_json(&out_dir.join("dimensions.json"), &table)?;
    write_text(&out_dir.join("dimensions.csv"), &dimension_table_csv(&table).exit_with(EXIT_IO)?)?;

    let spec = HistogramSpec::default();
    let mut distributions = std::collections::BTreeMap::new();
    for (label, (_, records)) in labels.iter().zip(&runs) {
        let groups = ppl_distribution(records, &spec).exit_with(EXIT_IO)?;
        if groups.is_empty() {
            continue;
        }
        let csv = ppl_histogram_csv(&groups).exit_with(EXIT_IO)?;
        write_text(&out_dir.join(format!("ppl_histogram_{}.csv", file_safe(label))), &csv)?;
        distributions.insert(label.clone(), groups);
    }
    if !distributions.is_empty() {
        write_json(&out_dir.join("ppl_distribution.json"), &distributions)?;
    }

    let mut out = std::io::stdout().lock();
    for s in &summary.runs {
        let m = &s.metrics;
        let _ = writeln!(out, "{:<12} {:>5}/{:<5} accuracy {:.4}", s.label, m.correct, m.total, m.accuracy);
    }
    for d in &summary.accuracy_deltas {
        let _ = writeln!(out, "{:<12} delta {:+.4}", d.label, d.delta);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let cfg = cli.config.as_deref();
    let outcome = match cli.command {
        Command::Curate { input, output, summary } => cmd_curate(cfg, input, output, summary),
        Command::Run { items, out_dir, mode, parallelism } => cmd_run(cfg, items, out_dir, mode, parallelism),
        Command::Report { results, out_dir } => cmd_report(&results, &out_dir),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
