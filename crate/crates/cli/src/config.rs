//! The `--config` TOML file.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use dualfocus::backend::{Backend, GenParams, MockBackend, MockScript, RemoteBackend, RemoteConfig};
use dualfocus::curate::CurateConfig;
use dualfocus::eval::EvalMode;
use dualfocus::imageops::ZoomPolicy;
use dualfocus::pipeline::{EnsembleMember, EnsembleScoring};

pub const BACKEND_URL_ENV: &str = "DF_BACKEND_URL";
pub const API_KEY_ENV: &str = "DF_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Mock,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    /// Mock script (JSON or TOML), relative to the config file.
    pub script: Option<PathBuf>,
    pub url: String,
    pub model: String,
    pub timeout_s: u64,
    pub max_inflight: usize,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub echo_scoring: bool,
}

impl Default for BackendSection {
    fn default() -> Self {
        let r = RemoteConfig::default();
        Self {
            kind: BackendKind::Mock,
            script: None,
            url: r.url,
            model: r.model,
            timeout_s: r.timeout_s,
            max_inflight: r.max_inflight,
            max_retries: r.max_retries,
            backoff_ms: r.backoff_ms,
            echo_scoring: r.echo_scoring,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    pub mode: EvalMode,
    pub parallelism: usize,
    pub max_tokens: u32,
}

impl Default for PipelineSection {
    fn default() -> Self {
        Self {
            mode: EvalMode::Dual,
            parallelism: 4,
            max_tokens: GenParams::default().max_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemberSection {
    pub id: String,
    /// Prompt template; `{question}` is replaced by the item prompt.
    #[serde(default = "default_template")]
    pub template: String,
    /// Overrides the backend model for this member (remote only).
    #[serde(default)]
    pub model: Option<String>,
    /// Overrides the mock script for this member (mock only).
    #[serde(default)]
    pub script: Option<PathBuf>,
}

fn default_template() -> String {
    "{question}".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSection {
    pub members: Vec<MemberSection>,
    pub scoring: EnsembleScoring,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        Self {
            members: Vec::new(),
            scoring: EnsembleScoring::OwnGeneration,
        }
    }
}

/// Defaults for paths that can also be given on the command line.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub curate_input: Option<PathBuf>,
    pub curate_output: Option<PathBuf>,
    pub curate_summary: Option<PathBuf>,
    pub items: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backend: BackendSection,
    pub zoom: ZoomPolicy,
    pub pipeline: PipelineSection,
    pub curation: CurateConfig,
    pub ensemble: EnsembleSection,
    pub paths: PathsSection,
}

/// A validated config plus what it was resolved against.
pub struct Loaded {
    pub config: RunConfig,
    /// Directory relative paths in the file are resolved against.
    pub base: PathBuf,
}

impl RunConfig {
    pub fn validate(&self) -> anyhow::Result<()> {
        self.zoom.validate().map_err(|e| anyhow::anyhow!("zoom: {e}"))?;
        let t = self.curation.iou_threshold;
        if !(t > 0.0 && t <= 1.0) {
            bail!("curation.iou_threshold must be in (0, 1], got {t}");
        }
        if self.pipeline.parallelism == 0 {
            bail!("pipeline.parallelism must be at least 1");
        }
        if self.pipeline.max_tokens == 0 {
            bail!("pipeline.max_tokens must be at least 1");
        }
        if self.backend.max_inflight == 0 {
            bail!("backend.max_inflight must be at least 1");
        }
        if self.backend.kind == BackendKind::Remote && self.backend.url.trim().is_empty() {
            bail!("backend.url is required for the remote backend");
        }
        let members = &self.ensemble.members;
        if let EnsembleScoring::CrossScore { judge } = self.ensemble.scoring {
            if judge >= members.len() {
                bail!("ensemble.scoring.judge {judge} out of range for {} members", members.len());
            }
        }
        for (i, m) in members.iter().enumerate() {
            if members[..i].iter().any(|o| o.id == m.id) {
                bail!("ensemble.members: duplicate id {:?}", m.id);
            }
        }
        Ok(())
    }

    pub fn gen_params(&self) -> GenParams {
        GenParams {
            max_tokens: self.pipeline.max_tokens,
            ..GenParams::default()
        }
    }
}

/// Reads and validates the config. With no file, defaults apply. The
/// backend URL can be overridden through the environment.
pub fn load(path: Option<&Path>) -> anyhow::Result<Loaded> {
    let (mut config, base) = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            let config: RunConfig = toml::from_str(&text).with_context(|| format!("invalid config {}", p.display()))?;
            let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
            (config, base)
        }
        None => (RunConfig::default(), PathBuf::new()),
    };
    if let Ok(url) = std::env::var(BACKEND_URL_ENV) {
        if !url.is_empty() {
            config.backend.url = url;
        }
    }
    config.validate()?;
    Ok(Loaded { config, base })
}

impl Loaded {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    fn read_script(&self, p: &Path) -> anyhow::Result<(MockScript, Vec<u8>)> {
        let path = self.resolve(p);
        let bytes = std::fs::read(&path).with_context(|| format!("reading mock script {}", path.display()))?;
        let text = std::str::from_utf8(&bytes).context("mock script is not UTF-8")?;
        let script = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(text).with_context(|| format!("invalid mock script {}", path.display()))?
        } else {
            serde_json::from_str(text).with_context(|| format!("invalid mock script {}", path.display()))?
        };
        Ok((script, bytes))
    }

    /// SHA-256 over the canonical JSON of the resolved config, followed by
    /// the bytes of every mock script it references.
    pub fn config_hash(&self) -> anyhow::Result<String> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config)?);
        let scripts = std::iter::once(&self.config.backend.script)
            .chain(self.config.ensemble.members.iter().map(|m| &m.script))
            .flatten();
        for s in scripts {
            if let Ok(bytes) = std::fs::read(self.resolve(s)) {
                h.update(&bytes);
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    fn backend_with(&self, script: Option<&Path>, model: Option<&str>, name: &str) -> anyhow::Result<Arc<dyn Backend>> {
        let b = &self.config.backend;
        Ok(match b.kind {
            BackendKind::Mock => {
                let script = match script.or(b.script.as_deref()) {
                    Some(p) => self.read_script(p)?.0,
                    None => MockScript::default(),
                };
                Arc::new(MockBackend::new(name, script)?)
            }
            BackendKind::Remote => Arc::new(RemoteBackend::new(RemoteConfig {
                url: b.url.clone(),
                model: model.unwrap_or(&b.model).to_owned(),
                timeout_s: b.timeout_s,
                max_inflight: b.max_inflight,
                max_retries: b.max_retries,
                backoff_ms: b.backoff_ms,
                echo_scoring: b.echo_scoring,
                api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            })),
        })
    }

    pub fn backend(&self) -> anyhow::Result<Arc<dyn Backend>> {
        self.backend_with(None, None, "main")
    }

    pub fn ensemble_members(&self) -> anyhow::Result<Vec<EnsembleMember>> {
        self.config
            .ensemble
            .members
            .iter()
            .map(|m| {
                Ok(EnsembleMember {
                    id: m.id.clone(),
                    backend: self.backend_with(m.script.as_deref(), m.model.as_deref(), &m.id)?,
                    template: m.template.clone(),
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        let c: RunConfig = toml::from_str("").unwrap();
        assert_eq!(c, RunConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn unknown_key_is_named() {
        let err = toml::from_str::<RunConfig>("[pipeline]\nparalelism = 2\n").unwrap_err();
        assert!(err.to_string().contains("paralelism"), "{err}");
        let err = toml::from_str::<RunConfig>("colour = 1\n").unwrap_err();
        assert!(err.to_string().contains("colour"), "{err}");
    }

    #[test]
    fn full_config_parses() {
        let c: RunConfig = toml::from_str(
            r#"
            [backend]
            kind = "remote"
            url = "http://localhost:9000"
            model = "llava"
            timeout_s = 30

            [zoom]
            target_resolution = 448
            interpolation = "nearest"

            [pipeline]
            mode = "ensemble"
            parallelism = 8

            [curation]
            iou_threshold = 0.6
            box_format = { mode = "pixel" }

            [ensemble]
            scoring = { kind = "cross_score", judge = 1 }
            members = [{ id = "a" }, { id = "b", template = "Answer briefly. {question}" }]
            "#,
        )
        .unwrap();
        c.validate().unwrap();
        assert_eq!(c.pipeline.mode, EvalMode::Ensemble);
        assert_eq!(c.zoom.target_resolution, 448);
        assert_eq!(c.ensemble.members[1].template, "Answer briefly. {question}");
    }

    #[test]
    fn semantic_checks() {
        let mut c = RunConfig::default();
        c.curation.iou_threshold = 0.0;
        assert!(c.validate().unwrap_err().to_string().contains("iou_threshold"));
        let mut c = RunConfig::default();
        c.ensemble.scoring = EnsembleScoring::CrossScore { judge: 0 };
        assert!(c.validate().unwrap_err().to_string().contains("judge"));
    }
}
