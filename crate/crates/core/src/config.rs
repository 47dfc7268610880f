//! Pipeline configuration: TOML with sections, defaults for every optional
//! key, unknown keys rejected by name.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clean::CleanConfig;
use crate::retry::RetryPolicy;
use crate::validate::ValidateSettings;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config file {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config key {key}: {message}")]
    Parse { key: String, message: String },
    #[error("config key {key}: {message}")]
    Invalid { key: &'static str, message: String },
}

fn invalid(key: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key,
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AudioSettings {
    /// Which WAV channel carries the agent.
    pub agent_channel: usize,
    pub gate_threshold_dbfs: f64,
    pub gate_frame_s: f64,
    /// External denoiser command with `{in}` and `{out}` placeholders.
    pub denoiser: Option<String>,
    pub denoiser_timeout_s: u64,
}

impl Default for AudioSettings {
    fn default() -> Self {
        Self {
            agent_channel: 0,
            gate_threshold_dbfs: -40.0,
            gate_frame_s: 0.05,
            denoiser: None,
            denoiser_timeout_s: 120,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IvrSettings {
    pub window_s: f64,
    pub hop_s: f64,
    pub k: usize,
    pub consec_m: usize,
    pub head_windows: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for IvrSettings {
    fn default() -> Self {
        Self {
            window_s: 1.0,
            hop_s: 0.5,
            k: 2,
            consec_m: 5,
            head_windows: 10,
            seed: 0,
            max_iter: 100,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AsrBackendKind {
    Mock,
    ExternalCommand,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AsrSettings {
    pub backend: AsrBackendKind,
    pub endpoint: Option<String>,
    /// Command template with a `{wav_path}` placeholder.
    pub command: Option<String>,
    /// Digest-keyed segment fixtures for the mock backend.
    pub mock_fixtures: Option<PathBuf>,
    pub timeout_s: u64,
}

impl Default for AsrSettings {
    fn default() -> Self {
        Self {
            backend: AsrBackendKind::Mock,
            endpoint: None,
            command: None,
            mock_fixtures: None,
            timeout_s: 300,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemoteKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlmSettings {
    pub backend: RemoteKind,
    pub endpoint: Option<String>,
    pub model: String,
    pub timeout_s: u64,
    /// Version tag of the prompt templates used for every task.
    pub template_version: String,
}

impl Default for LlmSettings {
    fn default() -> Self {
        Self {
            backend: RemoteKind::Mock,
            endpoint: None,
            model: "chat-default".into(),
            timeout_s: 120,
            template_version: "v2".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedSettings {
    pub backend: RemoteKind,
    pub endpoint: Option<String>,
    pub model: String,
    pub dim: usize,
    /// Seed of the mock embedder.
    pub seed: u64,
    pub timeout_s: u64,
}

impl Default for EmbedSettings {
    fn default() -> Self {
        Self {
            backend: RemoteKind::Mock,
            endpoint: None,
            model: "embed-default".into(),
            dim: 1536,
            seed: 0,
            timeout_s: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateSettings {
    /// Agent turns longer than this many tokens close the demand window.
    pub substantive_tokens: usize,
    pub instruction_seed: u64,
    /// Drop candidates from the demand's own call.
    pub exclude_same_call: bool,
    /// Optional external search service; the local index is used otherwise.
    pub search_endpoint: Option<String>,
}

impl Default for GenerateSettings {
    fn default() -> Self {
        Self {
            substantive_tokens: crate::qa::DEFAULT_SUBSTANTIVE_TOKENS,
            instruction_seed: 0,
            exclude_same_call: false,
            search_endpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub input_dir: PathBuf,
    pub workspace_dir: PathBuf,
    #[serde(default = "default_sample_rate")]
    pub sample_rate_hz: u32,
    #[serde(default = "default_top_n")]
    pub top_n: usize,
    #[serde(default = "default_redundancy")]
    pub redundancy_threshold: f64,
    #[serde(default)]
    pub pii_rules: Option<PathBuf>,
    #[serde(default)]
    pub instruct_templates: Option<PathBuf>,
    /// Directory of prompt template files overriding the built-ins.
    #[serde(default)]
    pub prompt_templates: Option<PathBuf>,
    #[serde(default = "default_concurrency")]
    pub max_concurrent_calls: usize,
    #[serde(default = "default_concurrency")]
    pub max_concurrent_requests: usize,
    #[serde(default)]
    pub audio: AudioSettings,
    #[serde(default)]
    pub ivr: IvrSettings,
    #[serde(default)]
    pub asr: AsrSettings,
    #[serde(default)]
    pub llm: LlmSettings,
    #[serde(default)]
    pub embed: EmbedSettings,
    #[serde(default)]
    pub clean: CleanConfig,
    #[serde(default)]
    pub generate: GenerateSettings,
    #[serde(default)]
    pub validate: ValidateSettings,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_sample_rate() -> u32 {
    16_000
}
fn default_top_n() -> usize {
    3
}
fn default_redundancy() -> f64 {
    0.95
}
fn default_concurrency() -> usize {
    4
}

impl PipelineConfig {
    /// Config with every default and the two required paths.
    pub fn with_dirs(input_dir: impl Into<PathBuf>, workspace_dir: impl Into<PathBuf>) -> Self {
        let text = "input_dir = \"\"\nworkspace_dir = \"\"\n";
        let mut c: Self = toml::from_str(text).expect("minimal config parses");
        c.input_dir = input_dir.into();
        c.workspace_dir = workspace_dir.into();
        c
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let de = toml::Deserializer::new(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            let inner = e.into_inner();
            let message = inner.message().to_string();
            // unknown keys and missing fields are reported one level up
            let key = match extract_quoted_key(&message) {
                Some(field) if key == "." => field,
                Some(field) => format!("{key}.{field}"),
                None => key,
            };
            ConfigError::Parse { key, message }
        })
    }

    /// Checks every numeric invariant; errors name the offending key.
    pub fn check_invariants(&self) -> Result<(), ConfigError> {
        let ivr = &self.ivr;
        if !(ivr.window_s.is_finite() && ivr.window_s > 0.0) {
            return Err(invalid("ivr.window_s", "must be positive"));
        }
        if !(ivr.hop_s.is_finite() && ivr.hop_s > 0.0 && ivr.hop_s <= ivr.window_s) {
            return Err(invalid(
                "ivr.hop_s",
                format!("must satisfy 0 < hop_s <= window_s ({})", ivr.window_s),
            ));
        }
        if ivr.k < 2 {
            return Err(invalid("ivr.k", "must be at least 2"));
        }
        if ivr.consec_m < 1 {
            return Err(invalid("ivr.consec_m", "must be at least 1"));
        }
        if ivr.head_windows < 1 {
            return Err(invalid("ivr.head_windows", "must be at least 1"));
        }
        if ivr.max_iter < 1 {
            return Err(invalid("ivr.max_iter", "must be at least 1"));
        }
        if !(ivr.tol.is_finite() && ivr.tol >= 0.0) {
            return Err(invalid("ivr.tol", "must be a non-negative number"));
        }
        if self.sample_rate_hz == 0 {
            return Err(invalid("sample_rate_hz", "must be positive"));
        }
        if self.top_n < 1 {
            return Err(invalid("top_n", "must be at least 1"));
        }
        if self.embed.dim < 1 {
            return Err(invalid("embed.dim", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.redundancy_threshold) {
            return Err(invalid("redundancy_threshold", "must lie in [0, 1]"));
        }
        if self.max_concurrent_calls < 1 {
            return Err(invalid("max_concurrent_calls", "must be at least 1"));
        }
        if self.max_concurrent_requests < 1 {
            return Err(invalid("max_concurrent_requests", "must be at least 1"));
        }
        if !(self.audio.gate_frame_s.is_finite() && self.audio.gate_frame_s > 0.0) {
            return Err(invalid("audio.gate_frame_s", "must be positive"));
        }
        if self.audio.agent_channel > 1 {
            return Err(invalid("audio.agent_channel", "must be 0 or 1"));
        }
        if let Some(d) = &self.audio.denoiser {
            if !(d.contains("{in}") && d.contains("{out}")) {
                return Err(invalid("audio.denoiser", "must contain {in} and {out}"));
            }
        }
        match self.asr.backend {
            AsrBackendKind::ExternalCommand
                if self.asr.command.as_deref().is_none_or(|c| !c.contains("{wav_path}")) =>
            {
                return Err(invalid(
                    "asr.command",
                    "external_command backend needs a command with {wav_path}",
                ));
            }
            AsrBackendKind::Http if self.asr.endpoint.is_none() => {
                return Err(invalid("asr.endpoint", "http backend needs an endpoint"));
            }
            _ => {}
        }
        if self.llm.backend == RemoteKind::Http && self.llm.endpoint.is_none() {
            return Err(invalid("llm.endpoint", "http backend needs an endpoint"));
        }
        if self.embed.backend == RemoteKind::Http && self.embed.endpoint.is_none() {
            return Err(invalid("embed.endpoint", "http backend needs an endpoint"));
        }
        if self.retry.max_attempts < 1 {
            return Err(invalid("retry.max_attempts", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.retry.jitter) {
            return Err(invalid("retry.jitter", "must lie in [0, 1]"));
        }
        if self.clean.max_ngram < 1 {
            return Err(invalid("clean.max_ngram", "must be at least 1"));
        }
        if self.clean.min_repeats < 2 {
            return Err(invalid("clean.min_repeats", "must be at least 2"));
        }
        if crate::clean::NumeralLexicon::for_language(&self.clean.language).is_none() {
            return Err(invalid(
                "clean.language",
                format!("unsupported language {:?}", self.clean.language),
            ));
        }
        if !(0.0..=1.0).contains(&self.validate.coherence_tolerance) {
            return Err(invalid("validate.coherence_tolerance", "must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Resolves relative paths against `base` and checks that every path
    /// that must exist does.
    pub fn resolve_paths(&mut self, base: &Path) -> Result<(), ConfigError> {
        let abs = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        self.input_dir = abs(&self.input_dir);
        self.workspace_dir = abs(&self.workspace_dir);
        if !self.input_dir.is_dir() {
            return Err(invalid(
                "input_dir",
                format!("{} is not a directory", self.input_dir.display()),
            ));
        }
        let checks: [(&'static str, &mut Option<PathBuf>, bool); 4] = [
            ("pii_rules", &mut self.pii_rules, false),
            ("instruct_templates", &mut self.instruct_templates, false),
            ("prompt_templates", &mut self.prompt_templates, true),
            ("asr.mock_fixtures", &mut self.asr.mock_fixtures, false),
        ];
        for (key, slot, dir) in checks {
            if let Some(p) = slot.as_mut() {
                *p = abs(p);
                let ok = if dir { p.is_dir() } else { p.is_file() };
                if !ok {
                    return Err(invalid(key, format!("{} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }
}

fn extract_quoted_key(message: &str) -> Option<String> {
    for prefix in ["unknown field `", "missing field `"] {
        if let Some(rest) = message.strip_prefix(prefix) {
            return rest.split('`').next().map(str::to_string);
        }
    }
    None
}

pub fn load_config(path: &Path) -> Result<PipelineConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut config = PipelineConfig::parse(&text)?;
    config.check_invariants()?;
    config.resolve_paths(path.parent().unwrap_or(Path::new(".")))?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_config(dir: &Path, body: &str) -> PathBuf {
        std::fs::create_dir_all(dir.join("in")).unwrap();
        let p = dir.join("c2.toml");
        std::fs::write(&p, format!("input_dir = \"in\"\nworkspace_dir = \"ws\"\n{body}")).unwrap();
        p
    }

    #[test]
    fn minimal_config_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let c = load_config(&write_config(dir.path(), "")).unwrap();
        assert_eq!(c.top_n, 3);
        assert_eq!(c.embed.dim, 1536);
        assert_eq!(c.sample_rate_hz, 16_000);
        assert_eq!(c.redundancy_threshold, 0.95);
        assert_eq!(c.ivr, IvrSettings::default());
        assert_eq!(c.input_dir, dir.path().join("in"));
        assert_eq!(c, {
            let mut d = PipelineConfig::with_dirs(dir.path().join("in"), dir.path().join("ws"));
            d.resolve_paths(dir.path()).unwrap();
            d
        });
    }

    #[test]
    fn override_top_n() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(load_config(&write_config(dir.path(), "top_n = 5\n")).unwrap().top_n, 5);
    }

    #[test]
    fn invariant_errors_name_keys() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_config(&write_config(dir.path(), "[ivr]\nwindow_s = 1.0\nhop_s = 2.0\n")).unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { key: "ivr.hop_s", .. }), "{err}");
        assert!(err.to_string().contains("ivr.hop_s"));
        let err = load_config(&write_config(dir.path(), "top_n = 0\n")).unwrap_err();
        assert!(err.to_string().contains("top_n"));
    }

    #[test]
    fn parse_errors_name_keys() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_config(&write_config(dir.path(), "[ivr]\nwindw_s = 1.0\n")).unwrap_err();
        assert!(err.to_string().contains("ivr.windw_s"), "{err}");
        let err = load_config(&write_config(dir.path(), "top_n = \"three\"\n")).unwrap_err();
        assert!(err.to_string().contains("top_n"), "{err}");
        let err = load_config(&write_config(dir.path(), "mystery = 1\n")).unwrap_err();
        assert!(err.to_string().contains("mystery"), "{err}");
        assert!(matches!(
            load_config(&dir.path().join("nope.toml")),
            Err(ConfigError::Io { .. })
        ));
    }

    #[test]
    fn paths_must_resolve() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_config(&write_config(dir.path(), "pii_rules = \"missing.tsv\"\n")).unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { key: "pii_rules", .. }));
        std::fs::write(dir.path().join("rules.tsv"), "").unwrap();
        assert!(load_config(&write_config(dir.path(), "pii_rules = \"rules.tsv\"\n")).is_ok());
        let p = dir.path().join("bad.toml");
        std::fs::write(&p, "input_dir = \"nowhere\"\nworkspace_dir = \"ws\"\n").unwrap();
        assert!(matches!(
            load_config(&p),
            Err(ConfigError::Invalid { key: "input_dir", .. })
        ));
    }
}
