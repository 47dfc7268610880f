//! Stage orchestration: dependency checks, digest-based resume, manifest
//! bookkeeping and the per-run report.

mod artifacts;
mod stages;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anonymize::{self, PiiRule};
use crate::config::{PipelineConfig, RemoteKind};
use crate::llm::{ChatBackend, EmbedBackend, Gateway, HttpChat, HttpEmbed, MockChat, MockEmbed, TemplateSet};
use crate::manifest::{DigestBuilder, ManifestError, StageRecord, WorkspaceManifest};
use crate::qa::{self, InstructionTemplate};

pub use artifacts::{read_jsonl, write_jsonl, Exclusion, VectorRecord};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Ivr,
    Asr,
    Clean,
    Anonymize,
    Extract,
    Embed,
    Index,
    Generate,
    Validate,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::Ingest,
        Stage::Ivr,
        Stage::Asr,
        Stage::Clean,
        Stage::Anonymize,
        Stage::Extract,
        Stage::Embed,
        Stage::Index,
        Stage::Generate,
        Stage::Validate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Ivr => "ivr",
            Stage::Asr => "asr",
            Stage::Clean => "clean",
            Stage::Anonymize => "anonymize",
            Stage::Extract => "extract",
            Stage::Embed => "embed",
            Stage::Index => "index",
            Stage::Generate => "generate",
            Stage::Validate => "validate",
        }
    }

    /// Stages whose artifacts this stage reads.
    pub fn dependencies(self) -> &'static [Stage] {
        match self {
            Stage::Ingest => &[],
            Stage::Ivr => &[Stage::Ingest],
            Stage::Asr => &[Stage::Ivr],
            Stage::Clean => &[Stage::Asr],
            Stage::Anonymize => &[Stage::Clean],
            Stage::Extract => &[Stage::Anonymize],
            Stage::Embed => &[Stage::Extract],
            Stage::Index => &[Stage::Embed],
            Stage::Generate => &[Stage::Extract, Stage::Embed, Stage::Index],
            Stage::Validate => &[Stage::Ingest, Stage::Asr, Stage::Extract, Stage::Embed, Stage::Generate],
        }
    }

    pub fn dir(self, workspace: &Path) -> PathBuf {
        workspace.join(self.name())
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("stage {stage} needs {} which has not completed", .missing.join(", "))]
    MissingDependency { stage: Stage, missing: Vec<String> },
    #[error("stage {stage} failed: {message}")]
    StageFailed { stage: Stage, message: String },
    #[error("setup failed: {0}")]
    Setup(String),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunOptions {
    pub resume: bool,
    /// Also write a curated dataset without flagged records.
    pub drop_flagged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ran,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub status: StageStatus,
    pub work_items: usize,
    pub duration_ms: u64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub stages: Vec<StageReport>,
    /// Non-zero when the validate stage tripped a release gate.
    pub gate_exit_code: i32,
}

/// What a stage hands back to the orchestrator.
#[derive(Debug, Default)]
pub(crate) struct StageOutput {
    pub outputs: Vec<PathBuf>,
    pub work_items: usize,
    pub warnings: Vec<String>,
    pub exit_code: i32,
}

/// Everything a stage may use, built once per run.
pub(crate) struct Context<'a> {
    pub cfg: &'a PipelineConfig,
    pub ws: PathBuf,
    pub opts: RunOptions,
    pub pool: rayon::ThreadPool,
    pub gateway: Gateway,
    pub templates: TemplateSet,
    pub pii_rules: Vec<PiiRule>,
    pub instructions: Vec<InstructionTemplate>,
}

impl Context<'_> {
    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        stage.dir(&self.ws)
    }
}

pub fn build_gateway(cfg: &PipelineConfig) -> Gateway {
    let chat: Arc<dyn ChatBackend> = match cfg.llm.backend {
        RemoteKind::Mock => Arc::new(MockChat),
        RemoteKind::Http => Arc::new(HttpChat {
            endpoint: cfg.llm.endpoint.clone().unwrap_or_default(),
            model: cfg.llm.model.clone(),
            timeout: Duration::from_secs(cfg.llm.timeout_s),
        }),
    };
    let embed: Arc<dyn EmbedBackend> = match cfg.embed.backend {
        RemoteKind::Mock => Arc::new(MockEmbed::new(cfg.embed.dim, cfg.embed.seed)),
        RemoteKind::Http => Arc::new(HttpEmbed {
            endpoint: cfg.embed.endpoint.clone().unwrap_or_default(),
            model: cfg.embed.model.clone(),
            timeout: Duration::from_secs(cfg.embed.timeout_s),
        }),
    };
    Gateway::new(chat, embed, cfg.retry, cfg.embed.dim, cfg.max_concurrent_requests)
}

fn build_context(cfg: &PipelineConfig, opts: RunOptions) -> Result<Context<'_>, PipelineError> {
    let setup = |e: &dyn fmt::Display| PipelineError::Setup(e.to_string());
    let templates = match &cfg.prompt_templates {
        Some(dir) => TemplateSet::with_overrides(dir).map_err(|e| setup(&e))?,
        None => TemplateSet::builtin(),
    };
    let pii_rules = match &cfg.pii_rules {
        Some(p) => anonymize::load_rules(p).map_err(|e| setup(&e))?,
        None => anonymize::default_rules(),
    };
    let instructions = match &cfg.instruct_templates {
        Some(p) => qa::load_instruction_templates(p).map_err(|e| setup(&e))?,
        None => qa::default_instruction_templates(),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.max_concurrent_calls)
        .build()
        .map_err(|e| setup(&e))?;
    std::fs::create_dir_all(&cfg.workspace_dir).map_err(|e| setup(&e))?;
    Ok(Context {
        cfg,
        ws: cfg.workspace_dir.clone(),
        opts,
        pool,
        gateway: build_gateway(cfg),
        templates,
        pii_rules,
        instructions,
    })
}

fn relative(ws: &Path, p: &Path) -> PathBuf {
    p.strip_prefix(ws)
        .map(Path::to_path_buf)
        .unwrap_or_else(|_| p.to_path_buf())
}

fn input_digest(ctx: &Context<'_>, stage: Stage, manifest: &WorkspaceManifest) -> Result<String, PipelineError> {
    let mut d = DigestBuilder::new();
    d.part("stage", stage.name().as_bytes());
    d.part("tool_version", TOOL_VERSION.as_bytes());
    let fail = |e: std::io::Error| PipelineError::StageFailed {
        stage,
        message: format!("digesting inputs: {e}"),
    };
    if stage == Stage::Ingest {
        for p in stages::input_wavs(&ctx.cfg.input_dir).map_err(fail)? {
            d.file(&p.file_name().unwrap_or_default().to_string_lossy(), &p)
                .map_err(fail)?;
        }
    }
    for dep in stage.dependencies() {
        let record = manifest.get(dep.name()).expect("dependency checked before digesting");
        for p in &record.output_paths {
            d.file(&p.to_string_lossy(), &ctx.ws.join(p)).map_err(fail)?;
        }
    }
    stages::digest_settings(ctx, stage, &mut d).map_err(fail)?;
    Ok(d.finish())
}

fn canonical(stages: &[Stage]) -> Vec<Stage> {
    let mut v = stages.to_vec();
    v.sort();
    v.dedup();
    v
}

/// Runs `stages` in canonical order. With `resume`, a stage whose input
/// digest matches its manifest record (and whose outputs still exist) is
/// skipped. A failing stage aborts the run; its record and those of every
/// later stage are removed first, so the manifest never lists stale work.
pub fn run_stages(cfg: &PipelineConfig, stages: &[Stage], opts: RunOptions) -> Result<RunReport, PipelineError> {
    let ctx = build_context(cfg, opts)?;
    let mut manifest = WorkspaceManifest::load(&ctx.ws)?;
    let mut report = RunReport::default();

    for stage in canonical(stages) {
        let missing: Vec<String> = stage
            .dependencies()
            .iter()
            .filter(|d| !manifest.is_complete(d.name(), &ctx.ws))
            .map(|d| d.name().to_string())
            .collect();
        if !missing.is_empty() {
            return Err(PipelineError::MissingDependency { stage, missing });
        }
        let digest = input_digest(&ctx, stage, &manifest)?;
        if ctx.opts.resume
            && manifest.is_complete(stage.name(), &ctx.ws)
            && manifest.get(stage.name()).is_some_and(|r| r.input_digest == digest)
        {
            log::info!("{stage}: inputs unchanged, skipping");
            report.stages.push(StageReport {
                stage,
                status: StageStatus::Skipped,
                work_items: 0,
                duration_ms: 0,
                warnings: vec![],
            });
            if stage == Stage::Validate {
                report.gate_exit_code = stages::recorded_gate(&ctx).unwrap_or(0);
            }
            continue;
        }

        for later in Stage::ALL.iter().filter(|s| **s >= stage) {
            manifest.remove(later.name());
        }
        manifest.save(&ctx.ws)?;
        let dir = ctx.stage_dir(stage);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| PipelineError::StageFailed {
                stage,
                message: format!("clearing {}: {e}", dir.display()),
            })?;
        }
        std::fs::create_dir_all(&dir).map_err(|e| PipelineError::StageFailed {
            stage,
            message: format!("creating {}: {e}", dir.display()),
        })?;

        log::info!("{stage}: running");
        let started = Instant::now();
        let out = stages::run(&ctx, stage).map_err(|e| PipelineError::StageFailed {
            stage,
            message: e.to_string(),
        })?;
        let mut outputs: Vec<PathBuf> = out.outputs.iter().map(|p| relative(&ctx.ws, p)).collect();
        outputs.sort();
        manifest.upsert(StageRecord {
            stage_name: stage.name().to_string(),
            input_digest: digest,
            output_paths: outputs,
            completed_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            tool_version: TOOL_VERSION.to_string(),
        });
        manifest.save(&ctx.ws)?;
        for w in &out.warnings {
            log::warn!("{stage}: {w}");
        }
        if stage == Stage::Validate {
            report.gate_exit_code = out.exit_code;
        }
        report.stages.push(StageReport {
            stage,
            status: StageStatus::Ran,
            work_items: out.work_items,
            duration_ms: started.elapsed().as_millis() as u64,
            warnings: out.warnings,
        });
    }
    Ok(report)
}

/// Paths of the main artifacts, relative to the workspace.
pub mod paths {
    pub const DATASET: &str = "generate/dataset.jsonl";
    pub const PAIRS: &str = "generate/pairs.jsonl";
    pub const AUDIT: &str = "generate/audit.jsonl";
    pub const REPORT: &str = "validate/report.json";
    pub const REVIEW_SAMPLE: &str = "validate/review_sample.jsonl";
    pub const CURATED: &str = "validate/curated.jsonl";
    pub const INDEX: &str = "index/vectors.idx";
    pub const DEMANDS: &str = "extract/demands.jsonl";
    pub const RESPONSES: &str = "extract/responses.jsonl";
    pub const IVR_DECISIONS: &str = "ivr/decisions.jsonl";
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip_and_order() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
            assert!(s.dependencies().iter().all(|d| *d < s));
        }
        assert_eq!(
            canonical(&[Stage::Index, Stage::Ingest, Stage::Index]),
            vec![Stage::Ingest, Stage::Index]
        );
        assert!("transcribe".parse::<Stage>().is_err());
    }
}
