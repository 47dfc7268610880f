//! The ten stage bodies. Each reads only its dependencies' directories and
//! writes only its own.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::artifacts::{read_json, read_jsonl, write_json, write_jsonl, Exclusion, VectorRecord};
use super::{paths, Context, Stage, StageOutput};
use crate::anonymize::{self, RedactionReport};
use crate::asr::{self, AsrBackend, CallTranscript, CommandAsr, HttpAsr, MockAsr, Speaker, TranscriptSegment};
use crate::audio::{self, AudioClip, DecodedAudio, SampleFormat, StereoCall};
use crate::clean::Cleaner;
use crate::config::AsrBackendKind;
use crate::dataset::{decode_instruct_jsonl, encode_instruct_jsonl, DemandValidity};
use crate::ivr::{self, IvrDecision, IvrDecisionRecord, KmeansParams};
use crate::llm::Task;
use crate::manifest::DigestBuilder;
use crate::qa::{self, AgentResponse, Demand, PairTemplates};
use crate::validate::{self, ReportInputs, ValidationReport};
use crate::vector_store::{CandidateSource, Persona, RemoteSearch, VectorEntry, VectorStore};

#[derive(Debug)]
pub(crate) struct StageError(String);

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

type Result<T> = std::result::Result<T, StageError>;

fn ctx_err<E: fmt::Display>(what: impl fmt::Display) -> impl FnOnce(E) -> StageError {
    move |e| StageError(format!("{what}: {e}"))
}

/// `*.wav` files (any case) directly inside `dir`, sorted by name.
pub(super) fn input_wavs(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    files_with_ext(dir, "wav")
}

fn files_with_ext(dir: &Path, ext: &str) -> std::io::Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case(ext)))
        .collect();
    out.sort();
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().unwrap_or_default().to_string_lossy().into_owned()
}

/// Transcript files of a stage: `<call_id>.jsonl`, skipping sidecars.
fn transcript_files(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(files_with_ext(dir, "jsonl")
        .map_err(ctx_err(format!("listing {}", dir.display())))?
        .into_iter()
        .filter(|p| {
            let s = stem(p);
            !s.contains('.') && s != "excluded" && s != "redactions"
        })
        .collect())
}

fn read_transcript(path: &Path) -> Result<CallTranscript> {
    let segments: Vec<TranscriptSegment> = read_jsonl(path).map_err(ctx_err("reading transcript"))?;
    Ok(CallTranscript {
        call_id: stem(path),
        segments,
    })
}

fn write_stereo(path: &Path, call: &StereoCall) -> Result<()> {
    let bytes = audio::encode_wav(&[&call.agent, &call.customer], SampleFormat::Pcm16)
        .map_err(ctx_err(format!("encoding {}", call.call_id)))?;
    std::fs::write(path, bytes).map_err(ctx_err(format!("writing {}", path.display())))
}

fn read_stereo(path: &Path) -> Result<StereoCall> {
    let bytes = std::fs::read(path).map_err(ctx_err(format!("reading {}", path.display())))?;
    match audio::decode_wav(&bytes).map_err(ctx_err(format!("decoding {}", path.display())))? {
        DecodedAudio::Stereo { agent, customer } => Ok(StereoCall {
            call_id: stem(path),
            agent,
            customer,
        }),
        DecodedAudio::Mono(_) => Err(StageError(format!("{} is not stereo", path.display()))),
    }
}

fn write_jsonl_to<T: Serialize>(out: &mut StageOutput, path: PathBuf, items: &[T]) -> Result<()> {
    write_jsonl(&path, items).map_err(ctx_err(format!("writing {}", path.display())))?;
    out.outputs.push(path);
    Ok(())
}

fn write_json_to<T: Serialize>(out: &mut StageOutput, path: PathBuf, value: &T) -> Result<()> {
    write_json(&path, value).map_err(ctx_err(format!("writing {}", path.display())))?;
    out.outputs.push(path);
    Ok(())
}

pub(super) fn run(ctx: &Context<'_>, stage: Stage) -> Result<StageOutput> {
    match stage {
        Stage::Ingest => ingest(ctx),
        Stage::Ivr => detect_ivr(ctx),
        Stage::Asr => transcribe(ctx),
        Stage::Clean => clean(ctx),
        Stage::Anonymize => anonymize_stage(ctx),
        Stage::Extract => extract(ctx),
        Stage::Embed => embed(ctx),
        Stage::Index => index(ctx),
        Stage::Generate => generate(ctx),
        Stage::Validate => validate_stage(ctx),
    }
}

/// Settings that influence a stage's output, folded into its input digest.
pub(super) fn digest_settings(ctx: &Context<'_>, stage: Stage, d: &mut DigestBuilder) -> std::io::Result<()> {
    let cfg = ctx.cfg;
    let version = cfg.llm.template_version.as_str();
    let template = |task| ctx.templates.get(task, version).ok();
    match stage {
        Stage::Ingest => {
            d.json("sample_rate_hz", &cfg.sample_rate_hz).json("audio", &cfg.audio);
        }
        Stage::Ivr => {
            d.json("ivr", &cfg.ivr);
        }
        Stage::Asr => {
            d.json("asr", &cfg.asr);
            if let Some(p) = &cfg.asr.mock_fixtures {
                d.file("mock_fixtures", p)?;
            }
        }
        Stage::Clean => {
            d.json("clean", &cfg.clean);
        }
        Stage::Anonymize => digest_rules(ctx, d)?,
        Stage::Extract => {
            d.json("llm", &cfg.llm)
                .json("substantive_tokens", &cfg.generate.substantive_tokens)
                .json("rewrite", &template(Task::Rewrite))
                .json("validity", &template(Task::Validity));
        }
        Stage::Embed => {
            d.json("embed", &cfg.embed);
        }
        Stage::Index => {
            d.json("dim", &cfg.embed.dim);
        }
        Stage::Generate => {
            d.json("top_n", &cfg.top_n)
                .json("generate", &cfg.generate)
                .json("llm", &cfg.llm)
                .json("refine", &template(Task::Refine))
                .json("synthesize", &template(Task::Synthesize))
                .json("instructions", &ctx.instructions);
        }
        Stage::Validate => {
            d.json("validate", &cfg.validate)
                .json("redundancy_threshold", &cfg.redundancy_threshold)
                .json("top_n", &cfg.top_n)
                .json("drop_flagged", &ctx.opts.drop_flagged)
                .json("embed", &cfg.embed);
            digest_rules(ctx, d)?;
        }
    }
    Ok(())
}

fn digest_rules(ctx: &Context<'_>, d: &mut DigestBuilder) -> std::io::Result<()> {
    match &ctx.cfg.pii_rules {
        Some(p) => {
            d.file("pii_rules", p)?;
        }
        None => {
            d.part("pii_rules", b"builtin");
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CallList {
    calls: Vec<String>,
}

fn prepare_channel(
    ctx: &Context<'_>,
    clip: &AudioClip,
    call_id: &str,
    warnings: &mut Vec<String>,
) -> std::result::Result<AudioClip, String> {
    let a = &ctx.cfg.audio;
    let clip = audio::resample(clip, ctx.cfg.sample_rate_hz);
    match &a.denoiser {
        Some(cmd) => {
            let done = audio::apply_external_denoiser(&clip, cmd, Duration::from_secs(a.denoiser_timeout_s))
                .map_err(|e| format!("denoiser_failure: {e}"))?;
            warnings.extend(done.warnings.into_iter().map(|w| format!("{call_id}: {w}")));
            Ok(done.clip)
        }
        None => Ok(audio::noise_gate(&clip, a.gate_threshold_dbfs, a.gate_frame_s)),
    }
}

fn ingest(ctx: &Context<'_>) -> Result<StageOutput> {
    let dir = ctx.stage_dir(Stage::Ingest);
    let files = input_wavs(&ctx.cfg.input_dir).map_err(ctx_err("listing input_dir"))?;
    let mut seen = HashSet::new();
    for f in &files {
        let id = stem(f);
        if id.is_empty() || !seen.insert(id.clone()) {
            return Err(StageError(format!("duplicate or empty call id from {}", f.display())));
        }
    }
    let results: Vec<(String, std::result::Result<StereoCall, String>, Vec<String>)> = ctx.pool.install(|| {
        files
            .par_iter()
            .map(|f| {
                let call_id = stem(f);
                let mut warnings = Vec::new();
                let res = (|| {
                    let bytes = std::fs::read(f).map_err(|e| format!("read_error: {e}"))?;
                    let decoded = audio::decode_wav_with_agent_channel(&bytes, ctx.cfg.audio.agent_channel)
                        .map_err(|e| format!("decode_error: {e}"))?;
                    let (agent, customer) = match decoded {
                        DecodedAudio::Stereo { agent, customer } => (agent, customer),
                        DecodedAudio::Mono(_) => {
                            return Err("mono_input: mixed audio cannot be attributed to speakers".to_string())
                        }
                    };
                    Ok(StereoCall {
                        call_id: call_id.clone(),
                        agent: prepare_channel(ctx, &agent, &call_id, &mut warnings)?,
                        customer: prepare_channel(ctx, &customer, &call_id, &mut warnings)?,
                    })
                })();
                (call_id, res, warnings)
            })
            .collect()
    });

    let mut out = StageOutput::default();
    let mut excluded = Vec::new();
    let mut calls = Vec::new();
    for (call_id, res, warnings) in results {
        out.warnings.extend(warnings);
        calls.push(call_id.clone());
        match res {
            Ok(call) => {
                let path = dir.join(format!("{call_id}.wav"));
                write_stereo(&path, &call)?;
                out.outputs.push(path);
            }
            Err(reason) => {
                out.warnings.push(format!("{call_id}: excluded ({reason})"));
                excluded.push(Exclusion {
                    call_id,
                    stage: "ingest".into(),
                    reason,
                });
            }
        }
    }
    out.work_items = calls.len();
    write_json_to(&mut out, dir.join("calls.json"), &CallList { calls })?;
    write_jsonl_to(&mut out, dir.join("excluded.jsonl"), &excluded)?;
    Ok(out)
}

fn detect_ivr(ctx: &Context<'_>) -> Result<StageOutput> {
    let s = &ctx.cfg.ivr;
    let dir = ctx.stage_dir(Stage::Ivr);
    let files = files_with_ext(&ctx.stage_dir(Stage::Ingest), "wav").map_err(ctx_err("listing ingest"))?;
    let params = KmeansParams {
        k: s.k,
        seed: s.seed,
        max_iter: s.max_iter,
        tol: s.tol,
    };
    type Outcome = (StereoCall, IvrDecisionRecord, Vec<String>);
    let results: Vec<Result<Outcome>> = ctx.pool.install(|| {
        files
            .par_iter()
            .map(|f| {
                let call = read_stereo(f)?;
                let mut warnings = Vec::new();
                let (decision, inertia) =
                    match ivr::detect_for_clip(&call.agent, s.window_s, s.hop_s, &params, s.head_windows, s.consec_m) {
                        Ok((d, model)) => (d, model.inertia),
                        Err(e) => {
                            warnings.push(format!("{}: IVR detection skipped ({e})", call.call_id));
                            (IvrDecision::untrimmed(0), 0.0)
                        }
                    };
                let (trimmed, decision) = match ivr::trim_ivr(&call, &decision) {
                    Ok(t) => {
                        warnings.extend(t.warnings);
                        (t.call, decision)
                    }
                    Err(e) => {
                        warnings.push(format!("{}: trim skipped ({e})", call.call_id));
                        (call.clone(), IvrDecision::untrimmed(decision.ivr_cluster))
                    }
                };
                let record = IvrDecisionRecord {
                    call_id: call.call_id.clone(),
                    boundary_s: decision.boundary_s,
                    trimmed: decision.trimmed,
                    ivr_cluster: decision.ivr_cluster,
                    inertia,
                };
                Ok((trimmed, record, warnings))
            })
            .collect()
    });
    let mut out = StageOutput::default();
    let mut records = Vec::new();
    for r in results {
        let (call, record, warnings) = r?;
        let path = dir.join(format!("{}.wav", call.call_id));
        write_stereo(&path, &call)?;
        out.outputs.push(path);
        out.warnings.extend(warnings);
        records.push(record);
    }
    out.work_items = records.len();
    write_jsonl_to(&mut out, dir.join("decisions.jsonl"), &records)?;
    Ok(out)
}

fn asr_backend(ctx: &Context<'_>) -> Result<Box<dyn AsrBackend>> {
    let a = &ctx.cfg.asr;
    let timeout = Duration::from_secs(a.timeout_s);
    Ok(match a.backend {
        AsrBackendKind::Mock => {
            let path = a
                .mock_fixtures
                .as_ref()
                .ok_or_else(|| StageError("asr.mock_fixtures must be set for the mock backend".into()))?;
            Box::new(MockAsr::from_file(path).map_err(ctx_err(format!("loading {}", path.display())))?)
        }
        AsrBackendKind::ExternalCommand => Box::new(CommandAsr {
            template: a.command.clone().unwrap_or_default(),
            timeout,
        }),
        AsrBackendKind::Http => Box::new(HttpAsr {
            endpoint: a.endpoint.clone().unwrap_or_default(),
            timeout,
        }),
    })
}

fn transcribe(ctx: &Context<'_>) -> Result<StageOutput> {
    let dir = ctx.stage_dir(Stage::Asr);
    let backend = asr_backend(ctx)?;
    let files = files_with_ext(&ctx.stage_dir(Stage::Ivr), "wav").map_err(ctx_err("listing ivr"))?;
    let retry = ctx.cfg.retry;
    let results: Vec<Result<(String, std::result::Result<CallTranscript, String>)>> = ctx.pool.install(|| {
        files
            .par_iter()
            .map(|f| {
                let call = read_stereo(f)?;
                let res = (|| {
                    let agent = asr::transcribe(&call.agent, Speaker::Agent, backend.as_ref(), &retry)?;
                    let customer = asr::transcribe(&call.customer, Speaker::Customer, backend.as_ref(), &retry)?;
                    asr::merge_channels(agent, customer, &call.call_id)
                })()
                .map_err(|e| format!("asr_failure: {e}"));
                Ok((call.call_id, res))
            })
            .collect()
    });
    let mut out = StageOutput::default();
    let mut excluded = Vec::new();
    for r in results {
        let (call_id, res) = r?;
        out.work_items += 1;
        match res {
            Ok(t) => write_jsonl_to(&mut out, dir.join(format!("{call_id}.jsonl")), &t.segments)?,
            Err(reason) => {
                out.warnings.push(format!("{call_id}: excluded ({reason})"));
                excluded.push(Exclusion {
                    call_id,
                    stage: "asr".into(),
                    reason,
                });
            }
        }
    }
    if out.work_items > 0 && excluded.len() == out.work_items {
        return Err(StageError(format!(
            "every call failed transcription; first error: {}",
            excluded[0].reason
        )));
    }
    write_jsonl_to(&mut out, dir.join("excluded.jsonl"), &excluded)?;
    Ok(out)
}

fn clean(ctx: &Context<'_>) -> Result<StageOutput> {
    let dir = ctx.stage_dir(Stage::Clean);
    let cleaner = Cleaner::new(ctx.cfg.clean.clone())
        .ok_or_else(|| StageError(format!("unsupported language {:?}", ctx.cfg.clean.language)))?;
    let files = transcript_files(&ctx.stage_dir(Stage::Asr))?;
    let results: Vec<Result<_>> = ctx.pool.install(|| {
        files
            .par_iter()
            .map(|f| {
                let t = read_transcript(f)?;
                Ok(cleaner.clean(&t))
            })
            .collect()
    });
    let mut out = StageOutput::default();
    for r in results {
        let (t, report) = r?;
        if report.dropped_count() > 0 {
            out.warnings
                .push(format!("{}: {} segment(s) dropped", t.call_id, report.dropped_count()));
        }
        write_jsonl_to(&mut out, dir.join(format!("{}.jsonl", t.call_id)), &t.segments)?;
        write_jsonl_to(
            &mut out,
            dir.join(format!("{}.report.jsonl", t.call_id)),
            &report.segments,
        )?;
        out.work_items += 1;
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RedactionLine {
    call_id: String,
    #[serde(flatten)]
    report: RedactionReport,
}

fn anonymize_stage(ctx: &Context<'_>) -> Result<StageOutput> {
    let dir = ctx.stage_dir(Stage::Anonymize);
    let files = transcript_files(&ctx.stage_dir(Stage::Clean))?;
    let results: Vec<Result<(CallTranscript, RedactionReport)>> = ctx.pool.install(|| {
        files
            .par_iter()
            .map(|f| {
                let mut t = read_transcript(f)?;
                let mut report = RedactionReport::default();
                for s in &mut t.segments {
                    let (text, r) = anonymize::anonymize_text(&s.text, &ctx.pii_rules);
                    s.text = text;
                    report.merge(&r);
                }
                Ok((t, report))
            })
            .collect()
    });
    let mut out = StageOutput::default();
    let mut lines = Vec::new();
    for r in results {
        let (t, report) = r?;
        write_jsonl_to(&mut out, dir.join(format!("{}.jsonl", t.call_id)), &t.segments)?;
        lines.push(RedactionLine {
            call_id: t.call_id,
            report,
        });
        out.work_items += 1;
    }
    write_jsonl_to(&mut out, dir.join("redactions.jsonl"), &lines)?;
    Ok(out)
}

fn extract(ctx: &Context<'_>) -> Result<StageOutput> {
    let dir = ctx.stage_dir(Stage::Extract);
    let version = &ctx.cfg.llm.template_version;
    let rewrite = ctx
        .templates
        .get(Task::Rewrite, version)
        .map_err(ctx_err("templates"))?;
    let validity = ctx
        .templates
        .get(Task::Validity, version)
        .map_err(ctx_err("templates"))?;
    let threshold = ctx.cfg.generate.substantive_tokens;
    let files = transcript_files(&ctx.stage_dir(Stage::Anonymize))?;
    type Item = (String, std::result::Result<Demand, String>, Option<AgentResponse>);
    let results: Vec<Result<Item>> = ctx.pool.install(|| {
        files
            .par_iter()
            .map(|f| {
                let t = read_transcript(f)?;
                let demand = qa::extract_demand_utterances(&t, threshold)
                    .map_err(|_| "no_customer_speech".to_string())
                    .and_then(|u| {
                        qa::prepare_demand(&t.call_id, &u, &ctx.gateway, rewrite, validity)
                            .map_err(|e| format!("rewrite_failed: {e}"))
                    });
                let response = qa::extract_response_utterances(&t, threshold).map(|text| AgentResponse {
                    response_id: qa::response_id_for(&t.call_id),
                    call_id: t.call_id.clone(),
                    text,
                });
                Ok((t.call_id, demand, response))
            })
            .collect()
    });
    let mut out = StageOutput::default();
    let (mut demands, mut responses, mut excluded) = (Vec::new(), Vec::new(), Vec::new());
    for r in results {
        let (call_id, demand, response) = r?;
        out.work_items += 1;
        match demand {
            Ok(d) => demands.push(d),
            Err(reason) => {
                out.warnings.push(format!("{call_id}: excluded ({reason})"));
                excluded.push(Exclusion {
                    call_id: call_id.clone(),
                    stage: "extract".into(),
                    reason,
                });
            }
        }
        match response {
            Some(r) => responses.push(r),
            None => out.warnings.push(format!("{call_id}: no agent response")),
        }
    }
    write_jsonl_to(&mut out, ctx.ws.join(paths::DEMANDS), &demands)?;
    write_jsonl_to(&mut out, ctx.ws.join(paths::RESPONSES), &responses)?;
    write_jsonl_to(&mut out, dir.join("excluded.jsonl"), &excluded)?;
    Ok(out)
}

fn embed_all(ctx: &Context<'_>, items: &[(String, String, String)], warnings: &mut Vec<String>) -> Vec<VectorRecord> {
    let results: Vec<_> = ctx.pool.install(|| {
        items
            .par_iter()
            .map(|(id, call_id, text)| {
                ctx.gateway.embed(text).map(|v| VectorRecord {
                    id: id.clone(),
                    call_id: call_id.clone(),
                    text: text.clone(),
                    model_tag: v.model_tag,
                    values: v.values,
                })
            })
            .collect()
    });
    results
        .into_iter()
        .zip(items)
        .filter_map(|(r, (id, ..))| match r {
            Ok(v) => Some(v),
            Err(e) => {
                warnings.push(format!("{id}: embedding failed ({e})"));
                None
            }
        })
        .collect()
}

fn embed(ctx: &Context<'_>) -> Result<StageOutput> {
    let dir = ctx.stage_dir(Stage::Embed);
    let demands: Vec<Demand> = read_jsonl(&ctx.ws.join(paths::DEMANDS)).map_err(ctx_err("reading demands"))?;
    let responses: Vec<AgentResponse> =
        read_jsonl(&ctx.ws.join(paths::RESPONSES)).map_err(ctx_err("reading responses"))?;
    let mut out = StageOutput::default();
    let d_items: Vec<_> = demands
        .iter()
        .filter(|d| !d.rewritten.trim().is_empty())
        .map(|d| (d.demand_id.clone(), d.call_id.clone(), d.rewritten.clone()))
        .collect();
    let r_items: Vec<_> = responses
        .iter()
        .map(|r| (r.response_id.clone(), r.call_id.clone(), r.text.clone()))
        .collect();
    let dv = embed_all(ctx, &d_items, &mut out.warnings);
    let rv = embed_all(ctx, &r_items, &mut out.warnings);
    out.work_items = d_items.len() + r_items.len();
    write_jsonl_to(&mut out, dir.join("demand_vectors.jsonl"), &dv)?;
    write_jsonl_to(&mut out, dir.join("response_vectors.jsonl"), &rv)?;
    Ok(out)
}

fn vectors(ctx: &Context<'_>, name: &str) -> Result<Vec<VectorRecord>> {
    read_jsonl(&ctx.stage_dir(Stage::Embed).join(name)).map_err(ctx_err(format!("reading {name}")))
}

fn index(ctx: &Context<'_>) -> Result<StageOutput> {
    let store = VectorStore::new(ctx.cfg.embed.dim);
    let mut out = StageOutput::default();
    for (file, persona) in [
        ("demand_vectors.jsonl", Persona::Customer),
        ("response_vectors.jsonl", Persona::Agent),
    ] {
        for v in vectors(ctx, file)? {
            store
                .insert(VectorEntry {
                    entry_id: v.id,
                    text: v.text,
                    persona,
                    call_id: v.call_id,
                    embedding: crate::llm::EmbeddingVector {
                        values: v.values,
                        model_tag: v.model_tag,
                    },
                })
                .map_err(ctx_err("indexing"))?;
            out.work_items += 1;
        }
    }
    let path = ctx.ws.join(paths::INDEX);
    store.persist(&path).map_err(ctx_err("persisting index"))?;
    out.outputs.push(path);
    Ok(out)
}

fn generate(ctx: &Context<'_>) -> Result<StageOutput> {
    let cfg = ctx.cfg;
    let version = &cfg.llm.template_version;
    let mut demands: Vec<Demand> = read_jsonl(&ctx.ws.join(paths::DEMANDS)).map_err(ctx_err("reading demands"))?;
    let by_id: HashMap<String, VectorRecord> = vectors(ctx, "demand_vectors.jsonl")?
        .into_iter()
        .map(|v| (v.id.clone(), v))
        .collect();
    for d in &mut demands {
        d.embedding = by_id.get(&d.demand_id).map(|v| crate::llm::EmbeddingVector {
            values: v.values.clone(),
            model_tag: v.model_tag.clone(),
        });
    }
    demands.sort_by(|a, b| a.demand_id.cmp(&b.demand_id));

    let store = VectorStore::load(&ctx.ws.join(paths::INDEX), Some(cfg.embed.dim)).map_err(ctx_err("loading index"))?;
    let remote = cfg.generate.search_endpoint.as_ref().map(|endpoint| RemoteSearch {
        endpoint: endpoint.clone(),
        timeout: Duration::from_secs(cfg.llm.timeout_s),
        retry: cfg.retry,
    });
    let (source, store_len): (&dyn CandidateSource, Option<usize>) = match &remote {
        Some(r) => (r, None),
        None => (&store, Some(store.len())),
    };
    let templates = PairTemplates {
        refine: ctx.templates.get(Task::Refine, version).map_err(ctx_err("templates"))?,
        synthesize: ctx
            .templates
            .get(Task::Synthesize, version)
            .map_err(ctx_err("templates"))?,
    };
    let mut out = StageOutput {
        work_items: demands.len(),
        ..Default::default()
    };
    let outcome = if demands.is_empty() {
        qa::BuildOutcome::default()
    } else {
        ctx.pool
            .install(|| {
                qa::build_pairs(
                    &demands,
                    source,
                    store_len,
                    &ctx.gateway,
                    &templates,
                    cfg.top_n,
                    cfg.generate.exclude_same_call,
                )
            })
            .map_err(ctx_err("building pairs"))?
    };
    for (id, reason) in outcome.skipped() {
        out.warnings.push(format!("{id}: skipped ({reason})"));
    }
    let records = outcome
        .pairs
        .iter()
        .enumerate()
        .map(|(i, p)| qa::format_instruct(p, &ctx.instructions, cfg.generate.instruction_seed, i))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(ctx_err("formatting records"))?;
    for r in &records {
        r.check_with_top_n(cfg.top_n).map_err(ctx_err(&r.meta.demand_id))?;
    }
    let bytes = encode_instruct_jsonl(&records).map_err(ctx_err("encoding dataset"))?;
    let path = ctx.ws.join(paths::DATASET);
    std::fs::write(&path, bytes).map_err(ctx_err("writing dataset"))?;
    out.outputs.push(path);
    write_jsonl_to(&mut out, ctx.ws.join(paths::PAIRS), &outcome.pairs)?;
    write_jsonl_to(&mut out, ctx.ws.join(paths::AUDIT), &outcome.audit)?;
    Ok(out)
}

fn exclusions(ctx: &Context<'_>, stage: Stage) -> Result<Vec<Exclusion>> {
    let path = ctx.stage_dir(stage).join("excluded.jsonl");
    read_jsonl(&path).map_err(ctx_err(format!("reading {}", path.display())))
}

fn validate_stage(ctx: &Context<'_>) -> Result<StageOutput> {
    let cfg = ctx.cfg;
    let dir = ctx.stage_dir(Stage::Validate);
    let calls: CallList =
        read_json(&ctx.stage_dir(Stage::Ingest).join("calls.json")).map_err(ctx_err("reading call list"))?;
    let bytes = std::fs::read(ctx.ws.join(paths::DATASET)).map_err(ctx_err("reading dataset"))?;
    let records = decode_instruct_jsonl(&bytes).map_err(ctx_err("dataset is not schema-valid"))?;
    for r in &records {
        r.check_with_top_n(cfg.top_n).map_err(ctx_err(&r.meta.demand_id))?;
    }
    let demands: Vec<Demand> = read_jsonl(&ctx.ws.join(paths::DEMANDS)).map_err(ctx_err("reading demands"))?;
    let audit: Vec<qa::AuditRecord> = read_jsonl(&ctx.ws.join(paths::AUDIT)).map_err(ctx_err("reading audit"))?;

    let mut skipped: Vec<(String, String)> = Vec::new();
    let mut excluded_calls = HashSet::new();
    for stage in [Stage::Ingest, Stage::Asr, Stage::Extract] {
        for e in exclusions(ctx, stage)? {
            excluded_calls.insert(e.call_id.clone());
            skipped.push((qa::demand_id_for(&e.call_id), e.reason));
        }
    }
    for a in &audit {
        if let Some(reason) = &a.skipped {
            skipped.push((a.demand_id.clone(), reason.clone()));
        }
    }
    let validity_by_call: HashMap<&str, DemandValidity> =
        demands.iter().map(|d| (d.call_id.as_str(), d.validity)).collect();
    let demand_validity: Vec<DemandValidity> = calls
        .calls
        .iter()
        .map(|c| validity_by_call.get(c.as_str()).copied().unwrap_or_default())
        .collect();

    let stored: HashMap<String, Vec<f32>> = vectors(ctx, "demand_vectors.jsonl")?
        .into_iter()
        .map(|v| (v.id, v.values))
        .collect();
    let mut question_embeddings = Vec::with_capacity(records.len());
    for r in &records {
        match stored.get(&r.meta.demand_id) {
            Some(v) => question_embeddings.push(v.clone()),
            None => question_embeddings.push(
                ctx.gateway
                    .embed(&r.input)
                    .map_err(ctx_err(format!("embedding question of {}", r.meta.demand_id)))?
                    .values,
            ),
        }
    }
    let leaks = anonymize::leak_scan(&records, &ctx.pii_rules);
    let inputs = ReportInputs {
        records: &records,
        question_embeddings: &question_embeddings,
        demand_validity: &demand_validity,
        skipped: &skipped,
        leaks: &leaks,
        redundancy_threshold: cfg.redundancy_threshold,
    };
    let sample_path = ctx.ws.join(paths::REVIEW_SAMPLE);
    let report = validate::compile_report(&inputs, &cfg.validate, &sample_path).map_err(ctx_err("compiling report"))?;

    let mut out = StageOutput {
        work_items: records.len(),
        exit_code: report.exit_code(cfg.validate.coherence_tolerance),
        ..Default::default()
    };
    out.outputs.push(sample_path);
    if report.leak_violations > 0 {
        out.warnings
            .push(format!("{} PII leak(s) found in the dataset", report.leak_violations));
    }
    if !report.incoherent.is_empty() {
        out.warnings
            .push(format!("{} record(s) failed coherence", report.incoherent.len()));
    }
    if ctx.opts.drop_flagged {
        let curated = validate::curate(&records, &report);
        let bytes = encode_instruct_jsonl(&curated).map_err(ctx_err("encoding curated dataset"))?;
        let path = ctx.ws.join(paths::CURATED);
        std::fs::write(&path, bytes).map_err(ctx_err("writing curated dataset"))?;
        out.outputs.push(path);
    }
    let counts: BTreeMap<&str, usize> = [
        ("calls", calls.calls.len()),
        ("excluded_calls", excluded_calls.len()),
        ("records", records.len()),
    ]
    .into();
    log::info!("validate: {counts:?}");
    write_json_to(&mut out, dir.join("report.json"), &report)?;
    Ok(out)
}

/// Gate code of the last recorded validation report.
pub(super) fn recorded_gate(ctx: &Context<'_>) -> Option<i32> {
    let report: ValidationReport = read_json(&ctx.ws.join(paths::REPORT)).ok()?;
    Some(report.exit_code(ctx.cfg.validate.coherence_tolerance))
}
