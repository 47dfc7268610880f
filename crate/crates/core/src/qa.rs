//! Demand/response extraction, candidate retrieval, refinement, answer
//! synthesis and instruct formatting.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asr::{CallTranscript, Speaker};
use crate::dataset::{DemandValidity, InstructRecord, RecordMeta};
use crate::llm::{EmbeddingVector, Gateway, LlmError, PromptTemplate};
use crate::vector_store::{CandidateSource, Persona, SearchFilter, StoreError};

pub const DEFAULT_SUBSTANTIVE_TOKENS: usize = 8;
pub const PIPELINE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum QaError {
    #[error("call {0} has no customer speech")]
    NoCustomerSpeech(String),
    #[error("the vector store is empty")]
    EmptyStore,
    #[error("the instruction template set is empty")]
    EmptyTemplateSet,
    #[error("pair {0} has an empty question or answer")]
    EmptyPairField(String),
    #[error("instruction template line {line}: {message}")]
    TemplateSyntax { line: usize, message: String },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Store(#[from] StoreError),
}

fn token_count(text: &str) -> usize {
    text.split_whitespace().count()
}

fn first_substantive_agent(t: &CallTranscript, threshold: usize) -> Option<usize> {
    let first_customer = t.segments.iter().position(|s| s.speaker == Speaker::Customer)?;
    (first_customer + 1..t.segments.len())
        .find(|&i| t.segments[i].speaker == Speaker::Agent && token_count(&t.segments[i].text) > threshold)
}

fn join(segments: impl Iterator<Item = String>) -> String {
    segments
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Customer speech from the start of the call up to the first substantive
/// agent turn (more than `threshold` tokens) that follows customer speech.
/// Without such a turn, every customer segment is used.
pub fn extract_demand_utterances(t: &CallTranscript, threshold: usize) -> Result<String, QaError> {
    let end = first_substantive_agent(t, threshold).unwrap_or(t.segments.len());
    let text = join(
        t.segments[..end]
            .iter()
            .filter(|s| s.speaker == Speaker::Customer)
            .map(|s| s.text.clone()),
    );
    if text.is_empty() {
        return Err(QaError::NoCustomerSpeech(t.call_id.clone()));
    }
    Ok(text)
}

/// Agent speech from the first substantive agent turn onward; `None` when
/// the call has no such turn.
pub fn extract_response_utterances(t: &CallTranscript, threshold: usize) -> Option<String> {
    let start = first_substantive_agent(t, threshold)?;
    let text = join(
        t.segments[start..]
            .iter()
            .filter(|s| s.speaker == Speaker::Agent)
            .map(|s| s.text.clone()),
    );
    (!text.is_empty()).then_some(text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demand {
    pub demand_id: String,
    pub call_id: String,
    pub raw_utterances: String,
    pub rewritten: String,
    pub validity: DemandValidity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validity_reason: Option<String>,
    pub rewrite_template: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<EmbeddingVector>,
}

/// Agent answer text extracted from one call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentResponse {
    pub response_id: String,
    pub call_id: String,
    pub text: String,
}

pub fn demand_id_for(call_id: &str) -> String {
    format!("{call_id}:demand")
}

pub fn response_id_for(call_id: &str) -> String {
    format!("{call_id}:response")
}

/// Rewrites the demand and checks its validity. Invalid demands are kept.
pub fn prepare_demand(
    call_id: &str,
    utterances: &str,
    gateway: &Gateway,
    rewrite: &PromptTemplate,
    validity: &PromptTemplate,
) -> Result<Demand, LlmError> {
    let rewritten = gateway.rewrite_demand(utterances, rewrite)?.text;
    let verdict = gateway.check_demand_validity(&rewritten, validity);
    Ok(Demand {
        demand_id: demand_id_for(call_id),
        call_id: call_id.to_string(),
        raw_utterances: utterances.to_string(),
        rewritten,
        validity: verdict.validity,
        validity_reason: verdict.reason,
        rewrite_template: rewrite.template_id.clone(),
        embedding: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRef {
    pub entry_id: String,
    pub call_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaPair {
    pub demand_id: String,
    pub call_id: String,
    pub question: String,
    pub answer: String,
    pub candidate_refs: Vec<CandidateRef>,
    pub validity: DemandValidity,
    pub refine_template: String,
    pub synthesize_template: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub demand_id: String,
    pub hits: Vec<CandidateRef>,
    pub refined_lengths: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildOutcome {
    pub pairs: Vec<QaPair>,
    pub audit: Vec<AuditRecord>,
}

impl BuildOutcome {
    pub fn skipped(&self) -> impl Iterator<Item = (&str, &str)> {
        self.audit
            .iter()
            .filter_map(|a| a.skipped.as_deref().map(|r| (a.demand_id.as_str(), r)))
    }
}

pub struct PairTemplates<'a> {
    pub refine: &'a PromptTemplate,
    pub synthesize: &'a PromptTemplate,
}

fn build_one(
    d: &Demand,
    source: &dyn CandidateSource,
    gateway: &Gateway,
    templates: &PairTemplates<'_>,
    n: usize,
    exclude_same_call: bool,
) -> (Option<QaPair>, AuditRecord) {
    let mut audit = AuditRecord {
        demand_id: d.demand_id.clone(),
        hits: vec![],
        refined_lengths: vec![],
        skipped: None,
    };
    let skip = |mut audit: AuditRecord, reason: String| {
        log::warn!("skipping {}: {reason}", audit.demand_id);
        audit.skipped = Some(reason);
        (None, audit)
    };
    let Some(embedding) = &d.embedding else {
        return skip(audit, "not_embedded".into());
    };
    if d.rewritten.trim().is_empty() {
        return skip(audit, "empty_demand".into());
    }
    let filter = SearchFilter {
        persona: Some(Persona::Agent),
        exclude_call_id: exclude_same_call.then(|| d.call_id.clone()),
    };
    let hits = match source.retrieve(&embedding.values, n, &filter) {
        Ok(h) => h,
        Err(e) => return skip(audit, format!("search_failure: {e}")),
    };
    audit.hits = hits
        .iter()
        .map(|h| CandidateRef {
            entry_id: h.hit.entry_id.clone(),
            call_id: h.call_id.clone(),
            score: h.hit.score,
        })
        .collect();
    if hits.is_empty() {
        return skip(audit, "no_candidates".into());
    }
    let mut refined = Vec::with_capacity(hits.len());
    for h in &hits {
        match gateway.refine_response(&h.text, &d.rewritten, templates.refine) {
            Ok(g) => refined.push(g.text),
            Err(e) => return skip(audit, format!("gateway_failure: {e}")),
        }
    }
    audit.refined_lengths = refined.iter().map(|r| r.chars().count()).collect();
    let answer = match gateway.synthesize_answer(&refined, &d.rewritten, templates.synthesize, n) {
        Ok(g) => g.text,
        Err(e) => return skip(audit, format!("gateway_failure: {e}")),
    };
    let pair = QaPair {
        demand_id: d.demand_id.clone(),
        call_id: d.call_id.clone(),
        question: d.rewritten.clone(),
        answer,
        candidate_refs: audit.hits.clone(),
        validity: d.validity,
        refine_template: templates.refine.template_id.clone(),
        synthesize_template: templates.synthesize.template_id.clone(),
    };
    (Some(pair), audit)
}

/// Per demand: top-`n` agent responses, each refined against the demand,
/// then merged into one answer. Failures skip the demand and are recorded
/// in the audit. Output order follows the input order. With
/// `exclude_same_call`, responses from the demand's own call are not
/// candidates.
pub fn build_pairs(
    demands: &[Demand],
    source: &dyn CandidateSource,
    store_len: Option<usize>,
    gateway: &Gateway,
    templates: &PairTemplates<'_>,
    n: usize,
    exclude_same_call: bool,
) -> Result<BuildOutcome, QaError> {
    if store_len == Some(0) {
        return Err(QaError::EmptyStore);
    }
    let results: Vec<(Option<QaPair>, AuditRecord)> = demands
        .par_iter()
        .map(|d| build_one(d, source, gateway, templates, n, exclude_same_call))
        .collect();
    let mut out = BuildOutcome::default();
    for (pair, audit) in results {
        out.pairs.extend(pair);
        out.audit.push(audit);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionTemplate {
    pub template_id: String,
    pub text: String,
}

pub fn default_instruction_templates() -> Vec<InstructionTemplate> {
    [
        ("ask", "What did the customer ask?"),
        ("recommendation", "What was the agent's recommendation?"),
        (
            "solution",
            "Based on the customer's query, what was the recommended solution?",
        ),
        ("reply", "How should a support agent reply to this customer request?"),
        (
            "resolve",
            "Answer the customer's request the way the support team resolved it.",
        ),
    ]
    .into_iter()
    .map(|(id, text)| InstructionTemplate {
        template_id: id.to_string(),
        text: text.to_string(),
    })
    .collect()
}

/// One template per line: `template_id <TAB> instruction text`. Blank lines
/// and `#` comments are skipped.
pub fn parse_instruction_templates(text: &str) -> Result<Vec<InstructionTemplate>, QaError> {
    let mut out: Vec<InstructionTemplate> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let Some((id, body)) = line.split_once('\t') else {
            return Err(QaError::TemplateSyntax {
                line: line_no,
                message: "expected `id<TAB>text`".into(),
            });
        };
        let (id, body) = (id.trim(), body.trim());
        if id.is_empty() || body.is_empty() {
            return Err(QaError::TemplateSyntax {
                line: line_no,
                message: "empty id or text".into(),
            });
        }
        if out.iter().any(|t| t.template_id == id) {
            return Err(QaError::TemplateSyntax {
                line: line_no,
                message: format!("duplicate id {id}"),
            });
        }
        out.push(InstructionTemplate {
            template_id: id.into(),
            text: body.into(),
        });
    }
    if out.is_empty() {
        return Err(QaError::EmptyTemplateSet);
    }
    Ok(out)
}

pub fn load_instruction_templates(path: &Path) -> Result<Vec<InstructionTemplate>, QaError> {
    let text = std::fs::read_to_string(path).map_err(|source| QaError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_instruction_templates(&text)
}

/// Seeded permutation of the template set, cycled by position: over any
/// `len` consecutive positions each template is used exactly once.
pub fn rotation(len: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

pub fn format_instruct(
    pair: &QaPair,
    templates: &[InstructionTemplate],
    seed: u64,
    position: usize,
) -> Result<InstructRecord, QaError> {
    if templates.is_empty() {
        return Err(QaError::EmptyTemplateSet);
    }
    if pair.question.trim().is_empty() || pair.answer.trim().is_empty() {
        return Err(QaError::EmptyPairField(pair.demand_id.clone()));
    }
    let order = rotation(templates.len(), seed);
    let t = &templates[order[position % templates.len()]];
    Ok(InstructRecord {
        instruction: t.text.clone(),
        input: pair.question.clone(),
        output: pair.answer.clone(),
        meta: RecordMeta {
            demand_id: pair.demand_id.clone(),
            source_call_id: pair.call_id.clone(),
            candidate_call_ids: pair.candidate_refs.iter().map(|c| c.call_id.clone()).collect(),
            template_id: t.template_id.clone(),
            pipeline_version: PIPELINE_VERSION.to_string(),
            demand_validity: pair.validity,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asr::TranscriptSegment;
    use crate::llm::{Task, TemplateSet};
    use crate::vector_store::{VectorEntry, VectorStore};

    fn seg(start: f64, speaker: Speaker, text: &str) -> TranscriptSegment {
        TranscriptSegment {
            start_s: start,
            end_s: start + 1.0,
            text: text.into(),
            speaker,
            confidence: None,
        }
    }

    fn call(segments: Vec<TranscriptSegment>) -> CallTranscript {
        CallTranscript {
            call_id: "c1".into(),
            segments,
        }
    }

    const LONG: &str = "Claro, a segunda via pode ser emitida pelo aplicativo na opção faturas hoje mesmo.";

    #[test]
    fn demand_window() {
        let t = call(vec![
            seg(0.0, Speaker::Customer, "Bom dia."),
            seg(2.0, Speaker::Customer, "Quero a segunda via da fatura."),
            seg(4.0, Speaker::Agent, LONG),
            seg(9.0, Speaker::Customer, "Obrigado."),
        ]);
        assert_eq!(
            extract_demand_utterances(&t, 8).unwrap(),
            "Bom dia. Quero a segunda via da fatura."
        );
        let none = call(vec![seg(0.0, Speaker::Agent, LONG)]);
        assert!(matches!(
            extract_demand_utterances(&none, 8),
            Err(QaError::NoCustomerSpeech(_))
        ));
        let short = call(vec![
            seg(0.0, Speaker::Customer, "Oi."),
            seg(1.0, Speaker::Agent, "Pois não, pode falar."),
            seg(2.0, Speaker::Customer, "Quero cancelar."),
        ]);
        assert_eq!(extract_demand_utterances(&short, 8).unwrap(), "Oi. Quero cancelar.");
        assert_eq!(extract_response_utterances(&short, 8), None);
    }

    #[test]
    fn agent_greeting_before_customer_does_not_close_window() {
        let t = call(vec![
            seg(
                0.0,
                Speaker::Agent,
                "Olá, bem-vindo à central, meu nome é <NAME>, como posso ajudar?",
            ),
            seg(3.0, Speaker::Customer, "Quero cancelar meu plano."),
            seg(5.0, Speaker::Agent, LONG),
        ]);
        assert_eq!(extract_demand_utterances(&t, 8).unwrap(), "Quero cancelar meu plano.");
    }

    #[test]
    fn response_joins_agent_segments() {
        let t = call(vec![
            seg(0.0, Speaker::Customer, "Quero a fatura."),
            seg(1.0, Speaker::Agent, LONG),
            seg(5.0, Speaker::Customer, "Certo."),
            seg(6.0, Speaker::Agent, "Vou enviar."),
            seg(7.0, Speaker::Agent, "Mais alguma coisa?"),
        ]);
        assert_eq!(
            extract_response_utterances(&t, 8).unwrap(),
            format!("{LONG} Vou enviar. Mais alguma coisa?")
        );
    }

    fn pair(demand: &str, answer: &str) -> QaPair {
        QaPair {
            demand_id: demand_id_for(demand),
            call_id: demand.into(),
            question: "Quero a fatura.".into(),
            answer: answer.into(),
            candidate_refs: vec![],
            validity: DemandValidity::Invalid,
            refine_template: "r".into(),
            synthesize_template: "s".into(),
        }
    }

    #[test]
    fn rotation_uses_each_template_equally() {
        let set: Vec<InstructionTemplate> = default_instruction_templates().into_iter().take(3).collect();
        let ids: Vec<String> = (0..9)
            .map(|i| {
                format_instruct(&pair("c", "a b c"), &set, 42, i)
                    .unwrap()
                    .meta
                    .template_id
            })
            .collect();
        for t in &set {
            assert_eq!(ids.iter().filter(|id| **id == t.template_id).count(), 3);
        }
        let again: Vec<String> = (0..9)
            .map(|i| {
                format_instruct(&pair("c", "a b c"), &set, 42, i)
                    .unwrap()
                    .meta
                    .template_id
            })
            .collect();
        assert_eq!(ids, again);
        assert_eq!(ids[..3], ids[3..6]);
    }

    #[test]
    fn format_guards() {
        let one = vec![default_instruction_templates().remove(0)];
        for i in 0..4 {
            assert_eq!(
                format_instruct(&pair("c", "x y z"), &one, 1, i)
                    .unwrap()
                    .meta
                    .template_id,
                "ask"
            );
        }
        let r = format_instruct(&pair("c", "x y z"), &one, 1, 0).unwrap();
        assert_eq!(r.meta.demand_validity, DemandValidity::Invalid);
        assert!(matches!(
            format_instruct(&pair("c", " "), &one, 1, 0),
            Err(QaError::EmptyPairField(_))
        ));
        assert!(matches!(
            format_instruct(&pair("c", "x"), &[], 1, 0),
            Err(QaError::EmptyTemplateSet)
        ));
    }

    #[test]
    fn template_file() {
        let set = parse_instruction_templates("# comment\na\tWhat was asked?\nb\tWhat was answered?\n").unwrap();
        assert_eq!(set.len(), 2);
        assert!(matches!(
            parse_instruction_templates("a What\n"),
            Err(QaError::TemplateSyntax { line: 1, .. })
        ));
        assert!(matches!(
            parse_instruction_templates("\n"),
            Err(QaError::EmptyTemplateSet)
        ));
    }

    fn own_demand_for(call_id: &str, gw: &Gateway) -> Demand {
        let set = TemplateSet::builtin();
        prepare_demand(
            call_id,
            "quero a segunda via",
            gw,
            set.get(Task::Rewrite, "v2").unwrap(),
            set.get(Task::Validity, "v2").unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn single_entry_store_gives_single_candidate() {
        let gw = Gateway::mock(16, 0);
        let set = TemplateSet::builtin();
        let store = VectorStore::new(16);
        store
            .insert(VectorEntry {
                entry_id: response_id_for("c2"),
                text: "A segunda via sai pelo aplicativo.".into(),
                persona: Persona::Agent,
                call_id: "c2".into(),
                embedding: gw.embed("A segunda via sai pelo aplicativo.").unwrap(),
            })
            .unwrap();
        let mut d = prepare_demand(
            "c1",
            "eu queria a segunda via",
            &gw,
            set.get(Task::Rewrite, "v2").unwrap(),
            set.get(Task::Validity, "v2").unwrap(),
        )
        .unwrap();
        d.embedding = Some(gw.embed(&d.rewritten).unwrap());
        let templates = PairTemplates {
            refine: set.get(Task::Refine, "v2").unwrap(),
            synthesize: set.get(Task::Synthesize, "v2").unwrap(),
        };
        let out = build_pairs(&[d.clone()], &store, Some(store.len()), &gw, &templates, 3, false).unwrap();
        assert_eq!(out.pairs.len(), 1);
        assert_eq!(out.pairs[0].candidate_refs.len(), 1);
        assert_eq!(out.pairs[0].answer, "A segunda via sai pelo aplicativo.");

        let empty = VectorStore::new(16);
        assert!(matches!(
            build_pairs(&[d.clone()], &empty, Some(0), &gw, &templates, 3, false),
            Err(QaError::EmptyStore)
        ));
        let own = build_pairs(&[d], &store, Some(1), &gw, &templates, 3, true).unwrap();
        assert_eq!(own.pairs.len(), 1);
        // the only agent entry belongs to c2, so c2's own demand finds nothing
        let mut solo = own_demand_for("c2", &gw);
        solo.embedding = gw.embed("x").ok();
        let out = build_pairs(&[solo], &store, Some(1), &gw, &templates, 3, true).unwrap();
        assert!(out.pairs.is_empty());
        assert_eq!(out.skipped().collect::<Vec<_>>(), vec![("c2:demand", "no_candidates")]);
    }
}
