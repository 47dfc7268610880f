//! Post-generation quality gates: coherence, redundancy, accounting,
//! leak counts, and a seeded sample for manual review.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anonymize::LeakViolation;
use crate::dataset::{encode_instruct_jsonl, DemandValidity, InstructRecord, JsonlError};
use crate::vector_store::cosine;

pub const EXIT_LEAK: i32 = 3;
pub const EXIT_INCOHERENT: i32 = 4;

#[derive(Debug, Error)]
pub enum ValidateError {
    #[error("accounting does not close: {demands_in} demands in, {pairs_out} pairs out, {skipped} skipped")]
    Accounting {
        demands_in: usize,
        pairs_out: usize,
        skipped: usize,
    },
    #[error("{records} records but {embeddings} question embeddings")]
    EmbeddingCount { records: usize, embeddings: usize },
    #[error("missing artifact {0}")]
    MissingArtifact(String),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoherenceReason {
    Empty,
    TooShort,
    Echo,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoherenceResult {
    pub index: usize,
    pub pass: bool,
    pub reasons: Vec<CoherenceReason>,
}

pub fn check_coherence(records: &[InstructRecord], min_output_tokens: usize) -> Vec<CoherenceResult> {
    records
        .iter()
        .enumerate()
        .map(|(index, r)| {
            let mut reasons = Vec::new();
            if [&r.instruction, &r.input, &r.output]
                .iter()
                .any(|f| f.trim().is_empty())
            {
                reasons.push(CoherenceReason::Empty);
            }
            if r.output.split_whitespace().count() < min_output_tokens {
                reasons.push(CoherenceReason::TooShort);
            }
            if !r.output.trim().is_empty() && r.input.trim() == r.output.trim() {
                reasons.push(CoherenceReason::Echo);
            }
            CoherenceResult {
                index,
                pass: reasons.is_empty(),
                reasons,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedundantPair {
    pub first: usize,
    pub second: usize,
    pub similarity: f64,
}

/// Every unordered pair `(i, j)`, `i < j`, whose question embeddings have
/// cosine similarity strictly above `threshold`. Exact O(n²) comparison.
pub fn check_redundancy(embeddings: &[Vec<f32>], threshold: f64) -> Vec<RedundantPair> {
    (0..embeddings.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            (i + 1..embeddings.len()).filter_map(move |j| {
                let similarity = cosine(&embeddings[i], &embeddings[j]);
                (similarity > threshold).then_some(RedundantPair {
                    first: i,
                    second: j,
                    similarity,
                })
            })
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completeness {
    pub demands_in: usize,
    pub pairs_out: usize,
    pub skipped_with_reason: BTreeMap<String, usize>,
}

impl Completeness {
    pub fn skipped(&self) -> usize {
        self.skipped_with_reason.values().sum()
    }

    pub fn closes(&self) -> bool {
        self.pairs_out + self.skipped() == self.demands_in
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub total_records: usize,
    pub coherent: usize,
    pub incoherent: Vec<CoherenceResult>,
    pub flagged_redundant: Vec<RedundantPair>,
    pub completeness: Completeness,
    pub leak_violations: usize,
    pub leak_details: Vec<LeakViolation>,
    pub invalid_demand_count: usize,
    pub invalid_demand_ratio: f64,
    pub sample_path: PathBuf,
    pub sample_size: usize,
}

impl ValidationReport {
    /// 0 when every gate passes, otherwise the documented failure code.
    pub fn exit_code(&self, coherence_tolerance: f64) -> i32 {
        if self.leak_violations > 0 {
            return EXIT_LEAK;
        }
        let failed = self.total_records - self.coherent;
        if self.total_records > 0 && failed as f64 / self.total_records as f64 > coherence_tolerance {
            return EXIT_INCOHERENT;
        }
        0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidateSettings {
    pub min_output_tokens: usize,
    /// Fraction of records allowed to fail coherence before the gate trips.
    pub coherence_tolerance: f64,
    pub sample_size: usize,
    pub sample_seed: u64,
}

impl Default for ValidateSettings {
    fn default() -> Self {
        Self {
            min_output_tokens: 3,
            coherence_tolerance: 0.0,
            sample_size: 25,
            sample_seed: 0,
        }
    }
}

pub struct ReportInputs<'a> {
    pub records: &'a [InstructRecord],
    /// Question embeddings aligned with `records`.
    pub question_embeddings: &'a [Vec<f32>],
    pub demand_validity: &'a [DemandValidity],
    /// Demands that produced no record, with the reason.
    pub skipped: &'a [(String, String)],
    pub leaks: &'a [LeakViolation],
    pub redundancy_threshold: f64,
}

/// Reason category: the part before the first `:`.
fn reason_key(reason: &str) -> String {
    reason.split(':').next().unwrap_or(reason).trim().to_string()
}

pub fn sample_indices(total: usize, size: usize, seed: u64) -> Vec<usize> {
    let m = size.min(total);
    let mut idx = rand::seq::index::sample(&mut ChaCha8Rng::seed_from_u64(seed), total, m).into_vec();
    idx.sort_unstable();
    idx
}

pub fn compile_report(
    inputs: &ReportInputs<'_>,
    settings: &ValidateSettings,
    sample_path: &Path,
) -> Result<ValidationReport, ValidateError> {
    let records = inputs.records;
    if inputs.question_embeddings.len() != records.len() {
        return Err(ValidateError::EmbeddingCount {
            records: records.len(),
            embeddings: inputs.question_embeddings.len(),
        });
    }
    let mut completeness = Completeness {
        demands_in: inputs.demand_validity.len(),
        pairs_out: records.len(),
        skipped_with_reason: BTreeMap::new(),
    };
    for (_, reason) in inputs.skipped {
        *completeness.skipped_with_reason.entry(reason_key(reason)).or_default() += 1;
    }
    if !completeness.closes() {
        return Err(ValidateError::Accounting {
            demands_in: completeness.demands_in,
            pairs_out: completeness.pairs_out,
            skipped: completeness.skipped(),
        });
    }

    let coherence = check_coherence(records, settings.min_output_tokens);
    let coherent = coherence.iter().filter(|c| c.pass).count();
    let flagged_redundant = check_redundancy(inputs.question_embeddings, inputs.redundancy_threshold);
    let invalid_demand_count = inputs
        .demand_validity
        .iter()
        .filter(|v| **v == DemandValidity::Invalid)
        .count();
    let invalid_demand_ratio = if inputs.demand_validity.is_empty() {
        0.0
    } else {
        invalid_demand_count as f64 / inputs.demand_validity.len() as f64
    };

    let picked: Vec<InstructRecord> = sample_indices(records.len(), settings.sample_size, settings.sample_seed)
        .into_iter()
        .map(|i| records[i].clone())
        .collect();
    let bytes = encode_instruct_jsonl(&picked)?;
    std::fs::write(sample_path, bytes).map_err(|source| ValidateError::Io {
        path: sample_path.display().to_string(),
        source,
    })?;

    Ok(ValidationReport {
        total_records: records.len(),
        coherent,
        incoherent: coherence.into_iter().filter(|c| !c.pass).collect(),
        flagged_redundant,
        completeness,
        leak_violations: inputs.leaks.len(),
        leak_details: inputs.leaks.to_vec(),
        invalid_demand_count,
        invalid_demand_ratio,
        sample_path: sample_path.to_path_buf(),
        sample_size: picked.len(),
    })
}

/// Records that pass coherence, carry no leak and are not the later member
/// of a redundant pair. The input is left untouched.
pub fn curate(records: &[InstructRecord], report: &ValidationReport) -> Vec<InstructRecord> {
    let mut drop = vec![false; records.len()];
    for c in &report.incoherent {
        drop[c.index] = true;
    }
    for p in &report.flagged_redundant {
        drop[p.second] = true;
    }
    for l in &report.leak_details {
        drop[l.record_index] = true;
    }
    records
        .iter()
        .zip(drop)
        .filter(|(_, d)| !d)
        .map(|(r, _)| r.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::RecordMeta;

    fn rec(input: &str, output: &str) -> InstructRecord {
        InstructRecord {
            instruction: "What did the customer ask?".into(),
            input: input.into(),
            output: output.into(),
            meta: RecordMeta::default(),
        }
    }

    #[test]
    fn coherence_reasons() {
        let res = check_coherence(
            &[
                rec("Quero a fatura.", "Quero a fatura."),
                rec("Quero a fatura.", "Sai pelo aplicativo."),
                rec("Quero a fatura.", "Ok."),
                rec("Quero a fatura.", ""),
            ],
            3,
        );
        assert_eq!(res[0].reasons, [CoherenceReason::Echo]);
        assert!(res[1].pass);
        assert_eq!(res[2].reasons, [CoherenceReason::TooShort]);
        assert_eq!(res[3].reasons, [CoherenceReason::Empty, CoherenceReason::TooShort]);
    }

    #[test]
    fn redundancy_cases() {
        let same = vec![vec![1.0, 2.0]; 4];
        let flags = check_redundancy(&same, 0.95);
        assert_eq!(flags.len(), 6);
        assert!(flags.iter().all(|p| (p.similarity - 1.0).abs() < 1e-12));
        assert!(check_redundancy(&same, 1.01).is_empty());
        assert!(check_redundancy(&[vec![1.0, 0.0], vec![0.0, 1.0]], 0.95).is_empty());
    }

    #[test]
    fn empty_report() {
        let dir = tempfile::tempdir().unwrap();
        let sample = dir.path().join("sample.jsonl");
        let inputs = ReportInputs {
            records: &[],
            question_embeddings: &[],
            demand_validity: &[],
            skipped: &[],
            leaks: &[],
            redundancy_threshold: 0.95,
        };
        let r = compile_report(&inputs, &ValidateSettings::default(), &sample).unwrap();
        assert_eq!(r.total_records, 0);
        assert_eq!(r.invalid_demand_ratio, 0.0);
        assert_eq!(r.sample_size, 0);
        assert_eq!(std::fs::read(&sample).unwrap(), b"");
        assert_eq!(r.exit_code(0.0), 0);
    }

    #[test]
    fn accounting_and_sampling() {
        let dir = tempfile::tempdir().unwrap();
        let sample = dir.path().join("sample.jsonl");
        let records: Vec<InstructRecord> = (0..30)
            .map(|i| rec("Quero x.", &format!("resposta numero {i}")))
            .collect();
        let emb: Vec<Vec<f32>> = (0..30).map(|i| vec![1.0, i as f32]).collect();
        let validity = vec![DemandValidity::Valid; 32];
        let skipped = vec![
            ("a".to_string(), "no_candidates".to_string()),
            ("b".to_string(), "gateway_failure: timeout".to_string()),
        ];
        let inputs = ReportInputs {
            records: &records,
            question_embeddings: &emb,
            demand_validity: &validity,
            skipped: &skipped,
            leaks: &[],
            redundancy_threshold: 1.01,
        };
        let r = compile_report(&inputs, &ValidateSettings::default(), &sample).unwrap();
        assert!(r.completeness.closes());
        assert_eq!(r.completeness.skipped_with_reason["gateway_failure"], 1);
        assert_eq!(r.sample_size, 25);
        let again = sample_indices(30, 25, 0);
        assert_eq!(again, sample_indices(30, 25, 0));
        assert_eq!(again.len(), 25);

        let short = &validity[..31];
        let bad = ReportInputs {
            demand_validity: short,
            ..inputs
        };
        assert!(matches!(
            compile_report(&bad, &ValidateSettings::default(), &sample),
            Err(ValidateError::Accounting { .. })
        ));
    }

    #[test]
    fn curation_drops_flagged() {
        let records = vec![rec("a b", "x y z"), rec("a b", "x y z w"), rec("c", "c")];
        let emb = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        let dir = tempfile::tempdir().unwrap();
        let validity = vec![DemandValidity::Valid; 3];
        let inputs = ReportInputs {
            records: &records,
            question_embeddings: &emb,
            demand_validity: &validity,
            skipped: &[],
            leaks: &[],
            redundancy_threshold: 0.95,
        };
        let report = compile_report(&inputs, &ValidateSettings::default(), &dir.path().join("s")).unwrap();
        assert_eq!(report.exit_code(0.0), EXIT_INCOHERENT);
        assert_eq!(report.exit_code(0.5), 0);
        assert_eq!(curate(&records, &report), vec![records[0].clone()]);
    }
}
