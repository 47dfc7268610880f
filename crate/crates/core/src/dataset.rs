//! Instruct dataset records and their JSONL encoding.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemandValidity {
    Valid,
    Invalid,
    #[default]
    Unchecked,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordMeta {
    pub demand_id: String,
    pub source_call_id: String,
    pub candidate_call_ids: Vec<String>,
    pub template_id: String,
    pub pipeline_version: String,
    #[serde(default)]
    pub demand_validity: DemandValidity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstructRecord {
    pub instruction: String,
    pub input: String,
    pub output: String,
    pub meta: RecordMeta,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RecordError {
    #[error("field {0} is empty")]
    EmptyField(&'static str),
    #[error("{count} candidate call ids exceed top_n = {top_n}")]
    TooManyCandidates { count: usize, top_n: usize },
}

impl InstructRecord {
    /// Structural checks that hold for every record regardless of config.
    pub fn check(&self) -> Result<(), RecordError> {
        for (name, value) in [
            ("instruction", &self.instruction),
            ("input", &self.input),
            ("output", &self.output),
        ] {
            if value.trim().is_empty() {
                return Err(RecordError::EmptyField(name));
            }
        }
        Ok(())
    }

    pub fn check_with_top_n(&self, top_n: usize) -> Result<(), RecordError> {
        self.check()?;
        let count = self.meta.candidate_call_ids.len();
        if count > top_n {
            return Err(RecordError::TooManyCandidates { count, top_n });
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("record {index}: {source}")]
    Invalid { index: usize, source: RecordError },
    #[error("{}", format_line_errors(.0))]
    Lines(Vec<LineError>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineError {
    /// 1-based line number.
    pub line: usize,
    pub message: String,
}

fn format_line_errors(errors: &[LineError]) -> String {
    errors
        .iter()
        .map(|e| format!("line {}: {}", e.line, e.message))
        .collect::<Vec<_>>()
        .join("; ")
}

/// One compact JSON object per line, each line terminated by `\n`.
pub fn encode_instruct_jsonl(records: &[InstructRecord]) -> Result<Vec<u8>, JsonlError> {
    let mut out = Vec::new();
    for (index, r) in records.iter().enumerate() {
        r.check().map_err(|source| JsonlError::Invalid { index, source })?;
        serde_json::to_writer(&mut out, r).expect("records serialize");
        out.push(b'\n');
    }
    Ok(out)
}

/// Decodes every line and collects all failures. Blank lines are skipped.
pub fn decode_instruct_jsonl(bytes: &[u8]) -> Result<Vec<InstructRecord>, JsonlError> {
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in bytes.split(|&b| b == b'\n').enumerate() {
        let line_no = i + 1;
        let line = line.strip_suffix(b"\r").unwrap_or(line);
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        match serde_json::from_slice::<InstructRecord>(line) {
            Ok(r) => match r.check() {
                Ok(()) => records.push(r),
                Err(e) => errors.push(LineError {
                    line: line_no,
                    message: e.to_string(),
                }),
            },
            Err(e) => errors.push(LineError {
                line: line_no,
                message: e.to_string(),
            }),
        }
    }
    if errors.is_empty() {
        Ok(records)
    } else {
        Err(JsonlError::Lines(errors))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(output: &str) -> InstructRecord {
        InstructRecord {
            instruction: "What did the customer ask?".into(),
            input: "Quero a segunda via.".into(),
            output: output.into(),
            meta: RecordMeta {
                demand_id: "d-1".into(),
                source_call_id: "call-1".into(),
                candidate_call_ids: vec!["call-2".into()],
                template_id: "t0".into(),
                pipeline_version: "0.1.0".into(),
                demand_validity: DemandValidity::Valid,
            },
        }
    }

    #[test]
    fn empty_round_trip() {
        let bytes = encode_instruct_jsonl(&[]).unwrap();
        assert!(bytes.is_empty());
        assert!(decode_instruct_jsonl(&bytes).unwrap().is_empty());
    }

    #[test]
    fn keys_are_exact() {
        let bytes = encode_instruct_jsonl(&[rec("Enviamos por e-mail.")]).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        assert_eq!(keys, ["input", "instruction", "meta", "output"]);
    }

    #[test]
    fn empty_output_reports_line() {
        let good = String::from_utf8(encode_instruct_jsonl(&[rec("ok então.")]).unwrap()).unwrap();
        let bad = good.replace("\"output\":\"ok então.\"", "\"output\":\"\"");
        let text = format!("{good}{bad}not json\n");
        match decode_instruct_jsonl(text.as_bytes()) {
            Err(JsonlError::Lines(errs)) => {
                assert_eq!(errs.iter().map(|e| e.line).collect::<Vec<_>>(), vec![2, 3]);
                assert!(errs[0].message.contains("output"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(encode_instruct_jsonl(&[rec(" ")]).is_err());
    }

    #[test]
    fn top_n_guard() {
        let mut r = rec("x y z");
        r.meta.candidate_call_ids = vec!["a".into(), "b".into(), "c".into(), "d".into()];
        assert_eq!(
            r.check_with_top_n(3),
            Err(RecordError::TooManyCandidates { count: 4, top_n: 3 })
        );
    }

    proptest! {
        #[test]
        fn round_trip(out in "[^\\s]\\PC{0,40}", tail in proptest::collection::vec("\\PC{0,8}", 0..3)) {
            let mut r = rec(&out);
            r.meta.candidate_call_ids = tail;
            let bytes = encode_instruct_jsonl(std::slice::from_ref(&r)).unwrap();
            prop_assert_eq!(decode_instruct_jsonl(&bytes).unwrap(), vec![r]);
        }
    }
}
