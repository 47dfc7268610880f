//! PII detection, masking with fixed placeholder tokens, and post-generation
//! leak scanning.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::InstructRecord;

#[derive(Debug, Error)]
pub enum AnonymizeError {
    #[error("rule file line {line}: {message}")]
    RuleSyntax { line: usize, message: String },
    #[error("rule file line {line}: invalid pattern: {source}")]
    BadPattern { line: usize, source: regex::Error },
    #[error("span {start}..{end} is out of bounds for text of {len} chars")]
    SpanOutOfBounds { start: usize, end: usize, len: usize },
    #[error("spans overlap or are unsorted at {0}")]
    SpanOrder(usize),
    #[error("io error reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PiiCategory {
    Name,
    AccountId,
    Phone,
    Email,
    DocId,
    Address,
}

impl PiiCategory {
    pub const ALL: [PiiCategory; 6] = [
        PiiCategory::Name,
        PiiCategory::AccountId,
        PiiCategory::Phone,
        PiiCategory::Email,
        PiiCategory::DocId,
        PiiCategory::Address,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PiiCategory::Name => "NAME",
            PiiCategory::AccountId => "ACCOUNT_ID",
            PiiCategory::Phone => "PHONE",
            PiiCategory::Email => "EMAIL",
            PiiCategory::DocId => "DOC_ID",
            PiiCategory::Address => "ADDRESS",
        }
    }

    pub fn placeholder(self) -> &'static str {
        match self {
            PiiCategory::Name => "<NAME>",
            PiiCategory::AccountId => "<ACCOUNT_ID>",
            PiiCategory::Phone => "<PHONE>",
            PiiCategory::Email => "<EMAIL>",
            PiiCategory::DocId => "<DOC_ID>",
            PiiCategory::Address => "<ADDRESS>",
        }
    }
}

impl fmt::Display for PiiCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PiiCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PiiCategory::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown category {s:?}"))
    }
}

#[derive(Debug, Clone)]
pub enum Matcher {
    /// Regex; when it has a capture group, group 1 is the PII span.
    Pattern(Regex),
    /// Whole-word, case-insensitive dictionary, compiled to a regex.
    Dictionary { words: Vec<String>, regex: Regex },
}

impl Matcher {
    pub fn dictionary(words: Vec<String>) -> Result<Self, regex::Error> {
        let mut sorted = words.clone();
        // longer entries first so "Ana Paula" wins over "Ana"
        sorted.sort_by(|a, b| b.chars().count().cmp(&a.chars().count()).then(a.cmp(b)));
        let alternatives: Vec<String> = sorted.iter().map(|w| regex::escape(w)).collect();
        let regex = Regex::new(&format!(r"(?i)\b(?:{})\b", alternatives.join("|")))?;
        Ok(Matcher::Dictionary { words, regex })
    }

    fn regex(&self) -> &Regex {
        match self {
            Matcher::Pattern(r) => r,
            Matcher::Dictionary { regex, .. } => regex,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PiiRule {
    pub category: PiiCategory,
    pub matcher: Matcher,
    pub priority: i32,
}

impl PiiRule {
    pub fn pattern(category: PiiCategory, pattern: &str, priority: i32) -> Result<Self, regex::Error> {
        Ok(Self {
            category,
            matcher: Matcher::Pattern(Regex::new(pattern)?),
            priority,
        })
    }

    /// Byte ranges of every match of this rule.
    fn find_all(&self, text: &str) -> Vec<(usize, usize)> {
        let re = self.matcher.regex();
        if re.captures_len() > 1 {
            re.captures_iter(text)
                .filter_map(|c| c.get(1).map(|m| (m.start(), m.end())))
                .filter(|(s, e)| s < e)
                .collect()
        } else {
            re.find_iter(text)
                .map(|m| (m.start(), m.end()))
                .filter(|(s, e)| s < e)
                .collect()
        }
    }
}

/// Detected PII. Offsets are in characters; the matched text itself is only
/// kept as a SHA-256 digest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PiiSpan {
    pub start: usize,
    pub end: usize,
    pub category: PiiCategory,
    pub original_digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RedactionReport {
    pub counts: BTreeMap<PiiCategory, usize>,
}

impl RedactionReport {
    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn merge(&mut self, other: &RedactionReport) {
        for (c, n) in &other.counts {
            *self.counts.entry(*c).or_default() += n;
        }
    }
}

const DEFAULT_NAMES: &[&str] = &[
    "Ana Paula",
    "João",
    "Joao",
    "Maria",
    "José",
    "Jose",
    "Antônio",
    "Antonio",
    "Francisco",
    "Carlos",
    "Paulo",
    "Pedro",
    "Lucas",
    "Luiz",
    "Marcos",
    "Luís",
    "Gabriel",
    "Rafael",
    "Daniel",
    "Marcelo",
    "Bruno",
    "Eduardo",
    "Felipe",
    "Rodrigo",
    "Fernanda",
    "Juliana",
    "Adriana",
    "Mariana",
    "Patrícia",
    "Patricia",
    "Aline",
    "Camila",
    "Sandra",
    "Beatriz",
    "Larissa",
    "Letícia",
    "Leticia",
    "Vanessa",
    "Gustavo",
    "Thiago",
    "Tiago",
    "Ricardo",
    "Fernando",
    "Roberto",
    "Sérgio",
    "Sergio",
    "Silva",
    "Santos",
    "Oliveira",
    "Souza",
    "Sousa",
    "Pereira",
    "Ferreira",
    "Almeida",
    "Ribeiro",
    "Carvalho",
    "Gomes",
    "Martins",
    "Rocha",
    "Barbosa",
    "Cardoso",
    "Teixeira",
    "Mendes",
    "Nunes",
    "Araújo",
    "Araujo",
    "John",
    "Mary",
    "Michael",
    "Jennifer",
    "William",
    "Elizabeth",
    "Smith",
    "Johnson",
];

/// Placeholder tokens; detection never reports matches that touch them.
static PLACEHOLDER_RE: std::sync::LazyLock<Regex> = std::sync::LazyLock::new(|| {
    Regex::new(r"<(?:NAME|ACCOUNT_ID|PHONE|EMAIL|DOC_ID|ADDRESS)>").expect("placeholder regex")
});

/// Built-in rule set: patterns for e-mail, phone, CPF-shaped documents,
/// account numbers near account words and street addresses, plus a name
/// dictionary.
pub fn default_rules() -> Vec<PiiRule> {
    let p = |c, pat: &str, prio| PiiRule::pattern(c, pat, prio).expect("built-in pattern");
    vec![
        p(
            PiiCategory::Email,
            r"[A-Za-z0-9._%+-]+@[A-Za-z0-9-]+(?:\.[A-Za-z0-9-]+)*\.[A-Za-z]{2,}",
            50,
        ),
        p(
            PiiCategory::AccountId,
            r"(?i)\b(?:conta|contrato|protocolo|cliente|matr[ií]cula|c[oó]digo|account|acct|customer)\b(?:\s+(?:n[uú]mero|number|no\.?|n[ºo°]\.?|é|e|do|da|de|is|id|:|#))*[\s:#]*(\d{6,12})\b",
            40,
        ),
        p(PiiCategory::DocId, r"\b\d{3}\.?\d{3}\.?\d{3}-?\d{2}\b", 30),
        p(
            PiiCategory::Phone,
            r"(?:\+\d{1,3}\s?)?(?:\(\d{2,3}\)\s?|\b\d{2,3}[\s.-])?\b\d{3,5}-\d{4}\b",
            20,
        ),
        p(PiiCategory::Phone, r"\b\d{8,11}\b", 10),
        p(
            PiiCategory::Address,
            r"(?:\b(?i:rua|avenida|av\.|travessa|alameda|rodovia|estrada|pra[çc]a|street|avenue|road)\s+)(?:(?:d[aeo]s?|of|the)\s+)?\p{Lu}[\p{L}]*(?:\s+(?:(?:d[aeo]s?|of)\s+)?\p{Lu}[\p{L}]*)*(?:,?\s*(?:n[ºo°]\.?\s*)?\d{1,5}\b)?",
            15,
        ),
        PiiRule {
            category: PiiCategory::Name,
            matcher: Matcher::dictionary(DEFAULT_NAMES.iter().map(|s| s.to_string()).collect())
                .expect("name dictionary"),
            priority: 5,
        },
    ]
}

/// Parses the tab-separated rule format:
/// `category <TAB> pattern|dict <TAB> payload <TAB> priority`.
///
/// For `dict`, the payload is a comma-separated word list, or `@file` naming
/// a newline-separated list relative to `base_dir`. Blank lines and lines
/// starting with `#` are ignored.
pub fn parse_rules(text: &str, base_dir: &Path) -> Result<Vec<PiiRule>, AnonymizeError> {
    let mut rules = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() || raw.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 4 {
            return Err(AnonymizeError::RuleSyntax {
                line,
                message: format!("expected 4 tab-separated fields, found {}", fields.len()),
            });
        }
        let category: PiiCategory = fields[0]
            .trim()
            .parse()
            .map_err(|message| AnonymizeError::RuleSyntax { line, message })?;
        let priority: i32 = fields[3].trim().parse().map_err(|_| AnonymizeError::RuleSyntax {
            line,
            message: format!("priority {:?} is not an integer", fields[3]),
        })?;
        let payload = fields[2];
        let matcher = match fields[1].trim() {
            "pattern" => {
                Matcher::Pattern(Regex::new(payload).map_err(|source| AnonymizeError::BadPattern { line, source })?)
            }
            "dict" => {
                let words: Vec<String> = if let Some(file) = payload.strip_prefix('@') {
                    let path = base_dir.join(file.trim());
                    std::fs::read_to_string(&path)
                        .map_err(|source| AnonymizeError::Io {
                            path: path.display().to_string(),
                            source,
                        })?
                        .lines()
                        .map(|l| l.trim().to_string())
                        .filter(|l| !l.is_empty() && !l.starts_with('#'))
                        .collect()
                } else {
                    payload
                        .split(',')
                        .map(|w| w.trim().to_string())
                        .filter(|w| !w.is_empty())
                        .collect()
                };
                if words.is_empty() {
                    return Err(AnonymizeError::RuleSyntax {
                        line,
                        message: "empty dictionary".into(),
                    });
                }
                Matcher::dictionary(words).map_err(|source| AnonymizeError::BadPattern { line, source })?
            }
            other => {
                return Err(AnonymizeError::RuleSyntax {
                    line,
                    message: format!("unknown matcher kind {other:?}"),
                })
            }
        };
        rules.push(PiiRule {
            category,
            matcher,
            priority,
        });
    }
    Ok(rules)
}

pub fn load_rules(path: &Path) -> Result<Vec<PiiRule>, AnonymizeError> {
    let text = std::fs::read_to_string(path).map_err(|source| AnonymizeError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_rules(&text, path.parent().unwrap_or(Path::new(".")))
}

fn digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

struct Candidate {
    start: usize,
    end: usize,
    chars: usize,
    priority: i32,
    category: PiiCategory,
}

/// Runs every rule and resolves overlaps: longest match first, then higher
/// priority, then leftmost. Matches touching an existing placeholder token
/// are ignored. Returned spans are sorted and disjoint.
pub fn detect_pii(text: &str, rules: &[PiiRule]) -> Vec<PiiSpan> {
    let protected: Vec<(usize, usize)> = PLACEHOLDER_RE.find_iter(text).map(|m| (m.start(), m.end())).collect();
    let mut candidates: Vec<Candidate> = Vec::new();
    for rule in rules {
        for (start, end) in rule.find_all(text) {
            if protected.iter().any(|&(ps, pe)| start < pe && ps < end) {
                continue;
            }
            candidates.push(Candidate {
                start,
                end,
                chars: text[start..end].chars().count(),
                priority: rule.priority,
                category: rule.category,
            });
        }
    }
    candidates.sort_by(|a, b| {
        b.chars
            .cmp(&a.chars)
            .then(b.priority.cmp(&a.priority))
            .then(a.start.cmp(&b.start))
    });
    let mut accepted: Vec<Candidate> = Vec::new();
    for c in candidates {
        if accepted.iter().all(|a| c.end <= a.start || a.end <= c.start) {
            accepted.push(c);
        }
    }
    accepted.sort_by_key(|c| c.start);

    // byte offsets -> char offsets
    let char_index = |byte: usize| text[..byte].chars().count();
    accepted
        .into_iter()
        .map(|c| PiiSpan {
            start: char_index(c.start),
            end: char_index(c.end),
            category: c.category,
            original_digest: digest(&text[c.start..c.end]),
        })
        .collect()
}

/// Replaces each span by its placeholder, right to left.
pub fn redact(text: &str, spans: &[PiiSpan]) -> Result<(String, RedactionReport), AnonymizeError> {
    let boundaries: Vec<usize> = text
        .char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(text.len()))
        .collect();
    let len = boundaries.len() - 1;
    for (i, s) in spans.iter().enumerate() {
        if s.start >= s.end || s.end > len {
            return Err(AnonymizeError::SpanOutOfBounds {
                start: s.start,
                end: s.end,
                len,
            });
        }
        if i > 0 && spans[i - 1].end > s.start {
            return Err(AnonymizeError::SpanOrder(i));
        }
    }
    let mut out = text.to_string();
    let mut report = RedactionReport::default();
    for s in spans.iter().rev() {
        out.replace_range(boundaries[s.start]..boundaries[s.end], s.category.placeholder());
        *report.counts.entry(s.category).or_default() += 1;
    }
    Ok((out, report))
}

/// Detect-then-redact convenience used by the pipeline.
pub fn anonymize_text(text: &str, rules: &[PiiRule]) -> (String, RedactionReport) {
    let spans = detect_pii(text, rules);
    redact(text, &spans).expect("spans produced by detect_pii are valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordField {
    Instruction,
    Input,
    Output,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakViolation {
    pub record_index: usize,
    pub field: RecordField,
    pub category: PiiCategory,
}

/// Re-runs every rule over instruction, input and output of every record.
pub fn leak_scan(records: &[InstructRecord], rules: &[PiiRule]) -> Vec<LeakViolation> {
    let mut out = Vec::new();
    for (record_index, r) in records.iter().enumerate() {
        for (field, text) in [
            (RecordField::Instruction, &r.instruction),
            (RecordField::Input, &r.input),
            (RecordField::Output, &r.output),
        ] {
            for span in detect_pii(text, rules) {
                out.push(LeakViolation {
                    record_index,
                    field,
                    category: span.category,
                });
            }
        }
    }
    out
}
