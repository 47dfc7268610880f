//! Transcript repair and normalization.
//!
//! Operators run in a fixed order on every segment: hallucination filter,
//! repetition collapse, filler removal, term replacement, numeral
//! normalization, and finally sentence restoration across segments.

mod numerals;

pub use numerals::{evaluate_run, normalize_numbers, NumeralLexicon, NumeralWord};

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::asr::{CallTranscript, TranscriptSegment};

pub const DEFAULT_FILLERS_PT: &[&str] = &[
    "hum", "humm", "hmm", "hã", "ãh", "ahn", "éh", "eh", "uhm", "hein", "tipo", "né",
];
pub const DEFAULT_FILLERS_EN: &[&str] = &["um", "uh", "uhm", "erm", "er", "hmm", "mm", "ah"];

pub fn default_fillers(language: &str) -> HashSet<String> {
    let list = if language == "en" {
        DEFAULT_FILLERS_EN
    } else {
        DEFAULT_FILLERS_PT
    };
    list.iter().map(|s| s.to_string()).collect()
}

/// Lowercased token with surrounding punctuation stripped; used for matching.
pub fn token_key(token: &str) -> String {
    let trimmed = token.trim_matches(|c: char| !c.is_alphanumeric());
    if trimmed.is_empty() {
        token.to_lowercase()
    } else {
        trimmed.to_lowercase()
    }
}

fn collapse_pass<'a>(
    tokens: &[&'a str],
    n: usize,
    min_repeats: usize,
    protect: &dyn Fn(&str) -> bool,
) -> (Vec<&'a str>, bool) {
    let keys: Vec<String> = tokens.iter().map(|t| token_key(t)).collect();
    let mut out = Vec::with_capacity(tokens.len());
    let mut changed = false;
    let mut i = 0;
    while i < tokens.len() {
        if i + n <= tokens.len() && !tokens[i..i + n].iter().all(|t| protect(t)) {
            let gram = &keys[i..i + n];
            let mut count = 1;
            while i + (count + 1) * n <= tokens.len() && &keys[i + count * n..i + (count + 1) * n] == gram {
                count += 1;
            }
            if count >= min_repeats {
                out.extend_from_slice(&tokens[i..i + n]);
                i += count * n;
                changed = true;
                continue;
            }
        }
        out.push(tokens[i]);
        i += 1;
    }
    (out, changed)
}

/// Reduces any n-gram (n <= `max_ngram`) repeated back to back at least
/// `min_repeats` times to a single occurrence. Longest n first, leftmost
/// first, repeated to a fixpoint. Whitespace is normalized to single spaces.
pub fn collapse_repetitions(text: &str, max_ngram: usize, min_repeats: usize) -> String {
    collapse_repetitions_with(text, max_ngram, min_repeats, &|_| false)
}

/// As [`collapse_repetitions`], skipping n-grams made only of tokens for
/// which `protect` returns true (used to keep spoken digit strings intact).
pub fn collapse_repetitions_with(
    text: &str,
    max_ngram: usize,
    min_repeats: usize,
    protect: &dyn Fn(&str) -> bool,
) -> String {
    assert!(max_ngram >= 1 && min_repeats >= 2);
    let mut tokens: Vec<&str> = text.split_whitespace().collect();
    loop {
        let mut any = false;
        for n in (1..=max_ngram).rev() {
            let (next, changed) = collapse_pass(&tokens, n, min_repeats, protect);
            tokens = next;
            any |= changed;
        }
        if !any {
            break;
        }
    }
    tokens.join(" ")
}

/// Drops filler tokens (matched case-insensitively, ignoring punctuation)
/// and collapses whitespace. Remaining tokens keep their case.
pub fn remove_fillers(text: &str, fillers: &HashSet<String>) -> String {
    text.split_whitespace()
        .filter(|t| !fillers.contains(&token_key(t)))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Applies a case-insensitive whole-token replacement table.
pub fn replace_terms(text: &str, table: &BTreeMap<String, String>) -> String {
    if table.is_empty() {
        return text.to_string();
    }
    text.split_whitespace()
        .map(|t| {
            let key = token_key(t);
            match table.get(&key) {
                Some(rep) => t.replacen(t.trim_matches(|c: char| !c.is_alphanumeric()), rep, 1),
                None => t.to_string(),
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

type Step<'a> = (&'static str, Box<dyn Fn(&str) -> String + 'a>);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    Hallucination,
    EmptyAfterClean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HallucinationVerdict {
    Keep,
    Drop,
}

/// Drops a segment whose distinct/total token ratio is below
/// `repetition_ratio_max`, once it has at least `min_tokens` tokens.
pub fn filter_hallucination(
    segment: &TranscriptSegment,
    repetition_ratio_max: f64,
    min_tokens: usize,
) -> HallucinationVerdict {
    let keys: Vec<String> = segment.text.split_whitespace().map(token_key).collect();
    if keys.len() < min_tokens.max(1) {
        return HallucinationVerdict::Keep;
    }
    let distinct: HashSet<&String> = keys.iter().collect();
    let ratio = distinct.len() as f64 / keys.len() as f64;
    if ratio < repetition_ratio_max {
        HallucinationVerdict::Drop
    } else {
        HallucinationVerdict::Keep
    }
}

fn ends_with_terminal(text: &str) -> bool {
    text.trim_end().ends_with(['.', '?', '!', '…'])
}

fn capitalize_first_alpha(text: &str) -> String {
    match text.char_indices().find(|(_, c)| c.is_alphabetic()) {
        Some((i, c)) if c.is_lowercase() => {
            let mut s = String::with_capacity(text.len() + 2);
            s.push_str(&text[..i]);
            s.extend(c.to_uppercase());
            s.push_str(&text[i + c.len_utf8()..]);
            s
        }
        _ => text.to_string(),
    }
}

/// Uppercases the first letter after every `. `, `? ` or `! ` inside a segment
/// (ellipses excluded).
fn capitalize_after_marks(text: &str) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    let mut pending = false;
    for (i, &c) in chars.iter().enumerate() {
        if pending && c.is_alphabetic() {
            out.extend(c.to_uppercase());
            pending = false;
            continue;
        }
        if pending && !c.is_whitespace() && !c.is_alphabetic() && !matches!(c, '"' | '\'' | '(' | '<') {
            pending = false;
        }
        out.push(c);
        let is_mark =
            matches!(c, '?' | '!') || (c == '.' && (i == 0 || chars[i - 1] != '.') && chars.get(i + 1) != Some(&'.'));
        if is_mark && chars.get(i + 1).is_some_and(|n| n.is_whitespace()) {
            pending = true;
        }
    }
    out
}

/// Rule-based punctuation: a period closes a segment when the speaker changes
/// or the same-speaker pause exceeds `pause_gap_s` (and at the end of the
/// transcript); the first letter after a terminal mark is capitalized.
pub fn restore_sentences(segments: &[TranscriptSegment], pause_gap_s: f64) -> Vec<TranscriptSegment> {
    let mut out: Vec<TranscriptSegment> = Vec::with_capacity(segments.len());
    for (i, seg) in segments.iter().enumerate() {
        let mut text = capitalize_after_marks(seg.text.trim());
        let starts_sentence = out.last().is_none_or(|prev| ends_with_terminal(&prev.text));
        if starts_sentence {
            text = capitalize_first_alpha(&text);
        }
        let boundary = match segments.get(i + 1) {
            None => true,
            Some(next) => next.speaker != seg.speaker || next.start_s - seg.end_s > pause_gap_s,
        };
        if boundary && !ends_with_terminal(&text) {
            let trimmed = text.trim_end_matches([',', ';', ':', ' ']);
            text = format!("{trimmed}.");
        }
        out.push(TranscriptSegment { text, ..seg.clone() });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CleanConfig {
    pub language: String,
    pub max_ngram: usize,
    pub min_repeats: usize,
    pub repetition_ratio_max: f64,
    pub min_tokens: usize,
    pub pause_gap_s: f64,
    /// Overrides the built-in filler list when present.
    pub fillers: Option<Vec<String>>,
    pub replacements: BTreeMap<String, String>,
}

impl Default for CleanConfig {
    fn default() -> Self {
        Self {
            language: "pt".into(),
            max_ngram: 3,
            min_repeats: 2,
            repetition_ratio_max: 0.3,
            min_tokens: 5,
            pause_gap_s: 1.0,
            fillers: None,
            replacements: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentCleaning {
    pub segment_ref: usize,
    pub operators_applied: Vec<String>,
    pub dropped: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drop_reason: Option<DropReason>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CleaningReport {
    pub segments: Vec<SegmentCleaning>,
}

impl CleaningReport {
    pub fn dropped_count(&self) -> usize {
        self.segments.iter().filter(|s| s.dropped).count()
    }
}

/// Prepared cleaning operators for one language.
#[derive(Debug, Clone)]
pub struct Cleaner {
    config: CleanConfig,
    fillers: HashSet<String>,
    lexicon: NumeralLexicon,
}

impl Cleaner {
    pub fn new(config: CleanConfig) -> Option<Self> {
        let lexicon = NumeralLexicon::for_language(&config.language)?;
        let fillers = match &config.fillers {
            Some(list) => list.iter().map(|s| s.to_lowercase()).collect(),
            None => default_fillers(&config.language),
        };
        Some(Self {
            config,
            fillers,
            lexicon,
        })
    }

    pub fn lexicon(&self) -> &NumeralLexicon {
        &self.lexicon
    }

    pub fn clean(&self, transcript: &CallTranscript) -> (CallTranscript, CleaningReport) {
        let cfg = &self.config;
        let mut kept = Vec::new();
        let mut report = CleaningReport::default();
        for (idx, seg) in transcript.segments.iter().enumerate() {
            let mut applied = Vec::new();
            if filter_hallucination(seg, cfg.repetition_ratio_max, cfg.min_tokens) == HallucinationVerdict::Drop {
                report.segments.push(SegmentCleaning {
                    segment_ref: idx,
                    operators_applied: vec!["hallucination_filter".into()],
                    dropped: true,
                    drop_reason: Some(DropReason::Hallucination),
                });
                continue;
            }
            let mut text = seg.text.clone();
            let lexicon = &self.lexicon;
            let steps: [Step<'_>; 4] = [
                (
                    "collapse_repetitions",
                    Box::new(|t: &str| {
                        collapse_repetitions_with(t, cfg.max_ngram, cfg.min_repeats, &|tok| {
                            lexicon.is_numeric_token(tok)
                        })
                    }),
                ),
                ("remove_fillers", Box::new(|t: &str| remove_fillers(t, &self.fillers))),
                ("replace_terms", Box::new(|t: &str| replace_terms(t, &cfg.replacements))),
                ("normalize_numbers", Box::new(|t: &str| normalize_numbers(t, lexicon))),
            ];
            for (name, op) in steps.iter() {
                let next = op(&text);
                if next != text {
                    applied.push(name.to_string());
                    text = next;
                }
            }
            if text.trim().is_empty() {
                report.segments.push(SegmentCleaning {
                    segment_ref: idx,
                    operators_applied: applied,
                    dropped: true,
                    drop_reason: Some(DropReason::EmptyAfterClean),
                });
                continue;
            }
            report.segments.push(SegmentCleaning {
                segment_ref: idx,
                operators_applied: applied,
                dropped: false,
                drop_reason: None,
            });
            kept.push(TranscriptSegment { text, ..seg.clone() });
        }
        let restored = restore_sentences(&kept, cfg.pause_gap_s);
        let mut kept_iter = report.segments.iter_mut().filter(|s| !s.dropped);
        for (before, after) in kept.iter().zip(&restored) {
            let entry = kept_iter.next().expect("one report entry per kept segment");
            if before.text != after.text {
                entry.operators_applied.push("restore_sentences".into());
            }
        }
        (
            CallTranscript {
                call_id: transcript.call_id.clone(),
                segments: restored,
            },
            report,
        )
    }
}
