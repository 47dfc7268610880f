//! Offline rule-based stand-ins for the chat and embedding services. Both are
//! pure functions of their input (and seed).

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::template::Task;
use super::{ChatBackend, ChatRequest, EmbedBackend};
use crate::clean::token_key;
use crate::retry::BackendError;

/// Splits on `.`, `?` and `!`. Ellipses (`...`, `…`) and decimal points do
/// not end a sentence. Returned sentences are trimmed and non-empty.
pub fn split_sentences(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut cur = String::new();
    for (i, &c) in chars.iter().enumerate() {
        cur.push(c);
        let prev = i.checked_sub(1).map(|j| chars[j]);
        let next = chars.get(i + 1).copied();
        let terminal = match c {
            '?' | '!' => next != Some('?') && next != Some('!'),
            '.' => {
                prev != Some('.')
                    && next != Some('.')
                    && !(prev.is_some_and(|p| p.is_ascii_digit()) && next.is_some_and(|n| n.is_ascii_digit()))
            }
            _ => false,
        };
        if terminal {
            let s = cur.trim();
            if !s.is_empty() {
                out.push(s.to_string());
            }
            cur.clear();
        }
    }
    let s = cur.trim();
    if !s.is_empty() {
        out.push(s.to_string());
    }
    out
}

pub fn is_single_sentence(text: &str) -> bool {
    split_sentences(text).len() == 1
}

const ORAL_MARKERS: &[&str] = &[
    "sabe",
    "né",
    "tipo",
    "então",
    "aí",
    "assim",
    "viu",
    "hein",
    "entendeu",
    "cara",
    "pô",
    "hum",
    "ahn",
    "hã",
    "eh",
    "éh",
    "basically",
    "actually",
    "literally",
    "kinda",
    "uh",
    "er",
    "hmm",
    "okay",
    "ok",
];

const STOPWORDS: &[&str] = &[
    "para", "você", "vocês", "como", "mais", "sobre", "isso", "esse", "essa", "este", "esta", "isto", "aqui", "pelo",
    "pela", "numa", "quando", "onde", "está", "estou", "então", "porque", "mesmo", "também", "muito", "senhor",
    "senhora", "certo", "quero", "queria", "preciso", "gostaria", "this", "that", "with", "your", "from", "have",
    "will", "there", "here", "what", "when", "just", "about", "want", "need", "would",
];

/// Intent verb found in a sentence.
struct Intent {
    /// Replacement when the sentence is cut to start at the verb.
    head: &'static str,
    /// Replacement when the verb stays in place.
    inline: &'static str,
    /// Following tokens swallowed by the replacement ("gostaria de").
    skip: usize,
}

fn intent_at(keys: &[String], i: usize) -> Option<Intent> {
    let next = keys.get(i + 1).map(String::as_str);
    let prev = i.checked_sub(1).map(|j| keys[j].as_str());
    let de = usize::from(next == Some("de"));
    let v = |head, inline, skip| Intent { head, inline, skip };
    Some(match keys[i].as_str() {
        "quero" | "queria" | "desejo" | "desejava" => v("Quero", "quero", 0),
        "gostaria" => v("Quero", "quero", de),
        "preciso" | "precisava" => v("Preciso", "preciso", 0),
        "queremos" | "gostaríamos" => v("Queremos", "queremos", de),
        "precisamos" => v("Precisamos", "precisamos", 0),
        "want" | "wanted" => v("I want", "want", 0),
        "need" | "needed" => v("I need", "need", 0),
        "like" if prev == Some("would") || prev == Some("i'd") => v("I would like", "like", 0),
        _ => return None,
    })
}

/// Lead-in words ignored when deciding whether to cut a sentence at its verb.
const SUBJECTS: &[&str] = &["eu", "i", "so", "a", "gente", "nós"];

/// Longest lead-in (in content tokens) that is dropped before an intent verb.
const MAX_LEAD_IN: usize = 3;

fn strip_markers(tokens: &[&str]) -> Vec<String> {
    tokens
        .iter()
        .filter(|t| {
            let k = token_key(t);
            let hesitation = (t.ends_with("...") || t.ends_with('…')) && k.chars().count() <= 2;
            !hesitation && !ORAL_MARKERS.contains(&k.as_str()) && k.chars().any(char::is_alphanumeric)
        })
        .map(|t| t.to_string())
        .collect()
}

fn finish(words: Vec<String>, question: bool) -> String {
    let joined = words.join(" ");
    let body = joined.trim_end_matches(|c: char| c.is_whitespace() || ",;:.!?…".contains(c));
    let body = body.trim_start_matches(|c: char| c.is_whitespace() || ",;:.!?…".contains(c));
    if body.is_empty() {
        return String::new();
    }
    let mut chars = body.chars();
    let first = chars.next().expect("non-empty");
    let mut out: String = first.to_uppercase().chain(chars).collect();
    out.push(if question { '?' } else { '.' });
    out
}

/// Rewrite rule: first sentence holding an intent verb or phrased as a
/// question, verb normalized to present tense, oral markers dropped. A short
/// lead-in before the verb is cut; a longer one is kept. Without such a
/// sentence the one with the most content words is used.
pub fn rule_rewrite(utterances: &str) -> String {
    let sentences = split_sentences(utterances);
    for s in &sentences {
        let tokens: Vec<&str> = s.split_whitespace().collect();
        let keys: Vec<String> = tokens.iter().map(|t| token_key(t)).collect();
        let question = s.ends_with('?');
        if let Some((i, intent)) = (0..keys.len()).find_map(|i| intent_at(&keys, i).map(|v| (i, v))) {
            let lead = strip_markers(&tokens[..i]);
            let lead_len = lead
                .iter()
                .filter(|t| !SUBJECTS.contains(&token_key(t).as_str()))
                .count();
            let mut words = if lead_len <= MAX_LEAD_IN {
                vec![intent.head.to_string()]
            } else {
                let mut w = lead;
                w.push(intent.inline.to_string());
                w
            };
            words.extend(strip_markers(&tokens[i + 1 + intent.skip..]));
            let out = finish(words, question);
            if !out.is_empty() {
                return out;
            }
        } else if question {
            let out = finish(strip_markers(&tokens), true);
            if !out.is_empty() {
                return out;
            }
        }
    }
    let mut best = String::new();
    let mut best_len = 0;
    for s in &sentences {
        let words = strip_markers(&s.split_whitespace().collect::<Vec<_>>());
        if words.len() > best_len {
            best_len = words.len();
            best = finish(words, false);
        }
    }
    best
}

fn content_prefixes(text: &str) -> HashSet<String> {
    text.split_whitespace()
        .map(token_key)
        .filter(|k| k.chars().filter(|c| c.is_alphabetic()).count() >= 4 && !STOPWORDS.contains(&k.as_str()))
        .map(|k| k.chars().take(5).collect())
        .collect()
}

/// Refine rule: keep the sentences sharing a content word (same first five
/// letters, words of four letters or more) with the demand; if none does,
/// the response is returned unchanged.
pub fn rule_refine(response: &str, demand: &str) -> String {
    let demand_words = content_prefixes(demand);
    let sentences = split_sentences(response);
    let kept: Vec<&String> = sentences
        .iter()
        .filter(|s| !content_prefixes(s).is_disjoint(&demand_words))
        .collect();
    if kept.is_empty() || kept.len() == sentences.len() {
        return response.trim().to_string();
    }
    kept.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(" ")
}

fn sentence_key(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .trim_end_matches(['.', '!', '?'])
        .to_lowercase()
}

/// Synthesis rule: order-preserving union of candidate sentences with
/// duplicates dropped; a single candidate is returned verbatim.
pub fn rule_synthesize(candidates: &[String]) -> String {
    if let [only] = candidates {
        return only.clone();
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for c in candidates {
        for s in split_sentences(c) {
            if seen.insert(sentence_key(&s)) {
                out.push(s);
            }
        }
    }
    out.join(" ")
}

/// Validity rule: invalid when fewer than 3 tokens or no alphabetic token.
pub fn rule_validity(demand: &str) -> Result<(), &'static str> {
    let tokens: Vec<&str> = demand.split_whitespace().collect();
    if tokens.len() < 3 {
        Err("fewer than 3 tokens")
    } else if !tokens.iter().any(|t| t.chars().any(char::is_alphabetic)) {
        Err("no alphabetic token")
    } else {
        Ok(())
    }
}

/// Deterministic chat stand-in. For rewriting, a template without few-shot
/// examples makes it echo the customer's speech unchanged (the behaviour of
/// an under-specified prompt); with examples it applies [`rule_rewrite`].
#[derive(Debug, Clone, Copy, Default)]
pub struct MockChat;

impl ChatBackend for MockChat {
    fn complete(&self, req: &ChatRequest<'_>) -> Result<String, BackendError> {
        let var = |name: &str| req.vars.get(name).map(String::as_str).unwrap_or("");
        Ok(match req.template.task {
            Task::Rewrite if req.template.few_shot.is_empty() => var("utterances").trim().to_string(),
            Task::Rewrite => rule_rewrite(var("utterances")),
            Task::Refine => rule_refine(var("response"), var("demand")),
            Task::Synthesize => rule_synthesize(req.candidates),
            Task::Validity => match rule_validity(var("demand")) {
                Ok(()) => "valid".into(),
                Err(reason) => format!("invalid: {reason}"),
            },
        })
    }

    fn name(&self) -> &str {
        "mock"
    }
}

/// Hash-seeded pseudo-random embedding: identical text gives the identical
/// vector, values uniform in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct MockEmbed {
    pub dim: usize,
    pub seed: u64,
}

impl MockEmbed {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }
}

impl EmbedBackend for MockEmbed {
    fn embed(&self, text: &str) -> Result<Vec<f32>, BackendError> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(text.as_bytes());
        let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
        Ok((0..self.dim).map(|_| rng.gen_range(-1.0f32..=1.0)).collect())
    }

    fn model_tag(&self) -> String {
        format!("mock-embed-{}", self.seed)
    }
}
