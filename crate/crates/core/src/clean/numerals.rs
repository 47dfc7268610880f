//! Spoken-numeral normalization.
//!
//! Runs of number words are rewritten as digit strings. A run made only of
//! single digits ("two zero zero") is read positionally; anything else is
//! evaluated as a cardinal ("two hundred"), so both spellings of the same
//! value land on the same digit string.

use std::collections::{HashMap, HashSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NumeralWord {
    /// 0..=9
    Digit(u32),
    /// 10..=19
    Teen(u32),
    /// 20, 30, ..., 90
    Tens(u32),
    /// Inflected hundreds words such as "duzentos" (200).
    Hundreds(u32),
    /// Multiplier word "hundred".
    Hundred,
    /// Multiplier word "thousand" / "mil".
    Thousand,
}

/// Word tables for one language. Composable range is 0..=9999.
#[derive(Debug, Clone)]
pub struct NumeralLexicon {
    pub language: String,
    words: HashMap<String, NumeralWord>,
    connectives: HashSet<String>,
    /// Words that double as articles/pronouns and are left alone when they
    /// form a run on their own ("um plano", "this one").
    ambiguous_alone: HashSet<String>,
}

impl NumeralLexicon {
    pub fn new(
        language: &str,
        words: impl IntoIterator<Item = (&'static str, NumeralWord)>,
        connectives: &[&str],
        ambiguous_alone: &[&str],
    ) -> Self {
        let mut map = HashMap::new();
        for (w, v) in words {
            let prev = map.insert(w.to_string(), v);
            assert!(prev.is_none(), "duplicate numeral word {w}");
        }
        Self {
            language: language.to_string(),
            words: map,
            connectives: connectives.iter().map(|s| s.to_string()).collect(),
            ambiguous_alone: ambiguous_alone.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn english() -> Self {
        use NumeralWord::*;
        let digits = [
            "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
        ];
        let teens = [
            "ten",
            "eleven",
            "twelve",
            "thirteen",
            "fourteen",
            "fifteen",
            "sixteen",
            "seventeen",
            "eighteen",
            "nineteen",
        ];
        let tens = [
            "twenty", "thirty", "forty", "fifty", "sixty", "seventy", "eighty", "ninety",
        ];
        let words = digits
            .iter()
            .enumerate()
            .map(|(i, w)| (*w, Digit(i as u32)))
            .chain(teens.iter().enumerate().map(|(i, w)| (*w, Teen(10 + i as u32))))
            .chain(tens.iter().enumerate().map(|(i, w)| (*w, Tens(20 + 10 * i as u32))))
            .chain([("hundred", Hundred), ("thousand", Thousand)]);
        Self::new("en", words, &["and"], &["one"])
    }

    pub fn portuguese() -> Self {
        use NumeralWord::*;
        let words = [
            ("zero", Digit(0)),
            ("um", Digit(1)),
            ("uma", Digit(1)),
            ("dois", Digit(2)),
            ("duas", Digit(2)),
            ("três", Digit(3)),
            ("tres", Digit(3)),
            ("quatro", Digit(4)),
            ("cinco", Digit(5)),
            ("seis", Digit(6)),
            ("meia", Digit(6)),
            ("sete", Digit(7)),
            ("oito", Digit(8)),
            ("nove", Digit(9)),
            ("dez", Teen(10)),
            ("onze", Teen(11)),
            ("doze", Teen(12)),
            ("treze", Teen(13)),
            ("quatorze", Teen(14)),
            ("catorze", Teen(14)),
            ("quinze", Teen(15)),
            ("dezesseis", Teen(16)),
            ("dezessete", Teen(17)),
            ("dezoito", Teen(18)),
            ("dezenove", Teen(19)),
            ("vinte", Tens(20)),
            ("trinta", Tens(30)),
            ("quarenta", Tens(40)),
            ("cinquenta", Tens(50)),
            ("cinqüenta", Tens(50)),
            ("sessenta", Tens(60)),
            ("setenta", Tens(70)),
            ("oitenta", Tens(80)),
            ("noventa", Tens(90)),
            ("cem", Hundreds(100)),
            ("cento", Hundreds(100)),
            ("duzentos", Hundreds(200)),
            ("duzentas", Hundreds(200)),
            ("trezentos", Hundreds(300)),
            ("trezentas", Hundreds(300)),
            ("quatrocentos", Hundreds(400)),
            ("quatrocentas", Hundreds(400)),
            ("quinhentos", Hundreds(500)),
            ("quinhentas", Hundreds(500)),
            ("seiscentos", Hundreds(600)),
            ("seiscentas", Hundreds(600)),
            ("setecentos", Hundreds(700)),
            ("setecentas", Hundreds(700)),
            ("oitocentos", Hundreds(800)),
            ("oitocentas", Hundreds(800)),
            ("novecentos", Hundreds(900)),
            ("novecentas", Hundreds(900)),
            ("mil", Thousand),
        ];
        Self::new("pt", words, &["e"], &["um", "uma", "meia"])
    }

    pub fn for_language(tag: &str) -> Option<Self> {
        match tag {
            "en" => Some(Self::english()),
            "pt" => Some(Self::portuguese()),
            _ => None,
        }
    }

    pub fn lookup(&self, word: &str) -> Option<NumeralWord> {
        self.words.get(word).copied()
    }

    pub fn is_connective(&self, word: &str) -> bool {
        self.connectives.contains(word)
    }

    /// True for tokens that are numeral words or already contain digits.
    pub fn is_numeric_token(&self, token: &str) -> bool {
        let (_, core, _) = split_punct(token);
        core.chars().any(|c| c.is_ascii_digit())
            || word_parts(&core.to_lowercase())
                .map(|parts| parts.iter().all(|p| self.lookup(p).is_some()))
                .unwrap_or(false)
    }
}

/// Splits leading/trailing punctuation from a token.
fn split_punct(token: &str) -> (&str, &str, &str) {
    let start = token
        .char_indices()
        .find(|(_, c)| c.is_alphanumeric())
        .map(|(i, _)| i)
        .unwrap_or(token.len());
    let end = token
        .char_indices()
        .rev()
        .find(|(_, c)| c.is_alphanumeric())
        .map(|(i, c)| i + c.len_utf8())
        .unwrap_or(start);
    (&token[..start], &token[start..end], &token[end..])
}

/// Hyphenated forms ("twenty-three") split into parts; `None` for empty words.
fn word_parts(core: &str) -> Option<Vec<&str>> {
    if core.is_empty() {
        return None;
    }
    Some(core.split('-').collect())
}

/// Evaluates a run of numeral words (connectives already removed).
/// Returns the digit string, or `None` when the run is not well formed.
pub fn evaluate_run(words: &[NumeralWord], had_connective: bool) -> Option<String> {
    use NumeralWord::*;
    if words.is_empty() {
        return None;
    }
    if words.len() >= 2 && !had_connective && words.iter().all(|w| matches!(w, Digit(_))) {
        return Some(
            words
                .iter()
                .map(|w| match w {
                    Digit(d) => char::from_digit(*d, 10).expect("digit"),
                    _ => unreachable!(),
                })
                .collect(),
        );
    }
    if words == [Digit(0)] {
        return Some("0".into());
    }

    // Stages within a group below one thousand.
    const EMPTY: u8 = 0;
    const HUNDREDS: u8 = 1;
    const TENS: u8 = 2;
    const UNITS: u8 = 3;
    let mut thousands: Option<u32> = None;
    let mut group = 0u32;
    let mut stage = EMPTY;
    let mut has_hundreds = false;
    for &w in words {
        match w {
            Digit(0) => return None,
            Digit(d) => {
                if stage == UNITS {
                    return None;
                }
                group += d;
                stage = UNITS;
            }
            Teen(v) => {
                if stage >= TENS {
                    return None;
                }
                group += v;
                stage = UNITS;
            }
            Tens(v) => {
                if stage >= TENS {
                    return None;
                }
                group += v;
                stage = TENS;
            }
            Hundreds(v) => {
                if stage != EMPTY {
                    return None;
                }
                group = v;
                has_hundreds = true;
                stage = HUNDREDS;
            }
            Hundred => {
                if stage != UNITS || has_hundreds || !(1..=9).contains(&group) {
                    return None;
                }
                group *= 100;
                has_hundreds = true;
                stage = HUNDREDS;
            }
            Thousand => {
                if thousands.is_some() {
                    return None;
                }
                let multiplier = match (stage, group) {
                    (EMPTY, 0) => 1,
                    (UNITS, g @ 1..=9) => g,
                    _ => return None,
                };
                thousands = Some(multiplier);
                group = 0;
                stage = EMPTY;
                has_hundreds = false;
            }
        }
    }
    let value = thousands.unwrap_or(0) * 1000 + group;
    Some(value.to_string())
}

struct RunToken<'a> {
    lead: &'a str,
    trail: &'a str,
    words: Vec<NumeralWord>,
    connective: bool,
}

/// Rewrites maximal runs of numeral words as digit strings. Runs that do
/// not parse are left verbatim.
pub fn normalize_numbers(text: &str, lexicon: &NumeralLexicon) -> String {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    let classified: Vec<Option<RunToken>> = tokens
        .iter()
        .map(|tok| {
            let (lead, core, trail) = split_punct(tok);
            let lower = core.to_lowercase();
            if lexicon.is_connective(&lower) {
                return Some(RunToken {
                    lead,
                    trail,
                    words: Vec::new(),
                    connective: true,
                });
            }
            let parts = word_parts(&lower)?;
            let words: Option<Vec<NumeralWord>> = parts.iter().map(|p| lexicon.lookup(p)).collect();
            words.map(|words| RunToken {
                lead,
                trail,
                words,
                connective: false,
            })
        })
        .collect();

    let mut out: Vec<String> = Vec::with_capacity(tokens.len());
    let mut changed = false;
    let mut i = 0;
    while i < tokens.len() {
        let starts_run = matches!(&classified[i], Some(t) if !t.connective);
        if !starts_run {
            out.push(tokens[i].to_string());
            i += 1;
            continue;
        }
        // extend while tokens are numerals/connectives and no punctuation breaks the run
        let mut j = i;
        loop {
            let tok = classified[j].as_ref().expect("in run");
            if !tok.trail.is_empty() || j + 1 >= tokens.len() {
                break;
            }
            match &classified[j + 1] {
                Some(next) if next.lead.is_empty() => j += 1,
                _ => break,
            }
        }
        // a run never ends on a connective
        while classified[j].as_ref().is_some_and(|t| t.connective) {
            j -= 1;
        }
        let run: Vec<&RunToken> = classified[i..=j].iter().flatten().collect();
        let words: Vec<NumeralWord> = run.iter().flat_map(|t| t.words.iter().copied()).collect();
        let had_connective = run.iter().any(|t| t.connective);
        let raw_single = j == i && run[0].words.len() == 1 && {
            let (_, core, _) = split_punct(tokens[i]);
            lexicon.ambiguous_alone.contains(&core.to_lowercase())
        };
        match evaluate_run(&words, had_connective).filter(|_| !raw_single) {
            Some(digits) => {
                let lead = run[0].lead;
                let trail = run[run.len() - 1].trail;
                out.push(format!("{lead}{digits}{trail}"));
                changed = true;
            }
            None => {
                if !raw_single {
                    log::debug!("unparsed numeral run: {}", tokens[i..=j].join(" "));
                }
                out.extend(tokens[i..=j].iter().map(|t| t.to_string()));
            }
        }
        i = j + 1;
    }
    if changed {
        out.join(" ")
    } else {
        text.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cardinal_and_positional_forms_converge() {
        let en = NumeralLexicon::english();
        assert_eq!(normalize_numbers("two hundred", &en), "200");
        assert_eq!(normalize_numbers("two zero zero", &en), "200");
        assert_eq!(
            normalize_numbers("two zero zero", &en),
            normalize_numbers("two hundred", &en)
        );
        let pt = NumeralLexicon::portuguese();
        assert_eq!(normalize_numbers("dois zero zero", &pt), "200");
        assert_eq!(normalize_numbers("duzentos", &pt), "200");
    }

    #[test]
    fn compositional_values() {
        let en = NumeralLexicon::english();
        for (text, want) in [
            ("one thousand two hundred and thirty four", "1234"),
            ("nine thousand nine hundred ninety-nine", "9999"),
            ("fifteen", "15"),
            ("zero", "0"),
            ("thousand", "1000"),
        ] {
            assert_eq!(normalize_numbers(text, &en), want, "{text}");
        }
        let pt = NumeralLexicon::portuguese();
        for (text, want) in [
            ("cento e vinte e três", "123"),
            ("dois mil e quinhentos", "2500"),
            ("mil", "1000"),
            ("cem", "100"),
            ("noventa e nove", "99"),
        ] {
            assert_eq!(normalize_numbers(text, &pt), want, "{text}");
        }
    }

    #[test]
    fn embedded_runs_keep_context_and_punctuation() {
        let pt = NumeralLexicon::portuguese();
        assert_eq!(
            normalize_numbers("a fatura veio de duzentos e dez reais, certo?", &pt),
            "a fatura veio de 210 reais, certo?"
        );
        assert_eq!(
            normalize_numbers("meu número é nove nove oito, sete", &pt),
            "meu número é 998, 7"
        );
        assert_eq!(
            normalize_numbers("quero um plano e uma linha", &pt),
            "quero um plano e uma linha"
        );
        assert_eq!(normalize_numbers("sem números aqui", &pt), "sem números aqui");
    }

    #[test]
    fn malformed_runs_stay_verbatim() {
        let en = NumeralLexicon::english();
        assert_eq!(normalize_numbers("twenty thirty", &en), "twenty thirty");
        assert_eq!(normalize_numbers("ten thousand", &en), "ten thousand");
        assert_eq!(normalize_numbers("one and two", &en), "one and two");
    }

    #[test]
    fn idempotent() {
        let pt = NumeralLexicon::portuguese();
        let once = normalize_numbers("paguei cento e vinte e três e dois zero", &pt);
        assert_eq!(normalize_numbers(&once, &pt), once);
    }
}
