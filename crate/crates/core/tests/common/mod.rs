//! Shared test support: independent oracles, corpora and a tiny HTTP stub.
#![allow(dead_code, clippy::needless_range_loop)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// Numeral oracle: recursive descent over a word list, written independently
// of the library's state machine.

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Lang {
    Pt,
    En,
}

fn unit(lang: Lang, w: &str) -> Option<u32> {
    let pt = [
        ("um", 1),
        ("uma", 1),
        ("dois", 2),
        ("duas", 2),
        ("três", 3),
        ("tres", 3),
        ("quatro", 4),
        ("cinco", 5),
        ("seis", 6),
        ("meia", 6),
        ("sete", 7),
        ("oito", 8),
        ("nove", 9),
    ];
    let en = [
        ("one", 1),
        ("two", 2),
        ("three", 3),
        ("four", 4),
        ("five", 5),
        ("six", 6),
        ("seven", 7),
        ("eight", 8),
        ("nine", 9),
    ];
    let table: &[(&str, u32)] = if lang == Lang::Pt { &pt } else { &en };
    table.iter().find(|(k, _)| *k == w).map(|(_, v)| *v)
}

fn teen(lang: Lang, w: &str) -> Option<u32> {
    let pt = [
        "dez",
        "onze",
        "doze",
        "treze",
        "quatorze",
        "quinze",
        "dezesseis",
        "dezessete",
        "dezoito",
        "dezenove",
    ];
    let en = [
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
    let table = if lang == Lang::Pt { pt } else { en };
    let alt = (lang == Lang::Pt && w == "catorze").then_some(14);
    alt.or_else(|| table.iter().position(|t| *t == w).map(|i| 10 + i as u32))
}

fn tens_word(lang: Lang, w: &str) -> Option<u32> {
    let pt = [
        "vinte",
        "trinta",
        "quarenta",
        "cinquenta",
        "sessenta",
        "setenta",
        "oitenta",
        "noventa",
    ];
    let en = [
        "twenty", "thirty", "forty", "fifty", "sixty", "seventy", "eighty", "ninety",
    ];
    let table = if lang == Lang::Pt { pt } else { en };
    table.iter().position(|t| *t == w).map(|i| 20 + 10 * i as u32)
}

fn pt_hundreds(w: &str) -> Option<u32> {
    let stems = [
        ("cento", 100),
        ("cem", 100),
        ("duzent", 200),
        ("trezent", 300),
        ("quatrocent", 400),
        ("quinhent", 500),
        ("seiscent", 600),
        ("setecent", 700),
        ("oitocent", 800),
        ("novecent", 900),
    ];
    stems.iter().find_map(|(stem, v)| {
        let rest = w.strip_prefix(stem)?;
        (rest.is_empty() && (*stem == "cento" || *stem == "cem") || rest == "os" || rest == "as").then_some(*v)
    })
}

struct Parser<'a> {
    lang: Lang,
    words: &'a [String],
    pos: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&str> {
        self.words.get(self.pos).map(String::as_str)
    }

    fn and(&self) -> &'static str {
        if self.lang == Lang::Pt {
            "e"
        } else {
            "and"
        }
    }

    fn eat_and(&mut self) -> bool {
        if self.peek() == Some(self.and()) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    /// below_100 := tens [and? unit] | teen | unit
    fn below_100(&mut self) -> Option<u32> {
        let w = self.peek()?.to_string();
        if let Some(t) = tens_word(self.lang, &w) {
            self.pos += 1;
            let save = self.pos;
            let joined = self.eat_and();
            if self.lang == Lang::Pt && !joined {
                return Some(t);
            }
            if let Some(u) = self.peek().and_then(|w| unit(self.lang, w)) {
                self.pos += 1;
                return Some(t + u);
            }
            self.pos = save;
            return Some(t);
        }
        if let Some(v) = teen(self.lang, &w).or_else(|| unit(self.lang, &w)) {
            self.pos += 1;
            return Some(v);
        }
        None
    }

    /// below_1000 := hundreds_head [and below_100] | below_100
    fn below_1000(&mut self) -> Option<u32> {
        let w = self.peek()?.to_string();
        let head = match self.lang {
            Lang::Pt => pt_hundreds(&w).inspect(|_| {
                self.pos += 1;
            }),
            Lang::En => match (unit(Lang::En, &w), self.words.get(self.pos + 1).map(String::as_str)) {
                (Some(u), Some("hundred")) => {
                    self.pos += 2;
                    Some(u * 100)
                }
                _ => None,
            },
        };
        let Some(h) = head else {
            return self.below_100();
        };
        let save = self.pos;
        let joined = self.eat_and();
        if self.lang == Lang::Pt && !joined {
            return Some(h);
        }
        match self.below_100() {
            Some(r) => Some(h + r),
            None => {
                self.pos = save;
                Some(h)
            }
        }
    }

    /// number := "zero" | [unit] thousand [and? below_1000] | below_1000
    fn number(&mut self) -> Option<u32> {
        if self.peek() == Some("zero") {
            self.pos += 1;
            return Some(0);
        }
        let thousand = if self.lang == Lang::Pt { "mil" } else { "thousand" };
        let start = self.pos;
        let mult = if self.peek() == Some(thousand) {
            Some(1)
        } else {
            match (
                self.peek().and_then(|w| unit(self.lang, w)),
                self.words.get(self.pos + 1),
            ) {
                (Some(u), Some(next)) if next == thousand => {
                    self.pos += 1;
                    Some(u)
                }
                _ => None,
            }
        };
        if let Some(m) = mult {
            if !(self.lang == Lang::En && m == 1 && self.words[start] == thousand) {
                self.pos += 1; // the thousand word
                let save = self.pos;
                self.eat_and();
                return match self.below_1000() {
                    Some(r) => Some(m * 1000 + r),
                    None => {
                        self.pos = save;
                        Some(m * 1000)
                    }
                };
            }
        }
        self.below_1000()
    }
}

/// Value of a spoken numeral phrase. Two or more bare digit words are read
/// digit by digit. Returns the digit string.
pub fn numeral_oracle(lang: Lang, phrase: &str) -> Option<String> {
    let words: Vec<String> = phrase.split_whitespace().map(|w| w.to_lowercase()).collect();
    let digit = |w: &str| if w == "zero" { Some(0) } else { unit(lang, w) };
    if words.len() >= 2 && words.iter().all(|w| digit(w).is_some()) {
        return Some(words.iter().map(|w| digit(w).unwrap().to_string()).collect());
    }
    let mut p = Parser {
        lang,
        words: &words,
        pos: 0,
    };
    let v = p.number()?;
    (p.pos == words.len()).then(|| v.to_string())
}

/// (language, sentence template with `{}`, spoken numeral, value written by hand).
pub const NUMERAL_PHRASES: [(Lang, &str, &str, u32); 40] = [
    (Lang::Pt, "o valor foi {} reais", "zero", 0),
    (Lang::Pt, "paguei {} reais", "sete", 7),
    (Lang::Pt, "faz {} dias", "dezessete", 17),
    (Lang::Pt, "são {} megas", "vinte", 20),
    (Lang::Pt, "são {} megas", "quarenta e dois", 42),
    (Lang::Pt, "deu {} reais", "noventa e nove", 99),
    (Lang::Pt, "a conta veio {} reais", "cem", 100),
    (Lang::Pt, "a conta veio {} reais", "cento e um", 101),
    (Lang::Pt, "são {} minutos", "duzentos", 200),
    (Lang::Pt, "o código é {}", "dois zero zero", 200),
    (Lang::Pt, "cobraram {} reais", "duzentos e cinquenta e três", 253),
    (Lang::Pt, "o plano tem {} megas", "quinhentos", 500),
    (Lang::Pt, "foram {} reais", "novecentos e noventa e nove", 999),
    (Lang::Pt, "a multa é {} reais", "mil", 1000),
    (Lang::Pt, "a multa é {} reais", "mil e quinhentos", 1500),
    (Lang::Pt, "o aparelho custa {} reais", "dois mil e vinte", 2020),
    (Lang::Pt, "o protocolo começa com {}", "três quatro cinco", 345),
    (Lang::Pt, "são {} ligações", "quatro mil trezentos e vinte e um", 4321),
    (Lang::Pt, "o total foi {} reais", "sete mil e oito", 7008),
    (
        Lang::Pt,
        "o limite é {} reais",
        "nove mil novecentos e noventa e nove",
        9999,
    ),
    (Lang::En, "the bill was {} dollars", "zero", 0),
    (Lang::En, "I paid {} dollars", "nine", 9),
    (Lang::En, "it took {} days", "thirteen", 13),
    (Lang::En, "the plan has {} gigabytes", "thirty", 30),
    (Lang::En, "I waited {} minutes", "fifty five", 55),
    (Lang::En, "the fee is {} dollars", "one hundred", 100),
    (Lang::En, "the code is {}", "two zero zero", 200),
    (Lang::En, "the fee is {} dollars", "two hundred", 200),
    (Lang::En, "it costs {} dollars", "three hundred and seven", 307),
    (Lang::En, "it costs {} dollars", "four hundred sixty", 460),
    (Lang::En, "the limit is {} minutes", "eight hundred and ninety one", 891),
    (Lang::En, "the phone costs {} dollars", "one thousand", 1000),
    (Lang::En, "the phone costs {} dollars", "two thousand and five", 2005),
    (Lang::En, "the ticket is {}", "five five five", 555),
    (Lang::En, "we billed {} dollars", "three thousand four hundred", 3400),
    (
        Lang::En,
        "we billed {} dollars",
        "six thousand seven hundred and eighty nine",
        6789,
    ),
    (Lang::En, "the total is {} dollars", "eight thousand and twelve", 8012),
    (
        Lang::En,
        "there were {} calls",
        "nine thousand nine hundred ninety nine",
        9999,
    ),
    (Lang::En, "the pin starts with {}", "one two three four", 1234),
    (Lang::En, "the fee is {} dollars", "seventy", 70),
];

pub fn lang_tag(lang: Lang) -> &'static str {
    match lang {
        Lang::Pt => "pt",
        Lang::En => "en",
    }
}

// ---------------------------------------------------------------------------
// Lloyd's oracle: plain k-means with the documented k-means++ seeding and
// z-score normalization, written as straightforward index loops.

pub struct OracleClustering {
    pub labels: Vec<usize>,
    pub inertia: f64,
}

pub fn lloyd_oracle(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize, tol: f64) -> OracleClustering {
    let n = points.len();
    let d = points[0].len();
    let mut x = vec![vec![0.0; d]; n];
    for j in 0..d {
        let mut mean = 0.0;
        for p in points {
            mean += p[j];
        }
        mean /= n as f64;
        let mut var = 0.0;
        for p in points {
            var += (p[j] - mean) * (p[j] - mean);
        }
        var /= n as f64;
        let (m, s) = if var > 0.0 { (mean, var.sqrt()) } else { (0.0, 1.0) };
        for i in 0..n {
            x[i][j] = (points[i][j] - m) / s;
        }
    }
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        let mut s = 0.0;
        for t in 0..a.len() {
            s += (a[t] - b[t]) * (a[t] - b[t]);
        }
        s
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = vec![rng.gen_range(0..n)];
    while chosen.len() < k {
        let mut d2 = vec![f64::INFINITY; n];
        for i in 0..n {
            for &c in &chosen {
                let v = dist(&x[i], &x[c]);
                if v < d2[i] {
                    d2[i] = v;
                }
            }
        }
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let r = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, v) in d2.iter().enumerate() {
                acc += v;
                if acc > r {
                    pick = Some(i);
                    break;
                }
            }
            pick.unwrap_or_else(|| (0..n).rev().find(|i| d2[*i] > 0.0).unwrap())
        } else {
            (0..n).find(|i| !chosen.contains(i)).unwrap()
        };
        chosen.push(pick);
    }
    let mut centroids: Vec<Vec<f64>> = chosen.iter().map(|&i| x[i].clone()).collect();

    let label_all = |centroids: &Vec<Vec<f64>>| -> (Vec<usize>, f64) {
        let mut labels = vec![0; n];
        let mut inertia = 0.0;
        for i in 0..n {
            let mut best = 0;
            let mut best_d = dist(&x[i], &centroids[0]);
            for c in 1..k {
                let dd = dist(&x[i], &centroids[c]);
                if dd < best_d {
                    best = c;
                    best_d = dd;
                }
            }
            labels[i] = best;
            inertia += best_d;
        }
        (labels, inertia)
    };

    for _ in 0..max_iter {
        let (labels, _) = label_all(&centroids);
        let mut moved: f64 = 0.0;
        for c in 0..k {
            let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
            if members.is_empty() {
                continue;
            }
            let mut mean = vec![0.0; d];
            for &i in &members {
                for j in 0..d {
                    mean[j] += x[i][j];
                }
            }
            for v in mean.iter_mut() {
                *v /= members.len() as f64;
            }
            moved = moved.max(dist(&mean, &centroids[c]).sqrt());
            centroids[c] = mean;
        }
        if moved < tol {
            break;
        }
    }
    let (labels, inertia) = label_all(&centroids);
    OracleClustering { labels, inertia }
}

/// True when `a` and `b` describe the same partition.
pub fn same_partition(a: &[usize], b: &[usize]) -> bool {
    let mut map = std::collections::HashMap::new();
    let mut rev = std::collections::HashMap::new();
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(x, y)| *map.entry(*x).or_insert(*y) == *y && *rev.entry(*y).or_insert(*x) == *x)
}

// ---------------------------------------------------------------------------
// Seeded PII corpus.

pub const PII_NAMES: &[&str] = &[
    "João", "Maria", "Carlos", "Fernanda", "Paulo", "Juliana", "Rafael", "Camila", "Marcelo", "Beatriz",
];
const STREETS: &[&str] = &[
    "Rua das Flores",
    "Avenida Paulista",
    "Rua Augusta",
    "Travessa do Comércio",
    "Alameda Santos",
];

/// One sentence with one injected item: (text, category name, literal value).
pub struct PiiItem {
    pub text: String,
    pub category: &'static str,
    pub value: String,
}

fn digits(rng: &mut ChaCha8Rng, n: usize) -> String {
    (0..n).map(|_| char::from(b'0' + rng.gen_range(0..10u8))).collect()
}

/// 200 sentences, each carrying one injected PII item; categories rotate so
/// all six are represented.
pub fn pii_corpus(seed: u64) -> Vec<PiiItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..200)
        .map(|i| {
            let (category, value, text) = match i % 6 {
                0 => {
                    let v = PII_NAMES[rng.gen_range(0..PII_NAMES.len())].to_string();
                    (
                        "NAME",
                        v.clone(),
                        format!("bom dia, aqui é o {v} falando sobre a fatura"),
                    )
                }
                1 => {
                    let v = format!(
                        "(1{}) 9{}-{}",
                        rng.gen_range(1..10),
                        digits(&mut rng, 4),
                        digits(&mut rng, 4)
                    );
                    ("PHONE", v.clone(), format!("pode me ligar no {v} depois das seis"))
                }
                2 => {
                    let user: String = (0..rng.gen_range(4..9))
                        .map(|_| char::from(b'a' + rng.gen_range(0..26u8)))
                        .collect();
                    let v = format!("{user}.{}@exemplo.com.br", digits(&mut rng, 2));
                    ("EMAIL", v.clone(), format!("meu email é {v} para contato"))
                }
                3 => {
                    let v = format!(
                        "{}.{}.{}-{}",
                        digits(&mut rng, 3),
                        digits(&mut rng, 3),
                        digits(&mut rng, 3),
                        digits(&mut rng, 2)
                    );
                    ("DOC_ID", v.clone(), format!("o CPF do titular é {v} confere"))
                }
                4 => {
                    let lead = rng.gen_range(1..10);
                    let len = rng.gen_range(6..10);
                    let v = format!("{lead}{}", digits(&mut rng, len));
                    (
                        "ACCOUNT_ID",
                        v.clone(),
                        format!("a minha conta número {v} está bloqueada"),
                    )
                }
                _ => {
                    let v = format!(
                        "{} {}",
                        STREETS[rng.gen_range(0..STREETS.len())],
                        rng.gen_range(1..2000)
                    );
                    ("ADDRESS", v.clone(), format!("eu moro na {v} desde o ano passado"))
                }
            };
            PiiItem { text, category, value }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Rewrite harness transcripts: customer-side utterances, about half of them
// spanning several sentences.

pub const REWRITE_TRANSCRIPTS: [&str; 40] = [
    "é... eu queria a segunda via da minha fatura",
    "Oi, bom dia. Eu queria saber por que a minha conta veio mais alta esse mês.",
    "então, eu preciso cancelar o meu plano de internet",
    "Boa tarde. A minha internet caiu ontem e até agora não voltou. Eu preciso que alguém venha aqui.",
    "eu gostaria de mudar a data de vencimento da fatura",
    "Alô? Tá me ouvindo? Eu queria trocar o meu plano.",
    "como eu faço pra desbloquear o meu chip?",
    "Oi. Tipo, eu recebi uma cobrança estranha. Um tal de seguro que eu não contratei.",
    "eu queria portar o meu número pra vocês",
    "Bom dia, tudo bem? Eu precisava de um comprovante de pagamento. É pro meu imposto de renda.",
    "a minha fibra tá muito lenta à noite, o que pode ser?",
    "Olha. Eu já liguei três vezes. Ninguém resolve o problema do meu sinal.",
    "eu quero incluir um dependente no meu plano",
    "Boa noite. Eu gostaria de saber se tem multa pra cancelar. Eu assinei faz seis meses.",
    "queria saber quanto custa o plano de quinhentos megas",
    "Oi! Eu mudei de casa. Preciso transferir a internet pro endereço novo.",
    "eu preciso do código de barras da fatura",
    "Então... o modem tá com uma luz vermelha piscando. O que eu faço?",
    "eu queria ativar o roaming internacional",
    "Bom dia. Eu sou cliente faz dez anos. Eu queria um desconto na mensalidade.",
    "meu celular não tá recebendo ligação, o que aconteceu?",
    "Oi, tudo bom? Eu quero cadastrar o débito automático.",
    "eu precisava remarcar a visita do técnico",
    "Alô. A atendente da loja não resolveu. Eu queria registrar uma reclamação.",
    "eu quero saber o saldo dos meus créditos",
    "Então. A fatura veio em nome errado. Eu preciso corrigir o nome do titular.",
    "por que o meu plano pré-pago não renovou?",
    "Oi. Eu gostaria de cancelar o pacote de canais. Não uso mais.",
    "eu queria configurar o desvio de chamadas",
    "Bom dia... Eu tô sem internet desde sábado. Quando vai voltar?",
    "eu preciso de uma segunda via do contrato",
    "Oi, boa tarde. O meu chip foi clonado. Eu preciso bloquear a linha agora.",
    "gostaria de saber o prazo de instalação da fibra",
    "Olha, eu paguei a conta ontem. Mas o serviço continua bloqueado. Eu preciso do desbloqueio.",
    "eu queria trocar o aparelho que veio com defeito",
    "Oi. Eu queria entender a cobrança de ligação interurbana.",
    "preciso mudar a senha do wifi",
    "Bom dia. O técnico não apareceu. Eu queria reagendar para amanhã.",
    "eu quero aumentar a franquia de dados do meu plano",
    "Alô, oi. Meu filho usou toda a internet. Eu queria comprar um pacote extra.",
];

// ---------------------------------------------------------------------------
// Demand stubs for the report arithmetic fixture.

/// 3120 rewritten-demand stubs, of which exactly two are fragments (at the
/// returned indices).
pub fn demand_stubs(seed: u64) -> (Vec<String>, [usize; 2]) {
    let verbs = ["Quero", "Preciso", "Quero saber como", "Preciso saber se posso"];
    let objects = [
        "cancelar o plano",
        "mudar o vencimento da fatura",
        "trocar o chip",
        "ativar o roaming",
        "transferir a linha",
        "incluir um dependente",
        "remarcar a visita técnica",
        "aumentar a velocidade",
        "pagar a fatura atrasada",
        "desbloquear o aparelho",
        "contratar um pacote extra",
        "alterar o titular",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<String> = (0..3120)
        .map(|i| {
            format!(
                "{} {} do contrato número {} até o dia {}.",
                verbs[rng.gen_range(0..verbs.len())],
                objects[rng.gen_range(0..objects.len())],
                i,
                rng.gen_range(1..29)
            )
        })
        .collect();
    let a = rng.gen_range(0..1560);
    let b = rng.gen_range(1560..3120);
    out[a] = "Ahn.".to_string();
    out[b] = "é... sim".to_string();
    (out, [a, b])
}

// ---------------------------------------------------------------------------
// Minimal HTTP/1.1 stub server.

#[derive(Debug, Clone)]
pub struct Request {
    pub method: String,
    pub path: String,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl Request {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn json(&self) -> serde_json::Value {
        serde_json::from_slice(&self.body).expect("request body is JSON")
    }
}

pub struct StubServer {
    pub url: String,
    pub requests: Arc<Mutex<Vec<Request>>>,
    handle: Option<JoinHandle<()>>,
}

impl StubServer {
    /// Serves `responses.len()` connections in order; each reply is
    /// `(status, body)`.
    pub fn start(responses: Vec<(u16, String)>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let log = Arc::clone(&requests);
        let handle = std::thread::spawn(move || {
            for (status, reply_body) in responses {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let mut parts = line.split_whitespace();
                let method = parts.next().unwrap_or_default().to_string();
                let path = parts.next().unwrap_or_default().to_string();
                let mut headers = Vec::new();
                loop {
                    let mut h = String::new();
                    reader.read_line(&mut h).unwrap();
                    let h = h.trim_end();
                    if h.is_empty() {
                        break;
                    }
                    if let Some((k, v)) = h.split_once(':') {
                        headers.push((k.trim().to_string(), v.trim().to_string()));
                    }
                }
                let len = headers
                    .iter()
                    .find(|(k, _)| k.eq_ignore_ascii_case("content-length"))
                    .map(|(_, v)| v.parse::<usize>().unwrap())
                    .unwrap_or(0);
                let mut body = vec![0; len];
                reader.read_exact(&mut body).unwrap();
                log.lock().unwrap().push(Request {
                    method,
                    path,
                    headers,
                    body,
                });
                let mut stream = stream;
                let reply = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply_body}",
                    reply_body.len()
                );
                let _ = stream.write_all(reply.as_bytes());
            }
        });
        Self {
            url,
            requests,
            handle: Some(handle),
        }
    }

    pub fn join(mut self) -> Vec<Request> {
        if let Some(h) = self.handle.take() {
            h.join().unwrap();
        }
        self.requests.lock().unwrap().clone()
    }
}
