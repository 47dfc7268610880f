//! Synthetic recordings and the 20-call demo corpus.
//!
//! The IVR generator produces a looped tone melody followed by
//! amplitude-modulated noise standing in for speech. The demo corpus pairs
//! such recordings with scripted dialogues; its mock ASR table is keyed by
//! the digests of the clips the IVR stage actually emits, so it is built by
//! running ingest and IVR on a scratch workspace with the same settings.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::asr::{clip_digest, WireSegment};
use crate::audio::{self, AudioClip, ChannelLabel, DecodedAudio, SampleFormat, StereoCall};
use crate::config::{load_config, ConfigError};
use crate::pipeline::{run_stages, PipelineError, RunOptions, Stage};

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Audio(#[from] audio::AudioError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("{0}")]
    Corpus(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FixtureError + '_ {
    move |source| FixtureError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One generated call with its true IVR/speech transition.
#[derive(Debug, Clone)]
pub struct SyntheticCall {
    pub call: StereoCall,
    pub boundary_s: f64,
}

const MELODY_HZ: [f64; 6] = [392.0, 440.0, 523.25, 587.33, 659.25, 783.99];

fn ivr_head(rng: &mut ChaCha8Rng, rate: u32, n: usize) -> Vec<f32> {
    let notes: Vec<f64> = (0..3).map(|_| MELODY_HZ[rng.gen_range(0..MELODY_HZ.len())]).collect();
    let note_len = (0.5 * rate as f64) as usize;
    let amp = rng.gen_range(0.2..0.35);
    (0..n)
        .map(|i| {
            let f = notes[(i / note_len) % notes.len()];
            let t = i as f64 / rate as f64;
            (amp * ((2.0 * PI * f * t).sin() + 0.3 * (4.0 * PI * f * t).sin()) / 1.3) as f32
        })
        .collect()
}

/// Low-passed noise under a syllable-rate envelope with occasional short pauses.
fn speech_like(rng: &mut ChaCha8Rng, rate: u32, n: usize, level: f64) -> Vec<f32> {
    let syllable_hz = rng.gen_range(3.0..5.5);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let alpha = 0.35;
    let mut lp = 0.0f64;
    let mut pause_left = 0usize;
    (0..n)
        .map(|i| {
            if pause_left == 0 && i % (rate as usize / 10).max(1) == 0 && rng.gen_bool(0.03) {
                pause_left = (rng.gen_range(0.1..0.3) * rate as f64) as usize;
            }
            let noise: f64 = rng.gen_range(-1.0..1.0);
            lp += alpha * (noise - lp);
            let t = i as f64 / rate as f64;
            let env = 0.15 + 0.85 * (PI * syllable_hz * t + phase).sin().abs();
            if pause_left > 0 {
                pause_left -= 1;
                (level * 0.05 * lp) as f32
            } else {
                (level * env * lp) as f32
            }
        })
        .collect()
}

/// A call whose agent channel opens with `head_s` seconds of IVR melody and
/// continues with `tail_s` seconds of speech-like noise. The customer channel
/// is silent during the head.
pub fn synthetic_call(call_id: &str, seed: u64, rate: u32, head_s: f64, tail_s: f64) -> SyntheticCall {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let head_n = (head_s * rate as f64).round() as usize;
    let tail_n = (tail_s * rate as f64).round() as usize;
    let mut agent = ivr_head(&mut rng, rate, head_n);
    let agent_level = rng.gen_range(0.5..0.9);
    agent.extend(speech_like(&mut rng, rate, tail_n, agent_level));
    let mut customer = vec![0.0f32; head_n];
    let customer_level = rng.gen_range(0.4..0.8);
    customer.extend(speech_like(&mut rng, rate, tail_n, customer_level));
    SyntheticCall {
        call: StereoCall {
            call_id: call_id.to_string(),
            agent: AudioClip::new(agent, rate, ChannelLabel::Agent),
            customer: AudioClip::new(customer, rate, ChannelLabel::Customer),
        },
        boundary_s: head_n as f64 / rate as f64,
    }
}

/// `n` calls with heads drawn uniformly from 5 to 30 seconds.
pub fn ivr_corpus(n: usize, seed: u64, rate: u32) -> Vec<SyntheticCall> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let head = rng.gen_range(5.0..=30.0);
            let tail = rng.gen_range(15.0..25.0);
            synthetic_call(&format!("ivr_{i:03}"), rng.gen(), rate, head, tail)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Who {
    Agent,
    Customer,
}

struct Script {
    agent_name: &'static str,
    demand: &'static str,
    answer: [&'static str; 2],
    closing: &'static str,
}

const SCRIPTS: [Script; 20] = [
    Script {
        agent_name: "Carlos",
        demand: "É... eu queria saber por que a minha fatura veio com valor de duzentos e cinquenta reais esse mês, né.",
        answer: [
            "Verifiquei aqui e a sua fatura teve a cobrança proporcional da mudança de plano feita no dia dez.",
            "No próximo mês o valor volta ao normal do plano contratado, sem essa cobrança proporcional.",
        ],
        closing: "Tá bom, obrigado.",
    },
    Script {
        agent_name: "Fernanda",
        demand: "Então, eu gostaria de trocar o titular da linha para o nome da minha esposa Mariana Souza.",
        answer: [
            "Para a troca de titularidade os dois titulares precisam comparecer a uma loja com documento com foto.",
            "Também é possível fazer pelo aplicativo enviando a foto dos documentos dos dois titulares.",
        ],
        closing: "Entendi, vou fazer pelo aplicativo.",
    },
    Script {
        agent_name: "Paulo",
        demand: "Meu nome é João Pereira, meu CPF é 123.456.789-09 e eu preciso da segunda via da fatura de março.",
        answer: [
            "A segunda via da fatura pode ser emitida no aplicativo na opção faturas e depois segunda via.",
            "Vou enviar agora também o código de barras por mensagem de texto para o número cadastrado.",
        ],
        closing: "Ótimo, muito obrigado.",
    },
    Script {
        agent_name: "Juliana",
        demand: "A minha internet tá caindo toda hora desde ontem à noite, tipo, não fica nem cinco minutos conectada.",
        answer: [
            "Identifiquei uma instabilidade na sua região e a equipe técnica já está trabalhando na correção.",
            "Se o problema continuar depois de vinte e quatro horas, reinicie o modem e ligue novamente para abrirmos uma visita técnica.",
        ],
        closing: "Tá certo, vou aguardar.",
    },
    Script {
        agent_name: "Rafael",
        demand: "Eu queria cancelar o pacote de canais adicionais que eu contratei, o contrato 48213977 sabe.",
        answer: [
            "O cancelamento do pacote adicional foi registrado e não haverá multa porque o período mínimo já foi cumprido.",
            "A cobrança do pacote deixa de aparecer a partir da próxima fatura.",
        ],
        closing: "Beleza, obrigado.",
    },
    Script {
        agent_name: "Camila",
        demand: "Eu preciso mudar o endereço de instalação para a Rua das Palmeiras 120 porque vou me mudar semana que vem.",
        answer: [
            "A mudança de endereço pode ser agendada e o técnico instala o serviço no novo endereço em até cinco dias úteis.",
            "Antes da visita confirme se o prédio já tem cabeamento da operadora.",
        ],
        closing: "Vou confirmar com o síndico, obrigado.",
    },
    Script {
        agent_name: "Marcelo",
        demand: "Eu queria saber quanto custa pra aumentar a velocidade da internet pra quinhentos megas.",
        answer: [
            "O plano de quinhentos megas custa cento e vinte reais por mês no pagamento com débito automático.",
            "A troca de plano é feita na hora e a nova velocidade fica disponível em até quatro horas.",
        ],
        closing: "Vou pensar e ligo depois.",
    },
    Script {
        agent_name: "Patrícia",
        demand: "Ahn, eu recebi uma cobrança de serviço que eu não contratei, um tal de seguro de aparelho.",
        answer: [
            "Verifiquei que o seguro foi ativado por engano e já fiz o cancelamento do serviço.",
            "O valor cobrado será devolvido como crédito na próxima fatura.",
        ],
        closing: "Ah, que bom, obrigado.",
    },
    Script {
        agent_name: "Gustavo",
        demand: "Eu gostaria de cadastrar o débito automático, meu e-mail é cliente.teste@exemplo.com pra receber a confirmação.",
        answer: [
            "O cadastro do débito automático é feito informando banco, agência e conta corrente do titular.",
            "A confirmação chega por e-mail em até dois dias úteis e a primeira fatura em débito vem no ciclo seguinte.",
        ],
        closing: "Perfeito, obrigado pela ajuda.",
    },
    Script {
        agent_name: "Aline",
        demand: "O meu celular tá sem sinal nenhum aqui em casa, eu preciso que alguém veja isso.",
        answer: [
            "Vou abrir uma solicitação de análise de cobertura para o seu endereço com prazo de setenta e duas horas.",
            "Enquanto isso você pode ativar a chamada por wifi nas configurações do aparelho.",
        ],
        closing: "Tá bom, vou ativar.",
    },
    Script {
        agent_name: "Bruno",
        demand: "Eu queria desbloquear o meu chip, ele ficou bloqueado depois que eu errei a senha três vezes.",
        answer: [
            "Para desbloquear o chip é preciso o código de desbloqueio que fica no cartão plástico onde o chip veio.",
            "Se não tiver mais o cartão, posso enviar o código por mensagem para um número alternativo.",
        ],
        closing: "Pode enviar, por favor.",
    },
    Script {
        agent_name: "Larissa",
        demand: "Eu precisava de um comprovante de quitação de débitos do ano passado para o meu imposto de renda.",
        answer: [
            "A declaração anual de quitação de débitos fica disponível no aplicativo na área de documentos.",
            "Também posso enviar o documento para o seu e-mail cadastrado ainda hoje.",
        ],
        closing: "Manda no e-mail, obrigado.",
    },
    Script {
        agent_name: "Rodrigo",
        demand: "Por que o meu plano pré-pago não renovou automaticamente, eu coloquei crédito ontem?",
        answer: [
            "A renovação automática acontece no dia do vencimento do plano quando há saldo suficiente.",
            "Como a recarga foi feita depois do vencimento, você pode renovar agora pelo menu de ofertas.",
        ],
        closing: "Entendi, vou renovar.",
    },
    Script {
        agent_name: "Vanessa",
        demand: "Meu telefone é 11 98765-4321 e eu queria portar esse número para vocês.",
        answer: [
            "A portabilidade é solicitada com a compra de um chip novo e o número é transferido em até três dias úteis.",
            "Durante a portabilidade a linha antiga continua funcionando até a ativação do novo chip.",
        ],
        closing: "Certo, vou comprar o chip.",
    },
    Script {
        agent_name: "Thiago",
        demand: "Eu quero saber se tem multa para cancelar a fibra antes de completar um ano.",
        answer: [
            "Existe multa proporcional aos meses que faltam para completar o período de fidelidade de doze meses.",
            "No seu caso faltam quatro meses e o valor da multa aparece no resumo de cancelamento.",
        ],
        closing: "Tá, vou esperar então.",
    },
    Script {
        agent_name: "Beatriz",
        demand: "Assim, eu gostaria de incluir um dependente no meu plano família, é pro meu filho.",
        answer: [
            "A inclusão de dependente pode ser feita no aplicativo na área do plano família até o limite de quatro linhas.",
            "Cada dependente adicional tem um custo de vinte e cinco reais por mês.",
        ],
        closing: "Ok, obrigado.",
    },
    Script {
        agent_name: "Eduardo",
        demand: "O modem que vocês instalaram tá com a luz vermelha piscando, o que eu faço?",
        answer: [
            "A luz vermelha piscando indica falta de sinal óptico no cabo que chega ao modem.",
            "Verifique se o cabo verde está bem encaixado e, se continuar, agendamos uma visita técnica sem custo.",
        ],
        closing: "Vou olhar o cabo.",
    },
    Script {
        agent_name: "Adriana",
        demand: "Eu queria mudar a data de vencimento da minha fatura do dia cinco pro dia vinte.",
        answer: [
            "A alteração da data de vencimento foi registrada e passa a valer a partir do próximo ciclo.",
            "A fatura de transição pode vir com valor proporcional aos dias do período ajustado.",
        ],
        closing: "Tudo bem, obrigado.",
    },
    Script {
        agent_name: "Ricardo",
        demand: "Eu preciso de ajuda pra configurar o roteamento de chamadas pra outro número quando eu não atender.",
        answer: [
            "O desvio de chamadas é ativado discando asterisco sessenta e um, o número de destino e a tecla de chamada.",
            "Para desativar o desvio basta discar sharp sessenta e um sharp e aguardar a confirmação.",
        ],
        closing: "Vou testar agora.",
    },
    Script {
        agent_name: "Mariana",
        demand: "Eu queria reclamar do atendimento da loja do shopping, a atendente não resolveu a minha troca de aparelho.",
        answer: [
            "Registrei a sua reclamação e a equipe da loja vai entrar em contato em até quarenta e oito horas.",
            "A troca do aparelho em garantia também pode ser feita pela assistência técnica autorizada.",
        ],
        closing: "Tá bom, fico aguardando.",
    },
];

/// Turns of one scripted call. Some calls carry a repetitive tail segment
/// that the cleaner is expected to drop.
fn turns(i: usize, s: &Script) -> Vec<(Who, String)> {
    let mut v = vec![
        (
            Who::Agent,
            format!(
                "Bom dia, você ligou para a central de atendimento, meu nome é {}, em que posso ajudar?",
                s.agent_name
            ),
        ),
        (Who::Customer, "Oi, bom dia.".to_string()),
        (Who::Customer, s.demand.to_string()),
        (Who::Agent, "Certo, só um momento.".to_string()),
        (Who::Agent, s.answer[0].to_string()),
        (Who::Agent, s.answer[1].to_string()),
        (Who::Customer, s.closing.to_string()),
        (Who::Agent, "Por nada, tenha um ótimo dia.".to_string()),
    ];
    if i % 4 == 3 {
        v.push((
            Who::Customer,
            "obrigado obrigado obrigado obrigado obrigado obrigado obrigado".to_string(),
        ));
    }
    v
}

/// Lays the turns out in time and scales them to fit inside `duration_s`.
fn timed(turns: &[(Who, String)], duration_s: f64) -> (Vec<WireSegment>, Vec<WireSegment>) {
    let mut t = 0.3;
    let mut spans = Vec::new();
    for (_, text) in turns {
        let len = (0.3 * text.split_whitespace().count() as f64).max(1.0);
        spans.push((t, t + len));
        t += len + 0.4;
    }
    let scale = ((duration_s - 0.5) / t).min(1.0);
    let round = |x: f64| (x * scale * 1000.0).round() / 1000.0;
    let (mut agent, mut customer) = (Vec::new(), Vec::new());
    for ((who, text), (a, b)) in turns.iter().zip(spans) {
        let seg = WireSegment {
            start: round(a),
            end: round(b),
            text: text.clone(),
            confidence: Some(0.9),
        };
        match who {
            Who::Agent => agent.push(seg),
            Who::Customer => customer.push(seg),
        }
    }
    (agent, customer)
}

pub const FIXTURE_CALLS: usize = 20;
pub const FIXTURE_CONFIG: &str = "callqa.toml";
pub const FIXTURE_MOCK_ASR: &str = "mock_asr.json";

const FIXTURE_TOML: &str = r#"input_dir = "input"
workspace_dir = "workspace"

[asr]
backend = "mock"
mock_fixtures = "mock_asr.json"
"#;

/// Paths of a written demo corpus.
#[derive(Debug, Clone)]
pub struct CallFixture {
    pub root: PathBuf,
    pub config_path: PathBuf,
    pub input_dir: PathBuf,
    pub mock_asr_path: PathBuf,
}

/// Writes the 20-call corpus under `root`: `input/*.wav` (8 kHz stereo),
/// `callqa.toml` with all-mock backends, and `mock_asr.json`.
pub fn write_call_fixture(root: &Path) -> Result<CallFixture, FixtureError> {
    let input_dir = root.join("input");
    std::fs::create_dir_all(&input_dir).map_err(io_err(&input_dir))?;
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for i in 0..FIXTURE_CALLS {
        let head = rng.gen_range(6.0..14.0);
        let call = synthetic_call(&format!("call_{i:02}"), 1000 + i as u64, 8000, head, 40.0).call;
        let bytes = audio::encode_wav(&[&call.agent, &call.customer], SampleFormat::Pcm16)?;
        let path = input_dir.join(format!("{}.wav", call.call_id));
        std::fs::write(&path, bytes).map_err(io_err(&path))?;
    }
    let config_path = root.join(FIXTURE_CONFIG);
    std::fs::write(&config_path, FIXTURE_TOML).map_err(io_err(&config_path))?;
    let mock_asr_path = root.join(FIXTURE_MOCK_ASR);
    std::fs::write(&mock_asr_path, b"{}").map_err(io_err(&mock_asr_path))?;

    let scratch = tempfile::tempdir().map_err(io_err(root))?;
    let mut cfg = load_config(&config_path)?;
    cfg.workspace_dir = scratch.path().to_path_buf();
    run_stages(&cfg, &[Stage::Ingest, Stage::Ivr], RunOptions::default())?;

    let mut table: BTreeMap<String, Vec<WireSegment>> = BTreeMap::new();
    for (i, script) in SCRIPTS.iter().enumerate() {
        let path = Stage::Ivr.dir(scratch.path()).join(format!("call_{i:02}.wav"));
        let bytes = std::fs::read(&path).map_err(io_err(&path))?;
        let DecodedAudio::Stereo { agent, customer } = audio::decode_wav(&bytes)? else {
            return Err(FixtureError::Corpus(format!("{} is not stereo", path.display())));
        };
        let duration = agent.duration_s().min(customer.duration_s());
        let (a, c) = timed(&turns(i, script), duration);
        for (clip, segs) in [(&agent, a), (&customer, c)] {
            if table.insert(clip_digest(clip), segs).is_some() {
                return Err(FixtureError::Corpus(format!("digest collision in call_{i:02}")));
            }
        }
    }
    let json = serde_json::to_vec_pretty(&table).expect("fixture table serializes");
    std::fs::write(&mock_asr_path, json).map_err(io_err(&mock_asr_path))?;
    Ok(CallFixture {
        root: root.to_path_buf(),
        config_path,
        input_dir,
        mock_asr_path,
    })
}
