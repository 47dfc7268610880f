//! Speech recognition adapter.
//!
//! Recognition itself is always delegated: a deterministic mock keyed by
//! clip content, an external command, or an HTTP service. All of them speak
//! the same wire format, a JSON array of `{start, end, text}` objects.

use std::collections::HashMap;
use std::path::Path;
use std::process::Command;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::audio::{self, AudioClip};
use crate::retry::{with_retry, BackendError, RetryPolicy};

#[derive(Debug, Error, PartialEq)]
pub enum AsrError {
    #[error("clip has zero duration")]
    EmptyClip,
    #[error("ASR output is not valid JSON at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("ASR entry {index} has invalid timestamps ({start}, {end})")]
    BadTimestamps { index: usize, start: f64, end: f64 },
    #[error("ASR segment {index} starts at {start}s, past clip end {duration}s")]
    OutOfClip { index: usize, start: f64, duration: f64 },
    #[error("{speaker:?} segments {first} and {second} overlap")]
    SameSpeakerOverlap {
        speaker: Speaker,
        first: usize,
        second: usize,
    },
    #[error("ASR backend failed after {attempts} attempt(s): {source}")]
    Backend { source: BackendError, attempts: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    Customer,
    Agent,
}

impl Speaker {
    pub fn as_str(self) -> &'static str {
        match self {
            Speaker::Customer => "customer",
            Speaker::Agent => "agent",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptSegment {
    pub start_s: f64,
    pub end_s: f64,
    pub text: String,
    pub speaker: Speaker,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallTranscript {
    pub call_id: String,
    pub segments: Vec<TranscriptSegment>,
}

impl CallTranscript {
    pub fn by_speaker(&self, speaker: Speaker) -> impl Iterator<Item = &TranscriptSegment> {
        self.segments.iter().filter(move |s| s.speaker == speaker)
    }
}

/// One entry of the backend wire format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireSegment {
    pub start: f64,
    pub end: f64,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

pub trait AsrBackend: Send + Sync {
    fn recognize(&self, clip: &AudioClip) -> Result<Vec<WireSegment>, BackendError>;
}

/// Hex SHA-256 over the sample rate and the raw `f32` sample bits.
pub fn clip_digest(clip: &AudioClip) -> String {
    let mut h = Sha256::new();
    h.update(clip.sample_rate_hz.to_le_bytes());
    for s in &clip.samples {
        h.update(s.to_bits().to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Fixture-driven backend: maps clip digests to canned segments.
#[derive(Debug, Clone, Default)]
pub struct MockAsr {
    fixtures: HashMap<String, Vec<WireSegment>>,
}

impl MockAsr {
    pub fn new(fixtures: HashMap<String, Vec<WireSegment>>) -> Self {
        Self { fixtures }
    }

    /// Loads a JSON object `{digest: [segments]}`.
    pub fn from_file(path: &Path) -> std::io::Result<Self> {
        let bytes = std::fs::read(path)?;
        let fixtures =
            serde_json::from_slice(&bytes).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        Ok(Self { fixtures })
    }

    pub fn register(&mut self, clip: &AudioClip, segments: Vec<WireSegment>) {
        self.fixtures.insert(clip_digest(clip), segments);
    }
}

impl AsrBackend for MockAsr {
    fn recognize(&self, clip: &AudioClip) -> Result<Vec<WireSegment>, BackendError> {
        let digest = clip_digest(clip);
        self.fixtures
            .get(&digest)
            .cloned()
            .ok_or_else(|| BackendError::Fatal(format!("no mock ASR fixture for clip {digest}")))
    }
}

/// Runs `<cmd> --audio {wav_path}` and reads the segment array from stdout.
#[derive(Debug, Clone)]
pub struct CommandAsr {
    pub template: String,
    pub timeout: Duration,
}

impl AsrBackend for CommandAsr {
    fn recognize(&self, clip: &AudioClip) -> Result<Vec<WireSegment>, BackendError> {
        let io = |e: std::io::Error| BackendError::Fatal(e.to_string());
        let dir = tempfile::tempdir().map_err(io)?;
        let wav = dir.path().join("clip.wav");
        let bytes = audio::encode_clip_pcm16(clip).map_err(|e| BackendError::Fatal(e.to_string()))?;
        std::fs::write(&wav, bytes).map_err(io)?;
        let args: Vec<String> = self
            .template
            .split_whitespace()
            .map(|t| t.replace("{wav_path}", &wav.to_string_lossy()))
            .collect();
        let (program, rest) = args
            .split_first()
            .ok_or_else(|| BackendError::Fatal("empty ASR command".into()))?;
        let output = audio::run_with_timeout(Command::new(program).args(rest), self.timeout).map_err(|e| match e {
            audio::AudioError::DenoiserTimeout(t) => {
                BackendError::Transient(format!("ASR command timed out after {t:?}"))
            }
            other => BackendError::Fatal(other.to_string()),
        })?;
        if !output.status.success() {
            return Err(BackendError::Fatal(format!(
                "ASR command exited with {}: {}",
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            )));
        }
        parse_external_asr_output(&output.stdout).map_err(|e| BackendError::Malformed(e.to_string()))
    }
}

/// POSTs the clip as a WAV body and reads the segment array from the response.
#[derive(Debug, Clone)]
pub struct HttpAsr {
    pub endpoint: String,
    pub timeout: Duration,
}

impl AsrBackend for HttpAsr {
    fn recognize(&self, clip: &AudioClip) -> Result<Vec<WireSegment>, BackendError> {
        let bytes = audio::encode_clip_pcm16(clip).map_err(|e| BackendError::Fatal(e.to_string()))?;
        let body = crate::http::post_bytes(&self.endpoint, "audio/wav", &bytes, self.timeout)?;
        parse_external_asr_output(&body).map_err(|e| BackendError::Malformed(e.to_string()))
    }
}

fn byte_offset(bytes: &[u8], line: usize, column: usize) -> usize {
    let line_start: usize = bytes
        .split(|&b| b == b'\n')
        .take(line.saturating_sub(1))
        .map(|l| l.len() + 1)
        .sum();
    (line_start + column.saturating_sub(1)).min(bytes.len())
}

/// Validates the backend wire format: trims text, drops empty entries,
/// rejects negative or inverted timestamps and sorts by start time.
pub fn parse_external_asr_output(bytes: &[u8]) -> Result<Vec<WireSegment>, AsrError> {
    let raw: Vec<WireSegment> = serde_json::from_slice(bytes).map_err(|e| AsrError::Parse {
        offset: byte_offset(bytes, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let mut out = Vec::with_capacity(raw.len());
    for (index, seg) in raw.into_iter().enumerate() {
        if !(seg.start.is_finite() && seg.end.is_finite()) || seg.start < 0.0 || seg.end <= seg.start {
            return Err(AsrError::BadTimestamps {
                index,
                start: seg.start,
                end: seg.end,
            });
        }
        let text = seg.text.trim();
        if text.is_empty() {
            continue;
        }
        out.push(WireSegment {
            text: text.to_string(),
            ..seg
        });
    }
    out.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.end.total_cmp(&b.end)));
    Ok(out)
}

/// Transcribes one channel, stamping every segment with `speaker`.
pub fn transcribe(
    clip: &AudioClip,
    speaker: Speaker,
    backend: &dyn AsrBackend,
    retry: &RetryPolicy,
) -> Result<Vec<TranscriptSegment>, AsrError> {
    if clip.is_empty() {
        return Err(AsrError::EmptyClip);
    }
    let duration = clip.duration_s();
    let attempted = with_retry(retry, |_| backend.recognize(clip))
        .map_err(|(source, attempts)| AsrError::Backend { source, attempts })?;
    let mut segments = Vec::with_capacity(attempted.value.len());
    for (index, seg) in attempted.value.into_iter().enumerate() {
        if seg.start >= duration {
            return Err(AsrError::OutOfClip {
                index,
                start: seg.start,
                duration,
            });
        }
        let text = seg.text.trim();
        if text.is_empty() {
            continue;
        }
        segments.push(TranscriptSegment {
            start_s: seg.start.max(0.0),
            end_s: seg.end.min(duration),
            text: text.to_string(),
            speaker,
            confidence: seg.confidence,
        });
    }
    segments.sort_by(|a, b| a.start_s.total_cmp(&b.start_s).then(a.end_s.total_cmp(&b.end_s)));
    Ok(segments)
}

fn check_no_overlap(segments: &[TranscriptSegment], speaker: Speaker) -> Result<(), AsrError> {
    for (i, pair) in segments.windows(2).enumerate() {
        if pair[1].start_s < pair[0].end_s {
            return Err(AsrError::SameSpeakerOverlap {
                speaker,
                first: i,
                second: i + 1,
            });
        }
    }
    Ok(())
}

/// Interleaves both channels by start time; ties put the customer first,
/// then the earlier end. The sort is stable.
pub fn merge_channels(
    agent: Vec<TranscriptSegment>,
    customer: Vec<TranscriptSegment>,
    call_id: &str,
) -> Result<CallTranscript, AsrError> {
    let stamp = |mut segs: Vec<TranscriptSegment>, speaker| {
        for s in &mut segs {
            s.speaker = speaker;
        }
        segs.sort_by(|a, b| a.start_s.total_cmp(&b.start_s).then(a.end_s.total_cmp(&b.end_s)));
        segs
    };
    let agent = stamp(agent, Speaker::Agent);
    let customer = stamp(customer, Speaker::Customer);
    check_no_overlap(&agent, Speaker::Agent)?;
    check_no_overlap(&customer, Speaker::Customer)?;
    let mut segments: Vec<TranscriptSegment> = customer.into_iter().chain(agent).collect();
    segments.sort_by(|a, b| {
        a.start_s
            .total_cmp(&b.start_s)
            .then(a.speaker.cmp(&b.speaker))
            .then(a.end_s.total_cmp(&b.end_s))
    });
    Ok(CallTranscript {
        call_id: call_id.to_string(),
        segments,
    })
}
