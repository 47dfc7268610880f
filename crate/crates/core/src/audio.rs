//! Audio ingestion: WAV decode/encode, linear resampling, an energy noise
//! gate and the external denoiser subprocess hook.

use std::io::Cursor;
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("empty audio stream")]
    Empty,
    #[error("unsupported audio format: {0}")]
    Unsupported(String),
    #[error("truncated or malformed WAV data: {0}")]
    Malformed(String),
    #[error("denoiser command template must contain {{in}} and {{out}} placeholders")]
    BadTemplate,
    #[error("denoiser failed with status {status}: {stderr}")]
    DenoiserFailed { status: String, stderr: String },
    #[error("denoiser timed out after {0:?}")]
    DenoiserTimeout(Duration),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AudioError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelLabel {
    Agent,
    Customer,
    Mono,
}

/// A single channel of audio with amplitudes in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate_hz: u32,
    pub channel: ChannelLabel,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate_hz: u32, channel: ChannelLabel) -> Self {
        Self {
            samples,
            sample_rate_hz,
            channel,
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StereoCall {
    pub call_id: String,
    pub agent: AudioClip,
    pub customer: AudioClip,
}

/// Result of decoding a WAV container.
#[derive(Debug, Clone, PartialEq)]
pub enum DecodedAudio {
    Stereo { agent: AudioClip, customer: AudioClip },
    Mono(AudioClip),
}

impl DecodedAudio {
    pub fn sample_rate_hz(&self) -> u32 {
        match self {
            DecodedAudio::Stereo { agent, .. } => agent.sample_rate_hz,
            DecodedAudio::Mono(clip) => clip.sample_rate_hz,
        }
    }
}

/// On-disk sample encodings supported by [`encode_wav`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleFormat {
    Pcm8,
    Pcm16,
    Pcm24,
    Float32,
}

impl SampleFormat {
    fn spec(self) -> (u16, hound::SampleFormat) {
        match self {
            SampleFormat::Pcm8 => (8, hound::SampleFormat::Int),
            SampleFormat::Pcm16 => (16, hound::SampleFormat::Int),
            SampleFormat::Pcm24 => (24, hound::SampleFormat::Int),
            SampleFormat::Float32 => (32, hound::SampleFormat::Float),
        }
    }
}

fn int_scale(bits: u16) -> f32 {
    (1u32 << (bits - 1)) as f32
}

/// Decodes a RIFF/WAVE byte stream. Stereo input maps channel 0 to the agent
/// and channel 1 to the customer.
pub fn decode_wav(bytes: &[u8]) -> Result<DecodedAudio> {
    decode_wav_with_agent_channel(bytes, 0)
}

/// Like [`decode_wav`] with a configurable agent channel index (0 or 1).
pub fn decode_wav_with_agent_channel(bytes: &[u8], agent_channel: usize) -> Result<DecodedAudio> {
    if bytes.is_empty() {
        return Err(AudioError::Empty);
    }
    let mut reader = hound::WavReader::new(Cursor::new(bytes)).map_err(map_hound)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 || channels > 2 {
        return Err(AudioError::Unsupported(format!("{channels} channels")));
    }
    if spec.sample_rate == 0 {
        return Err(AudioError::Malformed("zero sample rate".into()));
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, bits @ (8 | 16 | 24)) => {
            let scale = int_scale(bits);
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(map_hound)?
        }
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| if v.is_finite() { v.clamp(-1.0, 1.0) } else { 0.0 }))
            .collect::<std::result::Result<_, _>>()
            .map_err(map_hound)?,
        (fmt, bits) => {
            return Err(AudioError::Unsupported(format!("{fmt:?} {bits}-bit")));
        }
    };
    if interleaved.is_empty() {
        return Err(AudioError::Empty);
    }
    if !interleaved.len().is_multiple_of(channels) {
        return Err(AudioError::Malformed("partial frame at end of data".into()));
    }
    let rate = spec.sample_rate;
    if channels == 1 {
        return Ok(DecodedAudio::Mono(AudioClip::new(
            interleaved,
            rate,
            ChannelLabel::Mono,
        )));
    }
    let frames = interleaved.len() / 2;
    let mut ch0 = Vec::with_capacity(frames);
    let mut ch1 = Vec::with_capacity(frames);
    for frame in interleaved.chunks_exact(2) {
        ch0.push(frame[0]);
        ch1.push(frame[1]);
    }
    let (agent, customer) = if agent_channel == 1 { (ch1, ch0) } else { (ch0, ch1) };
    Ok(DecodedAudio::Stereo {
        agent: AudioClip::new(agent, rate, ChannelLabel::Agent),
        customer: AudioClip::new(customer, rate, ChannelLabel::Customer),
    })
}

fn map_hound(err: hound::Error) -> AudioError {
    match err {
        hound::Error::IoError(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
            AudioError::Malformed("unexpected end of data".into())
        }
        hound::Error::IoError(e) => AudioError::Io(e),
        hound::Error::Unsupported => AudioError::Unsupported("codec not supported".into()),
        hound::Error::FormatError(msg) => AudioError::Malformed(msg.to_string()),
        other => AudioError::Malformed(other.to_string()),
    }
}

fn quantize(sample: f32, bits: u16) -> i32 {
    let scale = int_scale(bits);
    let max = scale - 1.0;
    (sample * scale).round().clamp(-scale, max) as i32
}

/// Encodes one or two channels (same rate, same length) as a WAV byte stream.
pub fn encode_wav(channels: &[&AudioClip], format: SampleFormat) -> Result<Vec<u8>> {
    let first = channels
        .first()
        .ok_or_else(|| AudioError::Unsupported("no channels".into()))?;
    if channels.len() > 2 {
        return Err(AudioError::Unsupported(format!("{} channels", channels.len())));
    }
    let frames = first.samples.len();
    if channels
        .iter()
        .any(|c| c.sample_rate_hz != first.sample_rate_hz || c.samples.len() != frames)
    {
        return Err(AudioError::Unsupported("channels differ in rate or length".into()));
    }
    let (bits, sample_format) = format.spec();
    let spec = hound::WavSpec {
        channels: channels.len() as u16,
        sample_rate: first.sample_rate_hz,
        bits_per_sample: bits,
        sample_format,
    };
    let mut buf = Cursor::new(Vec::new());
    {
        let mut writer = hound::WavWriter::new(&mut buf, spec).map_err(map_hound)?;
        for i in 0..frames {
            for clip in channels {
                let s = clip.samples[i];
                match format {
                    SampleFormat::Float32 => writer.write_sample(s).map_err(map_hound)?,
                    SampleFormat::Pcm8 => writer.write_sample(quantize(s, 8) as i8).map_err(map_hound)?,
                    SampleFormat::Pcm16 => writer.write_sample(quantize(s, 16) as i16).map_err(map_hound)?,
                    SampleFormat::Pcm24 => writer.write_sample(quantize(s, 24)).map_err(map_hound)?,
                }
            }
        }
        writer.finalize().map_err(map_hound)?;
    }
    Ok(buf.into_inner())
}

/// Canonical PCM16 mono encoding of a single clip.
pub fn encode_clip_pcm16(clip: &AudioClip) -> Result<Vec<u8>> {
    encode_wav(&[clip], SampleFormat::Pcm16)
}

/// Reads a single-channel WAV, keeping the given label.
pub fn read_clip(path: &Path, label: ChannelLabel) -> Result<AudioClip> {
    let bytes = std::fs::read(path)?;
    match decode_wav(&bytes)? {
        DecodedAudio::Mono(mut clip) => {
            clip.channel = label;
            Ok(clip)
        }
        DecodedAudio::Stereo { .. } => Err(AudioError::Unsupported(format!(
            "{} is stereo, expected a single channel",
            path.display()
        ))),
    }
}

/// Linear-interpolation resampler. Output length is `round(n * target / source)`.
pub fn resample(clip: &AudioClip, target_rate_hz: u32) -> AudioClip {
    assert!(target_rate_hz > 0, "target rate must be positive");
    if clip.sample_rate_hz == target_rate_hz || clip.samples.is_empty() {
        return AudioClip::new(clip.samples.clone(), target_rate_hz, clip.channel);
    }
    let n = clip.samples.len();
    let ratio = clip.sample_rate_hz as f64 / target_rate_hz as f64;
    let out_len = ((n as f64) / ratio).round().max(1.0) as usize;
    let last = n - 1;
    let samples = (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let lo = (pos.floor() as usize).min(last);
            let hi = (lo + 1).min(last);
            let frac = (pos - lo as f64).clamp(0.0, 1.0);
            let a = clip.samples[lo] as f64;
            let b = clip.samples[hi] as f64;
            (a + (b - a) * frac) as f32
        })
        .collect();
    AudioClip::new(samples, target_rate_hz, clip.channel)
}

fn rms(frame: &[f32]) -> f64 {
    if frame.is_empty() {
        return 0.0;
    }
    let sum: f64 = frame.iter().map(|&s| (s as f64) * (s as f64)).sum();
    (sum / frame.len() as f64).sqrt()
}

/// RMS level of a sample slice in dBFS (full scale = amplitude 1.0).
pub fn rms_dbfs(frame: &[f32]) -> f64 {
    let r = rms(frame);
    if r <= 0.0 {
        f64::NEG_INFINITY
    } else {
        20.0 * r.log10()
    }
}

/// Zeroes every frame whose RMS level falls below `threshold_dbfs`.
pub fn noise_gate(clip: &AudioClip, threshold_dbfs: f64, frame_s: f64) -> AudioClip {
    assert!(threshold_dbfs <= 0.0, "threshold must be <= 0 dBFS");
    assert!(frame_s > 0.0, "frame length must be positive");
    let frame_len = ((frame_s * clip.sample_rate_hz as f64).round() as usize).max(1);
    let mut samples = clip.samples.clone();
    for frame in samples.chunks_mut(frame_len) {
        if rms_dbfs(frame) < threshold_dbfs {
            frame.fill(0.0);
        }
    }
    AudioClip::new(samples, clip.sample_rate_hz, clip.channel)
}

#[derive(Debug, Clone)]
pub struct DenoiseOutcome {
    pub clip: AudioClip,
    pub warnings: Vec<String>,
}

/// Runs an external denoiser through the `--in {in} --out {out}` contract.
///
/// The clip is written as PCM16 to a temp file, the command is run with the
/// placeholders substituted, and the output file is decoded back. A result
/// whose duration differs from the input by more than 1% is returned with a
/// warning.
pub fn apply_external_denoiser(clip: &AudioClip, command_template: &str, timeout: Duration) -> Result<DenoiseOutcome> {
    if !command_template.contains("{in}") || !command_template.contains("{out}") {
        return Err(AudioError::BadTemplate);
    }
    let dir = tempfile::tempdir()?;
    let in_path = dir.path().join("in.wav");
    let out_path = dir.path().join("out.wav");
    std::fs::write(&in_path, encode_clip_pcm16(clip)?)?;

    let args: Vec<String> = command_template
        .split_whitespace()
        .map(|tok| {
            tok.replace("{in}", &in_path.to_string_lossy())
                .replace("{out}", &out_path.to_string_lossy())
        })
        .collect();
    let (program, rest) = args.split_first().ok_or(AudioError::BadTemplate)?;
    let output = run_with_timeout(Command::new(program).args(rest), timeout)?;
    if !output.status.success() {
        return Err(AudioError::DenoiserFailed {
            status: output.status.to_string(),
            stderr: String::from_utf8_lossy(&output.stderr).trim().to_string(),
        });
    }
    let bytes = std::fs::read(&out_path)?;
    let mut denoised = match decode_wav(&bytes)? {
        DecodedAudio::Mono(c) => c,
        DecodedAudio::Stereo { agent, .. } => agent,
    };
    denoised.channel = clip.channel;
    if denoised.sample_rate_hz != clip.sample_rate_hz {
        denoised = resample(&denoised, clip.sample_rate_hz);
    }
    let mut warnings = Vec::new();
    let (d_in, d_out) = (clip.duration_s(), denoised.duration_s());
    if d_in > 0.0 && ((d_out - d_in).abs() / d_in) > 0.01 {
        let msg = format!("denoiser changed duration from {d_in:.3}s to {d_out:.3}s");
        log::warn!("{msg}");
        warnings.push(msg);
    }
    Ok(DenoiseOutcome {
        clip: denoised,
        warnings,
    })
}

/// Spawns a command, captures its output and kills it after `timeout`.
pub(crate) fn run_with_timeout(command: &mut Command, timeout: Duration) -> Result<std::process::Output> {
    let mut child = command
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()?;
    let mut stdout = child.stdout.take().expect("piped stdout");
    let mut stderr = child.stderr.take().expect("piped stderr");
    let out_reader = std::thread::spawn(move || {
        let mut buf = Vec::new();
        std::io::Read::read_to_end(&mut stdout, &mut buf).map(|_| buf)
    });
    let err_reader = std::thread::spawn(move || {
        let mut buf = Vec::new();
        std::io::Read::read_to_end(&mut stderr, &mut buf).map(|_| buf)
    });
    let start = Instant::now();
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        if start.elapsed() >= timeout {
            let _ = child.kill();
            let _ = child.wait();
            return Err(AudioError::DenoiserTimeout(timeout));
        }
        std::thread::sleep(Duration::from_millis(5));
    };
    let stdout = out_reader.join().expect("stdout reader")?;
    let stderr = err_reader.join().expect("stderr reader")?;
    Ok(std::process::Output { status, stdout, stderr })
}
