use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::IvrError;
use crate::audio::AudioClip;

pub const FEATURE_DIM: usize = 8;

/// Band edges in Hz for the four band-energy ratios; the last band runs to Nyquist.
const BAND_EDGES_HZ: [f64; 3] = [300.0, 1000.0, 3000.0];

/// Floor applied to the RMS before taking its logarithm.
const RMS_FLOOR: f64 = 1e-8;

/// Acoustic summary of one analysis window.
///
/// `features` layout: `[log-RMS (dB), zero crossings per second, spectral
/// centroid (Hz), spectral flatness, band ratio 0-300 Hz, 300-1k, 1k-3k,
/// 3k-Nyquist]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureWindow {
    pub index: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub features: [f64; FEATURE_DIM],
}

/// Cuts `clip` into windows of `window_s` at stride `hop_s` and computes the
/// raw (un-normalized) features of each. A trailing partial window is dropped.
pub fn extract_feature_windows(clip: &AudioClip, window_s: f64, hop_s: f64) -> Result<Vec<FeatureWindow>, IvrError> {
    if !(window_s > 0.0 && hop_s > 0.0 && hop_s <= window_s) {
        return Err(IvrError::BadWindow { window_s, hop_s });
    }
    let rate = clip.sample_rate_hz as f64;
    let win = (window_s * rate).round() as usize;
    let hop = ((hop_s * rate).round() as usize).max(1);
    if win == 0 || clip.samples.len() < win {
        return Err(IvrError::ClipTooShort {
            duration_s: clip.duration_s(),
            window_s,
        });
    }
    let count = (clip.samples.len() - win) / hop + 1;
    let analyzer = SpectrumAnalyzer::new(win);
    let window_len_s = win as f64 / rate;
    Ok((0..count)
        .map(|index| {
            let start = index * hop;
            let frame = &clip.samples[start..start + win];
            FeatureWindow {
                index,
                start_s: start as f64 / rate,
                end_s: start as f64 / rate + window_len_s,
                features: analyzer.features(frame, rate),
            }
        })
        .collect())
}

struct SpectrumAnalyzer {
    fft: Arc<dyn Fft<f64>>,
    taper: Vec<f64>,
}

impl SpectrumAnalyzer {
    fn new(len: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(len);
        let taper = if len <= 1 {
            vec![1.0; len]
        } else {
            (0..len)
                .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (len - 1) as f64).cos())
                .collect()
        };
        Self { fft, taper }
    }

    fn features(&self, frame: &[f32], rate: f64) -> [f64; FEATURE_DIM] {
        let n = frame.len();
        let energy: f64 = frame.iter().map(|&s| (s as f64).powi(2)).sum();
        let rms = (energy / n as f64).sqrt();
        let log_rms = 20.0 * rms.max(RMS_FLOOR).log10();
        let duration = n as f64 / rate;
        let crossings = frame
            .windows(2)
            .filter(|pair| (pair[0] >= 0.0) != (pair[1] >= 0.0))
            .count();
        let zcr = crossings as f64 / duration;

        let mut out = [0.0; FEATURE_DIM];
        out[0] = log_rms;
        out[1] = zcr;
        if energy == 0.0 {
            // no energy: centroid, flatness and band ratios are all zero
            return out;
        }

        let mut buf: Vec<Complex<f64>> = frame
            .iter()
            .zip(&self.taper)
            .map(|(&s, &w)| Complex::new(s as f64 * w, 0.0))
            .collect();
        self.fft.process(&mut buf);
        let bins = n / 2 + 1;
        let power: Vec<f64> = buf[..bins].iter().map(|c| c.norm_sqr()).collect();
        let total: f64 = power.iter().sum();
        if total <= 0.0 {
            return out;
        }
        let bin_hz = rate / n as f64;

        let centroid = power
            .iter()
            .enumerate()
            .map(|(k, p)| k as f64 * bin_hz * p)
            .sum::<f64>()
            / total;

        let eps = 1e-20;
        let mean_log = power.iter().map(|p| (p + eps).ln()).sum::<f64>() / bins as f64;
        let mean = power.iter().map(|p| p + eps).sum::<f64>() / bins as f64;
        let flatness = (mean_log.exp() / mean).clamp(0.0, 1.0);

        let mut bands = [0.0; 4];
        for (k, p) in power.iter().enumerate() {
            let f = k as f64 * bin_hz;
            let band = BAND_EDGES_HZ.iter().take_while(|&&edge| f >= edge).count();
            bands[band] += p;
        }

        out[2] = centroid;
        out[3] = flatness;
        for (slot, band) in out[4..].iter_mut().zip(bands) {
            *slot = band / total;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::ChannelLabel;
    use std::f64::consts::PI;

    fn sine(freq: f64, rate: u32, secs: f64) -> AudioClip {
        let n = (rate as f64 * secs).round() as usize;
        let samples = (0..n)
            .map(|i| (2.0 * PI * freq * i as f64 / rate as f64).sin() as f32)
            .collect();
        AudioClip::new(samples, rate, ChannelLabel::Agent)
    }

    #[test]
    fn window_count_for_ten_seconds() {
        let clip = AudioClip::new(vec![0.0; 160_000], 16_000, ChannelLabel::Agent);
        let windows = extract_feature_windows(&clip, 1.0, 0.5).unwrap();
        assert_eq!(windows.len(), 19);
        assert_eq!(windows[18].start_s, 9.0);
        assert_eq!(windows[18].end_s, 10.0);
    }

    #[test]
    fn silence_has_degenerate_features() {
        let clip = AudioClip::new(vec![0.0; 16_000], 16_000, ChannelLabel::Agent);
        let w = &extract_feature_windows(&clip, 1.0, 0.5).unwrap()[0];
        assert_eq!(w.features[1], 0.0);
        assert_eq!(w.features[3], 0.0);
        assert_eq!(&w.features[4..], &[0.0; 4]);
    }

    /// Zeros of sin(2*pi*f*t) fall at t = k / 2f; count those strictly inside
    /// the span covered by the sampled frame.
    fn analytic_crossings(freq: f64, rate: u32, n: usize) -> usize {
        let span = (n - 1) as f64 / rate as f64;
        (1..).take_while(|&k| k as f64 / (2.0 * freq) < span).count()
    }

    #[test]
    fn sine_zero_crossing_rate() {
        let clip = sine(440.0, 16_000, 1.0);
        let w = &extract_feature_windows(&clip, 1.0, 0.5).unwrap()[0];
        let oracle = analytic_crossings(440.0, 16_000, 16_000) as f64;
        assert!((oracle - 880.0).abs() / 880.0 < 0.01, "oracle {oracle}");
        assert!((w.features[1] - 880.0).abs() / 880.0 < 0.01, "zcr {}", w.features[1]);
    }

    #[test]
    fn spectral_invariants() {
        let clip = sine(1500.0, 16_000, 2.0);
        for w in extract_feature_windows(&clip, 0.5, 0.25).unwrap() {
            let ratios: f64 = w.features[4..].iter().sum();
            assert!((ratios - 1.0).abs() < 1e-6);
            assert!((0.0..=1.0).contains(&w.features[3]));
            assert!((w.features[2] - 1500.0).abs() < 50.0, "centroid {}", w.features[2]);
            assert!(w.features[6] > 0.99, "energy should sit in the 1k-3k band");
        }
    }

    #[test]
    fn rejects_short_clip_and_bad_hop() {
        let clip = AudioClip::new(vec![0.0; 100], 1000, ChannelLabel::Agent);
        assert!(matches!(
            extract_feature_windows(&clip, 1.0, 0.5),
            Err(IvrError::ClipTooShort { .. })
        ));
        assert!(matches!(
            extract_feature_windows(&clip, 0.05, 0.1),
            Err(IvrError::BadWindow { .. })
        ));
    }
}
