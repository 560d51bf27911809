//! Frame-level front-end: energy VAD, MFCC, RASTA-PLP, shifted delta
//! cepstra, cepstral mean subtraction, and fixed-length chunking.
//!
//! Pipeline order is VAD -> cepstra -> CMS -> chunking; VAD decisions are
//! made on the same frames the cepstral analysis consumes.

pub mod archive;
mod mfcc;
mod plp;
mod sdc;

use thiserror::Error;

use crate::corpus::AudioBuffer;

pub use archive::{FeatureArchiveReader, FeatureArchiveWriter};
pub use mfcc::{mel_filterbank, mel_energies, mfcc, mfcc16, mfcc40};
pub use plp::{rasta_filter, rasta_plp};
pub use sdc::{sdc, sdc_frames, SdcSpec};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("no speech frames after voice activity detection")]
    NoSpeechFrames,
    #[error("too few frames: got {got}, need at least {need}")]
    TooFewFrames { got: usize, need: usize },
    #[error("feature kind mismatch: expected {expected:?}, got {got:?}")]
    KindMismatch { expected: FeatureKind, got: FeatureKind },
    #[error("invalid feature data: {0}")]
    Invalid(String),
    #[error("archive: {0}")]
    Archive(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Analysis framing parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameConfig {
    pub window_ms: f64,
    pub hop_ms: f64,
    pub fft_size: usize,
}

impl Default for FrameConfig {
    fn default() -> Self {
        FrameConfig {
            window_ms: 25.0,
            hop_ms: 10.0,
            fft_size: 256,
        }
    }
}

impl FrameConfig {
    pub fn window_samples(&self, sample_rate: u32) -> usize {
        (self.window_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        (self.hop_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn validate(&self, sample_rate: u32) {
        let win = self.window_samples(sample_rate);
        let hop = self.hop_samples(sample_rate);
        assert!(win > 0 && hop > 0, "degenerate frame config");
        assert!(hop <= win, "hop must not exceed window");
        assert!(win <= self.fft_size, "window exceeds FFT size");
    }

    /// Number of frames for a signal of `n` samples: 1 + floor((n-w)/h),
    /// zero when the signal is shorter than one window.
    pub fn frame_count(&self, n: usize, sample_rate: u32) -> usize {
        let win = self.window_samples(sample_rate);
        let hop = self.hop_samples(sample_rate);
        if n < win {
            0
        } else {
            1 + (n - win) / hop
        }
    }
}

/// What a feature matrix holds, which pins its dimensionality.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Mfcc40,
    Plp20,
    /// 16-dimensional MFCC base (c1..c16) feeding SDC computation.
    Mfcc16,
    Mfcc16Sdc112,
}

impl FeatureKind {
    pub fn dims(self) -> usize {
        match self {
            FeatureKind::Mfcc40 => 40,
            FeatureKind::Plp20 => 20,
            FeatureKind::Mfcc16 => 16,
            FeatureKind::Mfcc16Sdc112 => 128,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            FeatureKind::Mfcc40 => 0,
            FeatureKind::Plp20 => 1,
            FeatureKind::Mfcc16 => 2,
            FeatureKind::Mfcc16Sdc112 => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(FeatureKind::Mfcc40),
            1 => Some(FeatureKind::Plp20),
            2 => Some(FeatureKind::Mfcc16),
            3 => Some(FeatureKind::Mfcc16Sdc112),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::Mfcc40 => "mfcc40",
            FeatureKind::Plp20 => "plp20",
            FeatureKind::Mfcc16 => "mfcc16",
            FeatureKind::Mfcc16Sdc112 => "mfcc16sdc112",
        }
    }
}

/// Frames x dims feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub kind: FeatureKind,
    pub frame_hop_ms: f64,
    pub frames: usize,
    pub dims: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(
        kind: FeatureKind,
        frame_hop_ms: f64,
        frames: usize,
        dims: usize,
        data: Vec<f64>,
    ) -> Result<Self, FeatureError> {
        if dims != kind.dims() {
            return Err(FeatureError::Invalid(format!(
                "kind {kind:?} requires {} dims, got {dims}",
                kind.dims()
            )));
        }
        if data.len() != frames * dims {
            return Err(FeatureError::Invalid(format!(
                "data length {} != frames {frames} x dims {dims}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::Invalid("non-finite feature value".into()));
        }
        Ok(FeatureMatrix {
            kind,
            frame_hop_ms,
            frames,
            dims,
            data,
        })
    }

    #[inline]
    pub fn row(&self, f: usize) -> &[f64] {
        &self.data[f * self.dims..(f + 1) * self.dims]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dims)
    }
}

/// Keep-frame floor in dBFS; frames below it are always rejected.
pub const VAD_FLOOR_DBFS: f64 = -55.0;
/// Default keep margin below the loudest frame.
pub const DEFAULT_VAD_MARGIN_DB: f64 = 30.0;

/// Split a signal into frames (no windowing applied).
pub(crate) fn frames_of(signal: &[f64], cfg: &FrameConfig, sample_rate: u32) -> Vec<Vec<f64>> {
    let win = cfg.window_samples(sample_rate);
    let hop = cfg.hop_samples(sample_rate);
    let n = cfg.frame_count(signal.len(), sample_rate);
    (0..n).map(|f| signal[f * hop..f * hop + win].to_vec()).collect()
}

/// Frame log-energies in dBFS.
pub(crate) fn frame_energies_db(frames: &[Vec<f64>]) -> Vec<f64> {
    frames
        .iter()
        .map(|f| {
            let p = f.iter().map(|x| x * x).sum::<f64>() / f.len() as f64;
            10.0 * (p + 1e-30).log10()
        })
        .collect()
}

/// Energy VAD mask from per-frame energies: keep a frame iff it is within
/// `margin_db` of the loudest frame and above the absolute floor.
pub(crate) fn vad_mask_from_energies(energies: &[f64], margin_db: f64) -> Vec<bool> {
    let max_e = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    energies
        .iter()
        .map(|&e| e > max_e - margin_db && e > VAD_FLOOR_DBFS)
        .collect()
}

/// Energy-based voice activity detection over analysis frames.
///
/// The mask has one entry per frame; an all-false mask is a valid result.
pub fn vad_energy(audio: &AudioBuffer, cfg: &FrameConfig, margin_db: f64) -> Vec<bool> {
    assert!(!audio.samples.is_empty(), "empty audio");
    cfg.validate(audio.sample_rate_hz);
    let signal: Vec<f64> = audio.samples.iter().map(|&x| x as f64).collect();
    let frames = frames_of(&signal, cfg, audio.sample_rate_hz);
    vad_mask_from_energies(&frame_energies_db(&frames), margin_db)
}

/// Utterance-level cepstral mean subtraction.
pub fn cms(features: &FeatureMatrix) -> FeatureMatrix {
    assert!(features.frames >= 1, "cms needs at least one frame");
    let mut means = vec![0.0f64; features.dims];
    for row in features.rows() {
        for (m, &v) in means.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut means {
        *m /= features.frames as f64;
    }
    let mut data = features.data.clone();
    for row in data.chunks_exact_mut(features.dims) {
        for (v, m) in row.iter_mut().zip(&means) {
            *v -= m;
        }
    }
    FeatureMatrix {
        data,
        ..features.clone()
    }
}

/// Segment a feature matrix into consecutive fixed-length chunks.
///
/// Chunks are `chunk_s` long (300 frames at the 10 ms hop). A trailing
/// remainder of at least half a chunk becomes its own chunk; a shorter one
/// is appended to the final chunk. Utterances shorter than one chunk are
/// emitted whole.
pub fn chunk(features: &FeatureMatrix, chunk_s: f64) -> Vec<FeatureMatrix> {
    assert!(features.frames >= 1, "chunk needs at least one frame");
    let per = ((chunk_s * 1000.0) / features.frame_hop_ms).round() as usize;
    assert!(per >= 2, "chunk length too small for hop");
    let min_rem = per / 2;
    let t = features.frames;

    let slice = |start: usize, len: usize| FeatureMatrix {
        kind: features.kind,
        frame_hop_ms: features.frame_hop_ms,
        frames: len,
        dims: features.dims,
        data: features.data[start * features.dims..(start + len) * features.dims].to_vec(),
    };

    if t <= per {
        return vec![slice(0, t)];
    }
    let n_full = t / per;
    let rem = t - n_full * per;
    let mut out = Vec::new();
    if rem == 0 {
        for c in 0..n_full {
            out.push(slice(c * per, per));
        }
    } else if rem >= min_rem {
        for c in 0..n_full {
            out.push(slice(c * per, per));
        }
        out.push(slice(n_full * per, rem));
    } else {
        for c in 0..n_full - 1 {
            out.push(slice(c * per, per));
        }
        out.push(slice((n_full - 1) * per, per + rem));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SAMPLE_RATE;

    fn tone(freq: f64, amp: f64, len: usize) -> Vec<f32> {
        (0..len)
            .map(|i| {
                (amp * (2.0 * std::f64::consts::PI * freq * i as f64 / SAMPLE_RATE as f64).sin())
                    as f32
            })
            .collect()
    }

    #[test]
    fn frame_count_law() {
        let cfg = FrameConfig::default();
        for n in [199usize, 200, 201, 280, 281, 8000, 12345] {
            let want = if n < 200 { 0 } else { 1 + (n - 200) / 80 };
            assert_eq!(cfg.frame_count(n, SAMPLE_RATE), want, "n={n}");
        }
    }

    #[test]
    fn vad_rejects_pure_silence() {
        let audio = AudioBuffer::new(vec![0.0; 8000], SAMPLE_RATE);
        let mask = vad_energy(&audio, &FrameConfig::default(), DEFAULT_VAD_MARGIN_DB);
        assert_eq!(mask.len(), FrameConfig::default().frame_count(8000, SAMPLE_RATE));
        assert!(mask.iter().all(|&m| !m));
    }

    #[test]
    fn vad_keeps_tone_rejects_silence() {
        // 0.5 s tone then 0.5 s silence: a 60 dB energy gap.
        let mut samples = tone(440.0, 0.5, 4000);
        samples.extend(vec![0.0f32; 4000]);
        let audio = AudioBuffer::new(samples, SAMPLE_RATE);
        let cfg = FrameConfig::default();
        let mask = vad_energy(&audio, &cfg, 30.0);
        // frames fully inside the tone region kept, fully in silence rejected
        let hop = cfg.hop_samples(SAMPLE_RATE);
        let win = cfg.window_samples(SAMPLE_RATE);
        for (f, &kept) in mask.iter().enumerate() {
            let start = f * hop;
            let end = start + win;
            if end <= 4000 {
                assert!(kept, "tone frame {f} rejected");
            }
            if start >= 4000 {
                assert!(!kept, "silence frame {f} kept");
            }
        }
    }

    #[test]
    fn vad_keeps_constant_tone_everywhere() {
        let audio = AudioBuffer::new(tone(300.0, 0.3, 8000), SAMPLE_RATE);
        let mask = vad_energy(&audio, &FrameConfig::default(), 30.0);
        assert!(mask.iter().all(|&m| m));
    }

    fn ramp_matrix(frames: usize, dims: usize) -> FeatureMatrix {
        let data: Vec<f64> = (0..frames * dims).map(|i| i as f64 * 0.1 - 3.0).collect();
        FeatureMatrix {
            kind: FeatureKind::Plp20,
            frame_hop_ms: 10.0,
            frames,
            dims,
            data,
        }
    }

    #[test]
    fn cms_zeroes_column_means() {
        let m = ramp_matrix(17, 20);
        let out = cms(&m);
        for d in 0..out.dims {
            let mean: f64 = out.rows().map(|r| r[d]).sum::<f64>() / out.frames as f64;
            assert!(mean.abs() < 1e-9, "dim {d} mean {mean}");
        }
    }

    #[test]
    fn cms_single_frame_is_all_zero() {
        let m = ramp_matrix(1, 20);
        let out = cms(&m);
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cms_is_idempotent() {
        let m = ramp_matrix(9, 20);
        let once = cms(&m);
        let twice = cms(&once);
        for (a, b) in once.data.iter().zip(&twice.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn chunking_examples() {
        let lens: Vec<(usize, Vec<usize>)> = vec![
            (900, vec![300, 300, 300]),
            (320, vec![320]),
            (100, vec![100]),
            (750, vec![300, 300, 150]),
            (449, vec![449]),
            (450, vec![300, 150]),
            (300, vec![300]),
            (1, vec![1]),
        ];
        for (t, want) in lens {
            let m = ramp_matrix(t, 20);
            let got: Vec<usize> = chunk(&m, 3.0).iter().map(|c| c.frames).collect();
            assert_eq!(got, want, "t={t}");
        }
    }

    #[test]
    fn chunk_concatenation_reproduces_input() {
        for t in [1usize, 17, 299, 300, 301, 449, 450, 899, 900, 1234] {
            let m = ramp_matrix(t, 20);
            let mut cat = Vec::new();
            for c in chunk(&m, 3.0) {
                cat.extend(c.data);
            }
            assert_eq!(cat, m.data, "t={t}");
        }
    }
}
