//! MFCC extraction: per-frame pre-emphasis, Hamming window, magnitude
//! spectrum, triangular mel filterbank over 0-4000 Hz, log, DCT-II.

use crate::corpus::AudioBuffer;
use crate::dsp;

use super::{
    frame_energies_db, frames_of, vad_mask_from_energies, FeatureError, FeatureKind,
    FeatureMatrix, FrameConfig, DEFAULT_VAD_MARGIN_DB,
};

const PRE_EMPHASIS: f64 = 0.97;
const LOG_FLOOR: f64 = 1e-10;

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Dense triangular mel filterbank: `n_mels` rows of `fft_size/2 + 1`
/// weights. Triangles are evaluated at bin center frequencies.
pub fn mel_filterbank(
    n_mels: usize,
    fft_size: usize,
    sample_rate: u32,
    fmin_hz: f64,
    fmax_hz: f64,
) -> Vec<Vec<f64>> {
    let n_bins = fft_size / 2 + 1;
    let mel_lo = hz_to_mel(fmin_hz);
    let mel_hi = hz_to_mel(fmax_hz);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / fft_size as f64;
    (0..n_mels)
        .map(|m| {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    let rising = (f - left) / (center - left);
                    let falling = (right - f) / (right - center);
                    rising.min(falling).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Apply a filterbank to the magnitude spectrum of one windowed frame.
pub fn mel_energies(windowed_frame: &[f64], filters: &[Vec<f64>], fft_size: usize) -> Vec<f64> {
    let spectrum = dsp::magnitude_spectrum(windowed_frame, fft_size);
    filters
        .iter()
        .map(|w| w.iter().zip(&spectrum).map(|(a, b)| a * b).sum())
        .collect()
}

/// Orthonormal DCT-II of `input`, keeping `n_out` coefficients.
fn dct2(input: &[f64], n_out: usize) -> Vec<f64> {
    let n = input.len() as f64;
    (0..n_out)
        .map(|k| {
            let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            scale
                * input
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| {
                        x * (std::f64::consts::PI * k as f64 * (i as f64 + 0.5) / n).cos()
                    })
                    .sum::<f64>()
        })
        .collect()
}

fn preemphasize_frame(frame: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(frame.len());
    let mut prev = frame[0]; // edge replication
    for &x in frame {
        out.push(x - PRE_EMPHASIS * prev);
        prev = x;
    }
    out
}

struct CepstraSelect {
    n_ceps: usize,
    drop_c0: bool,
    kind: FeatureKind,
}

fn mfcc_impl(
    audio: &AudioBuffer,
    cfg: &FrameConfig,
    n_mels: usize,
    select: CepstraSelect,
) -> Result<FeatureMatrix, FeatureError> {
    assert!(!audio.samples.is_empty(), "empty audio");
    cfg.validate(audio.sample_rate_hz);
    assert!(select.n_ceps <= n_mels, "n_ceps must not exceed n_mels");
    let signal: Vec<f64> = audio.samples.iter().map(|&x| x as f64).collect();
    let raw_frames = frames_of(&signal, cfg, audio.sample_rate_hz);
    if raw_frames.is_empty() {
        return Err(FeatureError::NoSpeechFrames);
    }
    let pre: Vec<Vec<f64>> = raw_frames.iter().map(|f| preemphasize_frame(f)).collect();
    // VAD over pre-emphasized frames: flat (DC-like) content carries no
    // energy after the high-pass and drops below the floor.
    let mask = vad_mask_from_energies(&frame_energies_db(&pre), DEFAULT_VAD_MARGIN_DB);
    let window = dsp::hamming(cfg.window_samples(audio.sample_rate_hz));
    let filters = mel_filterbank(n_mels, cfg.fft_size, audio.sample_rate_hz, 0.0, 4000.0);

    let n_keep_ceps = if select.drop_c0 { select.n_ceps + 1 } else { select.n_ceps };
    let mut rows: Vec<f64> = Vec::new();
    let mut kept = 0usize;
    for (frame, &keep) in pre.iter().zip(&mask) {
        if !keep {
            continue;
        }
        let windowed: Vec<f64> = frame.iter().zip(&window).map(|(x, w)| x * w).collect();
        let energies = mel_energies(&windowed, &filters, cfg.fft_size);
        let logs: Vec<f64> = energies.iter().map(|&e| (e + LOG_FLOOR).ln()).collect();
        let ceps = dct2(&logs, n_keep_ceps);
        let start = usize::from(select.drop_c0);
        rows.extend_from_slice(&ceps[start..]);
        kept += 1;
    }
    if kept == 0 {
        return Err(FeatureError::NoSpeechFrames);
    }
    FeatureMatrix::new(select.kind, cfg.hop_ms, kept, select.n_ceps, rows)
}

/// MFCC features with `n_ceps` coefficients (c0 included) from `n_mels`
/// filters. The (40, 40) configuration is the classifier front-end.
pub fn mfcc(
    audio: &AudioBuffer,
    cfg: &FrameConfig,
    n_mels: usize,
    n_ceps: usize,
) -> Result<FeatureMatrix, FeatureError> {
    let kind = match n_ceps {
        40 => FeatureKind::Mfcc40,
        other => {
            return Err(FeatureError::Invalid(format!(
                "unsupported MFCC dimensionality {other} (use mfcc40/mfcc16)"
            )))
        }
    };
    mfcc_impl(
        audio,
        cfg,
        n_mels,
        CepstraSelect {
            n_ceps,
            drop_c0: false,
            kind,
        },
    )
}

/// 40-dimensional MFCC (c0..c39) from 40 mel filters.
pub fn mfcc40(audio: &AudioBuffer, cfg: &FrameConfig) -> Result<FeatureMatrix, FeatureError> {
    mfcc(audio, cfg, 40, 40)
}

/// 16-dimensional MFCC base (c1..c16, energy excluded) for SDC stacking.
pub fn mfcc16(audio: &AudioBuffer, cfg: &FrameConfig) -> Result<FeatureMatrix, FeatureError> {
    mfcc_impl(
        audio,
        cfg,
        40,
        CepstraSelect {
            n_ceps: 16,
            drop_c0: true,
            kind: FeatureKind::Mfcc16,
        },
    )
}
