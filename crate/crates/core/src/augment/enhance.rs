//! Spectral-domain speech enhancement: spectral subtraction, log-MMSE
//! gain, and a simplified late-reverberation suppressor. All three run a
//! 256-point STFT with 75% overlap and reconstruct to the exact input
//! length.

use rand::Rng;
use rustfft::num_complex::Complex64;

use crate::corpus::AudioBuffer;
use crate::dsp::Stft;

use super::AugmentError;

const FFT: usize = 256;
const HOP: usize = 64;
/// Fraction of lowest-energy frames feeding the noise-floor estimate.
const NOISE_QUANTILE: f64 = 0.10;
/// Spectral floor as a fraction of the input power per bin.
const SPECTRAL_FLOOR: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnhanceAlgorithm {
    SpectralSubtraction,
    LogMmse,
    Dereverb,
}

impl EnhanceAlgorithm {
    pub const ALL: [EnhanceAlgorithm; 3] = [
        EnhanceAlgorithm::SpectralSubtraction,
        EnhanceAlgorithm::LogMmse,
        EnhanceAlgorithm::Dereverb,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EnhanceAlgorithm::SpectralSubtraction => "spectral_subtraction",
            EnhanceAlgorithm::LogMmse => "log_mmse",
            EnhanceAlgorithm::Dereverb => "dereverb",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnhanceSpec {
    pub algorithm: EnhanceAlgorithm,
}

impl EnhanceSpec {
    pub fn sample(rng: &mut impl Rng) -> Self {
        EnhanceSpec {
            algorithm: EnhanceAlgorithm::ALL[rng.gen_range(0..3)],
        }
    }
}

/// Apply one enhancement algorithm. Output length equals input length.
pub fn enhance(speech: &AudioBuffer, spec: &EnhanceSpec) -> Result<AudioBuffer, AugmentError> {
    if speech.samples.len() < FFT {
        return Err(AugmentError::TooShort {
            got: speech.samples.len(),
            need: FFT,
        });
    }
    let signal: Vec<f64> = speech.samples.iter().map(|&x| x as f64).collect();
    let stft = Stft::new(FFT, HOP);
    let mut frames = stft.analyze(&signal);
    let power: Vec<Vec<f64>> = frames
        .iter()
        .map(|f| f.iter().map(|c| c.norm_sqr()).collect())
        .collect();

    let gains: Vec<Vec<f64>> = match spec.algorithm {
        EnhanceAlgorithm::SpectralSubtraction => spectral_subtraction_gains(&power),
        EnhanceAlgorithm::LogMmse => log_mmse_gains(&power),
        EnhanceAlgorithm::Dereverb => dereverb_gains(&power),
    };
    for (frame, g) in frames.iter_mut().zip(&gains) {
        for (c, &gain) in frame.iter_mut().zip(g) {
            *c *= Complex64::new(gain, 0.0);
        }
    }
    let out = stft.synthesize(&frames, signal.len());
    Ok(AudioBuffer::new(
        out.into_iter().map(|x| x as f32) .collect(),
        speech.sample_rate_hz,
    ))
}

/// Per-bin mean power over the lowest-energy frames.
fn quantile_noise_psd(power: &[Vec<f64>]) -> Vec<f64> {
    let energies: Vec<f64> = power.iter().map(|p| p.iter().sum()).collect();
    let mut order: Vec<usize> = (0..power.len()).collect();
    order.sort_by(|&a, &b| energies[a].partial_cmp(&energies[b]).unwrap());
    let take = ((power.len() as f64 * NOISE_QUANTILE).ceil() as usize).max(1);
    let n_bins = power[0].len();
    let mut psd = vec![0.0; n_bins];
    for &t in &order[..take] {
        for (acc, &p) in psd.iter_mut().zip(&power[t]) {
            *acc += p;
        }
    }
    for v in &mut psd {
        *v /= take as f64;
    }
    psd
}

/// Power-domain over-subtraction of the quantile noise floor with a
/// spectral floor.
fn spectral_subtraction_gains(power: &[Vec<f64>]) -> Vec<Vec<f64>> {
    const OVERSUBTRACT: f64 = 2.0;
    let noise = quantile_noise_psd(power);
    power
        .iter()
        .map(|p| {
            p.iter()
                .zip(&noise)
                .map(|(&px, &nx)| {
                    let cleaned = (px - OVERSUBTRACT * nx).max(SPECTRAL_FLOOR * px);
                    if px > 0.0 {
                        (cleaned / px).sqrt()
                    } else {
                        1.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Exponential integral E1 via series (small v) or continued fraction.
fn expint_e1(v: f64) -> f64 {
    const EULER: f64 = 0.577_215_664_901_532_9;
    let v = v.max(1e-12);
    if v <= 1.0 {
        let mut sum = -EULER - v.ln();
        let mut term = 1.0;
        for k in 1..=30 {
            term *= -v / k as f64;
            sum -= term / k as f64;
        }
        sum
    } else {
        // Lentz continued fraction for E1
        let mut b = v + 1.0;
        let mut c = 1e300;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..=60 {
            let a = -(i as f64) * (i as f64);
            b += 2.0;
            d = 1.0 / (a * d + b);
            c = b + a / c;
            let del = c * d;
            h *= del;
            if (del - 1.0).abs() < 1e-14 {
                break;
            }
        }
        h * (-v).exp()
    }
}

/// Log-spectral MMSE gain with a decision-directed a priori SNR and a
/// running noise-power estimate.
fn log_mmse_gains(power: &[Vec<f64>]) -> Vec<Vec<f64>> {
    const ALPHA_DD: f64 = 0.98;
    const XI_MIN: f64 = 0.003_162_277_660_168_379_5; // -25 dB
    const NOISE_SMOOTH: f64 = 0.95;
    let n_bins = power[0].len();
    let mut noise = quantile_noise_psd(power);
    let mut prev_amp2 = noise.clone();
    let mut gains = Vec::with_capacity(power.len());
    for p in power {
        let mut g_row = Vec::with_capacity(n_bins);
        for b in 0..n_bins {
            let lambda = noise[b].max(1e-12);
            let gamma = (p[b] / lambda).min(1e6);
            // update the noise track in noise-dominated bins
            if gamma < 2.5 {
                noise[b] = NOISE_SMOOTH * noise[b] + (1.0 - NOISE_SMOOTH) * p[b];
            }
            let xi = (ALPHA_DD * prev_amp2[b] / lambda
                + (1.0 - ALPHA_DD) * (gamma - 1.0).max(0.0))
            .max(XI_MIN);
            let v = xi / (1.0 + xi) * gamma;
            let gain = (xi / (1.0 + xi) * (0.5 * expint_e1(v)).exp())
                .clamp(SPECTRAL_FLOOR.sqrt(), 1.0);
            prev_amp2[b] = gain * gain * p[b];
            g_row.push(gain);
        }
        gains.push(g_row);
    }
    gains
}

/// Late-reverberation suppression: a delayed, exponentially smoothed power
/// estimate is subtracted from each frame.
fn dereverb_gains(power: &[Vec<f64>]) -> Vec<Vec<f64>> {
    // 50 ms delay at the 8 ms hop; T60 = 0.3 s decay per hop
    const DELAY_FRAMES: usize = 6;
    const REVERB_SCALE: f64 = 0.4;
    let hop_s = HOP as f64 / 8000.0;
    let decay = 10f64.powf(-3.0 * hop_s / 0.3);
    let n_bins = power[0].len();
    let mut late = vec![0.0f64; n_bins];
    let mut gains = Vec::with_capacity(power.len());
    for (t, p) in power.iter().enumerate() {
        let g_row: Vec<f64> = (0..n_bins)
            .map(|b| {
                let cleaned = (p[b] - REVERB_SCALE * late[b]).max(SPECTRAL_FLOOR * p[b]);
                if p[b] > 0.0 {
                    (cleaned / p[b]).sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        if t + 1 >= DELAY_FRAMES {
            let src = &power[t + 1 - DELAY_FRAMES];
            for (l, &px) in late.iter_mut().zip(src) {
                *l = decay * *l + (1.0 - decay) * px;
            }
        }
        gains.push(g_row);
    }
    gains
}
