//! Training-audio augmentation: additive non-speech mixing and room impulse
//! responses, signal perturbation (volume, pitch, speed), and spectral
//! speech enhancement.
//!
//! All transforms are pure functions of (input, spec); randomness only
//! enters through explicit spec sampling, so a fixed seed reproduces
//! augmented audio bit for bit.

mod enhance;

use rand::Rng;
use thiserror::Error;

use crate::corpus::{AudioBuffer, AugmentCategory};
use crate::dsp;

pub use enhance::{enhance, EnhanceAlgorithm, EnhanceSpec};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("silent noise source")]
    SilentNoise,
    #[error("silent speech input (SNR undefined)")]
    SilentSpeech,
    #[error("empty room impulse response")]
    EmptyRir,
    #[error("{what} {value} outside [{lo}, {hi}]")]
    OutOfRange {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("input too short: {got} samples, need at least {need}")]
    TooShort { got: usize, need: usize },
    #[error("no {0} sources available")]
    NoSources(&'static str),
}

/// Kind of non-speech material mixed in by the additive category.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    Noise,
    Babble,
    Music,
    Rir,
}

/// One additive-category draw. `snr_db` is ignored for the RIR kind.
#[derive(Debug, Clone, Copy)]
pub struct AdditiveSpec {
    pub kind: NoiseKind,
    pub snr_db: f64,
    pub source_index: usize,
}

/// One signal-perturbation draw: all three knobs applied together.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignalPerturbSpec {
    pub gain_db: f64,
    pub pitch_semitones: f64,
    pub speed_gamma: f64,
}

pub const GAIN_RANGE_DB: (f64, f64) = (-30.0, 40.0);
pub const PITCH_RANGE_SEMITONES: (f64, f64) = (-4.0, 4.0);
pub const SPEED_RANGE_PERCENT: (f64, f64) = (-15.0, 15.0);

impl SignalPerturbSpec {
    pub fn sample(rng: &mut impl Rng) -> Self {
        SignalPerturbSpec {
            gain_db: rng.gen_range(GAIN_RANGE_DB.0..=GAIN_RANGE_DB.1),
            pitch_semitones: rng.gen_range(PITCH_RANGE_SEMITONES.0..=PITCH_RANGE_SEMITONES.1),
            speed_gamma: rng.gen_range(SPEED_RANGE_PERCENT.0..=SPEED_RANGE_PERCENT.1),
        }
    }
}

/// Additive mix outcome; `limiter_scale` < 1 when the sum was rescaled to
/// keep peaks within full scale.
#[derive(Debug, Clone)]
pub struct Mixed {
    pub audio: AudioBuffer,
    pub limiter_scale: f64,
}

/// Volume perturbation outcome with a clip flag from the peak limiter.
#[derive(Debug, Clone)]
pub struct Amplified {
    pub audio: AudioBuffer,
    pub clipped: bool,
}

fn power(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().map(|&x| x * x).sum::<f64>() / samples.len() as f64
}

fn to_f64(audio: &AudioBuffer) -> Vec<f64> {
    audio.samples.iter().map(|&x| x as f64).collect()
}

fn to_audio(samples: Vec<f64>, rate: u32) -> AudioBuffer {
    AudioBuffer::new(samples.into_iter().map(|x| x as f32).collect(), rate)
}

/// Mix noise into speech at the requested SNR. The noise is looped or
/// truncated to the speech length, the gain is exact
/// (`g = sqrt(P_speech / (P_noise * 10^(snr/10)))`), and the sum is
/// rescaled only if it would clip.
pub fn mix_additive(
    speech: &AudioBuffer,
    noise: &AudioBuffer,
    snr_db: f64,
) -> Result<Mixed, AugmentError> {
    let s = to_f64(speech);
    let p_speech = power(&s);
    if p_speech <= 0.0 {
        return Err(AugmentError::SilentSpeech);
    }
    if noise.samples.is_empty() {
        return Err(AugmentError::SilentNoise);
    }
    let tiled: Vec<f64> = (0..s.len())
        .map(|i| noise.samples[i % noise.samples.len()] as f64)
        .collect();
    let p_noise = power(&tiled);
    if p_noise <= 0.0 {
        return Err(AugmentError::SilentNoise);
    }
    let gain = (p_speech / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let mut out: Vec<f64> = s.iter().zip(&tiled).map(|(a, b)| a + gain * b).collect();
    let peak = out.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    let limiter_scale = if peak > 1.0 { 1.0 / peak } else { 1.0 };
    if limiter_scale < 1.0 {
        for v in &mut out {
            *v *= limiter_scale;
        }
    }
    Ok(Mixed {
        audio: to_audio(out, speech.sample_rate_hz),
        limiter_scale,
    })
}

/// Convolve speech with a room impulse response; the result is truncated to
/// the speech length and renormalized to the input power.
pub fn convolve_rir(speech: &AudioBuffer, rir: &AudioBuffer) -> Result<AudioBuffer, AugmentError> {
    if rir.samples.is_empty() {
        return Err(AugmentError::EmptyRir);
    }
    let s = to_f64(speech);
    let h = to_f64(rir);
    let mut out = dsp::convolve(&s, &h);
    out.truncate(s.len());
    let p_in = power(&s);
    let p_out = power(&out);
    if p_out > 0.0 && p_in > 0.0 {
        let scale = (p_in / p_out).sqrt();
        for v in &mut out {
            *v *= scale;
        }
    }
    Ok(to_audio(out, speech.sample_rate_hz))
}

/// Scale by `10^(gain_db/20)` and peak-limit to [-1, 1].
pub fn perturb_volume(speech: &AudioBuffer, gain_db: f64) -> Result<Amplified, AugmentError> {
    check_range("gain_db", gain_db, GAIN_RANGE_DB)?;
    let scale = 10f64.powf(gain_db / 20.0);
    let mut clipped = false;
    let samples: Vec<f32> = speech
        .samples
        .iter()
        .map(|&x| {
            let y = x as f64 * scale;
            if y.abs() > 1.0 {
                clipped = true;
            }
            y.clamp(-1.0, 1.0) as f32
        })
        .collect();
    Ok(Amplified {
        audio: AudioBuffer::new(samples, speech.sample_rate_hz),
        clipped,
    })
}

/// Pitch shift by `semitones` without changing the length (phase-vocoder
/// time stretch followed by resampling).
pub fn perturb_pitch(speech: &AudioBuffer, semitones: f64) -> Result<AudioBuffer, AugmentError> {
    check_range("pitch_semitones", semitones, PITCH_RANGE_SEMITONES)?;
    Ok(pitch_shift_unchecked(speech, semitones))
}

/// Pitch shift without the range check; test harnesses use this to verify
/// the frequency-scaling contract with large shifts.
pub fn pitch_shift_unchecked(speech: &AudioBuffer, semitones: f64) -> AudioBuffer {
    let factor = 2f64.powf(semitones / 12.0);
    let n = speech.samples.len();
    let signal = to_f64(speech);
    let stretched_len = (n as f64 * factor).round().max(1.0) as usize;
    let stretched = phase_vocoder_stretch(&signal, stretched_len);
    let step = stretched.len() as f64 / n as f64;
    let out = dsp::resample_to_len(&stretched, n, step);
    to_audio(out, speech.sample_rate_hz)
}

/// Phase-vocoder time stretch of `signal` to `out_len` samples, preserving
/// pitch. Magnitudes are linearly interpolated between analysis frames and
/// phases advanced by the estimated instantaneous frequency per bin.
fn phase_vocoder_stretch(signal: &[f64], out_len: usize) -> Vec<f64> {
    const FFT: usize = 256;
    const HOP: usize = 64;
    use rustfft::num_complex::Complex64;

    if out_len == signal.len() {
        // identity stretch: plain analysis/synthesis round trip
        let stft = dsp::Stft::new(FFT, HOP);
        let frames = stft.analyze(signal);
        return stft.synthesize(&frames, out_len);
    }

    let stft = dsp::Stft::new(FFT, HOP);
    let analysis = stft.analyze(signal);
    let m = analysis.len();
    let rho = out_len as f64 / signal.len() as f64;
    let pad = FFT / 2;
    let k_frames = (out_len + pad) / HOP + 1;
    let n_bins = FFT / 2 + 1;

    let mut out_frames: Vec<Vec<Complex64>> = Vec::with_capacity(k_frames);
    let mut phase: Vec<f64> = analysis[0].iter().map(|c| c.arg()).collect();
    let two_pi = 2.0 * std::f64::consts::PI;

    for k in 0..k_frames {
        let pos = (k as f64 / rho).min((m - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(m - 1);
        let frac = pos - i0 as f64;
        let mut frame = Vec::with_capacity(n_bins);
        for b in 0..n_bins {
            let mag = analysis[i0][b].norm() * (1.0 - frac) + analysis[i1][b].norm() * frac;
            frame.push(Complex64::from_polar(mag, phase[b]));
        }
        out_frames.push(frame);
        // advance synthesis phases by the instantaneous frequency measured
        // between the bracketing analysis frames
        let (p0, p1) = (i0, (i0 + 1).min(m - 1));
        for b in 0..n_bins {
            let omega = two_pi * b as f64 / FFT as f64;
            let expected = omega * HOP as f64;
            let dphi = if p1 > p0 {
                let d = analysis[p1][b].arg() - analysis[p0][b].arg() - expected;
                let wrapped = d - two_pi * (d / two_pi).round();
                expected + wrapped
            } else {
                expected
            };
            phase[b] += dphi;
        }
    }
    stft.synthesize(&out_frames, out_len)
}

/// Change playback speed by `gamma_percent`: positive speeds up (shorter
/// output), negative slows down. Output length is `round(n / (1 + g/100))`.
pub fn perturb_speed(speech: &AudioBuffer, gamma_percent: f64) -> Result<AudioBuffer, AugmentError> {
    check_range("speed_gamma", gamma_percent, SPEED_RANGE_PERCENT)?;
    let factor = 1.0 + gamma_percent / 100.0;
    let n = speech.samples.len();
    let out_len = (n as f64 / factor).round().max(1.0) as usize;
    let signal = to_f64(speech);
    let out = dsp::resample_to_len(&signal, out_len, factor);
    Ok(to_audio(out, speech.sample_rate_hz))
}

fn check_range(what: &'static str, value: f64, (lo, hi): (f64, f64)) -> Result<(), AugmentError> {
    if !(lo..=hi).contains(&value) || !value.is_finite() {
        return Err(AugmentError::OutOfRange { what, value, lo, hi });
    }
    Ok(())
}

/// Pools of non-speech material for the additive category.
pub struct AugmentSources {
    pub noises: Vec<AudioBuffer>,
    pub babbles: Vec<AudioBuffer>,
    pub musics: Vec<AudioBuffer>,
    pub rirs: Vec<AudioBuffer>,
}

impl AugmentSources {
    fn additive_kinds(&self) -> Vec<NoiseKind> {
        let mut kinds = Vec::new();
        if !self.noises.is_empty() {
            kinds.push(NoiseKind::Noise);
        }
        if !self.babbles.is_empty() {
            kinds.push(NoiseKind::Babble);
        }
        if !self.musics.is_empty() {
            kinds.push(NoiseKind::Music);
        }
        if !self.rirs.is_empty() {
            kinds.push(NoiseKind::Rir);
        }
        kinds
    }
}

/// Default SNR sampling ranges per additive kind, in dB.
pub fn snr_range(kind: NoiseKind) -> (f64, f64) {
    match kind {
        NoiseKind::Noise | NoiseKind::Music => (0.0, 15.0),
        NoiseKind::Babble => (13.0, 20.0),
        NoiseKind::Rir => (0.0, 0.0),
    }
}

/// Draw an additive spec across the available source kinds.
pub fn sample_additive_spec(
    sources: &AugmentSources,
    rng: &mut impl Rng,
) -> Result<AdditiveSpec, AugmentError> {
    let kinds = sources.additive_kinds();
    if kinds.is_empty() {
        return Err(AugmentError::NoSources("additive"));
    }
    let kind = kinds[rng.gen_range(0..kinds.len())];
    let pool_len = match kind {
        NoiseKind::Noise => sources.noises.len(),
        NoiseKind::Babble => sources.babbles.len(),
        NoiseKind::Music => sources.musics.len(),
        NoiseKind::Rir => sources.rirs.len(),
    };
    let (lo, hi) = snr_range(kind);
    Ok(AdditiveSpec {
        kind,
        snr_db: if lo < hi { rng.gen_range(lo..=hi) } else { lo },
        source_index: rng.gen_range(0..pool_len),
    })
}

/// Apply one augmentation of `category` to `speech`, drawing the spec from
/// `rng`. This is the per-utterance unit the corpus-level driver maps over.
pub fn augment_utterance(
    speech: &AudioBuffer,
    category: AugmentCategory,
    sources: &AugmentSources,
    rng: &mut impl Rng,
) -> Result<AudioBuffer, AugmentError> {
    match category {
        AugmentCategory::Additive => {
            let spec = sample_additive_spec(sources, rng)?;
            match spec.kind {
                NoiseKind::Rir => convolve_rir(speech, &sources.rirs[spec.source_index]),
                NoiseKind::Noise => {
                    Ok(mix_additive(speech, &sources.noises[spec.source_index], spec.snr_db)?.audio)
                }
                NoiseKind::Babble => {
                    Ok(mix_additive(speech, &sources.babbles[spec.source_index], spec.snr_db)?.audio)
                }
                NoiseKind::Music => {
                    Ok(mix_additive(speech, &sources.musics[spec.source_index], spec.snr_db)?.audio)
                }
            }
        }
        AugmentCategory::Signal => {
            let spec = SignalPerturbSpec::sample(rng);
            let amplified = perturb_volume(speech, spec.gain_db)?;
            let sped = perturb_speed(&amplified.audio, spec.speed_gamma)?;
            perturb_pitch(&sped, spec.pitch_semitones)
        }
        AugmentCategory::Enhance => {
            let spec = EnhanceSpec::sample(rng);
            enhance(speech, &spec)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SAMPLE_RATE;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tone(freq: f64, amp: f64, len: usize) -> AudioBuffer {
        AudioBuffer::new(
            (0..len)
                .map(|i| {
                    (amp * (2.0 * std::f64::consts::PI * freq * i as f64 / SAMPLE_RATE as f64)
                        .sin()) as f32
                })
                .collect(),
            SAMPLE_RATE,
        )
    }

    fn white(amp: f32, len: usize, seed: u64) -> AudioBuffer {
        use rand::RngCore;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioBuffer::new(
            (0..len)
                .map(|_| (rng.next_u32() as f32 / u32::MAX as f32 * 2.0 - 1.0) * amp)
                .collect(),
            SAMPLE_RATE,
        )
    }

    fn measured_snr_db(speech: &AudioBuffer, mixed: &[f32], scale: f64) -> f64 {
        // noise component = mixed/scale - speech
        let p_s: f64 = speech.samples.iter().map(|&x| (x as f64).powi(2)).sum();
        let p_n: f64 = mixed
            .iter()
            .zip(&speech.samples)
            .map(|(&m, &s)| {
                let n = m as f64 / scale - s as f64;
                n * n
            })
            .sum();
        10.0 * (p_s / p_n).log10()
    }

    #[test]
    fn equal_power_zero_snr_gain_is_one() {
        let speech = tone(440.0, 0.2, 8000);
        let noise = white(0.2, 8000, 1);
        // scale noise to exactly the speech power first
        let ps = speech.power();
        let pn = noise.power();
        let noise = AudioBuffer::new(
            noise.samples.iter().map(|&x| x * (ps / pn).sqrt() as f32).collect(),
            SAMPLE_RATE,
        );
        let mixed = mix_additive(&speech, &noise, 0.0).unwrap();
        // g == 1: mixed - speech == noise
        for ((m, s), n) in mixed
            .audio
            .samples
            .iter()
            .zip(&speech.samples)
            .zip(&noise.samples)
        {
            assert!((m / mixed.limiter_scale as f32 - s - n).abs() < 1e-5);
        }
    }

    #[test]
    fn ten_db_snr_gain_is_ten_to_the_minus_half() {
        let speech = tone(440.0, 0.2, 8000);
        let ps = speech.power();
        let noise = white(0.2, 8000, 2);
        let pn = noise.power();
        let noise = AudioBuffer::new(
            noise.samples.iter().map(|&x| x * (ps / pn).sqrt() as f32).collect(),
            SAMPLE_RATE,
        );
        let mixed = mix_additive(&speech, &noise, 10.0).unwrap();
        let g = 10f64.powf(-0.5);
        for ((m, s), n) in mixed
            .audio
            .samples
            .iter()
            .zip(&speech.samples)
            .zip(&noise.samples)
        {
            let want = *s as f64 + g * *n as f64;
            assert!((*m as f64 / mixed.limiter_scale - want).abs() < 1e-5);
        }
    }

    #[test]
    fn requested_snr_is_achieved_within_tenth_db() {
        let speech = white(0.3, 16000, 3);
        let noise = white(0.5, 7777, 4); // deliberately mismatched length
        for snr in [-5.0, 0.0, 7.5, 15.0, 20.0] {
            let mixed = mix_additive(&speech, &noise, snr).unwrap();
            let got = measured_snr_db(&speech, &mixed.audio.samples, mixed.limiter_scale);
            assert!((got - snr).abs() < 0.1, "snr {snr}: measured {got}");
        }
    }

    #[test]
    fn silent_noise_is_an_error() {
        let speech = tone(440.0, 0.2, 8000);
        let silence = AudioBuffer::new(vec![0.0; 2000], SAMPLE_RATE);
        assert!(matches!(
            mix_additive(&speech, &silence, 10.0),
            Err(AugmentError::SilentNoise)
        ));
    }

    #[test]
    fn silent_speech_is_an_error() {
        let silence = AudioBuffer::new(vec![0.0; 2000], SAMPLE_RATE);
        let noise = white(0.5, 2000, 5);
        assert!(matches!(
            mix_additive(&silence, &noise, 10.0),
            Err(AugmentError::SilentSpeech)
        ));
    }

    #[test]
    fn rir_unit_impulse_is_identity() {
        let speech = tone(300.0, 0.4, 4000);
        let rir = AudioBuffer::new(vec![1.0], SAMPLE_RATE);
        let out = convolve_rir(&speech, &rir).unwrap();
        for (a, b) in out.samples.iter().zip(&speech.samples) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn rir_delayed_impulse_shifts_the_signal() {
        let speech = white(0.4, 4000, 6);
        let mut taps = vec![0.0f32; 81];
        taps[80] = 1.0;
        let rir = AudioBuffer::new(taps, SAMPLE_RATE);
        let out = convolve_rir(&speech, &rir).unwrap();
        // power renorm: shifted-out tail makes the scale slightly > 1
        let p_in: f64 = speech.power();
        let p_shift: f64 = speech.samples[..4000 - 80]
            .iter()
            .map(|&x| (x as f64).powi(2))
            .sum::<f64>()
            / 4000.0;
        let scale = (p_in / p_shift).sqrt();
        for i in 80..4000 {
            let want = speech.samples[i - 80] as f64 * scale;
            assert!(
                (out.samples[i] as f64 - want).abs() < 1e-5,
                "i={i}: {} vs {want}",
                out.samples[i]
            );
        }
        for i in 0..80 {
            assert!(out.samples[i].abs() < 1e-6);
        }
    }

    #[test]
    fn rir_two_tap_smear_by_hand() {
        // impulse input convolved with [0.5, 0.5]: two-tap smear, then
        // power renormalization back to the input power (scale sqrt(2))
        let mut samples = vec![0.0f32; 100];
        samples[10] = 1.0;
        let speech = AudioBuffer::new(samples, SAMPLE_RATE);
        let rir = AudioBuffer::new(vec![0.5, 0.5], SAMPLE_RATE);
        let out = convolve_rir(&speech, &rir).unwrap();
        let want = 0.5 * 2f64.sqrt();
        assert!((out.samples[10] as f64 - want).abs() < 1e-6);
        assert!((out.samples[11] as f64 - want).abs() < 1e-6);
        for (i, &s) in out.samples.iter().enumerate() {
            if i != 10 && i != 11 {
                assert!(s.abs() < 1e-6, "i={i}");
            }
        }
    }

    #[test]
    fn volume_zero_db_is_identity() {
        let speech = tone(500.0, 0.3, 2000);
        let out = perturb_volume(&speech, 0.0).unwrap();
        assert!(!out.clipped);
        assert_eq!(out.audio.samples, speech.samples);
    }

    #[test]
    fn volume_plus_twenty_db_scales_by_ten() {
        let speech = tone(500.0, 0.05, 2000);
        let out = perturb_volume(&speech, 20.0).unwrap();
        assert!(!out.clipped);
        let peak = out.audio.samples.iter().fold(0.0f32, |m, &x| m.max(x.abs()));
        assert!((peak - 0.5).abs() < 1e-3, "peak {peak}");
    }

    #[test]
    fn volume_overdrive_sets_clip_flag() {
        let speech = tone(500.0, 0.5, 2000);
        let out = perturb_volume(&speech, 40.0).unwrap();
        assert!(out.clipped);
        let peak = out.audio.samples.iter().fold(0.0f32, |m, &x| m.max(x.abs()));
        assert!(peak <= 1.0);
    }

    #[test]
    fn volume_out_of_range_is_rejected() {
        let speech = tone(500.0, 0.5, 2000);
        assert!(matches!(
            perturb_volume(&speech, 41.0),
            Err(AugmentError::OutOfRange { .. })
        ));
    }

    #[test]
    fn pitch_zero_semitones_is_near_identity() {
        let speech = tone(500.0, 0.4, 8000);
        let out = perturb_pitch(&speech, 0.0).unwrap();
        assert_eq!(out.samples.len(), speech.samples.len());
        let max_err = out
            .samples
            .iter()
            .zip(&speech.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err <= 1e-3, "max err {max_err}");
    }

    fn dominant_frequency(samples: &[f32]) -> f64 {
        let n = samples.len().next_power_of_two() * 2;
        let mut buf = vec![rustfft::num_complex::Complex64::new(0.0, 0.0); n];
        for (b, &s) in buf.iter_mut().zip(samples) {
            b.re = s as f64;
        }
        let spec = dsp::fft_forward(&buf);
        let peak = (1..n / 2)
            .max_by(|&a, &b| spec[a].norm().partial_cmp(&spec[b].norm()).unwrap())
            .unwrap();
        peak as f64 * SAMPLE_RATE as f64 / n as f64
    }

    #[test]
    fn pitch_octave_up_doubles_the_peak() {
        // +12 semitones exceeds the production range; the unchecked path
        // exists exactly for this oracle
        let speech = tone(500.0, 0.4, 8000);
        let out = pitch_shift_unchecked(&speech, 12.0);
        assert_eq!(out.samples.len(), 8000);
        let f = dominant_frequency(&out.samples);
        assert!((f - 1000.0).abs() <= 20.0, "peak at {f} Hz");
    }

    #[test]
    fn pitch_shift_preserves_length_exactly() {
        let speech = white(0.2, 12345, 7);
        for st in [-4.0, -1.5, 0.7, 3.2, 4.0] {
            let out = perturb_pitch(&speech, st).unwrap();
            assert_eq!(out.samples.len(), speech.samples.len(), "st={st}");
        }
    }

    #[test]
    fn speed_identity_and_length_formula() {
        let speech = white(0.2, 8000, 8);
        let same = perturb_speed(&speech, 0.0).unwrap();
        assert_eq!(same.samples.len(), 8000);
        let fast = perturb_speed(&speech, 15.0).unwrap();
        assert_eq!(fast.samples.len(), 6957);
        let slow = perturb_speed(&speech, -15.0).unwrap();
        assert_eq!(slow.samples.len(), 9412);
    }

    #[test]
    fn speed_out_of_range_is_rejected() {
        let speech = white(0.2, 800, 9);
        assert!(perturb_speed(&speech, 15.5).is_err());
        assert!(perturb_speed(&speech, -16.0).is_err());
    }

    #[test]
    fn spec_sampling_respects_closed_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..100_000 {
            let s = SignalPerturbSpec::sample(&mut rng);
            assert!((GAIN_RANGE_DB.0..=GAIN_RANGE_DB.1).contains(&s.gain_db));
            assert!(
                (PITCH_RANGE_SEMITONES.0..=PITCH_RANGE_SEMITONES.1).contains(&s.pitch_semitones)
            );
            assert!((SPEED_RANGE_PERCENT.0..=SPEED_RANGE_PERCENT.1).contains(&s.speed_gamma));
        }
    }

    #[test]
    fn augmentation_is_deterministic_for_a_seed() {
        let speech = tone(450.0, 0.35, 8000);
        let sources = AugmentSources {
            noises: vec![white(0.4, 3000, 11)],
            babbles: vec![],
            musics: vec![white(0.3, 5000, 12)],
            rirs: vec![AudioBuffer::new(vec![1.0, 0.4, 0.1], SAMPLE_RATE)],
        };
        for category in AugmentCategory::ALL {
            let a = augment_utterance(&speech, category, &sources, &mut ChaCha8Rng::seed_from_u64(77))
                .unwrap();
            let b = augment_utterance(&speech, category, &sources, &mut ChaCha8Rng::seed_from_u64(77))
                .unwrap();
            assert_eq!(a.samples, b.samples, "category {category}");
        }
    }

    #[test]
    fn augmentations_preserve_sample_rate_and_length_except_speed() {
        let speech = tone(450.0, 0.35, 8000);
        let noise = white(0.4, 3000, 13);
        let mixed = mix_additive(&speech, &noise, 10.0).unwrap().audio;
        assert_eq!(mixed.sample_rate_hz, SAMPLE_RATE);
        assert_eq!(mixed.len(), speech.len());
        let rir = convolve_rir(&speech, &AudioBuffer::new(vec![0.8, 0.2], SAMPLE_RATE)).unwrap();
        assert_eq!(rir.len(), speech.len());
        let vol = perturb_volume(&speech, -6.0).unwrap().audio;
        assert_eq!(vol.len(), speech.len());
        let pitch = perturb_pitch(&speech, 2.0).unwrap();
        assert_eq!(pitch.len(), speech.len());
    }
}
