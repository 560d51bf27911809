//! RASTA-PLP features: Bark-scale critical-band analysis, RASTA band-pass
//! filtering of log band trajectories, equal-loudness and cube-root
//! compression, all-pole modeling, and cepstral conversion.

use crate::corpus::AudioBuffer;
use crate::dsp;
use rustfft::num_complex::Complex64;

use super::{
    frame_energies_db, frames_of, vad_mask_from_energies, FeatureError, FeatureKind,
    FeatureMatrix, FrameConfig, DEFAULT_VAD_MARGIN_DB,
};

fn hz_to_bark(hz: f64) -> f64 {
    6.0 * (hz / 600.0).asinh()
}

/// Critical-band filterbank on the Bark scale. Half-bark spacing gives
/// enough bands (33 at 8 kHz) to support the order-19 all-pole fit.
/// Skirts follow the classic +10/-25 dB-per-Bark trapezoid.
fn bark_filterbank(fft_size: usize, sample_rate: u32) -> (Vec<Vec<f64>>, Vec<f64>) {
    let nyquist = sample_rate as f64 / 2.0;
    let max_bark = hz_to_bark(nyquist);
    let n_filts = 2 * max_bark.ceil() as usize + 1;
    let step = max_bark / (n_filts - 1) as f64;
    let n_bins = fft_size / 2 + 1;
    let bin_barks: Vec<f64> = (0..n_bins)
        .map(|k| hz_to_bark(k as f64 * sample_rate as f64 / fft_size as f64))
        .collect();
    let mut centers_hz = Vec::with_capacity(n_filts);
    let filters = (0..n_filts)
        .map(|i| {
            let mid = i as f64 * step;
            centers_hz.push(600.0 * (mid / 6.0).sinh());
            bin_barks
                .iter()
                .map(|&z| {
                    let lof = z - mid - 0.5;
                    let hif = z - mid + 0.5;
                    10f64.powf(hif.min(-2.5 * lof).min(0.0))
                })
                .collect()
        })
        .collect();
    (filters, centers_hz)
}

/// The RASTA band-pass filter applied along one band trajectory:
/// FIR [0.2 0.1 0 -0.1 -0.2] with a 0.94 pole; the first four outputs are
/// suppressed as warm-up.
pub fn rasta_filter(trajectory: &[f64]) -> Vec<f64> {
    const NUMER: [f64; 5] = [0.2, 0.1, 0.0, -0.1, -0.2];
    const POLE: f64 = 0.94;
    let mut out = vec![0.0; trajectory.len()];
    for t in 0..trajectory.len() {
        if t < 4 {
            continue;
        }
        let mut fir = 0.0;
        for (j, &c) in NUMER.iter().enumerate() {
            fir += c * trajectory[t - j];
        }
        out[t] = fir + POLE * out[t - 1];
    }
    out
}

fn equal_loudness(f_hz: f64) -> f64 {
    let fsq = f_hz * f_hz;
    let ftmp = fsq / (fsq + 1.6e5);
    ftmp * ftmp * (fsq + 1.44e6) / (fsq + 9.61e6)
}

/// Levinson-Durbin: autocorrelation -> (lpc coefficients a_1..a_p, error).
fn levinson(r: &[f64], order: usize) -> (Vec<f64>, f64) {
    debug_assert!(r.len() > order);
    let mut a = vec![0.0f64; order + 1];
    a[0] = 1.0;
    let mut err = r[0];
    for i in 1..=order {
        let mut acc = r[i];
        for j in 1..i {
            acc += a[j] * r[i - j];
        }
        let k = -acc / err;
        let prev = a.clone();
        for j in 1..i {
            a[j] = prev[j] + k * prev[i - j];
        }
        a[i] = k;
        err *= 1.0 - k * k;
        if err <= 0.0 {
            err = 1e-12;
        }
    }
    (a[1..].to_vec(), err)
}

/// Cepstra of the all-pole model G^2 / |A|^2: c_0 = ln(G^2) and the
/// standard LPC-to-cepstrum recursion beyond that.
fn lpc_to_cepstrum(a: &[f64], err: f64, n_out: usize) -> Vec<f64> {
    let p = a.len();
    let mut c = vec![0.0f64; n_out];
    if n_out == 0 {
        return c;
    }
    c[0] = err.max(1e-300).ln();
    for n in 1..n_out {
        let mut acc = if n <= p { -a[n - 1] } else { 0.0 };
        for k in 1..n {
            if n - k <= p {
                acc -= (k as f64 / n as f64) * c[k] * a[n - k - 1];
            }
        }
        c[n] = acc;
    }
    c
}

/// RASTA-PLP feature extraction. `model_order` 19 yields the 20-dimensional
/// configuration used by the PLP classifier front-end.
pub fn rasta_plp(
    audio: &AudioBuffer,
    cfg: &FrameConfig,
    model_order: usize,
) -> Result<FeatureMatrix, FeatureError> {
    assert!(!audio.samples.is_empty(), "empty audio");
    cfg.validate(audio.sample_rate_hz);
    if model_order != 19 {
        return Err(FeatureError::Invalid(format!(
            "unsupported all-pole order {model_order} (the PLP front-end is fixed at 19 -> 20 cepstra)"
        )));
    }
    let n_ceps = model_order + 1;
    let signal: Vec<f64> = audio.samples.iter().map(|&x| x as f64).collect();
    let raw_frames = frames_of(&signal, cfg, audio.sample_rate_hz);
    if raw_frames.is_empty() {
        return Err(FeatureError::NoSpeechFrames);
    }
    let mask = vad_mask_from_energies(&frame_energies_db(&raw_frames), DEFAULT_VAD_MARGIN_DB);
    let window = dsp::hamming(cfg.window_samples(audio.sample_rate_hz));
    let (filters, centers_hz) = bark_filterbank(cfg.fft_size, audio.sample_rate_hz);
    let n_bands = filters.len();
    debug_assert!(n_bands > model_order, "not enough bands for the model order");

    // critical-band energies for every frame (RASTA filtering needs the
    // full trajectory; VAD selection happens afterwards)
    let mut band_log: Vec<Vec<f64>> = vec![Vec::with_capacity(raw_frames.len()); n_bands];
    for frame in &raw_frames {
        let windowed: Vec<f64> = frame.iter().zip(&window).map(|(x, w)| x * w).collect();
        let spectrum = dsp::magnitude_spectrum(&windowed, cfg.fft_size);
        let power: Vec<f64> = spectrum.iter().map(|m| m * m).collect();
        for (b, w) in filters.iter().enumerate() {
            let e: f64 = w.iter().zip(&power).map(|(a, p)| a * p).sum();
            band_log[b].push((e + 1e-10).ln());
        }
    }
    let band_rasta: Vec<Vec<f64>> = band_log.iter().map(|t| rasta_filter(t)).collect();

    let eql: Vec<f64> = centers_hz.iter().map(|&f| equal_loudness(f)).collect();
    let mut rows: Vec<f64> = Vec::new();
    let mut kept = 0usize;
    for (t, &keep) in mask.iter().enumerate() {
        if !keep {
            continue;
        }
        // back to the power domain, loudness-equalized, cube-root compressed
        let mut z: Vec<f64> = (0..n_bands)
            .map(|b| (band_rasta[b][t].exp() * eql[b]).powf(1.0 / 3.0))
            .collect();
        // edge bands are unreliable: replace with neighbors
        z[0] = z[1];
        z[n_bands - 1] = z[n_bands - 2];
        // even-symmetric inverse transform -> autocorrelation
        let m = 2 * (n_bands - 1);
        let mut full = vec![Complex64::new(0.0, 0.0); m];
        for (b, &v) in z.iter().enumerate() {
            full[b].re = v;
        }
        for b in 1..n_bands - 1 {
            full[m - b].re = z[b];
        }
        let r_full = dsp::fft_inverse(&full);
        let mut r: Vec<f64> = r_full[..=model_order].iter().map(|c| c.re).collect();
        r[0] *= 1.0 + 1e-8; // white-noise correction keeps Levinson stable
        let (a, err) = levinson(&r, model_order);
        let ceps = lpc_to_cepstrum(&a, err, n_ceps);
        rows.extend_from_slice(&ceps);
        kept += 1;
    }
    if kept == 0 {
        return Err(FeatureError::NoSpeechFrames);
    }
    FeatureMatrix::new(FeatureKind::Plp20, cfg.hop_ms, kept, n_ceps, rows)
}
