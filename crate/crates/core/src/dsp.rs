//! Shared signal-processing primitives: FFT wrappers, STFT/ISTFT with
//! overlap-add, windows, and band-limited resampling.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

/// Forward complex FFT, in place semantics hidden behind a plain slice API.
pub fn fft_forward(input: &[Complex64]) -> Vec<Complex64> {
    let mut buf = input.to_vec();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    buf
}

/// Inverse complex FFT including the 1/N normalization.
pub fn fft_inverse(input: &[Complex64]) -> Vec<Complex64> {
    let mut buf = input.to_vec();
    FftPlanner::new().plan_fft_inverse(buf.len()).process(&mut buf);
    let scale = 1.0 / buf.len() as f64;
    for v in &mut buf {
        *v *= scale;
    }
    buf
}

/// Magnitude spectrum of a real frame zero-padded to `fft_size`.
/// Returns `fft_size / 2 + 1` bins.
pub fn magnitude_spectrum(frame: &[f64], fft_size: usize) -> Vec<f64> {
    debug_assert!(frame.len() <= fft_size);
    let mut buf = vec![Complex64::new(0.0, 0.0); fft_size];
    for (b, &x) in buf.iter_mut().zip(frame.iter()) {
        b.re = x;
    }
    let spec = fft_forward(&buf);
    spec[..fft_size / 2 + 1].iter().map(|c| c.norm()).collect()
}

pub fn hamming(len: usize) -> Vec<f64> {
    window(len, |x| 0.54 - 0.46 * x.cos())
}

pub fn hann(len: usize) -> Vec<f64> {
    window(len, |x| 0.5 - 0.5 * x.cos())
}

fn window(len: usize, f: impl Fn(f64) -> f64) -> Vec<f64> {
    (0..len)
        .map(|n| f(2.0 * std::f64::consts::PI * n as f64 / len as f64))
        .collect()
}

/// Full linear convolution, FFT-based. Output length is `a.len() + b.len() - 1`.
pub fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    let out_len = a.len() + b.len() - 1;
    let n = out_len.next_power_of_two();
    let mut fa = vec![Complex64::new(0.0, 0.0); n];
    let mut fb = vec![Complex64::new(0.0, 0.0); n];
    for (c, &x) in fa.iter_mut().zip(a.iter()) {
        c.re = x;
    }
    for (c, &x) in fb.iter_mut().zip(b.iter()) {
        c.re = x;
    }
    let fa = fft_forward(&fa);
    let fb = fft_forward(&fb);
    let prod: Vec<Complex64> = fa.iter().zip(&fb).map(|(x, y)| x * y).collect();
    fft_inverse(&prod)[..out_len].iter().map(|c| c.re).collect()
}

/// Short-time Fourier transform. Frames are hop-spaced, windowed, and padded
/// to `fft_size`; the signal is zero-padded at both ends by `fft_size / 2` so
/// that ISTFT reconstructs the original length exactly.
pub struct Stft {
    pub fft_size: usize,
    pub hop: usize,
    window: Vec<f64>,
}

impl Stft {
    pub fn new(fft_size: usize, hop: usize) -> Self {
        assert!(hop > 0 && hop <= fft_size);
        // sqrt-Hann analysis and synthesis pair: COLA holds for hop = fft/4
        // and hop = fft/2.
        let window = hann(fft_size).into_iter().map(f64::sqrt).collect();
        Stft { fft_size, hop, window }
    }

    /// Complex spectrogram, one row per frame, `fft_size/2 + 1` bins.
    pub fn analyze(&self, signal: &[f64]) -> Vec<Vec<Complex64>> {
        let pad = self.fft_size / 2;
        let n_frames = (signal.len() + pad) / self.hop + 1;
        let mut frames = Vec::with_capacity(n_frames);
        for f in 0..n_frames {
            let start = f as isize * self.hop as isize - pad as isize;
            let mut buf = vec![Complex64::new(0.0, 0.0); self.fft_size];
            for i in 0..self.fft_size {
                let idx = start + i as isize;
                if idx >= 0 && (idx as usize) < signal.len() {
                    buf[i].re = signal[idx as usize] * self.window[i];
                }
            }
            let spec = fft_forward(&buf);
            frames.push(spec[..self.fft_size / 2 + 1].to_vec());
        }
        frames
    }

    /// Inverse STFT with overlap-add; output trimmed/padded to `out_len`.
    pub fn synthesize(&self, frames: &[Vec<Complex64>], out_len: usize) -> Vec<f64> {
        let pad = self.fft_size / 2;
        let total = frames.len() * self.hop + self.fft_size;
        let mut acc = vec![0.0; total];
        let mut norm = vec![0.0; total];
        for (f, half) in frames.iter().enumerate() {
            let full = expand_half_spectrum(half, self.fft_size);
            let time = fft_inverse(&full);
            let off = f * self.hop;
            for i in 0..self.fft_size {
                acc[off + i] += time[i].re * self.window[i];
                norm[off + i] += self.window[i] * self.window[i];
            }
        }
        let mut out = vec![0.0; out_len];
        for i in 0..out_len {
            let j = i + pad;
            if j < acc.len() && norm[j] > 1e-12 {
                out[i] = acc[j] / norm[j];
            }
        }
        out
    }
}

/// Rebuild the full Hermitian spectrum from `n/2 + 1` bins.
pub fn expand_half_spectrum(half: &[Complex64], fft_size: usize) -> Vec<Complex64> {
    let mut full = vec![Complex64::new(0.0, 0.0); fft_size];
    full[..half.len()].copy_from_slice(half);
    for k in 1..fft_size / 2 {
        full[fft_size - k] = half[k].conj();
    }
    full
}

/// Resample `input` to exactly `out_len` samples with a windowed-sinc kernel.
/// Sample `i` of the output is taken at input position `i * step`.
pub fn resample_to_len(input: &[f64], out_len: usize, step: f64) -> Vec<f64> {
    const HALF_TAPS: isize = 16;
    let cutoff = if step > 1.0 { 1.0 / step } else { 1.0 };
    let mut out = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let pos = i as f64 * step;
        let center = pos.floor() as isize;
        let mut acc = 0.0;
        let mut wsum = 0.0;
        for t in -HALF_TAPS..=HALF_TAPS {
            let idx = center + t;
            if idx < 0 || idx as usize >= input.len() {
                continue;
            }
            let x = pos - idx as f64;
            let w = sinc(cutoff * x) * hann_tap(x / HALF_TAPS as f64);
            acc += input[idx as usize] * w * cutoff;
            wsum += w * cutoff;
        }
        // Normalizing by the actual kernel mass keeps edges flat.
        out.push(if wsum.abs() > 1e-12 { acc / wsum } else { acc });
    }
    out
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

fn hann_tap(x: f64) -> f64 {
    if x.abs() >= 1.0 {
        0.0
    } else {
        0.5 + 0.5 * (std::f64::consts::PI * x).cos()
    }
}
