//! Audio ingestion: PCM16 WAV and NIST SPHERE (pcm or μ-law) decoding.
//!
//! All readers produce mono buffers at 8 kHz; any other rate is a hard error
//! rather than a silent resample.

use std::fs;
use std::io::Read;
use std::path::Path;

use super::CorpusError;

/// Required sample rate for every ingested utterance.
pub const SAMPLE_RATE: u32 = 8000;

/// Mono waveform with samples normalized to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f32>,
    pub sample_rate_hz: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate_hz: u32) -> Self {
        assert!(!samples.is_empty(), "empty audio buffer");
        AudioBuffer { samples, sample_rate_hz }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    /// Mean sample power.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|&x| x as f64 * x as f64).sum::<f64>() / self.samples.len() as f64
    }
}

/// Decode a PCM16 WAV or NIST SPHERE file into a mono 8 kHz buffer.
pub fn read_audio(path: &Path) -> Result<AudioBuffer, CorpusError> {
    let mut file = fs::File::open(path).map_err(|e| CorpusError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic).map_err(|e| CorpusError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    drop(file);
    match &magic {
        b"RIFF" => read_wav(path),
        b"NIST" => read_sphere(path),
        _ => Err(CorpusError::UnsupportedFormat {
            path: path.display().to_string(),
            detail: "not a RIFF/WAVE or NIST SPHERE file".into(),
        }),
    }
}

fn read_wav(path: &Path) -> Result<AudioBuffer, CorpusError> {
    let reader = hound::WavReader::open(path).map_err(|e| CorpusError::UnsupportedFormat {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(CorpusError::MultiChannel {
            path: path.display().to_string(),
            channels: spec.channels,
        });
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(CorpusError::UnsupportedEncoding {
            path: path.display().to_string(),
            detail: format!(
                "only PCM16 supported, got {:?} {} bit",
                spec.sample_format, spec.bits_per_sample
            ),
        });
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(CorpusError::UnsupportedSampleRate {
            path: path.display().to_string(),
            rate: spec.sample_rate,
        });
    }
    let samples: Result<Vec<i16>, _> = reader.into_samples::<i16>().collect();
    let samples = samples.map_err(|e| CorpusError::UnsupportedFormat {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    if samples.is_empty() {
        return Err(CorpusError::UnsupportedFormat {
            path: path.display().to_string(),
            detail: "empty audio payload".into(),
        });
    }
    Ok(AudioBuffer::new(
        samples.into_iter().map(|s| s as f32 / 32768.0).collect(),
        SAMPLE_RATE,
    ))
}

/// Write a buffer as PCM16 WAV. Samples outside `[-1, 1]` are clamped.
pub fn write_wav_pcm16(path: &Path, audio: &AudioBuffer) -> Result<(), CorpusError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| CorpusError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e.to_string()),
    })?;
    for &s in &audio.samples {
        let q = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q).map_err(|e| CorpusError::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e.to_string()),
        })?;
    }
    writer.finalize().map_err(|e| CorpusError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e.to_string()),
    })?;
    Ok(())
}

#[derive(Debug, Default)]
struct SphereHeader {
    header_bytes: usize,
    channel_count: u32,
    sample_rate: u32,
    sample_n_bytes: u32,
    sample_count: Option<u64>,
    sample_coding: String,
    byte_format: String,
}

fn read_sphere(path: &Path) -> Result<AudioBuffer, CorpusError> {
    let bytes = fs::read(path).map_err(|e| CorpusError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let header = parse_sphere_header(&bytes).map_err(|detail| CorpusError::UnsupportedFormat {
        path: path.display().to_string(),
        detail,
    })?;

    if header.channel_count != 1 {
        return Err(CorpusError::MultiChannel {
            path: path.display().to_string(),
            channels: header.channel_count as u16,
        });
    }
    if header.sample_rate != SAMPLE_RATE {
        return Err(CorpusError::UnsupportedSampleRate {
            path: path.display().to_string(),
            rate: header.sample_rate,
        });
    }
    let payload = bytes.get(header.header_bytes..).ok_or_else(|| CorpusError::UnsupportedFormat {
        path: path.display().to_string(),
        detail: "payload shorter than declared header".into(),
    })?;

    let coding = header.sample_coding.as_str();
    let samples: Vec<f32> = if coding.starts_with("ulaw") || coding.starts_with("mu-law") {
        payload.iter().map(|&b| ulaw_to_linear(b) as f32 / 32768.0).collect()
    } else if coding.is_empty() || coding.starts_with("pcm") {
        if coding.contains("shorten") {
            return Err(CorpusError::UnsupportedEncoding {
                path: path.display().to_string(),
                detail: "shorten-compressed SPHERE is not supported".into(),
            });
        }
        if header.sample_n_bytes != 2 {
            return Err(CorpusError::UnsupportedEncoding {
                path: path.display().to_string(),
                detail: format!("pcm with {} bytes/sample", header.sample_n_bytes),
            });
        }
        let big_endian = header.byte_format == "10";
        payload
            .chunks_exact(2)
            .map(|c| {
                let v = if big_endian {
                    i16::from_be_bytes([c[0], c[1]])
                } else {
                    i16::from_le_bytes([c[0], c[1]])
                };
                v as f32 / 32768.0
            })
            .collect()
    } else {
        return Err(CorpusError::UnsupportedEncoding {
            path: path.display().to_string(),
            detail: format!("sample_coding {coding:?}"),
        });
    };

    let mut samples = samples;
    if let Some(n) = header.sample_count {
        if (n as usize) <= samples.len() {
            samples.truncate(n as usize);
        }
    }
    if samples.is_empty() {
        return Err(CorpusError::UnsupportedFormat {
            path: path.display().to_string(),
            detail: "empty audio payload".into(),
        });
    }
    Ok(AudioBuffer::new(samples, SAMPLE_RATE))
}

fn parse_sphere_header(bytes: &[u8]) -> Result<SphereHeader, String> {
    let head = std::str::from_utf8(bytes.get(..1024.min(bytes.len())).unwrap_or(&[]))
        .map_err(|_| "header is not ASCII".to_string())?;
    let mut lines = head.lines();
    if lines.next().map(str::trim) != Some("NIST_1A") {
        return Err("missing NIST_1A magic".into());
    }
    let header_bytes: usize = lines
        .next()
        .and_then(|l| l.trim().parse().ok())
        .ok_or("missing header size line")?;

    let mut h = SphereHeader {
        header_bytes,
        channel_count: 1,
        sample_n_bytes: 2,
        ..Default::default()
    };
    for line in lines {
        let line = line.trim();
        if line == "end_head" {
            break;
        }
        // field -TYPE value  (e.g. "sample_rate -i 8000", "sample_coding -s4 ulaw")
        let mut parts = line.splitn(3, ' ');
        let (Some(name), Some(_ty), Some(value)) = (parts.next(), parts.next(), parts.next())
        else {
            continue;
        };
        match name {
            "channel_count" => h.channel_count = value.trim().parse().map_err(|_| "bad channel_count")?,
            "sample_rate" => h.sample_rate = value.trim().parse().map_err(|_| "bad sample_rate")?,
            "sample_n_bytes" => h.sample_n_bytes = value.trim().parse().map_err(|_| "bad sample_n_bytes")?,
            "sample_count" => h.sample_count = value.trim().parse().ok(),
            "sample_coding" => h.sample_coding = value.trim().to_string(),
            "sample_byte_format" => h.byte_format = value.trim().to_string(),
            _ => {}
        }
    }
    if h.sample_rate == 0 {
        return Err("header lacks sample_rate".into());
    }
    Ok(h)
}

/// G.711 μ-law byte to a 16-bit linear sample (the 14-bit decode shifted
/// left by two, matching the published expansion table: 0x00 -> -32124).
pub fn ulaw_to_linear(byte: u8) -> i16 {
    let u = !byte;
    let sign = u & 0x80;
    let exponent = (u >> 4) & 0x07;
    let mantissa = (u & 0x0f) as i32;
    let magnitude = (((2 * mantissa + 33) << exponent) - 33) << 2;
    if sign != 0 {
        -magnitude as i16
    } else {
        magnitude as i16
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("lidkit-audio-tests");
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn ulaw_expansion_reference_points() {
        // endpoints of the published expansion table
        assert_eq!(ulaw_to_linear(0x00), -32124);
        assert_eq!(ulaw_to_linear(0x80), 32124);
        assert_eq!(ulaw_to_linear(0xff), 0);
        assert_eq!(ulaw_to_linear(0x7f), 0);
        // a mid-scale point: u = !0x30 = 0xcf -> sign+, exp 4, mant 15
        assert_eq!(ulaw_to_linear(0x30), -3900);
    }

    #[test]
    fn silence_wav_roundtrip() {
        let path = tmp("silence.wav");
        let buf = AudioBuffer::new(vec![0.0; 8000], SAMPLE_RATE);
        write_wav_pcm16(&path, &buf).unwrap();
        let back = read_audio(&path).unwrap();
        assert_eq!(back.samples.len(), 8000);
        assert!(back.samples.iter().all(|&s| s == 0.0));
        assert_eq!(back.sample_rate_hz, 8000);
    }

    #[test]
    fn wav_wrong_rate_is_rejected() {
        let path = tmp("rate16k.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for _ in 0..100 {
            w.write_sample(0i16).unwrap();
        }
        w.finalize().unwrap();
        match read_audio(&path) {
            Err(CorpusError::UnsupportedSampleRate { rate, .. }) => assert_eq!(rate, 16000),
            other => panic!("expected sample-rate error, got {other:?}"),
        }
    }

    #[test]
    fn wav_stereo_is_rejected() {
        let path = tmp("stereo.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for _ in 0..100 {
            w.write_sample(0i16).unwrap();
        }
        w.finalize().unwrap();
        assert!(matches!(read_audio(&path), Err(CorpusError::MultiChannel { .. })));
    }

    fn sphere_bytes(coding: &str, n_bytes: u32, payload: &[u8]) -> Vec<u8> {
        let mut head = String::new();
        head.push_str("NIST_1A\n   1024\n");
        head.push_str("channel_count -i 1\n");
        head.push_str("sample_rate -i 8000\n");
        head.push_str(&format!("sample_n_bytes -i {n_bytes}\n"));
        head.push_str(&format!("sample_coding -s{} {coding}\n", coding.len()));
        head.push_str("sample_byte_format -s2 01\n");
        head.push_str("end_head\n");
        let mut bytes = head.into_bytes();
        bytes.resize(1024, b' ');
        bytes.extend_from_slice(payload);
        bytes
    }

    #[test]
    fn sphere_ulaw_payload_matches_expansion() {
        let path = tmp("ulaw.sph");
        fs::write(&path, sphere_bytes("ulaw", 1, &[0x00, 0x30, 0xff])).unwrap();
        let buf = read_audio(&path).unwrap();
        let want = [-32124.0 / 32768.0, -3900.0 / 32768.0, 0.0];
        for (got, want) in buf.samples.iter().zip(want.iter()) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn sphere_pcm_little_endian() {
        let path = tmp("pcm.sph");
        let payload: Vec<u8> = [100i16, -200, 32767]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        fs::write(&path, sphere_bytes("pcm", 2, &payload)).unwrap();
        let buf = read_audio(&path).unwrap();
        assert!((buf.samples[0] - 100.0 / 32768.0).abs() < 1e-9);
        assert!((buf.samples[1] + 200.0 / 32768.0).abs() < 1e-9);
    }

    #[test]
    fn garbage_file_is_unsupported() {
        let path = tmp("garbage.bin");
        fs::write(&path, b"not audio at all").unwrap();
        assert!(matches!(
            read_audio(&path),
            Err(CorpusError::UnsupportedFormat { .. })
        ));
    }
}
