//! Audio frontend: 16 kHz mono WAV input and the 49×10 MFCC feature map
//! consumed by the student model, plus the FMAP binary container shared
//! with teacher frame files.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rustfft::{num_complex::Complex, FftPlanner};
use std::io::{Read, Write};
use std::path::Path;

pub const SAMPLE_RATE: u32 = 16_000;
pub const PROTOCOL_SAMPLES: usize = 16_000;

/// Time × dim feature matrix. Protocol MFCC maps are 49×10; teacher frame
/// maps are T×D.
pub type FeatureMap = Tensor<f32>;

#[derive(Debug, Clone)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

#[derive(Debug, Clone)]
pub struct MfccConfig {
    pub frame_ms: usize,
    pub stride_ms: usize,
    pub n_mels: usize,
    pub n_coeffs: usize,
    pub fft_size: usize,
    pub log_floor: f32,
    pub mel_low_hz: f32,
    pub mel_high_hz: f32,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig {
            frame_ms: 40,
            stride_ms: 20,
            n_mels: 40,
            n_coeffs: 10,
            fft_size: 1024,
            log_floor: 1e-10,
            mel_low_hz: 20.0,
            mel_high_hz: 8000.0,
        }
    }
}

impl MfccConfig {
    pub fn frame_len(&self) -> usize {
        SAMPLE_RATE as usize * self.frame_ms / 1000
    }

    pub fn hop_len(&self) -> usize {
        SAMPLE_RATE as usize * self.stride_ms / 1000
    }

    /// floor((16000 − 640)/320) + 1 = 49 for the defaults.
    pub fn frame_count(&self) -> usize {
        (PROTOCOL_SAMPLES - self.frame_len()) / self.hop_len() + 1
    }
}

// ---- WAV ----

fn read_u32(data: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(data[at..at + 4].try_into().unwrap())
}

fn read_u16(data: &[u8], at: usize) -> u16 {
    u16::from_le_bytes(data[at..at + 2].try_into().unwrap())
}

/// Load a 16-bit PCM mono 16 kHz WAV, scale to [−1, 1], and apply the
/// protocol duration rule: shorter clips are zero-padded to one second,
/// longer clips are rejected.
pub fn load_wav(path: &Path) -> Result<Waveform> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::Parse(format!("{}: not a RIFF/WAV file", path.display())));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = read_u32(&bytes, pos + 4) as usize;
        let body_end = pos + 8 + size;
        if body_end > bytes.len() {
            return Err(Error::Parse(format!("{}: truncated chunk", path.display())));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::Parse(format!("{}: short fmt chunk", path.display())));
                }
                fmt = Some((
                    read_u16(&bytes, pos + 8),
                    read_u16(&bytes, pos + 10),
                    read_u32(&bytes, pos + 12),
                    read_u16(&bytes, pos + 22),
                ));
            }
            b"data" => data = Some(&bytes[pos + 8..body_end]),
            _ => {}
        }
        pos = body_end + (size & 1); // chunks are word-aligned
    }
    let (format, channels, rate, bits) = fmt
        .ok_or_else(|| Error::Parse(format!("{}: missing fmt chunk", path.display())))?;
    if format != 1 {
        return Err(Error::Parse(format!("expected PCM format, got format tag {}", format)));
    }
    if channels != 1 {
        return Err(Error::Parse(format!("expected mono, got {} channels", channels)));
    }
    if rate != SAMPLE_RATE {
        return Err(Error::Parse(format!("expected 16000 Hz, got {} Hz", rate)));
    }
    if bits != 16 {
        return Err(Error::Parse(format!("expected 16-bit samples, got {}-bit", bits)));
    }
    let data = data.ok_or_else(|| Error::Parse(format!("{}: missing data chunk", path.display())))?;
    let mut samples: Vec<f32> = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32768.0)
        .collect();
    if samples.len() > PROTOCOL_SAMPLES {
        return Err(Error::InvalidInput(format!(
            "{}: {} samples exceed the 1-second protocol length",
            path.display(),
            samples.len()
        )));
    }
    samples.resize(PROTOCOL_SAMPLES, 0.0);
    Ok(Waveform {
        samples,
        sample_rate: SAMPLE_RATE,
    })
}

/// Write a 16-bit PCM mono WAV (used by tests and synthetic audio helpers).
pub fn write_wav(path: &Path, samples: &[f32]) -> Result<()> {
    let n = samples.len() as u32;
    let mut out = Vec::with_capacity(44 + 2 * samples.len());
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + 2 * n).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&SAMPLE_RATE.to_le_bytes());
    out.extend_from_slice(&(SAMPLE_RATE * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(2 * n).to_le_bytes());
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ---- MFCC ----

// The feature pipeline runs in f64 internally (the log of near-floor mel
// energies is ill-conditioned in f32) and emits f32 maps.

fn hamming(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank over the one-sided power spectrum.
fn mel_filterbank(cfg: &MfccConfig) -> Vec<Vec<f64>> {
    let n_bins = cfg.fft_size / 2 + 1;
    let mel_lo = hz_to_mel(cfg.mel_low_hz as f64);
    let mel_hi = hz_to_mel(cfg.mel_high_hz as f64);
    let points: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = |k: usize| k as f64 * SAMPLE_RATE as f64 / cfg.fft_size as f64;
    (0..cfg.n_mels)
        .map(|m| {
            let (lo, center, hi) = (points[m], points[m + 1], points[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = bin_hz(k);
                    if f > lo && f < center {
                        (f - lo) / (center - lo)
                    } else if f >= center && f < hi {
                        (hi - f) / (hi - center)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Orthonormal DCT-II of `x`, keeping the first `keep` coefficients.
fn dct2_ortho(x: &[f64], keep: usize) -> Vec<f64> {
    let n = x.len();
    let scale0 = (1.0 / n as f64).sqrt();
    let scale = (2.0 / n as f64).sqrt();
    (0..keep)
        .map(|k| {
            let sum: f64 = x
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    v * (std::f64::consts::PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64)
                        .cos()
                })
                .sum();
            sum * if k == 0 { scale0 } else { scale }
        })
        .collect()
}

/// MFCC pipeline: frame → Hamming → |FFT|² → mel energies → log with floor →
/// orthonormal DCT-II → first `n_coeffs` coefficients. Protocol output is 49×10.
pub fn mfcc(w: &Waveform, cfg: &MfccConfig) -> Result<FeatureMap> {
    if w.sample_rate != SAMPLE_RATE {
        return Err(Error::InvalidInput(format!(
            "mfcc: expected {} Hz waveform, got {}",
            SAMPLE_RATE, w.sample_rate
        )));
    }
    if w.samples.len() != PROTOCOL_SAMPLES {
        return Err(Error::InvalidInput(format!(
            "mfcc: expected {} samples, got {}",
            PROTOCOL_SAMPLES,
            w.samples.len()
        )));
    }
    let frame_len = cfg.frame_len();
    let hop = cfg.hop_len();
    if cfg.fft_size < frame_len {
        return Err(Error::InvalidInput(format!(
            "mfcc: fft_size {} smaller than frame length {}",
            cfg.fft_size, frame_len
        )));
    }
    let n_frames = cfg.frame_count();
    let window = hamming(frame_len);
    let filters = mel_filterbank(cfg);
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(cfg.fft_size);

    let floor = cfg.log_floor as f64;
    let mut out = Vec::with_capacity(n_frames * cfg.n_coeffs);
    let mut buf = vec![Complex::new(0.0f64, 0.0); cfg.fft_size];
    for f in 0..n_frames {
        let start = f * hop;
        for v in buf.iter_mut() {
            *v = Complex::new(0.0, 0.0);
        }
        for i in 0..frame_len {
            buf[i] = Complex::new(w.samples[start + i] as f64 * window[i], 0.0);
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..cfg.fft_size / 2 + 1]
            .iter()
            .map(|c| c.norm_sqr())
            .collect();
        let log_mel: Vec<f64> = filters
            .iter()
            .map(|filt| {
                let e: f64 = filt.iter().zip(&power).map(|(a, b)| a * b).sum();
                e.max(floor).ln()
            })
            .collect();
        out.extend(dct2_ortho(&log_mel, cfg.n_coeffs).into_iter().map(|v| v as f32));
    }
    Tensor::matrix(n_frames, cfg.n_coeffs, out)
}

// ---- FMAP container ----

const FMAP_MAGIC: &[u8; 4] = b"FMAP";

/// Serialize a feature map: magic "FMAP", u32 rows, u32 cols, row-major f32, all little-endian.
pub fn write_fmap(path: &Path, map: &FeatureMap) -> Result<()> {
    let (rows, cols) = map.dims2()?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(FMAP_MAGIC)?;
    file.write_all(&(rows as u32).to_le_bytes())?;
    file.write_all(&(cols as u32).to_le_bytes())?;
    for &v in map.data() {
        file.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_fmap(path: &Path) -> Result<FeatureMap> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut header = [0u8; 12];
    file.read_exact(&mut header)
        .map_err(|_| Error::Parse(format!("{}: truncated FMAP header", path.display())))?;
    if &header[0..4] != FMAP_MAGIC {
        return Err(Error::Parse(format!("{}: bad FMAP magic", path.display())));
    }
    let rows = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let mut raw = Vec::new();
    file.read_to_end(&mut raw)?;
    if raw.len() != rows * cols * 4 {
        return Err(Error::Parse(format!(
            "{}: expected {} floats, found {} bytes",
            path.display(),
            rows * cols,
            raw.len()
        )));
    }
    let data: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::matrix(rows, cols, data)
}
