//! Waveform <-> log-mel-spectrogram transforms and Griffin-Lim inversion.
//!
//! Mel scale is HTK-style: mel(f) = 2595 * log10(1 + f / 700).
//! Log-mel values are normalized affinely from [ln(floor), ln(ceiling)]
//! to [-1, 1] with floor = 1e-5.

use crate::array::Array;
use crate::config::Config;
use crate::error::{Result, SvqaError};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use std::io::{Read, Write};
use std::path::Path;

pub const LOG_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: usize,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: usize) -> Waveform {
        assert!(sample_rate > 0);
        Waveform {
            samples,
            sample_rate,
        }
    }

    /// Clamp to [-1, 1]; returns how many samples were clipped.
    pub fn clamp(&mut self) -> usize {
        let mut clipped = 0;
        for s in &mut self.samples {
            if s.abs() > 1.0 {
                *s = s.clamp(-1.0, 1.0);
                clipped += 1;
            }
        }
        clipped
    }
}

/// M x T grid of log-magnitudes normalized to [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    /// Row-major [mel_bands, frames].
    pub values: Array,
}

impl MelSpectrogram {
    pub fn mel_bands(&self) -> usize {
        self.values.dim(0)
    }

    pub fn frames(&self) -> usize {
        self.values.dim(1)
    }
}

#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// [mel_bands, n_fft/2 + 1] nonnegative triangle weights.
    pub weights: Array,
    pub n_fft: usize,
    pub sample_rate: usize,
    /// ln of the normalization ceiling (filterbank output mapping to +1).
    pub log_ceiling: f64,
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

impl MelFilterbank {
    pub fn new(mel_bands: usize, n_fft: usize, sample_rate: usize) -> Result<MelFilterbank> {
        let bins = n_fft / 2 + 1;
        let f_max = sample_rate as f64 / 2.0;
        let m_lo = hz_to_mel(0.0);
        let m_hi = hz_to_mel(f_max);
        let centers: Vec<f64> = (0..mel_bands + 2)
            .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (mel_bands + 1) as f64))
            .collect();
        let mut weights = vec![0.0; mel_bands * bins];
        for m in 0..mel_bands {
            let (lo, mid, hi) = (centers[m], centers[m + 1], centers[m + 2]);
            for b in 0..bins {
                let f = b as f64 * sample_rate as f64 / n_fft as f64;
                let w = if f >= lo && f <= mid && mid > lo {
                    (f - lo) / (mid - lo)
                } else if f > mid && f <= hi && hi > mid {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                weights[m * bins + b] = w;
            }
            let row_sum: f64 = weights[m * bins..(m + 1) * bins].iter().sum();
            if row_sum <= 0.0 {
                return Err(SvqaError::InvalidArgument(format!(
                    "mel filter {m} has empty support; increase n_fft or reduce mel_bands"
                )));
            }
        }
        // Ceiling: a full-scale sine concentrates |X| ~ window_sum/2 in one
        // bin; triangle weights are <= 1, so window_sum/2 bounds the
        // filterbank output for any |sample| <= 1 input.
        let window_sum: f64 = hann(n_fft).iter().sum();
        Ok(MelFilterbank {
            weights: Array::new(vec![mel_bands, bins], weights),
            n_fft,
            sample_rate,
            log_ceiling: (window_sum / 2.0).ln(),
        })
    }

    pub fn mel_bands(&self) -> usize {
        self.weights.dim(0)
    }

    /// Band index whose center frequency is closest to `hz`.
    pub fn band_of(&self, hz: f64) -> usize {
        let mel_bands = self.mel_bands();
        let m_lo = hz_to_mel(0.0);
        let m_hi = hz_to_mel(self.sample_rate as f64 / 2.0);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for m in 0..mel_bands {
            let c = mel_to_hz(m_lo + (m_hi - m_lo) * (m + 1) as f64 / (mel_bands + 1) as f64);
            let d = (c - hz).abs();
            if d < best_d {
                best_d = d;
                best = m;
            }
        }
        best
    }

    fn normalize(&self, mel_energy: f64) -> f64 {
        let lo = LOG_FLOOR.ln();
        let v = 2.0 * (mel_energy.max(LOG_FLOOR).ln() - lo) / (self.log_ceiling - lo) - 1.0;
        v.clamp(-1.0, 1.0)
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        let lo = LOG_FLOOR.ln();
        ((v + 1.0) / 2.0 * (self.log_ceiling - lo) + lo).exp()
    }

    /// Moore-Penrose style inverse of the filterbank with negative entries
    /// clamped to zero, for approximate mel -> linear magnitude inversion.
    pub fn pseudo_inverse(&self) -> Array {
        let m = self.mel_bands();
        let bins = self.weights.dim(1);
        let fb = nalgebra::DMatrix::from_row_slice(m, bins, &self.weights.data);
        let gram = &fb * fb.transpose() + nalgebra::DMatrix::identity(m, m) * 1e-8;
        let inv = gram
            .try_inverse()
            .expect("mel filterbank gram matrix is singular");
        let pinv = fb.transpose() * inv; // bins x m
        let pinv = &pinv;
        let data: Vec<f64> = (0..bins)
            .flat_map(|b| (0..m).map(move |j| pinv[(b, j)].max(0.0)))
            .collect();
        Array::new(vec![bins, m], data)
    }
}

pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()))
        .collect()
}

/// Complex STFT grid, frames x (n_fft/2 + 1).
#[derive(Debug, Clone)]
pub struct Stft {
    pub bins: Vec<Complex<f64>>,
    pub frames: usize,
    pub n_fft: usize,
    pub hop: usize,
}

impl Stft {
    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn magnitude(&self) -> Array {
        Array::new(
            vec![self.frames, self.n_bins()],
            self.bins.iter().map(|c| c.norm()).collect(),
        )
    }
}

fn reflect_pad(samples: &[f64], left: usize, right: usize) -> Vec<f64> {
    let n = samples.len();
    let mut out = Vec::with_capacity(n + left + right);
    let reflect = |i: isize| -> f64 {
        if n == 1 {
            return samples[0];
        }
        let period = 2 * (n as isize - 1);
        let mut j = i.rem_euclid(period);
        if j >= n as isize {
            j = period - j;
        }
        samples[j as usize]
    };
    for i in 0..left {
        out.push(reflect(-(left as isize - i as isize)));
    }
    out.extend_from_slice(samples);
    for i in 0..right {
        out.push(reflect(n as isize + i as isize));
    }
    out
}

/// Short-time Fourier transform with a Hann window and reflect padding,
/// producing exactly ceil(len / hop) frames.
pub fn stft(w: &Waveform, n_fft: usize, hop: usize) -> Result<Stft> {
    if w.samples.is_empty() {
        return Err(SvqaError::InvalidArgument("stft of empty waveform".into()));
    }
    if hop > n_fft {
        return Err(SvqaError::InvalidArgument(format!(
            "hop {hop} exceeds n_fft {n_fft}"
        )));
    }
    let frames = w.samples.len().div_ceil(hop);
    let left = (n_fft - hop) / 2;
    let needed = (frames - 1) * hop + n_fft;
    let right = needed.saturating_sub(w.samples.len() + left);
    let padded = reflect_pad(&w.samples, left, right);
    let window = hann(n_fft);
    let n_bins = n_fft / 2 + 1;

    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n_fft);
    let mut bins = vec![Complex::new(0.0, 0.0); frames * n_bins];
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for f in 0..frames {
        for i in 0..n_fft {
            buf[i] = Complex::new(padded[f * hop + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        bins[f * n_bins..(f + 1) * n_bins].copy_from_slice(&buf[..n_bins]);
    }
    Ok(Stft {
        bins,
        frames,
        n_fft,
        hop,
    })
}

/// Inverse STFT by windowed overlap-add with squared-window normalization.
pub fn istft(s: &Stft, out_len: usize) -> Vec<f64> {
    let n_fft = s.n_fft;
    let hop = s.hop;
    let n_bins = s.n_bins();
    let window = hann(n_fft);
    let left = (n_fft - hop) / 2;
    let padded_len = (s.frames - 1) * hop + n_fft;
    let mut acc = vec![0.0; padded_len];
    let mut norm = vec![0.0; padded_len];

    let mut planner = FftPlanner::new();
    let ifft = planner.plan_fft_inverse(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for f in 0..s.frames {
        let row = &s.bins[f * n_bins..(f + 1) * n_bins];
        buf[..n_bins].copy_from_slice(row);
        for i in n_bins..n_fft {
            buf[i] = row[n_fft - i].conj();
        }
        ifft.process(&mut buf);
        for i in 0..n_fft {
            let v = buf[i].re / n_fft as f64;
            acc[f * hop + i] += v * window[i];
            norm[f * hop + i] += window[i] * window[i];
        }
    }
    (0..out_len)
        .map(|i| {
            let j = i + left;
            if j < padded_len && norm[j] > 1e-10 {
                acc[j] / norm[j]
            } else {
                0.0
            }
        })
        .collect()
}

/// Log-mel spectrogram normalized to [-1, 1], shape [mel_bands, frames].
pub fn mel_spectrogram(w: &Waveform, fb: &MelFilterbank) -> Result<MelSpectrogram> {
    if w.sample_rate != fb.sample_rate {
        return Err(SvqaError::InvalidArgument(format!(
            "filterbank sample rate {} does not match waveform {}",
            fb.sample_rate, w.sample_rate
        )));
    }
    let s = stft(w, fb.n_fft, fb.n_fft_hop())?;
    Ok(mel_from_stft(&s, fb))
}

impl MelFilterbank {
    // Hop is owned by the caller's config; this helper only exists for the
    // common path where hop = n_fft / 4.
    fn n_fft_hop(&self) -> usize {
        self.n_fft / 4
    }
}

/// Apply the filterbank and log-normalization to a precomputed STFT.
pub fn mel_from_stft(s: &Stft, fb: &MelFilterbank) -> MelSpectrogram {
    let mag = s.magnitude();
    let (frames, n_bins) = (s.frames, s.n_bins());
    let m = fb.mel_bands();
    let mut values = vec![0.0; m * frames];
    for band in 0..m {
        let row = &fb.weights.data[band * n_bins..(band + 1) * n_bins];
        for f in 0..frames {
            let mut acc = 0.0;
            for (b, &wv) in row.iter().enumerate() {
                if wv != 0.0 {
                    acc += wv * mag.data[f * n_bins + b];
                }
            }
            values[band * frames + f] = fb.normalize(acc);
        }
    }
    MelSpectrogram {
        values: Array::new(vec![m, frames], values),
    }
}

/// Mel spectrogram of a waveform with an explicit hop length.
pub fn mel_spectrogram_hop(w: &Waveform, fb: &MelFilterbank, hop: usize) -> Result<MelSpectrogram> {
    if w.sample_rate != fb.sample_rate {
        return Err(SvqaError::InvalidArgument(format!(
            "filterbank sample rate {} does not match waveform {}",
            fb.sample_rate, w.sample_rate
        )));
    }
    let s = stft(w, fb.n_fft, hop)?;
    Ok(mel_from_stft(&s, fb))
}

pub fn mel_of_config(cfg: &Config, w: &Waveform, fb: &MelFilterbank) -> Result<MelSpectrogram> {
    mel_spectrogram_hop(w, fb, cfg.hop)
}

/// Relative Frobenius distance between an STFT magnitude and a target.
fn spectral_convergence(mag: &Array, target: &Array) -> f64 {
    let num: f64 = mag
        .data
        .iter()
        .zip(&target.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let den: f64 = target.data.iter().map(|v| v * v).sum();
    (num / den.max(1e-30)).sqrt()
}

pub struct GriffinLimResult {
    pub waveform: Waveform,
    /// Spectral-convergence error after each iteration.
    pub errors: Vec<f64>,
}

/// Invert a mel spectrogram to a waveform: mel -> linear magnitude via the
/// clamped pseudo-inverse, then Griffin-Lim phase retrieval from zero phase.
pub fn griffin_lim(
    m: &MelSpectrogram,
    fb: &MelFilterbank,
    hop: usize,
    iters: usize,
    out_len: usize,
) -> Result<GriffinLimResult> {
    if iters < 1 {
        return Err(SvqaError::InvalidArgument("griffin_lim: iters >= 1".into()));
    }
    let frames = m.frames();
    let bands = m.mel_bands();
    let n_bins = fb.n_fft / 2 + 1;
    let pinv = fb.pseudo_inverse(); // [bins, m]

    // Target linear magnitude, frames x bins.
    let mut target = vec![0.0; frames * n_bins];
    for f in 0..frames {
        for b in 0..n_bins {
            let mut acc = 0.0;
            for j in 0..bands {
                acc += pinv.data[b * bands + j] * fb.denormalize(m.values.data[j * frames + f]);
            }
            target[f * n_bins + b] = acc.max(0.0);
        }
    }
    let target = Array::new(vec![frames, n_bins], target);

    let mut phase = vec![0.0f64; frames * n_bins];
    let mut errors = Vec::with_capacity(iters);
    let mut samples = vec![0.0; out_len];
    for _ in 0..iters {
        let bins: Vec<Complex<f64>> = target
            .data
            .iter()
            .zip(&phase)
            .map(|(&mag, &p)| Complex::from_polar(mag, p))
            .collect();
        let s = Stft {
            bins,
            frames,
            n_fft: fb.n_fft,
            hop,
        };
        samples = istft(&s, out_len);
        let wav = Waveform::new(samples.clone(), fb.sample_rate);
        let re = stft(&wav, fb.n_fft, hop)?;
        errors.push(spectral_convergence(&re.magnitude(), &target));
        for (p, c) in phase.iter_mut().zip(&re.bins) {
            *p = c.arg();
        }
    }
    let mut waveform = Waveform::new(samples, fb.sample_rate);
    waveform.clamp();
    Ok(GriffinLimResult { waveform, errors })
}

// ---------------------------------------------------------------------------
// WAV PCM-16 mono I/O

pub fn wav_write(path: &Path, w: &Waveform) -> Result<()> {
    let n = w.samples.len();
    let data_len = (n * 2) as u32;
    let mut buf = Vec::with_capacity(44 + n * 2);
    buf.extend_from_slice(b"RIFF");
    buf.extend_from_slice(&(36 + data_len).to_le_bytes());
    buf.extend_from_slice(b"WAVE");
    buf.extend_from_slice(b"fmt ");
    buf.extend_from_slice(&16u32.to_le_bytes());
    buf.extend_from_slice(&1u16.to_le_bytes()); // PCM
    buf.extend_from_slice(&1u16.to_le_bytes()); // mono
    buf.extend_from_slice(&(w.sample_rate as u32).to_le_bytes());
    buf.extend_from_slice(&((w.sample_rate * 2) as u32).to_le_bytes());
    buf.extend_from_slice(&2u16.to_le_bytes()); // block align
    buf.extend_from_slice(&16u16.to_le_bytes()); // bits per sample
    buf.extend_from_slice(b"data");
    buf.extend_from_slice(&data_len.to_le_bytes());
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn wav_read(path: &Path) -> Result<Waveform> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let fail = |m: &str| SvqaError::Wav(format!("{}: {m}", path.display()));
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(fail("not a RIFF/WAVE file"));
    }
    let mut pos = 12;
    let mut sample_rate = 0usize;
    let mut got_fmt = false;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_end = pos + 8 + size;
        if body_end > bytes.len() {
            return Err(fail("truncated chunk"));
        }
        let body = &bytes[pos + 8..body_end];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(fail("fmt chunk too small"));
                }
                let format = u16::from_le_bytes(body[0..2].try_into().unwrap());
                let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                sample_rate = u32::from_le_bytes(body[4..8].try_into().unwrap()) as usize;
                let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                if format != 1 || bits != 16 {
                    return Err(fail("only PCM 16-bit supported"));
                }
                if channels != 1 {
                    return Err(fail("only mono supported"));
                }
                got_fmt = true;
            }
            b"data" => data = Some(body),
            _ => {}
        }
        pos = body_end + (size & 1);
    }
    if !got_fmt {
        return Err(fail("missing fmt chunk"));
    }
    let data = data.ok_or_else(|| fail("missing data chunk"))?;
    let samples: Vec<f64> = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
        .collect();
    Ok(Waveform::new(samples, sample_rate))
}
