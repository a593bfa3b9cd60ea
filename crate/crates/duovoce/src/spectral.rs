//! Windowed STFT/iSTFT with perfect reconstruction, plus mel features.
//!
//! Two parallel implementations share the same framing conventions:
//! the public functions here run in f64 end to end and are the numeric
//! reference, while [`stft_tensor`]/[`istft_tensor`] build the identical
//! pipeline out of tape primitives so gradients can flow through analysis
//! and synthesis during training. Both use reflection padding of half a
//! window so frame centers align with sample times, and synthesis divides
//! by the summed squared window (window-square normalized overlap-add).

use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio_io::Waveform;
use crate::tensor::dsp::{reflect_index, run_fft};
use crate::tensor::{Tape, Tensor, TensorError};

pub const MEL_LOG_EPS: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("invalid stft config: {detail}")]
    InvalidConfig { detail: String },
    #[error("waveform is empty")]
    EmptyWaveform,
    #[error("{what} contains non-finite values")]
    NonFinite { what: &'static str },
    #[error("spectrogram shape mismatch: {detail}")]
    ShapeMismatch { detail: String },
    #[error("length {len} is not encodable by {frames} frames")]
    LengthNotEncodable { len: usize, frames: usize },
    #[error("overlap-add denominator vanishes at sample {position}")]
    ZeroDenominator { position: usize },
    #[error("mel filter {index} spans no fft bins")]
    EmptyMelFilter { index: usize },
    #[error("invalid mel config: {detail}")]
    InvalidMelRange { detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    Hann,
    Rect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub fft_size: usize,
    pub win_length: usize,
    pub hop_length: usize,
    pub window: WindowKind,
}

impl Default for StftConfig {
    fn default() -> Self {
        // 25 ms window, 6.25 ms hop at 16 kHz.
        StftConfig { fft_size: 512, win_length: 400, hop_length: 100, window: WindowKind::Hann }
    }
}

impl StftConfig {
    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub(crate) fn pad(&self) -> usize {
        self.win_length / 2
    }

    pub fn validate(&self) -> Result<(), SpectralError> {
        let fail = |detail: String| Err(SpectralError::InvalidConfig { detail });
        if self.fft_size == 0 || !self.fft_size.is_power_of_two() {
            return fail(format!("fft_size {} is not a power of two", self.fft_size));
        }
        if self.win_length == 0 || self.win_length > self.fft_size {
            return fail(format!(
                "win_length {} must be in 1..={}",
                self.win_length, self.fft_size
            ));
        }
        if self.hop_length == 0 {
            return fail("hop_length must be positive".into());
        }
        // Overlap requirement for a nowhere-vanishing synthesis denominator.
        let max_hop = match self.window {
            WindowKind::Hann => self.win_length / 2,
            WindowKind::Rect => self.win_length,
        };
        if self.hop_length > max_hop {
            return fail(format!(
                "hop_length {} breaks overlap-add coverage for this window (max {max_hop})",
                self.hop_length
            ));
        }
        Ok(())
    }

    /// Frame count for a signal of `len` samples after reflection padding.
    pub fn frames_for(&self, len: usize) -> usize {
        let padded = len + 2 * self.pad();
        1 + (padded - self.win_length) / self.hop_length
    }

    /// Length of the overlap-add buffer synthesized from `frames` frames.
    fn ola_len(&self, frames: usize) -> usize {
        (frames - 1) * self.hop_length + self.win_length
    }

    /// The signal length whose padded analysis ends flush with the last
    /// frame. This is the length [`istft`] reconstructs.
    pub fn canonical_len(&self, frames: usize) -> usize {
        self.ola_len(frames) - 2 * self.pad()
    }
}

#[derive(Debug, Clone)]
pub struct ComplexSpectrogram {
    /// Row-major `[frames, bins]`.
    pub real: Vec<f32>,
    pub imag: Vec<f32>,
    pub frames: usize,
    pub sample_rate: u32,
    pub config: StftConfig,
}

impl ComplexSpectrogram {
    pub fn new(
        real: Vec<f32>,
        imag: Vec<f32>,
        frames: usize,
        sample_rate: u32,
        config: StftConfig,
    ) -> Result<Self, SpectralError> {
        config.validate()?;
        let expected = frames * config.bins();
        if real.len() != expected || imag.len() != expected {
            return Err(SpectralError::ShapeMismatch {
                detail: format!(
                    "expected {frames} x {} = {expected} entries, got re {} / im {}",
                    config.bins(),
                    real.len(),
                    imag.len()
                ),
            });
        }
        let spec = ComplexSpectrogram { real, imag, frames, sample_rate, config };
        spec.check_finite()?;
        Ok(spec)
    }

    pub fn bins(&self) -> usize {
        self.config.bins()
    }

    fn check_finite(&self) -> Result<(), SpectralError> {
        if self.real.iter().chain(&self.imag).all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(SpectralError::NonFinite { what: "spectrogram" })
        }
    }
}

pub(crate) fn window_values(kind: WindowKind, win_length: usize) -> Vec<f64> {
    match kind {
        WindowKind::Hann => (0..win_length)
            .map(|n| 0.5 * (1.0 - (std::f64::consts::TAU * n as f64 / win_length as f64).cos()))
            .collect(),
        WindowKind::Rect => vec![1.0; win_length],
    }
}

/// Summed squared window at every overlap-add position.
fn ola_denominator(cfg: &StftConfig, frames: usize) -> Vec<f64> {
    let w = window_values(cfg.window, cfg.win_length);
    let mut den = vec![0f64; cfg.ola_len(frames)];
    for t in 0..frames {
        let base = t * cfg.hop_length;
        for (j, wj) in w.iter().enumerate() {
            den[base + j] += wj * wj;
        }
    }
    den
}

/// Short-time Fourier transform with reflection padding of half a window.
pub fn stft(wave: &Waveform, cfg: &StftConfig) -> Result<ComplexSpectrogram, SpectralError> {
    cfg.validate()?;
    if wave.samples.is_empty() {
        return Err(SpectralError::EmptyWaveform);
    }
    if !wave.samples.iter().all(|v| v.is_finite()) {
        return Err(SpectralError::NonFinite { what: "waveform" });
    }
    let len = wave.samples.len();
    let frames = cfg.frames_for(len);
    let bins = cfg.bins();
    let w = window_values(cfg.window, cfg.win_length);
    let pad = cfg.pad();

    let mut real = vec![0f32; frames * bins];
    let mut imag = vec![0f32; frames * bins];
    let mut buf = vec![Complex::default(); cfg.fft_size];
    for t in 0..frames {
        let base = t * cfg.hop_length;
        for item in buf.iter_mut() {
            *item = Complex::default();
        }
        for (j, wj) in w.iter().enumerate() {
            let s = wave.samples[reflect_index(base + j, pad, len)] as f64;
            buf[j] = Complex::new(s * wj, 0.0);
        }
        run_fft(&mut buf, false);
        for k in 0..bins {
            real[t * bins + k] = buf[k].re as f32;
            imag[t * bins + k] = buf[k].im as f32;
        }
    }
    Ok(ComplexSpectrogram { real, imag, frames, sample_rate: wave.sample_rate, config: *cfg })
}

/// Inverse STFT at the canonical length `(frames - 1) * hop` (+1 for odd
/// window lengths): the longest signal whose analysis ends flush with the
/// last frame.
pub fn istft(spec: &ComplexSpectrogram) -> Result<Waveform, SpectralError> {
    istft_with_length(spec, spec.config.canonical_len(spec.frames))
}

/// Inverse STFT cropped to an explicit original length. The length must be
/// consistent with the spectrogram's frame count.
pub fn istft_with_length(spec: &ComplexSpectrogram, len: usize) -> Result<Waveform, SpectralError> {
    let cfg = &spec.config;
    cfg.validate()?;
    let bins = cfg.bins();
    if spec.real.len() != spec.frames * bins || spec.imag.len() != spec.frames * bins {
        return Err(SpectralError::ShapeMismatch {
            detail: format!(
                "expected {} x {bins} entries, got re {} / im {}",
                spec.frames,
                spec.real.len(),
                spec.imag.len()
            ),
        });
    }
    spec.check_finite()?;
    let pad = cfg.pad();
    if len == 0 || cfg.frames_for(len) != spec.frames || pad + len > cfg.ola_len(spec.frames) {
        return Err(SpectralError::LengthNotEncodable { len, frames: spec.frames });
    }

    let den = ola_denominator(cfg, spec.frames);
    for (offset, d) in den[pad..pad + len].iter().enumerate() {
        if *d < 1e-8 {
            return Err(SpectralError::ZeroDenominator { position: offset });
        }
    }

    let w = window_values(cfg.window, cfg.win_length);
    let n = cfg.fft_size;
    let scale = 1.0 / n as f64;
    let mut acc = vec![0f64; cfg.ola_len(spec.frames)];
    let mut buf = vec![Complex::default(); n];
    for t in 0..spec.frames {
        let row = t * bins;
        buf[0] = Complex::new(spec.real[row] as f64, 0.0);
        buf[n / 2] = Complex::new(spec.real[row + n / 2] as f64, 0.0);
        for k in 1..n / 2 {
            let c = Complex::new(spec.real[row + k] as f64, spec.imag[row + k] as f64);
            buf[k] = c;
            buf[n - k] = c.conj();
        }
        run_fft(&mut buf, true);
        let base = t * cfg.hop_length;
        for (j, wj) in w.iter().enumerate() {
            acc[base + j] += buf[j].re * scale * wj;
        }
    }

    let samples = (0..len).map(|i| (acc[pad + i] / den[pad + i]) as f32).collect();
    Ok(Waveform { samples, sample_rate: spec.sample_rate })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub n_mels: usize,
    pub f_min_hz: f32,
    pub f_max_hz: f32,
    pub sample_rate_hz: u32,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig { n_mels: 80, f_min_hz: 0.0, f_max_hz: 8000.0, sample_rate_hz: 16000 }
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// The `n_mels + 2` triangle breakpoints in Hz, equally spaced on the mel
/// scale between `f_min` and `f_max`.
pub(crate) fn mel_breakpoints(mel: &MelConfig) -> Result<Vec<f64>, SpectralError> {
    if mel.n_mels == 0 {
        return Err(SpectralError::InvalidMelRange { detail: "n_mels must be positive".into() });
    }
    let nyquist = mel.sample_rate_hz as f64 / 2.0;
    let (lo, hi) = (mel.f_min_hz as f64, mel.f_max_hz as f64);
    if !(0.0 <= lo && lo < hi && hi <= nyquist) {
        return Err(SpectralError::InvalidMelRange {
            detail: format!("need 0 <= f_min < f_max <= {nyquist}, got [{lo}, {hi}]"),
        });
    }
    let (mlo, mhi) = (hz_to_mel(lo), hz_to_mel(hi));
    let step = (mhi - mlo) / (mel.n_mels + 1) as f64;
    Ok((0..mel.n_mels + 2).map(|i| mel_to_hz(mlo + step * i as f64)).collect())
}

fn mel_filterbank_f64(mel: &MelConfig, fft_size: usize) -> Result<Vec<f64>, SpectralError> {
    if fft_size == 0 || fft_size % 2 != 0 {
        return Err(SpectralError::InvalidConfig {
            detail: format!("fft_size {fft_size} must be even and positive"),
        });
    }
    let pts = mel_breakpoints(mel)?;
    let bins = fft_size / 2 + 1;
    let bin_hz = mel.sample_rate_hz as f64 / fft_size as f64;
    let mut bank = vec![0f64; mel.n_mels * bins];
    for m in 0..mel.n_mels {
        let (left, center, right) = (pts[m], pts[m + 1], pts[m + 2]);
        let row = &mut bank[m * bins..(m + 1) * bins];
        let mut any = false;
        for (k, slot) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            let v = if f <= center {
                (f - left) / (center - left)
            } else {
                (right - f) / (right - center)
            };
            if v > 0.0 {
                *slot = v;
                any = true;
            }
        }
        if !any {
            return Err(SpectralError::EmptyMelFilter { index: m });
        }
    }
    Ok(bank)
}

/// Triangular mel filterbank, row-major `[n_mels, fft_size/2 + 1]`.
pub fn mel_filterbank(mel: &MelConfig, fft_size: usize) -> Result<Vec<f32>, SpectralError> {
    Ok(mel_filterbank_f64(mel, fft_size)?.into_iter().map(|v| v as f32).collect())
}

#[derive(Debug, Clone)]
pub struct MelSpectrogram {
    /// Row-major `[frames, n_mels]`, natural log of filterbank power.
    pub data: Vec<f32>,
    pub frames: usize,
    pub n_mels: usize,
}

/// Log mel-power spectrogram: `log(filterbank @ |stft|^2 + 1e-10)`.
pub fn mel_spectrogram(
    wave: &Waveform,
    cfg: &StftConfig,
    mel: &MelConfig,
) -> Result<MelSpectrogram, SpectralError> {
    let bank = mel_filterbank_f64(mel, cfg.fft_size)?;
    let spec = stft(wave, cfg)?;
    let bins = spec.bins();
    let mut data = vec![0f32; spec.frames * mel.n_mels];
    for t in 0..spec.frames {
        let row = t * bins;
        for m in 0..mel.n_mels {
            let filt = &bank[m * bins..(m + 1) * bins];
            let mut p = 0f64;
            for k in 0..bins {
                let (re, im) = (spec.real[row + k] as f64, spec.imag[row + k] as f64);
                p += filt[k] * (re * re + im * im);
            }
            data[t * mel.n_mels + m] = (p + MEL_LOG_EPS).ln() as f32;
        }
    }
    Ok(MelSpectrogram { data, frames: spec.frames, n_mels: mel.n_mels })
}

/// Analysis window as an f32 constant tensor, for the on-tape pipeline.
pub(crate) fn window_tensor(cfg: &StftConfig) -> Tensor {
    let w: Vec<f32> = window_values(cfg.window, cfg.win_length).iter().map(|v| *v as f32).collect();
    Tensor::from_vec(w, &[cfg.win_length])
}

/// Mel filterbank transposed to `[bins, n_mels]` for right-multiplication
/// of `[frames, bins]` power spectra on the tape.
pub(crate) fn mel_basis_transposed(mel: &MelConfig, fft_size: usize) -> Result<Tensor, SpectralError> {
    let bank = mel_filterbank_f64(mel, fft_size)?;
    let bins = fft_size / 2 + 1;
    let mut t = vec![0f32; bins * mel.n_mels];
    for m in 0..mel.n_mels {
        for k in 0..bins {
            t[k * mel.n_mels + m] = bank[m * bins + k] as f32;
        }
    }
    Ok(Tensor::from_vec(t, &[bins, mel.n_mels]))
}

/// On-tape STFT of a rank-1 signal tensor. Returns `([frames, bins]` real,
/// `[frames, bins]` imaginary`)`, differentiable end to end.
pub(crate) fn stft_tensor(
    tape: &Tape,
    x: &Tensor,
    cfg: &StftConfig,
) -> Result<(Tensor, Tensor), SpectralError> {
    cfg.validate()?;
    let shape = x.shape();
    if shape.len() != 1 || shape[0] == 0 {
        return Err(SpectralError::ShapeMismatch {
            detail: format!("expected non-empty rank 1 signal, got {shape:?}"),
        });
    }
    let len = shape[0];
    let frames = cfg.frames_for(len);
    let bins = cfg.bins();
    let framed = tape.frame_signal(x, cfg.win_length, cfg.hop_length, cfg.pad(), frames)?;
    let windowed = tape.mul(&framed, &window_tensor(cfg))?;
    let full = if cfg.fft_size > cfg.win_length {
        let zeros = Tensor::zeros(&[frames, cfg.fft_size - cfg.win_length]);
        tape.concat(&[windowed, zeros], 1)?
    } else {
        windowed
    };
    let spec = tape.rdft(&full)?;
    let re = tape.slice(&spec, 1, 0, bins)?;
    let im = tape.slice(&spec, 1, bins, 2 * bins)?;
    Ok((re, im))
}

/// On-tape inverse STFT cropped to `len` samples; the adjoint of every step
/// is exact, so gradients flow back into the spectrogram tensors.
pub(crate) fn istft_tensor(
    tape: &Tape,
    re: &Tensor,
    im: &Tensor,
    cfg: &StftConfig,
    len: usize,
) -> Result<Tensor, SpectralError> {
    cfg.validate()?;
    let bins = cfg.bins();
    let (rs, is) = (re.shape(), im.shape());
    if rs.len() != 2 || rs[1] != bins || rs != is {
        return Err(SpectralError::ShapeMismatch {
            detail: format!("expected matching [frames, {bins}] pairs, got {rs:?} and {is:?}"),
        });
    }
    let frames = rs[0];
    let pad = cfg.pad();
    if len == 0 || cfg.frames_for(len) != frames || pad + len > cfg.ola_len(frames) {
        return Err(SpectralError::LengthNotEncodable { len, frames });
    }
    let den = ola_denominator(cfg, frames);
    let mut recip = vec![0f32; len];
    for (i, slot) in recip.iter_mut().enumerate() {
        let d = den[pad + i];
        if d < 1e-8 {
            return Err(SpectralError::ZeroDenominator { position: i });
        }
        *slot = (1.0 / d) as f32;
    }

    let spec = tape.concat(&[re.clone(), im.clone()], 1)?;
    let time = tape.irdft(&spec, cfg.fft_size)?;
    let cropped = tape.slice(&time, 1, 0, cfg.win_length)?;
    let windowed = tape.mul(&cropped, &window_tensor(cfg))?;
    let ola = tape.overlap_add(&windowed, cfg.hop_length, cfg.ola_len(frames))?;
    let seg = tape.slice(&ola, 0, pad, pad + len)?;
    Ok(tape.mul(&seg, &Tensor::from_vec(recip, &[len]))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::grad_check;

    fn noise(len: usize, amp: f32, seed: u64) -> Waveform {
        let mut r = rng::substream(seed, "spectral-test", 0);
        Waveform {
            samples: (0..len).map(|_| rng::uniform_in(&mut r, -amp as f64, amp as f64) as f32).collect(),
            sample_rate: 16000,
        }
    }

    fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0f32, f32::max)
    }

    #[test]
    fn frame_count_formula() {
        let cfg = StftConfig::default();
        assert_eq!(cfg.frames_for(8000), 81);
        assert_eq!(cfg.frames_for(250), 3);
        assert_eq!(cfg.frames_for(1), 1);
        assert_eq!(cfg.canonical_len(81), 8000);
    }

    #[test]
    fn config_validation_rejects_bad_setups() {
        let ok = StftConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            StftConfig { fft_size: 500, ..ok },
            StftConfig { win_length: 600, ..ok },
            StftConfig { hop_length: 0, ..ok },
            // Hann needs at least 2x overlap.
            StftConfig { hop_length: 250, ..ok },
        ] {
            assert!(
                matches!(stft(&noise(1000, 0.5, 1), &bad), Err(SpectralError::InvalidConfig { .. })),
                "{bad:?} accepted"
            );
        }
        assert!(matches!(stft(&Waveform { samples: vec![], sample_rate: 16000 }, &ok), Err(SpectralError::EmptyWaveform)));
    }

    #[test]
    fn dc_concentrates_in_bin_zero() {
        let cfg = StftConfig { fft_size: 512, win_length: 512, hop_length: 512, window: WindowKind::Rect };
        let wave = Waveform { samples: vec![0.5; 2048], sample_rate: 16000 };
        let spec = stft(&wave, &cfg).unwrap();
        assert_eq!(spec.frames, 5);
        for t in 0..spec.frames {
            let row = t * spec.bins();
            let dc = (spec.real[row].powi(2) + spec.imag[row].powi(2)).sqrt();
            assert!((dc - 256.0).abs() < 1e-3);
            for k in 1..spec.bins() {
                let mag = (spec.real[row + k].powi(2) + spec.imag[row + k].powi(2)).sqrt();
                assert!(mag < 1e-6 * dc, "bin {k} leaks: {mag}");
            }
        }
    }

    #[test]
    fn bin_centered_sine_peaks_at_its_bin() {
        let cfg = StftConfig { fft_size: 512, win_length: 512, hop_length: 256, window: WindowKind::Rect };
        // 1000 Hz = bin 32 at fs 16000, fft 512.
        let wave = Waveform {
            samples: (0..4096)
                .map(|i| (std::f64::consts::TAU * 1000.0 * i as f64 / 16000.0).sin() as f32)
                .collect(),
            sample_rate: 16000,
        };
        let spec = stft(&wave, &cfg).unwrap();
        // Skip first/last frames: reflection-padded edges break pure periodicity.
        for t in 1..spec.frames - 1 {
            let row = t * spec.bins();
            let peak = (0..spec.bins())
                .max_by(|&a, &b| {
                    let ma = spec.real[row + a].powi(2) + spec.imag[row + a].powi(2);
                    let mb = spec.real[row + b].powi(2) + spec.imag[row + b].powi(2);
                    ma.partial_cmp(&mb).unwrap()
                })
                .unwrap();
            assert_eq!(peak, 32, "frame {t}");
        }
    }

    #[test]
    fn roundtrip_is_exact_to_1e6() {
        let wave = noise(8000, 1.0, 2);
        let spec = stft(&wave, &StftConfig::default()).unwrap();
        let back = istft(&spec).unwrap();
        assert_eq!(back.samples.len(), 8000);
        assert_eq!(back.sample_rate, 16000);
        assert!(max_abs_diff(&wave.samples, &back.samples) < 1e-6);
    }

    #[test]
    fn roundtrip_at_non_hop_multiple_length() {
        let wave = noise(8050, 1.0, 3);
        let spec = stft(&wave, &StftConfig::default()).unwrap();
        let back = istft_with_length(&spec, 8050).unwrap();
        assert!(max_abs_diff(&wave.samples, &back.samples) < 1e-6);

        assert!(matches!(
            istft_with_length(&spec, 7000),
            Err(SpectralError::LengthNotEncodable { .. })
        ));
    }

    #[test]
    fn zero_spectrogram_synthesizes_silence() {
        let cfg = StftConfig::default();
        let spec = ComplexSpectrogram::new(vec![0.0; 10 * cfg.bins()], vec![0.0; 10 * cfg.bins()], 10, 16000, cfg).unwrap();
        let wave = istft(&spec).unwrap();
        assert_eq!(wave.samples.len(), cfg.canonical_len(10));
        assert!(wave.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stft_is_linear() {
        let cfg = StftConfig::default();
        let x = noise(3000, 0.5, 4);
        let y = noise(3000, 0.5, 5);
        let mixed = Waveform {
            samples: x.samples.iter().zip(&y.samples).map(|(a, b)| 0.3 * a + 0.7 * b).collect(),
            sample_rate: 16000,
        };
        let sx = stft(&x, &cfg).unwrap();
        let sy = stft(&y, &cfg).unwrap();
        let sm = stft(&mixed, &cfg).unwrap();
        for i in 0..sm.real.len() {
            assert!((sm.real[i] - (0.3 * sx.real[i] + 0.7 * sy.real[i])).abs() < 1e-6);
            assert!((sm.imag[i] - (0.3 * sx.imag[i] + 0.7 * sy.imag[i])).abs() < 1e-6);
        }
    }

    #[test]
    fn parseval_energy_relation_holds() {
        let cfg = StftConfig::default();
        let wave = noise(4000, 0.8, 6);
        let spec = stft(&wave, &cfg).unwrap();
        let w = window_values(cfg.window, cfg.win_length);
        let pad = cfg.pad();
        let bins = spec.bins();
        for t in 0..spec.frames {
            let mut time_energy = 0f64;
            for (j, wj) in w.iter().enumerate() {
                let s = wave.samples[reflect_index(t * cfg.hop_length + j, pad, 4000)] as f64 * wj;
                time_energy += s * s;
            }
            let mut freq_energy = 0f64;
            for k in 0..bins {
                let m2 = (spec.real[t * bins + k] as f64).powi(2) + (spec.imag[t * bins + k] as f64).powi(2);
                let weight = if k == 0 || k == cfg.fft_size / 2 { 1.0 } else { 2.0 };
                freq_energy += weight * m2;
            }
            freq_energy /= cfg.fft_size as f64;
            let rel = (time_energy - freq_energy).abs() / time_energy.max(1e-12);
            assert!(rel < 1e-5, "frame {t}: rel = {rel}");
        }
    }

    #[test]
    fn mel_filterbank_shape_and_monotone_centers() {
        let mel = MelConfig::default();
        let bank = mel_filterbank(&mel, 512).unwrap();
        assert_eq!(bank.len(), 80 * 257);
        assert!(bank.iter().all(|&v| v >= 0.0));

        let pts = mel_breakpoints(&mel).unwrap();
        assert!(pts.windows(2).all(|p| p[0] < p[1]), "breakpoints not increasing");

        // Interior bins carry positive total weight across filters.
        for k in 1..256 {
            let total: f32 = (0..80).map(|m| bank[m * 257 + k]).sum();
            assert!(total > 0.0, "bin {k} uncovered");
        }
    }

    #[test]
    fn too_many_mel_bands_error() {
        let mel = MelConfig { n_mels: 300, ..MelConfig::default() };
        assert!(matches!(mel_filterbank(&mel, 512), Err(SpectralError::EmptyMelFilter { .. })));
    }

    #[test]
    fn mel_range_validation() {
        for (lo, hi) in [(-1.0, 8000.0), (4000.0, 4000.0), (0.0, 9000.0)] {
            let mel = MelConfig { f_min_hz: lo, f_max_hz: hi, ..MelConfig::default() };
            assert!(matches!(mel_filterbank(&mel, 512), Err(SpectralError::InvalidMelRange { .. })), "[{lo}, {hi}]");
        }
    }

    #[test]
    fn mel_spectrogram_of_silence_is_log_eps() {
        let wave = Waveform { samples: vec![0.0; 2000], sample_rate: 16000 };
        let m = mel_spectrogram(&wave, &StftConfig::default(), &MelConfig::default()).unwrap();
        let expected = (MEL_LOG_EPS).ln() as f32;
        assert!(m.data.iter().all(|&v| (v - expected).abs() < 1e-6));
    }

    #[test]
    fn mel_spectrogram_monotone_in_amplitude() {
        let quiet = noise(2000, 0.05, 7);
        let loud = Waveform {
            samples: quiet.samples.iter().map(|v| v * 10.0).collect(),
            sample_rate: 16000,
        };
        let mq = mel_spectrogram(&quiet, &StftConfig::default(), &MelConfig::default()).unwrap();
        let ml = mel_spectrogram(&loud, &StftConfig::default(), &MelConfig::default()).unwrap();
        for (l, q) in ml.data.iter().zip(&mq.data) {
            assert!(l >= q);
        }
    }

    #[test]
    fn mel_spectrogram_ignores_sign() {
        let wave = noise(2000, 0.5, 8);
        let flipped = Waveform {
            samples: wave.samples.iter().map(|v| -v).collect(),
            sample_rate: 16000,
        };
        let a = mel_spectrogram(&wave, &StftConfig::default(), &MelConfig::default()).unwrap();
        let b = mel_spectrogram(&flipped, &StftConfig::default(), &MelConfig::default()).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn sine_lands_in_the_band_covering_its_frequency() {
        let cfg = StftConfig::default();
        let mel = MelConfig::default();
        // 1000 Hz sits exactly on bin 32; find the band the filterbank says
        // owns that bin, then check the mel output peaks there.
        let bank = mel_filterbank(&mel, cfg.fft_size).unwrap();
        let expected_band = (0..mel.n_mels)
            .max_by(|&a, &b| bank[a * 257 + 32].partial_cmp(&bank[b * 257 + 32]).unwrap())
            .unwrap();
        let wave = Waveform {
            samples: (0..4000)
                .map(|i| (std::f64::consts::TAU * 1000.0 * i as f64 / 16000.0).sin() as f32)
                .collect(),
            sample_rate: 16000,
        };
        let m = mel_spectrogram(&wave, &cfg, &mel).unwrap();
        for t in 2..m.frames - 2 {
            let row = &m.data[t * m.n_mels..(t + 1) * m.n_mels];
            let argmax = (0..m.n_mels).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap();
            assert_eq!(argmax, expected_band, "frame {t}");
        }
    }

    #[test]
    fn tensor_path_matches_reference() {
        let cfg = StftConfig::default();
        let wave = noise(2000, 0.5, 9);
        let reference = stft(&wave, &cfg).unwrap();

        let tape = Tape::inference();
        let x = Tensor::from_vec(wave.samples.clone(), &[2000]);
        let (re, im) = stft_tensor(&tape, &x, &cfg).unwrap();
        assert_eq!(re.shape(), vec![reference.frames, reference.bins()]);
        assert!(max_abs_diff(&re.to_vec(), &reference.real) < 1e-4);
        assert!(max_abs_diff(&im.to_vec(), &reference.imag) < 1e-4);

        let back = istft_tensor(&tape, &re, &im, &cfg, 2000).unwrap();
        assert!(max_abs_diff(&back.to_vec(), &wave.samples) < 1e-5);
    }

    #[test]
    fn tensor_roundtrip_passes_grad_check() {
        let cfg = StftConfig { fft_size: 8, win_length: 8, hop_length: 4, window: WindowKind::Hann };
        let mut r = rng::substream(10, "spectral-test", 1);
        let x = Tensor::from_vec(
            (0..16).map(|_| rng::uniform_in(&mut r, 0.3, 1.0) as f32).collect(),
            &[16],
        );
        let err = grad_check(
            |t, x| {
                let (re, im) = stft_tensor(t, x, &cfg).map_err(|e| match e {
                    SpectralError::Tensor(t) => t,
                    other => panic!("{other}"),
                })?;
                let y = istft_tensor(t, &re, &im, &cfg, 16).map_err(|e| match e {
                    SpectralError::Tensor(t) => t,
                    other => panic!("{other}"),
                })?;
                t.sum(&t.mul(&y, &y)?)
            },
            &x,
            5e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "err = {err}");
    }
}
