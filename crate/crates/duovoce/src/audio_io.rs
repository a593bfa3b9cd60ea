//! WAV I/O and the core waveform types.
//!
//! Captures are stereo WAV files with the vibration sensor on the left
//! channel and the microphone on the right. Integer samples are 16-bit PCM
//! scaled by 1/32768; 32-bit float files pass through untouched.

use std::path::Path;

use thiserror::Error;

/// Every stage of the pipeline runs at this rate.
pub const CANONICAL_SAMPLE_RATE_HZ: u32 = 16_000;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("{path}: not a WAV file ({detail})")]
    NotWav { path: String, detail: String },
    #[error("{path}: expected {expected} channel(s), got {got}")]
    ChannelCount { path: String, expected: u16, got: u16 },
    #[error("{path}: unsupported sample encoding ({detail})")]
    UnsupportedEncoding { path: String, detail: String },
    #[error("channel length mismatch: vib {vib} samples, mic {mic} samples")]
    LengthMismatch { vib: usize, mic: usize },
    #[error("channel sample rate mismatch: vib {vib} Hz, mic {mic} Hz")]
    RateMismatch { vib: u32, mic: u32 },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Mono audio buffer. Samples are nominally in `[-1, 1]` but the float
/// domain is never clamped; clamping happens only at integer quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self { samples: vec![0.0; len], sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Root-mean-square level, accumulated in f64 in index order.
    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let sum: f64 = self.samples.iter().map(|&s| s as f64 * s as f64).sum();
        (sum / self.samples.len() as f64).sqrt()
    }
}

/// Time-synchronized two-channel capture: body-conducted vibration sensor
/// plus air microphone. Both channels share length and sample rate.
#[derive(Debug, Clone)]
pub struct DualCapture {
    pub vib: Waveform,
    pub mic: Waveform,
}

impl DualCapture {
    pub fn new(vib: Waveform, mic: Waveform) -> Result<Self, AudioError> {
        if vib.samples.len() != mic.samples.len() {
            return Err(AudioError::LengthMismatch { vib: vib.samples.len(), mic: mic.samples.len() });
        }
        if vib.sample_rate != mic.sample_rate {
            return Err(AudioError::RateMismatch { vib: vib.sample_rate, mic: mic.sample_rate });
        }
        Ok(Self { vib, mic })
    }

    pub fn len(&self) -> usize {
        self.mic.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mic.samples.is_empty()
    }

    pub fn sample_rate(&self) -> u32 {
        self.mic.sample_rate
    }
}

/// On-disk sample encoding for writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleFormat {
    Int16,
    Float32,
}

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

fn map_hound(path: &Path, err: hound::Error) -> AudioError {
    match err {
        hound::Error::IoError(source) => AudioError::Io { path: path_str(path), source },
        hound::Error::FormatError(detail) => {
            AudioError::NotWav { path: path_str(path), detail: detail.to_string() }
        }
        hound::Error::Unsupported => AudioError::UnsupportedEncoding {
            path: path_str(path),
            detail: "unsupported WAV feature".to_string(),
        },
        other => AudioError::NotWav { path: path_str(path), detail: other.to_string() },
    }
}

/// Reads every channel of a WAV file as interleaved f32 samples.
fn read_channels(path: &Path) -> Result<(Vec<f32>, hound::WavSpec), AudioError> {
    let mut reader = hound::WavReader::open(path).map_err(|e| map_hound(path, e))?;
    let spec = reader.spec();
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(|e| map_hound(path, e))?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .collect::<Result<_, _>>()
            .map_err(|e| map_hound(path, e))?,
        (format, bits) => {
            return Err(AudioError::UnsupportedEncoding {
                path: path_str(path),
                detail: format!("{format:?} {bits}-bit"),
            })
        }
    };
    Ok((samples, spec))
}

/// Reads a mono WAV file.
pub fn read_wav(path: &Path) -> Result<Waveform, AudioError> {
    let (samples, spec) = read_channels(path)?;
    if spec.channels != 1 {
        return Err(AudioError::ChannelCount { path: path_str(path), expected: 1, got: spec.channels });
    }
    Ok(Waveform::new(samples, spec.sample_rate))
}

/// Reads a stereo capture: left channel = vibration, right channel = mic.
pub fn read_capture(path: &Path) -> Result<DualCapture, AudioError> {
    let (samples, spec) = read_channels(path)?;
    if spec.channels != 2 {
        return Err(AudioError::ChannelCount { path: path_str(path), expected: 2, got: spec.channels });
    }
    let mut vib = Vec::with_capacity(samples.len() / 2);
    let mut mic = Vec::with_capacity(samples.len() / 2);
    for pair in samples.chunks_exact(2) {
        vib.push(pair[0]);
        mic.push(pair[1]);
    }
    DualCapture::new(Waveform::new(vib, spec.sample_rate), Waveform::new(mic, spec.sample_rate))
}

/// Clamps to `[-1, 1]` and quantizes to i16 with the 1/32768 convention.
fn quantize(sample: f32) -> i16 {
    let clamped = sample.clamp(-1.0, 1.0);
    let scaled = (clamped * 32768.0).round();
    scaled.clamp(-32768.0, 32767.0) as i16
}

fn write_interleaved(
    path: &Path,
    channels: &[&[f32]],
    sample_rate: u32,
    format: SampleFormat,
) -> Result<(), AudioError> {
    let spec = hound::WavSpec {
        channels: channels.len() as u16,
        sample_rate,
        bits_per_sample: match format {
            SampleFormat::Int16 => 16,
            SampleFormat::Float32 => 32,
        },
        sample_format: match format {
            SampleFormat::Int16 => hound::SampleFormat::Int,
            SampleFormat::Float32 => hound::SampleFormat::Float,
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| map_hound(path, e))?;
    let len = channels[0].len();
    for i in 0..len {
        for ch in channels {
            match format {
                SampleFormat::Int16 => {
                    writer.write_sample(quantize(ch[i])).map_err(|e| map_hound(path, e))?
                }
                SampleFormat::Float32 => {
                    writer.write_sample(ch[i]).map_err(|e| map_hound(path, e))?
                }
            }
        }
    }
    writer.finalize().map_err(|e| map_hound(path, e))
}

/// Writes a mono WAV file.
pub fn write_wav(path: &Path, wave: &Waveform, format: SampleFormat) -> Result<(), AudioError> {
    write_interleaved(path, &[&wave.samples], wave.sample_rate, format)
}

/// Writes a stereo capture, vibration left, microphone right.
pub fn write_capture(path: &Path, capture: &DualCapture, format: SampleFormat) -> Result<(), AudioError> {
    write_interleaved(
        path,
        &[&capture.vib.samples, &capture.mic.samples],
        capture.sample_rate(),
        format,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random_wave(len: usize, seed: u64) -> Waveform {
        let mut r = rng::substream(seed, "audio-test", 0);
        let samples = (0..len).map(|_| rng::uniform_in(&mut r, -1.0, 1.0) as f32).collect();
        Waveform::new(samples, 16_000)
    }

    #[test]
    fn int16_roundtrip_within_one_step() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.wav");
        let wave = random_wave(4000, 1);
        write_wav(&path, &wave, SampleFormat::Int16).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate, 16_000);
        assert_eq!(back.len(), wave.len());
        let max_err = wave
            .samples
            .iter()
            .zip(&back.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err <= 1.0 / 32768.0, "max_err = {max_err}");
    }

    #[test]
    fn float32_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.wav");
        let wave = random_wave(1000, 2);
        write_wav(&path, &wave, SampleFormat::Float32).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(wave.samples, back.samples);
    }

    #[test]
    fn out_of_range_samples_clamp_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.wav");
        let wave = Waveform::new(vec![1.5, -2.0, 0.25], 16_000);
        write_wav(&path, &wave, SampleFormat::Int16).unwrap();
        let back = read_wav(&path).unwrap();
        assert!((back.samples[0] - 1.0).abs() <= 1.0 / 32768.0);
        assert!((back.samples[1] + 1.0).abs() <= 1.0 / 32768.0);
        assert!((back.samples[2] - 0.25).abs() <= 1.0 / 32768.0);
    }

    #[test]
    fn capture_roundtrip_keeps_channel_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.wav");
        let vib = Waveform::new(vec![0.0, 0.5, 0.5, 0.0], 16_000);
        let mic = Waveform::new(vec![0.25, -0.25, 0.75, -0.75], 16_000);
        let capture = DualCapture::new(vib, mic).unwrap();
        write_capture(&path, &capture, SampleFormat::Int16).unwrap();
        let back = read_capture(&path).unwrap();
        assert!((back.vib.samples[1] - 0.5).abs() < 1e-6);
        assert!((back.mic.samples[2] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn channel_count_is_validated() {
        let dir = tempfile::tempdir().unwrap();
        let mono = dir.path().join("m.wav");
        write_wav(&mono, &random_wave(64, 3), SampleFormat::Int16).unwrap();
        match read_capture(&mono) {
            Err(AudioError::ChannelCount { expected: 2, got: 1, .. }) => {}
            other => panic!("expected channel count error, got {other:?}"),
        }

        let stereo = dir.path().join("s.wav");
        let w = random_wave(64, 4);
        let capture = DualCapture::new(w.clone(), w).unwrap();
        write_capture(&stereo, &capture, SampleFormat::Int16).unwrap();
        match read_wav(&stereo) {
            Err(AudioError::ChannelCount { expected: 1, got: 2, .. }) => {}
            other => panic!("expected channel count error, got {other:?}"),
        }
    }

    #[test]
    fn garbage_bytes_are_not_a_wav() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.wav");
        std::fs::write(&path, b"definitely not RIFF data").unwrap();
        match read_wav(&path) {
            Err(AudioError::NotWav { .. }) => {}
            other => panic!("expected NotWav, got {other:?}"),
        }
    }

    #[test]
    fn unusual_bit_depths_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b24.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16_000,
            bits_per_sample: 24,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(&path, spec).unwrap();
        for v in [0i32, 1 << 20, -(1 << 20)] {
            writer.write_sample(v).unwrap();
        }
        writer.finalize().unwrap();
        match read_wav(&path) {
            Err(AudioError::UnsupportedEncoding { .. }) => {}
            other => panic!("expected UnsupportedEncoding, got {other:?}"),
        }
    }

    #[test]
    fn mismatched_channels_rejected_at_construction() {
        let a = Waveform::new(vec![0.0; 10], 16_000);
        let b = Waveform::new(vec![0.0; 11], 16_000);
        assert!(matches!(DualCapture::new(a, b), Err(AudioError::LengthMismatch { .. })));

        let c = Waveform::new(vec![0.0; 10], 16_000);
        let d = Waveform::new(vec![0.0; 10], 8_000);
        assert!(matches!(DualCapture::new(c, d), Err(AudioError::RateMismatch { .. })));
    }

    #[test]
    fn rms_matches_closed_forms() {
        let constant = Waveform::new(vec![0.5; 1000], 16_000);
        assert!((constant.rms() - 0.5).abs() < 1e-9);

        // 100 whole periods of a unit sine: rms = 1/sqrt(2).
        let n = 16_000;
        let sine: Vec<f32> = (0..n)
            .map(|i| (std::f64::consts::TAU * 100.0 * i as f64 / n as f64).sin() as f32)
            .collect();
        let wave = Waveform::new(sine, 16_000);
        let expected = std::f64::consts::FRAC_1_SQRT_2;
        assert!((wave.rms() - expected).abs() / expected < 1e-6);
    }

    #[test]
    fn rms_is_scale_homogeneous() {
        // Power-of-two scales are exact in f32, so the identity is tight.
        for seed in 0..8 {
            let wave = random_wave(2048, 100 + seed);
            for scale in [0.5f32, 2.0, 4.0, -8.0] {
                let scaled = Waveform::new(
                    wave.samples.iter().map(|&s| s * scale).collect(),
                    wave.sample_rate,
                );
                let lhs = scaled.rms();
                let rhs = scale.abs() as f64 * wave.rms();
                assert!((lhs - rhs).abs() / rhs.max(1e-30) < 1e-9);
            }
        }
    }

    #[test]
    fn empty_waveform_has_zero_rms() {
        assert_eq!(Waveform::new(vec![], 16_000).rms(), 0.0);
    }
}
