//! Dual-input complex encoder/decoder enhancement network.
//!
//! Two synchronized channels (microphone and vibration sensor) enter as
//! stacked complex spectrogram channels. A frequency-strided complex encoder
//! contracts the spectrum, a complex LSTM models time at the bottleneck, and
//! a mirrored transposed decoder with skip connections emits a complex ratio
//! mask. The mask is applied to the microphone spectrum only: the mic is the
//! channel being denoised, the vibration channel conditions the estimate.
//!
//! Activations are laid out `[batch, channel, freq, time]`. The frequency
//! kernel must be odd so every strided stage mirrors exactly through the
//! decoder; the time kernel is causal-padded and keeps the frame count.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio_io::{self, AudioError, DualCapture, SampleFormat, Waveform};
use crate::checkpoint::{self, CheckpointError};
use crate::complex_nn::{
    complex_leaky_relu, complex_norm, ComplexConvLayer, ComplexConvTransposeLayer, ComplexDense,
    ComplexLstmLayer, ComplexTensor, NnError,
};
use crate::rng;
use crate::spectral::{self, ComplexSpectrogram, SpectralError, StftConfig};
use crate::tensor::{Tape, Tensor, TensorError};

/// Floor inside `sqrt(re^2 + im^2 + eps)` keeping the mask magnitude (and its
/// gradient) finite at the origin.
const MASK_MAG_EPS: f32 = 1e-12;

#[derive(Debug, Error)]
pub enum DdccrnError {
    #[error("invalid model config: {detail}")]
    InvalidConfig { detail: String },
    #[error("input of {len} samples is shorter than one {needed}-sample analysis window")]
    InputTooShort { len: usize, needed: usize },
    #[error("shape mismatch: {detail}")]
    ShapeMismatch { detail: String },
    #[error("checkpoint is missing parameter {name:?}")]
    MissingParam { name: String },
    #[error("checkpoint parameter {name:?} has shape {got:?}, model expects {want:?}")]
    ParamShape { name: String, got: Vec<usize>, want: Vec<usize> },
    #[error("sidecar {path}: {detail}")]
    Sidecar { path: String, detail: String },
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Complex ratio mask style. Variant `E` bounds the magnitude with `tanh`
/// and adds the mask phase to the spectrum phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskVariant {
    E,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdccrnConfig {
    /// Output channels per encoder stage; the decoder mirrors them in
    /// reverse, ending in a single complex mask channel.
    pub encoder_channels: Vec<usize>,
    /// `(freq, time)` kernel extents. The frequency extent must be odd.
    pub kernel: (usize, usize),
    /// Frequency-axis stride of every encoder stage (time stride is 1).
    pub stride_freq: usize,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub mask_variant: MaskVariant,
    pub stft: StftConfig,
}

impl Default for DdccrnConfig {
    fn default() -> Self {
        DdccrnConfig {
            encoder_channels: vec![16, 32, 64, 128],
            kernel: (5, 2),
            stride_freq: 2,
            lstm_hidden: 128,
            lstm_layers: 1,
            mask_variant: MaskVariant::E,
            stft: StftConfig::default(),
        }
    }
}

impl DdccrnConfig {
    pub fn validate(&self) -> Result<(), DdccrnError> {
        self.freq_dims().map(|_| ())
    }

    /// Frequency widths entering each depth: `[bins, f_1, .., f_n]` with
    /// `f_n` the bottleneck width. Errors where the strided chain cannot be
    /// mirrored exactly by the transposed decoder.
    pub fn freq_dims(&self) -> Result<Vec<usize>, DdccrnError> {
        let fail = |detail: String| Err(DdccrnError::InvalidConfig { detail });
        self.stft.validate()?;
        if self.encoder_channels.is_empty() {
            return fail("encoder_channels must not be empty".into());
        }
        if self.encoder_channels.contains(&0) {
            return fail("encoder stage with zero channels".into());
        }
        let (kf, kt) = self.kernel;
        if kf % 2 == 0 || kf == 0 {
            return fail(format!("frequency kernel {kf} must be odd for exact mirroring"));
        }
        if kt == 0 {
            return fail("time kernel must be positive".into());
        }
        if self.stride_freq == 0 {
            return fail("stride_freq must be positive".into());
        }
        if self.lstm_hidden == 0 || self.lstm_layers == 0 {
            return fail("lstm_hidden and lstm_layers must be positive".into());
        }
        let pf = self.freq_pad();
        let mut dims = vec![self.stft.bins()];
        for stage in 0..self.encoder_channels.len() {
            let f = *dims.last().expect("non-empty");
            let span = f + 2 * pf;
            if span < kf || (span - kf) % self.stride_freq != 0 {
                return fail(format!(
                    "frequency width {f} at stage {stage} does not stride evenly \
                     (kernel {kf}, stride {})",
                    self.stride_freq
                ));
            }
            dims.push((span - kf) / self.stride_freq + 1);
        }
        Ok(dims)
    }

    fn freq_pad(&self) -> usize {
        (self.kernel.0 - 1) / 2
    }
}

/// Test hook replacing the learned mask at the application point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskOverride {
    /// Apply the decoder's mask (normal operation).
    None,
    /// Pass the mic spectrum through untouched.
    Unity,
    /// Zero the spectrum.
    Zero,
}

#[derive(Debug)]
pub struct DdccrnModel {
    pub config: DdccrnConfig,
    pub encoder: Vec<ComplexConvLayer>,
    pub lstms: Vec<ComplexLstmLayer>,
    pub dense: Option<ComplexDense>,
    pub decoder: Vec<ComplexConvTransposeLayer>,
}

/// Deterministic model construction: identical `cfg` and `seed` produce
/// bit-identical parameters (and therefore byte-identical checkpoints).
pub fn build(cfg: &DdccrnConfig, seed: u64) -> Result<DdccrnModel, DdccrnError> {
    let dims = cfg.freq_dims()?;
    let mut r = rng::substream(seed, "ddccrn-init", 0);
    let stride = (cfg.stride_freq, 1);
    let pad = (cfg.freq_pad(), 0);

    let mut encoder = Vec::new();
    let mut in_ch = 2;
    for &out_ch in &cfg.encoder_channels {
        encoder.push(ComplexConvLayer::new(in_ch, out_ch, cfg.kernel, stride, pad, &mut r));
        in_ch = out_ch;
    }

    let bottleneck = cfg.encoder_channels.last().expect("non-empty") * dims.last().expect("non-empty");
    let mut lstms = Vec::new();
    let mut lstm_in = bottleneck;
    for _ in 0..cfg.lstm_layers {
        lstms.push(ComplexLstmLayer::new(lstm_in, cfg.lstm_hidden, &mut r));
        lstm_in = cfg.lstm_hidden;
    }
    let dense = ComplexDense::new(cfg.lstm_hidden, bottleneck, &mut r);

    let n = cfg.encoder_channels.len();
    let mut decoder = Vec::new();
    for i in 0..n {
        let enc_ch = cfg.encoder_channels[n - 1 - i];
        let out_ch = if i + 1 < n { cfg.encoder_channels[n - 2 - i] } else { 1 };
        decoder.push(ComplexConvTransposeLayer::new(2 * enc_ch, out_ch, cfg.kernel, stride, pad, &mut r));
    }

    Ok(DdccrnModel { config: cfg.clone(), encoder, lstms, dense: Some(dense), decoder })
}

impl DdccrnModel {
    /// Every parameter tensor with a stable, unique name. Checkpoints store
    /// these sorted by name; loading matches by name.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.encoder.iter().enumerate() {
            for (n, t) in layer.named_params() {
                out.push((format!("enc.{i}.{n}"), t));
            }
        }
        for (i, layer) in self.lstms.iter().enumerate() {
            for (n, t) in layer.named_params() {
                out.push((format!("lstm.{i}.{n}"), t));
            }
        }
        if let Some(dense) = &self.dense {
            for (n, t) in dense.named_params() {
                out.push((format!("dense.{n}"), t));
            }
        }
        for (i, layer) in self.decoder.iter().enumerate() {
            for (n, t) in layer.named_params() {
                out.push((format!("dec.{i}.{n}"), t));
            }
        }
        out
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    /// Exact number of scalar parameters.
    pub fn count_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Enhance one capture. Output length equals `capture.mic` exactly.
    pub fn forward(&self, capture: &DualCapture) -> Result<Waveform, DdccrnError> {
        self.forward_masked(capture, MaskOverride::None)
    }

    pub fn forward_masked(
        &self,
        capture: &DualCapture,
        hook: MaskOverride,
    ) -> Result<Waveform, DdccrnError> {
        let len = capture.mic.samples.len();
        if capture.vib.samples.len() != len {
            return Err(DdccrnError::ShapeMismatch {
                detail: format!(
                    "mic has {len} samples, vib has {}",
                    capture.vib.samples.len()
                ),
            });
        }
        if capture.mic.sample_rate != capture.vib.sample_rate {
            return Err(DdccrnError::ShapeMismatch {
                detail: format!(
                    "mic at {} Hz, vib at {} Hz",
                    capture.mic.sample_rate, capture.vib.sample_rate
                ),
            });
        }
        let needed = self.config.stft.win_length;
        if len < needed {
            return Err(DdccrnError::InputTooShort { len, needed });
        }

        let tape = Tape::inference();
        let spec_mic = spectral::stft(&capture.mic, &self.config.stft)?;
        let spec_vib = spectral::stft(&capture.vib, &self.config.stft)?;
        let shape = [spec_mic.frames, spec_mic.bins()];
        let lift = |s: &ComplexSpectrogram| {
            ComplexTensor::new(
                Tensor::from_vec(s.real.clone(), &shape),
                Tensor::from_vec(s.imag.clone(), &shape),
            )
        };
        let enhanced = self.forward_spectra(&tape, &lift(&spec_mic)?, &lift(&spec_vib)?, hook)?;
        let out = ComplexSpectrogram::new(
            enhanced.re.to_vec(),
            enhanced.im.to_vec(),
            spec_mic.frames,
            capture.mic.sample_rate,
            self.config.stft,
        )?;
        Ok(spectral::istft_with_length(&out, len)?)
    }

    /// Core network on `[frames, bins]` spectrum pairs, recordable on a tape
    /// for training. Returns the enhanced mic spectrum.
    pub(crate) fn forward_spectra(
        &self,
        tape: &Tape,
        mic: &ComplexTensor,
        vib: &ComplexTensor,
        hook: MaskOverride,
    ) -> Result<ComplexTensor, DdccrnError> {
        let shape = mic.shape();
        let bins = self.config.stft.bins();
        if shape != vib.shape() || shape.len() != 2 || shape[1] != bins {
            return Err(DdccrnError::ShapeMismatch {
                detail: format!(
                    "expected two [frames, {bins}] spectra, got mic {shape:?}, vib {:?}",
                    vib.shape()
                ),
            });
        }
        match hook {
            MaskOverride::Unity => return Ok(mic.clone()),
            MaskOverride::Zero => {
                return Ok(ComplexTensor::new(Tensor::zeros(&shape), Tensor::zeros(&shape))?)
            }
            MaskOverride::None => {}
        }
        let mask = self.mask_spectra(tape, mic, vib)?;
        mask_apply_tensor(tape, mic, &mask)
    }

    /// Runs encoder, bottleneck, and decoder, producing the complex ratio
    /// mask as a `[frames, bins]` pair.
    fn mask_spectra(
        &self,
        tape: &Tape,
        mic: &ComplexTensor,
        vib: &ComplexTensor,
    ) -> Result<ComplexTensor, DdccrnError> {
        let dims = self.config.freq_dims()?;
        if self.encoder.is_empty() || self.lstms.is_empty() || self.dense.is_none() {
            return Err(DdccrnError::InvalidConfig {
                detail: "model has no layers to run".into(),
            });
        }
        if self.decoder.len() != self.encoder.len() {
            return Err(DdccrnError::InvalidConfig {
                detail: format!(
                    "decoder depth {} does not mirror encoder depth {}",
                    self.decoder.len(),
                    self.encoder.len()
                ),
            });
        }
        let shape = mic.shape();
        let (frames, bins) = (shape[0], shape[1]);
        let kt = self.config.kernel.1;

        // [frames, bins] -> [1, 1, F, T], then stack mic and vib on channels.
        let lift = |t: &Tensor| -> Result<Tensor, TensorError> {
            tape.reshape(&tape.transpose(t)?, &[1, 1, bins, frames])
        };
        let mut x = ComplexTensor::new(
            tape.concat(&[lift(&mic.re)?, lift(&vib.re)?], 1)?,
            tape.concat(&[lift(&mic.im)?, lift(&vib.im)?], 1)?,
        )?;

        let mut skips = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            // Causal pad keeps the frame count across the time kernel.
            let padded = ComplexTensor::new(
                tape.pad_hw(&x.re, (0, 0, kt - 1, 0))?,
                tape.pad_hw(&x.im, (0, 0, kt - 1, 0))?,
            )?;
            let y = layer.forward(tape, &padded)?;
            x = complex_leaky_relu(tape, &complex_norm(tape, &y)?);
            skips.push(x.clone());
        }

        // Bottleneck: fold channels and frequency into per-frame features.
        let c_last = *self.config.encoder_channels.last().expect("non-empty");
        let f_last = *dims.last().expect("non-empty");
        let fold = |t: &Tensor| -> Result<Tensor, TensorError> {
            tape.transpose(&tape.reshape(t, &[c_last * f_last, frames])?)
        };
        let mut z = ComplexTensor::new(fold(&x.re)?, fold(&x.im)?)?;
        for lstm in &self.lstms {
            z = lstm.forward(tape, &z)?;
        }
        z = self.dense.as_ref().expect("checked").forward(tape, &z)?;
        let unfold = |t: &Tensor| -> Result<Tensor, TensorError> {
            tape.reshape(&tape.transpose(t)?, &[1, c_last, f_last, frames])
        };
        let mut y = ComplexTensor::new(unfold(&z.re)?, unfold(&z.im)?)?;

        let n = self.decoder.len();
        for (i, layer) in self.decoder.iter().enumerate() {
            let skip = &skips[n - 1 - i];
            let cat = ComplexTensor::new(
                tape.concat(&[y.re.clone(), skip.re.clone()], 1)?,
                tape.concat(&[y.im.clone(), skip.im.clone()], 1)?,
            )?;
            let full = layer.forward(tape, &cat)?;
            // The transposed time axis grows by kt-1; drop the tail frames
            // that mirror the causal padding.
            let chomp = |t: &Tensor| -> Result<Tensor, TensorError> {
                if kt > 1 {
                    tape.slice(t, 3, 0, frames)
                } else {
                    Ok(t.clone())
                }
            };
            y = ComplexTensor::new(chomp(&full.re)?, chomp(&full.im)?)?;
            if i + 1 < n {
                y = complex_leaky_relu(tape, &complex_norm(tape, &y)?);
            }
        }

        // [1, 1, F, T] -> [frames, bins]
        let drop = |t: &Tensor| -> Result<Tensor, TensorError> {
            tape.transpose(&tape.reshape(t, &[bins, frames])?)
        };
        Ok(ComplexTensor::new(drop(&y.re)?, drop(&y.im)?)?)
    }

    /// Writes the checkpoint at `path` and the config sidecar at
    /// `path` + ".json".
    pub fn save(&self, path: &Path) -> Result<(), DdccrnError> {
        checkpoint::save(path, &self.named_params())?;
        let sidecar = sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.config).map_err(|e| DdccrnError::Sidecar {
            path: sidecar.display().to_string(),
            detail: e.to_string(),
        })?;
        std::fs::write(&sidecar, json).map_err(|e| DdccrnError::Sidecar {
            path: sidecar.display().to_string(),
            detail: e.to_string(),
        })
    }

    /// Rebuilds a model from a checkpoint and its config sidecar.
    pub fn load(path: &Path) -> Result<DdccrnModel, DdccrnError> {
        let sidecar = sidecar_path(path);
        let side_err = |detail: String| DdccrnError::Sidecar {
            path: sidecar.display().to_string(),
            detail,
        };
        let text = std::fs::read_to_string(&sidecar).map_err(|e| side_err(e.to_string()))?;
        let cfg: DdccrnConfig = serde_json::from_str(&text).map_err(|e| side_err(e.to_string()))?;

        let model = build(&cfg, 0)?;
        let entries: HashMap<String, Tensor> = checkpoint::load(path)?.into_iter().collect();
        let expected = model.named_params();
        if entries.len() != expected.len() {
            return Err(DdccrnError::ShapeMismatch {
                detail: format!(
                    "checkpoint holds {} tensors, config implies {}",
                    entries.len(),
                    expected.len()
                ),
            });
        }
        for (name, param) in expected {
            let loaded = entries
                .get(&name)
                .ok_or_else(|| DdccrnError::MissingParam { name: name.clone() })?;
            if loaded.shape() != param.shape() {
                return Err(DdccrnError::ParamShape {
                    name,
                    got: loaded.shape(),
                    want: param.shape(),
                });
            }
            param.set_data(&loaded.to_vec());
        }
        Ok(model)
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

/// Applies the variant-E complex ratio mask on a tape:
/// `out = spec * mask * tanh(|mask|) / |mask|`, a smooth form of
/// "magnitude scaled by tanh(|mask|), phases added".
pub(crate) fn mask_apply_tensor(
    tape: &Tape,
    spec: &ComplexTensor,
    mask: &ComplexTensor,
) -> Result<ComplexTensor, DdccrnError> {
    if spec.shape() != mask.shape() {
        return Err(DdccrnError::ShapeMismatch {
            detail: format!("spectrum {:?} vs mask {:?}", spec.shape(), mask.shape()),
        });
    }
    let mag = mask.magnitude(tape, MASK_MAG_EPS)?;
    let gain = tape.div(&tape.tanh(&mag), &mag)?;
    let k_re = tape.mul(&mask.re, &gain)?;
    let k_im = tape.mul(&mask.im, &gain)?;
    let re = tape.sub(&tape.mul(&spec.re, &k_re)?, &tape.mul(&spec.im, &k_im)?)?;
    let im = tape.add(&tape.mul(&spec.re, &k_im)?, &tape.mul(&spec.im, &k_re)?)?;
    Ok(ComplexTensor::new(re, im)?)
}

/// Applies a complex ratio mask to a spectrogram out of tape context.
pub fn mask_apply(
    spec: &ComplexSpectrogram,
    mask: &ComplexTensor,
    variant: MaskVariant,
) -> Result<ComplexSpectrogram, DdccrnError> {
    match variant {
        MaskVariant::E => {}
    }
    let shape = [spec.frames, spec.bins()];
    let tape = Tape::inference();
    let lifted = ComplexTensor::new(
        Tensor::from_vec(spec.real.clone(), &shape),
        Tensor::from_vec(spec.imag.clone(), &shape),
    )?;
    let out = mask_apply_tensor(&tape, &lifted, mask)?;
    Ok(ComplexSpectrogram::new(
        out.re.to_vec(),
        out.im.to_vec(),
        spec.frames,
        spec.sample_rate,
        spec.config,
    )?)
}

#[derive(Debug, Clone, Copy)]
pub struct MetricsStub {
    pub processing_seconds: f64,
}

/// Enhances a two-channel capture WAV into a mono WAV, reporting wall-clock
/// processing time for the forward pass.
pub fn enhance_file(
    model: &DdccrnModel,
    in_path: &Path,
    out_path: &Path,
) -> Result<MetricsStub, DdccrnError> {
    let capture = audio_io::read_capture(in_path)?;
    let start = Instant::now();
    let enhanced = model.forward(&capture)?;
    // Clamp away a coarse clock's zero reading; the field is contractually
    // positive.
    let processing_seconds = start.elapsed().as_secs_f64().max(1e-9);
    audio_io::write_wav(out_path, &enhanced, SampleFormat::Float32)?;
    Ok(MetricsStub { processing_seconds })
}
