//! duovoce: dual-input speech enhancement for paired microphone + vibration
//! sensor captures.
//!
//! The pipeline enhances the air-conducted microphone channel of a two-channel
//! capture by predicting a complex spectral mask from both channels. The
//! vibration channel is body-conducted: band-limited, largely immune to
//! acoustic noise, and useful as a noise-robust anchor for the mask estimator.
//!
//! Crate layout:
//!
//! - [`audio_io`]: WAV round-tripping and the `Waveform` / `DualCapture` types.
//! - [`spectral`]: STFT analysis/synthesis and log-mel features.
//! - [`tensor`]: a minimal reverse-mode autodiff engine (f32, CPU) that the
//!   model and losses are built on.
//! - [`checkpoint`]: binary tensor serialization plus a JSON config sidecar.
//! - [`complex_nn`]: complex-valued layers (conv, transposed conv, LSTM,
//!   dense, normalization) expressed as paired real tensors.
//! - [`ddccrn`]: the dual-input complex convolutional-recurrent enhancement
//!   model itself.
//! - [`losses`]: audio-enhancement and knowledge-distillation objectives,
//!   including the frozen stub teacher used as a distillation target.
//! - [`dataset`]: deterministic toy corpus generation, noise synthesis,
//!   mixing, and vibration sensor simulation.
//! - [`metrics`]: SI-SDR, STOI, WER/CER and the batch evaluation harness.
//! - [`cli`]: the `duovoce` command-line front end.
//!
//! Everything is deterministic given a seed: corpus generation, training,
//! and evaluation derive independent named RNG sub-streams from one root
//! seed, so identical invocations produce byte-identical artifacts.

pub mod audio_io;
pub mod checkpoint;
pub mod cli;
pub mod complex_nn;
pub mod dataset;
pub mod ddccrn;
pub mod losses;
pub mod metrics;
pub mod rng;
pub mod spectral;
pub mod tensor;
