//! Training objectives: the audio-enhancement loss (log-mel MSE plus a
//! scale-invariant SDR term) and the knowledge-distillation losses (soft KL
//! against teacher token distributions, hard NLL against pseudo-labels),
//! combined into the total objective.
//!
//! The distillation target is [`StubTeacher`]: a frozen, seed-determined
//! sequence model with a mel front end. It is never trained. Its job is to
//! provide stable hidden states, per-token distributions, and greedy
//! pseudo-label transcripts, so that distilling against it exercises the
//! same plumbing a large pretrained recognizer would.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio_io::Waveform;
use crate::rng;
use crate::spectral::{self, MelConfig, SpectralError, StftConfig};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty waveform")]
    EmptyWaveform,
    #[error("reference waveform is identically zero")]
    ZeroReference,
    #[error("sample rate {got} Hz does not match the configured {want} Hz")]
    SampleRate { got: u32, want: u32 },
    #[error("input too short: {frames} spectral frames, need at least {needed}")]
    InputTooShort { frames: usize, needed: usize },
    #[error("invalid loss weights: {detail}")]
    InvalidWeights { detail: String },
    #[error("invalid token distribution: {detail}")]
    InvalidDistribution { detail: String },
    #[error("token {token} outside vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("pseudo-label sequence is empty")]
    EmptyLabels,
    #[error("shape mismatch: {detail}")]
    ShapeMismatch { detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

// ----------------------------------------------------------------- weights

/// Scalar weights combining the loss terms: `lambda_si` scales the negated
/// SI-SDR term inside the audio-enhancement loss, `lambda_soft` and
/// `lambda_hard` combine the two distillation terms, and `lambda_kd` scales
/// the distillation block against the audio-enhancement loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_si: f32,
    pub lambda_soft: f32,
    pub lambda_hard: f32,
    pub lambda_kd: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        // Chosen so the terms have comparable magnitude on the toy task at
        // initialization.
        LossWeights { lambda_si: 0.1, lambda_soft: 1.0, lambda_hard: 1.0, lambda_kd: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        let named = [
            ("lambda_si", self.lambda_si),
            ("lambda_soft", self.lambda_soft),
            ("lambda_hard", self.lambda_hard),
            ("lambda_kd", self.lambda_kd),
        ];
        for (name, v) in named {
            if !v.is_finite() || v < 0.0 {
                return Err(LossError::InvalidWeights { detail: format!("{name} = {v}") });
            }
        }
        Ok(())
    }
}

// ------------------------------------------------------------------ SI-SDR

/// SI-SDR saturates here once the residual energy underflows; a perfect
/// (or perfectly scaled) reconstruction reports the cap instead of a
/// division by zero.
pub const SI_SDR_CAP_DB: f64 = 100.0;

const SI_SDR_ENERGY_FLOOR: f64 = 1e-20;

/// Scale-invariant signal-to-distortion ratio in dB. The estimate is
/// projected onto the reference, so any global scaling of the estimate
/// cancels out of the ratio.
pub fn si_sdr(reference: &Waveform, estimate: &Waveform) -> Result<f64, LossError> {
    let r = &reference.samples;
    let e = &estimate.samples;
    if r.len() != e.len() {
        return Err(LossError::LengthMismatch { left: r.len(), right: e.len() });
    }
    if r.is_empty() {
        return Err(LossError::EmptyWaveform);
    }
    let rr: f64 = r.iter().map(|&v| v as f64 * v as f64).sum();
    if rr == 0.0 {
        return Err(LossError::ZeroReference);
    }
    let er: f64 = e.iter().zip(r).map(|(&ev, &rv)| ev as f64 * rv as f64).sum();
    let alpha = er / rr;
    let signal = alpha * alpha * rr;
    let err: f64 = e
        .iter()
        .zip(r)
        .map(|(&ev, &rv)| {
            let d = alpha * rv as f64 - ev as f64;
            d * d
        })
        .sum();
    if err < SI_SDR_ENERGY_FLOOR {
        return Ok(SI_SDR_CAP_DB);
    }
    if signal < SI_SDR_ENERGY_FLOOR {
        // The projection vanished: the estimate carries no reference
        // component at all. Floor symmetrically to the cap.
        return Ok(-SI_SDR_CAP_DB);
    }
    Ok(10.0 * (signal / err).log10())
}

/// Differentiable SI-SDR: gradients flow into `estimate`; `reference` is
/// treated as a constant. At either saturation the objective plateaus, so
/// the returned constant deliberately carries no gradient.
pub fn si_sdr_tensor(
    tape: &Tape,
    reference: &Tensor,
    estimate: &Tensor,
) -> Result<Tensor, LossError> {
    if reference.shape() != estimate.shape() {
        return Err(LossError::ShapeMismatch {
            detail: format!("reference {:?} vs estimate {:?}", reference.shape(), estimate.shape()),
        });
    }
    if reference.len() == 0 {
        return Err(LossError::EmptyWaveform);
    }
    let energy: f64 = reference.to_vec().iter().map(|&v| v as f64 * v as f64).sum();
    if energy < SI_SDR_ENERGY_FLOOR {
        return Err(LossError::ZeroReference);
    }
    // rr goes through the same op sequence as er so that at estimate ==
    // reference the two sums agree bitwise, alpha is exactly 1, and the
    // error energy lands exactly on the cap branch below.
    let er = tape.sum(&tape.mul(estimate, reference)?)?;
    let rr = tape.sum(&tape.mul(reference, reference)?)?;
    let alpha = tape.div(&er, &rr)?;
    let proj = tape.mul(&alpha, reference)?;
    let signal = tape.sum(&tape.mul(&proj, &proj)?)?;
    let diff = tape.sub(&proj, estimate)?;
    let err = tape.sum(&tape.mul(&diff, &diff)?)?;
    if (err.value() as f64) < SI_SDR_ENERGY_FLOOR {
        return Ok(Tensor::scalar(SI_SDR_CAP_DB as f32));
    }
    if (signal.value() as f64) < SI_SDR_ENERGY_FLOOR {
        return Ok(Tensor::scalar(-SI_SDR_CAP_DB as f32));
    }
    let ratio = tape.div(&signal, &err)?;
    Ok(tape.scale(&tape.log(&ratio), (10.0 / std::f64::consts::LN_10) as f32)?)
}

// ------------------------------------------------- audio-enhancement loss

/// Spectral front end shared by both sides of the audio-enhancement loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AeConfig {
    pub stft: StftConfig,
    pub mel: MelConfig,
}

impl Default for AeConfig {
    fn default() -> Self {
        AeConfig { stft: StftConfig::default(), mel: MelConfig::default() }
    }
}

const MEL_FLOOR: f32 = 1e-10;

pub(crate) fn log_mel_tensor(
    tape: &Tape,
    wave: &Tensor,
    stft: &StftConfig,
    mel: &MelConfig,
) -> Result<Tensor, LossError> {
    let (re, im) = spectral::stft_tensor(tape, wave, stft)?;
    let power = tape.add(&tape.mul(&re, &re)?, &tape.mul(&im, &im)?)?;
    let basis = spectral::mel_basis_transposed(mel, stft.fft_size)?;
    let melspec = tape.matmul(&power, &basis)?;
    Ok(tape.log(&tape.add_scalar(&melspec, MEL_FLOOR)?))
}

/// Audio-enhancement loss: log-mel MSE between clean and enhanced plus
/// `lambda_si` times the negated SI-SDR, so that minimizing the loss
/// improves the reconstruction on both axes. Differentiable through
/// `enhanced`.
pub fn l_ae(
    tape: &Tape,
    clean: &Waveform,
    enhanced: &Tensor,
    cfg: &AeConfig,
    weights: &LossWeights,
) -> Result<Tensor, LossError> {
    weights.validate()?;
    if enhanced.shape().len() != 1 {
        return Err(LossError::ShapeMismatch {
            detail: format!("enhanced must be rank 1, got {:?}", enhanced.shape()),
        });
    }
    if enhanced.len() != clean.samples.len() {
        return Err(LossError::LengthMismatch { left: clean.samples.len(), right: enhanced.len() });
    }
    if clean.sample_rate != cfg.mel.sample_rate_hz {
        return Err(LossError::SampleRate { got: clean.sample_rate, want: cfg.mel.sample_rate_hz });
    }
    let clean_t = Tensor::from_vec(clean.samples.clone(), &[clean.samples.len()]);
    let clean_mel = log_mel_tensor(&Tape::inference(), &clean_t, &cfg.stft, &cfg.mel)?.detach();
    let enhanced_mel = log_mel_tensor(tape, enhanced, &cfg.stft, &cfg.mel)?;
    let diff = tape.sub(&enhanced_mel, &clean_mel)?;
    let mse = tape.mean(&tape.mul(&diff, &diff)?)?;
    let si = si_sdr_tensor(tape, &clean_t, enhanced)?;
    Ok(tape.add(&mse, &tape.scale(&si, -weights.lambda_si)?)?)
}

/// [`l_ae`] on plain waveforms, for evaluation outside a training tape.
pub fn l_ae_waves(
    clean: &Waveform,
    enhanced: &Waveform,
    cfg: &AeConfig,
    weights: &LossWeights,
) -> Result<f32, LossError> {
    if enhanced.sample_rate != clean.sample_rate {
        return Err(LossError::SampleRate { got: enhanced.sample_rate, want: clean.sample_rate });
    }
    let t = Tensor::from_vec(enhanced.samples.clone(), &[enhanced.samples.len()]);
    Ok(l_ae(&Tape::inference(), clean, &t, cfg, weights)?.value())
}

// ----------------------------------------------------------- domain types

/// Per-position token probabilities, shape `[positions, vocab]`. Each row
/// sums to one; rows may live on a recording tape (the student side) or be
/// plain data (the teacher side).
#[derive(Debug, Clone)]
pub struct TokenDistribution {
    pub probs: Tensor,
}

impl TokenDistribution {
    pub fn new(probs: Tensor) -> Result<Self, LossError> {
        let shape = probs.shape();
        if shape.len() != 2 || shape[0] == 0 || shape[1] == 0 {
            return Err(LossError::InvalidDistribution {
                detail: format!("expected nonempty [positions, vocab], got {shape:?}"),
            });
        }
        let vocab = shape[1];
        let data = probs.to_vec();
        for (i, row) in data.chunks(vocab).enumerate() {
            let mut sum = 0f64;
            for &p in row {
                if !p.is_finite() || p < 0.0 {
                    return Err(LossError::InvalidDistribution {
                        detail: format!("negative or non-finite probability at position {i}"),
                    });
                }
                sum += p as f64;
            }
            if (sum - 1.0).abs() > 1e-5 {
                return Err(LossError::InvalidDistribution {
                    detail: format!("position {i} sums to {sum}"),
                });
            }
        }
        Ok(TokenDistribution { probs })
    }

    pub fn positions(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn vocab(&self) -> usize {
        self.probs.shape()[1]
    }
}

/// Frozen-teacher hidden states, shape `[frames, dim]`.
#[derive(Debug, Clone)]
pub struct TeacherStates {
    pub hidden: Tensor,
}

impl TeacherStates {
    pub fn new(hidden: Tensor) -> Result<Self, LossError> {
        let shape = hidden.shape();
        if shape.len() != 2 || shape[0] == 0 || shape[1] == 0 {
            return Err(LossError::ShapeMismatch {
                detail: format!("expected nonempty [frames, dim], got {shape:?}"),
            });
        }
        if hidden.to_vec().iter().any(|v| !v.is_finite()) {
            return Err(LossError::ShapeMismatch { detail: "non-finite hidden state".into() });
        }
        Ok(TeacherStates { hidden })
    }

    pub fn frames(&self) -> usize {
        self.hidden.shape()[0]
    }
}

/// Greedy teacher transcript of a clean utterance: the distillation target
/// sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabels {
    pub tokens: Vec<usize>,
}

impl PseudoLabels {
    pub fn new(tokens: Vec<usize>, vocab: usize) -> Result<Self, LossError> {
        if tokens.is_empty() {
            return Err(LossError::EmptyLabels);
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(LossError::TokenOutOfRange { token: bad, vocab });
        }
        Ok(PseudoLabels { tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

// ------------------------------------------------------------ stub teacher

/// Seed of the one frozen teacher instance used for training and metrics.
pub const TEACHER_SEED: u64 = 42;
/// Token vocabulary of the frozen teacher.
pub const TEACHER_VOCAB: usize = 64;

const TEACHER_STATE_DIM: usize = 16;
const TEACHER_EMB_DIM: usize = 8;
const TEACHER_TIME_KERNEL: usize = 4;
const TEACHER_MELS: usize = 26;
const POOL_HALF_WIDTH: usize = 2;
const EMB_BOUND: f64 = 0.35;

// Fixed affine compression of the log-mel features. Keeps silence near -1
// and speech-level energy inside the tanh-linear range instead of letting
// the log run to the floor and saturate the encoder.
const FEATURE_FLOOR: f32 = 1e-5;
const FEATURE_SHIFT: f32 = 5.0;
const FEATURE_SCALE: f32 = 0.2;

const PROB_FLOOR: f32 = 1e-12;

fn draw(r: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng::uniform_in(r, -bound, bound) as f32).collect();
    Tensor::from_vec(data, shape)
}

/// A frozen sequence model standing in for a large pretrained recognizer:
/// mel front end, two stride-2 temporal convolutions with tanh, and a
/// pooled linear decoder over a fixed vocabulary. Parameters are drawn once
/// from the seed and never trained; the model is purely an evaluator whose
/// states and distributions the student is distilled against.
#[derive(Debug, Clone)]
pub struct StubTeacher {
    vocab: usize,
    stft: StftConfig,
    mel: MelConfig,
    conv1_w: Tensor,
    conv1_b: Tensor,
    conv2_w: Tensor,
    conv2_b: Tensor,
    /// `[vocab + 1, emb]`; the extra row embeds the start-of-sequence.
    emb: Tensor,
    out_w: Tensor,
    out_b: Tensor,
}

impl StubTeacher {
    /// The canonical frozen teacher.
    pub fn frozen() -> Self {
        Self::seeded(TEACHER_SEED, TEACHER_VOCAB)
    }

    pub fn seeded(seed: u64, vocab: usize) -> Self {
        assert!(vocab >= 1, "teacher vocabulary must be nonempty");
        let mut r = rng::substream(seed, "stub-teacher", 0);
        let d = TEACHER_STATE_DIM;
        let m = TEACHER_MELS;
        let e = TEACHER_EMB_DIM;
        let k = TEACHER_TIME_KERNEL;
        let conv1_w = draw(&mut r, &[d, m, 1, k], 1.0 / ((m * k) as f64).sqrt());
        let conv2_w = draw(&mut r, &[d, d, 1, k], 1.0 / ((d * k) as f64).sqrt());
        let emb = draw(&mut r, &[vocab + 1, e], EMB_BOUND);
        let out_w = draw(&mut r, &[d + e, vocab], 1.0 / ((d + e) as f64).sqrt());
        StubTeacher {
            vocab,
            stft: StftConfig::default(),
            mel: MelConfig { n_mels: TEACHER_MELS, ..MelConfig::default() },
            conv1_w,
            conv1_b: Tensor::zeros(&[1, d, 1, 1]),
            conv2_w,
            conv2_b: Tensor::zeros(&[1, d, 1, 1]),
            emb,
            out_w,
            out_b: Tensor::zeros(&[1, vocab]),
        }
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    /// Hidden states for a waveform already lifted onto a tape. Gradients
    /// flow through the input; the teacher parameters stay constant.
    pub fn encode_tensor(&self, tape: &Tape, wave: &Tensor) -> Result<Tensor, LossError> {
        let (re, im) = spectral::stft_tensor(tape, wave, &self.stft)?;
        let power = tape.add(&tape.mul(&re, &re)?, &tape.mul(&im, &im)?)?;
        let basis = spectral::mel_basis_transposed(&self.mel, self.stft.fft_size)?;
        let melspec = tape.matmul(&power, &basis)?;
        let feats = tape.scale(
            &tape.add_scalar(&tape.log(&tape.add_scalar(&melspec, FEATURE_FLOOR)?), FEATURE_SHIFT)?,
            FEATURE_SCALE,
        )?;
        let frames = feats.shape()[0];
        if frames < 4 {
            return Err(LossError::InputTooShort { frames, needed: 4 });
        }
        let x = tape.reshape(&tape.transpose(&feats)?, &[1, self.mel.n_mels, 1, frames])?;
        let h1 = tape.tanh(&tape.add(&tape.conv2d(&x, &self.conv1_w, (1, 2), (0, 1))?, &self.conv1_b)?);
        let h2 = tape.tanh(&tape.add(&tape.conv2d(&h1, &self.conv2_w, (1, 2), (0, 1))?, &self.conv2_b)?);
        let t4 = h2.shape()[3];
        Ok(tape.transpose(&tape.reshape(&h2, &[TEACHER_STATE_DIM, t4])?)?)
    }

    /// Hidden states for a plain waveform. Two stride-2 convolutions leave
    /// `input frames / 4` state frames.
    pub fn encode(&self, wave: &Waveform) -> Result<TeacherStates, LossError> {
        if wave.sample_rate != self.mel.sample_rate_hz {
            return Err(LossError::SampleRate {
                got: wave.sample_rate,
                want: self.mel.sample_rate_hz,
            });
        }
        let t = Tensor::from_vec(wave.samples.clone(), &[wave.samples.len()]);
        TeacherStates::new(self.encode_tensor(&Tape::inference(), &t)?)
    }

    /// Logits for one decoding position: pooled states around the aligned
    /// frame concatenated with the previous token's embedding.
    fn decode_row(
        &self,
        tape: &Tape,
        states: &Tensor,
        frames: usize,
        position: usize,
        total: usize,
        prev_token: usize,
    ) -> Result<Tensor, LossError> {
        let anchor = position * frames / total;
        let lo = anchor.saturating_sub(POOL_HALF_WIDTH);
        let hi = (anchor + POOL_HALF_WIDTH + 1).min(frames);
        let window = tape.slice(states, 0, lo, hi)?;
        let pool = tape.scale(&tape.sum_axis(&window, 0)?, 1.0 / (hi - lo) as f32)?;
        let prev = tape.slice(&self.emb, 0, prev_token, prev_token + 1)?;
        let feat = tape.concat(&[pool, prev], 1)?;
        Ok(tape.add(&tape.matmul(&feat, &self.out_w)?, &self.out_b)?)
    }

    /// Teacher-forced distributions over `prefix.len()` positions, on a
    /// tape. Position `i` sees the pooled states and the prefix token at
    /// `i - 1` only, so the decode is causal in the prefix.
    pub fn decode_tensor(
        &self,
        tape: &Tape,
        states: &Tensor,
        prefix: &PseudoLabels,
    ) -> Result<Tensor, LossError> {
        let shape = states.shape();
        if shape.len() != 2 || shape[1] != TEACHER_STATE_DIM {
            return Err(LossError::ShapeMismatch {
                detail: format!("expected [frames, {TEACHER_STATE_DIM}] states, got {shape:?}"),
            });
        }
        if let Some(&bad) = prefix.tokens.iter().find(|&&t| t >= self.vocab) {
            return Err(LossError::TokenOutOfRange { token: bad, vocab: self.vocab });
        }
        let frames = shape[0];
        let total = prefix.len();
        let mut rows = Vec::with_capacity(total);
        for (i, _) in prefix.tokens.iter().enumerate() {
            let prev_token = if i == 0 { self.vocab } else { prefix.tokens[i - 1] };
            rows.push(self.decode_row(tape, states, frames, i, total, prev_token)?);
        }
        let logits = tape.concat(&rows, 0)?;
        Ok(softmax_rows(tape, &logits)?)
    }

    /// Teacher-forced distributions as a validated domain type.
    pub fn decode(
        &self,
        states: &TeacherStates,
        prefix: &PseudoLabels,
    ) -> Result<TokenDistribution, LossError> {
        TokenDistribution::new(self.decode_tensor(&Tape::inference(), &states.hidden, prefix)?)
    }

    /// Greedy transcription: one token per two state frames, each chosen as
    /// the argmax of the decoder distribution given the tokens emitted so
    /// far. This is how pseudo-labels are generated from clean speech.
    pub fn transcribe(&self, wave: &Waveform) -> Result<PseudoLabels, LossError> {
        let states = self.encode(wave)?;
        self.transcribe_states(&states)
    }

    pub fn transcribe_states(&self, states: &TeacherStates) -> Result<PseudoLabels, LossError> {
        let frames = states.frames();
        let total = (frames / 2).max(1);
        let tape = Tape::inference();
        let mut tokens: Vec<usize> = Vec::with_capacity(total);
        for i in 0..total {
            let prev_token = tokens.last().copied().unwrap_or(self.vocab);
            let row =
                self.decode_row(&tape, &states.hidden, frames, i, total, prev_token)?.to_vec();
            let mut arg = 0usize;
            let mut best = row[0];
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    arg = j;
                }
            }
            tokens.push(arg);
        }
        PseudoLabels::new(tokens, self.vocab)
    }
}

/// Row-wise softmax for `[positions, vocab]` logits. The row maxima enter
/// as constants: softmax is shift-invariant, so subtracting them changes
/// conditioning, not the value or the gradient.
pub(crate) fn softmax_rows(tape: &Tape, logits: &Tensor) -> Result<Tensor, TensorError> {
    let shape = logits.shape();
    if shape.len() != 2 {
        return Err(TensorError::InvalidArgument {
            op: "softmax_rows",
            detail: format!("expected rank 2, got {shape:?}"),
        });
    }
    let (n, v) = (shape[0], shape[1]);
    let data = logits.to_vec();
    let maxes: Vec<f32> = data
        .chunks(v)
        .map(|row| row.iter().cloned().fold(f32::NEG_INFINITY, f32::max))
        .collect();
    let m = Tensor::from_vec(maxes, &[n, 1]);
    let e = tape.exp(&tape.sub(logits, &m)?);
    let sums = tape.sum_axis(&e, 1)?;
    tape.div(&e, &sums)
}

// ------------------------------------------------------ distillation losses

/// Hard distillation loss: negative log-likelihood of the pseudo-labels
/// under the student distributions, averaged over positions.
pub fn l_hard(
    tape: &Tape,
    dist: &TokenDistribution,
    labels: &PseudoLabels,
) -> Result<Tensor, LossError> {
    let n = dist.positions();
    if labels.len() != n {
        return Err(LossError::LengthMismatch { left: n, right: labels.len() });
    }
    let vocab = dist.vocab();
    let mut picked = Vec::with_capacity(n);
    for (i, &token) in labels.tokens.iter().enumerate() {
        if token >= vocab {
            return Err(LossError::TokenOutOfRange { token, vocab });
        }
        let row = tape.slice(&dist.probs, 0, i, i + 1)?;
        picked.push(tape.slice(&row, 1, token, token + 1)?);
    }
    let p = tape.concat(&picked, 0)?;
    Ok(tape.neg(&tape.mean(&tape.log(&tape.add_scalar(&p, PROB_FLOOR)?))?))
}

/// Soft distillation loss: KL(teacher || student) summed over the
/// vocabulary and averaged over positions. Differentiable through the
/// student; the teacher side is detached.
pub fn l_soft(
    tape: &Tape,
    teacher: &TokenDistribution,
    student: &TokenDistribution,
) -> Result<Tensor, LossError> {
    if teacher.probs.shape() != student.probs.shape() {
        return Err(LossError::ShapeMismatch {
            detail: format!(
                "teacher {:?} vs student {:?}",
                teacher.probs.shape(),
                student.probs.shape()
            ),
        });
    }
    let n = teacher.positions();
    let q = teacher.probs.detach();
    // The log ratio is differenced per entry before the weighted sum.
    // Splitting the KL into cross-entropy minus entropy would cancel two
    // entropy-sized sums and leave the result dominated by their rounding;
    // this form keeps the error relative to the loss itself. Zero teacher
    // entries contribute nothing, so their log is pinned to 0 to keep the
    // product finite (0 * log 0 = 0 by convention).
    let log_q: Vec<f32> =
        q.to_vec().iter().map(|&p| if p > 0.0 { p.ln() } else { 0.0 }).collect();
    let log_q = Tensor::from_vec(log_q, &q.shape());
    // max(P, floor) as relu(P - floor) + floor: clamped entries stop
    // receiving gradient, matching the clamp's flat region.
    let clamped = tape.add_scalar(&tape.relu(&tape.add_scalar(&student.probs, -PROB_FLOOR)?), PROB_FLOOR)?;
    let ratio = tape.sub(&log_q, &tape.log(&clamped))?;
    let sum = tape.sum(&tape.mul(&q, &ratio)?)?;
    Ok(tape.scale(&sum, 1.0 / n as f32)?)
}

/// Combined distillation objective.
pub fn l_kd(
    tape: &Tape,
    soft: &Tensor,
    hard: &Tensor,
    weights: &LossWeights,
) -> Result<Tensor, LossError> {
    weights.validate()?;
    Ok(tape.add(
        &tape.scale(soft, weights.lambda_soft)?,
        &tape.scale(hard, weights.lambda_hard)?,
    )?)
}

/// Total training objective.
pub fn l_total(
    tape: &Tape,
    ae: &Tensor,
    kd: &Tensor,
    weights: &LossWeights,
) -> Result<Tensor, LossError> {
    weights.validate()?;
    Ok(tape.add(ae, &tape.scale(kd, weights.lambda_kd)?)?)
}
