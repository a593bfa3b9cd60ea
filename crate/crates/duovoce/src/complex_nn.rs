//! Complex-valued neural layers composed from real tensor ops.
//!
//! Every layer carries separate real and imaginary weight sets and applies
//! the complex product rule, e.g. for convolution:
//! `out.re = conv(x.re, W_re) - conv(x.im, W_im)` and
//! `out.im = conv(x.re, W_im) + conv(x.im, W_re)`. The complex LSTM follows
//! the same rule over two real LSTMs. Initialization is uniform in
//! `+-1/sqrt(fan_in)` per real component; biases start at zero.

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::rng;
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("complex parts differ in shape: re {re:?}, im {im:?}")]
    PartShapeMismatch { re: Vec<usize>, im: Vec<usize> },
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone)]
pub struct ComplexTensor {
    pub re: Tensor,
    pub im: Tensor,
}

impl ComplexTensor {
    pub fn new(re: Tensor, im: Tensor) -> Result<Self, NnError> {
        if re.shape() != im.shape() {
            return Err(NnError::PartShapeMismatch { re: re.shape(), im: im.shape() });
        }
        Ok(ComplexTensor { re, im })
    }

    pub fn shape(&self) -> Vec<usize> {
        self.re.shape()
    }

    /// Smooth elementwise magnitude `sqrt(re^2 + im^2 + eps)`.
    pub fn magnitude(&self, tape: &Tape, eps: f32) -> Result<Tensor, NnError> {
        let sq = tape.add(&tape.mul(&self.re, &self.re)?, &tape.mul(&self.im, &self.im)?)?;
        Ok(tape.sqrt(&tape.add_scalar(&sq, eps)?))
    }
}

fn uniform_tensor(r: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::param((0..n).map(|_| rng::uniform_in(r, -bound, bound) as f32).collect(), shape)
}

#[derive(Debug, Clone)]
pub struct ComplexConvLayer {
    /// `[out_ch, in_ch, kh, kw]`
    pub w_re: Tensor,
    pub w_im: Tensor,
    /// `[1, out_ch, 1, 1]`, broadcast over batch and space.
    pub b_re: Tensor,
    pub b_im: Tensor,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ComplexConvLayer {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        r: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / ((in_ch * kernel.0 * kernel.1) as f64).sqrt();
        let shape = [out_ch, in_ch, kernel.0, kernel.1];
        ComplexConvLayer {
            w_re: uniform_tensor(r, &shape, bound),
            w_im: uniform_tensor(r, &shape, bound),
            b_re: Tensor::param(vec![0.0; out_ch], &[1, out_ch, 1, 1]),
            b_im: Tensor::param(vec![0.0; out_ch], &[1, out_ch, 1, 1]),
            stride,
            padding,
        }
    }

    pub fn forward(&self, tape: &Tape, x: &ComplexTensor) -> Result<ComplexTensor, NnError> {
        let rr = tape.conv2d(&x.re, &self.w_re, self.stride, self.padding)?;
        let ii = tape.conv2d(&x.im, &self.w_im, self.stride, self.padding)?;
        let ri = tape.conv2d(&x.re, &self.w_im, self.stride, self.padding)?;
        let ir = tape.conv2d(&x.im, &self.w_re, self.stride, self.padding)?;
        let re = tape.add(&tape.sub(&rr, &ii)?, &self.b_re)?;
        let im = tape.add(&tape.add(&ri, &ir)?, &self.b_im)?;
        Ok(ComplexTensor { re, im })
    }

    pub fn named_params(&self) -> Vec<(&'static str, Tensor)> {
        vec![
            ("W_re", self.w_re.clone()),
            ("W_im", self.w_im.clone()),
            ("b_re", self.b_re.clone()),
            ("b_im", self.b_im.clone()),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct ComplexConvTransposeLayer {
    /// `[in_ch, out_ch, kh, kw]` (transposed-convolution layout)
    pub w_re: Tensor,
    pub w_im: Tensor,
    pub b_re: Tensor,
    pub b_im: Tensor,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ComplexConvTransposeLayer {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        r: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / ((in_ch * kernel.0 * kernel.1) as f64).sqrt();
        let shape = [in_ch, out_ch, kernel.0, kernel.1];
        ComplexConvTransposeLayer {
            w_re: uniform_tensor(r, &shape, bound),
            w_im: uniform_tensor(r, &shape, bound),
            b_re: Tensor::param(vec![0.0; out_ch], &[1, out_ch, 1, 1]),
            b_im: Tensor::param(vec![0.0; out_ch], &[1, out_ch, 1, 1]),
            stride,
            padding,
        }
    }

    pub fn forward(&self, tape: &Tape, x: &ComplexTensor) -> Result<ComplexTensor, NnError> {
        let rr = tape.conv2d_transpose(&x.re, &self.w_re, self.stride, self.padding)?;
        let ii = tape.conv2d_transpose(&x.im, &self.w_im, self.stride, self.padding)?;
        let ri = tape.conv2d_transpose(&x.re, &self.w_im, self.stride, self.padding)?;
        let ir = tape.conv2d_transpose(&x.im, &self.w_re, self.stride, self.padding)?;
        let re = tape.add(&tape.sub(&rr, &ii)?, &self.b_re)?;
        let im = tape.add(&tape.add(&ri, &ir)?, &self.b_im)?;
        Ok(ComplexTensor { re, im })
    }

    pub fn named_params(&self) -> Vec<(&'static str, Tensor)> {
        vec![
            ("W_re", self.w_re.clone()),
            ("W_im", self.w_im.clone()),
            ("b_re", self.b_re.clone()),
            ("b_im", self.b_im.clone()),
        ]
    }
}

/// One real LSTM: gate order `[input, forget, cell, output]` along the
/// concatenated 4H axis, single bias vector, zero initial state.
#[derive(Debug, Clone)]
pub struct RealLstm {
    /// `[in, 4H]`
    pub w: Tensor,
    /// `[H, 4H]`
    pub u: Tensor,
    /// `[1, 4H]`
    pub b: Tensor,
    pub hidden: usize,
}

impl RealLstm {
    pub fn new(input: usize, hidden: usize, r: &mut ChaCha8Rng) -> Self {
        let wb = 1.0 / (input as f64).sqrt();
        let ub = 1.0 / (hidden as f64).sqrt();
        RealLstm {
            w: uniform_tensor(r, &[input, 4 * hidden], wb),
            u: uniform_tensor(r, &[hidden, 4 * hidden], ub),
            b: Tensor::param(vec![0.0; 4 * hidden], &[1, 4 * hidden]),
            hidden,
        }
    }

    /// `[T, in] -> [T, H]`. The input projection is batched into a single
    /// matmul; the recurrence runs step by step.
    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor, NnError> {
        let shape = x.shape();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(NnError::Invalid {
                op: "lstm",
                detail: format!("expected non-empty [T, in] sequence, got {shape:?}"),
            });
        }
        let (t_len, h) = (shape[0], self.hidden);
        let proj = tape.matmul(x, &self.w)?;
        let mut hs = Tensor::zeros(&[1, h]);
        let mut cs = Tensor::zeros(&[1, h]);
        let mut outs = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let row = tape.slice(&proj, 0, t, t + 1)?;
            let gates = tape.add(&tape.add(&row, &tape.matmul(&hs, &self.u)?)?, &self.b)?;
            let i = tape.sigmoid(&tape.slice(&gates, 1, 0, h)?);
            let f = tape.sigmoid(&tape.slice(&gates, 1, h, 2 * h)?);
            let g = tape.tanh(&tape.slice(&gates, 1, 2 * h, 3 * h)?);
            let o = tape.sigmoid(&tape.slice(&gates, 1, 3 * h, 4 * h)?);
            cs = tape.add(&tape.mul(&f, &cs)?, &tape.mul(&i, &g)?)?;
            hs = tape.mul(&o, &tape.tanh(&cs))?;
            outs.push(hs.clone());
        }
        Ok(tape.concat(&outs, 0)?)
    }
}

#[derive(Debug, Clone)]
pub struct ComplexLstmLayer {
    pub lstm_r: RealLstm,
    pub lstm_i: RealLstm,
}

impl ComplexLstmLayer {
    pub fn new(input: usize, hidden: usize, r: &mut ChaCha8Rng) -> Self {
        ComplexLstmLayer { lstm_r: RealLstm::new(input, hidden, r), lstm_i: RealLstm::new(input, hidden, r) }
    }

    /// `F_rr = LSTM_r(x.re)`, `F_ir = LSTM_r(x.im)`, `F_ri = LSTM_i(x.re)`,
    /// `F_ii = LSTM_i(x.im)`; `out.re = F_rr - F_ii`, `out.im = F_ri + F_ir`.
    pub fn forward(&self, tape: &Tape, x: &ComplexTensor) -> Result<ComplexTensor, NnError> {
        let f_rr = self.lstm_r.forward(tape, &x.re)?;
        let f_ir = self.lstm_r.forward(tape, &x.im)?;
        let f_ri = self.lstm_i.forward(tape, &x.re)?;
        let f_ii = self.lstm_i.forward(tape, &x.im)?;
        Ok(ComplexTensor {
            re: tape.sub(&f_rr, &f_ii)?,
            im: tape.add(&f_ri, &f_ir)?,
        })
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        vec![
            ("r.W".into(), self.lstm_r.w.clone()),
            ("r.U".into(), self.lstm_r.u.clone()),
            ("r.b".into(), self.lstm_r.b.clone()),
            ("i.W".into(), self.lstm_i.w.clone()),
            ("i.U".into(), self.lstm_i.u.clone()),
            ("i.b".into(), self.lstm_i.b.clone()),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct ComplexDense {
    /// `[in, out]`
    pub w_re: Tensor,
    pub w_im: Tensor,
    /// `[1, out]`
    pub b_re: Tensor,
    pub b_im: Tensor,
}

impl ComplexDense {
    pub fn new(input: usize, output: usize, r: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        ComplexDense {
            w_re: uniform_tensor(r, &[input, output], bound),
            w_im: uniform_tensor(r, &[input, output], bound),
            b_re: Tensor::param(vec![0.0; output], &[1, output]),
            b_im: Tensor::param(vec![0.0; output], &[1, output]),
        }
    }

    pub fn forward(&self, tape: &Tape, x: &ComplexTensor) -> Result<ComplexTensor, NnError> {
        let rr = tape.matmul(&x.re, &self.w_re)?;
        let ii = tape.matmul(&x.im, &self.w_im)?;
        let ri = tape.matmul(&x.re, &self.w_im)?;
        let ir = tape.matmul(&x.im, &self.w_re)?;
        Ok(ComplexTensor {
            re: tape.add(&tape.sub(&rr, &ii)?, &self.b_re)?,
            im: tape.add(&tape.add(&ri, &ir)?, &self.b_im)?,
        })
    }

    pub fn named_params(&self) -> Vec<(&'static str, Tensor)> {
        vec![
            ("W_re", self.w_re.clone()),
            ("W_im", self.w_im.clone()),
            ("b_re", self.b_re.clone()),
            ("b_im", self.b_im.clone()),
        ]
    }
}

/// Leaky rectifier (slope 0.1) applied separately to both parts.
pub fn complex_leaky_relu(tape: &Tape, x: &ComplexTensor) -> ComplexTensor {
    ComplexTensor { re: tape.leaky_relu(&x.re, 0.1), im: tape.leaky_relu(&x.im, 0.1) }
}

/// Parameter-free per-channel standardization of a `[N, C, H, W]` pair
/// using statistics pooled over the real and imaginary parts jointly.
pub fn complex_norm(tape: &Tape, x: &ComplexTensor) -> Result<ComplexTensor, NnError> {
    let shape = x.shape();
    if shape.len() != 4 || shape.iter().any(|&d| d == 0) {
        return Err(NnError::Invalid {
            op: "complex_norm",
            detail: format!("expected non-empty [N, C, H, W], got {shape:?}"),
        });
    }
    let count = (2 * shape[0] * shape[2] * shape[3]) as f32;

    // Channel-wise reduction to [1, C, 1, 1] over batch, space, and parts.
    let reduce = |t: &Tensor| -> Result<Tensor, TensorError> {
        tape.sum_axis(&tape.sum_axis(&tape.sum_axis(t, 3)?, 2)?, 0)
    };
    let total = tape.add(&reduce(&x.re)?, &reduce(&x.im)?)?;
    let mean = tape.scale(&total, 1.0 / count)?;

    let cre = tape.sub(&x.re, &mean)?;
    let cim = tape.sub(&x.im, &mean)?;
    let sq = tape.add(&reduce(&tape.mul(&cre, &cre)?)?, &reduce(&tape.mul(&cim, &cim)?)?)?;
    let var = tape.scale(&sq, 1.0 / count)?;
    let denom = tape.sqrt(&tape.add_scalar(&var, 1e-5)?);
    Ok(ComplexTensor { re: tape.div(&cre, &denom)?, im: tape.div(&cim, &denom)? })
}
