//! Signal-processing primitives for differentiable STFT/iSTFT.
//!
//! These four ops are linear maps, so every backward is an exact adjoint:
//! frame gather <-> scatter-add, overlap-add <-> strided gather, and the
//! DFT pair via forward/inverse FFTs on the cotangents. FFT arithmetic runs
//! in f64 internally (rustfft), keeping reconstruction error well below the
//! f32 quantization of the tensors themselves.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{Op, Tape, Tensor, TensorError};

thread_local! {
    static PLANS: RefCell<(FftPlanner<f64>, HashMap<(bool, usize), Arc<dyn Fft<f64>>>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

pub(crate) fn run_fft(buf: &mut [Complex<f64>], inverse: bool) {
    let n = buf.len();
    let plan = PLANS.with(|cell| {
        let (planner, cache) = &mut *cell.borrow_mut();
        cache
            .entry((inverse, n))
            .or_insert_with(|| {
                if inverse {
                    planner.plan_fft_inverse(n)
                } else {
                    planner.plan_fft_forward(n)
                }
            })
            .clone()
    });
    plan.process(buf);
}

/// Number of one-sided spectrum bins for an even FFT size.
pub fn rdft_len(fft_size: usize) -> usize {
    fft_size / 2 + 1
}

/// Time-domain length produced by [`Tape::irdft`].
pub fn irdft_len(fft_size: usize) -> usize {
    fft_size
}

/// Reflection (no edge repeat) of a padded-domain position into `[0, len)`.
pub(crate) fn reflect_index(pos: usize, pad: usize, len: usize) -> usize {
    let mut idx = pos as isize - pad as isize;
    let last = len as isize - 1;
    debug_assert!(len > 0);
    loop {
        if idx < 0 {
            idx = -idx;
        } else if idx > last {
            idx = 2 * last - idx;
        } else {
            return idx as usize;
        }
    }
}

struct FrameSignalOp {
    x: Tensor,
    win: usize,
    hop: usize,
    pad: usize,
    n_frames: usize,
}

impl Op for FrameSignalOp {
    fn backward(&self, out_grad: &[f32]) {
        let len = self.x.len();
        let mut gx = vec![0f32; len];
        for t in 0..self.n_frames {
            let base = t * self.hop;
            for j in 0..self.win {
                gx[reflect_index(base + j, self.pad, len)] += out_grad[t * self.win + j];
            }
        }
        self.x.accumulate_grad(&gx);
    }
}

struct RdftOp {
    x: Tensor,
    n: usize,
    frames: usize,
}

impl Op for RdftOp {
    fn backward(&self, out_grad: &[f32]) {
        // Adjoint of [re_0..re_F, im_0..im_F] extraction:
        // grad_j = Re( sum_{k<=N/2} (u_k + i v_k) e^{+2pi i jk/N} ),
        // i.e. one unnormalized inverse FFT of the zero-extended cotangent.
        let bins = rdft_len(self.n);
        let mut gx = vec![0f32; self.frames * self.n];
        let mut buf = vec![Complex::default(); self.n];
        for t in 0..self.frames {
            let row = &out_grad[t * 2 * bins..(t + 1) * 2 * bins];
            for item in buf.iter_mut() {
                *item = Complex::default();
            }
            for k in 0..bins {
                buf[k] = Complex::new(row[k] as f64, row[bins + k] as f64);
            }
            run_fft(&mut buf, true);
            for j in 0..self.n {
                gx[t * self.n + j] = buf[j].re as f32;
            }
        }
        self.x.accumulate_grad(&gx);
    }
}

struct IrdftOp {
    x: Tensor,
    n: usize,
    frames: usize,
}

impl Op for IrdftOp {
    fn backward(&self, out_grad: &[f32]) {
        // grad_u_k = w_k/N * Re(FFT(g)_k), grad_v_k = w_k/N * Im(FFT(g)_k)
        // with w_k = 2 except w_0 = w_{N/2} = 1; v_0 and v_{N/2} never
        // contribute to the forward, so their grads stay 0.
        let bins = rdft_len(self.n);
        let scale = 1.0 / self.n as f64;
        let mut gx = vec![0f32; self.frames * 2 * bins];
        let mut buf = vec![Complex::default(); self.n];
        for t in 0..self.frames {
            for (item, &g) in buf.iter_mut().zip(&out_grad[t * self.n..(t + 1) * self.n]) {
                *item = Complex::new(g as f64, 0.0);
            }
            run_fft(&mut buf, false);
            let row = &mut gx[t * 2 * bins..(t + 1) * 2 * bins];
            for k in 0..bins {
                let w = if k == 0 || k == self.n / 2 { 1.0 } else { 2.0 };
                row[k] = (w * scale * buf[k].re) as f32;
                if k != 0 && k != self.n / 2 {
                    row[bins + k] = (w * scale * buf[k].im) as f32;
                }
            }
        }
        self.x.accumulate_grad(&gx);
    }
}

struct OverlapAddOp {
    x: Tensor,
    frame_len: usize,
    hop: usize,
    n_frames: usize,
}

impl Op for OverlapAddOp {
    fn backward(&self, out_grad: &[f32]) {
        let mut gx = vec![0f32; self.n_frames * self.frame_len];
        for t in 0..self.n_frames {
            let base = t * self.hop;
            let row = &mut gx[t * self.frame_len..(t + 1) * self.frame_len];
            row.copy_from_slice(&out_grad[base..base + self.frame_len]);
        }
        self.x.accumulate_grad(&gx);
    }
}

impl Tape {
    /// Gathers `n_frames` windows of length `win` at stride `hop` from a 1-D
    /// signal, reading through `pad` samples of reflection padding on each
    /// side. Output is `[n_frames, win]`.
    pub fn frame_signal(
        &self,
        x: &Tensor,
        win: usize,
        hop: usize,
        pad: usize,
        n_frames: usize,
    ) -> Result<Tensor, TensorError> {
        let shape = x.shape();
        if shape.len() != 1 {
            return Err(TensorError::InvalidArgument {
                op: "frame_signal",
                detail: format!("expected rank 1 signal, got {shape:?}"),
            });
        }
        let len = shape[0];
        if win == 0 || hop == 0 || n_frames == 0 {
            return Err(TensorError::InvalidArgument {
                op: "frame_signal",
                detail: "win, hop and n_frames must be positive".into(),
            });
        }
        if len < pad + 1 {
            return Err(TensorError::InvalidArgument {
                op: "frame_signal",
                detail: format!("signal of {len} samples too short for reflection pad {pad}"),
            });
        }
        if (n_frames - 1) * hop + win > len + 2 * pad {
            return Err(TensorError::InvalidArgument {
                op: "frame_signal",
                detail: format!(
                    "{n_frames} frames of {win}@{hop} exceed padded length {}",
                    len + 2 * pad
                ),
            });
        }
        let mut out = vec![0f32; n_frames * win];
        {
            let data = x.inner.borrow();
            for t in 0..n_frames {
                let base = t * hop;
                for j in 0..win {
                    out[t * win + j] = data.data[reflect_index(base + j, pad, len)];
                }
            }
        }
        let out = Tensor::from_vec(out, &[n_frames, win]);
        if self.is_recording() && x.requires_grad() {
            self.record(true, &out, Box::new(FrameSignalOp { x: x.clone(), win, hop, pad, n_frames }));
        }
        Ok(out)
    }

    /// One-sided DFT of each row: `[T, N] -> [T, 2*(N/2+1)]` with the first
    /// half real parts, second half imaginary parts. `N` must be even.
    pub fn rdft(&self, frames: &Tensor) -> Result<Tensor, TensorError> {
        let shape = frames.shape();
        if shape.len() != 2 || shape[1] == 0 || shape[1] % 2 != 0 {
            return Err(TensorError::InvalidArgument {
                op: "rdft",
                detail: format!("expected [frames, even N], got {shape:?}"),
            });
        }
        let (t_count, n) = (shape[0], shape[1]);
        let bins = rdft_len(n);
        let mut out = vec![0f32; t_count * 2 * bins];
        {
            let data = frames.inner.borrow();
            let mut buf = vec![Complex::default(); n];
            for t in 0..t_count {
                for (item, &v) in buf.iter_mut().zip(&data.data[t * n..(t + 1) * n]) {
                    *item = Complex::new(v as f64, 0.0);
                }
                run_fft(&mut buf, false);
                let row = &mut out[t * 2 * bins..(t + 1) * 2 * bins];
                for k in 0..bins {
                    row[k] = buf[k].re as f32;
                    row[bins + k] = buf[k].im as f32;
                }
            }
        }
        let out = Tensor::from_vec(out, &[t_count, 2 * bins]);
        if self.is_recording() && frames.requires_grad() {
            self.record(true, &out, Box::new(RdftOp { x: frames.clone(), n, frames: t_count }));
        }
        Ok(out)
    }

    /// Inverse of [`Tape::rdft`] as a linear map: `[T, 2*(N/2+1)] -> [T, N]`.
    /// The imaginary parts of bins 0 and N/2 are ignored (their coefficients
    /// are zero in the real inverse).
    pub fn irdft(&self, spec: &Tensor, fft_size: usize) -> Result<Tensor, TensorError> {
        let shape = spec.shape();
        let bins = rdft_len(fft_size);
        if fft_size == 0 || fft_size % 2 != 0 || shape.len() != 2 || shape[1] != 2 * bins {
            return Err(TensorError::InvalidArgument {
                op: "irdft",
                detail: format!("expected [frames, {}] for fft size {fft_size}, got {shape:?}", 2 * bins),
            });
        }
        let t_count = shape[0];
        let mut out = vec![0f32; t_count * fft_size];
        {
            let data = spec.inner.borrow();
            let mut buf = vec![Complex::default(); fft_size];
            let scale = 1.0 / fft_size as f64;
            for t in 0..t_count {
                let row = &data.data[t * 2 * bins..(t + 1) * 2 * bins];
                buf[0] = Complex::new(row[0] as f64, 0.0);
                buf[fft_size / 2] = Complex::new(row[fft_size / 2] as f64, 0.0);
                for k in 1..fft_size / 2 {
                    let c = Complex::new(row[k] as f64, row[bins + k] as f64);
                    buf[k] = c;
                    buf[fft_size - k] = c.conj();
                }
                run_fft(&mut buf, true);
                for j in 0..fft_size {
                    out[t * fft_size + j] = (buf[j].re * scale) as f32;
                }
            }
        }
        let out = Tensor::from_vec(out, &[t_count, fft_size]);
        if self.is_recording() && spec.requires_grad() {
            self.record(true, &out, Box::new(IrdftOp { x: spec.clone(), n: fft_size, frames: t_count }));
        }
        Ok(out)
    }

    /// Sums frame rows into a 1-D buffer at stride `hop`:
    /// `out[t*hop + j] += frames[t, j]`. `out_len` must cover the last frame.
    pub fn overlap_add(&self, frames: &Tensor, hop: usize, out_len: usize) -> Result<Tensor, TensorError> {
        let shape = frames.shape();
        if shape.len() != 2 || hop == 0 {
            return Err(TensorError::InvalidArgument {
                op: "overlap_add",
                detail: format!("expected rank 2 frames and positive hop, got {shape:?}"),
            });
        }
        let (t_count, frame_len) = (shape[0], shape[1]);
        if (t_count - 1) * hop + frame_len != out_len {
            return Err(TensorError::InvalidArgument {
                op: "overlap_add",
                detail: format!(
                    "out_len {out_len} does not equal (frames-1)*hop + frame_len = {}",
                    (t_count - 1) * hop + frame_len
                ),
            });
        }
        // f64 accumulation: overlapping windows partially cancel, and the
        // reconstruction bound downstream leaves little rounding headroom.
        let mut acc = vec![0f64; out_len];
        {
            let data = frames.inner.borrow();
            for t in 0..t_count {
                let base = t * hop;
                let row = &data.data[t * frame_len..(t + 1) * frame_len];
                for (o, v) in acc[base..base + frame_len].iter_mut().zip(row) {
                    *o += *v as f64;
                }
            }
        }
        let out = Tensor::from_vec(acc.into_iter().map(|v| v as f32).collect(), &[out_len]);
        if self.is_recording() && frames.requires_grad() {
            self.record(
                true,
                &out,
                Box::new(OverlapAddOp { x: frames.clone(), frame_len, hop, n_frames: t_count }),
            );
        }
        Ok(out)
    }
}
