//! Minimal dense-tensor reverse-mode autodiff.
//!
//! Tensors are flat row-major f32 buffers. Ops are methods on [`Tape`]; a
//! tape records each executed op whenever recording is enabled and at least
//! one input requires grad. [`Tape::backward`] walks the record once in
//! reverse execution order, accumulating gradients into every contributing
//! tensor. Leaves created with [`Tensor::param`] keep their gradients for
//! [`sgd_step`]; intermediate gradients are released as the sweep passes
//! them.
//!
//! A tape and its tensors form one single-threaded context (`Rc` inside).
//! Data parallelism happens across contexts: clone the parameters, run
//! separate tapes, reduce the gradients explicitly.

mod conv;
pub(crate) mod dsp;
mod ops;

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

pub use dsp::{irdft_len, rdft_len};

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("loss tensor is not attached to this tape")]
    DetachedLoss,
    #[error("tape already consumed by backward; re-run forward first")]
    TapeConsumed,
    #[error("sgd_step: parameter #{index} has no gradient")]
    MissingGrad { index: usize },
}

struct Inner {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    /// (tape uid, step index) when this tensor is the output of a recorded op.
    node: Option<(u64, usize)>,
}

/// Shared handle to an n-dimensional f32 buffer.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Inner>>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn new(data: Vec<f32>, shape: Vec<usize>, requires_grad: bool) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Self {
            inner: Rc::new(RefCell::new(Inner { shape, data, grad: None, requires_grad, node: None })),
        }
    }

    /// Constant leaf (no gradient tracking).
    pub fn from_vec(data: Vec<f32>, shape: &[usize]) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Self::new(data, shape.to_vec(), false)
    }

    /// Learnable leaf: gradients accumulate here during backward.
    pub fn param(data: Vec<f32>, shape: &[usize]) -> Self {
        assert_eq!(data.len(), shape.iter().product::<usize>());
        Self::new(data, shape.to_vec(), true)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(vec![0.0; shape.iter().product()], shape.to_vec(), false)
    }

    pub fn scalar(v: f32) -> Self {
        Self::new(vec![v], vec![1], false)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.inner.borrow().data.clone()
    }

    /// Scalar value of a single-element tensor.
    pub fn value(&self) -> f32 {
        let inner = self.inner.borrow();
        assert_eq!(inner.data.len(), 1, "value() on non-scalar tensor");
        inner.data[0]
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Constant copy sharing no gradient history.
    pub fn detach(&self) -> Tensor {
        Tensor::new(self.to_vec(), self.shape(), false)
    }

    /// Overwrites the data of a leaf in place (parameter updates, teacher
    /// forcing buffers). Shape must match.
    pub fn set_data(&self, data: &[f32]) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(inner.data.len(), data.len());
        inner.data.copy_from_slice(data);
    }

    fn accumulate_grad(&self, contrib: &[f32]) {
        let mut inner = self.inner.borrow_mut();
        match &mut inner.grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi += ci;
                }
            }
            None => inner.grad = Some(contrib.to_vec()),
        }
    }

}

/// Saved state each recorded op needs to push gradients to its inputs.
pub(crate) trait Op {
    fn backward(&self, out_grad: &[f32]);
}

struct Step {
    output: Tensor,
    op: Box<dyn Op>,
}

struct TapeInner {
    uid: u64,
    steps: Vec<Step>,
    recording: bool,
    consumed: bool,
}

/// Execution context for tensor ops. Records ops for backward when created
/// with [`Tape::new`]; [`Tape::inference`] runs the same ops without
/// recording.
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

static TAPE_UID: AtomicU64 = AtomicU64::new(1);

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_recording(true)
    }

    /// Forward-only context: nothing is recorded, no gradients flow.
    pub fn inference() -> Self {
        Self::with_recording(false)
    }

    fn with_recording(recording: bool) -> Self {
        let uid = TAPE_UID.fetch_add(1, Ordering::Relaxed);
        Self {
            inner: Rc::new(RefCell::new(TapeInner { uid, steps: Vec::new(), recording, consumed: false })),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.inner.borrow().recording
    }

    pub(crate) fn record(&self, inputs_require_grad: bool, output: &Tensor, op: Box<dyn Op>) {
        let mut tape = self.inner.borrow_mut();
        if !tape.recording || !inputs_require_grad {
            return;
        }
        let idx = tape.steps.len();
        {
            let mut out = output.inner.borrow_mut();
            out.requires_grad = true;
            out.node = Some((tape.uid, idx));
        }
        tape.steps.push(Step { output: output.clone(), op });
    }

    /// Reverse sweep from a scalar loss. Single use: the tape cannot be
    /// replayed after gradients are consumed.
    pub fn backward(&self, loss: &Tensor) -> Result<(), TensorError> {
        {
            let tape = self.inner.borrow();
            if tape.consumed {
                return Err(TensorError::TapeConsumed);
            }
            let loss_inner = loss.inner.borrow();
            if loss_inner.data.len() != 1 {
                return Err(TensorError::NonScalarLoss { shape: loss_inner.shape.clone() });
            }
            match loss_inner.node {
                Some((uid, _)) if uid == tape.uid => {}
                _ => return Err(TensorError::DetachedLoss),
            }
        }
        self.inner.borrow_mut().consumed = true;
        loss.inner.borrow_mut().grad = Some(vec![1.0]);

        let steps = std::mem::take(&mut self.inner.borrow_mut().steps);
        for step in steps.iter().rev() {
            // Take, not clone: each tensor is produced by exactly one step,
            // and all of its consumers sit later on the tape, so its grad is
            // complete by the time its producing step is visited.
            let grad = step.output.inner.borrow_mut().grad.take();
            if let Some(grad) = grad {
                step.op.backward(&grad);
            }
        }
        Ok(())
    }
}

/// Pure SGD update: `p <- p - lr * grad`, then gradients are cleared.
pub fn sgd_step(params: &[Tensor], lr: f32) -> Result<(), TensorError> {
    for (index, p) in params.iter().enumerate() {
        let inner = p.inner.borrow();
        if inner.grad.is_none() {
            return Err(TensorError::MissingGrad { index });
        }
        drop(inner);
        let mut inner = p.inner.borrow_mut();
        let grad = inner.grad.take().unwrap();
        for (pi, gi) in inner.data.iter_mut().zip(&grad) {
            *pi -= lr * gi;
        }
    }
    Ok(())
}

/// Central-difference gradient verification.
///
/// Runs `f` once on a recording tape to collect the analytic gradient of the
/// scalar output with respect to `x`, then perturbs each coordinate of `x`
/// by `±eps` on inference tapes. Returns the max over coordinates of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f32) -> Result<f32, TensorError>
where
    F: FnMut(&Tape, &Tensor) -> Result<Tensor, TensorError>,
{
    grad_check_subset(f, x, eps, usize::MAX)
}

/// [`grad_check`] restricted to the `count` coordinates with the largest
/// analytic-gradient magnitude.
///
/// Deep compositions are too expensive to difference coordinate by
/// coordinate, and near-zero-gradient coordinates measure only f32 rounding
/// noise. A chain-rule defect scales the dominant coordinates too, so they
/// carry the signal.
///
/// Each coordinate is differenced over a ladder of window widths from a
/// quarter of `eps` up to four times it, keeping the best agreement. A wide
/// window straddling a rectifier kink and a narrow one drowned in f32
/// rounding both corrupt the measurement rather than indict the gradient; a
/// genuinely wrong analytic coordinate disagrees at every scale.
pub fn grad_check_subset<F>(
    mut f: F,
    x: &Tensor,
    eps: f32,
    count: usize,
) -> Result<f32, TensorError>
where
    F: FnMut(&Tape, &Tensor) -> Result<Tensor, TensorError>,
{
    let shape = x.shape();
    let base = x.to_vec();

    let tape = Tape::new();
    let leaf = Tensor::param(base.clone(), &shape);
    let out = f(&tape, &leaf)?;
    if out.len() != 1 {
        return Err(TensorError::NonScalarLoss { shape: out.shape() });
    }
    tape.backward(&out)?;
    let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; base.len()]);

    let mut order: Vec<usize> = (0..base.len()).collect();
    order.sort_by(|&a, &b| analytic[b].abs().total_cmp(&analytic[a].abs()));
    order.truncate(count);

    let mut max_err = 0.0f32;
    for i in order {
        let a = analytic[i];
        let mut best = f32::INFINITY;
        for scale in [1.0f32, 0.5, 2.0, 0.25, 4.0, 0.125, 0.0625] {
            let h = eps * scale;
            let mut plus = base.clone();
            plus[i] += h;
            let mut minus = base.clone();
            minus[i] -= h;
            // Divide by the step that survives f32 rounding, not the
            // nominal 2*eps.
            let step = plus[i] as f64 - minus[i] as f64;
            let yp = f(&Tape::inference(), &Tensor::from_vec(plus, &shape))?.value() as f64;
            let ym = f(&Tape::inference(), &Tensor::from_vec(minus, &shape))?.value() as f64;
            let numeric = ((yp - ym) / step) as f32;
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            best = best.min((a - numeric).abs() / denom);
            // Clearly converged; other window widths only spend evaluations.
            if best <= 2e-4 {
                break;
            }
        }
        if best > max_err {
            max_err = best;
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_matches_hand_derivatives() {
        // loss = sum(x^2) at x=[3] -> grad [6]
        let tape = Tape::new();
        let x = Tensor::param(vec![3.0], &[1]);
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.sum(&sq).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);

        // loss = sum(sigmoid(x)) at x=[0] -> grad [0.25]
        let tape = Tape::new();
        let x = Tensor::param(vec![0.0], &[1]);
        let loss = tape.sum(&tape.sigmoid(&x)).unwrap();
        tape.backward(&loss).unwrap();
        assert!((x.grad().unwrap()[0] - 0.25).abs() < 1e-7);
    }

    #[test]
    fn tape_is_single_use() {
        let tape = Tape::new();
        let x = Tensor::param(vec![1.0, 2.0], &[2]);
        let loss = tape.sum(&tape.mul(&x, &x).unwrap()).unwrap();
        tape.backward(&loss).unwrap();
        assert!(matches!(tape.backward(&loss), Err(TensorError::TapeConsumed)));
    }

    #[test]
    fn non_scalar_and_detached_losses_are_rejected() {
        let tape = Tape::new();
        let x = Tensor::param(vec![1.0, 2.0], &[2]);
        let y = tape.mul(&x, &x).unwrap();
        assert!(matches!(tape.backward(&y), Err(TensorError::NonScalarLoss { .. })));

        let detached = Tensor::scalar(5.0);
        assert!(matches!(tape.backward(&detached), Err(TensorError::DetachedLoss)));

        // Loss built on a different tape is detached from this one.
        let other = Tape::new();
        let z = Tensor::param(vec![2.0], &[1]);
        let other_loss = other.sum(&tape_free_square(&other, &z)).unwrap();
        assert!(matches!(tape.backward(&other_loss), Err(TensorError::DetachedLoss)));
    }

    fn tape_free_square(tape: &Tape, x: &Tensor) -> Tensor {
        tape.mul(x, x).unwrap()
    }

    #[test]
    fn gradients_accumulate_across_backwards_on_fresh_tapes() {
        let x = Tensor::param(vec![3.0], &[1]);
        for _ in 0..2 {
            let tape = Tape::new();
            let loss = tape.sum(&tape.mul(&x, &x).unwrap()).unwrap();
            tape.backward(&loss).unwrap();
        }
        assert_eq!(x.grad().unwrap(), vec![12.0]);
    }

    #[test]
    fn sgd_step_updates_and_clears() {
        let p = Tensor::param(vec![1.0], &[1]);
        p.accumulate_grad(&[2.0]);
        sgd_step(&[p.clone()], 0.5).unwrap();
        assert_eq!(p.to_vec(), vec![0.0]);
        assert!(p.grad().is_none());
        assert!(matches!(sgd_step(&[p], 0.5), Err(TensorError::MissingGrad { index: 0 })));
    }

    #[test]
    fn two_sgd_steps_halve_the_coordinate() {
        // f(x) = x^2, lr = 0.25: x <- x - 0.25 * 2x = x/2.
        let x = Tensor::param(vec![1.0], &[1]);
        for _ in 0..2 {
            let tape = Tape::new();
            let loss = tape.sum(&tape.mul(&x, &x).unwrap()).unwrap();
            tape.backward(&loss).unwrap();
            sgd_step(&[x.clone()], 0.25).unwrap();
        }
        assert_eq!(x.to_vec(), vec![0.25]);
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let x = Tensor::param(vec![1.5, -2.5], &[2]);
        x.accumulate_grad(&[10.0, 10.0]);
        sgd_step(&[x.clone()], 0.0).unwrap();
        assert_eq!(x.to_vec(), vec![1.5, -2.5]);
    }

    #[test]
    fn grad_check_agrees_on_sum_of_squares() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 2.0, 0.7], &[4]);
        let err = grad_check(|t, x| t.sum(&t.mul(x, x)?), &x, 5e-3).unwrap();
        assert!(err < 1e-4, "err = {err}");
    }

    #[test]
    fn grad_check_reports_zero_for_constants() {
        let x = Tensor::from_vec(vec![1.0, 2.0], &[2]);
        let err = grad_check(|_, _| Ok(Tensor::scalar(7.0)), &x, 1e-3);
        // Constant function: loss never touches the tape, so backward errors;
        // a constant *of* the input is the supported case.
        assert!(err.is_err());

        let err = grad_check(
            |t, x| {
                let zero = Tensor::scalar(0.0);
                t.add(&t.sum(&t.mul(x, &zero)?)?, &Tensor::scalar(7.0))
            },
            &x,
            5e-3,
        )
        .unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn random_three_layer_composition_passes_grad_check() {
        let mut r = crate::rng::substream(11, "gradcheck", 0);
        let x = Tensor::from_vec(
            (0..12).map(|_| crate::rng::uniform_in(&mut r, -1.0, 1.0) as f32).collect(),
            &[3, 4],
        );
        let w1 = Tensor::from_vec(
            (0..20).map(|_| crate::rng::normal(&mut r) as f32 * 0.5).collect(),
            &[4, 5],
        );
        let w2 = Tensor::from_vec(
            (0..15).map(|_| crate::rng::normal(&mut r) as f32 * 0.5).collect(),
            &[5, 3],
        );
        let err = grad_check(
            move |t, x| {
                let h = t.tanh(&t.matmul(x, &w1)?);
                let h2 = t.sigmoid(&t.matmul(&h, &w2)?);
                t.sum(&t.mul(&h2, &h2)?)
            },
            &x,
            5e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "err = {err}");
    }
}
