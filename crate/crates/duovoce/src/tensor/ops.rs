//! Elementwise, matmul, shape, and reduction primitives.
//!
//! Binary arithmetic broadcasts with standard right-aligned rules; gradients
//! of broadcast inputs are reduced (summed) back to the input shape. All
//! reductions accumulate in f64 in index order, so results are deterministic.

use super::{Op, Tape, Tensor, TensorError};

// ---------------------------------------------------------------- helpers

pub(super) fn broadcast_shape(
    op: &'static str,
    lhs: &[usize],
    rhs: &[usize],
) -> Result<Vec<usize>, TensorError> {
    let rank = lhs.len().max(rhs.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let a = if i < rank - lhs.len() { 1 } else { lhs[i - (rank - lhs.len())] };
        let b = if i < rank - rhs.len() { 1 } else { rhs[i - (rank - rhs.len())] };
        if a == b || a == 1 || b == 1 {
            out[i] = a.max(b);
        } else {
            return Err(TensorError::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() });
        }
    }
    Ok(out)
}

/// Row-major strides, with stride 0 on axes the shape broadcasts over.
fn effective_strides(shape: &[usize], out_rank: usize) -> Vec<usize> {
    let mut strides = vec![0usize; out_rank];
    let offset = out_rank - shape.len();
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Walks every element of `out_shape`, handing the visitor the flat offsets
/// into two broadcast inputs.
fn for_each_broadcast(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut visit: impl FnMut(usize, usize, usize),
) {
    let rank = out_shape.len();
    let total: usize = out_shape.iter().product();
    if total == 0 {
        return;
    }
    let a_str = effective_strides(a_shape, rank);
    let b_str = effective_strides(b_shape, rank);
    let mut idx = vec![0usize; rank];
    let (mut a_off, mut b_off) = (0usize, 0usize);
    for flat in 0..total {
        visit(flat, a_off, b_off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            a_off += a_str[ax];
            b_off += b_str[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            a_off -= a_str[ax] * out_shape[ax];
            b_off -= b_str[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

// ---------------------------------------------------------------- binary

#[derive(Clone, Copy, PartialEq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryKind {
    fn apply(self, a: f32, b: f32) -> f32 {
        match self {
            BinaryKind::Add => a + b,
            BinaryKind::Sub => a - b,
            BinaryKind::Mul => a * b,
            BinaryKind::Div => a / b,
        }
    }
}

struct BinaryOp {
    kind: BinaryKind,
    a: Tensor,
    b: Tensor,
    out_shape: Vec<usize>,
}

impl Op for BinaryOp {
    fn backward(&self, out_grad: &[f32]) {
        let a_shape = self.a.shape();
        let b_shape = self.b.shape();
        let need_a = self.a.requires_grad();
        let need_b = self.b.requires_grad();
        let a_data = self.a.to_vec();
        let b_data = self.b.to_vec();
        let mut ga = if need_a { Some(vec![0f64; a_data.len()]) } else { None };
        let mut gb = if need_b { Some(vec![0f64; b_data.len()]) } else { None };
        for_each_broadcast(&self.out_shape, &a_shape, &b_shape, |flat, ao, bo| {
            let g = out_grad[flat] as f64;
            match self.kind {
                BinaryKind::Add => {
                    if let Some(ga) = ga.as_mut() {
                        ga[ao] += g;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[bo] += g;
                    }
                }
                BinaryKind::Sub => {
                    if let Some(ga) = ga.as_mut() {
                        ga[ao] += g;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[bo] -= g;
                    }
                }
                BinaryKind::Mul => {
                    if let Some(ga) = ga.as_mut() {
                        ga[ao] += g * b_data[bo] as f64;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[bo] += g * a_data[ao] as f64;
                    }
                }
                BinaryKind::Div => {
                    let bv = b_data[bo] as f64;
                    if let Some(ga) = ga.as_mut() {
                        ga[ao] += g / bv;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[bo] -= g * a_data[ao] as f64 / (bv * bv);
                    }
                }
            }
        });
        if let Some(ga) = ga {
            let ga32: Vec<f32> = ga.iter().map(|&v| v as f32).collect();
            self.a.accumulate_grad(&ga32);
        }
        if let Some(gb) = gb {
            let gb32: Vec<f32> = gb.iter().map(|&v| v as f32).collect();
            self.b.accumulate_grad(&gb32);
        }
    }
}

// ---------------------------------------------------------------- unary

#[derive(Clone, Copy)]
enum UnaryKind {
    Neg,
    Sqrt,
    Exp,
    Log,
    Sigmoid,
    Tanh,
    Relu,
    LeakyRelu(f32),
}

struct UnaryOp {
    kind: UnaryKind,
    x: Tensor,
    y: Tensor,
}

impl Op for UnaryOp {
    fn backward(&self, out_grad: &[f32]) {
        let x = self.x.to_vec();
        let y = self.y.to_vec();
        let gx: Vec<f32> = out_grad
            .iter()
            .enumerate()
            .map(|(i, &g)| match self.kind {
                UnaryKind::Neg => -g,
                UnaryKind::Sqrt => g * 0.5 / y[i],
                UnaryKind::Exp => g * y[i],
                UnaryKind::Log => g / x[i],
                UnaryKind::Sigmoid => g * y[i] * (1.0 - y[i]),
                UnaryKind::Tanh => g * (1.0 - y[i] * y[i]),
                UnaryKind::Relu => {
                    if x[i] > 0.0 {
                        g
                    } else {
                        0.0
                    }
                }
                UnaryKind::LeakyRelu(slope) => {
                    if x[i] > 0.0 {
                        g
                    } else {
                        g * slope
                    }
                }
            })
            .collect();
        self.x.accumulate_grad(&gx);
    }
}

// ---------------------------------------------------------------- matmul

fn matmul_kernel(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0f32; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

struct MatmulOp {
    a: Tensor,
    b: Tensor,
    m: usize,
    k: usize,
    n: usize,
}

impl Op for MatmulOp {
    fn backward(&self, out_grad: &[f32]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if self.a.requires_grad() {
            // gA[i,kk] = sum_j g[i,j] * b[kk,j]
            let b = self.b.to_vec();
            let mut ga = vec![0f32; m * k];
            for i in 0..m {
                let g_row = &out_grad[i * n..(i + 1) * n];
                for kk in 0..k {
                    let b_row = &b[kk * n..(kk + 1) * n];
                    let mut acc = 0f32;
                    for (gv, bv) in g_row.iter().zip(b_row) {
                        acc += gv * bv;
                    }
                    ga[i * k + kk] = acc;
                }
            }
            self.a.accumulate_grad(&ga);
        }
        if self.b.requires_grad() {
            // gB[kk,j] = sum_i a[i,kk] * g[i,j]
            let a = self.a.to_vec();
            let mut gb = vec![0f32; k * n];
            for i in 0..m {
                let g_row = &out_grad[i * n..(i + 1) * n];
                for kk in 0..k {
                    let av = a[i * k + kk];
                    if av == 0.0 {
                        continue;
                    }
                    let gb_row = &mut gb[kk * n..(kk + 1) * n];
                    for (o, gv) in gb_row.iter_mut().zip(g_row) {
                        *o += av * gv;
                    }
                }
            }
            self.b.accumulate_grad(&gb);
        }
    }
}

// ---------------------------------------------------------------- shape ops

struct ConcatOp {
    parts: Vec<Tensor>,
    axis: usize,
    out_shape: Vec<usize>,
}

impl Op for ConcatOp {
    fn backward(&self, out_grad: &[f32]) {
        let inner: usize = self.out_shape[self.axis + 1..].iter().product();
        let outer: usize = self.out_shape[..self.axis].iter().product();
        let total_block = self.out_shape[self.axis] * inner;
        let mut offset = 0usize;
        for part in &self.parts {
            let p_shape = part.shape();
            let block = p_shape[self.axis] * inner;
            if part.requires_grad() {
                let mut gp = vec![0f32; p_shape.iter().product()];
                for o in 0..outer {
                    let src = o * total_block + offset;
                    gp[o * block..(o + 1) * block]
                        .copy_from_slice(&out_grad[src..src + block]);
                }
                part.accumulate_grad(&gp);
            }
            offset += block;
        }
    }
}

struct SliceOp {
    x: Tensor,
    axis: usize,
    start: usize,
    len: usize,
}

impl Op for SliceOp {
    fn backward(&self, out_grad: &[f32]) {
        let shape = self.x.shape();
        let inner: usize = shape[self.axis + 1..].iter().product();
        let outer: usize = shape[..self.axis].iter().product();
        let in_block = shape[self.axis] * inner;
        let out_block = self.len * inner;
        let mut gx = vec![0f32; shape.iter().product()];
        for o in 0..outer {
            let dst = o * in_block + self.start * inner;
            gx[dst..dst + out_block].copy_from_slice(&out_grad[o * out_block..(o + 1) * out_block]);
        }
        self.x.accumulate_grad(&gx);
    }
}

struct ReshapeOp {
    x: Tensor,
}

impl Op for ReshapeOp {
    fn backward(&self, out_grad: &[f32]) {
        self.x.accumulate_grad(out_grad);
    }
}

struct TransposeOp {
    x: Tensor,
    rows: usize,
    cols: usize,
}

impl Op for TransposeOp {
    fn backward(&self, out_grad: &[f32]) {
        // out_grad is [cols, rows]; scatter back to [rows, cols].
        let mut gx = vec![0f32; self.rows * self.cols];
        for c in 0..self.cols {
            for r in 0..self.rows {
                gx[r * self.cols + c] = out_grad[c * self.rows + r];
            }
        }
        self.x.accumulate_grad(&gx);
    }
}

// ---------------------------------------------------------------- reductions

struct SumOp {
    x: Tensor,
    mean: bool,
}

impl Op for SumOp {
    fn backward(&self, out_grad: &[f32]) {
        let n = self.x.len();
        let g = if self.mean { out_grad[0] / n as f32 } else { out_grad[0] };
        self.x.accumulate_grad(&vec![g; n]);
    }
}

struct SumAxisOp {
    x: Tensor,
    axis: usize,
}

impl Op for SumAxisOp {
    fn backward(&self, out_grad: &[f32]) {
        let shape = self.x.shape();
        let inner: usize = shape[self.axis + 1..].iter().product();
        let outer: usize = shape[..self.axis].iter().product();
        let dim = shape[self.axis];
        let mut gx = vec![0f32; shape.iter().product()];
        for o in 0..outer {
            for d in 0..dim {
                let dst = (o * dim + d) * inner;
                let src = o * inner;
                gx[dst..dst + inner].copy_from_slice(&out_grad[src..src + inner]);
            }
        }
        self.x.accumulate_grad(&gx);
    }
}

// ---------------------------------------------------------------- Tape API

impl Tape {
    fn should_record(&self, any_requires: bool) -> bool {
        any_requires && self.is_recording()
    }

    fn binary(&self, kind: BinaryKind, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        let a_shape = a.shape();
        let b_shape = b.shape();
        let op_name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let out_shape = broadcast_shape(op_name, &a_shape, &b_shape)?;
        let a_data = a.inner.borrow();
        let b_data = b.inner.borrow();
        let total: usize = out_shape.iter().product();
        let mut out = vec![0f32; total];
        if a_shape == b_shape {
            for ((o, &av), &bv) in out.iter_mut().zip(&a_data.data).zip(&b_data.data) {
                *o = kind.apply(av, bv);
            }
        } else {
            for_each_broadcast(&out_shape, &a_shape, &b_shape, |flat, ao, bo| {
                out[flat] = kind.apply(a_data.data[ao], b_data.data[bo]);
            });
        }
        drop(a_data);
        drop(b_data);
        let out = Tensor::from_vec(out, &out_shape);
        if self.should_record(a.requires_grad() || b.requires_grad()) {
            self.record(
                true,
                &out,
                Box::new(BinaryOp { kind, a: a.clone(), b: b.clone(), out_shape }),
            );
        }
        Ok(out)
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.binary(BinaryKind::Div, a, b)
    }

    /// Multiplies by a compile-time constant (not differentiated through).
    pub fn scale(&self, x: &Tensor, c: f32) -> Result<Tensor, TensorError> {
        self.mul(x, &Tensor::scalar(c))
    }

    pub fn add_scalar(&self, x: &Tensor, c: f32) -> Result<Tensor, TensorError> {
        self.add(x, &Tensor::scalar(c))
    }

    fn unary(&self, kind: UnaryKind, x: &Tensor) -> Tensor {
        let data = x.to_vec();
        let out_data: Vec<f32> = data
            .iter()
            .map(|&v| match kind {
                UnaryKind::Neg => -v,
                UnaryKind::Sqrt => v.sqrt(),
                UnaryKind::Exp => v.exp(),
                UnaryKind::Log => v.ln(),
                UnaryKind::Sigmoid => 1.0 / (1.0 + (-v).exp()),
                UnaryKind::Tanh => v.tanh(),
                UnaryKind::Relu => v.max(0.0),
                UnaryKind::LeakyRelu(slope) => {
                    if v > 0.0 {
                        v
                    } else {
                        slope * v
                    }
                }
            })
            .collect();
        let out = Tensor::from_vec(out_data, &x.shape());
        if self.should_record(x.requires_grad()) {
            self.record(true, &out, Box::new(UnaryOp { kind, x: x.clone(), y: out.clone() }));
        }
        out
    }

    pub fn neg(&self, x: &Tensor) -> Tensor {
        self.unary(UnaryKind::Neg, x)
    }

    pub fn sqrt(&self, x: &Tensor) -> Tensor {
        self.unary(UnaryKind::Sqrt, x)
    }

    pub fn exp(&self, x: &Tensor) -> Tensor {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn log(&self, x: &Tensor) -> Tensor {
        self.unary(UnaryKind::Log, x)
    }

    pub fn sigmoid(&self, x: &Tensor) -> Tensor {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn tanh(&self, x: &Tensor) -> Tensor {
        self.unary(UnaryKind::Tanh, x)
    }

    pub fn relu(&self, x: &Tensor) -> Tensor {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn leaky_relu(&self, x: &Tensor, slope: f32) -> Tensor {
        self.unary(UnaryKind::LeakyRelu(slope), x)
    }

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        let a_shape = a.shape();
        let b_shape = b.shape();
        if a_shape.len() != 2 || b_shape.len() != 2 || a_shape[1] != b_shape[0] {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: a_shape, rhs: b_shape });
        }
        let (m, k, n) = (a_shape[0], a_shape[1], b_shape[1]);
        let out_data = {
            let a_ref = a.inner.borrow();
            let b_ref = b.inner.borrow();
            matmul_kernel(&a_ref.data, &b_ref.data, m, k, n)
        };
        let out = Tensor::from_vec(out_data, &[m, n]);
        if self.should_record(a.requires_grad() || b.requires_grad()) {
            self.record(true, &out, Box::new(MatmulOp { a: a.clone(), b: b.clone(), m, k, n }));
        }
        Ok(out)
    }

    pub fn concat(&self, parts: &[Tensor], axis: usize) -> Result<Tensor, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::InvalidArgument { op: "concat", detail: "no inputs".into() });
        }
        let first = parts[0].shape();
        if axis >= first.len() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                detail: format!("axis {axis} out of range for rank {}", first.len()),
            });
        }
        let mut axis_total = 0usize;
        for p in parts {
            let s = p.shape();
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch { op: "concat", lhs: first, rhs: s });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let inner: usize = first[axis + 1..].iter().product();
        let outer: usize = first[..axis].iter().product();
        let total_block = axis_total * inner;
        let mut out = vec![0f32; outer * total_block];
        let mut offset = 0usize;
        for p in parts {
            let s = p.shape();
            let block = s[axis] * inner;
            let data = p.inner.borrow();
            for o in 0..outer {
                let dst = o * total_block + offset;
                out[dst..dst + block].copy_from_slice(&data.data[o * block..(o + 1) * block]);
            }
            offset += block;
        }
        let out = Tensor::from_vec(out, &out_shape);
        if self.should_record(parts.iter().any(|p| p.requires_grad())) {
            self.record(
                true,
                &out,
                Box::new(ConcatOp { parts: parts.to_vec(), axis, out_shape }),
            );
        }
        Ok(out)
    }

    /// Contiguous range `[start, end)` along one axis.
    pub fn slice(&self, x: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor, TensorError> {
        let shape = x.shape();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(TensorError::InvalidArgument {
                op: "slice",
                detail: format!("range {start}..{end} on axis {axis} of shape {shape:?}"),
            });
        }
        let len = end - start;
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let in_block = shape[axis] * inner;
        let out_block = len * inner;
        let mut out = vec![0f32; outer * out_block];
        {
            let data = x.inner.borrow();
            for o in 0..outer {
                let src = o * in_block + start * inner;
                out[o * out_block..(o + 1) * out_block].copy_from_slice(&data.data[src..src + out_block]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor::from_vec(out, &out_shape);
        if self.should_record(x.requires_grad()) {
            self.record(true, &out, Box::new(SliceOp { x: x.clone(), axis, start, len }));
        }
        Ok(out)
    }

    pub fn reshape(&self, x: &Tensor, new_shape: &[usize]) -> Result<Tensor, TensorError> {
        let total: usize = new_shape.iter().product();
        if total != x.len() {
            return Err(TensorError::ShapeMismatch { op: "reshape", lhs: x.shape(), rhs: new_shape.to_vec() });
        }
        let out = Tensor::from_vec(x.to_vec(), new_shape);
        if self.should_record(x.requires_grad()) {
            self.record(true, &out, Box::new(ReshapeOp { x: x.clone() }));
        }
        Ok(out)
    }

    /// Rank-2 transpose.
    pub fn transpose(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        let shape = x.shape();
        if shape.len() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "transpose",
                detail: format!("expected rank 2, got shape {shape:?}"),
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        let data = x.to_vec();
        let mut out = vec![0f32; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = data[r * cols + c];
            }
        }
        let out = Tensor::from_vec(out, &[cols, rows]);
        if self.should_record(x.requires_grad()) {
            self.record(true, &out, Box::new(TransposeOp { x: x.clone(), rows, cols }));
        }
        Ok(out)
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        let acc: f64 = x.inner.borrow().data.iter().map(|&v| v as f64).sum();
        let out = Tensor::from_vec(vec![acc as f32], &[1]);
        if self.should_record(x.requires_grad()) {
            self.record(true, &out, Box::new(SumOp { x: x.clone(), mean: false }));
        }
        Ok(out)
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        if x.is_empty() {
            return Err(TensorError::InvalidArgument { op: "mean", detail: "empty tensor".into() });
        }
        let n = x.len();
        let acc: f64 = x.inner.borrow().data.iter().map(|&v| v as f64).sum();
        let out = Tensor::from_vec(vec![(acc / n as f64) as f32], &[1]);
        if self.should_record(x.requires_grad()) {
            self.record(true, &out, Box::new(SumOp { x: x.clone(), mean: true }));
        }
        Ok(out)
    }

    /// Sum along one axis, keeping it as a length-1 dimension.
    pub fn sum_axis(&self, x: &Tensor, axis: usize) -> Result<Tensor, TensorError> {
        let shape = x.shape();
        if axis >= shape.len() {
            return Err(TensorError::InvalidArgument {
                op: "sum_axis",
                detail: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let dim = shape[axis];
        let mut out = vec![0f64; outer * inner];
        {
            let data = x.inner.borrow();
            for o in 0..outer {
                for d in 0..dim {
                    let src = (o * dim + d) * inner;
                    let dst = o * inner;
                    for i in 0..inner {
                        out[dst + i] += data.data[src + i] as f64;
                    }
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let out32: Vec<f32> = out.iter().map(|&v| v as f32).collect();
        let out = Tensor::from_vec(out32, &out_shape);
        if self.should_record(x.requires_grad()) {
            self.record(true, &out, Box::new(SumAxisOp { x: x.clone(), axis }));
        }
        Ok(out)
    }
}
