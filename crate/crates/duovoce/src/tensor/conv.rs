//! Direct-loop 2D convolution, transposed convolution, and zero padding.
//!
//! Layout is NCHW for activations. Convolution weights are [out, in, kH, kW];
//! transposed-convolution weights are [in, out, kH, kW]. The inner loops run
//! along the last axis so the unit-stride case reduces to slice zips.

use super::{Op, Tape, Tensor, TensorError};

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

fn conv_forward(x: &[f32], wt: &[f32], g: ConvGeom) -> Vec<f32> {
    let mut out = vec![0f32; g.n * g.c_out * g.oh * g.ow];
    for n in 0..g.n {
        for o in 0..g.c_out {
            let out_plane = &mut out[(n * g.c_out + o) * g.oh * g.ow..(n * g.c_out + o + 1) * g.oh * g.ow];
            for c in 0..g.c_in {
                let x_plane = &x[(n * g.c_in + c) * g.h * g.w..(n * g.c_in + c + 1) * g.h * g.w];
                for kh in 0..g.kh {
                    for kw in 0..g.kw {
                        let wv = wt[((o * g.c_in + c) * g.kh + kh) * g.kw + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        accumulate_rows_gather(out_plane, x_plane, g, kh, kw, wv);
                    }
                }
            }
        }
    }
    out
}

/// out[oh,ow] += wv * x[ih,iw] over the valid range for one kernel offset.
fn accumulate_rows_gather(out_plane: &mut [f32], x_plane: &[f32], g: ConvGeom, kh: usize, kw: usize, wv: f32) {
    for oh in 0..g.oh {
        let ih = (oh * g.sh + kh) as isize - g.ph as isize;
        if ih < 0 || ih >= g.h as isize {
            continue;
        }
        let ih = ih as usize;
        if g.sw == 1 {
            let shift = kw as isize - g.pw as isize;
            let ow_lo = (-shift).max(0) as usize;
            let ow_hi = ((g.w as isize - shift).min(g.ow as isize)).max(0) as usize;
            if ow_lo >= ow_hi {
                continue;
            }
            let iw_lo = (ow_lo as isize + shift) as usize;
            let count = ow_hi - ow_lo;
            let out_row = &mut out_plane[oh * g.ow + ow_lo..oh * g.ow + ow_lo + count];
            let x_row = &x_plane[ih * g.w + iw_lo..ih * g.w + iw_lo + count];
            for (o, xv) in out_row.iter_mut().zip(x_row) {
                *o += wv * xv;
            }
        } else {
            for ow in 0..g.ow {
                let iw = (ow * g.sw + kw) as isize - g.pw as isize;
                if iw < 0 || iw >= g.w as isize {
                    continue;
                }
                out_plane[oh * g.ow + ow] += wv * x_plane[ih * g.w + iw as usize];
            }
        }
    }
}

/// x-grad[ih,iw] += wv * out-grad[oh,ow] over the same valid range geometry.
fn accumulate_rows_scatter(gx_plane: &mut [f32], go_plane: &[f32], g: ConvGeom, kh: usize, kw: usize, wv: f32) {
    for oh in 0..g.oh {
        let ih = (oh * g.sh + kh) as isize - g.ph as isize;
        if ih < 0 || ih >= g.h as isize {
            continue;
        }
        let ih = ih as usize;
        if g.sw == 1 {
            let shift = kw as isize - g.pw as isize;
            let ow_lo = (-shift).max(0) as usize;
            let ow_hi = ((g.w as isize - shift).min(g.ow as isize)).max(0) as usize;
            if ow_lo >= ow_hi {
                continue;
            }
            let iw_lo = (ow_lo as isize + shift) as usize;
            let count = ow_hi - ow_lo;
            let gx_row = &mut gx_plane[ih * g.w + iw_lo..ih * g.w + iw_lo + count];
            let go_row = &go_plane[oh * g.ow + ow_lo..oh * g.ow + ow_lo + count];
            for (x, gv) in gx_row.iter_mut().zip(go_row) {
                *x += wv * gv;
            }
        } else {
            for ow in 0..g.ow {
                let iw = (ow * g.sw + kw) as isize - g.pw as isize;
                if iw < 0 || iw >= g.w as isize {
                    continue;
                }
                gx_plane[ih * g.w + iw as usize] += wv * go_plane[oh * g.ow + ow];
            }
        }
    }
}

/// gw[o,c,kh,kw] += sum over the valid range of x[ih,iw] * go[oh,ow].
fn weight_grad(x: &[f32], go: &[f32], g: ConvGeom) -> Vec<f32> {
    let mut gw = vec![0f32; g.c_out * g.c_in * g.kh * g.kw];
    for n in 0..g.n {
        for o in 0..g.c_out {
            let go_plane = &go[(n * g.c_out + o) * g.oh * g.ow..(n * g.c_out + o + 1) * g.oh * g.ow];
            for c in 0..g.c_in {
                let x_plane = &x[(n * g.c_in + c) * g.h * g.w..(n * g.c_in + c + 1) * g.h * g.w];
                for kh in 0..g.kh {
                    for kw in 0..g.kw {
                        let mut acc = 0f32;
                        for oh in 0..g.oh {
                            let ih = (oh * g.sh + kh) as isize - g.ph as isize;
                            if ih < 0 || ih >= g.h as isize {
                                continue;
                            }
                            let ih = ih as usize;
                            if g.sw == 1 {
                                let shift = kw as isize - g.pw as isize;
                                let ow_lo = (-shift).max(0) as usize;
                                let ow_hi = ((g.w as isize - shift).min(g.ow as isize)).max(0) as usize;
                                if ow_lo >= ow_hi {
                                    continue;
                                }
                                let iw_lo = (ow_lo as isize + shift) as usize;
                                let count = ow_hi - ow_lo;
                                let go_row = &go_plane[oh * g.ow + ow_lo..oh * g.ow + ow_lo + count];
                                let x_row = &x_plane[ih * g.w + iw_lo..ih * g.w + iw_lo + count];
                                for (gv, xv) in go_row.iter().zip(x_row) {
                                    acc += gv * xv;
                                }
                            } else {
                                for ow in 0..g.ow {
                                    let iw = (ow * g.sw + kw) as isize - g.pw as isize;
                                    if iw < 0 || iw >= g.w as isize {
                                        continue;
                                    }
                                    acc += go_plane[oh * g.ow + ow] * x_plane[ih * g.w + iw as usize];
                                }
                            }
                        }
                        gw[((o * g.c_in + c) * g.kh + kh) * g.kw + kw] += acc;
                    }
                }
            }
        }
    }
    gw
}

struct Conv2dOp {
    x: Tensor,
    w: Tensor,
    geom: ConvGeom,
}

impl Op for Conv2dOp {
    fn backward(&self, out_grad: &[f32]) {
        let g = self.geom;
        if self.x.requires_grad() {
            let wt = self.w.to_vec();
            let mut gx = vec![0f32; g.n * g.c_in * g.h * g.w];
            for n in 0..g.n {
                for o in 0..g.c_out {
                    let go_plane = &out_grad[(n * g.c_out + o) * g.oh * g.ow..(n * g.c_out + o + 1) * g.oh * g.ow];
                    for c in 0..g.c_in {
                        let gx_plane = &mut gx[(n * g.c_in + c) * g.h * g.w..(n * g.c_in + c + 1) * g.h * g.w];
                        for kh in 0..g.kh {
                            for kw in 0..g.kw {
                                let wv = wt[((o * g.c_in + c) * g.kh + kh) * g.kw + kw];
                                if wv != 0.0 {
                                    accumulate_rows_scatter(gx_plane, go_plane, g, kh, kw, wv);
                                }
                            }
                        }
                    }
                }
            }
            self.x.accumulate_grad(&gx);
        }
        if self.w.requires_grad() {
            let x = self.x.to_vec();
            let gw = weight_grad(&x, out_grad, self.geom);
            self.w.accumulate_grad(&gw);
        }
    }
}

struct ConvTranspose2dOp {
    x: Tensor,
    w: Tensor,
    /// Geometry in reference-conv orientation: `h`/`w` are the transpose
    /// *output* dims, `oh`/`ow` the transpose *input* dims, `c_in` the
    /// transpose input channels, `c_out` the transpose output channels.
    geom: ConvGeom,
}

impl Op for ConvTranspose2dOp {
    fn backward(&self, out_grad: &[f32]) {
        // The forward was the scatter adjoint of a conv mapping the transpose
        // output back to the transpose input, so backward w.r.t. x is exactly
        // that conv's gather.
        let g = self.geom;
        if self.x.requires_grad() {
            let wt = self.w.to_vec();
            let mut gx = vec![0f32; g.n * g.c_in * g.oh * g.ow];
            for n in 0..g.n {
                for ci in 0..g.c_in {
                    let gx_plane = &mut gx[(n * g.c_in + ci) * g.oh * g.ow..(n * g.c_in + ci + 1) * g.oh * g.ow];
                    for co in 0..g.c_out {
                        let go_plane = &out_grad[(n * g.c_out + co) * g.h * g.w..(n * g.c_out + co + 1) * g.h * g.w];
                        for kh in 0..g.kh {
                            for kw in 0..g.kw {
                                let wv = wt[((ci * g.c_out + co) * g.kh + kh) * g.kw + kw];
                                if wv != 0.0 {
                                    accumulate_rows_gather(gx_plane, go_plane, g, kh, kw, wv);
                                }
                            }
                        }
                    }
                }
            }
            self.x.accumulate_grad(&gx);
        }
        if self.w.requires_grad() {
            // In reference-conv orientation the conv input is out_grad
            // (c_out channels) and the conv output is x (c_in channels), so
            // swap the channel roles; the produced layout is then exactly
            // [c_in, c_out, kH, kW].
            let x = self.x.to_vec();
            let mut swapped = self.geom;
            swapped.c_in = g.c_out;
            swapped.c_out = g.c_in;
            let gw = weight_grad(out_grad, &x, swapped);
            self.w.accumulate_grad(&gw);
        }
    }
}

struct PadHwOp {
    x: Tensor,
    pads: (usize, usize, usize, usize),
}

impl Op for PadHwOp {
    fn backward(&self, out_grad: &[f32]) {
        let shape = self.x.shape();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (top, _bottom, left, right) = self.pads;
        let wp = w + left + right;
        let hp = h + top + self.pads.1;
        let mut gx = vec![0f32; n * c * h * w];
        for plane in 0..n * c {
            for row in 0..h {
                let src = (plane * hp + row + top) * wp + left;
                let dst = (plane * h + row) * w;
                gx[dst..dst + w].copy_from_slice(&out_grad[src..src + w]);
            }
        }
        self.x.accumulate_grad(&gx);
    }
}

impl Tape {
    /// 2D convolution over NCHW input with [out, in, kH, kW] weights,
    /// symmetric zero padding.
    pub fn conv2d(
        &self,
        x: &Tensor,
        w: &Tensor,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Tensor, TensorError> {
        let xs = x.shape();
        let ws = w.shape();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: xs, rhs: ws });
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(TensorError::InvalidArgument { op: "conv2d", detail: "zero stride".into() });
        }
        let (h, w_in) = (xs[2], xs[3]);
        let (kh, kw) = (ws[2], ws[3]);
        if h + 2 * padding.0 < kh || w_in + 2 * padding.1 < kw {
            return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: xs, rhs: ws });
        }
        let geom = ConvGeom {
            n: xs[0],
            c_in: xs[1],
            h,
            w: w_in,
            c_out: ws[0],
            kh,
            kw,
            sh: stride.0,
            sw: stride.1,
            ph: padding.0,
            pw: padding.1,
            oh: (h + 2 * padding.0 - kh) / stride.0 + 1,
            ow: (w_in + 2 * padding.1 - kw) / stride.1 + 1,
        };
        let out_data = {
            let xr = x.inner.borrow();
            let wr = w.inner.borrow();
            conv_forward(&xr.data, &wr.data, geom)
        };
        let out = Tensor::from_vec(out_data, &[geom.n, geom.c_out, geom.oh, geom.ow]);
        if self.is_recording() && (x.requires_grad() || w.requires_grad()) {
            self.record(true, &out, Box::new(Conv2dOp { x: x.clone(), w: w.clone(), geom }));
        }
        Ok(out)
    }

    /// Transposed 2D convolution (fractionally-strided) with [in, out, kH, kW]
    /// weights. Output spatial size is `(in-1)*stride + k - 2*padding`.
    pub fn conv2d_transpose(
        &self,
        x: &Tensor,
        w: &Tensor,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Tensor, TensorError> {
        let xs = x.shape();
        let ws = w.shape();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[0] {
            return Err(TensorError::ShapeMismatch { op: "conv2d_transpose", lhs: xs, rhs: ws });
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(TensorError::InvalidArgument { op: "conv2d_transpose", detail: "zero stride".into() });
        }
        let (hin, win) = (xs[2], xs[3]);
        let (kh, kw) = (ws[2], ws[3]);
        let hout = (hin - 1) * stride.0 + kh;
        let wout = (win - 1) * stride.1 + kw;
        if hout < 2 * padding.0 + 1 || wout < 2 * padding.1 + 1 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d_transpose",
                detail: format!("padding {padding:?} exceeds kernel coverage"),
            });
        }
        let hout = hout - 2 * padding.0;
        let wout = wout - 2 * padding.1;
        // Same geometry as the conv that maps [hout, wout] -> [hin, win]:
        // the forward here is that conv's scatter adjoint.
        let geom = ConvGeom {
            n: xs[0],
            c_in: xs[1],  // transpose input channels = conv output channels
            c_out: ws[1], // transpose output channels = conv input channels
            h: hout,
            w: wout,
            kh,
            kw,
            sh: stride.0,
            sw: stride.1,
            ph: padding.0,
            pw: padding.1,
            oh: hin,
            ow: win,
        };
        let out_data = {
            let xr = x.inner.borrow();
            let wr = w.inner.borrow();
            let mut out = vec![0f32; geom.n * geom.c_out * geom.h * geom.w];
            for n in 0..geom.n {
                for c in 0..geom.c_in {
                    let x_plane = &xr.data[(n * geom.c_in + c) * hin * win..(n * geom.c_in + c + 1) * hin * win];
                    for o in 0..geom.c_out {
                        let out_plane =
                            &mut out[(n * geom.c_out + o) * geom.h * geom.w..(n * geom.c_out + o + 1) * geom.h * geom.w];
                        for kh_i in 0..kh {
                            for kw_i in 0..kw {
                                let wv = wr.data[((c * geom.c_out + o) * kh + kh_i) * kw + kw_i];
                                if wv != 0.0 {
                                    accumulate_rows_scatter(out_plane, x_plane, geom, kh_i, kw_i, wv);
                                }
                            }
                        }
                    }
                }
            }
            out
        };
        let out = Tensor::from_vec(out_data, &[geom.n, geom.c_out, geom.h, geom.w]);
        if self.is_recording() && (x.requires_grad() || w.requires_grad()) {
            self.record(true, &out, Box::new(ConvTranspose2dOp { x: x.clone(), w: w.clone(), geom }));
        }
        Ok(out)
    }

    /// Zero padding of the last two axes of an NCHW tensor:
    /// `(top, bottom, left, right)`.
    pub fn pad_hw(
        &self,
        x: &Tensor,
        pads: (usize, usize, usize, usize),
    ) -> Result<Tensor, TensorError> {
        let shape = x.shape();
        if shape.len() != 4 {
            return Err(TensorError::InvalidArgument {
                op: "pad_hw",
                detail: format!("expected rank 4, got {shape:?}"),
            });
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (top, bottom, left, right) = pads;
        let (hp, wp) = (h + top + bottom, w + left + right);
        let mut out = vec![0f32; n * c * hp * wp];
        {
            let xr = x.inner.borrow();
            for plane in 0..n * c {
                for row in 0..h {
                    let dst = (plane * hp + row + top) * wp + left;
                    let src = (plane * h + row) * w;
                    out[dst..dst + w].copy_from_slice(&xr.data[src..src + w]);
                }
            }
        }
        let out = Tensor::from_vec(out, &[n, c, hp, wp]);
        if self.is_recording() && x.requires_grad() {
            self.record(true, &out, Box::new(PadHwOp { x: x.clone(), pads }));
        }
        Ok(out)
    }
}
