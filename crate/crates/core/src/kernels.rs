//! Forward and backward kernels over raw grids. The tape in [`crate::tape`]
//! records which of these ran and replays the backward halves.

use crate::error::{CodaError, Result};
use crate::grid::DenseGrid;

/// Stride, zero padding and dilation of a square 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        ConvSpec {
            stride,
            padding,
            dilation,
        }
    }

    /// Output extent along one axis, or `None` when the kernel does not fit.
    pub fn output_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }
}

struct ConvGeometry {
    in_ch: usize,
    out_ch: usize,
    k: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    spec: ConvSpec,
}

impl ConvGeometry {
    fn new(input: &DenseGrid, weight: &DenseGrid, spec: ConvSpec) -> Result<Self> {
        let [_, in_ch, h, w] = input.shape();
        let [out_ch, w_in, kh, kw] = weight.shape();
        if spec.stride == 0 || spec.dilation == 0 {
            return Err(CodaError::invalid("conv2d", "stride and dilation must be ≥ 1"));
        }
        if kh != kw {
            return Err(CodaError::shape("conv2d", format!("non-square kernel {kh}×{kw}")));
        }
        if w_in != in_ch {
            return Err(CodaError::shape(
                "conv2d",
                format!("input has {in_ch} channels but weight expects {w_in} (weight shape {:?})", weight.shape()),
            ));
        }
        let (out_h, out_w) = match (spec.output_len(h, kh), spec.output_len(w, kw)) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(CodaError::shape(
                    "conv2d",
                    format!("{h}×{w} input too small for kernel {kh} with {spec:?}"),
                ))
            }
        };
        Ok(ConvGeometry {
            in_ch,
            out_ch,
            k: kh,
            h,
            w,
            out_h,
            out_w,
            spec,
        })
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Source coordinate for output index `o` and kernel tap `t`, if inside the input.
    #[inline]
    fn source(&self, o: usize, t: usize, len: usize) -> Option<usize> {
        let pos = (o * self.spec.stride + t * self.spec.dilation) as isize - self.spec.padding as isize;
        (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
    }

    fn im2col(&self, item: &[f64], col: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.in_ch {
            let plane = &item[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let dst = &mut col[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        match self.source(oy, ky, self.h) {
                            None => line.fill(0.0),
                            Some(sy) => {
                                let src = &plane[sy * self.w..(sy + 1) * self.w];
                                for (ox, v) in line.iter_mut().enumerate() {
                                    *v = self.source(ox, kx, self.w).map_or(0.0, |sx| src[sx]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], item: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.in_ch {
            let plane = &mut item[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let src = &col[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        let Some(sy) = self.source(oy, ky, self.h) else { continue };
                        let line = &src[oy * self.out_w..(oy + 1) * self.out_w];
                        let dst = &mut plane[sy * self.w..(sy + 1) * self.w];
                        for (ox, &v) in line.iter().enumerate() {
                            if let Some(sx) = self.source(ox, kx, self.w) {
                                dst[sx] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c (m×n) = alpha · a (m×k) · b (k×n) + beta · c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the caller's slices cover the index ranges implied by the
    // dimensions and strides; matrixmultiply reads/writes only those.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv2d_forward(
    input: &DenseGrid,
    weight: &DenseGrid,
    bias: Option<&DenseGrid>,
    spec: ConvSpec,
) -> Result<DenseGrid> {
    let g = ConvGeometry::new(input, weight, spec)?;
    if let Some(b) = bias {
        if b.len() != g.out_ch {
            return Err(CodaError::shape(
                "conv2d",
                format!("bias has {} values for {} output channels", b.len(), g.out_ch),
            ));
        }
    }
    let n = input.batch();
    let (rows, p) = (g.col_rows(), g.positions());
    let mut col = vec![0.0; rows * p];
    let mut out = vec![0.0; n * g.out_ch * p];
    for item in 0..n {
        g.im2col(input.item(item), &mut col);
        let dst = &mut out[item * g.out_ch * p..(item + 1) * g.out_ch * p];
        if let Some(b) = bias {
            for (c, chunk) in dst.chunks_exact_mut(p).enumerate() {
                chunk.fill(b.data()[c]);
            }
        }
        gemm(g.out_ch, rows, p, weight.data(), (rows, 1), &col, (p, 1), 1.0, dst);
    }
    DenseGrid::new([n, g.out_ch, g.out_h, g.out_w], out)
}

/// Gradients of a convolution. Each `need_*` flag skips work for inputs that
/// take no gradient.
pub struct ConvGrads {
    pub input: Option<DenseGrid>,
    pub weight: Option<DenseGrid>,
    pub bias: Option<DenseGrid>,
}

pub fn conv2d_backward(
    input: &DenseGrid,
    weight: &DenseGrid,
    grad_out: &DenseGrid,
    spec: ConvSpec,
    need: (bool, bool, bool),
) -> Result<ConvGrads> {
    let g = ConvGeometry::new(input, weight, spec)?;
    let n = input.batch();
    let (rows, p) = (g.col_rows(), g.positions());
    let mut col = vec![0.0; rows * p];
    let mut dx = need.0.then(|| vec![0.0; input.len()]);
    let mut dw = need.1.then(|| vec![0.0; weight.len()]);
    let mut db = need.2.then(|| vec![0.0; g.out_ch]);
    for item in 0..n {
        let dout = grad_out.item(item);
        if let Some(dw) = dw.as_mut() {
            g.im2col(input.item(item), &mut col);
            // dW (out_ch × rows) += dout (out_ch × p) · colᵀ (p × rows)
            gemm(g.out_ch, p, rows, dout, (p, 1), &col, (1, p), 1.0, dw);
        }
        if let Some(db) = db.as_mut() {
            for (c, chunk) in dout.chunks_exact(p).enumerate() {
                db[c] += chunk.iter().sum::<f64>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            // dcol (rows × p) = Wᵀ (rows × out_ch) · dout (out_ch × p)
            gemm(rows, g.out_ch, p, weight.data(), (1, rows), dout, (p, 1), 0.0, &mut col);
            let len = input.item_len();
            g.col2im(&col, &mut dx[item * len..(item + 1) * len]);
        }
    }
    Ok(ConvGrads {
        input: dx.map(|d| DenseGrid::new(input.shape(), d)).transpose()?,
        weight: dw.map(|d| DenseGrid::new(weight.shape(), d)).transpose()?,
        bias: db.map(|d| DenseGrid::new([g.out_ch, 1, 1, 1], d)).transpose()?,
    })
}

/// 2×2 non-overlapping max pooling. Returns the pooled grid and, per output
/// cell, the flat input index that won (first maximum in row-major order).
pub fn maxpool2_forward(input: &DenseGrid) -> Result<(DenseGrid, Vec<usize>)> {
    let [n, c, h, w] = input.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(CodaError::shape("maxpool2", format!("spatial dims {h}×{w} must be even")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    let data = input.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                out.push(data[best]);
                arg.push(best);
            }
        }
    }
    Ok((DenseGrid::new([n, c, oh, ow], out)?, arg))
}

/// Per-axis interpolation table: `(i0, i1, weight of i1)` for each output index.
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = if i0 == i1 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

pub fn resize_bilinear_forward(input: &DenseGrid, out_h: usize, out_w: usize) -> Result<DenseGrid> {
    let [n, c, h, w] = input.shape();
    if out_h == 0 || out_w == 0 {
        return Err(CodaError::invalid("resize_bilinear", "output dims must be ≥ 1"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(input.clone());
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in input.data().chunks_exact(h * w) {
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    DenseGrid::new([n, c, out_h, out_w], out)
}

pub fn resize_bilinear_backward(input_shape: [usize; 4], grad_out: &DenseGrid) -> Result<DenseGrid> {
    let [n, c, h, w] = input_shape;
    let [_, _, out_h, out_w] = grad_out.shape();
    if (h, w) == (out_h, out_w) {
        return Ok(grad_out.clone());
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut dx = vec![0.0; n * c * h * w];
    for (plane, g) in dx
        .chunks_exact_mut(h * w)
        .zip(grad_out.data().chunks_exact(out_h * out_w))
    {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = g[oy * out_w + ox];
                plane[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                plane[y0 * w + x1] += v * (1.0 - fy) * fx;
                plane[y1 * w + x0] += v * fy * (1.0 - fx);
                plane[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    DenseGrid::new(input_shape, dx)
}

/// Sum each `factor × factor` block into one cell.
pub fn block_sum_forward(input: &DenseGrid, factor: usize) -> Result<DenseGrid> {
    let [n, c, h, w] = input.shape();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(CodaError::shape(
            "block_sum_downsample",
            format!("{h}×{w} not divisible by factor {factor}"),
        ));
    }
    if factor == 1 {
        return Ok(input.clone());
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = vec![0.0; n * c * oh * ow];
    for (plane, dst) in input
        .data()
        .chunks_exact(h * w)
        .zip(out.chunks_exact_mut(oh * ow))
    {
        for y in 0..h {
            let row = &plane[y * w..(y + 1) * w];
            let drow = &mut dst[(y / factor) * ow..(y / factor + 1) * ow];
            for (x, &v) in row.iter().enumerate() {
                drow[x / factor] += v;
            }
        }
    }
    DenseGrid::new([n, c, oh, ow], out)
}

pub fn block_sum_backward(input_shape: [usize; 4], grad_out: &DenseGrid, factor: usize) -> Result<DenseGrid> {
    let [n, c, h, w] = input_shape;
    let ow = w / factor;
    let oh = h / factor;
    let mut dx = Vec::with_capacity(n * c * h * w);
    for g in grad_out.data().chunks_exact(oh * ow) {
        for y in 0..h {
            for x in 0..w {
                dx.push(g[(y / factor) * ow + x / factor]);
            }
        }
    }
    DenseGrid::new(input_shape, dx)
}

/// Numerically stable `log σ(x)`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

/// `σ(x)` without overflow for large `|x|`.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
