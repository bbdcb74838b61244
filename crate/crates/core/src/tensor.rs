//! Dense row-major `f64` tensors and the raw kernels the tape replays.
//!
//! Feature maps are stored `H×W×C` so that a reshape to `N×D` (N = H·W
//! spatial positions, D channels) is free.

use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::contract(format!(
                "zero-sized dimension in {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("Tensor::new", shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut t = Self::zeros(&[n, n]);
        for (i, v) in values.iter().enumerate() {
            t.data[i * n + i] = *v;
        }
        t
    }

    /// Builds a rank-2 tensor from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::contract("ragged rows"));
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dim(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim("add_assign", &self.shape, &other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `‖self − other‖_F / ‖other‖_F`, falling back to the absolute norm for
    /// a zero reference.
    pub fn rel_frobenius_diff(&self, other: &Tensor) -> f64 {
        let diff: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let norm = other.frobenius_norm();
        if norm > 0.0 {
            diff / norm
        } else {
            diff
        }
    }

    fn require_rank(&self, rank: usize, op: &'static str) -> Result<()> {
        if self.rank() != rank {
            return Err(Error::contract(format!(
                "{op} expects a rank-{rank} tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    fn hwc(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        self.require_rank(3, op)?;
        Ok((self.shape[0], self.shape[1], self.shape[2]))
    }
}

// ---------------------------------------------------------------------------
// GEMM
// ---------------------------------------------------------------------------

/// `c = a·b (+ c)` for row-major operands, with optional transposition of
/// either input expressed through strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_trans {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above pin every operand's length to the extents
    // described by (m, k, n) and the derived strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::dim("matmul", &a.shape, &b.shape));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.data, false, &b.data, false, &mut out, false);
    Tensor::new(&[m, n], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    a.require_rank(2, "transpose")?;
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor::new(&[n, m], out)
}

// ---------------------------------------------------------------------------
// Row-wise softmax
// ---------------------------------------------------------------------------

pub fn softmax_rows(a: &Tensor) -> Result<Tensor> {
    a.require_rank(2, "softmax_rows")?;
    let cols = a.shape[1];
    let mut out = a.data.clone();
    out.par_chunks_mut(cols).for_each(|row| {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    });
    Tensor::new(&a.shape, out)
}

/// Backward of [`softmax_rows`] given its output `y` and upstream `g`.
pub(crate) fn softmax_rows_backward(y: &Tensor, g: &Tensor) -> Tensor {
    let cols = y.shape[1];
    let mut out = vec![0.0; y.len()];
    out.par_chunks_mut(cols)
        .zip(y.data.par_chunks(cols).zip(g.data.par_chunks(cols)))
        .for_each(|(o, (yr, gr))| {
            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
            for ((o, y), g) in o.iter_mut().zip(yr).zip(gr) {
                *o = y * (g - dot);
            }
        });
    Tensor {
        shape: y.shape.clone(),
        data: out,
    }
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Geometry of a 2-D convolution over an `H×W×Cin` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        let (h, w, cin) = x.hwc("conv2d")?;
        if k.rank() != 4 || k.shape[2] != cin {
            return Err(Error::dim("conv2d", &x.shape, &k.shape));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d stride must be >= 1"));
        }
        let (kh, kw, cout) = (k.shape[0], k.shape[1], k.shape[3]);
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::dim(
                "conv2d kernel exceeds padded input",
                &x.shape,
                &k.shape,
            ));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Ok(ConvGeom {
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            pad,
            oh,
            ow,
        })
    }

    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    /// Input pixel feeding output `(oy, ox)` through kernel tap `(ky, kx)`.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad)?;
        let ix = (ox * self.stride + kx).checked_sub(self.pad)?;
        (iy < self.h && ix < self.w).then_some((iy, ix))
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plen = g.patch_len();
    let mut cols = vec![0.0; g.oh * g.ow * plen];
    cols.par_chunks_mut(g.ow * plen)
        .enumerate()
        .for_each(|(oy, row)| {
            for ox in 0..g.ow {
                let patch = &mut row[ox * plen..(ox + 1) * plen];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        if let Some((iy, ix)) = g.source(oy, ox, ky, kx) {
                            let src = (iy * g.w + ix) * g.cin;
                            let dst = (ky * g.kw + kx) * g.cin;
                            patch[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                        }
                    }
                }
            }
        });
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plen = g.patch_len();
    let mut x = vec![0.0; g.h * g.w * g.cin];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let patch = &cols[(oy * g.ow + ox) * plen..(oy * g.ow + ox + 1) * plen];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    if let Some((iy, ix)) = g.source(oy, ox, ky, kx) {
                        let dst = (iy * g.w + ix) * g.cin;
                        let src = (ky * g.kw + kx) * g.cin;
                        for c in 0..g.cin {
                            x[dst + c] += patch[src + c];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Cross-correlation of an `H×W×Cin` map with a `kh×kw×Cin×Cout` kernel.
pub fn conv2d(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeom::new(x, k, stride, pad)?;
    let cols = im2col(&x.data, &g);
    let mut out = vec![0.0; g.oh * g.ow * g.cout];
    gemm(
        g.oh * g.ow,
        g.patch_len(),
        g.cout,
        &cols,
        false,
        &k.data,
        false,
        &mut out,
        false,
    );
    Tensor::new(&[g.oh, g.ow, g.cout], out)
}

/// Gradients of [`conv2d`] with respect to input and kernel.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    k: &Tensor,
    stride: usize,
    pad: usize,
    grad: &Tensor,
    want_x: bool,
    want_k: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let g = ConvGeom::new(x, k, stride, pad).expect("geometry validated in forward");
    let rows = g.oh * g.ow;
    let plen = g.patch_len();
    let dk = want_k.then(|| {
        let cols = im2col(&x.data, &g);
        let mut dk = vec![0.0; plen * g.cout];
        gemm(
            plen, rows, g.cout, &cols, true, &grad.data, false, &mut dk, false,
        );
        Tensor {
            shape: k.shape.clone(),
            data: dk,
        }
    });
    let dx = want_x.then(|| {
        let mut dcols = vec![0.0; rows * plen];
        gemm(
            rows, g.cout, plen, &grad.data, false, &k.data, true, &mut dcols, false,
        );
        Tensor {
            shape: x.shape.clone(),
            data: col2im(&dcols, &g),
        }
    });
    (dx, dk)
}

/// Geometry of a transposed convolution; `k` is `kh×kw×Cin×Cout`.
#[derive(Clone, Copy, Debug)]
struct DeconvGeom {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl DeconvGeom {
    fn new(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        let (h, w, cin) = x.hwc("conv_transpose2d")?;
        if k.rank() != 4 || k.shape[2] != cin {
            return Err(Error::dim("conv_transpose2d", &x.shape, &k.shape));
        }
        if stride == 0 {
            return Err(Error::contract("conv_transpose2d stride must be >= 1"));
        }
        let (kh, kw, cout) = (k.shape[0], k.shape[1], k.shape[3]);
        let full_h = (h - 1) * stride + kh;
        let full_w = (w - 1) * stride + kw;
        if full_h <= 2 * pad || full_w <= 2 * pad {
            return Err(Error::dim("conv_transpose2d padding", &x.shape, &k.shape));
        }
        Ok(DeconvGeom {
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            pad,
            oh: full_h - 2 * pad,
            ow: full_w - 2 * pad,
        })
    }

    #[inline]
    fn target(&self, iy: usize, ix: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let oy = (iy * self.stride + ky).checked_sub(self.pad)?;
        let ox = (ix * self.stride + kx).checked_sub(self.pad)?;
        (oy < self.oh && ox < self.ow).then_some((oy, ox))
    }

    /// `kh×kw×Cin×Cout` → `Cin×(kh·kw·Cout)`.
    fn permute_kernel(&self, k: &[f64]) -> Vec<f64> {
        let taps = self.kh * self.kw;
        let mut out = vec![0.0; k.len()];
        for t in 0..taps {
            for ci in 0..self.cin {
                let src = (t * self.cin + ci) * self.cout;
                let dst = ci * taps * self.cout + t * self.cout;
                out[dst..dst + self.cout].copy_from_slice(&k[src..src + self.cout]);
            }
        }
        out
    }

    fn unpermute_kernel(&self, kp: &[f64]) -> Vec<f64> {
        let taps = self.kh * self.kw;
        let mut out = vec![0.0; kp.len()];
        for t in 0..taps {
            for ci in 0..self.cin {
                let dst = (t * self.cin + ci) * self.cout;
                let src = ci * taps * self.cout + t * self.cout;
                out[dst..dst + self.cout].copy_from_slice(&kp[src..src + self.cout]);
            }
        }
        out
    }
}

pub fn conv_transpose2d(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = DeconvGeom::new(x, k, stride, pad)?;
    let taps = g.kh * g.kw;
    let kp = g.permute_kernel(&k.data);
    let mut cols = vec![0.0; g.h * g.w * taps * g.cout];
    gemm(
        g.h * g.w,
        g.cin,
        taps * g.cout,
        &x.data,
        false,
        &kp,
        false,
        &mut cols,
        false,
    );
    let mut out = vec![0.0; g.oh * g.ow * g.cout];
    for iy in 0..g.h {
        for ix in 0..g.w {
            let base = (iy * g.w + ix) * taps * g.cout;
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    if let Some((oy, ox)) = g.target(iy, ix, ky, kx) {
                        let src = base + (ky * g.kw + kx) * g.cout;
                        let dst = (oy * g.ow + ox) * g.cout;
                        for c in 0..g.cout {
                            out[dst + c] += cols[src + c];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[g.oh, g.ow, g.cout], out)
}

pub(crate) fn conv_transpose2d_backward(
    x: &Tensor,
    k: &Tensor,
    stride: usize,
    pad: usize,
    grad: &Tensor,
    want_x: bool,
    want_k: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let g = DeconvGeom::new(x, k, stride, pad).expect("geometry validated in forward");
    let taps = g.kh * g.kw;
    let mut dcols = vec![0.0; g.h * g.w * taps * g.cout];
    for iy in 0..g.h {
        for ix in 0..g.w {
            let base = (iy * g.w + ix) * taps * g.cout;
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    if let Some((oy, ox)) = g.target(iy, ix, ky, kx) {
                        let dst = base + (ky * g.kw + kx) * g.cout;
                        let src = (oy * g.ow + ox) * g.cout;
                        dcols[dst..dst + g.cout].copy_from_slice(&grad.data[src..src + g.cout]);
                    }
                }
            }
        }
    }
    let dx = want_x.then(|| {
        let kp = g.permute_kernel(&k.data);
        let mut dx = vec![0.0; g.h * g.w * g.cin];
        gemm(
            g.h * g.w,
            taps * g.cout,
            g.cin,
            &dcols,
            false,
            &kp,
            true,
            &mut dx,
            false,
        );
        Tensor {
            shape: x.shape.clone(),
            data: dx,
        }
    });
    let dk = want_k.then(|| {
        let mut dkp = vec![0.0; g.cin * taps * g.cout];
        gemm(
            g.cin,
            g.h * g.w,
            taps * g.cout,
            &x.data,
            true,
            &dcols,
            false,
            &mut dkp,
            false,
        );
        Tensor {
            shape: k.shape.clone(),
            data: g.unpermute_kernel(&dkp),
        }
    });
    (dx, dk)
}

// ---------------------------------------------------------------------------
// Pooling and resampling
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

fn pool_geom(
    x: &Tensor,
    window: usize,
    stride: usize,
) -> Result<(usize, usize, usize, usize, usize)> {
    let (h, w, c) = x.hwc("pool2d")?;
    if window == 0 || stride == 0 {
        return Err(Error::contract("pool2d window and stride must be >= 1"));
    }
    if window > h || window > w {
        return Err(Error::dim(
            "pool2d window exceeds input",
            &x.shape,
            &[window, window],
        ));
    }
    Ok((
        h,
        w,
        c,
        (h - window) / stride + 1,
        (w - window) / stride + 1,
    ))
}

/// Offset of the first maximal element (row-major scan) of one pooling window.
#[inline]
fn window_argmax(
    x: &[f64],
    w: usize,
    c: usize,
    oy: usize,
    ox: usize,
    ch: usize,
    window: usize,
    stride: usize,
) -> usize {
    let mut best = f64::NEG_INFINITY;
    let mut best_idx = 0;
    for dy in 0..window {
        for dx in 0..window {
            let idx = ((oy * stride + dy) * w + ox * stride + dx) * c + ch;
            if x[idx] > best {
                best = x[idx];
                best_idx = idx;
            }
        }
    }
    best_idx
}

pub fn pool2d(x: &Tensor, kind: PoolKind, window: usize, stride: usize) -> Result<Tensor> {
    let (_, w, c, oh, ow) = pool_geom(x, window, stride)?;
    let mut out = vec![0.0; oh * ow * c];
    let area = (window * window) as f64;
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                out[(oy * ow + ox) * c + ch] = match kind {
                    PoolKind::Max => {
                        x.data[window_argmax(&x.data, w, c, oy, ox, ch, window, stride)]
                    }
                    PoolKind::Avg => {
                        let mut s = 0.0;
                        for dy in 0..window {
                            for dx in 0..window {
                                s += x.data[((oy * stride + dy) * w + ox * stride + dx) * c + ch];
                            }
                        }
                        s / area
                    }
                };
            }
        }
    }
    Tensor::new(&[oh, ow, c], out)
}

pub(crate) fn pool2d_backward(
    x: &Tensor,
    kind: PoolKind,
    window: usize,
    stride: usize,
    grad: &Tensor,
) -> Tensor {
    let (_, w, c, oh, ow) = pool_geom(x, window, stride).expect("validated in forward");
    let mut dx = vec![0.0; x.len()];
    let area = (window * window) as f64;
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let g = grad.data[(oy * ow + ox) * c + ch];
                match kind {
                    PoolKind::Max => {
                        dx[window_argmax(&x.data, w, c, oy, ox, ch, window, stride)] += g
                    }
                    PoolKind::Avg => {
                        for dy in 0..window {
                            for dxx in 0..window {
                                dx[((oy * stride + dy) * w + ox * stride + dxx) * c + ch] +=
                                    g / area;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor {
        shape: x.shape.clone(),
        data: dx,
    }
}

/// Nearest-neighbour ×2 upsampling of an `H×W×C` map.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (h, w, c) = x.hwc("upsample2x")?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let src = ((oy / 2) * w + ox / 2) * c;
            let dst = (oy * ow + ox) * c;
            out[dst..dst + c].copy_from_slice(&x.data[src..src + c]);
        }
    }
    Tensor::new(&[oh, ow, c], out)
}

pub(crate) fn upsample2x_backward(x_shape: &[usize], grad: &Tensor) -> Tensor {
    let (w, c) = (x_shape[1], x_shape[2]);
    let (oh, ow) = (grad.shape[0], grad.shape[1]);
    let mut dx = vec![0.0; x_shape.iter().product()];
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = ((oy / 2) * w + ox / 2) * c;
            let src = (oy * ow + ox) * c;
            for ch in 0..c {
                dx[dst + ch] += grad.data[src + ch];
            }
        }
    }
    Tensor {
        shape: x_shape.to_vec(),
        data: dx,
    }
}

// ---------------------------------------------------------------------------
// Channel broadcasting and reductions
// ---------------------------------------------------------------------------

fn last_dim(x: &Tensor) -> usize {
    *x.shape.last().expect("tensors have rank >= 1")
}

/// Multiplies the trailing (channel) axis of `x` by `s` (length C).
pub fn channel_mul(x: &Tensor, s: &Tensor) -> Result<Tensor> {
    let c = last_dim(x);
    if s.len() != c {
        return Err(Error::dim("channel_mul", &x.shape, &s.shape));
    }
    let mut out = x.data.clone();
    for row in out.chunks_mut(c) {
        for (v, m) in row.iter_mut().zip(&s.data) {
            *v *= m;
        }
    }
    Tensor::new(&x.shape, out)
}

/// Adds `b` (length C) along the trailing axis of `x`.
pub fn channel_add(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let c = last_dim(x);
    if b.len() != c {
        return Err(Error::dim("channel_add", &x.shape, &b.shape));
    }
    let mut out = x.data.clone();
    for row in out.chunks_mut(c) {
        for (v, a) in row.iter_mut().zip(&b.data) {
            *v += a;
        }
    }
    Tensor::new(&x.shape, out)
}

/// Sums `x` over every axis except the trailing one.
pub(crate) fn channel_sum(x: &Tensor) -> Tensor {
    let c = last_dim(x);
    let mut out = vec![0.0; c];
    for row in x.data.chunks(c) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor {
        shape: vec![c],
        data: out,
    }
}

/// Channels `[start, start+len)` of an `H×W×C` map.
pub fn slice_channels(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (h, w, c) = x.hwc("slice_channels")?;
    if len == 0 || start + len > c {
        return Err(Error::dim("slice_channels", &x.shape, &[start, len]));
    }
    let mut out = Vec::with_capacity(h * w * len);
    for row in x.data.chunks(c) {
        out.extend_from_slice(&row[start..start + len]);
    }
    Tensor::new(&[h, w, len], out)
}

pub(crate) fn slice_channels_backward(x_shape: &[usize], start: usize, grad: &Tensor) -> Tensor {
    let c = x_shape[2];
    let len = grad.shape[2];
    let mut dx = vec![0.0; x_shape.iter().product()];
    for (dst, src) in dx.chunks_mut(c).zip(grad.data.chunks(len)) {
        dst[start..start + len].copy_from_slice(src);
    }
    Tensor {
        shape: x_shape.to_vec(),
        data: dx,
    }
}

/// Mean of a rank-2 tensor along `axis` (0: over rows → length cols).
pub fn mean_axis(a: &Tensor, axis: usize) -> Result<Tensor> {
    a.require_rank(2, "mean_axis")?;
    let (m, n) = (a.shape[0], a.shape[1]);
    match axis {
        0 => {
            let mut out = vec![0.0; n];
            for row in a.data.chunks(n) {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            out.iter_mut().for_each(|v| *v /= m as f64);
            Tensor::new(&[n], out)
        }
        1 => {
            let out = a
                .data
                .chunks(n)
                .map(|r| r.iter().sum::<f64>() / n as f64)
                .collect();
            Tensor::new(&[m], out)
        }
        _ => Err(Error::contract(format!(
            "mean_axis: axis {axis} out of range"
        ))),
    }
}

pub fn trace(a: &Tensor) -> Result<f64> {
    if a.rank() != 2 || a.shape[0] != a.shape[1] {
        return Err(Error::dim("trace", &a.shape, &a.shape));
    }
    let n = a.shape[0];
    Ok((0..n).map(|i| a.data[i * n + i]).sum())
}
