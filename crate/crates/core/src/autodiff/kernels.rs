//! Raw numeric kernels shared by the tape and the tape-free forward paths.

use serde::{Deserialize, Serialize};

/// `out[n,m] += a[n,k] · b[k,m]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * m..(i + 1) * m];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * m..(p + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[n,k] += a[n,m] · b[k,m]ᵀ`
pub(crate) fn matmul_a_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, m: usize, k: usize) {
    for i in 0..n {
        let a_row = &a[i * m..(i + 1) * m];
        for p in 0..k {
            let b_row = &b[p * m..(p + 1) * m];
            out[i * k + p] += dot(a_row, b_row);
        }
    }
}

/// `out[k,m] += a[n,k]ᵀ · b[n,m]`
pub(crate) fn matmul_at_b_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * m..(i + 1) * m];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * m..(p + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler vectorise the reduction.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let j = c * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in chunks * 4..a.len() {
        s += a[j] * b[j];
    }
    s
}

/// Geometry of a valid (unpadded) 2-D convolution over a single sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w - self.kernel) / self.stride + 1
    }

    pub fn in_len(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.out_channels * self.out_h() * self.out_w()
    }

    /// Columns of the unrolled patch matrix (`in_channels · k · k`).
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.patch_len()
    }

    pub fn is_valid(&self) -> bool {
        self.kernel > 0
            && self.stride > 0
            && self.in_channels > 0
            && self.out_channels > 0
            && self.kernel <= self.in_h
            && self.kernel <= self.in_w
    }
}

/// Unrolls one sample `[c, h, w]` into patches `[oh·ow, c·k·k]`.
pub(crate) fn im2col(g: &ConvGeometry, x: &[f64], col: &mut [f64]) {
    let (oh, ow, k, s) = (g.out_h(), g.out_w(), g.kernel, g.stride);
    let plen = g.patch_len();
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut col[(oy * ow + ox) * plen..(oy * ow + ox + 1) * plen];
            let mut idx = 0;
            for c in 0..g.in_channels {
                let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
                for ky in 0..k {
                    let src = &plane[(oy * s + ky) * g.in_w + ox * s..][..k];
                    row[idx..idx + k].copy_from_slice(src);
                    idx += k;
                }
            }
        }
    }
}

/// Scatter-adds patch gradients `[oh·ow, c·k·k]` back onto one sample.
pub(crate) fn col2im_acc(g: &ConvGeometry, col: &[f64], dx: &mut [f64]) {
    let (oh, ow, k, s) = (g.out_h(), g.out_w(), g.kernel, g.stride);
    let plen = g.patch_len();
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &col[(oy * ow + ox) * plen..(oy * ow + ox + 1) * plen];
            let mut idx = 0;
            for c in 0..g.in_channels {
                let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
                for ky in 0..k {
                    let dst = &mut plane[(oy * s + ky) * g.in_w + ox * s..][..k];
                    for (d, v) in dst.iter_mut().zip(&row[idx..idx + k]) {
                        *d += v;
                    }
                    idx += k;
                }
            }
        }
    }
}

/// Batched convolution forward. `x` is `[n, c·h·w]`, `w` is
/// `[oc, c·k·k]`, `bias` is `[oc]` (or empty for no bias); returns `[n, oc·oh·ow]`.
pub(crate) fn conv2d_forward(g: &ConvGeometry, x: &[f64], w: &[f64], bias: &[f64], n: usize) -> Vec<f64> {
    let (in_len, out_len, plen) = (g.in_len(), g.out_len(), g.patch_len());
    let spatial = g.out_h() * g.out_w();
    let mut out = vec![0.0; n * out_len];
    let mut col = vec![0.0; spatial * plen];
    for s in 0..n {
        im2col(g, &x[s * in_len..(s + 1) * in_len], &mut col);
        let o = &mut out[s * out_len..(s + 1) * out_len];
        matmul_a_bt_acc(w, &col, o, g.out_channels, plen, spatial);
        if !bias.is_empty() {
            for (c, &b) in bias.iter().enumerate() {
                for v in &mut o[c * spatial..(c + 1) * spatial] {
                    *v += b;
                }
            }
        }
    }
    out
}

/// Batched convolution backward; accumulates into whichever gradient
/// buffers are provided.
pub(crate) fn conv2d_backward(
    g: &ConvGeometry,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    n: usize,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    let (in_len, out_len, plen) = (g.in_len(), g.out_len(), g.patch_len());
    let spatial = g.out_h() * g.out_w();
    let mut col = vec![0.0; spatial * plen];
    let mut dcol = vec![0.0; spatial * plen];
    for s in 0..n {
        let d = &dout[s * out_len..(s + 1) * out_len];
        if let Some(db) = db.as_deref_mut() {
            for (c, b) in db.iter_mut().enumerate() {
                *b += d[c * spatial..(c + 1) * spatial].iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            im2col(g, &x[s * in_len..(s + 1) * in_len], &mut col);
            matmul_acc(d, &col, dw, g.out_channels, spatial, plen);
        }
        if let Some(dx) = dx.as_deref_mut() {
            dcol.iter_mut().for_each(|v| *v = 0.0);
            matmul_at_b_acc(d, w, &mut dcol, g.out_channels, spatial, plen);
            col2im_acc(g, &dcol, &mut dx[s * in_len..(s + 1) * in_len]);
        }
    }
}
