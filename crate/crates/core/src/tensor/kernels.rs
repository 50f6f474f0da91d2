//! Raw numeric kernels behind the tape ops. No shape checking here; callers
//! validate before dispatching.

/// `c = a · b (+ c)` for row-major operands, with optional transposition of
/// either input. `a` is `m × k` after transposition, `b` is `k × n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above address exactly the m×k, k×n and m×n
    // row-major regions whose lengths were checked.
    unsafe {
        matrixmultiply::sgemm(
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

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

/// Unfolds an NCHW batch into a `(C·K·K) × (N·Ho·Wo)` matrix.
pub(crate) fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let cols = g.cols();
    let plane = g.ho * g.wo;
    let mut out = vec![0.0f32; g.rows() * cols];
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst_row = &mut out[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let src = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    let dst = &mut dst_row[n * plane..(n + 1) * plane];
                    for oh in 0..g.ho {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[ih as usize * g.w..(ih as usize + 1) * g.w];
                        let dst_row = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                        for (ow, d) in dst_row.iter_mut().enumerate() {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                *d = src_row[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub(crate) fn col2im(cols_grad: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let cols = g.cols();
    let plane = g.ho * g.wo;
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src_row = &cols_grad[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let dst = &mut dx[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    let src = &src_row[n * plane..(n + 1) * plane];
                    for oh in 0..g.ho {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[ih as usize * g.w..(ih as usize + 1) * g.w];
                        for ow in 0..g.wo {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                dst_row[iw as usize] += src[oh * g.wo + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Convolution forward. Returns the NCHW output and the unfolded input,
/// which backward reuses.
pub(crate) fn conv_forward(
    x: &[f32],
    weight: &[f32],
    bias: Option<&[f32]>,
    out_ch: usize,
    g: &ConvGeom,
) -> (Vec<f32>, Vec<f32>) {
    let cols = im2col(x, g);
    let ncols = g.cols();
    let mut mat = vec![0.0f32; out_ch * ncols];
    gemm(out_ch, g.rows(), ncols, weight, false, &cols, false, &mut mat, false);
    let plane = g.ho * g.wo;
    let mut out = vec![0.0f32; g.n * out_ch * plane];
    for o in 0..out_ch {
        let b = bias.map_or(0.0, |b| b[o]);
        let src = &mat[o * ncols..(o + 1) * ncols];
        for n in 0..g.n {
            let dst = &mut out[(n * out_ch + o) * plane..(n * out_ch + o + 1) * plane];
            for (d, s) in dst.iter_mut().zip(&src[n * plane..(n + 1) * plane]) {
                *d = s + b;
            }
        }
    }
    (out, cols)
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f32>>,
    pub dw: Option<Vec<f32>>,
    pub db: Option<Vec<f32>>,
}

pub(crate) fn conv_backward(
    dy: &[f32],
    cols: &[f32],
    weight: &[f32],
    out_ch: usize,
    g: &ConvGeom,
    want: (bool, bool, bool),
) -> ConvGrads {
    let ncols = g.cols();
    let plane = g.ho * g.wo;
    // dy NCHW -> O × (N·Ho·Wo)
    let mut dmat = vec![0.0f32; out_ch * ncols];
    for n in 0..g.n {
        for o in 0..out_ch {
            let src = &dy[(n * out_ch + o) * plane..(n * out_ch + o + 1) * plane];
            dmat[o * ncols + n * plane..o * ncols + (n + 1) * plane].copy_from_slice(src);
        }
    }
    let dw = want.1.then(|| {
        let mut dw = vec![0.0f32; out_ch * g.rows()];
        gemm(out_ch, ncols, g.rows(), &dmat, false, cols, true, &mut dw, false);
        dw
    });
    let db = want.2.then(|| {
        (0..out_ch)
            .map(|o| {
                dmat[o * ncols..(o + 1) * ncols]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>() as f32
            })
            .collect()
    });
    let dx = want.0.then(|| {
        let mut dcols = vec![0.0f32; g.rows() * ncols];
        gemm(g.rows(), out_ch, ncols, weight, true, &dmat, false, &mut dcols, false);
        let mut dx = vec![0.0f32; g.n * g.c * g.h * g.w];
        col2im(&dcols, g, &mut dx);
        dx
    });
    ConvGrads { dx, dw, db }
}

/// Index map for pixel shuffle: output element `i` reads input element
/// `map[i]`. Input `(N, C·r², H, W)`, output `(N, C, H·r, W·r)`.
pub(crate) fn pixel_shuffle_map(n: usize, c: usize, h: usize, w: usize, r: usize) -> Vec<usize> {
    let (oh, ow) = (h * r, w * r);
    let mut map = Vec::with_capacity(n * c * oh * ow);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let (i, j) = (y % r, x % r);
                    let src_c = ch * r * r + i * r + j;
                    map.push(((b * c * r * r + src_c) * h + y / r) * w + x / r);
                }
            }
        }
    }
    map
}

/// Numerically stable row-wise softmax of `logits / temperature`.
pub(crate) fn softmax_rows(logits: &[f32], classes: usize, temperature: f32) -> Vec<f32> {
    let mut out = vec![0.0f32; logits.len()];
    for (row, dst) in logits.chunks(classes).zip(out.chunks_mut(classes)) {
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) / temperature;
        let mut sum = 0.0f64;
        for (d, &v) in dst.iter_mut().zip(row) {
            let e = ((v / temperature - max) as f64).exp();
            *d = e as f32;
            sum += e;
        }
        for d in dst.iter_mut() {
            *d = (*d as f64 / sum) as f32;
        }
    }
    out
}

/// Row-wise log-softmax in f64.
pub(crate) fn log_softmax_row(row: &[f32], temperature: f32) -> Vec<f64> {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64 / temperature as f64;
    let scaled: Vec<f64> = row.iter().map(|&v| v as f64 / temperature as f64 - max).collect();
    let lse = scaled.iter().map(|v| v.exp()).sum::<f64>().ln();
    scaled.into_iter().map(|v| v - lse).collect()
}
