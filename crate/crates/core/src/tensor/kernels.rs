//! Raw-slice kernels: sgemm wrapper and im2col-based convolution.

/// Output extent of a strided, zero-padded convolution.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output extent of a transposed convolution.
pub fn conv_transpose_out_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Option<usize> {
    let full = (input - 1) * stride + kernel;
    if stride == 0 || input == 0 || full <= 2 * padding {
        return None;
    }
    Some(full - 2 * padding)
}

/// `c = op(a)·op(b) + beta·c` for row-major `m×k` and `k×n` operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_transposed: bool,
    b: &[f32],
    b_transposed: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
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

/// Geometry of a convolution mapping `n×c_in×h×w` to `n×c_out×ho×wo`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

/// Unfold input patches into a `(c_in·k·k) × (n·ho·wo)` matrix.
pub(crate) fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let cols = g.col_cols();
    let plane = g.ho * g.wo;
    let mut col = vec![0.0f32; g.col_rows() * cols];
    for ci in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst_row = &mut col[row * cols..(row + 1) * cols];
                for b in 0..g.n {
                    let src = &x[(b * g.c_in + ci) * g.h * g.w..][..g.h * g.w];
                    let dst = &mut dst_row[b * plane..(b + 1) * plane];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..][..g.w];
                        let dst_line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                        for (ox, d) in dst_line.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-add columns back into an `n×c_in×h×w` buffer.
pub(crate) fn col2im(col: &[f32], g: &ConvGeom, x: &mut [f32]) {
    let cols = g.col_cols();
    let plane = g.ho * g.wo;
    for ci in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src_row = &col[row * cols..(row + 1) * cols];
                for b in 0..g.n {
                    let dst = &mut x[(b * g.c_in + ci) * g.h * g.w..][..g.h * g.w];
                    let src = &src_row[b * plane..(b + 1) * plane];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.w..][..g.w];
                        let src_line = &src[oy * g.wo..(oy + 1) * g.wo];
                        for (ox, s) in src_line.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst_row[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `n×c×hw` → `c×(n·hw)`.
pub(crate) fn batch_to_channel_major(x: &[f32], n: usize, c: usize, hw: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for b in 0..n {
        for ch in 0..c {
            out[ch * n * hw + b * hw..][..hw].copy_from_slice(&x[(b * c + ch) * hw..][..hw]);
        }
    }
    out
}

/// `c×(n·hw)` → `n×c×hw`.
pub(crate) fn channel_to_batch_major(x: &[f32], n: usize, c: usize, hw: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for b in 0..n {
        for ch in 0..c {
            out[(b * c + ch) * hw..][..hw].copy_from_slice(&x[ch * n * hw + b * hw..][..hw]);
        }
    }
    out
}

pub(crate) fn conv2d_forward(x: &[f32], w: &[f32], g: &ConvGeom) -> Vec<f32> {
    let col = im2col(x, g);
    let mut tmp = vec![0.0f32; g.c_out * g.col_cols()];
    gemm(g.c_out, g.col_rows(), g.col_cols(), w, false, &col, false, 0.0, &mut tmp);
    channel_to_batch_major(&tmp, g.n, g.c_out, g.ho * g.wo)
}

/// Returns `(d_input, d_weight)`, each only when requested.
pub(crate) fn conv2d_backward(
    x: &[f32],
    w: &[f32],
    dout: &[f32],
    g: &ConvGeom,
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let dout_cm = batch_to_channel_major(dout, g.n, g.c_out, g.ho * g.wo);
    let dw = need_weight.then(|| {
        let col = im2col(x, g);
        let mut dw = vec![0.0f32; g.c_out * g.col_rows()];
        gemm(g.c_out, g.col_cols(), g.col_rows(), &dout_cm, false, &col, true, 0.0, &mut dw);
        dw
    });
    let dx = need_input.then(|| {
        let mut dcol = vec![0.0f32; g.col_rows() * g.col_cols()];
        gemm(g.col_rows(), g.c_out, g.col_cols(), w, true, &dout_cm, false, 0.0, &mut dcol);
        let mut dx = vec![0.0f32; g.n * g.c_in * g.h * g.w];
        col2im(&dcol, g, &mut dx);
        dx
    });
    (dx, dw)
}

/// Transposed convolution. `g` describes the *forward* convolution whose
/// adjoint this is: `g.c_out×g.ho×g.wo` is the transposed-conv input and
/// `g.c_in×g.h×g.w` its output. Weight layout is `g.c_out × g.c_in × k × k`.
pub(crate) fn conv_transpose_forward(x: &[f32], w: &[f32], g: &ConvGeom) -> Vec<f32> {
    let x_cm = batch_to_channel_major(x, g.n, g.c_out, g.ho * g.wo);
    let mut col = vec![0.0f32; g.col_rows() * g.col_cols()];
    gemm(g.col_rows(), g.c_out, g.col_cols(), w, true, &x_cm, false, 0.0, &mut col);
    let mut out = vec![0.0f32; g.n * g.c_in * g.h * g.w];
    col2im(&col, g, &mut out);
    out
}

pub(crate) fn conv_transpose_backward(
    x: &[f32],
    w: &[f32],
    dout: &[f32],
    g: &ConvGeom,
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let col = im2col(dout, g);
    let dx = need_input.then(|| {
        let mut dx_cm = vec![0.0f32; g.c_out * g.col_cols()];
        gemm(g.c_out, g.col_rows(), g.col_cols(), w, false, &col, false, 0.0, &mut dx_cm);
        channel_to_batch_major(&dx_cm, g.n, g.c_out, g.ho * g.wo)
    });
    let dw = need_weight.then(|| {
        let x_cm = batch_to_channel_major(x, g.n, g.c_out, g.ho * g.wo);
        let mut dw = vec![0.0f32; g.c_out * g.col_rows()];
        gemm(g.c_out, g.col_cols(), g.col_rows(), &x_cm, false, &col, true, 0.0, &mut dw);
        dw
    });
    (dx, dw)
}
