//! Dense kernels behind the graph ops: gemm wrappers and direct convolutions.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// C(m×n) += A(m×k) · B(k×n), with optional logical transposes of A/B.
///
/// `a` is read as its transpose when `ta` (then it must be stored k×m),
/// likewise `tb` (stored n×k). `beta` scales the existing C.
#[allow(clippy::too_many_arguments)]
pub fn gemm_into<T: Scalar>(
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    alpha: T,
    beta: T,
) {
    assert_eq!(a.len(), m * k, "gemm: A buffer");
    assert_eq!(b.len(), k * n, "gemm: B buffer");
    assert_eq!(c.len(), m * n, "gemm: C buffer");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == T::zero() {
            c.fill(T::zero());
        } else if beta != T::one() {
            for v in c.iter_mut() {
                *v = *v * beta;
            }
        }
        return;
    }
    let (rsa, csa) = if ta { (1isize, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1isize, k as isize) } else { (n as isize, 1) };
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
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

/// A(m×k) · B(k×n) as a fresh row-major matrix.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k) = a.dims2();
    let (k2, n) = b.dims2();
    assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
    let mut out = Tensor::zeros(vec![m, n]);
    gemm_into(out.data_mut(), m, k, n, a.data(), false, b.data(), false, T::one(), T::zero());
    out
}

/// A(m×k) · Bᵀ where B is stored (n×k).
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k) = a.dims2();
    let (n, k2) = b.dims2();
    assert_eq!(k, k2, "matmul_nt inner dims {k} vs {k2}");
    let mut out = Tensor::zeros(vec![m, n]);
    gemm_into(out.data_mut(), m, k, n, a.data(), false, b.data(), true, T::one(), T::zero());
    out
}

pub fn conv1d_out_len(t: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(stride >= 1);
    (t + 2 * pad).saturating_sub(k) / stride + 1
}

/// Unfold x (t×c) into (t_out × c*k) patches for a strided, zero-padded conv.
/// Column layout is channel-major, tap-minor (c*k + j) to match a
/// (c_out × c_in·k) flattened weight.
pub fn im2col<T: Scalar>(
    x: &[T],
    t: usize,
    c: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let t_out = conv1d_out_len(t, k, stride, pad);
    let mut cols = vec![T::zero(); t_out * c * k];
    for to in 0..t_out {
        let base = to * c * k;
        for j in 0..k {
            let ti = (to * stride + j) as isize - pad as isize;
            if ti < 0 || ti >= t as isize {
                continue;
            }
            let row = &x[ti as usize * c..ti as usize * c + c];
            for (ci, &v) in row.iter().enumerate() {
                cols[base + ci * k + j] = v;
            }
        }
    }
    cols
}

/// Adjoint of `im2col`: scatter-add patches back onto the (t×c) signal.
pub fn col2im_add<T: Scalar>(
    cols: &[T],
    t: usize,
    c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out: &mut [T],
) {
    let t_out = conv1d_out_len(t, k, stride, pad);
    assert_eq!(cols.len(), t_out * c * k);
    assert_eq!(out.len(), t * c);
    for to in 0..t_out {
        let base = to * c * k;
        for j in 0..k {
            let ti = (to * stride + j) as isize - pad as isize;
            if ti < 0 || ti >= t as isize {
                continue;
            }
            let row = ti as usize * c;
            for ci in 0..c {
                out[row + ci] += cols[base + ci * k + j];
            }
        }
    }
}

/// Grouped 1-D convolution. x: (t × c_in), w: (c_out × c_in/g × k) flattened
/// row-major, output (t_out × c_out).
pub fn conv1d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Tensor<T> {
    let (t, c_in) = x.dims2();
    let ws = w.shape();
    assert_eq!(ws.len(), 3, "conv1d weight must be (c_out, c_in/g, k)");
    let (c_out, cg, k) = (ws[0], ws[1], ws[2]);
    assert_eq!(cg * groups, c_in, "conv1d channel/group mismatch");
    assert_eq!(c_out % groups, 0, "c_out must divide into groups");
    let t_out = conv1d_out_len(t, k, stride, pad);
    let og = c_out / groups;
    let mut out = Tensor::zeros(vec![t_out, c_out]);

    if groups == c_in && cg == 1 {
        // Depthwise: direct loop, the gemm detour does not pay off.
        assert_eq!(c_out, c_in, "depthwise conv expects c_out == c_in");
        let xd = x.data();
        let wd = w.data();
        let od = out.data_mut();
        for to in 0..t_out {
            for j in 0..k {
                let ti = (to * stride + j) as isize - pad as isize;
                if ti < 0 || ti >= t as isize {
                    continue;
                }
                let xr = &xd[ti as usize * c_in..ti as usize * c_in + c_in];
                let orow = &mut od[to * c_out..to * c_out + c_out];
                for ci in 0..c_in {
                    orow[ci] += xr[ci] * wd[ci * k + j];
                }
            }
        }
        return out;
    }

    // Grouped im2col + gemm. Group slices of x are strided; copy per group.
    for gi in 0..groups {
        let xg: Vec<T> = if groups == 1 {
            x.data().to_vec()
        } else {
            let mut buf = Vec::with_capacity(t * cg);
            for ti in 0..t {
                buf.extend_from_slice(&x.data()[ti * c_in + gi * cg..ti * c_in + (gi + 1) * cg]);
            }
            buf
        };
        let cols = im2col(&xg, t, cg, k, stride, pad);
        // (t_out × cg·k) @ (cg·k × og) where the weight block is stored og × cg·k.
        let wg = &w.data()[gi * og * cg * k..(gi + 1) * og * cg * k];
        let mut og_out = vec![T::zero(); t_out * og];
        gemm_into(&mut og_out, t_out, cg * k, og, &cols, false, wg, true, T::one(), T::zero());
        for to in 0..t_out {
            out.data_mut()[to * c_out + gi * og..to * c_out + (gi + 1) * og]
                .copy_from_slice(&og_out[to * og..(to + 1) * og]);
        }
    }
    out
}

/// Gradients of `conv1d_forward` w.r.t. input and weight.
pub fn conv1d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> (Tensor<T>, Tensor<T>) {
    let (t, c_in) = x.dims2();
    let ws = w.shape();
    let (c_out, cg, k) = (ws[0], ws[1], ws[2]);
    let og = c_out / groups;
    let (t_out, go_cols) = grad_out.dims2();
    assert_eq!(go_cols, c_out);
    let mut gx = Tensor::zeros(vec![t, c_in]);
    let mut gw = Tensor::zeros(vec![c_out, cg, k]);

    for gi in 0..groups {
        // Gather this group's slices.
        let xg: Vec<T> = if groups == 1 {
            x.data().to_vec()
        } else {
            let mut buf = Vec::with_capacity(t * cg);
            for ti in 0..t {
                buf.extend_from_slice(&x.data()[ti * c_in + gi * cg..ti * c_in + (gi + 1) * cg]);
            }
            buf
        };
        let gog: Vec<T> = if groups == 1 {
            grad_out.data().to_vec()
        } else {
            let mut buf = Vec::with_capacity(t_out * og);
            for to in 0..t_out {
                buf.extend_from_slice(
                    &grad_out.data()[to * c_out + gi * og..to * c_out + (gi + 1) * og],
                );
            }
            buf
        };
        let cols = im2col(&xg, t, cg, k, stride, pad);
        let wg = &w.data()[gi * og * cg * k..(gi + 1) * og * cg * k];

        // dW(og × cg·k) = gOutᵀ(og × t_out) @ cols(t_out × cg·k)
        let gw_slice = &mut gw.data_mut()[gi * og * cg * k..(gi + 1) * og * cg * k];
        gemm_into(gw_slice, og, t_out, cg * k, &gog, true, &cols, false, T::one(), T::zero());

        // dCols(t_out × cg·k) = gOut(t_out × og) @ W(og × cg·k)
        let mut dcols = vec![T::zero(); t_out * cg * k];
        gemm_into(&mut dcols, t_out, og, cg * k, &gog, false, wg, false, T::one(), T::zero());
        let mut gxg = vec![T::zero(); t * cg];
        col2im_add(&dcols, t, cg, k, stride, pad, &mut gxg);
        for ti in 0..t {
            let dst = &mut gx.data_mut()[ti * c_in + gi * cg..ti * c_in + (gi + 1) * cg];
            for (d, s) in dst.iter_mut().zip(&gxg[ti * cg..(ti + 1) * cg]) {
                *d += *s;
            }
        }
    }
    (gx, gw)
}

pub fn conv_transpose1d_out_len(t: usize, k: usize, stride: usize, pad: usize) -> usize {
    (t - 1) * stride + k - 2 * pad
}

/// Transposed 1-D convolution (gradient of a conv w.r.t. its input, used as a
/// forward op for upsampling). x: (t × c_in), w: (c_in × c_out × k),
/// output ((t−1)·stride + k − 2·pad × c_out).
pub fn conv_transpose1d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (t, c_in) = x.dims2();
    let ws = w.shape();
    assert_eq!(ws.len(), 3, "conv_transpose1d weight must be (c_in, c_out, k)");
    let (wc_in, c_out, k) = (ws[0], ws[1], ws[2]);
    assert_eq!(wc_in, c_in);
    let t_out = conv_transpose1d_out_len(t, k, stride, pad);
    // cols(t × c_out·k) = x(t × c_in) @ w(c_in × c_out·k)
    let mut cols = vec![T::zero(); t * c_out * k];
    gemm_into(&mut cols, t, c_in, c_out * k, x.data(), false, w.data(), false, T::one(), T::zero());
    let mut out = Tensor::zeros(vec![t_out, c_out]);
    let od = out.data_mut();
    for ti in 0..t {
        for j in 0..k {
            let to = (ti * stride + j) as isize - pad as isize;
            if to < 0 || to >= t_out as isize {
                continue;
            }
            let orow = to as usize * c_out;
            let crow = ti * c_out * k;
            for co in 0..c_out {
                od[orow + co] += cols[crow + co * k + j];
            }
        }
    }
    out
}

/// Gradients of `conv_transpose1d_forward` w.r.t. input and weight.
pub fn conv_transpose1d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> (Tensor<T>, Tensor<T>) {
    let (t, c_in) = x.dims2();
    let ws = w.shape();
    let (_, c_out, k) = (ws[0], ws[1], ws[2]);
    let (t_out, go_cols) = grad_out.dims2();
    assert_eq!(go_cols, c_out);

    // dCols(t × c_out·k): gather grad_out at the scatter positions.
    let mut dcols = vec![T::zero(); t * c_out * k];
    let god = grad_out.data();
    for ti in 0..t {
        for j in 0..k {
            let to = (ti * stride + j) as isize - pad as isize;
            if to < 0 || to >= t_out as isize {
                continue;
            }
            let grow = to as usize * c_out;
            let crow = ti * c_out * k;
            for co in 0..c_out {
                dcols[crow + co * k + j] = god[grow + co];
            }
        }
    }
    // dX(t × c_in) = dCols(t × c_out·k) @ wᵀ(c_out·k × c_in)
    let mut gx = Tensor::zeros(vec![t, c_in]);
    gemm_into(gx.data_mut(), t, c_out * k, c_in, &dcols, false, w.data(), true, T::one(), T::zero());
    // dW(c_in × c_out·k) = xᵀ(c_in × t) @ dCols
    let mut gw = Tensor::zeros(vec![c_in, c_out, k]);
    gemm_into(gw.data_mut(), c_in, t, c_out * k, x.data(), true, &dcols, false, T::one(), T::zero());
    (gx, gw)
}
