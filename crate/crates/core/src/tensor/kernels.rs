// Raw kernels on flat row-major buffers. Shape checking happens in the tape.

use super::Real;

/// `a[m×k] @ b[k×n]`.
pub(crate) fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        k as isize,
        1,
        b,
        n as isize,
        1,
        T::zero(),
        &mut out,
        n as isize,
        1,
    );
    out
}

/// `acc += g[m×n] @ b[k×n]ᵀ`, the gradient w.r.t. the left operand.
pub(crate) fn matmul_grad_lhs<T: Real>(g: &[T], b: &[T], m: usize, k: usize, n: usize, acc: &mut [T]) {
    T::gemm(
        m,
        n,
        k,
        T::one(),
        g,
        n as isize,
        1,
        b,
        1,
        n as isize,
        T::one(),
        acc,
        k as isize,
        1,
    );
}

/// `acc += a[m×k]ᵀ @ g[m×n]`, the gradient w.r.t. the right operand.
pub(crate) fn matmul_grad_rhs<T: Real>(a: &[T], g: &[T], m: usize, k: usize, n: usize, acc: &mut [T]) {
    T::gemm(
        k,
        m,
        n,
        T::one(),
        a,
        1,
        k as isize,
        g,
        n as isize,
        1,
        T::one(),
        acc,
        n as isize,
        1,
    );
}

/// Unfolds a zero-padded `c×h×w` image into a `(c·9)×(h·w)` patch matrix.
/// Row `ci·9 + ky·3 + kx` holds `input[ci, y+ky-1, x+kx-1]` at column `y·w + x`.
pub(crate) fn im2col<T: Real>(input: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut cols = vec![T::zero(); c * 9 * hw];
    for ci in 0..c {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    // x + kx - 1 must stay inside [0, w)
                    let (x0, x1) = match kx {
                        0 => (1, w),
                        1 => (0, w),
                        _ => (0, w.saturating_sub(1)),
                    };
                    for x in x0..x1 {
                        dst[x] = src[x + kx - 1];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back onto the image.
pub(crate) fn col2im_add<T: Real>(cols: &[T], c: usize, h: usize, w: usize, out: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..][..w];
                    let dst = &mut plane[sy as usize * w..][..w];
                    let (x0, x1) = match kx {
                        0 => (1, w),
                        1 => (0, w),
                        _ => (0, w.saturating_sub(1)),
                    };
                    for x in x0..x1 {
                        dst[x + kx - 1] += src[x];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv3x3_forward<T: Real>(
    input: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    filters: &[T],
    bias: &[T],
    c_out: usize,
) -> Vec<T> {
    let hw = h * w;
    let mut out = vec![T::zero(); c_out * hw];
    for (co, plane) in out.chunks_mut(hw).enumerate() {
        plane.fill(bias[co]);
    }
    let cols = im2col(input, c_in, h, w);
    T::gemm(
        c_out,
        c_in * 9,
        hw,
        T::one(),
        filters,
        (c_in * 9) as isize,
        1,
        &cols,
        hw as isize,
        1,
        T::one(),
        &mut out,
        hw as isize,
        1,
    );
    out
}

/// Gradients of the same-padded 3×3 convolution. `d_input` is skipped when `None`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3x3_backward<T: Real>(
    input: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    filters: &[T],
    c_out: usize,
    grad_out: &[T],
    d_input: Option<&mut [T]>,
    d_filters: Option<&mut [T]>,
    d_bias: Option<&mut [T]>,
) {
    let hw = h * w;
    let k = c_in * 9;
    if let Some(db) = d_bias {
        for (co, plane) in grad_out.chunks(hw).enumerate() {
            db[co] += plane.iter().copied().sum::<T>();
        }
    }
    if let Some(df) = d_filters {
        let cols = im2col(input, c_in, h, w);
        // df[c_out×k] += g[c_out×hw] @ cols[k×hw]ᵀ
        matmul_grad_lhs(grad_out, &cols, c_out, k, hw, df);
    }
    if let Some(di) = d_input {
        let mut dcols = vec![T::zero(); k * hw];
        // dcols[k×hw] = filtersᵀ @ g
        matmul_grad_rhs(filters, grad_out, c_out, k, hw, &mut dcols);
        col2im_add(&dcols, c_in, h, w, di);
    }
}

/// 2×2 stride-2 max pool; trailing odd row/column dropped. Returns the pooled
/// values and, per output cell, the flat input index of the first maximum.
pub(crate) fn maxpool2x2_forward<T: Real>(input: &[T], c: usize, h: usize, w: usize) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        let base = ci * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let top = base + 2 * oy * w + 2 * ox;
                let candidates = [top, top + 1, top + w, top + w + 1];
                let mut best = candidates[0];
                for &idx in &candidates[1..] {
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                argmax.push(best);
            }
        }
    }
    (out, argmax)
}

/// Naive triple-loop product.
#[cfg(test)]
fn matmul_ref<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = T::zero();
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// Direct-loop same convolution.
#[cfg(test)]
fn conv2d_same3x3_ref<T: Real>(
    input: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    filters: &[T],
    bias: &[T],
    c_out: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); c_out * h * w];
    for co in 0..c_out {
        for y in 0..h {
            for x in 0..w {
                let mut acc = bias[co];
                for ci in 0..c_in {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let sy = y as isize + ky as isize - 1;
                            let sx = x as isize + kx as isize - 1;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            acc += filters[((co * c_in + ci) * 3 + ky) * 3 + kx]
                                * input[(ci * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
                out[(co * h + y) * w + x] = acc;
            }
        }
    }
    out
}
