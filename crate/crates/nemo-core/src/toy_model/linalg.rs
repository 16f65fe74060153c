//! Small dense kernels shared by the forward and backward passes.
//! Matrices are row-major slices; transposition is expressed through strides.

/// c = alpha * op(a) * op(b) + beta * c, where op(a) is m x k and op(b) is k x n.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover the index ranges implied by the strides above.
    unsafe {
        matrixmultiply::dgemm(
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

/// Source/destination column ranges for horizontal kernel offset `kx` (0..3).
fn x_span(kx: usize, w: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    match kx {
        0 => (0..w - 1, 1..w),
        1 => (0..w, 0..w),
        _ => (1..w, 0..w - 1),
    }
}

/// 3x3, stride 1, zero padding 1. Output rows are (channel, ky, kx), columns are pixels.
pub fn im2col(x: &[f64], c: usize, h: usize, w: usize, col: &mut [f64]) {
    let p = h * w;
    for ci in 0..c {
        let plane = &x[ci * p..(ci + 1) * p];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((ci * 3 + ky) * 3 + kx) * p..][..p];
                let (src_x, dst_x) = x_span(kx, w);
                for oy in 0..h {
                    let dst = &mut row[oy * w..(oy + 1) * w];
                    let iy = oy + ky;
                    if iy == 0 || iy > h {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[(iy - 1) * w..iy * w];
                    dst[dst_x.clone()].copy_from_slice(&src[src_x.clone()]);
                    if kx == 0 {
                        dst[0] = 0.0;
                    } else if kx == 2 {
                        dst[w - 1] = 0.0;
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: scatters column gradients back onto the input planes.
pub fn col2im(col: &[f64], c: usize, h: usize, w: usize, dx: &mut [f64]) {
    let p = h * w;
    dx[..c * p].fill(0.0);
    for ci in 0..c {
        let plane = &mut dx[ci * p..(ci + 1) * p];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((ci * 3 + ky) * 3 + kx) * p..][..p];
                let (src_x, dst_x) = x_span(kx, w);
                for oy in 0..h {
                    let iy = oy + ky;
                    if iy == 0 || iy > h {
                        continue;
                    }
                    let g = &row[oy * w..(oy + 1) * w][dst_x.clone()];
                    let t = &mut plane[(iy - 1) * w..iy * w][src_x.clone()];
                    t.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// In-place row softmax over an `rows x cols` matrix.
pub fn softmax_rows(s: &mut [f64], cols: usize) {
    for row in s.chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}
