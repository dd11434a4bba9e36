//! Dense linear-algebra kernels used by the denoiser.
//!
//! Single-sample inference goes through [`affine`], a row-major
//! matrix-vector product. Batched training goes through [`gemm`], a thin
//! checked wrapper over `matrixmultiply::dgemm`.

use std::sync::OnceLock;

fn use_fma() -> bool {
    static FLAG: OnceLock<bool> = OnceLock::new();
    *FLAG.get_or_init(|| {
        #[cfg(target_arch = "x86_64")]
        {
            std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma")
        }
        #[cfg(not(target_arch = "x86_64"))]
        {
            false
        }
    })
}

#[inline(always)]
fn dot_portable(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn affine_fma(weights: &[f64], bias: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (j, o) in out.iter_mut().enumerate() {
        let row = &weights[j * n..(j + 1) * n];
        let mut acc = [0.0f64; 8];
        let ca = row.chunks_exact(8);
        let cb = x.chunks_exact(8);
        let (ra, rb) = (ca.remainder(), cb.remainder());
        for (w, v) in ca.zip(cb) {
            for i in 0..8 {
                acc[i] = w[i].mul_add(v[i], acc[i]);
            }
        }
        let mut tail = 0.0;
        for (w, v) in ra.iter().zip(rb) {
            tail = w.mul_add(*v, tail);
        }
        *o = bias[j]
            + (((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail);
    }
}

/// `out[j] = bias[j] + <weights[j, :], x>` with `weights` row-major `out × in`.
pub fn affine(weights: &[f64], bias: &[f64], x: &[f64], out: &mut [f64]) {
    assert_eq!(weights.len(), x.len() * out.len());
    assert_eq!(bias.len(), out.len());
    #[cfg(target_arch = "x86_64")]
    if use_fma() {
        // SAFETY: the required CPU features were detected at runtime.
        unsafe { affine_fma(weights, bias, x, out) };
        return;
    }
    let n = x.len();
    for (j, o) in out.iter_mut().enumerate() {
        *o = bias[j] + dot_portable(&weights[j * n..(j + 1) * n], x);
    }
}

/// Row/column strides of a matrix operand, in elements.
#[derive(Debug, Clone, Copy)]
pub struct Strides {
    pub row: isize,
    pub col: isize,
}

impl Strides {
    /// Plain row-major storage with `cols` columns.
    pub fn row_major(cols: usize) -> Self {
        Strides { row: cols as isize, col: 1 }
    }

    /// The transpose view of a row-major matrix with `cols` columns.
    pub fn transposed(cols: usize) -> Self {
        Strides { row: 1, col: cols as isize }
    }
}

fn extent(rows: usize, cols: usize, s: Strides) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * s.row + (cols - 1) as isize * s.col) as usize + 1
}

/// `c = alpha * a·b + beta * c` for an `m × k` operand `a`, a `k × n`
/// operand `b` and an `m × n` row-major output `c`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= extent(m, k, sa), "gemm: lhs too short");
    assert!(b.len() >= extent(k, n, sb), "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    assert!(sa.row >= 0 && sa.col >= 0 && sb.row >= 0 && sb.col >= 0);
    // SAFETY: every operand extent was checked against its slice above and
    // the output is an exclusively borrowed dense row-major block.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            sa.row,
            sa.col,
            b.as_ptr(),
            sb.row,
            sb.col,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
