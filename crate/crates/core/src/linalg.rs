//! Row-major GEMM wrappers over `matrixmultiply`.

/// `c = a' * b' + beta * c` where `a'` is `m x k` and `b'` is `k x n`.
/// `a` is stored `m x k` (or `k x m` when `trans_a`), likewise `b`.
#[allow(clippy::too_many_arguments)]
pub fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides describe the asserted buffer extents exactly.
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

/// Below this output width packing costs more than it saves.
const NARROW: usize = 16;

/// Row-at-a-time product for outputs narrow enough to live in registers.
fn narrow<const N: usize>(k: usize, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    for (row, out) in a.chunks_exact(k).zip(c.chunks_exact_mut(N)) {
        let mut acc = [0f32; N];
        for (&x, w) in row.iter().zip(b.chunks_exact(N)) {
            for j in 0..N {
                acc[j] += x * w[j];
            }
        }
        for (o, s) in out.iter_mut().zip(acc) {
            *o = if beta == 0.0 { s } else { beta * *o + s };
        }
    }
}

/// Single-precision `c = a * b + beta * c`, no transposes.
pub fn sgemm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if n <= NARROW && k > 0 && n > 0 {
        macro_rules! dispatch {
            ($($w:literal)*) => {
                match n {
                    $($w => narrow::<$w>(k, a, b, beta, c),)*
                    _ => unreachable!(),
                }
            };
        }
        dispatch!(1 2 3 4 5 6 7 8 9 10 11 12 13 14 15 16);
        return;
    }
    // SAFETY: as above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
