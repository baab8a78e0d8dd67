use super::{Array, Scalar};

/// `out <- a' @ b' + beta * out` where `a'`/`b'` are optionally transposed.
///
/// `out` must already have shape `[rows(a'), cols(b')]`.
pub fn gemm<T: Scalar>(a: &Array<T>, trans_a: bool, b: &Array<T>, trans_b: bool, beta: T, out: &mut Array<T>) {
    let (m, k, rsa, csa) = if trans_a {
        (a.cols(), a.rows(), 1isize, a.cols() as isize)
    } else {
        (a.rows(), a.cols(), a.cols() as isize, 1isize)
    };
    let (kb, n, rsb, csb) = if trans_b {
        (b.cols(), b.rows(), 1isize, b.cols() as isize)
    } else {
        (b.rows(), b.cols(), b.cols() as isize, 1isize)
    };
    assert_eq!(k, kb, "gemm inner dimensions");
    assert_eq!(out.shape(), [m, n], "gemm output shape");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.scale_assign(beta);
        return;
    }
    let rsc = n as isize;
    // SAFETY: extents and strides are derived from the owning arrays above and
    // `out` is a distinct mutable borrow.
    unsafe {
        T::raw_gemm(
            m,
            k,
            n,
            T::one(),
            a.data().as_ptr(),
            rsa,
            csa,
            b.data().as_ptr(),
            rsb,
            csb,
            beta,
            out.data_mut().as_mut_ptr(),
            rsc,
            1,
        );
    }
}

/// Plain `a' @ b'` into a fresh array.
pub(crate) fn matmul<T: Scalar>(a: &Array<T>, trans_a: bool, b: &Array<T>, trans_b: bool) -> Array<T> {
    let m = if trans_a { a.cols() } else { a.rows() };
    let n = if trans_b { b.rows() } else { b.cols() };
    let mut out = Array::zeros(m, n);
    gemm(a, trans_a, b, trans_b, T::zero(), &mut out);
    out
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Numerically stable softmax of one row, written into `out`.
pub(crate) fn softmax_row<T: Scalar>(x: &[T], out: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        let e = (v - max).exp();
        *o = e;
        total = total + e;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

/// Stable log-softmax of one row.
pub(crate) fn log_softmax_row<T: Scalar>(x: &[T], out: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let total: T = x.iter().map(|&v| (v - max).exp()).sum();
    let lse = max + total.ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU and its derivative.
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::of(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

/// Layer norm of one row: returns (mean, reciprocal std) and writes the
/// normalized (pre-affine) values into `xhat`.
pub(crate) fn layer_norm_row<T: Scalar>(x: &[T], xhat: &mut [T]) -> (T, T) {
    let n = T::of(x.len() as f64);
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let rstd = T::one() / (var + T::of(LAYER_NORM_EPS)).sqrt();
    for (h, &v) in xhat.iter_mut().zip(x) {
        *h = (v - mean) * rstd;
    }
    (mean, rstd)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes_agree_with_naive() {
        let a = Array::<f64>::from_f64(2, 3, &[1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Array::<f64>::from_f64(3, 2, &[7., 8., 9., 10., 11., 12.]).unwrap();
        let c = matmul(&a, false, &b, false);
        assert_eq!(c.data(), &[58., 64., 139., 154.]);
        // (b^T a^T)^T == a b
        let ct = matmul(&b, true, &a, true);
        assert_eq!(ct.data(), &[58., 139., 64., 154.]);
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
