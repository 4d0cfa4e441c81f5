//! Accumulating dense kernels on row-major slices.

use super::scalar::Scalar;

/// `c[p×s] += a[p×q] · b[q×s]`
pub fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], p: usize, q: usize, s: usize) {
    for i in 0..p {
        let crow = &mut c[i * s..(i + 1) * s];
        let arow = &a[i * q..(i + 1) * q];
        for (k, &aik) in arow.iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            let brow = &b[k * s..(k + 1) * s];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
}

/// `c[p×s] += a[p×q] · b[s×q]ᵀ`
///
/// `b` is transposed into scratch first so the inner loop runs over
/// contiguous output columns.
pub fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], p: usize, q: usize, s: usize) {
    let mut bt = vec![T::zero(); q * s];
    for j in 0..s {
        for k in 0..q {
            bt[k * s + j] = b[j * q + k];
        }
    }
    gemm_nn(a, &bt, c, p, q, s);
}

/// `c[p×s] += a[q×p]ᵀ · b[q×s]`
pub fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], p: usize, q: usize, s: usize) {
    for k in 0..q {
        let arow = &a[k * p..(k + 1) * p];
        let brow = &b[k * s..(k + 1) * s];
        for (i, &aki) in arow.iter().enumerate() {
            if aki == T::zero() {
                continue;
            }
            let crow = &mut c[i * s..(i + 1) * s];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aki * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], p: usize, q: usize, s: usize) -> Vec<f64> {
        let mut c = vec![0.0; p * s];
        for i in 0..p {
            for j in 0..s {
                for k in 0..q {
                    c[i * s + j] += a[i * q + k] * b[k * s + j];
                }
            }
        }
        c
    }

    fn transpose(m: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = m[i * c + j];
            }
        }
        t
    }

    #[test]
    fn kernels_agree_with_triple_loop() {
        let (p, q, s) = (3, 4, 5);
        let a: Vec<f64> = (0..p * q).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..q * s).map(|i| (i as f64 * 0.91).cos()).collect();
        let want = naive(&a, &b, p, q, s);

        let mut c = vec![0.0; p * s];
        gemm_nn(&a, &b, &mut c, p, q, s);
        assert_eq!(c, want);

        let bt = transpose(&b, q, s);
        let mut c = vec![0.0; p * s];
        gemm_nt(&a, &bt, &mut c, p, q, s);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-14);
        }

        let at = transpose(&a, p, q);
        let mut c = vec![0.0; p * s];
        gemm_tn(&at, &b, &mut c, p, q, s);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-14);
        }
    }
}
