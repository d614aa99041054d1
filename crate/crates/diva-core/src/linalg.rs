//! Dense symmetric eigendecomposition (cyclic Jacobi) used by the
//! representation diagnostics. Everything runs in f64 regardless of the
//! training dtype.

use crate::mat::Mat;

/// Eigendecomposition of a symmetric matrix. Returns eigenvalues in
/// descending order and the matching eigenvectors as columns.
pub fn sym_eig(a: &Mat<f64>) -> (Vec<f64>, Mat<f64>) {
    let n = a.rows();
    assert_eq!(n, a.cols(), "sym_eig needs a square matrix");
    let mut m = a.clone();
    let mut v = Mat::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 });

    let max_sweeps = 64;
    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for r in 0..n {
            for c in r + 1..n {
                off += m.at(r, c) * m.at(r, c);
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + frobenius(&m)) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.at(p, q);
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m.at(p, p);
                let aqq = m.at(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                // rotate rows/cols p and q
                for k in 0..n {
                    let mkp = m.at(k, p);
                    let mkq = m.at(k, q);
                    *m.at_mut(k, p) = c * mkp - s * mkq;
                    *m.at_mut(k, q) = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m.at(p, k);
                    let mqk = m.at(q, k);
                    *m.at_mut(p, k) = c * mpk - s * mqk;
                    *m.at_mut(q, k) = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v.at(k, p);
                    let vkq = v.at(k, q);
                    *v.at_mut(k, p) = c * vkp - s * vkq;
                    *v.at_mut(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let diag: Vec<f64> = (0..n).map(|i| m.at(i, i)).collect();
    order.sort_by(|&i, &j| diag[j].partial_cmp(&diag[i]).unwrap());
    let vals: Vec<f64> = order.iter().map(|&i| diag[i]).collect();
    let vecs = Mat::from_fn(n, n, |r, c| v.at(r, order[c]));
    (vals, vecs)
}

pub fn frobenius(m: &Mat<f64>) -> f64 {
    m.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Singular values of a rectangular matrix via the Gram-matrix route.
pub fn singular_values(h: &Mat<f64>) -> Vec<f64> {
    let (rows, cols) = (h.rows(), h.cols());
    // eigendecompose the smaller Gram matrix
    let gram = if cols <= rows {
        Mat::matmul_tn(h, h)
    } else {
        Mat::matmul_nt(h, h)
    };
    let (vals, _) = sym_eig(&gram);
    // the sqrt of Gram eigenvalues amplifies rounding noise around zero;
    // values below the relative noise floor are exact zeros of the spectrum
    let lmax = vals.first().copied().unwrap_or(0.0).max(0.0);
    vals.into_iter()
        .map(|l| if l < 1e-13 * lmax { 0.0 } else { l.max(0.0).sqrt() })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn eig_recovers_known_spectrum() {
        // A = Q diag(5, 2, 1) Q^T for a simple rotation Q
        let d = vec![5.0, 2.0, 1.0];
        let mut rng = Rng::new(3);
        let raw = Mat::<f64>::randn(3, 3, 1.0, &mut rng);
        // orthonormalize raw via Gram-Schmidt
        let mut q = raw;
        for c in 0..3 {
            for prev in 0..c {
                let dot: f64 = (0..3).map(|r| q.at(r, c) * q.at(r, prev)).sum();
                for r in 0..3 {
                    *q.at_mut(r, c) -= dot * q.at(r, prev);
                }
            }
            let norm: f64 = (0..3).map(|r| q.at(r, c) * q.at(r, c)).sum::<f64>().sqrt();
            for r in 0..3 {
                *q.at_mut(r, c) /= norm;
            }
        }
        let a = Mat::from_fn(3, 3, |r, c| {
            (0..3).map(|k| q.at(r, k) * d[k] * q.at(c, k)).sum()
        });
        let (vals, vecs) = sym_eig(&a);
        for (got, want) in vals.iter().zip(&d) {
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
        // eigenvectors: A v = lambda v
        for c in 0..3 {
            for r in 0..3 {
                let av: f64 = (0..3).map(|k| a.at(r, k) * vecs.at(k, c)).sum();
                assert!((av - vals[c] * vecs.at(r, c)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn singular_values_match_construction() {
        // diag rectangular matrix has known singular values
        let mut h = Mat::<f64>::zeros(5, 3);
        *h.at_mut(0, 0) = 3.0;
        *h.at_mut(1, 1) = 2.0;
        *h.at_mut(2, 2) = 0.5;
        let sv = singular_values(&h);
        assert!((sv[0] - 3.0).abs() < 1e-10);
        assert!((sv[1] - 2.0).abs() < 1e-10);
        assert!((sv[2] - 0.5).abs() < 1e-10);
    }
}
