//! Low-rank logit readouts: rank-r factorized bias injection of factor
//! vectors into task logits, shared across all mid layers.

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::real::Real;
use crate::rng::Rng;

/// A = P Q^T with P: V x r and Q: d_z x r. The bias for a factor z is
/// b = P (Q^T z). P starts at zero so injection begins as the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRank<T> {
    pub p: Mat<T>,
    pub q: Mat<T>,
}

impl<T: Real> LowRank<T> {
    pub fn init(v: usize, d_z: usize, rank: usize, rng: &mut Rng) -> Self {
        LowRank {
            p: Mat::zeros(v, rank),
            q: Mat::randn(d_z, rank, 1.0 / (d_z as f64).sqrt(), rng),
        }
    }

    pub fn grad_zeros(&self) -> Self {
        LowRank {
            p: Mat::zeros(self.p.rows(), self.p.cols()),
            q: Mat::zeros(self.q.rows(), self.q.cols()),
        }
    }

    pub fn rank(&self) -> usize {
        self.p.cols()
    }
    pub fn v_dim(&self) -> usize {
        self.p.rows()
    }
    pub fn z_dim(&self) -> usize {
        self.q.rows()
    }

    /// b = P (Q^T z)
    pub fn bias(&self, z: &[T]) -> Result<Vec<T>> {
        if z.len() != self.z_dim() {
            return Err(Error::Contract(format!(
                "readout expects factor dim {}, got {}",
                self.z_dim(),
                z.len()
            )));
        }
        let r = self.rank();
        let mut u = vec![T::zero(); r];
        for rr in 0..self.q.rows() {
            let qrow = self.q.row(rr);
            let zr = z[rr];
            for c in 0..r {
                u[c] = zr.mul_add(qrow[c], u[c]);
            }
        }
        let mut b = vec![T::zero(); self.v_dim()];
        for o in 0..self.v_dim() {
            b[o] = crate::mat::dot(self.p.row(o), &u);
        }
        Ok(b)
    }

    /// Backward of `bias`: accumulates dP, dQ, and dz given db.
    pub fn bias_backward(
        &self,
        z: &[T],
        db: &[T],
        grads: Option<&mut LowRank<T>>,
        dz: Option<&mut [T]>,
    ) {
        let r = self.rank();
        let mut u = vec![T::zero(); r];
        for rr in 0..self.q.rows() {
            let qrow = self.q.row(rr);
            for c in 0..r {
                u[c] = z[rr].mul_add(qrow[c], u[c]);
            }
        }
        // du = P^T db
        let mut du = vec![T::zero(); r];
        for o in 0..self.v_dim() {
            crate::mat::axpy(&mut du, db[o], self.p.row(o));
        }
        if let Some(g) = grads {
            // dP = db (outer) u
            for o in 0..self.v_dim() {
                crate::mat::axpy(g.p.row_mut(o), db[o], &u);
            }
            // dQ = z (outer) du
            for rr in 0..self.q.rows() {
                crate::mat::axpy(g.q.row_mut(rr), z[rr], &du);
            }
        }
        if let Some(dz) = dz {
            for rr in 0..self.q.rows() {
                dz[rr] += crate::mat::dot(self.q.row(rr), &du);
            }
        }
    }
}

/// The four readouts: A_U/A_G inject the counter-flow shared factor, B_U/B_G
/// inject the own-flow unique factor.
#[derive(Debug, Clone, PartialEq)]
pub struct ReadoutParams<T> {
    pub a_u: LowRank<T>,
    pub a_g: LowRank<T>,
    pub b_u: LowRank<T>,
    pub b_g: LowRank<T>,
}

impl<T: Real> ReadoutParams<T> {
    pub fn init(v_t: usize, v_v: usize, d_z: usize, rank: usize, rng: &mut Rng) -> Result<Self> {
        if rank == 0 {
            return Err(Error::config("rank", "must be >= 1"));
        }
        Ok(ReadoutParams {
            a_u: LowRank::init(v_t, d_z, rank, rng),
            a_g: LowRank::init(v_v, d_z, rank, rng),
            b_u: LowRank::init(v_t, d_z, rank, rng),
            b_g: LowRank::init(v_v, d_z, rank, rng),
        })
    }

    pub fn grad_zeros(&self) -> Self {
        ReadoutParams {
            a_u: self.a_u.grad_zeros(),
            a_g: self.a_g.grad_zeros(),
            b_u: self.b_u.grad_zeros(),
            b_g: self.b_g.grad_zeros(),
        }
    }

    pub fn visit(&self, f: &mut impl FnMut(&str, &[T])) {
        f("readout.a_u.p", self.a_u.p.as_slice());
        f("readout.a_u.q", self.a_u.q.as_slice());
        f("readout.a_g.p", self.a_g.p.as_slice());
        f("readout.a_g.q", self.a_g.q.as_slice());
        f("readout.b_u.p", self.b_u.p.as_slice());
        f("readout.b_u.q", self.b_u.q.as_slice());
        f("readout.b_g.p", self.b_g.p.as_slice());
        f("readout.b_g.q", self.b_g.q.as_slice());
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, &mut [T])) {
        f("readout.a_u.p", self.a_u.p.as_mut_slice());
        f("readout.a_u.q", self.a_u.q.as_mut_slice());
        f("readout.a_g.p", self.a_g.p.as_mut_slice());
        f("readout.a_g.q", self.a_g.q.as_mut_slice());
        f("readout.b_u.p", self.b_u.p.as_mut_slice());
        f("readout.b_u.q", self.b_u.q.as_mut_slice());
        f("readout.b_g.p", self.b_g.p.as_mut_slice());
        f("readout.b_g.q", self.b_g.q.as_mut_slice());
    }

    pub fn leaves(&self) -> Vec<(String, &[T])> {
        vec![
            ("readout.a_u.p".into(), self.a_u.p.as_slice()),
            ("readout.a_u.q".into(), self.a_u.q.as_slice()),
            ("readout.a_g.p".into(), self.a_g.p.as_slice()),
            ("readout.a_g.q".into(), self.a_g.q.as_slice()),
            ("readout.b_u.p".into(), self.b_u.p.as_slice()),
            ("readout.b_u.q".into(), self.b_u.q.as_slice()),
            ("readout.b_g.p".into(), self.b_g.p.as_slice()),
            ("readout.b_g.q".into(), self.b_g.q.as_slice()),
        ]
    }

    pub fn leaves_mut(&mut self) -> Vec<(String, &mut [T])> {
        vec![
            ("readout.a_u.p".into(), self.a_u.p.as_mut_slice()),
            ("readout.a_u.q".into(), self.a_u.q.as_mut_slice()),
            ("readout.a_g.p".into(), self.a_g.p.as_mut_slice()),
            ("readout.a_g.q".into(), self.a_g.q.as_mut_slice()),
            ("readout.b_u.p".into(), self.b_u.p.as_mut_slice()),
            ("readout.b_u.q".into(), self.b_u.q.as_mut_slice()),
            ("readout.b_g.p".into(), self.b_g.p.as_mut_slice()),
            ("readout.b_g.q".into(), self.b_g.q.as_mut_slice()),
        ]
    }

    /// dst += src, leafwise.
    pub fn add_assign(&mut self, src: &Self) {
        let src_leaves = src.leaves();
        for ((dn, d), (sn, s)) in self.leaves_mut().into_iter().zip(src_leaves) {
            debug_assert_eq!(dn, sn);
            for (x, y) in d.iter_mut().zip(s) {
                *x += *y;
            }
        }
    }
}

/// Inject factorized representations as logit biases: every row (target
/// position) of `s` gets b = A z_sh_counter (+ B z_uni_self when enabled).
/// Returns the biased copy; `s` itself is untouched.
pub fn inject_logits<T: Real>(
    s: &Mat<T>,
    z_sh_counter: &[T],
    z_uni_self: &[T],
    a: &LowRank<T>,
    b: &LowRank<T>,
    unique_enabled: bool,
) -> Result<Mat<T>> {
    if s.cols() != a.v_dim() || (unique_enabled && s.cols() != b.v_dim()) {
        return Err(Error::Contract(format!(
            "logit slice width {} does not match readout output dim {}",
            s.cols(),
            a.v_dim()
        )));
    }
    let mut bias = a.bias(z_sh_counter)?;
    if unique_enabled {
        let ub = b.bias(z_uni_self)?;
        crate::mat::axpy(&mut bias, T::one(), &ub);
    }
    let mut out = s.clone();
    for r in 0..out.rows() {
        crate::mat::axpy(out.row_mut(r), T::one(), &bias);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_p_and_disabled_unique_is_identity() {
        let mut rng = Rng::new(1);
        let ro = ReadoutParams::<f64>::init(64, 64, 8, 4, &mut rng).unwrap();
        let s = Mat::randn(3, 64, 1.0, &mut rng);
        let z = vec![0.5; 8];
        let out = inject_logits(&s, &z, &z, &ro.a_u, &ro.b_u, false).unwrap();
        assert_eq!(out, s, "P = 0 and unique disabled leaves s unchanged");
    }

    #[test]
    fn rank_one_basis_shifts_one_row() {
        // P = e1, Q = e1: bias = z[0] on logit row 1 only
        let mut p = Mat::<f64>::zeros(5, 1);
        *p.at_mut(1, 0) = 1.0;
        let mut q = Mat::<f64>::zeros(3, 1);
        *q.at_mut(0, 0) = 1.0;
        let lr = LowRank { p, q };
        let z = vec![2.5, -1.0, 7.0];
        let b = lr.bias(&z).unwrap();
        assert_eq!(b, vec![0.0, 2.5, 0.0, 0.0, 0.0]);

        let s = Mat::<f64>::zeros(4, 5);
        let zero = LowRank {
            p: Mat::zeros(5, 1),
            q: Mat::zeros(3, 1),
        };
        let out = inject_logits(&s, &z, &z, &lr, &zero, true).unwrap();
        for r in 0..4 {
            assert_eq!(out.row(r), &[0.0, 2.5, 0.0, 0.0, 0.0], "row {r}");
        }
    }

    #[test]
    fn default_rank_24_shapes() {
        let mut rng = Rng::new(3);
        let ro = ReadoutParams::<f64>::init(64, 64, 64, 24, &mut rng).unwrap();
        assert_eq!((ro.a_u.p.rows(), ro.a_u.p.cols()), (64, 24));
        assert_eq!((ro.a_u.q.rows(), ro.a_u.q.cols()), (64, 24));
        assert_eq!(ro.b_g.rank(), 24);
    }

    #[test]
    fn dimension_mismatch_is_contract_error() {
        let mut rng = Rng::new(4);
        let ro = ReadoutParams::<f64>::init(64, 64, 8, 4, &mut rng).unwrap();
        let s = Mat::<f64>::zeros(2, 32); // wrong width
        let z = vec![0.0; 8];
        assert!(matches!(
            inject_logits(&s, &z, &z, &ro.a_u, &ro.b_u, false),
            Err(Error::Contract(_))
        ));
        assert!(matches!(ro.a_u.bias(&vec![0.0; 5]), Err(Error::Contract(_))));
    }

    #[test]
    fn bias_backward_matches_finite_differences() {
        let mut rng = Rng::new(5);
        let mut lr = LowRank::<f64>::init(6, 4, 3, &mut rng);
        lr.p = Mat::randn(6, 3, 1.0, &mut rng);
        let z: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let w: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let loss = |lr: &LowRank<f64>, z: &[f64]| -> f64 {
            lr.bias(z)
                .unwrap()
                .iter()
                .zip(&w)
                .map(|(a, b)| a * b)
                .sum()
        };
        let mut g = lr.grad_zeros();
        let mut dz = vec![0.0; 4];
        lr.bias_backward(&z, &w, Some(&mut g), Some(&mut dz));
        let eps = 1e-6;
        for i in 0..4 {
            let mut zp = z.clone();
            zp[i] += eps;
            let mut zm = z.clone();
            zm[i] -= eps;
            let fd = (loss(&lr, &zp) - loss(&lr, &zm)) / (2.0 * eps);
            assert!((dz[i] - fd).abs() < 1e-8, "dz[{i}]");
        }
        for (r, c) in [(0usize, 0usize), (3, 2), (5, 1)] {
            let mut lp = lr.clone();
            *lp.p.at_mut(r, c) += eps;
            let mut lm = lr.clone();
            *lm.p.at_mut(r, c) -= eps;
            let fd = (loss(&lp, &z) - loss(&lm, &z)) / (2.0 * eps);
            assert!((g.p.at(r, c) - fd).abs() < 1e-8, "dp[{r},{c}]");
        }
        for (r, c) in [(0usize, 0usize), (2, 2), (3, 1)] {
            let mut lp = lr.clone();
            *lp.q.at_mut(r, c) += eps;
            let mut lm = lr.clone();
            *lm.q.at_mut(r, c) -= eps;
            let fd = (loss(&lp, &z) - loss(&lm, &z)) / (2.0 * eps);
            assert!((g.q.at(r, c) - fd).abs() < 1e-8, "dq[{r},{c}]");
        }
    }
}
