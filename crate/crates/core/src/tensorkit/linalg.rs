use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Relative diagonal loading applied before SPD matrix functions:
/// `A + SPD_FLOOR * trace(A)/n * I`.
pub const SPD_FLOOR: f64 = 1e-10;

const JACOBI_MAX_SWEEPS: usize = 100;

/// Dense symmetric matrix. Symmetry is checked on construction and the
/// stored values are exactly symmetrized.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricMatrix(DMatrix<f64>);

impl SymmetricMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::Shape(format!(
                "symmetric matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let n = m.nrows();
        let scale = m.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        let mut asym = 0.0_f64;
        for i in 0..n {
            for j in (i + 1)..n {
                asym = asym.max((m[(i, j)] - m[(j, i)]).abs());
            }
        }
        if asym > 1e-12 * scale {
            return Err(Error::InvalidInput(format!(
                "matrix not symmetric (max asymmetry {asym:e})"
            )));
        }
        Ok(Self::symmetrize(m))
    }

    /// Build from a matrix known to be symmetric up to rounding; averages
    /// the two triangles without checking.
    pub fn symmetrize(m: DMatrix<f64>) -> Self {
        let t = m.transpose();
        Self((m + t) * 0.5)
    }

    pub fn identity(n: usize) -> Self {
        Self(DMatrix::identity(n, n))
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        Self(DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(d)))
    }

    pub fn from_row_slice(n: usize, data: &[f64]) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::Shape(format!(
                "expected {} values for {n}x{n}, got {}",
                n * n,
                data.len()
            )));
        }
        Self::new(DMatrix::from_row_slice(n, n, data))
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    fn regularized(&self) -> DMatrix<f64> {
        let n = self.n();
        let load = SPD_FLOOR * self.trace() / n as f64;
        let mut m = self.0.clone();
        for i in 0..n {
            m[(i, i)] += load;
        }
        m
    }
}

/// Eigen-decomposition; `vectors` holds eigenvectors as columns.
#[derive(Debug, Clone)]
pub struct Eigen {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

/// Symmetric eigen-decomposition by cyclic Jacobi rotations. Eigenvalues
/// are returned in ascending order.
pub fn sym_eig(a: &SymmetricMatrix) -> Result<Eigen> {
    if !a.is_finite() {
        return Err(Error::InvalidInput("non-finite matrix entry".into()));
    }
    jacobi(a.matrix().clone())
}

fn jacobi(mut m: DMatrix<f64>) -> Result<Eigen> {
    let n = m.nrows();
    let mut v = DMatrix::<f64>::identity(n, n);
    let total: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 1 && total > 0.0 {
        let mut converged = false;
        for _ in 0..JACOBI_MAX_SWEEPS {
            let mut off = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    off += m[(p, q)] * m[(p, q)];
                }
            }
            if off.sqrt() <= 1e-15 * total {
                converged = true;
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = m[(p, q)];
                    if apq.abs() <= f64::MIN_POSITIVE {
                        continue;
                    }
                    let app = m[(p, p)];
                    let aqq = m[(q, q)];
                    let theta = (aqq - app) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let mkp = m[(k, p)];
                        let mkq = m[(k, q)];
                        m[(k, p)] = c * mkp - s * mkq;
                        m[(k, q)] = s * mkp + c * mkq;
                    }
                    for k in 0..n {
                        let mpk = m[(p, k)];
                        let mqk = m[(q, k)];
                        m[(p, k)] = c * mpk - s * mqk;
                        m[(q, k)] = s * mpk + c * mqk;
                    }
                    m[(p, q)] = 0.0;
                    m[(q, p)] = 0.0;
                    for k in 0..n {
                        let vkp = v[(k, p)];
                        let vkq = v[(k, q)];
                        v[(k, p)] = c * vkp - s * vkq;
                        v[(k, q)] = s * vkp + c * vkq;
                    }
                }
            }
        }
        if !converged {
            return Err(Error::Numerical("Jacobi eigensolver did not converge".into()));
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].total_cmp(&m[(j, j)]));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(Eigen { values, vectors })
}

fn reconstruct(e: &Eigen, f: impl Fn(f64) -> f64) -> SymmetricMatrix {
    let n = e.values.len();
    let mut scaled = e.vectors.clone();
    for (c, &lam) in e.values.iter().enumerate() {
        let fl = f(lam);
        for r in 0..n {
            scaled[(r, c)] *= fl;
        }
    }
    SymmetricMatrix::symmetrize(&scaled * e.vectors.transpose())
}

fn spd_eig(a: &SymmetricMatrix) -> Result<Eigen> {
    if !a.is_finite() {
        return Err(Error::InvalidInput("non-finite matrix entry".into()));
    }
    let e = jacobi(a.regularized())?;
    if let Some(&min) = e.values.first() {
        if min <= 0.0 {
            return Err(Error::NotPositiveDefinite(format!(
                "smallest eigenvalue {min:e} after regularization"
            )));
        }
    }
    Ok(e)
}

/// Matrix logarithm of an SPD matrix.
pub fn spd_logm(a: &SymmetricMatrix) -> Result<SymmetricMatrix> {
    Ok(reconstruct(&spd_eig(a)?, f64::ln))
}

/// Matrix exponential of a symmetric matrix (result is SPD).
pub fn spd_expm(a: &SymmetricMatrix) -> Result<SymmetricMatrix> {
    Ok(reconstruct(&sym_eig(a)?, f64::exp))
}

pub fn spd_sqrtm(a: &SymmetricMatrix) -> Result<SymmetricMatrix> {
    Ok(reconstruct(&spd_eig(a)?, f64::sqrt))
}

pub fn spd_invsqrt(a: &SymmetricMatrix) -> Result<SymmetricMatrix> {
    Ok(reconstruct(&spd_eig(a)?, |l| 1.0 / l.sqrt()))
}

/// Real matrix power of an SPD matrix.
pub fn spd_powm(a: &SymmetricMatrix, p: f64) -> Result<SymmetricMatrix> {
    Ok(reconstruct(&spd_eig(a)?, |l| l.powf(p)))
}

/// Generalized symmetric-definite eigenproblem `A v = λ B v`.
///
/// Eigenvalues are returned in descending order; eigenvectors are
/// normalized so that `Vᵀ B V = I`.
pub fn gen_eig_spd(a: &SymmetricMatrix, b: &SymmetricMatrix) -> Result<Eigen> {
    if a.n() != b.n() {
        return Err(Error::Shape(format!("{} vs {}", a.n(), b.n())));
    }
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::InvalidInput("non-finite matrix entry".into()));
    }
    let chol = b
        .matrix()
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("Cholesky factorization of B failed".into()))?;
    let l = chol.l();
    let l_inv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::NotPositiveDefinite("singular Cholesky factor".into()))?;
    let c = &l_inv * a.matrix() * l_inv.transpose();
    let e = jacobi(SymmetricMatrix::symmetrize(c).into_matrix())?;
    let n = a.n();
    let u = DMatrix::from_fn(n, n, |r, col| e.vectors[(r, n - 1 - col)]);
    let values = e.values.iter().rev().copied().collect();
    let vectors = l_inv.transpose() * u;
    Ok(Eigen { values, vectors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn random_sym(n: usize, seed: u64) -> SymmetricMatrix {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        SymmetricMatrix::symmetrize(&m + m.transpose())
    }

    fn random_spd(n: usize, seed: u64) -> SymmetricMatrix {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let m = DMatrix::from_fn(n, n + 3, |_, _| rng.random_range(-1.0..1.0));
        SymmetricMatrix::symmetrize(&m * m.transpose() + DMatrix::identity(n, n) * 0.1)
    }

    fn frob(m: &DMatrix<f64>) -> f64 {
        m.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[test]
    fn rejects_asymmetric() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.1, 1.0]);
        assert!(SymmetricMatrix::new(m).is_err());
    }

    #[test]
    fn identity_eigen() {
        let e = sym_eig(&SymmetricMatrix::identity(3)).unwrap();
        assert_eq!(e.values, vec![1.0, 1.0, 1.0]);
        let vtv = e.vectors.transpose() * &e.vectors;
        assert!(frob(&(vtv - DMatrix::identity(3, 3))) < 1e-12);
    }

    #[test]
    fn diagonal_eigen_sorted_with_axes() {
        let e = sym_eig(&SymmetricMatrix::from_diagonal(&[3.0, 1.0, 2.0])).unwrap();
        assert_eq!(e.values, vec![1.0, 2.0, 3.0]);
        // eigenvalue 1 lives on axis 1, 2 on axis 2, 3 on axis 0
        assert!((e.vectors[(1, 0)].abs() - 1.0).abs() < 1e-15);
        assert!((e.vectors[(2, 1)].abs() - 1.0).abs() < 1e-15);
        assert!((e.vectors[(0, 2)].abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn random_reconstruction_and_orthonormality() {
        for seed in 0..5 {
            let a = random_sym(6, seed);
            let e = sym_eig(&a).unwrap();
            let r = reconstruct(&e, |l| l);
            let err = frob(&(r.matrix() - a.matrix())) / frob(a.matrix());
            assert!(err < 1e-10, "seed {seed}: {err:e}");
            let vtv = e.vectors.transpose() * &e.vectors;
            assert!(frob(&(vtv - DMatrix::identity(6, 6))) < 1e-9);
            assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
            let av = a.matrix() * &e.vectors;
            let vl = &e.vectors * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(e.values.clone()));
            assert!(frob(&(av - vl)) < 1e-9);
        }
    }

    #[test]
    fn jacobi_agrees_with_nalgebra_qr_eigensolver() {
        let a = random_sym(8, 42);
        let e = sym_eig(&a).unwrap();
        let mut reference: Vec<f64> = a.matrix().clone().symmetric_eigen().eigenvalues.iter().copied().collect();
        reference.sort_by(f64::total_cmp);
        for (x, y) in e.values.iter().zip(&reference) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn eigenvalue_sum_is_trace() {
        for seed in 10..20 {
            let a = random_sym(7, seed);
            let e = sym_eig(&a).unwrap();
            let s: f64 = e.values.iter().sum();
            assert!((s - a.trace()).abs() <= 1e-10 * a.trace().abs().max(1.0));
        }
    }

    #[test]
    fn non_finite_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[f64::NAN, 0.0, 0.0, 1.0]);
        let s = SymmetricMatrix::symmetrize(m);
        assert!(matches!(sym_eig(&s), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn logm_closed_forms() {
        let z = spd_logm(&SymmetricMatrix::identity(4)).unwrap();
        assert!(z.matrix().iter().all(|v| v.abs() < 1e-9));
        let e = std::f64::consts::E;
        let l = spd_logm(&SymmetricMatrix::from_diagonal(&[e, e * e])).unwrap();
        assert!((l.matrix()[(0, 0)] - 1.0).abs() < 1e-9);
        assert!((l.matrix()[(1, 1)] - 2.0).abs() < 1e-9);
        assert!(l.matrix()[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn exp_log_round_trip() {
        for seed in 0..5 {
            let a = random_spd(5, seed);
            let back = spd_expm(&spd_logm(&a).unwrap()).unwrap();
            let err = frob(&(back.matrix() - a.matrix())) / frob(a.matrix());
            assert!(err < 1e-8, "{err:e}");
        }
    }

    #[test]
    fn invsqrt_whitens() {
        for seed in 0..5 {
            let a = random_spd(6, 100 + seed);
            let w = spd_invsqrt(&a).unwrap();
            let i = w.matrix() * a.matrix() * w.matrix();
            assert!(frob(&(i - DMatrix::identity(6, 6))) < 1e-8);
        }
    }

    #[test]
    fn logm_rejects_indefinite() {
        let a = SymmetricMatrix::from_diagonal(&[1.0, -1.0]);
        assert!(matches!(spd_logm(&a), Err(Error::NotPositiveDefinite(_))));
    }

    #[test]
    fn gen_eig_identity_b_matches_sym_eig() {
        let a = random_sym(5, 7);
        let g = gen_eig_spd(&a, &SymmetricMatrix::identity(5)).unwrap();
        let e = sym_eig(&a).unwrap();
        let mut rev = e.values.clone();
        rev.reverse();
        for (x, y) in g.values.iter().zip(&rev) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn gen_eig_scaled_pair() {
        let b = random_spd(4, 3);
        let a = SymmetricMatrix::symmetrize(b.matrix() * 2.0);
        let g = gen_eig_spd(&a, &b).unwrap();
        assert!(g.values.iter().all(|l| (l - 2.0).abs() < 1e-9));
    }

    #[test]
    fn gen_eig_residuals_and_b_orthonormality() {
        for seed in 0..5 {
            let a = random_sym(6, 200 + seed);
            let b = random_spd(6, 300 + seed);
            let g = gen_eig_spd(&a, &b).unwrap();
            assert!(g.values.windows(2).all(|w| w[0] >= w[1]));
            for k in 0..6 {
                let v = g.vectors.column(k);
                let r = a.matrix() * v - b.matrix() * v * g.values[k];
                assert!(r.norm() < 1e-8, "residual {:e}", r.norm());
            }
            let vbv = g.vectors.transpose() * b.matrix() * &g.vectors;
            assert!(frob(&(vbv - DMatrix::identity(6, 6))) < 1e-9);
        }
    }

    #[test]
    fn gen_eig_rejects_indefinite_b() {
        let a = SymmetricMatrix::identity(2);
        let b = SymmetricMatrix::from_diagonal(&[1.0, -2.0]);
        assert!(matches!(gen_eig_spd(&a, &b), Err(Error::NotPositiveDefinite(_))));
    }
}
