//! Dense complex linear algebra helpers and the tolerance ladder used
//! throughout the crate.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

pub type CVec = DVector<Complex64>;
pub type CMat = DMatrix<Complex64>;

pub const ZERO: Complex64 = Complex64::new(0.0, 0.0);
pub const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// Shorthand complex constructor.
pub fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

/// Real number lifted to a complex amplitude.
pub fn cr(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

/// Tolerances, ordered from loose (ingestion of external data) to tight
/// (internal algebraic identities). Each module uses these named constants so
/// the ladder stays consistent crate-wide.
pub mod tol {
    /// Norm deviation accepted when ingesting externally supplied amplitudes.
    pub const STATE_NORM: f64 = 1e-8;
    /// Default verification tolerance for the optimality residual.
    pub const VERIFY_DEFAULT: f64 = 1e-9;
    /// Below this modulus two states count as orthogonal and are routed to
    /// the perfect-discrimination compiler.
    pub const ORTHOGONAL_GATE: f64 = 1e-10;
    /// Residual allowed on completeness sums of measurement operators.
    pub const COMPLETENESS: f64 = 1e-10;
    /// Within this distance of modulus 1 two states count as identical.
    pub const DEGENERATE: f64 = 1e-12;
    /// Unitarity / isometry residual on constructed operators.
    pub const ISOMETRY: f64 = 1e-12;
    /// Weight-difference threshold under which the equalizing sweep stops.
    pub const EQUALIZE: f64 = 1e-12;
    /// Aligned overlaps with modulus below this are treated as exactly zero.
    pub const SIGN_DEAD_ZONE: f64 = 1e-12;
    /// Diagonal spread targeted by the averaging rotation loop.
    pub const DIAGONAL_SPREAD: f64 = 1e-13;
    /// Branch probabilities and term weights below this are pruned.
    pub const PRUNE: f64 = 1e-14;
}

/// Largest entry modulus of a matrix.
pub fn max_abs(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Largest entry modulus of `M - I`.
pub fn identity_residual(m: &CMat) -> f64 {
    let n = m.nrows().min(m.ncols());
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            let target = if i == j && i < n { ONE } else { ZERO };
            worst = worst.max((m[(i, j)] - target).norm());
        }
    }
    worst
}

/// Largest entry modulus of `V^dag V - I`; zero iff `V` preserves norms.
pub fn isometry_residual(v: &CMat) -> f64 {
    identity_residual(&(v.adjoint() * v))
}

/// Largest entry modulus of `M - M^dag`.
pub fn hermitian_residual(m: &CMat) -> f64 {
    max_abs(&(m - m.adjoint()))
}

/// Eigendecomposition of the Hermitian part `(M + M^dag) / 2` by cyclic
/// Jacobi rotations, returning `(Q, eigenvalues)` with the Hermitian part
/// equal to `Q diag(eigenvalues) Q^dag`. Jacobi keeps the eigenvector matrix
/// unitary and the reconstruction exact to rounding on the small matrices
/// used here, which the library eigensolver does not guarantee.
pub fn hermitian_eigen(m: &CMat) -> (CMat, Vec<f64>) {
    let n = m.nrows();
    let mut a = (m + m.adjoint()).scale(0.5);
    let mut q = CMat::identity(n, n);
    if n <= 1 {
        return (q, (0..n).map(|i| a[(i, i)].re).collect());
    }
    let scale = a.iter().map(|z| z.norm()).fold(f64::MIN_POSITIVE, f64::max);
    for _ in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for r in p + 1..n {
                off = off.max(a[(p, r)].norm());
            }
        }
        if off <= scale * f64::EPSILON {
            break;
        }
        for p in 0..n {
            for r in p + 1..n {
                let apr = a[(p, r)];
                let mag = apr.norm();
                if mag <= scale * f64::EPSILON {
                    continue;
                }
                // Factor out the phase so the 2x2 block is real symmetric,
                // then zero it with the standard stable Givens choice.
                let phase = apr.unscale(mag);
                let tau = (a[(r, r)].re - a[(p, p)].re) / (2.0 * mag);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akr = a[(k, r)];
                    a[(k, p)] = akp * cr(c) - akr * phase.conj() * cr(s);
                    a[(k, r)] = akp * cr(s) + akr * phase.conj() * cr(c);
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let ark = a[(r, k)];
                    a[(p, k)] = apk * cr(c) - ark * phase * cr(s);
                    a[(r, k)] = apk * cr(s) + ark * phase * cr(c);
                }
                for k in 0..n {
                    let qkp = q[(k, p)];
                    let qkr = q[(k, r)];
                    q[(k, p)] = qkp * cr(c) - qkr * phase.conj() * cr(s);
                    q[(k, r)] = qkp * cr(s) + qkr * phase.conj() * cr(c);
                }
            }
        }
    }
    (q, (0..n).map(|i| a[(i, i)].re).collect())
}

/// Real eigenvalues of the Hermitian part `(M + M^dag) / 2`.
pub fn hermitian_eigenvalues(m: &CMat) -> Vec<f64> {
    hermitian_eigen(m).1
}

/// Smallest eigenvalue of the Hermitian part of `M`.
pub fn min_eigenvalue(m: &CMat) -> f64 {
    hermitian_eigenvalues(m)
        .into_iter()
        .fold(f64::INFINITY, f64::min)
}

/// Principal square root of a positive semidefinite matrix. Eigenvalues that
/// dip below zero by rounding are clamped to zero first.
pub fn psd_sqrt(m: &CMat) -> CMat {
    let (q, eigenvalues) = hermitian_eigen(m);
    let rooted: Vec<Complex64> = eigenvalues.iter().map(|&l| cr(l.max(0.0).sqrt())).collect();
    let d = CMat::from_diagonal(&CVec::from_vec(rooted));
    &q * d * q.adjoint()
}

/// Squared two-norm of a complex vector.
pub fn norm_sq(v: &CVec) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum()
}
