//! Alignment of a state pair along one party: a local unitary on that party
//! brings the pair into a form with equal component weights and real
//! component overlaps, the shape every downstream pairing step relies on.
//!
//! Writing `phi = sum_i sqrt(r_i) |i> |eta_i>` and `e^{-i gamma} psi =
//! sum_i sqrt(s_i) |i> |gamma_i>` (with `gamma` the phase of `<phi|psi>`),
//! the aligned form has `r_i = s_i = t_i` and `<eta_i|gamma_i>` real. It is
//! reached with a product of two-level rotations acting on the cut party
//! only, chosen from the pair's overlap operator.

use crate::error::{Error, Result};
use crate::linalg::{self, c, cr, tol, CMat, CVec};
use crate::statespace::{self, PureState};
use num_complex::Complex64;
use serde_json::{json, Value};

/// Two-level rotation on basis indices `i < j`:
/// rows `(cos t, sin t e^{i w})` and `(sin t e^{-i w}, -cos t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairRotation {
    pub i: usize,
    pub j: usize,
    pub theta: f64,
    pub omega: f64,
}

impl PairRotation {
    /// The rotation as a dense 2x2 unitary.
    pub fn unitary2(&self) -> CMat {
        let (ct, st) = (self.theta.cos(), self.theta.sin());
        let ph = c(self.omega.cos(), self.omega.sin());
        CMat::from_row_slice(2, 2, &[cr(ct), ph * st, ph.conj() * st, cr(-ct)])
    }

    /// The rotation embedded in a `dim`-dimensional identity.
    pub fn embedded(&self, dim: usize) -> CMat {
        let u2 = self.unitary2();
        let mut u = CMat::identity(dim, dim);
        u[(self.i, self.i)] = u2[(0, 0)];
        u[(self.i, self.j)] = u2[(0, 1)];
        u[(self.j, self.i)] = u2[(1, 0)];
        u[(self.j, self.j)] = u2[(1, 1)];
        u
    }
}

/// Phase `w` with `Im(a e^{-iw} + b e^{iw}) = 0`, making the cross term a
/// two-level rotation injects into a diagonal entry real. Returns 0 when the
/// constraint is trivial.
pub fn solve_omega(a: Complex64, b: Complex64) -> f64 {
    // Im(a e^{-iw} + b e^{iw}) = (Im a + Im b) cos w + (Re b - Re a) sin w.
    let p = a.im + b.im;
    let q = b.re - a.re;
    // Only the exactly trivial case is special; atan2 is scale invariant,
    // so small (p, q) still carry a valid direction and must be solved.
    if p == 0.0 && q == 0.0 {
        return 0.0;
    }
    // (cos w, sin w) perpendicular to (p, q).
    f64::atan2(p, -q)
}

/// Angle `t` with `A cos 2t + B sin 2t + C = 0`, feasible when
/// `|C| <= sqrt(A^2 + B^2)`. Of the two solution branches the one with the
/// smaller residual is returned; ties take the minus branch.
pub fn solve_theta(a: f64, b: f64, c_term: f64) -> Result<f64> {
    let r = f64::hypot(a, b);
    if r < 1e-300 {
        if c_term.abs() <= 1e-12 {
            return Ok(0.0);
        }
        return Err(Error::ThetaInfeasible {
            c_abs: c_term.abs(),
            r,
        });
    }
    if c_term.abs() > r + 1e-12 {
        return Err(Error::ThetaInfeasible {
            c_abs: c_term.abs(),
            r,
        });
    }
    let delta = f64::atan2(b, a);
    let spread = (-c_term / r).clamp(-1.0, 1.0).acos();
    let residual = |theta: f64| (a * (2.0 * theta).cos() + b * (2.0 * theta).sin() + c_term).abs();
    let plus = (delta + spread) / 2.0;
    let minus = (delta - spread) / 2.0;
    if residual(minus) <= residual(plus) {
        Ok(minus)
    } else {
        Ok(plus)
    }
}

/// Unitary `W` such that every diagonal entry of `W M W^dag` equals
/// `tr(M) / n`. Built by repeatedly replacing the two diagonal entries
/// farthest apart with their mean, which a single two-level rotation always
/// achieves because the mean is the center of that block's numerical-range
/// ellipse.
pub fn constant_diagonal_unitary(m: &CMat) -> Result<CMat> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(Error::OperatorShape {
            rows: m.nrows(),
            cols: m.ncols(),
            dim: n,
        });
    }
    let mut work = m.clone();
    let mut w = CMat::identity(n, n);
    if n <= 1 {
        return Ok(w);
    }
    let cap = 500 * n * n;
    for _ in 0..cap {
        // The rotations hold the trace only to rounding, so the target is
        // the current mean; a frozen target could sit beyond the gate after
        // enough steps and stall the loop.
        let mean = work.trace() / cr(n as f64);
        let spread = (0..n)
            .map(|k| (work[(k, k)] - mean).norm())
            .fold(0.0, f64::max);
        if spread < tol::DIAGONAL_SPREAD {
            return Ok(w);
        }
        // The farthest-apart diagonal pair contracts the total spread the
        // fastest; its distance is at least the largest deviation from mean.
        let (mut bi, mut bj, mut best) = (0, 1, -1.0);
        for i in 0..n {
            for j in (i + 1)..n {
                let dist = (work[(i, i)] - work[(j, j)]).norm();
                if dist > best {
                    (bi, bj, best) = (i, j, dist);
                }
            }
        }
        let d = work[(bi, bi)] - work[(bj, bj)];
        // Pick w so the off-diagonal cross term is parallel to d, then the
        // angle that cancels the deviation along that common direction.
        let omega = solve_omega(work[(bi, bj)] * d.conj(), work[(bj, bi)] * d.conj());
        let ph = c(omega.cos(), omega.sin());
        let cross = work[(bi, bj)] * ph.conj() + work[(bj, bi)] * ph;
        let lambda = (cross * d.conj()).re / d.norm_sqr();
        let theta = f64::atan2(-1.0, lambda) / 2.0;
        let rot = PairRotation {
            i: bi,
            j: bj,
            theta,
            omega,
        };
        let u = rot.embedded(n);
        work = &u * work * u.adjoint();
        w = &u * w;
    }
    Err(Error::NoConvergence {
        what: "diagonal averaging",
        iterations: cap,
    })
}

/// One equalizing rotation with the data that determined it.
#[derive(Debug, Clone)]
pub struct RotationStep {
    pub rotation: PairRotation,
    /// Coefficients of the solved constraint `A cos 2t + B sin 2t + C = 0`.
    pub coeff_a: f64,
    pub coeff_b: f64,
    pub coeff_c: f64,
    /// Residual of the constraint at the chosen angle.
    pub residual: f64,
}

/// How the aligned form was reached.
#[derive(Debug, Clone, Default)]
pub struct AlignmentDiagnostics {
    /// The input already had equal weights and real overlaps, so the party
    /// unitary is the identity.
    pub fast_path: bool,
    pub rotations: Vec<RotationStep>,
    /// Largest residual imaginary part of a normalized component overlap.
    pub max_phase_residual: f64,
    /// Largest weight mismatch left after the sweep.
    pub max_weight_gap: f64,
}

/// Aligned form of a nonorthogonal state pair along one party.
///
/// With `Q` the party unitary and `gamma` the global phase,
/// `(Q x I) phi = sum_i sqrt(t_i) |i> mu_i` and
/// `(Q x I) psi = sum_i sqrt(t_i) |i> nu_i`, where
/// `e^{-i gamma} <mu_i|nu_i> = rho_i` is real. Entries with negligible
/// weight carry `None` vectors, zero overlap and sign 0.
#[derive(Debug, Clone)]
pub struct CanonicalForm {
    pub cut_party: usize,
    /// Phase of `<phi|psi>`.
    pub global_phase: f64,
    /// Unitary applied to the cut party.
    pub alice_unitary: CMat,
    /// Shared component weights; sums to 1.
    pub t: Vec<f64>,
    /// Normalized complement components of the first state.
    pub mu: Vec<Option<CVec>>,
    /// Normalized complement components of the second state.
    pub nu: Vec<Option<CVec>>,
    /// Real aligned overlaps `rho_i = Re(e^{-i gamma} <mu_i|nu_i>)`.
    pub rho: Vec<f64>,
    /// Sign of each `rho_i` with a dead zone mapping tiny values to 0.
    pub sign: Vec<i8>,
    pub diagnostics: AlignmentDiagnostics,
}

impl CanonicalForm {
    /// `sum_i t_i |rho_i|` splits into positive and negative pools; their
    /// difference equals the overlap modulus of the input pair.
    pub fn aligned_overlap(&self) -> f64 {
        self.t.iter().zip(&self.rho).map(|(t, r)| t * r).sum()
    }
}

fn rotate_rows(rows: &mut [CVec], rot: &PairRotation) {
    let (ct, st) = (rot.theta.cos(), rot.theta.sin());
    let ph = c(rot.omega.cos(), rot.omega.sin());
    let top = &rows[rot.i] * cr(ct) + &rows[rot.j] * (ph * st);
    let bottom = &rows[rot.i] * (ph.conj() * st) - &rows[rot.j] * cr(ct);
    rows[rot.i] = top;
    rows[rot.j] = bottom;
}

fn row_vectors(state: &PureState, party: usize) -> Vec<CVec> {
    let rows = statespace::rows_for_party(state.amplitudes(), state.space().dims(), party);
    (0..rows.nrows()).map(|i| rows.row(i).transpose()).collect()
}

/// Align a state pair along `party`. Fails on (near-)orthogonal input,
/// where no aligned form exists.
pub fn canonicalize(phi: &PureState, psi: &PureState, party: usize) -> Result<CanonicalForm> {
    if phi.space() != psi.space() {
        return Err(Error::SpaceMismatch(format!(
            "{} vs {}",
            phi.space(),
            psi.space()
        )));
    }
    phi.space().check_party(party)?;
    let ip = crate::statespace::inner_product(phi, psi)?;
    if ip.norm() <= 1e-12 {
        return Err(Error::OrthogonalInput);
    }
    let gamma = ip.arg();
    let phase_out = c(gamma.cos(), gamma.sin());
    let d = phi.space().dims()[party];

    let mut f = row_vectors(phi, party);
    // Work with the phase-stripped second state so target overlaps are real.
    let mut g: Vec<CVec> = row_vectors(psi, party)
        .into_iter()
        .map(|row| row * phase_out.conj())
        .collect();

    let weight = |rows: &[CVec], i: usize| linalg::norm_sq(&rows[i]);
    let mut diagnostics = AlignmentDiagnostics::default();
    let mut q = CMat::identity(d, d);

    let already_aligned = {
        let mut ok = true;
        for i in 0..d {
            let (r, s) = (weight(&f, i), weight(&g, i));
            if (r - s).abs() > tol::EQUALIZE {
                ok = false;
                break;
            }
            let scale = (r * s).sqrt();
            if scale > tol::PRUNE {
                let cii = f[i].dotc(&g[i]);
                if cii.im.abs() / scale > tol::EQUALIZE {
                    ok = false;
                    break;
                }
            }
        }
        ok
    };

    if already_aligned {
        diagnostics.fast_path = true;
    } else {
        // Stage 1: make the overlap operator's diagonal constant. Its trace
        // is |<phi|psi>| (real), so all diagonals become real at once.
        let mut cmat = CMat::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                cmat[(i, j)] = f[j].dotc(&g[i]);
            }
        }
        let w0 = constant_diagonal_unitary(&cmat)?;
        let mix = |rows: &[CVec]| -> Vec<CVec> {
            (0..d)
                .map(|i| {
                    (0..d).fold(CVec::zeros(rows[0].len()), |acc, j| {
                        acc + &rows[j] * w0[(i, j)]
                    })
                })
                .collect()
        };
        f = mix(&f);
        g = mix(&g);
        q = w0;

        // Stage 2: equalize the per-index weights of the two states with
        // two-level rotations that keep every diagonal overlap real.
        let cap = 10 * d * d;
        let mut iterations = 0;
        loop {
            let gaps: Vec<f64> = (0..d).map(|i| weight(&f, i) - weight(&g, i)).collect();
            let gap = gaps.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            if gap <= tol::EQUALIZE {
                break;
            }
            if iterations >= cap {
                return Err(Error::NoConvergence {
                    what: "weight equalization",
                    iterations: cap,
                });
            }
            let hi = (0..d).max_by(|&a, &b| gaps[a].total_cmp(&gaps[b])).unwrap();
            let lo = (0..d).min_by(|&a, &b| gaps[a].total_cmp(&gaps[b])).unwrap();
            if gaps[hi] <= 0.0 || gaps[lo] >= 0.0 {
                break; // only rounding noise left around zero
            }
            // The rotation zeroes the gap at its first slot; the pair's gap
            // sum is conserved, so the leftover moves to the second slot and
            // shrinks because surplus and deficit have opposite signs.
            let (bi, bj) = (hi.min(lo), hi.max(lo));
            let omega = solve_omega(f[bj].dotc(&g[bi]), f[bi].dotc(&g[bj]));
            let ph = c(omega.cos(), omega.sin());
            let x = 2.0 * (f[bj].dotc(&f[bi]) * ph.conj()).re;
            let y = 2.0 * (g[bj].dotc(&g[bi]) * ph.conj()).re;
            let (di, dj) = (gaps[bi], gaps[bj]);
            let a = di - dj;
            let b = x - y;
            let c_term = di + dj;
            let theta = solve_theta(a, b, c_term)?;
            let rot = PairRotation {
                i: bi,
                j: bj,
                theta,
                omega,
            };
            rotate_rows(&mut f, &rot);
            rotate_rows(&mut g, &rot);
            q = rot.embedded(d) * q;
            diagnostics.rotations.push(RotationStep {
                rotation: rot,
                coeff_a: a,
                coeff_b: b,
                coeff_c: c_term,
                residual: (a * (2.0 * theta).cos() + b * (2.0 * theta).sin() + c_term).abs(),
            });
            iterations += 1;
        }
    }

    // Extraction: shared weights, normalized components, real overlaps.
    let mut form = CanonicalForm {
        cut_party: party,
        global_phase: gamma,
        alice_unitary: q,
        t: Vec::with_capacity(d),
        mu: Vec::with_capacity(d),
        nu: Vec::with_capacity(d),
        rho: Vec::with_capacity(d),
        sign: Vec::with_capacity(d),
        diagnostics,
    };
    for i in 0..d {
        let (r, s) = (weight(&f, i), weight(&g, i));
        form.diagnostics.max_weight_gap = form.diagnostics.max_weight_gap.max((r - s).abs());
        let t = (r + s) / 2.0;
        if t <= tol::PRUNE {
            form.t.push(t);
            form.mu.push(None);
            form.nu.push(None);
            form.rho.push(0.0);
            form.sign.push(0);
            continue;
        }
        let cii = f[i].dotc(&g[i]);
        let scale = (r * s).sqrt();
        let phase_residual = cii.im.abs() / scale;
        form.diagnostics.max_phase_residual =
            form.diagnostics.max_phase_residual.max(phase_residual);
        if phase_residual > 1e-8 {
            return Err(Error::Validation(format!(
                "component {i} overlap has imaginary residual {phase_residual:.3e}"
            )));
        }
        let rho = cii.re / scale;
        form.t.push(t);
        form.mu.push(Some(f[i].unscale(r.sqrt())));
        // Restore the global phase so the form reconstructs psi itself.
        form.nu.push(Some((&g[i] * phase_out).unscale(s.sqrt())));
        if rho.abs() < tol::SIGN_DEAD_ZONE {
            form.rho.push(0.0);
            form.sign.push(0);
        } else {
            form.rho.push(rho);
            form.sign.push(if rho > 0.0 { 1 } else { -1 });
        }
    }
    if form.diagnostics.max_weight_gap > 1e-10 {
        return Err(Error::NoConvergence {
            what: "weight equalization",
            iterations: form.diagnostics.rotations.len(),
        });
    }
    Ok(form)
}

/// JSON description of an aligned form (matrices and vectors as nested
/// `[re, im]` pairs, sorted keys).
pub fn form_to_json(form: &CanonicalForm) -> Value {
    let opt_vecs = |vs: &[Option<CVec>]| {
        Value::Array(
            vs.iter()
                .map(|v| match v {
                    Some(v) => statespace::vec_to_value(v),
                    None => Value::Null,
                })
                .collect(),
        )
    };
    json!({
        "alice_unitary": statespace::mat_to_value(&form.alice_unitary),
        "cut_party": form.cut_party,
        "global_phase": form.global_phase,
        "mu": opt_vecs(&form.mu),
        "nu": opt_vecs(&form.nu),
        "rho": form.rho,
        "sign": form.sign,
        "t": form.t,
    })
}
