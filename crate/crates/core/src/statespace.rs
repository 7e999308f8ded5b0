//! Multipartite state spaces, pure states, cuts along one party, and the
//! state-pair file format.
//!
//! Amplitudes are stored flat in row-major multi-index order: party 0 is the
//! slowest index, the last party the fastest. Cutting along a party reshapes
//! the amplitude vector into rows indexed by that party; the complement keeps
//! its original party order.

use crate::error::{Error, Result};
use crate::linalg::{self, c, tol, CMat, CVec};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde_json::{json, Value};
use std::fmt;
use std::path::Path;

/// Ordered list of local dimensions, one per party.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartySpace {
    dims: Vec<usize>,
}

impl PartySpace {
    /// A space needs at least one party and every local dimension positive.
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::EmptySpace);
        }
        Ok(Self { dims })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn party_count(&self) -> usize {
        self.dims.len()
    }

    pub fn total_dim(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn check_party(&self, party: usize) -> Result<()> {
        if party >= self.dims.len() {
            return Err(Error::PartyOutOfRange {
                party,
                count: self.dims.len(),
            });
        }
        Ok(())
    }
}

impl fmt::Display for PartySpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        write!(f, "{}", parts.join("x"))
    }
}

/// Dimensions to the left of, at, and to the right of a party.
pub(crate) fn split_dims(dims: &[usize], party: usize) -> (usize, usize, usize) {
    let left: usize = dims[..party].iter().product();
    let right: usize = dims[party + 1..].iter().product();
    (left, dims[party], right)
}

/// Reshape a flat amplitude vector into rows indexed by one party. Row `i`
/// holds the complement amplitudes paired with party value `i`, complement
/// parties kept in their original order.
pub(crate) fn rows_for_party(amps: &CVec, dims: &[usize], party: usize) -> CMat {
    let (left, d, right) = split_dims(dims, party);
    let mut rows = CMat::zeros(d, left * right);
    for l in 0..left {
        for i in 0..d {
            for r in 0..right {
                rows[(i, l * right + r)] = amps[(l * d + i) * right + r];
            }
        }
    }
    rows
}

/// Inverse of [`rows_for_party`] for a (possibly resized) party dimension.
pub(crate) fn state_from_rows(rows: &CMat, dims: &[usize], party: usize) -> CVec {
    let (left, d, right) = split_dims(dims, party);
    debug_assert_eq!(rows.nrows(), d);
    debug_assert_eq!(rows.ncols(), left * right);
    let mut amps = CVec::zeros(left * d * right);
    for l in 0..left {
        for i in 0..d {
            for r in 0..right {
                amps[(l * d + i) * right + r] = rows[(i, l * right + r)];
            }
        }
    }
    amps
}

/// Normalized pure state on a [`PartySpace`].
#[derive(Debug, Clone, PartialEq)]
pub struct PureState {
    space: PartySpace,
    amps: CVec,
}

impl PureState {
    /// Ingest amplitudes, requiring the norm to sit within `tol::STATE_NORM`
    /// of 1; the stored vector is renormalized. Vectors already unit to a
    /// few rounding steps are kept bit-identical, so ingestion is idempotent
    /// and files round-trip exactly.
    pub fn new(space: PartySpace, amps: CVec) -> Result<Self> {
        if amps.len() != space.total_dim() {
            return Err(Error::AmplitudeCount {
                expected: space.total_dim(),
                found: amps.len(),
            });
        }
        let norm = amps.norm();
        if (norm - 1.0).abs() > tol::STATE_NORM {
            return Err(Error::NotNormalized { norm });
        }
        let amps = if (norm - 1.0).abs() <= 64.0 * f64::EPSILON {
            amps
        } else {
            amps.unscale(norm)
        };
        Ok(Self { space, amps })
    }

    pub fn space(&self) -> &PartySpace {
        &self.space
    }

    pub fn amplitudes(&self) -> &CVec {
        &self.amps
    }
}

/// `<a|b>`, conjugating the first argument.
pub fn inner_product(a: &PureState, b: &PureState) -> Result<Complex64> {
    if a.space != b.space {
        return Err(Error::SpaceMismatch(format!("{} vs {}", a.space, b.space)));
    }
    Ok(a.amps.dotc(&b.amps))
}

/// Overlap operator of a state pair along one party: the partial trace of
/// `|psi><phi|` over everything except that party. Its trace equals
/// `<phi|psi>`, and a local rotation `W` on the party conjugates it to
/// `W C W^dag`.
#[derive(Debug, Clone)]
pub struct OverlapMatrix {
    party: usize,
    entries: CMat,
}

impl OverlapMatrix {
    pub fn new(party: usize, entries: CMat) -> Self {
        Self { party, entries }
    }

    pub fn party(&self) -> usize {
        self.party
    }

    pub fn entries(&self) -> &CMat {
        &self.entries
    }

    pub fn trace(&self) -> Complex64 {
        self.entries.trace()
    }

    /// Active rotation of the cut party: `C -> W C W^dag`.
    pub fn conjugated(&self, w: &CMat) -> Self {
        Self {
            party: self.party,
            entries: w * &self.entries * w.adjoint(),
        }
    }
}

/// Compute the overlap operator of `(phi, psi)` along `party`.
pub fn overlap_operator(phi: &PureState, psi: &PureState, party: usize) -> Result<OverlapMatrix> {
    if phi.space != psi.space {
        return Err(Error::SpaceMismatch(format!(
            "{} vs {}",
            phi.space, psi.space
        )));
    }
    phi.space.check_party(party)?;
    let f = rows_for_party(&phi.amps, phi.space.dims(), party);
    let g = rows_for_party(&psi.amps, psi.space.dims(), party);
    // C_ij = <f_j|g_i> so that trace C = sum_i <f_i|g_i> = <phi|psi>.
    Ok(OverlapMatrix::new(party, &g * f.adjoint()))
}

/// Both states of a pair expanded along one party in a declared orthonormal
/// basis: weights and normalized complement vectors, with `None` marking
/// components of negligible weight.
#[derive(Debug, Clone)]
pub struct StatePairDecomposition {
    pub party: usize,
    /// Weights of the first state's components; sums to 1.
    pub r: Vec<f64>,
    /// Weights of the second state's components; sums to 1.
    pub s: Vec<f64>,
    /// Normalized complement vectors of the first state.
    pub eta: Vec<Option<CVec>>,
    /// Normalized complement vectors of the second state.
    pub gamma: Vec<Option<CVec>>,
}

/// Expand a state pair along `party` in the basis given by the columns of
/// `basis` (the identity when `None`).
pub fn decompose_pair(
    phi: &PureState,
    psi: &PureState,
    party: usize,
    basis: Option<&CMat>,
) -> Result<StatePairDecomposition> {
    if phi.space != psi.space {
        return Err(Error::SpaceMismatch(format!(
            "{} vs {}",
            phi.space, psi.space
        )));
    }
    phi.space.check_party(party)?;
    let d = phi.space.dims()[party];
    let mut f = rows_for_party(&phi.amps, phi.space.dims(), party);
    let mut g = rows_for_party(&psi.amps, psi.space.dims(), party);
    if let Some(b) = basis {
        if b.nrows() != d || b.ncols() != d {
            return Err(Error::OperatorShape {
                rows: b.nrows(),
                cols: b.ncols(),
                dim: d,
            });
        }
        let residual = linalg::identity_residual(&(b.adjoint() * b));
        if residual > tol::ISOMETRY {
            return Err(Error::NotOrthonormal { residual });
        }
        // Component i in basis vector b_i is sum_j conj(B_ji) row_j.
        f = b.adjoint() * f;
        g = b.adjoint() * g;
    }
    let mut out = StatePairDecomposition {
        party,
        r: Vec::with_capacity(d),
        s: Vec::with_capacity(d),
        eta: Vec::with_capacity(d),
        gamma: Vec::with_capacity(d),
    };
    for i in 0..d {
        let fi: CVec = f.row(i).transpose();
        let gi: CVec = g.row(i).transpose();
        let r = linalg::norm_sq(&fi);
        let s = linalg::norm_sq(&gi);
        out.r.push(r);
        out.s.push(s);
        out.eta.push((r > tol::PRUNE).then(|| fi.unscale(r.sqrt())));
        out.gamma
            .push((s > tol::PRUNE).then(|| gi.unscale(s.sqrt())));
    }
    Ok(out)
}

/// Apply an isometry to one party. `op` must have `cols = dims[party]`,
/// `rows >= cols`, and satisfy `op^dag op = I`; the party's dimension becomes
/// `rows`.
pub fn apply_local(op: &CMat, party: usize, state: &PureState) -> Result<PureState> {
    state.space.check_party(party)?;
    let d = state.space.dims()[party];
    if op.ncols() != d || op.nrows() < op.ncols() {
        return Err(Error::OperatorShape {
            rows: op.nrows(),
            cols: op.ncols(),
            dim: d,
        });
    }
    let residual = linalg::isometry_residual(op);
    if residual > tol::ISOMETRY {
        return Err(Error::NotIsometry { residual });
    }
    let mut dims = state.space.dims().to_vec();
    dims[party] = op.nrows();
    let amps = apply_kraus_raw(op, party, state.space.dims(), &state.amps);
    PureState::new(PartySpace::new(dims)?, amps)
}

/// Apply an arbitrary one-party operator to a flat (possibly unnormalized)
/// amplitude vector. No isometry or norm checks; the caller owns those.
pub(crate) fn apply_kraus_raw(op: &CMat, party: usize, dims: &[usize], amps: &CVec) -> CVec {
    let rows = rows_for_party(amps, dims, party);
    let new_rows = op * rows;
    let mut new_dims = dims.to_vec();
    new_dims[party] = op.nrows();
    state_from_rows(&new_rows, &new_dims, party)
}

/// One-party cut of a single state: nonincreasing Schmidt coefficients with
/// the paired orthonormal vectors on the party and on its complement.
#[derive(Debug, Clone)]
pub struct SchmidtDecomposition {
    pub coefficients: Vec<f64>,
    pub party_vectors: Vec<CVec>,
    pub complement_vectors: Vec<CVec>,
}

pub fn schmidt(state: &PureState, party: usize) -> Result<SchmidtDecomposition> {
    state.space.check_party(party)?;
    let rows = rows_for_party(&state.amps, state.space.dims(), party);
    let svd = rows.clone().svd(true, true);
    let u = svd.u.expect("svd requested u");
    let v_t = svd.v_t.expect("svd requested v_t");
    let mut out = SchmidtDecomposition {
        coefficients: Vec::new(),
        party_vectors: Vec::new(),
        complement_vectors: Vec::new(),
    };
    for (k, &sv) in svd.singular_values.iter().enumerate() {
        if sv * sv <= tol::PRUNE {
            break; // singular values arrive nonincreasing
        }
        out.coefficients.push(sv);
        out.party_vectors.push(u.column(k).into_owned());
        out.complement_vectors.push(v_t.row(k).transpose());
    }
    Ok(out)
}

/// Haar-random pure state: normal amplitudes, normalized.
pub fn random_state<R: Rng + ?Sized>(space: &PartySpace, rng: &mut R) -> PureState {
    let n = space.total_dim();
    loop {
        let amps = CVec::from_fn(n, |_, _| {
            c(rng.sample(StandardNormal), rng.sample(StandardNormal))
        });
        let norm = amps.norm();
        if norm > 1e-6 {
            return PureState {
                space: space.clone(),
                amps: amps.unscale(norm),
            };
        }
    }
}

/// Random pair with a prescribed overlap modulus: the second state is
/// `e^{i chi} (c phi + sqrt(1 - c^2) phi_perp)` for a Haar-random `phi`, a
/// Haar-random unit `phi_perp` orthogonal to it, and a uniform phase `chi`.
pub fn random_pair<R: Rng + ?Sized>(
    space: &PartySpace,
    overlap: f64,
    rng: &mut R,
) -> Result<(PureState, PureState)> {
    if !(0.0..=1.0).contains(&overlap) || !overlap.is_finite() {
        return Err(Error::OverlapOutOfRange(overlap));
    }
    if space.total_dim() < 2 {
        return Err(Error::Validation(
            "a random pair needs total dimension at least 2".into(),
        ));
    }
    let phi = random_state(space, rng);
    let perp = loop {
        let cand = random_state(space, rng);
        // Two Gram-Schmidt passes keep the residual overlap near machine eps.
        let mut w = &cand.amps - &phi.amps * phi.amps.dotc(&cand.amps);
        w -= &phi.amps * phi.amps.dotc(&w);
        let norm = w.norm();
        if norm > 1e-6 {
            break w.unscale(norm);
        }
    };
    let chi = rng.gen_range(0.0..std::f64::consts::TAU);
    let phase = c(chi.cos(), chi.sin());
    let amps = (&phi.amps * linalg::cr(overlap)
        + perp * linalg::cr((1.0 - overlap * overlap).sqrt()))
        * phase;
    let psi = PureState {
        space: space.clone(),
        amps,
    };
    Ok((phi, psi))
}

// ---------------------------------------------------------------------------
// JSON helpers shared by the file formats.

pub(crate) fn complex_to_value(z: Complex64) -> Value {
    json!([z.re, z.im])
}

pub(crate) fn vec_to_value(v: &CVec) -> Value {
    Value::Array(v.iter().map(|&z| complex_to_value(z)).collect())
}

pub(crate) fn mat_to_value(m: &CMat) -> Value {
    Value::Array(
        (0..m.nrows())
            .map(|i| {
                Value::Array(
                    (0..m.ncols())
                        .map(|j| complex_to_value(m[(i, j)]))
                        .collect(),
                )
            })
            .collect(),
    )
}

fn bad_pair(msg: impl Into<String>) -> Error {
    Error::MalformedStatePair(msg.into())
}

pub(crate) fn complex_from_value(v: &Value, what: &str) -> Result<Complex64> {
    let arr = v
        .as_array()
        .ok_or_else(|| bad_pair(format!("{what}: expected a [re, im] pair")))?;
    if arr.len() != 2 {
        return Err(bad_pair(format!(
            "{what}: expected exactly two entries in a [re, im] pair"
        )));
    }
    let re = arr[0]
        .as_f64()
        .ok_or_else(|| bad_pair(format!("{what}: non-numeric real part")))?;
    let im = arr[1]
        .as_f64()
        .ok_or_else(|| bad_pair(format!("{what}: non-numeric imaginary part")))?;
    Ok(c(re, im))
}

pub(crate) fn vec_from_value(v: &Value, what: &str) -> Result<CVec> {
    let arr = v
        .as_array()
        .ok_or_else(|| bad_pair(format!("{what}: expected an array of amplitudes")))?;
    let mut out = Vec::with_capacity(arr.len());
    for (k, entry) in arr.iter().enumerate() {
        out.push(complex_from_value(entry, &format!("{what}[{k}]"))?);
    }
    Ok(CVec::from_vec(out))
}

/// Serialize a state pair as a JSON object with sorted keys.
pub fn pair_to_json(phi: &PureState, psi: &PureState) -> Result<Value> {
    if phi.space != psi.space {
        return Err(Error::SpaceMismatch(format!(
            "{} vs {}",
            phi.space, psi.space
        )));
    }
    Ok(json!({
        "dims": phi.space.dims(),
        "phi": vec_to_value(&phi.amps),
        "psi": vec_to_value(&psi.amps),
    }))
}

/// Parse a state pair from its JSON object form.
pub fn pair_from_json(value: &Value) -> Result<(PureState, PureState)> {
    let obj = value
        .as_object()
        .ok_or_else(|| bad_pair("top level: expected an object"))?;
    let dims_val = obj
        .get("dims")
        .ok_or_else(|| bad_pair("missing \"dims\""))?;
    let dims_arr = dims_val
        .as_array()
        .ok_or_else(|| bad_pair("\"dims\": expected an array"))?;
    let mut dims = Vec::with_capacity(dims_arr.len());
    for (k, d) in dims_arr.iter().enumerate() {
        let d = d
            .as_u64()
            .ok_or_else(|| bad_pair(format!("dims[{k}]: expected a positive integer")))?;
        dims.push(d as usize);
    }
    let space = PartySpace::new(dims)?;
    let phi_amps = vec_from_value(
        obj.get("phi").ok_or_else(|| bad_pair("missing \"phi\""))?,
        "phi",
    )?;
    let psi_amps = vec_from_value(
        obj.get("psi").ok_or_else(|| bad_pair("missing \"psi\""))?,
        "psi",
    )?;
    let phi = PureState::new(space.clone(), phi_amps)?;
    let psi = PureState::new(space, psi_amps)?;
    Ok((phi, psi))
}

/// Render a JSON value as pretty UTF-8 with sorted keys and a trailing
/// newline, the form every file this crate writes uses.
pub(crate) fn render_json(value: &Value) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("serializing JSON value");
    text.push('\n');
    text
}

/// Write a state pair to a file.
pub fn write_pair_file(path: &Path, phi: &PureState, psi: &PureState) -> Result<()> {
    let value = pair_to_json(phi, psi)?;
    std::fs::write(path, render_json(&value))?;
    Ok(())
}

/// Read a state pair from a file.
pub fn read_pair_file(path: &Path) -> Result<(PureState, PureState)> {
    let text = std::fs::read_to_string(path)?;
    let value: Value = serde_json::from_str(&text)?;
    pair_from_json(&value)
}

/// Two-qubit pair `cos b |00> +- sin b |11>`, used across the test suites:
/// equal component weights, opposite-sign overlaps, inner product `cos 2b`.
#[cfg(test)]
pub(crate) fn beta_pair(beta: f64) -> (PureState, PureState) {
    use crate::linalg::{cr, ZERO};
    let space = PartySpace::new(vec![2, 2]).unwrap();
    let phi = PureState::new(
        space.clone(),
        CVec::from_vec(vec![cr(beta.cos()), ZERO, ZERO, cr(beta.sin())]),
    )
    .unwrap();
    let psi = PureState::new(
        space,
        CVec::from_vec(vec![cr(beta.cos()), ZERO, ZERO, cr(-beta.sin())]),
    )
    .unwrap();
    (phi, psi)
}
