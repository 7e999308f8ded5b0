//! Measurement protocol trees: construction from a state pair, structural
//! validation, and the protocol file format.
//!
//! A protocol is a finite tree. Each interior node measures one party,
//! optionally enlarging it first with an isometry whose output splits into
//! labeled readout blocks; one Kraus operator per branch maps the party to
//! its post-measurement dimension. Leaves carry verdicts. A conclusive tree
//! never misidentifies: under either preparation, every naming verdict
//! reached with nonzero probability names the prepared state.
//!
//! Construction works along one party at a time. A nonorthogonal pair is
//! aligned (see [`crate::canonical`]), its components are split into
//! positive- and negative-overlap pools, and opposite pools are drained
//! pairwise into branches whose conditional states are exactly orthogonal
//! and therefore perfectly distinguishable downstream. What remains is a
//! smaller pair on the other parties, handled recursively; orthogonal pairs
//! and single-party pairs close the recursion.

use crate::canonical::{self, CanonicalForm};
use crate::error::{Error, Result};
use crate::linalg::{self, cr, tol, CMat, CVec, ONE};
use crate::statespace::{self, PartySpace, PureState};
use num_complex::Complex64;
use serde_json::{json, Map, Value};
use std::collections::BTreeMap;
use std::path::Path;

/// What a finished run of the protocol asserts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Verdict {
    IdentifyPhi,
    IdentifyPsi,
    Inconclusive,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::IdentifyPhi => "phi",
            Verdict::IdentifyPsi => "psi",
            Verdict::Inconclusive => "inconclusive",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "phi" => Ok(Verdict::IdentifyPhi),
            "psi" => Ok(Verdict::IdentifyPsi),
            "inconclusive" => Ok(Verdict::Inconclusive),
            other => Err(Error::MalformedProtocol(format!(
                "unknown verdict {other:?}"
            ))),
        }
    }
}

// ---------------------------------------------------------------------------
// Single-party optimal measurement.

/// Labeled positive operators on one party.
#[derive(Debug, Clone)]
pub struct PovmElementSet {
    /// Elements sorted by label.
    pub elements: Vec<(String, CMat)>,
}

/// Residuals of the defining properties of a measurement.
#[derive(Debug, Clone, Copy)]
pub struct PovmReport {
    pub hermitian_residual: f64,
    pub min_eigenvalue: f64,
    pub completeness_residual: f64,
}

impl PovmReport {
    pub fn pass(&self) -> bool {
        self.hermitian_residual <= tol::COMPLETENESS
            && self.min_eigenvalue >= -tol::COMPLETENESS
            && self.completeness_residual <= tol::COMPLETENESS
    }
}

impl PovmElementSet {
    pub fn validate(&self) -> PovmReport {
        let dim = self.elements.first().map_or(0, |(_, e)| e.nrows());
        let mut sum = CMat::zeros(dim, dim);
        let mut herm = 0.0f64;
        let mut min_eig = f64::INFINITY;
        for (_, e) in &self.elements {
            herm = herm.max(linalg::hermitian_residual(e));
            min_eig = min_eig.min(linalg::min_eigenvalue(e));
            sum += e;
        }
        PovmReport {
            hermitian_residual: herm,
            min_eigenvalue: min_eig,
            completeness_residual: linalg::identity_residual(&sum),
        }
    }
}

/// Optimal conclusive measurement for a single-party pair of unit vectors:
/// each naming element is a scaled projector onto the direction orthogonal
/// to the other state, so it can never fire on that state; the inconclusive
/// element absorbs the rest. Both states are named with probability
/// `1 - |<mu|nu>|`, the single-party optimum.
pub fn idp_povm(mu: &CVec, nu: &CVec) -> Result<PovmElementSet> {
    if mu.len() != nu.len() {
        return Err(Error::SpaceMismatch(format!(
            "vector lengths {} vs {}",
            mu.len(),
            nu.len()
        )));
    }
    for v in [mu, nu] {
        let norm = v.norm();
        if (norm - 1.0).abs() > tol::STATE_NORM {
            return Err(Error::NotNormalized { norm });
        }
    }
    let c = mu.dotc(nu);
    let cm = c.norm();
    if 1.0 - cm < tol::DEGENERATE {
        return Err(Error::DegenerateStates);
    }
    let dim = mu.len();
    let scale = cr(1.0 / (1.0 + cm));
    // Work in an orthonormal basis {nu, b} of the span. Two
    // orthogonalization passes keep b orthogonal to nu at machine precision
    // even for nearly parallel inputs, where the analytic normalizer
    // sqrt(1 - |c|^2) would cost a factor 1/(1 - |c|) in precision.
    let mut v = mu - nu * c.conj();
    v -= nu * nu.dotc(&v);
    let b = v.unscale(v.norm());
    // In coordinates the two naming directions are (0, 1) and (s, -c) with
    // s^2 + |c|^2 = 1, so their scaled projectors sum to top eigenvalue
    // exactly 1 regardless of how close the pair is to degenerate, and the
    // complement element stays positive to rounding.
    let s = ((1.0 - cm) * (1.0 + cm)).sqrt();
    let mu_perp = nu * cr(s) - &b * c;
    let e_phi = &b * b.adjoint() * scale;
    let e_psi = &mu_perp * mu_perp.adjoint() * scale;
    let e_inc = CMat::identity(dim, dim) - &e_phi - &e_psi;
    Ok(PovmElementSet {
        elements: vec![
            ("inconclusive".into(), e_inc),
            ("phi".into(), e_phi),
            ("psi".into(), e_psi),
        ],
    })
}

// ---------------------------------------------------------------------------
// Pairing of aligned components.

/// One aligned component awaiting pairing: its basis index on the measured
/// party, shared weight, normalized complement vectors, and real overlap.
#[derive(Debug, Clone)]
pub struct Term {
    pub alice_index: usize,
    pub weight: f64,
    pub mu: CVec,
    pub nu: CVec,
    pub rho: f64,
}

impl Term {
    pub fn sign(&self) -> i8 {
        if self.rho > 0.0 {
            1
        } else if self.rho < 0.0 {
            -1
        } else {
            0
        }
    }

    /// Signed contribution to the weighted overlap sum.
    pub fn contribution(&self) -> f64 {
        self.weight * self.rho
    }
}

/// One leg of an orthogonal branch: which basis direction feeds it, with how
/// much amplitude, and the component vectors that direction carried.
#[derive(Debug, Clone)]
pub struct BranchLeg {
    pub alice_index: usize,
    pub amplitude: f64,
    pub mu: CVec,
    pub nu: CVec,
}

/// A branch draining a positive and a negative component against each other.
/// The mixing angle makes the branch-conditional states exactly orthogonal:
/// `pos_amp^2 rho_pos + neg_amp^2 rho_neg = 0`.
#[derive(Debug, Clone)]
pub struct OrthogonalBranch {
    /// Mixing angle; the fully drained side keeps `cos(alpha)` of the other.
    pub alpha: f64,
    /// True when the negative pool outweighed the positive one and the
    /// roles in the angle formula were exchanged.
    pub exchanged: bool,
    /// Branch weight, equal under both hypotheses.
    pub weight: f64,
    pub pos: BranchLeg,
    pub neg: BranchLeg,
}

/// Terms not yet drained plus the orthogonal branches already split off.
/// Two quantities are conserved by every pairing step: the total weight
/// (live terms plus branches) and the live weighted overlap sum.
#[derive(Debug, Clone, Default)]
pub struct TermLedger {
    pub terms: Vec<Term>,
    pub branches: Vec<OrthogonalBranch>,
}

impl TermLedger {
    /// Live components of an aligned form; entries with negligible weight
    /// are dropped here and routed to a shared inconclusive readout block
    /// when the node is materialized.
    pub fn from_form(form: &CanonicalForm) -> Self {
        let mut terms = Vec::new();
        for i in 0..form.t.len() {
            if form.t[i] <= tol::PRUNE {
                continue;
            }
            let (mu, nu) = match (&form.mu[i], &form.nu[i]) {
                (Some(mu), Some(nu)) => (mu.clone(), nu.clone()),
                _ => continue,
            };
            terms.push(Term {
                alice_index: i,
                weight: form.t[i],
                mu,
                nu,
                rho: form.rho[i],
            });
        }
        TermLedger {
            terms,
            branches: Vec::new(),
        }
    }

    pub fn live_weight(&self) -> f64 {
        self.terms.iter().map(|t| t.weight).sum()
    }

    pub fn branch_weight(&self) -> f64 {
        self.branches.iter().map(|b| b.weight).sum()
    }

    pub fn live_contribution(&self) -> f64 {
        self.terms.iter().map(Term::contribution).sum()
    }
}

/// Drain the negative term at index `neg` against the positive term at
/// index `pos`. The smaller pool is consumed whole; the larger keeps a
/// same-sign residual of weight `w sin^2(alpha)`. Consumed terms leave the
/// ledger; the new branch is appended to it and also returned.
pub fn pair_terms(
    mut ledger: TermLedger,
    pos: usize,
    neg: usize,
) -> Result<(TermLedger, OrthogonalBranch)> {
    let count = ledger.terms.len();
    if pos >= count || neg >= count || pos == neg {
        return Err(Error::SignPrecondition { pos, neg });
    }
    if ledger.terms[pos].sign() != 1 || ledger.terms[neg].sign() != -1 {
        return Err(Error::SignPrecondition { pos, neg });
    }
    let p = ledger.terms[pos].contribution();
    let n = -ledger.terms[neg].contribution();
    let (tp, tn) = (ledger.terms[pos].weight, ledger.terms[neg].weight);
    let exchanged = p < n;
    // cos^2(alpha) scales the larger pool down to exactly cancel the smaller.
    let alpha = if exchanged {
        (p / n).sqrt().acos()
    } else {
        (n / p).sqrt().acos()
    };
    let (pos_amp, neg_amp) = if exchanged {
        (tp.sqrt(), tn.sqrt() * alpha.cos())
    } else {
        (tp.sqrt() * alpha.cos(), tn.sqrt())
    };
    let branch = OrthogonalBranch {
        alpha,
        exchanged,
        weight: pos_amp * pos_amp + neg_amp * neg_amp,
        pos: BranchLeg {
            alice_index: ledger.terms[pos].alice_index,
            amplitude: pos_amp,
            mu: ledger.terms[pos].mu.clone(),
            nu: ledger.terms[pos].nu.clone(),
        },
        neg: BranchLeg {
            alice_index: ledger.terms[neg].alice_index,
            amplitude: neg_amp,
            mu: ledger.terms[neg].mu.clone(),
            nu: ledger.terms[neg].nu.clone(),
        },
    };
    let sin_sq = alpha.sin() * alpha.sin();
    let (consumed, kept, kept_weight) = if exchanged {
        (pos, neg, tn * sin_sq)
    } else {
        (neg, pos, tp * sin_sq)
    };
    if kept_weight > tol::PRUNE {
        ledger.terms[kept].weight = kept_weight;
    } else {
        // Both pools cancelled exactly; drop the kept term as well.
        let drop_later = kept;
        ledger.terms.remove(consumed.max(drop_later));
        ledger.terms.remove(consumed.min(drop_later));
        ledger.branches.push(branch.clone());
        return Ok((ledger, branch));
    }
    ledger.terms.remove(consumed);
    ledger.branches.push(branch.clone());
    Ok((ledger, branch))
}

/// All orthogonal branches plus the same-sign residual terms left over.
#[derive(Debug, Clone)]
pub struct BranchPlan {
    pub branches: Vec<OrthogonalBranch>,
    pub residual: Vec<Term>,
}

/// Drain every negative component of an aligned form: repeatedly pair the
/// largest-magnitude negative against the largest positive. Because the
/// weighted overlap sum is positive, negatives run out after at most
/// `n - 1` pairings, leaving only nonnegative residuals.
pub fn resolve_signs(form: &CanonicalForm) -> Result<BranchPlan> {
    let mut ledger = TermLedger::from_form(form);
    let total = ledger.live_contribution();
    if total <= 1e-12 {
        return Err(Error::NoPositiveOverlap(total));
    }
    loop {
        let neg = ledger
            .terms
            .iter()
            .enumerate()
            .filter(|(_, t)| t.sign() == -1)
            .max_by(|(_, a), (_, b)| a.contribution().abs().total_cmp(&b.contribution().abs()))
            .map(|(k, _)| k);
        let Some(neg) = neg else { break };
        let pos = ledger
            .terms
            .iter()
            .enumerate()
            .filter(|(_, t)| t.sign() == 1)
            .max_by(|(_, a), (_, b)| a.contribution().total_cmp(&b.contribution()))
            .map(|(k, _)| k)
            .ok_or(Error::NoPositiveOverlap(total))?;
        let (next, _) = pair_terms(ledger, pos, neg)?;
        ledger = next;
    }
    Ok(BranchPlan {
        branches: ledger.branches,
        residual: ledger.terms,
    })
}

// ---------------------------------------------------------------------------
// Protocol trees.

/// Isometry attached to a measured party, enlarging dimension `d` to
/// `ancilla_dim * d`; readout block `k` spans rows `k*d .. (k+1)*d`.
#[derive(Debug, Clone, PartialEq)]
pub struct AncillaIsometry {
    pub matrix: CMat,
    pub ancilla_dim: usize,
}

/// Interior node: measure `party`, optionally after attaching an ancilla.
/// `operators` holds one Kraus operator per branch, sorted by label and
/// aligned with the `branches` map.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureNode {
    pub party: usize,
    pub isometry: Option<AncillaIsometry>,
    pub operators: Vec<(String, CMat)>,
    pub branches: BTreeMap<String, Node>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Measure(MeasureNode),
    Leaf(Verdict),
}

/// A complete measurement protocol for one state pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolTree {
    pub root: Node,
}

/// Zero-padded labels so lexicographic order equals numeric order.
fn branch_labels(prefix: &str, count: usize) -> Vec<String> {
    let width = (count.max(1) - 1).to_string().len();
    (0..count).map(|k| format!("{prefix}{k:0width$}")).collect()
}

fn shift_parties(node: &mut Node, delta: usize) {
    if let Node::Measure(m) = node {
        m.party += delta;
        for child in m.branches.values_mut() {
            shift_parties(child, delta);
        }
    }
}

/// Working pair on a suffix of the parties, stored as flat normalized
/// amplitude vectors.
struct SubPair {
    dims: Vec<usize>,
    phi: CVec,
    psi: CVec,
}

impl SubPair {
    fn comp_dim(&self, party: usize) -> usize {
        let (left, _, right) = statespace::split_dims(&self.dims, party);
        left * right
    }
}

fn row_slices(amps: &CVec, dims: &[usize]) -> Vec<CVec> {
    let rows = statespace::rows_for_party(amps, dims, 0);
    (0..rows.nrows()).map(|i| rows.row(i).transpose()).collect()
}

/// Perfect-discrimination subtree for an orthogonal pair. The input is
/// orthogonalized exactly first, so conditional overlaps stay at rounding
/// level at every depth.
fn orthogonal_node(sub: &SubPair) -> Result<Node> {
    let mut psi = sub.psi.clone();
    let ip = sub.phi.dotc(&psi);
    psi -= &sub.phi * ip;
    let norm = psi.norm();
    if norm < 0.5 {
        // The pair was far from orthogonal; the caller's gate prevents this
        // except on a one-dimensional space, which cannot host it at all.
        return Err(Error::Validation(
            "orthogonal subtree requested for a non-orthogonal pair".into(),
        ));
    }
    let psi = psi.unscale(norm);

    if sub.dims.len() == 1 {
        // Last party: project onto the second state's direction versus its
        // complement. The complement projector keeps every leftover
        // dimension with the first state's verdict, so both outcomes are
        // conclusive and the second state can never trip the first's.
        let k_psi = &psi * psi.adjoint();
        let k_phi = CMat::identity(sub.dims[0], sub.dims[0]) - &k_psi;
        let mut branches = BTreeMap::new();
        branches.insert("phi".to_string(), Node::Leaf(Verdict::IdentifyPhi));
        branches.insert("psi".to_string(), Node::Leaf(Verdict::IdentifyPsi));
        return Ok(Node::Measure(MeasureNode {
            party: 0,
            isometry: None,
            operators: vec![("phi".into(), k_phi), ("psi".into(), k_psi)],
            branches,
        }));
    }

    // Rotate the first party so every diagonal overlap equals the (zero)
    // trace divided by the dimension: each readout value then leaves the
    // remaining parties in a still-orthogonal conditional pair.
    let d = sub.dims[0];
    let f0 = row_slices(&sub.phi, &sub.dims);
    let g0 = row_slices(&psi, &sub.dims);
    let mut cmat = CMat::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            cmat[(i, j)] = f0[j].dotc(&g0[i]);
        }
    }
    let w = canonical::constant_diagonal_unitary(&cmat)?;
    let comp = sub.comp_dim(0);
    let mix = |rows: &[CVec]| -> Vec<CVec> {
        (0..d)
            .map(|i| (0..d).fold(CVec::zeros(comp), |acc, j| acc + &rows[j] * w[(i, j)]))
            .collect()
    };
    let f = mix(&f0);
    let g = mix(&g0);

    let labels = branch_labels("b", d);
    let mut operators = Vec::with_capacity(d);
    let mut branches = BTreeMap::new();
    let rest: Vec<usize> = sub.dims[1..].to_vec();
    for k in 0..d {
        let mut op = CMat::zeros(1, d);
        for j in 0..d {
            op[(0, j)] = w[(k, j)];
        }
        operators.push((labels[k].clone(), op));
        let r = linalg::norm_sq(&f[k]);
        let s = linalg::norm_sq(&g[k]);
        let child = if s <= tol::PRUNE {
            // Only the first state can reach this branch (or neither).
            Node::Leaf(Verdict::IdentifyPhi)
        } else if r <= tol::PRUNE {
            Node::Leaf(Verdict::IdentifyPsi)
        } else {
            let child_sub = SubPair {
                dims: rest.clone(),
                phi: f[k].unscale(r.sqrt()),
                psi: g[k].unscale(s.sqrt()),
            };
            let mut node = orthogonal_node(&child_sub)?;
            shift_parties(&mut node, 1);
            node
        };
        branches.insert(labels[k].clone(), child);
    }
    Ok(Node::Measure(MeasureNode {
        party: 0,
        isometry: None,
        operators,
        branches,
    }))
}

/// Compile a protocol that names an orthogonal pair perfectly: conclusive
/// probability 1 under both hypotheses, no inconclusive outcomes.
pub fn compile_orthogonal(phi: &PureState, psi: &PureState) -> Result<ProtocolTree> {
    if phi.space() != psi.space() {
        return Err(Error::SpaceMismatch(format!(
            "{} vs {}",
            phi.space(),
            psi.space()
        )));
    }
    let ip = statespace::inner_product(phi, psi)?;
    if ip.norm() > tol::ORTHOGONAL_GATE {
        return Err(Error::NotOrthogonalInput(ip.norm()));
    }
    let sub = SubPair {
        dims: phi.space().dims().to_vec(),
        phi: phi.amplitudes().clone(),
        psi: psi.amplitudes().clone(),
    };
    Ok(ProtocolTree {
        root: orthogonal_node(&sub)?,
    })
}

/// Single-party node applying the optimal conclusive measurement.
fn readout_node(mu: &CVec, nu: &CVec) -> Result<Node> {
    let povm = idp_povm(mu, nu)?;
    let mut operators = Vec::with_capacity(3);
    let mut branches = BTreeMap::new();
    for (label, element) in &povm.elements {
        operators.push((label.clone(), linalg::psd_sqrt(element)));
        branches.insert(label.clone(), Node::Leaf(Verdict::parse(label)?));
    }
    Ok(Node::Measure(MeasureNode {
        party: 0,
        isometry: None,
        operators,
        branches,
    }))
}

/// Selector Kraus operators for an ancilla readout: block `k` of the
/// enlarged party collapses back to the original dimension.
fn block_selectors(d: usize, blocks: usize) -> Vec<CMat> {
    (0..blocks)
        .map(|k| {
            let mut s = CMat::zeros(d, blocks * d);
            for a in 0..d {
                s[(a, k * d + a)] = ONE;
            }
            s
        })
        .collect()
}

fn compile_sub(sub: &SubPair) -> Result<Node> {
    let ip = sub.phi.dotc(&sub.psi);
    if ip.norm() <= tol::ORTHOGONAL_GATE {
        return orthogonal_node(sub);
    }
    if 1.0 - ip.norm() < tol::DEGENERATE {
        // Identical states: nothing distinguishes them, ever.
        return Ok(Node::Leaf(Verdict::Inconclusive));
    }
    let space = PartySpace::new(sub.dims.clone())?;
    let phi = PureState::new(space.clone(), sub.phi.clone())?;
    let psi = PureState::new(space, sub.psi.clone())?;
    if sub.dims.len() == 1 {
        return readout_node(phi.amplitudes(), psi.amplitudes());
    }

    let form = canonical::canonicalize(&phi, &psi, 0)?;
    let plan = resolve_signs(&form)?;
    let d = sub.dims[0];
    let rest: Vec<usize> = sub.dims[1..].to_vec();
    let comp: usize = rest.iter().product();

    // Basis directions no branch touches (negligible weight in both states)
    // share one readout block that declares the run inconclusive.
    let mut live = vec![false; d];
    for br in &plan.branches {
        live[br.pos.alice_index] = true;
        live[br.neg.alice_index] = true;
    }
    for t in &plan.residual {
        live[t.alice_index] = true;
    }
    let dead: Vec<usize> = (0..d).filter(|&i| !live[i]).collect();
    let blocks = plan.branches.len() + plan.residual.len() + usize::from(!dead.is_empty());
    let labels = branch_labels("s", blocks);

    let rotated_phi = statespace::apply_kraus_raw(&form.alice_unitary, 0, &sub.dims, &sub.phi);
    let rotated_psi = statespace::apply_kraus_raw(&form.alice_unitary, 0, &sub.dims, &sub.psi);
    let rot_f = row_slices(&rotated_phi, &sub.dims);
    let rot_g = row_slices(&rotated_psi, &sub.dims);

    let mut v = CMat::zeros(blocks * d, d);
    let mut planned_phi = CVec::zeros(blocks * d * comp);
    let mut planned_psi = CVec::zeros(blocks * d * comp);
    let mut children: BTreeMap<String, Node> = BTreeMap::new();
    let place = |target: &mut CVec, block: usize, alice: usize, amp: f64, vec: &CVec| {
        for (cx, &z) in vec.iter().enumerate() {
            target[(block * d + alice) * comp + cx] += cr(amp) * z;
        }
    };

    for (b, br) in plan.branches.iter().enumerate() {
        v[(b * d + br.pos.alice_index, br.pos.alice_index)] += cr(br.pos.amplitude);
        v[(b * d + br.neg.alice_index, br.neg.alice_index)] += cr(br.neg.amplitude);
        let mut phi_b = CVec::zeros(d * comp);
        let mut psi_b = CVec::zeros(d * comp);
        let fill = |target: &mut CVec, alice: usize, amp: f64, vec: &CVec| {
            for (cx, &z) in vec.iter().enumerate() {
                target[alice * comp + cx] += cr(amp) * z;
            }
        };
        fill(&mut phi_b, br.pos.alice_index, br.pos.amplitude, &br.pos.mu);
        fill(&mut phi_b, br.neg.alice_index, br.neg.amplitude, &br.neg.mu);
        fill(&mut psi_b, br.pos.alice_index, br.pos.amplitude, &br.pos.nu);
        fill(&mut psi_b, br.neg.alice_index, br.neg.amplitude, &br.neg.nu);
        place(
            &mut planned_phi,
            b,
            br.pos.alice_index,
            br.pos.amplitude,
            &br.pos.mu,
        );
        place(
            &mut planned_phi,
            b,
            br.neg.alice_index,
            br.neg.amplitude,
            &br.neg.mu,
        );
        place(
            &mut planned_psi,
            b,
            br.pos.alice_index,
            br.pos.amplitude,
            &br.pos.nu,
        );
        place(
            &mut planned_psi,
            b,
            br.neg.alice_index,
            br.neg.amplitude,
            &br.neg.nu,
        );
        let mut dims_b = vec![d];
        dims_b.extend_from_slice(&rest);
        let child_sub = SubPair {
            dims: dims_b,
            phi: phi_b.unscale(phi_b.norm()),
            psi: psi_b.unscale(psi_b.norm()),
        };
        // The measured party stays in play as a spectator: the conditional
        // pair is supported on two of its basis directions and orthogonal
        // by the choice of mixing angle.
        children.insert(labels[b].clone(), orthogonal_node(&child_sub)?);
    }

    for (k0, term) in plan.residual.iter().enumerate() {
        let k = plan.branches.len() + k0;
        v[(k * d + term.alice_index, term.alice_index)] += cr(term.weight.sqrt());
        place(
            &mut planned_phi,
            k,
            term.alice_index,
            term.weight.sqrt(),
            &term.mu,
        );
        place(
            &mut planned_psi,
            k,
            term.alice_index,
            term.weight.sqrt(),
            &term.nu,
        );
        let overlap = term.mu.dotc(&term.nu).norm();
        let child = if 1.0 - overlap < tol::DEGENERATE {
            Node::Leaf(Verdict::Inconclusive)
        } else {
            let child_sub = SubPair {
                dims: rest.clone(),
                phi: term.mu.clone(),
                psi: term.nu.clone(),
            };
            let mut node = compile_sub(&child_sub)?;
            shift_parties(&mut node, 1);
            node
        };
        children.insert(labels[k].clone(), child);
    }

    if !dead.is_empty() {
        let k = blocks - 1;
        for &i in &dead {
            v[(k * d + i, i)] = ONE;
            // Whatever negligible amplitude sits here is routed verbatim.
            for (cx, &z) in rot_f[i].iter().enumerate() {
                planned_phi[(k * d + i) * comp + cx] = z;
            }
            for (cx, &z) in rot_g[i].iter().enumerate() {
                planned_psi[(k * d + i) * comp + cx] = z;
            }
        }
        children.insert(labels[k].clone(), Node::Leaf(Verdict::Inconclusive));
    }

    // Each column gathers all amplitude drained from one basis direction;
    // columns touch disjoint rows, so normalizing them yields an isometry.
    for col in 0..d {
        let norm = v.column(col).norm();
        if norm > 0.0 {
            for row in 0..blocks * d {
                v[(row, col)] = v[(row, col)].unscale(norm);
            }
        }
    }
    let v_full = &v * &form.alice_unitary;

    // Postcondition: the enlarged states split into exactly the planned
    // block components.
    let got_phi = statespace::apply_kraus_raw(&v_full, 0, &sub.dims, &sub.phi);
    let got_psi = statespace::apply_kraus_raw(&v_full, 0, &sub.dims, &sub.psi);
    let err_phi = (&got_phi - &planned_phi).norm();
    let err_psi = (&got_psi - &planned_psi).norm();
    if err_phi > 1e-9 || err_psi > 1e-9 {
        return Err(Error::Validation(format!(
            "ancilla split misses its plan: residuals {err_phi:.3e}, {err_psi:.3e}"
        )));
    }

    let operators = labels
        .iter()
        .cloned()
        .zip(block_selectors(d, blocks))
        .collect();
    Ok(Node::Measure(MeasureNode {
        party: 0,
        isometry: Some(AncillaIsometry {
            matrix: v_full,
            ancilla_dim: blocks,
        }),
        operators,
        branches: children,
    }))
}

/// Compile the optimal conclusive protocol for a state pair. Orthogonal
/// pairs get a perfect subtree; identical pairs a single inconclusive leaf;
/// anything else an ancilla readout that splits the pair into orthogonal
/// branches plus a smaller residual pair handled recursively.
pub fn compile(phi: &PureState, psi: &PureState) -> Result<ProtocolTree> {
    if phi.space() != psi.space() {
        return Err(Error::SpaceMismatch(format!(
            "{} vs {}",
            phi.space(),
            psi.space()
        )));
    }
    let sub = SubPair {
        dims: phi.space().dims().to_vec(),
        phi: phi.amplitudes().clone(),
        psi: psi.amplitudes().clone(),
    };
    let tree = ProtocolTree {
        root: compile_sub(&sub)?,
    };
    let report = validate_protocol(&tree);
    if let Some(problem) = report.first_failure() {
        return Err(Error::Validation(problem));
    }
    Ok(tree)
}

// ---------------------------------------------------------------------------
// Structural validation.

/// Residuals and structural findings for one interior node.
#[derive(Debug, Clone)]
pub struct NodeCheck {
    /// Branch labels from the root, joined with `/`; empty for the root.
    pub path: String,
    pub party: usize,
    /// Largest entry of `sum_k K_k^dag K_k - I`.
    pub completeness_residual: f64,
    /// Largest entry of `V^dag V - I` when an isometry is attached.
    pub isometry_residual: Option<f64>,
    /// Smallest eigenvalue among the induced elements `K_k^dag K_k`.
    pub min_element_eigenvalue: f64,
    /// Shape or labeling defects; empty when the node is well-formed.
    pub structural: Vec<String>,
}

impl NodeCheck {
    pub fn pass(&self) -> bool {
        self.structural.is_empty()
            && self.completeness_residual <= tol::COMPLETENESS
            && self.isometry_residual.unwrap_or(0.0) <= tol::ISOMETRY
            && self.min_element_eigenvalue >= -tol::COMPLETENESS
    }
}

/// Validation results for every interior node of a tree.
#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub nodes: Vec<NodeCheck>,
}

impl ValidationReport {
    pub fn pass(&self) -> bool {
        self.nodes.iter().all(NodeCheck::pass)
    }

    pub fn first_failure(&self) -> Option<String> {
        self.nodes.iter().find(|n| !n.pass()).map(|n| {
            let at = if n.path.is_empty() { "<root>" } else { &n.path };
            if let Some(defect) = n.structural.first() {
                return format!("node {at}: {defect}");
            }
            format!(
                "node {at}: completeness {:.3e}, isometry {:.3e}, min eigenvalue {:.3e}",
                n.completeness_residual,
                n.isometry_residual.unwrap_or(0.0),
                n.min_element_eigenvalue
            )
        })
    }
}

fn validate_node(node: &Node, path: String, out: &mut Vec<NodeCheck>) {
    let m = match node {
        Node::Leaf(_) => return,
        Node::Measure(m) => m,
    };
    let mut check = NodeCheck {
        path: path.clone(),
        party: m.party,
        completeness_residual: 0.0,
        isometry_residual: None,
        min_element_eigenvalue: f64::INFINITY,
        structural: Vec::new(),
    };
    if m.operators.is_empty() {
        check.structural.push("no measurement operators".into());
    }
    let op_labels: Vec<&String> = m.operators.iter().map(|(l, _)| l).collect();
    let branch_labels: Vec<&String> = m.branches.keys().collect();
    if op_labels != branch_labels {
        check
            .structural
            .push("operator labels do not match branch labels".into());
    }
    let in_dim = m.operators.first().map_or(0, |(_, k)| k.ncols());
    if m.operators.iter().any(|(_, k)| k.ncols() != in_dim) {
        check
            .structural
            .push("operators act on differing input dimensions".into());
    }
    if let Some(iso) = &m.isometry {
        if iso.ancilla_dim == 0 {
            check.structural.push("ancilla dimension is zero".into());
        } else if iso.matrix.nrows() != iso.ancilla_dim * iso.matrix.ncols() {
            check.structural.push(format!(
                "isometry of shape {}x{} is not {} blocks over its input",
                iso.matrix.nrows(),
                iso.matrix.ncols(),
                iso.ancilla_dim
            ));
        }
        if iso.matrix.nrows() != in_dim {
            check.structural.push(format!(
                "operators read dimension {in_dim} but the isometry emits {}",
                iso.matrix.nrows()
            ));
        }
        check.isometry_residual = Some(linalg::isometry_residual(&iso.matrix));
    }
    if check.structural.is_empty() {
        let mut sum = CMat::zeros(in_dim, in_dim);
        for (_, k) in &m.operators {
            let element = k.adjoint() * k;
            check.min_element_eigenvalue = check
                .min_element_eigenvalue
                .min(linalg::min_eigenvalue(&element));
            sum += element;
        }
        check.completeness_residual = linalg::identity_residual(&sum);
    }
    out.push(check);
    for (label, child) in &m.branches {
        let child_path = if path.is_empty() {
            label.clone()
        } else {
            format!("{path}/{label}")
        };
        validate_node(child, child_path, out);
    }
}

/// Check every interior node: labels aligned, shapes consistent, operators
/// complete and positive, isometries norm-preserving.
pub fn validate_protocol(tree: &ProtocolTree) -> ValidationReport {
    let mut nodes = Vec::new();
    validate_node(&tree.root, String::new(), &mut nodes);
    ValidationReport { nodes }
}

// ---------------------------------------------------------------------------
// Protocol file format.

fn node_to_value(node: &Node) -> Value {
    match node {
        Node::Leaf(v) => json!({
            "kind": "verdict",
            "verdict": v.as_str(),
        }),
        Node::Measure(m) => {
            let mut map = Map::new();
            map.insert("kind".into(), Value::String("measure".into()));
            map.insert("party".into(), json!(m.party));
            if let Some(iso) = &m.isometry {
                map.insert("ancilla_dim".into(), json!(iso.ancilla_dim));
                map.insert("isometry".into(), statespace::mat_to_value(&iso.matrix));
            }
            map.insert(
                "operators".into(),
                Value::Array(
                    m.operators
                        .iter()
                        .map(|(_, k)| statespace::mat_to_value(k))
                        .collect(),
                ),
            );
            map.insert(
                "branches".into(),
                Value::Object(
                    m.branches
                        .iter()
                        .map(|(label, child)| (label.clone(), node_to_value(child)))
                        .collect(),
                ),
            );
            Value::Object(map)
        }
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::MalformedProtocol(msg.into())
}

fn mat_from_value(value: &Value, what: &str) -> Result<CMat> {
    let rows = value
        .as_array()
        .ok_or_else(|| bad(format!("{what}: expected an array of rows")))?;
    if rows.is_empty() {
        return Err(bad(format!("{what}: empty matrix")));
    }
    let mut data: Vec<Complex64> = Vec::new();
    let mut width = None;
    for (i, row) in rows.iter().enumerate() {
        let row = row
            .as_array()
            .ok_or_else(|| bad(format!("{what}[{i}]: expected a row array")))?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(bad(format!("{what}: ragged rows ({w} vs {})", row.len())))
            }
            _ => {}
        }
        for (j, entry) in row.iter().enumerate() {
            data.push(
                statespace::complex_from_value(entry, &format!("{what}[{i}][{j}]"))
                    .map_err(|e| bad(e.to_string()))?,
            );
        }
    }
    let width = width.unwrap_or(0);
    if width == 0 {
        return Err(bad(format!("{what}: empty rows")));
    }
    Ok(CMat::from_row_slice(rows.len(), width, &data))
}

fn node_from_value(value: &Value, path: &str) -> Result<Node> {
    let obj = value
        .as_object()
        .ok_or_else(|| bad(format!("node {path}: expected an object")))?;
    let kind = obj
        .get("kind")
        .and_then(Value::as_str)
        .ok_or_else(|| bad(format!("node {path}: missing \"kind\"")))?;
    match kind {
        "verdict" => {
            let verdict = obj
                .get("verdict")
                .and_then(Value::as_str)
                .ok_or_else(|| bad(format!("node {path}: missing \"verdict\"")))?;
            Ok(Node::Leaf(Verdict::parse(verdict)?))
        }
        "measure" => {
            let party = obj
                .get("party")
                .and_then(Value::as_u64)
                .ok_or_else(|| bad(format!("node {path}: missing \"party\"")))?
                as usize;
            let isometry = match (obj.get("isometry"), obj.get("ancilla_dim")) {
                (None, None) => None,
                (Some(mat), Some(dim)) => {
                    let ancilla_dim = dim.as_u64().ok_or_else(|| {
                        bad(format!("node {path}: \"ancilla_dim\" must be an integer"))
                    })? as usize;
                    Some(AncillaIsometry {
                        matrix: mat_from_value(mat, &format!("node {path} isometry"))?,
                        ancilla_dim,
                    })
                }
                _ => {
                    return Err(bad(format!(
                        "node {path}: \"isometry\" and \"ancilla_dim\" must come together"
                    )))
                }
            };
            let branches_val = obj
                .get("branches")
                .and_then(Value::as_object)
                .ok_or_else(|| bad(format!("node {path}: missing \"branches\"")))?;
            let operators_val = obj
                .get("operators")
                .and_then(Value::as_array)
                .ok_or_else(|| bad(format!("node {path}: missing \"operators\"")))?;
            if branches_val.len() != operators_val.len() {
                return Err(bad(format!(
                    "node {path}: {} operators for {} branches",
                    operators_val.len(),
                    branches_val.len()
                )));
            }
            if branches_val.is_empty() {
                return Err(bad(format!("node {path}: no branches")));
            }
            // serde_json object iteration is sorted by key, matching the
            // operator array order contract.
            let mut operators = Vec::with_capacity(operators_val.len());
            let mut branches = BTreeMap::new();
            for ((label, child_val), op_val) in branches_val.iter().zip(operators_val) {
                let child_path = if path.is_empty() {
                    label.clone()
                } else {
                    format!("{path}/{label}")
                };
                operators.push((
                    label.clone(),
                    mat_from_value(op_val, &format!("node {child_path} operator"))?,
                ));
                branches.insert(label.clone(), node_from_value(child_val, &child_path)?);
            }
            Ok(Node::Measure(MeasureNode {
                party,
                isometry,
                operators,
                branches,
            }))
        }
        other => Err(bad(format!("node {path}: unknown kind {other:?}"))),
    }
}

/// Serialize a protocol tree (sorted keys, nested `[re, im]` entries).
pub fn tree_to_json(tree: &ProtocolTree) -> Value {
    node_to_value(&tree.root)
}

/// Parse a protocol tree from its JSON form.
pub fn tree_from_json(value: &Value) -> Result<ProtocolTree> {
    Ok(ProtocolTree {
        root: node_from_value(value, "")?,
    })
}

pub fn write_protocol_file(path: &Path, tree: &ProtocolTree) -> Result<()> {
    let value = tree_to_json(tree);
    std::fs::write(path, statespace::render_json(&value))?;
    Ok(())
}

pub fn read_protocol_file(path: &Path) -> Result<ProtocolTree> {
    let text = std::fs::read_to_string(path)?;
    let value: Value = serde_json::from_str(&text)?;
    tree_from_json(&value)
}
