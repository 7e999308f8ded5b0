//! Exact evaluation of a protocol against a state pair, the optimality
//! check, and seeded sampling of individual protocol runs.

use crate::error::{Error, Result};
use crate::linalg::{tol, CVec};
use crate::protocols::{Node, ProtocolTree, Verdict};
use crate::statespace::{self, PureState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

/// Reach probability of one branch under each hypothesis. `path` joins the
/// branch labels from the root with `/`; root-level branches contain none.
#[derive(Debug, Clone)]
pub struct BranchRow {
    pub path: String,
    pub p_phi: f64,
    pub p_psi: f64,
}

/// Exact outcome probabilities of a protocol run on a state pair.
#[derive(Debug, Clone)]
pub struct EvaluationReport {
    /// Best achievable average conclusive probability, `1 - |<phi|psi>|`.
    pub bound: f64,
    pub conclusive_phi: f64,
    pub conclusive_psi: f64,
    /// Probability of naming the wrong state; zero for a sound protocol.
    pub error_phi: f64,
    pub error_psi: f64,
    pub inconclusive_phi: f64,
    pub inconclusive_psi: f64,
    /// Distance of the average conclusive probability from the bound.
    pub optimality_residual: f64,
    pub branches: Vec<BranchRow>,
}

impl EvaluationReport {
    pub fn mean_conclusive(&self) -> f64 {
        (self.conclusive_phi + self.conclusive_psi) / 2.0
    }

    pub fn max_error(&self) -> f64 {
        self.error_phi.max(self.error_psi)
    }

    /// Rows of branches taken directly at the root.
    pub fn root_branches(&self) -> Vec<&BranchRow> {
        self.branches
            .iter()
            .filter(|row| !row.path.contains('/'))
            .collect()
    }
}

struct EvalState {
    branches: Vec<BranchRow>,
    totals: [[f64; 3]; 2], // [hypothesis][verdict bucket]
}

fn bucket(verdict: Verdict) -> usize {
    match verdict {
        Verdict::IdentifyPhi => 0,
        Verdict::IdentifyPsi => 1,
        Verdict::Inconclusive => 2,
    }
}

fn eval_node(
    node: &Node,
    dims: &[usize],
    phi: Option<&CVec>,
    psi: Option<&CVec>,
    path: &str,
    out: &mut EvalState,
) -> Result<()> {
    let m = match node {
        Node::Leaf(v) => {
            if let Some(phi) = phi {
                out.totals[0][bucket(*v)] += phi.norm_squared();
            }
            if let Some(psi) = psi {
                out.totals[1][bucket(*v)] += psi.norm_squared();
            }
            return Ok(());
        }
        Node::Measure(m) => m,
    };
    if m.party >= dims.len() {
        return Err(Error::SpaceMismatch(format!(
            "node at {path:?} measures party {} of a {}-party state",
            m.party,
            dims.len()
        )));
    }
    let mut dims = dims.to_vec();
    let (mut phi, mut psi) = (phi.cloned(), psi.cloned());
    if let Some(iso) = &m.isometry {
        if iso.matrix.ncols() != dims[m.party] {
            return Err(Error::SpaceMismatch(format!(
                "isometry at {path:?} expects dimension {}, state has {}",
                iso.matrix.ncols(),
                dims[m.party]
            )));
        }
        phi = phi.map(|v| statespace::apply_kraus_raw(&iso.matrix, m.party, &dims, &v));
        psi = psi.map(|v| statespace::apply_kraus_raw(&iso.matrix, m.party, &dims, &v));
        dims[m.party] = iso.matrix.nrows();
    }
    for ((op_label, op), (label, child)) in m.operators.iter().zip(&m.branches) {
        if op_label != label {
            return Err(Error::MalformedProtocol(format!(
                "node at {path:?}: operator {op_label:?} out of step with branch {label:?}"
            )));
        }
        if op.ncols() != dims[m.party] {
            return Err(Error::SpaceMismatch(format!(
                "operator {label:?} at {path:?} expects dimension {}, state has {}",
                op.ncols(),
                dims[m.party]
            )));
        }
        let next_phi = phi
            .as_ref()
            .map(|v| statespace::apply_kraus_raw(op, m.party, &dims, v));
        let next_psi = psi
            .as_ref()
            .map(|v| statespace::apply_kraus_raw(op, m.party, &dims, v));
        let p_phi = next_phi.as_ref().map_or(0.0, |v| v.norm_squared());
        let p_psi = next_psi.as_ref().map_or(0.0, |v| v.norm_squared());
        let child_path = if path.is_empty() {
            label.clone()
        } else {
            format!("{path}/{label}")
        };
        out.branches.push(BranchRow {
            path: child_path.clone(),
            p_phi,
            p_psi,
        });
        let keep_phi = (p_phi >= tol::PRUNE).then_some(()).and(next_phi);
        let keep_psi = (p_psi >= tol::PRUNE).then_some(()).and(next_psi);
        if keep_phi.is_none() && keep_psi.is_none() {
            continue;
        }
        let mut child_dims = dims.clone();
        child_dims[m.party] = op.nrows();
        eval_node(
            child,
            &child_dims,
            keep_phi.as_ref(),
            keep_psi.as_ref(),
            &child_path,
            out,
        )?;
    }
    Ok(())
}

/// Propagate both hypotheses through every branch of the tree and collect
/// exact outcome probabilities. Paths whose reach probability falls below
/// the pruning floor under both hypotheses are cut off.
pub fn evaluate_exact(
    tree: &ProtocolTree,
    phi: &PureState,
    psi: &PureState,
) -> Result<EvaluationReport> {
    if phi.space() != psi.space() {
        return Err(Error::SpaceMismatch(format!(
            "{} vs {}",
            phi.space(),
            psi.space()
        )));
    }
    let overlap = statespace::inner_product(phi, psi)?.norm();
    let bound = 1.0 - overlap;
    let mut state = EvalState {
        branches: Vec::new(),
        totals: [[0.0; 3]; 2],
    };
    eval_node(
        &tree.root,
        phi.space().dims(),
        Some(phi.amplitudes()),
        Some(psi.amplitudes()),
        "",
        &mut state,
    )?;
    let conclusive_phi = state.totals[0][0];
    let conclusive_psi = state.totals[1][1];
    let report = EvaluationReport {
        bound,
        conclusive_phi,
        conclusive_psi,
        error_phi: state.totals[0][1],
        error_psi: state.totals[1][0],
        inconclusive_phi: state.totals[0][2],
        inconclusive_psi: state.totals[1][2],
        optimality_residual: ((conclusive_phi + conclusive_psi) / 2.0 - bound).abs(),
        branches: state.branches,
    };
    Ok(report)
}

/// Outcome of the optimality gate.
#[derive(Debug, Clone, Copy)]
pub struct OptimalityCheck {
    pub pass: bool,
    pub optimality_residual: f64,
    pub max_error: f64,
    pub tolerance: f64,
}

/// A protocol passes when its average conclusive probability sits within
/// `tolerance` of the bound and no misidentification exceeds a tenth of it.
pub fn check_optimality(report: &EvaluationReport, tolerance: f64) -> OptimalityCheck {
    let max_error = report.max_error();
    OptimalityCheck {
        pass: report.optimality_residual <= tolerance && max_error <= tolerance / 10.0,
        optimality_residual: report.optimality_residual,
        max_error,
        tolerance,
    }
}

/// Tallies from sampled protocol runs. The four counters sum to `shots`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShotCounts {
    pub shots: u64,
    pub seed: u64,
    pub identify_phi: u64,
    pub identify_psi: u64,
    pub inconclusive: u64,
    /// Runs that sampled a branch of vanishing probability, which indicates
    /// numerical trouble; always 0 on healthy trees.
    pub aborted: u64,
}

/// Sample `shots` independent runs of the protocol on the prepared state.
/// Run `k` draws from a generator seeded by `(seed, k)`, so results do not
/// depend on execution order and identical inputs give identical counts.
pub fn run_shots(
    tree: &ProtocolTree,
    prepared: &PureState,
    shots: u64,
    seed: u64,
) -> Result<ShotCounts> {
    let mut counts = ShotCounts {
        shots,
        seed,
        identify_phi: 0,
        identify_psi: 0,
        inconclusive: 0,
        aborted: 0,
    };
    for shot in 0..shots {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(shot);
        let verdict = run_one(tree, prepared, &mut rng)?;
        match verdict {
            Some(Verdict::IdentifyPhi) => counts.identify_phi += 1,
            Some(Verdict::IdentifyPsi) => counts.identify_psi += 1,
            Some(Verdict::Inconclusive) => counts.inconclusive += 1,
            None => counts.aborted += 1,
        }
    }
    Ok(counts)
}

fn run_one(
    tree: &ProtocolTree,
    prepared: &PureState,
    rng: &mut ChaCha8Rng,
) -> Result<Option<Verdict>> {
    let mut dims = prepared.space().dims().to_vec();
    let mut state = prepared.amplitudes().clone();
    let mut node = &tree.root;
    loop {
        let m = match node {
            Node::Leaf(v) => return Ok(Some(*v)),
            Node::Measure(m) => m,
        };
        if m.party >= dims.len() {
            return Err(Error::SpaceMismatch(format!(
                "protocol measures party {} of a {}-party state",
                m.party,
                dims.len()
            )));
        }
        if let Some(iso) = &m.isometry {
            if iso.matrix.ncols() != dims[m.party] {
                return Err(Error::SpaceMismatch(format!(
                    "isometry expects dimension {}, state has {}",
                    iso.matrix.ncols(),
                    dims[m.party]
                )));
            }
            state = statespace::apply_kraus_raw(&iso.matrix, m.party, &dims, &state);
            dims[m.party] = iso.matrix.nrows();
        }
        let mut outcomes = Vec::with_capacity(m.operators.len());
        let mut total = 0.0;
        for ((op_label, op), (label, child)) in m.operators.iter().zip(&m.branches) {
            if op_label != label {
                return Err(Error::MalformedProtocol(format!(
                    "operator {op_label:?} out of step with branch {label:?}"
                )));
            }
            if op.ncols() != dims[m.party] {
                return Err(Error::SpaceMismatch(format!(
                    "operator {label:?} expects dimension {}, state has {}",
                    op.ncols(),
                    dims[m.party]
                )));
            }
            let collapsed = statespace::apply_kraus_raw(op, m.party, &dims, &state);
            let p = collapsed.norm_squared();
            total += p;
            outcomes.push((p, op.nrows(), collapsed, child));
        }
        // Born-rule draw; the sum is 1 up to rounding on a complete node.
        let u = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        let mut chosen = outcomes.len() - 1;
        for (k, (p, _, _, _)) in outcomes.iter().enumerate() {
            acc += p;
            if u < acc {
                chosen = k;
                break;
            }
        }
        let (p, new_dim, collapsed, child) = outcomes.swap_remove(chosen);
        if p < 1e-280 {
            return Ok(None); // vanishing branch: abort this shot
        }
        state = collapsed.unscale(p.sqrt());
        dims[m.party] = new_dim;
        node = child;
    }
}

/// JSON form of an evaluation report (sorted keys).
pub fn report_to_json(report: &EvaluationReport) -> Value {
    json!({
        "bound": report.bound,
        "branches": report
            .branches
            .iter()
            .map(|row| json!({"path": row.path, "phi": row.p_phi, "psi": row.p_psi}))
            .collect::<Vec<_>>(),
        "conclusive": {"phi": report.conclusive_phi, "psi": report.conclusive_psi},
        "error": {"phi": report.error_phi, "psi": report.error_psi},
        "inconclusive": {"phi": report.inconclusive_phi, "psi": report.inconclusive_psi},
        "optimality_residual": report.optimality_residual,
    })
}

/// JSON form of shot tallies (sorted keys).
pub fn counts_to_json(counts: &ShotCounts) -> Value {
    json!({
        "aborted": counts.aborted,
        "identify_phi": counts.identify_phi,
        "identify_psi": counts.identify_psi,
        "inconclusive": counts.inconclusive,
        "seed": counts.seed,
        "shots": counts.shots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocols::{compile, compile_orthogonal};
    use crate::statespace::{beta_pair, random_pair, PartySpace};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn equal_weight_pair_reaches_its_bound() {
        let beta = std::f64::consts::FRAC_PI_8;
        let (phi, psi) = beta_pair(beta);
        let tree = compile(&phi, &psi).unwrap();
        let report = evaluate_exact(&tree, &phi, &psi).unwrap();
        let expect = 1.0 - std::f64::consts::FRAC_1_SQRT_2;
        assert!((report.bound - expect).abs() < 1e-12);
        assert!((report.conclusive_phi - expect).abs() < 1e-10);
        assert!((report.conclusive_psi - expect).abs() < 1e-10);
        assert!(report.max_error() < 1e-12);
        assert!((report.inconclusive_phi - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-10);
        assert!(check_optimality(&report, 1e-9).pass);
        // Root readout probabilities are hypothesis independent.
        let roots = report.root_branches();
        assert_eq!(roots.len(), 2);
        assert!((roots[0].p_phi - expect).abs() < 1e-10);
        assert!((roots[0].p_psi - expect).abs() < 1e-10);
        assert!((roots[1].p_phi - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-10);
        assert!((roots[1].p_psi - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-10);
    }

    #[test]
    fn outcome_probabilities_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let space = PartySpace::new(vec![2, 3]).unwrap();
        let (phi, psi) = random_pair(&space, 0.4, &mut rng).unwrap();
        let tree = compile(&phi, &psi).unwrap();
        let report = evaluate_exact(&tree, &phi, &psi).unwrap();
        let total_phi = report.conclusive_phi + report.error_phi + report.inconclusive_phi;
        let total_psi = report.conclusive_psi + report.error_psi + report.inconclusive_psi;
        assert!((total_phi - 1.0).abs() < 1e-10);
        assert!((total_psi - 1.0).abs() < 1e-10);
    }

    #[test]
    fn orthogonal_pairs_are_named_with_certainty() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let space = PartySpace::new(vec![3, 2]).unwrap();
        let (phi, psi) = random_pair(&space, 0.0, &mut rng).unwrap();
        let tree = compile_orthogonal(&phi, &psi).unwrap();
        let report = evaluate_exact(&tree, &phi, &psi).unwrap();
        assert!((report.conclusive_phi - 1.0).abs() < 1e-10);
        assert!((report.conclusive_psi - 1.0).abs() < 1e-10);
        assert!(report.max_error() < 1e-12);
        assert!(report.inconclusive_phi < 1e-10);
    }

    #[test]
    fn evaluation_rejects_mismatched_spaces() {
        let (phi, psi) = beta_pair(0.3);
        let tree = compile(&phi, &psi).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let other = PartySpace::new(vec![3, 2]).unwrap();
        let (a, b) = random_pair(&other, 0.3, &mut rng).unwrap();
        assert!(matches!(
            evaluate_exact(&tree, &a, &b),
            Err(Error::SpaceMismatch(_))
        ));
    }

    #[test]
    fn sampling_is_reproducible_and_tracks_the_exact_rates() {
        let beta = 0.55;
        let (phi, psi) = beta_pair(beta);
        let tree = compile(&phi, &psi).unwrap();
        let report = evaluate_exact(&tree, &phi, &psi).unwrap();
        let shots = 20_000u64;
        let counts = run_shots(&tree, &phi, shots, 99).unwrap();
        let again = run_shots(&tree, &phi, shots, 99).unwrap();
        assert_eq!(counts, again);
        let other_seed = run_shots(&tree, &phi, shots, 100).unwrap();
        assert_ne!(counts, other_seed);
        assert_eq!(
            counts.identify_phi + counts.identify_psi + counts.inconclusive + counts.aborted,
            shots
        );
        assert_eq!(counts.aborted, 0);
        // Five-sigma binomial envelope around the exact probability.
        let p = report.conclusive_phi;
        let sigma = (p * (1.0 - p) * shots as f64).sqrt();
        let observed = counts.identify_phi as f64;
        assert!((observed - p * shots as f64).abs() < 5.0 * sigma.max(1.0));
        assert_eq!(counts.identify_psi, 0, "misidentification sampled");
    }

    #[test]
    fn report_json_uses_sorted_keys() {
        let (phi, psi) = beta_pair(0.4);
        let tree = compile(&phi, &psi).unwrap();
        let report = evaluate_exact(&tree, &phi, &psi).unwrap();
        let value = report_to_json(&report);
        let keys: Vec<&str> = value
            .as_object()
            .unwrap()
            .keys()
            .map(|k| k.as_str())
            .collect();
        let mut sorted = keys.clone();
        sorted.sort_unstable();
        assert_eq!(keys, sorted);
        let counts = run_shots(&tree, &phi, 10, 1).unwrap();
        let cv = counts_to_json(&counts);
        assert_eq!(cv["shots"], json!(10));
    }
}
