//! End-to-end gates for the discrimination pipeline. Each test checks one
//! numbered criterion at its stated tolerance and prints one summary line.

use std::f64::consts::{FRAC_PI_8, PI, SQRT_2, TAU};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use usd_core::canonical::{canonicalize, constant_diagonal_unitary, solve_omega, solve_theta};
use usd_core::linalg::{c, cr, isometry_residual, tol, CMat, CVec};
use usd_core::protocols::{compile, validate_protocol, Node, ProtocolTree};
use usd_core::simulate::{evaluate_exact, run_shots};
use usd_core::statespace::{decompose_pair, inner_product, random_pair, PartySpace, PureState};

const ENSEMBLE_DIMS: [&[usize]; 4] = [&[2, 2], &[2, 3], &[3, 3], &[4, 4]];

/// The 200-pair ensemble behind criteria 1 and 6: four dimension choices,
/// target overlap moduli 0.0 through 0.9, five seeds each.
fn overlap_ensemble() -> Vec<(PureState, PureState, f64)> {
    let mut out = Vec::with_capacity(200);
    for (di, dims) in ENSEMBLE_DIMS.iter().enumerate() {
        let space = PartySpace::new(dims.to_vec()).unwrap();
        for oi in 0..10 {
            let overlap = oi as f64 / 10.0;
            for s in 0..5 {
                let seed = ((di * 10 + oi) * 5 + s) as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (phi, psi) = random_pair(&space, overlap, &mut rng).unwrap();
                out.push((phi, psi, overlap));
            }
        }
    }
    out
}

fn beta_pair(beta: f64) -> (PureState, PureState) {
    let space = PartySpace::new(vec![2, 2]).unwrap();
    let mut a = CVec::zeros(4);
    a[0] = cr(beta.cos());
    a[3] = cr(beta.sin());
    let mut b = CVec::zeros(4);
    b[0] = cr(beta.cos());
    b[3] = cr(-beta.sin());
    (
        PureState::new(space.clone(), a).unwrap(),
        PureState::new(space, b).unwrap(),
    )
}

fn compiled(phi: &PureState, psi: &PureState) -> ProtocolTree {
    let tree = compile(phi, psi).unwrap();
    assert!(
        validate_protocol(&tree).pass(),
        "structural validation failed"
    );
    tree
}

#[test]
fn criterion_1_optimal_conclusive_probability_across_ensemble() {
    let start = Instant::now();
    let mut worst_residual = 0.0f64;
    let mut worst_error = 0.0f64;
    for (phi, psi, overlap) in overlap_ensemble() {
        let tree = compiled(&phi, &psi);
        let report = evaluate_exact(&tree, &phi, &psi).unwrap();
        assert!(
            report.optimality_residual <= 1e-9,
            "residual {} at dims {} overlap {overlap}",
            report.optimality_residual,
            phi.space()
        );
        assert!(
            report.max_error() <= 1e-10,
            "misidentification {} at dims {} overlap {overlap}",
            report.max_error(),
            phi.space()
        );
        worst_residual = worst_residual.max(report.optimality_residual);
        worst_error = worst_error.max(report.max_error());
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 30.0, "ensemble took {elapsed:.1}s, budget 30s");
    println!(
        "criterion 1 pass: 200 pairs, max residual {worst_residual:.2e}, \
         max misidentification {worst_error:.2e}, {elapsed:.2}s"
    );
}

#[test]
fn criterion_2_worked_example_beta_pi_over_8() {
    let (phi, psi) = beta_pair(FRAC_PI_8);
    let tree = compiled(&phi, &psi);

    // The first round rotates in a two-level ancilla whose opening angle has
    // the closed form arccos(tan(pi/8)).
    let root = match &tree.root {
        Node::Measure(m) => m,
        Node::Leaf(_) => panic!("root must be a measurement node"),
    };
    let iso = root.isometry.as_ref().expect("root must carry an ancilla");
    assert_eq!(iso.ancilla_dim, 2);
    let alpha = iso.matrix[(0, 0)].re.acos();
    let alpha_closed = FRAC_PI_8.tan().acos();
    assert!((alpha - alpha_closed).abs() <= 1e-12, "alpha {alpha}");
    assert!((alpha - 1.143_717_7).abs() <= 1e-7);

    // Both ancilla outcomes occur with state-independent probabilities
    // (1 - sqrt(2)/2, sqrt(2)/2) and the conclusive total meets the bound.
    let report = evaluate_exact(&tree, &phi, &psi).unwrap();
    let succeed = 1.0 - SQRT_2 / 2.0;
    let rows = report.root_branches();
    assert_eq!(rows.len(), 2);
    for row in &rows {
        let expected = if row.path.ends_with('0') {
            succeed
        } else {
            1.0 - succeed
        };
        assert!((row.p_phi - expected).abs() <= 1e-10, "row {}", row.path);
        assert!((row.p_psi - expected).abs() <= 1e-10, "row {}", row.path);
    }
    assert!((report.conclusive_phi - succeed).abs() <= 1e-10);
    assert!((report.conclusive_psi - succeed).abs() <= 1e-10);
    assert!((succeed - 0.292_893_2).abs() <= 1e-7);
    assert!(report.max_error() <= 1e-12);
    println!(
        "criterion 2 pass: alpha {alpha:.10}, branch probabilities \
         ({:.10}, {:.10}), conclusive {:.10}",
        rows[0].p_phi,
        rows[1].p_phi,
        report.mean_conclusive()
    );
}

#[test]
fn criterion_3_orthogonal_pairs_discriminated_perfectly() {
    let shapes: [&[usize]; 10] = [
        &[2, 2],
        &[2, 3],
        &[3, 2],
        &[3, 3],
        &[2, 2, 2],
        &[3, 2, 2],
        &[2, 3, 2],
        &[2, 2, 3],
        &[3, 3, 2],
        &[3, 3, 3],
    ];
    let mut worst_gap = 0.0f64;
    let mut worst_error = 0.0f64;
    for (k, dims) in shapes.iter().enumerate() {
        let space = PartySpace::new(dims.to_vec()).unwrap();
        for s in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64((100 + k * 5 + s) as u64);
            let (phi, psi) = random_pair(&space, 0.0, &mut rng).unwrap();
            let tree = compiled(&phi, &psi);
            let report = evaluate_exact(&tree, &phi, &psi).unwrap();
            let gap = (report.conclusive_phi - 1.0)
                .abs()
                .max((report.conclusive_psi - 1.0).abs());
            assert!(gap <= 1e-10, "conclusive gap {gap} at dims {space}");
            assert!(
                report.max_error() <= 1e-12,
                "misidentification {} at dims {space}",
                report.max_error()
            );
            worst_gap = worst_gap.max(gap);
            worst_error = worst_error.max(report.max_error());
        }
    }
    println!(
        "criterion 3 pass: 50 orthogonal pairs, max conclusive gap \
         {worst_gap:.2e}, max misidentification {worst_error:.2e}"
    );
}

#[test]
fn criterion_4_canonical_form_invariants() {
    let shapes: [&[usize]; 6] = [&[2, 2], &[2, 3], &[3, 3], &[4, 4], &[2, 2, 2], &[3, 2, 2]];
    let mut checked = 0usize;
    let mut fast_path = 0usize;
    let mut check = |phi: &PureState, psi: &PureState| {
        let form = canonicalize(phi, psi, 0).unwrap();
        let ip = inner_product(phi, psi).unwrap();

        // Unit weights, unitary rotation, preserved overlap modulus.
        let total: f64 = form.t.iter().sum();
        assert!((total - 1.0).abs() <= 1e-10, "weight sum {total}");
        assert!(isometry_residual(&form.alice_unitary) <= 1e-12);
        assert!(
            (form.aligned_overlap() - ip.norm()).abs() <= 1e-9,
            "overlap drifted by {:e}",
            (form.aligned_overlap() - ip.norm()).abs()
        );

        // Equal weights in the rotated basis, and phase-aligned components.
        let basis = form.alice_unitary.adjoint();
        let dec = decompose_pair(phi, psi, 0, Some(&basis)).unwrap();
        let phase = c(form.global_phase.cos(), form.global_phase.sin());
        for i in 0..form.t.len() {
            assert!(
                (dec.r[i] - dec.s[i]).abs() <= 1e-10,
                "weight gap {:e} at {i}",
                (dec.r[i] - dec.s[i]).abs()
            );
            if form.t[i] <= tol::PRUNE {
                continue;
            }
            let mu = form.mu[i].as_ref().unwrap();
            let nu = form.nu[i].as_ref().unwrap();
            let aligned = mu.dotc(nu) * phase.conj();
            assert!(aligned.im.abs() <= 1e-8, "phase residual {:e}", aligned.im);
            assert!((aligned.re - form.rho[i]).abs() <= 1e-8);
        }
        if form.diagnostics.fast_path {
            fast_path += 1;
        }
        checked += 1;
    };

    for (k, dims) in shapes.iter().enumerate() {
        let space = PartySpace::new(dims.to_vec()).unwrap();
        for oi in 1..10 {
            for s in 0..2 {
                let seed = (((k * 10 + oi) * 2 + s) + 4000) as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (phi, psi) = random_pair(&space, oi as f64 / 10.0, &mut rng).unwrap();
                check(&phi, &psi);
            }
        }
    }
    // Aligned inputs must take the rotation-free path, with or without a
    // global phase on the second state.
    for beta in [FRAC_PI_8, 0.3, 1.0, 1.4] {
        let (phi, psi) = beta_pair(beta);
        check(&phi, &psi);
        let spun = psi.amplitudes() * c(0.7f64.cos(), 0.7f64.sin());
        let psi_spun = PureState::new(psi.space().clone(), spun).unwrap();
        check(&phi, &psi_spun);
    }
    assert!(
        fast_path >= 8,
        "only {fast_path} aligned inputs skipped rotation"
    );
    println!(
        "criterion 4 pass: {checked} canonical forms, {fast_path} on the \
         rotation-free path"
    );
}

#[test]
fn criterion_5_solver_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    // Phase solver: the rotated cross terms must land on the real axis.
    let mut worst_omega = 0.0f64;
    for k in 0..10_000 {
        let scale = [1.0, 10.0, 100.0][k % 3];
        let a = c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * cr(scale);
        let b = c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * cr(scale);
        let w = solve_omega(a, b);
        let residual = (a * c(w.cos(), -w.sin()) + b * c(w.cos(), w.sin()))
            .im
            .abs();
        assert!(residual <= 1e-10, "omega residual {residual:e}");
        worst_omega = worst_omega.max(residual);
    }

    // Angle solver: A cos 2t + B sin 2t + C must vanish for feasible C.
    let mut worst_theta = 0.0f64;
    for _ in 0..10_000 {
        let a: f64 = rng.gen_range(-2.0..2.0);
        let b: f64 = rng.gen_range(-2.0..2.0);
        let c_term = rng.gen_range(-1.0..1.0) * f64::hypot(a, b);
        let theta = solve_theta(a, b, c_term).unwrap();
        let residual = (a * (2.0 * theta).cos() + b * (2.0 * theta).sin() + c_term).abs();
        assert!(residual <= 1e-10, "theta residual {residual:e}");
        worst_theta = worst_theta.max(residual);
    }

    // Cross-check the angle solver against a dense grid minimizer. The grid
    // walks cos/sin by an incremental rotation to stay cheap.
    for _ in 0..100 {
        let a: f64 = rng.gen_range(-2.0..2.0);
        let b: f64 = rng.gen_range(-2.0..2.0);
        let c_term = rng.gen_range(-1.0..1.0) * f64::hypot(a, b);
        let theta = solve_theta(a, b, c_term).unwrap();
        let solved = (a * (2.0 * theta).cos() + b * (2.0 * theta).sin() + c_term).abs();
        let n = 1_000_000usize;
        let step = TAU / n as f64;
        let (sc, ss) = (step.cos(), step.sin());
        let (mut ck, mut sk) = ((-PI).cos(), (-PI).sin());
        let mut grid_min = f64::INFINITY;
        for _ in 0..n {
            grid_min = grid_min.min((a * ck + b * sk + c_term).abs());
            let next = ck * sc - sk * ss;
            sk = sk * sc + ck * ss;
            ck = next;
        }
        assert!(
            solved <= grid_min + 1e-8,
            "solver {solved:e} vs grid {grid_min:e}"
        );
    }

    // Diagonal flattener: every diagonal entry lands on the trace mean.
    let mut worst_spread = 0.0f64;
    for n in 2..=6usize {
        for _ in 0..20 {
            let m = CMat::from_fn(n, n, |_, _| {
                c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
            });
            let w = constant_diagonal_unitary(&m).unwrap();
            assert!(isometry_residual(&w) <= 1e-12);
            let rotated = &w * &m * w.adjoint();
            let mean = rotated.trace() / cr(n as f64);
            let spread = (0..n)
                .map(|k| (rotated[(k, k)] - mean).norm())
                .fold(0.0f64, f64::max);
            assert!(spread <= 1e-10, "diagonal spread {spread:e} at n = {n}");
            worst_spread = worst_spread.max(spread);
        }
    }
    println!(
        "criterion 5 pass: omega residual {worst_omega:.2e}, theta residual \
         {worst_theta:.2e}, grid agreement on 100 instances, diagonal spread \
         {worst_spread:.2e}"
    );
}

#[test]
fn criterion_6_first_readout_reveals_nothing() {
    let mut ancilla_roots = 0usize;
    let mut worst_gap = 0.0f64;
    for (phi, psi, _) in overlap_ensemble() {
        let tree = compiled(&phi, &psi);
        let has_ancilla = match &tree.root {
            Node::Measure(m) => m.isometry.is_some(),
            Node::Leaf(_) => false,
        };
        if !has_ancilla {
            continue;
        }
        let report = evaluate_exact(&tree, &phi, &psi).unwrap();
        for row in report.root_branches() {
            let gap = (row.p_phi - row.p_psi).abs();
            assert!(
                gap <= 1e-10,
                "branch {} leaks {gap:e} at dims {}",
                row.path,
                phi.space()
            );
            worst_gap = worst_gap.max(gap);
        }
        ancilla_roots += 1;
    }
    assert!(ancilla_roots >= 180, "only {ancilla_roots} ancilla roots");
    println!(
        "criterion 6 pass: {ancilla_roots} ancilla-rooted trees, max branch \
         probability gap {worst_gap:.2e}"
    );
}

#[test]
fn criterion_7_sampled_frequencies_match_exact_probabilities() {
    let start = Instant::now();
    let shots = 100_000u64;
    let mut worst_pull = 0.0f64;
    for k in 0..20usize {
        let dims = ENSEMBLE_DIMS[k % 4];
        let space = PartySpace::new(dims.to_vec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + k as u64);
        let overlap = 0.9 * (k as f64 / 19.0);
        let (phi, psi) = random_pair(&space, overlap, &mut rng).unwrap();
        let tree = compiled(&phi, &psi);
        let report = evaluate_exact(&tree, &phi, &psi).unwrap();

        for (prepared, exact) in [
            (
                &phi,
                [
                    report.conclusive_phi,
                    report.error_phi,
                    report.inconclusive_phi,
                ],
            ),
            (
                &psi,
                [
                    report.error_psi,
                    report.conclusive_psi,
                    report.inconclusive_psi,
                ],
            ),
        ] {
            let seed = 9000 + k as u64;
            let counts = run_shots(&tree, prepared, shots, seed).unwrap();
            assert_eq!(counts.aborted, 0);
            let observed = [
                counts.identify_phi,
                counts.identify_psi,
                counts.inconclusive,
            ];
            for (o, p) in observed.iter().zip(exact) {
                let freq = *o as f64 / shots as f64;
                let sigma = (p * (1.0 - p) / shots as f64).sqrt();
                let slack = 5.0 * sigma + 1.0 / shots as f64;
                assert!(
                    (freq - p).abs() <= slack,
                    "frequency {freq} vs probability {p} (sigma {sigma:e})"
                );
                if sigma > 0.0 {
                    worst_pull = worst_pull.max((freq - p).abs() / sigma);
                }
            }
            if k < 3 {
                let again = run_shots(&tree, prepared, shots, seed).unwrap();
                assert_eq!(counts, again, "same seed must reproduce counts");
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 60.0, "sampling took {elapsed:.1}s, budget 60s");
    println!(
        "criterion 7 pass: 20 trees x {shots} shots per hypothesis, worst \
         pull {worst_pull:.2} sigma, {elapsed:.2}s"
    );
}

#[test]
fn criterion_8_three_party_recursion() {
    let space = PartySpace::new(vec![2, 2, 2]).unwrap();
    let mut worst_residual = 0.0f64;
    let mut worst_error = 0.0f64;
    for k in 0..20usize {
        let mut rng = ChaCha8Rng::seed_from_u64(8000 + k as u64);
        let overlap = (k % 10) as f64 / 10.0;
        let (phi, psi) = random_pair(&space, overlap, &mut rng).unwrap();
        let tree = compiled(&phi, &psi);
        let report = evaluate_exact(&tree, &phi, &psi).unwrap();
        assert!(
            report.optimality_residual <= 1e-9,
            "residual {} at overlap {overlap}",
            report.optimality_residual
        );
        assert!(
            report.max_error() <= 1e-10,
            "misidentification {} at overlap {overlap}",
            report.max_error()
        );
        worst_residual = worst_residual.max(report.optimality_residual);
        worst_error = worst_error.max(report.max_error());
    }
    println!(
        "criterion 8 pass: 20 three-party pairs, max residual \
         {worst_residual:.2e}, max misidentification {worst_error:.2e}"
    );
}
