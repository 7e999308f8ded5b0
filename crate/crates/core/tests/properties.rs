//! Randomized properties of the state tools, the aligning rotations, the
//! compiled protocols, and the samplers.

use std::f64::consts::TAU;

use nalgebra::linalg::QR;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use usd_core::canonical::{canonicalize, solve_theta, PairRotation};
use usd_core::linalg::{c, cr, isometry_residual, max_abs, tol, CMat, CVec};
use usd_core::protocols::{compile, idp_povm, resolve_signs, Node};
use usd_core::simulate::{evaluate_exact, run_shots};
use usd_core::statespace::{
    apply_local, decompose_pair, inner_product, overlap_operator, pair_from_json, pair_to_json,
    random_pair, random_state, PartySpace, PureState,
};

fn dims_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(2usize..=4, 2..=3).prop_filter("keep total dimension small", |d| {
        d.iter().product::<usize>() <= 36
    })
}

fn pair_strategy(overlaps: std::ops::Range<f64>) -> impl Strategy<Value = (PureState, PureState)> {
    (dims_strategy(), overlaps, any::<u64>()).prop_map(|(dims, overlap, seed)| {
        let space = PartySpace::new(dims).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        random_pair(&space, overlap, &mut rng).unwrap()
    })
}

/// Haar-random unitary from the QR factorization of a Gaussian matrix.
fn random_unitary(dim: usize, rng: &mut ChaCha8Rng) -> CMat {
    let m = CMat::from_fn(dim, dim, |_, _| {
        c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
    });
    QR::new(m).q()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn local_unitary_preserves_overlap(
        (phi, psi) in pair_strategy(0.0..0.95),
        party_pick in any::<u8>(),
        seed in any::<u64>(),
    ) {
        let party = party_pick as usize % phi.space().party_count();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = random_unitary(phi.space().dims()[party], &mut rng);
        let before = inner_product(&phi, &psi).unwrap();
        let after = inner_product(
            &apply_local(&u, party, &phi).unwrap(),
            &apply_local(&u, party, &psi).unwrap(),
        )
        .unwrap();
        prop_assert!((before - after).norm() <= 1e-12);
    }

    #[test]
    fn overlap_operator_trace_is_the_inner_product(
        (phi, psi) in pair_strategy(0.0..0.95),
    ) {
        let ip = inner_product(&phi, &psi).unwrap();
        for party in 0..phi.space().party_count() {
            let trace = overlap_operator(&phi, &psi, party).unwrap().trace();
            prop_assert!((trace - ip).norm() <= 1e-12);
        }
    }

    #[test]
    fn decomposition_reassembles_both_states(
        (phi, psi) in pair_strategy(0.0..0.95),
        party_pick in any::<u8>(),
    ) {
        let party = party_pick as usize % phi.space().party_count();
        let dims = phi.space().dims();
        let d = dims[party];
        let left: usize = dims[..party].iter().product();
        let right: usize = dims[party + 1..].iter().product();
        let dec = decompose_pair(&phi, &psi, party, None).unwrap();
        for (state, weights, parts) in [(&phi, &dec.r, &dec.eta), (&psi, &dec.s, &dec.gamma)] {
            let mut rebuilt = CVec::zeros(state.amplitudes().len());
            for i in 0..d {
                let Some(part) = parts[i].as_ref() else { continue };
                for l in 0..left {
                    for r_idx in 0..right {
                        rebuilt[(l * d + i) * right + r_idx] =
                            part[l * right + r_idx] * cr(weights[i].sqrt());
                    }
                }
            }
            prop_assert!((rebuilt - state.amplitudes()).norm() <= 1e-10);
        }
    }

    #[test]
    fn canonical_form_preserves_and_aligns(
        (phi, psi) in pair_strategy(0.01..0.95),
    ) {
        let form = canonicalize(&phi, &psi, 0).unwrap();
        let ip = inner_product(&phi, &psi).unwrap();
        prop_assert!(isometry_residual(&form.alice_unitary) <= 1e-12);
        let total: f64 = form.t.iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-10);
        prop_assert!((form.aligned_overlap() - ip.norm()).abs() <= 1e-9);

        // The component overlaps reassemble the full inner product.
        let mut sum = c(0.0, 0.0);
        for i in 0..form.t.len() {
            if let (Some(mu), Some(nu)) = (form.mu[i].as_ref(), form.nu[i].as_ref()) {
                sum += mu.dotc(nu) * cr(form.t[i]);
            }
        }
        prop_assert!((sum - ip).norm() <= 1e-9);

        // Equal weights and aligned phases in the rotated basis.
        let basis = form.alice_unitary.adjoint();
        let dec = decompose_pair(&phi, &psi, 0, Some(&basis)).unwrap();
        let phase = c(form.global_phase.cos(), form.global_phase.sin());
        for i in 0..form.t.len() {
            prop_assert!((dec.r[i] - dec.s[i]).abs() <= 1e-10);
            prop_assert!((dec.r[i] - form.t[i]).abs() <= 1e-9);
            if form.t[i] <= tol::PRUNE {
                continue;
            }
            let mu = form.mu[i].as_ref().unwrap();
            let nu = form.nu[i].as_ref().unwrap();
            prop_assert!((mu.dotc(nu) * phase.conj()).im.abs() <= 1e-8);
        }
    }

    #[test]
    fn theta_choice_beats_the_alternate_branch(
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
        frac in -1.0f64..1.0,
    ) {
        let r = f64::hypot(a, b);
        prop_assume!(r > 1e-6);
        let c_term = frac * r;
        let theta = solve_theta(a, b, c_term).unwrap();
        let residual =
            |t: f64| (a * (2.0 * t).cos() + b * (2.0 * t).sin() + c_term).abs();
        let delta = f64::atan2(b, a);
        let spread = (-c_term / r).clamp(-1.0, 1.0).acos();
        for alternate in [(delta + spread) / 2.0, (delta - spread) / 2.0] {
            prop_assert!(residual(theta) <= residual(alternate) + 1e-12);
        }
    }

    #[test]
    fn pair_rotation_is_hermitian_unitary(
        theta in -TAU..TAU,
        omega in -TAU..TAU,
        dim in 2usize..5,
    ) {
        let rot = PairRotation { i: 0, j: dim - 1, theta, omega };
        for u in [rot.unitary2(), rot.embedded(dim)] {
            prop_assert!(isometry_residual(&u) <= 1e-14);
            prop_assert!(max_abs(&(&u - u.adjoint())) <= 1e-14);
        }
    }

    #[test]
    fn compiled_protocols_are_optimal_and_unambiguous(
        (phi, psi) in pair_strategy(0.0..0.95),
    ) {
        let tree = compile(&phi, &psi).unwrap();
        let report = evaluate_exact(&tree, &phi, &psi).unwrap();
        prop_assert!(report.optimality_residual <= 1e-9);
        prop_assert!(report.max_error() <= 1e-10);
        let phi_total =
            report.conclusive_phi + report.error_phi + report.inconclusive_phi;
        let psi_total =
            report.conclusive_psi + report.error_psi + report.inconclusive_psi;
        prop_assert!((phi_total - 1.0).abs() <= 1e-10);
        prop_assert!((psi_total - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn root_readout_probabilities_are_hypothesis_independent(
        (phi, psi) in pair_strategy(0.05..0.95),
    ) {
        let tree = compile(&phi, &psi).unwrap();
        let Node::Measure(root) = &tree.root else {
            return Ok(());
        };
        prop_assume!(root.isometry.is_some());
        let report = evaluate_exact(&tree, &phi, &psi).unwrap();
        for row in report.root_branches() {
            prop_assert!((row.p_phi - row.p_psi).abs() <= 1e-10);
        }
    }

    #[test]
    fn sign_resolution_conserves_weight(
        (phi, psi) in pair_strategy(0.01..0.95),
    ) {
        let form = canonicalize(&phi, &psi, 0).unwrap();
        let plan = resolve_signs(&form).unwrap();
        let branch_weight: f64 = plan.branches.iter().map(|b| b.weight).sum();
        let residual_weight: f64 = plan.residual.iter().map(|t| t.weight).sum();
        prop_assert!((branch_weight + residual_weight - 1.0).abs() <= 1e-10);
        for branch in &plan.branches {
            prop_assert!(branch.alpha > 0.0 && branch.alpha <= std::f64::consts::FRAC_PI_2);
        }
    }

    #[test]
    fn single_party_readout_handles_nearly_parallel_pairs(
        dim in 2usize..5,
        delta_exponent in -11.0f64..-0.3,
        seed in any::<u64>(),
        chi in 0.0..TAU,
    ) {
        let delta = 10.0f64.powf(delta_exponent);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let space = PartySpace::new(vec![dim]).unwrap();
        let mu = random_state(&space, &mut rng);
        let mu = mu.amplitudes().clone();
        let raw = random_state(&space, &mut rng);
        let mut w = raw.amplitudes() - &mu * mu.dotc(raw.amplitudes());
        w -= &mu * mu.dotc(&w);
        prop_assume!(w.norm() > 1e-6);
        let w = w.unscale(w.norm());
        let cm = 1.0 - delta;
        let nu = (&mu * cr(cm) + &w * cr((1.0 - cm * cm).sqrt())) * c(chi.cos(), chi.sin());

        let povm = idp_povm(&mu, &nu).unwrap();
        prop_assert!(povm.validate().pass());
        let element = |label: &str| {
            &povm.elements.iter().find(|(l, _)| l == label).unwrap().1
        };
        let expect = |e: &CMat, v: &CVec| (v.adjoint() * e * v)[(0, 0)].re;
        prop_assert!(expect(element("phi"), &nu).abs() <= 1e-12);
        prop_assert!(expect(element("psi"), &mu).abs() <= 1e-12);
        prop_assert!((expect(element("phi"), &mu) - delta).abs() <= 1e-10);
        prop_assert!((expect(element("psi"), &nu) - delta).abs() <= 1e-10);
    }

    #[test]
    fn sampling_is_reproducible_and_complete(
        overlap in 0.0f64..0.95,
        pair_seed in any::<u64>(),
        shot_seed in any::<u64>(),
    ) {
        let space = PartySpace::new(vec![2, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(pair_seed);
        let (phi, psi) = random_pair(&space, overlap, &mut rng).unwrap();
        let tree = compile(&phi, &psi).unwrap();
        let counts = run_shots(&tree, &phi, 200, shot_seed).unwrap();
        prop_assert_eq!(counts, run_shots(&tree, &phi, 200, shot_seed).unwrap());
        let total =
            counts.identify_phi + counts.identify_psi + counts.inconclusive + counts.aborted;
        prop_assert_eq!(total, 200);
    }

    #[test]
    fn pair_files_round_trip_exactly(
        (phi, psi) in pair_strategy(0.0..0.95),
    ) {
        let text = serde_json::to_string(&pair_to_json(&phi, &psi).unwrap()).unwrap();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        let (phi2, psi2) = pair_from_json(&value).unwrap();
        prop_assert_eq!(phi.amplitudes(), phi2.amplitudes());
        prop_assert_eq!(psi.amplitudes(), psi2.amplitudes());
    }
}

/// Sample moment of the state sampler: in dimension 2 the first weight
/// |amplitude_0|^2 averages to 1/2.
#[test]
fn sampler_first_weight_moment() {
    let space = PartySpace::new(vec![2]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(424242);
    let mut sum = 0.0;
    let n = 10_000;
    for _ in 0..n {
        sum += random_state(&space, &mut rng).amplitudes()[0].norm_sqr();
    }
    let mean = sum / n as f64;
    assert!((mean - 0.5).abs() < 0.02, "mean weight {mean}");
}
