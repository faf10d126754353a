use proptest::prelude::*;

use teams::builtin;
use teams::girsanov::weighted_mean;
use teams::numerics::{pairwise_sum, path_stream, std_normal, StreamDomain};
use teams::policy::{Basis, Policy, PolicyProfile};
use teams::problem::ActionSpec;
use teams::witsenhausen::{affine_gain, wits_payoff_checked, StagePolicies, WitsenhausenSpec};

fn box_spec(lower: f64, width: f64) -> ActionSpec {
    ActionSpec::interval(lower, lower + width)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn box_projection_lands_inside_and_is_idempotent(lower in -5.0..5.0f64, width in 0.0..4.0f64, u in -20.0..20.0f64) {
        let spec = box_spec(lower, width);
        let mut v = [u];
        let mut pinned = [false];
        spec.project(&mut v, &mut pinned);
        prop_assert!(v[0] >= lower && v[0] <= lower + width);
        prop_assert_eq!(pinned[0], v[0] != u || v[0] == lower || v[0] == lower + width);
        let before = v[0];
        spec.project(&mut v, &mut pinned);
        prop_assert_eq!(v[0], before);
    }

    #[test]
    fn grid_projection_picks_a_nearest_atom(atoms in prop::collection::vec(-3.0..3.0f64, 1..8), u in -5.0..5.0f64) {
        let spec = ActionSpec::scalar_grid(&atoms);
        let mut v = [u];
        let mut pinned = [false];
        spec.project(&mut v, &mut pinned);
        prop_assert!(atoms.contains(&v[0]));
        let best = atoms.iter().map(|a| (a - u).abs()).fold(f64::INFINITY, f64::min);
        prop_assert!(((v[0] - u).abs() - best).abs() < 1e-15);
        prop_assert!(pinned[0]);
    }

    #[test]
    fn pairwise_sum_agrees_with_naive_sum(xs in prop::collection::vec(-1e3..1e3f64, 0..300)) {
        let naive: f64 = xs.iter().sum();
        let scale: f64 = xs.iter().map(|x| x.abs()).sum::<f64>().max(1.0);
        prop_assert!((pairwise_sum(&xs) - naive).abs() <= 1e-12 * scale);
    }

    #[test]
    fn streams_are_reproducible_and_distinct(seed in any::<u64>(), index in 0..1_000_000u64) {
        let draw = |s: u64, i: u64, d: StreamDomain| {
            let mut rng = path_stream(s, d, i);
            (0..4).map(|_| std_normal(&mut rng)).collect::<Vec<_>>()
        };
        let a = draw(seed, index, StreamDomain::Noise);
        prop_assert_eq!(&a, &draw(seed, index, StreamDomain::Noise));
        prop_assert_ne!(&a, &draw(seed, index + 1, StreamDomain::Noise));
        prop_assert_ne!(&a, &draw(seed, index, StreamDomain::Action));
    }

    #[test]
    fn weighted_mean_ignores_a_common_log_shift(
        pairs in prop::collection::vec((-3.0..3.0f64, -2.0..2.0f64), 2..50),
        shift in -300.0..300.0f64,
    ) {
        let (logw, c): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let shifted: Vec<f64> = logw.iter().map(|l| l + shift).collect();
        let a = weighted_mean(&logw, &c);
        let b = weighted_mean(&shifted, &c);
        prop_assert!((a.ess - b.ess).abs() <= 1e-9 * a.ess);
        let rescaled = b.value * (-shift).exp();
        prop_assert!((a.value - rescaled).abs() <= 1e-9 * (a.value.abs() + 1e-12));
    }

    #[test]
    fn policy_profiles_survive_json(params in prop::collection::vec(-10.0..10.0f64, 64)) {
        let p = builtin::saturation_pair();
        let mut profile = PolicyProfile::zeros(&p, Basis::Polynomial { degree: 2 }, 2, vec![0.5]);
        for policy in &mut profile.per_dm {
            if let Policy::Regular(r) = policy {
                let n = r.n_params();
                r.set_params(&params[..n.min(params.len())].iter().copied().cycle().take(n).collect::<Vec<_>>());
            }
        }
        let json = serde_json::to_string(&profile).unwrap();
        let back: PolicyProfile = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(back, profile);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn affine_witsenhausen_payoff_matches_closed_form(
        k in 0.1..1.0f64,
        sigma0 in 0.5..5.0f64,
        a in -1.5..0.8f64,
        b in -0.5..1.5f64,
    ) {
        let spec = WitsenhausenSpec::new(k, sigma0, 1.0).unwrap();
        let (j, _) = wits_payoff_checked(&spec, &StagePolicies::affine(&spec, a, b)).unwrap();
        let s2 = sigma0 * sigma0;
        let exact = k * k * a * a * s2 + (1.0 + a).powi(2) * s2 * (1.0 - b).powi(2) + b * b;
        prop_assert!((j - exact).abs() <= 1e-4 * exact.max(1e-3), "{} vs {}", j, exact);
    }

    #[test]
    fn witsenhausen_payoff_is_invariant_under_odd_reflection(
        g1 in prop::collection::vec(-3.0..3.0f64, 16),
        g2 in prop::collection::vec(-3.0..3.0f64, 16),
        k in 0.1..1.0f64,
    ) {
        let spec = WitsenhausenSpec { nodes: 16, ..WitsenhausenSpec::new(k, 1.0, 1.0).unwrap() };
        let p = StagePolicies { gamma1: g1, gamma2: g2 };
        let mirror = |v: &[f64]| v.iter().rev().map(|x| -x).collect::<Vec<_>>();
        let q = StagePolicies { gamma1: mirror(&p.gamma1), gamma2: mirror(&p.gamma2) };
        let (jp, _) = wits_payoff_checked(&spec, &p).unwrap();
        let (jq, _) = wits_payoff_checked(&spec, &q).unwrap();
        prop_assert!((jp - jq).abs() <= 1e-9 * jp.max(1.0));
    }

    #[test]
    fn affine_gain_is_the_linear_mmse_coefficient(sigma0 in 0.1..5.0f64, sigmav in 0.1..5.0f64, a in -2.0..1.0f64) {
        let spec = WitsenhausenSpec::new(0.2, sigma0, sigmav).unwrap();
        let b = affine_gain(&spec, a);
        // d/db of (1+a)²σ₀²(1−b)² + b²σ_v² vanishes at the MMSE gain.
        let slope = -2.0 * (1.0 + a).powi(2) * sigma0 * sigma0 * (1.0 - b) + 2.0 * b * sigmav * sigmav;
        prop_assert!(slope.abs() < 1e-9 * (1.0 + sigma0 * sigma0 + sigmav * sigmav));
        prop_assert!((0.0..=1.0).contains(&b));
    }
}
