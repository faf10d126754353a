//! Ready-made problems with default policy profiles.

use crate::error::{Result, TeamsError};
use crate::linalg::Mat;
use crate::policy::{Basis, Policy, PolicyProfile, RegularPolicy};
use crate::problem::{
    ActionSpec, ConvexityDeclaration, DecisionMaker, DiffusionFamily, Flavor, InformationStructure, InitialDistribution,
    ScalarFamily, TeamProblem, VectorFamily,
};
use crate::reduction::FiniteTeam;

/// Names accepted by [`by_name`].
pub const NAMES: [&str; 8] = [
    "tanh_filter",
    "saturation_pair",
    "lq_scalar",
    "tanh_filter_discrete",
    "relay_pair_discrete",
    "radner",
    "static_quadratic",
    "witsenhausen",
];

fn linear_in_latest(problem: &TeamProblem, gains: &[f64]) -> PolicyProfile {
    let mut profile = PolicyProfile::zeros(problem, Basis::Polynomial { degree: 1 }, 1, vec![]);
    for (pol, g) in profile.per_dm.iter_mut().zip(gains) {
        if let Policy::Regular(r) = pol {
            let mut theta = vec![0.0; r.n_params()];
            theta[1] = *g;
            r.set_params(&theta);
        }
    }
    profile
}

fn quadratic_cost(xx: f64, uu: f64) -> ScalarFamily {
    ScalarFamily::quadratic(Some(Mat::scalar(xx)), Some(Mat::scalar(uu)), None)
}

/// Scalar diffusion `dx = (−½x + u)dt + dW` observed through `tanh(x)` with
/// unit noise on `[0, 1]`.
pub fn tanh_filter() -> TeamProblem {
    TeamProblem {
        name: "tanh_filter".into(),
        flavor: Flavor::ContinuousTime {
            horizon: 1.0,
            noise_dim: 1,
            diffusion: DiffusionFamily::Constant { s: Mat::scalar(1.0) },
        },
        state_dim: 1,
        drift: VectorFamily::scalar_linear(-0.5, &[1.0], 0.0),
        dms: vec![DecisionMaker {
            action: ActionSpec::interval(-1.0, 1.0),
            observation: VectorFamily::Saturation { a: Mat::scalar(1.0), b: None, c: None, scale: vec![1.0] },
            noise_scale: Mat::scalar(1.0),
            information: InformationStructure::own_history(),
        }],
        running_cost: quadratic_cost(1.0, 0.1),
        terminal_cost: ScalarFamily::state_quadratic(Some(Mat::scalar(1.0)), None, 0.0),
        initial: InitialDistribution::Gaussian { mean: vec![0.0], cov: Mat::scalar(1.0) },
        convexity: ConvexityDeclaration::Auto,
    }
}

/// Two DMs steering a two-dimensional diffusion, each seeing one coordinate
/// through a bounded sensor.
pub fn saturation_pair() -> TeamProblem {
    let dm = |row: Vec<f64>| DecisionMaker {
        action: ActionSpec::interval(-2.0, 2.0),
        observation: VectorFamily::Saturation { a: Mat::from_rows(&[row]), b: None, c: None, scale: vec![1.5] },
        noise_scale: Mat::scalar(0.7),
        information: InformationStructure::own_history(),
    };
    TeamProblem {
        name: "saturation_pair".into(),
        flavor: Flavor::ContinuousTime {
            horizon: 1.0,
            noise_dim: 2,
            diffusion: DiffusionFamily::Constant { s: Mat::diag(&[0.6, 0.6]) },
        },
        state_dim: 2,
        drift: VectorFamily::linear(
            Mat::from_rows(&[vec![-0.3, 0.4], vec![-0.2, -0.3]]),
            Some(Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]])),
            None,
        ),
        dms: vec![dm(vec![1.0, 0.0]), dm(vec![0.0, 1.0])],
        running_cost: ScalarFamily::quadratic(Some(Mat::identity(2)), Some(Mat::diag(&[0.2, 0.2])), None),
        terminal_cost: ScalarFamily::state_quadratic(Some(Mat::identity(2)), None, 0.0),
        initial: InitialDistribution::Gaussian { mean: vec![0.5, -0.5], cov: Mat::diag(&[0.5, 0.5]) },
        convexity: ConvexityDeclaration::Auto,
    }
}

/// Scalar full-information LQ: `dx = (a x + b u)dt + σ dW`, `ℓ = ½(q x² + r u²)`,
/// `φ = ½ m x²`, `x₀ ~ N(1, ¼)`, `σ = 0.3`, horizon 1, actions in `[−10, 10]`.
pub fn lq_scalar(a: f64, b: f64, q: f64, r: f64, m: f64) -> TeamProblem {
    TeamProblem {
        name: "lq_scalar".into(),
        flavor: Flavor::ContinuousTime {
            horizon: 1.0,
            noise_dim: 1,
            diffusion: DiffusionFamily::Constant { s: Mat::scalar(LQ_SIGMA) },
        },
        state_dim: 1,
        drift: VectorFamily::scalar_linear(a, &[b], 0.0),
        dms: vec![DecisionMaker {
            action: ActionSpec::interval(-10.0, 10.0),
            observation: VectorFamily::Zero { dim: 1 },
            noise_scale: Mat::scalar(1.0),
            information: InformationStructure::current_state(),
        }],
        running_cost: quadratic_cost(0.5 * q, 0.5 * r),
        terminal_cost: ScalarFamily::state_quadratic(Some(Mat::scalar(0.5 * m)), None, 0.0),
        initial: InitialDistribution::Gaussian { mean: vec![1.0], cov: Mat::scalar(0.25) },
        convexity: ConvexityDeclaration::Auto,
    }
}

/// Diffusion coefficient of [`lq_scalar`].
pub const LQ_SIGMA: f64 = 0.3;

/// Linear state feedback, one equal time piece per gain (basis `[1, x]`).
pub fn lq_feedback(gains: &[f64], horizon: f64) -> PolicyProfile {
    let s = gains.len();
    let switch_times = (1..s).map(|k| horizon * k as f64 / s as f64).collect();
    let coefficients = gains.iter().map(|g| Mat::from_rows(&[vec![0.0, *g]])).collect();
    PolicyProfile {
        per_dm: vec![Policy::Regular(RegularPolicy {
            basis: Basis::Polynomial { degree: 1 },
            recent: 1,
            switch_times,
            coefficients,
        })],
    }
}

/// `x(t+1) = 0.8 x(t) + u(t) + ½ w(t+1)`, `y(t) = tanh(x(t)) + b(t)`, five stages.
pub fn tanh_filter_discrete() -> TeamProblem {
    TeamProblem {
        name: "tanh_filter_discrete".into(),
        flavor: Flavor::DiscreteTime { stages: 5, gain: Mat::scalar(0.5) },
        state_dim: 1,
        drift: VectorFamily::scalar_linear(0.8, &[1.0], 0.0),
        dms: vec![DecisionMaker {
            action: ActionSpec::interval(-1.0, 1.0),
            observation: VectorFamily::Saturation { a: Mat::scalar(1.0), b: None, c: None, scale: vec![1.0] },
            noise_scale: Mat::scalar(1.0),
            information: InformationStructure::own_history(),
        }],
        running_cost: quadratic_cost(1.0, 0.1),
        terminal_cost: ScalarFamily::state_quadratic(Some(Mat::scalar(1.0)), None, 0.0),
        initial: InitialDistribution::Gaussian { mean: vec![0.0], cov: Mat::scalar(1.0) },
        convexity: ConvexityDeclaration::Auto,
    }
}

/// Two DMs over two stages: `x(t+1) = 0.3 x(t) + 0.3 u₁(t) + 0.3 u₂(t) + 0.8 w(t+1)`,
/// DM 1 sees `0.8 tanh(x + ½u₂(t−1))`, DM 2 sees `0.6 tanh(x − ½u₁(t−1))`, both
/// with unit noise, so each reads the other's last move. The weak drift and
/// sensors keep the reference-measure likelihood ratio light-tailed.
pub fn relay_pair_discrete() -> TeamProblem {
    let dm = |b: Vec<f64>, scale: f64| DecisionMaker {
        action: ActionSpec::interval(-1.0, 1.0),
        observation: VectorFamily::Saturation {
            a: Mat::scalar(1.0),
            b: Some(Mat::from_rows(&[b])),
            c: None,
            scale: vec![scale],
        },
        noise_scale: Mat::scalar(1.0),
        information: InformationStructure::own_history(),
    };
    TeamProblem {
        name: "relay_pair_discrete".into(),
        flavor: Flavor::DiscreteTime { stages: 2, gain: Mat::scalar(0.8) },
        state_dim: 1,
        drift: VectorFamily::scalar_linear(0.3, &[0.3, 0.3], 0.0),
        dms: vec![dm(vec![0.0, 0.5], 0.8), dm(vec![-0.5, 0.0], 0.6)],
        running_cost: ScalarFamily::quadratic(Some(Mat::scalar(1.0)), Some(Mat::diag(&[0.1, 0.1])), None),
        terminal_cost: ScalarFamily::state_quadratic(Some(Mat::scalar(1.0)), None, 0.0),
        initial: InitialDistribution::Gaussian { mean: vec![0.0], cov: Mat::scalar(1.0) },
        convexity: ConvexityDeclaration::Auto,
    }
}

fn static_team(name: &str, dms: Vec<DecisionMaker>) -> TeamProblem {
    TeamProblem {
        name: name.into(),
        flavor: Flavor::DiscreteTime { stages: 1, gain: Mat::scalar(1.0) },
        state_dim: 1,
        drift: VectorFamily::scalar_linear(1.0, &[0.0, 0.0], 0.0),
        dms,
        // (u1 + u2 − x)² + u1² + u2²
        running_cost: ScalarFamily::quadratic(
            Some(Mat::scalar(1.0)),
            Some(Mat::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]])),
            Some(Mat::from_rows(&[vec![-1.0, -1.0]])),
        ),
        terminal_cost: ScalarFamily::zero(),
        initial: InitialDistribution::Gaussian { mean: vec![0.0], cov: Mat::scalar(1.0) },
        convexity: ConvexityDeclaration::Auto,
    }
}

/// Static two-DM quadratic-Gaussian team: `x ~ N(0, 1)`, `yᵢ = x + σᵢ vᵢ`,
/// cost `(u₁ + u₂ − x)² + u₁² + u₂²`.
pub fn radner(sigma1: f64, sigma2: f64) -> TeamProblem {
    let dm = |s: f64| DecisionMaker {
        action: ActionSpec::interval(-20.0, 20.0),
        observation: VectorFamily::scalar_linear(1.0, &[0.0, 0.0], 0.0),
        noise_scale: Mat::scalar(s * s),
        information: InformationStructure::own_history(),
    };
    static_team("radner", vec![dm(sigma1), dm(sigma2)])
}

/// Best linear gains `(a₁, a₂)` of [`radner`]: the solution of
/// `2(1+σ₁²) a₁ + a₂ = 1`, `a₁ + 2(1+σ₂²) a₂ = 1`.
pub fn radner_gains(sigma1: f64, sigma2: f64) -> (f64, f64) {
    let (p, q) = (2.0 * (1.0 + sigma1 * sigma1), 2.0 * (1.0 + sigma2 * sigma2));
    let det = p * q - 1.0;
    ((q - 1.0) / det, (p - 1.0) / det)
}

/// Same cost with both DMs observing `x` exactly.
pub fn static_quadratic() -> TeamProblem {
    let dm = DecisionMaker {
        action: ActionSpec::interval(-20.0, 20.0),
        observation: VectorFamily::Zero { dim: 1 },
        noise_scale: Mat::scalar(1.0),
        information: InformationStructure::current_state(),
    };
    static_team("static_quadratic", vec![dm.clone(), dm])
}

/// The five simulation test problems with the default profiles used in
/// cross-checks, in a fixed order.
pub fn test_suite() -> Vec<(TeamProblem, PolicyProfile)> {
    let c1 = tanh_filter();
    let p1 = linear_in_latest(&c1, &[-0.5]);
    let c2 = saturation_pair();
    let p2 = linear_in_latest(&c2, &[-0.4, -0.4]);
    let c3 = lq_scalar(-0.5, 1.0, 1.0, 1.0, 1.0);
    let p3 = lq_feedback(&[-0.8], 1.0);
    let d1 = tanh_filter_discrete();
    let q1 = linear_in_latest(&d1, &[-0.5]);
    let d2 = relay_pair_discrete();
    let q2 = linear_in_latest(&d2, &[-0.4, -0.4]);
    vec![(c1, p1), (c2, p2), (c3, p3), (d1, q1), (d2, q2)]
}

/// Looks up a built-in problem and its default profile.
pub fn by_name(name: &str) -> Result<(TeamProblem, PolicyProfile)> {
    let suite = test_suite();
    let pick = |i: usize| suite[i].clone();
    Ok(match name {
        "tanh_filter" => pick(0),
        "saturation_pair" => pick(1),
        "lq_scalar" => pick(2),
        "tanh_filter_discrete" => pick(3),
        "relay_pair_discrete" => pick(4),
        "radner" => {
            let p = radner(0.5, 1.0);
            let profile = linear_in_latest(&p, &[0.3, 0.2]);
            (p, profile)
        }
        "static_quadratic" => {
            let p = static_quadratic();
            let profile = PolicyProfile::zeros(&p, Basis::Polynomial { degree: 1 }, 1, vec![]);
            (p, profile)
        }
        "witsenhausen" => {
            let spec = crate::witsenhausen::WitsenhausenSpec::new(0.5, 1.0, 1.0)?;
            let (a, b) = crate::witsenhausen::wits_affine_baseline(&spec)?.0;
            crate::witsenhausen::team_problem(&spec, &crate::witsenhausen::StagePolicies::affine(&spec, a, b))?
        }
        other => {
            return Err(TeamsError::Config(format!("unknown built-in problem `{other}` (known: {})", NAMES.join(", "))))
        }
    })
}

/// Finite coordination team: `ω` uniform on `{0, 1, 2, 3}`, each DM observes
/// `ω` correctly with probability 0.7 (else one of the other three values),
/// actions `{−1, 0, 1}`, cost `(a₁ + a₂ − (ω − 1.5))² + ½(a₁² + a₂²)`.
pub fn finite_coordination() -> Result<FiniteTeam> {
    let lik: Vec<Vec<f64>> = (0..4).map(|w| (0..4).map(|y| if y == w { 0.7 } else { 0.1 }).collect()).collect();
    FiniteTeam::new(
        &[0.25; 4],
        &[lik.clone(), lik],
        vec![vec![-1.0, 0.0, 1.0]; 2],
        |w, a| {
            let s = a[0] + a[1] - (w as f64 - 1.5);
            s * s + 0.5 * (a[0] * a[0] + a[1] * a[1])
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_name_resolves_to_a_consistent_pair() {
        for name in NAMES {
            let (p, prof) = by_name(name).unwrap();
            p.check_shapes().unwrap();
            prof.check(&p).unwrap();
        }
        assert!(matches!(by_name("nope"), Err(TeamsError::Config(_))));
    }

    #[test]
    fn radner_gains_solve_the_normal_equations() {
        let (s1, s2) = (0.5, 1.0);
        let (a1, a2) = radner_gains(s1, s2);
        assert!((2.0 * (1.0 + s1 * s1) * a1 + a2 - 1.0).abs() < 1e-12);
        assert!((a1 + 2.0 * (1.0 + s2 * s2) * a2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lq_feedback_splits_the_horizon_evenly() {
        let prof = lq_feedback(&[-1.0, -2.0, -3.0, -4.0], 2.0);
        let Policy::Regular(r) = &prof.per_dm[0] else { panic!() };
        assert_eq!(r.switch_times, vec![0.5, 1.0, 1.5]);
        assert_eq!(r.coefficients[2].as_slice(), &[0.0, -3.0]);
    }

    #[test]
    fn coordination_team_enumerates_all_table_pairs() {
        let team = finite_coordination().unwrap();
        assert_eq!(team.pure_profile_count(), Some(3usize.pow(8)));
    }
}
