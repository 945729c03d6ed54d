use approx::assert_abs_diff_eq;

use super::*;
use crate::cone::{act, cocycle, Direction, PosMatrix};
use crate::model::{ModelSpec, OffspringLaw};

fn mat(rows: &[&[f64]]) -> PosMatrix {
    PosMatrix::new(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
}

/// Atoms `c_j J` with `(c1, c2) = (e^{-1}/2, e/2)`, equal weights.
fn rank_one(offspring: OffspringLaw) -> ModelSpec {
    let c = [(-1f64).exp() / 2.0, 1f64.exp() / 2.0];
    ModelSpec::new(
        offspring,
        c.iter().map(|c| (PosMatrix::constant(2, *c), 0.5)).collect(),
        1.0,
        "rank one",
    )
    .unwrap()
}

fn golden() -> ModelSpec {
    ModelSpec::new(
        OffspringLaw::Deterministic { n: 1 },
        vec![(mat(&[&[2.0, 1.0], &[1.0, 1.0]]), 1.0)],
        1.0,
        "single",
    )
    .unwrap()
}

fn mixed() -> ModelSpec {
    ModelSpec::new(
        OffspringLaw::FiniteSupport { support: vec![(1, 0.9), (2, 0.1)] },
        vec![
            (mat(&[&[1.0, 0.5], &[0.6, 1.0]]), 0.5),
            (mat(&[&[0.1, 0.06], &[0.05, 0.12]]), 0.5),
        ],
        1.0,
        "mixed",
    )
    .unwrap()
}

fn grid(g: usize) -> DirectionGrid {
    DirectionGrid::new(2, Some(g)).unwrap()
}

const RHO: f64 = 2.618_033_988_749_895; // (3 + √5) / 2

#[test]
fn p0_of_one_is_mean_offspring() {
    let spec = mixed();
    let g = grid(64);
    let out = apply_ps(&spec, 0.0, &vec![1.0; g.len()], &g);
    assert!(out.iter().all(|v| (v - 1.1).abs() < 1e-14));
}

#[test]
fn rank_one_transfer_operator_is_constant() {
    let spec = rank_one(OffspringLaw::Poisson { mean: 1.7 });
    let g = grid(32);
    for s in [0.3, 1.0, 2.5] {
        let expected = 1.7 * 0.5 * ((-s as f64).exp() + (s as f64).exp());
        let out = apply_ps(&spec, s, &vec![1.0; g.len()], &g);
        assert!(out.iter().all(|v| (v - expected).abs() < 1e-12 * expected));
        let d = dominant_eigen(&spec, s, &g, DEFAULT_TOL).unwrap();
        assert_abs_diff_eq!(d.m_s, expected, epsilon = 1e-10 * expected);
        assert!(d.r.iter().all(|r| (r - 1.0).abs() < 1e-8));
    }
}

#[test]
fn perron_test_function_is_an_eigenfunction() {
    // r(x) = (u·x)^s with u the left Perron vector of A satisfies
    // P_s r = ρ^s r for the single-matrix chain.
    let spec = golden();
    let u = [RHO - 1.0, 1.0];
    let s = 0.7;
    let g = grid(256);
    let r = g.tabulate(|x| (u[0] * x[0] + u[1] * x[1]).powf(s));
    let pr = apply_ps(&spec, s, &r, &g);
    for (a, b) in pr.iter().zip(&r) {
        assert!((a / b - RHO.powf(s)).abs() < 1e-5);
    }
}

#[test]
fn single_matrix_eigenvalue_is_perron_root_power() {
    let spec = golden();
    for s in [0.5, 1.0, 2.0] {
        let d = dominant_eigen(&spec, s, &grid(512), DEFAULT_TOL).unwrap();
        assert!((d.m_s - RHO.powf(s)).abs() < 1e-5 * RHO.powf(s), "s={s} m={}", d.m_s);
        assert!(d.residual <= 1e-8);
    }
}

#[test]
fn zero_parameter_gives_mean_and_constant_eigenfunction() {
    let d = dominant_eigen(&mixed(), 0.0, &grid(128), DEFAULT_TOL).unwrap();
    assert_abs_diff_eq!(d.m_s, 1.1, epsilon = 1e-14);
    assert!(d.r.iter().all(|r| (r - 1.0).abs() < 1e-14));
    assert_abs_diff_eq!(d.nu.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    assert_abs_diff_eq!(d.pi.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
}

#[test]
fn invariant_law_is_r_times_nu() {
    let d = dominant_eigen(&mixed(), 1.3, &grid(128), DEFAULT_TOL).unwrap();
    let z: f64 = d.r.iter().zip(&d.nu).map(|(a, b)| a * b).sum();
    for i in 0..d.r.len() {
        assert_abs_diff_eq!(d.pi[i], d.r[i] * d.nu[i] / z, epsilon = 1e-15);
    }
    assert!(d.r.iter().all(|r| *r > 0.0) && d.nu.iter().all(|v| *v >= 0.0));
    assert_abs_diff_eq!(d.r.iter().copied().fold(0.0, f64::max), 1.0, epsilon = 1e-15);
}

#[test]
fn dual_of_symmetric_models_matches_primal() {
    let g = grid(128);
    for spec in [golden(), rank_one(OffspringLaw::Deterministic { n: 2 })] {
        let p = dominant_eigen(&spec, 1.2, &g, DEFAULT_TOL).unwrap();
        let d = dominant_eigen_dual(&spec, 1.2, &g, DEFAULT_TOL).unwrap();
        assert!(d.dual);
        assert!((p.m_s - d.m_s).abs() <= 2.0 * DEFAULT_TOL * p.m_s);
        for (a, b) in p.r.iter().zip(&d.r) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn dual_of_asymmetric_model_agrees_within_discretization() {
    let g = grid(512);
    let p = dominant_eigen(&mixed(), 1.0, &g, DEFAULT_TOL).unwrap();
    let d = dominant_eigen_dual(&mixed(), 1.0, &g, DEFAULT_TOL).unwrap();
    assert!((p.m_s - d.m_s).abs() < 1e-5 * p.m_s);
}

#[test]
fn big_m_closed_forms() {
    let c = 0.3;
    let spec = ModelSpec::new(
        OffspringLaw::Poisson { mean: 1.5 },
        vec![(PosMatrix::constant(2, c), 1.0)],
        1.0,
        "",
    )
    .unwrap();
    let g = grid(32);
    let (m, mp) = big_m(&spec, 0.8, &g).unwrap();
    assert_abs_diff_eq!(m, 1.5f64.ln() + 0.8 * (2.0 * c).ln(), epsilon = 1e-12);
    assert_abs_diff_eq!(mp, (2.0 * c).ln(), epsilon = 1e-8);

    let (m0, _) = big_m(&mixed(), 0.0, &grid(128)).unwrap();
    assert_abs_diff_eq!(m0, 1.1f64.ln(), epsilon = 1e-13);

    // Central difference against a wider secant.
    let g = grid(256);
    let s = 1.1;
    let (_, mp) = big_m(&mixed(), s, &g).unwrap();
    let at = |t: f64| dominant_eigen(&mixed(), t, &g, DEFAULT_TOL).unwrap().log_m();
    let secant = (at(s + 1e-3) - at(s - 1e-3)) / 2e-3;
    assert!((mp - secant).abs() < 1e-5);
    // And against the exact discrete derivative.
    let exact = dominant_eigen(&mixed(), s, &g, DEFAULT_TOL).unwrap().log_m_prime_exact;
    assert!((mp - exact).abs() < 1e-7, "{mp} {exact}");
}

#[test]
fn log_m_is_convex() {
    let g = grid(128);
    let vals: Vec<f64> = (0..25)
        .map(|k| dominant_eigen(&mixed(), 0.1 + 0.2 * k as f64, &g, DEFAULT_TOL).unwrap().log_m())
        .collect();
    for w in vals.windows(3) {
        assert!(w[0] - 2.0 * w[1] + w[2] >= -1e-8);
    }
}

#[test]
fn grid_refinement_is_second_order() {
    // Rank-one models are exact on any grid, and two-map models have a
    // singular stationary law, so the order is read off successive
    // differences on three overlapping atoms.
    let spec = ModelSpec::new(
        OffspringLaw::Deterministic { n: 1 },
        vec![
            (mat(&[&[1.0, 0.3], &[0.2, 0.8]]), 1.0 / 3.0),
            (mat(&[&[0.7, 0.25], &[0.3, 1.0]]), 1.0 / 3.0),
            (mat(&[&[1.0, 0.6], &[0.5, 1.0]]), 1.0 / 3.0),
        ],
        1.0,
        "",
    )
    .unwrap();
    let m = |g: usize| dominant_eigen(&spec, 1.5, &grid(g), DEFAULT_TOL).unwrap().m_s;
    let vals: Vec<f64> = [32, 64, 128, 256, 512, 1024].iter().map(|g| m(*g)).collect();
    let diffs: Vec<f64> = vals.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    for w in diffs.windows(2) {
        let ratio = w[0] / w[1];
        assert!((3.0..=5.0).contains(&ratio), "differences {diffs:?}");
    }
}

#[test]
fn fix_alpha_reproduces_one_dimensional_boundary() {
    let spec = rank_one(OffspringLaw::Poisson { mean: 2.0 });
    let (cal, bd) = calibrate_boundary(&spec, CalibrationMode::FixAlpha { alpha: 1.0 }, &grid(64), DEFAULT_TOL).unwrap();
    let t = 1f64.tanh();
    assert_abs_diff_eq!(cal.scale_lambda, (-t).exp(), epsilon = 1e-12);
    assert_abs_diff_eq!(cal.mean_offspring(), (t - 1f64.cosh().ln()).exp(), epsilon = 1e-12);
    // 1-D closed form: log(E N Σ q_j e^{-s a_j}) with a_j = -log(2 λ c_j).
    let one_d = |s: f64| {
        let a = [1.0 + t, -1.0 + t];
        (cal.mean_offspring() * a.iter().map(|a| 0.5 * (-s * a).exp()).sum::<f64>()).ln()
    };
    assert!(one_d(1.0).abs() < 1e-12);
    assert!(bd.m_value.abs() < 1e-8 && bd.m_prime.abs() < 1e-6);
    assert_abs_diff_eq!(bd.alpha, 1.0);
}

#[test]
fn solve_alpha_on_rank_one_matches_closed_form() {
    // M(s) = log 1.1 + log cosh s + s log λ; the tangent condition is
    // log 1.1 + log cosh α = α tanh α.
    let spec = rank_one(OffspringLaw::FiniteSupport { support: vec![(1, 0.9), (2, 0.1)] });
    let (cal, bd) = calibrate_boundary(&spec, CalibrationMode::SolveAlpha, &grid(64), DEFAULT_TOL).unwrap();
    let a = bd.alpha;
    assert!((1.1f64.ln() + a.cosh().ln() - a * a.tanh()).abs() < 1e-12);
    assert_abs_diff_eq!(cal.scale_lambda, (-a.tanh()).exp(), epsilon = 1e-12);
    assert_eq!(cal.mean_offspring(), spec.mean_offspring());
}

#[test]
fn single_atom_cannot_be_calibrated() {
    let spec = ModelSpec::new(
        OffspringLaw::Deterministic { n: 2 },
        vec![(mat(&[&[2.0, 1.0], &[1.0, 1.0]]), 1.0)],
        1.0,
        "",
    )
    .unwrap();
    let err = calibrate_boundary(&spec, CalibrationMode::SolveAlpha, &grid(64), DEFAULT_TOL).unwrap_err();
    assert!(err.to_string().contains("no boundary parameter in range"), "{err}");
    let err = calibrate_boundary(&spec, CalibrationMode::FixAlpha { alpha: 1.0 }, &grid(64), DEFAULT_TOL).unwrap_err();
    assert!(err.to_string().contains("not supercritical"), "{err}");
}

#[test]
fn calibration_is_a_fixed_point() {
    let g = grid(256);
    let (cal, bd) = calibrate_boundary(&mixed(), CalibrationMode::SolveAlpha, &g, DEFAULT_TOL).unwrap();
    let (again, bd2) = calibrate_boundary(&cal, CalibrationMode::SolveAlpha, &g, DEFAULT_TOL).unwrap();
    assert!((again.scale_lambda / cal.scale_lambda - 1.0).abs() < 1e-12);
    assert_eq!(again.offspring, cal.offspring);
    assert!((bd.alpha - bd2.alpha).abs() < 1e-10);
}

#[test]
fn boundary_invariants_on_matrix_model() {
    let g = grid(512);
    let (cal, bd) = calibrate_boundary(&mixed(), CalibrationMode::SolveAlpha, &g, DEFAULT_TOL).unwrap();
    assert!(bd.m_value.abs() <= 1e-8);
    assert!(bd.m_prime.abs() <= 1e-6);
    assert!(bd.poisson_residual < 1e-8, "{}", bd.poisson_residual);
    assert!(bd.pi_psi.abs() < 1e-10);
    // Eigen residual with m(α) = 1.
    let pr = apply_ps(&cal, bd.alpha, &bd.spectral.r, &g);
    let res = pr.iter().zip(&bd.spectral.r).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(res <= 1e-8, "{res}");
}

/// `E_x Σ_{|u|=1} (S_u + ℓ(X_u)) e^{−αS_u} r(X_u)` with `S_∅ = 0`, summed
/// atom by atom with the cone primitives.
fn one_step_identity_lhs(spec: &ModelSpec, bd: &BoundaryData, x: &[f64]) -> f64 {
    let x = Direction::new(x.to_vec()).unwrap();
    let mut total = 0.0;
    for (g, mass) in spec.intensity().atoms {
        let sigma = cocycle(&g, &x).unwrap();
        let y = act(&g, &x).unwrap();
        let s_u = -sigma;
        total += mass * (s_u + bd.ell_at(y.coords())) * (-bd.alpha * s_u).exp() * bd.r(y.coords());
    }
    total
}

#[test]
fn drift_identity_holds_at_every_node() {
    let g = grid(256);
    let (cal, bd) = calibrate_boundary(&mixed(), CalibrationMode::SolveAlpha, &g, DEFAULT_TOL).unwrap();
    for i in 0..g.len() {
        let x = g.node(i);
        let lhs = one_step_identity_lhs(&cal, &bd, x);
        let rhs = bd.r(x) * bd.ell_at(x);
        assert!((lhs - rhs).abs() < 1e-8, "node {i}: {lhs} vs {rhs}");
    }
    assert!(bd.ell.iter().any(|l| l.abs() > 1e-3), "ell should be nontrivial");
}

#[test]
fn rank_one_drift_vanishes_and_variance_matches() {
    let spec = rank_one(OffspringLaw::FiniteSupport { support: vec![(1, 0.9), (2, 0.1)] });
    let (cal, bd) = calibrate_boundary(&spec, CalibrationMode::SolveAlpha, &grid(64), DEFAULT_TOL).unwrap();
    assert!(bd.ell.iter().all(|l| l.abs() < 1e-10));
    // Tilted weights ∝ q_j (2λc_j)^α on the increments −log(2λc_j).
    let lam = cal.scale_lambda;
    let inc: Vec<f64> = [(-1f64).exp() / 2.0, 1f64.exp() / 2.0].iter().map(|c| -(2.0 * lam * c).ln()).collect();
    let w: Vec<f64> = inc.iter().map(|a| (-bd.alpha * a).exp()).collect();
    let z: f64 = w.iter().sum();
    let mean: f64 = inc.iter().zip(&w).map(|(a, w)| a * w / z).sum();
    let var: f64 = inc.iter().zip(&w).map(|(a, w)| (a - mean).powi(2) * w / z).sum();
    assert!(mean.abs() < 1e-12);
    assert!((bd.sigma2 - var).abs() < 1e-6, "{} vs {var}", bd.sigma2);
}

#[test]
fn variance_from_eigenvalue_matches_poisson_formula() {
    let g = grid(256);
    let (cal, bd) = calibrate_boundary(&mixed(), CalibrationMode::SolveAlpha, &g, DEFAULT_TOL).unwrap();
    let direct = sigma2_poisson(&cal, &bd.spectral, &bd.ell);
    assert!((direct - bd.sigma2).abs() < 1e-6 * direct, "{direct} vs {}", bd.sigma2);
    let s2 = sigma2_alpha(&cal, &bd.spectral, DEFAULT_TOL).unwrap();
    assert!(s2.lambda_prime.abs() < 1e-6);
}

#[test]
fn degenerate_walk_has_no_variance() {
    // One atom c J with λ = 1/(2c): every increment vanishes and m ≡ 1.
    let c = 0.4;
    let spec = ModelSpec::new(
        OffspringLaw::Deterministic { n: 1 },
        vec![(PosMatrix::constant(2, c), 1.0)],
        1.0 / (2.0 * c),
        "",
    )
    .unwrap();
    let d = dominant_eigen(&spec, 1.0, &grid(32), DEFAULT_TOL).unwrap();
    let err = sigma2_alpha(&spec, &d, DEFAULT_TOL).unwrap_err();
    assert!(err.to_string().contains("degenerate"));
}

#[test]
fn kernel_weights_sum_to_one_at_nodes() {
    let g = grid(256);
    let (cal, bd) = calibrate_boundary(&mixed(), CalibrationMode::SolveAlpha, &g, DEFAULT_TOL).unwrap();
    let k = TiltedKernel::new(&cal, &bd.spectral);
    let mut sc = k.scratch();
    for i in 0..g.len() {
        let raw = k.weights(g.node(i), &mut sc).unwrap();
        assert!((raw - 1.0).abs() < 1e-9);
    }
    let raw = k.weights(&[0.123_456, 0.876_544], &mut sc).unwrap();
    assert!((raw - 1.0).abs() < 1e-5);
}

#[test]
fn eigenfunction_scale_does_not_change_the_kernel() {
    let g = grid(128);
    let d = dominant_eigen(&mixed(), 0.9, &g, DEFAULT_TOL).unwrap();
    let mut scaled = d.clone();
    scaled.r.iter_mut().for_each(|r| *r *= 7.5);
    let (k1, k2) = (TiltedKernel::new(&mixed(), &d), TiltedKernel::new(&mixed(), &scaled));
    let (mut a, mut b) = (k1.scratch(), k2.scratch());
    for x in [[0.2, 0.8], [0.55, 0.45]] {
        k1.weights(&x, &mut a).unwrap();
        k2.weights(&x, &mut b).unwrap();
        for (u, v) in a.w.iter().zip(&b.w) {
            assert!((u - v).abs() < 1e-15);
        }
    }
}

#[test]
fn three_dimensional_rank_one_model() {
    let spec = ModelSpec::new(
        OffspringLaw::Deterministic { n: 2 },
        vec![(PosMatrix::constant(3, 0.2), 0.5), (PosMatrix::constant(3, 0.5), 0.5)],
        1.0,
        "",
    )
    .unwrap();
    let g = DirectionGrid::new(3, Some(16)).unwrap();
    let s = 1.3;
    let d = dominant_eigen(&spec, s, &g, DEFAULT_TOL).unwrap();
    let expected = 2.0 * 0.5 * (0.6f64.powf(s) + 1.5f64.powf(s));
    assert_abs_diff_eq!(d.m_s, expected, epsilon = 1e-10 * expected);
}

#[test]
fn spectral_data_json_round_trip() {
    let g = grid(64);
    let (_, bd) = calibrate_boundary(&mixed(), CalibrationMode::SolveAlpha, &g, DEFAULT_TOL).unwrap();
    let back = BoundaryData::from_json(&bd.to_json()).unwrap();
    assert_eq!(back, bd);
}
