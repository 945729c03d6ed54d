use mbrw::cone::PosMatrix;
use mbrw::model::{ModelSpec, OffspringLaw};
use mbrw::spectral::{dominant_eigen, DirectionGrid, TiltedKernel, DEFAULT_TOL};
use proptest::prelude::*;

fn positive_matrix(d: usize) -> impl Strategy<Value = PosMatrix> {
    prop::collection::vec(0.05f64..3.0, d * d).prop_map(move |e| PosMatrix::from_row_major(d, e).unwrap())
}

fn offspring() -> impl Strategy<Value = OffspringLaw> {
    prop_oneof![
        (1u32..4).prop_map(|n| OffspringLaw::Deterministic { n }),
        (0.5f64..3.0).prop_map(|mean| OffspringLaw::Poisson { mean }),
        prop::collection::vec(0.01f64..1.0, 2..5).prop_map(|p| {
            let t: f64 = p.iter().sum();
            OffspringLaw::FiniteSupport { support: p.iter().enumerate().map(|(k, q)| (k as u32, q / t)).collect() }
        }),
    ]
}

fn model(d: usize) -> impl Strategy<Value = ModelSpec> {
    (
        offspring(),
        prop::collection::vec((positive_matrix(d), 0.1f64..1.0), 1..4),
        0.2f64..2.0,
    )
        .prop_map(|(law, atoms, lambda)| {
            let t: f64 = atoms.iter().map(|(_, w)| w).sum();
            let atoms = atoms.into_iter().map(|(m, w)| (m, w / t)).collect();
            ModelSpec::new(law, atoms, lambda, "random").unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn model_json_round_trips(spec in model(2)) {
        let back = ModelSpec::from_json(&spec.to_json()).unwrap();
        prop_assert_eq!(back.hash(), spec.hash());
        prop_assert_eq!(back, spec);
    }

    #[test]
    fn intensity_mass_is_mean_offspring(spec in model(3)) {
        let mass = spec.intensity().total_mass();
        prop_assert!((mass - spec.mean_offspring()).abs() < 1e-12 * mass.max(1.0));
    }

    #[test]
    fn tilted_kernel_is_a_probability(spec in model(2), s in 0.1f64..2.0) {
        let g = DirectionGrid::new(2, Some(32)).unwrap();
        let data = dominant_eigen(&spec, s, &g, DEFAULT_TOL).unwrap();
        let k = TiltedKernel::new(&spec, &data);
        let mut sc = k.scratch();
        for i in 0..g.len() {
            let raw = k.weights(g.node(i), &mut sc).unwrap();
            prop_assert!((raw - 1.0).abs() < 1e-8, "raw weight {} at node {}", raw, i);
            prop_assert!((sc.w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(sc.w.iter().all(|w| *w >= 0.0));
        }
    }

    #[test]
    fn log_m_is_convex(spec in model(2), s in 0.2f64..2.0, h in 0.05f64..0.3) {
        let g = DirectionGrid::new(2, Some(32)).unwrap();
        let lm = |s: f64| dominant_eigen(&spec, s, &g, DEFAULT_TOL).unwrap().log_m();
        prop_assert!(lm(s - h) + lm(s + h) - 2.0 * lm(s) >= -1e-9);
    }
}
