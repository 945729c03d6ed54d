//! Martingale identities on simulated trees, checked lag by lag.

use std::sync::Arc;

use mbrw::branching::{run_series, Caps, Functionals, MartingaleSeries};
use mbrw::cone::{Direction, PosMatrix};
use mbrw::model::{ModelSpec, OffspringLaw};
use mbrw::renewal::{estimate_v, Walker};
use mbrw::rng::Streams;
use mbrw::spectral::{calibrate_boundary, dominant_eigen, BoundaryData, CalibrationMode, DirectionGrid, DEFAULT_TOL};
use mbrw::spine::HarmonicEvaluator;
use mbrw::stats::{median, Estimate};

fn mat(rows: &[&[f64]]) -> PosMatrix {
    PosMatrix::new(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
}

fn boundary_model() -> (ModelSpec, BoundaryData) {
    let spec = ModelSpec::new(
        OffspringLaw::FiniteSupport { support: vec![(0, 0.05), (1, 0.8), (2, 0.15)] },
        vec![(mat(&[&[1.0, 0.8], &[0.9, 1.0]]), 0.5), (mat(&[&[0.3, 0.27], &[0.24, 0.3]]), 0.5)],
        1.0,
        "two atom",
    )
    .unwrap();
    calibrate_boundary(&spec, CalibrationMode::SolveAlpha, &DirectionGrid::new(2, Some(256)).unwrap(), DEFAULT_TOL).unwrap()
}


fn increments(series: &[MartingaleSeries], n: usize, value: impl Fn(&mbrw::branching::SeriesRow) -> f64) -> Estimate {
    let d: Vec<f64> = series
        .iter()
        .map(|s| value(s.row(n + 1).unwrap()) - value(s.row(n).unwrap()))
        .collect();
    Estimate::from_samples(&d, 0)
}

#[test]
fn increments_of_w_and_d_have_mean_zero_at_every_lag() {
    let (spec, bd) = boundary_model();
    let g = bd.grid().clone();
    let additive: Vec<_> = [0.4, bd.alpha, 1.2].iter().map(|s| dominant_eigen(&spec, *s, &g, DEFAULT_TOL).unwrap()).collect();
    let x = Direction::new(vec![0.3, 0.7]).unwrap();
    let series = run_series(&spec, &x, 0.5, 10, Functionals::new(&additive, Some(&bd)), &Caps::default(), Streams::new(201), 20_000, 0).unwrap();
    for n in 0..10 {
        for k in 0..additive.len() {
            let e = increments(&series, n, |r| r.w[k]);
            assert!(e.within(0.0, 3.5, 0.0), "W(s_{k}) lag {n}: {} ± {}", e.value, e.se);
        }
        let e = increments(&series, n, |r| r.d.unwrap());
        assert!(e.within(0.0, 3.5, 0.0), "D lag {n}: {} ± {}", e.value, e.se);
    }
}

#[test]
fn killed_harmonic_martingale_is_conserved() {
    let (spec, bd) = boundary_model();
    let w = Walker::new(&spec, &bd).unwrap();
    let table = estimate_v(&w, &DirectionGrid::new(2, Some(8)).unwrap(), 30.0, 1.0, &[64, 128, 256], 10_000, &Streams::new(202), 0, &spec.hash()).unwrap();
    let h = HarmonicEvaluator::v_alpha_beta(Arc::new(table), 1.0);
    let x = Direction::uniform(2);
    let funcs = Functionals { harmonic: Some(&h), ..Functionals::new(&[], Some(&bd)) };
    let series = run_series(&spec, &x, 2.0, 8, funcs, &Caps::default(), Streams::new(203), 20_000, 0).unwrap();
    let slack = h.certified_error();
    let root = series[0].row(0).unwrap().m_h.unwrap();
    for n in 0..8 {
        let e = increments(&series, n, |r| r.m_h.unwrap());
        assert!(e.within(0.0, 3.5, slack * root), "M^h lag {n}: {} ± {}", e.value, e.se);
    }
}

#[test]
fn additive_martingale_dies_and_the_minimum_drifts_up_on_survival() {
    let (spec, bd) = boundary_model();
    let additive = vec![bd.spectral.clone()];
    let x = Direction::uniform(2);
    let depths = [20, 40, 80];
    let funcs = Functionals { at: Some(&depths), ..Functionals::new(&additive, None) };
    let caps = Caps::default();
    let series = run_series(&spec, &x, 0.0, 80, funcs, &caps, Streams::new(204), 3000, 0).unwrap();
    let alive: Vec<&MartingaleSeries> = series.iter().filter(|s| s.survived()).collect();
    assert!(alive.len() > 1500);
    let medians: Vec<f64> = depths.iter().map(|n| median(&alive.iter().map(|s| s.row(*n).unwrap().w[0]).collect::<Vec<_>>())).collect();
    assert!(medians.windows(2).all(|m| m[1] < m[0]), "{medians:?}");
    let up = alive.iter().filter(|s| s.row(80).unwrap().min_s > s.row(40).unwrap().min_s).count();
    assert!(up as f64 > 0.5 * alive.len() as f64, "{up} of {}", alive.len());
}

#[test]
fn series_bytes_depend_only_on_the_seed() {
    let (spec, bd) = boundary_model();
    let additive = vec![bd.spectral.clone()];
    let x = Direction::uniform(2);
    let run = |seed, threads| {
        let s = run_series(&spec, &x, 0.0, 12, Functionals::new(&additive, Some(&bd)), &Caps::default(), Streams::new(seed), 200, threads).unwrap();
        serde_json::to_vec(&s).unwrap()
    };
    assert_eq!(run(5, 1), run(5, 3));
    assert_ne!(run(5, 1), run(6, 1));
}
