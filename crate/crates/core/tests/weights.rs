use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use qgda_core::filter::{
    find_tempering_steps, find_tempering_steps_with_base, systematic_resample, NudgeSystem, TemperingLedger,
    TemperingMode,
};
use qgda_core::grid::make_equidistant_stations;
use qgda_core::observations::{
    ess, ess_from_log, girsanov_correction, log_girsanov_weight, log_likelihood_weight, normalize_log_weights,
    observe_truth, GirsanovSign, ObservationRecord, SigmaSource, WeightReport,
};
use qgda_core::stochastic::NoiseStream;
use qgda_core::Grid;

fn stations(n: usize) -> qgda_core::StationSet {
    let g = Grid::new(16, 8, 1.0e6, 5.0e5).unwrap();
    make_equidistant_stations(&g, 1, n).unwrap()
}

fn record(values: Vec<[f64; 2]>, sigma: Vec<[f64; 2]>) -> ObservationRecord {
    let st = stations(values.len());
    ObservationRecord::new(0.0, st, values, sigma, SigmaSource::Fixed).unwrap()
}

#[test]
fn ess_examples() {
    assert!((ess(&[1.0; 100]).unwrap() - 100.0).abs() < 1e-12);
    let mut w = vec![0.0; 37];
    w[5] = 0.3;
    assert!((ess(&w).unwrap() - 1.0).abs() < 1e-12);
    assert!((ess(&[2.0, 1.0, 1.0]).unwrap() - 8.0 / 3.0).abs() < 1e-12);
    assert!(ess(&[0.0; 4]).is_err());
}

#[test]
fn likelihood_examples() {
    let obs = record(vec![[1.0, 2.0]], vec![[0.5, 0.5]]);
    assert_eq!(log_likelihood_weight(&[[1.0, 2.0]], &obs).unwrap(), 0.0);
    let ll = log_likelihood_weight(&[[1.5, 2.0]], &obs).unwrap();
    assert!((ll + 0.5).abs() < 1e-15);
    assert!((ll.exp() - 0.6065).abs() < 1e-4);

    let two = record(vec![[1.0, 2.0], [3.0, 4.0]], vec![[0.5, 0.5], [1.0, 1.0]]);
    assert_eq!(log_likelihood_weight(&[[1.5, 2.0], [3.0, 4.0]], &two).unwrap(), ll);
}

#[test]
fn girsanov_examples() {
    let obs = record(vec![[0.0, 0.0]], vec![[1.0, 1.0]]);
    let pred = [[0.3, -0.2]];
    let ll = log_likelihood_weight(&pred, &obs).unwrap();
    assert_eq!(
        log_girsanov_weight(&pred, &obs, &[0.0; 3], &[0.4, 0.1, -2.0], 3600.0).unwrap(),
        ll
    );
    let c0 = log_girsanov_weight(&pred, &obs, &[1.0], &[0.0], 1.0).unwrap() - ll;
    let c1 = log_girsanov_weight(&pred, &obs, &[1.0], &[1.0], 1.0).unwrap() - ll;
    assert!((c0 + 0.5).abs() < 1e-15);
    assert!((c1 - 0.5).abs() < 1e-15);
    assert!(log_girsanov_weight(&pred, &obs, &[1.0, 2.0], &[1.0], 1.0).is_err());
    // the default convention flips only the ΔW term
    assert_eq!(
        girsanov_correction(&[1.0], &[1.0], 1.0, GirsanovSign::Consistent).unwrap(),
        -1.5
    );
}

#[test]
fn observation_noise_is_standard_normal() {
    let st = stations(4);
    let truth = vec![[0.1, -0.2], [0.0, 0.05], [1.0, 1.0], [-0.3, 0.7]];
    let sigma = vec![[0.2, 0.1], [0.05, 0.3], [1.0, 2.0], [0.01, 0.5]];
    let stream = NoiseStream::new(77);
    let mut z = Vec::new();
    for k in 0..2500 {
        let rec = observe_truth(0.0, &truth, &st, &sigma, SigmaSource::Fixed, &stream, k).unwrap();
        for ((y, t), s) in rec.values.iter().zip(&truth).zip(&sigma) {
            z.push((y[0] - t[0]) / s[0]);
            z.push((y[1] - t[1]) / s[1]);
        }
    }
    let n = z.len() as f64;
    let mean = z.iter().sum::<f64>() / n;
    let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() < 0.05, "mean {mean}");
    assert!((var - 1.0).abs() < 0.05, "variance {var}");

    let a = observe_truth(0.0, &truth, &st, &sigma, SigmaSource::Fixed, &stream, 3).unwrap();
    let b = observe_truth(0.0, &truth, &st, &sigma, SigmaSource::Fixed, &stream, 3).unwrap();
    assert_eq!(a, b);
}

#[test]
fn resampling_is_unbiased() {
    let w = normalize_log_weights(&[0.0, -0.3, -1.2, -0.05, -2.0, -0.7, -0.1, -4.0]).unwrap();
    let n = w.len();
    let stream = NoiseStream::new(5);
    let draws = 100_000;
    let mut counts = vec![0u64; n];
    for u in stream.uniforms(0, draws) {
        for a in systematic_resample(&w, u) {
            counts[a] += 1;
        }
    }
    for (c, wi) in counts.iter().zip(&w) {
        let freq = *c as f64 / draws as f64;
        let expected = n as f64 * wi;
        assert!(
            (freq - expected).abs() <= 0.01 * expected.max(1.0),
            "{freq} vs {expected}"
        );
    }
}

#[test]
fn tempering_search_example() {
    let mut lw = vec![-50.0; 100];
    lw[0] = 0.0;
    let p = find_tempering_steps(&lw, 80.0);
    let ess_at = |p: usize| ess_from_log(&lw.iter().map(|l| l / p as f64).collect::<Vec<_>>()).unwrap();
    let brute = (1..).find(|&q| ess_at(q) >= 80.0).unwrap();
    assert_eq!(p, brute);
    assert_eq!(find_tempering_steps(&[0.0; 10], 8.0), 1);
}

fn nudge_system(m: usize, k: usize, entries: &[f64], dt: f64) -> NudgeSystem {
    let b = DMatrix::from_iterator(m, k, entries.iter().take(m * k).copied());
    let r = DVector::from_iterator(m, entries.iter().skip(m * k).take(m).copied());
    NudgeSystem::new(b, r, dt).unwrap()
}

#[test]
fn nudge_scalar_closed_form() {
    for &(b, a, y, sigma, dt) in &[
        (0.7, 1.3, 0.2, 0.5, 1.0),
        (-2.0, 0.0, 3.0, 0.1, 3600.0),
        (1e-3, 5.0, -1.0, 2.0, 10.0),
    ] {
        let sys = NudgeSystem::new(
            DMatrix::from_element(1, 1, b / sigma),
            DVector::from_element(1, (a - y) / sigma),
            dt,
        )
        .unwrap();
        let lambda = sys.solve().unwrap()[0];
        let expected = -b * (a - y) / (sigma * sigma) / (dt * b * b / (sigma * sigma) + 1.0);
        assert!(
            (lambda - expected).abs() <= 1e-12 * expected.abs().max(1e-12),
            "{lambda} vs {expected}"
        );
    }
}

#[test]
fn nudge_without_response_is_zero() {
    let sys = NudgeSystem::new(
        DMatrix::zeros(6, 3),
        DVector::from_vec(vec![1.0, -2.0, 0.5, 0.0, 3.0, 1.0]),
        3600.0,
    )
    .unwrap();
    assert_eq!(sys.solve().unwrap(), DVector::zeros(3));
    assert!(NudgeSystem::new(DMatrix::zeros(2, 1), DVector::from_vec(vec![f64::NAN, 0.0]), 1.0).is_err());
}

proptest! {
    #[test]
    fn ess_is_scale_invariant_and_bounded(w in prop::collection::vec(0.0f64..10.0, 1..60), c in 1e-3f64..1e3) {
        prop_assume!(w.iter().any(|v| *v > 0.0));
        let e = ess(&w).unwrap();
        let scaled: Vec<f64> = w.iter().map(|v| v * c).collect();
        prop_assert!((ess(&scaled).unwrap() - e).abs() <= 1e-9 * e);
        prop_assert!(e >= 1.0 - 1e-12 && e <= w.len() as f64 + 1e-12);
    }

    #[test]
    fn weight_report_is_normalised(lw in prop::collection::vec(-300.0f64..0.0, 1..50)) {
        let r = WeightReport::from_log_weights(lw.clone()).unwrap();
        prop_assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(r.ess >= 1.0 - 1e-12 && r.ess <= lw.len() as f64 + 1e-12);
    }

    #[test]
    fn tempered_ess_decreases_with_temperature(lw in prop::collection::vec(-40.0f64..0.0, 2..40)) {
        let mut last = f64::INFINITY;
        for k in 1..=20 {
            let phi = k as f64 / 20.0;
            let e = ess_from_log(&lw.iter().map(|l| phi * l).collect::<Vec<_>>()).unwrap();
            prop_assert!(e <= last + 1e-9);
            last = e;
        }
    }

    #[test]
    fn tempering_contract(lw in prop::collection::vec(-500.0f64..0.0, 2..80), frac in 0.05f64..1.0) {
        let n_star = (frac * lw.len() as f64).max(1.0);
        let p = find_tempering_steps(&lw, n_star);
        let at = |p: usize| ess_from_log(&lw.iter().map(|l| l / p as f64).collect::<Vec<_>>()).unwrap();
        prop_assert!(at(p) >= n_star);
        if p > 1 {
            prop_assert!(at(p - 1) < n_star);
        }
        for mode in [TemperingMode::Incremental, TemperingMode::Literal] {
            let ledger = TemperingLedger::new(p, mode);
            prop_assert_eq!(ledger.stages(), p);
            if mode == TemperingMode::Incremental {
                prop_assert!(ledger.is_exactly_one());
            }
        }
    }

    #[test]
    fn tempering_with_flat_base_matches_plain_search(lw in prop::collection::vec(-200.0f64..0.0, 2..40), frac in 0.1f64..1.0) {
        let n_star = (frac * lw.len() as f64).max(1.0);
        let base = vec![0.0; lw.len()];
        prop_assert_eq!(find_tempering_steps_with_base(&base, &lw, n_star, 1 << 30), find_tempering_steps(&lw, n_star));
    }

    #[test]
    fn offspring_counts_within_one(lw in prop::collection::vec(-20.0f64..0.0, 1..64), u in 0.0f64..1.0) {
        let w = normalize_log_weights(&lw).unwrap();
        let anc = systematic_resample(&w, u);
        prop_assert_eq!(anc.len(), w.len());
        prop_assert!(anc.windows(2).all(|p| p[0] <= p[1]));
        for (i, wi) in w.iter().enumerate() {
            let c = anc.iter().filter(|&&a| a == i).count() as f64;
            prop_assert!((c - w.len() as f64 * wi).abs() < 1.0 + 1e-9);
        }
    }

    #[test]
    fn nudge_is_optimal(
        m in 1usize..12,
        k in 1usize..9,
        entries in prop::collection::vec(-3.0f64..3.0, 12 * 9 + 12),
        log_dt in -2.0f64..4.0,
    ) {
        let dt = 10f64.powf(log_dt);
        let sys = nudge_system(m, k, &entries, dt);
        let lambda = sys.solve().unwrap();
        let g = sys.gradient(&lambda);
        prop_assert!(g.norm() <= 1e-8 * (1.0 + sys.r.norm()), "gradient {}", g.norm());
        let q = sys.objective(&lambda);
        prop_assert!(q <= sys.objective(&DVector::zeros(k)) + 1e-12);
        for i in 0..k {
            for eps in [1e-4, -1e-4] {
                let mut l = lambda.clone();
                l[i] += eps;
                prop_assert!(q <= sys.objective(&l) + 1e-12 * q.abs().max(1.0));
            }
        }
    }
}
