mod common;

use common::*;
use qgda_core::stochastic::{
    heun_form_check, stoch_step, synthesize_xi, transport_noise, BetaExtrapolation, NoiseStream, XiSpec,
};

fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

#[test]
fn zero_increments_reproduce_the_deterministic_step() {
    let m = model(65, 33, physical(3600.0));
    let xi = synthesize_xi(
        m.grid(),
        &XiSpec {
            modes: 8,
            amplitude: 4.0,
            spectrum: 1.0,
            layer_ratio: 0.5,
            seed: 1,
        },
    )
    .unwrap();
    let start = smooth_state(&m, 4, 0.5);
    let (mut a, mut b) = (start.clone(), start);
    let zeros = vec![0.0; xi.len()];
    for _ in 0..100 {
        m.step(&mut a).unwrap();
        stoch_step(&m, &mut b, &xi, &zeros, Some(&zeros), BetaExtrapolation::Verbatim).unwrap();
    }
    assert!(rel_diff(a.q.data(), b.q.data()) <= 1e-12);
    assert!(rel_diff(&a.q_faces.x, &b.q_faces.x) <= 1e-12);
    assert!(rel_diff(&a.q_faces.y, &b.q_faces.y) <= 1e-12);
    assert!(rel_diff(&a.vel.x, &b.vel.x) <= 1e-12);
    assert!(rel_diff(&a.vel.y, &b.vel.y) <= 1e-12);
}

#[test]
fn noise_changes_the_trajectory_reproducibly() {
    let m = model(32, 16, physical(3600.0));
    let xi = synthesize_xi(
        m.grid(),
        &XiSpec {
            modes: 4,
            amplitude: 4.0,
            spectrum: 1.0,
            layer_ratio: 0.5,
            seed: 1,
        },
    )
    .unwrap();
    let start = smooth_state(&m, 2, 0.3);
    let run = |seed: u64| {
        let s = NoiseStream::new(seed);
        let mut st = start.clone();
        for n in 0..10 {
            let dw = s.increments(n, xi.len(), 3600.0);
            stoch_step(&m, &mut st, &xi, &dw, None, BetaExtrapolation::Verbatim).unwrap();
        }
        st
    };
    assert_eq!(run(9).q, run(9).q);
    assert!(run(9).q.max_abs_diff(&run(10).q) > 0.0);
}

#[test]
fn drift_only_enters_the_corrector() {
    let m = model(16, 8, physical(3600.0));
    let xi = synthesize_xi(
        m.grid(),
        &XiSpec {
            modes: 2,
            amplitude: 4.0,
            spectrum: 1.0,
            layer_ratio: 0.5,
            seed: 1,
        },
    )
    .unwrap();
    let dw = [0.3, -0.2];
    let n = transport_noise(&xi, &dw, Some(&[1e-4, 2e-4]), 3600.0, BetaExtrapolation::Verbatim).unwrap();
    assert_eq!(n.xi_dw, xi.combine(&dw).unwrap());
    let expected = xi.combine(&[0.3 + 0.36, -0.2 + 0.72]).unwrap();
    assert!(rel_diff(&expected.x, &n.xi_dw_corrector.x) < 1e-14);
    assert!(rel_diff(&expected.y, &n.xi_dw_corrector.y) < 1e-14);
    assert_eq!(n.beta_factor, 2.0);
    assert!(transport_noise(&xi, &dw, Some(&[1.0]), 3600.0, BetaExtrapolation::Verbatim).is_err());
}

#[test]
fn scheme_matches_its_heun_reading() {
    let m = model(32, 16, physical(3600.0));
    let xi = synthesize_xi(
        m.grid(),
        &XiSpec {
            modes: 4,
            amplitude: 4.0,
            spectrum: 1.0,
            layer_ratio: 0.5,
            seed: 3,
        },
    )
    .unwrap();
    let mut st = smooth_state(&m, 5, 0.3);
    m.step(&mut st).unwrap();
    let dw = NoiseStream::new(1).increments(0, 4, 3600.0);
    let report = heun_form_check(&m, &st, &xi, &dw, BetaExtrapolation::Verbatim).unwrap();
    assert!(report.max_rel_diff < 1e-10, "{report:?}");
}
