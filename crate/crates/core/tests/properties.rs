mod common;

use proptest::prelude::*;
use qgda_core::diagnostics::{ensemble_mean_error, fit_order, rank_of_truth, relative_bias, RankHistogram};
use qgda_core::elliptic::{apply_pv_operator, velocities_from_psi, EllipticWorkspace};
use qgda_core::snapshot::{Snapshot, SnapshotKind};
use qgda_core::stochastic::NoiseStream;
use qgda_core::{Grid, LayeredField};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn vectors(len: usize, n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<Vec<f64>>)> {
    (
        prop::collection::vec(-5.0f64..5.0, len),
        prop::collection::vec(prop::collection::vec(-5.0f64..5.0, len), n),
    )
}

#[test]
fn calibrated_ensemble_has_flat_ranks() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 19;
    let mut hist = RankHistogram::new(n);
    for _ in 0..10_000 {
        let members: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let truth: f64 = StandardNormal.sample(&mut rng);
        hist.add(rank_of_truth(truth, &members, &mut rng));
    }
    assert_eq!(hist.total(), 10_000);
    assert_eq!(hist.counts().iter().sum::<u64>(), 10_000);
    assert!(hist.flatness_p_value() > 0.01, "p = {}", hist.flatness_p_value());
}

#[test]
fn biased_ensemble_is_not_flat() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut hist = RankHistogram::new(19);
    for _ in 0..2_000 {
        let members: Vec<f64> = (0..19).map(|_| StandardNormal.sample(&mut rng)).collect();
        let z: f64 = StandardNormal.sample(&mut rng);
        let truth = 1.0 + z;
        hist.add(rank_of_truth(truth, &members, &mut rng));
    }
    assert!(hist.flatness_p_value() < 1e-6);
}

proptest! {
    #[test]
    fn eme_bounds_rb_and_both_scale_free((truth, ens) in vectors(12, 5), c in prop_oneof![-50.0f64..-0.01, 0.01f64..50.0]) {
        prop_assume!(truth.iter().any(|v| v.abs() > 1e-3));
        let rb = relative_bias(&truth, &ens).unwrap();
        let eme = ensemble_mean_error(&truth, &ens).unwrap();
        prop_assert!(eme >= rb - 1e-12 * eme.max(1.0));
        let st: Vec<f64> = truth.iter().map(|v| c * v).collect();
        let se: Vec<Vec<f64>> = ens.iter().map(|m| m.iter().map(|v| c * v).collect()).collect();
        prop_assert!((relative_bias(&st, &se).unwrap() - rb).abs() <= 1e-10 * rb.max(1.0));
        prop_assert!((ensemble_mean_error(&st, &se).unwrap() - eme).abs() <= 1e-10 * eme.max(1.0));
    }

    #[test]
    fn ranks_stay_in_range(truth in -3.0f64..3.0, members in prop::collection::vec(-3.0f64..3.0, 1..40), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = rank_of_truth(truth, &members, &mut rng);
        let below = members.iter().filter(|m| **m < truth).count();
        let ties = members.iter().filter(|m| **m == truth).count();
        prop_assert!(r >= below && r <= below + ties && r <= members.len());
    }

    #[test]
    fn order_fit_is_exact_on_power_laws(k in 0.2f64..4.0, c in 1e-6f64..1e3, dt0 in 1.0f64..1e4, levels in 3usize..7) {
        let dts: Vec<f64> = (0..levels).map(|l| dt0 / 2f64.powi(l as i32)).collect();
        let errs: Vec<f64> = dts.iter().map(|d| c * d.powf(k)).collect();
        prop_assert!((fit_order(&dts, &errs) - k).abs() < 1e-9);
    }

    #[test]
    fn snapshots_round_trip(nx in 1u32..9, ny in 1u32..6, aux in -1e9f64..1e9, seed in any::<u64>()) {
        let n = 2 * (nx * ny) as usize;
        let values = NoiseStream::new(seed).normals(0, n);
        let snap = Snapshot { nx, ny, layers: 2, kind: SnapshotKind::Pv, modes: 0, aux, values };
        prop_assert_eq!(Snapshot::decode(&snap.encode()).unwrap(), snap);
    }

    #[test]
    fn inversion_is_exact_and_divergence_free(seed in any::<u64>(), mass in -1e7f64..1e7) {
        let g = Grid::new(24, 12, common::LX, common::LY).unwrap();
        let s = common::strat();
        let ws = EllipticWorkspace::new(g, s).unwrap();
        let q = LayeredField::from_vec(g, NoiseStream::new(seed).normals(0, 2 * g.cells())).unwrap();
        let mut q = q;
        q.scale(1e-6);
        let inv = ws.invert(&q, mass).unwrap();
        let back = apply_pv_operator(&inv, &s);
        prop_assert!(back.max_abs_diff(&q) <= 1e-9 * q.max_abs());
        prop_assert!((inv.mass() - mass).abs() <= 1e-9 * mass.abs().max(1.0) + 1e-12 * inv.psi.max_abs() * g.lx * g.ly);

        let vel = velocities_from_psi(&inv, [0.0, 0.0]);
        let scale = vel.max_abs() / g.dx;
        for l in 0..2 {
            for j in 0..g.ny {
                for i in 0..g.nx {
                    let div = (vel.x_at(l, i as isize + 1, j) - vel.x_at(l, i as isize, j)) / g.dx
                        + (vel.y_at(l, i, j + 1) - vel.y_at(l, i, j)) / g.dy;
                    prop_assert!(div.abs() <= 1e-10 * scale);
                }
            }
        }
    }
}
