//! Acceptance report: one PASS/FAIL line per criterion. The process exits
//! successfully either way; the lines are the result.

use std::f64::consts::PI;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use qgda::config::ExperimentConfig;
use qgda::pipeline::{self, RunOutput, Setup};
use qgda::studies::{run_convergence, ConvergencePlan};
use qgda_core::cabaret::{Model, ModelParams, ModelState, SourceStaging};
use qgda_core::diagnostics::ks_two_sample;
use qgda_core::elliptic::{EllipticWorkspace, Stratification};
use qgda_core::filter::{
    find_tempering_steps, project_state, Algorithm, Ensemble, NudgeSystem, ParticleFilter, TemperingLedger,
    TemperingMode,
};
use qgda_core::observations::{ess, ess_from_log, ObservationRecord, SigmaSource};
use qgda_core::stochastic::{stoch_step, synthesize_xi, BetaExtrapolation, NoiseStream, XiSpec};
use qgda_core::{Grid, LayeredField};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LX: f64 = 3.84e6;
const LY: f64 = 1.92e6;

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, id: u32, name: &str, pass: bool, secs: f64, detail: String) {
        if !pass {
            self.failed += 1;
        }
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!("{verdict} [{id:>2}] {name} ({secs:.1} s): {detail}");
    }
}

fn strat() -> Stratification {
    Stratification::from_per_km2(4.22e-3, 1.41e-3).unwrap()
}

fn params(dt: f64, forced: bool) -> ModelParams {
    ModelParams {
        beta: if forced { 2.0e-11 } else { 0.0 },
        nu: if forced { 3.125 } else { 0.0 },
        mu: if forced { 4.0e-8 } else { 0.0 },
        background_u: if forced { [0.06, 0.0] } else { [0.0, 0.0] },
        dt,
        courant_limit: 1.0,
        staging: SourceStaging::Split,
    }
}

/// Large-scale PV field rescaled so the fastest face speed is `speed`.
fn smooth_state(model: &Model, seed: u64, speed: f64) -> ModelState {
    let g = *model.grid();
    let u = NoiseStream::new(seed).uniforms(0, 24);
    let q = LayeredField::from_fn(g, |l, i, j| {
        let (x, y) = g.cell_center(i, j);
        (0..6)
            .map(|k| {
                let a = u[l * 12 + 2 * k] - 0.5;
                let phase = 2.0 * PI * u[l * 12 + 2 * k + 1];
                let m = (k % 3 + 1) as f64;
                let n = (k / 2 + 1) as f64;
                a * (2.0 * PI * m * x / g.lx + phase).cos() * (n * PI * y / g.ly).sin()
            })
            .sum()
    });
    let mut vel = model.diagnostic_velocity(&q, 0.0).unwrap();
    let bg = model.params().background_u;
    for (l, b) in bg.iter().enumerate() {
        vel.x_layer_mut(l).iter_mut().for_each(|v| *v += b);
    }
    let mut q = q;
    q.scale(speed / vel.max_abs());
    model.init_state(q, 0.0).unwrap()
}

fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

fn noise_off(r: &mut Report) {
    let t = Instant::now();
    let m = Model::new(Grid::new(65, 33, LX, LY).unwrap(), strat(), params(3600.0, true)).unwrap();
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
    let worst = [
        rel_diff(a.q.data(), b.q.data()),
        rel_diff(&a.q_faces.x, &b.q_faces.x),
        rel_diff(&a.q_faces.y, &b.q_faces.y),
        rel_diff(&a.vel.x, &b.vel.x),
        rel_diff(&a.vel.y, &b.vel.y),
    ]
    .into_iter()
    .fold(0.0f64, f64::max);
    let secs = t.elapsed().as_secs_f64();
    r.line(
        1,
        "noise-off equivalence",
        worst <= 1e-12 && secs < 10.0,
        secs,
        format!("max relative difference {worst:.2e} over 100 steps"),
    );
}

fn manufactured_error(nx: usize, ny: usize) -> f64 {
    let g = Grid::new(nx, ny, LX, LY).unwrap();
    let ws = EllipticWorkspace::new(g, strat()).unwrap();
    let k2 = (2.0 * PI / LX).powi(2) + (PI / LY).powi(2);
    let exact = |i: usize, j: usize| {
        let (x, y) = g.cell_center(i, j);
        (2.0 * PI * x / LX).sin() * (PI * y / LY).sin()
    };
    // identical layers make the coupling terms vanish
    let q = LayeredField::from_fn(g, |_, i, j| -k2 * exact(i, j));
    let inv = ws.invert(&q, 0.0).unwrap();
    inv.psi.max_abs_diff(&LayeredField::from_fn(g, |_, i, j| exact(i, j)))
}

fn elliptic_order(r: &mut Report) {
    let t = Instant::now();
    let e: Vec<f64> = [(33, 17), (65, 33), (129, 65)]
        .iter()
        .map(|&(nx, ny)| manufactured_error(nx, ny))
        .collect();
    let ratios = [e[0] / e[1], e[1] / e[2]];
    let secs = t.elapsed().as_secs_f64();
    let pass = ratios.iter().all(|q| (3.5..=4.5).contains(q)) && secs < 30.0;
    r.line(
        2,
        "elliptic second order",
        pass,
        secs,
        format!("error ratios {:.3}, {:.3}", ratios[0], ratios[1]),
    );
}

fn conservation(r: &mut Report) {
    let t = Instant::now();
    let m = Model::new(Grid::new(65, 33, LX, LY).unwrap(), strat(), params(3600.0, false)).unwrap();
    let xi = synthesize_xi(
        m.grid(),
        &XiSpec {
            modes: 8,
            amplitude: 4.0,
            spectrum: 1.0,
            layer_ratio: 0.5,
            seed: 2,
        },
    )
    .unwrap();
    let stream = NoiseStream::new(17);
    let mut worst = [0.0f64; 2];
    for (k, noise) in [false, true].into_iter().enumerate() {
        let mut st = smooth_state(&m, 8, 0.5);
        for n in 0..500 {
            let before = [st.q.integral(0), st.q.integral(1)];
            if noise {
                let dw = stream.increments(n, xi.len(), 3600.0);
                stoch_step(&m, &mut st, &xi, &dw, None, BetaExtrapolation::Verbatim).unwrap();
            } else {
                m.step(&mut st).unwrap();
            }
            for (l, b) in before.iter().enumerate() {
                worst[k] = worst[k].max((st.q.integral(l) - b).abs() / st.q.integral_abs(l));
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let pass = worst.iter().all(|w| *w <= 1e-10) && secs < 60.0;
    r.line(
        3,
        "conservation",
        pass,
        secs,
        format!(
            "worst per-step drift: deterministic {:.2e}, stochastic {:.2e}",
            worst[0], worst[1]
        ),
    );
}

fn consistency(r: &mut Report) {
    let t = Instant::now();
    let cfg = ExperimentConfig::default();
    let plan = ConvergencePlan::default();
    let stoch = run_convergence(&cfg, &plan, true).unwrap();
    let det = run_convergence(&cfg, &plan, false).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let pass = stoch.order >= 0.9 && (det.order - 2.0).abs() <= 0.3 && secs < 120.0;
    r.line(
        4,
        "refinement consistency",
        pass,
        secs,
        format!(
            "fitted order stochastic {:.3}, deterministic {:.3}",
            stoch.order, det.order
        ),
    );
}

fn ess_exactness(r: &mut Report) {
    let t = Instant::now();
    let uniform = ess(&[1.0; 100]).unwrap();
    let mut d = vec![0.0; 100];
    d[17] = 1.0;
    let degenerate = ess(&d).unwrap();
    let mixed = ess(&[2.0, 1.0, 1.0]).unwrap();
    let pass =
        (uniform - 100.0).abs() <= 1e-12 && (degenerate - 1.0).abs() <= 1e-12 && (mixed - 8.0 / 3.0).abs() <= 1e-12;
    r.line(
        5,
        "ESS exactness",
        pass,
        t.elapsed().as_secs_f64(),
        format!("uniform {uniform}, degenerate {degenerate}, (2,1,1) {mixed:.15}"),
    );
}

fn tempering_contract(r: &mut Report) {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut bad = 0;
    let trials = 2000;
    for _ in 0..trials {
        let n = rng.random_range(2..120);
        let scale = 10f64.powf(rng.random_range(-1.0..3.0));
        let lw: Vec<f64> = (0..n).map(|_| -scale * rng.random::<f64>()).collect();
        let n_star = (rng.random_range(0.05..1.0) * n as f64).max(1.0);
        let p = find_tempering_steps(&lw, n_star);
        let at = |p: usize| ess_from_log(&lw.iter().map(|l| l / p as f64).collect::<Vec<_>>()).unwrap();
        let ok = at(p) >= n_star
            && (p == 1 || at(p - 1) < n_star)
            && TemperingLedger::new(p, TemperingMode::Incremental).is_exactly_one();
        bad += usize::from(!ok);
    }
    r.line(
        6,
        "tempering contract",
        bad == 0,
        t.elapsed().as_secs_f64(),
        format!("{bad} violations in {trials} random weight vectors"),
    );
}

fn mcmc_invariance(r: &mut Report) {
    let t = Instant::now();
    let cfg = ExperimentConfig::default();
    let setup = Setup::new(&cfg).unwrap();
    let model = &setup.signal_model;
    let start = smooth_state(model, 3, 0.3);
    let filter = qgda_core::filter::FilterConfig {
        n: 50,
        n_star: 40.0,
        rho: 0.9999,
        mcmc_steps: 20,
        da_interval: 2.0 * cfg.grids.signal_dt_s,
        ..setup.filter.clone()
    };
    let (mut before, mut after, mut rates) = (Vec::new(), Vec::new(), Vec::new());
    for rep in 0..4u64 {
        let pf = ParticleFilter::new(model, &setup.xi, filter.clone(), NoiseStream::new(100 + rep)).unwrap();
        let mut ens = Ensemble::replicate(&start, 50, &NoiseStream::new(200 + rep));
        ens.begin_window();
        pf.forecast(&mut ens, 2, None).unwrap();
        let values = project_state(model, &ens.particles[0].state, &setup.stations).unwrap();
        let sigma = vec![[1.0e6; 2]; setup.stations.len()];
        let obs =
            ObservationRecord::new(ens.time(), setup.stations.clone(), values, sigma, SigmaSource::Fixed).unwrap();
        let mut ll = pf.log_likelihoods(&ens, &obs).unwrap();
        let marginal = |e: &Ensemble| -> Vec<f64> {
            e.particles
                .iter()
                .map(|p| project_state(model, &p.state, &setup.stations).unwrap()[5][0])
                .collect()
        };
        before.extend(marginal(&ens));
        rates.push(pf.jitter_mcmc(&mut ens, &obs, 1.0, &mut ll, rep).unwrap());
        after.extend(marginal(&ens));
    }
    let (_, p) = ks_two_sample(&before, &after);
    let secs = t.elapsed().as_secs_f64();
    let pass = p > 0.01 && secs < 120.0;
    r.line(
        7,
        "MCMC invariance",
        pass,
        secs,
        format!("KS p {p:.3} on {} samples, acceptance rates {rates:?}", before.len()),
    );
}

fn nudging_optimality(r: &mut Report) {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut worst_grad, mut worst_closed, mut bad) = (0.0f64, 0.0f64, 0);
    for _ in 0..1000 {
        let m = rng.random_range(1..33);
        let k = rng.random_range(1..9);
        let dt = 10f64.powf(rng.random_range(-2.0..4.0));
        let b = DMatrix::from_fn(m, k, |_, _| rng.random_range(-3.0..3.0));
        let res = DVector::from_fn(m, |_, _| rng.random_range(-3.0..3.0));
        let sys = NudgeSystem::new(b, res, dt).unwrap();
        let lambda = sys.solve().unwrap();
        worst_grad = worst_grad.max(sys.gradient(&lambda).norm() / (1.0 + sys.r.norm()));
        let q = sys.objective(&lambda);
        bad += usize::from(q > sys.objective(&DVector::zeros(k)) + 1e-12 * q.abs().max(1.0));
        for i in 0..k {
            for eps in [1e-4, -1e-4] {
                let mut l = lambda.clone();
                l[i] += eps;
                bad += usize::from(q > sys.objective(&l) + 1e-12 * q.abs().max(1.0));
            }
        }
        // one mode, one scalar residual
        let (b1, r1) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let sys = NudgeSystem::new(DMatrix::from_element(1, 1, b1), DVector::from_element(1, r1), dt).unwrap();
        let want = -b1 * r1 / (dt * b1 * b1 + 1.0);
        worst_closed = worst_closed.max((sys.solve().unwrap()[0] - want).abs() / want.abs().max(1.0));
    }
    let pass = worst_grad <= 1e-8 && worst_closed <= 1e-12 && bad == 0;
    r.line(
        8,
        "nudging optimality",
        pass,
        t.elapsed().as_secs_f64(),
        format!(
            "worst scaled gradient {worst_grad:.1e}, closed-form error {worst_closed:.1e}, {bad} non-minimal cases"
        ),
    );
}

struct SeedRuns {
    seed: u64,
    free: RunOutput,
    tempered: RunOutput,
    nudged: RunOutput,
}

fn twin(r: &mut Report) {
    let t = Instant::now();
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/desk.toml");
    let cfg = ExperimentConfig::load(&path).unwrap();
    let setup = Setup::new(&cfg).unwrap();
    let spun = pipeline::spinup(&setup, |_| Ok(())).unwrap();
    let truth = pipeline::generate_truth(&setup, &spun).unwrap();
    println!("       twin: spin-up and truth {:.0} s", t.elapsed().as_secs_f64());
    let mut runs = Vec::new();
    for seed in [11u64, 12, 13] {
        let ens = pipeline::init_ensemble(&setup, &truth, seed).unwrap();
        let go = |alg| pipeline::run_assimilation(&setup, &truth, ens.clone(), alg, seed).unwrap();
        let s = SeedRuns {
            seed,
            free: go(Algorithm::Free),
            tempered: go(Algorithm::Tempered),
            nudged: go(Algorithm::Nudged),
        };
        println!(
            "       seed {seed}: station EME nudged {:.4} tempered {:.4} free {:.4}; domain EME nudged {:.4} free {:.4} ({:.0} s so far)",
            s.nudged.station_eme(),
            s.tempered.station_eme(),
            s.free.station_eme(),
            s.nudged.domain_eme(),
            s.free.domain_eme(),
            t.elapsed().as_secs_f64(),
        );
        runs.push(s);
    }
    let secs = t.elapsed().as_secs_f64();
    let majority = |ok: &dyn Fn(&SeedRuns) -> bool| runs.iter().filter(|s| ok(s)).count() * 2 > runs.len();
    let list = |ok: &dyn Fn(&SeedRuns) -> bool| {
        runs.iter()
            .map(|s| format!("{}:{}", s.seed, if ok(s) { "yes" } else { "no" }))
            .collect::<Vec<_>>()
            .join(" ")
    };

    let improves = |s: &SeedRuns| {
        s.nudged.station_eme() < s.tempered.station_eme()
            && s.tempered.station_eme() < s.free.station_eme()
            && s.nudged.domain_eme() < s.free.domain_eme()
    };
    r.line(
        9,
        "twin-experiment improvement",
        majority(&improves) && secs < 1200.0,
        secs,
        format!(
            "ordering holds per seed [{}], total runtime {:.1} min",
            list(&improves),
            secs / 60.0
        ),
    );

    let last_day = cfg.run.assimilation_s - 86400.0;
    let ratio = |s: &SeedRuns| s.nudged.mean_spread_since(last_day) / s.free.mean_spread_since(last_day);
    let ratios: Vec<String> = runs.iter().map(|s| format!("{:.3}", ratio(s))).collect();
    r.line(
        10,
        "spread reduction",
        majority(&|s| ratio(s) <= 0.8),
        0.0,
        format!("final-day spread ratio nudged/free per seed [{}]", ratios.join(", ")),
    );

    let calibrated = |s: &SeedRuns| {
        s.nudged
            .chi_squares()
            .iter()
            .zip(s.free.chi_squares())
            .all(|(d, f)| *d < f)
    };
    let detail: Vec<String> = runs
        .iter()
        .map(|s| {
            let pairs: Vec<String> = s
                .nudged
                .chi_squares()
                .iter()
                .zip(s.free.chi_squares())
                .map(|(d, f)| format!("{d:.0}/{f:.0}"))
                .collect();
            format!("{}: {}", s.seed, pairs.join(" "))
        })
        .collect();
    r.line(
        11,
        "rank-histogram calibration",
        majority(&calibrated),
        0.0,
        format!(
            "chi-square nudged/free per station [{}]; holds [{}]",
            detail.join("; "),
            list(&calibrated)
        ),
    );
}

fn main() {
    let mut r = Report { failed: 0 };
    noise_off(&mut r);
    elliptic_order(&mut r);
    conservation(&mut r);
    consistency(&mut r);
    ess_exactness(&mut r);
    tempering_contract(&mut r);
    mcmc_invariance(&mut r);
    nudging_optimality(&mut r);
    twin(&mut r);
    println!("acceptance: {} of 11 criteria failed", r.failed);
}
