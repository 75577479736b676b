//! Twin experiments end to end: spin-up on the truth grid, a truth run
//! observed at the stations, an initial ensemble on the signal grid, and
//! paired assimilation / free runs with their diagnostics.

use qgda_core::cabaret::{Model, ModelState};
use qgda_core::diagnostics::{
    ensemble_mean_error, quantile, rank_of_truth, relative_bias, std_dev, MetricKind, MetricSeries, RankHistogram,
};
use qgda_core::elliptic::{apply_pv_operator, mass_functional, velocities_from_psi, Inversion, Stratification};
use qgda_core::filter::{Algorithm, AssimilationEvent, Ensemble, FilterConfig, ParticleFilter};
use qgda_core::grid::{coarse_grain, make_equidistant_stations, sample_at_stations};
use qgda_core::observations::{compute_sigma, observe_truth, sigma_from_series, ObservationRecord, SigmaSource};
use qgda_core::stochastic::{synthesize_xi, NoiseStream, XiBasis};
use qgda_core::{CellVelocity, Grid, LayeredField, StationSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::io;

/// Tolerance on the normalised divergence of a noise basis.
pub const DIVERGENCE_TOLERANCE: f64 = 1e-8;

const ENSEMBLE_TAG: u64 = 1;
const RESAMPLE_TAG: u64 = 2;

/// Everything derived from a configuration that the runs share.
pub struct Setup {
    pub cfg: ExperimentConfig,
    pub truth_grid: Grid,
    pub signal_grid: Grid,
    pub strat: Stratification,
    pub truth_model: Model,
    pub signal_model: Model,
    pub stations: StationSet,
    pub xi: XiBasis,
    pub filter: FilterConfig,
}

impl Setup {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let truth_grid = cfg.truth_grid()?;
        let signal_grid = cfg.signal_grid()?;
        let strat = cfg.stratification()?;
        let truth_model = Model::new(truth_grid, strat, cfg.truth_params())?;
        let signal_model = Model::new(signal_grid, strat, cfg.signal_params())?;
        let stations = make_equidistant_stations(&signal_grid, cfg.grids.station_rows, cfg.grids.station_cols)?;
        let xi = match &cfg.noise.basis_path {
            Some(path) => XiBasis::load(path, signal_grid)?,
            None => synthesize_xi(&signal_grid, &cfg.xi_spec())?,
        };
        xi.check_divergence(DIVERGENCE_TOLERANCE)?;
        Ok(Self {
            cfg: cfg.clone(),
            truth_grid,
            signal_grid,
            strat,
            truth_model,
            signal_model,
            stations,
            xi,
            filter: cfg.filter_config()?,
        })
    }

    pub fn with_xi(mut self, xi: XiBasis) -> Result<Self> {
        if xi.grid() != &self.signal_grid {
            return Err(CliError::Config("noise basis is not on the signal grid".into()));
        }
        xi.check_divergence(DIVERGENCE_TOLERANCE)?;
        self.xi = xi;
        Ok(self)
    }

    pub fn report_steps(&self) -> usize {
        (self.cfg.run.report_interval_s / self.cfg.grids.signal_dt_s).round() as usize
    }
}

/// Root-mean-square layer-1 speed (background excluded).
pub fn rms_speed(model: &Model, state: &ModelState) -> Result<f64> {
    let inv = model.invert(&state.q, state.mass_target)?;
    let vel = velocities_from_psi(&inv, [0.0, 0.0]).cell_velocity();
    let n = vel.u.grid().cells() as f64;
    let s: f64 = vel
        .u
        .layer(0)
        .iter()
        .zip(vel.v.layer(0))
        .map(|(u, v)| u * u + v * v)
        .sum();
    Ok((s / n).sqrt())
}

/// Deterministic spin-up on the truth grid from rest. A small seeded
/// layer-1 PV perturbation starts the instability; a zero-length spin-up
/// returns the rest state. `on_report(day, state)` runs once per model day.
pub fn spinup(setup: &Setup, mut on_report: impl FnMut(&ModelState) -> Result<()>) -> Result<ModelState> {
    let model = &setup.truth_model;
    let steps = setup.cfg.spinup_steps()?;
    let grid = setup.truth_grid;
    if steps == 0 {
        let rest = model.init_state(LayeredField::zeros(grid), 0.0)?;
        on_report(&rest)?;
        return Ok(rest);
    }
    let amp = setup.cfg.run.spinup_perturbation_per_s;
    let draws = NoiseStream::new(setup.cfg.run.spinup_seed).uniforms(0, grid.cells());
    let q0 = LayeredField::from_fn(grid, |l, i, j| {
        if l == 0 {
            amp * (2.0 * draws[grid.idx(i, j)] - 1.0)
        } else {
            0.0
        }
    });
    let mut state = model.init_state(q0, 0.0)?;
    let per_day = ((86400.0 / model.params().dt).round() as usize).max(1);
    on_report(&state)?;
    for n in 1..=steps {
        model.step(&mut state)?;
        if n % per_day == 0 || n == steps {
            on_report(&state)?;
        }
    }
    Ok(state)
}

/// The truth seen on the signal grid at one time.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalTruth {
    pub time: f64,
    pub q: LayeredField,
    pub mass: f64,
    pub velocity: CellVelocity,
}

impl SignalTruth {
    /// Rebuilds the velocities from signal-grid PV.
    pub fn from_pv(model: &Model, time: f64, q: LayeredField, mass: f64) -> Result<Self> {
        let velocity = model.diagnostic_velocity(&q, mass)?.cell_velocity();
        Ok(Self {
            time,
            q,
            mass,
            velocity,
        })
    }

    pub fn station_values(&self, stations: &StationSet) -> Result<Vec<[f64; 2]>> {
        Ok(sample_at_stations(&self.velocity, stations)?)
    }
}

/// Coarse-grains the fine stream function, rebuilds PV on the signal grid
/// with the fine wall values and returns it with the fine cell velocities.
pub fn project_truth(setup: &Setup, fine: &ModelState) -> Result<(SignalTruth, CellVelocity)> {
    let inv = setup.truth_model.invert(&fine.q, fine.mass_target)?;
    let fine_vel = velocities_from_psi(&inv, setup.truth_model.params().background_u).cell_velocity();
    let coarse = Inversion {
        psi: coarse_grain(&inv.psi, &setup.signal_grid)?,
        walls: inv.walls,
    };
    let q = apply_pv_operator(&coarse, &setup.strat);
    let mass = mass_functional(&coarse.psi);
    Ok((SignalTruth::from_pv(&setup.signal_model, fine.time, q, mass)?, fine_vel))
}

/// Signal-grid truth at every report time from `−init_window` to the end
/// of the assimilation span, and the observations at every cycle end.
#[derive(Clone, Debug)]
pub struct TruthRun {
    pub records: Vec<SignalTruth>,
    pub observations: Vec<ObservationRecord>,
}

impl TruthRun {
    pub fn start_time(&self) -> f64 {
        self.records.first().map_or(0.0, |r| r.time)
    }

    /// Record at time `t`, which must be a report time.
    pub fn at(&self, t: f64) -> Result<&SignalTruth> {
        let step = match self.records.as_slice() {
            [a, b, ..] => b.time - a.time,
            _ => 1.0,
        };
        let k = ((t - self.start_time()) / step).round();
        self.records
            .get(k as usize)
            .filter(|r| k >= 0.0 && (r.time - t).abs() < 1e-6 * step)
            .ok_or_else(|| CliError::Config(format!("no truth record at t = {t} s")))
    }
}

pub fn generate_truth(setup: &Setup, spun_up: &ModelState) -> Result<TruthRun> {
    let cfg = &setup.cfg;
    let model = &setup.truth_model;
    let dt = model.params().dt;
    let mut state = spun_up.clone();
    state.time = -cfg.run.init_window_s;
    let per_report = (cfg.run.report_interval_s / dt).round() as usize;
    let reports = ((cfg.run.init_window_s + cfg.run.assimilation_s) / cfg.run.report_interval_s).round() as usize;
    let per_cycle = (cfg.filter.da_interval_s / cfg.run.report_interval_s).round() as usize;
    let zero_index = (cfg.run.init_window_s / cfg.run.report_interval_s).round() as usize;
    let (rx, ry) = setup.signal_grid.ratio_to(&setup.truth_grid)?;
    let obs_stream = NoiseStream::new(cfg.run.observation_seed);

    let mut records = Vec::with_capacity(reports + 1);
    let mut pending = Vec::new();
    for r in 0..=reports {
        if r > 0 {
            for _ in 0..per_report {
                model.step(&mut state)?;
            }
            // keep report times exact whatever the accumulated rounding
            state.time = -cfg.run.init_window_s + r as f64 * cfg.run.report_interval_s;
        }
        let (truth, fine_vel) = project_truth(setup, &state)?;
        if r > zero_index && (r - zero_index).is_multiple_of(per_cycle) {
            let sigma = if (rx, ry) == (1, 1) {
                None
            } else {
                Some(compute_sigma(&fine_vel, &setup.signal_grid, &setup.stations)?)
            };
            pending.push((
                (r - zero_index) / per_cycle,
                truth.time,
                truth.station_values(&setup.stations)?,
                sigma,
            ));
        }
        records.push(truth);
    }

    // without a finer truth, fall back to the temporal spread over the
    // initial window
    let temporal = if pending.iter().any(|p| p.3.is_none()) {
        let series: Vec<Vec<[f64; 2]>> = records[..=zero_index]
            .iter()
            .map(|r| r.station_values(&setup.stations))
            .collect::<Result<_>>()?;
        Some(sigma_from_series(&series)?)
    } else {
        None
    };
    let observations = pending
        .into_iter()
        .map(|(k, t, projected, sigma)| {
            let (sigma, source) = match sigma {
                Some(s) => (s, SigmaSource::FineGrid),
                None => (temporal.clone().expect("temporal sigma"), SigmaSource::Temporal),
            };
            Ok(observe_truth(
                t,
                &projected,
                &setup.stations,
                &sigma,
                source,
                &obs_stream,
                k as u64,
            )?)
        })
        .collect::<Result<_>>()?;
    Ok(TruthRun { records, observations })
}

/// `N` particles started from the signal-grid truth at the first record
/// and evolved independently over the initial window.
pub fn init_ensemble(setup: &Setup, truth: &TruthRun, seed: u64) -> Result<Ensemble> {
    let first = truth
        .records
        .first()
        .ok_or_else(|| CliError::Config("empty truth run".into()))?;
    let model = &setup.signal_model;
    let mut state = model.init_state(first.q.clone(), first.mass)?;
    state.time = first.time;
    let mut ens = Ensemble::replicate(&state, setup.filter.n, &NoiseStream::new(seed).fork(ENSEMBLE_TAG));
    let filter = ParticleFilter::new(model, &setup.xi, setup.filter.clone(), NoiseStream::new(seed))?;
    let steps = (setup.cfg.run.init_window_s / model.params().dt).round() as usize;
    filter.forecast(&mut ens, steps, None)?;
    for p in &mut ens.particles {
        p.state.time = 0.0;
    }
    ens.begin_window();
    Ok(ens)
}

/// Per-station ensemble spread at one time.
#[derive(Clone, Debug, PartialEq)]
pub struct SpreadRow {
    pub time: f64,
    pub station: usize,
    /// `[u, v]` each.
    pub std: [f64; 2],
    pub min: [f64; 2],
    pub max: [f64; 2],
    pub q05: [f64; 2],
    pub q95: [f64; 2],
}

/// Diagnostics collected at every report time of a run.
pub struct Recorder<'a> {
    setup: &'a Setup,
    truth: &'a TruthRun,
    pub series: Vec<MetricSeries>,
    pub spread: Vec<SpreadRow>,
    pub rank_stations: Vec<usize>,
    pub ranks: Vec<RankHistogram>,
    rng: ChaCha8Rng,
}

const EME_STATIONS: usize = 0;
const EME_DOMAIN: usize = 1;
const RB_STATIONS: usize = 2;
const RB_DOMAIN: usize = 3;
const ESS: usize = 4;

impl<'a> Recorder<'a> {
    pub fn new(setup: &'a Setup, truth: &'a TruthRun) -> Self {
        let m = setup.stations.len();
        let r = setup.cfg.run.rank_stations;
        Self {
            setup,
            truth,
            series: vec![
                MetricSeries::new(MetricKind::MeanError, "stations"),
                MetricSeries::new(MetricKind::MeanError, "domain"),
                MetricSeries::new(MetricKind::RelativeBias, "stations"),
                MetricSeries::new(MetricKind::RelativeBias, "domain"),
                MetricSeries::new(MetricKind::Ess, "ensemble"),
            ],
            spread: Vec::new(),
            rank_stations: (0..r).map(|k| k * m / r).collect(),
            ranks: vec![RankHistogram::new(setup.filter.n); r],
            rng: ChaCha8Rng::seed_from_u64(setup.cfg.run.rank_seed),
        }
    }

    pub fn record(&mut self, ens: &Ensemble) -> Result<()> {
        let t = ens.time();
        let truth = self.truth.at(t)?;
        let stations = &self.setup.stations;
        let model = &self.setup.signal_model;

        let truth_st = flatten(&truth.station_values(stations)?);
        let truth_dom = domain_vector(&truth.velocity);
        let mut members_st = Vec::with_capacity(ens.len());
        let mut members_dom = Vec::with_capacity(ens.len());
        for p in &ens.particles {
            let vel = model
                .diagnostic_velocity(&p.state.q, p.state.mass_target)?
                .cell_velocity();
            members_st.push(flatten(&sample_at_stations(&vel, stations)?));
            members_dom.push(domain_vector(&vel));
        }
        self.series[EME_STATIONS].push(t, ensemble_mean_error(&truth_st, &members_st)?)?;
        self.series[EME_DOMAIN].push(t, ensemble_mean_error(&truth_dom, &members_dom)?)?;
        self.series[RB_STATIONS].push(t, relative_bias(&truth_st, &members_st)?)?;
        self.series[RB_DOMAIN].push(t, relative_bias(&truth_dom, &members_dom)?)?;
        self.series[ESS].push(t, ens.ess()?)?;

        for s in 0..stations.len() {
            let comp = |c: usize| -> Vec<f64> { members_st.iter().map(|m| m[2 * s + c]).collect() };
            let (u, v) = (comp(0), comp(1));
            let both = |f: &dyn Fn(&[f64]) -> f64| [f(&u), f(&v)];
            self.spread.push(SpreadRow {
                time: t,
                station: s,
                std: both(&|x| std_dev(x)),
                min: both(&|x| quantile(x, 0.0)),
                max: both(&|x| quantile(x, 1.0)),
                q05: both(&|x| quantile(x, 0.05)),
                q95: both(&|x| quantile(x, 0.95)),
            });
        }
        // the initial ensemble carries no forecast information yet
        if t > 0.0 {
            for (h, &s) in self.ranks.iter_mut().zip(&self.rank_stations) {
                for c in 0..2 {
                    let members: Vec<f64> = members_st.iter().map(|m| m[2 * s + c]).collect();
                    h.add(rank_of_truth(truth_st[2 * s + c], &members, &mut self.rng));
                }
            }
        }
        Ok(())
    }
}

fn flatten(pairs: &[[f64; 2]]) -> Vec<f64> {
    pairs.iter().flatten().copied().collect()
}

/// Layer-1 `u` over all cells followed by layer-1 `v`.
fn domain_vector(vel: &CellVelocity) -> Vec<f64> {
    vel.u.layer(0).iter().chain(vel.v.layer(0)).copied().collect()
}

/// Output of one run over the assimilation span.
pub struct RunOutput {
    pub algorithm: Algorithm,
    pub series: Vec<MetricSeries>,
    pub spread: Vec<SpreadRow>,
    pub rank_stations: Vec<usize>,
    pub ranks: Vec<RankHistogram>,
    pub events: Vec<AssimilationEvent>,
    pub ensemble: Ensemble,
    /// Checksum of the truth and observations the run consumed.
    pub input_checksum: String,
}

impl RunOutput {
    pub fn station_eme(&self) -> f64 {
        self.series[EME_STATIONS].mean_since(f64::MIN_POSITIVE)
    }

    pub fn domain_eme(&self) -> f64 {
        self.series[EME_DOMAIN].mean_since(f64::MIN_POSITIVE)
    }

    /// Mean over stations, components and report times with `t ≥ from` of
    /// the ensemble standard deviation.
    pub fn mean_spread_since(&self, from: f64) -> f64 {
        let v: Vec<f64> = self
            .spread
            .iter()
            .filter(|r| r.time >= from)
            .flat_map(|r| r.std)
            .collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    pub fn chi_squares(&self) -> Vec<f64> {
        self.ranks.iter().map(|h| h.chi_square()).collect()
    }
}

/// Runs `algorithm` over every observation in `truth`, starting from `ens`.
pub fn run_assimilation(
    setup: &Setup,
    truth: &TruthRun,
    mut ens: Ensemble,
    algorithm: Algorithm,
    seed: u64,
) -> Result<RunOutput> {
    let filter = ParticleFilter::new(
        &setup.signal_model,
        &setup.xi,
        setup.filter.clone(),
        NoiseStream::new(seed).fork(RESAMPLE_TAG),
    )?;
    let mut recorder = Recorder::new(setup, truth);
    recorder.record(&ens)?;
    let mut events = Vec::with_capacity(truth.observations.len());
    for obs in &truth.observations {
        let event = filter.cycle(&mut ens, obs, algorithm, setup.report_steps(), |e| recorder.record(e))?;
        events.push(event);
    }
    let Recorder {
        series,
        spread,
        rank_stations,
        ranks,
        ..
    } = recorder;
    Ok(RunOutput {
        algorithm,
        series,
        spread,
        rank_stations,
        ranks,
        events,
        ensemble: ens,
        input_checksum: truth_checksum(truth)?,
    })
}

/// SHA-256 over the serialised truth snapshots and the observation log.
pub fn truth_checksum(truth: &TruthRun) -> Result<String> {
    let mut bytes = io::truth_bytes(truth);
    bytes.extend(io::observations_csv(&truth.observations)?);
    Ok(io::sha256_hex(&bytes))
}

/// A data-assimilation run and its free control from the same ensemble and seeds.
pub struct PairedRun {
    pub da: RunOutput,
    pub free: RunOutput,
}

pub fn run_paired(setup: &Setup, truth: &TruthRun, algorithm: Algorithm, seed: u64) -> Result<PairedRun> {
    let ens = init_ensemble(setup, truth, seed)?;
    let free = run_assimilation(setup, truth, ens.clone(), Algorithm::Free, seed)?;
    let da = run_assimilation(setup, truth, ens, algorithm, seed)?;
    if da.input_checksum != free.input_checksum {
        return Err(CliError::Config("paired runs consumed different truth files".into()));
    }
    Ok(PairedRun { da, free })
}
