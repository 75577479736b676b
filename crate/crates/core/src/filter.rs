//! Particle filters over an ensemble of stochastic trajectories: bootstrap,
//! adaptive tempering with jittering MCMC, and tempering preceded by a
//! nudged final step.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::cabaret::{Model, ModelState};
use crate::elliptic::velocities_from_psi;
use crate::error::{QgError, Result};
use crate::field::LayeredField;
use crate::grid::{sample_at_stations, StationSet};
use crate::observations::{
    ess, ess_from_log, girsanov_correction, log_likelihood_weight, normalize_log_weights, scaled_residuals,
    GirsanovSign, ObservationRecord,
};
use crate::stochastic::{affine_step, stoch_step, AffineStep, BetaExtrapolation, NoiseStream, XiBasis};

/// Which filter runs at each observation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Algorithm {
    /// Propagation only; weights are never applied.
    Free,
    Bootstrap,
    Tempered,
    Nudged,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [Self::Free, Self::Bootstrap, Self::Tempered, Self::Nudged];

    pub fn tag(self) -> &'static str {
        match self {
            Self::Free => "free",
            Self::Bootstrap => "bootstrap",
            Self::Tempered => "tempered",
            Self::Nudged => "nudged",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Algorithm {
    type Err = QgError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.tag() == s)
            .ok_or_else(|| QgError::InvalidParameter(format!("unknown algorithm {s:?}")))
    }
}

/// Exponent applied to the likelihood at tempering stage `k` of `p`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TemperingMode {
    /// `1/p` at every stage, so the stages compose to exponent 1.
    #[default]
    Incremental,
    /// The cumulative temperature `k/p` at every stage.
    Literal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterConfig {
    /// Ensemble size N.
    pub n: usize,
    /// ESS threshold N*.
    pub n_star: f64,
    /// Jitter correlation ρ.
    pub rho: f64,
    /// MCMC passes per tempering stage M1.
    pub mcmc_steps: usize,
    /// Time between observations (s).
    pub da_interval: f64,
    pub tempering: TemperingMode,
    /// Upper bound on the number of tempering stages.
    pub max_stages: usize,
    /// Re-solve the nudge for every MCMC proposal.
    pub renudge: bool,
    /// Include the Girsanov term in the MCMC acceptance ratio.
    pub mcmc_girsanov: bool,
    pub girsanov: GirsanovSign,
    pub beta: BetaExtrapolation,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            n: 20,
            n_star: 16.0,
            rho: 0.9999,
            mcmc_steps: 20,
            da_interval: 4.0 * 3600.0,
            tempering: TemperingMode::Incremental,
            max_stages: 64,
            renudge: false,
            mcmc_girsanov: false,
            girsanov: GirsanovSign::Consistent,
            beta: BetaExtrapolation::Verbatim,
        }
    }
}

impl FilterConfig {
    /// Checks the configuration and returns the number of model steps per
    /// assimilation window.
    pub fn validate(&self, dt: f64) -> Result<usize> {
        let bad = |m: &str| Err(QgError::InvalidParameter(m.to_string()));
        if self.n == 0 {
            return bad("ensemble size must be positive");
        }
        if !(self.n_star >= 1.0 && self.n_star <= self.n as f64) {
            return bad("ESS threshold must lie in [1, N]");
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return bad("jitter correlation must lie in (0, 1]");
        }
        if self.max_stages == 0 {
            return bad("at least one tempering stage is required");
        }
        let steps = (self.da_interval / dt).round();
        if !(steps >= 1.0) || (steps * dt - self.da_interval).abs() > 1e-9 * self.da_interval {
            return bad("assimilation interval must be a positive multiple of the time step");
        }
        Ok(steps as usize)
    }
}

/// One ensemble member with the record of its current assimilation window.
#[derive(Clone, Debug)]
pub struct Particle {
    pub state: ModelState,
    /// Owned by the slot, not the lineage: survives resampling.
    pub stream: NoiseStream,
    pub log_weight: f64,
    pub window_start: ModelState,
    /// Raw increments of every step since `window_start`.
    pub increments: Vec<Vec<f64>>,
    /// Drift applied in the corrector of the last step, if nudged.
    pub lambda: Option<Vec<f64>>,
    /// Log change-of-measure correction of that drift.
    pub girsanov: f64,
}

impl Particle {
    pub fn new(state: ModelState, stream: NoiseStream) -> Self {
        Self {
            window_start: state.clone(),
            state,
            stream,
            log_weight: 0.0,
            increments: Vec::new(),
            lambda: None,
            girsanov: 0.0,
        }
    }

    /// Increments that reproduce the particle's path: the final step's
    /// drift is folded into its increment.
    pub fn effective_increments(&self, dt: f64) -> Vec<Vec<f64>> {
        let mut inc = self.increments.clone();
        if let (Some(l), Some(last)) = (&self.lambda, inc.last_mut()) {
            for (w, l) in last.iter_mut().zip(l) {
                *w += l * dt;
            }
        }
        inc
    }
}

#[derive(Clone, Debug)]
pub struct Ensemble {
    pub particles: Vec<Particle>,
}

impl Ensemble {
    /// Slot `i` draws from `stream.fork(i)`.
    pub fn from_states(states: Vec<ModelState>, stream: &NoiseStream) -> Self {
        let particles = states
            .into_iter()
            .enumerate()
            .map(|(i, s)| Particle::new(s, stream.fork(i as u64)))
            .collect();
        Self { particles }
    }

    pub fn replicate(state: &ModelState, n: usize, stream: &NoiseStream) -> Self {
        Self::from_states(vec![state.clone(); n], stream)
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn log_weights(&self) -> Vec<f64> {
        self.particles.iter().map(|p| p.log_weight).collect()
    }

    pub fn weights(&self) -> Result<Vec<f64>> {
        normalize_log_weights(&self.log_weights())
    }

    pub fn ess(&self) -> Result<f64> {
        ess_from_log(&self.log_weights())
    }

    pub fn time(&self) -> f64 {
        self.particles.first().map_or(0.0, |p| p.state.time)
    }

    /// Marks the current states as the start of a new window.
    pub fn begin_window(&mut self) {
        for p in &mut self.particles {
            p.window_start = p.state.clone();
            p.increments.clear();
            p.lambda = None;
            p.girsanov = 0.0;
        }
    }
}

/// Systematic resampling with a single offset `u ∈ [0, 1)`: ancestor of
/// slot `i` is the first `j` with `(i + u)/N < Σ_{m≤j} w_m`.
pub fn systematic_resample(weights: &[f64], u: f64) -> Vec<usize> {
    systematic_resample_n(weights, weights.len(), u)
}

/// [`systematic_resample`] drawing `n` offspring from any number of weights.
pub fn systematic_resample_n(weights: &[f64], n: usize, u: f64) -> Vec<usize> {
    let last = weights.len().saturating_sub(1);
    let mut out = Vec::with_capacity(n);
    let mut cum = 0.0;
    let mut j = 0;
    for i in 0..n {
        let pos = (i as f64 + u) / n as f64;
        while j < weights.len() {
            if pos < cum + weights[j] {
                break;
            }
            cum += weights[j];
            j += 1;
        }
        out.push(j.min(last));
    }
    out
}

/// Smallest integer `p ≥ 1` with `ESS(exp(log_weights/p)) ≥ n_star`,
/// capped at `2^30`.
pub fn find_tempering_steps(log_weights: &[f64], n_star: f64) -> usize {
    let zeros = vec![0.0; log_weights.len()];
    find_tempering_steps_with_base(&zeros, log_weights, n_star, 1 << 30)
}

/// As [`find_tempering_steps`] with fixed log-weights `base` added at every
/// exponent: smallest `p` with `ESS(base + log_lik/p) ≥ n_star`, by doubling
/// then bisection; returns `cap` when even `cap` stages fall short.
pub fn find_tempering_steps_with_base(base: &[f64], log_lik: &[f64], n_star: f64, cap: usize) -> usize {
    let ok = |p: usize| {
        let lw: Vec<f64> = base.iter().zip(log_lik).map(|(b, l)| b + l / p as f64).collect();
        ess_from_log(&lw).is_ok_and(|e| e >= n_star)
    };
    if ok(1) {
        return 1;
    }
    let mut hi = 2usize;
    while !ok(hi) {
        if hi >= cap {
            return cap;
        }
        hi = (2 * hi).min(cap);
    }
    // ok(lo) is false, ok(hi) is true
    let mut lo = hi / 2;
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// Likelihood exponents applied stage by stage, as exact fractions.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TemperingLedger {
    pub increments: Vec<(u64, u64)>,
}

impl TemperingLedger {
    pub fn new(p: usize, mode: TemperingMode) -> Self {
        let p = p as u64;
        let increments = (1..=p)
            .map(|k| match mode {
                TemperingMode::Incremental => (1, p),
                TemperingMode::Literal => (k, p),
            })
            .collect();
        Self { increments }
    }

    pub fn stages(&self) -> usize {
        self.increments.len()
    }

    /// Total exponent as a reduced fraction.
    pub fn total(&self) -> (u64, u64) {
        let (mut n, mut d) = (0u64, 1u64);
        for &(a, b) in &self.increments {
            n = n * b + a * d;
            d *= b;
            let g = gcd(n, d);
            n /= g;
            d /= g;
        }
        (n, d)
    }

    pub fn is_exactly_one(&self) -> bool {
        let (n, d) = self.total();
        n == d
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

/// Quadratic objective of the nudge,
/// `Q₁(λ) = ½‖r + δt B λ‖² + (δt/2)‖λ‖²`,
/// with `B` the σ-scaled station response to each mode and `r` the
/// σ-scaled station residual of the noise-free corrector.
#[derive(Clone, Debug, PartialEq)]
pub struct NudgeSystem {
    pub b: DMatrix<f64>,
    pub r: DVector<f64>,
    pub dt: f64,
}

impl NudgeSystem {
    pub fn new(b: DMatrix<f64>, r: DVector<f64>, dt: f64) -> Result<Self> {
        if b.nrows() != r.len() {
            return Err(QgError::Dimension {
                what: "nudge residual",
                expected: b.nrows(),
                got: r.len(),
            });
        }
        if !b.iter().chain(r.iter()).all(|v| v.is_finite()) || !(dt > 0.0 && dt.is_finite()) {
            return Err(QgError::NonFinite("nudge system"));
        }
        Ok(Self { b, r, dt })
    }

    /// Builds the system for one particle from its stopped step.
    pub fn assemble(model: &Model, mass_target: f64, step: &AffineStep, obs: &ObservationRecord) -> Result<Self> {
        let a = project(model, &step.base, mass_target, &obs.stations)?;
        let r = DVector::from_vec(scaled_residuals(&a, obs)?);
        let m = obs.stations.len();
        let mut b = DMatrix::zeros(2 * m, step.directions.len());
        for (k, d) in step.directions.iter().enumerate() {
            let inv = model.invert(d, 0.0)?;
            let vel = velocities_from_psi(&inv, [0.0, 0.0]).cell_velocity();
            let s = sample_at_stations(&vel, &obs.stations)?;
            for (i, (v, sig)) in s.iter().zip(&obs.sigma).enumerate() {
                b[(2 * i, k)] = v[0] / sig[0];
                b[(2 * i + 1, k)] = v[1] / sig[1];
            }
        }
        Self::new(b, r, model.params().dt)
    }

    pub fn modes(&self) -> usize {
        self.b.ncols()
    }

    pub fn objective(&self, lambda: &DVector<f64>) -> f64 {
        let res = &self.r + &self.b * lambda * self.dt;
        0.5 * res.norm_squared() + 0.5 * self.dt * lambda.norm_squared()
    }

    pub fn gradient(&self, lambda: &DVector<f64>) -> DVector<f64> {
        let res = &self.r + &self.b * lambda * self.dt;
        self.b.tr_mul(&res) * self.dt + lambda * self.dt
    }

    /// Solves `(δt² BᵀB + δt I) λ = −δt Bᵀ r`.
    pub fn solve(&self) -> Result<DVector<f64>> {
        let k = self.modes();
        let dt = self.dt;
        let a = self.b.tr_mul(&self.b) * (dt * dt) + DMatrix::identity(k, k) * dt;
        let rhs = -(self.b.tr_mul(&self.r) * dt);
        let lambda = match a.clone().cholesky() {
            Some(c) => c.solve(&rhs),
            None => a.lu().solve(&rhs).ok_or(QgError::NonFinite("nudge normal equations"))?,
        };
        if !lambda.iter().all(|v| v.is_finite()) {
            return Err(QgError::NonFinite("nudge solution"));
        }
        Ok(lambda)
    }
}

/// Layer-1 cell velocity (background included) at the stations, from centre PV.
pub fn project(model: &Model, q: &LayeredField, mass_target: f64, stations: &StationSet) -> Result<Vec<[f64; 2]>> {
    let vel = model.diagnostic_velocity(q, mass_target)?;
    sample_at_stations(&vel.cell_velocity(), stations)
}

/// Station velocities of a model state.
pub fn project_state(model: &Model, state: &ModelState, stations: &StationSet) -> Result<Vec<[f64; 2]>> {
    project(model, &state.q, state.mass_target, stations)
}

/// A step whose corrector carries the drift minimising `Q₁`. Returns `λ`.
pub fn nudged_step(
    model: &Model,
    state: &mut ModelState,
    xi: &XiBasis,
    dw: &[f64],
    obs: &ObservationRecord,
    beta: BetaExtrapolation,
) -> Result<Vec<f64>> {
    let step = affine_step(model, state, xi, dw, beta)?;
    let system = NudgeSystem::assemble(model, state.mass_target, &step, obs)?;
    let lambda: Vec<f64> = system.solve()?.iter().copied().collect();
    let dt = model.params().dt;
    let coeffs: Vec<f64> = dw.iter().zip(&lambda).map(|(w, l)| w + l * dt).collect();
    let q = step.evaluate(&coeffs);
    let AffineStep { inputs, .. } = step;
    model.commit(state, inputs, q)?;
    Ok(lambda)
}

/// What happened at one observation time.
#[derive(Clone, Debug, PartialEq)]
pub struct AssimilationEvent {
    pub time: f64,
    pub algorithm: Algorithm,
    pub ess_before: f64,
    pub resampled: bool,
    /// The carried and Girsanov weights alone fell below the threshold and
    /// were resampled before tempering the likelihood.
    pub base_resampled: bool,
    pub ledger: TemperingLedger,
    pub stage_ess: Vec<f64>,
    /// Fraction of accepted MCMC proposals, when any were made.
    pub accept_rate: Option<f64>,
    pub mean_abs_lambda: f64,
}

impl AssimilationEvent {
    pub fn stages(&self) -> usize {
        self.ledger.stages()
    }
}

fn tag_particle<T>(i: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| QgError::Particle {
        particle: i,
        source: Box::new(e),
    })
}

/// The first error in particle-index order.
fn first_error(results: Vec<Result<()>>) -> Result<()> {
    results.into_iter().collect()
}

/// Propagates, weighs, resamples and jitters an ensemble. The model and
/// noise basis are shared read-only between particles.
pub struct ParticleFilter<'a> {
    pub model: &'a Model,
    pub xi: &'a XiBasis,
    pub config: FilterConfig,
    stream: NoiseStream,
    steps_per_window: usize,
}

impl<'a> ParticleFilter<'a> {
    /// `stream` drives resampling offsets and nothing else.
    pub fn new(model: &'a Model, xi: &'a XiBasis, config: FilterConfig, stream: NoiseStream) -> Result<Self> {
        if xi.grid() != model.grid() {
            return Err(QgError::GridMismatch("noise basis and model grids differ".into()));
        }
        let steps_per_window = config.validate(model.params().dt)?;
        Ok(Self {
            model,
            xi,
            config,
            stream,
            steps_per_window,
        })
    }

    pub fn steps_per_window(&self) -> usize {
        self.steps_per_window
    }

    fn dt(&self) -> f64 {
        self.model.params().dt
    }

    /// Advances every particle by `steps` stochastic steps with its own
    /// increments, appending them to the window record. With `nudge`, the
    /// last of these steps is nudged towards the observation.
    pub fn forecast(&self, ens: &mut Ensemble, steps: usize, nudge: Option<&ObservationRecord>) -> Result<()> {
        let results = ens
            .particles
            .par_iter_mut()
            .enumerate()
            .map(|(i, p)| tag_particle(i, self.forecast_particle(p, steps, nudge)))
            .collect();
        first_error(results)
    }

    fn forecast_particle(&self, p: &mut Particle, steps: usize, nudge: Option<&ObservationRecord>) -> Result<()> {
        let (k, dt, beta) = (self.xi.len(), self.dt(), self.config.beta);
        for s in 0..steps {
            let dw = p.stream.increments(p.state.step_index, k, dt);
            match nudge {
                Some(obs) if s + 1 == steps => {
                    let lambda = nudged_step(self.model, &mut p.state, self.xi, &dw, obs, beta)?;
                    p.girsanov = girsanov_correction(&lambda, &dw, dt, self.config.girsanov)?;
                    p.lambda = Some(lambda);
                }
                _ => stoch_step(self.model, &mut p.state, self.xi, &dw, None, beta)?,
            }
            p.increments.push(dw);
        }
        Ok(())
    }

    /// Plain log-likelihood of every particle's current state.
    pub fn log_likelihoods(&self, ens: &Ensemble, obs: &ObservationRecord) -> Result<Vec<f64>> {
        ens.particles
            .par_iter()
            .enumerate()
            .map(|(i, p)| {
                tag_particle(
                    i,
                    project_state(self.model, &p.state, &obs.stations).and_then(|x| log_likelihood_weight(&x, obs)),
                )
            })
            .collect()
    }

    /// Re-solves a window from its start with the given increments; with
    /// `nudge`, the last step is nudged. Returns the end state and the drift.
    pub fn resolve_window(
        &self,
        start: &ModelState,
        increments: &[Vec<f64>],
        nudge: Option<&ObservationRecord>,
    ) -> Result<(ModelState, Option<Vec<f64>>)> {
        let mut state = start.clone();
        let mut lambda = None;
        for (s, dw) in increments.iter().enumerate() {
            match nudge {
                Some(obs) if s + 1 == increments.len() => {
                    lambda = Some(nudged_step(self.model, &mut state, self.xi, dw, obs, self.config.beta)?);
                }
                _ => stoch_step(self.model, &mut state, self.xi, dw, None, self.config.beta)?,
            }
        }
        Ok((state, lambda))
    }

    fn resample(&self, ens: &mut Ensemble, log_lik: &mut Vec<f64>, weights: &[f64], u: f64) {
        let ancestors = systematic_resample(weights, u);
        let old = std::mem::take(&mut ens.particles);
        ens.particles = ancestors
            .iter()
            .zip(&old)
            .map(|(&a, slot)| {
                let mut p = old[a].clone();
                p.stream = slot.stream;
                p.log_weight = 0.0;
                p
            })
            .collect();
        *log_lik = ancestors.iter().map(|&a| log_lik[a]).collect();
    }

    fn offset(&self, key: u64, stage: u64) -> f64 {
        self.stream.fork(key).uniforms(stage, 1)[0]
    }

    /// `mcmc_steps` Metropolis-Hastings passes over every particle at
    /// temperature `phi`. Proposals re-solve the window with increments
    /// `ρ W + √(1−ρ²) W̃`; `log_lik` is kept in step with the states.
    /// Returns the acceptance rate.
    pub fn jitter_mcmc(
        &self,
        ens: &mut Ensemble,
        obs: &ObservationRecord,
        phi: f64,
        log_lik: &mut [f64],
        key: u64,
    ) -> Result<f64> {
        if self.config.mcmc_steps == 0 || ens.is_empty() {
            return Ok(1.0);
        }
        let results: Vec<Result<usize>> = ens
            .particles
            .par_iter_mut()
            .zip(log_lik.par_iter_mut())
            .enumerate()
            .map(|(i, (p, ll))| tag_particle(i, self.jitter_particle(p, ll, obs, phi, key)))
            .collect();
        let mut accepted = 0;
        for r in results {
            accepted += r?;
        }
        Ok(accepted as f64 / (self.config.mcmc_steps * ens.len()) as f64)
    }

    fn jitter_particle(
        &self,
        p: &mut Particle,
        ll: &mut f64,
        obs: &ObservationRecord,
        phi: f64,
        key: u64,
    ) -> Result<usize> {
        if p.increments.is_empty() {
            return Ok(0);
        }
        let (k, dt) = (self.xi.len(), self.dt());
        let rho = self.config.rho;
        let fresh = (1.0 - rho * rho).max(0.0).sqrt();
        let renudge = self.config.renudge && p.lambda.is_some();
        let nudge = renudge.then_some(obs);
        let mut accepted = 0;
        for m in 0..self.config.mcmc_steps {
            let draws = p.stream.fork(key).fork(m as u64);
            let current = if renudge {
                p.increments.clone()
            } else {
                p.effective_increments(dt)
            };
            let proposal: Vec<Vec<f64>> = current
                .iter()
                .enumerate()
                .map(|(s, w)| {
                    let z = draws.increments(s as u64, k, dt);
                    w.iter().zip(&z).map(|(w, z)| rho * w + fresh * z).collect()
                })
                .collect();
            let (state, lambda) = match self.resolve_window(&p.window_start, &proposal, nudge) {
                Ok(v) => v,
                Err(QgError::Cfl { .. } | QgError::NonFinite(_)) => continue,
                Err(e) => return Err(e),
            };
            let new_ll = log_likelihood_weight(&project_state(self.model, &state, &obs.stations)?, obs)?;
            let new_g = match (&lambda, proposal.last()) {
                (Some(l), Some(dw)) => girsanov_correction(l, dw, dt, self.config.girsanov)?,
                _ => 0.0,
            };
            let (g_cur, g_new) = if self.config.mcmc_girsanov {
                (p.girsanov, new_g)
            } else {
                (0.0, 0.0)
            };
            let log_alpha = phi * ((new_ll + g_new) - (*ll + g_cur));
            let u = draws.fork(u64::MAX).uniforms(0, 1)[0];
            if log_alpha >= 0.0 || u < log_alpha.exp() {
                p.state = state;
                p.increments = proposal;
                p.lambda = lambda;
                p.girsanov = new_g;
                *ll = new_ll;
                accepted += 1;
            }
        }
        Ok(accepted)
    }

    /// Weighs the ensemble against `obs` and updates it according to
    /// `algorithm`. Nudging itself happens during the forecast; here a
    /// nudged ensemble is treated like a tempered one with the Girsanov
    /// terms folded into the first stage.
    pub fn assimilate(
        &self,
        ens: &mut Ensemble,
        obs: &ObservationRecord,
        algorithm: Algorithm,
    ) -> Result<AssimilationEvent> {
        let mut event = AssimilationEvent {
            time: obs.time,
            algorithm,
            ess_before: ens.ess()?,
            resampled: false,
            base_resampled: false,
            ledger: TemperingLedger::default(),
            stage_ess: Vec::new(),
            accept_rate: None,
            mean_abs_lambda: mean_abs_lambda(ens),
        };
        if algorithm == Algorithm::Free {
            return Ok(event);
        }
        let mut ll = self.log_likelihoods(ens, obs)?;
        let base: Vec<f64> = ens.particles.iter().map(|p| p.log_weight + p.girsanov).collect();
        let total: Vec<f64> = base.iter().zip(&ll).map(|(b, l)| b + l).collect();
        let ess_total = ess_from_log(&total)?;
        event.ess_before = ess_total;
        let key = ens.particles.first().map_or(0, |p| p.state.step_index);

        if ess_total >= self.config.n_star {
            set_log_weights(ens, &total);
            return Ok(event);
        }
        if algorithm == Algorithm::Bootstrap {
            let w = normalize_log_weights(&total)?;
            self.resample(ens, &mut ll, &w, self.offset(key, 0));
            event.resampled = true;
            return Ok(event);
        }

        // Tempering only flattens the likelihood, so a degenerate base has to
        // be resampled away first.
        let mut base = base;
        let w_base = normalize_log_weights(&base)?;
        if ess(&w_base)? < self.config.n_star {
            self.resample(ens, &mut ll, &w_base, self.offset(key, BASE_STAGE));
            base = vec![0.0; ens.len()];
            event.base_resampled = true;
        }
        let p = find_tempering_steps_with_base(&base, &ll, self.config.n_star, self.config.max_stages);
        event.ledger = TemperingLedger::new(p, self.config.tempering);
        let mut accepted = 0.0;
        for (k, &(num, den)) in event.ledger.increments.clone().iter().enumerate() {
            let exponent = num as f64 / den as f64;
            let stage_lw: Vec<f64> = ll
                .iter()
                .enumerate()
                .map(|(i, l)| if k == 0 { base[i] } else { 0.0 } + exponent * l)
                .collect();
            let w = normalize_log_weights(&stage_lw)?;
            event.stage_ess.push(ess(&w)?);
            self.resample(ens, &mut ll, &w, self.offset(key, k as u64));
            let phi = (k + 1) as f64 / p as f64;
            let stage_key = key.wrapping_mul(1 << 16).wrapping_add(k as u64);
            accepted += self.jitter_mcmc(ens, obs, phi, &mut ll, stage_key)?;
        }
        event.resampled = true;
        event.accept_rate = Some(accepted / p as f64);
        set_log_weights(ens, &vec![0.0; ens.len()]);
        Ok(event)
    }

    /// Forecasts one window (nudging the last step for [`Algorithm::Nudged`])
    /// and assimilates `obs` at its end. `on_step` sees the ensemble every
    /// `report_every` steps.
    pub fn cycle<E: From<QgError>>(
        &self,
        ens: &mut Ensemble,
        obs: &ObservationRecord,
        algorithm: Algorithm,
        report_every: usize,
        mut on_step: impl FnMut(&Ensemble) -> Result<(), E>,
    ) -> Result<AssimilationEvent, E> {
        let n = self.steps_per_window;
        let chunk = report_every.clamp(1, n);
        ens.begin_window();
        let mut done = 0;
        while done < n {
            let steps = chunk.min(n - done);
            let nudge = (algorithm == Algorithm::Nudged && done + steps == n).then_some(obs);
            self.forecast(ens, steps, nudge)?;
            done += steps;
            if done < n {
                on_step(ens)?;
            }
        }
        let expected = ens.time();
        if (expected - obs.time).abs() > 1e-6 * self.dt() {
            return Err(QgError::InvalidParameter(format!(
                "observation at t = {} s does not match ensemble time {} s",
                obs.time, expected
            ))
            .into());
        }
        let event = self.assimilate(ens, obs, algorithm)?;
        on_step(ens)?;
        Ok(event)
    }
}

/// Offset slot for the base resample, clear of the tempering stages.
const BASE_STAGE: u64 = u64::MAX;

fn set_log_weights(ens: &mut Ensemble, lw: &[f64]) {
    let max = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for (p, l) in ens.particles.iter_mut().zip(lw) {
        p.log_weight = l - max;
        p.girsanov = 0.0;
    }
}

fn mean_abs_lambda(ens: &Ensemble) -> f64 {
    let vals: Vec<f64> = ens
        .particles
        .iter()
        .filter_map(|p| p.lambda.as_ref())
        .map(|l| l.iter().map(|v| v.abs()).sum::<f64>() / l.len().max(1) as f64)
        .collect();
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}
