//! Verification metrics: relative bias and ensemble mean error, rank
//! histograms, conserved-quantity drift, two-sample tests and the
//! space-time self-convergence study.

use rand::Rng;
use rayon::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::cabaret::{Model, ModelParams};
use crate::elliptic::Stratification;
use crate::error::{QgError, Result};
use crate::field::{LayeredField, LAYERS};
use crate::grid::{coarse_grain, Grid};
use crate::stochastic::{bridge_refine, stoch_step, synthesize_xi, BetaExtrapolation, NoiseStream, XiSpec};

fn l2(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

fn check_members(truth: &[f64], ensemble: &[Vec<f64>]) -> Result<f64> {
    if ensemble.is_empty() {
        return Err(QgError::InvalidParameter("empty ensemble".into()));
    }
    if let Some(bad) = ensemble.iter().find(|m| m.len() != truth.len()) {
        return Err(QgError::Dimension {
            what: "ensemble member",
            expected: truth.len(),
            got: bad.len(),
        });
    }
    let norm = l2(truth.iter().copied());
    if !(norm > 0.0) {
        return Err(QgError::ZeroNorm);
    }
    Ok(norm)
}

/// `‖uᵃ − ū‖₂ / ‖uᵃ‖₂` with ū the ensemble mean.
pub fn relative_bias(truth: &[f64], ensemble: &[Vec<f64>]) -> Result<f64> {
    let norm = check_members(truth, ensemble)?;
    let n = ensemble.len() as f64;
    let diff = l2(truth.iter().enumerate().map(|(i, t)| {
        let mean = ensemble.iter().map(|m| m[i]).sum::<f64>() / n;
        t - mean
    }));
    Ok(diff / norm)
}

/// `(1/N) Σ_n ‖uᵃ − uⁿ‖₂ / ‖uᵃ‖₂`.
pub fn ensemble_mean_error(truth: &[f64], ensemble: &[Vec<f64>]) -> Result<f64> {
    let norm = check_members(truth, ensemble)?;
    let total: f64 = ensemble
        .iter()
        .map(|m| l2(truth.iter().zip(m).map(|(t, x)| t - x)))
        .sum();
    Ok(total / (ensemble.len() as f64 * norm))
}

/// Number of members strictly below the truth, with ties resolved by a
/// uniform draw over the tied positions.
pub fn rank_of_truth<R: Rng + ?Sized>(truth: f64, members: &[f64], rng: &mut R) -> usize {
    let below = members.iter().filter(|&&m| m < truth).count();
    let ties = members.iter().filter(|&&m| m == truth).count();
    if ties == 0 {
        below
    } else {
        below + rng.random_range(0..=ties)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankHistogram {
    counts: Vec<u64>,
}

impl RankHistogram {
    /// Histogram for an ensemble of `members` (so `members + 1` bins).
    pub fn new(members: usize) -> Self {
        Self {
            counts: vec![0; members + 1],
        }
    }

    pub fn add(&mut self, rank: usize) {
        self.counts[rank] += 1;
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Pearson statistic against the flat histogram.
    pub fn chi_square(&self) -> f64 {
        let total = self.total() as f64;
        if total == 0.0 {
            return 0.0;
        }
        let expected = total / self.counts.len() as f64;
        self.counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum()
    }

    /// Upper-tail probability of the statistic under flatness.
    pub fn flatness_p_value(&self) -> f64 {
        let dof = (self.counts.len() - 1) as f64;
        match ChiSquared::new(dof) {
            Ok(d) => 1.0 - d.cdf(self.chi_square()),
            Err(_) => 1.0,
        }
    }
}

/// Two-sample Kolmogorov-Smirnov statistic and its asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let en = (n * m / (n + m)).sqrt();
    let lambda = (en + 0.12 + 0.11 / en) * d;
    (d, kolmogorov_q(lambda))
}

/// `Q(λ) = 2 Σ_{j≥1} (−1)^{j−1} exp(−2 j² λ²)`.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for j in 1..=100 {
        let term = (-2.0 * (j * j) as f64 * lambda * lambda).exp();
        sum += sign * term;
        if term < 1e-16 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MetricKind {
    RelativeBias,
    MeanError,
    Ess,
    Spread,
    SpreadQ05,
    SpreadQ95,
    SpreadMin,
    SpreadMax,
    MassDrift,
    EnstrophyRatio,
}

impl MetricKind {
    pub fn tag(self) -> &'static str {
        match self {
            Self::RelativeBias => "RB",
            Self::MeanError => "EME",
            Self::Ess => "ESS",
            Self::Spread => "spread_std",
            Self::SpreadQ05 => "spread_q05",
            Self::SpreadQ95 => "spread_q95",
            Self::SpreadMin => "spread_min",
            Self::SpreadMax => "spread_max",
            Self::MassDrift => "mass_drift",
            Self::EnstrophyRatio => "enstrophy_ratio",
        }
    }
}

/// A time series of one metric. `label` carries the evaluation mode
/// (`stations`, `domain`, a station id, a layer).
#[derive(Clone, Debug, PartialEq)]
pub struct MetricSeries {
    pub metric: MetricKind,
    pub label: String,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl MetricSeries {
    pub fn new(metric: MetricKind, label: impl Into<String>) -> Self {
        Self {
            metric,
            label: label.into(),
            times: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn push(&mut self, time: f64, value: f64) -> Result<()> {
        if let Some(&last) = self.times.last() {
            if !(time > last) {
                return Err(QgError::InvalidParameter(format!(
                    "metric times must increase: {time} after {last}"
                )));
            }
        }
        if !value.is_finite() {
            return Err(QgError::NonFinite("metric value"));
        }
        self.times.push(time);
        self.values.push(value);
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            return f64::NAN;
        }
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Mean over samples with `time ≥ from`.
    pub fn mean_since(&self, from: f64) -> f64 {
        let v: Vec<f64> = self
            .times
            .iter()
            .zip(&self.values)
            .filter(|(t, _)| **t >= from)
            .map(|(_, v)| *v)
            .collect();
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }
}

/// Population standard deviation.
pub fn std_dev(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    if n == 0.0 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Linear-interpolated sample quantile, `p ∈ [0, 1]`.
pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = p.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Drift of ∬q dA (relative to ∬|q| dA at the start) and ∬q² dA (relative
/// to its initial value) for each layer.
pub fn conservation_report(trajectory: &[(f64, LayeredField)]) -> Result<Vec<MetricSeries>> {
    let mut out = Vec::new();
    let Some((_, first)) = trajectory.first() else {
        return Ok(out);
    };
    for l in 0..LAYERS {
        let m0 = first.integral(l);
        let abs0 = first.integral_abs(l);
        let e0 = first.integral_sq(l);
        let mut mass = MetricSeries::new(MetricKind::MassDrift, format!("layer{}", l + 1));
        let mut ens = MetricSeries::new(MetricKind::EnstrophyRatio, format!("layer{}", l + 1));
        for (t, q) in trajectory {
            let drift = q.integral(l) - m0;
            mass.push(*t, if abs0 > 0.0 { drift / abs0 } else { drift })?;
            ens.push(*t, if e0 > 0.0 { q.integral_sq(l) / e0 } else { 1.0 })?;
        }
        out.push(mass);
        out.push(ens);
    }
    Ok(out)
}

/// Least-squares slope of `log e` against `log Δt`.
pub fn fit_order(dts: &[f64], errors: &[f64]) -> f64 {
    let xs: Vec<f64> = dts.iter().map(|d| d.ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Initial condition of a convergence study, as a function of
/// `(layer, x, y)`.
pub type InitialField = dyn Fn(usize, f64, f64) -> f64 + Sync;

/// Configuration of the self-convergence study. Space and time are
/// refined together by factors of two, so the Courant number is the same
/// on every level.
pub struct ConvergenceSetup<'a> {
    pub coarse_grid: Grid,
    pub strat: Stratification,
    /// Parameters on the coarsest level; `dt` is halved per level.
    pub params: ModelParams,
    /// Number of compared levels; the reference is one refinement finer.
    pub levels: usize,
    /// Steps on the coarsest level.
    pub coarse_steps: usize,
    /// Transport noise, or `None` for the deterministic limit.
    pub xi: Option<XiSpec>,
    pub beta: BetaExtrapolation,
    /// Independent Brownian paths averaged in the RMS error.
    pub paths: usize,
    pub seed: u64,
    pub initial: &'a InitialField,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceReport {
    pub dts: Vec<f64>,
    pub errors: Vec<f64>,
    pub order: f64,
}

/// Cell averages by 2x2-point Gauss quadrature.
pub fn cell_averages(grid: &Grid, f: &InitialField) -> LayeredField {
    let h = 0.5 / 3f64.sqrt();
    LayeredField::from_fn(*grid, |l, i, j| {
        let (xc, yc) = grid.cell_center(i, j);
        let mut s = 0.0;
        for ox in [-h, h] {
            for oy in [-h, h] {
                s += f(l, xc + ox * grid.dx, yc + oy * grid.dy);
            }
        }
        0.25 * s
    })
}

fn run_level(setup: &ConvergenceSetup<'_>, level: usize, path_increments: Option<&[Vec<f64>]>) -> Result<LayeredField> {
    let factor = 1usize << level;
    let grid = setup.coarse_grid.refined(factor)?;
    let params = ModelParams {
        dt: setup.params.dt / factor as f64,
        ..setup.params
    };
    let model = Model::new(grid, setup.strat, params)?;
    let mut state = model.init_state(cell_averages(&grid, setup.initial), 0.0)?;
    match (setup.xi.as_ref(), path_increments) {
        (Some(spec), Some(incs)) => {
            let xi = synthesize_xi(&grid, spec)?;
            for dw in incs {
                stoch_step(&model, &mut state, &xi, dw, None, setup.beta)?;
            }
        }
        _ => {
            for _ in 0..setup.coarse_steps * factor {
                model.step(&mut state)?;
            }
        }
    }
    Ok(state.q)
}

/// Self-convergence against the finest level along fixed Brownian paths.
///
/// Every path draws its increments on the coarsest level and refines them
/// by Brownian bridges, so all levels follow the same path. The error of a
/// level is the RMS difference from the finest solution block-averaged onto
/// that level, averaged in mean square over paths.
pub fn convergence_study(setup: &ConvergenceSetup<'_>) -> Result<ConvergenceReport> {
    if setup.levels < 3 {
        return Err(QgError::InvalidParameter(
            "the convergence study needs at least 3 levels".into(),
        ));
    }
    let paths = if setup.xi.is_some() { setup.paths.max(1) } else { 1 };
    let modes = setup.xi.map_or(0, |s| s.modes);
    let per_path: Vec<Vec<f64>> = (0..paths)
        .into_par_iter()
        .map(|p| -> Result<Vec<f64>> {
            let stream = NoiseStream::new(setup.seed).fork(p as u64);
            let mut incs: Vec<Vec<Vec<f64>>> = Vec::with_capacity(setup.levels + 1);
            if setup.xi.is_some() {
                let coarse: Vec<Vec<f64>> = (0..setup.coarse_steps)
                    .map(|n| stream.increments(n as u64, modes, setup.params.dt))
                    .collect();
                incs.push(coarse);
                for level in 1..=setup.levels {
                    let dt = setup.params.dt / (1usize << (level - 1)) as f64;
                    let refined = bridge_refine(&incs[level - 1], dt, &stream.fork(1000 + level as u64));
                    incs.push(refined);
                }
            }
            let reference = run_level(setup, setup.levels, incs.get(setup.levels).map(Vec::as_slice))?;
            (0..setup.levels)
                .map(|level| {
                    let q = run_level(setup, level, incs.get(level).map(Vec::as_slice))?;
                    let r = coarse_grain(&reference, q.grid())?;
                    let ms = q.rms_diff(&r).powi(2);
                    Ok(ms)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let errors: Vec<f64> = (0..setup.levels)
        .map(|l| (per_path.iter().map(|p| p[l]).sum::<f64>() / paths as f64).sqrt())
        .collect();
    let dts: Vec<f64> = (0..setup.levels)
        .map(|l| setup.params.dt / (1usize << l) as f64)
        .collect();
    let order = fit_order(&dts, &errors);
    Ok(ConvergenceReport { dts, errors, order })
}
