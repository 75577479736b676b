//! Synthetic observations of the layer-1 velocity and the weights they
//! induce.

use crate::diagnostics::std_dev;
use crate::error::{QgError, Result};
use crate::field::CellVelocity;
use crate::grid::{Grid, StationSet};
use crate::stochastic::NoiseStream;

/// Smallest admissible observation noise scale (m/s).
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Where the noise scales of a record came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SigmaSource {
    /// Sub-grid spread of the fine-grid truth inside each coarse cell.
    FineGrid,
    /// Temporal spread of the truth at each station.
    Temporal,
    /// Supplied directly.
    Fixed,
}

impl SigmaSource {
    pub fn tag(self) -> &'static str {
        match self {
            Self::FineGrid => "fine_grid",
            Self::Temporal => "temporal",
            Self::Fixed => "fixed",
        }
    }
}

/// Noisy `(u, v)` readings at every station at one time.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationRecord {
    pub time: f64,
    pub stations: StationSet,
    pub values: Vec<[f64; 2]>,
    pub sigma: Vec<[f64; 2]>,
    pub sigma_source: SigmaSource,
}

impl ObservationRecord {
    pub fn new(
        time: f64,
        stations: StationSet,
        values: Vec<[f64; 2]>,
        sigma: Vec<[f64; 2]>,
        sigma_source: SigmaSource,
    ) -> Result<Self> {
        for (what, v) in [("observation values", &values), ("observation sigma", &sigma)] {
            if v.len() != stations.len() {
                return Err(QgError::Dimension {
                    what,
                    expected: stations.len(),
                    got: v.len(),
                });
            }
        }
        if !values.iter().flatten().all(|v| v.is_finite()) {
            return Err(QgError::NonFinite("observation values"));
        }
        if !sigma.iter().flatten().all(|s| *s > 0.0 && s.is_finite()) {
            return Err(QgError::InvalidParameter("observation sigma must be positive".into()));
        }
        Ok(Self {
            time,
            stations,
            values,
            sigma,
            sigma_source,
        })
    }
}

/// Per-station, per-component population standard deviation of the fine
/// layer-1 cell velocities inside the coarse cell holding the station,
/// floored at [`SIGMA_FLOOR`].
pub fn compute_sigma(fine: &CellVelocity, coarse_grid: &Grid, stations: &StationSet) -> Result<Vec<[f64; 2]>> {
    let fg = *fine.u.grid();
    let (rx, ry) = coarse_grid.ratio_to(&fg)?;
    if stations.grid.nx != coarse_grid.nx || stations.grid.ny != coarse_grid.ny {
        return Err(QgError::GridMismatch("stations are not on the coarse grid".into()));
    }
    Ok(stations
        .stations
        .iter()
        .map(|s| {
            let mut us = Vec::with_capacity(rx * ry);
            let mut vs = Vec::with_capacity(rx * ry);
            for fj in s.j * ry..(s.j + 1) * ry {
                for fi in s.i * rx..(s.i + 1) * rx {
                    us.push(fine.u.get(0, fi, fj));
                    vs.push(fine.v.get(0, fi, fj));
                }
            }
            [std_dev(&us).max(SIGMA_FLOOR), std_dev(&vs).max(SIGMA_FLOOR)]
        })
        .collect())
}

/// Fallback noise scales: the temporal standard deviation of each
/// station's reading over a series of snapshots.
pub fn sigma_from_series(series: &[Vec<[f64; 2]>]) -> Result<Vec<[f64; 2]>> {
    let Some(first) = series.first() else {
        return Err(QgError::InvalidParameter("empty station series".into()));
    };
    let m = first.len();
    if let Some(bad) = series.iter().find(|s| s.len() != m) {
        return Err(QgError::Dimension {
            what: "station series",
            expected: m,
            got: bad.len(),
        });
    }
    Ok((0..m)
        .map(|i| {
            let u: Vec<f64> = series.iter().map(|s| s[i][0]).collect();
            let v: Vec<f64> = series.iter().map(|s| s[i][1]).collect();
            [std_dev(&u).max(SIGMA_FLOOR), std_dev(&v).max(SIGMA_FLOOR)]
        })
        .collect())
}

/// `Y = P(truth) + η`, `η ~ N(0, σ²)` independently per station and
/// component; the draws depend only on `(stream, draw_index)`.
pub fn observe_truth(
    time: f64,
    projected: &[[f64; 2]],
    stations: &StationSet,
    sigma: &[[f64; 2]],
    sigma_source: SigmaSource,
    stream: &NoiseStream,
    draw_index: u64,
) -> Result<ObservationRecord> {
    let z = stream.normals(draw_index, 2 * projected.len());
    let values = projected
        .iter()
        .zip(sigma)
        .enumerate()
        .map(|(i, (p, s))| [p[0] + s[0] * z[2 * i], p[1] + s[1] * z[2 * i + 1]])
        .collect();
    ObservationRecord::new(time, stations.clone(), values, sigma.to_vec(), sigma_source)
}

/// Scaled station residuals `(P(X) − Y)/σ`, u and v interleaved.
pub fn scaled_residuals(predicted: &[[f64; 2]], obs: &ObservationRecord) -> Result<Vec<f64>> {
    if predicted.len() != obs.values.len() {
        return Err(QgError::Dimension {
            what: "station predictions",
            expected: obs.values.len(),
            got: predicted.len(),
        });
    }
    Ok(predicted
        .iter()
        .zip(&obs.values)
        .zip(&obs.sigma)
        .flat_map(|((p, y), s)| [(p[0] - y[0]) / s[0], (p[1] - y[1]) / s[1]])
        .collect())
}

/// `−½ Σ_i ‖(P(X)_i − Y_i)/σ_i‖²`.
pub fn log_likelihood_weight(predicted: &[[f64; 2]], obs: &ObservationRecord) -> Result<f64> {
    Ok(-0.5 * scaled_residuals(predicted, obs)?.iter().map(|r| r * r).sum::<f64>())
}

/// `log_likelihood − Σ_k (λ_k² δt/2 − λ_k ΔW_k)`.
pub fn log_girsanov_weight(
    predicted: &[[f64; 2]],
    obs: &ObservationRecord,
    lambda: &[f64],
    dw: &[f64],
    dt: f64,
) -> Result<f64> {
    Ok(log_likelihood_weight(predicted, obs)? + girsanov_correction(lambda, dw, dt, GirsanovSign::Printed)?)
}

/// Sign convention of the `λ ΔW` term of the change-of-measure weight.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GirsanovSign {
    /// `−Σ(λ² δt/2 − λ ΔW)`.
    Printed,
    /// `−Σ(λ² δt/2 + λ ΔW)`: the density ratio of the un-nudged to the
    /// nudged law when the corrector is driven by `ΔW + λ δt` with
    /// `ΔW ~ N(0, δt)`.
    #[default]
    Consistent,
}

/// Log change-of-measure correction for a nudge `λ` over a step `dt`
/// driven by the raw increments `dw`.
pub fn girsanov_correction(lambda: &[f64], dw: &[f64], dt: f64, sign: GirsanovSign) -> Result<f64> {
    if lambda.len() != dw.len() {
        return Err(QgError::Dimension {
            what: "nudging drift",
            expected: dw.len(),
            got: lambda.len(),
        });
    }
    let s = match sign {
        GirsanovSign::Printed => -1.0,
        GirsanovSign::Consistent => 1.0,
    };
    Ok(-lambda
        .iter()
        .zip(dw)
        .map(|(l, w)| l * l * dt / 2.0 + s * l * w)
        .sum::<f64>())
}

/// `(Σ w̄_i²)⁻¹` of the normalised weights.
pub fn ess(weights: &[f64]) -> Result<f64> {
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(QgError::InvalidParameter(
            "weights must be finite and non-negative".into(),
        ));
    }
    if !(total > 0.0) {
        return Err(QgError::ZeroWeights);
    }
    let sq: f64 = weights.iter().map(|w| (w / total).powi(2)).sum();
    Ok(1.0 / sq)
}

/// Normalised weights from log-weights by max subtraction.
pub fn normalize_log_weights(log_weights: &[f64]) -> Result<Vec<f64>> {
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(QgError::ZeroWeights);
    }
    let w: Vec<f64> = log_weights.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| v / total).collect())
}

/// ESS of `exp(log_weights)`, computed in log space.
pub fn ess_from_log(log_weights: &[f64]) -> Result<f64> {
    ess(&normalize_log_weights(log_weights)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightReport {
    pub log_weights: Vec<f64>,
    pub weights: Vec<f64>,
    pub ess: f64,
}

impl WeightReport {
    pub fn from_log_weights(log_weights: Vec<f64>) -> Result<Self> {
        let weights = normalize_log_weights(&log_weights)?;
        let ess = ess(&weights)?;
        Ok(Self {
            log_weights,
            weights,
            ess,
        })
    }
}
