//! The small-grid self-convergence study behind the `convergence`
//! subcommand.

use std::f64::consts::PI;

use qgda_core::cabaret::{ModelParams, SourceStaging};
use qgda_core::diagnostics::{convergence_study, ConvergenceReport, ConvergenceSetup};
use qgda_core::elliptic::Stratification;
use qgda_core::stochastic::{BetaExtrapolation, XiSpec};
use qgda_core::Grid;

use crate::config::ExperimentConfig;
use crate::error::Result;

/// Knobs of the study. The defaults keep every level well resolved: the
/// viscosity is switched off because the no-slip boundary layer is never
/// resolved on these grids and would stall the refinement.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvergencePlan {
    pub coarse_nx: usize,
    pub coarse_ny: usize,
    pub dt_s: f64,
    pub coarse_steps: usize,
    pub levels: usize,
    pub pv_amplitude_per_s: f64,
    pub modes: usize,
    pub xi_amplitude: f64,
    pub paths: usize,
    pub seed: u64,
}

impl Default for ConvergencePlan {
    fn default() -> Self {
        Self {
            coarse_nx: 16,
            coarse_ny: 8,
            dt_s: 5.0e4,
            coarse_steps: 16,
            levels: 4,
            pv_amplitude_per_s: 3.0e-5,
            modes: 4,
            xi_amplitude: 8.0,
            paths: 4,
            seed: 11,
        }
    }
}

/// Runs the study with the domain, stratification, β, drag and background
/// flow of `cfg`. Without `noise` this is the deterministic limit.
pub fn run_convergence(cfg: &ExperimentConfig, plan: &ConvergencePlan, noise: bool) -> Result<ConvergenceReport> {
    let p = &cfg.physics;
    let (lx, ly) = (p.lx_m, p.ly_m);
    let grid = Grid::new(plan.coarse_nx, plan.coarse_ny, lx, ly)?;
    let strat = Stratification::from_per_km2(p.s1_per_km2, p.s2_per_km2)?;
    let params = ModelParams {
        beta: p.beta_per_m_s,
        nu: 0.0,
        mu: p.mu_per_s,
        background_u: [p.u1_m_per_s, p.u2_m_per_s],
        dt: plan.dt_s,
        courant_limit: p.courant_limit,
        staging: SourceStaging::Split,
    };
    let amp = plan.pv_amplitude_per_s;
    let initial = move |l: usize, x: f64, y: f64| {
        let a = if l == 0 { amp } else { -0.3 * amp };
        a * ((2.0 * PI * x / lx).sin() * (PI * y / ly).sin()
            + 0.5 * (4.0 * PI * x / lx + 1.0).cos() * (2.0 * PI * y / ly).sin())
    };
    let xi = noise.then_some(XiSpec {
        modes: plan.modes,
        amplitude: plan.xi_amplitude,
        spectrum: 1.0,
        layer_ratio: 1.0 / 3.0,
        seed: 3,
    });
    let setup = ConvergenceSetup {
        coarse_grid: grid,
        strat,
        params,
        levels: plan.levels,
        coarse_steps: plan.coarse_steps,
        xi,
        beta: BetaExtrapolation::Verbatim,
        paths: plan.paths,
        seed: plan.seed,
        initial: &initial,
    };
    Ok(convergence_study(&setup)?)
}
