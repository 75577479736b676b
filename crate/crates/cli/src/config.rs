//! Experiment configuration. Every physical quantity carries its unit in
//! the key name.

use std::path::{Path, PathBuf};

use qgda_core::cabaret::{ModelParams, SourceStaging};
use qgda_core::elliptic::Stratification;
use qgda_core::filter::{Algorithm, FilterConfig, TemperingMode};
use qgda_core::observations::GirsanovSign;
use qgda_core::stochastic::{BetaExtrapolation, XiSpec};
use qgda_core::Grid;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub physics: PhysicsConfig,
    pub grids: GridConfig,
    pub noise: NoiseConfig,
    pub filter: FilterSection,
    pub run: RunConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicsConfig {
    pub lx_m: f64,
    pub ly_m: f64,
    pub beta_per_m_s: f64,
    pub nu_m2_per_s: f64,
    pub mu_per_s: f64,
    pub u1_m_per_s: f64,
    pub u2_m_per_s: f64,
    pub s1_per_km2: f64,
    pub s2_per_km2: f64,
    /// Carried for completeness: the stratification parameters already
    /// contain it.
    pub f0_per_s: f64,
    pub courant_limit: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub truth_nx: usize,
    pub truth_ny: usize,
    pub signal_nx: usize,
    pub signal_ny: usize,
    pub truth_dt_s: f64,
    pub signal_dt_s: f64,
    pub station_rows: usize,
    pub station_cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub modes: usize,
    pub amplitude_m_per_sqrt_s: f64,
    pub spectrum: f64,
    pub layer_ratio: f64,
    pub basis_seed: u64,
    /// Use a saved basis instead of synthesising one.
    #[serde(default)]
    pub basis_path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSection {
    pub algorithm: String,
    pub particles: usize,
    pub ess_threshold: f64,
    pub rho: f64,
    pub mcmc_steps: usize,
    pub da_interval_s: f64,
    pub tempering: String,
    pub max_stages: usize,
    pub renudge: bool,
    pub mcmc_girsanov: bool,
    pub girsanov_sign: String,
    pub beta_extrapolation: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub spinup_s: f64,
    /// Amplitude of the random layer-1 PV perturbation that starts the
    /// spin-up from rest.
    pub spinup_perturbation_per_s: f64,
    pub spinup_seed: u64,
    pub init_window_s: f64,
    pub assimilation_s: f64,
    pub report_interval_s: f64,
    pub observation_seed: u64,
    pub rank_stations: usize,
    pub rank_seed: u64,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            physics: PhysicsConfig {
                lx_m: 3.84e6,
                ly_m: 1.92e6,
                beta_per_m_s: 2.0e-11,
                nu_m2_per_s: 3.125,
                mu_per_s: 4.0e-8,
                u1_m_per_s: 0.06,
                u2_m_per_s: 0.0,
                s1_per_km2: 4.22e-3,
                s2_per_km2: 1.41e-3,
                f0_per_s: 0.83e-4,
                courant_limit: 1.0,
            },
            grids: GridConfig {
                truth_nx: 130,
                truth_ny: 66,
                signal_nx: 65,
                signal_ny: 33,
                truth_dt_s: 3600.0,
                signal_dt_s: 3600.0,
                station_rows: 4,
                station_cols: 4,
            },
            noise: NoiseConfig {
                modes: 8,
                amplitude_m_per_sqrt_s: 4.0,
                spectrum: 1.0,
                layer_ratio: 0.5,
                basis_seed: 7,
                basis_path: None,
            },
            filter: FilterSection {
                algorithm: "nudged".into(),
                particles: 20,
                ess_threshold: 16.0,
                rho: 0.9999,
                mcmc_steps: 20,
                da_interval_s: 4.0 * 3600.0,
                tempering: "incremental".into(),
                max_stages: 32,
                renudge: false,
                mcmc_girsanov: false,
                girsanov_sign: "consistent".into(),
                beta_extrapolation: "verbatim".into(),
                seed: 11,
            },
            run: RunConfig {
                spinup_s: 365.0 * 86400.0,
                spinup_perturbation_per_s: 1.0e-6,
                spinup_seed: 3,
                init_window_s: 8.0 * 3600.0,
                assimilation_s: 5.0 * 86400.0,
                report_interval_s: 3600.0,
                observation_seed: 5,
                rank_stations: 6,
                rank_seed: 13,
                out_dir: PathBuf::from("out"),
            },
        }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// `span / dt` when it is a non-negative integer.
fn whole_steps(span: f64, dt: f64, what: &str) -> Result<usize> {
    let n = (span / dt).round();
    if !(n >= 0.0) || (n * dt - span).abs() > 1e-9 * span.abs().max(dt) {
        return Err(config_err(format!(
            "{what} ({span} s) is not a multiple of the time step ({dt} s)"
        )));
    }
    Ok(n as usize)
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grids;
        if !g.truth_nx.is_multiple_of(g.signal_nx) || !g.truth_ny.is_multiple_of(g.signal_ny) {
            return Err(config_err("truth grid must be an integer multiple of the signal grid"));
        }
        self.truth_grid()?;
        self.signal_grid()?;
        self.stratification()?;
        self.truth_params().validate()?;
        self.signal_params().validate()?;
        self.filter_config()?.validate(g.signal_dt_s)?;
        self.algorithm()?;
        let r = &self.run;
        whole_steps(r.spinup_s, g.truth_dt_s, "spin-up span")?;
        whole_steps(r.init_window_s, g.truth_dt_s, "initial window")?;
        whole_steps(r.init_window_s, g.signal_dt_s, "initial window")?;
        whole_steps(r.report_interval_s, g.signal_dt_s, "report interval")?;
        whole_steps(self.filter.da_interval_s, g.truth_dt_s, "assimilation interval")?;
        whole_steps(self.filter.da_interval_s, r.report_interval_s, "assimilation interval")?;
        let cycles = whole_steps(r.assimilation_s, self.filter.da_interval_s, "assimilation span")?;
        if cycles == 0 {
            return Err(config_err("assimilation span must cover at least one cycle"));
        }
        if r.report_interval_s <= 0.0 {
            return Err(config_err("report interval must be positive"));
        }
        if r.rank_stations == 0 || r.rank_stations > g.station_rows * g.station_cols {
            return Err(config_err("rank stations must be between 1 and the station count"));
        }
        Ok(())
    }

    pub fn truth_grid(&self) -> Result<Grid> {
        Ok(Grid::new(
            self.grids.truth_nx,
            self.grids.truth_ny,
            self.physics.lx_m,
            self.physics.ly_m,
        )?)
    }

    pub fn signal_grid(&self) -> Result<Grid> {
        Ok(Grid::new(
            self.grids.signal_nx,
            self.grids.signal_ny,
            self.physics.lx_m,
            self.physics.ly_m,
        )?)
    }

    pub fn stratification(&self) -> Result<Stratification> {
        Ok(Stratification::from_per_km2(
            self.physics.s1_per_km2,
            self.physics.s2_per_km2,
        )?)
    }

    fn params(&self, dt: f64) -> ModelParams {
        let p = &self.physics;
        ModelParams {
            beta: p.beta_per_m_s,
            nu: p.nu_m2_per_s,
            mu: p.mu_per_s,
            background_u: [p.u1_m_per_s, p.u2_m_per_s],
            dt,
            courant_limit: p.courant_limit,
            staging: SourceStaging::Split,
        }
    }

    pub fn truth_params(&self) -> ModelParams {
        self.params(self.grids.truth_dt_s)
    }

    pub fn signal_params(&self) -> ModelParams {
        self.params(self.grids.signal_dt_s)
    }

    pub fn xi_spec(&self) -> XiSpec {
        let n = &self.noise;
        XiSpec {
            modes: n.modes,
            amplitude: n.amplitude_m_per_sqrt_s,
            spectrum: n.spectrum,
            layer_ratio: n.layer_ratio,
            seed: n.basis_seed,
        }
    }

    pub fn algorithm(&self) -> Result<Algorithm> {
        Ok(self.filter.algorithm.parse()?)
    }

    pub fn filter_config(&self) -> Result<FilterConfig> {
        let f = &self.filter;
        let tempering = match f.tempering.as_str() {
            "incremental" => TemperingMode::Incremental,
            "literal" => TemperingMode::Literal,
            other => return Err(config_err(format!("unknown tempering mode {other:?}"))),
        };
        let girsanov = match f.girsanov_sign.as_str() {
            "consistent" => GirsanovSign::Consistent,
            "printed" => GirsanovSign::Printed,
            other => return Err(config_err(format!("unknown Girsanov sign {other:?}"))),
        };
        let beta = match f.beta_extrapolation.as_str() {
            "verbatim" => BetaExtrapolation::Verbatim,
            "consistent" => BetaExtrapolation::Consistent,
            other => return Err(config_err(format!("unknown beta extrapolation {other:?}"))),
        };
        Ok(FilterConfig {
            n: f.particles,
            n_star: f.ess_threshold,
            rho: f.rho,
            mcmc_steps: f.mcmc_steps,
            da_interval: f.da_interval_s,
            tempering,
            max_stages: f.max_stages,
            renudge: f.renudge,
            mcmc_girsanov: f.mcmc_girsanov,
            girsanov,
            beta,
        })
    }

    pub fn spinup_steps(&self) -> Result<usize> {
        whole_steps(self.run.spinup_s, self.grids.truth_dt_s, "spin-up span")
    }

    pub fn cycles(&self) -> Result<usize> {
        whole_steps(self.run.assimilation_s, self.filter.da_interval_s, "assimilation span")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(ExperimentConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_ratios_and_keys() {
        let mut cfg = ExperimentConfig::default();
        cfg.grids.truth_nx = 131;
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
        let text = ExperimentConfig::default().to_toml().replace("beta_per_m_s", "beta");
        assert!(ExperimentConfig::parse(&text).is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.filter.da_interval_s = 5000.0;
        assert!(cfg.validate().is_err());
    }
}
