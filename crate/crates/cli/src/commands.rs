//! One function per subcommand. Every command reads what it needs from
//! the output directory and writes its products back into it.

use std::path::{Path, PathBuf};

use qgda_core::cabaret::ModelState;
use qgda_core::diagnostics::std_dev;
use qgda_core::filter::{project_state, Algorithm};
use qgda_core::snapshot::{Snapshot, SnapshotKind};
use qgda_core::stochastic::XiBasis;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::io;
use crate::pipeline::{self, RunOutput, Setup, TruthRun};
use crate::studies::{run_convergence, ConvergencePlan};

pub const SPINUP_STATE: &str = "spinup/state.qgf";
pub const XI_FILE: &str = "xi.qgf";

/// Command-line overrides applied on top of the configuration file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub algorithm: Option<Algorithm>,
    pub out: Option<PathBuf>,
}

pub fn resolve(config: Option<&Path>, ov: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = match config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = ov.seed {
        cfg.filter.seed = s;
    }
    if let Some(a) = ov.algorithm {
        cfg.filter.algorithm = a.tag().to_string();
    }
    if let Some(o) = &ov.out {
        cfg.run.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> &Path {
    &cfg.run.out_dir
}

fn save_config(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    io::write_bytes(&dir.join("config.toml"), cfg.to_toml().as_bytes())
}

/// Uses a basis saved by `xi-gen` in the output directory when the
/// configuration does not name one.
fn setup(cfg: &ExperimentConfig) -> Result<Setup> {
    let mut cfg = cfg.clone();
    let saved = out_dir(&cfg).join(XI_FILE);
    if cfg.noise.basis_path.is_none() && saved.exists() {
        cfg.noise.basis_path = Some(saved);
    }
    Setup::new(&cfg)
}

pub fn spinup(cfg: &ExperimentConfig, mut log: impl FnMut(&str)) -> Result<PathBuf> {
    let setup = setup(cfg)?;
    let dir = out_dir(cfg);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["time_s", "rms_speed_m_per_s"])?;
    let state = pipeline::spinup(&setup, |s| {
        let v = pipeline::rms_speed(&setup.truth_model, s)?;
        log(&format!("day {:>6.1}  rms speed {v:.4} m/s", s.time / 86400.0));
        w.serialize((s.time, v))?;
        Ok(())
    })?;
    let bytes = w
        .into_inner()
        .map_err(|e| CliError::Config(format!("csv buffer: {e}")))?;
    io::write_bytes(&dir.join("spinup/energy.csv"), &bytes)?;
    let path = dir.join(SPINUP_STATE);
    io::write_snapshot(
        &path,
        &Snapshot::from_field(&state.q, SnapshotKind::Pv, state.mass_target),
    )?;
    save_config(cfg, dir)?;
    Ok(path)
}

fn load_spinup(setup: &Setup, dir: &Path) -> Result<ModelState> {
    let path = dir.join(SPINUP_STATE);
    if !path.exists() {
        return Err(CliError::Config(format!(
            "{} not found; run `spinup` first",
            path.display()
        )));
    }
    let snap = Snapshot::read(&path)?;
    let mass = snap.aux;
    let q = snap.into_field(setup.truth_grid, SnapshotKind::Pv)?;
    Ok(setup.truth_model.init_state(q, mass)?)
}

pub fn truth(cfg: &ExperimentConfig) -> Result<String> {
    let setup = setup(cfg)?;
    let dir = out_dir(cfg);
    let spun = load_spinup(&setup, dir)?;
    let run = pipeline::generate_truth(&setup, &spun)?;
    io::save_truth(dir, &run)?;
    let sum = pipeline::truth_checksum(&run)?;
    io::write_bytes(&dir.join("truth_sha256.txt"), format!("{sum}\n").as_bytes())?;
    Ok(sum)
}

fn load_truth(setup: &Setup, dir: &Path) -> Result<TruthRun> {
    if !dir.join("truth/index.csv").exists() {
        return Err(CliError::Config(format!(
            "no truth run in {}; run `truth` first",
            dir.display()
        )));
    }
    io::load_truth(dir, &setup.signal_model, &setup.stations)
}

pub fn xi_gen(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let setup = Setup::new(cfg)?;
    let path = out_dir(cfg).join(XI_FILE);
    io::write_snapshot(&path, &setup.xi.to_snapshot())?;
    Ok(path)
}

pub struct XiCheck {
    pub modes: usize,
    pub divergence: f64,
    pub max_speed: f64,
}

/// Loads the basis the runs would use and checks it is divergence-free.
pub fn xi_check(cfg: &ExperimentConfig) -> Result<XiCheck> {
    let setup = setup(cfg)?;
    let xi: &XiBasis = &setup.xi;
    Ok(XiCheck {
        modes: xi.len(),
        divergence: xi.divergence_residual(),
        max_speed: xi.max_speed(),
    })
}

/// Builds the initial ensemble and writes every member plus the station
/// spread. Returns the mean station standard deviation.
pub fn init_ensemble(cfg: &ExperimentConfig) -> Result<f64> {
    let setup = setup(cfg)?;
    let dir = out_dir(cfg);
    let truth = load_truth(&setup, dir)?;
    let ens = pipeline::init_ensemble(&setup, &truth, cfg.filter.seed)?;
    let edir = dir.join("ensemble");
    let mut station_values = Vec::with_capacity(ens.len());
    for (i, p) in ens.particles.iter().enumerate() {
        let snap = Snapshot::from_field(&p.state.q, SnapshotKind::Pv, p.state.mass_target);
        io::write_snapshot(&edir.join(format!("member_{i:03}.qgf")), &snap)?;
        station_values.push(project_state(&setup.signal_model, &p.state, &setup.stations)?);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["station_id", "std_u", "std_v"])?;
    let mut all = Vec::new();
    for s in 0..setup.stations.len() {
        let comp = |c: usize| -> Vec<f64> { station_values.iter().map(|m| m[s][c]).collect() };
        let (su, sv) = (std_dev(&comp(0)), std_dev(&comp(1)));
        w.serialize((s, su, sv))?;
        all.extend([su, sv]);
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CliError::Config(format!("csv buffer: {e}")))?;
    io::write_bytes(&edir.join("spread.csv"), &bytes)?;
    Ok(all.iter().sum::<f64>() / all.len().max(1) as f64)
}

pub fn run_dir(cfg: &ExperimentConfig, algorithm: Algorithm) -> PathBuf {
    out_dir(cfg).join(format!("run-{}-seed{}", algorithm.tag(), cfg.filter.seed))
}

fn write_run(dir: &Path, run: &RunOutput) -> Result<()> {
    io::write_bytes(&dir.join("metrics.csv"), &io::metrics_csv(&run.series)?)?;
    io::write_bytes(&dir.join("events.csv"), &io::events_csv(&run.events)?)?;
    io::write_bytes(&dir.join("spread.csv"), &io::spread_csv(&run.spread)?)?;
    for (s, h) in run.rank_stations.iter().zip(&run.ranks) {
        io::write_bytes(&dir.join(format!("ranks_station_{s:02}.csv")), &io::rank_csv(h)?)?;
    }
    Ok(())
}

/// The configured algorithm and its free control from the same initial
/// ensemble; both runs are checked to have read the same truth.
pub fn assimilate(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let setup = setup(cfg)?;
    let truth = load_truth(&setup, out_dir(cfg))?;
    let algorithm = cfg.algorithm()?;
    let pair = pipeline::run_paired(&setup, &truth, algorithm, cfg.filter.seed)?;
    let dir = run_dir(cfg, algorithm);
    write_run(&dir.join("da"), &pair.da)?;
    write_run(&dir.join("free"), &pair.free)?;
    let sums = format!("da,{}\nfree,{}\n", pair.da.input_checksum, pair.free.input_checksum);
    io::write_bytes(&dir.join("input_sha256.csv"), sums.as_bytes())?;
    save_config(cfg, &dir)?;
    Ok(dir)
}

/// `(run, metric, mode, time mean over t > 0)` for both halves of a
/// paired run directory; also written to `summary.csv`.
pub fn metrics(dir: &Path) -> Result<Vec<(String, String, String, f64)>> {
    let mut rows = Vec::new();
    for run in ["da", "free"] {
        let path = dir.join(run).join("metrics.csv");
        let parsed = io::parse_metrics(&io::read_bytes(&path)?)?;
        let mut keys: Vec<(String, String)> = parsed.iter().map(|r| (r.1.clone(), r.2.clone())).collect();
        keys.dedup();
        keys.sort();
        keys.dedup();
        for (metric, mode) in keys {
            let v: Vec<f64> = parsed
                .iter()
                .filter(|r| r.0 > 0.0 && r.1 == metric && r.2 == mode)
                .map(|r| r.3)
                .collect();
            let mean = v.iter().sum::<f64>() / v.len().max(1) as f64;
            rows.push((run.to_string(), metric, mode, mean));
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["run", "metric", "mode", "time_mean"])?;
    for r in &rows {
        w.serialize(r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CliError::Config(format!("csv buffer: {e}")))?;
    io::write_bytes(&dir.join("summary.csv"), &bytes)?;
    Ok(rows)
}

/// Stochastic and deterministic refinement studies; returns their fitted
/// orders.
pub fn convergence(cfg: &ExperimentConfig) -> Result<(f64, f64)> {
    let plan = ConvergencePlan::default();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["case", "level", "dt_s", "rms_error"])?;
    let mut orders = [0.0; 2];
    for (k, (case, noise)) in [("stochastic", true), ("deterministic", false)].into_iter().enumerate() {
        let r = run_convergence(cfg, &plan, noise)?;
        for (l, (dt, e)) in r.dts.iter().zip(&r.errors).enumerate() {
            w.serialize((case, l, dt, e))?;
        }
        orders[k] = r.order;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CliError::Config(format!("csv buffer: {e}")))?;
    io::write_bytes(&out_dir(cfg).join("convergence.csv"), &bytes)?;
    Ok((orders[0], orders[1]))
}
