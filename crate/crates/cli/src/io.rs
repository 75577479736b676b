//! CSV logs, snapshot directories and checksums.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use qgda_core::diagnostics::{MetricSeries, RankHistogram};
use qgda_core::filter::AssimilationEvent;
use qgda_core::observations::{ObservationRecord, SigmaSource};
use qgda_core::snapshot::{Snapshot, SnapshotKind};
use qgda_core::StationSet;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};
use crate::pipeline::{SignalTruth, SpreadRow, TruthRun};

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Writes a snapshot, creating its directory first.
pub fn write_snapshot(path: &Path, snap: &Snapshot) -> Result<()> {
    write_bytes(path, &snap.encode())
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| CliError::Config(format!("csv buffer: {e}")))
}

fn source_from_tag(tag: &str) -> Result<SigmaSource> {
    [SigmaSource::FineGrid, SigmaSource::Temporal, SigmaSource::Fixed]
        .into_iter()
        .find(|s| s.tag() == tag)
        .ok_or_else(|| CliError::Config(format!("unknown sigma source {tag:?}")))
}

/// Observation log; the last column records where σ came from.
pub fn observations_csv(records: &[ObservationRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "time_s",
        "station_id",
        "x_m",
        "y_m",
        "u_obs",
        "v_obs",
        "sigma_u",
        "sigma_v",
        "sigma_source",
    ])?;
    for r in records {
        for (i, ((s, y), sig)) in r.stations.stations.iter().zip(&r.values).zip(&r.sigma).enumerate() {
            w.serialize((r.time, i, s.x, s.y, y[0], y[1], sig[0], sig[1], r.sigma_source.tag()))?;
        }
    }
    finish(w)
}

/// Per-station `(values, sigma)` of one observation time.
type StationRows = BTreeMap<usize, ([f64; 2], [f64; 2])>;

pub fn parse_observations(bytes: &[u8], stations: &StationSet) -> Result<Vec<ObservationRecord>> {
    type Row = (f64, usize, f64, f64, f64, f64, f64, f64, String);
    let mut rdr = csv::Reader::from_reader(bytes);
    let mut groups: Vec<(f64, String, StationRows)> = Vec::new();
    for row in rdr.deserialize::<Row>() {
        let (t, id, _, _, u, v, su, sv, source) = row?;
        if groups.last().is_none_or(|g| g.0 != t) {
            groups.push((t, source.clone(), BTreeMap::new()));
        }
        let g = groups.last_mut().expect("group");
        if g.2.insert(id, ([u, v], [su, sv])).is_some() {
            return Err(CliError::Config(format!("duplicate station {id} at t = {t}")));
        }
    }
    groups
        .into_iter()
        .map(|(t, source, rows)| {
            if rows.len() != stations.len() || rows.keys().copied().ne(0..stations.len()) {
                return Err(CliError::Config(format!("incomplete observation set at t = {t}")));
            }
            let (values, sigma) = rows.into_values().unzip();
            Ok(ObservationRecord::new(
                t,
                stations.clone(),
                values,
                sigma,
                source_from_tag(&source)?,
            )?)
        })
        .collect()
}

/// Signal-grid truth snapshots concatenated in time order.
pub fn truth_bytes(truth: &TruthRun) -> Vec<u8> {
    let mut out = Vec::new();
    for r in &truth.records {
        out.extend(Snapshot::from_field(&r.q, SnapshotKind::Pv, r.mass).encode());
    }
    out
}

/// Writes `truth/index.csv`, one PV snapshot per record and the observation log.
pub fn save_truth(dir: &Path, truth: &TruthRun) -> Result<()> {
    let tdir = dir.join("truth");
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["index", "time_s", "mass_m4_per_s"])?;
    for (k, r) in truth.records.iter().enumerate() {
        w.serialize((k, r.time, r.mass))?;
        write_snapshot(
            &tdir.join(format!("q_{k:05}.qgf")),
            &Snapshot::from_field(&r.q, SnapshotKind::Pv, r.mass),
        )?;
    }
    write_bytes(&tdir.join("index.csv"), &finish(w)?)?;
    write_bytes(&dir.join("observations.csv"), &observations_csv(&truth.observations)?)
}

pub fn load_truth(dir: &Path, model: &qgda_core::cabaret::Model, stations: &StationSet) -> Result<TruthRun> {
    let tdir = dir.join("truth");
    let index = read_bytes(&tdir.join("index.csv"))?;
    let mut rdr = csv::Reader::from_reader(index.as_slice());
    let mut records = Vec::new();
    for row in rdr.deserialize::<(usize, f64, f64)>() {
        let (k, t, mass) = row?;
        let q = Snapshot::read(&tdir.join(format!("q_{k:05}.qgf")))?.into_field(*model.grid(), SnapshotKind::Pv)?;
        records.push(SignalTruth::from_pv(model, t, q, mass)?);
    }
    let observations = parse_observations(&read_bytes(&dir.join("observations.csv"))?, stations)?;
    Ok(TruthRun { records, observations })
}

pub fn metrics_csv(series: &[MetricSeries]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["time_s", "metric", "mode", "value"])?;
    for s in series {
        for (t, v) in s.times.iter().zip(&s.values) {
            w.serialize((t, s.metric.tag(), &s.label, v))?;
        }
    }
    finish(w)
}

pub fn events_csv(events: &[AssimilationEvent]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "time_s",
        "algorithm",
        "ess_before",
        "p_stages",
        "stage_ess",
        "mcmc_accept_rate",
        "mean_abs_lambda",
    ])?;
    for e in events {
        let stage_ess: Vec<String> = e.stage_ess.iter().map(|v| format!("{v:.4}")).collect();
        let accept = e.accept_rate.map_or(String::new(), |a| format!("{a:.4}"));
        w.serialize((
            e.time,
            e.algorithm.tag(),
            e.ess_before,
            e.stages(),
            stage_ess.join(";"),
            accept,
            e.mean_abs_lambda,
        ))?;
    }
    finish(w)
}

pub fn spread_csv(rows: &[SpreadRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "time_s",
        "station_id",
        "std_u",
        "std_v",
        "min_u",
        "min_v",
        "max_u",
        "max_v",
        "q05_u",
        "q05_v",
        "q95_u",
        "q95_v",
    ])?;
    for r in rows {
        w.serialize((
            r.time, r.station, r.std[0], r.std[1], r.min[0], r.min[1], r.max[0], r.max[1], r.q05[0], r.q05[1],
            r.q95[0], r.q95[1],
        ))?;
    }
    finish(w)
}

pub fn rank_csv(hist: &RankHistogram) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["bin", "count"])?;
    for (b, c) in hist.counts().iter().enumerate() {
        w.serialize((b, c))?;
    }
    finish(w)
}

/// Reads `time_s, metric, mode, value` rows back.
pub fn parse_metrics(bytes: &[u8]) -> Result<Vec<(f64, String, String, f64)>> {
    let mut rdr = csv::Reader::from_reader(bytes);
    Ok(rdr.deserialize().collect::<Result<_, _>>()?)
}
