//! Running one scenario end to end and writing its artifacts.

use std::path::Path;

use anyhow::Context;
use serde::Serialize;

use wheelvo::config::PipelineConfig;
use wheelvo::eval::evaluate_timed;
use wheelvo::io::{write_frame_log, write_ply, write_sensor_csv, write_tum, SensorLog};
use wheelvo::manifold::Pose;
use wheelvo::pipeline::{run, RunOutput};
use wheelvo::sim::{generate, Scenario, SimTrace};

#[derive(Clone, Debug, Serialize)]
pub struct Metrics {
    pub scenario: String,
    pub seed: u64,
    pub mode: String,
    pub frames: usize,
    pub keyframes: usize,
    pub rmse: f64,
    pub percent: f64,
    pub mean_error: f64,
    pub max_error: f64,
    pub distance: f64,
    pub dr_rmse: f64,
    pub dr_percent: f64,
}

pub struct Outcome {
    pub trace: SimTrace,
    pub output: RunOutput,
    pub metrics: Metrics,
    pub errors: Vec<f64>,
}

fn timed<'a>(it: impl Iterator<Item = (f64, &'a Pose<f64>)>) -> Vec<(f64, nalgebra::Vector3<f64>)> {
    it.map(|(t, p)| (t, p.center())).collect()
}

pub fn execute(scenario: &Scenario, seed: u64, cfg: &PipelineConfig) -> anyhow::Result<Outcome> {
    let trace = generate(scenario, seed).context("generating the trace")?;
    let output = run(&trace, cfg).context("running the estimator")?;
    let period = 1.0 / scenario.rates.camera;
    let distance = trace.travelled_distance();
    let truth = timed(trace.frames.iter().map(|f| (f.timestamp, &f.truth)));
    let est = timed(output.frames.iter().map(|f| (f.timestamp, &f.state.pose)));
    let dr = timed(trace.frames.iter().zip(&output.dead_reckoning).map(|(f, s)| (f.timestamp, &s.pose)));
    let (res, _) = evaluate_timed(&est, &truth, period, distance).context("evaluating the estimate")?;
    let (dr_res, _) = evaluate_timed(&dr, &truth, period, distance).context("evaluating dead reckoning")?;
    let metrics = Metrics {
        scenario: scenario.name.clone(),
        seed,
        mode: format!("{:?}", cfg.mode),
        frames: output.frames.len(),
        keyframes: output.keyframes().len(),
        rmse: res.rmse,
        percent: res.percent_of_distance,
        mean_error: res.mean,
        max_error: res.max,
        distance,
        dr_rmse: dr_res.rmse,
        dr_percent: dr_res.percent_of_distance,
    };
    Ok(Outcome { trace, output, metrics, errors: res.errors })
}

fn csv_string<T: Serialize>(rows: &[T]) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?)?)
}

#[derive(Serialize)]
struct PoseError {
    frame: usize,
    timestamp: f64,
    mode: &'static str,
    error: f64,
}

pub fn write_run(dir: &Path, o: &Outcome) -> anyhow::Result<()> {
    let write = |name: &str, text: String| -> anyhow::Result<()> {
        let p = dir.join(name);
        std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    };
    let est: Vec<(f64, Pose<f64>)> = o.output.frames.iter().map(|f| (f.timestamp, f.state.pose)).collect();
    let truth: Vec<(f64, Pose<f64>)> = o.trace.frames.iter().map(|f| (f.timestamp, f.truth)).collect();
    write("estimate.tum", write_tum(&est))?;
    write("truth.tum", write_tum(&truth))?;
    write("metrics.csv", csv_string(std::slice::from_ref(&o.metrics))?)?;
    write("frames.jsonl", write_frame_log(&o.output.frames)?)?;
    write("sensors.csv", write_sensor_csv(&SensorLog::from_trace(&o.trace)))?;
    let errors: Vec<PoseError> = o
        .output
        .frames
        .iter()
        .zip(&o.errors)
        .map(|(f, e)| PoseError { frame: f.frame, timestamp: f.timestamp, mode: f.mode.as_str(), error: *e })
        .collect();
    write("errors.csv", csv_string(&errors)?)?;
    if let Some(map) = &o.output.map {
        write("map.ply", write_ply(map))?;
        let kfs: Vec<(f64, Pose<f64>)> = map.keyframes.values().map(|k| (k.timestamp, k.state.pose)).collect();
        write("keyframes.tum", write_tum(&kfs))?;
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct Row {
    pub kind: &'static str,
    pub scenario: String,
    pub seed: Option<u64>,
    pub status: String,
    pub runs: usize,
    pub rmse: Option<f64>,
    pub rmse_std: Option<f64>,
    pub percent: Option<f64>,
    pub percent_std: Option<f64>,
    pub max_error: Option<f64>,
    pub max_error_std: Option<f64>,
    pub dr_rmse: Option<f64>,
    pub dr_rmse_std: Option<f64>,
}

impl Row {
    pub fn ok(scenario: &str, seed: u64, m: Metrics) -> Self {
        Self {
            kind: "run",
            scenario: scenario.to_string(),
            seed: Some(seed),
            status: "ok".into(),
            runs: 1,
            rmse: Some(m.rmse),
            rmse_std: None,
            percent: Some(m.percent),
            percent_std: None,
            max_error: Some(m.max_error),
            max_error_std: None,
            dr_rmse: Some(m.dr_rmse),
            dr_rmse_std: None,
        }
    }

    pub fn failed(scenario: &str, seed: u64, err: &str) -> Self {
        Self {
            kind: "run",
            scenario: scenario.to_string(),
            seed: Some(seed),
            status: format!("error: {err}"),
            runs: 1,
            rmse: None,
            rmse_std: None,
            percent: None,
            percent_std: None,
            max_error: None,
            max_error_std: None,
            dr_rmse: None,
            dr_rmse_std: None,
        }
    }
}

/// Sample mean and standard deviation (n − 1 denominator; 0 for one value).
fn mean_std(v: &[f64]) -> (Option<f64>, Option<f64>) {
    if v.is_empty() {
        return (None, None);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (Some(mean), Some(var.sqrt()))
}

/// Data rows followed by one mean/stddev row per scenario.
pub fn summary_csv(rows: &[Row]) -> anyhow::Result<String> {
    let mut all = rows.to_vec();
    let mut names: Vec<&str> = rows.iter().map(|r| r.scenario.as_str()).collect();
    names.dedup();
    for name in names {
        let ok: Vec<&Row> = rows.iter().filter(|r| r.scenario == name && r.status == "ok").collect();
        let total = rows.iter().filter(|r| r.scenario == name).count();
        let col = |f: fn(&Row) -> Option<f64>| mean_std(&ok.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
        let (rmse, rmse_std) = col(|r| r.rmse);
        let (percent, percent_std) = col(|r| r.percent);
        let (max_error, max_error_std) = col(|r| r.max_error);
        let (dr_rmse, dr_rmse_std) = col(|r| r.dr_rmse);
        all.push(Row {
            kind: "summary",
            scenario: name.to_string(),
            seed: None,
            status: format!("{} of {} ok", ok.len(), total),
            runs: ok.len(),
            rmse,
            rmse_std,
            percent,
            percent_std,
            max_error,
            max_error_std,
            dr_rmse,
            dr_rmse_std,
        });
    }
    csv_string(&all)
}
