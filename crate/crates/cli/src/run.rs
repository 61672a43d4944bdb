use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use dfedrw::analysis::estimate_delta_sq;
use dfedrw::fedsim::{RoundMetrics, Simulation};
use dfedrw::{Result, Scalar};
use serde::Serialize;

use crate::config::{ExperimentConfig, Precision};
use crate::svg;

pub const METRICS_HEADER: &str =
    "round,accuracy,loss,cum_bits_total,busiest_device_id,c_upd,c_agg,c_r";

/// One evaluated round, as written to `metrics.csv`.
#[derive(Debug, Clone, Serialize)]
pub struct EvalRow {
    pub round: u64,
    pub accuracy: f64,
    pub loss: f64,
    pub cum_bits_total: u64,
    pub busiest_device_id: usize,
    pub c_upd: u64,
    pub c_agg: u64,
    pub c_r: u64,
}

impl EvalRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.round,
            self.accuracy,
            self.loss,
            self.cum_bits_total,
            self.busiest_device_id,
            self.c_upd,
            self.c_agg,
            self.c_r
        )
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub algorithm: String,
    pub rounds: u64,
    pub final_accuracy: f64,
    pub final_loss: f64,
    pub cum_bits_total: u64,
    /// Largest per-round busiest-device traffic.
    pub peak_c_r: u64,
    pub params: usize,
    /// `1.5 ×` the largest observed mini-batch gradient norm.
    pub grad_bound_estimate: f64,
    /// Local dissimilarity at the final consensus model, when defined.
    pub delta_sq: Option<f64>,
    pub delta_sq_clamped: Option<bool>,
    pub wall_time_s: f64,
    pub config: ExperimentConfig,
}

pub fn cmd_run(cfg: &ExperimentConfig) -> Result<Summary> {
    cfg.validate()?;
    match cfg.precision()? {
        Precision::F64 => execute::<f64>(cfg),
        Precision::F32 => execute::<f32>(cfg),
    }
}

fn execute<T: Scalar>(cfg: &ExperimentConfig) -> Result<Summary> {
    let started = Instant::now();
    let out = cfg.output.as_path();
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;

    let (train, test) = cfg.datasets::<T>()?;
    let graph = cfg.graph()?;
    let partition = cfg.partition(&train)?;
    let spec = cfg.model_spec(train.feature_dim(), train.num_classes())?;
    let params = spec.param_count();
    let mut sim = Simulation::new(cfg.round_config()?, graph, train, partition, &spec, cfg.seed)?;

    let mut csv = BufWriter::new(File::create(out.join("metrics.csv"))?);
    writeln!(csv, "{METRICS_HEADER}")?;
    let mut trace = if cfg.trace {
        Some(BufWriter::new(File::create(out.join("trace.jsonl"))?))
    } else {
        None
    };
    let mut rows = Vec::new();
    let mut cum_bits = 0u64;
    let mut peak_c_r = 0u64;
    for round in 1..=cfg.rounds {
        let metrics: RoundMetrics = sim.run_round()?;
        cum_bits += metrics.total_bits();
        peak_c_r = peak_c_r.max(metrics.busiest.c_r);
        if let Some(w) = trace.as_mut() {
            for msg in &metrics.messages {
                serde_json::to_writer(&mut *w, msg)?;
                w.write_all(b"\n")?;
            }
        }
        if round % cfg.eval_every == 0 || round == cfg.rounds {
            let eval = sim.evaluate(&test)?;
            let row = EvalRow {
                round,
                accuracy: eval.accuracy,
                loss: eval.loss,
                cum_bits_total: cum_bits,
                busiest_device_id: metrics.busiest.device,
                c_upd: metrics.busiest.c_upd,
                c_agg: metrics.busiest.c_agg,
                c_r: metrics.busiest.c_r,
            };
            writeln!(csv, "{}", row.csv())?;
            rows.push(row);
        }
    }
    csv.flush()?;
    if let Some(mut w) = trace {
        w.flush()?;
    }
    if cfg.plot {
        let points: Vec<(f64, f64)> = rows.iter().map(|r| (r.round as f64, r.accuracy)).collect();
        fs::write(out.join("accuracy.svg"), svg::line_chart(&points, "round", "test accuracy"))?;
    }

    let delta = sim
        .gradient_dissimilarity()
        .and_then(|(local, global)| estimate_delta_sq(&local, global))
        .ok();
    let last = rows.last().expect("final round is always evaluated");
    let summary = Summary {
        algorithm: cfg.training.algorithm.clone(),
        rounds: cfg.rounds,
        final_accuracy: last.accuracy,
        final_loss: last.loss,
        cum_bits_total: cum_bits,
        peak_c_r,
        params,
        grad_bound_estimate: 1.5 * sim.max_grad_norm(),
        delta_sq: delta.map(|d| d.value),
        delta_sq_clamped: delta.map(|d| d.clamped),
        wall_time_s: started.elapsed().as_secs_f64(),
        config: cfg.clone(),
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Reads back the rows of a `metrics.csv`.
pub fn read_metrics(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect())
}
