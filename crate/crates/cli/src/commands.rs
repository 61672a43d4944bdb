use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use dfedrw::analysis::{
    assumption_check, proposition1_check, theorem1_bound, theorem2_bound, AssumptionReport,
    BoundReport, Proposition1Verdict, TheoryInputs,
};
use dfedrw::datasets::entropy;
use dfedrw::fedsim::{MessageKind, MessageRecord};
use dfedrw::topology::{mh_transition, spectral_summary};
use dfedrw::{Error, Result};
use serde::Serialize;

use crate::config::{invalid, parse_config, ExperimentConfig};
use crate::run::{cmd_run, read_metrics, write_json, METRICS_HEADER};

#[derive(Debug, Serialize)]
pub struct BoundOutput {
    pub inputs: TheoryInputs,
    pub horizon: u64,
    pub theorem1: BoundReport,
    pub theorem2: BoundReport,
    pub proposition1: Proposition1Verdict,
    pub step_size: AssumptionReport,
}

pub fn theory_inputs(cfg: &ExperimentConfig) -> Result<TheoryInputs> {
    let th = &cfg.theory;
    let lambda_p = match th.lambda_p {
        Some(l) => l,
        None => spectral_summary(&mh_transition(&cfg.graph()?))?.lambda_p,
    };
    let dim = match th.dim {
        Some(d) => d,
        None => {
            let (input, classes) = match cfg.dataset.source {
                crate::config::DataSource::Synth => (cfg.dataset.dim, cfg.dataset.classes),
                crate::config::DataSource::Idx => {
                    let (train, _) = cfg.datasets::<f32>()?;
                    (train.feature_dim(), train.num_classes())
                }
            };
            cfg.model_spec(input, classes)?.param_count()
        }
    };
    let s = match th.s {
        Some(s) => s,
        None => cfg.quant_config()?.map_or(0.0, |q| q.interval()),
    };
    Ok(TheoryInputs {
        n: cfg.topology.n,
        grad_bound: th.grad_bound,
        zeta: th.zeta,
        k_p: th.k_p,
        lambda_p,
        delta_sq: th.delta_sq,
        gamma_hat: th.gamma_hat,
        dim,
        s,
        sigma: th.sigma,
        q_exp: cfg.training.lr_q,
        r_const: cfg.training.lr_r,
        w0_dist: th.w0_dist,
        k_bar_start: th.k_bar_start,
    })
}

pub fn cmd_bound(cfg: &ExperimentConfig, horizon: Option<u64>) -> Result<BoundOutput> {
    let inputs = theory_inputs(cfg)?;
    let horizon = horizon
        .or(cfg.theory.horizon)
        .unwrap_or(cfg.rounds * cfg.training.epochs as u64);
    let bits = cfg.quant.as_ref().map_or(8, |q| q.bits);
    let output = BoundOutput {
        theorem1: theorem1_bound(&inputs, horizon)?,
        theorem2: theorem2_bound(&inputs, horizon)?,
        proposition1: proposition1_check(&inputs, cfg.theory.epsilon, cfg.theory.rho_ratio, bits)?,
        step_size: assumption_check(inputs.r_const, inputs.q_exp, horizon.max(10))?,
        inputs,
        horizon,
    };
    fs::create_dir_all(&cfg.output)?;
    write_json(&cfg.output.join("bound.json"), &output)?;
    Ok(output)
}

/// Writes `partition.json` and `histogram.csv`; returns the histogram rows.
pub fn cmd_partition(cfg: &ExperimentConfig) -> Result<Vec<Vec<usize>>> {
    let (train, _) = cfg.datasets::<f32>()?;
    let dp = cfg.partition(&train)?;
    fs::create_dir_all(&cfg.output)?;
    fs::write(cfg.output.join("partition.json"), dp.to_json()?)?;
    let classes = train.num_classes();
    let mut csv = String::from("device,n_samples");
    for c in 0..classes {
        csv.push_str(&format!(",label_{c}"));
    }
    csv.push_str(",nonzero_labels,entropy\n");
    let mut hists = Vec::with_capacity(dp.n_dev());
    for dev in 0..dp.n_dev() {
        let hist = train.class_histogram(dp.device(dev));
        let counts: Vec<String> = hist.iter().map(usize::to_string).collect();
        csv.push_str(&format!(
            "{dev},{},{},{},{:.6}\n",
            dp.device(dev).len(),
            counts.join(","),
            hist.iter().filter(|&&c| c > 0).count(),
            entropy(&hist)
        ));
        hists.push(hist);
    }
    fs::write(cfg.output.join("histogram.csv"), csv)?;
    Ok(hists)
}

/// Config key swept by each named axis.
pub fn sweep_key(axis: &str) -> Option<&'static str> {
    Some(match axis {
        "u" => "partition.u",
        "h" => "training.hetero",
        "b" => "quant.bits",
        "K" => "training.epochs",
        "topology" => "topology.kind",
        "algorithm" => "training.algorithm",
        _ => return None,
    })
}

#[derive(Debug)]
pub struct SweepFailure {
    pub value: String,
    pub error: Error,
}

/// Runs one cell per value under `output/<axis>=<value>` and merges their
/// metrics into `output/sweep.csv`. Failed cells are skipped and returned.
pub fn cmd_sweep(cfg: &ExperimentConfig, axis: &str, values: &[String]) -> Result<Vec<SweepFailure>> {
    let key = sweep_key(axis).ok_or_else(|| {
        invalid("axis", format!("{axis:?} is not sweepable (u, h, b, K, topology, algorithm)"))
    })?;
    if values.is_empty() {
        return Err(invalid("values", "at least one value is required"));
    }
    let base = cfg.to_toml();
    fs::create_dir_all(&cfg.output)?;
    let mut merged = format!("{axis},{METRICS_HEADER}\n");
    let mut failures = Vec::new();
    for value in values {
        let dir = cfg.output.join(format!("{axis}={value}"));
        let cell = parse_config(
            &base,
            &[format!("{key}={value}"), format!("output={:?}", dir.to_string_lossy())],
        )
        .and_then(|c| cmd_run(&c).map(|_| c));
        match cell {
            Ok(c) => {
                for row in read_metrics(&c.output.join("metrics.csv"))? {
                    merged.push_str(&format!("{value},{}\n", row.join(",")));
                }
            }
            Err(error) => {
                eprintln!("sweep cell {axis}={value} failed: {error}");
                failures.push(SweepFailure {
                    value: value.clone(),
                    error,
                });
            }
        }
    }
    fs::write(cfg.output.join("sweep.csv"), merged)?;
    Ok(failures)
}

/// Per-round message summary of a `trace.jsonl`, optionally with every message.
pub fn cmd_inspect(trace: &Path, round: Option<u64>, verbose: bool) -> Result<String> {
    let file = fs::File::open(trace)?;
    let mut rounds: BTreeMap<u64, Vec<MessageRecord>> = BTreeMap::new();
    for (line_no, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let msg: MessageRecord = serde_json::from_str(&line)
            .map_err(|e| invalid("trace", format!("line {}: {e}", line_no + 1)))?;
        if round.is_none_or(|r| r == msg.round) {
            rounds.entry(msg.round).or_default().push(msg);
        }
    }
    let mut out = format!(
        "{:>6} {:>9} {:>6} {:>9} {:>9} {:>7} {:>14}\n",
        "round", "messages", "hops", "aggregate", "broadcast", "upload", "bits"
    );
    for (r, msgs) in &rounds {
        let count = |k: MessageKind| msgs.iter().filter(|m| m.kind == k).count();
        out.push_str(&format!(
            "{:>6} {:>9} {:>6} {:>9} {:>9} {:>7} {:>14}\n",
            r,
            msgs.len(),
            count(MessageKind::Hop),
            count(MessageKind::Aggregate),
            count(MessageKind::Broadcast),
            count(MessageKind::Upload),
            msgs.iter().map(|m| m.bits).sum::<u64>()
        ));
        if verbose {
            for m in msgs {
                let step = m.step.map_or("-".to_string(), |s| s.to_string());
                out.push_str(&format!(
                    "       step {step:>4}  {:?}  {} -> {}  {} bits\n",
                    m.kind, m.from, m.to, m.bits
                ));
            }
        }
    }
    Ok(out)
}
