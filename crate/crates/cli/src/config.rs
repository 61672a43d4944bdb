use std::fs;
use std::path::{Path, PathBuf};

use dfedrw::datasets::{
    load_idx, partition_dirichlet, partition_nonbalance, partition_similarity, synth_train_test,
    Dataset, DevicePartition,
};
use dfedrw::fedsim::{AggMode, Algorithm, RoundConfig};
use dfedrw::model::{FeasibleSet, MlpSpec};
use dfedrw::quantizer::QuantConfig;
use dfedrw::seed::{hash64, Purpose};
use dfedrw::topology::{build_topology, Graph, TopologyKind};
use dfedrw::{Error, Result, Scalar};
use serde::{Deserialize, Serialize};

pub fn invalid(field: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        field: field.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub rounds: u64,
    pub eval_every: u64,
    pub output: PathBuf,
    /// Write every message to `trace.jsonl`.
    pub trace: bool,
    /// Write `accuracy.svg`.
    pub plot: bool,
    pub dataset: DatasetConfig,
    pub partition: PartitionConfig,
    pub topology: TopologyConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub quant: Option<QuantSection>,
    pub theory: TheorySection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            rounds: 100,
            eval_every: 1,
            output: PathBuf::from("out"),
            trace: false,
            plot: true,
            dataset: DatasetConfig::default(),
            partition: PartitionConfig::default(),
            topology: TopologyConfig::default(),
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            quant: None,
            theory: TheorySection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synth,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub source: DataSource,
    pub classes: usize,
    pub dim: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub spread: f64,
    /// Defaults to the master seed.
    pub seed: Option<u64>,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            source: DataSource::Synth,
            classes: 10,
            dim: 64,
            per_class_train: 300,
            per_class_test: 100,
            spread: 0.4,
            seed: None,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionScheme {
    Similarity,
    Dirichlet,
    Nonbalance,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionConfig {
    pub scheme: PartitionScheme,
    /// Similarity percentage `u`.
    pub u: f64,
    /// Dirichlet concentration.
    pub alpha: f64,
    /// Per-label cap of the imbalanced scheme.
    pub cap: usize,
    /// Assignment file for `scheme = "file"`.
    pub path: Option<PathBuf>,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig {
            scheme: PartitionScheme::Similarity,
            u: 100.0,
            alpha: 0.5,
            cap: 50,
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TopologyConfig {
    /// `complete`, `ring`, `expander` or `file`.
    pub kind: String,
    pub n: usize,
    /// Expander degree.
    pub c: usize,
    pub path: Option<PathBuf>,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        TopologyConfig {
            kind: "complete".into(),
            n: 20,
            c: 3,
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// `2fnn`, `3fnn` or `custom`.
    pub arch: String,
    /// Full layer widths for `custom`, input and output included.
    pub layers: Vec<usize>,
    /// Radius of the feasible ball; unconstrained when absent.
    pub radius: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: "2fnn".into(),
            layers: Vec::new(),
            radius: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub algorithm: String,
    pub chains: usize,
    pub epochs: usize,
    /// Percentage `h` of truncated chains.
    pub hetero: f64,
    pub truncated_epochs: usize,
    pub agg_fraction: f64,
    pub agg_mode: AggMode,
    pub lr_r: f64,
    pub lr_q: f64,
    pub phi: u64,
    pub batch_size: usize,
    pub inherit_starts: bool,
    /// `f64` or `f32`.
    pub precision: String,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let rc = RoundConfig::default();
        TrainingConfig {
            algorithm: rc.algorithm.tag().into(),
            chains: rc.chains,
            epochs: rc.epochs,
            hetero: rc.hetero_pct,
            truncated_epochs: rc.truncated_epochs,
            agg_fraction: rc.agg_fraction,
            agg_mode: rc.agg_mode,
            lr_r: rc.lr_r,
            lr_q: rc.lr_q,
            phi: rc.phi,
            batch_size: rc.batch_size,
            inherit_starts: rc.inherit_starts,
            precision: "f64".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantSection {
    pub bits: u32,
    /// Defaults to `1/(2^{b−1}−1)`.
    pub interval: Option<f64>,
}

/// Constants of the bound report that cannot be read off the experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheorySection {
    pub grad_bound: f64,
    pub zeta: f64,
    pub k_p: u64,
    /// Computed from the topology when absent.
    pub lambda_p: Option<f64>,
    pub delta_sq: f64,
    pub gamma_hat: f64,
    /// Model dimension when absent.
    pub dim: Option<usize>,
    /// Quantizer interval (or 0) when absent.
    pub s: Option<f64>,
    pub sigma: f64,
    pub w0_dist: f64,
    pub k_bar_start: u64,
    /// Defaults to rounds × epochs.
    pub horizon: Option<u64>,
    pub epsilon: f64,
    pub rho_ratio: f64,
}

impl Default for TheorySection {
    fn default() -> Self {
        TheorySection {
            grad_bound: 1.0,
            zeta: 1.0,
            k_p: 1,
            lambda_p: None,
            delta_sq: 1.0,
            gamma_hat: 1.0,
            dim: None,
            s: None,
            sigma: 1.0,
            w0_dist: 1.0,
            k_bar_start: 2,
            horizon: None,
            epsilon: 1.0,
            rho_ratio: 2.0,
        }
    }
}

/// Parses `text`, applies `key=value` overrides (dotted paths, TOML values,
/// bare strings accepted) and deserializes.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut doc: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| invalid("config", e.to_string()))?;
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| invalid("--set", format!("expected key=value, got {item:?}")))?;
        set_path(&mut doc, key.trim(), parse_value(raw.trim()))?;
    }
    ExperimentConfig::deserialize(toml::Value::Table(doc))
        .map_err(|e| invalid("config", e.to_string().trim().to_string()))
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| invalid("config", format!("{}: {e}", path.display())))?;
    parse_config(&text, overrides)
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

pub fn set_path(doc: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(invalid("--set", format!("malformed key {key:?}")));
    }
    let mut table = doc;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| invalid(key, format!("{part} is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(invalid("rounds", "must be >= 1"));
        }
        if self.eval_every == 0 {
            return Err(invalid("eval_every", "must be >= 1"));
        }
        if self.dataset.source == DataSource::Idx {
            for (field, path) in [
                ("dataset.train_images", &self.dataset.train_images),
                ("dataset.train_labels", &self.dataset.train_labels),
                ("dataset.test_images", &self.dataset.test_images),
                ("dataset.test_labels", &self.dataset.test_labels),
            ] {
                match path {
                    Some(p) if p.is_file() => {}
                    Some(p) => return Err(invalid(field, format!("{} does not exist", p.display()))),
                    None => return Err(invalid(field, "required for idx datasets")),
                }
            }
        }
        if self.partition.scheme == PartitionScheme::File {
            match &self.partition.path {
                Some(p) if p.is_file() => {}
                _ => return Err(invalid("partition.path", "an existing assignment file is required")),
            }
        }
        self.topology_kind()?;
        self.round_config()?.validate(self.topology.n)?;
        self.precision()?;
        Ok(())
    }

    pub fn algorithm(&self) -> Result<Algorithm> {
        self.training
            .algorithm
            .parse()
            .map_err(|_| invalid("training.algorithm", format!("unknown tag {:?}", self.training.algorithm)))
    }

    pub fn precision(&self) -> Result<Precision> {
        match self.training.precision.as_str() {
            "f64" => Ok(Precision::F64),
            "f32" => Ok(Precision::F32),
            other => Err(invalid("training.precision", format!("expected f32 or f64, got {other:?}"))),
        }
    }

    pub fn quant_config(&self) -> Result<Option<QuantConfig>> {
        self.quant
            .as_ref()
            .map(|q| match q.interval {
                Some(s) => QuantConfig::new(q.bits, s),
                None => QuantConfig::with_default_interval(q.bits),
            })
            .transpose()
    }

    pub fn round_config(&self) -> Result<RoundConfig> {
        let t = &self.training;
        let feasible = match self.model.radius {
            Some(r) => FeasibleSet::ball(r)?,
            None => FeasibleSet::Unbounded,
        };
        Ok(RoundConfig {
            algorithm: self.algorithm()?,
            chains: t.chains,
            epochs: t.epochs,
            hetero_pct: t.hetero,
            truncated_epochs: t.truncated_epochs,
            agg_fraction: t.agg_fraction,
            agg_mode: t.agg_mode,
            quant: self.quant_config()?,
            lr_r: t.lr_r,
            lr_q: t.lr_q,
            phi: t.phi,
            batch_size: t.batch_size,
            inherit_starts: t.inherit_starts,
            feasible,
        })
    }

    pub fn topology_kind(&self) -> Result<Option<TopologyKind>> {
        match self.topology.kind.as_str() {
            "complete" => Ok(Some(TopologyKind::Complete)),
            "ring" => Ok(Some(TopologyKind::Ring)),
            "expander" => Ok(Some(TopologyKind::Expander { c: self.topology.c })),
            "file" => Ok(None),
            other => Err(invalid(
                "topology.kind",
                format!("expected complete, ring, expander or file, got {other:?}"),
            )),
        }
    }

    pub fn graph(&self) -> Result<Graph> {
        match self.topology_kind()? {
            Some(kind) => build_topology(kind, self.topology.n, hash64(self.seed, Purpose::Topology, &[])),
            None => {
                let path = self
                    .topology
                    .path
                    .as_ref()
                    .ok_or_else(|| invalid("topology.path", "required for kind = \"file\""))?;
                let g = Graph::load_adjacency(path)?;
                if g.n() != self.topology.n {
                    return Err(invalid(
                        "topology.n",
                        format!("file has {} devices, config says {}", g.n(), self.topology.n),
                    ));
                }
                Ok(g)
            }
        }
    }

    pub fn datasets<T: Scalar>(&self) -> Result<(Dataset<T>, Dataset<T>)> {
        let d = &self.dataset;
        match d.source {
            DataSource::Synth => synth_train_test(
                d.classes,
                d.dim,
                d.per_class_train,
                d.per_class_test,
                d.spread,
                d.seed.unwrap_or(self.seed),
            ),
            DataSource::Idx => {
                let need = |p: &Option<PathBuf>, f: &str| {
                    p.clone().ok_or_else(|| invalid(f, "required for idx datasets"))
                };
                let train = load_idx(
                    &need(&d.train_images, "dataset.train_images")?,
                    &need(&d.train_labels, "dataset.train_labels")?,
                )?;
                let test = load_idx(
                    &need(&d.test_images, "dataset.test_images")?,
                    &need(&d.test_labels, "dataset.test_labels")?,
                )?;
                Ok((train, test))
            }
        }
    }

    pub fn partition<T: Scalar>(&self, train: &Dataset<T>) -> Result<DevicePartition> {
        let p = &self.partition;
        let n = self.topology.n;
        let seed = hash64(self.seed, Purpose::Partition, &[]);
        match p.scheme {
            PartitionScheme::Similarity => partition_similarity(train, n, p.u, seed),
            PartitionScheme::Dirichlet => partition_dirichlet(train, n, p.alpha, seed),
            PartitionScheme::Nonbalance => partition_nonbalance(train, n, p.cap, seed),
            PartitionScheme::File => {
                let path = p
                    .path
                    .as_ref()
                    .ok_or_else(|| invalid("partition.path", "required for scheme = \"file\""))?;
                let dp = DevicePartition::from_json(&fs::read_to_string(path)?, train.len())?;
                if dp.n_dev() != n {
                    return Err(invalid(
                        "partition.path",
                        format!("{} devices in file, topology has {n}", dp.n_dev()),
                    ));
                }
                Ok(dp)
            }
        }
    }

    pub fn model_spec(&self, input: usize, classes: usize) -> Result<MlpSpec> {
        match self.model.arch.as_str() {
            "2fnn" => MlpSpec::two_fnn(input, classes),
            "3fnn" => MlpSpec::three_fnn(input, classes),
            "custom" => {
                let spec = MlpSpec::new(self.model.layers.clone())?;
                if spec.input_dim() != input || spec.num_classes() < classes {
                    return Err(invalid(
                        "model.layers",
                        format!("need input {input} and at least {classes} outputs"),
                    ));
                }
                Ok(spec)
            }
            other => Err(invalid("model.arch", format!("expected 2fnn, 3fnn or custom, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}
