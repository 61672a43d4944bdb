use rayon::prelude::*;

use super::accounting::{busiest_of, MessageKind, MessageRecord, RoundMetrics};
use super::{assign_chain_lengths, AggMode, Algorithm, RoundConfig};
use crate::datasets::{batch_iter, Dataset, DevicePartition};
use crate::error::{Error, Result};
use crate::model::{
    evaluate, global_step, init_params, loss_grad, lr_schedule, sgd_step, Evaluation, MlpSpec,
    Params,
};
use crate::quantizer::{dequantize, full_precision_bits, quantize, wire_size_bits, QuantConfig};
use crate::scalar::Scalar;
use crate::seed::{seed_stream, Purpose, Stream};
use crate::topology::{mh_transition, Graph, TransitionMatrix};

/// Post-step parameters a device produced during its latest update this round.
#[derive(Debug, Clone, PartialEq)]
pub struct LastUpdate<T> {
    pub params: Params<T>,
    /// Global step `k̄` of the update.
    pub stamp: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceState<T> {
    pub id: usize,
    /// Parameters at the start of the round.
    pub params: Params<T>,
    pub last_update: Option<LastUpdate<T>>,
    pub n_samples: usize,
    pub comm_bits_sent: u64,
    /// Parameters right after the most recent aggregation.
    pub anchor: Params<T>,
    /// Updated since the most recent aggregation.
    pub pending: bool,
}

#[derive(Debug, Clone)]
pub struct ChainState<T> {
    pub chain_id: usize,
    pub current_device: usize,
    /// The walking model as it arrives at `current_device`.
    pub carried_params: Params<T>,
    pub steps_done: usize,
    pub steps_budget: usize,
    pub rng: Stream,
    pub visits: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
enum Movement {
    Stay,
    Walk { quant: Option<QuantConfig> },
}

struct WalkOutcome<T> {
    chains: Vec<ChainState<T>>,
    messages: Vec<MessageRecord>,
    steps: usize,
    loss_sum: f64,
}

/// Owns every device, the communication graph and the round clock.
#[derive(Debug, Clone)]
pub struct Simulation<T: Scalar> {
    cfg: RoundConfig,
    graph: Graph,
    transition: TransitionMatrix,
    train: Dataset<T>,
    partition: DevicePartition,
    seed: u64,
    devices: Vec<DeviceState<T>>,
    global: Params<T>,
    round: u64,
    positions: Option<Vec<usize>>,
    max_grad_norm: f64,
}

impl<T: Scalar> Simulation<T> {
    /// Every device starts from the same initialization, drawn from `seed`.
    pub fn new(
        cfg: RoundConfig,
        graph: Graph,
        train: Dataset<T>,
        partition: DevicePartition,
        spec: &MlpSpec,
        seed: u64,
    ) -> Result<Self> {
        let n = graph.n();
        cfg.validate(n)?;
        if partition.n_dev() != n {
            return Err(Error::config(
                "partition",
                format!("{} devices in partition, {n} in graph", partition.n_dev()),
            ));
        }
        if train.feature_dim() != spec.input_dim() {
            return Err(Error::config(
                "model.layers",
                format!(
                    "input width {} does not match feature dimension {}",
                    spec.input_dim(),
                    train.feature_dim()
                ),
            ));
        }
        if train.num_classes() > spec.num_classes() {
            return Err(Error::config(
                "model.layers",
                format!("{} outputs for {} classes", spec.num_classes(), train.num_classes()),
            ));
        }
        let init: Params<T> = init_params(spec, seed);
        let devices = (0..n)
            .map(|id| DeviceState {
                id,
                params: init.clone(),
                last_update: None,
                n_samples: partition.device(id).len(),
                comm_bits_sent: 0,
                anchor: init.clone(),
                pending: false,
            })
            .collect();
        let transition = mh_transition(&graph);
        Ok(Simulation {
            cfg,
            graph,
            transition,
            train,
            partition,
            seed,
            devices,
            global: init,
            round: 0,
            positions: None,
            max_grad_norm: 0.0,
        })
    }

    /// Replaces the Metropolis-Hastings walk with `p` (e.g. all self-loops).
    pub fn with_transition(mut self, p: TransitionMatrix) -> Result<Self> {
        if p.n() != self.graph.n() {
            return Err(Error::config(
                "transition",
                format!("{} states for {} devices", p.n(), self.graph.n()),
            ));
        }
        self.transition = p;
        Ok(self)
    }

    pub fn config(&self) -> &RoundConfig {
        &self.cfg
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn transition(&self) -> &TransitionMatrix {
        &self.transition
    }

    pub fn partition(&self) -> &DevicePartition {
        &self.partition
    }

    pub fn train(&self) -> &Dataset<T> {
        &self.train
    }

    pub fn devices(&self) -> &[DeviceState<T>] {
        &self.devices
    }

    /// Rounds completed so far.
    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn dim(&self) -> usize {
        self.global.len()
    }

    /// Server model (meaningful for FedAvg only).
    pub fn global_params(&self) -> &Params<T> {
        &self.global
    }

    /// Largest mini-batch gradient norm seen so far.
    pub fn max_grad_norm(&self) -> f64 {
        self.max_grad_norm
    }

    /// Model under evaluation: the server model for FedAvg, otherwise the
    /// uniform mean of device parameters.
    pub fn consensus_params(&self) -> Params<T> {
        if self.cfg.algorithm == Algorithm::FedAvg {
            return self.global.clone();
        }
        let w = 1.0 / self.devices.len() as f64;
        let terms: Vec<(f64, &[T])> = self.devices.iter().map(|d| (w, d.params.values())).collect();
        let values = weighted_sum(None, &terms, self.dim());
        Params::from_values(self.global.spec().clone(), values).expect("dimension preserved")
    }

    pub fn evaluate(&self, test: &Dataset<T>) -> Result<Evaluation> {
        evaluate(&self.consensus_params(), test)
    }

    /// Squared full local gradient norms per device and the squared norm of the
    /// sample-weighted global gradient, both at the consensus model.
    pub fn gradient_dissimilarity(&self) -> Result<(Vec<f64>, f64)> {
        let w = self.consensus_params();
        let total: usize = self.devices.iter().map(|d| d.n_samples).sum();
        let grads = (0..self.devices.len())
            .into_par_iter()
            .map(|i| {
                let (x, y) = self.train.gather(self.partition.device(i));
                loss_grad(&w, &x, &y).map(|(_, g)| g)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut global = vec![0.0f64; self.dim()];
        let mut local_sq = Vec::with_capacity(grads.len());
        for (dev, g) in self.devices.iter().zip(&grads) {
            let weight = dev.n_samples as f64 / total as f64;
            let mut sq = 0.0;
            for (acc, v) in global.iter_mut().zip(g) {
                let v = v.as_f64();
                sq += v * v;
                *acc += weight * v;
            }
            local_sq.push(sq);
        }
        let global_sq = global.iter().map(|v| v * v).sum();
        Ok((local_sq, global_sq))
    }

    /// Runs the next round of the configured algorithm.
    pub fn run_round(&mut self) -> Result<RoundMetrics> {
        match self.cfg.algorithm {
            Algorithm::DFedRW => self.run_dfedrw_round(),
            Algorithm::QDFedRW => self.run_qdfedrw_round(),
            Algorithm::Dsgd => self.run_dsgd_round(),
            Algorithm::FedAvg => self.run_fedavg_round(),
            Algorithm::DFedAvg => self.run_dfedavg_round(),
        }
    }

    pub fn run_dfedrw_round(&mut self) -> Result<RoundMetrics> {
        self.expect(Algorithm::DFedRW)?;
        self.random_walk_round(None)
    }

    pub fn run_qdfedrw_round(&mut self) -> Result<RoundMetrics> {
        self.expect(Algorithm::QDFedRW)?;
        let quant = self
            .cfg
            .quant
            .ok_or_else(|| Error::config("quant", "qdfedrw needs a quantizer configuration"))?;
        self.random_walk_round(Some(quant))
    }

    /// Every device takes one local step, then devices aggregate.
    pub fn run_dsgd_round(&mut self) -> Result<RoundMetrics> {
        self.expect(Algorithm::Dsgd)?;
        let t = self.begin_round();
        let chains = (0..self.devices.len())
            .map(|i| self.chain(t, i, i, 1, self.devices[i].params.clone()))
            .collect();
        let outcome = self.walk(t, chains, Movement::Stay, 1)?;
        self.finish_decentralized(t, outcome, None)
    }

    /// Sampled devices train `K` local steps; stragglers are dropped.
    pub fn run_dfedavg_round(&mut self) -> Result<RoundMetrics> {
        self.expect(Algorithm::DFedAvg)?;
        let t = self.begin_round();
        let chains = self.participants(t, |s, dev| s.devices[dev].params.clone());
        let outcome = self.walk(t, chains, Movement::Stay, self.cfg.epochs as u64)?;
        self.finish_decentralized(t, outcome, None)
    }

    /// Sampled devices train `K` local steps from the server model, which then
    /// takes their sample-weighted average. The server is node `n`.
    pub fn run_fedavg_round(&mut self) -> Result<RoundMetrics> {
        self.expect(Algorithm::FedAvg)?;
        let t = self.begin_round();
        let chains = self.participants(t, |s, _| s.global.clone());
        let outcome = self.walk(t, chains, Movement::Stay, self.cfg.epochs as u64)?;
        let n = self.devices.len();
        let bits = full_precision_bits(self.dim());
        let mut messages = Vec::new();
        let mut contributors: Vec<usize> = outcome.chains.iter().map(|c| c.current_device).collect();
        contributors.sort_unstable();
        for &l in &contributors {
            messages.push(MessageRecord {
                round: t,
                step: None,
                from: n,
                to: l,
                bits,
                kind: MessageKind::Broadcast,
            });
            messages.push(MessageRecord {
                round: t,
                step: None,
                from: l,
                to: n,
                bits,
                kind: MessageKind::Upload,
            });
        }
        if !contributors.is_empty() {
            let m: usize = contributors.iter().map(|&l| self.devices[l].n_samples).sum();
            let terms: Vec<(f64, &[T])> = contributors
                .iter()
                .map(|&l| {
                    let dev = &self.devices[l];
                    let lu = dev.last_update.as_ref().expect("participant updated");
                    (dev.n_samples as f64 / m as f64, lu.params.values())
                })
                .collect();
            let values = weighted_sum(None, &terms, self.dim());
            self.global = Params::from_values(self.global.spec().clone(), values)?;
        }
        for dev in &mut self.devices {
            dev.params = self.global.clone();
            dev.anchor = self.global.clone();
            dev.pending = false;
        }
        self.positions = Some(outcome.chains.iter().map(|c| c.current_device).collect());
        let aggregated = !contributors.is_empty();
        Ok(self.emit(t, outcome, messages, n + 1, aggregated))
    }

    fn expect(&self, algorithm: Algorithm) -> Result<()> {
        if self.cfg.algorithm != algorithm {
            return Err(Error::config(
                "algorithm",
                format!("configured for {}, asked to run {algorithm}", self.cfg.algorithm),
            ));
        }
        Ok(())
    }

    fn begin_round(&mut self) -> u64 {
        self.round += 1;
        for dev in &mut self.devices {
            dev.last_update = None;
        }
        self.round
    }

    fn starts(&self, t: u64) -> Vec<usize> {
        if self.cfg.inherit_starts {
            if let Some(prev) = &self.positions {
                return prev.clone();
            }
        }
        let mut rng = seed_stream(self.seed, Purpose::Starts, &[t]);
        rand::seq::index::sample(&mut rng, self.devices.len(), self.cfg.chains).into_vec()
    }

    fn lengths(&self, t: u64) -> Vec<usize> {
        let mut rng = seed_stream(self.seed, Purpose::ChainLengths, &[t]);
        assign_chain_lengths(&self.cfg, &mut rng)
    }

    fn chain(&self, t: u64, id: usize, start: usize, budget: usize, carried: Params<T>) -> ChainState<T> {
        ChainState {
            chain_id: id,
            current_device: start,
            carried_params: carried,
            steps_done: 0,
            steps_budget: budget,
            rng: seed_stream(self.seed, Purpose::Walk, &[t, id as u64]),
            visits: Vec::with_capacity(budget),
        }
    }

    /// Baseline participants: sampled devices whose chain was not truncated.
    fn participants(
        &self,
        t: u64,
        init: impl Fn(&Self, usize) -> Params<T>,
    ) -> Vec<ChainState<T>> {
        let starts = self.starts(t);
        let lengths = self.lengths(t);
        starts
            .iter()
            .zip(&lengths)
            .enumerate()
            .filter(|(_, (_, &k))| k == self.cfg.epochs)
            .map(|(m, (&dev, &k))| self.chain(t, m, dev, k, init(self, dev)))
            .collect()
    }

    fn random_walk_round(&mut self, quant: Option<QuantConfig>) -> Result<RoundMetrics> {
        let t = self.begin_round();
        let starts = self.starts(t);
        let lengths = self.lengths(t);
        let chains = starts
            .iter()
            .zip(&lengths)
            .enumerate()
            .map(|(m, (&dev, &k))| self.chain(t, m, dev, k, self.devices[dev].params.clone()))
            .collect();
        let outcome = self.walk(t, chains, Movement::Walk { quant }, self.cfg.epochs as u64)?;
        self.finish_decentralized(t, outcome, quant)
    }

    /// Step-major, chain-minor execution of every chain's budget. Gradients of
    /// one step are computed concurrently; all state changes happen serially
    /// in ascending chain id.
    fn walk(
        &mut self,
        t: u64,
        mut chains: Vec<ChainState<T>>,
        movement: Movement,
        nominal_k: u64,
    ) -> Result<WalkOutcome<T>> {
        let d = self.dim();
        let mut messages = Vec::new();
        let mut steps = 0;
        let mut loss_sum = 0.0;
        let horizon = chains.iter().map(|c| c.steps_budget).max().unwrap_or(0);
        for k in 0..horizon {
            let active: Vec<usize> = (0..chains.len())
                .filter(|&c| chains[c].steps_done < chains[c].steps_budget)
                .collect();
            let jobs: Vec<(usize, u64)> = active
                .iter()
                .enumerate()
                .map(|(pos, &c)| {
                    let dev = chains[c].current_device;
                    let occurrence = active[..pos]
                        .iter()
                        .filter(|&&o| chains[o].current_device == dev)
                        .count();
                    (c, occurrence as u64)
                })
                .collect();
            let grads = {
                let (train, partition, chains_ref) = (&self.train, &self.partition, &chains);
                let (seed, batch) = (self.seed, self.cfg.batch_size);
                jobs.par_iter()
                    .map(|&(c, occurrence)| {
                        let chain = &chains_ref[c];
                        let dev = chain.current_device;
                        let mut rng = seed_stream(
                            seed,
                            Purpose::Batch,
                            &[t, k as u64, dev as u64, occurrence],
                        );
                        let idx = batch_iter(partition, dev, batch, &mut rng);
                        let (x, y) = train.gather(&idx);
                        loss_grad(&chain.carried_params, &x, &y)
                    })
                    .collect::<Result<Vec<_>>>()?
            };
            let eta = lr_schedule(self.cfg.lr_r, global_step(t, nominal_k, k as u64), self.cfg.lr_q);
            for (&(c, _), (loss, grad)) in jobs.iter().zip(grads) {
                let gnorm = grad.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
                self.max_grad_norm = self.max_grad_norm.max(gnorm);
                loss_sum += loss.as_f64();
                steps += 1;
                let chain = &mut chains[c];
                let dev = chain.current_device;
                let updated = sgd_step(&chain.carried_params, &grad, eta, &self.cfg.feasible);
                self.devices[dev].last_update = Some(LastUpdate {
                    params: updated.clone(),
                    stamp: global_step(t, nominal_k, k as u64),
                });
                chain.visits.push(dev);
                chain.steps_done += 1;
                let Movement::Walk { quant } = movement else {
                    chain.carried_params = updated;
                    continue;
                };
                let next = self.transition.sample_next(dev, &mut chain.rng);
                if next == dev {
                    chain.carried_params = updated;
                    continue;
                }
                let bits = match quant {
                    None => {
                        chain.carried_params = updated;
                        full_precision_bits(d)
                    }
                    Some(q) => {
                        // The receiver rebuilds the model on top of its own
                        // round-start parameters.
                        let delta = updated.delta(&self.devices[dev].params);
                        let mut rng = seed_stream(
                            self.seed,
                            Purpose::HopQuant,
                            &[t, k as u64, chain.chain_id as u64],
                        );
                        let decoded: Vec<T> = dequantize(&quantize(&delta, &q, &mut rng));
                        let mut rebuilt = self.devices[next].params.clone();
                        rebuilt.scaled_add(T::one(), &decoded);
                        chain.carried_params = rebuilt;
                        wire_size_bits(d, &q)
                    }
                };
                messages.push(MessageRecord {
                    round: t,
                    step: Some(k as u64),
                    from: dev,
                    to: next,
                    bits,
                    kind: MessageKind::Hop,
                });
                chain.current_device = next;
            }
        }
        Ok(WalkOutcome {
            chains,
            messages,
            steps,
            loss_sum,
        })
    }

    fn finish_decentralized(
        &mut self,
        t: u64,
        mut outcome: WalkOutcome<T>,
        quant: Option<QuantConfig>,
    ) -> Result<RoundMetrics> {
        for dev in &mut self.devices {
            if let Some(lu) = &dev.last_update {
                dev.params = lu.params.clone();
                dev.pending = true;
            }
        }
        let aggregated = t % self.cfg.phi == 0 && self.devices.iter().any(|d| d.pending);
        if aggregated {
            let agg_messages = self.aggregate_decentralized(t, quant)?;
            outcome.messages.extend(agg_messages);
        }
        self.positions = Some(outcome.chains.iter().map(|c| c.current_device).collect());
        let messages = std::mem::take(&mut outcome.messages);
        let nodes = self.devices.len();
        Ok(self.emit(t, outcome, messages, nodes, aggregated))
    }

    /// Synchronous weighted averaging over sampled contributing neighbors.
    /// Returns the messages sent; a no-op when no device has pending updates.
    pub fn aggregate_decentralized(
        &mut self,
        t: u64,
        quant: Option<QuantConfig>,
    ) -> Result<Vec<MessageRecord>> {
        let n = self.devices.len();
        let d = self.dim();
        let pending: Vec<bool> = self.devices.iter().map(|dev| dev.pending).collect();
        let mut messages = Vec::new();
        if !pending.iter().any(|&p| p) {
            return Ok(messages);
        }
        let target = self.cfg.agg_target(n);
        let aggregators: Vec<usize> = match self.cfg.agg_mode {
            AggMode::Contributors => (0..n).collect(),
            AggMode::Aggregators => {
                let mut rng = seed_stream(self.seed, Purpose::Aggregators, &[t]);
                let mut chosen = rand::seq::index::sample(&mut rng, n, target.min(n)).into_vec();
                chosen.sort_unstable();
                chosen
            }
        };
        // Quantized contributions are encoded once per sender and reused for
        // every recipient.
        let encoded: Vec<Option<Vec<T>>> = match quant {
            None => vec![None; n],
            Some(q) => (0..n)
                .map(|l| {
                    pending[l].then(|| {
                        let dev = &self.devices[l];
                        let mut rng = seed_stream(self.seed, Purpose::AggQuant, &[t, l as u64]);
                        dequantize(&quantize(&dev.params.delta(&dev.anchor), &q, &mut rng))
                    })
                })
                .collect(),
        };
        let msg_bits = match quant {
            None => full_precision_bits(d),
            Some(q) => wire_size_bits(d, &q),
        };
        let mut updates: Vec<(usize, Vec<T>)> = Vec::with_capacity(aggregators.len());
        for &i in &aggregators {
            let candidates: Vec<usize> = self
                .graph
                .neighbors(i)
                .iter()
                .copied()
                .filter(|&l| pending[l])
                .collect();
            if candidates.is_empty() {
                continue;
            }
            let size = match self.cfg.agg_mode {
                AggMode::Contributors => target.min(candidates.len()),
                AggMode::Aggregators => candidates.len(),
            };
            let mut rng = seed_stream(self.seed, Purpose::Aggregate, &[t, i as u64]);
            let mut chosen: Vec<usize> = rand::seq::index::sample(&mut rng, candidates.len(), size)
                .into_iter()
                .map(|k| candidates[k])
                .collect();
            chosen.sort_unstable();
            let m: usize = chosen.iter().map(|&l| self.devices[l].n_samples).sum();
            let weight = |l: usize| self.devices[l].n_samples as f64 / m as f64;
            let values = match quant {
                None => {
                    let terms: Vec<(f64, &[T])> = chosen
                        .iter()
                        .map(|&l| (weight(l), self.devices[l].params.values()))
                        .collect();
                    weighted_sum(None, &terms, d)
                }
                Some(_) => {
                    let own = self.devices[i].params.delta(&self.devices[i].anchor);
                    let terms: Vec<(f64, &[T])> = chosen
                        .iter()
                        .map(|&l| {
                            let delta: &[T] = if l == i {
                                &own
                            } else {
                                encoded[l].as_deref().expect("pending contributor encoded")
                            };
                            (weight(l), delta)
                        })
                        .collect();
                    weighted_sum(Some(self.devices[i].anchor.values()), &terms, d)
                }
            };
            for &l in chosen.iter().filter(|&&l| l != i) {
                messages.push(MessageRecord {
                    round: t,
                    step: None,
                    from: l,
                    to: i,
                    bits: msg_bits,
                    kind: MessageKind::Aggregate,
                });
            }
            updates.push((i, values));
        }
        for (i, values) in updates {
            let spec = self.devices[i].params.spec().clone();
            let next = Params::from_values(spec, values)?;
            if next.values().iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite parameters after aggregation at device {i}, round {t}"
                )));
            }
            self.devices[i].params = next;
        }
        for dev in &mut self.devices {
            dev.anchor = dev.params.clone();
            dev.pending = false;
        }
        Ok(messages)
    }

    fn emit(
        &mut self,
        t: u64,
        outcome: WalkOutcome<T>,
        messages: Vec<MessageRecord>,
        nodes: usize,
        aggregated: bool,
    ) -> RoundMetrics {
        let mut bits_sent = vec![0u64; nodes];
        for msg in &messages {
            bits_sent[msg.from] += msg.bits;
            if let Some(dev) = self.devices.get_mut(msg.from) {
                dev.comm_bits_sent += msg.bits;
            }
        }
        let devices = self.devices.len();
        let busiest = busiest_of(devices, &messages);
        RoundMetrics {
            round: t,
            bits_sent,
            server: (nodes > devices).then_some(devices),
            busiest,
            visits: outcome.chains.into_iter().map(|c| c.visits).collect(),
            gradient_steps: outcome.steps,
            train_loss: if outcome.steps > 0 {
                outcome.loss_sum / outcome.steps as f64
            } else {
                0.0
            },
            aggregated,
            messages,
            evaluation: None,
        }
    }
}

/// `base + Σ w_l·v_l`, accumulated in the order given.
fn weighted_sum<T: Scalar>(base: Option<&[T]>, terms: &[(f64, &[T])], d: usize) -> Vec<T> {
    let mut out = match base {
        Some(b) => b.to_vec(),
        None => vec![T::zero(); d],
    };
    for &(w, v) in terms {
        let w = T::from_f64_lossy(w);
        for (o, &x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    out
}
