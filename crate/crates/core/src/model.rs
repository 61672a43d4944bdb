//! Fully connected ReLU network with a log-softmax output, trained by
//! projected SGD on a flat parameter vector.
//!
//! Parameters are laid out layer by layer: the `out x in` weight matrix in
//! row-major order followed by the `out` biases.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed::{seed_stream, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    layer_sizes: Vec<usize>,
    #[serde(default)]
    activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::config(
                "model.layer_sizes",
                format!("need >= 2 layers of size >= 1, got {layer_sizes:?}"),
            ));
        }
        Ok(MlpSpec {
            layer_sizes,
            activation: Activation::Relu,
        })
    }

    /// One hidden layer of 100 units.
    pub fn two_fnn(input: usize, classes: usize) -> Result<Self> {
        MlpSpec::new(vec![input, 100, classes])
    }

    /// Two hidden layers of 200 units.
    pub fn three_fnn(input: usize, classes: usize) -> Result<Self> {
        MlpSpec::new(vec![input, 200, 200, classes])
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().expect(">= 2 layers")
    }

    /// `d`: total weights plus biases.
    pub fn param_count(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn layers(&self) -> impl Iterator<Item = Layer> + '_ {
        let mut offset = 0;
        self.layer_sizes.windows(2).map(move |w| {
            let layer = Layer {
                fan_in: w[0],
                fan_out: w[1],
                offset,
            };
            offset += w[0] * w[1] + w[1];
            layer
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    offset: usize,
}

impl Layer {
    fn weights<'a, T>(&self, p: &'a [T]) -> &'a [T] {
        &p[self.offset..self.offset + self.fan_in * self.fan_out]
    }

    fn bias<'a, T>(&self, p: &'a [T]) -> &'a [T] {
        let start = self.offset + self.fan_in * self.fan_out;
        &p[start..start + self.fan_out]
    }

    fn split_mut<'a, T>(&self, p: &'a mut [T]) -> (&'a mut [T], &'a mut [T]) {
        let block = &mut p[self.offset..self.offset + self.fan_in * self.fan_out + self.fan_out];
        block.split_at_mut(self.fan_in * self.fan_out)
    }
}

/// Flat parameter vector `w` of an [`MlpSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    values: Vec<T>,
    spec: MlpSpec,
}

impl<T: Scalar> Params<T> {
    pub fn from_values(spec: MlpSpec, values: Vec<T>) -> Result<Self> {
        if values.len() != spec.param_count() {
            return Err(Error::config(
                "params",
                format!("{} values for d = {}", values.len(), spec.param_count()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite parameter".into()));
        }
        Ok(Params { values, spec })
    }

    pub fn zeros(spec: MlpSpec) -> Self {
        let values = vec![T::zero(); spec.param_count()];
        Params { values, spec }
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn norm(&self) -> T {
        l2_norm(&self.values)
    }

    /// `self += alpha * other`.
    pub fn scaled_add(&mut self, alpha: T, other: &[T]) {
        for (a, &b) in self.values.iter_mut().zip(other) {
            *a += alpha * b;
        }
    }

    /// `self - other` as a plain vector.
    pub fn delta(&self, other: &Params<T>) -> Vec<T> {
        self.values.iter().zip(&other.values).map(|(&a, &b)| a - b).collect()
    }
}

pub(crate) fn l2_norm<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// Glorot-uniform weights, zero biases.
pub fn init_params<T: Scalar>(spec: &MlpSpec, seed: u64) -> Params<T> {
    let mut rng = seed_stream(seed, Purpose::Init, &[0]);
    let mut values = vec![T::zero(); spec.param_count()];
    for layer in spec.layers() {
        let limit = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
        let (w, _) = layer.split_mut(&mut values);
        for v in w {
            *v = T::from_f64_lossy(rng.random_range(-limit..limit));
        }
    }
    Params {
        values,
        spec: spec.clone(),
    }
}

/// `L2` ball around the origin, or no constraint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum FeasibleSet {
    #[default]
    Unbounded,
    Ball {
        radius: f64,
    },
}

impl FeasibleSet {
    pub fn ball(radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::config("feasible_set.radius", "must be a positive finite number"));
        }
        Ok(FeasibleSet::Ball { radius })
    }

    /// Scales `v` by `min(1, radius / |v|)`.
    pub fn project<T: Scalar>(&self, v: &mut [T]) {
        if let FeasibleSet::Ball { radius } = *self {
            let norm = l2_norm(v).as_f64();
            if norm > radius {
                let scale = T::from_f64_lossy(radius / norm);
                v.iter_mut().for_each(|x| *x *= scale);
            }
        }
    }
}

struct Trace<T> {
    /// Post-activation outputs of every layer, input first.
    activations: Vec<Vec<T>>,
    log_probs: Vec<T>,
}

fn forward_trace<T: Scalar>(p: &Params<T>, x: &[T], rows: usize) -> Result<Trace<T>> {
    let spec = p.spec();
    if x.len() != rows * spec.input_dim() {
        return Err(Error::config(
            "batch",
            format!("{} values for {rows} rows of width {}", x.len(), spec.input_dim()),
        ));
    }
    let layers: Vec<Layer> = spec.layers().collect();
    let mut activations = vec![x.to_vec()];
    for (idx, layer) in layers.iter().enumerate() {
        let w = layer.weights(&p.values);
        let b = layer.bias(&p.values);
        let input = activations.last().expect("input present");
        let mut out = Vec::with_capacity(rows * layer.fan_out);
        for r in 0..rows {
            let a = &input[r * layer.fan_in..(r + 1) * layer.fan_in];
            for o in 0..layer.fan_out {
                let row = &w[o * layer.fan_in..(o + 1) * layer.fan_in];
                let z = row.iter().zip(a).fold(b[o], |acc, (&wi, &ai)| acc + wi * ai);
                out.push(z);
            }
        }
        if idx + 1 < layers.len() {
            out.iter_mut().for_each(|z| *z = z.max(T::zero()));
        }
        activations.push(out);
    }
    let logits = activations.pop().expect("output layer");
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Numeric("non-finite activations in forward pass".into()));
    }
    let classes = spec.num_classes();
    let mut log_probs = logits;
    for row in log_probs.chunks_mut(classes) {
        let max = row.iter().fold(T::neg_infinity(), |m, &z| m.max(z));
        let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
        row.iter_mut().for_each(|z| *z -= lse);
    }
    Ok(Trace {
        activations,
        log_probs,
    })
}

/// Row-wise log-probabilities for a row-major batch.
pub fn forward<T: Scalar>(p: &Params<T>, x: &[T]) -> Result<Vec<T>> {
    let rows = x.len() / p.spec().input_dim().max(1);
    Ok(forward_trace(p, x, rows)?.log_probs)
}

/// Mean negative log-likelihood of the batch and its gradient.
pub fn loss_grad<T: Scalar>(p: &Params<T>, x: &[T], y: &[usize]) -> Result<(T, Vec<T>)> {
    let rows = y.len();
    if rows == 0 {
        return Err(Error::config("batch", "empty batch"));
    }
    let trace = forward_trace(p, x, rows)?;
    let classes = p.spec().num_classes();
    let inv_rows = T::one() / T::from_f64_lossy(rows as f64);
    let mut loss = T::zero();
    // d loss / d logits = (softmax - onehot) / rows
    let mut delta: Vec<T> = trace.log_probs.iter().map(|&lp| lp.exp() * inv_rows).collect();
    for (r, &label) in y.iter().enumerate() {
        if label >= classes {
            return Err(Error::config("batch", format!("label {label} >= {classes}")));
        }
        loss -= trace.log_probs[r * classes + label];
        delta[r * classes + label] -= inv_rows;
    }
    loss *= inv_rows;

    let layers: Vec<Layer> = p.spec().layers().collect();
    let mut grad = vec![T::zero(); p.len()];
    for (idx, layer) in layers.iter().enumerate().rev() {
        let input = &trace.activations[idx];
        let w = layer.weights(&p.values);
        {
            let (gw, gb) = layer.split_mut(&mut grad);
            for r in 0..rows {
                let a = &input[r * layer.fan_in..(r + 1) * layer.fan_in];
                for o in 0..layer.fan_out {
                    let d = delta[r * layer.fan_out + o];
                    if d == T::zero() {
                        continue;
                    }
                    gb[o] += d;
                    let g_row = &mut gw[o * layer.fan_in..(o + 1) * layer.fan_in];
                    for (g, &ai) in g_row.iter_mut().zip(a) {
                        *g += d * ai;
                    }
                }
            }
        }
        if idx == 0 {
            break;
        }
        let mut prev = vec![T::zero(); rows * layer.fan_in];
        for r in 0..rows {
            let out = &mut prev[r * layer.fan_in..(r + 1) * layer.fan_in];
            for o in 0..layer.fan_out {
                let d = delta[r * layer.fan_out + o];
                if d == T::zero() {
                    continue;
                }
                let w_row = &w[o * layer.fan_in..(o + 1) * layer.fan_in];
                for (acc, &wi) in out.iter_mut().zip(w_row) {
                    *acc += d * wi;
                }
            }
            // ReLU': the hidden activation is positive iff its pre-activation was
            for (acc, &a) in out.iter_mut().zip(&input[r * layer.fan_in..(r + 1) * layer.fan_in]) {
                if a <= T::zero() {
                    *acc = T::zero();
                }
            }
        }
        delta = prev;
    }
    Ok((loss, grad))
}

/// `project(p - eta * grad)` in place.
pub fn sgd_step_in_place<T: Scalar>(p: &mut Params<T>, grad: &[T], eta: f64, fs: &FeasibleSet) {
    p.scaled_add(T::from_f64_lossy(-eta), grad);
    fs.project(&mut p.values);
}

pub fn sgd_step<T: Scalar>(p: &Params<T>, grad: &[T], eta: f64, fs: &FeasibleSet) -> Params<T> {
    let mut next = p.clone();
    sgd_step_in_place(&mut next, grad, eta, fs);
    next
}

/// `η = 1 / (R · k̄^q)` for global step `k̄ >= 1`.
pub fn lr_schedule(r_const: f64, k_bar: u64, q_exp: f64) -> f64 {
    debug_assert!(k_bar >= 1 && r_const > 0.0);
    1.0 / (r_const * (k_bar as f64).powf(q_exp))
}

/// Global step index `k̄ = (t-1)K + k + 1` for round `t >= 1`, zero-based step `k`.
pub fn global_step(t: u64, nominal_k: u64, k: u64) -> u64 {
    (t - 1) * nominal_k + k + 1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

/// Accuracy (argmax, ties to the lowest class) and mean NLL over `test`.
pub fn evaluate<T: Scalar>(p: &Params<T>, test: &Dataset<T>) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::config("test set", "empty"));
    }
    let classes = p.spec().num_classes();
    let chunk = 512;
    let mut correct = 0usize;
    let mut loss = 0.0;
    let indices: Vec<usize> = (0..test.len()).collect();
    for block in indices.chunks(chunk) {
        let (x, y) = test.gather(block);
        let lp = forward(p, &x)?;
        for (row, &label) in lp.chunks(classes).zip(&y) {
            let mut best = 0;
            for c in 1..classes {
                if row[c] > row[best] {
                    best = c;
                }
            }
            correct += usize::from(best == label);
            loss -= row[label].as_f64();
        }
    }
    let n = test.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        loss: loss / n,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    spec: MlpSpec,
    d: usize,
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes little-endian `f64` values to `path` and `{spec, d}` to `path.json`.
pub fn save_checkpoint<T: Scalar>(p: &Params<T>, path: &Path) -> Result<()> {
    let mut blob = std::io::BufWriter::new(std::fs::File::create(path)?);
    for v in p.values() {
        blob.write_all(&v.as_f64().to_le_bytes())?;
    }
    blob.flush()?;
    let meta = CheckpointMeta {
        spec: p.spec().clone(),
        d: p.len(),
    };
    std::fs::write(sidecar(path), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Params<T>> {
    let meta: CheckpointMeta = serde_json::from_str(&std::fs::read_to_string(sidecar(path))?)?;
    if meta.d != meta.spec.param_count() {
        return Err(Error::format(0, "sidecar d disagrees with spec"));
    }
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() != meta.d * 8 {
        return Err(Error::format(
            bytes.len() as u64,
            format!("checkpoint holds {} bytes, expected {}", bytes.len(), meta.d * 8),
        ));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| T::from_f64_lossy(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
        .collect();
    Params::from_values(meta.spec, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::Stream;
    use rand::SeedableRng;

    #[test]
    fn parameter_counts() {
        assert_eq!(MlpSpec::two_fnn(784, 10).unwrap().param_count(), 784 * 100 + 100 + 100 * 10 + 10);
        assert_eq!(MlpSpec::two_fnn(784, 10).unwrap().param_count(), 79_510);
        assert_eq!(MlpSpec::three_fnn(784, 10).unwrap().param_count(), 199_210);
        assert!(MlpSpec::new(vec![3]).is_err());
        assert!(MlpSpec::new(vec![3, 0, 2]).is_err());
    }

    #[test]
    fn init_has_zero_biases_and_bounded_weights() {
        let spec = MlpSpec::new(vec![6, 5, 3]).unwrap();
        let p: Params<f64> = init_params(&spec, 4);
        assert_eq!(p, init_params(&spec, 4));
        for layer in spec.layers() {
            let limit = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
            assert!(layer.bias(p.values()).iter().all(|&b| b == 0.0));
            assert!(layer.weights(p.values()).iter().all(|&w| w.abs() <= limit));
        }
    }

    #[test]
    fn zero_params_predict_uniformly() {
        let spec = MlpSpec::new(vec![3, 4, 5]).unwrap();
        let p = Params::<f64>::zeros(spec);
        let lp = forward(&p, &[0.3, 0.1, 0.9, 1.0, 0.0, 0.2]).unwrap();
        assert!(lp.iter().all(|&v| (v + 5f64.ln()).abs() < 1e-15));
        let (loss, _) = loss_grad(&p, &[0.3, 0.1, 0.9], &[2]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn hand_computed_two_two_two() {
        let spec = MlpSpec::new(vec![2, 2, 2]).unwrap();
        // W1 = [[1,-1],[0.5,2]], b1 = [0,-1], W2 = [[1,0],[-1,1]], b2 = [0.5,0]
        let values = vec![1.0, -1.0, 0.5, 2.0, 0.0, -1.0, 1.0, 0.0, -1.0, 1.0, 0.5, 0.0];
        let p = Params::from_values(spec, values).unwrap();
        let lp = forward(&p, &[1.0, 2.0]).unwrap();
        // hidden = relu([-1, 3.5]) = [0, 3.5]; logits = [0.5, 3.5]
        let lse = 3.5 + (1.0 + (-3.0f64).exp()).ln();
        assert!((lp[0] - (0.5 - lse)).abs() < 1e-12);
        assert!((lp[1] - (3.5 - lse)).abs() < 1e-12);
    }

    #[test]
    fn rows_normalize() {
        let spec = MlpSpec::new(vec![4, 7, 3]).unwrap();
        let p: Params<f64> = init_params(&spec, 1);
        let mut rng = Stream::seed_from_u64(3);
        let x: Vec<f64> = (0..40).map(|_| rng.random_range(-2.0..2.0)).collect();
        for row in forward(&p, &x).unwrap().chunks(3) {
            assert!((row.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let spec = MlpSpec::new(vec![6, 5, 3]).unwrap();
        let mut rng = Stream::seed_from_u64(5);
        let x: Vec<f64> = (0..4 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = vec![0, 2, 1, 2];
        let mut p: Params<f64> = init_params(&spec, 2);
        p.values_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
        let (_, grad) = loss_grad(&p, &x, &y).unwrap();
        let eps = 1e-5;
        for k in 0..p.len() {
            let mut plus = p.clone();
            plus.values_mut()[k] += eps;
            let mut minus = p.clone();
            minus.values_mut()[k] -= eps;
            let fd = (loss_grad(&plus, &x, &y).unwrap().0 - loss_grad(&minus, &x, &y).unwrap().0) / (2.0 * eps);
            let denom = fd.abs().max(grad[k].abs()).max(1e-8);
            assert!((fd - grad[k]).abs() / denom < 1e-4 || (fd - grad[k]).abs() < 1e-9, "k={k}");
        }
    }

    #[test]
    fn duplicated_rows_leave_gradient_unchanged() {
        let spec = MlpSpec::new(vec![3, 4, 2]).unwrap();
        let p: Params<f64> = init_params(&spec, 8);
        let x = [0.2, 0.7, 0.1];
        let (l1, g1) = loss_grad(&p, &x, &[1]).unwrap();
        let x2: Vec<f64> = x.iter().chain(x.iter()).copied().collect();
        let (l2, g2) = loss_grad(&p, &x2, &[1, 1]).unwrap();
        assert!((l1 - l2).abs() < 1e-15);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn small_step_does_not_increase_batch_loss() {
        let spec = MlpSpec::new(vec![6, 5, 3]).unwrap();
        let p: Params<f64> = init_params(&spec, 12);
        let mut rng = Stream::seed_from_u64(13);
        let x: Vec<f64> = (0..8 * 6).map(|_| rng.random()).collect();
        let y: Vec<usize> = (0..8).map(|i| i % 3).collect();
        let (before, g) = loss_grad(&p, &x, &y).unwrap();
        let next = sgd_step(&p, &g, 1e-3, &FeasibleSet::Unbounded);
        assert!(loss_grad(&next, &x, &y).unwrap().0 <= before);
    }

    #[test]
    fn projection_scales_onto_ball() {
        let spec = MlpSpec::new(vec![1, 1]).unwrap();
        let p = Params::from_values(spec, vec![6.0f64, 8.0]).unwrap();
        let ball = FeasibleSet::ball(5.0).unwrap();
        let q = sgd_step(&p, &[0.0, 0.0], 0.1, &ball);
        assert!((q.norm() - 5.0).abs() < 1e-12);
        assert!((q.values()[0] / q.values()[1] - 0.75).abs() < 1e-12);
        let again = sgd_step(&q, &[0.0, 0.0], 0.1, &ball);
        assert_eq!(q, again);
        let free = sgd_step(&p, &[1.0, 1.0], 0.5, &FeasibleSet::Unbounded);
        assert_eq!(free.values(), &[5.5, 7.5]);
    }

    #[test]
    fn learning_rate_schedule() {
        assert!((lr_schedule(5.0, 1, 0.499) - 0.2).abs() < 1e-15);
        assert!((lr_schedule(10.0, 1, 0.499) - 0.1).abs() < 1e-15);
        assert!((1..100).all(|k| lr_schedule(5.0, k + 1, 0.499) < lr_schedule(5.0, k, 0.499)));
        assert_eq!(global_step(1, 5, 0), 1);
        assert_eq!(global_step(3, 5, 4), 15);
    }

    #[test]
    fn evaluation_ties_and_order() {
        let spec = MlpSpec::new(vec![2, 3]).unwrap();
        let p = Params::<f64>::zeros(spec.clone());
        let ds = Dataset::new(vec![0.0; 12], vec![0, 1, 2, 1, 2, 0], 2, 3).unwrap();
        let e = evaluate(&p, &ds).unwrap();
        assert!((e.accuracy - 2.0 / 6.0).abs() < 1e-15);
        assert!((e.loss - 3f64.ln()).abs() < 1e-12);
        // one-hot predictor on separable inputs: class = argmax feature
        let perfect = Params::from_values(spec, vec![10.0, 0.0, 0.0, 10.0, -10.0, -10.0, 0.0, 0.0, 5.0]).unwrap();
        let ds = Dataset::new(vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0], vec![0, 1, 2], 2, 3).unwrap();
        assert_eq!(evaluate(&perfect, &ds).unwrap().accuracy, 1.0);
        let shuffled = Dataset::new(vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0], vec![2, 0, 1], 2, 3).unwrap();
        assert_eq!(evaluate(&perfect, &shuffled).unwrap(), evaluate(&perfect, &ds).unwrap());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let p: Params<f64> = init_params(&MlpSpec::new(vec![4, 3, 2]).unwrap(), 6);
        save_checkpoint(&p, &path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 8 * p.len() as u64);
        assert_eq!(load_checkpoint::<f64>(&path).unwrap(), p);
    }

    #[test]
    fn single_precision_tracks_double() {
        let spec = MlpSpec::new(vec![6, 5, 3]).unwrap();
        let p64: Params<f64> = init_params(&spec, 2);
        let p32: Params<f32> = init_params(&spec, 2);
        let x: Vec<f64> = (0..12).map(|i| i as f64 / 12.0).collect();
        let x32: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        let (l64, _) = loss_grad(&p64, &x, &[0, 1]).unwrap();
        let (l32, _) = loss_grad(&p32, &x32, &[0, 1]).unwrap();
        assert!((l64 - l32 as f64).abs() < 1e-5);
    }
}
