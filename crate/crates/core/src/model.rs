//! Fully connected ReLU network with a softmax head and mean cross-entropy
//! loss, with exact backpropagation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{pairwise_sum, Matrix};

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-300;

/// Layer sizes `[d, h1, ..., M]` plus one weight matrix per adjacent pair and,
/// when enabled, one bias vector per non-input layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    layer_dims: Vec<usize>,
    weights: Vec<Matrix>,
    biases: Option<Vec<Vec<f64>>>,
}

/// Gradient of the mean loss, shaped like the model it was computed for.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub weights: Vec<Matrix>,
    pub biases: Option<Vec<Vec<f64>>>,
}

fn validate_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(Error::invalid(
            "an MLP needs at least an input and an output layer",
        ));
    }
    if layer_dims.contains(&0) {
        return Err(Error::invalid(format!(
            "layer widths must be positive, got {layer_dims:?}"
        )));
    }
    Ok(())
}

impl MlpModel {
    /// All-zero model.
    pub fn zeros(layer_dims: &[usize], biases: bool) -> Result<Self> {
        validate_dims(layer_dims)?;
        let weights = layer_dims
            .windows(2)
            .map(|w| Matrix::zeros(w[0], w[1]))
            .collect();
        let biases = biases.then(|| layer_dims[1..].iter().map(|&n| vec![0.0; n]).collect());
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
        })
    }

    pub fn from_parts(weights: Vec<Matrix>, biases: Option<Vec<Vec<f64>>>) -> Result<Self> {
        let first = weights
            .first()
            .ok_or_else(|| Error::invalid("an MLP needs at least one weight matrix"))?;
        let mut layer_dims = vec![first.rows()];
        for (l, w) in weights.iter().enumerate() {
            if w.rows() != *layer_dims.last().unwrap() {
                return Err(Error::invalid(format!(
                    "weight {l} has {} rows, expected {}",
                    w.rows(),
                    layer_dims.last().unwrap()
                )));
            }
            layer_dims.push(w.cols());
        }
        validate_dims(&layer_dims)?;
        if let Some(bs) = &biases {
            let ok = bs.len() == weights.len()
                && bs.iter().zip(&layer_dims[1..]).all(|(b, &n)| b.len() == n);
            if !ok {
                return Err(Error::invalid("bias shapes do not match layer widths"));
            }
        }
        Ok(Self {
            layer_dims,
            weights,
            biases,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [Matrix] {
        &mut self.weights
    }

    pub fn biases(&self) -> Option<&[Vec<f64>]> {
        self.biases.as_deref()
    }

    pub fn has_biases(&self) -> bool {
        self.biases.is_some()
    }

    /// Total parameter count `K` (weights plus enabled biases).
    pub fn num_params(&self) -> usize {
        self.param_slices().map(<[f64]>::len).sum()
    }

    /// Parameter blocks in a fixed order: `W0, b0, W1, b1, ...`.
    pub fn param_slices(&self) -> impl Iterator<Item = &[f64]> {
        param_blocks(&self.weights, self.biases.as_deref())
    }

    pub fn param_slices_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        param_blocks_mut(&mut self.weights, self.biases.as_deref_mut())
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.param_slices().flatten().copied().collect()
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                values.len()
            )));
        }
        let mut offset = 0;
        for block in self.param_slices_mut() {
            block.copy_from_slice(&values[offset..offset + block.len()]);
            offset += block.len();
        }
        Ok(())
    }

    /// Zero gradient congruent with this model.
    pub fn zero_gradient(&self) -> Gradient {
        Gradient {
            weights: self
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            biases: self
                .biases
                .as_ref()
                .map(|bs| bs.iter().map(|b| vec![0.0; b.len()]).collect()),
        }
    }

    pub fn is_congruent(&self, grad: &Gradient) -> bool {
        grad.weights.len() == self.weights.len()
            && grad
                .weights
                .iter()
                .zip(&self.weights)
                .all(|(g, w)| g.shape() == w.shape())
            && match (&grad.biases, &self.biases) {
                (None, None) => true,
                (Some(gb), Some(b)) => {
                    gb.len() == b.len() && gb.iter().zip(b).all(|(x, y)| x.len() == y.len())
                }
                _ => false,
            }
    }
}

impl Gradient {
    pub fn param_slices(&self) -> impl Iterator<Item = &[f64]> {
        param_blocks(&self.weights, self.biases.as_deref())
    }

    pub fn flat(&self) -> Vec<f64> {
        self.param_slices().flatten().copied().collect()
    }

    pub fn scale(&mut self, s: f64) {
        for w in &mut self.weights {
            w.as_mut_slice().iter_mut().for_each(|v| *v *= s);
        }
        for b in self.biases.iter_mut().flatten() {
            b.iter_mut().for_each(|v| *v *= s);
        }
    }
}

fn param_blocks<'a>(
    weights: &'a [Matrix],
    biases: Option<&'a [Vec<f64>]>,
) -> impl Iterator<Item = &'a [f64]> {
    weights.iter().enumerate().flat_map(move |(l, w)| {
        std::iter::once(w.as_slice()).chain(biases.map(|bs| bs[l].as_slice()))
    })
}

fn param_blocks_mut<'a>(
    weights: &'a mut [Matrix],
    biases: Option<&'a mut [Vec<f64>]>,
) -> impl Iterator<Item = &'a mut [f64]> {
    let mut bias_iter = biases.map(|bs| bs.iter_mut());
    weights.iter_mut().flat_map(move |w| {
        let b = bias_iter.as_mut().and_then(|it| it.next());
        std::iter::once(w.as_mut_slice()).chain(b.map(Vec::as_mut_slice))
    })
}

/// Inputs (`b x d`, entries in `[0, 1]`) with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    inputs: Matrix,
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::invalid(format!(
                "batch has {} input rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if let Some(v) = inputs
            .as_slice()
            .iter()
            .find(|v| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::invalid(format!(
                "batch inputs must lie in [0, 1], found {v}"
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `indices` (in that order) as a new batch.
    pub fn gather(&self, indices: &[usize]) -> Batch {
        let d = self.inputs.cols();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.inputs.row(i));
            labels.push(self.labels[i]);
        }
        Batch {
            inputs: Matrix::new(indices.len(), d, data).expect("gathered rows are consistent"),
            labels,
        }
    }
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    if let Some(v) = z.iter().find(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("softmax input is not finite: {v}")));
    }
    let mut out = z.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in z.iter_mut() {
        *v /= total;
    }
}

pub fn one_hot(label: usize, num_classes: usize) -> Result<Vec<f64>> {
    if label >= num_classes {
        return Err(Error::invalid(format!(
            "label {label} out of range for {num_classes} classes"
        )));
    }
    let mut t = vec![0.0; num_classes];
    t[label] = 1.0;
    Ok(t)
}

/// `-ln probs[label]`, with the probability clamped at [`PROB_FLOOR`].
pub fn cross_entropy(probs: &[f64], label: usize) -> f64 {
    let p = probs[label];
    if p.is_nan() {
        return f64::NAN;
    }
    -p.max(PROB_FLOOR).ln()
}

/// Activations kept by [`forward`] for [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Input to each affine layer: the batch, then each post-ReLU hidden state.
    layer_inputs: Vec<Matrix>,
    probs: Matrix,
}

#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub cache: ForwardCache,
    pub mean_loss: f64,
}

impl ForwardPass {
    pub fn probs(&self) -> &Matrix {
        &self.cache.probs
    }
}

impl ForwardCache {
    pub fn probs(&self) -> &Matrix {
        &self.probs
    }
}

fn check_batch(model: &MlpModel, batch: &Batch) -> Result<()> {
    if batch.inputs.cols() != model.input_dim() {
        return Err(Error::invalid(format!(
            "batch width {} does not match model input width {}",
            batch.inputs.cols(),
            model.input_dim()
        )));
    }
    let m = model.num_classes();
    if let Some(&l) = batch.labels.iter().find(|&&l| l >= m) {
        return Err(Error::invalid(format!(
            "label {l} out of range for {m} classes"
        )));
    }
    Ok(())
}

/// Class probabilities for `inputs` (no loss, no cache).
pub fn predict(model: &MlpModel, inputs: &Matrix) -> Result<Matrix> {
    let (_, probs) = propagate(model, inputs, false)?;
    Ok(probs)
}

fn propagate(model: &MlpModel, inputs: &Matrix, keep: bool) -> Result<(Vec<Matrix>, Matrix)> {
    if inputs.cols() != model.input_dim() {
        return Err(Error::invalid(format!(
            "input width {} does not match model input width {}",
            inputs.cols(),
            model.input_dim()
        )));
    }
    let last = model.num_layers() - 1;
    let mut kept = Vec::new();
    let mut h = inputs.clone();
    for (l, w) in model.weights.iter().enumerate() {
        let mut z = h.matmul(w)?;
        if let Some(bs) = &model.biases {
            for r in 0..z.rows() {
                for (v, b) in z.row_mut(r).iter_mut().zip(&bs[l]) {
                    *v += b;
                }
            }
        }
        if l < last {
            // ReLU, with the subgradient at 0 taken as 0
            z.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
        } else {
            for r in 0..z.rows() {
                softmax_in_place(z.row_mut(r));
            }
        }
        let prev = std::mem::replace(&mut h, z);
        if keep {
            kept.push(prev);
        }
    }
    Ok((kept, h))
}

/// Forward pass returning the cache, row-wise probabilities and the mean
/// cross-entropy over the batch.
pub fn forward(model: &MlpModel, batch: &Batch) -> Result<ForwardPass> {
    check_batch(model, batch)?;
    if batch.is_empty() {
        return Err(Error::invalid("forward on an empty batch"));
    }
    let (layer_inputs, probs) = propagate(model, &batch.inputs, true)?;
    let losses: Vec<f64> = batch
        .labels
        .iter()
        .enumerate()
        .map(|(r, &y)| cross_entropy(probs.row(r), y))
        .collect();
    let mean_loss = pairwise_sum(&losses) / batch.len() as f64;
    Ok(ForwardPass {
        cache: ForwardCache {
            layer_inputs,
            probs,
        },
        mean_loss,
    })
}

/// Exact gradient of the mean loss of `batch` with respect to every parameter.
pub fn backward(model: &MlpModel, batch: &Batch, cache: &ForwardCache) -> Result<Gradient> {
    check_batch(model, batch)?;
    let b = batch.len();
    let stale = cache.layer_inputs.len() != model.num_layers()
        || cache.probs.shape() != (b, model.num_classes())
        || cache
            .layer_inputs
            .iter()
            .zip(&model.layer_dims)
            .any(|(h, &d)| h.shape() != (b, d));
    if stale {
        return Err(Error::invalid(
            "forward cache does not match this model and batch",
        ));
    }

    // output-layer local gradient: (probs - one_hot) / b
    let mut delta = cache.probs.clone();
    for (r, &y) in batch.labels.iter().enumerate() {
        delta[(r, y)] -= 1.0;
    }
    let delta_scale = 1.0 / b as f64;
    delta
        .as_mut_slice()
        .iter_mut()
        .for_each(|v| *v *= delta_scale);

    let mut grad = model.zero_gradient();
    for l in (0..model.num_layers()).rev() {
        let h = &cache.layer_inputs[l];
        grad.weights[l] = h.t_matmul(&delta)?;
        if let Some(gbs) = &mut grad.biases {
            let gb = &mut gbs[l];
            for r in 0..delta.rows() {
                for (g, d) in gb.iter_mut().zip(delta.row(r)) {
                    *g += d;
                }
            }
        }
        if l > 0 {
            let mut next = delta.matmul_t(&model.weights[l])?;
            for (g, &a) in next.as_mut_slice().iter_mut().zip(h.as_slice()) {
                if a <= 0.0 {
                    *g = 0.0;
                }
            }
            delta = next;
        }
    }
    Ok(grad)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax prediction equals the label.
pub fn accuracy(model: &MlpModel, data: &Batch) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("accuracy of an empty batch"));
    }
    check_batch(model, data)?;
    let probs = predict(model, &data.inputs)?;
    let correct = data
        .labels
        .iter()
        .enumerate()
        .filter(|(r, &y)| argmax(probs.row(*r)) == y)
        .count();
    Ok(correct as f64 / data.len() as f64)
}
