//! Initialization, minibatch sampling, the SGD update and the instrumented
//! training loop.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{self, Batch, Gradient, MlpModel};
use crate::stats::{layer_second_moments, weight_second_moment};
use crate::tensor::{rng_fork, Matrix, RngState};

/// Loss above which (or non-finite) a run is declared diverged.
pub const DIVERGENCE_LOSS: f64 = 1e10;

/// RNG stream used for parameter initialization.
pub const STREAM_INIT: u64 = 0;
/// RNG stream used for minibatch sampling.
pub const STREAM_MINIBATCH: u64 = 1;
/// RNG stream used for gradient-noise probes.
pub const STREAM_NOISE_PROBE: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Every parameter i.i.d. `N(0, sigma0^2)`.
    Gaussian,
    /// Weights `N(0, 2 / fan_in)`, biases zero.
    HeNormal,
}

impl std::fmt::Display for InitScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InitScheme::Gaussian => "gaussian",
            InitScheme::HeNormal => "he_normal",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub alpha: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub sigma0: f64,
    pub init_scheme: InitScheme,
    pub seeds: Vec<u64>,
    pub hidden_dims: Vec<usize>,
    pub biases: bool,
    /// Epochs between statistic snapshots.
    pub record_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-4,
            batch_size: 100,
            epochs: 100,
            sigma0: 0.15,
            init_scheme: InitScheme::Gaussian,
            seeds: vec![0],
            hidden_dims: vec![128, 128],
            biases: false,
            record_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_train: usize) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::invalid(format!(
                "learning rate must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        if self.batch_size < 1 || self.batch_size > n_train {
            return Err(Error::invalid(format!(
                "batch size {} must lie in [1, {n_train}]",
                self.batch_size
            )));
        }
        if self.epochs < 1 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if self.record_every < 1 {
            return Err(Error::invalid("record_every must be >= 1"));
        }
        if !(self.sigma0 >= 0.0) || !self.sigma0.is_finite() {
            return Err(Error::invalid(format!(
                "sigma0 must be finite and >= 0, got {}",
                self.sigma0
            )));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        Ok(())
    }

    /// `[d, hidden..., M]`.
    pub fn layer_dims(&self, input_dim: usize, num_classes: usize) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(num_classes);
        dims
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train / self.batch_size
    }

    /// Snapshot epochs: 0, every `record_every`, and the last epoch.
    pub fn snapshot_epochs(&self) -> Vec<usize> {
        let mut epochs: Vec<usize> = (0..=self.epochs).step_by(self.record_every).collect();
        if *epochs.last().unwrap() != self.epochs {
            epochs.push(self.epochs);
        }
        epochs
    }
}

/// Draws every weight matrix, then its bias vector, layer by layer from one
/// stream, each with the standard deviation returned by `std_for`.
fn init_layerwise(
    dims: &[usize],
    biases: Option<f64>,
    rng: &mut RngState,
    std_for: impl Fn(usize) -> f64,
) -> Result<MlpModel> {
    let mut weights = Vec::with_capacity(dims.len().saturating_sub(1));
    let mut bias_vecs = biases.map(|_| Vec::with_capacity(dims.len().saturating_sub(1)));
    for (l, w) in dims.windows(2).enumerate() {
        weights.push(crate::tensor::gaussian_matrix(w[0], w[1], 0.0, std_for(l), rng)?);
        if let (Some(bias_std), Some(bs)) = (biases, bias_vecs.as_mut()) {
            let mut b = vec![0.0; w[1]];
            if bias_std > 0.0 {
                rng.fill_normal(&mut b, 0.0, bias_std);
            }
            bs.push(b);
        }
    }
    MlpModel::from_parts(weights, bias_vecs)
}

/// Every parameter (biases included when enabled) i.i.d. `N(0, sigma0^2)`.
pub fn init_gaussian(
    dims: &[usize],
    sigma0: f64,
    biases: bool,
    rng: &mut RngState,
) -> Result<MlpModel> {
    if !(sigma0 >= 0.0) || !sigma0.is_finite() {
        return Err(Error::invalid(format!(
            "sigma0 must be finite and >= 0, got {sigma0}"
        )));
    }
    init_layerwise(dims, biases.then_some(sigma0), rng, |_| sigma0)
}

/// He-normal: weights into a layer with fan-in `f` drawn `N(0, 2/f)`, biases 0.
pub fn init_he_normal(dims: &[usize], biases: bool, rng: &mut RngState) -> Result<MlpModel> {
    init_layerwise(dims, biases.then_some(0.0), rng, |l| {
        (2.0 / dims[l] as f64).sqrt()
    })
}

/// `b` distinct indices from `0..n`, uniform over subsets.
pub fn sample_minibatch(n: usize, b: usize, rng: &mut RngState) -> Result<Vec<usize>> {
    let mut sampler = MinibatchSampler::new(n);
    Ok(sampler.sample(b, rng)?.to_vec())
}

/// Reusable partial Fisher-Yates sampler.
///
/// The working buffer is always a permutation of `0..n`, and a partial
/// shuffle of any permutation yields a uniform random subset, so the buffer
/// never needs resetting between draws.
#[derive(Clone, Debug)]
pub struct MinibatchSampler {
    perm: Vec<usize>,
}

impl MinibatchSampler {
    pub fn new(n: usize) -> Self {
        Self {
            perm: (0..n).collect(),
        }
    }

    pub fn sample(&mut self, b: usize, rng: &mut RngState) -> Result<&[usize]> {
        let n = self.perm.len();
        if b < 1 || b > n {
            return Err(Error::invalid(format!(
                "minibatch size {b} must lie in [1, {n}]"
            )));
        }
        for i in 0..b {
            let j = i + rng.below(n - i);
            self.perm.swap(i, j);
        }
        Ok(&self.perm[..b])
    }
}

/// `w <- w - alpha * g` for every parameter.
pub fn sgd_step(model: &mut MlpModel, grad: &Gradient, alpha: f64) -> Result<()> {
    if !model.is_congruent(grad) {
        return Err(Error::invalid("gradient shape does not match the model"));
    }
    for (w, g) in model.param_slices_mut().zip(grad.param_slices()) {
        for (wi, gi) in w.iter_mut().zip(g) {
            *wi -= alpha * gi;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub vbar: f64,
    pub mean_norm_sq: f64,
    pub centered_var: f64,
    /// Pooled second moment per layer (weights plus that layer's biases).
    pub layer_vbar: Vec<f64>,
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub init_scheme: InitScheme,
    /// Configured `sigma0`; meaningful for [`InitScheme::Gaussian`] only.
    pub sigma0: f64,
    pub num_params: usize,
    pub snapshots: Vec<Snapshot>,
    pub diverged: bool,
    pub steps: usize,
    pub gradient_evaluations: usize,
}

impl RunRecord {
    pub fn initial(&self) -> &Snapshot {
        &self.snapshots[0]
    }

    pub fn last(&self) -> &Snapshot {
        self.snapshots.last().expect("a run has at least one snapshot")
    }

    pub fn final_vbar(&self) -> f64 {
        self.last().vbar
    }

    /// Variance the run was initialised with: `sigma0^2` for Gaussian init,
    /// the realised initial `vbar` for He-normal.
    pub fn init_variance(&self) -> f64 {
        match self.init_scheme {
            InitScheme::Gaussian => self.sigma0 * self.sigma0,
            InitScheme::HeNormal => self.initial().vbar,
        }
    }
}

/// Mean cross-entropy and accuracy of `model` on `batch` in one pass.
pub fn evaluate(model: &MlpModel, batch: &Batch) -> Result<(f64, f64)> {
    if batch.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty set"));
    }
    let probs: Matrix = model::predict(model, batch.inputs())?;
    let mut losses = Vec::with_capacity(batch.len());
    let mut correct = 0usize;
    for (r, &y) in batch.labels().iter().enumerate() {
        let p = probs.row(r);
        losses.push(model::cross_entropy(p, y));
        if model::argmax(p) == y {
            correct += 1;
        }
    }
    let loss = crate::tensor::pairwise_sum(&losses) / batch.len() as f64;
    Ok((loss, correct as f64 / batch.len() as f64))
}

fn snapshot(
    model: &MlpModel,
    train_set: &Dataset,
    val_set: &Dataset,
    epoch: usize,
    diverged: bool,
) -> Result<Snapshot> {
    let (train_loss, _) = evaluate(model, train_set.batch())?;
    let (val_loss, val_acc) = evaluate(model, val_set.batch())?;
    let m = weight_second_moment(model)?;
    Ok(Snapshot {
        epoch,
        train_loss,
        val_loss,
        val_acc,
        vbar: m.vbar,
        mean_norm_sq: m.mean_norm_sq,
        centered_var: m.centered_var,
        layer_vbar: layer_second_moments(model),
        diverged,
    })
}

/// Builds the initial model for `seed` (RNG stream [`STREAM_INIT`]).
pub fn initial_model(config: &TrainConfig, dims: &[usize], seed: u64) -> Result<MlpModel> {
    let mut rng = rng_fork(seed, STREAM_INIT);
    match config.init_scheme {
        InitScheme::Gaussian => init_gaussian(dims, config.sigma0, config.biases, &mut rng),
        InitScheme::HeNormal => init_he_normal(dims, config.biases, &mut rng),
    }
}

fn check_datasets(train_set: &Dataset, val_set: &Dataset) -> Result<()> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("training and validation sets must be non-empty"));
    }
    if train_set.input_dim() != val_set.input_dim()
        || train_set.num_classes() != val_set.num_classes()
    {
        return Err(Error::invalid(format!(
            "train ({}x{} classes) and validation ({}x{} classes) shapes differ",
            train_set.input_dim(),
            train_set.num_classes(),
            val_set.input_dim(),
            val_set.num_classes()
        )));
    }
    Ok(())
}

/// Trains from `initial` and returns the run record with the final model.
///
/// One epoch is `floor(N / b)` steps; every step draws a fresh minibatch
/// without replacement, independently of previous steps. `on_step` is called
/// after every update with `(global_step, model)`.
pub fn train_from(
    config: &TrainConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    seed: u64,
    initial: MlpModel,
    mut on_step: impl FnMut(usize, &MlpModel),
) -> Result<(RunRecord, MlpModel)> {
    check_datasets(train_set, val_set)?;
    config.validate(train_set.len())?;
    let dims = config.layer_dims(train_set.input_dim(), train_set.num_classes());
    if initial.layer_dims() != dims.as_slice() {
        return Err(Error::invalid(format!(
            "initial model dims {:?} do not match {dims:?}",
            initial.layer_dims()
        )));
    }
    let mut model = initial;
    let mut rng = rng_fork(seed, STREAM_MINIBATCH);
    let mut sampler = MinibatchSampler::new(train_set.len());
    let steps_per_epoch = config.steps_per_epoch(train_set.len());
    let schedule = config.snapshot_epochs();
    let mut next_snapshot = 1;

    let mut snapshots = vec![snapshot(&model, train_set, val_set, 0, false)?];
    let mut steps = 0usize;
    let mut diverged = false;

    'epochs: for epoch in 1..=config.epochs {
        for _ in 0..steps_per_epoch {
            let idx = sampler.sample(config.batch_size, &mut rng)?;
            let batch = train_set.gather(idx);
            let fp = model::forward(&model, &batch)?;
            if !fp.mean_loss.is_finite() || fp.mean_loss > DIVERGENCE_LOSS {
                diverged = true;
                snapshots.push(snapshot(&model, train_set, val_set, epoch, true)?);
                break 'epochs;
            }
            let grad = model::backward(&model, &batch, &fp.cache)?;
            sgd_step(&mut model, &grad, config.alpha)?;
            steps += 1;
            on_step(steps, &model);
        }
        if schedule.get(next_snapshot) == Some(&epoch) {
            next_snapshot += 1;
            let s = snapshot(&model, train_set, val_set, epoch, false)?;
            if !s.train_loss.is_finite() || s.train_loss > DIVERGENCE_LOSS {
                diverged = true;
                snapshots.push(Snapshot { diverged: true, ..s });
                break;
            }
            snapshots.push(s);
        }
    }

    let record = RunRecord {
        seed,
        init_scheme: config.init_scheme,
        sigma0: config.sigma0,
        num_params: model.num_params(),
        snapshots,
        diverged,
        steps,
        gradient_evaluations: steps * config.batch_size,
    };
    Ok((record, model))
}

/// [`train_from`] starting at [`initial_model`], returning the final model too.
pub fn train_model(
    config: &TrainConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    seed: u64,
) -> Result<(RunRecord, MlpModel)> {
    check_datasets(train_set, val_set)?;
    let dims = config.layer_dims(train_set.input_dim(), train_set.num_classes());
    let initial = initial_model(config, &dims, seed)?;
    train_from(config, train_set, val_set, seed, initial, |_, _| {})
}

/// Trains one run; the record is a pure function of `(config, data, seed)`.
pub fn train(
    config: &TrainConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    seed: u64,
) -> Result<RunRecord> {
    train_model(config, train_set, val_set, seed).map(|(r, _)| r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blobs;

    fn blobs(seed: u64, per_class: usize) -> Dataset {
        synthetic_blobs(4, 2, per_class, 3.0, 0.5, &mut rng_fork(seed, 100)).unwrap()
    }

    #[test]
    fn zero_sigma_gives_zero_model() {
        let m = init_gaussian(&[3, 4, 2], 0.0, true, &mut rng_fork(1, 0)).unwrap();
        assert!(m.flat_params().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn negative_sigma_rejected() {
        assert!(init_gaussian(&[3, 2], -0.1, false, &mut rng_fork(1, 0)).is_err());
    }

    #[test]
    fn gaussian_init_variance_at_paper_sigma() {
        let dims = [784, 128, 128, 10];
        let m = init_gaussian(&dims, 0.15, false, &mut rng_fork(11, STREAM_INIT)).unwrap();
        let p = m.flat_params();
        let var = p.iter().map(|v| v * v).sum::<f64>() / p.len() as f64;
        assert!((var - 0.0225).abs() < 0.05 * 0.0225, "var {var}");
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_gaussian(&[5, 3, 2], 0.3, true, &mut rng_fork(8, 0)).unwrap();
        let b = init_gaussian(&[5, 3, 2], 0.3, true, &mut rng_fork(8, 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn he_normal_std_per_layer() {
        let m = init_he_normal(&[800, 400, 2], false, &mut rng_fork(2, 0)).unwrap();
        let std_of = |w: &Matrix| {
            (w.as_slice().iter().map(|v| v * v).sum::<f64>() / w.len() as f64).sqrt()
        };
        assert!((std_of(&m.weights()[0]) - 0.05).abs() < 0.05 * 0.01);
        assert!((std_of(&m.weights()[1]) - (2.0f64 / 400.0).sqrt()).abs() < 0.002);
        let m = init_he_normal(&[2, 20000], false, &mut rng_fork(2, 0)).unwrap();
        assert!((std_of(&m.weights()[0]) - 1.0).abs() < 0.02);
    }

    #[test]
    fn he_normal_equals_layerwise_gaussian() {
        let dims = [7, 5, 3];
        let he = init_he_normal(&dims, false, &mut rng_fork(4, 0)).unwrap();
        let mut rng = rng_fork(4, 0);
        let w0 = crate::tensor::gaussian_matrix(7, 5, 0.0, (2.0f64 / 7.0).sqrt(), &mut rng).unwrap();
        let w1 = crate::tensor::gaussian_matrix(5, 3, 0.0, (2.0f64 / 5.0).sqrt(), &mut rng).unwrap();
        assert_eq!(he, MlpModel::from_parts(vec![w0, w1], None).unwrap());
        let with_bias = init_he_normal(&dims, true, &mut rng_fork(4, 0)).unwrap();
        assert!(with_bias.biases().unwrap().iter().flatten().all(|&b| b == 0.0));
    }

    #[test]
    fn minibatch_contracts() {
        let mut rng = rng_fork(0, 1);
        let mut full = sample_minibatch(5, 5, &mut rng).unwrap();
        full.sort();
        assert_eq!(full, vec![0, 1, 2, 3, 4]);
        let idx = sample_minibatch(10, 3, &mut rng).unwrap();
        assert_eq!(idx.len(), 3);
        assert!(idx.iter().all(|&i| i < 10));
        assert!(idx[0] != idx[1] && idx[1] != idx[2] && idx[0] != idx[2]);
        assert!(sample_minibatch(3, 4, &mut rng).is_err());
        assert!(sample_minibatch(3, 0, &mut rng).is_err());
    }

    #[test]
    fn minibatch_subsets_are_uniform() {
        // exact oracle: each of the C(4,2) = 6 subsets has probability 1/6
        let mut sampler = MinibatchSampler::new(4);
        let mut rng = rng_fork(77, 1);
        let mut counts = std::collections::HashMap::new();
        let draws = 100_000;
        for _ in 0..draws {
            let s = sampler.sample(2, &mut rng).unwrap();
            let key = (s[0].min(s[1]), s[0].max(s[1]));
            *counts.entry(key).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 6);
        for (k, c) in counts {
            let f = c as f64 / draws as f64;
            assert!((f - 1.0 / 6.0).abs() < 0.01, "{k:?}: {f}");
        }
    }

    #[test]
    fn sgd_step_arithmetic() {
        let w = Matrix::from_rows(&[[1.0]]).unwrap();
        let mut m = MlpModel::from_parts(vec![w], None).unwrap();
        let mut g = m.zero_gradient();
        let before = m.clone();
        sgd_step(&mut m, &g, 0.5).unwrap();
        assert_eq!(m, before);

        g.weights[0][(0, 0)] = 2.0;
        sgd_step(&mut m, &g, 0.1).unwrap();
        assert!((m.weights()[0][(0, 0)] - 0.8).abs() < 1e-15);

        let mut twice = before.clone();
        sgd_step(&mut twice, &g, 0.1).unwrap();
        sgd_step(&mut twice, &g, 0.1).unwrap();
        let mut once = before.clone();
        sgd_step(&mut once, &g, 0.2).unwrap();
        assert!((twice.weights()[0][(0, 0)] - once.weights()[0][(0, 0)]).abs() < 1e-15);

        let other = MlpModel::zeros(&[2, 1], false).unwrap();
        assert!(sgd_step(&mut m, &other.zero_gradient(), 0.1).is_err());
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            alpha: 0.1,
            batch_size: 10,
            epochs: 20,
            sigma0: 0.1,
            hidden_dims: vec![6],
            record_every: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let ds = blobs(1, 30);
        let cfg = TrainConfig {
            alpha: 0.0,
            ..small_config()
        };
        let (rec, model) = train_model(&cfg, &ds, &ds, 3).unwrap();
        let init = initial_model(&cfg, &cfg.layer_dims(4, 2), 3).unwrap();
        assert_eq!(model, init);
        let v0 = rec.initial().vbar;
        assert!(rec.snapshots.iter().all(|s| s.vbar == v0));
    }

    #[test]
    fn snapshot_schedule_and_epoch_accounting() {
        let ds = blobs(1, 25);
        let cfg = TrainConfig {
            epochs: 12,
            ..small_config()
        };
        let rec = train(&cfg, &ds, &ds, 1).unwrap();
        let epochs: Vec<usize> = rec.snapshots.iter().map(|s| s.epoch).collect();
        assert_eq!(epochs, vec![0, 5, 10, 12]);
        assert_eq!(rec.steps, 12 * (50 / 10));
        assert_eq!(rec.gradient_evaluations, 12 * 5 * 10);
        assert!(rec.snapshots.windows(2).all(|w| w[0].epoch < w[1].epoch));
    }

    #[test]
    fn training_descends_on_separable_blobs() {
        let ds = synthetic_blobs(4, 2, 50, 4.0, 0.3, &mut rng_fork(5, 100)).unwrap();
        let cfg = TrainConfig {
            epochs: 200,
            record_every: 50,
            ..small_config()
        };
        let rec = train(&cfg, &ds, &ds, 9).unwrap();
        assert!(rec.last().train_loss < rec.initial().train_loss);
        assert!(!rec.diverged);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = blobs(2, 20);
        let a = train(&small_config(), &ds, &ds, 5).unwrap();
        let b = train(&small_config(), &ds, &ds, 5).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn divergence_is_recorded_not_thrown() {
        let ds = blobs(3, 20);
        let cfg = TrainConfig {
            alpha: 1e200,
            sigma0: 1.0,
            ..small_config()
        };
        let rec = train(&cfg, &ds, &ds, 1).unwrap();
        assert!(rec.diverged);
        assert!(rec.last().diverged);
    }

    #[test]
    fn mismatched_datasets_rejected() {
        let a = blobs(1, 10);
        let b = synthetic_blobs(5, 2, 10, 1.0, 0.1, &mut rng_fork(1, 0)).unwrap();
        assert!(train(&small_config(), &a, &b, 0).is_err());
        let cfg = TrainConfig {
            batch_size: 1000,
            ..small_config()
        };
        assert!(train(&cfg, &a, &a, 0).is_err());
    }
}
