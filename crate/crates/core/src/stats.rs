//! Weight-distribution statistics, gradient-noise estimation and aggregation
//! over seeds.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{self, MlpModel};
use crate::optimize::{sample_minibatch, InitScheme, RunRecord};
use crate::tensor::RngState;

/// Pooled second-moment statistics over all `K` parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightMoments {
    /// Uncentered second moment `sum(w_i^2) / K`.
    pub vbar: f64,
    /// `K * m^2` with `m = sum(w_i) / K`.
    pub mean_norm_sq: f64,
    /// `vbar - m^2`.
    pub centered_var: f64,
}

pub fn moments_of<'a>(blocks: impl IntoIterator<Item = &'a [f64]>) -> Result<WeightMoments> {
    let (mut k, mut sum, mut sum_sq) = (0usize, 0.0, 0.0);
    for block in blocks {
        k += block.len();
        sum += block.iter().sum::<f64>();
        sum_sq += block.iter().map(|w| w * w).sum::<f64>();
    }
    if k == 0 {
        return Err(Error::invalid("second moment of an empty parameter set"));
    }
    let kf = k as f64;
    let vbar = sum_sq / kf;
    let mean = sum / kf;
    Ok(WeightMoments {
        vbar,
        mean_norm_sq: mean * mean * kf,
        centered_var: (vbar - mean * mean).max(0.0),
    })
}

/// `vbar`, `K m^2` and the centered variance pooled over every parameter.
pub fn weight_second_moment(model: &MlpModel) -> Result<WeightMoments> {
    moments_of(model.param_slices())
}

/// Per-layer uncentered second moments (each layer's weights and biases).
pub fn layer_second_moments(model: &MlpModel) -> Vec<f64> {
    (0..model.num_layers())
        .map(|l| {
            let w = model.weights()[l].as_slice();
            let b = model.biases().map_or(&[][..], |bs| bs[l].as_slice());
            moments_of([w, b]).map_or(0.0, |m| m.vbar)
        })
        .collect()
}

/// Anything that can produce per-example gradients of a loss.
pub trait GradientSource {
    fn num_params(&self) -> usize;
    fn num_examples(&self) -> usize;
    /// Writes the gradient of example `index`'s loss into `out`.
    fn example_gradient(&self, index: usize, out: &mut [f64]) -> Result<()>;
}

/// Per-example cross-entropy gradients of an MLP on a dataset.
pub struct MlpGradients<'a> {
    pub model: &'a MlpModel,
    pub dataset: &'a Dataset,
}

impl GradientSource for MlpGradients<'_> {
    fn num_params(&self) -> usize {
        self.model.num_params()
    }

    fn num_examples(&self) -> usize {
        self.dataset.len()
    }

    fn example_gradient(&self, index: usize, out: &mut [f64]) -> Result<()> {
        let batch = self.dataset.gather(&[index]);
        let fp = model::forward(self.model, &batch)?;
        let g = model::backward(self.model, &batch, &fp.cache)?;
        let mut offset = 0;
        for block in g.param_slices() {
            out[offset..offset + block.len()].copy_from_slice(block);
            offset += block.len();
        }
        Ok(())
    }
}

/// Isotropic noise proxy `tr(Cov) / K` of the per-example gradients over
/// `indices`, with unbiased (`n - 1`) per-component variances.
pub fn noise_scale_over(source: &dyn GradientSource, indices: &[usize]) -> Result<f64> {
    if indices.len() < 2 {
        return Err(Error::invalid("noise-scale estimation needs at least 2 examples"));
    }
    let k = source.num_params();
    let mut mean = vec![0.0; k];
    let mut m2 = vec![0.0; k];
    let mut g = vec![0.0; k];
    for (n, &i) in indices.iter().enumerate() {
        source.example_gradient(i, &mut g)?;
        let count = (n + 1) as f64;
        for ((mu, s), &x) in mean.iter_mut().zip(m2.iter_mut()).zip(&g) {
            let d = x - *mu;
            *mu += d / count;
            *s += d * (x - *mu);
        }
    }
    let denom = (indices.len() - 1) as f64;
    Ok(m2.iter().map(|s| s / denom).sum::<f64>() / k as f64)
}

/// Estimates the isotropic gradient-noise scale `sigma^2` from `n_probe`
/// examples drawn without replacement (all examples if `n_probe >= N`).
pub fn estimate_noise_scale_from(
    source: &dyn GradientSource,
    n_probe: usize,
    rng: &mut RngState,
) -> Result<f64> {
    if n_probe < 2 {
        return Err(Error::invalid(format!("n_probe must be >= 2, got {n_probe}")));
    }
    let n = source.num_examples();
    let indices = if n_probe >= n {
        (0..n).collect()
    } else {
        sample_minibatch(n, n_probe, rng)?
    };
    noise_scale_over(source, &indices)
}

pub fn estimate_noise_scale(
    model: &MlpModel,
    dataset: &Dataset,
    n_probe: usize,
    rng: &mut RngState,
) -> Result<f64> {
    estimate_noise_scale_from(&MlpGradients { model, dataset }, n_probe, rng)
}

/// Time series of the pooled weight statistics of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceTrace {
    pub epochs: Vec<usize>,
    pub vbar: Vec<f64>,
    pub mean_norm_sq: Vec<f64>,
    pub centered_var: Vec<f64>,
}

impl From<&RunRecord> for VarianceTrace {
    fn from(r: &RunRecord) -> Self {
        Self {
            epochs: r.snapshots.iter().map(|s| s.epoch).collect(),
            vbar: r.snapshots.iter().map(|s| s.vbar).collect(),
            mean_norm_sq: r.snapshots.iter().map(|s| s.mean_norm_sq).collect(),
            centered_var: r.snapshots.iter().map(|s| s.centered_var).collect(),
        }
    }
}

/// Mean and sample standard deviation (divisor `n - 1`; 0 when `n = 1`).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl MeanStd {
    fn over(records: &[&RunRecord], field: impl Fn(&crate::optimize::Snapshot) -> f64) -> Self {
        let len = records[0].snapshots.len();
        let (mean, std) = (0..len)
            .map(|t| {
                let xs: Vec<f64> = records.iter().map(|r| field(&r.snapshots[t])).collect();
                mean_std(&xs)
            })
            .unzip();
        Self { mean, std }
    }

    pub fn last_mean(&self) -> f64 {
        *self.mean.last().unwrap()
    }

    pub fn last_std(&self) -> f64 {
        *self.std.last().unwrap()
    }
}

/// Per-snapshot mean/std across seeds for one initialization setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub init_scheme: InitScheme,
    pub sigma0: f64,
    pub n_runs: usize,
    /// Only one run: the std columns carry no information.
    pub degenerate: bool,
    pub epochs: Vec<usize>,
    pub train_loss: MeanStd,
    pub val_loss: MeanStd,
    pub val_acc: MeanStd,
    pub vbar: MeanStd,
    /// Mean initial variance (`sigma0^2`, or the realised He-normal `vbar`).
    pub init_variance: f64,
    pub num_params: usize,
}

impl RunSummary {
    pub fn final_vbar_mean(&self) -> f64 {
        self.vbar.last_mean()
    }

    /// Final `vbar` over the initial variance.
    pub fn ratio(&self) -> f64 {
        self.final_vbar_mean() / self.init_variance
    }
}

/// Aggregates records that share a snapshot schedule and initialization.
pub fn aggregate_runs(records: &[RunRecord]) -> Result<RunSummary> {
    let refs: Vec<&RunRecord> = records.iter().collect();
    aggregate_refs(&refs)
}

pub fn aggregate_refs(records: &[&RunRecord]) -> Result<RunSummary> {
    let first = *records
        .first()
        .ok_or_else(|| Error::invalid("cannot aggregate zero runs"))?;
    let epochs: Vec<usize> = first.snapshots.iter().map(|s| s.epoch).collect();
    for r in &records[1..] {
        let same_schedule = r.snapshots.len() == epochs.len()
            && r.snapshots.iter().zip(&epochs).all(|(s, &e)| s.epoch == e);
        if !same_schedule {
            return Err(Error::invalid(format!(
                "run with seed {} has a different snapshot schedule",
                r.seed
            )));
        }
        if r.init_scheme != first.init_scheme || r.sigma0 != first.sigma0 {
            return Err(Error::invalid(
                "cannot aggregate runs with different initializations",
            ));
        }
    }
    let init_variance =
        records.iter().map(|r| r.init_variance()).sum::<f64>() / records.len() as f64;
    Ok(RunSummary {
        init_scheme: first.init_scheme,
        sigma0: first.sigma0,
        n_runs: records.len(),
        degenerate: records.len() == 1,
        epochs,
        train_loss: MeanStd::over(records, |s| s.train_loss),
        val_loss: MeanStd::over(records, |s| s.val_loss),
        val_acc: MeanStd::over(records, |s| s.val_acc),
        vbar: MeanStd::over(records, |s| s.vbar),
        init_variance,
        num_params: first.num_params,
    })
}

/// `final_vbar / sigma0^2`; equals 1 exactly at the optimal initialization.
pub fn steady_state_ratio(final_vbar: f64, sigma0_sq: f64) -> Result<f64> {
    if !(sigma0_sq > 0.0) {
        return Err(Error::invalid(format!(
            "sigma0^2 must be > 0, got {sigma0_sq}"
        )));
    }
    Ok(final_vbar / sigma0_sq)
}
