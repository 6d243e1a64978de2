use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::error::{Error, Result};
use crate::model::{cgnn_forward, ModelConfig, ModelWeights};
use crate::types::{apply_displacement, norm3, sub3, DisplacementField, Sample};

/// Per-sample test record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub location: usize,
    pub direction: usize,
    pub t_in: usize,
    pub t_out: usize,
    /// Mean per-point error in mm.
    pub mean_ld: f64,
    /// Largest per-point error in mm.
    pub max_ld: f64,
    pub force_true: f64,
    pub force_pred: f64,
    pub force_abs_error: f64,
    pub force_sq_error: f64,
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Summary {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Summary { mean: f64::NAN, std: f64::NAN };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Summary { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub num_samples: usize,
    pub force_mse: Summary,
    pub force_abs: Summary,
    pub mean_ld: Summary,
    /// Statistics of the per-sample maximum point error.
    pub max_ld: Summary,
    pub samples: Vec<SampleRecord>,
}

impl Metrics {
    fn from_records(samples: Vec<SampleRecord>) -> Metrics {
        Metrics {
            num_samples: samples.len(),
            force_mse: Summary::of(samples.iter().map(|r| r.force_sq_error)),
            force_abs: Summary::of(samples.iter().map(|r| r.force_abs_error)),
            mean_ld: Summary::of(samples.iter().map(|r| r.mean_ld)),
            max_ld: Summary::of(samples.iter().map(|r| r.max_ld)),
            samples,
        }
    }
}

fn record(sample: &Sample, displacement: &DisplacementField, force_pred: f64) -> Result<SampleRecord> {
    let y_hat = apply_displacement(&sample.input, displacement)?;
    let y = sample.target_cloud();
    let mut sum = 0.0;
    let mut max: f64 = 0.0;
    for (p, q) in y_hat.points().iter().zip(y.points()) {
        let e = norm3(sub3(*p, *q));
        sum += e;
        max = max.max(e);
    }
    let err = force_pred - sample.target_force_change;
    Ok(SampleRecord {
        location: sample.meta.location,
        direction: sample.meta.direction,
        t_in: sample.meta.t_in,
        t_out: sample.meta.t_out,
        mean_ld: sum / y.len() as f64,
        max_ld: max,
        force_true: sample.target_force_change,
        force_pred,
        force_abs_error: err.abs(),
        force_sq_error: err * err,
    })
}

/// Runs the model on every sample and aggregates the errors.
pub fn evaluate<T: Real>(samples: &[Sample], weights: &ModelWeights<T>, config: &ModelConfig) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let records = samples
        .par_iter()
        .map(|s| {
            let (dx, df) = cgnn_forward(&s.input, &s.condition, weights, config)?;
            record(s, &dx, df)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Metrics::from_records(records))
}

/// Baseline that predicts no motion and no force change, so its metrics are
/// the dataset's own displacement and force statistics.
pub fn evaluate_identity(samples: &[Sample]) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let records = samples
        .iter()
        .map(|s| record(s, &DisplacementField::zeros(s.input.len()), 0.0))
        .collect::<Result<Vec<_>>>()?;
    Ok(Metrics::from_records(records))
}
