use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{cgnn_forward_on_tape, ModelConfig};
use crate::types::Sample;

/// Mean Euclidean distance between the rows of `y` and `y_hat`, both `[N, 3]`.
pub fn loss_distance<T: Real>(tape: &mut Tape<T>, y: Var, y_hat: Var) -> Result<Var> {
    if tape.shape(y) != tape.shape(y_hat) {
        return Err(Error::shape(tape.shape(y), tape.shape(y_hat), "loss_distance"));
    }
    let diff = tape.sub(y_hat, y)?;
    let norms = tape.sqrt_sum_rows(diff)?;
    tape.reduce_mean(norms, None)
}

/// `alpha · distance + (force_pred − force_true)²`.
pub fn loss_total<T: Real>(tape: &mut Tape<T>, distance: Var, force_true: Var, force_pred: Var, alpha: f64) -> Result<Var> {
    let err = tape.sub(force_pred, force_true)?;
    let sq = tape.square(err);
    let lf = tape.reduce_mean(sq, None)?;
    let ld = tape.scale(distance, T::from_f64(alpha));
    tape.add(ld, lf)
}

/// Handles for one sample's forward pass and loss terms.
#[derive(Debug, Clone, Copy)]
pub struct SampleLoss {
    pub total: Var,
    pub distance: Var,
    /// Per-point error `‖y_n − ŷ_n‖`, `[N, 1]`.
    pub point_errors: Var,
    pub force_pred: Var,
}

/// Records the model and the total loss for `sample` on `tape`.
pub fn sample_loss_on_tape<T: Real>(
    tape: &mut Tape<T>,
    params: &[Var],
    sample: &Sample,
    config: &ModelConfig,
    alpha: f64,
) -> Result<SampleLoss> {
    let out = cgnn_forward_on_tape(tape, params, &sample.input, &sample.condition, config)?;
    let n = sample.input.len();
    let x: Vec<f64> = sample.input.points().iter().flatten().copied().collect();
    let y: Vec<f64> = sample.target_cloud().points().iter().flatten().copied().collect();
    let x = tape.constant(Tensor::from_f64(vec![n, 3], &x)?);
    let y = tape.constant(Tensor::from_f64(vec![n, 3], &y)?);
    let y_hat = tape.add(x, out.displacement)?;
    let diff = tape.sub(y_hat, y)?;
    let point_errors = tape.sqrt_sum_rows(diff)?;
    let distance = tape.reduce_mean(point_errors, None)?;
    let f = tape.constant(Tensor::from_f64(vec![1, 1], &[sample.target_force_change])?);
    let total = loss_total(tape, distance, f, out.force, alpha)?;
    Ok(SampleLoss { total, distance, point_errors, force_pred: out.force })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud_var(tape: &mut Tape<f64>, rows: &[[f64; 3]], param: bool) -> Var {
        let t = Tensor::new(vec![rows.len(), 3], rows.iter().flatten().copied().collect()).unwrap();
        if param {
            tape.param(t)
        } else {
            tape.constant(t)
        }
    }

    #[test]
    fn distance_examples() {
        let mut tape = Tape::new();
        let y = cloud_var(&mut tape, &[[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]], false);
        let l = loss_distance(&mut tape, y, y).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let a = cloud_var(&mut tape, &[[0.0, 0.0, 0.0]], false);
        let b = cloud_var(&mut tape, &[[0.0, 0.0, 2.0]], false);
        let l = loss_distance(&mut tape, a, b).unwrap();
        assert_eq!(tape.value(l).item(), 2.0);
        assert!(loss_distance(&mut tape, y, a).is_err());
    }

    #[test]
    fn distance_gradient_is_scaled_unit_vectors() {
        let y_rows = [[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]];
        let yh_rows = [[3.0, 0.0, 4.0], [1.0, 2.0, 1.0]];
        let mut tape = Tape::new();
        let y = cloud_var(&mut tape, &y_rows, false);
        let yh = cloud_var(&mut tape, &yh_rows, true);
        let l = loss_distance(&mut tape, y, yh).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(yh).unwrap().data().to_vec();
        let expected = [0.6 / 2.0, 0.0, 0.8 / 2.0, 0.0, 0.5, 0.0];
        for (a, b) in g.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        // Central differences on the same function.
        let h = 1e-6;
        for idx in 0..6 {
            let eval = |delta: f64| {
                let mut t = Tape::new();
                let y = cloud_var(&mut t, &y_rows, false);
                let mut rows = yh_rows;
                rows[idx / 3][idx % 3] += delta;
                let yh = cloud_var(&mut t, &rows, false);
                let l = loss_distance(&mut t, y, yh).unwrap();
                t.value(l).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!((fd - g[idx]).abs() < 1e-8, "component {idx}: fd {fd} vs {}", g[idx]);
        }
    }

    #[test]
    fn total_loss_weighting() {
        let mut tape = Tape::<f64>::new();
        let one_mm = tape.constant(Tensor::scalar(1.0));
        let f = tape.constant(Tensor::new(vec![1, 1], vec![2.0]).unwrap());
        let l = loss_total(&mut tape, one_mm, f, f, 88.0).unwrap();
        assert_eq!(tape.value(l).item(), 88.0);

        let zero = tape.constant(Tensor::scalar(0.0));
        let ft = tape.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let fp = tape.constant(Tensor::new(vec![1, 1], vec![1.5]).unwrap());
        let l = loss_total(&mut tape, zero, ft, fp, 88.0).unwrap();
        assert_eq!(tape.value(l).item(), 0.25);
        let l = loss_total(&mut tape, zero, ft, ft, 88.0).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }
}
