use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};

/// Per-parameter Adam moments with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    /// Fresh state for parameters of the given shapes; β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    pub fn new<'a>(lr: f64, shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let first: Vec<Tensor<T>> = shapes.into_iter().map(Tensor::zeros).collect();
        AdamState {
            lr: T::from_f64(lr),
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
            step: 0,
            second: first.clone(),
            first,
        }
    }
}

/// One Adam update of `params` in place.
pub fn adam_step<T: Real>(params: &mut [Tensor<T>], grads: &[Tensor<T>], state: &mut AdamState<T>) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::shape(&[params.len()], &[grads.len(), state.first.len()], "adam parameter count"));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.first) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::shape(p.shape(), g.shape(), "adam parameter/gradient"));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let one = T::one();
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = one - b1.powi(t);
    let c2 = one - b2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(state.first.iter_mut()).zip(state.second.iter_mut()) {
        for (((pv, &gv), mv), vv) in
            p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut()).zip(v.data_mut().iter_mut())
        {
            *mv = b1 * *mv + (one - b1) * gv;
            *vv = b2 * *vv + (one - b2) * gv * gv;
            let m_hat = *mv / c1;
            let v_hat = *vv / c2;
            *pv = *pv - state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![Tensor::<f64>::new(vec![2], vec![1.0, -2.0]).unwrap()];
        let g = vec![Tensor::zeros(&[2])];
        let mut s = AdamState::new(1e-4, p.iter().map(|t| t.shape()));
        adam_step(&mut p, &g, &mut s).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = vec![Tensor::<f64>::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap()];
        let g = vec![Tensor::new(vec![3], vec![0.3, -5.0, 1e-3]).unwrap()];
        let mut s = AdamState::new(1e-4, p.iter().map(|t| t.shape()));
        adam_step(&mut p, &g, &mut s).unwrap();
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε).
        for (pv, gv) in p[0].data().iter().zip(g[0].data()) {
            let expected = -1e-4 * gv / (gv.abs() + 1e-8);
            assert!((pv - expected).abs() < 1e-15, "{pv} vs {expected}");
        }
    }

    #[test]
    fn converges_on_quadratic_bowl() {
        let mut p = vec![Tensor::<f64>::new(vec![4], vec![1.0, -0.5, 0.25, 2.0]).unwrap()];
        let mut s = AdamState::new(1e-2, p.iter().map(|t| t.shape()));
        for _ in 0..2000 {
            // ∇‖w‖² = 2w
            let g = vec![Tensor::new(vec![4], p[0].data().iter().map(|w| 2.0 * w).collect()).unwrap()];
            adam_step(&mut p, &g, &mut s).unwrap();
        }
        let norm = p[0].data().iter().map(|w| w * w).sum::<f64>().sqrt();
        assert!(norm < 1e-3, "‖w‖ = {norm}");
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = vec![Tensor::<f32>::zeros(&[2])];
        let g = vec![Tensor::zeros(&[3])];
        let mut s = AdamState::new(1e-4, p.iter().map(|t| t.shape()));
        assert!(adam_step(&mut p, &g, &mut s).is_err());
    }
}
