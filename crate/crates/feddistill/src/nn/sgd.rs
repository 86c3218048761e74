//! SGD with classical momentum and coupled weight decay:
//! v <- momentum * v + grad + weight_decay * theta; theta <- theta - lr * v.

use super::model::ModelParams;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub struct SgdState {
    lr: Scalar,
    momentum: Scalar,
    weight_decay: Scalar,
    velocity: Vec<Tensor>,
}

impl SgdState {
    pub fn new(lr: Scalar, momentum: Scalar, weight_decay: Scalar, model: &ModelParams) -> Self {
        assert!(lr > 0.0, "learning rate must be positive");
        assert!((0.0..1.0).contains(&momentum), "momentum must lie in [0, 1)");
        assert!(weight_decay >= 0.0, "weight decay must be non-negative");
        let velocity = model
            .param_tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape().to_vec()))
            .collect();
        Self { lr, momentum, weight_decay, velocity }
    }

    /// One update over all parameters. `grads` aligns with
    /// `ModelParams::param_tensors`; `None` entries contribute zero gradient.
    pub fn step(&mut self, model: &mut ModelParams, grads: &[Option<&Tensor>]) {
        let mut params = model.param_tensors_mut();
        assert_eq!(params.len(), grads.len(), "gradient count mismatch");
        assert_eq!(params.len(), self.velocity.len(), "optimizer bound to a different model");
        for ((param, grad), vel) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if let Some(g) = grad {
                assert_eq!(g.shape(), param.shape(), "gradient shape mismatch");
            }
            let pd = param.data_mut();
            let vd = vel.data_mut();
            for i in 0..pd.len() {
                let g = grad.map_or(0.0, |g| g.data()[i]);
                vd[i] = self.momentum * vd[i] + g + self.weight_decay * pd[i];
                pd[i] -= self.lr * vd[i];
            }
        }
    }
}
