use super::network::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Loss-bearing frames per minibatch.
    pub minibatch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Minimum validation-loss improvement that keeps the learning rate.
    pub lr_halving_threshold: f64,
    /// Consecutive validation-loss increases that stop training.
    pub early_stop_patience: usize,
    /// Consecutive frames per training chunk.
    pub chunk_frames: usize,
    /// Cap on loss-bearing frames visited per epoch; `None` visits all.
    pub frames_per_epoch: Option<usize>,
    /// Minibatch gradients with a larger global L2 norm are rescaled to it.
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            minibatch_size: 128,
            epochs: 20,
            seed: 1,
            lr_halving_threshold: 1e-4,
            early_stop_patience: 3,
            chunk_frames: 32,
            frames_per_epoch: None,
            max_grad_norm: Some(5.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Invalid("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Invalid("momentum must be in [0, 1)".into()));
        }
        if self.minibatch_size == 0 || self.epochs == 0 || self.chunk_frames == 0 {
            return Err(Error::Invalid("minibatch_size, epochs and chunk_frames must be positive".into()));
        }
        if matches!(self.max_grad_norm, Some(n) if !(n > 0.0)) {
            return Err(Error::Invalid("max_grad_norm must be positive".into()));
        }
        if self.frames_per_epoch == Some(0) {
            return Err(Error::Invalid("frames_per_epoch must be positive".into()));
        }
        Ok(())
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before scaling.
pub fn clip_grad_norm(grads: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = grads
        .tensors()
        .flat_map(|t| t.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for t in grads.tensors_mut() {
            for g in t.data_mut() {
                *g *= s;
            }
        }
    }
    norm
}

/// Momentum SGD: `v <- momentum * v - lr * g; theta <- theta + v`.
pub fn sgd_step(params: &mut ParamStore, grads: &ParamStore, velocity: &mut ParamStore, lr: f64, momentum: f64) {
    for ((p, g), v) in params
        .tensors_mut()
        .zip(grads.tensors())
        .zip(velocity.tensors_mut())
    {
        for ((p, g), v) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *v = momentum * *v - lr * g;
            *p += *v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerSpec, NetworkSpec};

    fn one_fc() -> NetworkSpec {
        NetworkSpec {
            input_dim: 2,
            aux_dims: vec![],
            layers: vec![LayerSpec::FullyConnected { input: 2, output: 1 }],
            tap: 0,
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let spec = one_fc();
        let mut p = ParamStore::zeros(&spec);
        p.set(0, 1.5);
        let before = p.clone();
        let mut v = ParamStore::zeros(&spec);
        sgd_step(&mut p, &ParamStore::zeros(&spec), &mut v, 0.1, 0.9);
        assert_eq!(p, before);
    }

    #[test]
    fn momentum_zero_is_plain_descent() {
        let spec = one_fc();
        let mut p = ParamStore::zeros(&spec);
        let mut g = ParamStore::zeros(&spec);
        for i in 0..3 {
            p.set(i, i as f64);
            g.set(i, 1.0 - i as f64);
        }
        let mut v = ParamStore::zeros(&spec);
        sgd_step(&mut p, &g, &mut v, 0.5, 0.0);
        for i in 0..3 {
            assert_eq!(p.get(i), i as f64 - 0.5 * (1.0 - i as f64));
        }
    }

    #[test]
    fn quadratic_loss_decreases_below_threshold() {
        // f(theta) = 0.5 * sum c_i theta_i^2; plain GD is monotone iff lr < 2 / max c.
        let spec = one_fc();
        let c = [4.0, 1.0, 0.25];
        let loss = |p: &ParamStore| (0..3).map(|i| 0.5 * c[i] * p.get(i).powi(2)).sum::<f64>();
        for lr in [0.05, 0.2, 0.45] {
            let mut p = ParamStore::zeros(&spec);
            for i in 0..3 {
                p.set(i, 1.0 + i as f64);
            }
            let mut v = ParamStore::zeros(&spec);
            let mut prev = loss(&p);
            for _ in 0..50 {
                let mut g = ParamStore::zeros(&spec);
                for i in 0..3 {
                    g.set(i, c[i] * p.get(i));
                }
                sgd_step(&mut p, &g, &mut v, lr, 0.0);
                let now = loss(&p);
                assert!(now < prev, "lr {lr}: {now} !< {prev}");
                prev = now;
            }
        }
    }

    #[test]
    fn clipping_rescales_only_large_gradients() {
        let spec = one_fc();
        let mut g = ParamStore::zeros(&spec);
        g.set(0, 3.0);
        g.set(1, 4.0);
        assert_eq!(clip_grad_norm(&mut g, 10.0), 5.0);
        assert_eq!((g.get(0), g.get(1)), (3.0, 4.0));
        clip_grad_norm(&mut g, 1.0);
        assert!((g.get(0) - 0.6).abs() < 1e-15 && (g.get(1) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            momentum: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
