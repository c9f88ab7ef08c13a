use crate::autograd::Gradients;
use crate::params::{group_of, ModelParams, ParamNodes};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v = momentum * v + (grad + decay * w)`, `w -= lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Rescale the full gradient to at most this L2 norm; 0 disables.
    pub clip_norm: f64,
    pub velocity: ModelParams<T>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self { lr, momentum, weight_decay, clip_norm: 0.0, velocity: ModelParams::default() }
    }

    /// Global L2 norm of the gradients of trainable parameters.
    pub fn grad_norm(params: &ModelParams<T>, grads: &Gradients<T>, nodes: &ParamNodes) -> f64 {
        params
            .names()
            .filter_map(|n| nodes.opt(n).and_then(|id| grads.get(id)))
            .flat_map(|g| g.data().iter().map(|v| v.as_f64() * v.as_f64()))
            .sum::<f64>()
            .sqrt()
    }

    /// Update every parameter that has a gradient and is not in `frozen`.
    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &Gradients<T>, nodes: &ParamNodes, frozen: &[&str]) {
        let scale = if self.clip_norm > 0.0 {
            let norm = Self::grad_norm(params, grads, nodes);
            if norm > self.clip_norm { self.clip_norm / norm } else { 1.0 }
        } else {
            1.0
        };
        let (lr, mu, wd, scale) = (T::of(self.lr), T::of(self.momentum), T::of(self.weight_decay), T::of(scale));
        for (name, w) in params.iter_mut() {
            if frozen.contains(&group_of(name)) {
                continue;
            }
            let Some(g) = nodes.opt(name).and_then(|id| grads.get(id)) else { continue };
            if self.velocity.get(name).is_none() {
                self.velocity
                    .insert(name.to_string(), Tensor::zeros(w.shape()))
                    .expect("velocity names mirror parameter names");
            }
            let v = self.velocity.get_mut(name).expect("just inserted");
            for ((wv, vv), &gv) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = mu * *vv + (gv * scale + wd * *wv);
                *wv -= lr * *vv;
            }
        }
    }
}
