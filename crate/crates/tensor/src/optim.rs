//! RMSprop with momentum, gradient clipping and weight decay.

use crate::param::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct RmsProp {
    pub lr: f64,
    /// Learning-rate decay: `lr_t = lr / (1 + decay·t)`.
    pub decay: f64,
    pub momentum: f64,
    pub rho: f64,
    pub eps: f64,
    /// Steps taken so far.
    pub t: u64,
}

impl RmsProp {
    pub fn new(lr: f64, decay: f64, momentum: f64, rho: f64, eps: f64) -> Self {
        RmsProp {
            lr,
            decay,
            momentum,
            rho,
            eps,
            t: 0,
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.lr / (1.0 + self.decay * self.t as f64)
    }

    /// One update of every non-frozen parameter; gradient buffers are
    /// cleared afterwards, frozen ones included.
    pub fn step(&mut self, store: &mut ParamStore) {
        let lr_t = self.current_lr();
        for p in store.params_mut() {
            if !p.frozen {
                let g = p.grad.data();
                let cache = p.cache.data_mut();
                for (c, gi) in cache.iter_mut().zip(g) {
                    *c = self.rho * *c + (1.0 - self.rho) * gi * gi;
                }
                let cache = p.cache.data();
                let mom = p.momentum.data_mut();
                for ((m, gi), c) in mom.iter_mut().zip(g).zip(cache) {
                    *m = self.momentum * *m - lr_t * gi / (c.sqrt() + self.eps);
                }
                let mom = p.momentum.data();
                for (v, m) in p.value.data_mut().iter_mut().zip(mom) {
                    *v += m;
                }
            }
            p.grad.data_mut().fill(0.0);
        }
        self.t += 1;
    }
}

/// Global L2 norm over the gradients of non-frozen parameters.
pub fn grad_norm(store: &ParamStore) -> f64 {
    store
        .params()
        .iter()
        .filter(|p| !p.frozen)
        .flat_map(|p| p.grad.data())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients when their global norm exceeds `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(store: &mut ParamStore, max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let norm = grad_norm(store);
    if norm > max_norm {
        let s = max_norm / norm;
        for p in store.params_mut().iter_mut().filter(|p| !p.frozen) {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Adds `weight · θ` to the gradient of each listed group.
pub fn apply_weight_decay(store: &mut ParamStore, weight: f64, groups: &[u32]) {
    if weight == 0.0 {
        return;
    }
    for p in store.params_mut() {
        if !p.frozen && groups.contains(&p.group) {
            let v = p.value.data().to_vec();
            for (g, v) in p.grad.data_mut().iter_mut().zip(v) {
                *g += weight * v;
            }
        }
    }
}
