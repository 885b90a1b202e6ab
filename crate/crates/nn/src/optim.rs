use ndarray::{ArrayD, Zip};

use crate::param::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupConfig {
    pub lr: f64,
    pub weight_decay: f64,
}

/// AdamW with parameter groups. Parameters mapped to no group are left
/// untouched (frozen). Weight decay is decoupled and only applies to
/// tensors with two or more axes.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    groups: Vec<GroupConfig>,
    assign: Vec<Option<usize>>,
    m: Vec<ArrayD<f32>>,
    v: Vec<ArrayD<f32>>,
    t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, groups: Vec<GroupConfig>, assign: impl Fn(&str) -> Option<usize>) -> Self {
        let assign: Vec<Option<usize>> = store.params().iter().map(|p| assign(&p.name)).collect();
        assert!(
            assign.iter().flatten().all(|&g| g < groups.len()),
            "parameter assigned to a missing group"
        );
        let zeros = |i: usize, p: &crate::param::Param| {
            if assign[i].is_some() {
                ArrayD::zeros(p.value.raw_dim())
            } else {
                ArrayD::zeros(ndarray::IxDyn(&[0]))
            }
        };
        let m = store.params().iter().enumerate().map(|(i, p)| zeros(i, p)).collect();
        let v = store.params().iter().enumerate().map(|(i, p)| zeros(i, p)).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, groups, assign, m, v, t: 0 }
    }

    /// Single group holding every parameter.
    pub fn single(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        Self::new(store, vec![GroupConfig { lr, weight_decay }], |_| Some(0))
    }

    pub fn set_lr(&mut self, group: usize, lr: f64) {
        self.groups[group].lr = lr;
    }

    pub fn groups(&self) -> &[GroupConfig] {
        &self.groups
    }

    pub fn is_trainable(&self, index: usize) -> bool {
        self.assign[index].is_some()
    }

    pub fn trainable_count(&self) -> usize {
        self.assign.iter().filter(|a| a.is_some()).count()
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (self.beta1 as f32, self.beta2 as f32, self.eps as f32);
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            let Some(g) = self.assign[i] else { continue };
            let GroupConfig { lr, weight_decay } = self.groups[g];
            if p.value.ndim() >= 2 && weight_decay > 0.0 {
                let keep = (1.0 - lr * weight_decay) as f32;
                p.value.mapv_inplace(|w| w * keep);
            }
            let step = (lr / bc1) as f32;
            let bc2s = bc2.sqrt() as f32;
            Zip::from(&mut p.value)
                .and(&p.grad)
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .for_each(|w, &gr, m, v| {
                    *m = b1 * *m + (1.0 - b1) * gr;
                    *v = b2 * *v + (1.0 - b2) * gr * gr;
                    *w -= step * *m / (v.sqrt() / bc2s + eps);
                });
        }
    }
}

/// Rescales all gradients so their joint norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm && norm > 0.0 {
        let scale = (max_norm / norm) as f32;
        for p in store.params_mut() {
            p.grad.mapv_inplace(|g| g * scale);
        }
    }
    norm
}
