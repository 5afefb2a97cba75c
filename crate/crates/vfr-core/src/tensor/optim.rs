//! Trainable parameter storage and the Adam update.

use super::{Result, Tensor, TensorError};

/// Index of a parameter group inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// One trainable tensor with its Adam moment buffers.
#[derive(Debug, Clone)]
pub struct ParamState {
    pub name: String,
    /// Parameter values; carries the gradient slot.
    pub value: Tensor,
    /// First-moment estimate, same shape as `value`.
    pub m: Tensor,
    /// Second-moment estimate, same shape as `value`; entries stay >= 0.
    pub v: Tensor,
    /// Optimizer step counter; increments by exactly 1 per step.
    pub t: u64,
}

/// Flat registry of all trainable parameters of a model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<ParamState>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut value: Tensor) -> ParamId {
        value.set_requires_grad(true);
        let shape = value.shape().to_vec();
        self.params.push(ParamState {
            name: name.into(),
            value,
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
            t: 0,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &ParamState {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamState {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamState> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamState> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.value.zero_grad();
        }
    }

    /// Total number of scalars the optimizer updates.
    pub fn trainable_scalars(&self) -> u64 {
        self.params.iter().map(|p| p.value.numel() as u64).sum()
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, delta: &[f32]) {
        self.params[id.0].value.accumulate_grad(delta);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamConfig {
    pub fn with_lr(lr: f32) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One Adam step with bias correction over every parameter group, reading
/// the accumulated gradient slots. Rejects the whole step (no partial
/// updates) if any group holds a non-finite gradient; a zero gradient
/// leaves values unchanged but still advances `t`.
///
/// Returns the number of scalars updated.
pub fn adam_step(store: &mut ParamStore, cfg: &AdamConfig) -> Result<u64> {
    if cfg.lr <= 0.0 {
        return Err(TensorError::InvalidArgument {
            op: "adam_step",
            detail: format!("learning rate must be > 0, got {}", cfg.lr),
        });
    }
    for p in store.iter() {
        let grad = p.value.grad().unwrap_or(&[]);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(TensorError::NonFiniteGradient { name: p.name.clone() });
        }
    }
    let mut updated = 0u64;
    for p in store.iter_mut() {
        p.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(p.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(p.t as i32);
        let n = p.value.numel();
        let grad = p.value.grad().expect("params always carry grad slots").to_vec();
        let values = p.value.data_mut();
        let (ms, vs) = (p.m.data_mut(), p.v.data_mut());
        for i in 0..n {
            let g = grad[i];
            ms[i] = cfg.beta1 * ms[i] + (1.0 - cfg.beta1) * g;
            vs[i] = cfg.beta2 * vs[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = ms[i] / bc1;
            let v_hat = vs[i] / bc2;
            values[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        updated += n as u64;
    }
    Ok(updated)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, values: &[f32]) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add(name, Tensor::new(vec![values.len()], values.to_vec()).unwrap());
        (store, id)
    }

    #[test]
    fn first_step_moves_lr_against_gradient_sign() {
        // With a constant gradient g, the bias-corrected first step is
        // -lr * g / (|g| + eps'), i.e. magnitude ~= lr, direction -sign(g).
        let (mut store, id) = store_with("w", &[1.0, -2.0]);
        store.get_mut(id).value.accumulate_grad(&[0.5, -3.0]);
        let updated = adam_step(&mut store, &AdamConfig::with_lr(0.01)).unwrap();
        assert_eq!(updated, 2);
        let v = store.get(id).value.data();
        assert!((v[0] - (1.0 - 0.01)).abs() < 1e-5, "got {}", v[0]);
        assert!((v[1] - (-2.0 + 0.01)).abs() < 1e-5, "got {}", v[1]);
        assert_eq!(store.get(id).t, 1);
    }

    #[test]
    fn zero_gradient_leaves_value_but_increments_t() {
        let (mut store, id) = store_with("w", &[3.0]);
        adam_step(&mut store, &AdamConfig::with_lr(0.1)).unwrap();
        assert_eq!(store.get(id).value.data(), &[3.0]);
        assert_eq!(store.get(id).t, 1);
    }

    #[test]
    fn two_steps_with_constant_gradient_are_reproducible() {
        let run = || {
            let (mut store, id) = store_with("w", &[1.0, 2.0, 3.0]);
            for _ in 0..2 {
                store.zero_grads();
                store.get_mut(id).value.accumulate_grad(&[0.3, -0.7, 1.1]);
                adam_step(&mut store, &AdamConfig::with_lr(0.05)).unwrap();
            }
            store.get(id).value.data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_rejects_step_without_updates() {
        let (mut store, id) = store_with("w", &[1.0]);
        store.get_mut(id).value.accumulate_grad(&[f32::NAN]);
        let err = adam_step(&mut store, &AdamConfig::with_lr(0.1)).unwrap_err();
        assert!(matches!(err, TensorError::NonFiniteGradient { ref name } if name == "w"));
        assert_eq!(store.get(id).value.data(), &[1.0]);
        assert_eq!(store.get(id).t, 0);
    }

    #[test]
    fn second_moment_stays_nonnegative() {
        let (mut store, id) = store_with("w", &[0.5; 8]);
        for step in 0..5 {
            store.zero_grads();
            let g: Vec<f32> = (0..8).map(|i| ((i + step) as f32 - 4.0) * 0.3).collect();
            store.get_mut(id).value.accumulate_grad(&g);
            adam_step(&mut store, &AdamConfig::with_lr(0.01)).unwrap();
            assert!(store.get(id).v.data().iter().all(|&v| v >= 0.0));
        }
    }
}
