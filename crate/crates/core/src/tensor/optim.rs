use super::{ParamStore, Result, StoreId, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction, bound to one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    store: StoreId,
    step: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Adam {
            config,
            store: store.id(),
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.config.lr = lr;
    }

    /// One update of every parameter in `store` from its accumulated grad.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if store.is_frozen() {
            return Err(TensorError::FrozenParameter(
                store.iter().map(|p| p.name.clone()).collect(),
            ));
        }
        if store.id() != self.store || store.len() != self.first.len() {
            return Err(TensorError::InvalidArgument {
                op: "adam_step",
                reason: "optimizer state belongs to a different parameter store".into(),
            });
        }
        let missing: Vec<String> = store
            .iter()
            .filter(|p| p.grad.is_none())
            .map(|p| p.name.clone())
            .collect();
        if !missing.is_empty() {
            return Err(TensorError::MissingGrads(missing));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - (beta1 as f64).powi(self.step as i32);
        let bc2 = 1.0 - (beta2 as f64).powi(self.step as i32);
        for ((p, m), v) in store
            .params_mut()
            .iter_mut()
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            let grad = p.grad.as_ref().expect("checked above");
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m as f64 / bc1;
                let v_hat = *v as f64 / bc2;
                *w -= (lr as f64 * m_hat / (v_hat.sqrt() + eps as f64)) as f32;
            }
        }
        Ok(())
    }
}

/// Geometric interpolation from `lr_start` at step 0 to `lr_end` at
/// `total_steps`.
pub fn exp_lr_schedule(step: usize, total_steps: usize, lr_start: f64, lr_end: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(TensorError::InvalidArgument {
            op: "exp_lr_schedule",
            reason: "total_steps must be positive".into(),
        });
    }
    if step > total_steps {
        return Err(TensorError::InvalidArgument {
            op: "exp_lr_schedule",
            reason: format!("step {step} beyond total {total_steps}"),
        });
    }
    if step == total_steps {
        return Ok(lr_end);
    }
    let frac = step as f64 / total_steps as f64;
    Ok(lr_start * (lr_end / lr_start).powf(frac))
}

/// Rescales all gradients in `stores` so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(stores: &mut [&mut ParamStore], max_norm: f32) -> f32 {
    let sq: f64 = stores
        .iter()
        .flat_map(|s| s.iter())
        .filter_map(|p| p.grad.as_ref())
        .flat_map(|g| g.data().iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum();
    let norm = sq.sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let factor = max_norm / norm;
        for s in stores.iter_mut() {
            for p in s.params_mut() {
                if let Some(g) = &mut p.grad {
                    g.data_mut().iter_mut().for_each(|v| *v *= factor);
                }
            }
        }
    }
    norm
}
