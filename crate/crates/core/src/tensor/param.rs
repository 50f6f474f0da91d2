use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{Checkpoint, Gradients, Result, Tensor, TensorError};

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

/// Identity of a [`ParamStore`]; tapes use it to route gradients home.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StoreId(u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Named parameters of one model component. A store is either trainable or
/// frozen as a whole; frozen stores enter tapes as constants and refuse
/// optimizer updates.
#[derive(Debug)]
pub struct ParamStore {
    id: StoreId,
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
    frozen: bool,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        ParamStore {
            id: StoreId(NEXT_STORE.fetch_add(1, Ordering::Relaxed)),
            params: self.params.clone(),
            by_name: self.by_name.clone(),
            frozen: self.frozen,
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            id: StoreId(NEXT_STORE.fetch_add(1, Ordering::Relaxed)),
            params: Vec::new(),
            by_name: HashMap::new(),
            frozen: false,
        }
    }

    pub fn id(&self) -> StoreId {
        self.id
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::DuplicateName(name));
        }
        let idx = self.params.len();
        self.by_name.insert(name.clone(), idx);
        self.params.push(Parameter {
            name,
            value,
            grad: None,
        });
        Ok(ParamId(idx))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds the gradients a backward pass produced for this store's
    /// parameters. Parameters that were not reachable keep their grads.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (param, grad) in grads.param_grads(self.id) {
            let slot = &mut self.params[param.0];
            match &mut slot.grad {
                Some(existing) => {
                    for (e, g) in existing.data_mut().iter_mut().zip(grad.data()) {
                        *e += g;
                    }
                }
                None => slot.grad = Some(grad.clone()),
            }
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            entries: self
                .params
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    /// Overwrites parameter values from a checkpoint. Every parameter must be
    /// present with its exact shape; extra entries are rejected.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.entries.len() != self.params.len() {
            return Err(TensorError::Checkpoint(format!(
                "expected {} parameters, checkpoint has {}",
                self.params.len(),
                ckpt.entries.len()
            )));
        }
        for (name, value) in &ckpt.entries {
            let idx = *self
                .by_name
                .get(name)
                .ok_or_else(|| TensorError::Checkpoint(format!("unknown parameter {name:?}")))?;
            let slot = &mut self.params[idx];
            if slot.value.shape() != value.shape() {
                return Err(TensorError::Checkpoint(format!(
                    "{name}: shape {:?} does not match {:?}",
                    value.shape(),
                    slot.value.shape()
                )));
            }
            slot.value = value.clone();
        }
        Ok(())
    }
}
