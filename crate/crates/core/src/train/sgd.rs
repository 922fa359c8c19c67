use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::surgery::Record;
use crate::tensor::{Real, Tensor};

/// SGD with momentum and L2 weight decay:
/// `v ← μ·v + g + λ·w`, `w ← w − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Update only classification heads.
    pub heads_only: bool,
    /// Momentum buffers by registry position.
    buffers: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            heads_only: false,
            buffers: Vec::new(),
        }
    }

    /// Applies one update to every trainable parameter holding a gradient,
    /// then clears all gradients. Parameters without a gradient are left
    /// untouched. Nothing is updated when any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        for (_, p) in store.iter() {
            if let Some(g) = &p.grad {
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of `{}`", p.name)));
                }
            }
        }
        self.buffers.resize(store.len(), None);
        let (mu, wd, lr) = (T::from_f64(self.momentum), T::from_f64(self.weight_decay), T::from_f64(lr));
        for (p, buf) in store.iter_mut().zip(&mut self.buffers) {
            if !p.trainable || (self.heads_only && !p.name.starts_with("head.")) {
                continue;
            }
            let Some(g) = &p.grad else { continue };
            let v = buf.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            for ((w, v), &g) in p.value.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *v = mu * *v + g + wd * *w;
                *w -= lr * *v;
            }
        }
        store.zero_grads();
        Ok(())
    }

    /// Momentum buffers named after their parameters, in registry order.
    pub fn state_records(&self, store: &ParamStore<T>) -> Vec<Record<T>> {
        store
            .iter()
            .zip(&self.buffers)
            .filter_map(|((_, p), b)| b.as_ref().map(|b| Record::new(p.name.clone(), b.clone())))
            .collect()
    }

    pub fn load_state(&mut self, store: &ParamStore<T>, records: &[Record<T>]) -> Result<()> {
        self.buffers = vec![None; store.len()];
        for r in records {
            let (id, p) = store
                .iter()
                .enumerate()
                .find(|(_, (_, p))| p.name == r.name)
                .map(|(i, (_, p))| (i, p))
                .ok_or_else(|| Error::UnknownTensor(r.name.clone()))?;
            if p.value.shape() != r.value.shape() {
                return Err(Error::ExtentMismatch {
                    name: r.name.clone(),
                    expected: p.value.shape().to_vec(),
                    found: r.value.shape().to_vec(),
                });
            }
            self.buffers[id] = Some(r.value.clone());
        }
        Ok(())
    }
}
