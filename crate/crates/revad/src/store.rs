//! Parameter storage and the Adam optimizer.

use ndarray::Array1;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::Arr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

pub struct Param {
    pub name: String,
    pub value: Arr,
    /// Gradient and optimizer moments are allocated on first use, so
    /// forward-only graphs pay for values alone.
    grad: Option<Arr>,
    adam_m: Option<Arr>,
    adam_v: Option<Arr>,
}

/// Named trainable tensors with their gradient and optimizer state.
#[derive(Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Arr) -> ParamId {
        self.params.push(Param { name: name.into(), value, grad: None, adam_m: None, adam_v: None });
        ParamId(self.params.len() - 1)
    }

    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Array1<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, data.into_shape_with_order(ndarray::IxDyn(shape)).unwrap())
    }

    pub fn value(&self, id: ParamId) -> &Arr {
        &self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Arr) {
        assert_eq!(self.params[id.0].value.shape(), value.shape(), "param shape change");
        self.params[id.0].value = value;
    }

    /// Accumulated gradient; zeros if nothing has flowed into it yet.
    pub fn grad(&self, id: ParamId) -> Arr {
        match &self.params[id.0].grad {
            Some(g) => g.clone(),
            None => Arr::zeros(self.params[id.0].value.raw_dim()),
        }
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_elements(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|id| self.params[id.0].value.len()).sum()
    }

    pub(crate) fn add_grad(&mut self, id: ParamId, g: &Arr) {
        let p = &mut self.params[id.0];
        match &mut p.grad {
            Some(acc) => *acc += g,
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn zero_grad(&mut self, ids: &[ParamId]) {
        for id in ids {
            if let Some(g) = &mut self.params[id.0].grad {
                g.fill(0.0);
            }
        }
    }

    pub fn zero_grad_all(&mut self) {
        for p in &mut self.params {
            if let Some(g) = &mut p.grad {
                g.fill(0.0);
            }
        }
    }

    /// True if any gradient entry in `ids` is nonzero.
    pub fn any_grad_nonzero(&self, ids: &[ParamId]) -> bool {
        ids.iter().any(|id| {
            self.params[id.0]
                .grad
                .as_ref()
                .is_some_and(|g| g.iter().any(|&v| v != 0.0))
        })
    }
}

/// Adam with the usual bias correction. One instance owns one disjoint
/// parameter subset (e.g. generator vs. discriminators) so step counts stay
/// coherent.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0 }
    }

    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for id in ids {
            let p = &mut store.params[id.0];
            let Some(grad) = &p.grad else { continue };
            let m = p
                .adam_m
                .get_or_insert_with(|| Arr::zeros(p.value.raw_dim()));
            ndarray::Zip::from(&mut *m).and(grad).for_each(|m, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            });
            let v = p
                .adam_v
                .get_or_insert_with(|| Arr::zeros(p.value.raw_dim()));
            ndarray::Zip::from(&mut *v).and(grad).for_each(|v, &g| {
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            });
            let (m, v) = (p.adam_m.as_ref().unwrap(), p.adam_v.as_ref().unwrap());
            ndarray::Zip::from(&mut p.value).and(m).and(v).for_each(|w, &m, &v| {
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            });
        }
    }
}
