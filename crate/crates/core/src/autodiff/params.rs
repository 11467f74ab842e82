use std::cell::RefCell;
use std::collections::BTreeMap;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct Parameter<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named parameters in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real> {
    params: Vec<Parameter<T>>,
    by_name: BTreeMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            value,
            grad,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Mark every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable;
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    pub fn accumulate(&mut self, grads: &ParamGrads<T>) {
        for (id, g) in &grads.grads {
            self.params[id.0].grad.add_assign(g);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .flat_map(|p| p.grad.data().iter())
            .map(|g| g.f64() * g.f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Replace a parameter value keeping its shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape(
                "set_value",
                format!("{}: {:?} vs {:?}", p.name, p.value.shape(), value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Binds parameters of a store into one graph, lazily, once per parameter.
pub struct Session<'g, 's, T: Real> {
    pub graph: &'g Graph<T>,
    store: &'s ParamStore<T>,
    bound: RefCell<Vec<Option<Var<'g, T>>>>,
    frozen: bool,
}

impl<'g, 's, T: Real> Session<'g, 's, T> {
    pub fn new(graph: &'g Graph<T>, store: &'s ParamStore<T>) -> Self {
        Self {
            graph,
            store,
            bound: RefCell::new(vec![None; store.len()]),
            frozen: false,
        }
    }

    /// A session that binds every parameter as a constant, so no backward
    /// closures are recorded.
    pub fn inference(graph: &'g Graph<T>, store: &'s ParamStore<T>) -> Self {
        Self {
            frozen: true,
            ..Self::new(graph, store)
        }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    /// The graph node for parameter `id`. Frozen parameters are constants.
    pub fn p(&self, id: ParamId) -> Var<'g, T> {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = if p.trainable && !self.frozen {
            self.graph.leaf(p.value.clone())
        } else {
            self.graph.constant(p.value.clone())
        };
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<'g, T> {
        self.graph.constant(t)
    }

    /// Backpropagate `loss` and collect gradients of the bound trainable
    /// parameters.
    pub fn backward(&self, loss: Var<'g, T>) -> Result<ParamGrads<T>> {
        let mut grads = self.graph.backward(loss)?;
        let mut out = Vec::new();
        for (i, v) in self.bound.borrow().iter().enumerate() {
            if let Some(v) = v {
                if v.needs_grad() {
                    let g = grads.take(v.id()).unwrap_or_else(|| Tensor::zeros(&v.shape()));
                    out.push((ParamId(i), g));
                }
            }
        }
        Ok(ParamGrads {
            loss: loss.value().item().f64(),
            grads: out,
        })
    }
}

#[derive(Clone, Debug)]
pub struct ParamGrads<T: Real> {
    pub loss: f64,
    pub grads: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Real> ParamGrads<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.iter().find(|(i, _)| *i == id).map(|(_, g)| g)
    }
}

/// Adam with optional global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Adam<T: Real> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn state(&self) -> (u64, &[Tensor<T>], &[Tensor<T>]) {
        (self.step, &self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) {
        self.step = step;
        self.m = m;
        self.v = v;
    }

    /// Apply one update from the accumulated gradients and zero them.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        if self.m.len() != store.len() {
            self.m = store.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let clip = match self.clip_norm {
            Some(max) => {
                let n = store.grad_norm();
                if n > max { max / n } else { 1.0 }
            }
            None => 1.0,
        };
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (i, p) in store.params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for ((w, &g), (mi, vi)) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m.iter_mut().zip(v.iter_mut())) {
                let g = g.f64() * clip;
                let mn = b1 * mi.f64() + (1.0 - b1) * g;
                let vn = b2 * vi.f64() + (1.0 - b2) * g * g;
                *mi = T::of(mn);
                *vi = T::of(vn);
                let upd = self.lr * (mn / bc1) / ((vn / bc2).sqrt() + self.eps);
                *w = T::of(w.f64() - upd);
            }
        }
        store.zero_grad();
    }
}
