//! Named parameter tensors, their binding onto a tape, and the optimizer.

use crate::autograd::{Gradients, Mat, Tape, Var};
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::cell::RefCell;
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Which learning rate a parameter trains under.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrGroup {
    /// Parameters initialised from a pretrained source.
    Pretrained,
    Other,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub group: LrGroup,
    pub value: Mat,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: LrGroup, value: Mat) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter {name}"
        );
        self.params.push(Param { name, group, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn group(&self, id: ParamId) -> LrGroup {
        self.params[id.0].group
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn total_size(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.iter().all(|x| x.is_finite()))
    }
}

/// Xavier/Glorot-normal initialisation for an `out × in` weight.
pub fn xavier<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Mat {
    let std = (2.0 / (rows + cols).max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_fn((rows, cols), |_| normal.sample(rng))
}

pub fn normal_init<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Mat {
    let normal = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_fn((rows, cols), |_| normal.sample(rng))
}

/// A tape plus lazily bound parameters. Each parameter becomes a single
/// leaf the first time it is used.
pub struct Session<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: RefCell<BTreeMap<ParamId, Var>>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var {
        if let Some(v) = self.bound.borrow().get(&id) {
            return *v;
        }
        let v = self.tape.leaf(self.store.get(id).clone());
        self.bound.borrow_mut().insert(id, v);
        v
    }

    /// Gradients of every bound parameter, in parameter order.
    pub fn param_grads(&self, grads: &Gradients) -> GradBuffer {
        let mut out = GradBuffer::default();
        for (&id, &v) in self.bound.borrow().iter() {
            if let Some(g) = grads.get(v) {
                out.add(id, g);
            }
        }
        out
    }
}

/// Sparse accumulator of parameter gradients.
#[derive(Clone, Debug, Default)]
pub struct GradBuffer {
    grads: BTreeMap<ParamId, Mat>,
}

impl GradBuffer {
    pub fn add(&mut self, id: ParamId, g: &Mat) {
        match self.grads.get_mut(&id) {
            Some(existing) => *existing += g,
            None => {
                self.grads.insert(id, g.clone());
            }
        }
    }

    pub fn merge(&mut self, other: &GradBuffer) {
        for (id, g) in &other.grads {
            self.add(*id, g);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.values_mut() {
            g.mapv_inplace(|x| x * c);
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Mat)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn retain(&mut self, keep: impl Fn(ParamId) -> bool) {
        self.grads.retain(|id, _| keep(*id));
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(|g| g.iter().all(|x| x.is_finite()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr_pretrained: f64,
    pub lr_other: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; nonpositive disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr_pretrained: 2e-5,
            lr_other: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
        }
    }
}

/// Adam with one learning rate per [`LrGroup`].
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    m: BTreeMap<ParamId, Mat>,
    v: BTreeMap<ParamId, Mat>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradBuffer) {
        self.step += 1;
        let c = self.config;
        let norm = grads
            .iter()
            .map(|(_, g)| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm {
            c.clip_norm / norm
        } else {
            1.0
        };
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (id, g) in grads.iter() {
            let lr = match store.group(id) {
                LrGroup::Pretrained => c.lr_pretrained,
                LrGroup::Other => c.lr_other,
            };
            let shape = g.dim();
            let m = self.m.entry(id).or_insert_with(|| Array2::zeros(shape));
            let v = self.v.entry(id).or_insert_with(|| Array2::zeros(shape));
            let p = store.get_mut(id);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    let g = g * clip;
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * mh / (vh.sqrt() + c.eps);
                });
        }
    }
}
