//! Parameter storage and the small layers every block is built from.

use std::cell::RefCell;
use std::collections::HashMap;
use std::ops::Index;

use rand::Rng;

use crate::rng::{trunc_normal, StreamRng};
use crate::tensor::{Element, Result, Tape, Tensor, Var};

/// Std of the truncated-normal initialiser for projections and latents.
pub const INIT_STD: f64 = 0.02;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T: Element> {
    pub name: String,
    pub value: Tensor<T>,
    /// Whether AdamW applies weight decay to this tensor.
    pub decay: bool,
}

/// Ordered, named collection of parameter tensors.
///
/// Layers refer to entries by [`ParamId`]; two layers holding the same id
/// share the tensor (and it is counted once).
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Element> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a tensor. Panics on a duplicate name, which is a construction bug.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, value, decay });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    /// Mutable values with their weight-decay flags, in insertion order.
    pub fn values_mut(&mut self) -> impl Iterator<Item = (&mut Tensor<T>, bool)> {
        self.entries.iter_mut().map(|e| (&mut e.value, e.decay))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.id(name).map(|id| &mut self.entries[id.0].value)
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Records every parameter on `tape` as a trainable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        Bound {
            vars: self.entries.iter().map(|e| tape.param(e.value.clone())).collect(),
        }
    }

    /// Records every parameter as a constant (inference only).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        Bound {
            vars: self.entries.iter().map(|e| tape.constant(e.value.clone())).collect(),
        }
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    decay: e.decay,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Parameters of a [`ParamStore`] recorded on one tape.
pub struct Bound<'t, T: Element> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Element> Bound<'t, T> {
    /// Wraps leaves created elsewhere; they must follow the store's order.
    pub fn from_vars(vars: Vec<Var<'t, T>>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var<'t, T>] {
        &self.vars
    }
}

impl<'t, T: Element> Index<ParamId> for Bound<'t, T> {
    type Output = Var<'t, T>;

    fn index(&self, id: ParamId) -> &Self::Output {
        &self.vars[id.0]
    }
}

/// Deterministic parameter initialiser.
pub struct Init {
    rng: StreamRng,
}

impl Init {
    pub fn new(rng: StreamRng) -> Self {
        Self { rng }
    }

    pub fn trunc_normal<T: Element>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64_lossy(trunc_normal(&mut self.rng, std)))
            .collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches data")
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.gen()
    }
}

/// Per-forward settings: train/eval mode and stochastic depth.
pub struct ForwardCtx {
    pub training: bool,
    pub drop_path: f64,
    rng: Option<RefCell<StreamRng>>,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self {
            training: false,
            drop_path: 0.0,
            rng: None,
        }
    }

    pub fn train(drop_path: f64, rng: StreamRng) -> Self {
        Self {
            training: true,
            drop_path,
            rng: Some(RefCell::new(rng)),
        }
    }

    /// `x + branch`, with the branch dropped per sample during training.
    ///
    /// Both inputs have the batch on their leading axis.
    pub fn residual<'t, T: Element>(&self, x: &Var<'t, T>, branch: &Var<'t, T>) -> Result<Var<'t, T>> {
        match (&self.rng, self.training && self.drop_path > 0.0) {
            (Some(rng), true) => {
                let batch = branch.shape()[0];
                let keep = 1.0 - self.drop_path;
                let mut rng = rng.borrow_mut();
                let factors: Vec<T> = (0..batch)
                    .map(|_| {
                        let u: f64 = rng.gen();
                        T::from_f64_lossy(if u < keep { 1.0 / keep } else { 0.0 })
                    })
                    .collect();
                x.add(&branch.scale_rows(&factors)?)
            }
            _ => x.add(branch),
        }
    }
}

/// `y = x W + b` with `W` stored `[in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init.trunc_normal(&[in_dim, out_dim], INIT_STD),
            true,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([out_dim]), false));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// Zero-initialised variant (classifier heads).
    pub fn zeros<T: Element>(store: &mut ParamStore<T>, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros([in_dim, out_dim]), true);
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros([out_dim]), false));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'t, T: Element>(&self, p: &Bound<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let y = x.matmul(&p[self.weight])?;
        match self.bias {
            Some(b) => y.add(&p[b]),
            None => Ok(y),
        }
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.weight"), Tensor::ones([dim]), false),
            beta: store.add(format!("{name}.bias"), Tensor::zeros([dim]), false),
            dim,
        }
    }

    pub fn forward<'t, T: Element>(&self, p: &Bound<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(&p[self.gamma], &p[self.beta], T::from_f64_lossy(LAYER_NORM_EPS))
    }

    pub fn num_params(&self) -> usize {
        2 * self.dim
    }
}

/// Two-layer GELU MLP, hidden width `mlp_ratio * dim`.
#[derive(Debug, Clone, Copy)]
pub struct Ffn {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Ffn {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        dim: usize,
        mlp_ratio: usize,
    ) -> Self {
        Self {
            fc1: Linear::new(store, init, &format!("{name}.fc1"), dim, dim * mlp_ratio, true),
            fc2: Linear::new(store, init, &format!("{name}.fc2"), dim * mlp_ratio, dim, true),
        }
    }

    pub fn forward<'t, T: Element>(&self, p: &Bound<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.fc1.forward(p, x)?.gelu()?;
        self.fc2.forward(p, &h)
    }

    pub fn num_params(&self) -> usize {
        self.fc1.num_params() + self.fc2.num_params()
    }
}
