use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor and its gradient buffer.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    value: Arc<Tensor>,
    pub grad: Tensor,
}

impl Parameter {
    pub fn value(&self) -> &Tensor {
        &self.value
    }
}

/// Owns every parameter of a model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::validation(format!("duplicate parameter name {name}")));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            grad: Tensor::zeros(value.shape()),
            value: Arc::new(value),
        });
        Ok(ParamId(id))
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

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn param(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor> {
        self.params[id.0].value.clone()
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds gradients from a finished backward pass into each parameter's buffer.
    pub fn accumulate(&mut self, grads: &ParamGrads) {
        for (p, g) in self.params.iter_mut().zip(&grads.0) {
            if let Some(g) = g {
                p.grad.add_assign(g);
            }
        }
    }

    /// Bitwise snapshot of all parameter values, for determinism checks.
    pub fn fingerprint(&self) -> Vec<u64> {
        self.params
            .iter()
            .flat_map(|p| p.value.data().iter().map(|v| v.to_bits()))
            .collect()
    }
}

/// Per-parameter gradients extracted from a tape.
#[derive(Debug)]
pub struct ParamGrads(pub Vec<Option<Tensor>>);

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.0.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(Tensor::is_finite)
    }
}

/// Binds parameters of a store onto a tape, at most once each.
pub struct Session<'t> {
    tape: &'t Tape,
    store: &'t ParamStore,
    bound: RefCell<Vec<Option<Var<'t>>>>,
}

impl<'t> Session<'t> {
    pub fn new(tape: &'t Tape, store: &'t ParamStore) -> Self {
        Self {
            tape,
            store,
            bound: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'t ParamStore {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var<'t> {
        let mut bound = self.bound.borrow_mut();
        *bound[id.0].get_or_insert_with(|| self.tape.leaf_shared(self.store.shared(id), true))
    }

    pub fn constant(&self, value: Tensor) -> Var<'t> {
        self.tape.constant(value)
    }

    /// Runs backward from `loss` and collects the gradient of every bound parameter.
    pub fn backward(&self, loss: Var<'t>) -> Result<ParamGrads> {
        let mut grads: Gradients = self.tape.backward(loss)?;
        let bound = self.bound.borrow();
        let out = bound
            .iter()
            .map(|v| v.and_then(|v| grads.take(v.id())))
            .collect();
        Ok(ParamGrads(out))
    }
}

/// Normal(0, std) truncated to two standard deviations.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 {
                break v * std;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

/// Dense affine map `x W + b` with `W: [in x out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            truncated_normal(rng, &[d_in, d_out], 0.02),
        )?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(&s.param(self.weight))?;
        match self.bias {
            Some(b) => y.add_row(&s.param(b)),
            None => Ok(y),
        }
    }
}

/// Gain and bias of a layer norm.
#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::filled(&[d], 1.0))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d]))?,
        })
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(&s.param(self.gain), &s.param(self.bias), LAYER_NORM_EPS)
    }
}
