//! Named parameter storage and the per-forward binding onto a tape.

use std::cell::RefCell;

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered map from stable dotted names (`align.enc0.attn.wq`) to tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars across tensors whose name starts with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Place every tensor on `tape` as a trainable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
            .collect();
        Bound { vars }
    }
}

/// Parameters living on one tape.
pub struct Bound<'t> {
    vars: IndexMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    /// Bind arbitrary tape variables under parameter names, e.g. to
    /// gradient-check a block against its real parameter lookups.
    pub fn from_vars<S: Into<String>>(vars: impl IntoIterator<Item = (S, Var<'t>)>) -> Self {
        Bound {
            vars: vars.into_iter().map(|(k, v)| (k.into(), v)).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Add `scale · ∂loss/∂p` into each parameter's `.grad`.
    pub fn accumulate(&self, grads: &Gradients, params: &mut ParamSet, scale: f64) -> Result<()> {
        for (name, &var) in &self.vars {
            if let Some(g) = grads.get(var) {
                let scaled: Vec<f64> = g.iter().map(|v| v * scale).collect();
                params.get_mut(name)?.accumulate_grad(&scaled);
            }
        }
        Ok(())
    }
}

/// Everything a forward pass needs besides its inputs: the tape, the bound
/// parameters and, in training mode, a dropout stream.
pub struct Ctx<'t> {
    pub tape: &'t Tape,
    pub params: Bound<'t>,
    dropout: Option<(f64, RefCell<ChaCha8Rng>)>,
}

impl<'t> Ctx<'t> {
    pub fn new(tape: &'t Tape, params: &ParamSet) -> Self {
        Ctx {
            tape,
            params: params.bind(tape),
            dropout: None,
        }
    }

    pub fn from_bound(tape: &'t Tape, params: Bound<'t>) -> Self {
        Ctx {
            tape,
            params,
            dropout: None,
        }
    }

    pub fn with_dropout(mut self, p: f64, rng: ChaCha8Rng) -> Self {
        self.dropout = (p > 0.0).then(|| (p, RefCell::new(rng)));
        self
    }

    pub fn p(&self, name: &str) -> Result<Var<'t>> {
        self.params.get(name)
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }

    pub fn dropout(&self, x: Var<'t>) -> Var<'t> {
        match &self.dropout {
            Some((p, rng)) => self.tape.dropout(x, *p, &mut *rng.borrow_mut()),
            None => x,
        }
    }

    /// `x · W + b` with parameters `{prefix}.w`, `{prefix}.b`.
    pub fn linear(&self, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        x.matmul(w)?.add(b)
    }

    /// Layer norm with parameters `{prefix}.g`, `{prefix}.b`.
    pub fn layer_norm(&self, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
        let g = self.p(&format!("{prefix}.g"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        x.layer_norm(g, b)
    }
}

/// Xavier/Glorot uniform: variance `2 / (fan_in + fan_out)`.
pub fn xavier<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(shape, -a, a, rng)
}

/// Builder helpers used by the model's `init` functions.
pub(crate) struct Init<'a, R: Rng> {
    pub params: &'a mut ParamSet,
    pub rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    pub fn weight(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        let t = xavier(&[fan_in, fan_out], fan_in, fan_out, self.rng);
        self.params.insert(name, t);
    }

    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.weight(&format!("{prefix}.w"), fan_in, fan_out);
        self.params.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
    }

    pub fn layer_norm(&mut self, prefix: &str, n: usize) {
        self.params.insert(format!("{prefix}.g"), Tensor::ones(&[n]));
        self.params.insert(format!("{prefix}.b"), Tensor::zeros(&[n]));
    }
}
