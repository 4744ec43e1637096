//! Named parameter storage and the small layer vocabulary the networks share.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Graph, Scalar, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named collection of parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

/// Graph leaves for every tensor of a [`ParamSet`], in the same order.
#[derive(Debug, Clone, PartialEq)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound(
            self.tensors
                .iter()
                .map(|t| g.leaf(t.clone(), trainable))
                .collect(),
        )
    }

    /// Gradients accumulated on `bound`, zero-filled where none arrived.
    pub fn grads(&self, g: &Graph<T>, bound: &Bound) -> Vec<Tensor<T>> {
        self.tensors
            .iter()
            .zip(bound.vars())
            .map(|(t, &v)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }

    /// Replace tensors with same-named, same-shaped ones from `other`.
    pub fn load_from(&mut self, other: &[(String, Tensor<T>)]) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter tensors, found {}",
                self.len(),
                other.len()
            )));
        }
        for ((name, t), (oname, ot)) in self.names.iter().zip(&mut self.tensors).zip(other) {
            if name != oname || t.shape() != ot.shape() {
                return Err(Error::Contract(format!(
                    "parameter mismatch: expected {name} {:?}, found {oname} {:?}",
                    t.shape(),
                    ot.shape()
                )));
            }
            *t = ot.clone();
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// SHA-256 over names, shapes, and values; identifies a parameter state.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.to_f64_lossy().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
    pub transposed: bool,
}

impl Conv {
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let w = p.var(self.weight);
        let b = self.bias.map(|b| p.var(b));
        if self.transposed {
            g.conv_transpose2d(x, w, b, self.spec)
        } else {
            g.conv2d(x, w, b, self.spec)
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct InstanceNorm {
    pub scale: ParamId,
    pub shift: ParamId,
}

pub const NORM_EPS: f64 = 1e-5;

impl InstanceNorm {
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.instance_norm(x, p.var(self.scale), p.var(self.shift), T::lit(NORM_EPS))
    }
}

/// Allocates layers into a [`ParamSet`] with seeded `N(0, std²)` weights.
pub struct LayerBuilder<'a, T, R> {
    pub params: &'a mut ParamSet<T>,
    rng: &'a mut R,
    std: f64,
}

impl<'a, T: Scalar, R: Rng> LayerBuilder<'a, T, R> {
    pub fn new(params: &'a mut ParamSet<T>, rng: &'a mut R, std: f64) -> Self {
        Self { params, rng, std }
    }

    fn normal(&mut self, shape: &[usize]) -> Tensor<T> {
        let dist = Normal::new(0.0, self.std).expect("valid std");
        Tensor::from_fn(shape, |_| T::lit(dist.sample(self.rng)))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Conv {
        let w = self.normal(&[c_out, c_in, kernel, kernel]);
        let weight = self.params.push(format!("{name}.weight"), w);
        let bias = bias.then(|| self.params.push(format!("{name}.bias"), Tensor::zeros(&[c_out])));
        Conv {
            weight,
            bias,
            spec: ConvSpec::new(stride, padding),
            transposed: false,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv_transpose(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Conv {
        let w = self.normal(&[c_in, c_out, kernel, kernel]);
        let weight = self.params.push(format!("{name}.weight"), w);
        let bias = bias.then(|| self.params.push(format!("{name}.bias"), Tensor::zeros(&[c_out])));
        Conv {
            weight,
            bias,
            spec: ConvSpec::new(stride, padding),
            transposed: true,
        }
    }

    pub fn norm(&mut self, name: &str, channels: usize) -> InstanceNorm {
        let scale = self
            .params
            .push(format!("{name}.scale"), Tensor::ones(&[channels]));
        let shift = self
            .params
            .push(format!("{name}.shift"), Tensor::zeros(&[channels]));
        InstanceNorm { scale, shift }
    }
}
