//! Parameter storage and the layers shared by every network.

mod adam;
mod checkpoint;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::Checkpoint;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Graph handles of a [`ParamSet`] bound for one forward pass.
pub struct Bound(Vec<Var>);

impl Bound {
    #[inline]
    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Registers every tensor as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(self.tensors.iter().map(|t| g.param(t.clone())).collect())
    }

    /// Registers every tensor as a constant, for inference.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound(self.tensors.iter().map(|t| g.constant(t.clone())).collect())
    }

    /// Gradients after `g.backward`, zero for parameters the root did not reach.
    pub fn grads(&self, g: &Graph, bound: &Bound) -> Vec<Tensor> {
        self.tensors
            .iter()
            .zip(&bound.0)
            .map(|(t, &v)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }

    /// Copies tensors from a checkpoint under `prefix`, requiring every name
    /// to be present with a matching shape.
    pub fn load_from(&mut self, ckpt: &Checkpoint, prefix: &str) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let key = format!("{prefix}{name}");
            let src = ckpt
                .tensor(&key)
                .ok_or_else(|| Error::format("checkpoint", format!("missing tensor {key}")))?;
            if src.shape() != t.shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!("{key}: shape {:?}, expected {:?}", src.shape(), t.shape()),
                ));
            }
            *t = src.clone();
        }
        Ok(())
    }

    pub fn store_into(&self, ckpt: &mut Checkpoint, prefix: &str) {
        for (name, t) in self.iter() {
            ckpt.insert(format!("{prefix}{name}"), t.clone());
        }
    }
}

/// Uniform initialisation with variance `gain² / fan_in`.
pub fn init_uniform(shape: &[usize], fan_in: usize, gain: f64, rng: &mut impl Rng) -> Tensor {
    let a = gain * (3.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-a..=a))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Elu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Elu => g.elu(x),
            Activation::LeakyRelu(s) => g.leaky_relu(x, s),
            Activation::Sigmoid => g.sigmoid(x),
            Activation::Tanh => g.tanh(x),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: ConvSpec,
}

impl Conv2d {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: ConvSpec,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let weight = ps.add(
            format!("{name}.weight"),
            init_uniform(&[cout, cin, kernel, kernel], fan_in, 1.0, rng),
        );
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { weight, bias, spec }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.conv2d(x, p.get(self.weight), Some(p.get(self.bias)), self.spec)
    }
}

/// Gated convolution: `act(conv_f(x)) ⊙ sigmoid(conv_g(x))`, with both
/// branches packed into one convolution of twice the output width.
#[derive(Debug, Clone)]
pub struct GatedConv2d {
    conv: Conv2d,
    cout: usize,
    act: Activation,
}

impl GatedConv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: ConvSpec,
        act: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            conv: Conv2d::new(ps, name, cin, 2 * cout, kernel, spec, rng),
            cout,
            act,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let y = self.conv.forward(g, p, x);
        let feat = g.narrow_channels(y, 0, self.cout);
        let gate = g.narrow_channels(y, self.cout, self.cout);
        let feat = self.act.apply(g, feat);
        let gate = g.sigmoid(gate);
        g.mul(feat, gate)
    }
}

/// A 3D convolution whose temporal extent equals the number of stacked
/// frames, collapsing `F` frames into one map. Weight layout is
/// `[out, time·in, k, k]` with time-major channel blocks, i.e. block `t`
/// of the input channels holds frame `t`.
#[derive(Debug, Clone)]
pub struct TemporalConv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub frames: usize,
    pub cin: usize,
    pub kernel: usize,
}

impl TemporalConv {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        frames: usize,
        cin: usize,
        cout: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = frames * cin * kernel * kernel;
        let weight = ps.add(
            format!("{name}.weight"),
            init_uniform(&[cout, frames * cin, kernel, kernel], fan_in, 1.0, rng),
        );
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self {
            weight,
            bias,
            frames,
            cin,
            kernel,
        }
    }

    /// `x: [B·F, C, h, w]` with the frames of each sequence contiguous;
    /// returns `[B, out, h, w]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let (bf, c, h, w) = g.value(x).dims4();
        assert_eq!(c, self.cin, "temporal conv channel count");
        assert_eq!(bf % self.frames, 0, "temporal conv: batch not a multiple of F");
        let stacked = g.reshape(x, &[bf / self.frames, self.frames * c, h, w]);
        g.conv2d(
            stacked,
            p.get(self.weight),
            Some(p.get(self.bias)),
            ConvSpec::same(self.kernel, 1),
        )
    }
}
