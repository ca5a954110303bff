//! Spectrally normalised patch discriminator.

use rand::Rng;

use super::InpaintConfig;
use crate::autograd::{ConvSpec, Graph, Var};
use crate::dataset::{Frame, MaskMap};
use crate::error::{Error, Result};
use crate::nn::{Bound, Checkpoint, Conv2d, ParamSet};
use crate::tensor::Tensor;

const KERNEL: usize = 5;
const STRIDE: usize = 2;
const SLOPE: f64 = 0.2;
const NORM_EPS: f64 = 1e-12;

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
    v.iter_mut().for_each(|x| *x /= n);
}

/// `Wᵀu` for a row-major `rows × cols` matrix.
fn mat_t_vec(w: &[f64], rows: usize, cols: usize, u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for (o, &x) in out.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *o += u[r] * x;
        }
    }
    out
}

fn mat_vec(w: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|r| w[r * cols..(r + 1) * cols].iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn power_step(w: &[f64], rows: usize, cols: usize, u: &mut Vec<f64>) {
    let mut v = mat_t_vec(w, rows, cols, u);
    normalize(&mut v);
    *u = mat_vec(w, rows, cols, &v);
    normalize(u);
}

/// Largest singular value of a `[rows, …]` tensor viewed as a matrix, by
/// power iteration from a fixed start.
pub fn spectral_norm_estimate(w: &Tensor, iters: usize) -> f64 {
    let rows = w.shape()[0];
    let cols = w.len() / rows;
    let mut u = vec![1.0; rows];
    normalize(&mut u);
    for _ in 0..iters {
        power_step(w.data(), rows, cols, &mut u);
    }
    let v = mat_t_vec(w.data(), rows, cols, &u);
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Bound on how much a strided convolution can amplify the operator norm
/// of its weight matrix: every input pixel feeds at most `ceil(k/s)²`
/// output windows.
pub fn conv_lipschitz_factor(kernel: usize, stride: usize) -> f64 {
    kernel.div_ceil(stride) as f64
}

impl Graph {
    /// `W / σ` with `σ = ‖Wᵀu‖` for a fixed unit vector `u`; the gradient
    /// is exact for this definition of `σ`.
    pub fn spectral_normalize(&mut self, w: Var, u: &[f64]) -> Var {
        let shape = self.shape(w).to_vec();
        let rows = shape[0];
        let cols = self.value(w).len() / rows;
        assert_eq!(u.len(), rows, "spectral_normalize: u length");
        let mut v = mat_t_vec(self.value(w).data(), rows, cols, u);
        let sigma = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
        v.iter_mut().for_each(|x| *x /= sigma);
        let out = self.value(w).scale(1.0 / sigma);
        let u = u.to_vec();
        self.op(out, &[w], move |g, parents, _| {
            let wd = parents[0].data();
            let dot: f64 = g.data().iter().zip(wd).map(|(a, b)| a * b).sum();
            let c = dot / (sigma * sigma);
            let d = Tensor::from_fn(g.shape(), |i| g.data()[i] / sigma - c * u[i / cols] * v[i % cols]);
            vec![Some(d)]
        })
    }
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    pub params: ParamSet,
    layers: Vec<Conv2d>,
    /// Persistent left singular vector estimates, one per layer.
    u: Vec<Vec<f64>>,
}

impl Discriminator {
    pub fn new(config: &InpaintConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamSet::new();
        let mut layers = Vec::new();
        let mut u = Vec::new();
        let d = config.disc_channels;
        let mut cin = 4;
        for l in 0..config.disc_layers {
            let cout = if l + 1 == config.disc_layers {
                1
            } else {
                (d << l).min(4 * d)
            };
            layers.push(Conv2d::new(
                &mut ps,
                &format!("conv{l}"),
                cin,
                cout,
                KERNEL,
                ConvSpec::strided(KERNEL, STRIDE),
                rng,
            ));
            let mut ul: Vec<f64> = (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect();
            normalize(&mut ul);
            u.push(ul);
            cin = cout;
        }
        Ok(Self { params: ps, layers, u })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn weight(&self, layer: usize) -> &Tensor {
        self.params.get(self.layers[layer].weight)
    }

    /// Advances every layer's singular-vector estimate.
    pub fn power_iteration(&mut self, iters: usize) {
        for (l, u) in self.u.iter_mut().enumerate() {
            let w = self.params.get(self.layers[l].weight);
            let rows = w.shape()[0];
            let cols = w.len() / rows;
            for _ in 0..iters {
                power_step(w.data(), rows, cols, u);
            }
        }
    }

    /// Current `σ` estimate of a layer.
    pub fn sigma(&self, layer: usize) -> f64 {
        let w = self.weight(layer);
        let rows = w.shape()[0];
        let v = mat_t_vec(w.data(), rows, w.len() / rows, &self.u[layer]);
        v.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS)
    }

    /// Weights divided by their current `σ` estimate.
    pub fn normalized_weights(&self) -> Vec<Tensor> {
        (0..self.layers.len())
            .map(|l| self.weight(l).scale(1.0 / self.sigma(l)))
            .collect()
    }

    /// `[1, 4, H, W]`: RGB then hole = 1.
    pub fn input_tensor(frame: &Frame, mask: &MaskMap) -> Result<Tensor> {
        frame.check_mask(mask)?;
        let mut data = frame.to_batch().into_data();
        data.extend(mask.hole_tensor().into_data());
        Tensor::from_vec(&[1, 4, frame.height(), frame.width()], data)
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let q = STRIDE.pow(self.layers.len() as u32);
        if h % q != 0 || w % q != 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!("{w}x{h} is not divisible by {q}")));
        }
        Ok(())
    }

    /// `x: [N, 4, H, W]` to raw scores `[N, 1, H/2^L, W/2^L]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let (_, c, h, w) = g.value(x).dims4();
        if c != 4 {
            return Err(Error::shape(format!("discriminator expects 4 channels, got {c}")));
        }
        self.check_input(h, w)?;
        let mut y = x;
        for (l, conv) in self.layers.iter().enumerate() {
            let wn = g.spectral_normalize(p.get(conv.weight), &self.u[l]);
            y = g.conv2d(y, wn, Some(p.get(conv.bias)), conv.spec);
            if l + 1 < self.layers.len() {
                y = g.leaky_relu(y, SLOPE);
            }
        }
        Ok(y)
    }

    /// Score map `[h, w]` of one frame.
    pub fn score(&self, frame: &Frame, mask: &MaskMap) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let x = g.constant(Self::input_tensor(frame, mask)?);
        let y = self.forward(&mut g, &p, x)?;
        let (_, _, h, w) = g.value(y).dims4();
        g.value(y).clone().reshape(&[h, w])
    }

    pub fn store_into(&self, ck: &mut Checkpoint, prefix: &str) {
        self.params.store_into(ck, prefix);
        for (l, u) in self.u.iter().enumerate() {
            ck.insert(format!("{prefix}sn{l}.u"), Tensor::from_vec(&[u.len()], u.clone()).expect("u"));
        }
    }

    pub fn load_from(&mut self, ck: &Checkpoint, prefix: &str) -> Result<()> {
        self.params.load_from(ck, prefix)?;
        for (l, u) in self.u.iter_mut().enumerate() {
            let key = format!("{prefix}sn{l}.u");
            let t = ck
                .tensor(&key)
                .ok_or_else(|| Error::format("checkpoint", format!("missing tensor {key}")))?;
            if t.len() != u.len() {
                return Err(Error::format("checkpoint", format!("{key}: wrong length")));
            }
            u.copy_from_slice(t.data());
        }
        Ok(())
    }
}
