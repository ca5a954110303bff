//! A small reverse-mode automatic differentiation tape.
//!
//! Every operation appends a node holding its forward value and a closure
//! that maps the output gradient to gradients of its parents. A graph is
//! built per forward pass and discarded afterwards; parameters enter as
//! leaves via [`Graph::param`].

mod conv;

pub use conv::ConvSpec;

use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Parent gradients from the output gradient. Receives the output gradient,
/// the parents' forward values and which parents need a gradient.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, parents: Vec<Var>, backward: Option<BackwardFn>) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let backward = if requires_grad { backward } else { None };
        self.nodes.push(Node {
            value,
            parents,
            backward,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a custom differentiable operation.
    pub fn op(
        &mut self,
        value: Tensor,
        parents: &[Var],
        backward: impl Fn(&Tensor, &[&Tensor], &[bool]) -> Vec<Option<Tensor>> + 'static,
    ) -> Var {
        self.push(value, parents.to_vec(), Some(Box::new(backward)))
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`Graph::backward`] root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Back-propagates from a scalar root.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward root must be a scalar"
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(self.nodes[root.0].value.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g_out) = grads[i].take() else {
                continue;
            };
            let parent_vals: Vec<&Tensor> =
                node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let need: Vec<bool> = node
                .parents
                .iter()
                .map(|p| self.nodes[p.0].requires_grad)
                .collect();
            let pgrads = backward(&g_out, &parent_vals, &need);
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for (p, g) in node.parents.iter().zip(pgrads) {
                let Some(g) = g else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[p.0].value.shape());
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
            grads[i] = Some(g_out);
        }
        self.grads = grads;
    }

    // ---- elementwise -------------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: operand shapes differ"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.op(value, &[a, b], |g, _, need| {
            vec![need[0].then(|| g.clone()), need[1].then(|| g.clone())]
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.op(value, &[a, b], |g, _, need| {
            vec![need[0].then(|| g.clone()), need[1].then(|| g.scale(-1.0))]
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.op(value, &[a, b], |g, p, need| {
            vec![
                need[0].then(|| g.zip_map(p[1], |g, y| g * y)),
                need[1].then(|| g.zip_map(p[0], |g, x| g * x)),
            ]
        })
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.op(value, &[a], move |g, _, _| vec![Some(g.scale(s))])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|v| v + s);
        self.op(value, &[a], |g, _, _| vec![Some(g.clone())])
    }

    /// Applies `f` elementwise; `df` gives the derivative from `(input, output)`.
    fn unary(
        &mut self,
        a: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let value = self.value(a).map(f);
        let out = value.clone();
        self.op(value, &[a], move |g, p, _| {
            let data = g
                .data()
                .iter()
                .zip(p[0].data())
                .zip(out.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::from_vec(g.shape(), data).unwrap())]
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(
            a,
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| if x > 0.0 { x } else { x.exp_m1() },
            |x, y| if x > 0.0 { 1.0 } else { y + 1.0 },
        )
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let shape = self.shape(a).to_vec();
        self.op(value, &[a], move |g, _, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `Σ m·|pred − target| / (C · Σ m)` with a per-pixel weight map `m`
    /// of shape `[N,1,H,W]` broadcast over the channels of `pred`.
    ///
    /// Panics if the weights sum to zero.
    pub fn masked_l1_mean(&mut self, pred: Var, target: &Tensor, mask: &Tensor) -> Var {
        let (n, c, h, w) = self.value(pred).dims4();
        assert_eq!(target.shape(), self.shape(pred), "masked_l1_mean target shape");
        assert_eq!(mask.shape(), &[n, 1, h, w], "masked_l1_mean mask shape");
        let support = mask.sum() * c as f64;
        assert!(support > 0.0, "masked_l1_mean over empty support");
        let hw = h * w;
        let p = self.value(pred).data();
        let mut total = 0.0;
        let mut sign = vec![0.0; p.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for i in 0..hw {
                    let m = mask.data()[ni * hw + i];
                    if m == 0.0 {
                        continue;
                    }
                    let d = p[base + i] - target.data()[base + i];
                    total += m * d.abs();
                    sign[base + i] = m * d.signum() / support;
                }
            }
        }
        let shape = self.shape(pred).to_vec();
        self.op(Tensor::scalar(total / support), &[pred], move |g, _, _| {
            let s = g.item();
            vec![Some(
                Tensor::from_vec(&shape, sign.iter().map(|v| v * s).collect()).unwrap(),
            )]
        })
    }

    // ---- structural --------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.value(a).clone().reshape(shape).expect("reshape");
        let orig = self.shape(a).to_vec();
        self.op(value, &[a], move |g, _, _| {
            vec![Some(g.clone().reshape(&orig).unwrap())]
        })
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        let (n, _, h, w) = self.value(parts[0]).dims4();
        let chans: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (pn, pc, ph, pw) = self.value(p).dims4();
                assert_eq!((pn, ph, pw), (n, h, w), "concat_channels shape");
                pc
            })
            .collect();
        let total: usize = chans.iter().sum();
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, total, h, w]);
        for ni in 0..n {
            let mut off = 0;
            for (&p, &c) in parts.iter().zip(&chans) {
                let src = &self.value(p).data()[ni * c * hw..(ni + 1) * c * hw];
                out.data_mut()[(ni * total + off) * hw..(ni * total + off + c) * hw]
                    .copy_from_slice(src);
                off += c;
            }
        }
        self.op(out, parts, move |g, _, need| {
            let mut off = 0;
            chans
                .iter()
                .zip(need)
                .map(|(&c, &nd)| {
                    let r = nd.then(|| {
                        let mut t = Tensor::zeros(&[n, c, h, w]);
                        for ni in 0..n {
                            t.data_mut()[ni * c * hw..(ni + 1) * c * hw].copy_from_slice(
                                &g.data()[(ni * total + off) * hw..(ni * total + off + c) * hw],
                            );
                        }
                        t
                    });
                    off += c;
                    r
                })
                .collect()
        })
    }

    /// Channels `[start, start + len)` of an NCHW tensor.
    pub fn narrow_channels(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (n, c, h, w) = self.value(a).dims4();
        assert!(start + len <= c, "narrow_channels out of range");
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, len, h, w]);
        for ni in 0..n {
            out.data_mut()[ni * len * hw..(ni + 1) * len * hw].copy_from_slice(
                &self.value(a).data()[(ni * c + start) * hw..(ni * c + start + len) * hw],
            );
        }
        self.op(out, &[a], move |g, _, _| {
            let mut t = Tensor::zeros(&[n, c, h, w]);
            for ni in 0..n {
                t.data_mut()[(ni * c + start) * hw..(ni * c + start + len) * hw]
                    .copy_from_slice(&g.data()[ni * len * hw..(ni + 1) * len * hw]);
            }
            vec![Some(t)]
        })
    }

    /// Gathers items along the leading axis; indices may repeat.
    pub fn index_batch(&mut self, a: Var, idx: &[usize]) -> Var {
        let shape = self.shape(a).to_vec();
        let stride: usize = shape[1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[0] = idx.len();
        let mut data = Vec::with_capacity(idx.len() * stride);
        for &i in idx {
            assert!(i < shape[0], "index_batch out of range");
            data.extend_from_slice(&self.value(a).data()[i * stride..(i + 1) * stride]);
        }
        let idx = idx.to_vec();
        self.op(Tensor::from_vec(&out_shape, data).unwrap(), &[a], move |g, _, _| {
            let mut t = Tensor::zeros(&shape);
            for (k, &i) in idx.iter().enumerate() {
                for (d, s) in t.data_mut()[i * stride..(i + 1) * stride]
                    .iter_mut()
                    .zip(&g.data()[k * stride..(k + 1) * stride])
                {
                    *d += s;
                }
            }
            vec![Some(t)]
        })
    }

    /// Concatenates along the leading axis.
    pub fn concat_batch(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::cat0(&vals).expect("concat_batch");
        let leads: Vec<usize> = vals.iter().map(|t| t.shape()[0]).collect();
        self.op(out, parts, move |g, _, need| {
            let mut start = 0;
            leads
                .iter()
                .zip(need)
                .map(|(&l, &nd)| {
                    let r = nd.then(|| g.narrow0(start, l));
                    start += l;
                    r
                })
                .collect()
        })
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, a: Var, factor: usize) -> Var {
        let (n, c, h, w) = self.value(a).dims4();
        let (oh, ow) = (h * factor, w * factor);
        let src = self.value(a).data();
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        for nc in 0..n * c {
            for y in 0..oh {
                for x in 0..ow {
                    out.data_mut()[(nc * oh + y) * ow + x] =
                        src[(nc * h + y / factor) * w + x / factor];
                }
            }
        }
        self.op(out, &[a], move |g, _, _| {
            let mut t = Tensor::zeros(&[n, c, h, w]);
            for nc in 0..n * c {
                for y in 0..oh {
                    for x in 0..ow {
                        t.data_mut()[(nc * h + y / factor) * w + x / factor] +=
                            g.data()[(nc * oh + y) * ow + x];
                    }
                }
            }
            vec![Some(t)]
        })
    }

    /// 2×2 max pooling with stride 2.
    pub fn max_pool2(&mut self, a: Var) -> Var {
        let (n, c, h, w) = self.value(a).dims4();
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even extents");
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(a).data();
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let mut arg = vec![0usize; n * c * oh * ow];
        for nc in 0..n * c {
            for y in 0..oh {
                for x in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut bi = 0;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let i = (nc * h + 2 * y + dy) * w + 2 * x + dx;
                        if src[i] > best {
                            best = src[i];
                            bi = i;
                        }
                    }
                    let o = (nc * oh + y) * ow + x;
                    out.data_mut()[o] = best;
                    arg[o] = bi;
                }
            }
        }
        self.op(out, &[a], move |g, _, _| {
            let mut t = Tensor::zeros(&[n, c, h, w]);
            for (o, &i) in arg.iter().enumerate() {
                t.data_mut()[i] += g.data()[o];
            }
            vec![Some(t)]
        })
    }

    /// `m·a + (1 − m)·b` with `m` of shape `[N,1,H,W]` broadcast over channels.
    pub fn blend(&mut self, a: Var, b: Var, mask: &Tensor) -> Var {
        self.same_shape(a, b, "blend");
        let (n, c, h, w) = self.value(a).dims4();
        assert_eq!(mask.shape(), &[n, 1, h, w], "blend mask shape");
        let hw = h * w;
        let m = mask.clone();
        let weight = move |i: usize| m.data()[(i / (c * hw)) * hw + i % hw];
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let out = Tensor::from_fn(&[n, c, h, w], |i| {
            let m = weight(i);
            m * va[i] + (1.0 - m) * vb[i]
        });
        self.op(out, &[a, b], move |g, _, need| {
            let shape = g.shape();
            vec![
                need[0].then(|| Tensor::from_fn(shape, |i| g.data()[i] * weight(i))),
                need[1].then(|| Tensor::from_fn(shape, |i| g.data()[i] * (1.0 - weight(i)))),
            ]
        })
    }

    /// Multiplies by a constant `[N,1,H,W]` map broadcast over channels.
    pub fn mul_mask(&mut self, a: Var, mask: &Tensor) -> Var {
        let zeros = self.constant(Tensor::zeros(self.shape(a)));
        self.blend(a, zeros, mask)
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Central finite-difference gradient of `f` at `x`.
pub fn numeric_grad(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    out
}

/// Largest relative discrepancy `|a − b| / max(|a|, |b|)`, treating pairs
/// where both magnitudes are below `floor` as exact.
pub fn max_rel_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let scale = x.abs().max(y.abs());
            if scale < floor {
                0.0
            } else {
                (x - y).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    fn check(shape: &[usize], seed: u64, build: impl Fn(&mut Graph, Var) -> Var) {
        let x = rand_tensor(shape, seed);
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let y = build(&mut g, xv);
        g.backward(y);
        let analytic = g.grad(xv).unwrap().clone();
        let numeric = numeric_grad(&x, 1e-5, |t| {
            let mut g = Graph::new();
            let v = g.constant(t.clone());
            let y = build(&mut g, v);
            g.value(y).item()
        });
        let err = max_rel_error(&analytic, &numeric, 1e-7);
        assert!(err < 1e-5, "rel err {err}");
    }

    fn weighted_sum(g: &mut Graph, v: Var) -> Var {
        let w = rand_tensor(g.shape(v), 99);
        let wv = g.constant(w);
        let p = g.mul(v, wv);
        g.sum(p)
    }

    #[test]
    fn elementwise_gradients() {
        check(&[2, 3, 4, 4], 1, |g, x| {
            let a = g.sigmoid(x);
            let b = g.tanh(x);
            let c = g.mul(a, b);
            let d = g.elu(c);
            let e = g.leaky_relu(d, 0.2);
            let f = g.sub(e, x);
            let h = g.add_scalar(f, 0.3);
            let h = g.scale(h, 1.7);
            weighted_sum(g, h)
        });
    }

    #[test]
    fn structural_gradients() {
        check(&[2, 3, 4, 4], 2, |g, x| {
            let a = g.narrow_channels(x, 1, 2);
            let b = g.concat_channels(&[x, a]);
            let c = g.upsample_nearest(b, 2);
            let d = g.max_pool2(c);
            let e = g.index_batch(d, &[1, 0, 1]);
            let f = g.concat_batch(&[e, d]);
            let r = g.reshape(f, &[5, 5, 16]);
            weighted_sum(g, r)
        });
    }

    #[test]
    fn blend_and_masked_l1_gradients() {
        let mask = Tensor::from_fn(&[2, 1, 4, 4], |i| (i % 3) as f64 / 2.0);
        let target = rand_tensor(&[2, 3, 4, 4], 5);
        check(&[2, 3, 4, 4], 3, move |g, x| {
            let s = g.sigmoid(x);
            let b = g.blend(x, s, &mask);
            g.masked_l1_mean(b, &target, &mask)
        });
    }

    #[test]
    fn mean_and_relu() {
        check(&[3, 5], 4, |g, x| {
            let r = g.relu(x);
            let s = g.mul(r, x);
            g.mean(s)
        });
    }

    #[test]
    fn constants_do_not_receive_gradients() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::full(&[2], 1.0));
        let p = g.param(Tensor::full(&[2], 2.0));
        let m = g.mul(c, p);
        let s = g.sum(m);
        g.backward(s);
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(p).unwrap().data(), &[1.0, 1.0]);
    }
}
