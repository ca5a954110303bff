//! Shadow detection: a U-net mapping RGB plus the object mask to a
//! per-pixel shadow probability.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvSpec, Graph, Var};
use crate::dataset::{Frame, MaskMap};
use crate::error::{Error, Result};
use crate::nn::{Activation, Bound, Checkpoint, Conv2d, ParamSet};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u64 = 1;
pub const DEFAULT_THRESHOLD: f64 = 0.5;
const SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShadowNetConfig {
    /// Number of down/up levels.
    pub depth: usize,
    pub base_channels: usize,
}

impl Default for ShadowNetConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            base_channels: 32,
        }
    }
}

#[derive(Debug, Clone)]
struct Block {
    a: Conv2d,
    b: Conv2d,
}

impl Block {
    fn new(ps: &mut ParamSet, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Self {
            a: Conv2d::new(ps, &format!("{name}.a"), cin, cout, 3, ConvSpec::same(3, 1), rng),
            b: Conv2d::new(ps, &format!("{name}.b"), cout, cout, 3, ConvSpec::same(3, 1), rng),
        }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let act = Activation::LeakyRelu(SLOPE);
        let y = self.a.forward(g, p, x);
        let y = act.apply(g, y);
        let y = self.b.forward(g, p, y);
        act.apply(g, y)
    }
}

#[derive(Debug, Clone)]
pub struct ShadowNet {
    pub config: ShadowNetConfig,
    pub params: ParamSet,
    down: Vec<Block>,
    bottom: Block,
    up: Vec<Conv2d>,
    merge: Vec<Block>,
    head: Conv2d,
}

impl ShadowNet {
    pub fn new(config: ShadowNetConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.depth == 0 || config.base_channels == 0 {
            return Err(Error::Config("shadow net depth and width must be positive".into()));
        }
        let mut ps = ParamSet::new();
        let ch = |l: usize| config.base_channels << l;
        let mut down = Vec::new();
        let mut cin = 4;
        for l in 0..config.depth {
            down.push(Block::new(&mut ps, &format!("down{l}"), cin, ch(l), rng));
            cin = ch(l);
        }
        let bottom = Block::new(&mut ps, "bottom", cin, ch(config.depth), rng);
        let mut up = Vec::new();
        let mut merge = Vec::new();
        for l in (0..config.depth).rev() {
            up.push(Conv2d::new(&mut ps, &format!("up{l}"), ch(l + 1), ch(l), 3, ConvSpec::same(3, 1), rng));
            merge.push(Block::new(&mut ps, &format!("merge{l}"), 2 * ch(l), ch(l), rng));
        }
        let head = Conv2d::new(&mut ps, "head", ch(0), 1, 1, ConvSpec::default(), rng);
        Ok(Self {
            config,
            params: ps,
            down,
            bottom,
            up,
            merge,
            head,
        })
    }

    /// `[1, 4, H, W]`: RGB then the object mask coded hole = 1.
    pub fn input_tensor(frame: &Frame, object_mask: &MaskMap) -> Result<Tensor> {
        frame.check_mask(object_mask)?;
        let rgb = frame.to_batch();
        let hole = object_mask.hole_tensor();
        let (h, w) = (frame.height(), frame.width());
        let mut data = rgb.into_data();
        data.extend_from_slice(hole.data());
        Tensor::from_vec(&[1, 4, h, w], data)
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let q = 1 << self.config.depth;
        if h % q != 0 || w % q != 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!("{w}x{h} input is not divisible by {q}")));
        }
        Ok(())
    }

    /// `x: [N, 4, H, W]` to probabilities `[N, 1, H, W]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let mut skips = Vec::new();
        let mut y = x;
        for blk in &self.down {
            y = blk.forward(g, p, y);
            skips.push(y);
            y = g.max_pool2(y);
        }
        y = self.bottom.forward(g, p, y);
        for (up, blk) in self.up.iter().zip(&self.merge) {
            y = g.upsample_nearest(y, 2);
            y = up.forward(g, p, y);
            y = g.leaky_relu(y, SLOPE);
            let skip = skips.pop().expect("one skip per level");
            y = g.concat_channels(&[skip, y]);
            y = blk.forward(g, p, y);
        }
        let logits = self.head.forward(g, p, y);
        g.sigmoid(logits)
    }

    /// Shadow probability map `[H, W]` in inference mode.
    pub fn predict(&self, frame: &Frame, object_mask: &MaskMap) -> Result<Tensor> {
        self.check_input(frame.height(), frame.width())?;
        if !self.params.all_finite() {
            return Err(Error::BadParams("shadow net has non-finite parameters".into()));
        }
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let x = g.constant(Self::input_tensor(frame, object_mask)?);
        let y = self.forward(&mut g, &p, x);
        g.value(y).clone().reshape(&[frame.height(), frame.width()])
    }

    pub fn store_into(&self, ckpt: &mut Checkpoint, prefix: &str) {
        self.params.store_into(ckpt, prefix);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ck = Checkpoint::new(serde_json::json!({
            "kind": "shadow",
            "version": CHECKPOINT_VERSION,
            "depth": self.config.depth,
            "base_channels": self.config.base_channels,
        }));
        self.store_into(&mut ck, "");
        ck.save(path)
    }

    /// Rebuilds the architecture from the checkpoint metadata.
    pub fn from_checkpoint(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let cfg = shadow_config_from_meta(&ck.meta)?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut net = Self::new(cfg, &mut rng)?;
        net.params.load_from(ck, prefix)?;
        Ok(net)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, "")
    }
}

pub(crate) fn shadow_config_from_meta(meta: &serde_json::Value) -> Result<ShadowNetConfig> {
    let field = |k: &str| {
        meta.get(k)
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::format("checkpoint", format!("missing {k} in shadow metadata")))
    };
    if meta.get("kind").and_then(|v| v.as_str()) != Some("shadow") {
        return Err(Error::format("checkpoint", "not a shadow-net checkpoint"));
    }
    if field("version")? != CHECKPOINT_VERSION {
        return Err(Error::format("checkpoint", "unsupported shadow-net version"));
    }
    Ok(ShadowNetConfig {
        depth: field("depth")? as usize,
        base_channels: field("base_channels")? as usize,
    })
}

/// Per-pixel shadow probability `[H, W]` for one frame.
pub fn shadow_forward(rgb: &Frame, object_mask: &MaskMap, params: &ShadowNet) -> Result<Tensor> {
    params.predict(rgb, object_mask)
}

/// Intersection over union of `{pred ≥ threshold}` against binary labels;
/// 1 when both sets are empty.
pub fn iou(pred: &Tensor, labels: &Tensor, threshold: f64) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &y) in pred.data().iter().zip(labels.data()) {
        let (a, b) = (p >= threshold, y >= 0.5);
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{max_rel_error, numeric_grad};
    use crate::losses::{shadow_loss, shadow_loss_graph};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(depth: usize, base: usize, seed: u64) -> ShadowNet {
        ShadowNet::new(
            ShadowNetConfig {
                depth,
                base_channels: base,
            },
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap()
    }

    fn frame(w: usize, h: usize, seed: u64) -> Frame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Frame::from_fn(w, h, 0, |_, _| [0, 1, 2].map(|_| rng.random_range(-1.0..1.0)))
    }

    #[test]
    fn shape_and_range() {
        let net = small(2, 4, 0);
        let f = frame(64, 64, 1);
        let m = MaskMap::with_rect_hole(64, 64, 20, 20, 10, 10);
        let p = shadow_forward(&f, &m, &net).unwrap();
        assert_eq!(p.shape(), &[64, 64]);
        assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(matches!(shadow_forward(&frame(30, 32, 1), &MaskMap::all_known(30, 32), &net), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn zero_params_give_one_half() {
        let mut net = small(2, 4, 0);
        net.params.tensors_mut().iter_mut().for_each(|t| t.data_mut().fill(0.0));
        let p = shadow_forward(&frame(16, 16, 2), &MaskMap::all_known(16, 16), &net).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.5));
        net.params.tensors_mut()[0].data_mut()[0] = f64::NAN;
        assert!(matches!(
            shadow_forward(&frame(16, 16, 2), &MaskMap::all_known(16, 16), &net),
            Err(Error::BadParams(_))
        ));
    }

    #[test]
    fn translation_covariance_on_interior() {
        let net = small(1, 4, 3);
        let (w, h) = (40, 40);
        let base = frame(w + 2, h, 4);
        let a = Frame::from_fn(w, h, 0, |x, y| [0, 1, 2].map(|c| base.get(x + 2, y, c)));
        let b = Frame::from_fn(w, h, 0, |x, y| [0, 1, 2].map(|c| base.get(x, y, c)));
        let m = MaskMap::all_known(w, h);
        let pa = shadow_forward(&a, &m, &net).unwrap();
        let pb = shadow_forward(&b, &m, &net).unwrap();
        for y in 12..28 {
            for x in 12..26 {
                assert!((pa.data()[y * w + x] - pb.data()[y * w + x + 2]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let net = small(1, 2, 5);
        let f = frame(8, 8, 6);
        let m = MaskMap::with_rect_hole(8, 8, 2, 2, 3, 3);
        let labels = Tensor::from_fn(&[1, 1, 8, 8], |i| ((i % 8) > 4 && (i / 8) > 3) as u8 as f64);
        let x = ShadowNet::input_tensor(&f, &m).unwrap();
        let loss_with = |ps: &ParamSet| {
            let mut g = Graph::new();
            let p = ps.bind_frozen(&mut g);
            let xv = g.constant(x.clone());
            let y = net.forward(&mut g, &p, xv);
            shadow_loss(g.value(y), &labels).unwrap()
        };
        let mut g = Graph::new();
        let p = net.params.bind(&mut g);
        let xv = g.constant(x.clone());
        let y = net.forward(&mut g, &p, xv);
        let l = shadow_loss_graph(&mut g, y, &labels).unwrap();
        g.backward(l);
        let grads = net.params.grads(&g, &p);
        // first conv weight and the head
        for idx in [0, net.params.len() - 2, net.params.len() - 1] {
            let num = numeric_grad(&net.params.tensors()[idx], 1e-6, |t| {
                let mut ps = net.params.clone();
                ps.tensors_mut()[idx] = t.clone();
                loss_with(&ps)
            });
            assert!(max_rel_error(&grads[idx], &num, 1e-7) < 1e-3, "param {idx}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let net = small(2, 3, 7);
        let path = dir.path().join("s.ckpt");
        net.save(&path).unwrap();
        let back = ShadowNet::load(&path).unwrap();
        assert_eq!(back.config, net.config);
        assert_eq!(back.params, net.params);
    }

    #[test]
    fn iou_cases() {
        let l = Tensor::from_vec(&[4], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(iou(&l, &l, 0.5), 1.0);
        let p = Tensor::from_vec(&[4], vec![0.9, 0.1, 0.7, 0.0]).unwrap();
        assert!((iou(&p, &l, 0.5) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(iou(&Tensor::zeros(&[4]), &Tensor::zeros(&[4]), 0.5), 1.0);
    }
}
