//! Coarse-to-fine video inpainting generator and the patch discriminator.
//!
//! The coarse network fills every frame independently. The refinement
//! network warps the composited coarse frames onto the target grid, runs a
//! contextual-attention extractor and a global extractor over all frames,
//! assembles them with frame-deep 3D convolutions (attention in between for
//! the first branch), concatenates and decodes the target frame.

mod disc;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{patch_validity, DEFAULT_PATCH, DEFAULT_SCALE};
use crate::autograd::{ConvSpec, Graph, Var};
use crate::dataset::{Frame, MaskMap, VideoSequence};
use crate::error::{Error, Result};
use crate::geometry::{warp_mask, FlowField};
use crate::nn::{Activation, Bound, Checkpoint, Conv2d, GatedConv2d, ParamSet, TemporalConv};
use crate::tensor::Tensor;

pub use disc::{conv_lipschitz_factor, spectral_norm_estimate, Discriminator};

pub const CHECKPOINT_VERSION: u64 = 1;
/// Spatial reduction of the extractors and the coarse bottleneck.
pub const FEATURE_STRIDE: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InpaintConfig {
    /// Window length `F = 2δ + 1`.
    pub frames: usize,
    /// Width `c` of the first layer; features at 1/4 resolution have `4c`
    /// channels.
    pub base_channels: usize,
    /// Dilation rates of the bottleneck layers.
    pub dilations: Vec<usize>,
    pub ca_patch: usize,
    pub ca_scale: f64,
    /// Off reproduces the no-warp ablation: references enter unaligned.
    pub temporal_warping: bool,
    pub disc_channels: usize,
    pub disc_layers: usize,
}

impl Default for InpaintConfig {
    fn default() -> Self {
        Self {
            frames: 5,
            base_channels: 8,
            dilations: vec![2, 4],
            ca_patch: DEFAULT_PATCH,
            ca_scale: DEFAULT_SCALE,
            temporal_warping: true,
            disc_channels: 16,
            disc_layers: 6,
        }
    }
}

impl InpaintConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.frames == 0 || self.frames % 2 == 0 {
            return bad("frames must be odd and positive");
        }
        if self.base_channels == 0 || self.disc_channels == 0 || self.disc_layers == 0 {
            return bad("channel widths and discriminator depth must be positive");
        }
        if self.ca_patch % 2 == 0 {
            return bad("attention patch size must be odd");
        }
        if !(self.ca_scale > 0.0 && self.ca_scale.is_finite()) {
            return bad("attention scale must be positive");
        }
        if self.dilations.iter().any(|&d| d == 0) {
            return bad("dilation rates must be positive");
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        4 * self.base_channels
    }
}

#[derive(Debug, Clone)]
enum Layer {
    Gated(GatedConv2d),
    Up,
    Out(Conv2d),
}

/// A plain layer sequence; `Out` ends with tanh.
#[derive(Debug, Clone, Default)]
struct Stack(Vec<Layer>);

impl Stack {
    fn gated(&mut self, ps: &mut ParamSet, name: &str, cin: usize, cout: usize, k: usize, spec: ConvSpec, rng: &mut impl Rng) {
        let n = self.0.len();
        self.0.push(Layer::Gated(GatedConv2d::new(
            ps,
            &format!("{name}.{n}"),
            cin,
            cout,
            k,
            spec,
            Activation::Elu,
            rng,
        )));
    }

    fn conv(&mut self, ps: &mut ParamSet, name: &str, cin: usize, cout: usize, k: usize, rng: &mut impl Rng) {
        self.gated(ps, name, cin, cout, k, ConvSpec::same(k, 1), rng);
    }

    fn up(&mut self) {
        self.0.push(Layer::Up);
    }

    fn out(&mut self, ps: &mut ParamSet, name: &str, cin: usize, rng: &mut impl Rng) {
        let n = self.0.len();
        self.0.push(Layer::Out(Conv2d::new(ps, &format!("{name}.{n}"), cin, 3, 3, ConvSpec::same(3, 1), rng)));
    }

    fn forward(&self, g: &mut Graph, p: &Bound, mut x: Var) -> Var {
        for l in &self.0 {
            x = match l {
                Layer::Gated(c) => c.forward(g, p, x),
                Layer::Up => g.upsample_nearest(x, 2),
                Layer::Out(c) => {
                    let y = c.forward(g, p, x);
                    g.tanh(y)
                }
            };
        }
        x
    }
}

/// Encoder to 1/4 resolution: `5 → c → 2c → 4c`.
fn encoder(ps: &mut ParamSet, name: &str, c: usize, rng: &mut impl Rng) -> Stack {
    let mut s = Stack::default();
    s.conv(ps, name, 5, c, 5, rng);
    s.gated(ps, name, c, 2 * c, 3, ConvSpec::strided(3, 2), rng);
    s.conv(ps, name, 2 * c, 2 * c, 3, rng);
    s.gated(ps, name, 2 * c, 4 * c, 3, ConvSpec::strided(3, 2), rng);
    s.conv(ps, name, 4 * c, 4 * c, 3, rng);
    s
}

fn dilated(s: &mut Stack, ps: &mut ParamSet, name: &str, c: usize, dilations: &[usize], rng: &mut impl Rng) {
    for &d in dilations {
        s.gated(ps, name, 4 * c, 4 * c, 3, ConvSpec::same(3, d), rng);
    }
    s.conv(ps, name, 4 * c, 4 * c, 3, rng);
}

/// Decoder from `cin` channels at 1/4 resolution to RGB.
fn decoder(s: &mut Stack, ps: &mut ParamSet, name: &str, cin: usize, c: usize, rng: &mut impl Rng) {
    s.conv(ps, name, cin, 4 * c, 3, rng);
    s.conv(ps, name, 4 * c, 4 * c, 3, rng);
    s.up();
    s.conv(ps, name, 4 * c, 2 * c, 3, rng);
    s.conv(ps, name, 2 * c, 2 * c, 3, rng);
    s.up();
    s.conv(ps, name, 2 * c, c, 3, rng);
    let half = (c / 2).max(1);
    s.conv(ps, name, c, half, 3, rng);
    s.out(ps, name, half, rng);
}

/// One inference/training window in network form.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowInput {
    /// `[F, 3, H, W]` frames with holes zeroed.
    pub frames_in: Tensor,
    pub masks: Vec<MaskMap>,
    /// `U^{m→i}` per reference frame in index order.
    pub flows: Vec<FlowField>,
}

impl WindowInput {
    pub fn new(frames: &[Frame], masks: &[MaskMap], flows: &[FlowField]) -> Result<Self> {
        if frames.is_empty() || frames.len() != masks.len() {
            return Err(Error::shape(format!("{} frames vs {} masks", frames.len(), masks.len())));
        }
        let (w, h) = (frames[0].width(), frames[0].height());
        let mut data = Vec::with_capacity(frames.len() * 3 * w * h);
        for (f, m) in frames.iter().zip(masks) {
            if (f.width(), f.height()) != (w, h) {
                return Err(Error::shape("frames differ in size".to_string()));
            }
            data.extend(f.masked(m)?.pixels().data());
        }
        if frames.len() > 1 && flows.len() != frames.len() - 1 {
            return Err(Error::BadSequence(format!(
                "{} flows for {} frames",
                flows.len(),
                frames.len()
            )));
        }
        for fl in flows {
            if (fl.width(), fl.height()) != (w, h) {
                return Err(Error::shape("flow differs in size from frames".to_string()));
            }
        }
        Ok(Self {
            frames_in: Tensor::from_vec(&[frames.len(), 3, h, w], data)?,
            masks: masks.to_vec(),
            flows: flows.to_vec(),
        })
    }

    pub fn from_sequence(seq: &VideoSequence) -> Result<Self> {
        Self::new(&seq.frames, &seq.masks, &seq.flows)
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn target_index(&self) -> usize {
        self.len() / 2
    }

    pub fn width(&self) -> usize {
        self.frames_in.shape()[3]
    }

    pub fn height(&self) -> usize {
        self.frames_in.shape()[2]
    }

    /// `[F, 1, H, W]`, 1 = known.
    pub fn known_tensor(&self) -> Tensor {
        stack_masks(&self.masks, |m| m.to_tensor())
    }

    fn coarse_input(&self) -> Tensor {
        let (f, h, w) = (self.len(), self.height(), self.width());
        let hw = h * w;
        let mut data = Vec::with_capacity(f * 5 * hw);
        for (i, m) in self.masks.iter().enumerate() {
            data.extend_from_slice(&self.frames_in.data()[i * 3 * hw..(i + 1) * 3 * hw]);
            data.extend(std::iter::repeat_n(1.0, hw));
            data.extend(m.known().iter().map(|&k| if k { 0.0 } else { 1.0 }));
        }
        Tensor::from_vec(&[f, 5, h, w], data).expect("coarse input")
    }
}

fn stack_masks(masks: &[MaskMap], f: impl Fn(&MaskMap) -> Tensor) -> Tensor {
    let (h, w) = (masks[0].height(), masks[0].width());
    let mut data = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        data.extend(f(m).into_data());
    }
    Tensor::from_vec(&[masks.len(), 1, h, w], data).expect("mask stack")
}

/// Known only where every pixel of the `f×f` block is known.
pub fn min_pool_known(mask: &MaskMap, f: usize) -> MaskMap {
    let (w, h) = (mask.width() / f, mask.height() / f);
    MaskMap::from_fn(w, h, |x, y| {
        (0..f).all(|dy| (0..f).all(|dx| mask.is_known(x * f + dx, y * f + dy)))
    })
}

/// Graph handles produced by one generator pass.
#[derive(Debug, Clone, Copy)]
pub struct GenOutput {
    /// `[F, 3, H, W]` coarse predictions.
    pub coarse: Var,
    /// `[1, 3, H, W]` refined target.
    pub refined: Var,
    /// `[F, 4c, h, w]` attention-branch features in frame order.
    pub ca_features: Var,
    /// `[1, 4c, h, w]` output of the aggregator.
    pub aggregated: Var,
}

#[derive(Debug, Clone)]
pub struct Generator {
    pub config: InpaintConfig,
    pub params: ParamSet,
    coarse: Stack,
    ca_target: Stack,
    ca_ref: Stack,
    global_target: Stack,
    global_ref: Stack,
    aggregator: TemporalConv,
    merger: TemporalConv,
    decoder: Stack,
}

impl Generator {
    pub fn new(config: InpaintConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = config.base_channels;
        let mut ps = ParamSet::new();
        let mut coarse = encoder(&mut ps, "coarse", c, rng);
        dilated(&mut coarse, &mut ps, "coarse", c, &config.dilations, rng);
        decoder(&mut coarse, &mut ps, "coarse", 4 * c, c, rng);
        let ca_target = encoder(&mut ps, "ca_target", c, rng);
        let ca_ref = encoder(&mut ps, "ca_ref", c, rng);
        let mut global_target = encoder(&mut ps, "global_target", c, rng);
        dilated(&mut global_target, &mut ps, "global_target", c, &config.dilations, rng);
        let mut global_ref = encoder(&mut ps, "global_ref", c, rng);
        dilated(&mut global_ref, &mut ps, "global_ref", c, &config.dilations, rng);
        let fc = config.feature_channels();
        let aggregator = TemporalConv::new(&mut ps, "aggregator", config.frames, fc, fc, 3, rng);
        let merger = TemporalConv::new(&mut ps, "merger", config.frames, fc, fc, 3, rng);
        let mut dec = Stack::default();
        decoder(&mut dec, &mut ps, "decoder", 2 * fc, c, rng);
        Ok(Self {
            config,
            params: ps,
            coarse,
            ca_target,
            ca_ref,
            global_target,
            global_ref,
            aggregator,
            merger,
            decoder: dec,
        })
    }

    pub fn aggregator(&self) -> &TemporalConv {
        &self.aggregator
    }

    /// Parameter indices whose names start with `prefix`.
    pub fn group(&self, prefix: &str) -> Vec<usize> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, (n, _))| n.starts_with(prefix))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn check_input(&self, input: &WindowInput) -> Result<()> {
        let (h, w) = (input.height(), input.width());
        if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!("{w}x{h} is not divisible by 8")));
        }
        if input.len() != self.config.frames {
            return Err(Error::shape(format!(
                "window of {} frames, network built for {}",
                input.len(),
                self.config.frames
            )));
        }
        if input.len() > 1 && input.flows.len() != input.len() - 1 {
            return Err(Error::BadSequence("missing reference flows".into()));
        }
        Ok(())
    }

    /// Coarse pass over all frames with shared weights: `[F, 3, H, W]`.
    pub fn coarse_forward(&self, g: &mut Graph, p: &Bound, input: &WindowInput) -> Var {
        let x = g.constant(input.coarse_input());
        self.coarse.forward(g, p, x)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, input: &WindowInput) -> Result<GenOutput> {
        self.check_input(input)?;
        let coarse = self.coarse_forward(g, p, input);
        self.refine_forward(g, p, coarse, input)
    }

    /// Refinement given coarse predictions `[F, 3, H, W]`.
    pub fn refine_forward(&self, g: &mut Graph, p: &Bound, coarse: Var, input: &WindowInput) -> Result<GenOutput> {
        self.check_input(input)?;
        let (f, h, w) = (input.len(), input.height(), input.width());
        let m = input.target_index();
        let fin = g.constant(input.frames_in.clone());
        let comp = g.blend(fin, coarse, &input.known_tensor());

        let refs: Vec<usize> = (0..f).filter(|&i| i != m).collect();
        let mut aligned_masks = input.masks.clone();
        let tgt_rgb = g.index_batch(comp, &[m]);
        let ref_rgb = if refs.is_empty() {
            None
        } else {
            let r = g.index_batch(comp, &refs);
            Some(if self.config.temporal_warping {
                let mut flow = Vec::with_capacity(refs.len() * 2 * h * w);
                let mut usable = Vec::with_capacity(refs.len() * h * w);
                for (k, &i) in refs.iter().enumerate() {
                    let fl = &input.flows[k];
                    flow.extend(fl.to_tensor().into_data());
                    let wm = warp_mask(&input.masks[i], fl)?;
                    aligned_masks[i] = MaskMap::from_fn(w, h, |x, y| wm.is_known(x, y) && fl.is_valid(x, y));
                    usable.extend(fl.valid().iter().map(|&v| v as u8 as f64));
                }
                let flow = g.constant(Tensor::from_vec(&[refs.len(), 2, h, w], flow)?);
                let warped = g.warp(r, flow);
                g.mul_mask(warped, &Tensor::from_vec(&[refs.len(), 1, h, w], usable)?)
            } else {
                r
            })
        };

        let hole_of = |g: &mut Graph, idx: &[usize]| {
            let sub: Vec<MaskMap> = idx.iter().map(|&i| aligned_masks[i].clone()).collect();
            let (n, hw) = (idx.len(), h * w);
            let mut data = Vec::with_capacity(n * 2 * hw);
            for mk in &sub {
                data.extend(std::iter::repeat_n(1.0, hw));
                data.extend(mk.known().iter().map(|&k| if k { 0.0 } else { 1.0 }));
            }
            g.constant(Tensor::from_vec(&[n, 2, h, w], data).expect("mask channels"))
        };
        let tgt_aux = hole_of(g, &[m]);
        let tgt_in = g.concat_channels(&[tgt_rgb, tgt_aux]);
        let ref_in = ref_rgb.map(|r| {
            let aux = hole_of(g, &refs);
            g.concat_channels(&[r, aux])
        });

        let ca_t = self.ca_target.forward(g, p, tgt_in);
        let ca_stack = self.assemble(g, p, &self.ca_ref, ca_t, ref_in, m);
        let aggregated = self.aggregator.forward(g, p, ca_stack);

        let (hf, wf) = (h / FEATURE_STRIDE, w / FEATURE_STRIDE);
        let fg_known = min_pool_known(&aligned_masks[m], FEATURE_STRIDE);
        let mut union = vec![false; hf * wf];
        for mk in &aligned_masks {
            for (u, &k) in union.iter_mut().zip(min_pool_known(mk, FEATURE_STRIDE).known()) {
                *u |= k;
            }
        }
        let mut bg_valid = patch_validity(&union, hf, wf, self.config.ca_patch);
        if !bg_valid.iter().any(|&v| v) {
            bg_valid.iter_mut().for_each(|v| *v = true);
        }
        let ca_out = g.contextual_attention(
            ca_t,
            aggregated,
            bg_valid,
            &fg_known.to_tensor(),
            self.config.ca_patch,
            self.config.ca_scale,
        )?;

        let gl_t = self.global_target.forward(g, p, tgt_in);
        let gl_stack = self.assemble(g, p, &self.global_ref, gl_t, ref_in, m);
        let merged = self.merger.forward(g, p, gl_stack);

        let cat = g.concat_channels(&[ca_out, merged]);
        let refined = self.decoder.forward(g, p, cat);
        Ok(GenOutput {
            coarse,
            refined,
            ca_features: ca_stack,
            aggregated,
        })
    }

    /// Runs the reference branch and restores frame order around the target.
    fn assemble(&self, g: &mut Graph, p: &Bound, branch: &Stack, target: Var, refs: Option<Var>, m: usize) -> Var {
        let Some(r) = refs else { return target };
        let feats = branch.forward(g, p, r);
        let n = g.shape(feats)[0];
        let mut parts = Vec::new();
        if m > 0 {
            parts.push(g.index_batch(feats, &(0..m).collect::<Vec<_>>()));
        }
        parts.push(target);
        if m < n {
            parts.push(g.index_batch(feats, &(m..n).collect::<Vec<_>>()));
        }
        g.concat_batch(&parts)
    }

    /// Inference: refined target `[1, 3, H, W]` and coarse frames.
    pub fn infer(&self, input: &WindowInput) -> Result<(Tensor, Tensor)> {
        if !self.params.all_finite() {
            return Err(Error::BadParams("generator has non-finite parameters".into()));
        }
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let out = self.forward(&mut g, &p, input)?;
        Ok((g.value(out.refined).clone(), g.value(out.coarse).clone()))
    }

    pub fn store_into(&self, ck: &mut Checkpoint, prefix: &str) {
        self.params.store_into(ck, prefix);
    }

    pub fn load_from(&mut self, ck: &Checkpoint, prefix: &str) -> Result<()> {
        self.params.load_from(ck, prefix)
    }
}

/// `mask·I_in + (1 − mask)·pred`, selecting known pixels bit-exactly.
pub fn composite_output(pred: &Frame, input_target: &Frame, mask: &MaskMap) -> Result<Frame> {
    input_target.check_mask(mask)?;
    if (pred.width(), pred.height()) != (input_target.width(), input_target.height()) {
        return Err(Error::shape("prediction and input differ in size".to_string()));
    }
    Ok(Frame::from_fn(pred.width(), pred.height(), input_target.frame_id, |x, y| {
        let src = if mask.is_known(x, y) { input_target } else { pred };
        [0, 1, 2].map(|c| src.get(x, y, c))
    }))
}

/// Generator plus discriminator with their architecture metadata.
#[derive(Debug, Clone)]
pub struct InpaintModel {
    pub generator: Generator,
    pub discriminator: Discriminator,
}

impl InpaintModel {
    pub fn new(config: InpaintConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let generator = Generator::new(config.clone(), &mut rng)?;
        let discriminator = Discriminator::new(&config, &mut rng)?;
        Ok(Self {
            generator,
            discriminator,
        })
    }

    pub fn config(&self) -> &InpaintConfig {
        &self.generator.config
    }

    pub fn meta(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "inpaint",
            "version": CHECKPOINT_VERSION,
            "config": self.config(),
        })
    }

    pub fn store_into(&self, ck: &mut Checkpoint) {
        self.generator.store_into(ck, "g.");
        self.discriminator.store_into(ck, "d.");
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = inpaint_config_from_meta(&ck.meta)?;
        let mut model = Self::new(config, 0)?;
        model.generator.load_from(ck, "g.")?;
        model.discriminator.load_from(ck, "d.")?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ck = Checkpoint::new(self.meta());
        self.store_into(&mut ck);
        ck.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

pub(crate) fn inpaint_config_from_meta(meta: &serde_json::Value) -> Result<InpaintConfig> {
    if meta.get("kind").and_then(|v| v.as_str()) != Some("inpaint") {
        return Err(Error::format("checkpoint", "not an inpainting checkpoint"));
    }
    if meta.get("version").and_then(|v| v.as_u64()) != Some(CHECKPOINT_VERSION) {
        return Err(Error::format("checkpoint", "unsupported inpainting checkpoint version"));
    }
    let cfg = meta
        .get("config")
        .ok_or_else(|| Error::format("checkpoint", "missing inpainting config"))?;
    serde_json::from_value(cfg.clone()).map_err(|e| Error::format("checkpoint", e.to_string()))
}
