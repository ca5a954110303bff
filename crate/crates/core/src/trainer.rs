//! Training loops for the shadow branch and the inpainting GAN.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::dataset::{preprocess_train_with, CropConfig, MaskMap, ShadowSample, VideoSequence};
use crate::error::{Error, Result};
use crate::inpaint_net::{InpaintConfig, InpaintModel, WindowInput};
use crate::losses::{
    build_loss_validity, d_hinge_loss_graph, g_hinge_loss_graph, reconstruction_loss_graph, shadow_loss_graph,
    LossWeights,
};
use crate::nn::{Adam, AdamConfig, Checkpoint};
use crate::shadow_net::{iou, ShadowNet, ShadowNetConfig};
use crate::tensor::Tensor;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const LATEST: &str = "latest.ckpt";

/// Every training knob, read from a flat TOML table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub max_iters: u64,
    pub seq_len: usize,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub bottom_crop_width: usize,
    pub bottom_crop_height: usize,
    pub train_crop_width: usize,
    pub train_crop_height: usize,
    pub eval_crop_width: usize,
    pub eval_crop_height: usize,
    pub alpha: f64,
    pub adv_weight: f64,
    pub base_channels: usize,
    pub ca_patch: usize,
    pub ca_scale: f64,
    pub temporal_warping: bool,
    pub disc_channels: usize,
    pub disc_layers: usize,
    pub shadow_depth: usize,
    pub shadow_base_channels: usize,
    pub shadow_threshold: f64,
    /// Bounded queue depth of the data prefetcher.
    pub prefetch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let crops = CropConfig::default();
        let inp = InpaintConfig::default();
        let sh = ShadowNetConfig::default();
        let weights = LossWeights::default();
        let adam = AdamConfig::default();
        Self {
            learning_rate: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            batch_size: 8,
            max_iters: 2000,
            seq_len: inp.frames,
            seed: 0,
            checkpoint_every: 500,
            bottom_crop_width: crops.bottom.0,
            bottom_crop_height: crops.bottom.1,
            train_crop_width: crops.train.0,
            train_crop_height: crops.train.1,
            eval_crop_width: crops.eval.0,
            eval_crop_height: crops.eval.1,
            alpha: weights.alpha,
            adv_weight: weights.adv_weight,
            base_channels: inp.base_channels,
            ca_patch: inp.ca_patch,
            ca_scale: inp.ca_scale,
            temporal_warping: inp.temporal_warping,
            disc_channels: inp.disc_channels,
            disc_layers: inp.disc_layers,
            shadow_depth: sh.depth,
            shadow_base_channels: sh.base_channels,
            shadow_threshold: crate::shadow_net::DEFAULT_THRESHOLD,
            prefetch: 2,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.checkpoint_every == 0 || self.prefetch == 0 {
            return bad("batch_size, checkpoint_every and prefetch must be positive");
        }
        if self.seq_len % 2 == 0 {
            return bad("seq_len must be odd");
        }
        if [
            self.bottom_crop_width,
            self.bottom_crop_height,
            self.train_crop_width,
            self.train_crop_height,
            self.eval_crop_width,
            self.eval_crop_height,
        ]
        .contains(&0)
        {
            return bad("crop sizes must be positive");
        }
        if !(self.shadow_threshold > 0.0 && self.shadow_threshold < 1.0) {
            return bad("shadow_threshold must lie in (0, 1)");
        }
        self.loss_weights().validate()?;
        self.inpaint_config().validate()
    }

    pub fn crop_config(&self) -> CropConfig {
        CropConfig {
            bottom: (self.bottom_crop_width, self.bottom_crop_height),
            train: (self.train_crop_width, self.train_crop_height),
            eval: (self.eval_crop_width, self.eval_crop_height),
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            ..Default::default()
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            adv_weight: self.adv_weight,
        }
    }

    pub fn inpaint_config(&self) -> InpaintConfig {
        InpaintConfig {
            frames: self.seq_len,
            base_channels: self.base_channels,
            ca_patch: self.ca_patch,
            ca_scale: self.ca_scale,
            temporal_warping: self.temporal_warping,
            disc_channels: self.disc_channels,
            disc_layers: self.disc_layers,
            ..Default::default()
        }
    }

    pub fn shadow_config(&self) -> ShadowNetConfig {
        ShadowNetConfig {
            depth: self.shadow_depth,
            base_channels: self.shadow_base_channels,
        }
    }
}

/// Generator-side losses per iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: u64,
    #[serde(rename = "L_g")]
    pub l_g: f64,
    #[serde(rename = "L_G")]
    pub l_adv_g: f64,
    #[serde(rename = "L_D")]
    pub l_d: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShadowRecord {
    pub iter: u64,
    #[serde(rename = "L_shadow")]
    pub loss: f64,
    /// Held-out IoU, filled at checkpoints.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iou: Option<f64>,
    pub wall_ms: u64,
}

/// Append-only line-delimited log.
#[derive(Debug)]
pub struct JsonlLog {
    out: BufWriter<File>,
    path: PathBuf,
}

impl JsonlLog {
    pub fn append(path: &Path) -> Result<Self> {
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            out: BufWriter::new(f),
            path: path.to_path_buf(),
        })
    }

    pub fn write<T: Serialize>(&mut self, rec: &T) -> Result<()> {
        let line = serde_json::to_string(rec).expect("record serialises");
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// Runs `produce` for every index on a producer thread, handing results to
/// `consume` in index order through a bounded queue. Stops at the first
/// error from either side.
pub fn prefetch<T: Send>(
    range: Range<u64>,
    depth: usize,
    produce: impl Fn(u64) -> Result<T> + Sync,
    mut consume: impl FnMut(u64, T) -> Result<()>,
) -> Result<()> {
    std::thread::scope(|s| {
        let (tx, rx) = sync_channel::<(u64, Result<T>)>(depth.max(1));
        let produce = &produce;
        let range2 = range.clone();
        s.spawn(move || {
            for i in range2 {
                let item = produce(i);
                let failed = item.is_err();
                if tx.send((i, item)).is_err() || failed {
                    break;
                }
            }
        });
        for (i, item) in rx {
            consume(i, item?)?;
        }
        Ok(())
    })
}

/// Deterministic per-iteration stream, so resumed runs see the same data.
fn iter_rng(seed: u64, iter: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iter.wrapping_add(1));
    rng
}

fn check_finite(v: f64, iteration: u64, component: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            iteration: iteration as usize,
            component: component.to_string(),
        })
    }
}

fn ckpt_path(dir: &Path, iter: u64) -> PathBuf {
    dir.join(format!("ckpt_{iter:06}.ckpt"))
}

fn save_twice(ck: &Checkpoint, dir: &Path, iter: u64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    ck.save(&ckpt_path(dir, iter))?;
    ck.save(&dir.join(LATEST))
}

/// One window prepared for a training step.
#[derive(Debug, Clone, PartialEq)]
pub struct InpaintSample {
    pub window: WindowInput,
    /// `[F, 3, H, W]` ground truth.
    pub gt: Tensor,
    /// `[F, 1, H, W]` loss validity (real objects excluded).
    pub valid: Tensor,
}

impl InpaintSample {
    pub fn from_sequence(seq: &VideoSequence) -> Result<Self> {
        let window = WindowInput::from_sequence(seq)?;
        let (w, h) = (seq.width(), seq.height());
        let mut gt = Vec::with_capacity(seq.len() * 3 * w * h);
        let mut valid = Vec::with_capacity(seq.len() * w * h);
        for (i, f) in seq.frames.iter().enumerate() {
            gt.extend_from_slice(f.pixels().data());
            let real = match &seq.object_masks {
                Some(o) => o[i].clone(),
                None => MaskMap::all_known(w, h),
            };
            valid.extend(build_loss_validity(&real, &seq.masks[i])?.to_tensor().into_data());
        }
        Ok(Self {
            window,
            gt: Tensor::from_vec(&[seq.len(), 3, h, w], gt)?,
            valid: Tensor::from_vec(&[seq.len(), 1, h, w], valid)?,
        })
    }

    fn target_channels(&self, rgb: Tensor) -> Tensor {
        let m = self.window.target_index();
        let mut data = rgb.into_data();
        data.extend(self.window.masks[m].hole_tensor().into_data());
        Tensor::from_vec(&[1, 4, self.window.height(), self.window.width()], data).expect("disc input")
    }
}

/// GAN training state: model, both optimizers and the iteration counter.
#[derive(Debug, Clone)]
pub struct InpaintTrainer {
    pub config: TrainConfig,
    pub model: InpaintModel,
    opt_g: Adam,
    opt_d: Adam,
    pub iter: u64,
}

impl InpaintTrainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = InpaintModel::new(config.inpaint_config(), config.seed)?;
        let opt_g = Adam::new(config.adam_config(), &model.generator.params);
        let opt_d = Adam::new(config.adam_config(), &model.discriminator.params);
        Ok(Self {
            config,
            model,
            opt_g,
            opt_d,
            iter: 0,
        })
    }

    /// Draws and prepares the batch of iteration `iter`.
    pub fn batch_for(config: &TrainConfig, data: &[VideoSequence], iter: u64) -> Result<Vec<InpaintSample>> {
        if data.is_empty() {
            return Err(Error::NoData);
        }
        let mut rng = iter_rng(config.seed, iter);
        let crop = config.crop_config();
        (0..config.batch_size)
            .map(|_| {
                let seq = &data[rng.random_range(0..data.len())];
                InpaintSample::from_sequence(&preprocess_train_with(seq, &crop, &mut rng)?)
            })
            .collect()
    }

    /// One discriminator update followed by one generator update.
    pub fn step(&mut self, batch: &[InpaintSample]) -> Result<LossRecord> {
        let t0 = Instant::now();
        let it = self.iter;
        let weights = self.config.loss_weights();
        let bsz = batch.len() as f64;
        if batch.is_empty() {
            return Err(Error::NoData);
        }

        // generator graph first; its detached outputs feed the D step
        let gen = &self.model.generator;
        let mut g = Graph::new();
        let gp = gen.params.bind(&mut g);
        let mut outs = Vec::with_capacity(batch.len());
        let mut l_g_sum = None;
        for s in batch {
            let o = gen.forward(&mut g, &gp, &s.window)?;
            let l = reconstruction_loss_graph(&mut g, o.coarse, o.refined, &s.gt, &s.valid, weights.alpha)?;
            l_g_sum = Some(match l_g_sum {
                None => l,
                Some(a) => g.add(a, l),
            });
            outs.push(o);
        }
        let l_g = g.scale(l_g_sum.expect("non-empty batch"), 1.0 / bsz);
        let known_t: Vec<Tensor> = batch
            .iter()
            .map(|s| s.window.masks[s.window.target_index()].to_tensor())
            .collect();
        let fin_t: Vec<Tensor> = batch
            .iter()
            .map(|s| s.window.frames_in.narrow0(s.window.target_index(), 1))
            .collect();

        // discriminator step on composited fakes
        let disc = &mut self.model.discriminator;
        disc.power_iteration(1);
        let mut gd = Graph::new();
        let dp = disc.params.bind(&mut gd);
        let mut l_d_sum = None;
        for (k, s) in batch.iter().enumerate() {
            let refined = g.value(outs[k].refined);
            let m = &known_t[k];
            let hw = m.len();
            let fake = Tensor::from_fn(refined.shape(), |i| {
                let mi = m.data()[i % hw];
                mi * fin_t[k].data()[i] + (1.0 - mi) * refined.data()[i]
            });
            let real = s.gt.narrow0(s.window.target_index(), 1);
            let fake_v = gd.constant(s.target_channels(fake));
            let real_v = gd.constant(s.target_channels(real));
            let d_real = disc.forward(&mut gd, &dp, real_v)?;
            let d_fake = disc.forward(&mut gd, &dp, fake_v)?;
            let l = d_hinge_loss_graph(&mut gd, d_real, d_fake);
            l_d_sum = Some(match l_d_sum {
                None => l,
                Some(a) => gd.add(a, l),
            });
        }
        let l_d = gd.scale(l_d_sum.expect("non-empty batch"), 1.0 / bsz);
        let l_d_val = check_finite(gd.value(l_d).item(), it, "L_D")?;
        gd.backward(l_d);
        let d_grads = disc.params.grads(&gd, &dp);
        self.opt_d.update(&mut disc.params, &d_grads);

        // generator adversarial term against the updated discriminator
        let dpf = disc.params.bind_frozen(&mut g);
        let mut adv_sum = None;
        for (k, s) in batch.iter().enumerate() {
            let fin = g.constant(fin_t[k].clone());
            let comp = g.blend(fin, outs[k].refined, &known_t[k]);
            let hole = g.constant(s.window.masks[s.window.target_index()].hole_tensor());
            let x = g.concat_channels(&[comp, hole]);
            let d_fake = disc.forward(&mut g, &dpf, x)?;
            let l = g_hinge_loss_graph(&mut g, d_fake);
            adv_sum = Some(match adv_sum {
                None => l,
                Some(a) => g.add(a, l),
            });
        }
        let adv = g.scale(adv_sum.expect("non-empty batch"), 1.0 / bsz);
        let l_g_val = check_finite(g.value(l_g).item(), it, "L_g")?;
        let adv_val = check_finite(g.value(adv).item(), it, "L_G")?;
        let weighted = g.scale(adv, weights.adv_weight);
        let total = g.add(l_g, weighted);
        g.backward(total);
        let gen = &mut self.model.generator;
        let grads = gen.params.grads(&g, &gp);
        self.opt_g.update(&mut gen.params, &grads);

        if !gen.params.all_finite() {
            return Err(Error::NonFinite {
                iteration: it as usize,
                component: "generator parameters".into(),
            });
        }
        if !self.model.discriminator.params.all_finite() {
            return Err(Error::NonFinite {
                iteration: it as usize,
                component: "discriminator parameters".into(),
            });
        }
        self.iter += 1;
        Ok(LossRecord {
            iter: self.iter,
            l_g: l_g_val,
            l_adv_g: adv_val,
            l_d: l_d_val,
            wall_ms: t0.elapsed().as_millis() as u64,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut meta = self.model.meta();
        meta["iter"] = self.iter.into();
        meta["train"] = serde_json::to_value(&self.config).expect("config serialises");
        let mut ck = Checkpoint::new(meta);
        self.model.store_into(&mut ck);
        self.opt_g.store_into(&mut ck, "opt_g.");
        self.opt_d.store_into(&mut ck, "opt_d.");
        ck
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    /// Restores a training checkpoint, including optimizer moments and the
    /// discriminator's singular-vector estimates.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: TrainConfig = ck
            .meta
            .get("train")
            .cloned()
            .ok_or_else(|| Error::format("checkpoint", "not a training checkpoint"))
            .and_then(|v| serde_json::from_value(v).map_err(|e| Error::format("checkpoint", e.to_string())))?;
        let mut t = Self::new(config)?;
        t.model = InpaintModel::from_checkpoint(ck)?;
        t.opt_g.load_from(ck, "opt_g.")?;
        t.opt_d.load_from(ck, "opt_d.")?;
        t.iter = ck.meta.get("iter").and_then(|v| v.as_u64()).unwrap_or(0);
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[derive(Debug, Clone)]
pub struct InpaintReport {
    pub log: Vec<LossRecord>,
    pub trainer: InpaintTrainer,
}

/// Trains from `trainer.iter` up to `config.max_iters`. With an output
/// directory, appends to the JSONL log and writes checkpoints every
/// `checkpoint_every` iterations and at the end (the initial state when
/// there is nothing to train).
pub fn train_inpainting_from(
    mut trainer: InpaintTrainer,
    data: &[VideoSequence],
    out_dir: Option<&Path>,
) -> Result<InpaintReport> {
    if data.is_empty() {
        return Err(Error::NoData);
    }
    let cfg = trainer.config.clone();
    let mut log = Vec::new();
    let mut writer = match out_dir {
        Some(d) => {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            Some(JsonlLog::append(&d.join(LOG_FILE))?)
        }
        None => None,
    };
    prefetch(
        trainer.iter..cfg.max_iters.max(trainer.iter),
        cfg.prefetch,
        |i| InpaintTrainer::batch_for(&cfg, data, i),
        |_, batch| {
            let rec = trainer.step(&batch)?;
            if let Some(w) = writer.as_mut() {
                w.write(&rec)?;
            }
            log.push(rec);
            if let Some(d) = out_dir {
                if trainer.iter % cfg.checkpoint_every == 0 && trainer.iter < cfg.max_iters {
                    save_twice(&trainer.checkpoint(), d, trainer.iter)?;
                }
            }
            Ok(())
        },
    )?;
    if let Some(d) = out_dir {
        save_twice(&trainer.checkpoint(), d, trainer.iter)?;
    }
    Ok(InpaintReport { log, trainer })
}

pub fn train_inpainting(config: TrainConfig, data: &[VideoSequence], out_dir: Option<&Path>) -> Result<InpaintReport> {
    train_inpainting_from(InpaintTrainer::new(config)?, data, out_dir)
}

#[derive(Debug, Clone)]
pub struct ShadowTrainer {
    pub config: TrainConfig,
    pub net: ShadowNet,
    opt: Adam,
    pub iter: u64,
}

impl ShadowTrainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let net = ShadowNet::new(config.shadow_config(), &mut ChaCha8Rng::seed_from_u64(config.seed))?;
        let opt = Adam::new(config.adam_config(), &net.params);
        Ok(Self {
            config,
            net,
            opt,
            iter: 0,
        })
    }

    pub fn batch_for<'a>(config: &TrainConfig, data: &'a [ShadowSample], iter: u64) -> Result<Vec<&'a ShadowSample>> {
        if data.is_empty() {
            return Err(Error::NoData);
        }
        let mut rng = iter_rng(config.seed, iter);
        Ok((0..config.batch_size).map(|_| &data[rng.random_range(0..data.len())]).collect())
    }

    /// One Adam step on the mean per-image weighted BCE.
    pub fn step(&mut self, batch: &[&ShadowSample]) -> Result<ShadowRecord> {
        if batch.is_empty() {
            return Err(Error::NoData);
        }
        let t0 = Instant::now();
        let mut g = Graph::new();
        let p = self.net.params.bind(&mut g);
        let mut sum = None;
        for s in batch {
            self.net.check_input(s.frame.height(), s.frame.width())?;
            let x = g.constant(ShadowNet::input_tensor(&s.frame, &s.object_mask)?);
            let y = self.net.forward(&mut g, &p, x);
            let l = shadow_loss_graph(&mut g, y, &s.labels)?;
            sum = Some(match sum {
                None => l,
                Some(a) => g.add(a, l),
            });
        }
        let loss = g.scale(sum.expect("non-empty batch"), 1.0 / batch.len() as f64);
        let val = check_finite(g.value(loss).item(), self.iter, "L_shadow")?;
        g.backward(loss);
        let grads = self.net.params.grads(&g, &p);
        self.opt.update(&mut self.net.params, &grads);
        if !self.net.params.all_finite() {
            return Err(Error::NonFinite {
                iteration: self.iter as usize,
                component: "shadow parameters".into(),
            });
        }
        self.iter += 1;
        Ok(ShadowRecord {
            iter: self.iter,
            loss: val,
            iou: None,
            wall_ms: t0.elapsed().as_millis() as u64,
        })
    }

    /// Mean IoU of thresholded predictions over a labelled set.
    pub fn evaluate_iou(&self, data: &[ShadowSample]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::NoData);
        }
        let mut total = 0.0;
        for s in data {
            let p = self.net.predict(&s.frame, &s.object_mask)?;
            total += iou(&p, &s.labels, self.config.shadow_threshold);
        }
        Ok(total / data.len() as f64)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(serde_json::json!({
            "kind": "shadow",
            "version": crate::shadow_net::CHECKPOINT_VERSION,
            "depth": self.net.config.depth,
            "base_channels": self.net.config.base_channels,
            "iter": self.iter,
            "train": self.config,
        }));
        self.net.store_into(&mut ck, "");
        self.opt.store_into(&mut ck, "opt.");
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: TrainConfig = ck
            .meta
            .get("train")
            .cloned()
            .ok_or_else(|| Error::format("checkpoint", "not a training checkpoint"))
            .and_then(|v| serde_json::from_value(v).map_err(|e| Error::format("checkpoint", e.to_string())))?;
        let mut t = Self::new(config)?;
        t.net = ShadowNet::from_checkpoint(ck, "")?;
        t.opt = Adam::new(t.config.adam_config(), &t.net.params);
        t.opt.load_from(ck, "opt.")?;
        t.iter = ck.meta.get("iter").and_then(|v| v.as_u64()).unwrap_or(0);
        Ok(t)
    }
}

#[derive(Debug, Clone)]
pub struct ShadowReport {
    pub log: Vec<ShadowRecord>,
    pub trainer: ShadowTrainer,
}

/// Shadow-branch loop; IoU on `heldout` is logged at checkpoints and at the
/// end when a held-out set is given.
pub fn train_shadow(
    config: TrainConfig,
    data: &[ShadowSample],
    heldout: &[ShadowSample],
    out_dir: Option<&Path>,
) -> Result<ShadowReport> {
    if data.is_empty() {
        return Err(Error::NoData);
    }
    let mut trainer = ShadowTrainer::new(config)?;
    let cfg = trainer.config.clone();
    let mut log = Vec::new();
    let mut writer = match out_dir {
        Some(d) => {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            Some(JsonlLog::append(&d.join(LOG_FILE))?)
        }
        None => None,
    };
    prefetch(
        0..cfg.max_iters,
        cfg.prefetch,
        |i| ShadowTrainer::batch_for(&cfg, data, i),
        |_, batch| {
            let mut rec = trainer.step(&batch)?;
            let at_ckpt = trainer.iter % cfg.checkpoint_every == 0 || trainer.iter == cfg.max_iters;
            if at_ckpt && !heldout.is_empty() {
                rec.iou = Some(trainer.evaluate_iou(heldout)?);
            }
            if let Some(w) = writer.as_mut() {
                w.write(&rec)?;
            }
            log.push(rec);
            if let (Some(d), true) = (out_dir, at_ckpt && trainer.iter < cfg.max_iters) {
                save_twice(&trainer.checkpoint(), d, trainer.iter)?;
            }
            Ok(())
        },
    )?;
    if let Some(d) = out_dir {
        save_twice(&trainer.checkpoint(), d, trainer.iter)?;
    }
    Ok(ShadowReport { log, trainer })
}
