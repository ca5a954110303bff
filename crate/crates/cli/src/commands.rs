use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vinpaint::dataset::{
    frame_file, list_frame_ids, load_sequence_with, load_shadow_samples, read_camera, read_frame, read_mask,
    save_sequence, write_frame, write_mask, CameraModel, Frame, LoadOptions, SequenceFiles, VideoSequence,
};
use vinpaint::geometry::{flow_from_depth, FlowField};
use vinpaint::inpaint_net::InpaintModel;
use vinpaint::maskgen::generate_temporal_masks;
use vinpaint::metrics::{evaluate as score, to_255};
use vinpaint::pipeline::{inpaint_masks, inpaint_video, InferOptions};
use vinpaint::shadow_net::ShadowNet;
use vinpaint::synth::{shadow_video, translating_sequence, translation_cameras, Occluder, TranslationSpec};
use vinpaint::tensor::Tensor;
use vinpaint::trainer::{train_inpainting, train_shadow as run_shadow_training, TrainConfig};
use vinpaint::{Error, Result};

use crate::{EvaluateArgs, FixtureKind, FlowArgs, GenMasksArgs, InferArgs, SynthArgs, TrainArgs};

/// Environment variable naming the flow cache root read by training and
/// inference.
pub const CACHE_ENV: &str = "AUTOREMOVER_CACHE";

fn cache_root() -> Option<PathBuf> {
    std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

fn flow_file(root: &Path, seq: &str, m: usize, i: usize) -> PathBuf {
    root.join(seq).join("flow").join(format!("{m}_{i}.bin"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d).map_err(|e| io_err(d, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_owned(),
        source,
    }
}

/// Per-frame cameras of one sequence, read on first use.
struct Cameras<'a> {
    data: &'a Path,
    seq: &'a str,
    loaded: std::collections::BTreeMap<usize, CameraModel>,
}

impl<'a> Cameras<'a> {
    fn new(data: &'a Path, seq: &'a str) -> Self {
        Self {
            data,
            seq,
            loaded: Default::default(),
        }
    }

    fn get(&mut self, id: usize) -> Result<&CameraModel> {
        if !self.loaded.contains_key(&id) {
            let cam = read_camera(self.data, self.seq, id)?.ok_or_else(|| {
                Error::BadCamera(format!(
                    "{}: frame {id} lacks depth, a pose or intrinsics",
                    self.seq
                ))
            })?;
            self.loaded.insert(id, cam);
        }
        Ok(&self.loaded[&id])
    }

    /// `U^{t→r}`, from the cache when present, otherwise from depth.
    fn flow(&mut self, cache: Option<&Path>, t: usize, r: usize) -> Result<FlowField> {
        if let Some(p) = cache.map(|c| flow_file(c, self.seq, t, r)).filter(|p| p.is_file()) {
            return FlowField::load(&p);
        }
        let pose = *self.get(r)?.pose();
        flow_from_depth(self.get(t)?, &pose)
    }
}

fn middle(ids: &[usize]) -> Result<usize> {
    ids.get(ids.len() / 2).copied().ok_or(Error::NoData)
}

fn check_id(ids: &[usize], id: usize, seq: &str) -> Result<()> {
    if ids.contains(&id) {
        Ok(())
    } else {
        Err(Error::BadArgument(format!("{seq} has no frame {id}")))
    }
}

pub fn flow(a: &FlowArgs) -> Result<()> {
    let ids = list_frame_ids(&a.data, &a.seq)?;
    let m = match a.center {
        Some(c) => {
            check_id(&ids, c, &a.seq)?;
            c
        }
        None => middle(&ids)?,
    };
    let mut cams = Cameras::new(&a.data, &a.seq);
    let mut n = 0;
    for &i in &ids {
        if i == m || a.delta.is_some_and(|d| i.abs_diff(m) > d) {
            continue;
        }
        let f = cams.flow(None, m, i)?;
        let p = flow_file(&a.out, &a.seq, m, i);
        if let Some(d) = p.parent() {
            fs::create_dir_all(d).map_err(|e| io_err(d, e))?;
        }
        f.save(&p)?;
        n += 1;
    }
    eprintln!("wrote {n} flow fields to {}", a.out.join(&a.seq).join("flow").display());
    Ok(())
}

pub fn gen_masks(a: &GenMasksArgs) -> Result<()> {
    let ids = list_frame_ids(&a.data, &a.seq)?;
    let base = match a.base {
        Some(b) => {
            check_id(&ids, b, &a.seq)?;
            b
        }
        None => middle(&ids)?,
    };
    let mask_dir = a.data.join(&a.seq).join("mask");
    let base_mask = read_mask(
        &frame_file(&mask_dir, base).ok_or_else(|| Error::MissingFrame(mask_dir.join(format!("{base}.png"))))?,
    )?;
    let cache = cache_root();
    let mut cams = Cameras::new(&a.data, &a.seq);
    let flows = ids
        .iter()
        .map(|&i| {
            if i == base {
                Ok(FlowField::zeros(base_mask.width(), base_mask.height()))
            } else {
                cams.flow(cache.as_deref(), i, base)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let masks = generate_temporal_masks(&base_mask, &flows, &mut rng, a.jitter)?;
    for (id, m) in ids.iter().zip(&masks) {
        write_mask(&a.out.join(&a.seq).join("mask").join(format!("{id}.png")), m)?;
    }
    eprintln!("wrote {} masks propagated from frame {base}", masks.len());
    Ok(())
}

fn load_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(n) = a.max_iters {
        cfg.max_iters = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// The requested sequences, or every directory under `data` with frames.
fn sequences(data: &Path, requested: &[String]) -> Result<Vec<String>> {
    if !requested.is_empty() {
        return Ok(requested.to_vec());
    }
    let mut out: Vec<String> = fs::read_dir(data)
        .map_err(|e| io_err(data, e))?
        .filter_map(|e| {
            let p = e.ok()?.path();
            p.join("image").is_dir().then(|| p.file_name()?.to_str().map(str::to_owned))?
        })
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(Error::NoData);
    }
    Ok(out)
}

pub fn train_shadow(a: &TrainArgs) -> Result<()> {
    let cfg = load_config(a)?;
    let mut data = Vec::new();
    for s in sequences(&a.data, &a.seqs)? {
        data.extend(load_shadow_samples(&a.data, &s)?);
    }
    let mut heldout = Vec::new();
    for s in &a.val_seqs {
        heldout.extend(load_shadow_samples(&a.data, s)?);
    }
    let rep = run_shadow_training(cfg, &data, &heldout, Some(&a.out))?;
    match rep.log.last() {
        Some(r) => eprintln!(
            "iteration {}: shadow loss {:.5}{}",
            r.iter,
            r.loss,
            r.iou.map(|v| format!(", held-out IoU {v:.4}")).unwrap_or_default()
        ),
        None => eprintln!("wrote the initial checkpoint"),
    }
    Ok(())
}

/// Every full `seq_len` window of consecutive frame ids, with flows.
fn training_windows(data: &Path, seq: &str, cfg: &TrainConfig, opts: &LoadOptions) -> Result<Vec<VideoSequence>> {
    let ids = list_frame_ids(data, seq)?;
    let delta = cfg.seq_len / 2;
    let mut out = Vec::new();
    for &c in &ids {
        let full = c >= delta && (c - delta..=c + delta).all(|i| ids.binary_search(&i).is_ok());
        if !full {
            continue;
        }
        let w = load_sequence_with(data, seq, c, delta, opts)?;
        if w.flows.is_empty() && delta > 0 {
            return Err(Error::BadSequence(format!(
                "{seq}: no flows for frame {c}; provide depth and poses or a flow cache"
            )));
        }
        out.push(w);
    }
    Ok(out)
}

pub fn train_inpaint(a: &TrainArgs) -> Result<()> {
    let cfg = load_config(a)?;
    let opts = LoadOptions {
        flow_cache: cache_root(),
    };
    let mut data = Vec::new();
    for s in sequences(&a.data, &a.seqs)? {
        data.extend(training_windows(&a.data, &s, &cfg, &opts)?);
    }
    if data.is_empty() {
        return Err(Error::BadSequence(format!(
            "no sequence has {} consecutive frames",
            cfg.seq_len
        )));
    }
    let rep = train_inpainting(cfg, &data, Some(&a.out))?;
    match rep.log.last() {
        Some(r) => eprintln!(
            "iteration {}: L_g {:.5}, L_G {:.5}, L_D {:.5}",
            r.iter, r.l_g, r.l_adv_g, r.l_d
        ),
        None => eprintln!("wrote the initial checkpoint"),
    }
    Ok(())
}

pub fn infer(a: &InferArgs) -> Result<()> {
    let model = InpaintModel::load(&a.checkpoint_inpaint)?;
    let shadow = match (&a.checkpoint_shadow, a.no_shadow) {
        (Some(p), false) => Some(ShadowNet::load(p)?),
        _ => None,
    };
    let ids = list_frame_ids(&a.data, &a.seq)?;
    let dir = a.data.join(&a.seq);
    let need = |sub: &str, id: usize| {
        let d = dir.join(sub);
        frame_file(&d, id).ok_or_else(|| Error::MissingFrame(d.join(format!("{id}.png"))))
    };
    let mut frames = Vec::with_capacity(ids.len());
    let mut objects = Vec::with_capacity(ids.len());
    for &id in &ids {
        let f = read_frame(&need("image", id)?, id)?;
        let m = read_mask(&need("mask", id)?)?;
        f.check_mask(&m)?;
        frames.push(f);
        objects.push(m);
    }
    let opts = InferOptions {
        use_shadow: !a.no_shadow,
        shadow_threshold: a.shadow_threshold,
        dilation: a.dilation,
    };
    let holes = inpaint_masks(&frames, &objects, shadow.as_ref(), &opts)?;
    let cache = cache_root();
    let mut cams = Cameras::new(&a.data, &a.seq);
    let out = inpaint_video(&frames, &holes, &model.generator, |t, r| {
        cams.flow(cache.as_deref(), ids[t], ids[r])
    })?;
    let od = a.out.join(&a.seq);
    for ((f, m), id) in out.iter().zip(&holes).zip(&ids) {
        write_frame(&od.join("image").join(format!("{id}.png")), f)?;
        write_mask(&od.join("mask").join(format!("{id}.png")), m)?;
    }
    eprintln!("inpainted {} frames into {}", out.len(), od.display());
    Ok(())
}

fn png_ids(dir: &Path) -> Result<Vec<usize>> {
    let mut ids: Vec<usize> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| {
            let p = e.ok()?.path();
            (p.extension()? == "png").then_some(())?;
            p.file_stem()?.to_str()?.parse().ok()
        })
        .collect();
    ids.sort_unstable();
    ids.dedup();
    Ok(ids)
}

/// Gray visualisation of the per-pixel mean absolute error, amplified 4×.
fn difference_image(pred: &Frame, gt: &Frame) -> Result<Frame> {
    let (w, h) = (gt.width(), gt.height());
    let t = Tensor::from_fn(&[3, h, w], |i| {
        let p = i % (w * h);
        let (x, y) = (p % w, p / w);
        let e = (0..3).map(|c| (to_255(pred.get(x, y, c)) - to_255(gt.get(x, y, c))).abs()).sum::<f64>() / 3.0;
        (4.0 * e).min(255.0) / 127.5 - 1.0
    });
    Frame::new(t, gt.frame_id)
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    if a.twe && a.flows.is_none() {
        return Err(Error::BadArgument("--twe needs --flows".into()));
    }
    let ids = png_ids(&a.gt)?;
    if ids.is_empty() {
        return Err(Error::NoData);
    }
    let load = |dir: &Path, id: usize| {
        frame_file(dir, id).ok_or_else(|| Error::MissingFrame(dir.join(format!("{id}.png"))))
    };
    let (mut preds, mut gts, mut holes) = (Vec::new(), Vec::new(), Vec::new());
    for &id in &ids {
        preds.push(read_frame(&load(&a.pred, id)?, id)?);
        gts.push(read_frame(&load(&a.gt, id)?, id)?);
        holes.push(read_mask(&load(&a.holes, id)?)?);
    }
    let flows = match (&a.flows, a.twe) {
        (Some(dir), true) => Some(
            ids.windows(2)
                .map(|p| {
                    let f = dir.join(format!("{}_{}.bin", p[1], p[0]));
                    if !f.is_file() {
                        return Err(Error::BadArgument(format!("missing flow {}", f.display())));
                    }
                    FlowField::load(&f)
                })
                .collect::<Result<Vec<_>>>()?,
        ),
        _ => None,
    };
    let report = score(&preds, &gts, &holes, flows.as_deref())?;

    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    let rp = a.out.join("report.jsonl");
    let mut f = fs::File::create(&rp).map_err(|e| io_err(&rp, e))?;
    let line = |v: serde_json::Value| format!("{v}\n");
    let mut text = String::new();
    for fm in &report.per_frame {
        text += &line(serde_json::json!({ "frame": fm }));
    }
    text += &line(serde_json::json!({ "summary": {
        "mae": report.mae,
        "rmse": report.rmse,
        "psnr": report.psnr,
        "ssim": report.ssim,
        "twe": report.twe,
        "hole_pixel_count": report.hole_pixel_count,
        "frames": report.per_frame.len(),
    }}));
    f.write_all(text.as_bytes()).map_err(|e| io_err(&rp, e))?;
    let table = report.summary_table();
    write_text(&a.out.join("summary.txt"), &table)?;
    print!("{table}");

    if a.emit_frames {
        for (p, g) in preds.iter().zip(&gts) {
            write_frame(&a.out.join("frames").join(format!("{}.png", g.frame_id)), p)?;
            write_frame(&a.out.join("diff").join(format!("{}.png", g.frame_id)), &difference_image(p, g)?)?;
        }
    }
    Ok(())
}

/// Cameras sit over a plane this far away, in metres.
const FIXTURE_DEPTH: f64 = 10.0;

pub fn synth(a: &SynthArgs) -> Result<()> {
    if a.width == 0 || a.height == 0 || a.frames == 0 {
        return Err(Error::BadArgument("fixture must have at least one frame and pixel".into()));
    }
    let (hx, hy, hw, hh) = (a.hole[0], a.hole[1], a.hole[2], a.hole[3]);
    let spec = TranslationSpec {
        width: a.width,
        height: a.height,
        frames: a.frames,
        shift: (a.shift_x, a.shift_y),
        hole: (hx, hy, hw, hh),
        occluder: if a.screen_static {
            Occluder::ScreenStatic
        } else {
            Occluder::WorldStatic
        },
        seed: a.seed,
    };
    let cameras = Some(translation_cameras(&spec, FIXTURE_DEPTH, a.width as f64)?);
    let (files, clean) = match a.kind {
        FixtureKind::Translation => {
            let seq = translating_sequence(&spec)?;
            let clean = seq.frames.clone();
            (
                SequenceFiles {
                    frames: seq.frames,
                    masks: seq.masks,
                    cameras,
                    ..Default::default()
                },
                clean,
            )
        }
        FixtureKind::Shadow => {
            let v = shadow_video(&spec);
            let shadows = v
                .shadow_masks
                .iter()
                .map(|m| Tensor::from_fn(&[m.height(), m.width()], |i| (!m.known()[i]) as u8 as f64))
                .collect();
            (
                SequenceFiles {
                    frames: v.observed,
                    masks: v.object_masks,
                    cameras,
                    shadows: Some(shadows),
                    ..Default::default()
                },
                v.clean,
            )
        }
    };
    save_sequence(&a.out, &a.seq, &files)?;
    for f in &clean {
        write_frame(&a.out.join(&a.seq).join("gt").join(format!("{}.png", f.frame_id)), f)?;
    }
    eprintln!("wrote {} frames to {}", files.frames.len(), a.out.join(&a.seq).display());
    Ok(())
}
