//! Resolution reduction and the train/eval crops.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{CameraModel, Frame, MaskMap, VideoSequence};
use crate::error::{Error, Result};
use crate::geometry::FlowField;

/// Crop sizes as `(width, height)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropConfig {
    pub bottom: (usize, usize),
    pub train: (usize, usize),
    pub eval: (usize, usize),
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            bottom: (562, 226),
            train: (384, 192),
            eval: (560, 448),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DownsampleFilter {
    /// Box average over each `factor × factor` cell.
    #[default]
    Area,
    /// Bilinear sample at each cell centre.
    Bilinear,
}

fn ensure_at_least(seq: &VideoSequence, (w, h): (usize, usize)) -> Result<()> {
    if seq.width() < w || seq.height() < h {
        return Err(Error::shape(format!(
            "{}x{} input is smaller than the {w}x{h} crop",
            seq.width(),
            seq.height()
        )));
    }
    Ok(())
}

pub fn preprocess_train(seq: &VideoSequence, rng: &mut impl Rng) -> Result<VideoSequence> {
    preprocess_train_with(seq, &CropConfig::default(), rng)
}

/// Bottom crop (bottom rows, horizontally centred, clipped to the input),
/// then a random training crop that contains a hole pixel whenever the
/// union of holes is non-empty after the bottom crop.
pub fn preprocess_train_with(seq: &VideoSequence, cfg: &CropConfig, rng: &mut impl Rng) -> Result<VideoSequence> {
    ensure_at_least(seq, cfg.train)?;
    let (bw, bh) = (cfg.bottom.0.min(seq.width()), cfg.bottom.1.min(seq.height()));
    let bottom = seq.crop((seq.width() - bw) / 2, seq.height() - bh, bw, bh)?;
    let (cw, ch) = cfg.train;
    if bw < cw || bh < ch {
        return Err(Error::shape("bottom crop is smaller than the training crop"));
    }

    let holes = bottom.hole_union();
    let hole_px: Vec<usize> = (0..bw * bh).filter(|&i| !holes.known()[i]).collect();
    let (x0, y0) = if hole_px.is_empty() {
        (rng.random_range(0..=bw - cw), rng.random_range(0..=bh - ch))
    } else {
        let p = hole_px[rng.random_range(0..hole_px.len())];
        let (px, py) = (p % bw, p / bw);
        let xr = px.saturating_sub(cw - 1)..=px.min(bw - cw);
        let yr = py.saturating_sub(ch - 1)..=py.min(bh - ch);
        (rng.random_range(xr), rng.random_range(yr))
    };
    bottom.crop(x0, y0, cw, ch)
}

pub fn preprocess_eval(seq: &VideoSequence) -> Result<VideoSequence> {
    preprocess_eval_with(seq, &CropConfig::default())
}

pub fn preprocess_eval_with(seq: &VideoSequence, cfg: &CropConfig) -> Result<VideoSequence> {
    ensure_at_least(seq, cfg.eval)?;
    let (w, h) = cfg.eval;
    seq.crop((seq.width() - w) / 2, (seq.height() - h) / 2, w, h)
}

/// Reduces resolution by an integer factor (trailing rows and columns that
/// do not fill a cell are dropped). A reduced mask pixel is known only when
/// every covered pixel was known, so holes never shrink. Flows and depth are
/// averaged over valid pixels; a reduced pixel is valid only when all of its
/// sources were.
pub fn downsample(seq: &VideoSequence, factor: usize, filter: DownsampleFilter) -> Result<VideoSequence> {
    if factor == 0 {
        return Err(Error::BadArgument("downsample factor must be positive".into()));
    }
    let (w, h) = (seq.width() / factor, seq.height() / factor);
    if w == 0 || h == 0 {
        return Err(Error::shape("downsampled size is empty"));
    }
    let cell = Cell { factor, filter };
    let out = VideoSequence {
        frames: seq.frames.iter().map(|f| cell.frame(f, w, h)).collect(),
        masks: seq.masks.iter().map(|m| cell.mask(m, w, h)).collect(),
        flows: seq.flows.iter().map(|f| cell.flow(f, w, h)).collect(),
        target_index: seq.target_index,
        delta: seq.delta,
        object_masks: seq
            .object_masks
            .as_ref()
            .map(|l| l.iter().map(|m| cell.mask(m, w, h)).collect()),
        cameras: seq
            .cameras
            .as_ref()
            .map(|l| l.iter().map(|c| cell.camera(c, w, h)).collect::<Result<_>>())
            .transpose()?,
    };
    out.validate()?;
    Ok(out)
}

struct Cell {
    factor: usize,
    filter: DownsampleFilter,
}

impl Cell {
    fn sources(&self, x: usize, y: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let f = self.factor;
        (0..f * f).map(move |k| (x * f + k % f, y * f + k / f))
    }

    /// Bilinear sample of `get` at the centre of cell `(x, y)`.
    fn bilinear(&self, x: usize, y: usize, get: impl Fn(usize, usize) -> f64) -> f64 {
        let f = self.factor as f64;
        let (sx, sy) = ((x as f64 + 0.5) * f - 0.5, (y as f64 + 0.5) * f - 0.5);
        let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
        let (tx, ty) = (sx - x0 as f64, sy - y0 as f64);
        let (x1, y1) = (x0 + (tx > 0.0) as usize, y0 + (ty > 0.0) as usize);
        (1.0 - tx) * (1.0 - ty) * get(x0, y0) + tx * (1.0 - ty) * get(x1, y0) + (1.0 - tx) * ty * get(x0, y1) + tx * ty * get(x1, y1)
    }

    fn frame(&self, fr: &Frame, w: usize, h: usize) -> Frame {
        let n = (self.factor * self.factor) as f64;
        Frame::from_fn(w, h, fr.frame_id, |x, y| {
            [0, 1, 2].map(|c| match self.filter {
                DownsampleFilter::Area => self.sources(x, y).map(|(sx, sy)| fr.get(sx, sy, c)).sum::<f64>() / n,
                DownsampleFilter::Bilinear => self.bilinear(x, y, |sx, sy| fr.get(sx, sy, c)),
            })
        })
    }

    fn mask(&self, m: &MaskMap, w: usize, h: usize) -> MaskMap {
        MaskMap::from_fn(w, h, |x, y| self.sources(x, y).all(|(sx, sy)| m.is_known(sx, sy)))
    }

    fn flow(&self, fl: &FlowField, w: usize, h: usize) -> FlowField {
        let (f, n) = (self.factor as f64, (self.factor * self.factor) as f64);
        FlowField::from_fn(w, h, |x, y| {
            if !self.sources(x, y).all(|(sx, sy)| fl.is_valid(sx, sy)) {
                return None;
            }
            let (sdx, sdy) = self
                .sources(x, y)
                .map(|(sx, sy)| fl.get(sx, sy))
                .fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
            Some((sdx / n / f, sdy / n / f))
        })
    }

    fn camera(&self, c: &CameraModel, w: usize, h: usize) -> Result<CameraModel> {
        let f = self.factor as f64;
        let mut k = *c.intrinsics();
        k[(0, 0)] /= f;
        k[(1, 1)] /= f;
        k[(0, 2)] = (k[(0, 2)] + 0.5) / f - 0.5;
        k[(1, 2)] = (k[(1, 2)] + 0.5) / f - 0.5;
        let n = (self.factor * self.factor) as f64;
        let mut depth = Vec::with_capacity(w * h);
        let mut valid = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let zs: Option<Vec<f64>> = self.sources(x, y).map(|(sx, sy)| c.depth_at(sx, sy)).collect();
                match zs {
                    Some(zs) => {
                        depth.push(zs.iter().sum::<f64>() / n);
                        valid.push(true);
                    }
                    None => {
                        depth.push(0.0);
                        valid.push(false);
                    }
                }
            }
        }
        c.with_depth(k, w, h, depth, valid)
    }
}
