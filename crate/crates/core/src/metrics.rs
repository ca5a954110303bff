//! Hole-region image metrics on the 8-bit scale, plus the temporal warping
//! error between consecutive inpainted frames.

use serde::{Deserialize, Serialize};

use crate::dataset::{Frame, MaskMap};
use crate::error::{Error, Result};
use crate::geometry::{warp_bilinear, FlowField};

pub const PEAK: f64 = 255.0;
/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;
const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = (0.01 * PEAK) * (0.01 * PEAK);
const C2: f64 = (0.03 * PEAK) * (0.03 * PEAK);

/// `[-1, 1]` to `[0, 255]`.
#[inline]
pub fn to_255(v: f64) -> f64 {
    (v + 1.0) * 127.5
}

fn check(pred: &Frame, gt: &Frame, hole: &MaskMap) -> Result<()> {
    if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
        return Err(Error::shape("prediction and ground truth differ in size"));
    }
    gt.check_mask(hole)?;
    if hole.hole_count() == 0 {
        return Err(Error::EmptyRegion);
    }
    Ok(())
}

/// Sum of `|Δ|` and `Δ²` over hole pixels and channels, with the sample count.
fn error_sums(pred: &Frame, gt: &Frame, hole: &MaskMap) -> (f64, f64, usize) {
    let (mut abs, mut sq, mut n) = (0.0, 0.0, 0);
    for y in 0..gt.height() {
        for x in 0..gt.width() {
            if hole.is_known(x, y) {
                continue;
            }
            for c in 0..3 {
                let d = to_255(pred.get(x, y, c)) - to_255(gt.get(x, y, c));
                abs += d.abs();
                sq += d * d;
                n += 1;
            }
        }
    }
    (abs, sq, n)
}

pub fn masked_mae(pred: &Frame, gt: &Frame, hole: &MaskMap) -> Result<f64> {
    check(pred, gt, hole)?;
    let (a, _, n) = error_sums(pred, gt, hole);
    Ok(a / n as f64)
}

pub fn masked_rmse(pred: &Frame, gt: &Frame, hole: &MaskMap) -> Result<f64> {
    check(pred, gt, hole)?;
    let (_, s, n) = error_sums(pred, gt, hole);
    Ok((s / n as f64).sqrt())
}

/// `20·log10(255 / RMSE)`; `+∞` for identical hole regions.
pub fn psnr_from_rmse(rmse: f64) -> f64 {
    if rmse == 0.0 {
        f64::INFINITY
    } else {
        20.0 * (PEAK / rmse).log10()
    }
}

pub fn masked_psnr(pred: &Frame, gt: &Frame, hole: &MaskMap) -> Result<f64> {
    masked_rmse(pred, gt, hole).map(psnr_from_rmse)
}

/// PSNR as reported, with `+∞` capped.
pub fn report_psnr(psnr: f64) -> f64 {
    psnr.min(PSNR_CAP)
}

fn gaussian_taps() -> Vec<f64> {
    let r = SSIM_RADIUS as i64;
    (-r..=r).map(|d| (-((d * d) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect()
}

/// Local SSIM of channel `c` with an 11×11 Gaussian window centred on
/// `(x, y)`, truncated at the image border and renormalised.
fn local_ssim(pred: &Frame, gt: &Frame, x: usize, y: usize, c: usize, taps: &[f64]) -> f64 {
    let r = SSIM_RADIUS;
    let (w, h) = (gt.width(), gt.height());
    let (mut sw, mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for yy in y.saturating_sub(r)..=(y + r).min(h - 1) {
        for xx in x.saturating_sub(r)..=(x + r).min(w - 1) {
            let wt = taps[yy + r - y] * taps[xx + r - x];
            let (a, b) = (to_255(pred.get(xx, yy, c)), to_255(gt.get(xx, yy, c)));
            sw += wt;
            mx += wt * a;
            my += wt * b;
            mxx += wt * a * a;
            myy += wt * b * b;
            mxy += wt * a * b;
        }
    }
    let (mx, my) = (mx / sw, my / sw);
    let vx = (mxx / sw - mx * mx).max(0.0);
    let vy = (myy / sw - my * my).max(0.0);
    let cxy = mxy / sw - mx * my;
    ((2.0 * mx * my + C1) * (2.0 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2))
}

/// Sum of local SSIM over hole-centred windows and channels, and the count.
fn ssim_sums(pred: &Frame, gt: &Frame, hole: &MaskMap) -> (f64, usize) {
    let taps = gaussian_taps();
    let (mut s, mut n) = (0.0, 0);
    for y in 0..gt.height() {
        for x in 0..gt.width() {
            if hole.is_known(x, y) {
                continue;
            }
            for c in 0..3 {
                s += local_ssim(pred, gt, x, y, c, &taps);
                n += 1;
            }
        }
    }
    (s, n)
}

/// Mean local SSIM over windows centred on hole pixels (averaged over the
/// three channels). Windows may reach into the known region.
pub fn masked_ssim(pred: &Frame, gt: &Frame, hole: &MaskMap) -> Result<f64> {
    check(pred, gt, hole)?;
    let (s, n) = ssim_sums(pred, gt, hole);
    Ok(s / n as f64)
}

/// Temporal warping error, 8-bit RMSE averaged over consecutive pairs.
///
/// `flows[t]` lives on the grid of `frames[t+1]` and points into
/// `frames[t]`, so warping `frames[t]` with it predicts `frames[t+1]`.
/// A pixel counts when the sample is in bounds, the flow is valid and the
/// pixel is a hole of `holes[t+1]`. Pairs without such pixels are skipped.
pub fn twe(frames: &[Frame], flows_consecutive: &[FlowField], holes: &[MaskMap]) -> Result<f64> {
    if frames.len() < 2 || flows_consecutive.len() + 1 != frames.len() || holes.len() != frames.len() {
        return Err(Error::BadArgument(format!(
            "temporal error needs T ≥ 2 frames, T−1 flows and T holes; got {}, {}, {}",
            frames.len(),
            flows_consecutive.len(),
            holes.len()
        )));
    }
    let mut per_pair = Vec::new();
    for t in 0..frames.len() - 1 {
        let (src, dst, flow, hole) = (&frames[t], &frames[t + 1], &flows_consecutive[t], &holes[t + 1]);
        dst.check_mask(hole)?;
        let r = warp_bilinear(src.pixels(), flow)?;
        let (w, h) = (dst.width(), dst.height());
        let (mut sq, mut n) = (0.0, 0usize);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if !(r.in_bounds[i] && flow.is_valid(x, y) && hole.is_hole(x, y)) {
                    continue;
                }
                for c in 0..3 {
                    let d = to_255(r.warped.data()[c * w * h + i]) - to_255(dst.get(x, y, c));
                    sq += d * d;
                    n += 1;
                }
            }
        }
        if n > 0 {
            per_pair.push((sq / n as f64).sqrt());
        }
    }
    if per_pair.is_empty() {
        return Err(Error::EmptyRegion);
    }
    Ok(per_pair.iter().sum::<f64>() / per_pair.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame_id: usize,
    pub mae: f64,
    pub rmse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub hole_pixel_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae: f64,
    pub rmse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub twe: Option<f64>,
    pub per_frame: Vec<FrameMetrics>,
    pub hole_pixel_count: usize,
}

impl EvalReport {
    /// Fixed-width summary table.
    pub fn summary_table(&self) -> String {
        let mut s = format!(
            "{:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            "frame", "holes", "MAE", "RMSE", "PSNR", "SSIM"
        );
        for f in &self.per_frame {
            s += &format!(
                "{:>8} {:>8} {:>8.3} {:>8.3} {:>8.3} {:>8.4}\n",
                f.frame_id,
                f.hole_pixel_count,
                f.mae,
                f.rmse,
                report_psnr(f.psnr),
                f.ssim
            );
        }
        s += &format!(
            "{:>8} {:>8} {:>8.3} {:>8.3} {:>8.3} {:>8.4}\n",
            "all",
            self.hole_pixel_count,
            self.mae,
            self.rmse,
            report_psnr(self.psnr),
            self.ssim
        );
        if let Some(t) = self.twe {
            s += &format!("TWE {t:.4}\n");
        }
        s
    }
}

/// Metrics pooled over every hole pixel of every frame; frames with an
/// empty hole are left out of the per-frame list. `flows` enables TWE.
pub fn evaluate(preds: &[Frame], gts: &[Frame], holes: &[MaskMap], flows: Option<&[FlowField]>) -> Result<EvalReport> {
    if preds.len() != gts.len() || holes.len() != gts.len() {
        return Err(Error::BadArgument("need one prediction and hole per ground-truth frame".into()));
    }
    let (mut abs, mut sq, mut n, mut ss, mut sn, mut px) = (0.0, 0.0, 0, 0.0, 0, 0);
    let mut per_frame = Vec::new();
    for ((p, g), m) in preds.iter().zip(gts).zip(holes) {
        match check(p, g, m) {
            Err(Error::EmptyRegion) => continue,
            r => r?,
        }
        let (a, s, k) = error_sums(p, g, m);
        let (s2, k2) = ssim_sums(p, g, m);
        let rmse = (s / k as f64).sqrt();
        per_frame.push(FrameMetrics {
            frame_id: g.frame_id,
            mae: a / k as f64,
            rmse,
            psnr: psnr_from_rmse(rmse),
            ssim: s2 / k2 as f64,
            hole_pixel_count: m.hole_count(),
        });
        abs += a;
        sq += s;
        n += k;
        ss += s2;
        sn += k2;
        px += m.hole_count();
    }
    if n == 0 {
        return Err(Error::EmptyRegion);
    }
    let rmse = (sq / n as f64).sqrt();
    let twe = flows.map(|f| twe(preds, f, holes)).transpose()?;
    Ok(EvalReport {
        mae: abs / n as f64,
        rmse,
        psnr: psnr_from_rmse(rmse),
        ssim: ss / sn as f64,
        twe,
        per_frame,
        hole_pixel_count: px,
    })
}
