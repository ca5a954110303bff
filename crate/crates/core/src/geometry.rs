//! Inter-frame flow from depth and camera poses, and differentiable
//! bilinear temporal warping.
//!
//! Pixel centres sit at integer coordinates. A flow vector `U(p)` stored on
//! the target grid points from `p` to the location `p + U(p)` of the same
//! scene point in a reference frame; warping the reference frame with it
//! gives `warped(p) = reference(p + U(p))`.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Matrix4, Vector3, Vector4};

use crate::autograd::{Graph, Var};
use crate::dataset::{CameraModel, MaskMap};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    dx: Vec<f64>,
    dy: Vec<f64>,
    valid: Vec<bool>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::constant(width, height, 0.0, 0.0)
    }

    pub fn constant(width: usize, height: usize, dx: f64, dy: f64) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            dx: vec![dx; n],
            dy: vec![dy; n],
            valid: vec![true; n],
        }
    }

    /// Builds a field from `f(x, y) -> Some((dx, dy))`, `None` marking an
    /// invalid pixel (stored as zero displacement).
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> Option<(f64, f64)>) -> Self {
        let mut out = Self::zeros(width, height);
        for y in 0..height {
            for x in 0..width {
                let i = y * width + x;
                match f(x, y) {
                    Some((dx, dy)) => {
                        out.dx[i] = dx;
                        out.dy[i] = dy;
                    }
                    None => out.valid[i] = false,
                }
            }
        }
        out
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.dx[i], self.dy[i])
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width + x]
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    /// Largest displacement magnitude over valid pixels.
    pub fn max_magnitude(&self) -> f64 {
        (0..self.dx.len())
            .filter(|&i| self.valid[i])
            .map(|i| self.dx[i].hypot(self.dy[i]))
            .fold(0.0, f64::max)
    }

    /// `[1, 2, H, W]` tensor holding `dx` then `dy`.
    pub fn to_tensor(&self) -> Tensor {
        let mut data = self.dx.clone();
        data.extend_from_slice(&self.dy);
        Tensor::from_vec(&[1, 2, self.height, self.width], data).unwrap()
    }

    /// `[1, 1, H, W]` validity as 0/1.
    pub fn valid_tensor(&self) -> Tensor {
        Tensor::from_vec(
            &[1, 1, self.height, self.width],
            self.valid.iter().map(|&v| v as u8 as f64).collect(),
        )
        .unwrap()
    }

    /// Re-indexes a window; displacement values are unchanged because both
    /// frames of the pair receive the same crop.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::shape(format!(
                "crop {w}x{h}+{x0}+{y0} outside {}x{} flow",
                self.width, self.height
            )));
        }
        Ok(Self::from_fn(w, h, |x, y| {
            let (sx, sy) = (x + x0, y + y0);
            self.is_valid(sx, sy).then(|| self.get(sx, sy))
        }))
    }

    /// Writes the flow cache format: `u32` height and width, row-major
    /// `f32` `(dx, dy)` pairs, then row-major `u8` validity.
    pub fn write_cache(&self, w: &mut impl Write) -> std::io::Result<()> {
        let mut buf = Vec::with_capacity(8 + self.dx.len() * 9);
        buf.extend_from_slice(&(self.height as u32).to_le_bytes());
        buf.extend_from_slice(&(self.width as u32).to_le_bytes());
        for (dx, dy) in self.dx.iter().zip(&self.dy) {
            buf.extend_from_slice(&(*dx as f32).to_le_bytes());
            buf.extend_from_slice(&(*dy as f32).to_le_bytes());
        }
        buf.extend(self.valid.iter().map(|&v| v as u8));
        w.write_all(&buf)
    }

    pub fn read_cache(r: &mut impl Read) -> Result<Self> {
        let mut raw = Vec::new();
        r.read_to_end(&mut raw)
            .map_err(|e| Error::format("flow cache", e.to_string()))?;
        if raw.len() < 8 {
            return Err(Error::format("flow cache", "truncated header"));
        }
        let height = u32::from_le_bytes(raw[0..4].try_into().unwrap()) as usize;
        let width = u32::from_le_bytes(raw[4..8].try_into().unwrap()) as usize;
        let n = width * height;
        if raw.len() != 8 + n * 9 {
            return Err(Error::format(
                "flow cache",
                format!("{} bytes for a {width}x{height} field", raw.len()),
            ));
        }
        let pairs = &raw[8..8 + n * 8];
        let mut out = Self::zeros(width, height);
        for i in 0..n {
            let c = &pairs[i * 8..i * 8 + 8];
            out.dx[i] = f32::from_le_bytes(c[0..4].try_into().unwrap()) as f64;
            out.dy[i] = f32::from_le_bytes(c[4..8].try_into().unwrap()) as f64;
            out.valid[i] = match raw[8 + n * 8 + i] {
                0 => false,
                1 => true,
                b => return Err(Error::format("flow cache", format!("validity byte {b}"))),
            };
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_cache(&mut f).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_cache(&mut f)
    }
}

/// Flow from every target pixel to its reprojection in a reference camera
/// that shares the target intrinsics.
///
/// Pixels with invalid depth, or whose reprojected depth is not positive,
/// are marked invalid with zero displacement.
pub fn flow_from_depth(target: &CameraModel, pose_ref: &Matrix4<f64>) -> Result<FlowField> {
    let k = target.intrinsics();
    let k_inv = k
        .try_inverse()
        .ok_or_else(|| Error::BadCamera("intrinsics are singular".into()))?;
    let ref_from_world = pose_ref
        .try_inverse()
        .ok_or_else(|| Error::BadCamera("reference pose is singular".into()))?;
    let ref_from_target = ref_from_world * target.pose();
    let (w, h) = (target.width(), target.height());
    Ok(FlowField::from_fn(w, h, |x, y| {
        let z = target.depth_at(x, y)?;
        let ray = k_inv * Vector3::new(x as f64, y as f64, 1.0);
        let p = ref_from_target * Vector4::new(ray.x * z, ray.y * z, ray.z * z, 1.0);
        if p.z <= 0.0 {
            return None;
        }
        let q = k * Vector3::new(p.x / p.z, p.y / p.z, 1.0);
        let (dx, dy) = (q.x - x as f64, q.y - y as f64);
        (dx.is_finite() && dy.is_finite()).then_some((dx, dy))
    }))
}

/// Four taps and interpolation weights for a sample point, or `None` when
/// the point lies outside `[0, W−1] × [0, H−1]`.
#[derive(Debug, Clone, Copy)]
struct Taps {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    fx: f64,
    fy: f64,
}

#[inline]
fn taps(sx: f64, sy: f64, w: usize, h: usize) -> Option<Taps> {
    if !(sx >= 0.0 && sy >= 0.0 && sx <= (w - 1) as f64 && sy <= (h - 1) as f64) {
        return None;
    }
    let axis = |s: f64, n: usize| {
        if n == 1 {
            (0, 0, 0.0)
        } else {
            let i0 = (s.floor() as usize).min(n - 2);
            (i0, i0 + 1, s - i0 as f64)
        }
    };
    let (x0, x1, fx) = axis(sx, w);
    let (y0, y1, fy) = axis(sy, h);
    Some(Taps { x0, y0, x1, y1, fx, fy })
}

impl Taps {
    #[inline]
    fn sample(&self, plane: &[f64], w: usize) -> f64 {
        let (s00, s01, s10, s11) = self.corners(plane, w);
        let Taps { fx, fy, .. } = *self;
        (1.0 - fx) * (1.0 - fy) * s00 + fx * (1.0 - fy) * s01 + (1.0 - fx) * fy * s10 + fx * fy * s11
    }

    #[inline]
    fn corners(&self, plane: &[f64], w: usize) -> (f64, f64, f64, f64) {
        (
            plane[self.y0 * w + self.x0],
            plane[self.y0 * w + self.x1],
            plane[self.y1 * w + self.x0],
            plane[self.y1 * w + self.x1],
        )
    }
}

/// Output of [`warp_bilinear`].
#[derive(Debug, Clone, PartialEq)]
pub struct WarpResult {
    /// `[C, H, W]`, zero where `in_bounds` is false.
    pub warped: Tensor,
    /// Row-major `H×W`; true where the sample point lay inside the source so
    /// every tap with non-zero weight was read from real data.
    pub in_bounds: Vec<bool>,
}

/// Bilinear resampling of a `[C, H, W]` source at `p + U(p)`.
pub fn warp_bilinear(source: &Tensor, flow: &FlowField) -> Result<WarpResult> {
    let (c, h, w) = chw(source)?;
    if (w, h) != (flow.width, flow.height) {
        return Err(Error::shape(format!(
            "flow {}x{} vs source {w}x{h}",
            flow.width, flow.height
        )));
    }
    let mut warped = Tensor::zeros(&[c, h, w]);
    let mut in_bounds = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let Some(t) = taps(x as f64 + flow.dx[i], y as f64 + flow.dy[i], w, h) else {
                continue;
            };
            in_bounds[i] = true;
            for ch in 0..c {
                warped.data_mut()[ch * h * w + i] = t.sample(&source.data()[ch * h * w..], w);
            }
        }
    }
    Ok(WarpResult { warped, in_bounds })
}

/// Warps a mask bilinearly and re-binarises it: a pixel is known only when
/// the interpolated value exceeds 0.5 and the sample was in bounds.
pub fn warp_mask(mask: &MaskMap, flow: &FlowField) -> Result<MaskMap> {
    let t = mask.to_tensor().reshape(&[1, mask.height(), mask.width()])?;
    let r = warp_bilinear(&t, flow)?;
    Ok(MaskMap::from_fn(mask.width(), mask.height(), |x, y| {
        let i = y * mask.width() + x;
        r.in_bounds[i] && r.warped.data()[i] > 0.5
    }))
}

/// In-bounds map of a `[N, 2, H, W]` flow tensor, as `[N, 1, H, W]` 0/1.
pub fn in_bounds_tensor(flow: &Tensor) -> Tensor {
    let (n, _, h, w) = flow.dims4();
    let hw = h * w;
    Tensor::from_fn(&[n, 1, h, w], |i| {
        let (ni, p) = (i / hw, i % hw);
        let (x, y) = (p % w, p / w);
        let dx = flow.data()[ni * 2 * hw + p];
        let dy = flow.data()[ni * 2 * hw + hw + p];
        taps(x as f64 + dx, y as f64 + dy, w, h).is_some() as u8 as f64
    })
}

fn chw(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::shape(format!("expected [C,H,W], got {s:?}"))),
    }
}

impl Graph {
    /// Differentiable bilinear warp of `source: [N,C,H,W]` by
    /// `flow: [N,2,H,W]`; gradients reach both the source and the flow.
    pub fn warp(&mut self, source: Var, flow: Var) -> Var {
        let (n, c, h, w) = self.value(source).dims4();
        assert_eq!(self.shape(flow), &[n, 2, h, w], "warp: flow shape");
        let hw = h * w;
        let fl = self.value(flow).data();
        let all_taps: Vec<Option<Taps>> = (0..n * hw)
            .map(|i| {
                let (ni, p) = (i / hw, i % hw);
                let (x, y) = (p % w, p / w);
                taps(
                    x as f64 + fl[ni * 2 * hw + p],
                    y as f64 + fl[ni * 2 * hw + hw + p],
                    w,
                    h,
                )
            })
            .collect();
        let src = self.value(source).data();
        let mut out = Tensor::zeros(&[n, c, h, w]);
        for ni in 0..n {
            for ch in 0..c {
                let plane = &src[(ni * c + ch) * hw..(ni * c + ch + 1) * hw];
                for p in 0..hw {
                    if let Some(t) = all_taps[ni * hw + p] {
                        out.data_mut()[(ni * c + ch) * hw + p] = t.sample(plane, w);
                    }
                }
            }
        }
        self.op(out, &[source, flow], move |g, parents, need| {
            let src = parents[0].data();
            let gd = g.data();
            let mut dsrc = need[0].then(|| Tensor::zeros(&[n, c, h, w]));
            let mut dflow = need[1].then(|| Tensor::zeros(&[n, 2, h, w]));
            for ni in 0..n {
                for p in 0..hw {
                    let Some(t) = all_taps[ni * hw + p] else { continue };
                    let Taps { x0, y0, x1, y1, fx, fy } = t;
                    let (mut gx, mut gy) = (0.0, 0.0);
                    for ch in 0..c {
                        let base = (ni * c + ch) * hw;
                        let go = gd[base + p];
                        if go == 0.0 {
                            continue;
                        }
                        if let Some(ds) = dsrc.as_mut() {
                            let d = ds.data_mut();
                            d[base + y0 * w + x0] += go * (1.0 - fx) * (1.0 - fy);
                            d[base + y0 * w + x1] += go * fx * (1.0 - fy);
                            d[base + y1 * w + x0] += go * (1.0 - fx) * fy;
                            d[base + y1 * w + x1] += go * fx * fy;
                        }
                        if dflow.is_some() {
                            let (s00, s01, s10, s11) = t.corners(&src[base..], w);
                            gx += go * ((1.0 - fy) * (s01 - s00) + fy * (s11 - s10));
                            gy += go * ((1.0 - fx) * (s10 - s00) + fx * (s11 - s01));
                        }
                    }
                    if let Some(df) = dflow.as_mut() {
                        df.data_mut()[ni * 2 * hw + p] = gx;
                        df.data_mut()[ni * 2 * hw + hw + p] = gy;
                    }
                }
            }
            vec![dsrc, dflow]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{max_rel_error, numeric_grad};
    use nalgebra::Matrix3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(c: usize, h: usize, w: usize, rng: &mut impl Rng) -> Tensor {
        Tensor::from_fn(&[c, h, w], |_| rng.random_range(-1.0..1.0))
    }

    /// Per-pixel four-tap interpolation written independently of `Taps`.
    fn loop_oracle(src: &Tensor, flow: &FlowField) -> (Tensor, Vec<bool>) {
        let (c, h, w) = chw(src).unwrap();
        let mut out = Tensor::zeros(&[c, h, w]);
        let mut inb = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = flow.get(x, y);
                let (sx, sy) = (x as f64 + dx, y as f64 + dy);
                if sx < 0.0 || sy < 0.0 || sx > (w - 1) as f64 || sy > (h - 1) as f64 {
                    continue;
                }
                inb[y * w + x] = true;
                let (fx0, fy0) = (sx.floor(), sy.floor());
                let (ax, ay) = (sx - fx0, sy - fy0);
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (oy, wy) in [(0, 1.0 - ay), (1, ay)] {
                        for (ox, wx) in [(0, 1.0 - ax), (1, ax)] {
                            let wgt = wx * wy;
                            if wgt == 0.0 {
                                continue;
                            }
                            let (ix, iy) = (fx0 as usize + ox, fy0 as usize + oy);
                            acc += wgt * src.data()[(ch * h + iy) * w + ix];
                        }
                    }
                    out.data_mut()[(ch * h + y) * w + x] = acc;
                }
            }
        }
        (out, inb)
    }

    #[test]
    fn zero_flow_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = random_image(3, 7, 9, &mut rng);
        let r = warp_bilinear(&img, &FlowField::zeros(9, 7)).unwrap();
        assert_eq!(r.warped, img);
        assert!(r.in_bounds.iter().all(|&b| b));
    }

    #[test]
    fn integer_shift_matches_index_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(3, 8, 12, &mut rng);
        let r = warp_bilinear(&img, &FlowField::constant(12, 8, 3.0, 0.0)).unwrap();
        for y in 0..8 {
            for x in 0..12 {
                assert_eq!(r.in_bounds[y * 12 + x], x + 3 < 12);
                for c in 0..3 {
                    let got = r.warped.data()[(c * 8 + y) * 12 + x];
                    let want = if x + 3 < 12 { img.data()[(c * 8 + y) * 12 + x + 3] } else { 0.0 };
                    assert!((got - want).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn far_out_of_bounds_flow_zeroes_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_image(2, 5, 5, &mut rng);
        let r = warp_bilinear(&img, &FlowField::constant(5, 5, 10.0, 0.0)).unwrap();
        assert!(r.in_bounds.iter().all(|&b| !b));
        assert_eq!(r.warped.max_abs(), 0.0);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let img = Tensor::zeros(&[3, 4, 4]);
        assert!(matches!(
            warp_bilinear(&img, &FlowField::zeros(5, 4)),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn matches_loop_oracle_and_stays_in_tap_hull() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let img = random_image(3, 16, 16, &mut rng);
            let flow = FlowField::from_fn(16, 16, |_, _| {
                Some((rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)))
            });
            let r = warp_bilinear(&img, &flow).unwrap();
            let (o, inb) = loop_oracle(&img, &flow);
            assert_eq!(r.in_bounds, inb);
            assert!(r.warped.max_abs_diff(&o) < 1e-12);
            for y in 0..16 {
                for x in 0..16 {
                    if !inb[y * 16 + x] {
                        continue;
                    }
                    let (dx, dy) = flow.get(x, y);
                    let t = taps(x as f64 + dx, y as f64 + dy, 16, 16).unwrap();
                    for c in 0..3 {
                        let (a, b, cc, d) = t.corners(&img.data()[c * 256..], 16);
                        let v = r.warped.data()[c * 256 + y * 16 + x];
                        assert!(v >= a.min(b).min(cc).min(d) - 1e-12);
                        assert!(v <= a.max(b).max(cc).max(d) + 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn graph_warp_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let src = Tensor::from_fn(&[1, 2, 6, 6], |_| rng.random_range(-1.0..1.0));
        // keep every sample point ≥ 0.1 px from integer coordinates
        let flow = Tensor::from_fn(&[1, 2, 6, 6], |_| {
            rng.random_range(0.0..2.0f64).floor() + rng.random_range(0.15..0.85)
                - rng.random_range(0..2) as f64
        });
        let weights = Tensor::from_fn(&[1, 2, 6, 6], |_| rng.random_range(-1.0..1.0));
        let eval = |s: &Tensor, f: &Tensor| {
            let mut g = Graph::new();
            let (sv, fv, wv) = (g.constant(s.clone()), g.constant(f.clone()), g.constant(weights.clone()));
            let o = g.warp(sv, fv);
            let m = g.mul(o, wv);
            let s = g.sum(m);
            g.value(s).item()
        };
        let mut g = Graph::new();
        let (sv, fv, wv) = (g.param(src.clone()), g.param(flow.clone()), g.constant(weights.clone()));
        let o = g.warp(sv, fv);
        let m = g.mul(o, wv);
        let s = g.sum(m);
        g.backward(s);
        let ns = numeric_grad(&src, 1e-3, |t| eval(t, &flow));
        let nf = numeric_grad(&flow, 1e-3, |t| eval(&src, t));
        assert!(max_rel_error(g.grad(sv).unwrap(), &ns, 1e-9) < 1e-4);
        assert!(max_rel_error(g.grad(fv).unwrap(), &nf, 1e-9) < 1e-4);
    }

    #[test]
    fn warp_mask_rules() {
        let m = MaskMap::from_fn(6, 4, |x, y| (x + y) % 3 != 0);
        assert_eq!(warp_mask(&m, &FlowField::zeros(6, 4)).unwrap(), m);

        let ones = MaskMap::all_known(6, 4);
        let half = warp_mask(&ones, &FlowField::constant(6, 4, 3.0, 0.0)).unwrap();
        for y in 0..4 {
            for x in 0..6 {
                assert_eq!(half.is_known(x, y), x < 3);
            }
        }

        // checker under a half-pixel shift: every interior sample averages
        // one known and one hole pixel, i.e. exactly 0.5, which is not > 0.5
        let checker = MaskMap::from_fn(8, 8, |x, y| (x + y) % 2 == 0);
        let shifted = warp_mask(&checker, &FlowField::constant(8, 8, 0.5, 0.0)).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let sx = x as f64 + 0.5;
                let oracle = if sx > 7.0 {
                    false
                } else {
                    let a = checker.is_known(x, y) as u8 as f64;
                    let b = checker.is_known(x + 1, y) as u8 as f64;
                    0.5 * a + 0.5 * b > 0.5
                };
                assert_eq!(shifted.is_known(x, y), oracle, "({x},{y})");
            }
        }
    }

    fn plane_camera(w: usize, h: usize, z: f64) -> CameraModel {
        let k = Matrix3::new(40.0, 0.0, w as f64 / 2.0, 0.0, 42.0, h as f64 / 2.0, 0.0, 0.0, 1.0);
        CameraModel::new(k, Matrix4::identity(), w, h, vec![z; w * h], vec![true; w * h]).unwrap()
    }

    #[test]
    fn identity_pose_gives_zero_flow() {
        let cam = plane_camera(10, 8, 3.0);
        let f = flow_from_depth(&cam, &Matrix4::identity()).unwrap();
        assert!(f.max_magnitude() < 1e-9);
    }

    #[test]
    fn pure_translation_over_plane_matches_closed_form() {
        let (z, t) = (4.0, 0.25);
        let cam = plane_camera(12, 9, z);
        let mut pose = Matrix4::identity();
        pose[(0, 3)] = t;
        let f = flow_from_depth(&cam, &pose).unwrap();
        for y in 0..9 {
            for x in 0..12 {
                let (dx, dy) = f.get(x, y);
                assert!((dx + 40.0 * t / z).abs() < 1e-9);
                assert!(dy.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_depth_and_behind_camera_are_invalid() {
        let mut depth = vec![2.0; 16];
        depth[5] = 0.0;
        let mut valid = vec![true; 16];
        valid[6] = false;
        let k = Matrix3::new(10.0, 0.0, 2.0, 0.0, 10.0, 2.0, 0.0, 0.0, 1.0);
        let cam = CameraModel::new(k, Matrix4::identity(), 4, 4, depth, valid).unwrap();
        let f = flow_from_depth(&cam, &Matrix4::identity()).unwrap();
        assert!(!f.is_valid(1, 1) && !f.is_valid(2, 1));
        assert_eq!(f.get(1, 1), (0.0, 0.0));

        let mut behind = Matrix4::identity();
        behind[(2, 3)] = 5.0; // reference camera 5 m in front of a plane at 2 m
        let f = flow_from_depth(&cam, &behind).unwrap();
        assert!(f.valid().iter().all(|&v| !v));
    }

    #[test]
    fn cache_round_trip() {
        let f = FlowField::from_fn(5, 3, |x, y| (x != 2).then_some((x as f64 * 0.5, -(y as f64))));
        let mut buf = Vec::new();
        f.write_cache(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 15 * 9);
        assert_eq!(&buf[0..4], &3u32.to_le_bytes());
        assert_eq!(FlowField::read_cache(&mut buf.as_slice()).unwrap(), f);
        buf.pop();
        assert!(FlowField::read_cache(&mut buf.as_slice()).is_err());
    }
}
