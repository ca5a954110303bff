//! Contextual attention: every foreground location is rebuilt as a
//! softmax-weighted mix of background patches, ranked by cosine similarity.
//!
//! Foreground patches are always `k×k`, stride 1, same-padded (zero outside
//! the map) and centred on their location. The weighted patch of each
//! location is pasted back centred on it and overlapping contributions are
//! averaged by the number of in-image locations covering the pixel.

use crate::autograd::{Graph, Var};
use crate::dataset::MaskMap;
use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

pub const DEFAULT_PATCH: usize = 3;
pub const DEFAULT_SCALE: f64 = 10.0;
const COS_EPS: f64 = 1e-8;
/// Foreground locations scored per block, bounding peak memory at
/// `CHUNK · N` scores.
const CHUNK: usize = 512;

/// Flattened patches (channel-major, then row, then column) with their
/// top-left origin `(y, x)` in unpadded coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub k: usize,
    pub channels: usize,
    /// `[N, C·k·k]`.
    pub patches: Tensor,
    pub origins: Vec<(i64, i64)>,
    /// True when no known-region test failed for the patch.
    pub valid: Vec<bool>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.channels * self.k * self.k
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Stacks sets extracted from several maps (e.g. frames).
    pub fn concat(sets: &[PatchSet]) -> Result<PatchSet> {
        let first = sets.first().ok_or_else(|| Error::BadArgument("no patch sets".into()))?;
        if sets.iter().any(|s| s.k != first.k || s.channels != first.channels) {
            return Err(Error::shape("patch sets differ in k or channels"));
        }
        let parts: Vec<&Tensor> = sets.iter().map(|s| &s.patches).collect();
        Ok(PatchSet {
            k: first.k,
            channels: first.channels,
            patches: Tensor::cat0(&parts)?,
            origins: sets.iter().flat_map(|s| s.origins.iter().copied()).collect(),
            valid: sets.iter().flat_map(|s| s.valid.iter().copied()).collect(),
        })
    }
}

/// Slices `features: [C, H, W]` into `k×k` patches at the given stride.
///
/// With `same_pad` the map is zero-padded by `k/2` and origins step over
/// every `stride`-th pixel, giving `⌈H/s⌉·⌈W/s⌉` patches. When a mask is
/// given, a patch is valid only if every in-image pixel it covers is known;
/// padding never invalidates a patch.
pub fn extract_patches(
    features: &Tensor,
    k: usize,
    stride: usize,
    same_pad: bool,
    mask: Option<&MaskMap>,
) -> Result<PatchSet> {
    let (c, h, w) = match *features.shape() {
        [c, h, w] => (c, h, w),
        ref s => return Err(Error::shape(format!("features must be [C,H,W], got {s:?}"))),
    };
    if k % 2 == 0 || stride == 0 {
        return Err(Error::BadArgument(format!("need odd k and positive stride, got k={k}, stride={stride}")));
    }
    let pad = if same_pad { k / 2 } else { 0 };
    if k > h.min(w) + 2 * pad {
        return Err(Error::shape(format!("patch {k} exceeds {h}x{w} map with padding {pad}")));
    }
    if let Some(m) = mask {
        if (m.width(), m.height()) != (w, h) {
            return Err(Error::shape("mask differs from feature map"));
        }
    }
    let ny = (h + 2 * pad - k) / stride + 1;
    let nx = (w + 2 * pad - k) / stride + 1;
    let d = c * k * k;
    let mut patches = Tensor::zeros(&[ny * nx, d]);
    let mut origins = Vec::with_capacity(ny * nx);
    let mut valid = Vec::with_capacity(ny * nx);
    let data = features.data();
    for py in 0..ny {
        for px in 0..nx {
            let n = py * nx + px;
            let (oy, ox) = ((py * stride) as i64 - pad as i64, (px * stride) as i64 - pad as i64);
            origins.push((oy, ox));
            let mut ok = true;
            let row = &mut patches.data_mut()[n * d..(n + 1) * d];
            for ky in 0..k {
                for kx in 0..k {
                    let (y, x) = (oy + ky as i64, ox + kx as i64);
                    if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                        continue;
                    }
                    let (y, x) = (y as usize, x as usize);
                    if let Some(m) = mask {
                        ok &= m.is_known(x, y);
                    }
                    for ci in 0..c {
                        row[(ci * k + ky) * k + kx] = data[(ci * h + y) * w + x];
                    }
                }
            }
            valid.push(ok);
        }
    }
    Ok(PatchSet {
        k,
        channels: c,
        patches,
        origins,
        valid,
    })
}

/// Same-padded stride-1 patch validity for a row-major known map.
pub fn patch_validity(known: &[bool], h: usize, w: usize, k: usize) -> Vec<bool> {
    let r = (k / 2) as i64;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut ok = true;
            for yy in (y - r).max(0)..=(y + r).min(h as i64 - 1) {
                for xx in (x - r).max(0)..=(x + r).min(w as i64 - 1) {
                    ok &= known[yy as usize * w + xx as usize];
                }
            }
            out.push(ok);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    /// `[C, H, W]`: `fg` at known pixels, the attention reconstruction in
    /// holes.
    pub reconstructed: Tensor,
    /// `[H, W, N]` softmax weights; zero on invalid patches, rows sum to 1.
    pub scores: Tensor,
}

/// Contextual attention of `fg: [C, H, W]` against a background patch set.
///
/// Known pixels of `fg_mask` pass `fg` through unchanged; hole pixels take
/// the overlap-averaged reconstruction.
pub fn contextual_attention(fg: &Tensor, bg: &PatchSet, fg_mask: &MaskMap, scale: f64) -> Result<AttentionOutput> {
    let (c, h, w) = match *fg.shape() {
        [c, h, w] => (c, h, w),
        ref s => return Err(Error::shape(format!("fg must be [C,H,W], got {s:?}"))),
    };
    if c != bg.channels {
        return Err(Error::shape(format!("fg has {c} channels, patches {}", bg.channels)));
    }
    if (fg_mask.width(), fg_mask.height()) != (w, h) {
        return Err(Error::shape("fg mask differs from fg"));
    }
    let core = Core::new(c, h, w, bg.k, scale, bg.patches.data().to_vec(), bg.valid.clone())?;
    let mut scores = Tensor::zeros(&[h, w, core.n]);
    let recon = core.forward(fg.data(), Some(scores.data_mut()));
    let m = fg_mask.known();
    let hw = h * w;
    let reconstructed = Tensor::from_fn(&[c, h, w], |i| if m[i % hw] { fg.data()[i] } else { recon[i] });
    Ok(AttentionOutput { reconstructed, scores })
}

/// Shared forward/backward machinery over one foreground map and a fixed
/// `[N, D]` background patch matrix.
struct Core {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    d: usize,
    n: usize,
    scale: f64,
    bg: Vec<f64>,
    bg_norm: Vec<f64>,
    valid: Vec<bool>,
    /// Per-pixel number of in-image locations whose window covers it.
    count: Vec<f64>,
}

/// Intermediate quantities for one block of `Q` queries; `[Q, N]` and
/// `[Q, D]` matrices are row-major.
struct Block {
    fg: Vec<f64>,
    fg_norm: Vec<f64>,
    dot: Vec<f64>,
    probs: Vec<f64>,
}

impl Core {
    fn new(c: usize, h: usize, w: usize, k: usize, scale: f64, bg: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::BadArgument(format!("softmax scale must be positive, got {scale}")));
        }
        let d = c * k * k;
        let n = valid.len();
        assert_eq!(bg.len(), n * d, "patch matrix size");
        if !valid.iter().any(|&v| v) {
            return Err(Error::NoBackground);
        }
        let bg_norm = bg.chunks(d).map(|p| p.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        let r = (k / 2) as i64;
        let count = (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as i64, (i % w) as i64);
                let ny = (y + r).min(h as i64 - 1) - (y - r).max(0) + 1;
                let nx = (x + r).min(w as i64 - 1) - (x - r).max(0) + 1;
                (ny * nx) as f64
            })
            .collect();
        Ok(Self {
            c,
            h,
            w,
            k,
            d,
            n,
            scale,
            bg,
            bg_norm,
            valid,
            count,
        })
    }

    /// Calls `f(pixel_index, patch_offset)` for every in-image pixel of the
    /// window centred on location `q`, for channel 0; channel `ci` adds
    /// `ci·H·W` and `ci·k·k` respectively.
    #[inline]
    fn window(&self, q: usize, mut f: impl FnMut(usize, usize)) {
        let r = (self.k / 2) as i64;
        let (qy, qx) = ((q / self.w) as i64, (q % self.w) as i64);
        for ky in 0..self.k {
            let y = qy + ky as i64 - r;
            if y < 0 || y >= self.h as i64 {
                continue;
            }
            for kx in 0..self.k {
                let x = qx + kx as i64 - r;
                if x < 0 || x >= self.w as i64 {
                    continue;
                }
                f(y as usize * self.w + x as usize, ky * self.k + kx);
            }
        }
    }

    fn block(&self, fg: &[f64], q0: usize, q: usize) -> Block {
        let (d, n, hw, kk) = (self.d, self.n, self.h * self.w, self.k * self.k);
        let mut fgp = vec![0.0; q * d];
        for qi in 0..q {
            let row = &mut fgp[qi * d..(qi + 1) * d];
            self.window(q0 + qi, |pix, off| {
                for ci in 0..self.c {
                    row[ci * kk + off] = fg[ci * hw + pix];
                }
            });
        }
        let fg_norm: Vec<f64> = fgp.chunks(d).map(|p| p.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        let mut dot = vec![0.0; q * n];
        gemm(q, d, n, 1.0, &fgp, false, &self.bg, true, 0.0, &mut dot);
        let mut probs = vec![0.0; q * n];
        for qi in 0..q {
            let (drow, prow) = (&dot[qi * n..(qi + 1) * n], &mut probs[qi * n..(qi + 1) * n]);
            let mut zmax = f64::NEG_INFINITY;
            for j in 0..n {
                if self.valid[j] {
                    let z = self.scale * drow[j] / (fg_norm[qi] * self.bg_norm[j] + COS_EPS);
                    prow[j] = z;
                    zmax = zmax.max(z);
                }
            }
            let mut total = 0.0;
            for j in 0..n {
                if self.valid[j] {
                    prow[j] = (prow[j] - zmax).exp();
                    total += prow[j];
                } else {
                    prow[j] = 0.0;
                }
            }
            prow.iter_mut().for_each(|p| *p /= total);
        }
        Block {
            fg: fgp,
            fg_norm,
            dot,
            probs,
        }
    }

    /// Unblended reconstruction `[C·H·W]`; optionally fills `[H·W, N]` scores.
    fn forward(&self, fg: &[f64], mut scores: Option<&mut [f64]>) -> Vec<f64> {
        let (d, n, hw, kk) = (self.d, self.n, self.h * self.w, self.k * self.k);
        let mut out = vec![0.0; self.c * hw];
        let mut q0 = 0;
        while q0 < hw {
            let q = CHUNK.min(hw - q0);
            let b = self.block(fg, q0, q);
            if let Some(s) = scores.as_deref_mut() {
                s[q0 * n..(q0 + q) * n].copy_from_slice(&b.probs);
            }
            let mut pasted = vec![0.0; q * d];
            gemm(q, n, d, 1.0, &b.probs, false, &self.bg, false, 0.0, &mut pasted);
            for qi in 0..q {
                let row = &pasted[qi * d..(qi + 1) * d];
                self.window(q0 + qi, |pix, off| {
                    for ci in 0..self.c {
                        out[ci * hw + pix] += row[ci * kk + off];
                    }
                });
            }
            q0 += q;
        }
        for (i, v) in out.iter_mut().enumerate() {
            *v /= self.count[i % hw];
        }
        out
    }

    /// Gradients of `⟨d_recon, forward(fg)⟩` with respect to `fg` (`[C·H·W]`)
    /// and the patch matrix (`[N·D]`).
    fn backward(&self, fg: &[f64], d_recon: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (d, n, hw, kk) = (self.d, self.n, self.h * self.w, self.k * self.k);
        let mut d_fg = vec![0.0; self.c * hw];
        let mut d_bg = vec![0.0; n * d];
        let scaled: Vec<f64> = d_recon.iter().enumerate().map(|(i, g)| g / self.count[i % hw]).collect();
        let mut q0 = 0;
        while q0 < hw {
            let q = CHUNK.min(hw - q0);
            let Block {
                fg: fgp,
                fg_norm,
                dot,
                probs,
            } = self.block(fg, q0, q);
            // gradient of each pasted patch
            let mut d_paste = vec![0.0; q * d];
            for qi in 0..q {
                let row = &mut d_paste[qi * d..(qi + 1) * d];
                self.window(q0 + qi, |pix, off| {
                    for ci in 0..self.c {
                        row[ci * kk + off] = scaled[ci * hw + pix];
                    }
                });
            }
            // pasted = probs · bg
            gemm(n, q, d, 1.0, &probs, true, &d_paste, false, 1.0, &mut d_bg);
            let mut d_probs = vec![0.0; q * n];
            gemm(q, d, n, 1.0, &d_paste, false, &self.bg, true, 0.0, &mut d_probs);
            // softmax and cosine
            let mut g1 = vec![0.0; q * n];
            let mut row_g2 = vec![0.0; q];
            let mut col_g2 = vec![0.0; n];
            for qi in 0..q {
                let r = qi * n..(qi + 1) * n;
                let (p, dp) = (&probs[r.clone()], &d_probs[r]);
                let inner: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    if !self.valid[j] {
                        continue;
                    }
                    let dz = p[j] * (dp[j] - inner) * self.scale;
                    let den = fg_norm[qi] * self.bg_norm[j] + COS_EPS;
                    let idx = qi * n + j;
                    g1[idx] = dz / den;
                    let g2 = dz * dot[idx] / (den * den);
                    row_g2[qi] += g2 * self.bg_norm[j];
                    col_g2[j] += g2 * fg_norm[qi];
                }
            }
            let mut d_fgp = vec![0.0; q * d];
            gemm(q, n, d, 1.0, &g1, false, &self.bg, false, 0.0, &mut d_fgp);
            for qi in 0..q {
                if fg_norm[qi] > 0.0 {
                    let s = row_g2[qi] / fg_norm[qi];
                    for t in 0..d {
                        d_fgp[qi * d + t] -= s * fgp[qi * d + t];
                    }
                }
            }
            gemm(n, q, d, 1.0, &g1, true, &fgp, false, 1.0, &mut d_bg);
            for j in 0..n {
                if self.bg_norm[j] > 0.0 && col_g2[j] != 0.0 {
                    let s = col_g2[j] / self.bg_norm[j];
                    for t in 0..d {
                        d_bg[j * d + t] -= s * self.bg[j * d + t];
                    }
                }
            }
            for qi in 0..q {
                let row = &d_fgp[qi * d..(qi + 1) * d];
                self.window(q0 + qi, |pix, off| {
                    for ci in 0..self.c {
                        d_fg[ci * hw + pix] += row[ci * kk + off];
                    }
                });
            }
            q0 += q;
        }
        (d_fg, d_bg)
    }
}

/// Same-padded stride-1 patch matrix of `[B, C, H, W]` maps, `[B·H·W, C·k·k]`.
fn patch_matrix(x: &[f64], b: usize, c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (d, r) = (c * k * k, (k / 2) as i64);
    let mut out = vec![0.0; b * h * w * d];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let row = &mut out[((bi * h + y) * w + xx) * d..][..d];
                for ci in 0..c {
                    for ky in 0..k {
                        let sy = y as i64 + ky as i64 - r;
                        if sy < 0 || sy >= h as i64 {
                            continue;
                        }
                        for kx in 0..k {
                            let sx = xx as i64 + kx as i64 - r;
                            if sx < 0 || sx >= w as i64 {
                                continue;
                            }
                            row[(ci * k + ky) * k + kx] = x[((bi * c + ci) * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`patch_matrix`].
fn patch_matrix_adjoint(dp: &[f64], b: usize, c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (d, r) = (c * k * k, (k / 2) as i64);
    let mut out = vec![0.0; b * c * h * w];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let row = &dp[((bi * h + y) * w + xx) * d..][..d];
                for ci in 0..c {
                    for ky in 0..k {
                        let sy = y as i64 + ky as i64 - r;
                        if sy < 0 || sy >= h as i64 {
                            continue;
                        }
                        for kx in 0..k {
                            let sx = xx as i64 + kx as i64 - r;
                            if sx < 0 || sx >= w as i64 {
                                continue;
                            }
                            out[((bi * c + ci) * h + sy as usize) * w + sx as usize] += row[(ci * k + ky) * k + kx];
                        }
                    }
                }
            }
        }
    }
    out
}

impl Graph {
    /// Differentiable contextual attention of `fg: [1, C, H, W]` against the
    /// same-padded stride-1 patches of `bg: [B, C, H', W']`.
    ///
    /// `bg_valid` has one entry per background location (`B·H'·W'`) and
    /// `fg_mask: [1, 1, H, W]` is 1 where `fg` passes through. Gradients
    /// reach both `fg` and `bg`.
    pub fn contextual_attention(
        &mut self,
        fg: Var,
        bg: Var,
        bg_valid: Vec<bool>,
        fg_mask: &Tensor,
        k: usize,
        scale: f64,
    ) -> Result<Var> {
        let (n1, c, h, w) = self.value(fg).dims4();
        let (b, cb, hb, wb) = self.value(bg).dims4();
        if n1 != 1 || cb != c || fg_mask.shape() != [1, 1, h, w] || bg_valid.len() != b * hb * wb {
            return Err(Error::shape(format!(
                "contextual attention: fg {:?}, bg {:?}, mask {:?}, {} validity flags",
                self.shape(fg),
                self.shape(bg),
                fg_mask.shape(),
                bg_valid.len()
            )));
        }
        let bgm = patch_matrix(self.value(bg).data(), b, c, hb, wb, k);
        let core = Core::new(c, h, w, k, scale, bgm, bg_valid)?;
        let fgv = self.value(fg).data().to_vec();
        let recon = core.forward(&fgv, None);
        let m = fg_mask.data().to_vec();
        let hw = h * w;
        let out = Tensor::from_fn(&[1, c, h, w], |i| {
            let mi = m[i % hw];
            mi * fgv[i] + (1.0 - mi) * recon[i]
        });
        Ok(self.op(out, &[fg, bg], move |g, p, need| {
            let gd = g.data();
            let d_recon: Vec<f64> = gd.iter().enumerate().map(|(i, v)| v * (1.0 - m[i % hw])).collect();
            let (mut d_fg, d_bgm) = core.backward(p[0].data(), &d_recon);
            for (i, v) in d_fg.iter_mut().enumerate() {
                *v += gd[i] * m[i % hw];
            }
            let dfg = need[0].then(|| Tensor::from_vec(&[1, c, h, w], d_fg).unwrap());
            let dbg = need[1]
                .then(|| Tensor::from_vec(&[b, c, hb, wb], patch_matrix_adjoint(&d_bgm, b, c, hb, wb, k)).unwrap());
            vec![dfg, dbg]
        }))
    }
}
