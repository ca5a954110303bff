//! Street-view sequences: frames, masks, cameras and the F-frame samples
//! built from them.

mod io;
mod preprocess;

pub use io::{
    frame_file, list_frame_ids, load_sequence, load_sequence_with, load_shadow_samples, read_camera, read_frame,
    read_mask, save_sequence, write_frame, write_mask, LoadOptions, SequenceFiles, ShadowSample,
};
#[allow(unused_imports)]
pub(crate) use io::{to_u8, write_labels};
pub use preprocess::{
    downsample, preprocess_eval, preprocess_eval_with, preprocess_train, preprocess_train_with,
    CropConfig, DownsampleFilter,
};

use nalgebra::{Matrix3, Matrix4};

use crate::error::{Error, Result};
use crate::geometry::FlowField;
use crate::tensor::Tensor;

/// An RGB frame, channel-planar `[3, H, W]` with values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pixels: Tensor,
    pub frame_id: usize,
}

impl Frame {
    pub fn new(pixels: Tensor, frame_id: usize) -> Result<Self> {
        match pixels.shape() {
            [3, h, w] if *h > 0 && *w > 0 => {}
            s => return Err(Error::shape(format!("frame must be [3,H,W], got {s:?}"))),
        }
        if pixels.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::BadArgument("frame values outside [-1, 1]".into()));
        }
        Ok(Self { pixels, frame_id })
    }

    /// Builds a frame from `f(x, y) -> [r, g, b]`, clamping into `[-1, 1]`.
    pub fn from_fn(width: usize, height: usize, frame_id: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut pixels = Tensor::zeros(&[3, height, width]);
        let hw = width * height;
        for y in 0..height {
            for x in 0..width {
                let rgb = f(x, y);
                for (c, v) in rgb.iter().enumerate() {
                    pixels.data_mut()[c * hw + y * width + x] = v.clamp(-1.0, 1.0);
                }
            }
        }
        Self { pixels, frame_id }
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.pixels.data()[(c * self.height() + y) * self.width() + x]
    }

    /// `[1, 3, H, W]` view for the networks.
    pub fn to_batch(&self) -> Tensor {
        self.pixels.clone().reshape(&[1, 3, self.height(), self.width()]).unwrap()
    }

    /// Frame from a `[1,3,H,W]` or `[3,H,W]` tensor, clamped into range.
    pub fn from_tensor(t: &Tensor, frame_id: usize) -> Result<Self> {
        let (h, w) = match *t.shape() {
            [1, 3, h, w] | [3, h, w] => (h, w),
            ref s => return Err(Error::shape(format!("cannot make a frame from {s:?}"))),
        };
        let pixels = Tensor::from_vec(&[3, h, w], t.data().iter().map(|v| v.clamp(-1.0, 1.0)).collect())?;
        Ok(Self { pixels, frame_id })
    }

    /// `I_gt ⊙ M`: hole pixels become exactly zero.
    pub fn masked(&self, mask: &MaskMap) -> Result<Self> {
        self.check_mask(mask)?;
        let hw = self.width() * self.height();
        let mut pixels = self.pixels.clone();
        for (i, v) in pixels.data_mut().iter_mut().enumerate() {
            if !mask.known[i % hw] {
                *v = 0.0;
            }
        }
        Ok(Self {
            pixels,
            frame_id: self.frame_id,
        })
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if x0 + w > self.width() || y0 + h > self.height() {
            return Err(Error::shape(format!(
                "crop {w}x{h}+{x0}+{y0} outside {}x{} frame",
                self.width(),
                self.height()
            )));
        }
        Ok(Self::from_fn(w, h, self.frame_id, |x, y| {
            [0, 1, 2].map(|c| self.get(x + x0, y + y0, c))
        }))
    }

    /// Errors unless `mask` has the frame's size.
    pub fn check_mask(&self, mask: &MaskMap) -> Result<()> {
        if (mask.width(), mask.height()) != (self.width(), self.height()) {
            return Err(Error::shape(format!(
                "mask {}x{} vs frame {}x{}",
                mask.width(),
                mask.height(),
                self.width(),
                self.height()
            )));
        }
        Ok(())
    }
}

/// Binary map: `true` (1) marks known background, `false` (0) a hole.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MaskMap {
    width: usize,
    height: usize,
    known: Vec<bool>,
}

impl MaskMap {
    pub fn all_known(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            known: vec![true; width * height],
        }
    }

    pub fn all_hole(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            known: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut known = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                known.push(f(x, y));
            }
        }
        Self { width, height, known }
    }

    pub fn from_known(width: usize, height: usize, known: Vec<bool>) -> Result<Self> {
        if known.len() != width * height {
            return Err(Error::shape(format!(
                "{} mask values for {width}x{height}",
                known.len()
            )));
        }
        Ok(Self { width, height, known })
    }

    /// Mask whose hole is the given axis-aligned rectangle (clipped).
    pub fn with_rect_hole(width: usize, height: usize, x0: usize, y0: usize, w: usize, h: usize) -> Self {
        Self::from_fn(width, height, |x, y| !(x >= x0 && x < x0 + w && y >= y0 && y < y0 + h))
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn is_known(&self, x: usize, y: usize) -> bool {
        self.known[y * self.width + x]
    }

    #[inline]
    pub fn is_hole(&self, x: usize, y: usize) -> bool {
        !self.is_known(x, y)
    }

    pub fn known(&self) -> &[bool] {
        &self.known
    }

    pub fn hole_count(&self) -> usize {
        self.known.iter().filter(|&&k| !k).count()
    }

    /// `[1, 1, H, W]`, 1 on known pixels.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            &[1, 1, self.height, self.width],
            self.known.iter().map(|&k| k as u8 as f64).collect(),
        )
        .unwrap()
    }

    /// `[1, 1, H, W]`, 1 on hole pixels.
    pub fn hole_tensor(&self) -> Tensor {
        Tensor::from_vec(
            &[1, 1, self.height, self.width],
            self.known.iter().map(|&k| (!k) as u8 as f64).collect(),
        )
        .unwrap()
    }

    /// Union of the two hole sets.
    pub fn union_holes(&self, other: &MaskMap) -> Result<MaskMap> {
        self.check_same(other)?;
        Ok(Self {
            width: self.width,
            height: self.height,
            known: self.known.iter().zip(&other.known).map(|(&a, &b)| a && b).collect(),
        })
    }

    /// True when every hole of `self` is also a hole of `other`.
    pub fn holes_subset_of(&self, other: &MaskMap) -> bool {
        self.known.iter().zip(&other.known).all(|(&a, &b)| a || !b)
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::shape("mask crop out of range"));
        }
        Ok(Self::from_fn(w, h, |x, y| self.is_known(x + x0, y + y0)))
    }

    pub(crate) fn check_same(&self, other: &MaskMap) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::shape(format!(
                "masks {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }
}

/// Pinhole camera with a world-from-camera pose and a metric depth map.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    intrinsics: Matrix3<f64>,
    pose: Matrix4<f64>,
    width: usize,
    height: usize,
    depth: Vec<f64>,
    depth_valid: Vec<bool>,
}

impl CameraModel {
    pub fn new(
        intrinsics: Matrix3<f64>,
        pose: Matrix4<f64>,
        width: usize,
        height: usize,
        depth: Vec<f64>,
        depth_valid: Vec<bool>,
    ) -> Result<Self> {
        let k = &intrinsics;
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0 {
            return Err(Error::BadCamera("intrinsics must be upper triangular with K[2,2] = 1".into()));
        }
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            return Err(Error::BadCamera("focal lengths must be positive".into()));
        }
        let r = pose.fixed_view::<3, 3>(0, 0).into_owned();
        let ortho = (r.transpose() * r - Matrix3::identity()).amax();
        if !(ortho < 1e-6) || !(r.determinant() > 0.0) {
            return Err(Error::BadCamera("pose rotation is not a proper rotation".into()));
        }
        if pose[(3, 0)] != 0.0 || pose[(3, 1)] != 0.0 || pose[(3, 2)] != 0.0 || pose[(3, 3)] != 1.0 {
            return Err(Error::BadCamera("pose bottom row must be [0 0 0 1]".into()));
        }
        if depth.len() != width * height || depth_valid.len() != width * height {
            return Err(Error::shape("depth map size"));
        }
        Ok(Self {
            intrinsics,
            pose,
            width,
            height,
            depth,
            depth_valid,
        })
    }

    /// Intrinsics from `fx fy cx cy`.
    pub fn intrinsics_from(fx: f64, fy: f64, cx: f64, cy: f64) -> Matrix3<f64> {
        Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0)
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    pub fn pose(&self) -> &Matrix4<f64> {
        &self.pose
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Metric depth where valid and positive.
    #[inline]
    pub fn depth_at(&self, x: usize, y: usize) -> Option<f64> {
        let i = y * self.width + x;
        let z = self.depth[i];
        (self.depth_valid[i] && z > 0.0).then_some(z)
    }

    pub fn depth(&self) -> &[f64] {
        &self.depth
    }

    pub fn depth_valid(&self) -> &[bool] {
        &self.depth_valid
    }

    /// Crops the depth map and shifts the principal point accordingly.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::shape("camera crop out of range"));
        }
        let mut k = self.intrinsics;
        k[(0, 2)] -= x0 as f64;
        k[(1, 2)] -= y0 as f64;
        let idx = |x: usize, y: usize| (y + y0) * self.width + x + x0;
        let mut depth = Vec::with_capacity(w * h);
        let mut valid = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                depth.push(self.depth[idx(x, y)]);
                valid.push(self.depth_valid[idx(x, y)]);
            }
        }
        Self::new(k, self.pose, w, h, depth, valid)
    }

    pub(crate) fn with_depth(&self, k: Matrix3<f64>, w: usize, h: usize, depth: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        Self::new(k, self.pose, w, h, depth, valid)
    }
}

/// `F = 2δ + 1` frames around a target at the middle index.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSequence {
    pub frames: Vec<Frame>,
    /// Holes to inpaint, one per frame.
    pub masks: Vec<MaskMap>,
    /// `U^{m→i}` for every reference frame `i` in index order (target
    /// skipped); empty until attached.
    pub flows: Vec<FlowField>,
    pub target_index: usize,
    pub delta: usize,
    /// Real (unlabelled) objects, hole-coded, when known. Their pixels carry
    /// no trustworthy ground truth.
    pub object_masks: Option<Vec<MaskMap>>,
    pub cameras: Option<Vec<CameraModel>>,
}

impl VideoSequence {
    /// Validates the window invariants; `flows` may be empty.
    pub fn new(frames: Vec<Frame>, masks: Vec<MaskMap>, flows: Vec<FlowField>, delta: usize) -> Result<Self> {
        let seq = Self {
            frames,
            masks,
            flows,
            target_index: delta,
            delta,
            object_masks: None,
            cameras: None,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }

    pub fn target(&self) -> &Frame {
        &self.frames[self.target_index]
    }

    /// Frame indices other than the target, in order.
    pub fn reference_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| i != self.target_index).collect()
    }

    /// `U^{m→i}` for reference index `i`.
    pub fn flow_to(&self, i: usize) -> Option<&FlowField> {
        if i == self.target_index || self.flows.is_empty() {
            return None;
        }
        let k = if i < self.target_index { i } else { i - 1 };
        self.flows.get(k)
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.frames.len();
        if f != 2 * self.delta + 1 || self.target_index != self.delta {
            return Err(Error::BadSequence(format!(
                "{f} frames with delta {} and target {}",
                self.delta, self.target_index
            )));
        }
        if self.masks.len() != f {
            return Err(Error::BadSequence(format!("{} masks for {f} frames", self.masks.len())));
        }
        if !self.flows.is_empty() && self.flows.len() != f - 1 {
            return Err(Error::BadSequence(format!("{} flows for {f} frames", self.flows.len())));
        }
        let (w, h) = (self.width(), self.height());
        for fr in &self.frames {
            if (fr.width(), fr.height()) != (w, h) {
                return Err(Error::shape("frames differ in size"));
            }
        }
        let mask_lists = std::iter::once(&self.masks).chain(self.object_masks.as_ref());
        for list in mask_lists {
            if list.len() != f {
                return Err(Error::BadSequence("mask list length".into()));
            }
            for m in list {
                if (m.width(), m.height()) != (w, h) {
                    return Err(Error::shape("mask differs from frame size"));
                }
            }
        }
        for fl in &self.flows {
            if (fl.width(), fl.height()) != (w, h) {
                return Err(Error::shape("flow differs from frame size"));
            }
        }
        if let Some(cams) = &self.cameras {
            if cams.len() != f || cams.iter().any(|c| (c.width(), c.height()) != (w, h)) {
                return Err(Error::shape("cameras do not match frames"));
            }
        }
        Ok(())
    }

    /// Applies one spatial window to every per-pixel field.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        let out = Self {
            frames: self.frames.iter().map(|f| f.crop(x0, y0, w, h)).collect::<Result<_>>()?,
            masks: self.masks.iter().map(|m| m.crop(x0, y0, w, h)).collect::<Result<_>>()?,
            flows: self.flows.iter().map(|f| f.crop(x0, y0, w, h)).collect::<Result<_>>()?,
            target_index: self.target_index,
            delta: self.delta,
            object_masks: self
                .object_masks
                .as_ref()
                .map(|l| l.iter().map(|m| m.crop(x0, y0, w, h)).collect::<Result<_>>())
                .transpose()?,
            cameras: self
                .cameras
                .as_ref()
                .map(|l| l.iter().map(|c| c.crop(x0, y0, w, h)).collect::<Result<_>>())
                .transpose()?,
        };
        out.validate()?;
        Ok(out)
    }

    /// Computes `U^{m→i}` from the target depth and each reference pose.
    pub fn attach_flows_from_cameras(&mut self) -> Result<()> {
        let cams = self
            .cameras
            .as_ref()
            .ok_or_else(|| Error::BadSequence("no camera data for flow computation".into()))?;
        let target = &cams[self.target_index];
        self.flows = self
            .reference_indices()
            .into_iter()
            .map(|i| crate::geometry::flow_from_depth(target, cams[i].pose()))
            .collect::<Result<_>>()?;
        Ok(())
    }

    /// Union of every frame's hole.
    pub fn hole_union(&self) -> MaskMap {
        let mut acc = self.masks[0].clone();
        for m in &self.masks[1..] {
            acc = acc.union_holes(m).expect("validated sizes");
        }
        acc
    }
}
