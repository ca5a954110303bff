//! Procedural fixtures: textured scenes seen by a translating camera, and
//! objects casting dark shadow bands.

use nalgebra::{Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{CameraModel, Frame, MaskMap, ShadowSample, VideoSequence};
use crate::error::{Error, Result};
use crate::geometry::FlowField;
use crate::tensor::Tensor;

/// A smooth band-limited colour field over the plane, values in (−0.9, 0.9).
#[derive(Debug, Clone)]
pub struct Texture {
    waves: Vec<[f64; 4]>,
    bias: [f64; 3],
}

impl Texture {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let waves = (0..9)
            .map(|_| {
                let f = rng.random_range(0.08..0.45);
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                [f * a.cos(), f * a.sin(), rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.1..0.2)]
            })
            .collect();
        let bias = [0, 1, 2].map(|_| rng.random_range(-0.2..0.2));
        Self { waves, bias }
    }

    pub fn sample(&self, x: f64, y: f64) -> [f64; 3] {
        let mut out = self.bias;
        for (i, [fx, fy, ph, amp]) in self.waves.iter().enumerate() {
            out[i % 3] += amp * (fx * x + fy * y + ph).sin();
        }
        out.map(|v| v.clamp(-0.9, 0.9))
    }
}

/// Fixture for a camera sliding over a textured plane.
#[derive(Debug, Clone, PartialEq)]
pub struct TranslationSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    /// Image motion between consecutive frames, in pixels.
    pub shift: (f64, f64),
    /// Target-frame hole `(x0, y0, w, h)`.
    pub hole: (usize, usize, usize, usize),
    /// World-static occluders drift across the other frames with the scene;
    /// screen-static ones (e.g. moving along with the camera) keep their
    /// image position and so uncover different background in every frame.
    pub occluder: Occluder,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Occluder {
    #[default]
    WorldStatic,
    ScreenStatic,
}

/// Frames `I_t(p) = T(p + t·shift)`, exact flows `U^{m→i} = (m − i)·shift`
/// and rectangular holes.
pub fn translating_sequence(spec: &TranslationSpec) -> Result<VideoSequence> {
    if spec.frames % 2 == 0 {
        return Err(Error::BadArgument("frame count must be odd".into()));
    }
    let tex = Texture::new(spec.seed);
    let (w, h) = (spec.width, spec.height);
    let m = spec.frames / 2;
    let (sx, sy) = spec.shift;
    let frames = (0..spec.frames)
        .map(|t| {
            let (ox, oy) = (t as f64 * sx, t as f64 * sy);
            Frame::from_fn(w, h, t, |x, y| tex.sample(x as f64 + ox, y as f64 + oy))
        })
        .collect();
    let (hx, hy, hw, hh) = spec.hole;
    let masks = (0..spec.frames)
        .map(|i| {
            let d = match spec.occluder {
                Occluder::WorldStatic => i as f64 - m as f64,
                Occluder::ScreenStatic => 0.0,
            };
            let (dx, dy) = ((d * sx).round() as i64, (d * sy).round() as i64);
            MaskMap::from_fn(w, h, |x, y| {
                let (wx, wy) = (x as i64 + dx, y as i64 + dy);
                !((hx as i64..(hx + hw) as i64).contains(&wx) && (hy as i64..(hy + hh) as i64).contains(&wy))
            })
        })
        .collect();
    let flows = (0..spec.frames)
        .filter(|&i| i != m)
        .map(|i| {
            let d = m as f64 - i as f64;
            FlowField::constant(w, h, d * sx, d * sy)
        })
        .collect();
    VideoSequence::new(frames, masks, flows, m)
}

/// Flow `U^{t→r}` of a [`translating_sequence`] between any two frames.
pub fn translation_flow(spec: &TranslationSpec, target: usize, reference: usize) -> FlowField {
    let d = target as f64 - reference as f64;
    FlowField::constant(spec.width, spec.height, d * spec.shift.0, d * spec.shift.1)
}

/// Cameras over a fronto-parallel plane at `depth` metres whose
/// depth-derived flows reproduce [`translation_flow`]. Intrinsics use focal
/// length `focal` and the image centre as principal point.
pub fn translation_cameras(spec: &TranslationSpec, depth: f64, focal: f64) -> Result<Vec<CameraModel>> {
    let (w, h) = (spec.width, spec.height);
    let k = CameraModel::intrinsics_from(focal, focal, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    (0..spec.frames)
        .map(|t| {
            let c = t as f64 * depth / focal;
            let pose = Matrix4::new_translation(&Vector3::new(c * spec.shift.0, c * spec.shift.1, 0.0));
            CameraModel::new(k, pose, w, h, vec![depth; w * h], vec![true; w * h])
        })
        .collect()
}

/// A clean background, the same view with an object and its shadow, and
/// the corresponding masks.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadowScene {
    pub clean: Frame,
    pub observed: Frame,
    /// Hole = object pixels.
    pub object_mask: MaskMap,
    /// Hole = shadow pixels (outside the object).
    pub shadow_mask: MaskMap,
}

impl ShadowScene {
    pub fn labels(&self) -> Tensor {
        let (w, h) = (self.clean.width(), self.clean.height());
        Tensor::from_fn(&[h, w], |i| self.shadow_mask.known()[i].then_some(0.0).unwrap_or(1.0))
    }

    pub fn sample(&self) -> ShadowSample {
        ShadowSample {
            frame: self.observed.clone(),
            object_mask: self.object_mask.clone(),
            labels: self.labels(),
        }
    }

    /// Object ∪ shadow.
    pub fn full_hole(&self) -> MaskMap {
        self.object_mask.union_holes(&self.shadow_mask).expect("same size")
    }
}

/// Geometry of one object with the shadow band it casts below itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShadowLayout {
    pub object: (i64, i64, i64, i64),
    pub band_height: i64,
    /// Intensity multiplier inside the shadow, in `(0, 1)`.
    pub darkness: f64,
    pub object_color: [f64; 3],
}

impl ShadowLayout {
    pub fn random(w: usize, h: usize, rng: &mut impl Rng) -> Self {
        let ow = rng.random_range(w as i64 / 5..=w as i64 / 3);
        let oh = rng.random_range(h as i64 / 6..=h as i64 / 4);
        let band = rng.random_range(h as i64 / 8..=h as i64 / 5).max(2);
        let x0 = rng.random_range(2..=(w as i64 - ow - 2));
        let y0 = rng.random_range(2..=(h as i64 - oh - band - 2).max(2));
        Self {
            object: (x0, y0, ow, oh),
            band_height: band,
            darkness: rng.random_range(0.2..0.35),
            object_color: [0.9, rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9)],
        }
    }

    pub fn in_object(&self, x: i64, y: i64) -> bool {
        let (x0, y0, ow, oh) = self.object;
        (x0..x0 + ow).contains(&x) && (y0..y0 + oh).contains(&y)
    }

    /// Band directly under the object, slightly wider than it.
    pub fn in_shadow(&self, x: i64, y: i64) -> bool {
        let (x0, y0, ow, oh) = self.object;
        !self.in_object(x, y) && (x0 - 1..x0 + ow + 2).contains(&x) && (y0 + oh..y0 + oh + self.band_height).contains(&y)
    }

    /// Darkens towards black in the shadow and paints the object.
    pub fn render(&self, clean: &Frame) -> Frame {
        Frame::from_fn(clean.width(), clean.height(), clean.frame_id, |x, y| {
            let (xi, yi) = (x as i64, y as i64);
            if self.in_object(xi, yi) {
                self.object_color
            } else if self.in_shadow(xi, yi) {
                [0, 1, 2].map(|c| (clean.get(x, y, c) + 1.0) * self.darkness - 1.0)
            } else {
                [0, 1, 2].map(|c| clean.get(x, y, c))
            }
        })
    }

    pub fn masks(&self, w: usize, h: usize) -> (MaskMap, MaskMap) {
        (
            MaskMap::from_fn(w, h, |x, y| !self.in_object(x as i64, y as i64)),
            MaskMap::from_fn(w, h, |x, y| !self.in_shadow(x as i64, y as i64)),
        )
    }

    /// Same layout moved by whole pixels.
    pub fn shifted(&self, dx: i64, dy: i64) -> Self {
        let (x0, y0, ow, oh) = self.object;
        Self {
            object: (x0 + dx, y0 + dy, ow, oh),
            ..*self
        }
    }
}

pub fn shadow_scene(width: usize, height: usize, seed: u64) -> ShadowScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tex = Texture::new(rng.random());
    let clean = Frame::from_fn(width, height, 0, |x, y| tex.sample(x as f64, y as f64));
    let layout = ShadowLayout::random(width, height, &mut rng);
    let (object_mask, shadow_mask) = layout.masks(width, height);
    ShadowScene {
        observed: layout.render(&clean),
        clean,
        object_mask,
        shadow_mask,
    }
}

/// A translating-camera clip of an object and its shadow, both static in
/// the world.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadowVideo {
    pub spec: TranslationSpec,
    pub clean: Vec<Frame>,
    pub observed: Vec<Frame>,
    pub object_masks: Vec<MaskMap>,
    pub shadow_masks: Vec<MaskMap>,
}

/// `spec.hole` is ignored; the layout is drawn from `spec.seed`. The shift
/// should be integral so masks move exactly with the scene.
pub fn shadow_video(spec: &TranslationSpec) -> ShadowVideo {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed);
    let tex = Texture::new(spec.seed);
    let (w, h) = (spec.width, spec.height);
    let base = ShadowLayout::random(w, h, &mut rng);
    let m = spec.frames as i64 / 2;
    let mut out = ShadowVideo {
        spec: spec.clone(),
        clean: Vec::new(),
        observed: Vec::new(),
        object_masks: Vec::new(),
        shadow_masks: Vec::new(),
    };
    for t in 0..spec.frames {
        let (ox, oy) = (t as f64 * spec.shift.0, t as f64 * spec.shift.1);
        let clean = Frame::from_fn(w, h, t, |x, y| tex.sample(x as f64 + ox, y as f64 + oy));
        let d = t as i64 - m;
        let lay = base.shifted(-(d as f64 * spec.shift.0).round() as i64, -(d as f64 * spec.shift.1).round() as i64);
        let (om, sm) = lay.masks(w, h);
        out.observed.push(lay.render(&clean));
        out.clean.push(clean);
        out.object_masks.push(om);
        out.shadow_masks.push(sm);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{flow_from_depth, warp_bilinear};

    #[test]
    fn translating_frames_are_consistent_with_their_flows() {
        let spec = TranslationSpec {
            width: 24,
            height: 16,
            frames: 5,
            shift: (3.0, 1.0),
            hole: (8, 4, 6, 6),
            occluder: Occluder::WorldStatic,
            seed: 1,
        };
        let seq = translating_sequence(&spec).unwrap();
        let m = seq.target_index;
        for i in seq.reference_indices() {
            let r = warp_bilinear(seq.frames[i].pixels(), seq.flow_to(i).unwrap()).unwrap();
            for p in 0..24 * 16 {
                if r.in_bounds[p] {
                    for c in 0..3 {
                        let d = r.warped.data()[c * 24 * 16 + p] - seq.frames[m].pixels().data()[c * 24 * 16 + p];
                        assert!(d.abs() < 1e-12);
                    }
                }
            }
        }
        for i in seq.reference_indices() {
            assert_eq!(&translation_flow(&spec, m, i), seq.flow_to(i).unwrap());
        }
        assert_eq!(seq.masks[m].hole_count(), 36);
        assert_eq!(seq.masks[m + 1].hole_count(), 36);
        assert!(seq.masks[m + 1].is_hole(5, 3));
    }

    #[test]
    fn cameras_reproduce_the_translation_flows() {
        let spec = TranslationSpec {
            width: 20,
            height: 12,
            frames: 3,
            shift: (2.5, -1.0),
            hole: (0, 0, 1, 1),
            occluder: Occluder::WorldStatic,
            seed: 0,
        };
        let cams = translation_cameras(&spec, 10.0, 40.0).unwrap();
        for t in 0..3 {
            for r in 0..3 {
                let f = flow_from_depth(&cams[t], cams[r].pose()).unwrap();
                let want = translation_flow(&spec, t, r);
                for y in 0..12 {
                    for x in 0..20 {
                        let (a, b) = (f.get(x, y), want.get(x, y));
                        assert!((a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn shadow_scene_is_darker_only_in_the_band() {
        let s = shadow_scene(48, 48, 3);
        let labels = s.labels();
        assert!(labels.sum() > 0.0);
        for y in 0..48 {
            for x in 0..48 {
                let d = s.observed.get(x, y, 0) - s.clean.get(x, y, 0);
                if s.shadow_mask.is_hole(x, y) {
                    assert!(d < 0.0);
                    assert!(s.object_mask.is_known(x, y));
                } else if s.object_mask.is_known(x, y) {
                    assert_eq!(d, 0.0);
                }
            }
        }
    }

    #[test]
    fn shadow_video_moves_with_the_scene() {
        let spec = TranslationSpec {
            width: 32,
            height: 32,
            frames: 3,
            shift: (2.0, 0.0),
            hole: (0, 0, 0, 0),
            occluder: Occluder::WorldStatic,
            seed: 4,
        };
        let v = shadow_video(&spec);
        let a = &v.object_masks[0];
        let b = &v.object_masks[1];
        assert_eq!(a.hole_count(), b.hole_count());
        for y in 0..32 {
            for x in 2..32 {
                assert_eq!(b.is_hole(x - 2, y), a.is_hole(x, y));
            }
        }
    }
}
