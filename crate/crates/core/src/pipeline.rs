//! End-to-end inference: shadow-extended masks, then sliding-window
//! inpainting of every frame.

use crate::dataset::{Frame, MaskMap};
use crate::error::{Error, Result};
use crate::geometry::FlowField;
use crate::inpaint_net::{composite_output, Generator, WindowInput};
use crate::maskgen::{dilate_mask, merge_shadow_mask};
use crate::shadow_net::{ShadowNet, DEFAULT_THRESHOLD};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferOptions {
    pub use_shadow: bool,
    pub shadow_threshold: f64,
    /// Extra dilation of the final hole, in pixels.
    pub dilation: i64,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self {
            use_shadow: true,
            shadow_threshold: DEFAULT_THRESHOLD,
            dilation: 0,
        }
    }
}

/// Frame indices of the window centred on `t`, clamped to `[0, n)` so
/// boundary windows repeat the edge frames.
pub fn window_indices(t: usize, delta: usize, n: usize) -> Vec<usize> {
    (0..=2 * delta)
        .map(|k| (t as i64 + k as i64 - delta as i64).clamp(0, n as i64 - 1) as usize)
        .collect()
}

/// Object masks extended by detected shadows (when enabled and a network is
/// given), then dilated.
pub fn inpaint_masks(
    frames: &[Frame],
    object_masks: &[MaskMap],
    shadow: Option<&ShadowNet>,
    opts: &InferOptions,
) -> Result<Vec<MaskMap>> {
    frames
        .iter()
        .zip(object_masks)
        .map(|(f, m)| {
            let merged = match (opts.use_shadow, shadow) {
                (true, Some(net)) => merge_shadow_mask(m, &net.predict(f, m)?, opts.shadow_threshold)?,
                _ => m.clone(),
            };
            dilate_mask(&merged, opts.dilation)
        })
        .collect()
}

/// Inpaints every frame. `flow(t, r)` must return `U^{t→r}` on frame `t`'s
/// grid; it is not called for `r == t`.
pub fn inpaint_video(
    frames: &[Frame],
    holes: &[MaskMap],
    generator: &Generator,
    mut flow: impl FnMut(usize, usize) -> Result<FlowField>,
) -> Result<Vec<Frame>> {
    if frames.is_empty() {
        return Err(Error::NoData);
    }
    if frames.len() != holes.len() {
        return Err(Error::shape(format!("{} frames vs {} masks", frames.len(), holes.len())));
    }
    let delta = generator.config.frames / 2;
    let (w, h) = (frames[0].width(), frames[0].height());
    let mut out = Vec::with_capacity(frames.len());
    for t in 0..frames.len() {
        if holes[t].hole_count() == 0 {
            out.push(frames[t].clone());
            continue;
        }
        let idx = window_indices(t, delta, frames.len());
        let wf: Vec<Frame> = idx.iter().map(|&i| frames[i].clone()).collect();
        let wm: Vec<MaskMap> = idx.iter().map(|&i| holes[i].clone()).collect();
        let mut flows = Vec::with_capacity(idx.len() - 1);
        for (k, &i) in idx.iter().enumerate() {
            if k == delta {
                continue;
            }
            flows.push(if i == t { FlowField::zeros(w, h) } else { flow(t, i)? });
        }
        let input = WindowInput::new(&wf, &wm, &flows)?;
        let (refined, _) = generator.infer(&input)?;
        let pred = Frame::from_tensor(&refined, frames[t].frame_id)?;
        out.push(composite_output(&pred, &frames[t], &holes[t])?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inpaint_net::InpaintConfig;
    use crate::synth::{translating_sequence, translation_flow, TranslationSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> Generator {
        let cfg = InpaintConfig {
            frames: 3,
            base_channels: 2,
            dilations: vec![2],
            ..Default::default()
        };
        Generator::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn windows_clamp_at_the_ends() {
        assert_eq!(window_indices(0, 2, 6), vec![0, 0, 0, 1, 2]);
        assert_eq!(window_indices(5, 2, 6), vec![3, 4, 5, 5, 5]);
        assert_eq!(window_indices(2, 1, 6), vec![1, 2, 3]);
    }

    #[test]
    fn all_known_masks_pass_frames_through() {
        let spec = TranslationSpec {
            width: 16,
            height: 16,
            frames: 5,
            shift: (1.0, 0.0),
            hole: (4, 4, 4, 4),
            occluder: Default::default(),
            seed: 2,
        };
        let seq = translating_sequence(&spec).unwrap();
        let holes = vec![MaskMap::all_known(16, 16); 5];
        let out = inpaint_video(&seq.frames, &holes, &tiny(), |t, r| Ok(translation_flow(&spec, t, r))).unwrap();
        assert_eq!(out, seq.frames);
    }

    #[test]
    fn holes_are_filled_with_finite_in_range_values() {
        let spec = TranslationSpec {
            width: 16,
            height: 16,
            frames: 4 + 1,
            shift: (1.0, 0.0),
            hole: (4, 4, 6, 6),
            occluder: Default::default(),
            seed: 3,
        };
        let seq = translating_sequence(&spec).unwrap();
        let out = inpaint_video(&seq.frames, &seq.masks, &tiny(), |t, r| Ok(translation_flow(&spec, t, r))).unwrap();
        for (o, (f, m)) in out.iter().zip(seq.frames.iter().zip(&seq.masks)) {
            assert!(o.pixels().data().iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)));
            for y in 0..16 {
                for x in 0..16 {
                    if m.is_known(x, y) {
                        assert_eq!(o.get(x, y, 1), f.get(x, y, 1));
                    }
                }
            }
        }
    }

    #[test]
    fn disabled_shadow_branch_keeps_object_masks() {
        let frames = vec![Frame::from_fn(16, 16, 0, |_, _| [0.0; 3])];
        let masks = vec![MaskMap::with_rect_hole(16, 16, 2, 2, 3, 3)];
        let opts = InferOptions {
            use_shadow: false,
            ..Default::default()
        };
        assert_eq!(inpaint_masks(&frames, &masks, None, &opts).unwrap(), masks);
    }
}
