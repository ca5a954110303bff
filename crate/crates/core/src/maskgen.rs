//! Temporal-consistent training holes and shadow-extended masks.

use rand::Rng;

use crate::dataset::MaskMap;
use crate::error::{Error, Result};
use crate::geometry::{warp_mask, FlowField};
use crate::tensor::Tensor;

/// Default jitter at training resolution, in pixels.
pub const DEFAULT_JITTER_PX: f64 = 3.0;

/// Propagates the target hole into every other frame and displaces each copy
/// independently.
///
/// `flows[i]` must live on the grid of output frame `i` and point into the
/// frame that owns `base_mask`. Each warped mask is then translated by an
/// offset drawn uniformly from `[−jitter_px, jitter_px]` per axis and rounded
/// to whole pixels; pixels shifted in from outside the frame are known.
pub fn generate_temporal_masks(
    base_mask: &MaskMap,
    flows: &[FlowField],
    rng: &mut impl Rng,
    jitter_px: f64,
) -> Result<Vec<MaskMap>> {
    if !(jitter_px >= 0.0 && jitter_px.is_finite()) {
        return Err(Error::BadArgument(format!("jitter must be finite and non-negative, got {jitter_px}")));
    }
    flows
        .iter()
        .map(|flow| {
            let warped = warp_mask(base_mask, flow)?;
            let (ox, oy) = if jitter_px > 0.0 {
                (
                    rng.random_range(-jitter_px..=jitter_px).round() as i64,
                    rng.random_range(-jitter_px..=jitter_px).round() as i64,
                )
            } else {
                (0, 0)
            };
            Ok(translate(&warped, ox, oy))
        })
        .collect()
}

/// `out(x, y) = m(x − ox, y − oy)`, known outside the source.
pub fn translate(m: &MaskMap, ox: i64, oy: i64) -> MaskMap {
    let (w, h) = (m.width() as i64, m.height() as i64);
    MaskMap::from_fn(m.width(), m.height(), |x, y| {
        let (sx, sy) = (x as i64 - ox, y as i64 - oy);
        !(0..w).contains(&sx) || !(0..h).contains(&sy) || m.is_known(sx as usize, sy as usize)
    })
}

/// Adds every pixel with `shadow_prob ≥ threshold` to the hole.
/// `shadow_prob` is `[H, W]` (or any shape with `H·W` elements).
pub fn merge_shadow_mask(object_mask: &MaskMap, shadow_prob: &Tensor, threshold: f64) -> Result<MaskMap> {
    let (w, h) = (object_mask.width(), object_mask.height());
    if shadow_prob.len() != w * h || shadow_prob.shape().iter().rev().take(2).ne([w, h].iter()) {
        return Err(Error::shape(format!(
            "shadow map {:?} vs mask {w}x{h}",
            shadow_prob.shape()
        )));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::BadArgument(format!("threshold {threshold} outside (0, 1)")));
    }
    let p = shadow_prob.data();
    Ok(MaskMap::from_fn(w, h, |x, y| {
        object_mask.is_known(x, y) && !(p[y * w + x] >= threshold)
    }))
}

/// Grows the hole by a city-block disc of the given radius.
pub fn dilate_mask(mask: &MaskMap, radius: i64) -> Result<MaskMap> {
    if radius < 0 {
        return Err(Error::BadArgument(format!("negative dilation radius {radius}")));
    }
    let r = radius as usize;
    if r == 0 {
        return Ok(mask.clone());
    }
    let (w, h) = (mask.width(), mask.height());
    // L1 distance transform to the nearest hole, two passes
    let inf = usize::MAX / 4;
    let mut d: Vec<usize> = mask.known().iter().map(|&k| if k { inf } else { 0 }).collect();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x > 0 {
                d[i] = d[i].min(d[i - 1] + 1);
            }
            if y > 0 {
                d[i] = d[i].min(d[i - w] + 1);
            }
        }
    }
    for y in (0..h).rev() {
        for x in (0..w).rev() {
            let i = y * w + x;
            if x + 1 < w {
                d[i] = d[i].min(d[i + 1] + 1);
            }
            if y + 1 < h {
                d[i] = d[i].min(d[i + w] + 1);
            }
        }
    }
    MaskMap::from_known(w, h, d.into_iter().map(|v| v > r).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_dilate(m: &MaskMap, r: usize) -> MaskMap {
        MaskMap::from_fn(m.width(), m.height(), |x, y| {
            for sy in 0..m.height() {
                for sx in 0..m.width() {
                    if m.is_hole(sx, sy) && x.abs_diff(sx) + y.abs_diff(sy) <= r {
                        return false;
                    }
                }
            }
            true
        })
    }

    fn random_mask(w: usize, h: usize, p: f64, rng: &mut impl Rng) -> MaskMap {
        MaskMap::from_fn(w, h, |_, _| !rng.random_bool(p))
    }

    #[test]
    fn zero_jitter_zero_flow_copies_base() {
        let base = MaskMap::with_rect_hole(16, 12, 4, 3, 5, 4);
        let flows = vec![FlowField::zeros(16, 12); 4];
        let out = generate_temporal_masks(&base, &flows, &mut ChaCha8Rng::seed_from_u64(0), 0.0).unwrap();
        assert!(out.iter().all(|m| *m == base));
    }

    #[test]
    fn zero_jitter_integer_flow_is_shifted_copy() {
        let base = MaskMap::with_rect_hole(16, 12, 6, 3, 5, 4);
        let flows = vec![FlowField::constant(16, 12, 2.0, -1.0)];
        let out = generate_temporal_masks(&base, &flows, &mut ChaCha8Rng::seed_from_u64(0), 0.0).unwrap();
        let expect = MaskMap::from_fn(16, 12, |x, y| {
            let (sx, sy) = (x as i64 + 2, y as i64 - 1);
            (0..16).contains(&sx) && (0..12).contains(&sy) && base.is_known(sx as usize, sy as usize)
        });
        assert_eq!(out[0], expect);
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let base = MaskMap::with_rect_hole(20, 20, 6, 6, 6, 6);
        let flows: Vec<_> = (0..4).map(|i| FlowField::constant(20, 20, 0.3 * i as f64, 0.2)).collect();
        let a = generate_temporal_masks(&base, &flows, &mut ChaCha8Rng::seed_from_u64(3), 3.0).unwrap();
        let b = generate_temporal_masks(&base, &flows, &mut ChaCha8Rng::seed_from_u64(3), 3.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn hole_area_drift_is_bounded_under_subpixel_flow() {
        let base = MaskMap::from_fn(32, 32, |x, y| {
            let (dx, dy) = (x as f64 - 15.5, y as f64 - 15.5);
            dx * dx + dy * dy > 64.0
        });
        let n0 = base.hole_count() as f64;
        for k in 0..8 {
            let f = FlowField::constant(32, 32, 0.37 * k as f64 - 1.3, 0.21 * k as f64 - 0.8);
            let m = &generate_temporal_masks(&base, &[f], &mut ChaCha8Rng::seed_from_u64(k), 0.0).unwrap()[0];
            // flows reach at most 2 px, so the interior samples stay in bounds
            let n = (0..32 * 32)
                .filter(|&i| (2..30).contains(&(i % 32)) && (2..30).contains(&(i / 32)) && !m.known()[i])
                .count() as f64;
            assert!((n - n0).abs() <= 0.1 * n0, "area {n} vs {n0}");
        }
    }

    #[test]
    fn merge_examples() {
        let obj = MaskMap::with_rect_hole(8, 6, 1, 1, 2, 2);
        let zero = Tensor::zeros(&[6, 8]);
        assert_eq!(merge_shadow_mask(&obj, &zero, 0.5).unwrap(), obj);
        let one = Tensor::full(&[6, 8], 1.0);
        assert_eq!(merge_shadow_mask(&obj, &one, 0.5).unwrap(), MaskMap::all_hole(8, 6));
        let half = Tensor::from_fn(&[6, 8], |i| if i % 8 >= 4 { 0.9 } else { 0.0 });
        let m = merge_shadow_mask(&obj, &half, 0.5).unwrap();
        for y in 0..6 {
            for x in 0..8 {
                assert_eq!(m.is_hole(x, y), obj.is_hole(x, y) || x >= 4);
            }
        }
        assert!(merge_shadow_mask(&obj, &Tensor::zeros(&[8, 6]), 0.5).is_err());
    }

    #[test]
    fn dilation_examples() {
        let one = MaskMap::from_fn(5, 5, |x, y| (x, y) != (2, 2));
        let d = dilate_mask(&one, 1).unwrap();
        assert_eq!(d.hole_count(), 5);
        for (x, y) in [(2, 2), (1, 2), (3, 2), (2, 1), (2, 3)] {
            assert!(d.is_hole(x, y));
        }
        assert_eq!(dilate_mask(&one, 0).unwrap(), one);
        let all = MaskMap::all_known(7, 4);
        assert_eq!(dilate_mask(&all, 3).unwrap(), all);
        assert!(matches!(dilate_mask(&one, -1), Err(Error::BadArgument(_))));
    }

    proptest! {
        #[test]
        fn dilation_matches_brute_force_and_grows(seed in 0u64..1000, r in 0usize..4, w in 1usize..12, h in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_mask(w, h, 0.1, &mut rng);
            let d = dilate_mask(&m, r as i64).unwrap();
            prop_assert_eq!(&d, &brute_dilate(&m, r));
            prop_assert!(m.holes_subset_of(&d));
        }

        #[test]
        fn merge_never_shrinks_hole(seed in 0u64..1000, thr in 0.05f64..0.95) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_mask(9, 7, 0.3, &mut rng);
            let p = Tensor::from_fn(&[7, 9], |_| rng.random::<f64>());
            let out = merge_shadow_mask(&m, &p, thr).unwrap();
            prop_assert!(m.holes_subset_of(&out));
        }
    }
}
