//! Training objectives: masked L1 reconstruction, hinge adversarial losses
//! and class-balanced binary cross entropy.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::dataset::{Frame, MaskMap};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities are clamped into `[BCE_EPS, 1 − BCE_EPS]` before the log.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the coarse term of the reconstruction loss.
    pub alpha: f64,
    /// Scale of the generator's adversarial term.
    pub adv_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            adv_weight: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("adv_weight", self.adv_weight)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Pixels whose ground truth can be trusted: everything except real,
/// unlabelled objects. Synthetic holes stay valid since their content is
/// known.
pub fn build_loss_validity(real_object_masks: &MaskMap, synthetic_hole_masks: &MaskMap) -> Result<MaskMap> {
    real_object_masks.check_same(synthetic_hole_masks)?;
    Ok(real_object_masks.clone())
}

/// Per-image class weights `(w_pos, w_neg)`: negatives weigh 1 and positives
/// `N_neg / N_pos` (0 without positives), so both classes carry the same
/// total weight.
pub fn class_weights(labels: &Tensor) -> Result<(f64, f64)> {
    let mut pos = 0usize;
    for &y in labels.data() {
        if y == 1.0 {
            pos += 1;
        } else if y != 0.0 {
            return Err(Error::BadLabels);
        }
    }
    let neg = labels.len() - pos;
    let w_pos = if pos == 0 { 0.0 } else { neg as f64 / pos as f64 };
    Ok((w_pos, 1.0))
}

fn check_same_len(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `−(1/N) Σ [w_pos·y·log p + w_neg·(1−y)·log(1−p)]` with the weights of
/// [`class_weights`].
pub fn shadow_loss(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_same_len(pred, gt, "shadow loss")?;
    let (wp, wn) = class_weights(gt)?;
    let total: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(wp * y * p.ln() + wn * (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / pred.len() as f64)
}

/// Graph version of [`shadow_loss`] on a probability map. The clamp has zero
/// gradient where it is active.
pub fn shadow_loss_graph(g: &mut Graph, pred: Var, gt: &Tensor) -> Result<Var> {
    check_same_len(g.value(pred), gt, "shadow loss")?;
    let (wp, wn) = class_weights(gt)?;
    let n = gt.len() as f64;
    let y = gt.data().to_vec();
    let p = g.value(pred).data();
    let total: f64 = p
        .iter()
        .zip(&y)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(wp * y * p.ln() + wn * (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    let shape = g.shape(pred).to_vec();
    Ok(g.op(Tensor::scalar(total / n), &[pred], move |go, parents, _| {
        let s = go.item() / n;
        let grad = Tensor::from_fn(&shape, |i| {
            let p = parents[0].data()[i];
            if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
                return 0.0;
            }
            -s * (wp * y[i] / p - wn * (1.0 - y[i]) / (1.0 - p))
        });
        vec![Some(grad)]
    }))
}

fn frames_tensor(frames: &[Frame]) -> Result<Tensor> {
    let parts: Vec<Tensor> = frames.iter().map(Frame::to_batch).collect();
    Tensor::cat0(&parts.iter().collect::<Vec<_>>())
}

fn masks_tensor(masks: &[MaskMap]) -> Result<Tensor> {
    let parts: Vec<Tensor> = masks.iter().map(MaskMap::to_tensor).collect();
    Tensor::cat0(&parts.iter().collect::<Vec<_>>())
}

/// `α·mean_valid |G_c − I_gt|` over all `F` frames plus
/// `mean_valid |G^m − I_gt^m|` on the middle frame.
///
/// `valid` holds one loss-validity mask per frame; every mean is taken over
/// valid pixels (and channels) only.
pub fn reconstruction_loss(
    coarse_out: &[Frame],
    refined_target: &Frame,
    gt: &[Frame],
    valid: &[MaskMap],
    alpha: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let coarse = g.constant(frames_tensor(coarse_out)?);
    let refined = g.constant(refined_target.to_batch());
    let l = reconstruction_loss_graph(&mut g, coarse, refined, &frames_tensor(gt)?, &masks_tensor(valid)?, alpha)?;
    Ok(g.value(l).item())
}

/// Graph form of [`reconstruction_loss`]: `coarse: [F,3,H,W]`,
/// `refined: [1,3,H,W]`, `gt: [F,3,H,W]`, `valid: [F,1,H,W]`.
pub fn reconstruction_loss_graph(
    g: &mut Graph,
    coarse: Var,
    refined: Var,
    gt: &Tensor,
    valid: &Tensor,
    alpha: f64,
) -> Result<Var> {
    let (f, c, h, w) = g.value(coarse).dims4();
    if f == 0 || g.shape(refined) != [1, c, h, w] || gt.shape() != [f, c, h, w] || valid.shape() != [f, 1, h, w] {
        return Err(Error::shape(format!(
            "reconstruction loss: coarse {:?}, refined {:?}, gt {:?}, valid {:?}",
            g.shape(coarse),
            g.shape(refined),
            gt.shape(),
            valid.shape()
        )));
    }
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::BadArgument(format!("alpha must be non-negative, got {alpha}")));
    }
    let m = f / 2;
    let (gt_m, valid_m) = (gt.narrow0(m, 1), valid.narrow0(m, 1));
    if valid.sum() <= 0.0 || valid_m.sum() <= 0.0 {
        return Err(Error::EmptyLossSupport);
    }
    let coarse_term = g.masked_l1_mean(coarse, gt, valid);
    let coarse_term = g.scale(coarse_term, alpha);
    let refine_term = g.masked_l1_mean(refined, &gt_m, &valid_m);
    Ok(g.add(coarse_term, refine_term))
}

pub fn d_hinge_loss(d_real: &Tensor, d_fake: &Tensor) -> f64 {
    let hinge = |t: &Tensor, sign: f64| t.data().iter().map(|&v| (1.0 + sign * v).max(0.0)).sum::<f64>() / t.len() as f64;
    hinge(d_real, -1.0) + hinge(d_fake, 1.0)
}

pub fn g_hinge_loss(d_fake: &Tensor) -> f64 {
    -d_fake.mean()
}

/// `mean(relu(1 − real)) + mean(relu(1 + fake))`.
pub fn d_hinge_loss_graph(g: &mut Graph, d_real: Var, d_fake: Var) -> Var {
    let r = g.scale(d_real, -1.0);
    let r = g.add_scalar(r, 1.0);
    let r = g.relu(r);
    let r = g.mean(r);
    let f = g.add_scalar(d_fake, 1.0);
    let f = g.relu(f);
    let f = g.mean(f);
    g.add(r, f)
}

pub fn g_hinge_loss_graph(g: &mut Graph, d_fake: Var) -> Var {
    let m = g.mean(d_fake);
    g.scale(m, -1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{max_rel_error, numeric_grad};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_frame(w: usize, h: usize, rng: &mut impl Rng) -> Frame {
        Frame::from_fn(w, h, 0, |_, _| [0, 1, 2].map(|_| rng.random_range(-1.0..1.0)))
    }

    fn loop_bce(pred: &[f64], y: &[f64]) -> f64 {
        let npos = y.iter().filter(|&&v| v == 1.0).count() as f64;
        let nneg = y.len() as f64 - npos;
        let wp = if npos > 0.0 { nneg / npos } else { 0.0 };
        let mut s = 0.0;
        for i in 0..pred.len() {
            let p = pred[i].clamp(BCE_EPS, 1.0 - BCE_EPS);
            if y[i] == 1.0 {
                s -= wp * p.ln();
            } else {
                s -= (1.0 - p).ln();
            }
        }
        s / pred.len() as f64
    }

    #[test]
    fn bce_examples() {
        let y = Tensor::from_fn(&[4, 4], |i| (i % 2) as f64);
        assert!(shadow_loss(&y, &y).unwrap() < 1e-6);
        let half = Tensor::full(&[4, 4], 0.5);
        assert!((shadow_loss(&half, &y).unwrap() - 2f64.ln()).abs() < 1e-12);
        let neg = Tensor::zeros(&[4, 4]);
        let p = Tensor::from_fn(&[4, 4], |i| 0.05 * i as f64);
        let plain = p.data().iter().map(|p| -(1.0 - p.clamp(BCE_EPS, 1.0 - BCE_EPS)).ln()).sum::<f64>() / 16.0;
        assert!((shadow_loss(&p, &neg).unwrap() - plain).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = Tensor::from_fn(&[4, 4], |_| rng.random::<f64>());
        let y = Tensor::from_fn(&[4, 4], |_| rng.random_bool(0.3) as u8 as f64);
        assert!((shadow_loss(&p, &y).unwrap() - loop_bce(p.data(), y.data())).abs() < 1e-8);
        assert!(matches!(shadow_loss(&p, &Tensor::full(&[4, 4], 0.5)), Err(Error::BadLabels)));
    }

    #[test]
    fn bce_graph_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = Tensor::from_fn(&[8, 8], |_| rng.random_range(0.05..0.95));
        let y = Tensor::from_fn(&[8, 8], |_| rng.random_bool(0.4) as u8 as f64);
        let mut g = Graph::new();
        let pv = g.param(p.clone());
        let l = shadow_loss_graph(&mut g, pv, &y).unwrap();
        assert!((g.value(l).item() - shadow_loss(&p, &y).unwrap()).abs() < 1e-12);
        g.backward(l);
        let num = numeric_grad(&p, 1e-6, |t| shadow_loss(t, &y).unwrap());
        assert!(max_rel_error(g.grad(pv).unwrap(), &num, 1e-9) < 1e-5);
    }

    #[test]
    fn reconstruction_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let gt: Vec<_> = (0..5).map(|_| rand_frame(4, 4, &mut rng)).collect();
        let all = vec![MaskMap::all_known(4, 4); 5];
        assert_eq!(reconstruction_loss(&gt, &gt[2], &gt, &all, 1.0).unwrap(), 0.0);

        let flat: Vec<_> = (0..5).map(|_| Frame::from_fn(4, 4, 0, |_, _| [0.2; 3])).collect();
        let off: Vec<_> = (0..5).map(|_| Frame::from_fn(4, 4, 0, |_, _| [0.3; 3])).collect();
        let l = reconstruction_loss(&off, &flat[2], &flat, &all, 1.0).unwrap();
        assert!((l - 0.1).abs() < 1e-12);

        let none = vec![MaskMap::all_hole(4, 4); 5];
        assert!(matches!(
            reconstruction_loss(&gt, &gt[2], &gt, &none, 1.0),
            Err(Error::EmptyLossSupport)
        ));
    }

    #[test]
    fn reconstruction_matches_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let coarse: Vec<_> = (0..3).map(|_| rand_frame(4, 4, &mut rng)).collect();
        let gt: Vec<_> = (0..3).map(|_| rand_frame(4, 4, &mut rng)).collect();
        let refined = rand_frame(4, 4, &mut rng);
        let valid: Vec<_> = (0..3).map(|_| MaskMap::from_fn(4, 4, |_, _| rng.random_bool(0.7))).collect();
        let alpha = 0.7;
        let (mut sc, mut nc, mut sr, mut nr) = (0.0, 0.0, 0.0, 0.0);
        for f in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    if !valid[f].is_known(x, y) {
                        continue;
                    }
                    for c in 0..3 {
                        sc += (coarse[f].get(x, y, c) - gt[f].get(x, y, c)).abs();
                        nc += 1.0;
                        if f == 1 {
                            sr += (refined.get(x, y, c) - gt[f].get(x, y, c)).abs();
                            nr += 1.0;
                        }
                    }
                }
            }
        }
        let expect = alpha * sc / nc + sr / nr;
        let got = reconstruction_loss(&coarse, &refined, &gt, &valid, alpha).unwrap();
        assert!((got - expect).abs() < 1e-8);
    }

    #[test]
    fn reconstruction_gradient_and_excluded_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let coarse = Tensor::from_fn(&[3, 3, 4, 4], |_| rng.random_range(-1.0..1.0));
        let refined = Tensor::from_fn(&[1, 3, 4, 4], |_| rng.random_range(-1.0..1.0));
        let mut gt = Tensor::from_fn(&[3, 3, 4, 4], |_| rng.random_range(-1.0..1.0));
        let valid = Tensor::from_fn(&[3, 1, 4, 4], |i| (i % 5 != 0) as u8 as f64);
        let eval = |c: &Tensor, r: &Tensor, gt: &Tensor| {
            let mut g = Graph::new();
            let (cv, rv) = (g.constant(c.clone()), g.constant(r.clone()));
            let l = reconstruction_loss_graph(&mut g, cv, rv, gt, &valid, 0.5).unwrap();
            g.value(l).item()
        };
        let mut g = Graph::new();
        let (cv, rv) = (g.param(coarse.clone()), g.param(refined.clone()));
        let l = reconstruction_loss_graph(&mut g, cv, rv, &gt, &valid, 0.5).unwrap();
        g.backward(l);
        let nc = numeric_grad(&coarse, 1e-7, |t| eval(t, &refined, &gt));
        let nr = numeric_grad(&refined, 1e-7, |t| eval(&coarse, t, &gt));
        assert!(max_rel_error(g.grad(cv).unwrap(), &nc, 1e-9) < 1e-3);
        assert!(max_rel_error(g.grad(rv).unwrap(), &nr, 1e-9) < 1e-3);

        // perturbing ground truth at an excluded pixel changes nothing
        let before = eval(&coarse, &refined, &gt);
        gt.data_mut()[0] += 0.5;
        gt.data_mut()[16 * 3 + 4] -= 0.3;
        assert_eq!(eval(&coarse, &refined, &gt), before);
    }

    #[test]
    fn hinge_examples() {
        let ones = Tensor::full(&[2, 3], 1.0);
        assert_eq!(d_hinge_loss(&ones, &ones.scale(-1.0)), 0.0);
        let zeros = Tensor::zeros(&[2, 3]);
        assert_eq!(d_hinge_loss(&zeros, &zeros), 2.0);
        assert_eq!(g_hinge_loss(&Tensor::full(&[2, 2], 2.0)), -2.0);
        assert_eq!(g_hinge_loss(&zeros), 0.0);
    }

    #[test]
    fn hinge_gradient_vanishes_beyond_margin() {
        let real = Tensor::from_vec(&[4], vec![1.5, 0.2, 3.0, -0.4]).unwrap();
        let fake = Tensor::from_vec(&[4], vec![-2.0, 0.3, -1.1, 0.0]).unwrap();
        let mut g = Graph::new();
        let (r, f) = (g.param(real.clone()), g.param(fake.clone()));
        let l = d_hinge_loss_graph(&mut g, r, f);
        assert!((g.value(l).item() - d_hinge_loss(&real, &fake)).abs() < 1e-12);
        g.backward(l);
        assert_eq!(g.grad(r).unwrap().data(), &[0.0, -0.25, 0.0, -0.25]);
        assert_eq!(g.grad(f).unwrap().data(), &[0.0, 0.25, 0.0, 0.25]);
    }

    #[test]
    fn validity_rule() {
        let none = MaskMap::all_known(6, 4);
        let synth = MaskMap::with_rect_hole(6, 4, 1, 1, 2, 2);
        assert_eq!(build_loss_validity(&none, &synth).unwrap(), none);
        let left = MaskMap::from_fn(6, 4, |x, _| x >= 3);
        let v = build_loss_validity(&left, &synth).unwrap();
        assert_eq!(v, left);
        assert!(v.is_hole(1, 1), "overlap of real object and synthetic hole is excluded");
    }

    proptest! {
        #[test]
        fn hinge_matches_loops_and_is_nonnegative(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = Tensor::from_fn(&[3, 5], |_| rng.random_range(-3.0..3.0));
            let f = Tensor::from_fn(&[3, 5], |_| rng.random_range(-3.0..3.0));
            let (mut a, mut b) = (0.0, 0.0);
            for i in 0..15 {
                a += (1.0 - r.data()[i]).max(0.0);
                b += (1.0 + f.data()[i]).max(0.0);
            }
            let d = d_hinge_loss(&r, &f);
            prop_assert!((d - (a / 15.0 + b / 15.0)).abs() < 1e-8);
            prop_assert!(d >= 0.0);
            prop_assert!((g_hinge_loss(&f) + f.data().iter().sum::<f64>() / 15.0).abs() < 1e-8);
        }

        #[test]
        fn reconstruction_is_one_homogeneous(seed in 0u64..10_000, c in 0.1f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = Tensor::from_fn(&[3, 3, 2, 2], |_| rng.random_range(-0.2..0.2));
            let e = Tensor::from_fn(&[3, 3, 2, 2], |_| rng.random_range(-0.2..0.2));
            let er = Tensor::from_fn(&[1, 3, 2, 2], |_| rng.random_range(-0.2..0.2));
            let valid = Tensor::full(&[3, 1, 2, 2], 1.0);
            let loss = |s: f64| {
                let mut g = Graph::new();
                let cv = g.constant(gt.zip_map(&e, |a, b| a + s * b));
                let rv = g.constant(gt.narrow0(1, 1).zip_map(&er, |a, b| a + s * b));
                let l = reconstruction_loss_graph(&mut g, cv, rv, &gt, &valid, 1.0).unwrap();
                g.value(l).item()
            };
            prop_assert!((loss(c) - c * loss(1.0)).abs() < 1e-9);
        }
    }
}
