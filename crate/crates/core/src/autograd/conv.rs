//! 2D convolution via im2col + GEMM.

use serde::{Deserialize, Serialize};

use super::{Graph, Var};
use crate::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            pad: 0,
            dilation: 1,
        }
    }
}

impl ConvSpec {
    /// Stride-1 "same" padding for an odd kernel.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            pad: dilation * (kernel - 1) / 2,
            dilation,
        }
    }

    pub fn strided(kernel: usize, stride: usize) -> Self {
        Self {
            stride,
            pad: (kernel - 1) / 2,
            dilation: 1,
        }
    }

    pub fn out_extent(&self, input: usize, kernel: usize) -> usize {
        let span = self.dilation * (kernel - 1) + 1;
        assert!(
            input + 2 * self.pad >= span,
            "kernel span {span} exceeds padded input {}",
            input + 2 * self.pad
        );
        (input + 2 * self.pad - span) / self.stride + 1
    }
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    spec: ConvSpec,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Visits every (column-matrix index, input index) pair that falls inside
    /// the unpadded input.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let s = self.spec;
        let ncols = self.cols();
        for ci in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dy = (ky * s.dilation) as isize - s.pad as isize;
                    let dx = (kx * s.dilation) as isize - s.pad as isize;
                    for oy in 0..self.oh {
                        let iy = (oy * s.stride) as isize + dy;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let in_row = (ci * self.h + iy as usize) * self.w;
                        let col_row = row * ncols + oy * self.ow;
                        for ox in 0..self.ow {
                            let ix = (ox * s.stride) as isize + dx;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            f(col_row + ox, in_row + ix as usize);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        cols.fill(0.0);
        self.for_each_tap(|ci, xi| cols[ci] = x[xi]);
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        self.for_each_tap(|ci, xi| dx[xi] += cols[ci]);
    }
}

impl Graph {
    /// Cross-correlation of `x: [N,Ci,H,W]` with `weight: [Co,Ci,kh,kw]`
    /// plus an optional per-output-channel `bias: [Co]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let (co, ci, kh, kw) = self.value(weight).dims4();
        assert_eq!(c, ci, "conv2d: input has {c} channels, weight expects {ci}");
        if let Some(b) = bias {
            assert_eq!(self.shape(b), &[co], "conv2d bias shape");
        }
        let geo = Geometry {
            c,
            h,
            w,
            kh,
            kw,
            oh: spec.out_extent(h, kh),
            ow: spec.out_extent(w, kw),
            spec,
        };
        let (k, hw) = (geo.rows(), geo.cols());
        let xin = self.value(x).data();
        let wt = self.value(weight).data();
        let mut cols = vec![0.0; n * k * hw];
        let mut out = Tensor::zeros(&[n, co, geo.oh, geo.ow]);
        for ni in 0..n {
            let col = &mut cols[ni * k * hw..(ni + 1) * k * hw];
            geo.im2col(&xin[ni * c * h * w..(ni + 1) * c * h * w], col);
            let o = &mut out.data_mut()[ni * co * hw..(ni + 1) * co * hw];
            gemm(co, k, hw, 1.0, wt, false, col, false, 0.0, o);
        }
        if let Some(b) = bias {
            let bv = self.value(b).data().to_vec();
            for ni in 0..n {
                for (oc, bias) in bv.iter().enumerate() {
                    let base = (ni * co + oc) * hw;
                    for v in &mut out.data_mut()[base..base + hw] {
                        *v += bias;
                    }
                }
            }
        }

        let mut parents = vec![x, weight];
        parents.extend(bias);
        self.op(out, &parents, move |g, p, need| {
            let gd = g.data();
            let wt = p[1].data();
            let dx = need[0].then(|| {
                let mut dx = Tensor::zeros(&[n, c, h, w]);
                let mut dcol = vec![0.0; k * hw];
                for ni in 0..n {
                    gemm(k, co, hw, 1.0, wt, true, &gd[ni * co * hw..], false, 0.0, &mut dcol);
                    geo.col2im(&dcol, &mut dx.data_mut()[ni * c * h * w..(ni + 1) * c * h * w]);
                }
                dx
            });
            let dw = need[1].then(|| {
                let mut dw = Tensor::zeros(&[co, ci, kh, kw]);
                for ni in 0..n {
                    gemm(
                        co,
                        hw,
                        k,
                        1.0,
                        &gd[ni * co * hw..],
                        false,
                        &cols[ni * k * hw..],
                        true,
                        1.0,
                        dw.data_mut(),
                    );
                }
                dw
            });
            let mut grads = vec![dx, dw];
            if need.len() == 3 {
                grads.push(need[2].then(|| {
                    let mut db = Tensor::zeros(&[co]);
                    for ni in 0..n {
                        for oc in 0..co {
                            let base = (ni * co + oc) * hw;
                            db.data_mut()[oc] += gd[base..base + hw].iter().sum::<f64>();
                        }
                    }
                    db
                }));
            }
            grads
        })
    }
}
