//! Spatial ops: 2D cross-correlation, max pooling and nearest upsampling.
//!
//! The convolution kernels parallelize over independent output planes with
//! rayon; each plane is computed by a fixed sequential loop, so results are
//! bit-identical regardless of thread count.

use rayon::prelude::*;

use super::{Backward, Tensor};
use crate::error::{Error, Result};

impl Tensor {
    /// 2D cross-correlation of an NCHW input with a KCkhkw weight plus bias.
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: &Tensor,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        let xs = self.shape();
        let ws = weight.shape();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape("conv2d", "input must be NCHW, weight KCkhkw"));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (k, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wc != c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels but weight expects {}", c, wc),
            ));
        }
        if bias.len() != k {
            return Err(Error::shape(
                "conv2d",
                format!("bias length {} != output channels {}", bias.len(), k),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::arg("conv2d", "kernel extents must be odd"));
        }
        if stride == 0 {
            return Err(Error::arg("conv2d", "stride must be positive"));
        }
        let hp = h + 2 * padding;
        let wp = w + 2 * padding;
        if hp < kh || wp < kw || (hp - kh) % stride != 0 || (wp - kw) % stride != 0 {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "spatial dims {}x{} (padding {}) incompatible with kernel {}x{} stride {}",
                    h, w, padding, kh, kw, stride
                ),
            ));
        }
        let oh = (hp - kh) / stride + 1;
        let ow = (wp - kw) / stride + 1;

        let xref = self.data();
        let wref = weight.data();
        let bref = bias.data();
        let (x, wt, b): (&[f32], &[f32], &[f32]) = (&xref, &wref, &bref);
        let mut out = vec![0.0f32; n * k * oh * ow];
        out.par_chunks_mut(oh * ow).enumerate().for_each(|(pi, op)| {
            let (ni, ki) = (pi / k, pi % k);
            conv_plane_forward(
                op, x, wt, b[ki], ni, ki, c, h, w, kh, kw, stride, padding, oh, ow,
            );
        });
        drop(xref);
        drop(wref);
        drop(bref);

        struct ConvBack {
            stride: usize,
            padding: usize,
            oh: usize,
            ow: usize,
        }
        impl Backward for ConvBack {
            fn backward(&self, grad: &[f32], parents: &[Tensor]) {
                let input = &parents[0];
                let weight = &parents[1];
                let bias = &parents[2];
                let xs = input.shape();
                let ws = weight.shape();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (k, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
                let (oh, ow, stride, padding) = (self.oh, self.ow, self.stride, self.padding);

                if input.requires_grad() {
                    let wref = weight.data();
                    let wt: &[f32] = &wref;
                    let mut gx = vec![0.0f32; n * c * h * w];
                    gx.par_chunks_mut(h * w).enumerate().for_each(|(pi, gp)| {
                        let (ni, ci) = (pi / c, pi % c);
                        for ki in 0..k {
                            let gbase = (ni * k + ki) * oh * ow;
                            for dy in 0..kh {
                                for dx in 0..kw {
                                    let wv = wt[((ki * c + ci) * kh + dy) * kw + dx];
                                    if wv == 0.0 {
                                        continue;
                                    }
                                    for oy in 0..oh {
                                        let iy = oy * stride + dy;
                                        if iy < padding || iy - padding >= h {
                                            continue;
                                        }
                                        let iy = iy - padding;
                                        // valid ox range so that ix in [0, w)
                                        let (ox0, ox1) =
                                            valid_range(ow, stride, dx, padding, w);
                                        let grow = &grad[gbase + oy * ow..gbase + oy * ow + ow];
                                        let xrow = &mut gp[iy * w..(iy + 1) * w];
                                        for ox in ox0..ox1 {
                                            let ix = ox * stride + dx - padding;
                                            xrow[ix] += wv * grow[ox];
                                        }
                                    }
                                }
                            }
                        }
                    });
                    drop(wref);
                    input.accumulate_grad(&gx);
                }

                if weight.requires_grad() {
                    let xref = input.data();
                    let x: &[f32] = &xref;
                    let mut gw = vec![0.0f32; k * c * kh * kw];
                    gw.par_chunks_mut(c * kh * kw).enumerate().for_each(
                        |(ki, gwk)| {
                            for ci in 0..c {
                                for dy in 0..kh {
                                    for dx in 0..kw {
                                        let mut acc = 0.0f32;
                                        for ni in 0..n {
                                            let gbase = (ni * k + ki) * oh * ow;
                                            let xbase = (ni * c + ci) * h * w;
                                            for oy in 0..oh {
                                                let iy = oy * stride + dy;
                                                if iy < padding || iy - padding >= h {
                                                    continue;
                                                }
                                                let iy = iy - padding;
                                                let (ox0, ox1) =
                                                    valid_range(ow, stride, dx, padding, w);
                                                let grow = &grad
                                                    [gbase + oy * ow..gbase + oy * ow + ow];
                                                let xrow =
                                                    &x[xbase + iy * w..xbase + (iy + 1) * w];
                                                for ox in ox0..ox1 {
                                                    let ix = ox * stride + dx - padding;
                                                    acc += grow[ox] * xrow[ix];
                                                }
                                            }
                                        }
                                        gwk[(ci * kh + dy) * kw + dx] = acc;
                                    }
                                }
                            }
                        },
                    );
                    drop(xref);
                    weight.accumulate_grad(&gw);
                }

                if bias.requires_grad() {
                    let mut gb = vec![0.0f32; k];
                    for ni in 0..n {
                        for (ki, gbk) in gb.iter_mut().enumerate() {
                            let gbase = (ni * k + ki) * oh * ow;
                            *gbk += grad[gbase..gbase + oh * ow].iter().sum::<f32>();
                        }
                    }
                    bias.accumulate_grad(&gb);
                }
            }
        }
        Ok(Tensor::from_op(
            vec![n, k, oh, ow],
            out,
            vec![self.clone(), weight.clone(), bias.clone()],
            ConvBack {
                stride,
                padding,
                oh,
                ow,
            },
        ))
    }

    /// Non-overlapping max pooling; gradient flows to the first maximal
    /// element of each window in row-major order.
    pub fn maxpool2d(&self, window: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::shape("maxpool2d", "input must be NCHW"));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if window == 0 || h % window != 0 || w % window != 0 {
            return Err(Error::shape(
                "maxpool2d",
                format!("spatial dims {}x{} not divisible by window {}", h, w, window),
            ));
        }
        let (oh, ow) = (h / window, w / window);
        let x = self.data();
        let mut out = vec![0.0f32; n * c * oh * ow];
        let mut argmax = vec![0usize; n * c * oh * ow];
        for pi in 0..n * c {
            let xb = pi * h * w;
            let ob = pi * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut bi = 0usize;
                    for dy in 0..window {
                        for dx in 0..window {
                            let idx = xb + (oy * window + dy) * w + ox * window + dx;
                            if x[idx] > best {
                                best = x[idx];
                                bi = idx;
                            }
                        }
                    }
                    out[ob + oy * ow + ox] = best;
                    argmax[ob + oy * ow + ox] = bi;
                }
            }
        }
        drop(x);
        struct PoolBack {
            argmax: Vec<usize>,
        }
        impl Backward for PoolBack {
            fn backward(&self, grad: &[f32], parents: &[Tensor]) {
                let mut gx = vec![0.0f32; parents[0].len()];
                for (g, &idx) in grad.iter().zip(self.argmax.iter()) {
                    gx[idx] += g;
                }
                parents[0].accumulate_grad(&gx);
            }
        }
        Ok(Tensor::from_op(
            vec![n, c, oh, ow],
            out,
            vec![self.clone()],
            PoolBack { argmax },
        ))
    }

    /// Nearest-neighbor upsampling by an integer factor; backward sums the
    /// gradients of all replicas.
    pub fn upsample_nearest2d(&self, factor: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::shape("upsample_nearest2d", "input must be NCHW"));
        }
        if factor == 0 {
            return Err(Error::arg("upsample_nearest2d", "factor must be >= 1"));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h * factor, w * factor);
        let x = self.data();
        let mut out = vec![0.0f32; n * c * oh * ow];
        for pi in 0..n * c {
            let xb = pi * h * w;
            let ob = pi * oh * ow;
            for oy in 0..oh {
                let iy = oy / factor;
                for ox in 0..ow {
                    out[ob + oy * ow + ox] = x[xb + iy * w + ox / factor];
                }
            }
        }
        drop(x);
        struct UpBack {
            factor: usize,
        }
        impl Backward for UpBack {
            fn backward(&self, grad: &[f32], parents: &[Tensor]) {
                let s = parents[0].shape();
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let f = self.factor;
                let (oh, ow) = (h * f, w * f);
                let mut gx = vec![0.0f32; n * c * h * w];
                for pi in 0..n * c {
                    let xb = pi * h * w;
                    let ob = pi * oh * ow;
                    for oy in 0..oh {
                        let iy = oy / f;
                        for ox in 0..ow {
                            gx[xb + iy * w + ox / f] += grad[ob + oy * ow + ox];
                        }
                    }
                }
                parents[0].accumulate_grad(&gx);
            }
        }
        Ok(Tensor::from_op(
            vec![n, c, oh, ow],
            out,
            vec![self.clone()],
            UpBack { factor },
        ))
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_plane_forward(
    out: &mut [f32],
    x: &[f32],
    wt: &[f32],
    bias: f32,
    ni: usize,
    ki: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) {
    out.fill(bias);
    for ci in 0..c {
        let xbase = (ni * c + ci) * h * w;
        for dy in 0..kh {
            for dx in 0..kw {
                let wv = wt[((ki * c + ci) * kh + dy) * kw + dx];
                if wv == 0.0 {
                    continue;
                }
                for oy in 0..oh {
                    let iy = oy * stride + dy;
                    if iy < padding || iy - padding >= h {
                        continue;
                    }
                    let iy = iy - padding;
                    let (ox0, ox1) = valid_range(ow, stride, dx, padding, w);
                    let xrow = &x[xbase + iy * w..xbase + (iy + 1) * w];
                    let orow = &mut out[oy * ow..(oy + 1) * ow];
                    if stride == 1 && dx >= padding {
                        // contiguous fast path
                        let off = dx - padding;
                        for (o, xv) in orow[ox0..ox1].iter_mut().zip(&xrow[ox0 + off..]) {
                            *o += wv * xv;
                        }
                    } else {
                        for ox in ox0..ox1 {
                            let ix = ox * stride + dx - padding;
                            orow[ox] += wv * xrow[ix];
                        }
                    }
                }
            }
        }
    }
}

/// Output-column range [ox0, ox1) for which `ox*stride + dx - padding` is a
/// valid input column.
fn valid_range(ow: usize, stride: usize, dx: usize, padding: usize, w: usize) -> (usize, usize) {
    // ox*stride + dx >= padding  and  ox*stride + dx - padding < w
    let ox0 = if dx >= padding {
        0
    } else {
        (padding - dx).div_ceil(stride)
    };
    let hi = w + padding;
    let ox1 = if dx >= hi {
        0
    } else {
        ((hi - dx - 1) / stride + 1).min(ow)
    };
    (ox0.min(ow), ox1.max(ox0).min(ow))
}

#[cfg(test)]
mod tests {
    use crate::tensor::gradcheck::{gradcheck_scalar, rand_vec};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_all_ones_sums() {
        let x = Tensor::from_vec(&[1, 1, 3, 3], vec![1.0; 9]);
        let w = Tensor::param(&[1, 1, 3, 3], vec![1.0; 9]);
        let b = Tensor::param(&[1], vec![0.0]);
        let y = x.conv2d(&w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.to_vec(), vec![9.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_vec(&[1, 1, 4, 4], rand_vec(&mut rng, 16));
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = Tensor::param(&[1, 1, 3, 3], k);
        let b = Tensor::param(&[1], vec![0.0]);
        let y = x.conv2d(&w, &b, 1, 1).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn conv_shape_errors() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let w = Tensor::zeros(&[3, 1, 3, 3]); // wrong in-channels
        let b = Tensor::zeros(&[3]);
        let err = x.conv2d(&w, &b, 1, 1).unwrap_err();
        assert!(err.to_string().contains("channels"));
    }

    #[test]
    fn gradcheck_conv2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::param(&[1, 2, 5, 5], rand_vec(&mut rng, 50));
        let w = Tensor::param(&[3, 2, 3, 3], rand_vec(&mut rng, 54));
        let b = Tensor::param(&[3], rand_vec(&mut rng, 3));
        let proj = Tensor::from_vec(&[1, 3, 5, 5], rand_vec(&mut rng, 75));
        let err = gradcheck_scalar(&[x.clone(), w.clone(), b.clone()], || {
            x.conv2d(&w, &b, 1, 1)
                .unwrap()
                .mul(&proj)
                .unwrap()
                .sum()
        });
        assert!(err < 1e-3, "rel err {}", err);
    }

    #[test]
    fn maxpool_basic_and_ties() {
        let x = Tensor::param(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = x.maxpool2d(2).unwrap();
        assert_eq!(y.to_vec(), vec![4.0]);

        // constant input: gradient goes to the first element of each window
        let x = Tensor::param(&[1, 1, 2, 2], vec![5.0; 4]);
        let y = x.maxpool2d(2).unwrap();
        assert_eq!(y.to_vec(), vec![5.0]);
        y.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.0, 0.0, 0.0]);

        assert!(Tensor::zeros(&[1, 1, 3, 3]).maxpool2d(2).is_err());
    }

    #[test]
    fn upsample_basic() {
        let x = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]);
        let y = x.upsample_nearest2d(2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.to_vec(), vec![1.0; 4]);

        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(x.upsample_nearest2d(1).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn gradcheck_upsample() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::param(&[1, 2, 3, 3], rand_vec(&mut rng, 18));
        let proj = Tensor::from_vec(&[1, 2, 6, 6], rand_vec(&mut rng, 72));
        let err = gradcheck_scalar(&[x.clone()], || {
            x.upsample_nearest2d(2).unwrap().mul(&proj).unwrap().sum()
        });
        assert!(err < 1e-3, "rel err {}", err);
    }

    #[test]
    fn conv_stride2() {
        // 5x5 ones, 3x3 ones kernel, stride 2, padding 1 -> 3x3 output
        let x = Tensor::from_vec(&[1, 1, 5, 5], vec![1.0; 25]);
        let w = Tensor::from_vec(&[1, 1, 3, 3], vec![1.0; 9]);
        let b = Tensor::from_vec(&[1], vec![0.0]);
        let y = x.conv2d(&w, &b, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(
            y.to_vec(),
            vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]
        );

        // non-integral output extent is rejected
        let x = Tensor::zeros(&[1, 1, 4, 4]);
        assert!(x.conv2d(&w, &b, 2, 1).is_err());
    }
}
