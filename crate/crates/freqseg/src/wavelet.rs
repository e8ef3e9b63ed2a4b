//! Multi-level 2D discrete wavelet transform, LF/HF image reconstruction and
//! image-level complementary fusion.
//!
//! Filters are orthonormal and applied in correlation form on periodized
//! signals, so `idwt2(dwt2(x)) == x` holds to float precision and the 1-level
//! transform conserves energy. Odd extents are padded by one reflected sample
//! before each level; the pads are recorded and cropped on reconstruction.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SQRT1_2: f32 = std::f32::consts::FRAC_1_SQRT_2;

/// Analysis/synthesis filter pair. For the orthonormal bases shipped here the
/// synthesis filters equal the analysis filters (the inverse is the adjoint).
#[derive(Debug, Clone)]
pub struct WaveletBasis {
    pub name: &'static str,
    pub lo_d: Vec<f32>,
    pub hi_d: Vec<f32>,
    pub lo_r: Vec<f32>,
    pub hi_r: Vec<f32>,
}

impl WaveletBasis {
    pub fn haar() -> WaveletBasis {
        let lo = vec![SQRT1_2, SQRT1_2];
        let hi = vec![SQRT1_2, -SQRT1_2];
        WaveletBasis {
            name: "haar",
            lo_d: lo.clone(),
            hi_d: hi.clone(),
            lo_r: lo,
            hi_r: hi,
        }
    }

    /// Daubechies-2, correlation-form coefficients.
    pub fn db2() -> WaveletBasis {
        let lo = vec![
            0.482_962_9_f32,
            0.836_516_3,
            0.224_143_87,
            -0.129_409_52,
        ];
        // quadrature mirror: hi[k] = (-1)^k lo[len-1-k]
        let hi: Vec<f32> = lo
            .iter()
            .rev()
            .enumerate()
            .map(|(k, &v)| if k % 2 == 0 { v } else { -v })
            .collect();
        WaveletBasis {
            name: "db2",
            lo_d: lo.clone(),
            hi_d: hi.clone(),
            lo_r: lo,
            hi_r: hi,
        }
    }

    pub fn by_name(name: &str) -> Result<WaveletBasis> {
        match name {
            "haar" => Ok(WaveletBasis::haar()),
            "db2" => Ok(WaveletBasis::db2()),
            other => Err(Error::Config(format!(
                "unknown wavelet basis '{}' (available: haar, db2)",
                other
            ))),
        }
    }

    fn filter_len(&self) -> usize {
        self.lo_d.len()
    }
}

/// One coefficient plane per channel, channels concatenated.
#[derive(Debug, Clone)]
pub struct Plane {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

/// The three detail orientations of one decomposition level.
#[derive(Debug, Clone)]
pub struct DetailBand {
    pub h: usize,
    pub w: usize,
    /// horizontal detail (lowpass rows, highpass columns)
    pub lh: Vec<f32>,
    /// vertical detail (highpass rows, lowpass columns)
    pub hl: Vec<f32>,
    /// diagonal detail
    pub hh: Vec<f32>,
}

#[derive(Debug, Clone, Copy)]
struct LevelDims {
    h: usize,
    w: usize,
}

#[derive(Debug, Clone)]
pub struct WaveletPyramid {
    pub levels: usize,
    pub channels: usize,
    pub approx: Plane,
    /// index 0 = finest level
    pub details: Vec<DetailBand>,
    level_dims: Vec<LevelDims>,
}

impl WaveletPyramid {
    /// Copy with every detail coefficient zeroed (LF-only pyramid).
    pub fn zero_details(&self) -> WaveletPyramid {
        let mut p = self.clone();
        for d in &mut p.details {
            d.lh.iter_mut().for_each(|v| *v = 0.0);
            d.hl.iter_mut().for_each(|v| *v = 0.0);
            d.hh.iter_mut().for_each(|v| *v = 0.0);
        }
        p
    }

    /// Copy with the approximation zeroed (HF-only pyramid).
    pub fn zero_approx(&self) -> WaveletPyramid {
        let mut p = self.clone();
        p.approx.data.iter_mut().for_each(|v| *v = 0.0);
        p
    }

    /// Fraction of total coefficient energy held by the detail bands.
    pub fn detail_energy_fraction(&self) -> f32 {
        let ea: f32 = self.approx.data.iter().map(|v| v * v).sum();
        let ed: f32 = self
            .details
            .iter()
            .map(|d| {
                d.lh.iter()
                    .chain(&d.hl)
                    .chain(&d.hh)
                    .map(|v| v * v)
                    .sum::<f32>()
            })
            .sum();
        ed / (ea + ed).max(f32::MIN_POSITIVE)
    }
}

/// Analysis of one even-length periodized signal.
fn dwt1d(x: &[f32], lo: &[f32], hi: &[f32], a: &mut [f32], d: &mut [f32]) {
    let n = x.len();
    debug_assert!(n % 2 == 0);
    let half = n / 2;
    for i in 0..half {
        let mut sa = 0.0f32;
        let mut sd = 0.0f32;
        for (k, (&l, &h)) in lo.iter().zip(hi).enumerate() {
            let v = x[(2 * i + k) % n];
            sa += l * v;
            sd += h * v;
        }
        a[i] = sa;
        d[i] = sd;
    }
}

/// Adjoint of `dwt1d`: exact inverse for orthonormal filters.
fn idwt1d(a: &[f32], d: &[f32], lo: &[f32], hi: &[f32], x: &mut [f32]) {
    let n = x.len();
    x.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..a.len() {
        for (k, (&l, &h)) in lo.iter().zip(hi).enumerate() {
            x[(2 * i + k) % n] += l * a[i] + h * d[i];
        }
    }
}

fn check_image(image: &Tensor) -> Result<(usize, usize, usize)> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::shape("dwt2", format!("expected [C,H,W], got {:?}", s)));
    }
    Ok((s[0], s[1], s[2]))
}

/// Multi-level separable 2D DWT, per channel.
pub fn dwt2(image: &Tensor, basis: &WaveletBasis, levels: usize) -> Result<WaveletPyramid> {
    let (c, h0, w0) = check_image(image)?;
    if levels == 0 {
        return Err(Error::arg("dwt2", "levels must be >= 1"));
    }
    if h0 < (1 << levels) || w0 < (1 << levels) {
        return Err(Error::arg(
            "dwt2",
            format!("image {}x{} too small for {} levels", h0, w0, levels),
        ));
    }
    let fl = basis.filter_len();

    let mut cur = Plane {
        h: h0,
        w: w0,
        data: image.to_vec(),
    };
    let mut details = Vec::with_capacity(levels);
    let mut level_dims = Vec::with_capacity(levels);

    for _ in 0..levels {
        let pad_h = cur.h % 2 == 1;
        let pad_w = cur.w % 2 == 1;
        let (hp, wp) = (cur.h + pad_h as usize, cur.w + pad_w as usize);
        if hp < fl || wp < fl {
            return Err(Error::arg(
                "dwt2",
                format!(
                    "level input {}x{} smaller than filter support {}",
                    cur.h, cur.w, fl
                ),
            ));
        }
        level_dims.push(LevelDims { h: cur.h, w: cur.w });

        let (h2, w2) = (hp / 2, wp / 2);
        let mut ll = vec![0.0f32; c * h2 * w2];
        let mut lh = vec![0.0f32; c * h2 * w2];
        let mut hl = vec![0.0f32; c * h2 * w2];
        let mut hh = vec![0.0f32; c * h2 * w2];

        let mut row = vec![0.0f32; wp];
        let mut ra = vec![0.0f32; w2];
        let mut rd = vec![0.0f32; w2];
        let mut col = vec![0.0f32; hp];
        let mut ca = vec![0.0f32; h2];
        let mut cd = vec![0.0f32; h2];
        // intermediates after the row pass
        let mut lo_rows = vec![0.0f32; hp * w2];
        let mut hi_rows = vec![0.0f32; hp * w2];

        for ch in 0..c {
            let src = &cur.data[ch * cur.h * cur.w..(ch + 1) * cur.h * cur.w];
            for y in 0..hp {
                let sy = if y == cur.h { cur.h - 1 } else { y }; // reflected pad row
                row[..cur.w].copy_from_slice(&src[sy * cur.w..(sy + 1) * cur.w]);
                if pad_w {
                    row[cur.w] = src[sy * cur.w + cur.w - 1];
                }
                dwt1d(&row, &basis.lo_d, &basis.hi_d, &mut ra, &mut rd);
                lo_rows[y * w2..(y + 1) * w2].copy_from_slice(&ra);
                hi_rows[y * w2..(y + 1) * w2].copy_from_slice(&rd);
            }
            for x in 0..w2 {
                for y in 0..hp {
                    col[y] = lo_rows[y * w2 + x];
                }
                dwt1d(&col, &basis.lo_d, &basis.hi_d, &mut ca, &mut cd);
                for y in 0..h2 {
                    ll[(ch * h2 + y) * w2 + x] = ca[y];
                    lh[(ch * h2 + y) * w2 + x] = cd[y];
                }
                for y in 0..hp {
                    col[y] = hi_rows[y * w2 + x];
                }
                dwt1d(&col, &basis.lo_d, &basis.hi_d, &mut ca, &mut cd);
                for y in 0..h2 {
                    hl[(ch * h2 + y) * w2 + x] = ca[y];
                    hh[(ch * h2 + y) * w2 + x] = cd[y];
                }
            }
        }

        details.push(DetailBand {
            h: h2,
            w: w2,
            lh,
            hl,
            hh,
        });
        cur = Plane {
            h: h2,
            w: w2,
            data: ll,
        };
    }

    Ok(WaveletPyramid {
        levels,
        channels: c,
        approx: cur,
        details,
        level_dims,
    })
}

/// Inverse transform restoring the original extents.
pub fn idwt2(pyramid: &WaveletPyramid, basis: &WaveletBasis) -> Result<Tensor> {
    let c = pyramid.channels;
    if pyramid.details.len() != pyramid.levels || pyramid.level_dims.len() != pyramid.levels {
        return Err(Error::arg("idwt2", "inconsistent pyramid"));
    }
    let mut cur = pyramid.approx.clone();
    for lvl in (0..pyramid.levels).rev() {
        let band = &pyramid.details[lvl];
        let dims = pyramid.level_dims[lvl];
        if band.h != cur.h || band.w != cur.w {
            return Err(Error::shape(
                "idwt2",
                format!(
                    "detail band {}x{} does not match approximation {}x{}",
                    band.h, band.w, cur.h, cur.w
                ),
            ));
        }
        let (h2, w2) = (cur.h, cur.w);
        let (hp, wp) = (h2 * 2, w2 * 2);
        let mut out = vec![0.0f32; c * dims.h * dims.w];

        let mut lo_rows = vec![0.0f32; hp * w2];
        let mut hi_rows = vec![0.0f32; hp * w2];
        let mut ca = vec![0.0f32; h2];
        let mut cd = vec![0.0f32; h2];
        let mut col = vec![0.0f32; hp];
        let mut ra = vec![0.0f32; w2];
        let mut rd = vec![0.0f32; w2];
        let mut row = vec![0.0f32; wp];

        for ch in 0..c {
            let base = ch * h2 * w2;
            for x in 0..w2 {
                for y in 0..h2 {
                    ca[y] = cur.data[base + y * w2 + x];
                    cd[y] = band.lh[base + y * w2 + x];
                }
                idwt1d(&ca, &cd, &basis.lo_r, &basis.hi_r, &mut col);
                for y in 0..hp {
                    lo_rows[y * w2 + x] = col[y];
                }
                for y in 0..h2 {
                    ca[y] = band.hl[base + y * w2 + x];
                    cd[y] = band.hh[base + y * w2 + x];
                }
                idwt1d(&ca, &cd, &basis.lo_r, &basis.hi_r, &mut col);
                for y in 0..hp {
                    hi_rows[y * w2 + x] = col[y];
                }
            }
            let dst = &mut out[ch * dims.h * dims.w..(ch + 1) * dims.h * dims.w];
            for y in 0..hp {
                for x in 0..w2 {
                    ra[x] = lo_rows[y * w2 + x];
                    rd[x] = hi_rows[y * w2 + x];
                }
                idwt1d(&ra, &rd, &basis.lo_r, &basis.hi_r, &mut row);
                if y < dims.h {
                    dst[y * dims.w..(y + 1) * dims.w].copy_from_slice(&row[..dims.w]);
                }
            }
        }
        cur = Plane {
            h: dims.h,
            w: dims.w,
            data: out,
        };
    }
    Ok(Tensor::from_vec(&[c, cur.h, cur.w], cur.data))
}

/// Splits an image into its LF reconstruction `I_L` (details zeroed) and HF
/// reconstruction `I_H` (approximation zeroed); `I_L + I_H == image` by
/// linearity.
pub fn frequency_split(
    image: &Tensor,
    basis: &WaveletBasis,
    levels: usize,
) -> Result<(Tensor, Tensor)> {
    let pyr = dwt2(image, basis, levels)?;
    let lf = idwt2(&pyr.zero_details(), basis)?;
    let hf = idwt2(&pyr.zero_approx(), basis)?;
    Ok((lf, hf))
}

/// Complementary fusion: `x^L = I_L + alpha * I_H`, `x^H = I_H + beta * I_L`.
pub fn complementary_fuse(
    lf: &Tensor,
    hf: &Tensor,
    alpha: f32,
    beta: f32,
) -> Result<(Tensor, Tensor)> {
    if lf.shape() != hf.shape() {
        return Err(Error::shape(
            "complementary_fuse",
            format!("{:?} vs {:?}", lf.shape(), hf.shape()),
        ));
    }
    if alpha < 0.0 || beta < 0.0 {
        return Err(Error::arg(
            "complementary_fuse",
            "alpha and beta must be non-negative",
        ));
    }
    let l = lf.data();
    let h = hf.data();
    let xl: Vec<f32> = l.iter().zip(h.iter()).map(|(a, b)| a + alpha * b).collect();
    let xh: Vec<f32> = l.iter().zip(h.iter()).map(|(a, b)| b + beta * a).collect();
    drop(l);
    drop(h);
    Ok((
        Tensor::from_vec(lf.shape(), xl),
        Tensor::from_vec(hf.shape(), xh),
    ))
}

/// One independent uniform draw of alpha and beta from their ranges.
pub fn sample_alpha_beta(
    rng: &mut impl Rng,
    alpha_range: [f32; 2],
    beta_range: [f32; 2],
) -> Result<(f32, f32)> {
    let draw = |rng: &mut dyn rand::RngCore, r: [f32; 2]| -> Result<f32> {
        if r[0] < 0.0 || r[0] > r[1] {
            return Err(Error::Config(format!(
                "invalid weight range [{}, {}]",
                r[0], r[1]
            )));
        }
        if r[0] == r[1] {
            Ok(r[0])
        } else {
            Ok(rng.gen_range(r[0]..r[1]))
        }
    };
    let alpha = draw(rng, alpha_range)?;
    let beta = draw(rng, beta_range)?;
    Ok((alpha, beta))
}
