//! Segmentation evaluation: Jaccard, Dice, average surface distance and the
//! 95th-percentile Hausdorff distance.

use crate::error::{Error, Result};

/// Per-image metric values. Surface distances are `None` when either mask
/// has an empty boundary.
#[derive(Debug, Clone)]
pub struct ImageMetrics {
    pub id: String,
    pub jaccard: f64,
    pub dice: f64,
    pub asd: Option<f64>,
    pub hd95: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct MetricsReport {
    pub per_image: Vec<ImageMetrics>,
}

impl MetricsReport {
    /// Means over the per-image values. Images with missing surface
    /// distances are excluded from the ASD/HD95 means only.
    pub fn aggregate(&self) -> ImageMetrics {
        let n = self.per_image.len().max(1) as f64;
        let jaccard = self.per_image.iter().map(|m| m.jaccard).sum::<f64>() / n;
        let dice = self.per_image.iter().map(|m| m.dice).sum::<f64>() / n;
        let mean_opt = |f: fn(&ImageMetrics) -> Option<f64>| {
            let vals: Vec<f64> = self.per_image.iter().filter_map(f).collect();
            if vals.is_empty() {
                None
            } else {
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            }
        };
        ImageMetrics {
            id: "MEAN".into(),
            jaccard,
            dice,
            asd: mean_opt(|m| m.asd),
            hd95: mean_opt(|m| m.hd95),
        }
    }
}

/// Jaccard and Dice as percentages for one foreground label. Both masks
/// empty counts as a perfect match.
pub fn overlap_metrics(pred: &[u8], gt: &[u8], foreground: u8) -> Result<(f64, f64)> {
    if pred.len() != gt.len() {
        return Err(Error::shape(
            "overlap_metrics",
            format!("{} vs {} pixels", pred.len(), gt.len()),
        ));
    }
    let mut inter = 0u64;
    let mut np = 0u64;
    let mut ng = 0u64;
    for (&p, &g) in pred.iter().zip(gt) {
        let pf = p == foreground;
        let gf = g == foreground;
        np += pf as u64;
        ng += gf as u64;
        inter += (pf && gf) as u64;
    }
    if np == 0 && ng == 0 {
        eprintln!("warning: foreground {} absent from both masks", foreground);
        return Ok((100.0, 100.0));
    }
    let union = np + ng - inter;
    let jaccard = 100.0 * inter as f64 / union as f64;
    let dice = 100.0 * 2.0 * inter as f64 / (np + ng) as f64;
    Ok((jaccard, dice))
}

/// Boundary pixels of a binary mask: foreground pixels with at least one
/// background 4-neighbor, where the image border counts as background.
pub fn surface_extract(mask: &[bool], h: usize, w: usize) -> Vec<(usize, usize)> {
    let at = |r: isize, c: isize| -> bool {
        r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w && mask[r as usize * w + c as usize]
    };
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask[r * w + c] {
                continue;
            }
            let (ri, ci) = (r as isize, c as isize);
            if !at(ri - 1, ci) || !at(ri + 1, ci) || !at(ri, ci - 1) || !at(ri, ci + 1) {
                out.push((r, c));
            }
        }
    }
    out
}

const INF: f64 = 1e20;

fn edt_1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = -INF;
    z[1] = INF;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k] {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = INF;
                break;
            }
        }
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k] as f64;
        d[q] = (q as f64 - p) * (q as f64 - p) + f[p as usize];
    }
}

/// Exact squared Euclidean distance transform: for every grid cell, the
/// squared distance to the nearest site.
fn squared_edt(sites: &[(usize, usize)], h: usize, w: usize) -> Vec<f64> {
    let mut g = vec![INF; h * w];
    for &(r, c) in sites {
        g[r * w + c] = 0.0;
    }
    let mut col_in = vec![0.0f64; h];
    let mut col_out = vec![0.0f64; h];
    for c in 0..w {
        for r in 0..h {
            col_in[r] = g[r * w + c];
        }
        edt_1d(&col_in, &mut col_out);
        for r in 0..h {
            g[r * w + c] = col_out[r];
        }
    }
    let mut row_out = vec![0.0f64; w];
    for r in 0..h {
        edt_1d(&g[r * w..(r + 1) * w].to_vec(), &mut row_out);
        g[r * w..(r + 1) * w].copy_from_slice(&row_out);
    }
    g
}

fn percentile95(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = 0.95 * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// ASD pools the nearest-surface distances from both directions; HD95 is
/// the larger of the two directed 95th percentiles (linear-interpolated).
pub fn surface_distances(
    a: &[(usize, usize)],
    b: &[(usize, usize)],
    h: usize,
    w: usize,
) -> Result<(f64, f64)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::arg("surface_distances", "empty surface set"));
    }
    let edt_b = squared_edt(b, h, w);
    let edt_a = squared_edt(a, h, w);
    let mut d_ab: Vec<f64> = a.iter().map(|&(r, c)| edt_b[r * w + c].sqrt()).collect();
    let mut d_ba: Vec<f64> = b.iter().map(|&(r, c)| edt_a[r * w + c].sqrt()).collect();
    let asd =
        (d_ab.iter().sum::<f64>() + d_ba.iter().sum::<f64>()) / (d_ab.len() + d_ba.len()) as f64;
    d_ab.sort_by(|x, y| x.partial_cmp(y).unwrap());
    d_ba.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let hd95 = percentile95(&d_ab).max(percentile95(&d_ba));
    Ok((asd, hd95))
}

/// All four metrics for one prediction/ground-truth pair. Surface distances
/// are scaled by `spacing` and reported as missing if either boundary is
/// empty.
pub fn evaluate_pair(
    id: &str,
    pred: &[u8],
    gt: &[u8],
    h: usize,
    w: usize,
    foreground: u8,
    spacing: f64,
) -> Result<ImageMetrics> {
    if pred.len() != h * w || gt.len() != h * w {
        return Err(Error::shape("evaluate_pair", "mask size mismatch"));
    }
    let (jaccard, dice) = overlap_metrics(pred, gt, foreground)?;
    let pm: Vec<bool> = pred.iter().map(|&v| v == foreground).collect();
    let gm: Vec<bool> = gt.iter().map(|&v| v == foreground).collect();
    let sa = surface_extract(&pm, h, w);
    let sb = surface_extract(&gm, h, w);
    let (asd, hd95) = if sa.is_empty() || sb.is_empty() {
        eprintln!("warning: {}: empty surface, distances skipped", id);
        (None, None)
    } else {
        let (a, h95) = surface_distances(&sa, &sb, h, w)?;
        (Some(a * spacing), Some(h95 * spacing))
    };
    Ok(ImageMetrics {
        id: id.to_string(),
        jaccard,
        dice,
        asd,
        hd95,
    })
}
