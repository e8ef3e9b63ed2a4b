//! Dataset plumbing: synthetic image generation, the on-disk PGM layout,
//! labeled/unlabeled splitting, augmentation and batch assembly.
//!
//! Disk layout: `images/*.pgm`, `labels/*.pgm` and a `manifest.csv` with
//! `id,split` rows (split `train` or `test`).

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read as _, Write as _};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::InputMode;
use crate::tensor::Tensor;
use crate::wavelet::{complementary_fuse, frequency_split, sample_alpha_beta, WaveletBasis};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    TrainLabeled,
    TrainUnlabeled,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "train-labeled" => Ok(Split::TrainLabeled),
            "train-unlabeled" => Ok(Split::TrainUnlabeled),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split {:?}", other))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::TrainLabeled => "train-labeled",
            Split::TrainUnlabeled => "train-unlabeled",
            Split::Test => "test",
        }
    }

    pub fn is_train(&self) -> bool {
        matches!(self, Split::Train | Split::TrainLabeled | Split::TrainUnlabeled)
    }
}

#[derive(Debug, Clone)]
pub struct SampleRecord {
    pub id: String,
    pub h: usize,
    pub w: usize,
    /// Single-channel intensities in [0, 1], row-major.
    pub image: Vec<f32>,
    pub label: Option<Vec<u8>>,
    pub split: Split,
}

// ---------------------------------------------------------------------------
// PGM codec (P5, 8-bit)

pub fn write_pgm(path: &Path, w: usize, h: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != w * h {
        return Err(Error::arg("write_pgm", "pixel count does not match size"));
    }
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{} {}\n255\n", w, h)?;
    f.write_all(pixels)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let bad = |msg: &str| Error::Format(format!("{}: {}", path.display(), msg));
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(bad("not a P5 PGM"));
    }
    // header: three whitespace-separated integers after the magic, with
    // '#' comment lines allowed
    let mut pos = 2usize;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        while pos < bytes.len() {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| bad("bad header integer"))?;
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(bad("only 8-bit PGM supported"));
    }
    pos += 1;
    if bytes.len() < pos + w * h {
        return Err(bad("truncated pixel data"));
    }
    Ok((w, h, bytes[pos..pos + w * h].to_vec()))
}

// ---------------------------------------------------------------------------
// Synthetic generation

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub h: usize,
    pub w: usize,
    /// 0 = smooth, high-frequency-poor; 1 = strongly textured.
    pub texture_amplitude: f32,
    pub noise_sigma: f32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_train: 200,
            n_test: 50,
            h: 64,
            w: 64,
            texture_amplitude: 0.5,
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

fn smoothstep(t: f32) -> f32 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f32 {
    let u1: f32 = rng.gen_range(f32::MIN_POSITIVE..1.0);
    let u2: f32 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos()
}

/// One synthetic image and its mask: 1 to 3 soft-edged random ellipses on a
/// gradient background, optional sinusoidal texture and Gaussian noise.
/// The texture knob also sharpens blob edges, so 0 leaves almost no
/// high-frequency energy.
pub fn synth_image(
    rng: &mut ChaCha8Rng,
    h: usize,
    w: usize,
    texture: f32,
    noise: f32,
) -> (Vec<f32>, Vec<u8>) {
    let mut img = vec![0.0f32; h * w];
    let mut label = vec![0u8; h * w];
    let base = rng.gen_range(0.25f32..0.45);
    let gx = rng.gen_range(-0.15f32..0.15);
    let gy = rng.gen_range(-0.15f32..0.15);
    for r in 0..h {
        for c in 0..w {
            img[r * w + c] = base + gx * c as f32 / w as f32 + gy * r as f32 / h as f32;
        }
    }
    let sc = h.min(w) as f32 / 64.0;
    let edge = (20.0 - 18.0 * texture) * sc;
    let mut blob = vec![0.0f32; h * w];
    let n_blobs = rng.gen_range(1..4);
    for _ in 0..n_blobs {
        let cx = rng.gen_range(0.25 * w as f32..0.75 * w as f32);
        let cy = rng.gen_range(0.25 * h as f32..0.75 * h as f32);
        let a = rng.gen_range(10.0f32..18.0) * sc;
        let b = rng.gen_range(10.0f32..18.0) * sc;
        let th = rng.gen_range(0.0f32..std::f32::consts::PI);
        let contrast = rng.gen_range(0.25f32..0.40);
        let (ct, st) = (th.cos(), th.sin());
        let ab = a.min(b);
        for r in 0..h {
            for c in 0..w {
                let dx = c as f32 - cx;
                let dy = r as f32 - cy;
                let u = dx * ct + dy * st;
                let v = -dx * st + dy * ct;
                let rad = ((u / a).powi(2) + (v / b).powi(2)).sqrt();
                let dist = (rad - 1.0) * ab;
                let val = contrast * smoothstep((edge - dist) / (2.0 * edge));
                let k = r * w + c;
                blob[k] = blob[k].max(val);
                if rad <= 1.0 {
                    label[k] = 1;
                }
            }
        }
    }
    for (p, b) in img.iter_mut().zip(&blob) {
        *p += b;
    }
    if texture > 0.0 {
        let fx = rng.gen_range(0.15f32..0.35);
        let fy = rng.gen_range(0.15f32..0.35);
        let p1 = rng.gen_range(0.0f32..std::f32::consts::TAU);
        let p2 = rng.gen_range(0.0f32..std::f32::consts::TAU);
        for r in 0..h {
            for c in 0..w {
                img[r * w + c] += texture
                    * 0.15
                    * (std::f32::consts::TAU * fx * c as f32 + p1).sin()
                    * (std::f32::consts::TAU * fy * r as f32 + p2).sin();
            }
        }
    }
    if noise > 0.0 {
        for p in img.iter_mut() {
            *p += noise * gaussian(rng);
        }
    }
    let mx = img.iter().cloned().fold(0.0f32, f32::max);
    if mx > 1.0 {
        for p in img.iter_mut() {
            *p /= mx;
        }
    }
    for p in img.iter_mut() {
        *p = p.clamp(0.0, 1.0);
    }
    (img, label)
}

/// Writes the full dataset under `out_dir` and returns the manifest path.
/// Identical specs produce byte-identical files.
pub fn generate_synthetic(spec: &SynthSpec, out_dir: &Path) -> Result<PathBuf> {
    if spec.h % 16 != 0 || spec.w % 16 != 0 {
        return Err(Error::arg(
            "generate_synthetic",
            "image size must be divisible by 16",
        ));
    }
    fs::create_dir_all(out_dir.join("images"))?;
    fs::create_dir_all(out_dir.join("labels"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut manifest = String::from("id,split\n");
    let total = spec.n_train + spec.n_test;
    for i in 0..total {
        let id = format!("img{:04}", i);
        let split = if i < spec.n_train { "train" } else { "test" };
        let (img, label) = synth_image(
            &mut rng,
            spec.h,
            spec.w,
            spec.texture_amplitude,
            spec.noise_sigma,
        );
        let pixels: Vec<u8> = img
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let mask: Vec<u8> = label.iter().map(|&v| v * 255).collect();
        write_pgm(&out_dir.join("images").join(format!("{}.pgm", id)), spec.w, spec.h, &pixels)?;
        write_pgm(&out_dir.join("labels").join(format!("{}.pgm", id)), spec.w, spec.h, &mask)?;
        writeln!(manifest, "{},{}", id, split).unwrap();
    }
    let manifest_path = out_dir.join("manifest.csv");
    fs::write(&manifest_path, manifest)?;
    Ok(manifest_path)
}

/// Reads every record listed in `manifest.csv`, in manifest order. Label
/// masks are binarized (any nonzero pixel = foreground).
pub fn load_dataset(dir: &Path) -> Result<Vec<SampleRecord>> {
    let manifest = fs::File::open(dir.join("manifest.csv"))
        .map_err(|_| Error::Format(format!("{}: no manifest.csv", dir.display())))?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(manifest).lines().enumerate() {
        let line = line?;
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let mut parts = line.trim().split(',');
        let (id, split) = match (parts.next(), parts.next()) {
            (Some(id), Some(split)) => (id.to_string(), Split::parse(split)?),
            _ => return Err(Error::Format(format!("manifest line {}: bad row", lineno + 1))),
        };
        let (w, h, pixels) = read_pgm(&dir.join("images").join(format!("{}.pgm", id)))?;
        let image: Vec<f32> = pixels.iter().map(|&v| v as f32 / 255.0).collect();
        let label_path = dir.join("labels").join(format!("{}.pgm", id));
        let label = if label_path.exists() {
            let (lw, lh, mask) = read_pgm(&label_path)?;
            if lw != w || lh != h {
                return Err(Error::Format(format!("{}: label size mismatch", id)));
            }
            Some(mask.iter().map(|&v| (v > 0) as u8).collect())
        } else {
            None
        };
        if label.is_none() && split != Split::TrainUnlabeled {
            return Err(Error::Format(format!("{}: split {} requires a label", id, split.name())));
        }
        records.push(SampleRecord {
            id,
            h,
            w,
            image,
            label,
            split,
        });
    }
    Ok(records)
}

/// Deterministically partitions the train records into labeled and
/// unlabeled subsets; test records are untouched.
pub fn split_dataset(records: &mut [SampleRecord], labeled_fraction: f32, seed: u64) -> Result<()> {
    if !(labeled_fraction > 0.0 && labeled_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "labeled_fraction {} outside (0, 1]",
            labeled_fraction
        )));
    }
    let mut train_idx: Vec<usize> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split.is_train())
        .map(|(i, _)| i)
        .collect();
    let n_labeled = (labeled_fraction * train_idx.len() as f32).round() as usize;
    if n_labeled == 0 {
        return Err(Error::Config(format!(
            "labeled_fraction {} leaves zero labeled images",
            labeled_fraction
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates
    for i in (1..train_idx.len()).rev() {
        train_idx.swap(i, rng.gen_range(0..=i));
    }
    for (rank, &i) in train_idx.iter().enumerate() {
        records[i].split = if rank < n_labeled {
            Split::TrainLabeled
        } else {
            Split::TrainUnlabeled
        };
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Augmentation

/// Applies one of the eight axis-aligned flips/rotations. `transform` 0 is
/// the identity; bit 0 = horizontal flip, bit 1 = vertical flip, bit 2 =
/// transpose. Returns the new (h, w).
pub fn apply_dihedral<T: Copy>(data: &[T], h: usize, w: usize, transform: u8) -> (Vec<T>, usize, usize) {
    let (oh, ow) = if transform & 4 != 0 { (w, h) } else { (h, w) };
    let mut out = Vec::with_capacity(data.len());
    for r in 0..oh {
        for c in 0..ow {
            let (mut sr, mut sc) = if transform & 4 != 0 { (c, r) } else { (r, c) };
            if transform & 1 != 0 {
                sc = w - 1 - sc;
            }
            if transform & 2 != 0 {
                sr = h - 1 - sr;
            }
            out.push(data[sr * w + sc]);
        }
    }
    (out, oh, ow)
}

/// Random flip/rotation applied identically to image and mask.
pub fn augment(sample: &mut SampleRecord, rng: &mut ChaCha8Rng) {
    let t = rng.gen_range(0u8..8);
    let (img, h, w) = apply_dihedral(&sample.image, sample.h, sample.w, t);
    sample.image = img;
    if let Some(label) = &sample.label {
        let (lab, _, _) = apply_dihedral(label, sample.h, sample.w, t);
        sample.label = Some(lab);
    }
    sample.h = h;
    sample.w = w;
}

// ---------------------------------------------------------------------------
// Batching

/// In-place zero-mean, unit-variance scaling of each channel of one CHW
/// sample. Flat channels stay zero.
pub fn normalize_per_channel(buf: &mut [f32], c: usize) {
    let plane = buf.len() / c;
    for ch in 0..c {
        let s = &mut buf[ch * plane..(ch + 1) * plane];
        let mean = s.iter().sum::<f32>() / plane as f32;
        let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / plane as f32;
        let inv = 1.0 / (var.sqrt() + 1e-6);
        for v in s {
            *v = (*v - mean) * inv;
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchSettings {
    pub augment: bool,
    pub alpha_range: [f32; 2],
    pub beta_range: [f32; 2],
    pub wavelet_basis: String,
    pub wavelet_levels: usize,
    pub input_mode: InputMode,
    pub num_classes: usize,
}

pub struct Batch {
    pub x_m: Tensor,
    pub x_l: Tensor,
    pub x_h: Tensor,
    /// One-hot ground truth; absent for unlabeled batches.
    pub y: Option<Tensor>,
}

/// Assembles one batch: per sample augment, split into LF/HF parts, draw
/// fresh fusion weights, blend and normalize. All records must come from
/// the same split; labels are attached only for labeled and test records.
pub fn make_batch(
    records: &[&SampleRecord],
    settings: &BatchSettings,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    if records.is_empty() {
        return Err(Error::arg("make_batch", "empty batch"));
    }
    let split = records[0].split;
    if records.iter().any(|r| r.split != split) {
        return Err(Error::arg("make_batch", "records from mixed splits"));
    }
    let (h, w) = (records[0].h, records[0].w);
    if records.iter().any(|r| r.h != h || r.w != w) {
        return Err(Error::shape("make_batch", "mixed image sizes"));
    }
    let n = records.len();
    let sample = h * w;
    let basis = WaveletBasis::by_name(&settings.wavelet_basis)?;
    let with_labels = split != Split::TrainUnlabeled;
    let mut x_m = vec![0.0f32; n * sample];
    let mut x_l = vec![0.0f32; n * sample];
    let mut x_h = vec![0.0f32; n * sample];
    let mut y = vec![0.0f32; if with_labels { n * settings.num_classes * sample } else { 0 }];
    for (i, rec) in records.iter().enumerate() {
        let mut rec = (*rec).clone();
        if settings.augment && split.is_train() {
            augment(&mut rec, rng);
        }
        let (alpha, beta) = sample_alpha_beta(rng, settings.alpha_range, settings.beta_range)?;
        let (ml, hl) = if settings.input_mode == InputMode::RawAll {
            (rec.image.clone(), rec.image.clone())
        } else {
            let img = Tensor::from_vec(&[1, rec.h, rec.w], rec.image.clone());
            let (lf, hf) = frequency_split(&img, &basis, settings.wavelet_levels)?;
            let (xl, xh) = complementary_fuse(&lf, &hf, alpha, beta)?;
            match settings.input_mode {
                InputMode::LfOnly => (xl.to_vec(), rec.image.clone()),
                InputMode::HfOnly => (rec.image.clone(), xh.to_vec()),
                _ => (xl.to_vec(), xh.to_vec()),
            }
        };
        let dst = i * sample..(i + 1) * sample;
        x_m[dst.clone()].copy_from_slice(&rec.image);
        x_l[dst.clone()].copy_from_slice(&ml);
        x_h[dst.clone()].copy_from_slice(&hl);
        normalize_per_channel(&mut x_m[dst.clone()], 1);
        normalize_per_channel(&mut x_l[dst.clone()], 1);
        normalize_per_channel(&mut x_h[dst], 1);
        if with_labels {
            let label = rec
                .label
                .as_ref()
                .ok_or_else(|| Error::arg("make_batch", format!("{}: missing label", rec.id)))?;
            for (k, &cls) in label.iter().enumerate() {
                if cls as usize >= settings.num_classes {
                    return Err(Error::arg(
                        "make_batch",
                        format!("{}: label {} out of range", rec.id, cls),
                    ));
                }
                y[i * settings.num_classes * sample + cls as usize * sample + k] = 1.0;
            }
        }
    }
    let shape = [n, 1, h, w];
    Ok(Batch {
        x_m: Tensor::from_vec(&shape, x_m),
        x_l: Tensor::from_vec(&shape, x_l),
        x_h: Tensor::from_vec(&shape, x_h),
        y: if with_labels {
            Some(Tensor::from_vec(&[n, settings.num_classes, h, w], y))
        } else {
            None
        },
    })
}

/// Deterministic per-epoch shuffle order over `n` items.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut mixed = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    mixed ^= mixed >> 30;
    mixed = mixed.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    let mut rng = ChaCha8Rng::seed_from_u64(mixed);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    order
}
