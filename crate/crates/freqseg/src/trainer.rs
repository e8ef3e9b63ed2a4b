//! Optimization loop, checkpointing and the evaluation driver.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{self, BatchSettings, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::loss::{lambda_at, supervised_loss, total_loss, unsupervised_loss, LossConfig};
use crate::metrics::{self, MetricsReport};
use crate::model::{InputMode, ModelConfig, UNetSpec, XNetV2Model};
use crate::nten;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Supervised loss on labeled batches plus the ramped consistency loss
    /// on unlabeled batches.
    Semi,
    /// Supervised loss on the labeled subset only.
    Full,
}

impl TrainMode {
    pub fn by_name(name: &str) -> Result<TrainMode> {
        match name {
            "semi" => Ok(TrainMode::Semi),
            "full" => Ok(TrainMode::Full),
            other => Err(Error::Config(format!("unknown mode {:?}", other))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TrainMode::Semi => "semi",
            TrainMode::Full => "full",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f32,
    pub momentum: f32,
    pub poly_power: f32,
    pub lambda_max: f32,
    pub alpha_range: [f32; 2],
    pub beta_range: [f32; 2],
    pub labeled_fraction: f32,
    pub seed: u64,
    pub mode: TrainMode,
    pub enable_lm: bool,
    pub enable_hm: bool,
    pub input_mode: InputMode,
    pub wavelet_basis: String,
    pub wavelet_levels: usize,
    pub encoder_channels: Vec<usize>,
    pub num_classes: usize,
    pub augment: bool,
    pub data_dir: String,
    pub out_dir: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 8,
            lr0: 0.1,
            momentum: 0.9,
            poly_power: 0.9,
            lambda_max: 3.0,
            alpha_range: [0.4, 0.8],
            beta_range: [0.4, 0.8],
            labeled_fraction: 0.2,
            seed: 0,
            mode: TrainMode::Semi,
            enable_lm: true,
            enable_hm: true,
            input_mode: InputMode::Fusion,
            wavelet_basis: "haar".into(),
            wavelet_levels: 1,
            encoder_channels: vec![32, 64, 128, 256],
            num_classes: 2,
            augment: true,
            data_dir: String::new(),
            out_dir: String::new(),
        }
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |k: &str, v: &str| Error::Config(format!("bad value {:?} for key {}", v, k));
        match key {
            "epochs" => self.epochs = value.parse().map_err(|_| bad(key, value))?,
            "batch_size" => self.batch_size = value.parse().map_err(|_| bad(key, value))?,
            "lr0" => self.lr0 = value.parse().map_err(|_| bad(key, value))?,
            "momentum" => self.momentum = value.parse().map_err(|_| bad(key, value))?,
            "poly_power" => self.poly_power = value.parse().map_err(|_| bad(key, value))?,
            "lambda_max" => self.lambda_max = value.parse().map_err(|_| bad(key, value))?,
            "alpha_min" => self.alpha_range[0] = value.parse().map_err(|_| bad(key, value))?,
            "alpha_max" => self.alpha_range[1] = value.parse().map_err(|_| bad(key, value))?,
            "beta_min" => self.beta_range[0] = value.parse().map_err(|_| bad(key, value))?,
            "beta_max" => self.beta_range[1] = value.parse().map_err(|_| bad(key, value))?,
            "labeled_fraction" => {
                self.labeled_fraction = value.parse().map_err(|_| bad(key, value))?
            }
            "seed" => self.seed = value.parse().map_err(|_| bad(key, value))?,
            "mode" => self.mode = TrainMode::by_name(value)?,
            "enable_lm" => self.enable_lm = parse_bool(key, value)?,
            "enable_hm" => self.enable_hm = parse_bool(key, value)?,
            "input_mode" => self.input_mode = InputMode::by_name(value)?,
            "wavelet_basis" => self.wavelet_basis = value.to_string(),
            "wavelet_levels" => self.wavelet_levels = value.parse().map_err(|_| bad(key, value))?,
            "encoder_channels" => {
                self.encoder_channels = value
                    .split(',')
                    .map(|v| v.trim().parse().map_err(|_| bad(key, value)))
                    .collect::<Result<Vec<usize>>>()?
            }
            "num_classes" => self.num_classes = value.parse().map_err(|_| bad(key, value))?,
            "augment" => self.augment = parse_bool(key, value)?,
            "data_dir" => self.data_dir = value.to_string(),
            "out_dir" => self.out_dir = value.to_string(),
            other => return Err(Error::Config(format!("unknown config key {:?}", other))),
        }
        Ok(())
    }

    /// Parses a flat `key = value` config file; `#` starts a comment.
    pub fn from_file(path: &Path) -> Result<TrainConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
        let mut cfg = TrainConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected key = value", path.display(), lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn to_config_string(&self) -> String {
        let ch: Vec<String> = self.encoder_channels.iter().map(|c| c.to_string()).collect();
        let mut s = String::new();
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "lr0 = {}", self.lr0);
        let _ = writeln!(s, "momentum = {}", self.momentum);
        let _ = writeln!(s, "poly_power = {}", self.poly_power);
        let _ = writeln!(s, "lambda_max = {}", self.lambda_max);
        let _ = writeln!(s, "alpha_min = {}", self.alpha_range[0]);
        let _ = writeln!(s, "alpha_max = {}", self.alpha_range[1]);
        let _ = writeln!(s, "beta_min = {}", self.beta_range[0]);
        let _ = writeln!(s, "beta_max = {}", self.beta_range[1]);
        let _ = writeln!(s, "labeled_fraction = {}", self.labeled_fraction);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "mode = {}", self.mode.name());
        let _ = writeln!(s, "enable_lm = {}", self.enable_lm);
        let _ = writeln!(s, "enable_hm = {}", self.enable_hm);
        let _ = writeln!(s, "input_mode = {}", self.input_mode.name());
        let _ = writeln!(s, "wavelet_basis = {}", self.wavelet_basis);
        let _ = writeln!(s, "wavelet_levels = {}", self.wavelet_levels);
        let _ = writeln!(s, "encoder_channels = {}", ch.join(","));
        let _ = writeln!(s, "num_classes = {}", self.num_classes);
        let _ = writeln!(s, "augment = {}", self.augment);
        let _ = writeln!(s, "data_dir = {}", self.data_dir);
        let _ = writeln!(s, "out_dir = {}", self.out_dir);
        s
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            spec: UNetSpec::new(1, self.num_classes, self.encoder_channels.clone())?,
            enable_lm: self.enable_lm,
            enable_hm: self.enable_hm,
            input_mode: self.input_mode,
            wavelet_basis: self.wavelet_basis.clone(),
            wavelet_levels: self.wavelet_levels,
            alpha_range: self.alpha_range,
            beta_range: self.beta_range,
            seed: self.seed,
        })
    }

    fn batch_settings(&self) -> BatchSettings {
        BatchSettings {
            augment: self.augment,
            alpha_range: self.alpha_range,
            beta_range: self.beta_range,
            wavelet_basis: self.wavelet_basis.clone(),
            wavelet_levels: self.wavelet_levels,
            input_mode: self.input_mode,
            num_classes: self.num_classes,
        }
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!("bad boolean {:?} for key {}", other, key))),
    }
}

/// `lr0 * (1 - step/total)^power`.
pub fn poly_lr(step: usize, total_steps: usize, lr0: f32, power: f32) -> f32 {
    let frac = step as f32 / total_steps.max(1) as f32;
    lr0 * (1.0 - frac).max(0.0).powf(power)
}

/// Momentum SGD over a named parameter list. A non-finite gradient skips
/// the whole update with a warning.
pub fn sgd_step(
    params: &[(String, crate::Tensor)],
    velocity: &mut [Vec<f32>],
    lr: f32,
    momentum: f32,
) {
    for (name, p) in params {
        if let Some(g) = p.grad() {
            if g.iter().any(|v| !v.is_finite()) {
                eprintln!("warning: non-finite gradient in {}, skipping update", name);
                return;
            }
        }
    }
    for ((_, p), v) in params.iter().zip(velocity.iter_mut()) {
        let g = match p.grad() {
            Some(g) => g,
            None => continue,
        };
        p.update_data(|x, i| {
            v[i] = momentum * v[i] + g[i];
            *x -= lr * v[i];
        });
    }
}

#[derive(Debug, Clone)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub lr: f32,
    pub lambda: f32,
    pub l_sup: f32,
    pub l_unsup: f32,
    pub l_total: f32,
    pub val_dice: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub rows: Vec<TrainLogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,lambda,l_sup,l_unsup,l_total,val_dice\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.4}",
                r.epoch, r.lr, r.lambda, r.l_sup, r.l_unsup, r.l_total, r.val_dice
            );
        }
        s
    }
}

// ---------------------------------------------------------------------------
// Checkpointing

/// Checkpoint layout: `config.txt` (TrainConfig snapshot), `manifest.txt`
/// (`name kind file` rows) and one NTEN file per parameter and batchnorm
/// buffer.
pub fn save_checkpoint(model: &XNetV2Model, cfg: &TrainConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.txt"), cfg.to_config_string())?;
    let mut manifest = String::new();
    for (i, (name, p)) in model.named_parameters().iter().enumerate() {
        let file = format!("p{:04}.nten", i);
        nten::write_tensor(&dir.join(&file), p)?;
        let _ = writeln!(manifest, "{} param {}", name, file);
    }
    for (i, (name, b)) in model.named_buffers().iter().enumerate() {
        let file = format!("b{:04}.nten", i);
        let data = b.borrow().clone();
        nten::write(&dir.join(&file), &nten::NtenArray::F32(vec![data.len()], data))?;
        let _ = writeln!(manifest, "{} buffer {}", name, file);
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(XNetV2Model, TrainConfig)> {
    let cfg = TrainConfig::from_file(&dir.join("config.txt"))?;
    let model = XNetV2Model::new(cfg.model_config()?)?;
    let manifest = fs::read_to_string(dir.join("manifest.txt"))
        .map_err(|_| Error::Format(format!("{}: no manifest.txt", dir.display())))?;
    let params: std::collections::HashMap<String, crate::Tensor> =
        model.named_parameters().into_iter().collect();
    let buffers: std::collections::HashMap<String, crate::model::BufferRef> =
        model.named_buffers().into_iter().collect();
    let mut seen = std::collections::HashSet::new();
    let mut problems = Vec::new();
    for line in manifest.lines() {
        let mut parts = line.split_whitespace();
        let (name, kind, file) = match (parts.next(), parts.next(), parts.next()) {
            (Some(n), Some(k), Some(f)) => (n, k, f),
            _ => return Err(Error::Format(format!("bad manifest line {:?}", line))),
        };
        seen.insert(name.to_string());
        match kind {
            "param" => match params.get(name) {
                Some(p) => {
                    let t = nten::read_tensor(&dir.join(file))?;
                    if t.shape() != p.shape() {
                        problems.push(format!("{}: shape {:?} vs {:?}", name, t.shape(), p.shape()));
                    } else {
                        p.set_data(&t.data());
                    }
                }
                None => problems.push(format!("{}: not in model", name)),
            },
            "buffer" => match buffers.get(name) {
                Some(b) => match nten::read(&dir.join(file))? {
                    nten::NtenArray::F32(_, data) if data.len() == b.borrow().len() => {
                        *b.borrow_mut() = data;
                    }
                    _ => problems.push(format!("{}: buffer mismatch", name)),
                },
                None => problems.push(format!("{}: not in model", name)),
            },
            other => return Err(Error::Format(format!("unknown manifest kind {:?}", other))),
        }
    }
    for (name, _) in model.named_parameters() {
        if !seen.contains(&name) {
            problems.push(format!("{}: missing from checkpoint", name));
        }
    }
    if !problems.is_empty() {
        return Err(Error::Format(format!(
            "{}: checkpoint/config mismatch: {}",
            dir.display(),
            problems.join("; ")
        )));
    }
    Ok((model, cfg))
}

// ---------------------------------------------------------------------------
// Evaluation

/// Runs inference over the records in order and scores each image against
/// its ground truth.
pub fn evaluate_model(
    model: &XNetV2Model,
    records: &[&SampleRecord],
    batch_size: usize,
    spacing: f64,
) -> Result<MetricsReport> {
    let mut report = MetricsReport::default();
    for chunk in records.chunks(batch_size.max(1)) {
        let (h, w) = (chunk[0].h, chunk[0].w);
        let mut buf = Vec::with_capacity(chunk.len() * h * w);
        for rec in chunk {
            if rec.h != h || rec.w != w {
                return Err(Error::shape("evaluate_model", "mixed image sizes"));
            }
            buf.extend_from_slice(&rec.image);
        }
        let x = crate::Tensor::from_vec(&[chunk.len(), 1, h, w], buf);
        let (_, labels) = model.infer(&x)?;
        for (i, rec) in chunk.iter().enumerate() {
            let gt = rec
                .label
                .as_ref()
                .ok_or_else(|| Error::arg("evaluate_model", format!("{}: no label", rec.id)))?;
            let pred = &labels[i * h * w..(i + 1) * h * w];
            report
                .per_image
                .push(metrics::evaluate_pair(&rec.id, pred, gt, h, w, 1, spacing)?);
        }
    }
    Ok(report)
}

pub fn metrics_csv(report: &MetricsReport) -> String {
    let fmt = |v: Option<f64>| match v {
        Some(v) => format!("{:.4}", v),
        None => "nan".to_string(),
    };
    let mut s = String::from("id,jaccard,dice,asd,hd95\n");
    let mut rows: Vec<&metrics::ImageMetrics> = report.per_image.iter().collect();
    let mean = report.aggregate();
    rows.push(&mean);
    for m in rows {
        let _ = writeln!(
            s,
            "{},{:.4},{:.4},{},{}",
            m.id,
            m.jaccard,
            m.dice,
            fmt(m.asd),
            fmt(m.hd95)
        );
    }
    s
}

// ---------------------------------------------------------------------------
// Training loop

pub struct TrainOutcome {
    pub log: TrainLog,
    pub best_val_dice: f64,
    pub best_epoch: usize,
}

/// Runs the full loop over a loaded dataset whose train records are already
/// split into labeled/unlabeled. Writes `train_log.csv` and the best
/// checkpoint (by validation Dice of the main network) under `out_dir`.
pub fn train(cfg: &TrainConfig, records: &[SampleRecord], out_dir: &Path) -> Result<TrainOutcome> {
    fs::create_dir_all(out_dir)?;
    let labeled: Vec<&SampleRecord> = records
        .iter()
        .filter(|r| r.split == Split::TrainLabeled)
        .collect();
    let unlabeled: Vec<&SampleRecord> = records
        .iter()
        .filter(|r| r.split == Split::TrainUnlabeled)
        .collect();
    let test: Vec<&SampleRecord> = records.iter().filter(|r| r.split == Split::Test).collect();
    if labeled.is_empty() {
        return Err(Error::Config("no labeled training records".into()));
    }
    if test.is_empty() {
        return Err(Error::Config("no test records for validation".into()));
    }
    let semi = cfg.mode == TrainMode::Semi && !unlabeled.is_empty();

    let model = XNetV2Model::new(cfg.model_config()?)?;
    let params = model.named_parameters();
    let mut velocity: Vec<Vec<f32>> = params.iter().map(|(_, p)| vec![0.0; p.len()]).collect();
    let settings = cfg.batch_settings();
    let loss_cfg = LossConfig {
        lambda_max: cfg.lambda_max,
        max_epoch: cfg.epochs,
        smooth_eps: 1e-5,
    };
    let steps_per_epoch = (labeled.len() / cfg.batch_size).max(1);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut rng_lab = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0xA11CE));
    let mut rng_unlab = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0xB0B));

    let mut log = TrainLog::default();
    let mut best_val_dice = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let lambda = lambda_at(epoch, &loss_cfg);
        let lab_order = data::epoch_order(cfg.seed, epoch, labeled.len());
        let unlab_order = if semi {
            data::epoch_order(cfg.seed ^ 0x5EED, epoch, unlabeled.len())
        } else {
            Vec::new()
        };
        let mut epoch_sup = 0.0f32;
        let mut epoch_unsup = 0.0f32;
        let mut epoch_total = 0.0f32;
        let mut last_lr = 0.0f32;
        for s in 0..steps_per_epoch {
            let lr = poly_lr(step, total_steps, cfg.lr0, cfg.poly_power);
            last_lr = lr;
            let lab_refs: Vec<&SampleRecord> = lab_order
                [s * cfg.batch_size..(s + 1) * cfg.batch_size.min(labeled.len())]
                .iter()
                .map(|&i| labeled[i])
                .collect();
            let lb = data::make_batch(&lab_refs, &settings, &mut rng_lab)?;
            let y = lb.y.as_ref().expect("labeled batch carries targets");
            let (pm, pl, ph) = model.forward(&lb.x_m, &lb.x_l, &lb.x_h, true)?;
            let l_sup = supervised_loss(&pm, &pl, &ph, y, loss_cfg.smooth_eps)?;

            let l_unsup = if semi {
                let take = cfg.batch_size.min(unlabeled.len());
                let base = (s * take) % unlabeled.len();
                let unlab_refs: Vec<&SampleRecord> = (0..take)
                    .map(|k| unlabeled[unlab_order[(base + k) % unlabeled.len()]])
                    .collect();
                let ub = data::make_batch(&unlab_refs, &settings, &mut rng_unlab)?;
                let (um, ul, uh) = model.forward(&ub.x_m, &ub.x_l, &ub.x_h, true)?;
                Some(unsupervised_loss(&um, &ul, &uh, loss_cfg.smooth_eps)?)
            } else {
                None
            };

            let total = total_loss(&l_sup, l_unsup.as_ref(), lambda)
                .map_err(|_| Error::NonFiniteLoss { epoch, step: s })?;
            if !total.item().is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step: s });
            }
            model.zero_grad();
            total.backward()?;
            sgd_step(&params, &mut velocity, lr, cfg.momentum);
            epoch_sup += l_sup.item();
            epoch_unsup += l_unsup.map(|u| u.item()).unwrap_or(0.0);
            epoch_total += total.item();
            step += 1;
        }

        let report = evaluate_model(&model, &test, cfg.batch_size, 1.0)?;
        let val_dice = report.aggregate().dice;
        if val_dice > best_val_dice {
            best_val_dice = val_dice;
            best_epoch = epoch;
            save_checkpoint(&model, cfg, &out_dir.join("best"))?;
        }
        log.rows.push(TrainLogRow {
            epoch,
            lr: last_lr,
            lambda,
            l_sup: epoch_sup / steps_per_epoch as f32,
            l_unsup: epoch_unsup / steps_per_epoch as f32,
            l_total: epoch_total / steps_per_epoch as f32,
            val_dice,
        });
    }
    fs::write(out_dir.join("train_log.csv"), log.to_csv())?;
    Ok(TrainOutcome {
        log,
        best_val_dice,
        best_epoch,
    })
}
