//! Dice loss, supervised loss, triple-output consistency loss and the
//! linear lambda ramp.

use crate::error::{Error, Result};
use crate::tensor::{Backward, Tensor};

#[derive(Debug, Clone)]
pub struct LossConfig {
    pub lambda_max: f32,
    pub max_epoch: usize,
    pub smooth_eps: f32,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_max: 3.0,
            max_epoch: 100,
            smooth_eps: 1e-5,
        }
    }
}

/// Soft dice loss: `1 - mean over batch and classes of
/// (2*sum(p*y) + eps) / (sum(p) + sum(y) + eps)`, sums over the spatial
/// extent. Differentiable in `p`; `y` is treated as a constant.
pub fn dice_loss(p: &Tensor, y: &Tensor, smooth_eps: f32) -> Result<Tensor> {
    if p.shape() != y.shape() {
        return Err(Error::shape(
            "dice_loss",
            format!("{:?} vs {:?}", p.shape(), y.shape()),
        ));
    }
    let s = p.shape();
    if s.len() != 4 {
        return Err(Error::shape("dice_loss", "inputs must be NCHW"));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let plane = h * w;
    let pd = p.data();
    let yd = y.data();
    let mut inter = vec![0.0f32; n * c];
    let mut tot = vec![0.0f32; n * c];
    for nc in 0..n * c {
        let base = nc * plane;
        let mut i2 = 0.0f64;
        let mut t = 0.0f64;
        for k in 0..plane {
            let (pv, yv) = (pd[base + k], yd[base + k]);
            i2 += (pv * yv) as f64;
            t += (pv + yv) as f64;
        }
        inter[nc] = i2 as f32;
        tot[nc] = t as f32;
    }
    drop(pd);
    drop(yd);
    let mut dice_sum = 0.0f64;
    for nc in 0..n * c {
        dice_sum += ((2.0 * inter[nc] + smooth_eps) / (tot[nc] + smooth_eps)) as f64;
    }
    let loss = 1.0 - (dice_sum / (n * c) as f64) as f32;

    struct DiceBack {
        inter: Vec<f32>,
        tot: Vec<f32>,
        eps: f32,
        plane: usize,
    }
    impl Backward for DiceBack {
        fn backward(&self, grad: &[f32], parents: &[Tensor]) {
            let p = &parents[0];
            if !p.requires_grad() {
                return;
            }
            let y = parents[1].data();
            let nc = self.inter.len();
            let scale = grad[0] / nc as f32;
            let mut gp = vec![0.0f32; nc * self.plane];
            for i in 0..nc {
                let denom = self.tot[i] + self.eps;
                let num = 2.0 * self.inter[i] + self.eps;
                let base = i * self.plane;
                // d dice_i / d p_k = (2*y_k*denom - num) / denom^2
                for k in 0..self.plane {
                    let d = (2.0 * y[base + k] * denom - num) / (denom * denom);
                    gp[base + k] = -scale * d;
                }
            }
            drop(y);
            p.accumulate_grad(&gp);
        }
    }
    Ok(Tensor::from_op(
        vec![1],
        vec![loss],
        vec![p.clone(), y.clone()],
        DiceBack {
            inter,
            tot,
            eps: smooth_eps,
            plane,
        },
    ))
}

/// Per-pixel argmax one-hot of a probability map. The result is a constant
/// leaf: no gradient flows through pseudo-labels. Ties break toward the
/// lower channel index.
pub fn pseudo_label(p: &Tensor) -> Result<Tensor> {
    let s = p.shape();
    if s.len() != 4 {
        return Err(Error::shape("pseudo_label", "input must be NCHW"));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let plane = h * w;
    let pd = p.data();
    let mut out = vec![0.0f32; pd.len()];
    for i in 0..n {
        let base = i * c * plane;
        for k in 0..plane {
            let mut best = 0usize;
            let mut bv = pd[base + k];
            for ch in 1..c {
                let v = pd[base + ch * plane + k];
                if v > bv {
                    bv = v;
                    best = ch;
                }
            }
            out[base + best * plane + k] = 1.0;
        }
    }
    drop(pd);
    Ok(Tensor::from_vec(s, out))
}

/// Eq-style supervised term: sum of the three branch dice losses against the
/// ground truth.
pub fn supervised_loss(
    p_m: &Tensor,
    p_l: &Tensor,
    p_h: &Tensor,
    y: &Tensor,
    smooth_eps: f32,
) -> Result<Tensor> {
    let a = dice_loss(p_m, y, smooth_eps)?;
    let b = dice_loss(p_l, y, smooth_eps)?;
    let c = dice_loss(p_h, y, smooth_eps)?;
    a.add(&b)?.add(&c)
}

/// Cross-pseudo-supervision consistency: dice between each of the M<->L and
/// M<->H pairs and the other branch's hard pseudo-label. There is no direct
/// L-H term.
pub fn unsupervised_loss(
    p_m: &Tensor,
    p_l: &Tensor,
    p_h: &Tensor,
    smooth_eps: f32,
) -> Result<Tensor> {
    let hat_m = pseudo_label(p_m)?;
    let hat_l = pseudo_label(p_l)?;
    let hat_h = pseudo_label(p_h)?;
    let ml = dice_loss(p_m, &hat_l, smooth_eps)?;
    let lm = dice_loss(p_l, &hat_m, smooth_eps)?;
    let mh = dice_loss(p_m, &hat_h, smooth_eps)?;
    let hm = dice_loss(p_h, &hat_m, smooth_eps)?;
    ml.add(&lm)?.add(&mh)?.add(&hm)
}

/// Linear consistency-weight ramp `lambda_max * epoch / max_epoch`. Epochs
/// outside `[0, max_epoch]` clamp with a warning on stderr.
pub fn lambda_at(epoch: usize, cfg: &LossConfig) -> f32 {
    let e = if epoch > cfg.max_epoch {
        eprintln!(
            "warning: epoch {} beyond max_epoch {}, clamping lambda",
            epoch, cfg.max_epoch
        );
        cfg.max_epoch
    } else {
        epoch
    };
    if cfg.max_epoch == 0 {
        return cfg.lambda_max;
    }
    cfg.lambda_max * e as f32 / cfg.max_epoch as f32
}

/// Total objective `sup + lambda * unsup`.
pub fn total_loss(sup: &Tensor, unsup: Option<&Tensor>, lambda: f32) -> Result<Tensor> {
    let total = match unsup {
        Some(u) => sup.add(&u.scale(lambda))?,
        None => sup.clone(),
    };
    if !total.item().is_finite() {
        return Err(Error::arg("total_loss", "non-finite loss value"));
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::gradcheck_scalar;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn softmax_of(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let logits: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        Tensor::from_vec(shape, logits)
            .softmax_channels()
            .unwrap()
            .detach()
    }

    fn one_hot_of(p: &Tensor) -> Tensor {
        pseudo_label(p).unwrap()
    }

    #[test]
    fn perfect_prediction_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = one_hot_of(&softmax_of(&mut rng, &[2, 2, 4, 4]));
        let loss = dice_loss(&y, &y, 1e-5).unwrap();
        assert!(loss.item() < 1e-4);
    }

    #[test]
    fn uniform_half_hand_value() {
        // 2x2 image, one foreground pixel, p = 0.5 everywhere:
        // fg dice 1/3, bg dice 3/5, loss = 1 - (1/3+3/5)/2
        let p = Tensor::from_vec(&[1, 2, 2, 2], vec![0.5; 8]);
        let y = Tensor::from_vec(
            &[1, 2, 2, 2],
            vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0],
        );
        let loss = dice_loss(&p, &y, 0.0).unwrap();
        let expect = 1.0 - (1.0 / 3.0 + 3.0 / 5.0) / 2.0;
        assert!((loss.item() - expect).abs() < 1e-6, "{}", loss.item());
    }

    #[test]
    fn gradcheck_dice() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = Tensor::param(
            &[1, 2, 3, 3],
            (0..18).map(|_| rng.gen_range(0.05f32..0.95)).collect(),
        );
        let y = one_hot_of(&softmax_of(&mut rng, &[1, 2, 3, 3]));
        let err = gradcheck_scalar(&[p.clone()], || dice_loss(&p, &y, 1e-5).unwrap());
        assert!(err < 1e-3, "rel err {}", err);
    }

    #[test]
    fn pseudo_label_rules() {
        let p = Tensor::from_vec(&[1, 2, 1, 1], vec![0.9, 0.1]);
        assert_eq!(pseudo_label(&p).unwrap().to_vec(), vec![1.0, 0.0]);
        let p = Tensor::from_vec(&[1, 2, 1, 1], vec![0.5, 0.5]);
        assert_eq!(pseudo_label(&p).unwrap().to_vec(), vec![1.0, 0.0]);
    }

    #[test]
    fn pseudo_label_scale_invariance() {
        let logits = Tensor::from_vec(&[1, 2, 1, 2], vec![0.2, -0.4, 0.1, 0.5]);
        let a = pseudo_label(&logits.softmax_channels().unwrap()).unwrap();
        let b = pseudo_label(&logits.scale(3.0).softmax_channels().unwrap()).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn pseudo_label_blocks_gradient() {
        let logits = Tensor::param(&[1, 2, 2, 2], vec![0.3; 8]);
        let p = logits.softmax_channels().unwrap();
        let hat = pseudo_label(&p).unwrap();
        assert!(!hat.requires_grad());
        // dice against the pseudo-label reaches the prediction but not the label
        let loss = dice_loss(&p, &hat, 1e-5).unwrap();
        loss.backward().unwrap();
        assert!(logits.grad().is_some());
        assert!(hat.grad().is_none());
    }

    #[test]
    fn supervised_is_sum_of_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pm = softmax_of(&mut rng, &[1, 2, 4, 4]);
        let pl = softmax_of(&mut rng, &[1, 2, 4, 4]);
        let ph = softmax_of(&mut rng, &[1, 2, 4, 4]);
        let y = one_hot_of(&softmax_of(&mut rng, &[1, 2, 4, 4]));
        let total = supervised_loss(&pm, &pl, &ph, &y, 1e-5).unwrap().item();
        let sum = dice_loss(&pm, &y, 1e-5).unwrap().item()
            + dice_loss(&pl, &y, 1e-5).unwrap().item()
            + dice_loss(&ph, &y, 1e-5).unwrap().item();
        assert!((total - sum).abs() < 1e-6);

        let zero = supervised_loss(&y, &y, &y, &y, 1e-5).unwrap().item();
        assert!(zero < 1e-4);
    }

    #[test]
    fn unsupervised_term_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pm = softmax_of(&mut rng, &[1, 2, 4, 4]);
        let pl = softmax_of(&mut rng, &[1, 2, 4, 4]);
        let ph = softmax_of(&mut rng, &[1, 2, 4, 4]);

        // value equals the four dice terms computed independently
        let got = unsupervised_loss(&pm, &pl, &ph, 1e-5).unwrap().item();
        let want = dice_loss(&pm, &pseudo_label(&pl).unwrap(), 1e-5)
            .unwrap()
            .item()
            + dice_loss(&pl, &pseudo_label(&pm).unwrap(), 1e-5)
                .unwrap()
                .item()
            + dice_loss(&pm, &pseudo_label(&ph).unwrap(), 1e-5)
                .unwrap()
                .item()
            + dice_loss(&ph, &pseudo_label(&pm).unwrap(), 1e-5)
                .unwrap()
                .item();
        assert!((got - want).abs() < 1e-6);

        // consensus one-hot maps give zero
        let hat = pseudo_label(&pm).unwrap();
        let zero = unsupervised_loss(&hat, &hat, &hat, 1e-5).unwrap().item();
        assert!(zero < 1e-4);

        // perturbing p_H leaves the M<->L pair terms unchanged
        let ml_pair = |ph: &Tensor| {
            dice_loss(&pm, &pseudo_label(&pl).unwrap(), 1e-5)
                .unwrap()
                .item()
                + dice_loss(&pl, &pseudo_label(&pm).unwrap(), 1e-5)
                    .unwrap()
                    .item()
                + 0.0 * ph.to_vec()[0]
        };
        let ph2 = softmax_of(&mut rng, &[1, 2, 4, 4]);
        assert!((ml_pair(&ph) - ml_pair(&ph2)).abs() < 1e-9);
    }

    #[test]
    fn lambda_ramp() {
        let cfg = LossConfig {
            lambda_max: 5.0,
            max_epoch: 100,
            smooth_eps: 1e-5,
        };
        assert_eq!(lambda_at(0, &cfg), 0.0);
        assert_eq!(lambda_at(100, &cfg), 5.0);
        assert!((lambda_at(50, &cfg) - 2.5).abs() < 1e-7);
        // nondecreasing
        let mut last = -1.0;
        for e in 0..=100 {
            let l = lambda_at(e, &cfg);
            assert!(l >= last);
            last = l;
        }
    }

    #[test]
    fn total_loss_arithmetic() {
        let sup = Tensor::scalar(0.2);
        let unsup = Tensor::scalar(0.4);
        assert!((total_loss(&sup, Some(&unsup), 2.5).unwrap().item() - 1.2).abs() < 1e-6);
        assert_eq!(total_loss(&sup, Some(&unsup), 0.0).unwrap().item(), 0.2);
        assert_eq!(total_loss(&sup, None, 3.0).unwrap().item(), 0.2);
        let nan = Tensor::scalar(f32::NAN);
        assert!(total_loss(&nan, None, 0.0).is_err());
    }

    #[test]
    fn dice_monotone_towards_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p0 = softmax_of(&mut rng, &[1, 2, 4, 4]);
        let y = one_hot_of(&softmax_of(&mut rng, &[1, 2, 4, 4]));
        let mut last = f32::INFINITY;
        for t in [0.0f32, 0.25, 0.5, 0.75, 1.0] {
            let p: Vec<f32> = p0
                .to_vec()
                .iter()
                .zip(y.to_vec())
                .map(|(a, b)| (1.0 - t) * a + t * b)
                .collect();
            let p = Tensor::from_vec(p0.shape(), p);
            let l = dice_loss(&p, &y, 1e-5).unwrap().item();
            assert!(l <= last + 1e-6);
            last = l;
        }
    }
}
