//! Central finite-difference gradient checking.
//!
//! The check only evaluates the forward path of the closure, so it stays
//! independent of the backward rules it validates.

use rand::Rng;

use super::Tensor;

/// Uniform values in [-1, 1].
pub fn rand_vec(rng: &mut impl Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
}

/// Uniform values in [-1, 1] resampled so that none lies within `margin` of
/// zero (for kinked ops like relu/max).
pub fn rand_vec_away_from_zero(rng: &mut impl Rng, n: usize, margin: f32) -> Vec<f32> {
    (0..n)
        .map(|_| loop {
            let v = rng.gen_range(-1.0f32..1.0);
            if v.abs() >= margin {
                break v;
            }
        })
        .collect()
}

/// Compares the analytic gradient of `f()` (a scalar-valued forward pass over
/// the given leaves) against central finite differences.
///
/// Returns the worst relative error over all leaves, where each leaf's error
/// is `||analytic - fd||_inf / (||analytic||_inf + ||fd||_inf + 1e-8)`.
pub fn gradcheck_scalar(leaves: &[Tensor], f: impl Fn() -> Tensor) -> f32 {
    let h = 1e-2f32;
    for l in leaves {
        l.zero_grad();
    }
    let loss = f();
    loss.backward().expect("gradcheck loss must be scalar");
    let analytic: Vec<Vec<f32>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.len()]))
        .collect();

    let mut worst = 0.0f32;
    for (li, leaf) in leaves.iter().enumerate() {
        let n = leaf.len();
        let mut fd = vec![0.0f32; n];
        for i in 0..n {
            let orig = leaf.data()[i];
            set_elem(leaf, i, orig + h);
            let fp = f().item();
            set_elem(leaf, i, orig - h);
            let fm = f().item();
            set_elem(leaf, i, orig);
            fd[i] = (fp - fm) / (2.0 * h);
        }
        let num = analytic[li]
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        let den = inf_norm(&analytic[li]) + inf_norm(&fd) + 1e-8;
        worst = worst.max(num / den);
    }
    worst
}

fn inf_norm(v: &[f32]) -> f32 {
    v.iter().map(|x| x.abs()).fold(0.0, f32::max)
}

fn set_elem(t: &Tensor, i: usize, v: f32) {
    t.update_data(|x, idx| {
        if idx == i {
            *x = v;
        }
    });
}
