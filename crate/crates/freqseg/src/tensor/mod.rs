//! Minimal N-d tensor engine with reverse-mode automatic differentiation.
//!
//! Tensors are f32, row-major, define-by-run: every operation records its
//! parents and a backward rule on the output tensor, so the graph is rebuilt
//! on each forward pass and freed when the outputs are dropped. Calling
//! [`Tensor::backward`] on a scalar populates `grad` on every reachable
//! tensor that was created with `requires_grad`.

mod conv;
pub mod gradcheck;

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{Error, Result};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub(crate) trait Backward {
    fn backward(&self, grad: &[f32], parents: &[Tensor]);
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f32>>,
    grad: RefCell<Option<Vec<f32>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward_fn: Option<Box<dyn Backward>>,
}

#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn new_inner(
        shape: Vec<usize>,
        data: Vec<f32>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward_fn: Option<Box<dyn Backward>>,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents,
                backward_fn,
            }),
        }
    }

    /// Constant leaf (no gradient).
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor::new_inner(shape.to_vec(), data, false, Vec::new(), None)
    }

    /// Trainable leaf; `backward` will populate its `grad`.
    pub fn param(shape: &[usize], data: Vec<f32>) -> Tensor {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor::new_inner(shape.to_vec(), data, true, Vec::new(), None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_vec(shape, vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: f32) -> Tensor {
        Tensor::from_vec(shape, vec![value; shape.iter().product()])
    }

    pub fn scalar(value: f32) -> Tensor {
        Tensor::from_vec(&[1], vec![value])
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f32>,
        parents: Vec<Tensor>,
        backward_fn: impl Backward + 'static,
    ) -> Tensor {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if requires_grad {
            Tensor::new_inner(shape, data, true, parents, Some(Box::new(backward_fn)))
        } else {
            // No differentiable ancestry: plain leaf, graph not recorded.
            Tensor::new_inner(shape, data, false, Vec::new(), None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> Ref<'_, Vec<f32>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.inner.data.borrow().clone()
    }

    pub fn item(&self) -> f32 {
        assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.inner.data.borrow()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Leaf tensors only: overwrite the payload in place (optimizer updates).
    pub fn set_data(&self, data: &[f32]) {
        assert_eq!(data.len(), self.len());
        self.inner.data.borrow_mut().copy_from_slice(data);
    }

    /// Apply `f(value, index)` to the payload in place.
    pub fn update_data(&self, f: impl FnMut(&mut f32, usize)) {
        let mut d = self.inner.data.borrow_mut();
        let mut f = f;
        for (i, v) in d.iter_mut().enumerate() {
            f(v, i);
        }
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[f32]) {
        if !self.inner.requires_grad {
            return;
        }
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, &v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Detached copy of this tensor's values: a constant leaf.
    pub fn detach(&self) -> Tensor {
        Tensor::from_vec(&self.inner.shape, self.to_vec())
    }

    /// Reverse-mode sweep from a scalar loss. Populates `grad` on every
    /// `requires_grad` leaf reachable from `self`; repeated calls accumulate.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::arg(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.inner.shape),
            ));
        }
        if !self.inner.requires_grad {
            return Ok(());
        }
        // Reverse topological order: every consumer precedes its parents.
        let order = self.topo_order();
        self.accumulate_grad(&[1.0]);
        for node in order.iter().rev() {
            let Some(f) = node.inner.backward_fn.as_deref() else {
                continue;
            };
            let grad = {
                let slot = node.inner.grad.borrow();
                match slot.as_ref() {
                    Some(g) => g.clone(),
                    None => continue,
                }
            };
            f.backward(&grad, &node.inner.parents);
            // Interior grads are transient; only leaves keep theirs so that
            // repeated backward calls accumulate exactly once per call.
            *node.inner.grad.borrow_mut() = None;
        }
        Ok(())
    }

    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        // Iterative post-order DFS; second stack entry marks "children done".
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.inner.id) {
                continue;
            }
            stack.push((node.clone(), true));
            for p in &node.inner.parents {
                if p.inner.requires_grad && !visited.contains(&p.inner.id) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }

    fn check_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.inner.shape != other.inner.shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.inner.shape, other.inner.shape),
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "add")?;
        let data: Vec<f32> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a + b)
            .collect();
        struct AddBack;
        impl Backward for AddBack {
            fn backward(&self, grad: &[f32], parents: &[Tensor]) {
                parents[0].accumulate_grad(grad);
                parents[1].accumulate_grad(grad);
            }
        }
        Ok(Tensor::from_op(
            self.inner.shape.clone(),
            data,
            vec![self.clone(), other.clone()],
            AddBack,
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "sub")?;
        let data: Vec<f32> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a - b)
            .collect();
        struct SubBack;
        impl Backward for SubBack {
            fn backward(&self, grad: &[f32], parents: &[Tensor]) {
                parents[0].accumulate_grad(grad);
                let neg: Vec<f32> = grad.iter().map(|g| -g).collect();
                parents[1].accumulate_grad(&neg);
            }
        }
        Ok(Tensor::from_op(
            self.inner.shape.clone(),
            data,
            vec![self.clone(), other.clone()],
            SubBack,
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "mul")?;
        let data: Vec<f32> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a * b)
            .collect();
        struct MulBack;
        impl Backward for MulBack {
            fn backward(&self, grad: &[f32], parents: &[Tensor]) {
                let a = parents[0].data();
                let b = parents[1].data();
                let ga: Vec<f32> = grad.iter().zip(b.iter()).map(|(g, v)| g * v).collect();
                let gb: Vec<f32> = grad.iter().zip(a.iter()).map(|(g, v)| g * v).collect();
                drop(a);
                drop(b);
                parents[0].accumulate_grad(&ga);
                parents[1].accumulate_grad(&gb);
            }
        }
        Ok(Tensor::from_op(
            self.inner.shape.clone(),
            data,
            vec![self.clone(), other.clone()],
            MulBack,
        ))
    }

    pub fn scale(&self, c: f32) -> Tensor {
        let data: Vec<f32> = self.data().iter().map(|v| v * c).collect();
        struct ScaleBack(f32);
        impl Backward for ScaleBack {
            fn backward(&self, grad: &[f32], parents: &[Tensor]) {
                let g: Vec<f32> = grad.iter().map(|v| v * self.0).collect();
                parents[0].accumulate_grad(&g);
            }
        }
        Tensor::from_op(
            self.inner.shape.clone(),
            data,
            vec![self.clone()],
            ScaleBack(c),
        )
    }

    pub fn relu(&self) -> Tensor {
        let data: Vec<f32> = self.data().iter().map(|v| v.max(0.0)).collect();
        struct ReluBack;
        impl Backward for ReluBack {
            fn backward(&self, grad: &[f32], parents: &[Tensor]) {
                let x = parents[0].data();
                let g: Vec<f32> = grad
                    .iter()
                    .zip(x.iter())
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                drop(x);
                parents[0].accumulate_grad(&g);
            }
        }
        Tensor::from_op(self.inner.shape.clone(), data, vec![self.clone()], ReluBack)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.inner.shape, shape),
            ));
        }
        struct ReshapeBack;
        impl Backward for ReshapeBack {
            fn backward(&self, grad: &[f32], parents: &[Tensor]) {
                parents[0].accumulate_grad(grad);
            }
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            ReshapeBack,
        ))
    }

    pub fn sum(&self) -> Tensor {
        let s: f32 = self.data().iter().sum();
        struct SumBack;
        impl Backward for SumBack {
            fn backward(&self, grad: &[f32], parents: &[Tensor]) {
                let g = vec![grad[0]; parents[0].len()];
                parents[0].accumulate_grad(&g);
            }
        }
        Tensor::from_op(vec![1], vec![s], vec![self.clone()], SumBack)
    }

    pub fn mean(&self) -> Tensor {
        let n = self.len() as f32;
        let s: f32 = self.data().iter().sum();
        struct MeanBack(f32);
        impl Backward for MeanBack {
            fn backward(&self, grad: &[f32], parents: &[Tensor]) {
                let g = vec![grad[0] / self.0; parents[0].len()];
                parents[0].accumulate_grad(&g);
            }
        }
        Tensor::from_op(vec![1], vec![s / n], vec![self.clone()], MeanBack(n))
    }

    /// Channel concatenation of two NCHW tensors.
    pub fn concat_channels(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (&self.inner.shape, &other.inner.shape);
        if sa.len() != 4 || sb.len() != 4 {
            return Err(Error::shape("concat_channels", "inputs must be NCHW"));
        }
        if sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
            return Err(Error::shape(
                "concat_channels",
                format!("non-channel dims differ: {:?} vs {:?}", sa, sb),
            ));
        }
        let (n, ca, cb, h, w) = (sa[0], sa[1], sb[1], sa[2], sa[3]);
        let plane = h * w;
        let mut data = Vec::with_capacity(n * (ca + cb) * plane);
        {
            let a = self.data();
            let b = other.data();
            for i in 0..n {
                data.extend_from_slice(&a[i * ca * plane..(i + 1) * ca * plane]);
                data.extend_from_slice(&b[i * cb * plane..(i + 1) * cb * plane]);
            }
        }
        struct ConcatBack {
            ca: usize,
            cb: usize,
            plane: usize,
        }
        impl Backward for ConcatBack {
            fn backward(&self, grad: &[f32], parents: &[Tensor]) {
                let n = parents[0].shape()[0];
                let (ca, cb, plane) = (self.ca, self.cb, self.plane);
                let stride = (ca + cb) * plane;
                let mut ga = Vec::with_capacity(n * ca * plane);
                let mut gb = Vec::with_capacity(n * cb * plane);
                for i in 0..n {
                    let row = &grad[i * stride..(i + 1) * stride];
                    ga.extend_from_slice(&row[..ca * plane]);
                    gb.extend_from_slice(&row[ca * plane..]);
                }
                parents[0].accumulate_grad(&ga);
                parents[1].accumulate_grad(&gb);
            }
        }
        Ok(Tensor::from_op(
            vec![n, ca + cb, h, w],
            data,
            vec![self.clone(), other.clone()],
            ConcatBack { ca, cb, plane },
        ))
    }

    /// Per-pixel softmax over the channel axis of an NCHW tensor,
    /// max-subtracted for stability.
    pub fn softmax_channels(&self) -> Result<Tensor> {
        let s = &self.inner.shape;
        if s.len() != 4 {
            return Err(Error::shape("softmax_channels", "input must be NCHW"));
        }
        if s[1] < 2 {
            return Err(Error::arg(
                "softmax_channels",
                format!("need at least 2 channels, got {}", s[1]),
            ));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let plane = h * w;
        let x = self.data();
        let mut out = vec![0.0f32; x.len()];
        for i in 0..n {
            let base = i * c * plane;
            for p in 0..plane {
                let mut m = f32::NEG_INFINITY;
                for ch in 0..c {
                    m = m.max(x[base + ch * plane + p]);
                }
                let mut z = 0.0f32;
                for ch in 0..c {
                    let e = (x[base + ch * plane + p] - m).exp();
                    out[base + ch * plane + p] = e;
                    z += e;
                }
                for ch in 0..c {
                    out[base + ch * plane + p] /= z;
                }
            }
        }
        drop(x);
        struct SoftmaxBack {
            y: Vec<f32>,
            c: usize,
            plane: usize,
        }
        impl Backward for SoftmaxBack {
            fn backward(&self, grad: &[f32], parents: &[Tensor]) {
                let n = parents[0].shape()[0];
                let (c, plane) = (self.c, self.plane);
                let mut gx = vec![0.0f32; grad.len()];
                for i in 0..n {
                    let base = i * c * plane;
                    for p in 0..plane {
                        let mut dot = 0.0f32;
                        for ch in 0..c {
                            let k = base + ch * plane + p;
                            dot += grad[k] * self.y[k];
                        }
                        for ch in 0..c {
                            let k = base + ch * plane + p;
                            gx[k] = self.y[k] * (grad[k] - dot);
                        }
                    }
                }
                parents[0].accumulate_grad(&gx);
            }
        }
        let y = out.clone();
        Ok(Tensor::from_op(
            s.clone(),
            out,
            vec![self.clone()],
            SoftmaxBack { y, c, plane },
        ))
    }

    /// Per-channel batch normalization over an NCHW tensor.
    ///
    /// In training mode the batch statistics normalize the input and the
    /// running stats are updated in place with the given momentum
    /// (`running = (1 - momentum) * running + momentum * batch`); in eval
    /// mode the running stats are used as constants.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        running_mean: &Rc<RefCell<Vec<f32>>>,
        running_var: &Rc<RefCell<Vec<f32>>>,
        training: bool,
        momentum: f32,
        eps: f32,
    ) -> Result<Tensor> {
        let s = &self.inner.shape;
        if s.len() != 4 {
            return Err(Error::shape("batchnorm2d", "input must be NCHW"));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if gamma.len() != c || beta.len() != c {
            return Err(Error::shape(
                "batchnorm2d",
                format!("gamma/beta length must equal channels {}", c),
            ));
        }
        let plane = h * w;
        let m = (n * plane) as f32;
        let x = self.data();

        let (mean, var) = if training {
            let mut mean = vec![0.0f32; c];
            let mut var = vec![0.0f32; c];
            for ch in 0..c {
                let mut s1 = 0.0f64;
                for i in 0..n {
                    let base = (i * c + ch) * plane;
                    for p in 0..plane {
                        s1 += x[base + p] as f64;
                    }
                }
                let mu = (s1 / m as f64) as f32;
                let mut s2 = 0.0f64;
                for i in 0..n {
                    let base = (i * c + ch) * plane;
                    for p in 0..plane {
                        let d = x[base + p] - mu;
                        s2 += (d * d) as f64;
                    }
                }
                mean[ch] = mu;
                var[ch] = (s2 / m as f64) as f32;
            }
            {
                let mut rm = running_mean.borrow_mut();
                let mut rv = running_var.borrow_mut();
                let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                for ch in 0..c {
                    rm[ch] = (1.0 - momentum) * rm[ch] + momentum * mean[ch];
                    rv[ch] = (1.0 - momentum) * rv[ch] + momentum * var[ch] * unbias;
                }
            }
            (mean, var)
        } else {
            (running_mean.borrow().clone(), running_var.borrow().clone())
        };

        let g = gamma.data();
        let b = beta.data();
        let mut out = vec![0.0f32; x.len()];
        let mut xhat = vec![0.0f32; x.len()];
        let invstd: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * plane;
                let (mu, is, gc, bc) = (mean[ch], invstd[ch], g[ch], b[ch]);
                for p in 0..plane {
                    let xh = (x[base + p] - mu) * is;
                    xhat[base + p] = xh;
                    out[base + p] = gc * xh + bc;
                }
            }
        }
        drop(x);
        drop(g);
        drop(b);

        struct BnBack {
            xhat: Vec<f32>,
            invstd: Vec<f32>,
            training: bool,
            c: usize,
            plane: usize,
        }
        impl Backward for BnBack {
            fn backward(&self, grad: &[f32], parents: &[Tensor]) {
                let n = parents[0].shape()[0];
                let (c, plane) = (self.c, self.plane);
                let m = (n * plane) as f32;
                let gamma = parents[1].data();
                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                let mut gx = vec![0.0f32; grad.len()];
                for ch in 0..c {
                    let mut sg = 0.0f64;
                    let mut sgx = 0.0f64;
                    for i in 0..n {
                        let base = (i * c + ch) * plane;
                        for p in 0..plane {
                            let gv = grad[base + p];
                            sg += gv as f64;
                            sgx += (gv * self.xhat[base + p]) as f64;
                        }
                    }
                    dbeta[ch] = sg as f32;
                    dgamma[ch] = sgx as f32;
                    let gc = gamma[ch];
                    let is = self.invstd[ch];
                    if self.training {
                        let mean_g = sg as f32 / m;
                        let mean_gx = sgx as f32 / m;
                        for i in 0..n {
                            let base = (i * c + ch) * plane;
                            for p in 0..plane {
                                let k = base + p;
                                gx[k] = gc * is * (grad[k] - mean_g - self.xhat[k] * mean_gx);
                            }
                        }
                    } else {
                        for i in 0..n {
                            let base = (i * c + ch) * plane;
                            for p in 0..plane {
                                gx[base + p] = grad[base + p] * gc * is;
                            }
                        }
                    }
                }
                drop(gamma);
                parents[0].accumulate_grad(&gx);
                parents[1].accumulate_grad(&dgamma);
                parents[2].accumulate_grad(&dbeta);
            }
        }
        Ok(Tensor::from_op(
            s.clone(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            BnBack {
                xhat,
                invstd,
                training,
                c,
                plane,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{gradcheck_scalar, rand_vec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn backward_sum_gives_ones() {
        let x = Tensor::param(&[4], vec![1.0, 2.0, 3.0, 4.0]);
        let loss = x.sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn backward_sum_of_squares() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]);
        let loss = x.mul(&x).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]);
        let y = x.relu();
        assert!(y.backward().is_err());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::param(&[3], vec![1.0, 2.0, 3.0]);
        let loss = x.sum();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0; 3]);
    }

    #[test]
    fn unreachable_leaf_gets_no_grad() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]);
        let y = Tensor::param(&[2], vec![3.0, 4.0]);
        let loss = x.sum();
        loss.backward().unwrap();
        assert!(x.grad().is_some());
        assert!(y.grad().is_none());
    }

    #[test]
    fn diamond_graph_accumulates_once_per_path() {
        // loss = sum(x + x) => dloss/dx = 2
        let x = Tensor::param(&[2], vec![1.0, -1.0]);
        let loss = x.add(&x).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let t = Tensor::from_vec(&[1, 2, 1, 1], vec![0.3, 0.3]);
        let y = t.softmax_channels().unwrap();
        let d = y.to_vec();
        assert!((d[0] - 0.5).abs() < 1e-6 && (d[1] - 0.5).abs() < 1e-6);

        let t = Tensor::from_vec(&[1, 2, 1, 1], vec![0.0, 1000.0]);
        let d = t.softmax_channels().unwrap().to_vec();
        assert!(d.iter().all(|v| v.is_finite()));
        assert!((d[0] - 0.0).abs() < 1e-6 && (d[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn concat_shapes_and_identity() {
        let a = Tensor::zeros(&[2, 2, 4, 4]);
        let b = Tensor::zeros(&[2, 3, 4, 4]);
        assert_eq!(a.concat_channels(&b).unwrap().shape(), &[2, 5, 4, 4]);

        let x = Tensor::from_vec(&[1, 2, 2, 2], (0..8).map(|v| v as f32).collect());
        let empty = Tensor::zeros(&[1, 0, 2, 2]);
        let y = x.concat_channels(&empty).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());

        let bad = Tensor::zeros(&[2, 3, 5, 4]);
        assert!(a.concat_channels(&bad).is_err());
    }

    #[test]
    fn gradcheck_elementwise_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::param(&[6], rand_vec(&mut rng, 6));
        let y = Tensor::param(&[6], rand_vec(&mut rng, 6));
        let err = gradcheck_scalar(&[x.clone(), y.clone()], || {
            x.mul(&y).unwrap().add(&x).unwrap().mean()
        });
        assert!(err < 1e-3, "rel err {}", err);
    }

    #[test]
    fn gradcheck_batchnorm_train() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::param(&[2, 3, 2, 2], rand_vec(&mut rng, 24));
        let gamma = Tensor::param(&[3], vec![1.0, 0.8, 1.2]);
        let beta = Tensor::param(&[3], vec![0.0, 0.1, -0.1]);
        let rm = Rc::new(RefCell::new(vec![0.0; 3]));
        let rv = Rc::new(RefCell::new(vec![1.0; 3]));
        let proj = rand_vec(&mut rng, 24);
        let p = Tensor::from_vec(&[2, 3, 2, 2], proj);
        let err = gradcheck_scalar(&[x.clone(), gamma.clone(), beta.clone()], || {
            x.batchnorm2d(&gamma, &beta, &rm, &rv, true, 0.1, 1e-5)
                .unwrap()
                .mul(&p)
                .unwrap()
                .sum()
        });
        assert!(err < 1e-3, "rel err {}", err);
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let x = Tensor::from_vec(&[1, 1, 1, 2], vec![2.0, 4.0]);
        let gamma = Tensor::param(&[1], vec![1.0]);
        let beta = Tensor::param(&[1], vec![0.0]);
        let rm = Rc::new(RefCell::new(vec![3.0]));
        let rv = Rc::new(RefCell::new(vec![4.0]));
        let y = x
            .batchnorm2d(&gamma, &beta, &rm, &rv, false, 0.1, 0.0)
            .unwrap();
        let d = y.to_vec();
        assert!((d[0] + 0.5).abs() < 1e-6 && (d[1] - 0.5).abs() < 1e-6);
    }
}
