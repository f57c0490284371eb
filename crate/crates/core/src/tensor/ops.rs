use super::{Array, LinearMap, Tensor};
use ndarray::{Axis, Ix2, IxDyn, Slice};
use std::sync::Arc;

fn standard_vec(a: &Array) -> Vec<f64> {
    match a.as_slice() {
        Some(s) => s.to_vec(),
        None => a.iter().copied().collect(),
    }
}

fn reshape_array(a: &Array, shape: &[usize]) -> Array {
    Array::from_shape_vec(IxDyn(shape), standard_vec(a)).expect("reshape size mismatch")
}

/// Sums `g` down to `shape`, undoing numpy-style broadcasting.
pub(crate) fn sum_to(g: &Tensor, shape: &[usize]) -> Tensor {
    let gs = g.shape();
    if gs == shape {
        return g.clone();
    }
    let lead = gs.len() - shape.len();
    let mut out = g.clone();
    if lead > 0 {
        let axes: Vec<usize> = (0..lead).collect();
        out = out.sum_axes(&axes, false);
    }
    let cur = out.shape();
    let axes: Vec<usize> = (0..shape.len())
        .filter(|&i| shape[i] == 1 && cur[i] != 1)
        .collect();
    if !axes.is_empty() {
        out = out.sum_axes(&axes, true);
    }
    out
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| {
            let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
            let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
            if da == db || db == 1 {
                da
            } else if da == 1 {
                db
            } else {
                panic!("cannot broadcast {a:?} with {b:?}")
            }
        })
        .collect()
}

fn broadcast_value(a: &Array, shape: &[usize]) -> Array {
    a.broadcast(IxDyn(shape))
        .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", a.shape(), shape))
        .to_owned()
}

impl Tensor {
    // ---- elementwise binary (numpy broadcasting) ----

    pub fn add(&self, other: &Tensor) -> Tensor {
        let v = &*self.value() + &*other.value();
        Tensor::from_op(v, "add", vec![self.clone(), other.clone()], |p, _, g| {
            vec![Some(sum_to(g, &p[0].shape())), Some(sum_to(g, &p[1].shape()))]
        })
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        let v = &*self.value() - &*other.value();
        Tensor::from_op(v, "sub", vec![self.clone(), other.clone()], |p, _, g| {
            vec![Some(sum_to(g, &p[0].shape())), Some(sum_to(&g.neg(), &p[1].shape()))]
        })
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        let v = &*self.value() * &*other.value();
        Tensor::from_op(v, "mul", vec![self.clone(), other.clone()], |p, _, g| {
            let ga = if p[0].requires_grad() { Some(sum_to(&g.mul(&p[1]), &p[0].shape())) } else { None };
            let gb = if p[1].requires_grad() { Some(sum_to(&g.mul(&p[0]), &p[1].shape())) } else { None };
            vec![ga, gb]
        })
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        let v = &*self.value() / &*other.value();
        Tensor::from_op(v, "div", vec![self.clone(), other.clone()], |p, out, g| {
            let ga = if p[0].requires_grad() { Some(sum_to(&g.div(&p[1]), &p[0].shape())) } else { None };
            let gb = if p[1].requires_grad() {
                Some(sum_to(&g.mul(out).div(&p[1]).neg(), &p[1].shape()))
            } else {
                None
            };
            vec![ga, gb]
        })
    }

    // ---- scalar ----

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let v = self.value().mapv(|x| x + c);
        Tensor::from_op(v, "add_scalar", vec![self.clone()], |_, _, g| vec![Some(g.clone())])
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        let v = self.value().mapv(|x| x * c);
        Tensor::from_op(v, "mul_scalar", vec![self.clone()], move |_, _, g| vec![Some(g.mul_scalar(c))])
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    pub fn rsub_scalar(&self, c: f64) -> Tensor {
        self.neg().add_scalar(c)
    }

    // ---- elementwise unary ----

    pub fn exp(&self) -> Tensor {
        let v = self.value().mapv(f64::exp);
        Tensor::from_op(v, "exp", vec![self.clone()], |_, out, g| vec![Some(g.mul(out))])
    }

    pub fn ln(&self) -> Tensor {
        let v = self.value().mapv(f64::ln);
        Tensor::from_op(v, "ln", vec![self.clone()], |p, _, g| vec![Some(g.div(&p[0]))])
    }

    pub fn sqrt(&self) -> Tensor {
        let v = self.value().mapv(f64::sqrt);
        Tensor::from_op(v, "sqrt", vec![self.clone()], |_, out, g| vec![Some(g.div(out).mul_scalar(0.5))])
    }

    pub fn powf(&self, e: f64) -> Tensor {
        let v = self.value().mapv(|x| x.powf(e));
        Tensor::from_op(v, "powf", vec![self.clone()], move |p, _, g| {
            vec![Some(g.mul(&p[0].powf(e - 1.0)).mul_scalar(e))]
        })
    }

    pub fn square(&self) -> Tensor {
        self.mul(self)
    }

    pub fn sigmoid(&self) -> Tensor {
        let v = self.value().mapv(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        Tensor::from_op(v, "sigmoid", vec![self.clone()], |_, out, g| {
            vec![Some(g.mul(out).mul(&out.rsub_scalar(1.0)))]
        })
    }

    /// `ln(1 + exp(x))`, evaluated stably.
    pub fn softplus(&self) -> Tensor {
        let v = self.value().mapv(|x| x.max(0.0) + (-x.abs()).exp().ln_1p());
        Tensor::from_op(v, "softplus", vec![self.clone()], |p, _, g| vec![Some(g.mul(&p[0].sigmoid()))])
    }

    pub fn tanh(&self) -> Tensor {
        let v = self.value().mapv(f64::tanh);
        Tensor::from_op(v, "tanh", vec![self.clone()], |_, out, g| {
            vec![Some(g.mul(&out.square().rsub_scalar(1.0)))]
        })
    }

    pub fn relu(&self) -> Tensor {
        self.leaky_relu(0.0)
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        let v = self.value().mapv(|x| if x > 0.0 { x } else { slope * x });
        Tensor::from_op(v, "leaky_relu", vec![self.clone()], move |p, _, g| {
            let mask = p[0].value().mapv(|x| if x > 0.0 { 1.0 } else { slope });
            vec![Some(g.mul(&Tensor::constant(mask)))]
        })
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the open interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        let v = self.value().mapv(|x| x.clamp(lo, hi));
        Tensor::from_op(v, "clamp", vec![self.clone()], move |p, _, g| {
            let mask = p[0].value().mapv(|x| if x > lo && x < hi { 1.0 } else { 0.0 });
            vec![Some(g.mul(&Tensor::constant(mask)))]
        })
    }

    pub fn cos(&self) -> Tensor {
        let v = self.value().mapv(f64::cos);
        Tensor::from_op(v, "cos", vec![self.clone()], |p, _, g| vec![Some(g.mul(&p[0].sin()).neg())])
    }

    pub fn sin(&self) -> Tensor {
        let v = self.value().mapv(f64::sin);
        Tensor::from_op(v, "sin", vec![self.clone()], |p, _, g| vec![Some(g.mul(&p[0].cos()))])
    }

    /// Inverse cosine. Callers keep inputs strictly inside (-1, 1) where the
    /// derivative is finite.
    pub fn acos(&self) -> Tensor {
        let v = self.value().mapv(f64::acos);
        Tensor::from_op(v, "acos", vec![self.clone()], |p, _, g| {
            let denom = p[0].square().rsub_scalar(1.0).sqrt();
            vec![Some(g.div(&denom).neg())]
        })
    }

    // ---- reductions ----

    pub fn sum_all(&self) -> Tensor {
        let v = Array::from_elem(IxDyn(&[]), self.value().sum());
        Tensor::from_op(v, "sum_all", vec![self.clone()], |p, _, g| {
            vec![Some(g.broadcast_to(&p[0].shape()))]
        })
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Tensor {
        let in_shape = self.shape();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let mut v = self.to_array();
        for &ax in sorted.iter().rev() {
            v = v.sum_axis(Axis(ax));
        }
        let mut keep_shape = in_shape.clone();
        for &ax in &sorted {
            keep_shape[ax] = 1;
        }
        if keepdim {
            v = reshape_array(&v, &keep_shape);
        }
        Tensor::from_op(v, "sum_axes", vec![self.clone()], move |_, _, g| {
            vec![Some(g.reshape(&keep_shape).broadcast_to(&in_shape))]
        })
    }

    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Tensor {
        let shape = self.shape();
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        self.sum_axes(axes, keepdim).mul_scalar(1.0 / count.max(1) as f64)
    }

    /// Largest value along `axis` (keepdim), with no gradient.
    pub fn max_axis_detached(&self, axis: usize) -> Tensor {
        let v = self.value();
        let m = v.fold_axis(Axis(axis), f64::NEG_INFINITY, |a, b| a.max(*b));
        let mut keep = v.shape().to_vec();
        keep[axis] = 1;
        Tensor::constant(reshape_array(&m, &keep))
    }

    pub fn log_softmax(&self, axis: usize) -> Tensor {
        let shifted = self.sub(&self.max_axis_detached(axis));
        let lse = shifted.exp().sum_axes(&[axis], true).ln();
        shifted.sub(&lse)
    }

    // ---- shape ----

    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor {
        if self.shape() == shape {
            return self.clone();
        }
        let target = broadcast_shape(&self.shape(), shape);
        assert_eq!(target, shape, "broadcast_to would change target shape");
        let v = broadcast_value(&self.value(), shape);
        Tensor::from_op(v, "broadcast_to", vec![self.clone()], |p, _, g| {
            vec![Some(sum_to(g, &p[0].shape()))]
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let in_shape = self.shape();
        if in_shape == shape {
            return self.clone();
        }
        let v = reshape_array(&self.value(), shape);
        Tensor::from_op(v, "reshape", vec![self.clone()], move |_, _, g| {
            vec![Some(g.reshape(&in_shape))]
        })
    }

    pub fn flatten_from(&self, axis: usize) -> Tensor {
        let s = self.shape();
        let mut shape = s[..axis].to_vec();
        shape.push(s[axis..].iter().product());
        self.reshape(&shape)
    }

    pub fn permute(&self, perm: &[usize]) -> Tensor {
        let v = self
            .value()
            .view()
            .permuted_axes(IxDyn(perm))
            .as_standard_layout()
            .into_owned();
        let mut inv = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        Tensor::from_op(v, "permute", vec![self.clone()], move |_, _, g| vec![Some(g.permute(&inv))])
    }

    /// Swaps the two axes of a matrix.
    pub fn t(&self) -> Tensor {
        assert_eq!(self.ndim(), 2, "t() expects a matrix");
        self.permute(&[1, 0])
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let total = self.shape()[axis];
        assert!(start + len <= total, "narrow out of range");
        let v = self
            .value()
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .as_standard_layout()
            .into_owned();
        Tensor::from_op(v, "narrow", vec![self.clone()], move |_, _, g| {
            vec![Some(g.pad_axis(axis, start, total))]
        })
    }

    /// Embeds `self` at offset `start` of a zero tensor whose `axis` has length `total`.
    pub fn pad_axis(&self, axis: usize, start: usize, total: usize) -> Tensor {
        let mut shape = self.shape();
        let len = shape[axis];
        shape[axis] = total;
        let mut v = Array::zeros(IxDyn(&shape));
        v.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
            .assign(&*self.value());
        Tensor::from_op(v, "pad_axis", vec![self.clone()], move |_, _, g| {
            vec![Some(g.narrow(axis, start, len))]
        })
    }

    pub fn concat(parts: &[Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty(), "concat of nothing");
        let vals: Vec<_> = parts.iter().map(|p| p.to_array()).collect();
        let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views)
            .expect("concat shapes")
            .as_standard_layout()
            .into_owned();
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Tensor::from_op(v, "concat", parts.to_vec(), move |_, _, g| {
            let mut off = 0;
            lens.iter()
                .map(|&l| {
                    let s = g.narrow(axis, off, l);
                    off += l;
                    Some(s)
                })
                .collect()
        })
    }

    pub fn stack(parts: &[Tensor], axis: usize) -> Tensor {
        let expanded: Vec<Tensor> = parts
            .iter()
            .map(|p| {
                let mut s = p.shape();
                s.insert(axis, 1);
                p.reshape(&s)
            })
            .collect();
        Tensor::concat(&expanded, axis)
    }

    // ---- linear algebra ----

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let v = {
            let a = self.value();
            let b = other.value();
            let a2 = a.view().into_dimensionality::<Ix2>().expect("matmul lhs must be 2-d");
            let b2 = b.view().into_dimensionality::<Ix2>().expect("matmul rhs must be 2-d");
            a2.dot(&b2).into_dyn()
        };
        Tensor::from_op(v, "matmul", vec![self.clone(), other.clone()], |p, _, g| {
            let ga = if p[0].requires_grad() { Some(g.matmul(&p[1].t())) } else { None };
            let gb = if p[1].requires_grad() { Some(p[0].t().matmul(g)) } else { None };
            vec![ga, gb]
        })
    }

    /// Applies a per-sample sparse linear operator (see [`LinearMap`]).
    pub fn linear_map(&self, map: &Arc<LinearMap>, out_sample_shape: &[usize]) -> Tensor {
        let in_sample_shape = self.shape()[1..].to_vec();
        let v = map.apply(&self.value(), out_sample_shape);
        let map = Arc::clone(map);
        Tensor::from_op(v, "linear_map", vec![self.clone()], move |_, _, g| {
            vec![Some(g.linear_map(&map.adjoint(), &in_sample_shape))]
        })
    }
}
