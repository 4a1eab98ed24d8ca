use std::rc::Rc;

use super::array::{
    broadcast_shape, broadcast_strides, for_each_broadcast, resolve_axis, split_at_axis, strides_of, sum_to_shape,
};
use super::{Tensor, TensorError, Var};

/// Binary elementwise operations supporting trailing-dimension broadcasting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        }
    }

    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Ln,
    Sqrt,
    Square,
    Relu,
    Sigmoid,
}

impl UnaryOp {
    fn apply(self, x: f64) -> f64 {
        match self {
            UnaryOp::Neg => -x,
            UnaryOp::Exp => x.exp(),
            UnaryOp::Ln => x.ln(),
            UnaryOp::Sqrt => x.sqrt(),
            UnaryOp::Square => x * x,
            UnaryOp::Relu => x.max(0.0),
            UnaryOp::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryOp::Neg => -1.0,
            UnaryOp::Exp => y,
            UnaryOp::Ln => 1.0 / x,
            UnaryOp::Sqrt => 0.5 / y,
            UnaryOp::Square => 2.0 * x,
            UnaryOp::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryOp::Sigmoid => y * (1.0 - y),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Max,
    Mean,
}

fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut out = shape.to_vec();
    if keepdim {
        out[axis] = 1;
    } else {
        out.remove(axis);
        if out.is_empty() {
            out.push(1);
        }
    }
    out
}

impl<'t> Var<'t> {
    pub fn elementwise(self, op: BinaryOp, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        let a = self.value();
        let b = other.value();
        let out_shape = broadcast_shape(op.name(), a.shape(), b.shape())?;
        let sa = broadcast_strides(a.shape(), &out_shape);
        let sb = broadcast_strides(b.shape(), &out_shape);
        let mut out = Tensor::zeros(&out_shape);
        {
            let (ad, bd) = (a.data(), b.data());
            let od = out.data_mut();
            for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| od[o] = op.apply(ad[ia], bd[ib]));
        }
        let backward = Box::new(move |g: &Tensor, needs: &[bool]| {
            let (ad, bd, gd) = (a.data(), b.data(), g.data());
            let grad_a = needs[0].then(|| match op {
                BinaryOp::Add | BinaryOp::Sub => sum_to_shape(g, a.shape()),
                BinaryOp::Mul | BinaryOp::Div => {
                    let mut ga = Tensor::zeros(a.shape());
                    let gad = ga.data_mut();
                    for_each_broadcast(g.shape(), &sa, &sb, |o, ia, ib| {
                        gad[ia] += if op == BinaryOp::Mul {
                            gd[o] * bd[ib]
                        } else {
                            gd[o] / bd[ib]
                        }
                    });
                    ga
                }
            });
            let grad_b = needs[1].then(|| match op {
                BinaryOp::Add => sum_to_shape(g, b.shape()),
                BinaryOp::Sub => sum_to_shape(g, b.shape()).map(|x| -x),
                BinaryOp::Mul | BinaryOp::Div => {
                    let mut gb = Tensor::zeros(b.shape());
                    let gbd = gb.data_mut();
                    for_each_broadcast(g.shape(), &sa, &sb, |o, ia, ib| {
                        gbd[ib] += if op == BinaryOp::Mul {
                            gd[o] * ad[ia]
                        } else {
                            -gd[o] * ad[ia] / (bd[ib] * bd[ib])
                        }
                    });
                    gb
                }
            });
            vec![grad_a, grad_b]
        });
        Ok(self.tape().record(&[self, other], out, backward))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.elementwise(BinaryOp::Add, other)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.elementwise(BinaryOp::Sub, other)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.elementwise(BinaryOp::Mul, other)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.elementwise(BinaryOp::Div, other)
    }

    pub fn unary(self, op: UnaryOp) -> Var<'t> {
        let x = self.value();
        let y = Rc::new(x.map(|v| op.apply(v)));
        let out = (*y).clone();
        let backward = Box::new(move |g: &Tensor, _: &[bool]| {
            let mut gx = g.clone();
            gx.data_mut()
                .iter_mut()
                .zip(x.data().iter().zip(y.data()))
                .for_each(|(gv, (&xv, &yv))| *gv *= op.derivative(xv, yv));
            vec![Some(gx)]
        });
        self.tape().record(&[self], out, backward)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(UnaryOp::Neg)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(UnaryOp::Exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(UnaryOp::Ln)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(UnaryOp::Sqrt)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(UnaryOp::Square)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(UnaryOp::Relu)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(UnaryOp::Sigmoid)
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        let out = self.value().map(|v| v * factor);
        let backward = Box::new(move |g: &Tensor, _: &[bool]| vec![Some(g.map(|v| v * factor))]);
        self.tape().record(&[self], out, backward)
    }

    pub fn add_scalar(self, offset: f64) -> Var<'t> {
        let out = self.value().map(|v| v + offset);
        let backward = Box::new(|g: &Tensor, _: &[bool]| vec![Some(g.clone())]);
        self.tape().record(&[self], out, backward)
    }

    /// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]`; the
    /// leading batch dimensions broadcast.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        let a = self.value();
        let b = other.value();
        let (ash, bsh) = (a.shape(), b.shape());
        if ash.len() < 2 || bsh.len() < 2 || ash[ash.len() - 1] != bsh[bsh.len() - 2] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ash.to_vec(),
                rhs: bsh.to_vec(),
            });
        }
        let (m, k, n) = (ash[ash.len() - 2], ash[ash.len() - 1], bsh[bsh.len() - 1]);
        let batch_a = &ash[..ash.len() - 2];
        let batch_b = &bsh[..bsh.len() - 2];
        let batch = broadcast_shape("matmul", batch_a, batch_b).map_err(|_| TensorError::ShapeMismatch {
            op: "matmul",
            lhs: ash.to_vec(),
            rhs: bsh.to_vec(),
        })?;
        let batch_iter = if batch.is_empty() { vec![1] } else { batch.clone() };
        let sa = broadcast_strides(batch_a, &batch_iter);
        let sb = broadcast_strides(batch_b, &batch_iter);
        let mut out_shape = batch.clone();
        out_shape.extend([m, n]);
        let mut out = Tensor::zeros(&out_shape);
        {
            let (ad, bd) = (a.data(), b.data());
            let od = out.data_mut();
            for_each_broadcast(&batch_iter, &sa, &sb, |o, ia, ib| {
                gemm(
                    m,
                    k,
                    n,
                    (&ad[ia * m * k..], k as isize, 1),
                    (&bd[ib * k * n..], n as isize, 1),
                    0.0,
                    (&mut od[o * m * n..], n as isize),
                );
            });
        }
        let backward = Box::new(move |g: &Tensor, needs: &[bool]| {
            let (ad, bd, gd) = (a.data(), b.data(), g.data());
            let grad_a = needs[0].then(|| {
                let mut ga = Tensor::zeros(a.shape());
                let gad = ga.data_mut();
                for_each_broadcast(&batch_iter, &sa, &sb, |o, ia, ib| {
                    gemm(
                        m,
                        n,
                        k,
                        (&gd[o * m * n..], n as isize, 1),
                        (&bd[ib * k * n..], 1, n as isize),
                        1.0,
                        (&mut gad[ia * m * k..], k as isize),
                    );
                });
                ga
            });
            let grad_b = needs[1].then(|| {
                let mut gb = Tensor::zeros(b.shape());
                let gbd = gb.data_mut();
                for_each_broadcast(&batch_iter, &sa, &sb, |o, ia, ib| {
                    gemm(
                        k,
                        m,
                        n,
                        (&ad[ia * m * k..], 1, k as isize),
                        (&gd[o * m * n..], n as isize, 1),
                        1.0,
                        (&mut gbd[ib * k * n..], n as isize),
                    );
                });
                gb
            });
            vec![grad_a, grad_b]
        });
        Ok(self.tape().record(&[self, other], out, backward))
    }

    /// Reduction along one axis. `Max` routes the gradient to the first
    /// maximal element.
    pub fn reduce(self, op: ReduceOp, axis: isize, keepdim: bool) -> Result<Var<'t>, TensorError> {
        let x = self.value();
        let axis = resolve_axis("reduce", axis, x.shape())?;
        let (outer, n, inner) = split_at_axis(x.shape(), axis);
        let out_shape = reduced_shape(x.shape(), axis, keepdim);
        let mut out = Tensor::zeros(&out_shape);
        let mut argmax = Vec::new();
        {
            let xd = x.data();
            let od = out.data_mut();
            match op {
                ReduceOp::Sum | ReduceOp::Mean => {
                    for o in 0..outer {
                        for k in 0..n {
                            let src = &xd[(o * n + k) * inner..(o * n + k + 1) * inner];
                            od[o * inner..(o + 1) * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, s)| *d += s);
                        }
                    }
                    if op == ReduceOp::Mean {
                        od.iter_mut().for_each(|v| *v /= n as f64);
                    }
                }
                ReduceOp::Max => {
                    argmax = vec![0usize; outer * inner];
                    for o in 0..outer {
                        for i in 0..inner {
                            let mut best = 0;
                            for k in 1..n {
                                if xd[(o * n + k) * inner + i] > xd[(o * n + best) * inner + i] {
                                    best = k;
                                }
                            }
                            argmax[o * inner + i] = best;
                            od[o * inner + i] = xd[(o * n + best) * inner + i];
                        }
                    }
                }
            }
        }
        let in_shape = x.shape().to_vec();
        let backward = Box::new(move |g: &Tensor, _: &[bool]| {
            let gd = g.data();
            let mut gx = Tensor::zeros(&in_shape);
            let gxd = gx.data_mut();
            match op {
                ReduceOp::Sum | ReduceOp::Mean => {
                    let f = if op == ReduceOp::Mean { 1.0 / n as f64 } else { 1.0 };
                    for o in 0..outer {
                        for k in 0..n {
                            gxd[(o * n + k) * inner..(o * n + k + 1) * inner]
                                .iter_mut()
                                .zip(&gd[o * inner..(o + 1) * inner])
                                .for_each(|(d, s)| *d = s * f);
                        }
                    }
                }
                ReduceOp::Max => {
                    for o in 0..outer {
                        for i in 0..inner {
                            gxd[(o * n + argmax[o * inner + i]) * inner + i] = gd[o * inner + i];
                        }
                    }
                }
            }
            vec![Some(gx)]
        });
        Ok(self.tape().record(&[self], out, backward))
    }

    pub fn sum(self, axis: isize, keepdim: bool) -> Result<Var<'t>, TensorError> {
        self.reduce(ReduceOp::Sum, axis, keepdim)
    }

    pub fn mean(self, axis: isize, keepdim: bool) -> Result<Var<'t>, TensorError> {
        self.reduce(ReduceOp::Mean, axis, keepdim)
    }

    pub fn max(self, axis: isize, keepdim: bool) -> Result<Var<'t>, TensorError> {
        self.reduce(ReduceOp::Max, axis, keepdim)
    }

    /// Sum of every element, as a one-element tensor.
    pub fn sum_all(self) -> Var<'t> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let out = Tensor::scalar(x.sum());
        let backward = Box::new(move |g: &Tensor, _: &[bool]| vec![Some(Tensor::full(&in_shape, g.item()))]);
        self.tape().record(&[self], out, backward)
    }

    pub fn mean_all(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(self, axis: isize) -> Result<Var<'t>, TensorError> {
        let x = self.value();
        if !x.all_finite() {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let axis = resolve_axis("softmax", axis, x.shape())?;
        let (outer, n, inner) = split_at_axis(x.shape(), axis);
        let mut y = Tensor::zeros(x.shape());
        {
            let xd = x.data();
            let yd = y.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let peak = (0..n).map(|k| xd[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for k in 0..n {
                        let e = (xd[at(k)] - peak).exp();
                        yd[at(k)] = e;
                        total += e;
                    }
                    for k in 0..n {
                        yd[at(k)] /= total;
                    }
                }
            }
        }
        let y = Rc::new(y);
        let saved = y.clone();
        let backward = Box::new(move |g: &Tensor, _: &[bool]| {
            let (yd, gd) = (saved.data(), g.data());
            let mut gx = Tensor::zeros(saved.shape());
            let gxd = gx.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let dot: f64 = (0..n).map(|k| gd[at(k)] * yd[at(k)]).sum();
                    for k in 0..n {
                        gxd[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        });
        Ok(self.tape().record(&[self], (*y).clone(), backward))
    }

    /// Euclidean norm along `axis`. The gradient at a zero vector is taken
    /// as zero.
    pub fn l2_norm(self, axis: isize, keepdim: bool) -> Result<Var<'t>, TensorError> {
        let x = self.value();
        let axis = resolve_axis("l2_norm", axis, x.shape())?;
        let (outer, n, inner) = split_at_axis(x.shape(), axis);
        let mut norms = vec![0.0; outer * inner];
        {
            let xd = x.data();
            for o in 0..outer {
                for k in 0..n {
                    for i in 0..inner {
                        let v = xd[(o * n + k) * inner + i];
                        norms[o * inner + i] += v * v;
                    }
                }
            }
            norms.iter_mut().for_each(|v| *v = v.sqrt());
        }
        let out = Tensor::new(&reduced_shape(x.shape(), axis, keepdim), norms.clone())?;
        let backward = Box::new(move |g: &Tensor, _: &[bool]| {
            let (xd, gd) = (x.data(), g.data());
            let mut gx = Tensor::zeros(x.shape());
            let gxd = gx.data_mut();
            for o in 0..outer {
                for k in 0..n {
                    for i in 0..inner {
                        let nrm = norms[o * inner + i];
                        if nrm > 0.0 {
                            let at = (o * n + k) * inner + i;
                            gxd[at] = gd[o * inner + i] * xd[at] / nrm;
                        }
                    }
                }
            }
            vec![Some(gx)]
        });
        Ok(self.tape().record(&[self], out, backward))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>, TensorError> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let out = (*x).clone().reshaped(shape)?;
        let backward = Box::new(move |g: &Tensor, _: &[bool]| {
            vec![Some(g.clone().reshaped(&in_shape).expect("reshape back"))]
        });
        Ok(self.tape().record(&[self], out, backward))
    }

    /// Reorders axes: output axis `k` is input axis `axes[k]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>, TensorError> {
        let x = self.value();
        let rank = x.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::InvalidPermutation {
                axes: axes.to_vec(),
                shape: x.shape().to_vec(),
            });
        }
        let in_strides = strides_of(x.shape());
        let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let zeros = vec![0; rank];
        let mut out = Tensor::zeros(&out_shape);
        {
            let xd = x.data();
            let od = out.data_mut();
            for_each_broadcast(&out_shape, &src_strides, &zeros, |o, i, _| od[o] = xd[i]);
        }
        let in_shape = x.shape().to_vec();
        let backward = Box::new(move |g: &Tensor, _: &[bool]| {
            let mut gx = Tensor::zeros(&in_shape);
            let gxd = gx.data_mut();
            let gd = g.data();
            for_each_broadcast(&out_shape, &src_strides, &zeros, |o, i, _| gxd[i] = gd[o]);
            vec![Some(gx)]
        });
        Ok(self.tape().record(&[self], out, backward))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: isize, start: usize, len: usize) -> Result<Var<'t>, TensorError> {
        let x = self.value();
        let axis = resolve_axis("narrow", axis, x.shape())?;
        let (outer, n, inner) = split_at_axis(x.shape(), axis);
        if len == 0 || start + len > n {
            return Err(TensorError::OutOfRange {
                op: "narrow",
                start,
                len,
                extent: n,
            });
        }
        let mut out_shape = x.shape().to_vec();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&x.data()[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let out = Tensor::new(&out_shape, data)?;
        let in_shape = x.shape().to_vec();
        let backward = Box::new(move |g: &Tensor, _: &[bool]| {
            let mut gx = Tensor::zeros(&in_shape);
            let gxd = gx.data_mut();
            for o in 0..outer {
                gxd[(o * n + start) * inner..(o * n + start + len) * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        });
        Ok(self.tape().record(&[self], out, backward))
    }
}

/// Row-major GEMM on slices described as `(data, row_stride, col_stride)`:
/// `c = beta * c + a (m x k) * b (k x n)`.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], isize, isize),
    b: (&[f64], isize, isize),
    beta: f64,
    c: (&mut [f64], isize),
) {
    let span = |rows: usize, cols: usize, rs: isize, cs: isize| (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1;
    assert!(a.0.len() >= span(m, k, a.1, a.2), "gemm: lhs slice too short");
    assert!(b.0.len() >= span(k, n, b.1, b.2), "gemm: rhs slice too short");
    assert!(c.0.len() >= span(m, n, c.1, 1), "gemm: output slice too short");
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.0.as_mut_ptr(),
            c.1,
            1,
        );
    }
}
