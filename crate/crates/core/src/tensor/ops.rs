//! Elementwise, activation and structural ops on [`Var`].

use std::rc::Rc;

use super::tape::{Backward, BackwardCtx};
use super::{Float, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElemKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl ElemKind {
    fn name(self) -> &'static str {
        match self {
            ElemKind::Add => "add",
            ElemKind::Sub => "sub",
            ElemKind::Mul => "mul",
            ElemKind::Div => "div",
        }
    }

    fn apply<T: Float>(self, a: T, b: T) -> T {
        match self {
            ElemKind::Add => a + b,
            ElemKind::Sub => a - b,
            ElemKind::Mul => a * b,
            ElemKind::Div => a / b,
        }
    }
}

/// Right-aligned broadcast of two shapes; each dimension pair must be equal
/// or contain a 1.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let dim = |s: &[usize], i: usize| {
        let off = rank - s.len();
        if i < off {
            1
        } else {
            s[i - off]
        }
    };
    (0..rank)
        .map(|i| match (dim(a, i), dim(b, i)) {
            (x, y) if x == y => Some(x),
            (1, y) => Some(y),
            (x, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// Strides into a tensor of shape `src` when iterating over `out`; broadcast
/// dimensions get stride 0.
fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let off = out.len() - src.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        if src[i] != 1 {
            strides[i + off] = acc;
        }
        acc *= src[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every element of `out`, in
/// row-major order.
fn broadcast_for_each(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    let inner = out[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let outer: usize = out[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank.saturating_sub(1)];
    let mut o = 0;
    for _ in 0..outer {
        let mut ia: usize = idx.iter().zip(sa).map(|(i, s)| i * s).sum();
        let mut ib: usize = idx.iter().zip(sb).map(|(i, s)| i * s).sum();
        for _ in 0..inner {
            f(o, ia, ib);
            o += 1;
            ia += ia_step;
            ib += ib_step;
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

struct Elementwise {
    kind: ElemKind,
}

impl<T: Float> Backward<T> for Elementwise {
    fn name(&self) -> &'static str {
        self.kind.name()
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let (a, b) = (&ctx.inputs[0], &ctx.inputs[1]);
        let g = ctx.grad.data();
        let out = ctx.output.shape();

        if a.shape() == b.shape() {
            let (ad, bd) = (a.data(), b.data());
            let mk = |f: &dyn Fn(usize) -> T| Tensor::from_fn(a.shape().to_vec(), f);
            let ga = ctx.needs_grad[0].then(|| match self.kind {
                ElemKind::Add | ElemKind::Sub => Tensor::new(a.shape().to_vec(), g.to_vec()).expect("shape"),
                ElemKind::Mul => mk(&|i| g[i] * bd[i]),
                ElemKind::Div => mk(&|i| g[i] / bd[i]),
            });
            let gb = ctx.needs_grad[1].then(|| match self.kind {
                ElemKind::Add => Tensor::new(b.shape().to_vec(), g.to_vec()).expect("shape"),
                ElemKind::Sub => mk(&|i| -g[i]),
                ElemKind::Mul => mk(&|i| g[i] * ad[i]),
                ElemKind::Div => mk(&|i| -g[i] * ad[i] / (bd[i] * bd[i])),
            });
            return vec![ga, gb];
        }

        let sa = broadcast_strides(a.shape(), out);
        let sb = broadcast_strides(b.shape(), out);
        let (ad, bd) = (a.data(), b.data());
        let mut ga = ctx.needs_grad[0].then(|| Tensor::<T>::zeros(a.shape().to_vec()));
        let mut gb = ctx.needs_grad[1].then(|| Tensor::<T>::zeros(b.shape().to_vec()));
        broadcast_for_each(out, &sa, &sb, |o, ia, ib| {
            let (da, db) = match self.kind {
                ElemKind::Add => (g[o], g[o]),
                ElemKind::Sub => (g[o], -g[o]),
                ElemKind::Mul => (g[o] * bd[ib], g[o] * ad[ia]),
                ElemKind::Div => (g[o] / bd[ib], -g[o] * ad[ia] / (bd[ib] * bd[ib])),
            };
            if let Some(ga) = ga.as_mut() {
                let d = ga.data_mut();
                d[ia] = d[ia] + da;
            }
            if let Some(gb) = gb.as_mut() {
                let d = gb.data_mut();
                d[ib] = d[ib] + db;
            }
        });
        vec![ga, gb]
    }
}

/// Forward value of a broadcasting elementwise op, without recording.
pub(crate) fn elementwise_value<T: Float>(kind: ElemKind, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        return a.zip_map(b, |x, y| kind.apply(x, y));
    }
    let out = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::shape(kind.name(), a.shape(), b.shape()))?;
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let mut data = vec![T::zero(); out.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    broadcast_for_each(&out, &sa, &sb, |o, ia, ib| data[o] = kind.apply(ad[ia], bd[ib]));
    Tensor::new(out, data)
}

struct ScalarOp<T> {
    mul: T,
}

impl<T: Float> Backward<T> for ScalarOp<T> {
    fn name(&self) -> &'static str {
        "scalar_affine"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(ctx.grad.map(|g| g * self.mul))]
    }
}

struct Reverse;

impl<T: Float> Backward<T> for Reverse {
    fn name(&self) -> &'static str {
        "reverse"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(ctx.grad.map(|g| -g))]
    }
}

struct Sigmoid;

impl<T: Float> Backward<T> for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let y = ctx.output;
        vec![Some(ctx.grad.zip_map(y, |g, y| g * y * (T::one() - y)).expect("shape"))]
    }
}

pub(crate) fn sigmoid_scalar<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

struct Relu;

impl<T: Float> Backward<T> for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn branch(&self, inputs: &[Rc<Tensor<T>>], out: &mut Vec<u64>) {
        out.extend(inputs[0].data().iter().map(|&x| u64::from(x > T::zero())));
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let x = &ctx.inputs[0];
        let g = ctx
            .grad
            .zip_map(x, |g, x| if x > T::zero() { g } else { T::zero() })
            .expect("shape");
        vec![Some(g)]
    }
}

struct Prelu;

impl<T: Float> Backward<T> for Prelu {
    fn name(&self) -> &'static str {
        "prelu"
    }

    fn branch(&self, inputs: &[Rc<Tensor<T>>], out: &mut Vec<u64>) {
        out.extend(inputs[0].data().iter().map(|&x| u64::from(x > T::zero())));
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let (x, slope) = (&ctx.inputs[0], ctx.inputs[1].item());
        let g = ctx.grad.data();
        let gx = ctx.needs_grad[0].then(|| {
            Tensor::from_fn(x.shape().to_vec(), |i| {
                if x.data()[i] > T::zero() {
                    g[i]
                } else {
                    g[i] * slope
                }
            })
        });
        let gs = ctx.needs_grad[1].then(|| {
            let s = x
                .data()
                .iter()
                .zip(g)
                .filter(|(x, _)| **x <= T::zero())
                .fold(T::zero(), |acc, (&x, &g)| acc + g * x);
            Tensor::scalar(s)
        });
        vec![gx, gs]
    }
}

struct Concat {
    axis: usize,
    sizes: Vec<usize>,
}

impl<T: Float> Backward<T> for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let out = ctx.output.shape();
        let outer: usize = out[..self.axis].iter().product();
        let inner: usize = out[self.axis + 1..].iter().product();
        let total = out[self.axis];
        let g = ctx.grad.data();
        let mut offset = 0;
        let mut grads = Vec::with_capacity(self.sizes.len());
        for (part, &size) in ctx.inputs.iter().zip(&self.sizes) {
            let mut data = Vec::with_capacity(part.numel());
            for o in 0..outer {
                let start = (o * total + offset) * inner;
                data.extend_from_slice(&g[start..start + size * inner]);
            }
            grads.push(Some(Tensor::new(part.shape().to_vec(), data).expect("shape")));
            offset += size;
        }
        grads
    }
}

struct Reduce {
    mean: bool,
}

impl<T: Float> Backward<T> for Reduce {
    fn name(&self) -> &'static str {
        if self.mean {
            "mean"
        } else {
            "sum"
        }
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let x = &ctx.inputs[0];
        let mut g = ctx.grad.item();
        if self.mean {
            g = g / T::c(x.numel() as f64);
        }
        vec![Some(Tensor::full(x.shape().to_vec(), g))]
    }
}

// Fallible, so these cannot be the `std::ops` traits.
#[allow(clippy::should_implement_trait)]
impl<'t, T: Float> Var<'t, T> {
    /// Broadcasting elementwise op. `other` may have singleton dimensions
    /// (or fewer leading dimensions) that are expanded to match.
    pub fn elementwise(self, kind: ElemKind, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let value = elementwise_value(kind, &self.value(), &other.value())?;
        Ok(self.tape.push(value, &[self, other], Elementwise { kind }))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.elementwise(ElemKind::Add, other)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.elementwise(ElemKind::Sub, other)
    }

    /// Hadamard product (with broadcasting).
    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.elementwise(ElemKind::Mul, other)
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.elementwise(ElemKind::Div, other)
    }

    pub fn add_scalar(self, s: T) -> Var<'t, T> {
        let value = self.value().map(|x| x + s);
        self.tape.push(value, &[self], ScalarOp { mul: T::one() })
    }

    pub fn mul_scalar(self, s: T) -> Var<'t, T> {
        let value = self.value().map(|x| x * s);
        self.tape.push(value, &[self], ScalarOp { mul: s })
    }

    /// `1 − x`: subtracts the input from an all-ones tensor.
    pub fn reverse(self) -> Var<'t, T> {
        let value = self.value().map(|x| T::one() - x);
        self.tape.push(value, &[self], Reverse)
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        let value = self.value().map(sigmoid_scalar);
        self.tape.push(value, &[self], Sigmoid)
    }

    pub fn relu(self) -> Var<'t, T> {
        let value = self.value().map(|x| if x > T::zero() { x } else { T::zero() });
        self.tape.push(value, &[self], Relu)
    }

    /// PReLU with a single learnable slope (a one-element tensor).
    pub fn prelu(self, slope: Var<'t, T>) -> Result<Var<'t, T>> {
        let a = slope.value();
        if !a.is_scalar() {
            return Err(Error::invalid(
                "prelu",
                format!("slope must be scalar, got {:?}", a.shape()),
            ));
        }
        let a = a.item();
        let value = self.value().map(|x| if x > T::zero() { x } else { a * x });
        Ok(self.tape.push(value, &[self, slope], Prelu))
    }

    pub fn sum(self) -> Var<'t, T> {
        let value = Tensor::scalar(self.value().sum());
        self.tape.push(value, &[self], Reduce { mean: false })
    }

    pub fn mean(self) -> Var<'t, T> {
        let value = Tensor::scalar(self.value().mean());
        self.tape.push(value, &[self], Reduce { mean: true })
    }
}

/// Concatenates tensors along `axis`; all other dimensions must agree.
pub fn concat<'t, T: Float>(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
    let first = parts.first().ok_or_else(|| Error::invalid("concat", "no parts"))?;
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let base = values[0].shape().to_vec();
    if axis >= base.len() {
        return Err(Error::invalid(
            "concat",
            format!("axis {axis} out of range for {base:?}"),
        ));
    }
    for v in &values[1..] {
        let s = v.shape();
        let compatible =
            s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
        if !compatible {
            return Err(Error::shape("concat", &base, s));
        }
    }
    let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let mut out_shape = base.clone();
    out_shape[axis] = sizes.iter().sum();
    let mut data = Vec::with_capacity(out_shape.iter().product());
    for o in 0..outer {
        for (v, &size) in values.iter().zip(&sizes) {
            let start = o * size * inner;
            data.extend_from_slice(&v.data()[start..start + size * inner]);
        }
    }
    let value = Tensor::new(out_shape, data)?;
    Ok(first.tape.push(value, parts, Concat { axis, sizes }))
}

/// Channel-axis (NCHW axis 1) concatenation.
pub fn concat_channels<'t, T: Float>(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    concat(parts, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn mul_by_hand() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        assert_eq!(a.mul(b).unwrap().value().data(), &[3.0, 8.0]);
    }

    #[test]
    fn add_zero_is_identity() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.5, -1.25, 7.0]));
        assert_eq!(x.add_scalar(0.0).value().data(), x.value().data());
        let zero = tape.constant(Tensor::scalar(0.0));
        assert_eq!(x.add(zero).unwrap().value().data(), x.value().data());
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([4]));
        let err = a.add(b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4]"), "{err}");
    }

    #[test]
    fn broadcast_over_singletons() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.constant(t(&[1, 2, 1, 1], &[10.0, 100.0]));
        assert_eq!(x.mul(w).unwrap().value().data(), &[10.0, 20.0, 300.0, 400.0]);
        assert_eq!(broadcast_shape(&[2, 1, 3], &[4, 1]), Some(vec![2, 4, 3]));
        assert_eq!(broadcast_shape(&[2, 3], &[3, 2]), None);
    }

    #[test]
    fn reverse_examples() {
        let tape = Tape::new();
        let z = tape.constant(t(&[1], &[0.0]));
        assert_eq!(z.reverse().value().item(), 1.0);
        assert_eq!(z.sigmoid().reverse().value().item(), 0.5);
        let x = tape.constant(t(&[3], &[0.1, 0.7, 0.0]));
        let twice = x.reverse().reverse().value();
        for (a, b) in twice.data().iter().zip(x.value().data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn activation_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1], &[-3.0]));
        assert_eq!(x.relu().value().item(), 0.0);
        assert_eq!(tape.constant(Tensor::scalar(0.0)).sigmoid().value().item(), 0.5);
        let slope = tape.constant(Tensor::scalar(0.25));
        let y = tape.constant(Tensor::scalar(-2.0)).prelu(slope).unwrap();
        assert_eq!(y.value().item(), -0.5);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid_scalar(-1000.0f64), 0.0);
        assert_eq!(sigmoid_scalar(1000.0f64), 1.0);
        assert!(sigmoid_scalar(-80.0f32) > 0.0);
    }

    #[test]
    fn concat_channel_sizes() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros([1, 2, 3, 3]));
        let b = tape.constant(Tensor::ones([1, 3, 3, 3]));
        let c = concat_channels(&[a, b]).unwrap();
        assert_eq!(c.shape(), vec![1, 5, 3, 3]);
        assert_eq!(concat_channels(&[a]).unwrap().value().data(), a.value().data());
        let bad = tape.constant(Tensor::zeros([1, 3, 2, 3]));
        assert!(concat_channels(&[a, bad]).is_err());
    }

    #[test]
    fn concat_backward_routes_slices() {
        let tape = Tape::new();
        let a = tape.input(Tensor::from_fn([1, 2, 2, 2], |i| i as f64));
        let b = tape.input(Tensor::from_fn([1, 2, 2, 2], |i| -(i as f64)));
        let c = concat_channels(&[a, b]).unwrap();
        let w = tape.constant(Tensor::from_fn([1, 4, 2, 2], |i| i as f64));
        let loss = c.mul(w).unwrap().sum();
        let grads = tape.backward(loss).unwrap();
        let expect_a: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let expect_b: Vec<f64> = (8..16).map(|i| i as f64).collect();
        assert_eq!(grads.get(a).unwrap().data(), expect_a.as_slice());
        assert_eq!(grads.get(b).unwrap().data(), expect_b.as_slice());
    }
}
