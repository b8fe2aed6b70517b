use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Backward, BackwardCtx, Float, Tensor, Var};

/// Gradient routed through recorded argmax positions (flat input indices).
struct ArgmaxRoute {
    name: &'static str,
    argmax: Vec<usize>,
}

impl<T: Float> Backward<T> for ArgmaxRoute {
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let mut dx = Tensor::<T>::zeros(ctx.inputs[0].shape().to_vec());
        let d = dx.data_mut();
        for (&src, &g) in self.argmax.iter().zip(ctx.grad.data()) {
            d[src] = d[src] + g;
        }
        vec![Some(dx)]
    }

    fn branch(&self, _inputs: &[Rc<Tensor<T>>], out: &mut Vec<u64>) {
        out.extend(self.argmax.iter().map(|&i| i as u64));
    }
}

/// 2×2 max-pooling with stride 2. Odd trailing rows/columns are dropped.
pub fn max_pool2<'t, T: Float>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let xv = x.value();
    let (n, c, h, w) = xv.dims4()?;
    let (ho, wo) = (h / 2, w / 2);
    if ho == 0 || wo == 0 {
        return Err(Error::invalid("max_pool2", format!("input {h}×{w} too small")));
    }
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    let data = xv.data();
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    let value = Tensor::new([n, c, ho, wo], out)?;
    Ok(x.tape().push(
        value,
        &[x],
        ArgmaxRoute {
            name: "max_pool2",
            argmax,
        },
    ))
}

struct GlobalAvgPool;

impl<T: Float> Backward<T> for GlobalAvgPool {
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let x = &ctx.inputs[0];
        let [_, _, h, w] = *x.shape() else { unreachable!() };
        let scale = T::one() / T::c((h * w) as f64);
        let mut dx = Vec::with_capacity(x.numel());
        for &g in ctx.grad.data() {
            dx.extend(std::iter::repeat_n(g * scale, h * w));
        }
        vec![Some(Tensor::new(x.shape().to_vec(), dx).expect("shape"))]
    }
}

/// Per-channel spatial mean: `N×C×H×W → N×C×1×1`.
pub fn global_avg_pool<'t, T: Float>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let xv = x.value();
    let (n, c, h, w) = xv.dims4()?;
    let denom = T::c((h * w) as f64);
    let data = xv
        .data()
        .chunks(h * w)
        .map(|plane| plane.iter().fold(T::zero(), |s, &v| s + v) / denom)
        .collect();
    let value = Tensor::new([n, c, 1, 1], data)?;
    Ok(x.tape().push(value, &[x], GlobalAvgPool))
}

struct ChannelMean;

impl<T: Float> Backward<T> for ChannelMean {
    fn name(&self) -> &'static str {
        "channel_mean"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let x = &ctx.inputs[0];
        let [n, c, h, w] = *x.shape() else { unreachable!() };
        let scale = T::one() / T::c(c as f64);
        let g = ctx.grad.data();
        let mut dx = Vec::with_capacity(x.numel());
        for i in 0..n {
            let gi = &g[i * h * w..(i + 1) * h * w];
            for _ in 0..c {
                dx.extend(gi.iter().map(|&v| v * scale));
            }
        }
        vec![Some(Tensor::new(x.shape().to_vec(), dx).expect("shape"))]
    }
}

/// Mean over the channel axis: `N×C×H×W → N×1×H×W`.
pub fn channel_mean<'t, T: Float>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let xv = x.value();
    let (n, c, h, w) = xv.dims4()?;
    let denom = T::c(c as f64);
    let plane = h * w;
    let mut out = vec![T::zero(); n * plane];
    for i in 0..n {
        let dst = &mut out[i * plane..(i + 1) * plane];
        for ch in 0..c {
            let src = &xv.data()[(i * c + ch) * plane..(i * c + ch + 1) * plane];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = *d + s;
            }
        }
        for d in dst.iter_mut() {
            *d = *d / denom;
        }
    }
    let value = Tensor::new([n, 1, h, w], out)?;
    Ok(x.tape().push(value, &[x], ChannelMean))
}

/// Max over the channel axis: `N×C×H×W → N×1×H×W`. Ties go to the lowest
/// channel index.
pub fn channel_max<'t, T: Float>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let xv = x.value();
    let (n, c, h, w) = xv.dims4()?;
    let plane = h * w;
    let data = xv.data();
    let mut out = Vec::with_capacity(n * plane);
    let mut argmax = Vec::with_capacity(n * plane);
    for i in 0..n {
        for p in 0..plane {
            let mut best = i * c * plane + p;
            for ch in 1..c {
                let idx = (i * c + ch) * plane + p;
                if data[idx] > data[best] {
                    best = idx;
                }
            }
            out.push(data[best]);
            argmax.push(best);
        }
    }
    let value = Tensor::new([n, 1, h, w], out)?;
    Ok(x.tape().push(
        value,
        &[x],
        ArgmaxRoute {
            name: "channel_max",
            argmax,
        },
    ))
}
