//! Bilinear resampling with half-pixel centres (`align_corners = false`).
//! Used for both up- and down-sampling.

use crate::error::{Error, Result};
use crate::tensor::{Backward, BackwardCtx, Float, Tensor, Var};

/// Per-output-index source taps along one axis: `out = w0·in[i0] + w1·in[i1]`.
#[derive(Clone, Debug)]
struct AxisTaps<T> {
    i0: Vec<usize>,
    i1: Vec<usize>,
    w0: Vec<T>,
    w1: Vec<T>,
}

impl<T: Float> AxisTaps<T> {
    fn new(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let mut taps = Self {
            i0: Vec::with_capacity(out_len),
            i1: Vec::with_capacity(out_len),
            w0: Vec::with_capacity(out_len),
            w1: Vec::with_capacity(out_len),
        };
        for o in 0..out_len {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let l1 = src - i0 as f64;
            taps.i0.push(i0);
            taps.i1.push(i1);
            taps.w0.push(T::c(1.0 - l1));
            taps.w1.push(T::c(l1));
        }
        taps
    }
}

fn check_target(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 {
        return Err(Error::invalid("resample", format!("non-positive target size {h}×{w}")));
    }
    Ok(())
}

/// Resamples every plane of an NCHW tensor to `h × w`, without recording.
pub fn resample_value<T: Float>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    check_target(h, w)?;
    let (n, c, ih, iw) = x.dims4()?;
    if (ih, iw) == (h, w) {
        return Ok(x.clone());
    }
    let ty = AxisTaps::<T>::new(ih, h);
    let tx = AxisTaps::<T>::new(iw, w);
    let mut out = Vec::with_capacity(n * c * h * w);
    for plane in x.data().chunks(ih * iw) {
        for oy in 0..h {
            let r0 = &plane[ty.i0[oy] * iw..(ty.i0[oy] + 1) * iw];
            let r1 = &plane[ty.i1[oy] * iw..(ty.i1[oy] + 1) * iw];
            let (wy0, wy1) = (ty.w0[oy], ty.w1[oy]);
            for ox in 0..w {
                let (a, b) = (tx.i0[ox], tx.i1[ox]);
                let top = tx.w0[ox] * r0[a] + tx.w1[ox] * r0[b];
                let bot = tx.w0[ox] * r1[a] + tx.w1[ox] * r1[b];
                out.push(wy0 * top + wy1 * bot);
            }
        }
    }
    Tensor::new([n, c, h, w], out)
}

struct ResampleOp;

impl<T: Float> Backward<T> for ResampleOp {
    fn name(&self) -> &'static str {
        "resample"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let x = &ctx.inputs[0];
        let [_, _, ih, iw] = *x.shape() else { unreachable!() };
        let [_, _, h, w] = *ctx.output.shape() else {
            unreachable!()
        };
        if (ih, iw) == (h, w) {
            return vec![Some(ctx.grad.clone())];
        }
        let ty = AxisTaps::<T>::new(ih, h);
        let tx = AxisTaps::<T>::new(iw, w);
        let mut dx = Tensor::<T>::zeros(x.shape().to_vec());
        for (dplane, gplane) in dx.data_mut().chunks_mut(ih * iw).zip(ctx.grad.data().chunks(h * w)) {
            for oy in 0..h {
                let (y0, y1) = (ty.i0[oy], ty.i1[oy]);
                let (wy0, wy1) = (ty.w0[oy], ty.w1[oy]);
                for ox in 0..w {
                    let g = gplane[oy * w + ox];
                    let (a, b) = (tx.i0[ox], tx.i1[ox]);
                    let (wa, wb) = (tx.w0[ox], tx.w1[ox]);
                    dplane[y0 * iw + a] = dplane[y0 * iw + a] + g * wy0 * wa;
                    dplane[y0 * iw + b] = dplane[y0 * iw + b] + g * wy0 * wb;
                    dplane[y1 * iw + a] = dplane[y1 * iw + a] + g * wy1 * wa;
                    dplane[y1 * iw + b] = dplane[y1 * iw + b] + g * wy1 * wb;
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Differentiable bilinear resampling of an NCHW tensor to `h × w`.
pub fn resample<'t, T: Float>(x: Var<'t, T>, h: usize, w: usize) -> Result<Var<'t, T>> {
    let value = resample_value(&x.value(), h, w)?;
    Ok(x.tape().push(value, &[x], ResampleOp))
}

/// Resamples `x` to the spatial size of `like`.
pub fn resample_like<'t, T: Float>(x: Var<'t, T>, like: Var<'t, T>) -> Result<Var<'t, T>> {
    let (_, _, h, w) = like.dims4()?;
    resample(x, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 4], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_at_same_size() {
        let x = t(
            [1, 2, 2, 3],
            &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0],
        );
        assert_eq!(resample_value(&x, 2, 3).unwrap(), x);
    }

    #[test]
    fn half_pixel_upsample() {
        let x = t([1, 1, 1, 2], &[0.0, 1.0]);
        let y = resample_value(&x, 1, 4).unwrap();
        assert_eq!(y.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn constants_survive() {
        let x = Tensor::full([1, 2, 5, 3], 0.7f64);
        for (h, w) in [(1, 1), (2, 9), (10, 6), (3, 3), (17, 2)] {
            let y = resample_value(&x, h, w).unwrap();
            assert!(y.data().iter().all(|v| (v - 0.7).abs() < 1e-15), "{h}×{w}");
        }
    }

    #[test]
    fn ramps_are_exact_at_integer_factors() {
        // Downsampling by 2 samples the ramp at the midpoint of each pair.
        let x = Tensor::from_fn([1, 1, 1, 8], |i| 3.0 * i as f64 + 1.0);
        let y = resample_value(&x, 1, 4).unwrap();
        for (o, v) in y.data().iter().enumerate() {
            assert!((v - (3.0 * (2.0 * o as f64 + 0.5) + 1.0)).abs() < 1e-12);
        }
        // Upsampling by 2 is exact away from the clamped borders.
        let x = Tensor::from_fn([1, 1, 4, 1], |i| 2.0 * i as f64);
        let y = resample_value(&x, 8, 1).unwrap();
        for o in 1..7 {
            let src = (o as f64 + 0.5) / 2.0 - 0.5;
            assert!((y.data()[o] - 2.0 * src).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_zero_target() {
        let x = Tensor::<f64>::zeros([1, 1, 2, 2]);
        assert!(resample_value(&x, 0, 2).is_err());
    }
}
