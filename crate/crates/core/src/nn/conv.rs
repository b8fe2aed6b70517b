//! 2-D cross-correlation via im2col + GEMM.

use crate::error::{Error, Result};
use crate::parallel::map_batch;
use crate::tensor::{gemm, Backward, BackwardCtx, Float, MatRef, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let [_, cin, h, w] = *x else {
            return Err(Error::invalid("conv2d", format!("input must be NCHW, got {x:?}")));
        };
        let [cout, wcin, kh, kw] = *weight else {
            return Err(Error::invalid("conv2d", format!("weight must be 4-D, got {weight:?}")));
        };
        if wcin != cin {
            return Err(Error::shape("conv2d", x, weight));
        }
        if kh != kw {
            return Err(Error::invalid("conv2d", format!("non-square kernel {kh}×{kw}")));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        let out = |len: usize| -> Result<usize> {
            let padded = len + 2 * pad;
            if padded < kh {
                return Err(Error::invalid(
                    "conv2d",
                    format!("degenerate output: input {len} with padding {pad} smaller than kernel {kh}"),
                ));
            }
            Ok((padded - kh) / stride + 1)
        };
        Ok(Self {
            cin,
            h,
            w,
            cout,
            k: kh,
            stride,
            pad,
            ho: out(h)?,
            wo: out(w)?,
        })
    }

    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one `C×H×W` image into a `(C·k·k) × (Ho·Wo)` matrix.
fn im2col<T: Float>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let plane = g.out_plane();
    let mut cols = vec![T::zero(); g.patch() * plane];
    for c in 0..g.cin {
        let src = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.wo + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates columns back into a `C×H×W` image.
fn col2im<T: Float>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.cin {
        let dst = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            let d = &mut dst_row[ix as usize];
                            *d = *d + src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Float>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, ConvGeom)> {
    let g = ConvGeom::new(x.shape(), weight.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return Err(Error::shape("conv2d bias", b.shape(), &[g.cout]));
        }
    }
    let n = x.shape()[0];
    let in_sz = g.cin * g.h * g.w;
    let plane = g.out_plane();
    let wm = MatRef::new(weight.data(), g.cout, g.patch());
    let outs = map_batch(n, |i| {
        let xi = &x.data()[i * in_sz..(i + 1) * in_sz];
        let mut out = vec![T::zero(); g.cout * plane];
        if let Some(b) = bias {
            for (row, &bv) in out.chunks_mut(plane).zip(b.data()) {
                row.fill(bv);
            }
        }
        if g.is_pointwise() {
            gemm(wm, MatRef::new(xi, g.patch(), plane), T::one(), &mut out);
        } else {
            let cols = im2col(xi, &g);
            gemm(wm, MatRef::new(&cols, g.patch(), plane), T::one(), &mut out);
        }
        out
    });
    let data = outs.concat();
    Ok((Tensor::new([n, g.cout, g.ho, g.wo], data)?, g))
}

struct Conv2dOp {
    geom: ConvGeom,
}

impl<T: Float> Backward<T> for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let g = &self.geom;
        let (x, weight): (&Tensor<T>, &Tensor<T>) = (&ctx.inputs[0], &ctx.inputs[1]);
        let has_bias = ctx.inputs.len() == 3;
        let n = x.shape()[0];
        let in_sz = g.cin * g.h * g.w;
        let plane = g.out_plane();
        let out_sz = g.cout * plane;
        let need_x = ctx.needs_grad[0];
        let need_w = ctx.needs_grad[1];
        let dy = ctx.grad.data();

        let parts = map_batch(n, |i| {
            let dyi = MatRef::new(&dy[i * out_sz..(i + 1) * out_sz], g.cout, plane);
            let xi = &x.data()[i * in_sz..(i + 1) * in_sz];
            let dw = need_w.then(|| {
                let mut dw = vec![T::zero(); g.cout * g.patch()];
                if g.is_pointwise() {
                    gemm(dyi, MatRef::t(xi, plane, g.patch()), T::zero(), &mut dw);
                } else {
                    let cols = im2col(xi, g);
                    gemm(dyi, MatRef::t(&cols, plane, g.patch()), T::zero(), &mut dw);
                }
                dw
            });
            let dx = need_x.then(|| {
                let wt = MatRef::t(weight.data(), g.patch(), g.cout);
                if g.is_pointwise() {
                    let mut dx = vec![T::zero(); in_sz];
                    gemm(wt, dyi, T::zero(), &mut dx);
                    dx
                } else {
                    let mut dcols = vec![T::zero(); g.patch() * plane];
                    gemm(wt, dyi, T::zero(), &mut dcols);
                    let mut dx = vec![T::zero(); in_sz];
                    col2im(&dcols, g, &mut dx);
                    dx
                }
            });
            (dw, dx)
        });

        // Fixed-order reduction over the batch keeps results deterministic.
        let mut dw_total = need_w.then(|| vec![T::zero(); g.cout * g.patch()]);
        let mut dx_total = need_x.then(|| Vec::with_capacity(n * in_sz));
        for (dw, dx) in parts {
            if let (Some(acc), Some(dw)) = (dw_total.as_mut(), dw) {
                for (a, v) in acc.iter_mut().zip(dw) {
                    *a = *a + v;
                }
            }
            if let (Some(acc), Some(dx)) = (dx_total.as_mut(), dx) {
                acc.extend(dx);
            }
        }
        let mut grads = vec![
            dx_total.map(|d| Tensor::new(x.shape().to_vec(), d).expect("dx shape")),
            dw_total.map(|d| Tensor::new(weight.shape().to_vec(), d).expect("dw shape")),
        ];
        if has_bias {
            let db = ctx.needs_grad[2].then(|| {
                let mut db = vec![T::zero(); g.cout];
                for i in 0..n {
                    for (co, acc) in db.iter_mut().enumerate() {
                        let row = &dy[i * out_sz + co * plane..i * out_sz + (co + 1) * plane];
                        *acc = row.iter().fold(*acc, |s, &v| s + v);
                    }
                }
                Tensor::new([g.cout], db).expect("db shape")
            });
            grads.push(db);
        }
        grads
    }
}

/// Cross-correlation of an NCHW input with a `[Cout, Cin, k, k]` kernel,
/// plus an optional per-channel bias.
pub fn conv2d<'t, T: Float>(
    x: Var<'t, T>,
    weight: Var<'t, T>,
    bias: Option<Var<'t, T>>,
    stride: usize,
    padding: usize,
) -> Result<Var<'t, T>> {
    let bias_val = bias.map(|b| b.value());
    let (value, geom) = conv2d_forward(&x.value(), &weight.value(), bias_val.as_deref(), stride, padding)?;
    let op = Conv2dOp { geom };
    Ok(match bias {
        Some(b) => x.tape().push(value, &[x, weight, b], op),
        None => x.tape().push(value, &[x, weight], op),
    })
}
