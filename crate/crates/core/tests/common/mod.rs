//! Independent reference implementations used as test oracles. Each is a
//! plain loop over the definition, sharing no code with the library.

#![allow(dead_code)]

use caai_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// Convolution.

/// Input value with zero padding outside the map.
fn padded(x: &Tensor<f64>, n: usize, c: usize, y: isize, xx: isize) -> f64 {
    let s = x.shape();
    if y < 0 || xx < 0 || y >= s[2] as isize || xx >= s[3] as isize {
        0.0
    } else {
        x.at4(n, c, y as usize, xx as usize)
    }
}

pub fn conv_out_size(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

/// Direct six-loop cross-correlation.
pub fn conv_direct(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let (ho, wo) = (conv_out_size(h, k, stride, pad), conv_out_size(wd, k, stride, pad));
    let mut out = vec![0.0; n * cout * ho * wo];
    for i in 0..n {
        for o in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[o];
                    for c in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let y = (oy * stride + ky) as isize - pad as isize;
                                let xx = (ox * stride + kx) as isize - pad as isize;
                                acc += w.at4(o, c, ky, kx) * padded(x, i, c, y, xx);
                            }
                        }
                    }
                    out[((i * cout + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, cout, ho, wo], out).unwrap()
}

/// Gradients of `Σ conv(x, w, b) ⊙ g` with respect to `x`, `w` and `b`, by
/// the same loop nest.
pub fn conv_direct_grads(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    g: &Tensor<f64>,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let (ho, wo) = (g.shape()[2], g.shape()[3]);
    let mut dx = vec![0.0; x.numel()];
    let mut dw = vec![0.0; w.numel()];
    let mut db = vec![0.0; cout];
    for i in 0..n {
        for o in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let up = g.at4(i, o, oy, ox);
                    db[o] += up;
                    for c in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let y = (oy * stride + ky) as isize - pad as isize;
                                let xx = (ox * stride + kx) as isize - pad as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                let (y, xx) = (y as usize, xx as usize);
                                dw[((o * cin + c) * k + ky) * k + kx] += up * x.at4(i, c, y, xx);
                                dx[((i * cin + c) * h + y) * wd + xx] += up * w.at4(o, c, ky, kx);
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

// Metrics, on row-major `rows × cols` grids.

#[derive(Clone, Debug)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub v: Vec<f64>,
}

impl Grid {
    fn get(&self, r: usize, c: usize) -> f64 {
        self.v[r * self.cols + c]
    }
}

pub fn mae_oracle(p: &Grid, g: &Grid) -> f64 {
    let mut s = 0.0;
    for i in 0..p.v.len() {
        s += (p.v[i] - g.v[i]).abs();
    }
    s / p.v.len() as f64
}

/// Loops over all 255 thresholds and all pixels. `None` for empty ground
/// truth.
pub fn max_f_oracle(p: &Grid, g: &Grid) -> Option<f64> {
    let positives = g.v.iter().filter(|&&x| x > 0.5).count();
    if positives == 0 {
        return None;
    }
    let mut best: f64 = 0.0;
    for k in 1..=255 {
        let t = k as f64 / 256.0;
        let (mut tp, mut fp) = (0.0, 0.0);
        for i in 0..p.v.len() {
            if p.v[i] >= t {
                if g.v[i] > 0.5 {
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
            }
        }
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = tp / positives as f64;
        let f = if 0.3 * precision + recall > 0.0 {
            1.3 * precision * recall / (0.3 * precision + recall)
        } else {
            0.0
        };
        best = best.max(f);
    }
    Some(best)
}

/// E-measure of one binary map, with the additive `ε = 1e-12` written as in
/// the textbook formula.
pub fn e_oracle(b: &[f64], g: &[f64]) -> f64 {
    let n = b.len() as f64;
    let g_sum: f64 = g.iter().sum();
    if g_sum == 0.0 {
        return b.iter().map(|&x| 1.0 - x).sum::<f64>() / n;
    }
    if g_sum == n {
        return b.iter().sum::<f64>() / n;
    }
    let mb = b.iter().sum::<f64>() / n;
    let mg = g_sum / n;
    let mut total = 0.0;
    for i in 0..b.len() {
        let pb = b[i] - mb;
        let pg = g[i] - mg;
        let xi = 2.0 * pg * pb / (pg * pg + pb * pb + 1e-12);
        total += (1.0 + xi) * (1.0 + xi) / 4.0;
    }
    total / n
}

pub fn max_e_oracle(p: &Grid, g: &Grid) -> f64 {
    let gb: Vec<f64> = g.v.iter().map(|&x| if x > 0.5 { 1.0 } else { 0.0 }).collect();
    let mut best: f64 = 0.0;
    for k in 1..=255 {
        let t = k as f64 / 256.0;
        let b: Vec<f64> = p.v.iter().map(|&x| if x >= t { 1.0 } else { 0.0 }).collect();
        best = best.max(e_oracle(&b, &gb));
    }
    best
}

fn mean_and_sample_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

fn object_score(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let (m, s) = mean_and_sample_std(v);
    2.0 * m / (m * m + 1.0 + 2.0 * s)
}

fn block_ssim(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len() as f64;
    let mp = p.iter().sum::<f64>() / n;
    let mg = g.iter().sum::<f64>() / n;
    let d = if p.len() > 1 { n - 1.0 } else { 1.0 };
    let vp = p.iter().map(|x| (x - mp).powi(2)).sum::<f64>() / d;
    let vg = g.iter().map(|x| (x - mg).powi(2)).sum::<f64>() / d;
    let cv = p.iter().zip(g).map(|(x, y)| (x - mp) * (y - mg)).sum::<f64>() / d;
    let (c1, c2) = (1e-4, 9e-4);
    (2.0 * mp * mg + c1) * (2.0 * cv + c2) / ((mp * mp + mg * mg + c1) * (vp + vg + c2))
}

/// Structure measure with `α = 0.5`, `λ = 1`, centroid split and sample
/// statistics.
pub fn s_oracle(p: &Grid, g: &Grid) -> f64 {
    let n = p.v.len() as f64;
    let fg: Vec<bool> = g.v.iter().map(|&x| x > 0.5).collect();
    let mu = fg.iter().filter(|&&f| f).count() as f64 / n;
    let mean_p = p.v.iter().sum::<f64>() / n;
    if mu == 0.0 {
        return 1.0 - mean_p;
    }
    if mu == 1.0 {
        return mean_p;
    }
    let on_fg: Vec<f64> = (0..p.v.len()).filter(|&i| fg[i]).map(|i| p.v[i]).collect();
    let on_bg: Vec<f64> = (0..p.v.len()).filter(|&i| !fg[i]).map(|i| 1.0 - p.v[i]).collect();
    let s_o = mu * object_score(&on_fg) + (1.0 - mu) * object_score(&on_bg);

    let (mut cr, mut cc, mut cnt) = (0.0, 0.0, 0.0);
    for r in 0..g.rows {
        for c in 0..g.cols {
            if g.get(r, c) > 0.5 {
                cr += r as f64;
                cc += c as f64;
                cnt += 1.0;
            }
        }
    }
    let split_c = ((cc / cnt).round_ties_even() as usize + 1).min(g.cols);
    let split_r = ((cr / cnt).round_ties_even() as usize + 1).min(g.rows);
    let mut s_r = 0.0;
    for quadrant in 0..4 {
        let (top, left) = (quadrant < 2, quadrant % 2 == 0);
        let (mut pb, mut gb) = (Vec::new(), Vec::new());
        for r in 0..g.rows {
            for c in 0..g.cols {
                if (r < split_r) == top && (c < split_c) == left {
                    pb.push(p.get(r, c));
                    gb.push(g.get(r, c));
                }
            }
        }
        if !pb.is_empty() {
            s_r += pb.len() as f64 / n * block_ssim(&pb, &gb);
        }
    }
    (0.5 * s_o + 0.5 * s_r).max(0.0)
}

/// Random `rows × cols` prediction and binary ground truth. The ground truth
/// has foreground density drawn from `[0.2, 0.8]`.
pub fn random_pair(rng: &mut ChaCha8Rng, max_side: usize) -> (Grid, Grid) {
    let rows = rng.random_range(1..=max_side);
    let cols = rng.random_range(1..=max_side);
    let density = rng.random_range(0.2..0.8);
    let p = (0..rows * cols).map(|_| rng.random_range(0.0..1.0)).collect();
    let g = (0..rows * cols)
        .map(|_| if rng.random_bool(density) { 1.0 } else { 0.0 })
        .collect();
    (Grid { rows, cols, v: p }, Grid { rows, cols, v: g })
}

// Plain-value layer oracles on NCHW tensors.

pub fn dims(x: &Tensor<f64>) -> (usize, usize, usize, usize) {
    let s = x.shape();
    (s[0], s[1], s[2], s[3])
}

pub fn map(x: &Tensor<f64>, f: impl Fn(f64) -> f64) -> Tensor<f64> {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect()).unwrap()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// `a ⊙ b` where either side may have singleton channel or spatial axes.
pub fn mul_bcast(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (n, c, h, w) = {
        let (an, ac, ah, aw) = dims(a);
        let (_, bc, bh, bw) = dims(b);
        (an, ac.max(bc), ah.max(bh), aw.max(bw))
    };
    let pick = |t: &Tensor<f64>, i: usize, ch: usize, y: usize, x: usize| {
        let (_, tc, th, tw) = dims(t);
        t.at4(i, ch.min(tc - 1), y.min(th - 1), x.min(tw - 1))
    };
    let mut out = Vec::with_capacity(n * c * h * w);
    for i in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.push(pick(a, i, ch, y, x) * pick(b, i, ch, y, x));
                }
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out).unwrap()
}

pub fn zip(a: &Tensor<f64>, b: &Tensor<f64>, f: impl Fn(f64, f64) -> f64) -> Tensor<f64> {
    assert_eq!(a.shape(), b.shape());
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .unwrap()
}

pub fn cat_channels(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (n, ca, h, w) = dims(a);
    let cb = dims(b).1;
    Tensor::from_fn(vec![n, ca + cb, h, w], |idx| {
        let x = idx % w;
        let y = idx / w % h;
        let c = idx / (w * h) % (ca + cb);
        let i = idx / (w * h * (ca + cb));
        if c < ca {
            a.at4(i, c, y, x)
        } else {
            b.at4(i, c - ca, y, x)
        }
    })
}

pub fn gap(x: &Tensor<f64>) -> Tensor<f64> {
    let (n, c, h, w) = dims(x);
    Tensor::from_fn(vec![n, c, 1, 1], |idx| {
        let (i, ch) = (idx / c, idx % c);
        let mut s = 0.0;
        for y in 0..h {
            for xx in 0..w {
                s += x.at4(i, ch, y, xx);
            }
        }
        s / (h * w) as f64
    })
}

/// `[mean over channels, max over channels]`, as two channels.
pub fn channel_squeeze(x: &Tensor<f64>) -> Tensor<f64> {
    let (n, c, h, w) = dims(x);
    Tensor::from_fn(vec![n, 2, h, w], |idx| {
        let xx = idx % w;
        let y = idx / w % h;
        let which = idx / (w * h) % 2;
        let i = idx / (w * h * 2);
        let vals = (0..c).map(|ch| x.at4(i, ch, y, xx));
        if which == 0 {
            vals.sum::<f64>() / c as f64
        } else {
            vals.fold(f64::NEG_INFINITY, f64::max)
        }
    })
}

/// Bilinear resize with half-pixel centres, source coordinates clamped at 0
/// and taps clamped at the last row/column.
pub fn resize(x: &Tensor<f64>, oh: usize, ow: usize) -> Tensor<f64> {
    let (n, c, h, w) = dims(x);
    let src = |o: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(inp - 1);
        (i0, (i0 + 1).min(inp - 1), s - i0 as f64)
    };
    Tensor::from_fn(vec![n, c, oh, ow], |idx| {
        let ox = idx % ow;
        let oy = idx / ow % oh;
        let ch = idx / (ow * oh) % c;
        let i = idx / (ow * oh * c);
        let (y0, y1, ly) = src(oy, oh, h);
        let (x0, x1, lx) = src(ox, ow, w);
        let top = (1.0 - lx) * x.at4(i, ch, y0, x0) + lx * x.at4(i, ch, y0, x1);
        let bot = (1.0 - lx) * x.at4(i, ch, y1, x0) + lx * x.at4(i, ch, y1, x1);
        (1.0 - ly) * top + ly * bot
    })
}

pub fn resize_like(x: &Tensor<f64>, like: &Tensor<f64>) -> Tensor<f64> {
    let (_, _, h, w) = dims(like);
    if dims(x).2 == h && dims(x).3 == w {
        return x.clone();
    }
    resize(x, h, w)
}

/// A library conv layer evaluated by the direct oracle.
pub fn conv_layer(store: &caai_core::ParamStore<f64>, conv: &caai_core::nn::Conv2d, x: &Tensor<f64>) -> Tensor<f64> {
    let b = store.value(conv.bias).data().to_vec();
    conv_direct(x, store.value(conv.weight), &b, conv.stride, conv.padding)
}
