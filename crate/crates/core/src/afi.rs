//! Adaptive feature integration: per-level RGB/depth fusion, residual
//! refinement, and the cross-level sum.
//!
//! For level `i` with RGB features `fʰ`, depth features `fᵈ` (both `C`
//! channels) and the previous level's RGB features as guidance:
//!
//! ```text
//! n = σ(Conv1×1(DS(fʰ_{i-1})))              C/2 channels
//! m = σ(Conv3×3(DS(fʰ_{i-1})))              C/2 channels
//! u = R(Conv3×3(fʰ))                        C/2 channels
//! h = Cat(n ⊙ u, m ⊙ u)                     C channels
//! d = θ(Conv3×3(θ(Conv3×3(fᵈ))))           C channels, θ = PReLU
//! k = σ(Conv1×1(GAP(fʰ)))                   C×1×1
//! f' = (1 − k)·fʰ + k·(h + d)/2
//! f'' = Cat(f', fᵈ)                          2C channels
//! ```
//!
//! `DS` and `R` resample to level `i`'s resolution. Level 1 has no previous
//! level and is guided by its own RGB features.

use rand::Rng;

use crate::attention::SpatialAttention;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{global_avg_pool, resample, resample_like, Conv2d, Graph, Prelu};
use crate::params::ParamStore;
use crate::tensor::{concat_channels, Float, Var};

/// Spatial-attention refinement of the two low-level features of a stream.
#[derive(Clone, Debug)]
pub struct LowLevelRefine {
    pub sa: [SpatialAttention; 2],
}

impl LowLevelRefine {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, rng: &mut impl Rng) -> Self {
        Self {
            sa: [1, 2].map(|level| SpatialAttention::new(store, &format!("{name}.sa{level}"), rng)),
        }
    }

    pub fn forward<'t, T: Float>(&self, g: Graph<'t, T>, low: [Var<'t, T>; 2]) -> Result<[Var<'t, T>; 2]> {
        Ok([self.sa[0].forward(g, low[0])?, self.sa[1].forward(g, low[1])?])
    }
}

/// `(1 − k)·f_rgb + k·(h + d)/2`, with `k` broadcast per channel.
pub fn blend<'t, T: Float>(k: Var<'t, T>, f_rgb: Var<'t, T>, h: Var<'t, T>, d: Var<'t, T>) -> Result<Var<'t, T>> {
    let keep = k.reverse().mul(f_rgb)?;
    let mixed = k.mul(h.add(d)?.mul_scalar(T::c(0.5)))?;
    keep.add(mixed)
}

/// Intermediate values of one [`FuseLevel`] pass.
#[derive(Clone, Copy, Debug)]
pub struct FuseParts<'t, T: Float> {
    pub n: Var<'t, T>,
    pub m: Var<'t, T>,
    pub h: Var<'t, T>,
    pub d: Var<'t, T>,
    pub k: Var<'t, T>,
    /// `f'`
    pub blended: Var<'t, T>,
    /// `f''`
    pub output: Var<'t, T>,
}

#[derive(Clone, Debug)]
pub struct FuseLevel {
    pub channels: usize,
    pub guide_channels: usize,
    pub gate_n: Conv2d,
    pub gate_m: Conv2d,
    pub rgb_branch: Conv2d,
    pub depth_conv1: Conv2d,
    pub depth_act1: Prelu,
    pub depth_conv2: Conv2d,
    pub depth_act2: Prelu,
    pub coef: Conv2d,
}

impl FuseLevel {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        guide_channels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(channels.is_multiple_of(2), "fusion width must be even, got {channels}");
        let half = channels / 2;
        Self {
            channels,
            guide_channels,
            gate_n: Conv2d::new(store, &format!("{name}.gate_n"), guide_channels, half, 1, rng),
            gate_m: Conv2d::new(store, &format!("{name}.gate_m"), guide_channels, half, 3, rng),
            rgb_branch: Conv2d::new(store, &format!("{name}.rgb_branch"), channels, half, 3, rng),
            depth_conv1: Conv2d::new(store, &format!("{name}.depth_conv1"), channels, channels, 3, rng),
            depth_act1: Prelu::new(store, &format!("{name}.depth_act1"), rng),
            depth_conv2: Conv2d::new(store, &format!("{name}.depth_conv2"), channels, channels, 3, rng),
            depth_act2: Prelu::new(store, &format!("{name}.depth_act2"), rng),
            coef: Conv2d::new(store, &format!("{name}.coef"), channels, channels, 1, rng),
        }
    }

    pub fn forward<'t, T: Float>(
        &self,
        g: Graph<'t, T>,
        f_rgb: Var<'t, T>,
        f_depth: Var<'t, T>,
        guide: Var<'t, T>,
    ) -> Result<FuseParts<'t, T>> {
        if f_rgb.shape() != f_depth.shape() {
            return Err(Error::shape("fuse_level", &f_rgb.shape(), &f_depth.shape()));
        }
        let guide = resample_like(guide, f_rgb)?;
        let n = self.gate_n.forward(g, guide)?.sigmoid();
        let m = self.gate_m.forward(g, guide)?.sigmoid();
        let u = resample_like(self.rgb_branch.forward(g, f_rgb)?, f_rgb)?;
        let h = concat_channels(&[n.mul(u)?, m.mul(u)?])?;

        let d = self.depth_conv1.forward(g, f_depth)?;
        let d = self.depth_act1.forward(g, d)?;
        let d = self.depth_conv2.forward(g, d)?;
        let d = self.depth_act2.forward(g, d)?;

        let k = self.coef.forward(g, global_avg_pool(f_rgb)?)?.sigmoid();
        if h.shape() != f_rgb.shape() || d.shape() != f_rgb.shape() {
            return Err(Error::shape("fuse_level", &h.shape(), &d.shape()));
        }
        let blended = blend(k, f_rgb, h, d)?;
        let output = concat_channels(&[blended, f_depth])?;
        Ok(FuseParts {
            n,
            m,
            h,
            d,
            k,
            blended,
            output,
        })
    }
}

/// `ReLU(Conv1×1(x) + Conv3×3(ReLU(Conv3×3(x))))`, then resampled to the
/// common fusion resolution.
#[derive(Clone, Debug)]
pub struct ResidualUnit {
    pub proj: Conv2d,
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub target_size: usize,
}

impl ResidualUnit {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        target_size: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            proj: Conv2d::new(store, &format!("{name}.proj"), cin, cout, 1, rng),
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, rng),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, rng),
            target_size,
        }
    }

    pub fn forward<'t, T: Float>(&self, g: Graph<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let shortcut = self.proj.forward(g, x)?;
        let branch = self.conv1.forward(g, x)?.relu();
        let branch = self.conv2.forward(g, branch)?;
        let y = shortcut.add(branch)?.relu();
        resample(y, self.target_size, self.target_size)
    }
}

/// Elementwise sum of the per-level fused features, in level order.
pub fn fuse_all<'t, T: Float>(levels: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let (first, rest) = levels
        .split_first()
        .ok_or_else(|| Error::invalid("fuse_all", "no levels to fuse"))?;
    let mut acc = *first;
    for &v in rest {
        if v.shape() != first.shape() {
            return Err(Error::shape("fuse_all", &first.shape(), &v.shape()));
        }
        acc = acc.add(v)?;
    }
    Ok(acc)
}

#[derive(Clone, Debug)]
pub struct Afi {
    pub levels: [FuseLevel; 5],
    pub residual: [ResidualUnit; 5],
}

impl Afi {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let fusion_size = cfg.backbone.level_size(2);
        let mut levels = Vec::with_capacity(5);
        let mut residual = Vec::with_capacity(5);
        for level in 1..=5 {
            let c = cfg.fusion_channels(level);
            let guide = cfg.fusion_channels(level.max(2) - 1);
            levels.push(FuseLevel::new(store, &format!("{name}.level{level}"), c, guide, rng));
            residual.push(ResidualUnit::new(
                store,
                &format!("{name}.residual{level}"),
                2 * c,
                cfg.c_fuse,
                fusion_size,
                rng,
            ));
        }
        Self {
            levels: levels.try_into().expect("five levels"),
            residual: residual.try_into().expect("five levels"),
        }
    }

    /// Fuses per-level RGB and depth features into one map at the fusion
    /// resolution.
    pub fn forward<'t, T: Float>(
        &self,
        g: Graph<'t, T>,
        rgb: [Var<'t, T>; 5],
        depth: [Var<'t, T>; 5],
    ) -> Result<Var<'t, T>> {
        let mut fused = Vec::with_capacity(5);
        for i in 0..5 {
            let guide = if i == 0 { rgb[0] } else { rgb[i - 1] };
            let parts = self.levels[i].forward(g, rgb[i], depth[i], guide)?;
            fused.push(self.residual[i].forward(g, parts.output)?);
        }
        fuse_all(&fused)
    }
}
