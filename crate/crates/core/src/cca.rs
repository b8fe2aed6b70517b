//! Context-aware complementary attention over the high-level features
//! (backbone levels 3–5).
//!
//! Three stages, applied per stream:
//!
//! 1. **Feature interaction.** A reticular pyramid of six conv units mixes
//!    adjacent levels through bilinear up/down-sampling:
//!
//!    ```text
//!    f(0,0) = CU(f3)
//!    f(1,0) = CU(f4 + DS(f(0,0)))
//!    f(0,1) = CU(f(0,0) + US(f(1,0)))
//!    f(2,0) = CU(f5 + DS(f(1,0)))
//!    f(1,1) = CU(f(1,0) + US(f(2,0)) + DS(f(0,1)))
//!    f(0,2) = CU(US(f(1,1)) + f(0,1))
//!    ```
//!
//!    giving `f3' = f(0,2)`, `f4' = f(1,1)`, `f5' = f(2,0)`.
//! 2. **Complementary attention.** `S_i = SA(CA(f_i'))`,
//!    `ω_i = 1 − σ(S_i)`, and for `i ∈ {3, 4}`: `f̂_i = ω_i ⊙ US(S_{i+1})`.
//! 3. **Global context** for level 5:
//!    `f̂5 = ω5 ⊙ (f5' + ReLU(Conv(ReLU(Conv(f5')))))`.
//!
//! Every input is first projected to `c_common` channels by a 1×1 conv so
//! the pyramid additions are well-typed.

use rand::Rng;

use crate::attention::{ChannelAttention, SpatialAttention};
use crate::error::{Error, Result};
use crate::nn::{resample_like, Conv2d, Graph};
use crate::params::ParamStore;
use crate::tensor::{Float, Var};

/// Pyramid node coordinates `(row, col)` in evaluation order. Row `j` lives
/// at the resolution of backbone level `3 + j`.
pub const PYRAMID_NODES: [(usize, usize); 6] = [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)];

/// Whether the pyramid's cross-level resampled terms are included. `Off` is
/// an ablation where each node only sees its own row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CrossScale {
    On,
    Off,
}

#[derive(Clone, Debug)]
pub struct FeatureInteraction {
    /// Conv units in [`PYRAMID_NODES`] order.
    pub units: [Conv2d; 6],
}

/// All six pyramid node values, in [`PYRAMID_NODES`] order.
#[derive(Clone, Copy, Debug)]
pub struct PyramidNodes<'t, T: Float> {
    pub nodes: [Var<'t, T>; 6],
}

impl<'t, T: Float> PyramidNodes<'t, T> {
    pub fn node(&self, row: usize, col: usize) -> Var<'t, T> {
        let i = PYRAMID_NODES
            .iter()
            .position(|&rc| rc == (row, col))
            .expect("valid pyramid node");
        self.nodes[i]
    }

    /// `(f3', f4', f5')`.
    pub fn outputs(&self) -> [Var<'t, T>; 3] {
        [self.node(0, 2), self.node(1, 1), self.node(2, 0)]
    }
}

impl FeatureInteraction {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        let units =
            PYRAMID_NODES.map(|(r, c)| Conv2d::new(store, &format!("{name}.cu{r}{c}"), channels, channels, 3, rng));
        Self { units }
    }

    fn unit<'t, T: Float>(&self, g: Graph<'t, T>, idx: usize, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.units[idx].forward(g, x)?.relu())
    }

    pub fn forward<'t, T: Float>(
        &self,
        g: Graph<'t, T>,
        f3: Var<'t, T>,
        f4: Var<'t, T>,
        f5: Var<'t, T>,
        mode: CrossScale,
    ) -> Result<PyramidNodes<'t, T>> {
        // `x + resample(y → x's size)`, or just `x` in the ablation.
        let mix = |x: Var<'t, T>, y: Var<'t, T>| -> Result<Var<'t, T>> {
            match mode {
                CrossScale::On => x.add(resample_like(y, x)?),
                CrossScale::Off => Ok(x),
            }
        };
        let n00 = self.unit(g, 0, f3)?;
        let n10 = self.unit(g, 1, mix(f4, n00)?)?;
        let n01 = self.unit(g, 2, mix(n00, n10)?)?;
        let n20 = self.unit(g, 3, mix(f5, n10)?)?;
        let n11 = self.unit(g, 4, mix(mix(n10, n20)?, n01)?)?;
        let n02 = self.unit(g, 5, mix(n01, n11)?)?;
        for (node, level_ref) in [(n10, f4), (n20, f5), (n02, f3), (n11, f4)] {
            if node.shape()[2..] != level_ref.shape()[2..] {
                return Err(Error::shape("feature interaction", &node.shape(), &level_ref.shape()));
            }
        }
        Ok(PyramidNodes {
            nodes: [n00, n10, n01, n20, n11, n02],
        })
    }
}

/// `([f̂3, f̂4], [S3, S4, S5], [ω3, ω4, ω5])`.
pub type AttentionParts<'t, T> = ([Var<'t, T>; 2], [Var<'t, T>; 3], [Var<'t, T>; 3]);

/// `ω = 1 − σ(S)`.
pub fn complement_weight<'t, T: Float>(s: Var<'t, T>) -> Var<'t, T> {
    s.sigmoid().reverse()
}

/// `ω_i ⊙ US(S_{i+1})`, with `S_{i+1}` resampled to `ω_i`'s resolution.
pub fn complementary_fuse<'t, T: Float>(omega: Var<'t, T>, s_next: Var<'t, T>) -> Result<Var<'t, T>> {
    omega.mul(resample_like(s_next, omega)?)
}

#[derive(Clone, Debug)]
pub struct GlobalContext {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl GlobalContext {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), channels, channels, 3, rng),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), channels, channels, 3, rng),
        }
    }

    /// `ω5 ⊙ (f5' + ReLU(Conv(ReLU(Conv(f5')))))`.
    pub fn forward<'t, T: Float>(&self, g: Graph<'t, T>, f5: Var<'t, T>, omega5: Var<'t, T>) -> Result<Var<'t, T>> {
        let branch = self.conv1.forward(g, f5)?.relu();
        let branch = self.conv2.forward(g, branch)?.relu();
        omega5.mul(f5.add(branch)?)
    }
}

/// Everything the module computes for one stream.
#[derive(Clone, Copy, Debug)]
pub struct CcaOutput<'t, T: Float> {
    /// `f̂3, f̂4, f̂5`, each at its own level's resolution.
    pub f_hat: [Var<'t, T>; 3],
    /// `S3, S4, S5`.
    pub s: [Var<'t, T>; 3],
    /// `ω3, ω4, ω5`.
    pub omega: [Var<'t, T>; 3],
    /// `f3', f4', f5'` from the feature interaction stage.
    pub interacted: [Var<'t, T>; 3],
}

#[derive(Clone, Debug)]
pub struct Cca {
    pub project: [Conv2d; 3],
    pub interaction: FeatureInteraction,
    pub ca: [ChannelAttention; 3],
    pub sa: [SpatialAttention; 3],
    pub context: GlobalContext,
    pub channels: usize,
}

impl Cca {
    /// `level_channels` are the backbone widths of levels 3, 4 and 5.
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        level_channels: [usize; 3],
        channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let project = [0, 1, 2].map(|i| {
            Conv2d::new(
                store,
                &format!("{name}.project{}", i + 3),
                level_channels[i],
                channels,
                1,
                rng,
            )
        });
        let interaction = FeatureInteraction::new(store, &format!("{name}.pyramid"), channels, rng);
        let mut ca = Vec::with_capacity(3);
        let mut sa = Vec::with_capacity(3);
        for level in 3..=5 {
            ca.push(ChannelAttention::new(
                store,
                &format!("{name}.ca{level}"),
                channels,
                rng,
            )?);
            sa.push(SpatialAttention::new(store, &format!("{name}.sa{level}"), rng));
        }
        let context = GlobalContext::new(store, &format!("{name}.context"), channels, rng);
        Ok(Self {
            project,
            interaction,
            ca: ca.try_into().expect("three levels"),
            sa: sa.try_into().expect("three levels"),
            context,
            channels,
        })
    }

    /// 1×1 projection (plus ReLU) of backbone level `level ∈ {3, 4, 5}` to
    /// the common width.
    pub fn project_common<'t, T: Float>(&self, g: Graph<'t, T>, x: Var<'t, T>, level: usize) -> Result<Var<'t, T>> {
        if !(3..=5).contains(&level) {
            return Err(Error::invalid(
                "project_common",
                format!("level {level} is not a high-level feature"),
            ));
        }
        Ok(self.project[level - 3].forward(g, x)?.relu())
    }

    /// Complementary attention over the interacted features.
    pub fn complementary_attention<'t, T: Float>(
        &self,
        g: Graph<'t, T>,
        interacted: [Var<'t, T>; 3],
    ) -> Result<AttentionParts<'t, T>> {
        let mut s = Vec::with_capacity(3);
        for (i, &f) in interacted.iter().enumerate() {
            let ca = self.ca[i].forward(g, f)?;
            s.push(self.sa[i].forward(g, ca)?);
        }
        let s: [Var<'t, T>; 3] = s.try_into().expect("three levels");
        let omega = s.map(complement_weight);
        let f_hat = [complementary_fuse(omega[0], s[1])?, complementary_fuse(omega[1], s[2])?];
        Ok((f_hat, s, omega))
    }

    pub fn forward_with<'t, T: Float>(
        &self,
        g: Graph<'t, T>,
        high: [Var<'t, T>; 3],
        mode: CrossScale,
    ) -> Result<CcaOutput<'t, T>> {
        let p3 = self.project_common(g, high[0], 3)?;
        let p4 = self.project_common(g, high[1], 4)?;
        let p5 = self.project_common(g, high[2], 5)?;
        let interacted = self.interaction.forward(g, p3, p4, p5, mode)?.outputs();
        let ([f3, f4], s, omega) = self.complementary_attention(g, interacted)?;
        let f5 = self.context.forward(g, interacted[2], omega[2])?;
        Ok(CcaOutput {
            f_hat: [f3, f4, f5],
            s,
            omega,
            interacted,
        })
    }

    /// Runs the module on backbone levels 3–5 of one stream.
    pub fn forward<'t, T: Float>(&self, g: Graph<'t, T>, high: [Var<'t, T>; 3]) -> Result<CcaOutput<'t, T>> {
        self.forward_with(g, high, CrossScale::On)
    }
}
