//! Channel and spatial attention gates.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{channel_max, channel_mean, global_avg_pool, Conv2d, Graph};
use crate::params::ParamStore;
use crate::tensor::{concat_channels, Float, Var};

/// Squeeze-and-excitation style channel gate:
/// `w = σ(FC₂(ReLU(FC₁(GAP(x)))))`, output `x ⊙ w`.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub fc1: Conv2d,
    pub fc2: Conv2d,
}

impl ChannelAttention {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        let ratio = ModelConfig::CA_RATIO;
        if channels < ratio {
            return Err(Error::Config(format!(
                "channel attention `{name}` needs at least {ratio} channels, got {channels}"
            )));
        }
        let hidden = channels / ratio;
        Ok(Self {
            fc1: Conv2d::new(store, &format!("{name}.fc1"), channels, hidden, 1, rng),
            fc2: Conv2d::new(store, &format!("{name}.fc2"), hidden, channels, 1, rng),
        })
    }

    /// Returns the gated features and the `N×C×1×1` channel weights.
    pub fn forward_with_weights<'t, T: Float>(
        &self,
        g: Graph<'t, T>,
        x: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let pooled = global_avg_pool(x)?;
        let hidden = self.fc1.forward(g, pooled)?.relu();
        let weights = self.fc2.forward(g, hidden)?.sigmoid();
        Ok((x.mul(weights)?, weights))
    }

    pub fn forward<'t, T: Float>(&self, g: Graph<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.forward_with_weights(g, x)?.0)
    }
}

/// Spatial gate: `a = σ(Conv₅ₓ₅(Cat(mean_c(x), max_c(x))))`, output `x ⊙ a`.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub conv: Conv2d,
}

impl SpatialAttention {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, rng: &mut impl Rng) -> Self {
        Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), 2, 1, ModelConfig::SA_KERNEL, rng),
        }
    }

    /// Returns the gated features and the `N×1×H×W` attention map.
    pub fn forward_with_map<'t, T: Float>(&self, g: Graph<'t, T>, x: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let squeezed = concat_channels(&[channel_mean(x)?, channel_max(x)?])?;
        let map = self.conv.forward(g, squeezed)?.sigmoid();
        Ok((x.mul(map)?, map))
    }

    pub fn forward<'t, T: Float>(&self, g: Graph<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.forward_with_map(g, x)?.0)
    }
}
