//! VGG-style five-block encoder, instantiated once per input stream.

use rand::Rng;

use crate::config::BackboneConfig;
use crate::error::{Error, Result};
use crate::nn::{max_pool2, Conv2d, Graph};
use crate::params::ParamStore;
use crate::tensor::{Float, Var};

/// Outputs of the five blocks. Level `i` (1-based) sits at
/// `input_size / 2^(i-1)`; levels 1–2 are the low-level group, 3–5 the
/// high-level group.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid<'t, T: Float> {
    pub levels: [Var<'t, T>; 5],
}

impl<'t, T: Float> FeaturePyramid<'t, T> {
    /// Level `i`, 1-based.
    pub fn level(&self, i: usize) -> Var<'t, T> {
        self.levels[i - 1]
    }

    pub fn low(&self) -> [Var<'t, T>; 2] {
        [self.levels[0], self.levels[1]]
    }

    pub fn high(&self) -> [Var<'t, T>; 3] {
        [self.levels[2], self.levels[3], self.levels[4]]
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    blocks: Vec<Vec<Conv2d>>,
    in_channels: usize,
    input_size: usize,
}

impl Backbone {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &BackboneConfig,
        in_channels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut cin = in_channels;
        let blocks = (0..5)
            .map(|b| {
                (0..cfg.convs_per_block[b])
                    .map(|j| {
                        let conv = Conv2d::new(
                            store,
                            &format!("{prefix}.block{}.conv{}", b + 1, j + 1),
                            cin,
                            cfg.channels[b],
                            3,
                            rng,
                        );
                        cin = cfg.channels[b];
                        conv
                    })
                    .collect()
            })
            .collect();
        Self {
            blocks,
            in_channels,
            input_size: cfg.input_size,
        }
    }

    pub fn convs(&self) -> impl Iterator<Item = &Conv2d> {
        self.blocks.iter().flatten()
    }

    pub fn extract<'t, T: Float>(&self, g: Graph<'t, T>, x: Var<'t, T>) -> Result<FeaturePyramid<'t, T>> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.in_channels || h != self.input_size || w != self.input_size {
            return Err(Error::invalid(
                "backbone",
                format!(
                    "expected N×{}×{}×{} input, got {:?}",
                    self.in_channels,
                    self.input_size,
                    self.input_size,
                    x.shape()
                ),
            ));
        }
        let mut levels = Vec::with_capacity(5);
        let mut feat = x;
        for (b, block) in self.blocks.iter().enumerate() {
            if b > 0 {
                feat = max_pool2(feat)?;
            }
            for conv in block {
                feat = conv.forward(g, feat)?.relu();
            }
            levels.push(feat);
        }
        Ok(FeaturePyramid {
            levels: levels.try_into().expect("five blocks"),
        })
    }
}
