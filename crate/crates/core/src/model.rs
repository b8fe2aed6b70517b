//! The full two-stream network and its prediction head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::afi::{Afi, LowLevelRefine};
use crate::backbone::{Backbone, FeaturePyramid};
use crate::cca::{Cca, CcaOutput};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{resample, Conv2d, Graph};
use crate::params::ParamStore;
use crate::tensor::{Float, Tape, Tensor, Var};

/// Encoder, low-level refinement and complementary attention for one input
/// modality.
#[derive(Clone, Debug)]
pub struct Stream {
    pub backbone: Backbone,
    pub refine: LowLevelRefine,
    pub cca: Cca,
}

impl Stream {
    fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &ModelConfig,
        in_channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bb = &cfg.backbone;
        Ok(Self {
            backbone: Backbone::new(store, &format!("{name}.backbone"), bb, in_channels, rng),
            refine: LowLevelRefine::new(store, &format!("{name}.low"), rng),
            cca: Cca::new(
                store,
                &format!("{name}.cca"),
                [bb.channels[2], bb.channels[3], bb.channels[4]],
                cfg.c_common,
                rng,
            )?,
        })
    }

    /// Per-level features entering fusion, levels 1–5.
    pub fn forward<'t, T: Float>(&self, g: Graph<'t, T>, x: Var<'t, T>) -> Result<StreamFeatures<'t, T>> {
        let pyramid = self.backbone.extract(g, x)?;
        let [l1, l2] = self.refine.forward(g, pyramid.low())?;
        let cca = self.cca.forward(g, pyramid.high())?;
        let [f3, f4, f5] = cca.f_hat;
        Ok(StreamFeatures {
            pyramid,
            cca,
            levels: [l1, l2, f3, f4, f5],
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StreamFeatures<'t, T: Float> {
    pub pyramid: FeaturePyramid<'t, T>,
    pub cca: CcaOutput<'t, T>,
    pub levels: [Var<'t, T>; 5],
}

/// `σ(Conv1×1(ReLU(Conv3×3(x))))`, resampled to the input resolution.
#[derive(Clone, Debug)]
pub struct Head {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub output_size: usize,
}

impl Head {
    fn new<T: Float>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv1: Conv2d::new(store, "head.conv1", cfg.c_fuse, cfg.head_channels, 3, rng),
            conv2: Conv2d::new(store, "head.conv2", cfg.head_channels, 1, 1, rng),
            output_size: cfg.backbone.input_size,
        }
    }

    pub fn forward<'t, T: Float>(&self, g: Graph<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = self.conv1.forward(g, x)?.relu();
        let y = self.conv2.forward(g, y)?.sigmoid();
        resample(y, self.output_size, self.output_size)
    }
}

/// Network structure plus its parameters. Parameters are registered in a
/// fixed order from a seeded generator, so a seed fully determines the
/// initial weights.
#[derive(Clone, Debug)]
pub struct CaaiNet<T: Float> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
    pub rgb: Stream,
    pub depth: Stream,
    pub afi: Afi,
    pub head: Head,
}

impl<T: Float> CaaiNet<T> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let rgb = Stream::new(&mut params, "rgb", cfg, cfg.backbone.rgb_channels, &mut rng)?;
        let depth = Stream::new(&mut params, "depth", cfg, cfg.backbone.depth_channels, &mut rng)?;
        let afi = Afi::new(&mut params, "afi", cfg, &mut rng);
        let head = Head::new(&mut params, cfg, &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            params,
            rgb,
            depth,
            afi,
            head,
        })
    }

    pub fn input_size(&self) -> usize {
        self.cfg.backbone.input_size
    }

    /// Records the forward pass on `tape`; returns an `N×1×S×S` map in
    /// `[0, 1]`.
    pub fn forward<'t>(&'t self, tape: &'t Tape<T>, rgb: Var<'t, T>, depth: Var<'t, T>) -> Result<Var<'t, T>> {
        let (n_rgb, ..) = rgb.dims4()?;
        let (n_depth, ..) = depth.dims4()?;
        if n_rgb != n_depth {
            return Err(Error::shape("forward", &rgb.shape(), &depth.shape()));
        }
        let g = Graph::new(tape, &self.params);
        let fr = self.rgb.forward(g, rgb)?;
        let fd = self.depth.forward(g, depth)?;
        let fused = self.afi.forward(g, fr.levels, fd.levels)?;
        self.head.forward(g, fused)
    }

    /// Forward pass on a fresh tape, returning only the map.
    pub fn predict(&self, rgb: &Tensor<T>, depth: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let out = self.forward(&tape, tape.constant(rgb.clone()), tape.constant(depth.clone()))?;
        Ok((*out.value()).clone())
    }
}
