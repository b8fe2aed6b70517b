//! Layer primitives: convolution, bilinear resampling, pooling, and the
//! parameterised layer wrappers the architecture is assembled from.

mod conv;
mod pool;
mod resample;

pub use conv::conv2d;
pub use pool::{channel_max, channel_mean, global_avg_pool, max_pool2};
pub use resample::{resample, resample_like, resample_value};

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{Float, Tape, Var};

/// A forward pass in progress: the tape being recorded plus the parameter
/// values it reads.
pub struct Graph<'t, T: Float> {
    pub tape: &'t Tape<T>,
    pub params: &'t ParamStore<T>,
}

impl<T: Float> Clone for Graph<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Float> Copy for Graph<'_, T> {}

impl<'t, T: Float> Graph<'t, T> {
    pub fn new(tape: &'t Tape<T>, params: &'t ParamStore<T>) -> Self {
        Self { tape, params }
    }

    pub fn param(&self, id: ParamId) -> Var<'t, T> {
        self.tape.param(self.params, id)
    }
}

/// Square-kernel convolution layer with bias; stride 1 and size-preserving
/// padding `k / 2`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub const KERNEL_SIZES: [usize; 3] = [1, 3, 5];

    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(
            Self::KERNEL_SIZES.contains(&kernel),
            "unsupported kernel size {kernel} for `{name}`"
        );
        assert!(cin > 0 && cout > 0, "empty conv `{name}`");
        let fan_in = cin * kernel * kernel;
        let weight = store.register(
            format!("{name}.weight"),
            &[cout, cin, kernel, kernel],
            Init::FanInUniform { fan_in },
            rng,
        );
        let bias = store.register(format!("{name}.bias"), &[cout], Init::Zeros, rng);
        Self {
            weight,
            bias,
            cin,
            cout,
            kernel,
            stride: 1,
            padding: kernel / 2,
        }
    }

    pub fn num_params(&self) -> usize {
        self.cout * self.cin * self.kernel * self.kernel + self.cout
    }

    pub fn forward<'t, T: Float>(&self, g: Graph<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.cin {
            return Err(Error::shape(
                "conv2d layer",
                &x.shape(),
                &[self.cout, self.cin, self.kernel, self.kernel],
            ));
        }
        conv2d(
            x,
            g.param(self.weight),
            Some(g.param(self.bias)),
            self.stride,
            self.padding,
        )
    }
}

/// PReLU with one learnable slope per call site.
#[derive(Clone, Debug)]
pub struct Prelu {
    pub slope: ParamId,
}

impl Prelu {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, rng: &mut impl Rng) -> Self {
        Self {
            slope: store.register(format!("{name}.slope"), &[1], Init::PRELU_SLOPE, rng),
        }
    }

    pub fn forward<'t, T: Float>(&self, g: Graph<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.prelu(g.param(self.slope))
    }
}
