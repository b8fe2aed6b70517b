//! Named, ordered registry of learnable tensors.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Initialization scheme, kept as metadata next to each parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform on `±1/√fan_in`.
    FanInUniform {
        fan_in: usize,
    },
    Zeros,
    Constant(f64),
}

impl Init {
    pub const PRELU_SLOPE: Init = Init::Constant(0.25);

    pub fn bound(&self) -> Option<f64> {
        match *self {
            Init::FanInUniform { fan_in } => Some(1.0 / (fan_in as f64).sqrt()),
            _ => None,
        }
    }
}

impl fmt::Display for Init {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Init::FanInUniform { fan_in } => write!(f, "fan-in-uniform:{fan_in}"),
            Init::Zeros => write!(f, "zeros"),
            Init::Constant(c) => write!(f, "constant:{c}"),
        }
    }
}

impl FromStr for Init {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::UnknownInit(s.to_string());
        let (kind, arg) = s.split_once(':').unwrap_or((s, ""));
        match kind {
            "zeros" if arg.is_empty() => Ok(Init::Zeros),
            "fan-in-uniform" => {
                let fan_in = arg.parse().map_err(|_| unknown())?;
                if fan_in == 0 {
                    return Err(unknown());
                }
                Ok(Init::FanInUniform { fan_in })
            }
            "constant" => arg.parse().map(Init::Constant).map_err(|_| unknown()),
            _ => Err(unknown()),
        }
    }
}

/// Creates a tensor of `shape` according to `scheme`, drawing from `rng`
/// only for random schemes.
pub fn init_params<T: Float>(shape: &[usize], scheme: Init, rng: &mut impl Rng) -> Tensor<T> {
    match scheme {
        Init::FanInUniform { .. } => {
            let bound = scheme.bound().expect("uniform bound");
            Tensor::from_fn(shape.to_vec(), |_| T::c(rng.random_range(-bound..bound)))
        }
        Init::Zeros => Tensor::zeros(shape.to_vec()),
        Init::Constant(c) => Tensor::full(shape.to_vec(), T::c(c)),
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub init: Init,
    pub grad: Option<Tensor<T>>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a new parameter. Names must be unique.
    pub fn register(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut impl Rng) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter `{name}`");
        let id = ParamId(self.params.len());
        self.params.push(Param {
            value: init_params(shape, init, rng),
            name: name.clone(),
            init,
            grad: None,
        });
        self.by_name.insert(name, id);
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<T>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Stores gradients from a backward pass, replacing previous ones.
    pub fn set_grads(&mut self, grads: &crate::tensor::Grads<T>) {
        self.zero_grads();
        for (id, g) in grads.param_grads() {
            self.params[id.0].grad = Some(g.clone());
        }
    }

    /// Replaces a parameter's value, keeping its shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape("set_value", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zeros_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t: Tensor<f64> = init_params(&[4], Init::Zeros, &mut rng);
        assert_eq!(t.data(), &[0.0; 4]);
    }

    #[test]
    fn fan_in_bound() {
        let scheme = Init::FanInUniform { fan_in: 27 };
        assert_eq!(scheme.bound(), Some(1.0 / 27f64.sqrt()));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t: Tensor<f64> = init_params(&[8, 3, 3, 3], scheme, &mut rng);
        let b = 1.0 / 27f64.sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= b));
        assert!(t.max_abs() > 0.5 * b);
    }

    #[test]
    fn same_seed_same_tensor() {
        let scheme = Init::FanInUniform { fan_in: 9 };
        let a: Tensor<f32> = init_params(&[2, 9], scheme, &mut ChaCha8Rng::seed_from_u64(11));
        let b: Tensor<f32> = init_params(&[2, 9], scheme, &mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(a, b);
    }

    #[test]
    fn prelu_slope_is_quarter() {
        let t: Tensor<f64> = init_params(&[1], Init::PRELU_SLOPE, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(t.item(), 0.25);
    }

    #[test]
    fn parse_schemes() {
        assert_eq!("zeros".parse::<Init>().unwrap(), Init::Zeros);
        assert_eq!(
            "fan-in-uniform:27".parse::<Init>().unwrap(),
            Init::FanInUniform { fan_in: 27 }
        );
        assert_eq!("constant:0.25".parse::<Init>().unwrap(), Init::Constant(0.25));
        assert!(matches!("xavier".parse::<Init>(), Err(Error::UnknownInit(_))));
        for s in [Init::Zeros, Init::FanInUniform { fan_in: 5 }, Init::Constant(0.25)] {
            assert_eq!(s.to_string().parse::<Init>().unwrap(), s);
        }
    }
}
