//! Named parameter tensors and their binding into a [`Graph`].

use std::collections::BTreeMap;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Element, Tensor};

/// Standard deviation of the truncated-normal initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal(0, std) truncated at ±2·std.
    TruncNormal(f64),
    Zeros,
    /// Fixed value (test fixtures only).
    Constant(f64),
}

/// Distribution of convolution weights (`*.w`, rank 4). Biases stay zero and
/// the structure tokens always use [`INIT_STD`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum WeightInit {
    /// Truncated normal with std [`INIT_STD`].
    #[default]
    Fixed,
    /// Truncated normal with std `1/√fan_in`, fan-in = `cin/groups · kh · kw`.
    FanIn,
}

impl WeightInit {
    /// Rewrites the initializer of every convolution weight in `specs`.
    pub fn apply(self, specs: &mut [ParamSpec]) {
        if self == WeightInit::Fixed {
            return;
        }
        for s in specs.iter_mut() {
            if s.name.ends_with(".w") && s.shape.len() == 4 {
                let fan_in = (s.shape[1] * s.shape[2] * s.shape[3]) as f64;
                s.init = Init::TruncNormal(1.0 / fan_in.sqrt());
            }
        }
    }
}

impl std::fmt::Display for WeightInit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            WeightInit::Fixed => "fixed",
            WeightInit::FanIn => "fan_in",
        })
    }
}

impl std::str::FromStr for WeightInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fixed" => Ok(WeightInit::Fixed),
            "fan_in" => Ok(WeightInit::FanIn),
            other => Err(Error::config(format!(
                "unknown weight init `{other}` (expected fixed or fan_in)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Parameters keyed by name; iteration is in sorted-name order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
        }
    }

    /// Draws every tensor in `specs` order from one seeded stream.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let mut store = Self::new();
        for spec in specs {
            let t = Tensor::from_fn(&spec.shape, |_| match spec.init {
                Init::TruncNormal(std) => T::lit(rng.truncated_normal(std)),
                Init::Zeros => T::zero(),
                Init::Constant(v) => T::lit(v),
            });
            store.insert(spec.name.clone(), t);
        }
        store
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_owned()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_owned()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Checks that the store holds exactly the tensors described by `specs`.
    pub fn validate(&self, specs: &[ParamSpec]) -> Result<()> {
        for spec in specs {
            let t = self.get(&spec.name)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::ParamShape {
                    name: spec.name.clone(),
                    expected: spec.shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = self
            .names()
            .find(|n| !specs.iter().any(|s| s.name == *n))
        {
            return Err(Error::UnexpectedParam(extra.to_owned()));
        }
        Ok(())
    }

    /// Registers every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>, requires_grad: bool) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), g.leaf(v.clone(), requires_grad)))
                .collect(),
        }
    }

    /// Gradients of the bound parameters after `g.backward`, zero-filled for
    /// parameters the loss did not reach.
    pub fn grads(&self, g: &Graph<T>, bound: &Bound) -> BTreeMap<String, Tensor<T>> {
        bound
            .vars
            .iter()
            .map(|(k, &v)| (k.clone(), g.grad_tensor(v)))
            .collect()
    }
}

/// Graph handles of a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_owned()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Binds `name` to `v`, replacing any previous handle.
    pub fn set(&mut self, name: impl Into<String>, v: Var) {
        self.vars.insert(name.into(), v);
    }
}
