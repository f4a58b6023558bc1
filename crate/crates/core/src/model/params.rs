use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

/// Initial output level of the sigmoid heads.
pub const HEAD_PRIOR: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    Zeros,
    Ones,
    Const(f64),
    Normal(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub(crate) init: Init,
}

impl ParamSpec {
    pub(crate) fn new(name: impl Into<String>, shape: impl Into<Vec<usize>>, init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.into(),
            init,
        }
    }

    /// He-normal weight with the given fan-in.
    pub(crate) fn he(name: impl Into<String>, shape: impl Into<Vec<usize>>, fan_in: usize) -> Self {
        Self::new(name, shape, Init::Normal((2.0 / fan_in as f64).sqrt()))
    }

    /// LeCun-normal weight with the given fan-in.
    pub(crate) fn lecun(name: impl Into<String>, shape: impl Into<Vec<usize>>, fan_in: usize) -> Self {
        Self::new(name, shape, Init::Normal((1.0 / fan_in as f64).sqrt()))
    }

    pub(crate) fn zeros(name: impl Into<String>, len: usize) -> Self {
        Self::new(name, [len], Init::Zeros)
    }

    /// Sigmoid head bias starting at the logit of the expected foreground
    /// fraction, so near-empty targets do not push the head into saturation.
    pub(crate) fn head_bias(name: impl Into<String>) -> Self {
        Self::new(name, [1], Init::Const((HEAD_PRIOR / (1.0 - HEAD_PRIOR)).ln()))
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ModelParams {
    pub fn from_named(named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut index = BTreeMap::new();
        let mut names = Vec::with_capacity(named.len());
        let mut tensors = Vec::with_capacity(named.len());
        for (i, (name, t)) in named.into_iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::Contract(format!("duplicate parameter name '{name}'")));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self { names, tensors, index })
    }

    pub(crate) fn init(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let named = specs
            .iter()
            .map(|s| {
                let len = s.shape.iter().product();
                let data = match s.init {
                    Init::Zeros => vec![0.0; len],
                    Init::Ones => vec![1.0; len],
                    Init::Const(v) => vec![v; len],
                    Init::Normal(std) => {
                        let mut r = rng::stream(seed, &s.name, 0);
                        (0..len)
                            .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r))
                            .collect()
                    }
                };
                Ok((s.name.clone(), Tensor::new(s.shape.clone(), data)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_named(named)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> std::result::Result<(), String> {
        match self.iter().find(|(_, t)| !t.is_finite()) {
            Some((name, _)) => Err(name.to_string()),
            None => Ok(()),
        }
    }

    /// Checks names and shapes against the layout a config expects.
    pub fn check(&self, specs: &[ParamSpec]) -> Result<()> {
        for s in specs {
            match self.get(&s.name) {
                None => return Err(Error::Contract(format!("missing parameter tensor '{}'", s.name))),
                Some(t) if t.shape() != s.shape.as_slice() => {
                    return Err(Error::Contract(format!(
                        "parameter tensor '{}' has shape {:?}, expected {:?}",
                        s.name,
                        t.shape(),
                        s.shape
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = self.names.iter().find(|n| !specs.iter().any(|s| &s.name == *n)) {
            return Err(Error::Contract(format!("unexpected parameter tensor '{extra}'")));
        }
        Ok(())
    }
}

/// Tape handles of the parameters, looked up by name.
#[derive(Clone, Debug)]
pub struct Bound {
    map: BTreeMap<String, Var>,
    order: Vec<Var>,
}

impl Bound {
    pub fn new(names: &[String], vars: &[Var]) -> Self {
        Self {
            map: names.iter().cloned().zip(vars.iter().copied()).collect(),
            order: vars.to_vec(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("missing parameter tensor '{name}'")))
    }

    /// Handles in parameter order.
    pub fn vars(&self) -> &[Var] {
        &self.order
    }
}

/// Adds every parameter to `tape`; `trainable` marks them for gradients.
pub fn bind(tape: &mut Tape, params: &ModelParams, trainable: bool) -> Bound {
    let vars: Vec<Var> = params.iter().map(|(name, t)| tape.param(name, t, trainable)).collect();
    Bound::new(params.names(), &vars)
}
