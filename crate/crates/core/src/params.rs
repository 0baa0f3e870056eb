//! Named parameter storage, seeded initialization, and binding onto a tape.

use std::collections::HashMap;
use std::ops::Index;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// First dotted segment of the name.
    pub fn group(&self) -> &str {
        self.name.split('.').next().unwrap_or(&self.name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

/// FNV-1a over the seed bytes followed by the name, so each parameter
/// draws from its own stream regardless of construction order.
pub fn sub_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(name.as_bytes()) {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn init_tensor(shape: &[usize], init: Init, seed: u64) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(shape.to_vec()),
        Init::Ones => Tensor::full(shape.to_vec(), 1.0),
        Init::Normal(std) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Tensor::from_fn(shape.to_vec(), |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * std
            })
        }
    }
}

/// Every parameter of a model in construction order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    specs: Vec<ParamSpec>,
    values: Vec<Arc<Tensor>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// False for a layout-only store built for accounting.
    pub fn is_materialized(&self) -> bool {
        self.values.len() == self.specs.len()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.value(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamSpec, &Tensor)> {
        self.specs.iter().zip(self.values.iter().map(|v| v.as_ref()))
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.specs
            .iter()
            .enumerate()
            .filter(|(_, s)| s.trainable)
            .map(|(i, _)| ParamId(i))
    }

    /// Replaces a value after checking its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let spec = &self.specs[id.0];
        if value.shape() != spec.shape.as_slice() {
            return Err(Error::ShapeMismatch {
                name: spec.name.clone(),
                expected: spec.shape.clone(),
                found: value.shape().to_vec(),
            });
        }
        self.values[id.0] = Arc::new(value);
        Ok(())
    }

    pub fn count(&self, trainable: Option<bool>) -> usize {
        self.specs
            .iter()
            .filter(|s| trainable.is_none_or(|t| s.trainable == t))
            .map(ParamSpec::numel)
            .sum()
    }

    /// Records every parameter on `tape`; trainable ones receive gradients.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        self.bind_with(tape, true)
    }

    /// Records every parameter as a constant.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        self.bind_with(tape, false)
    }

    fn bind_with<'t>(&self, tape: &'t Tape, grads: bool) -> Bound<'t> {
        assert!(self.is_materialized(), "binding a layout-only parameter store");
        let vars = self
            .specs
            .iter()
            .zip(&self.values)
            .map(|(s, v)| {
                if grads && s.trainable {
                    tape.param_shared(v.clone())
                } else {
                    tape.constant_shared(v.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters of one store recorded on one tape.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Index<ParamId> for Bound<'t> {
    type Output = Var<'t>;
    fn index(&self, id: ParamId) -> &Var<'t> {
        &self.vars[id.0]
    }
}

impl<'t> Bound<'t> {
    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    /// Substitutes the variable used for one parameter.
    pub fn replace(&mut self, id: ParamId, var: Var<'t>) {
        self.vars[id.0] = var;
    }
}

/// Allocates named parameters. In layout mode only shapes are recorded.
pub struct ParamBuilder {
    store: ParamStore,
    seed: u64,
    materialize: bool,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        ParamBuilder {
            store: ParamStore::default(),
            seed,
            materialize: true,
        }
    }

    pub fn layout_only() -> Self {
        ParamBuilder {
            store: ParamStore::default(),
            seed: 0,
            materialize: false,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.store.index.contains_key(&name) {
            return Err(Error::config("parameter", format!("duplicate parameter name `{name}`")));
        }
        let id = self.store.specs.len();
        if self.materialize {
            let t = init_tensor(shape, init, sub_seed(self.seed, &name));
            self.store.values.push(Arc::new(t));
        }
        self.store.index.insert(name.clone(), id);
        self.store.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            trainable,
        });
        Ok(ParamId(id))
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sub_seeds_differ_by_name_and_seed() {
        assert_ne!(sub_seed(0, "a"), sub_seed(0, "b"));
        assert_ne!(sub_seed(0, "a"), sub_seed(1, "a"));
        assert_eq!(sub_seed(7, "vit.cls"), sub_seed(7, "vit.cls"));
    }

    #[test]
    fn init_is_order_independent() {
        let mut a = ParamBuilder::new(3);
        let x = a.add("x", &[4], Init::Normal(1.0), true).unwrap();
        a.add("y", &[4], Init::Normal(1.0), true).unwrap();
        let mut b = ParamBuilder::new(3);
        b.add("y", &[4], Init::Normal(1.0), true).unwrap();
        let bx = b.add("x", &[4], Init::Normal(1.0), true).unwrap();
        let (a, b) = (a.finish(), b.finish());
        assert_eq!(a.value(x).data(), b.value(bx).data());
    }

    #[test]
    fn duplicate_names_rejected_and_counts_partition() {
        let mut b = ParamBuilder::layout_only();
        b.add("w", &[3, 2], Init::Zeros, true).unwrap();
        b.add("f", &[5], Init::Zeros, false).unwrap();
        assert!(b.add("w", &[1], Init::Zeros, true).is_err());
        let s = b.finish();
        assert!(!s.is_materialized());
        assert_eq!(s.count(Some(true)), 6);
        assert_eq!(s.count(Some(false)), 5);
        assert_eq!(s.count(None), 11);
    }

    #[test]
    fn binding_marks_only_trainable_params() {
        let mut b = ParamBuilder::new(0);
        let w = b.add("w", &[2], Init::Ones, true).unwrap();
        let f = b.add("f", &[2], Init::Ones, false).unwrap();
        let s = b.finish();
        let tape = Tape::new();
        let p = s.bind(&tape);
        assert!(p[w].requires_grad());
        assert!(!p[f].requires_grad());
        let q = s.bind_frozen(&tape);
        assert!(!q[w].requires_grad());
    }
}
