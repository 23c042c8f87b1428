//! Named parameter storage and binding onto a [`Graph`].
//!
//! Model code declares its parameters through a [`ParamSource`]. The same
//! declaration code drives both layout discovery ([`Layout`]) and graph
//! binding ([`Binder`]), so parameter order and names cannot drift apart.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal(0, std) truncated to ±2·std.
    TruncNormal(f64),
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub trait ParamSource {
    fn take(&mut self, name: String, shape: &[usize], init: Init) -> Result<Var>;
}

/// Records declarations without touching a graph.
#[derive(Debug, Default, Clone)]
pub struct Layout {
    pub specs: Vec<ParamSpec>,
}

impl Layout {
    pub fn numel(&self) -> usize {
        self.specs.iter().map(ParamSpec::numel).sum()
    }
}

impl ParamSource for Layout {
    fn take(&mut self, name: String, shape: &[usize], init: Init) -> Result<Var> {
        if self.specs.iter().any(|s| s.name == name) {
            return Err(Error::Config(format!("duplicate parameter name '{name}'")));
        }
        self.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            init,
        });
        Ok(Var::placeholder(self.specs.len() - 1))
    }
}

/// Ordered name → array map.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<F> {
    entries: Vec<(String, Tensor<F>)>,
}

impl<F: Real> ParamStore<F> {
    pub fn from_entries(entries: Vec<(String, Tensor<F>)>) -> Self {
        ParamStore { entries }
    }

    /// Initializes every array of `layout` from a seeded generator, in layout order.
    pub fn init(layout: &Layout, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = layout
            .specs
            .iter()
            .map(|spec| {
                let n = spec.numel();
                let data: Vec<F> = match spec.init {
                    Init::Zeros => vec![F::zero(); n],
                    Init::Ones => vec![F::one(); n],
                    Init::TruncNormal(std) => {
                        let normal = Normal::new(0.0, std).expect("valid std");
                        (0..n)
                            .map(|_| loop {
                                let v: f64 = normal.sample(&mut rng);
                                if v.abs() <= 2.0 * std {
                                    break F::of(v);
                                }
                            })
                            .collect()
                    }
                };
                let t = Tensor::new(&spec.shape, data).expect("layout shape");
                (spec.name.clone(), t)
            })
            .collect();
        ParamStore { entries }
    }

    /// Builds a store from `layout`, filling arrays with `fill(spec)`.
    pub fn from_layout_with(layout: &Layout, mut fill: impl FnMut(&ParamSpec) -> Tensor<F>) -> Self {
        let entries = layout
            .specs
            .iter()
            .map(|s| (s.name.clone(), fill(s)))
            .collect();
        ParamStore { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn entries(&self) -> &[(String, Tensor<F>)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [(String, Tensor<F>)] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn set(&mut self, name: &str, value: Tensor<F>) -> Result<()> {
        let slot = self
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("no parameter named '{name}'")))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape("set_param", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    /// Checks that names and shapes match `layout` exactly, in order.
    pub fn validate(&self, layout: &Layout) -> Result<()> {
        for spec in &layout.specs {
            let t = self
                .get(&spec.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing array '{}'", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "array '{}' has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        if self.entries.len() != layout.specs.len() {
            let extra: Vec<_> = self
                .entries
                .iter()
                .filter(|(n, _)| !layout.specs.iter().any(|s| &s.name == n))
                .map(|(n, _)| n.as_str())
                .collect();
            return Err(Error::Checkpoint(format!("unexpected arrays {extra:?}")));
        }
        Ok(())
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }

    pub fn binder<'a>(&'a self, graph: &'a mut Graph<F>) -> Binder<'a, F> {
        Binder {
            store: self,
            graph,
            vars: Vec::with_capacity(self.entries.len()),
            trainable: true,
        }
    }
}

/// Puts stored arrays on a graph as they are declared.
pub struct Binder<'a, F> {
    store: &'a ParamStore<F>,
    graph: &'a mut Graph<F>,
    vars: Vec<Var>,
    trainable: bool,
}

impl<'a, F: Real> Binder<'a, F> {
    /// Binds arrays as constants (no gradients are tracked).
    pub fn frozen(mut self) -> Self {
        self.trainable = false;
        self
    }

    pub fn graph(&mut self) -> &mut Graph<F> {
        self.graph
    }

    /// Vars in declaration order, parallel to the store entries.
    pub fn finish(self) -> Vec<Var> {
        self.vars
    }
}

impl<F: Real> ParamSource for Binder<'_, F> {
    fn take(&mut self, name: String, shape: &[usize], _init: Init) -> Result<Var> {
        let idx = self.vars.len();
        let (stored, t) = self
            .store
            .entries
            .get(idx)
            .ok_or_else(|| Error::Checkpoint(format!("missing array '{name}'")))?;
        if *stored != name {
            return Err(Error::Checkpoint(format!(
                "expected array '{name}' at position {idx}, found '{stored}'"
            )));
        }
        if t.shape() != shape {
            return Err(Error::shape("bind", t.shape(), shape));
        }
        let v = if self.trainable {
            self.graph.param(t.clone())
        } else {
            self.graph.constant(t.clone())
        };
        self.vars.push(v);
        Ok(v)
    }
}

/// Collects gradients of `vars` (parallel to the store) from `graph`;
/// unreached parameters get zeros.
pub fn collect_grads<F: Real>(store: &ParamStore<F>, graph: &Graph<F>, vars: &[Var]) -> Vec<Vec<F>> {
    store
        .entries()
        .iter()
        .zip(vars)
        .map(|((_, t), &v)| match graph.grad(v) {
            Some(g) => g.to_vec(),
            None => vec![F::zero(); t.len()],
        })
        .collect()
}
