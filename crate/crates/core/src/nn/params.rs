use indexmap::IndexMap;

use crate::autodiff::{Graph, Var};
use crate::tensor::{numel, Tensor};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scope {
    Backbone,
    Head,
}

impl Scope {
    pub fn to_byte(self) -> u8 {
        match self {
            Scope::Backbone => 0,
            Scope::Head => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Scope::Backbone),
            1 => Some(Scope::Head),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<S> {
    pub scope: Scope,
    pub value: Tensor<S>,
}

/// Named, ordered model parameters. Insertion order is the iteration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet<S> {
    entries: IndexMap<String, Param<S>>,
}

impl<S: Scalar> ParameterSet<S> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    /// Adds an entry; returns `false` (and leaves the set unchanged) on a duplicate name.
    pub fn insert(&mut self, name: impl Into<String>, scope: Scope, value: Tensor<S>) -> bool {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return false;
        }
        self.entries.insert(name, Param { scope, value });
        true
    }

    pub fn get(&self, name: &str) -> Option<&Param<S>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<S>> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<S>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<S>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Entries of one scope, in order.
    pub fn filter_scope(&self, scope: Scope) -> ParameterSet<S> {
        Self {
            entries: self
                .entries
                .iter()
                .filter(|(_, p)| p.scope == scope)
                .map(|(k, p)| (k.clone(), p.clone()))
                .collect(),
        }
    }

    /// Concatenation of all entries' values in iteration order.
    pub fn flatten(&self) -> Vec<S> {
        self.entries
            .values()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    /// Rebuilds a set with this one's names, scopes and shapes from a flat vector.
    pub fn unflatten(&self, flat: &[S]) -> Option<ParameterSet<S>> {
        if flat.len() != self.numel() {
            return None;
        }
        let mut at = 0;
        let mut out = ParameterSet::new();
        for (name, p) in &self.entries {
            let n = numel(p.value.shape());
            let t = Tensor::new(p.value.shape().to_vec(), flat[at..at + n].to_vec()).ok()?;
            out.insert(name.clone(), p.scope, t);
            at += n;
        }
        Some(out)
    }

    pub fn cast<T: Scalar>(&self) -> ParameterSet<T> {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            scope: p.scope,
                            value: p.value.cast(),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Adds every entry to `graph` as a differentiable leaf.
    pub fn attach<'g>(&self, graph: &'g Graph<S>) -> ParamVars<'g, S> {
        self.attach_with(graph, |g, t| g.param(t))
    }

    /// Adds every entry to `graph` as a constant.
    pub fn attach_const<'g>(&self, graph: &'g Graph<S>) -> ParamVars<'g, S> {
        self.attach_with(graph, |g, t| g.constant(t))
    }

    /// Pairs the entries, in order, with existing graph variables.
    pub fn bind<'g>(&self, vars: &[Var<'g, S>]) -> Option<ParamVars<'g, S>> {
        if vars.len() != self.entries.len() {
            return None;
        }
        Some(ParamVars {
            entries: self
                .entries
                .iter()
                .zip(vars)
                .map(|((k, p), v)| (k.clone(), (p.scope, *v)))
                .collect(),
        })
    }

    fn attach_with<'g>(
        &self,
        graph: &'g Graph<S>,
        leaf: impl Fn(&'g Graph<S>, Tensor<S>) -> Var<'g, S>,
    ) -> ParamVars<'g, S> {
        ParamVars {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| (k.clone(), (p.scope, leaf(graph, p.value.clone()))))
                .collect(),
        }
    }
}

/// Parameters living in a graph, keyed like the [`ParameterSet`] they came from.
#[derive(Debug, Clone)]
pub struct ParamVars<'g, S: Scalar> {
    entries: IndexMap<String, (Scope, Var<'g, S>)>,
}

impl<'g, S: Scalar> ParamVars<'g, S> {
    pub fn get(&self, name: &str) -> Option<Var<'g, S>> {
        self.entries.get(name).map(|(_, v)| *v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Scope, Var<'g, S>)> {
        self.entries.iter().map(|(k, (s, v))| (k.as_str(), *s, *v))
    }

    pub fn vars(&self) -> Vec<Var<'g, S>> {
        self.entries.values().map(|(_, v)| *v).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// New mapping with every var passed through `f`, names and scopes unchanged.
    pub fn map_vars(
        &self,
        mut f: impl FnMut(&str, Scope, Var<'g, S>) -> Result<Var<'g, S>, crate::autodiff::AutodiffError>,
    ) -> Result<Self, crate::autodiff::AutodiffError> {
        let mut entries = IndexMap::with_capacity(self.entries.len());
        for (k, (s, v)) in &self.entries {
            entries.insert(k.clone(), (*s, f(k, *s, *v)?));
        }
        Ok(Self { entries })
    }

    /// Current values as a detached [`ParameterSet`].
    pub fn snapshot(&self) -> ParameterSet<S> {
        let mut out = ParameterSet::new();
        for (k, (s, v)) in &self.entries {
            out.insert(k.clone(), *s, v.value());
        }
        out
    }
}
