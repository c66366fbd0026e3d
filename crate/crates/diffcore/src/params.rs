use std::collections::BTreeMap;

use crate::error::{DiffError, Result};
use crate::graph::{Graph, NodeId};
use crate::real::Real;
use crate::tensor::Tensor;

/// Which optimization level a parameter belongs to.
///
/// `Meta` parameters are adapted in inner loops; `Base` parameters only
/// move in outer (or supervised) updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Partition {
    Meta,
    Base,
}

impl Partition {
    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Meta => "meta",
            Partition::Base => "base",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "meta" => Some(Partition::Meta),
            "base" => Some(Partition::Base),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Real> {
    pub tensor: Tensor<T>,
    pub partition: Partition,
}

/// Named parameter tensors, each tagged with its [`Partition`].
///
/// Iteration order is by name, which keeps every derived computation
/// deterministic.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T: Real = f32> {
    entries: BTreeMap<String, Param<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>, partition: Partition) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(DiffError::DuplicateParameter(name.to_string()));
        }
        self.entries
            .insert(name.to_string(), Param { tensor, partition });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| DiffError::UnknownParameter(name.to_string()))
    }

    pub fn partition_of(&self, name: &str) -> Result<Partition> {
        self.entries
            .get(name)
            .map(|p| p.partition)
            .ok_or_else(|| DiffError::UnknownParameter(name.to_string()))
    }

    /// Replaces the tensor under `name`; the shape must not change.
    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| DiffError::UnknownParameter(name.to_string()))?;
        if p.tensor.shape() != tensor.shape() {
            return Err(DiffError::InvalidShape(format!(
                "`{name}` has shape {:?}, replacement has {:?}",
                p.tensor.shape(),
                tensor.shape()
            )));
        }
        p.tensor = tensor;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn names_in(&self, partition: Partition) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, p)| p.partition == partition)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count, optionally restricted to one partition.
    pub fn count(&self, partition: Option<Partition>) -> usize {
        self.entries
            .values()
            .filter(|p| partition.map_or(true, |want| p.partition == want))
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            tensor: p.tensor.cast(),
                            partition: p.partition,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Registers every parameter as a named leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> Result<ParamNodes> {
        let mut nodes = BTreeMap::new();
        for (name, p) in &self.entries {
            nodes.insert(name.clone(), g.param(name, p.tensor.clone())?);
        }
        Ok(ParamNodes { nodes })
    }
}

/// Graph nodes standing in for parameters.
///
/// Entries can be substituted with derived nodes (e.g. adapted weights)
/// while the original leaves stay on the graph.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamNodes {
    nodes: BTreeMap<String, NodeId>,
}

impl ParamNodes {
    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| DiffError::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.nodes.contains_key(name)
    }

    pub fn set(&mut self, name: &str, id: NodeId) -> Result<()> {
        match self.nodes.get_mut(name) {
            Some(slot) => {
                *slot = id;
                Ok(())
            }
            None => Err(DiffError::UnknownParameter(name.to_string())),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.nodes.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn ids(&self, names: &[String]) -> Result<Vec<NodeId>> {
        names.iter().map(|n| self.get(n)).collect()
    }
}
