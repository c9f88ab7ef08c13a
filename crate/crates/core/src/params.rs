//! Named parameter store shared by every branch of the network.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::Rng;

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Sub-module groups. A parameter's group is the prefix of its name before
/// the first `.`.
pub const GROUPS: [&str; 5] = ["encoder", "cross_reference", "condition", "decoder", "refinement"];

/// Exactly one tensor per name; both Siamese branches and every refinement
/// step read the same entry.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ModelParams<T> {
    fn default() -> Self {
        Self { tensors: BTreeMap::new() }
    }
}

pub fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

impl<T: Scalar> ModelParams<T> {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if !GROUPS.contains(&group_of(&name)) {
            return Err(Error::InvalidInput(format!("parameter {name} has no known group")));
        }
        if self.tensors.insert(name.clone(), t).is_some() {
            return Err(Error::InvalidInput(format!("duplicate parameter {name}")));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
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
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Names within one group.
    pub fn group(&self, group: &str) -> Vec<&str> {
        self.names().filter(|n| group_of(n) == group).collect()
    }

    pub fn groups_present(&self) -> BTreeSet<&str> {
        self.names().map(group_of).collect()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Register every tensor on the graph; groups in `frozen` become constants.
    pub fn bind(&self, g: &mut Graph<T>, frozen: &[&str]) -> ParamNodes {
        let mut map = HashMap::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let id = if frozen.contains(&group_of(name)) {
                g.input(t.clone())
            } else {
                g.param(t.clone())
            };
            map.insert(name.clone(), id);
        }
        ParamNodes { map }
    }
}

/// Graph node of each bound parameter.
#[derive(Clone, Debug)]
pub struct ParamNodes {
    map: HashMap<String, NodeId>,
}

impl ParamNodes {
    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("missing parameter {name}")))
    }

    pub fn opt(&self, name: &str) -> Option<NodeId> {
        self.map.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.map.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Declares layers with He-normal weights and zero biases.
pub struct ParamBuilder<'a, T, R: Rng + ?Sized> {
    pub params: ModelParams<T>,
    pub rng: &'a mut R,
}

impl<'a, T: Scalar, R: Rng + ?Sized> ParamBuilder<'a, T, R> {
    pub fn new(rng: &'a mut R) -> Self {
        Self { params: ModelParams::default(), rng }
    }

    pub fn conv(&mut self, name: &str, cout: usize, cin: usize, kh: usize, kw: usize) -> Result<()> {
        let std = (2.0 / (cin * kh * kw) as f64).sqrt();
        self.conv_with_std(name, cout, cin, kh, kw, std)
    }

    pub fn conv_with_std(
        &mut self,
        name: &str,
        cout: usize,
        cin: usize,
        kh: usize,
        kw: usize,
        std: f64,
    ) -> Result<()> {
        let w = Tensor::randn(&[cout, cin, kh, kw], std, self.rng);
        self.params.insert(format!("{name}.weight"), w)?;
        self.params.insert(format!("{name}.bias"), Tensor::zeros(&[cout]))
    }

    pub fn linear(&mut self, name: &str, fout: usize, fin: usize) -> Result<()> {
        let std = (2.0 / fin as f64).sqrt();
        let w = Tensor::randn(&[fout, fin], std, self.rng);
        self.params.insert(format!("{name}.weight"), w)?;
        self.params.insert(format!("{name}.bias"), Tensor::zeros(&[fout]))
    }

    pub fn finish(self) -> ModelParams<T> {
        self.params
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_duplicates_and_unknown_groups() {
        let mut p = ModelParams::<f32>::default();
        p.insert("encoder.a", Tensor::zeros(&[1])).unwrap();
        assert!(p.insert("encoder.a", Tensor::zeros(&[1])).is_err());
        assert!(p.insert("mystery.a", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn frozen_groups_bind_as_constants() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = ParamBuilder::<f64, _>::new(&mut rng);
        b.conv("encoder.c", 2, 1, 3, 3).unwrap();
        b.linear("decoder.l", 2, 3).unwrap();
        let p = b.finish();
        let mut g = Graph::new();
        let nodes = p.bind(&mut g, &["encoder"]);
        assert!(!g.requires_grad(nodes.get("encoder.c.weight").unwrap()));
        assert!(g.requires_grad(nodes.get("decoder.l.bias").unwrap()));
        assert_eq!(p.group("decoder"), vec!["decoder.l.bias", "decoder.l.weight"]);
    }
}
