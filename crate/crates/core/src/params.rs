//! Named parameter collections and the model bundle that groups them.

use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::tensor::Tensor;

/// An ordered set of named tensors with one trainable flag for the whole set.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCollection {
    params: BTreeMap<String, Tensor>,
    pub trainable: bool,
}

impl ParamCollection {
    pub fn new(trainable: bool) -> Self {
        ParamCollection {
            params: BTreeMap::new(),
            trainable,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Largest absolute elementwise difference against another collection of the same layout.
    pub fn max_abs_diff(&self, other: &ParamCollection) -> f64 {
        assert_eq!(
            self.params.keys().collect::<Vec<_>>(),
            other.params.keys().collect::<Vec<_>>(),
            "parameter layouts differ"
        );
        self.params
            .values()
            .zip(other.params.values())
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }

    /// Bit-level fingerprint of names, shapes and values.
    pub fn checksum(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (name, t) in &self.params {
            name.hash(&mut h);
            t.shape().hash(&mut h);
            for v in t.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Puts every tensor on `graph`. Tensors are tracked for gradients only when
    /// `track` is set and the collection is trainable.
    pub fn bind<'g>(&self, graph: &'g Graph, track: bool) -> Bound<'g> {
        let requires = track && self.trainable;
        Bound {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), graph.leaf(Rc::new(v.clone()), requires)))
                .collect(),
        }
    }
}

/// A parameter collection placed on a graph.
pub struct Bound<'g> {
    vars: BTreeMap<String, Var<'g>>,
}

impl<'g> Bound<'g> {
    /// Binds caller-made variables, e.g. finite-difference probes.
    pub fn from_vars(pairs: impl IntoIterator<Item = (String, Var<'g>)>) -> Self {
        Bound {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Var<'g> {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn vars(&self) -> Vec<Var<'g>> {
        self.vars.values().copied().collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.keys().cloned().collect()
    }
}

/// Weight initialiser drawing from a caller-owned RNG.
pub struct Init<'r, R: Rng> {
    rng: &'r mut R,
}

impl<'r, R: Rng> Init<'r, R> {
    pub fn new(rng: &'r mut R) -> Self {
        Init { rng }
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        Tensor::from_parts(
            shape.to_vec(),
            (0..n).map(|_| dist.sample(&mut *self.rng)).collect(),
        )
    }
}

pub const COLLECTIONS: [&str; 4] = ["mapping", "synthesis", "discriminator", "decoupler"];

/// Every trainable piece of the adaptation setup except the frozen encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub mapping: ParamCollection,
    pub synthesis: ParamCollection,
    pub discriminator: ParamCollection,
    pub decoupler: ParamCollection,
}

impl ModelBundle {
    pub fn collection(&self, name: &str) -> Option<&ParamCollection> {
        match name {
            "mapping" => Some(&self.mapping),
            "synthesis" => Some(&self.synthesis),
            "discriminator" => Some(&self.discriminator),
            "decoupler" => Some(&self.decoupler),
            _ => None,
        }
    }

    pub fn collection_mut(&mut self, name: &str) -> Option<&mut ParamCollection> {
        match name {
            "mapping" => Some(&mut self.mapping),
            "synthesis" => Some(&mut self.synthesis),
            "discriminator" => Some(&mut self.discriminator),
            "decoupler" => Some(&mut self.decoupler),
            _ => None,
        }
    }

    pub fn collections(&self) -> impl Iterator<Item = (&'static str, &ParamCollection)> {
        COLLECTIONS
            .iter()
            .map(move |&n| (n, self.collection(n).expect("known collection")))
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for n in COLLECTIONS {
            self.collection_mut(n).expect("known collection").trainable = trainable;
        }
    }

    /// Independent deep copy. The two bundles share no storage.
    pub fn clone_model(&self) -> ModelBundle {
        self.clone()
    }

    pub fn checksum(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (name, c) in self.collections() {
            name.hash(&mut h);
            c.checksum().hash(&mut h);
        }
        h.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_collection() -> ParamCollection {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init::new(&mut rng);
        let mut c = ParamCollection::new(true);
        c.insert("w", init.normal(&[3, 3], 0.02));
        c.insert("b", Tensor::zeros(&[3]));
        c
    }

    fn bundle() -> ModelBundle {
        ModelBundle {
            mapping: sample_collection(),
            synthesis: sample_collection(),
            discriminator: sample_collection(),
            decoupler: sample_collection(),
        }
    }

    #[test]
    fn clone_is_deep() {
        let mut src = bundle();
        let dst = src.clone_model();
        assert_eq!(src.checksum(), dst.checksum());
        for (_, t) in src.mapping.iter_mut() {
            t.data_mut().fill(0.0);
        }
        assert_ne!(src.checksum(), dst.checksum());
        assert!(dst.mapping.get("w").unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn trainable_flags_are_independent() {
        let src = bundle();
        let mut dst = src.clone_model();
        dst.set_all_trainable(false);
        assert!(src.mapping.trainable);
        assert!(!dst.mapping.trainable);
    }

    #[test]
    fn bind_respects_trainable_flag() {
        let mut c = sample_collection();
        let g = Graph::new();
        assert!(c.bind(&g, true).get("w").requires_grad());
        c.trainable = false;
        assert!(!c.bind(&g, true).get("w").requires_grad());
    }
}
