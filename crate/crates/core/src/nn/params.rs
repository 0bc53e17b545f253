use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a tensor held in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Tensor,
    trainable: bool,
}

/// Named parameters and non-trainable buffers (normalization statistics).
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = self.entries.len();
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            trainable,
        });
        self.by_name.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn param(&mut self, name: &str, value: Tensor) -> ParamId {
        self.insert(name, value, true)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor) -> ParamId {
        self.insert(name, value, false)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// `(name, tensor)` pairs in name order.
    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.by_name
            .iter()
            .map(|(n, &i)| (n.as_str(), &self.entries[i].value))
    }

    pub fn num_trainable_values(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Copies every tensor from `other` whose name (after stripping
    /// `prefix` from `other`'s names) exists here. Shapes must agree.
    pub fn load_from(&mut self, other: &[(String, Tensor)], prefix: &str) -> Result<usize> {
        let mut loaded = 0;
        for (name, t) in other {
            let Some(local) = name.strip_prefix(prefix) else { continue };
            let Some(id) = self.find(local) else { continue };
            let cur = &mut self.entries[id.0].value;
            if cur.shape() != t.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {local}: checkpoint has {:?}, model expects {:?}",
                    t.shape(),
                    cur.shape()
                )));
            }
            *cur = t.clone();
            loaded += 1;
        }
        Ok(loaded)
    }

    /// Exponential moving update of normalization buffers.
    pub fn apply_running_updates(&mut self, updates: &[(ParamId, Tensor)], momentum: f32) {
        for (id, batch) in updates {
            let cur = &mut self.entries[id.0].value;
            for (c, b) in cur.data_mut().iter_mut().zip(batch.data()) {
                *c = (1.0 - momentum) * *c + momentum * b;
            }
        }
    }
}

/// Seeded parameter initializers.
pub struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    /// Uniform in `±gain·sqrt(3 / fan_in)` (Kaiming-uniform).
    pub fn kaiming(&mut self, shape: &[usize], fan_in: usize, gain: f32) -> Tensor {
        let bound = gain * (3.0 / fan_in as f32).sqrt();
        self.uniform(shape, bound)
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f32) -> Tensor {
        let len = shape.iter().product();
        let data = (0..len).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        Tensor::new(shape, data)
    }
}
