use std::sync::Arc;

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Optimizer group a parameter belongs to. Parameters trained through the
/// score-function path (presence posterior and its baseline) use a larger
/// learning rate than everything else.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Nvil,
    Rest,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Arc<Vec<T>>,
    pub group: ParamGroup,
}

/// Named, shaped parameter arrays. Values are shared copy-on-write with any
/// graph that loaded them, so a forward pass never copies weights.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        data: Vec<T>,
        group: ParamGroup,
    ) -> ParamId {
        let name = name.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "parameter {name}: data length does not match shape {shape:?}"
        );
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.entries.push(ParamEntry {
            name,
            shape: shape.to_vec(),
            value: Arc::new(data),
            group,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &[T] {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Vec<T> {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn set_group(&mut self, id: ParamId, group: ParamGroup) {
        self.entries[id.0].group = group;
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn zero_grads(&self) -> Grads<T> {
        Grads {
            by_param: self
                .entries
                .iter()
                .map(|e| vec![T::zero(); e.value.len()])
                .collect(),
        }
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Grads<T> {
    pub by_param: Vec<Vec<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, id: ParamId) -> &[T] {
        &self.by_param[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.by_param[id.0]
    }

    pub fn norm(&self) -> T {
        self.by_param
            .iter()
            .flat_map(|g| g.iter())
            .map(|&v| v * v)
            .sum::<T>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.by_param.iter().flatten().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.by_param.iter_mut().flatten() {
            *g *= factor;
        }
    }

    pub fn add_assign(&mut self, other: &Grads<T>) {
        for (a, b) in self.by_param.iter_mut().zip(&other.by_param) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }
}
