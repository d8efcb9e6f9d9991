use super::{Scalar, Tape, Tensor};

/// One named parameter tensor held off-tape.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<S> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<S>,
}

/// Ordered, named collection of parameter tensors. The order is fixed at
/// model construction; two sets from the same model always agree on names,
/// order, and shapes.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<S> {
    entries: Vec<ParamEntry<S>>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<S>) {
        let name = name.into();
        assert_eq!(
            values.len(),
            shape.iter().product::<usize>(),
            "parameter {name}: value count must match shape"
        );
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, shape, values });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<S>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<S>] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<S>> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// True when both sets have identical names, order, and shapes.
    pub fn same_layout(&self, other: &ParamSet<S>) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    /// Copies every entry onto a tape as leaf tensors.
    pub fn leaves(&self, tape: &mut Tape<S>, requires_grad: bool) -> TapeParams {
        let entries = self
            .entries
            .iter()
            .map(|e| {
                (
                    e.name.clone(),
                    tape.leaf(e.values.clone(), e.shape.clone(), requires_grad),
                )
            })
            .collect();
        TapeParams { entries }
    }

    /// Reads current tape values back into a fresh off-tape set.
    pub fn from_tape(tape: &Tape<S>, params: &TapeParams) -> Self {
        let entries = params
            .entries
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.clone(),
                shape: tape.shape(*t).to_vec(),
                values: tape.values(*t).to_vec(),
            })
            .collect();
        ParamSet { entries }
    }
}

/// The on-tape counterpart of a [`ParamSet`]: same names and order, but the
/// tensors live on (and are differentiable through) a specific tape.
#[derive(Clone, Debug)]
pub struct TapeParams {
    pub entries: Vec<(String, Tensor)>,
}

impl TapeParams {
    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|(_, t)| *t).collect()
    }

    pub fn get(&self, name: &str) -> Option<Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| *t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
