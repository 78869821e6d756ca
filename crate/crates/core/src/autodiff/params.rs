use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;

use super::tape::Mat;

/// Index of an entry in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Index of an optimizer group (one Adam step counter per group).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GroupId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Mat,
    pub grad: Mat,
    pub(crate) first_moment: Mat,
    pub(crate) second_moment: Mat,
    pub trainable: bool,
    pub group: GroupId,
}

#[derive(Clone, Debug)]
pub(crate) struct Group {
    pub(crate) name: String,
    pub(crate) step: u64,
}

/// Flat registry of every trainable array, addressed by name.
///
/// Entries keep their insertion order, which is also the order used for
/// serialization and for the optimizer sweep.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, ParamId>,
    pub(crate) groups: Vec<Group>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Look up or create the optimizer group called `name`.
    pub fn group(&mut self, name: &str) -> GroupId {
        if let Some(i) = self.groups.iter().position(|g| g.name == name) {
            return GroupId(i);
        }
        self.groups.push(Group {
            name: name.to_string(),
            step: 0,
        });
        GroupId(self.groups.len() - 1)
    }

    pub fn group_id(&self, name: &str) -> Option<GroupId> {
        self.groups.iter().position(|g| g.name == name).map(GroupId)
    }

    pub fn group_step(&self, group: GroupId) -> u64 {
        self.groups[group.0].step
    }

    /// Register a new entry. Re-registering an existing name replaces its value
    /// and resets its optimizer state.
    pub fn insert(&mut self, name: &str, value: Mat, group: GroupId) -> ParamId {
        let dim = value.dim();
        let entry = ParamEntry {
            name: name.to_string(),
            grad: Array2::zeros(dim),
            first_moment: Array2::zeros(dim),
            second_moment: Array2::zeros(dim),
            value,
            trainable: true,
            group,
        };
        if let Some(&id) = self.index.get(name) {
            self.entries[id.0] = entry;
            return id;
        }
        self.entries.push(entry);
        let id = ParamId(self.entries.len() - 1);
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Mat {
        &self.entries[id.0].grad
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    /// Freeze or unfreeze every entry whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            e.trainable = trainable;
        }
    }

    /// Add uniform noise in `[-amplitude, amplitude]` to every entry whose
    /// name starts with `prefix`. Used to move networks off their identity init.
    pub fn perturb_prefix<R: Rng>(&mut self, prefix: &str, amplitude: f64, rng: &mut R) {
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            e.value.mapv_inplace(|v| v + rng.gen_range(-amplitude..=amplitude));
        }
    }

    /// Copy values, matched by name, for every entry of `other` whose name
    /// starts with `prefix`. Returns the names that are missing here or whose
    /// shapes differ; those entries are left untouched.
    pub fn copy_values_from(&mut self, other: &ParamStore, prefix: &str) -> Vec<String> {
        let mut mismatched = vec![];
        for e in other.entries.iter().filter(|e| e.name.starts_with(prefix)) {
            match self.index.get(&e.name) {
                Some(&id) if self.entries[id.0].value.dim() == e.value.dim() => {
                    self.entries[id.0].value.assign(&e.value);
                }
                _ => mismatched.push(e.name.clone()),
            }
        }
        mismatched
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Mat) {
        self.entries[id.0].grad += g;
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    pub(crate) fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    /// Total number of scalar values across all entries.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}
