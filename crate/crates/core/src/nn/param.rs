//! Named parameter storage with frozen snapshots.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::mat::Mat;
use super::NnError;

static NEXT_STORE_UID: AtomicU64 = AtomicU64::new(1);

/// Handle to a parameter inside a specific [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    pub(crate) store: u64,
    pub(crate) index: usize,
}

impl ParamId {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// Weight-decay group. Backbone-initialized weights and freshly initialized
/// weights use different decay coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    New,
    BackboneInit,
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub values: Mat,
    pub trainable: bool,
    /// Copy of `values` taken at construction. Present for every frozen
    /// parameter and for trainable weights anchored to a frozen origin.
    pub frozen_snapshot: Option<Mat>,
    pub group: ParamGroup,
}

impl Parameter {
    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }
}

/// Owns every parameter of a model. Names are unique path strings
/// (`vision.layer3.attn.wq`).
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    /// Clones receive a fresh identity so tapes never confuse them with the original.
    fn clone(&self) -> Self {
        Self {
            uid: NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed),
            params: self.params.clone(),
            by_name: self.by_name.clone(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            uid: NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    /// Registers a parameter. Frozen parameters get a snapshot of their initial values.
    pub fn add(&mut self, name: impl Into<String>, values: Mat, trainable: bool) -> Result<ParamId, NnError> {
        self.add_in_group(name, values, trainable, ParamGroup::New)
    }

    pub fn add_in_group(
        &mut self,
        name: impl Into<String>,
        values: Mat,
        trainable: bool,
        group: ParamGroup,
    ) -> Result<ParamId, NnError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(NnError::DuplicateParameter(name));
        }
        let index = self.params.len();
        let frozen_snapshot = if trainable { None } else { Some(values.clone()) };
        self.by_name.insert(name.clone(), index);
        self.params.push(Parameter {
            name,
            values,
            trainable,
            frozen_snapshot,
            group,
        });
        Ok(ParamId { store: self.uid, index })
    }

    /// Registers a trainable parameter that keeps an immutable copy of its
    /// initial (anchor) values.
    pub fn add_anchored(&mut self, name: impl Into<String>, values: Mat) -> Result<ParamId, NnError> {
        let id = self.add_in_group(name, values, true, ParamGroup::BackboneInit)?;
        let p = &mut self.params[id.index];
        p.frozen_snapshot = Some(p.values.clone());
        Ok(id)
    }

    fn check(&self, id: ParamId) {
        assert_eq!(id.store, self.uid, "parameter id belongs to a different store");
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        self.check(id);
        &self.params[id.index]
    }

    pub fn values(&self, id: ParamId) -> &Mat {
        &self.get(id).values
    }

    /// Mutable access for optimizers and loaders. Frozen parameters are refused.
    pub fn values_mut(&mut self, id: ParamId) -> Result<&mut Mat, NnError> {
        self.check(id);
        let p = &mut self.params[id.index];
        if !p.trainable {
            return Err(NnError::FrozenParameter(p.name.clone()));
        }
        Ok(&mut p.values)
    }

    /// Overwrites a parameter regardless of trainability and refreshes the
    /// snapshot of frozen parameters. Used when loading checkpoints and by tests
    /// that construct special-case weights.
    pub fn overwrite(&mut self, id: ParamId, values: Mat) -> Result<(), NnError> {
        self.check(id);
        let p = &mut self.params[id.index];
        if p.values.shape() != values.shape() {
            return Err(NnError::Shape(format!(
                "{}: expected {:?}, got {:?}",
                p.name,
                p.values.shape(),
                values.shape()
            )));
        }
        p.values = values;
        if !p.trainable {
            p.frozen_snapshot = Some(p.values.clone());
        }
        Ok(())
    }

    /// Switches trainability. Frozen parameters receive a snapshot of their current values.
    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.check(id);
        let p = &mut self.params[id.index];
        p.trainable = trainable;
        if !trainable {
            p.frozen_snapshot = Some(p.values.clone());
        } else if p.group == ParamGroup::New {
            p.frozen_snapshot = None;
        }
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&index| ParamId { store: self.uid, index })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(move |index| ParamId { store: self.uid, index })
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> + '_ {
        self.params
            .iter()
            .enumerate()
            .map(move |(index, p)| (ParamId { store: self.uid, index }, p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
    }

    /// Names of frozen parameters whose values drifted from their snapshot.
    pub fn frozen_violations(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|p| !p.trainable)
            .filter(|p| !p.frozen_snapshot.as_ref().is_some_and(|s| s.bit_eq(&p.values)))
            .map(|p| p.name.clone())
            .collect()
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    /// Rounds every parameter to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            for v in p.values.data_mut() {
                *v = *v as f32 as f64;
            }
            if let Some(s) = &mut p.frozen_snapshot {
                for v in s.data_mut() {
                    *v = *v as f32 as f64;
                }
            }
        }
    }
}
