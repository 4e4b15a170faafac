//! Named parameter registry and the forward-pass session that binds
//! registry entries onto an autodiff tape.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, ObservedStats, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Role of a registry entry. Only `Weight` entries receive weight decay and
/// `Buffer` entries are not trainable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
    Buffer,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        self != ParamKind::Buffer
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Registry of every tensor a model owns, in creation order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: String, kind: ParamKind, value: Tensor) -> Result<ParamId> {
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, kind, value });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn id_at(&self, index: usize) -> Option<ParamId> {
        (index < self.entries.len()).then_some(ParamId(index))
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e))
    }

    /// Element count over trainable entries.
    pub fn parameter_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind.trainable())
            .map(|e| e.value.numel())
            .sum()
    }

    /// Element count of the given ids that are trainable.
    pub fn count_of(&self, ids: &[ParamId]) -> usize {
        ids.iter()
            .map(|&id| self.entry(id))
            .filter(|e| e.kind.trainable())
            .map(|e| e.value.numel())
            .sum()
    }
}

/// Creates registry entries under a dotted name prefix.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        ParamBuilder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: impl AsRef<str>) -> ParamBuilder<'_> {
        ParamBuilder {
            prefix: self.qualify(name.as_ref()),
            store: self.store,
            rng: self.rng,
        }
    }

    fn qualify(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// He-uniform initialization, bound `sqrt(6 / fan_in)`.
    pub fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        let t = Tensor::from_vec(shape, data)?;
        self.store.insert(self.qualify(name), ParamKind::Weight, t)
    }

    pub fn constant(
        &mut self,
        name: &str,
        kind: ParamKind,
        shape: &[usize],
        value: f64,
    ) -> Result<ParamId> {
        let t = Tensor::full(shape, value)?;
        self.store.insert(self.qualify(name), kind, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Pending blend of observed batch statistics into running buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub observed: ObservedStats,
    pub momentum: f64,
}

impl ParamStore {
    /// `running = (1 - momentum)·running + momentum·observed`, in order.
    pub fn apply_running(&mut self, updates: &[RunningUpdate]) {
        for u in updates {
            for (id, obs) in [(u.mean, &u.observed.mean), (u.var, &u.observed.var)] {
                for (r, &o) in self.get_mut(id).data_mut().iter_mut().zip(obs) {
                    *r = (1.0 - u.momentum) * *r + u.momentum * o;
                }
            }
        }
    }
}

/// One forward pass: a fresh tape plus lazily bound parameters.
///
/// Sessions only read the registry. Train sessions queue running-statistic
/// updates, which the caller applies with [`ParamStore::apply_running`].
pub struct Session<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    mode: Mode,
    bound: Vec<Option<Var>>,
    pending: Vec<RunningUpdate>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode) -> Self {
        Session {
            tape: Tape::new(),
            bound: vec![None; store.len()],
            store,
            mode,
            pending: Vec::new(),
        }
    }

    /// Session recording onto an existing tape, with some registry entries
    /// already bound to values on it.
    pub fn on_tape(
        tape: Tape,
        store: &'a ParamStore,
        mode: Mode,
        bindings: &[(ParamId, Var)],
    ) -> Self {
        let mut s = Self::new(store, mode);
        s.tape = tape;
        for &(id, v) in bindings {
            s.bound[id.index()] = Some(v);
        }
        s
    }

    pub fn into_tape(self) -> Tape {
        self.tape
    }

    /// Whether normalization layers should use batch statistics.
    pub fn batch_norm_stats(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn eval(store: &'a ParamStore) -> Self {
        Self::new(store, Mode::Eval)
    }

    pub fn train(store: &'a ParamStore) -> Self {
        Self::new(store, Mode::Train)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.tape.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Tape handle for a registry entry, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).clone());
        self.bound[id.index()] = Some(v);
        v
    }

    pub(crate) fn queue_running(
        &mut self,
        mean: ParamId,
        var: ParamId,
        observed: ObservedStats,
        momentum: f64,
    ) -> Result<()> {
        if self.mode != Mode::Train {
            return Err(Error::invalid("running statistics need a training session"));
        }
        self.pending.push(RunningUpdate {
            mean,
            var,
            observed,
            momentum,
        });
        Ok(())
    }

    /// Queued running-statistic updates, in recording order.
    pub fn running_updates(&self) -> &[RunningUpdate] {
        &self.pending
    }

    pub fn take_running_updates(&mut self) -> Vec<RunningUpdate> {
        std::mem::take(&mut self.pending)
    }

    /// Gradients of every bound trainable entry, in registry order.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        let store = self.store();
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .filter(|(id, _)| store.entry(*id).kind.trainable())
            .map(|(id, v)| {
                let g = grads.get(v).cloned().unwrap_or_else(|| {
                    Tensor::raw(
                        store.get(id).shape().to_vec(),
                        vec![0.0; store.get(id).numel()],
                    )
                });
                (id, g)
            })
            .collect()
    }
}
