//! Reverse-mode automatic differentiation on dynamic-rank arrays.
//!
//! A [`Tape`] records one forward computation; [`Tape::backward`] replays it
//! in reverse to accumulate gradients. Graphs are rebuilt per step (values are
//! reference-counted, so captures are cheap) and dropped afterwards.
//! Parameters live outside the tape in [`Params`] registries and are bound as
//! leaves per step; binding is idempotent so shared weights accumulate into a
//! single gradient slot.

mod conv;
mod norm;
mod ops;
mod pool;

pub use conv::{col2im, im2col};

use crate::element::Element;
use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{ArrayD, IxDyn};

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) type Value<F> = Rc<ArrayD<F>>;

/// Backward closure: receives the output gradient and a per-parent mask of
/// which gradients are actually needed, returns one contribution per parent.
type BackFn<F> = Box<dyn Fn(&ArrayD<F>, &[bool]) -> Vec<Option<ArrayD<F>>>>;

struct Node<F: Element> {
    value: Value<F>,
    parents: Vec<Var>,
    back: Option<BackFn<F>>,
    needs_grad: bool,
}

pub struct Tape<F: Element> {
    nodes: RefCell<Vec<Node<F>>>,
    bindings: RefCell<HashMap<(u64, usize), Var>>,
}

impl<F: Element> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Element> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            bindings: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Insert a value that does not require gradients.
    pub fn constant(&self, v: ArrayD<F>) -> Var {
        self.insert(Rc::new(v), Vec::new(), None, false)
    }

    /// Insert a differentiable leaf (an input under test or a parameter).
    pub fn leaf(&self, v: ArrayD<F>) -> Var {
        self.insert(Rc::new(v), Vec::new(), None, true)
    }

    /// Bind a registered parameter. Repeated binds of the same parameter on
    /// one tape return the same node.
    pub fn param(&self, params: &Params<F>, id: ParamId) -> Var {
        if let Some(&v) = self.bindings.borrow().get(&(params.tag, id.0)) {
            return v;
        }
        let entry = &params.entries[id.0];
        let var = self.insert(
            Rc::new(entry.value.clone()),
            Vec::new(),
            None,
            entry.trainable,
        );
        self.bindings.borrow_mut().insert((params.tag, id.0), var);
        var
    }

    /// Cut the graph: same value, no gradient flow.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        self.insert(value, Vec::new(), None, false)
    }

    pub fn value(&self, v: Var) -> Value<F> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Extract a scalar node's value.
    pub fn scalar(&self, v: Var) -> F {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar() on non-scalar node");
        *val.iter().next().unwrap()
    }

    pub(crate) fn insert(
        &self,
        value: Value<F>,
        parents: Vec<Var>,
        back: Option<BackFn<F>>,
        needs_grad: bool,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            back,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    pub(crate) fn push_op(&self, value: ArrayD<F>, parents: Vec<Var>, back: BackFn<F>) -> Var {
        let needs = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].needs_grad)
        };
        if needs {
            self.insert(Rc::new(value), parents, Some(back), true)
        } else {
            self.insert(Rc::new(value), Vec::new(), None, false)
        }
    }

    /// Accumulate gradients of a scalar loss with respect to every node that
    /// requires them. Interior gradients are freed as soon as they have been
    /// consumed.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.len(), 1, "backward() needs a scalar loss");
        let mut grads: Vec<Option<ArrayD<F>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.0].needs_grad {
            grads[loss.0] = Some(ArrayD::ones(IxDyn(nodes[loss.0].value.shape())));
        }
        for id in (0..=loss.0).rev() {
            if grads[id].is_none() {
                continue;
            }
            let node = &nodes[id];
            let Some(back) = &node.back else {
                continue; // leaf: keep its gradient
            };
            let g = grads[id].take().unwrap();
            let mask: Vec<bool> = node
                .parents
                .iter()
                .map(|p| nodes[p.0].needs_grad)
                .collect();
            let contribs = back(&g, &mask);
            debug_assert_eq!(contribs.len(), node.parents.len());
            for (p, c) in node.parents.iter().zip(contribs) {
                if let Some(c) = c {
                    if nodes[p.0].needs_grad {
                        match &mut grads[p.0] {
                            Some(acc) => *acc += &c,
                            slot @ None => *slot = Some(c),
                        }
                    }
                }
            }
        }
        Gradients {
            grads,
            bindings: self.bindings.borrow().clone(),
        }
    }
}

pub struct Gradients<F> {
    grads: Vec<Option<ArrayD<F>>>,
    bindings: HashMap<(u64, usize), Var>,
}

impl<F: Element> Gradients<F> {
    pub fn wrt(&self, v: Var) -> Option<&ArrayD<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn for_param(&self, params: &Params<F>, id: ParamId) -> Option<&ArrayD<F>> {
        let var = self.bindings.get(&(params.tag, id.0))?;
        self.wrt(*var)
    }

    /// True if any recorded gradient contains a non-finite value.
    pub fn any_non_finite(&self) -> bool {
        self.grads
            .iter()
            .flatten()
            .any(|g| g.iter().any(|x| !x.is_finite()))
    }
}

static PARAMS_TAG: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

pub struct ParamEntry<F> {
    pub name: String,
    pub value: ArrayD<F>,
    pub trainable: bool,
}

/// A registry of named parameter arrays. Optimizers index it; tapes bind from
/// it. Two registries never share ids (each carries a unique tag).
pub struct Params<F: Element> {
    tag: u64,
    entries: Vec<ParamEntry<F>>,
}

impl<F: Element> Default for Params<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Element> Params<F> {
    pub fn new() -> Self {
        Params {
            tag: PARAMS_TAG.fetch_add(1, Ordering::Relaxed),
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<F>) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            trainable: true,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Add persistent, non-optimized state (e.g. normalization statistics).
    pub fn add_state(&mut self, name: impl Into<String>, value: ArrayD<F>) -> ParamId {
        let id = self.add(name, value);
        self.entries[id.0].trainable = false;
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<F> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry<F>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<F>] {
        &mut self.entries
    }

    pub fn count_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Content digest over a range of entries (names, shapes, raw values).
    pub fn digest_range(&self, range: std::ops::Range<usize>) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(F::DTYPE.as_bytes());
        for e in &self.entries[range] {
            h.update((e.name.len() as u64).to_le_bytes());
            h.update(e.name.as_bytes());
            h.update((e.value.ndim() as u64).to_le_bytes());
            for d in e.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            let mut bytes = Vec::with_capacity(e.value.len() * F::BYTE_WIDTH);
            for v in e.value.iter() {
                v.write_le(&mut bytes);
            }
            h.update(&bytes);
        }
        hex(&h.finalize())
    }

    pub fn digest(&self) -> String {
        self.digest_range(0..self.entries.len())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        use std::fmt::Write;
        let _ = write!(s, "{b:02x}");
    }
    s
}
