//! Dense tensors with single-use reverse-mode automatic differentiation.
//!
//! The op surface is deliberately small: exactly what a masking conv
//! separator and its scale-invariant loss need. Conventions shared by every
//! op in this module:
//!
//! * Storage is the generic element type `E` (`f32` in production, `f64`
//!   for finite-difference gradient checks); accumulation is always `f64`.
//! * Ops take `Option<&Tape<E>>`. With `None` they are pure functions; with
//!   a tape they record a backward rule when any input is tracked (a
//!   gradient-requiring leaf or something computed from one).
//! * A tape is confined to one thread and is consumed by [`backward`];
//!   calling `backward` twice is an error. `backward` overwrites the `grad`
//!   slot of every leaf registered on the tape (zeros if unreachable from
//!   the seed).

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use crate::{Error, Result};

mod conv;
mod kernels;
mod norm;
mod ops;

pub mod gradcheck;

pub use conv::{Conv1dSpec, conv1d, conv1d_out_len, transposed_conv1d};
pub(crate) use kernels::{axpy_acc, dot_acc};
pub use norm::{cumulative_layer_norm, global_layer_norm};
pub use ops::{
    add, add_const, clamp_max, divide, dot, log10, mul, mul_const, narrow, neg, prelu, relu,
    reshape, scale, sigmoid, softmax_sources, sub, sum, zero_mean,
};

/// Scalar storage type for tensors. Implemented for `f32` and `f64`.
pub trait Element: Copy + Send + Sync + PartialOrd + fmt::Debug + 'static {
    const NAME: &'static str;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Element for f32 {
    const NAME: &'static str = "f32";
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    const NAME: &'static str = "f64";
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
}

struct Inner<E: Element> {
    shape: Vec<usize>,
    data: Vec<E>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<E>>>,
}

impl<E: Element> Clone for Inner<E> {
    fn clone(&self) -> Self {
        Inner {
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: self.requires_grad,
            grad: Mutex::new(self.grad.lock().unwrap().clone()),
        }
    }
}

/// Shared-ownership dense tensor. Clones are cheap handles to the same
/// storage; parameter tensors may be read from several threads, while
/// mutation ([`Tensor::data_mut`]) requires exclusive logical ownership.
pub struct Tensor<E: Element = f32> {
    inner: Arc<Inner<E>>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor<{}>{{shape: {:?}{}}}",
            E::NAME,
            self.inner.shape,
            if self.inner.requires_grad { ", param" } else { "" }
        )
    }
}

fn checked_numel(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::Shape("tensor rank must be at least 1".into()));
    }
    let mut n: usize = 1;
    for &d in shape {
        if d == 0 {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        n = n.checked_mul(d).ok_or_else(|| {
            Error::Shape(format!("shape {shape:?} overflows element count"))
        })?;
    }
    Ok(n)
}

impl<E: Element> Tensor<E> {
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<E>) -> Result<Self> {
        let shape = shape.into();
        let n = checked_numel(&shape)?;
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            inner: Arc::new(Inner {
                shape,
                data,
                requires_grad: false,
                grad: Mutex::new(None),
            }),
        })
    }

    /// Gradient-requiring leaf; [`backward`] fills its `grad` slot.
    pub fn param(shape: impl Into<Vec<usize>>, data: Vec<E>) -> Result<Self> {
        let t = Self::from_vec(shape, data)?;
        // Arc is unique here, so the flag flip is safe before sharing.
        let mut inner = t.inner;
        Arc::get_mut(&mut inner).unwrap().requires_grad = true;
        Ok(Tensor { inner })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n = checked_numel(&shape)?;
        Self::from_vec(shape, vec![E::from_f64(0.0); n])
    }

    pub fn scalar(v: E) -> Self {
        Self::from_vec(vec![1], vec![v]).unwrap()
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.inner.data
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<E> {
        if self.numel() != 1 {
            return Err(Error::Shape(format!(
                "item() needs a scalar, shape is {:?}",
                self.shape()
            )));
        }
        Ok(self.inner.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Copy of the gradient left by the most recent [`backward`], if any.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.grad.lock().unwrap().clone()
    }

    pub(crate) fn set_grad(&self, g: Vec<E>) {
        *self.inner.grad.lock().unwrap() = Some(g);
    }

    /// Replace the stored gradient (used by gradient clipping).
    pub fn replace_grad(&self, g: Vec<E>) -> Result<()> {
        if g.len() != self.numel() {
            return Err(Error::Shape(format!(
                "gradient length {} does not match tensor of {} elements",
                g.len(),
                self.numel()
            )));
        }
        self.set_grad(g);
        Ok(())
    }

    /// Mutable view of the data. Copies on write if other handles exist, so
    /// recorded tapes and snapshots never observe the mutation.
    pub fn data_mut(&mut self) -> &mut [E] {
        &mut Arc::make_mut(&mut self.inner).data
    }

    /// Deep copy with no gradient state and `requires_grad = false`.
    pub fn detached(&self) -> Tensor<E> {
        Tensor {
            inner: Arc::new(Inner {
                shape: self.inner.shape.clone(),
                data: self.inner.data.clone(),
                requires_grad: false,
                grad: Mutex::new(None),
            }),
        }
    }

    fn ptr_key(&self) -> usize {
        Arc::as_ptr(&self.inner) as usize
    }
}

pub type NodeId = usize;

type BackFn = Box<dyn FnMut(&[f64], &mut Grads)>;

struct Entry {
    out: NodeId,
    back: BackFn,
}

struct TapeInner<E: Element> {
    numels: Vec<usize>,
    tracked: Vec<bool>,
    entries: Vec<Entry>,
    index: HashMap<usize, NodeId>,
    leaves: Vec<(NodeId, Tensor<E>)>,
    // Keeps every registered tensor alive: node identity is the storage
    // address, so a freed allocation reused by a new tensor would alias a
    // stale node.
    retained: Vec<Tensor<E>>,
    used: bool,
}

/// Records forward ops so [`backward`] can replay them in reverse. One tape
/// per forward pass; single-threaded; consumed by its single `backward`.
pub struct Tape<E: Element> {
    inner: RefCell<TapeInner<E>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(TapeInner {
                numels: Vec::new(),
                tracked: Vec::new(),
                entries: Vec::new(),
                index: HashMap::new(),
                leaves: Vec::new(),
                retained: Vec::new(),
                used: false,
            }),
        }
    }

    /// Number of recorded ops (test support).
    pub fn len(&self) -> usize {
        self.inner.borrow().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Decide whether an op over `inputs` must record. Returns `None` when
    /// there is no tape or no input is tracked.
    pub(crate) fn plan<'t, const K: usize>(
        tape: Option<&'t Tape<E>>,
        inputs: [&Tensor<E>; K],
    ) -> Option<Plan<'t, E, K>> {
        let tape = tape?;
        let mut inner = tape.inner.borrow_mut();
        debug_assert!(!inner.used, "recording onto a consumed tape");
        let ids = inputs.map(|t| inner.intern(t));
        let need = ids.map(|id| inner.tracked[id]);
        drop(inner);
        if need.iter().any(|&b| b) {
            Some(Plan { tape, ids, need })
        } else {
            None
        }
    }
}

impl<E: Element> TapeInner<E> {
    fn intern(&mut self, t: &Tensor<E>) -> NodeId {
        if let Some(&id) = self.index.get(&t.ptr_key()) {
            return id;
        }
        let id = self.numels.len();
        self.numels.push(t.numel());
        self.tracked.push(t.requires_grad());
        self.index.insert(t.ptr_key(), id);
        self.retained.push(t.clone());
        if t.requires_grad() {
            self.leaves.push((id, t.clone()));
        }
        id
    }
}

/// Borrowed recording context handed to ops that must register a backward
/// rule: input node ids, per-input "gradient needed" flags, and `finish`.
pub(crate) struct Plan<'t, E: Element, const K: usize> {
    tape: &'t Tape<E>,
    pub ids: [NodeId; K],
    pub need: [bool; K],
}

impl<'t, E: Element, const K: usize> Plan<'t, E, K> {
    /// Register `out` as this op's tracked output and record the backward
    /// rule. `back` receives the output gradient and the gradient store.
    pub fn finish(self, out: &Tensor<E>, back: impl FnMut(&[f64], &mut Grads) + 'static) {
        let mut inner = self.tape.inner.borrow_mut();
        let id = inner.numels.len();
        inner.numels.push(out.numel());
        inner.tracked.push(true);
        inner.index.insert(out.ptr_key(), id);
        inner.retained.push(out.clone());
        inner.entries.push(Entry {
            out: id,
            back: Box::new(back),
        });
    }
}

/// Per-node gradient buffers for one backward sweep. Buffers are `f64`
/// regardless of tensor storage.
pub struct Grads {
    bufs: Vec<Option<Vec<f64>>>,
}

impl Grads {
    /// Gradient buffer for `id`, zero-allocated on first touch.
    pub(crate) fn buf(&mut self, id: NodeId, numel: usize) -> &mut [f64] {
        let slot = &mut self.bufs[id];
        if slot.is_none() {
            *slot = Some(vec![0.0; numel]);
        }
        slot.as_mut().unwrap()
    }

    fn take(&mut self, id: NodeId) -> Option<Vec<f64>> {
        self.bufs[id].take()
    }
}

/// Reverse sweep from `seed` (a scalar recorded on `tape`). Visits recorded
/// ops once, newest first; a node's output gradient is complete before its
/// producer runs because consumers always record after producers. Consumes
/// the tape and overwrites every registered leaf's `grad`.
pub fn backward<E: Element>(tape: &Tape<E>, seed: &Tensor<E>) -> Result<()> {
    let mut inner = tape.inner.borrow_mut();
    if inner.used {
        return Err(Error::Invalid(
            "tape already consumed by a previous backward".into(),
        ));
    }
    inner.used = true;
    let &sid = inner.index.get(&seed.ptr_key()).ok_or_else(|| {
        Error::Invalid("backward seed is not a tensor recorded on this tape".into())
    })?;
    if inner.numels[sid] != 1 {
        return Err(Error::Shape(format!(
            "backward seed must be a scalar, got {} elements",
            inner.numels[sid]
        )));
    }

    let TapeInner {
        numels,
        entries,
        leaves,
        retained,
        ..
    } = &mut *inner;

    let mut grads = Grads {
        bufs: vec![None; numels.len()],
    };
    grads.buf(sid, 1)[0] = 1.0;

    for e in entries.iter_mut().rev() {
        // A missing buffer means the output cannot influence the seed.
        if let Some(g) = grads.take(e.out) {
            (e.back)(&g, &mut grads);
        }
    }

    for (id, leaf) in leaves.iter() {
        let g = match grads.take(*id) {
            Some(v) => v.iter().map(|&x| E::from_f64(x)).collect(),
            None => vec![E::from_f64(0.0); numels[*id]],
        };
        leaf.set_grad(g);
    }
    entries.clear();
    retained.clear();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_len() {
        let e = Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(e, Error::Shape(_)), "{e}");
    }

    #[test]
    fn from_vec_rejects_zero_extent() {
        assert!(Tensor::<f32>::from_vec(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn clone_shares_storage_and_detach_copies() {
        let a = Tensor::<f32>::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        let b = a.clone();
        assert_eq!(a.ptr_key(), b.ptr_key());
        let c = a.detached();
        assert_ne!(a.ptr_key(), c.ptr_key());
        assert_eq!(a.data(), c.data());
    }

    #[test]
    fn data_mut_copies_when_shared() {
        let mut a = Tensor::<f32>::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        let b = a.clone();
        a.data_mut()[0] = 9.0;
        assert_eq!(b.data()[0], 1.0);
        assert_eq!(a.data()[0], 9.0);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let tape = Tape::<f32>::new();
        let x = Tensor::param(vec![1], vec![2.0]).unwrap();
        let y = mul(Some(&tape), &x, &x).unwrap();
        backward(&tape, &y).unwrap();
        // d(x*x)/dx = 2x = 4
        assert_eq!(x.grad().unwrap(), vec![4.0]);
        let e = backward(&tape, &y).unwrap_err();
        assert!(matches!(e, Error::Invalid(_)), "{e}");
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_seed() {
        let tape = Tape::<f32>::new();
        let x = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
        let y = add(Some(&tape), &x, &x).unwrap();
        assert!(matches!(backward(&tape, &y), Err(Error::Shape(_))));
        let tape2 = Tape::<f32>::new();
        let z = Tensor::scalar(1.0f32);
        assert!(matches!(backward(&tape2, &z), Err(Error::Invalid(_))));
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let tape = Tape::<f32>::new();
        let x = Tensor::param(vec![1], vec![2.0]).unwrap();
        let unused = Tensor::param(vec![2], vec![1.0, 1.0]).unwrap();
        let y = mul(Some(&tape), &x, &x).unwrap();
        // Touch `unused` on the tape without connecting it to the seed.
        let _ = add(Some(&tape), &unused, &unused).unwrap();
        backward(&tape, &y).unwrap();
        assert_eq!(unused.grad().unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn shared_input_accumulates_across_consumers() {
        // y = x*x + x*x => dy/dx = 4x = 12 at x=3.
        let tape = Tape::<f32>::new();
        let x = Tensor::param(vec![1], vec![3.0]).unwrap();
        let a = mul(Some(&tape), &x, &x).unwrap();
        let b = mul(Some(&tape), &x, &x).unwrap();
        let y = add(Some(&tape), &a, &b).unwrap();
        backward(&tape, &y).unwrap();
        assert_eq!(x.grad().unwrap(), vec![12.0]);
    }

    #[test]
    fn constants_are_not_recorded() {
        let tape = Tape::<f32>::new();
        let a = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(vec![2], vec![3.0, 4.0]).unwrap();
        let _ = add(Some(&tape), &a, &b).unwrap();
        assert!(tape.is_empty());
    }

    #[test]
    fn transient_inputs_keep_distinct_identities() {
        // Inputs are dropped right after their op records. The tape must
        // hold every registered tensor alive: identity is the storage
        // address, and a freed 40-element buffer is exactly what the
        // allocator hands back for the next one.
        let tape = Tape::<f32>::new();
        let w = Tensor::param(vec![40], vec![1.0; 40]).unwrap();
        let mut total: Option<Tensor<f32>> = None;
        let mut expect = vec![0.0f32; 40];
        for i in 0..10 {
            let data: Vec<f32> = (0..40).map(|j| (i * 40 + j) as f32 * 0.01).collect();
            for (e, d) in expect.iter_mut().zip(&data) {
                *e += *d;
            }
            let x = Tensor::from_vec(vec![40], data).unwrap();
            let s = sum(Some(&tape), &mul(Some(&tape), &x, &w).unwrap()).unwrap();
            total = Some(match total {
                None => s,
                Some(t) => add(Some(&tape), &t, &s).unwrap(),
            });
        }
        backward(&tape, &total.unwrap()).unwrap();
        let g = w.grad().unwrap();
        for (a, b) in g.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }
}
