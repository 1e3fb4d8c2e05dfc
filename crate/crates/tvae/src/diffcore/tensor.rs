//! Dense tensors with reverse-mode gradient tracking.
//!
//! A `Tensor` is a cheap handle (`Rc`) over an immutable value plus an
//! optional record of the operation that produced it. Operations whose inputs
//! require gradients record a backward closure; `backward()` on a scalar
//! topologically sorts the graph and accumulates gradients into every
//! reachable `requires_grad` tensor. Gradients accumulate across calls until
//! [`Tensor::zero_grad`] resets them.
//!
//! Graphs are thread-local by construction (`Rc` is not `Send`); handing a
//! tensor's *data* between threads is done by copying it out. Training is
//! single-threaded by contract.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::element::Element;
use super::mask::BoolMask;
use super::rng::Rng;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Run `f` with gradient recording disabled; every tensor produced inside is
/// a plain value. Used for evaluation and generation loops.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = NO_GRAD.with(|c| c.replace(true));
    let out = f();
    NO_GRAD.with(|c| c.set(prev));
    out
}

struct Op<E: Element> {
    parents: Vec<Tensor<E>>,
    backward: Box<dyn Fn(&[E])>,
}

struct Inner<E: Element> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<E>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<E>>>,
    op: Option<Op<E>>,
}

/// Dense n-dimensional tensor, immutable after construction except for
/// gradient accumulation.
pub struct Tensor<E: Element> {
    inner: Rc<Inner<E>>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor { inner: Rc::clone(&self.inner) }
    }
}

impl<E: Element> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn assert_all_finite<E: Element>(data: &[E], what: &str) {
    if let Some((i, v)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        panic!("non-finite value {v} at index {i} in {what}");
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

// ── construction ─────────────────────────────────────────────────────

impl<E: Element> Tensor<E> {
    fn make(shape: Vec<usize>, data: Vec<E>, requires_grad: bool, op: Option<Op<E>>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        debug_assert!(data.iter().all(|v| v.is_finite()), "non-finite tensor of shape {shape:?}");
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                op,
            }),
        }
    }

    /// Record the result of an operation; gradient tracking is skipped when no
    /// parent requires it or a `no_grad` scope is active.
    fn from_op(
        shape: Vec<usize>,
        data: Vec<E>,
        parents: Vec<Tensor<E>>,
        backward: impl Fn(&[E]) + 'static,
    ) -> Self {
        let track = !NO_GRAD.with(|c| c.get()) && parents.iter().any(|p| p.inner.requires_grad);
        if track {
            Tensor::make(shape, data, true, Some(Op { parents, backward: Box::new(backward) }))
        } else {
            Tensor::make(shape, data, false, None)
        }
    }

    /// Leaf tensor without gradient tracking.
    pub fn from_vec(shape: Vec<usize>, data: Vec<E>) -> Self {
        Tensor::make(shape, data, false, None)
    }

    /// Leaf tensor that participates in gradients (a parameter).
    pub fn param(shape: Vec<usize>, data: Vec<E>) -> Self {
        Tensor::make(shape, data, true, None)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor::from_vec(shape, vec![E::ZERO; numel])
    }

    pub fn full(shape: Vec<usize>, value: E) -> Self {
        let numel = shape.iter().product();
        Tensor::from_vec(shape, vec![value; numel])
    }

    pub fn scalar(value: E) -> Self {
        Tensor::from_vec(vec![], vec![value])
    }

    /// I.i.d. normal values with the given standard deviation.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| E::from_f64(rng.normal() * std)).collect();
        Tensor::from_vec(shape, data)
    }
}

// ── accessors ────────────────────────────────────────────────────────

impl<E: Element> Tensor<E> {
    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.inner.data
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> E {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.inner.data[0]
    }

    /// Accumulated gradient, if any backward pass reached this tensor.
    pub fn grad_opt(&self) -> Option<Vec<E>> {
        self.inner.grad.borrow().clone()
    }

    /// Accumulated gradient; zeros when no backward pass reached this tensor.
    pub fn grad_vec(&self) -> Vec<E> {
        self.grad_opt().unwrap_or_else(|| vec![E::ZERO; self.numel()])
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Copy of the value as a fresh leaf with no graph attachment.
    pub fn detach(&self) -> Tensor<E> {
        Tensor::from_vec(self.inner.shape.clone(), self.inner.data.clone())
    }

    /// Convert to another element width (leaf; `requires_grad` preserved).
    pub fn cast<F: Element>(&self) -> Tensor<F> {
        let data = self.inner.data.iter().map(|v| F::from_f64(v.to_f64())).collect();
        if self.inner.requires_grad {
            Tensor::param(self.inner.shape.clone(), data)
        } else {
            Tensor::from_vec(self.inner.shape.clone(), data)
        }
    }

    fn accumulate_grad(&self, g: &[E]) {
        debug_assert_eq!(g.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, &gi) in acc.iter_mut().zip(g) {
                    *a += gi;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }
}

// ── backward ─────────────────────────────────────────────────────────

impl<E: Element> Tensor<E> {
    /// Reverse-mode pass from a scalar loss. Gradients are accumulated into
    /// every reachable `requires_grad` tensor; call once per forward graph.
    pub fn backward(&self) {
        assert_eq!(
            self.numel(),
            1,
            "backward requires a scalar loss, got shape {:?}",
            self.shape()
        );
        assert!(self.inner.requires_grad, "backward on a tensor with no gradient path");
        let order = self.topo_order();
        self.accumulate_grad(&[E::ONE]);
        for node in order.iter().rev() {
            if let Some(op) = &node.inner.op {
                let grad = node.inner.grad.borrow().clone();
                if let Some(g) = grad {
                    (op.backward)(&g);
                }
            }
        }
    }

    fn topo_order(&self) -> Vec<Tensor<E>> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        // Iterative DFS; Enter pushes children, Exit appends post-order.
        enum Step<E: Element> {
            Enter(Tensor<E>),
            Exit(Tensor<E>),
        }
        let mut stack = vec![Step::Enter(self.clone())];
        while let Some(step) = stack.pop() {
            match step {
                Step::Enter(t) => {
                    if !visited.insert(t.inner.id) {
                        continue;
                    }
                    let parents: Vec<Tensor<E>> = match &t.inner.op {
                        Some(op) => op.parents.clone(),
                        None => Vec::new(),
                    };
                    stack.push(Step::Exit(t));
                    for p in parents {
                        if p.inner.requires_grad && !visited.contains(&p.inner.id) {
                            stack.push(Step::Enter(p));
                        }
                    }
                }
                Step::Exit(t) => order.push(t),
            }
        }
        order
    }
}

// ── elementwise binary (with right-aligned suffix broadcast) ─────────

/// Broadcast plan for binary elementwise ops: either equal shapes, or the
/// smaller-rank operand's shape equals the trailing dims of the larger.
enum Bcast {
    Equal,
    // the indexed operand repeats `reps` times over the leading block
    LhsSmall { reps: usize },
    RhsSmall { reps: usize },
}

fn bcast_plan(a: &[usize], b: &[usize]) -> Bcast {
    if a == b {
        return Bcast::Equal;
    }
    if a.len() > b.len() && a[a.len() - b.len()..] == *b {
        let reps = a[..a.len() - b.len()].iter().product();
        return Bcast::RhsSmall { reps };
    }
    if b.len() > a.len() && b[b.len() - a.len()..] == *a {
        let reps = b[..b.len() - a.len()].iter().product();
        return Bcast::LhsSmall { reps };
    }
    panic!("shapes {a:?} and {b:?} do not broadcast (equal or trailing-suffix only)");
}

fn reduce_leading<E: Element>(g: &[E], reps: usize, small_n: usize) -> Vec<E> {
    let mut out = vec![E::ZERO; small_n];
    for r in 0..reps {
        let block = &g[r * small_n..(r + 1) * small_n];
        for (o, &v) in out.iter_mut().zip(block) {
            *o += v;
        }
    }
    out
}

impl<E: Element> Tensor<E> {
    fn binary(
        &self,
        other: &Tensor<E>,
        fwd: impl Fn(E, E) -> E,
        // backward factory given saved operand data: (grad_out, a, b) -> (da, db)
        bwd: impl Fn(&[E], &[E], &[E], &Bcast) -> (Vec<E>, Vec<E>) + 'static,
    ) -> Tensor<E> {
        let plan = bcast_plan(self.shape(), other.shape());
        let (out_shape, data) = match plan {
            Bcast::Equal => {
                let d = self
                    .data()
                    .iter()
                    .zip(other.data())
                    .map(|(&x, &y)| fwd(x, y))
                    .collect();
                (self.inner.shape.clone(), d)
            }
            Bcast::RhsSmall { reps } => {
                let m = other.numel();
                let mut d = Vec::with_capacity(self.numel());
                for r in 0..reps {
                    for i in 0..m {
                        d.push(fwd(self.data()[r * m + i], other.data()[i]));
                    }
                }
                (self.inner.shape.clone(), d)
            }
            Bcast::LhsSmall { reps } => {
                let m = self.numel();
                let mut d = Vec::with_capacity(other.numel());
                for r in 0..reps {
                    for i in 0..m {
                        d.push(fwd(self.data()[i], other.data()[r * m + i]));
                    }
                }
                (other.inner.shape.clone(), d)
            }
        };
        let lhs = self.clone();
        let rhs = other.clone();
        Tensor::from_op(out_shape, data, vec![self.clone(), other.clone()], move |g| {
            let plan = bcast_plan(lhs.shape(), rhs.shape());
            let (da, db) = bwd(g, lhs.data(), rhs.data(), &plan);
            if lhs.inner.requires_grad {
                lhs.accumulate_grad(&da);
            }
            if rhs.inner.requires_grad {
                rhs.accumulate_grad(&db);
            }
        })
    }

    pub fn add(&self, other: &Tensor<E>) -> Tensor<E> {
        self.binary(other, |x, y| x + y, |g, a, b, plan| match plan {
            Bcast::Equal => (g.to_vec(), g.to_vec()),
            Bcast::RhsSmall { reps } => (g.to_vec(), reduce_leading(g, *reps, b.len())),
            Bcast::LhsSmall { reps } => (reduce_leading(g, *reps, a.len()), g.to_vec()),
        })
    }

    pub fn sub(&self, other: &Tensor<E>) -> Tensor<E> {
        self.binary(other, |x, y| x - y, |g, a, b, plan| {
            let neg: Vec<E> = g.iter().map(|&v| -v).collect();
            match plan {
                Bcast::Equal => (g.to_vec(), neg),
                Bcast::RhsSmall { reps } => (g.to_vec(), reduce_leading(&neg, *reps, b.len())),
                Bcast::LhsSmall { reps } => (reduce_leading(g, *reps, a.len()), neg),
            }
        })
    }

    pub fn mul(&self, other: &Tensor<E>) -> Tensor<E> {
        self.binary(other, |x, y| x * y, |g, a, b, plan| match plan {
            Bcast::Equal => {
                let da = g.iter().zip(b).map(|(&gi, &bi)| gi * bi).collect();
                let db = g.iter().zip(a).map(|(&gi, &ai)| gi * ai).collect();
                (da, db)
            }
            Bcast::RhsSmall { reps } => {
                let m = b.len();
                let da: Vec<E> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| gi * b[i % m])
                    .collect();
                let prod: Vec<E> = g.iter().zip(a).map(|(&gi, &ai)| gi * ai).collect();
                (da, reduce_leading(&prod, *reps, m))
            }
            Bcast::LhsSmall { reps } => {
                let m = a.len();
                let db: Vec<E> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| gi * a[i % m])
                    .collect();
                let prod: Vec<E> = g.iter().zip(b).map(|(&gi, &bi)| gi * bi).collect();
                (reduce_leading(&prod, *reps, m), db)
            }
        })
    }
}

// ── elementwise unary ────────────────────────────────────────────────

impl<E: Element> Tensor<E> {
    fn unary(
        &self,
        fwd: impl Fn(E) -> E,
        dydx: impl Fn(E, E) -> E + 'static, // (x, y) -> dy/dx
    ) -> Tensor<E> {
        let data: Vec<E> = self.data().iter().map(|&x| fwd(x)).collect();
        let input = self.clone();
        let out_data = data.clone();
        Tensor::from_op(self.inner.shape.clone(), data, vec![self.clone()], move |g| {
            let dx: Vec<E> = g
                .iter()
                .zip(input.data().iter().zip(out_data.iter()))
                .map(|(&gi, (&x, &y))| gi * dydx(x, y))
                .collect();
            input.accumulate_grad(&dx);
        })
    }

    pub fn add_scalar(&self, c: E) -> Tensor<E> {
        self.unary(|x| x + c, |_, _| E::ONE)
    }

    pub fn mul_scalar(&self, c: E) -> Tensor<E> {
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn neg(&self) -> Tensor<E> {
        self.mul_scalar(-E::ONE)
    }

    pub fn relu(&self) -> Tensor<E> {
        // gradient at exactly 0 is 0
        self.unary(
            |x| if x > E::ZERO { x } else { E::ZERO },
            |x, _| if x > E::ZERO { E::ONE } else { E::ZERO },
        )
    }

    pub fn exp(&self) -> Tensor<E> {
        let out = self.unary(|x| x.exp(), |_, y| y);
        assert_all_finite(out.data(), "exp output (overflow)");
        out
    }

    pub fn log(&self) -> Tensor<E> {
        if let Some((i, v)) = self.data().iter().enumerate().find(|(_, v)| **v <= E::ZERO) {
            panic!("log domain error: value {v} at index {i}");
        }
        self.unary(|x| x.ln(), |x, _| E::ONE / x)
    }

    /// Elementwise `max(x, floor)`. Entries at or below the floor contribute
    /// the constant floor with zero gradient (free-bits semantics).
    pub fn clamp_min(&self, floor: E) -> Tensor<E> {
        self.unary(
            move |x| x.maximum(floor),
            move |x, _| if x > floor { E::ONE } else { E::ZERO },
        )
    }

    /// Inverted dropout: keep with probability `1-p`, scale kept values by
    /// `1/(1-p)`. Identity when `p == 0`.
    pub fn dropout(&self, p: f64, rng: &mut Rng) -> Tensor<E> {
        assert!((0.0..1.0).contains(&p), "dropout rate {p} outside [0,1)");
        if p == 0.0 {
            return self.clone();
        }
        let scale = E::from_f64(1.0 / (1.0 - p));
        let mask: Vec<E> = (0..self.numel())
            .map(|_| if rng.bernoulli(p) { E::ZERO } else { scale })
            .collect();
        let data: Vec<E> = self.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let input = self.clone();
        Tensor::from_op(self.inner.shape.clone(), data, vec![self.clone()], move |g| {
            let dx: Vec<E> = g.iter().zip(&mask).map(|(&gi, &m)| gi * m).collect();
            input.accumulate_grad(&dx);
        })
    }
}

// ── matmul ───────────────────────────────────────────────────────────

/// out[m,n] += a[m,k] * b[k,n]
fn matmul_acc<E: Element>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,k] += a[m,n] * b[k,n]^T   (b used transposed)
fn matmul_nt_acc<E: Element>(a: &[E], b: &[E], out: &mut [E], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = E::ZERO;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            orow[p] += acc;
        }
    }
}

/// out[k,n] += a[m,k]^T * b[m,n]   (a used transposed)
fn matmul_tn_acc<E: Element>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

impl<E: Element> Tensor<E> {
    /// Batched matrix product. Leading (batch) dimensions must be equal, or
    /// absent on one side (that side is shared across the batch).
    pub fn matmul(&self, other: &Tensor<E>) -> Tensor<E> {
        let (ashape, bshape) = (self.shape(), other.shape());
        assert!(
            ashape.len() >= 2 && bshape.len() >= 2,
            "matmul needs rank >= 2, got {ashape:?} x {bshape:?}"
        );
        let (m, ka) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
        let (kb, n) = (bshape[bshape.len() - 2], bshape[bshape.len() - 1]);
        assert_eq!(ka, kb, "matmul inner dimensions disagree: {ashape:?} x {bshape:?}");
        let abatch = &ashape[..ashape.len() - 2];
        let bbatch = &bshape[..bshape.len() - 2];
        assert!(
            abatch == bbatch || abatch.is_empty() || bbatch.is_empty(),
            "matmul batch dimensions do not broadcast: {ashape:?} x {bshape:?}"
        );
        let batch_shape: Vec<usize> =
            if abatch.is_empty() { bbatch.to_vec() } else { abatch.to_vec() };
        let batches: usize = batch_shape.iter().product();
        let a_batched = !abatch.is_empty();
        let b_batched = !bbatch.is_empty();
        let k = ka;

        let mut out = vec![E::ZERO; batches * m * n];
        for t in 0..batches {
            let aoff = if a_batched { t * m * k } else { 0 };
            let boff = if b_batched { t * k * n } else { 0 };
            matmul_acc(
                &self.data()[aoff..aoff + m * k],
                &other.data()[boff..boff + k * n],
                &mut out[t * m * n..(t + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut out_shape = batch_shape;
        out_shape.push(m);
        out_shape.push(n);

        let lhs = self.clone();
        let rhs = other.clone();
        Tensor::from_op(out_shape, out, vec![self.clone(), other.clone()], move |g| {
            if lhs.inner.requires_grad {
                let mut da = vec![E::ZERO; lhs.numel()];
                for t in 0..batches {
                    let aoff = if a_batched { t * m * k } else { 0 };
                    let boff = if b_batched { t * k * n } else { 0 };
                    // dA = dOut * B^T
                    matmul_nt_acc(
                        &g[t * m * n..(t + 1) * m * n],
                        &rhs.data()[boff..boff + k * n],
                        &mut da[aoff..aoff + m * k],
                        m,
                        n,
                        k,
                    );
                }
                lhs.accumulate_grad(&da);
            }
            if rhs.inner.requires_grad {
                let mut db = vec![E::ZERO; rhs.numel()];
                for t in 0..batches {
                    let aoff = if a_batched { t * m * k } else { 0 };
                    let boff = if b_batched { t * k * n } else { 0 };
                    // dB = A^T * dOut
                    matmul_tn_acc(
                        &lhs.data()[aoff..aoff + m * k],
                        &g[t * m * n..(t + 1) * m * n],
                        &mut db[boff..boff + k * n],
                        m,
                        k,
                        n,
                    );
                }
                rhs.accumulate_grad(&db);
            }
        })
    }
}

// ── shape ops ────────────────────────────────────────────────────────

impl<E: Element> Tensor<E> {
    pub fn reshape(&self, new_shape: Vec<usize>) -> Tensor<E> {
        let numel: usize = new_shape.iter().product();
        assert_eq!(
            numel,
            self.numel(),
            "reshape {:?} -> {:?} changes element count",
            self.shape(),
            new_shape
        );
        let input = self.clone();
        Tensor::from_op(new_shape, self.data().to_vec(), vec![self.clone()], move |g| {
            input.accumulate_grad(g);
        })
    }

    /// Swap two axes (materialized copy).
    pub fn swap_axes(&self, ax0: usize, ax1: usize) -> Tensor<E> {
        let rank = self.shape().len();
        assert!(ax0 < rank && ax1 < rank, "swap_axes({ax0},{ax1}) on rank {rank}");
        if ax0 == ax1 {
            return self.clone();
        }
        let mut new_shape = self.inner.shape.clone();
        new_shape.swap(ax0, ax1);
        let data = permute_swap(self.data(), self.shape(), ax0, ax1);
        let input = self.clone();
        let (a, b) = (ax0, ax1);
        let swapped_shape = new_shape.clone();
        Tensor::from_op(new_shape, data, vec![self.clone()], move |g| {
            // inverse of a swap is the same swap on the swapped shape
            let dg = permute_swap(g, &swapped_shape, a, b);
            input.accumulate_grad(&dg);
        })
    }

    /// Contiguous sub-block along one axis.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor<E> {
        let rank = self.shape().len();
        assert!(axis < rank, "narrow axis {axis} out of range for rank {rank}");
        let dim = self.shape()[axis];
        assert!(
            start + len <= dim,
            "narrow {start}..{} exceeds dim {dim} on axis {axis}",
            start + len
        );
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let mut out_shape = self.inner.shape.clone();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let input = self.clone();
        Tensor::from_op(out_shape, data, vec![self.clone()], move |g| {
            let mut dx = vec![E::ZERO; input.numel()];
            for o in 0..outer {
                let src = o * len * inner;
                let dst = (o * dim + start) * inner;
                dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            input.accumulate_grad(&dx);
        })
    }

    /// Concatenate along an axis; all other dims must agree.
    pub fn concat(parts: &[Tensor<E>], axis: usize) -> Tensor<E> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let rank = parts[0].shape().len();
        assert!(axis < rank, "concat axis {axis} out of range for rank {rank}");
        for p in parts {
            assert_eq!(p.shape().len(), rank, "concat rank mismatch");
            for d in 0..rank {
                assert!(
                    d == axis || p.shape()[d] == parts[0].shape()[d],
                    "concat shapes {:?} vs {:?} disagree off-axis",
                    parts[0].shape(),
                    p.shape()
                );
            }
        }
        let outer: usize = parts[0].shape()[..axis].iter().product();
        let inner: usize = parts[0].shape()[axis + 1..].iter().product();
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = sizes.iter().sum();
        let mut out_shape = parts[0].inner.shape.clone();
        out_shape[axis] = total;

        let mut data = vec![E::ZERO; outer * total * inner];
        let mut offset = 0usize;
        for (p, &sz) in parts.iter().zip(&sizes) {
            for o in 0..outer {
                let src = o * sz * inner;
                let dst = (o * total + offset) * inner;
                data[dst..dst + sz * inner].copy_from_slice(&p.data()[src..src + sz * inner]);
            }
            offset += sz;
        }
        let parents: Vec<Tensor<E>> = parts.to_vec();
        let saved = parents.clone();
        Tensor::from_op(out_shape, data, parents, move |g| {
            let mut offset = 0usize;
            for (p, &sz) in saved.iter().zip(&sizes) {
                if p.inner.requires_grad {
                    let mut dp = vec![E::ZERO; p.numel()];
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * sz * inner;
                        dp[dst..dst + sz * inner].copy_from_slice(&g[src..src + sz * inner]);
                    }
                    p.accumulate_grad(&dp);
                }
                offset += sz;
            }
        })
    }
}

fn permute_swap<E: Element>(data: &[E], shape: &[usize], ax0: usize, ax1: usize) -> Vec<E> {
    let rank = shape.len();
    let mut new_shape = shape.to_vec();
    new_shape.swap(ax0, ax1);
    let src_strides = strides(shape);
    let dst_strides = strides(&new_shape);
    let mut out = vec![data[0]; data.len()];
    let mut idx = vec![0usize; rank];
    for (flat, &v) in data.iter().enumerate() {
        let mut rem = flat;
        for i in 0..rank {
            idx[i] = rem / src_strides[i];
            rem %= src_strides[i];
        }
        idx.swap(ax0, ax1);
        let mut dst = 0;
        for i in 0..rank {
            dst += idx[i] * dst_strides[i];
        }
        out[dst] = v;
    }
    out
}

// ── reductions ───────────────────────────────────────────────────────

impl<E: Element> Tensor<E> {
    pub fn sum_all(&self) -> Tensor<E> {
        let mut acc = E::ZERO;
        for &v in self.data() {
            acc += v;
        }
        let input = self.clone();
        Tensor::from_op(vec![], vec![acc], vec![self.clone()], move |g| {
            let dx = vec![g[0]; input.numel()];
            input.accumulate_grad(&dx);
        })
    }

    pub fn mean_all(&self) -> Tensor<E> {
        let n = E::from_f64(self.numel() as f64);
        self.sum_all().mul_scalar(E::ONE / n)
    }

    fn axis_geometry(&self, axis: usize) -> (usize, usize, usize) {
        let rank = self.shape().len();
        assert!(axis < rank, "axis {axis} out of range for shape {:?}", self.shape());
        let outer: usize = self.shape()[..axis].iter().product();
        let dim = self.shape()[axis];
        let inner: usize = self.shape()[axis + 1..].iter().product();
        (outer, dim, inner)
    }

    /// Sum over one axis (axis removed from the shape).
    pub fn sum_axis(&self, axis: usize) -> Tensor<E> {
        let (outer, dim, inner) = self.axis_geometry(axis);
        let mut out_shape = self.inner.shape.clone();
        out_shape.remove(axis);
        let mut data = vec![E::ZERO; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let base = (o * dim + d) * inner;
                for i in 0..inner {
                    data[o * inner + i] += self.data()[base + i];
                }
            }
        }
        let input = self.clone();
        Tensor::from_op(out_shape, data, vec![self.clone()], move |g| {
            let mut dx = vec![E::ZERO; input.numel()];
            for o in 0..outer {
                for d in 0..dim {
                    let base = (o * dim + d) * inner;
                    for i in 0..inner {
                        dx[base + i] = g[o * inner + i];
                    }
                }
            }
            input.accumulate_grad(&dx);
        })
    }

    pub fn mean_axis(&self, axis: usize) -> Tensor<E> {
        let dim = self.shape()[axis];
        self.sum_axis(axis).mul_scalar(E::ONE / E::from_f64(dim as f64))
    }

    /// Max over one axis; the gradient routes to the first maximal position.
    pub fn max_axis(&self, axis: usize) -> Tensor<E> {
        let (outer, dim, inner) = self.axis_geometry(axis);
        assert!(dim > 0, "max over empty axis");
        let mut out_shape = self.inner.shape.clone();
        out_shape.remove(axis);
        let mut data = vec![E::ZERO; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = self.data()[(o * dim) * inner + i];
                let mut best_d = 0usize;
                for d in 1..dim {
                    let v = self.data()[(o * dim + d) * inner + i];
                    if v > best {
                        best = v;
                        best_d = d;
                    }
                }
                data[o * inner + i] = best;
                argmax[o * inner + i] = best_d;
            }
        }
        let input = self.clone();
        Tensor::from_op(out_shape, data, vec![self.clone()], move |g| {
            let mut dx = vec![E::ZERO; input.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let d = argmax[o * inner + i];
                    dx[(o * dim + d) * inner + i] += g[o * inner + i];
                }
            }
            input.accumulate_grad(&dx);
        })
    }
}

// ── embedding lookup ─────────────────────────────────────────────────

impl<E: Element> Tensor<E> {
    /// Row lookup into an embedding table of shape `[V, H]`. Output shape is
    /// `ids_shape + [H]`; backward scatter-adds into the table.
    pub fn embedding_lookup(table: &Tensor<E>, ids: &[u32], ids_shape: &[usize]) -> Tensor<E> {
        assert_eq!(table.shape().len(), 2, "embedding table must be 2-d, got {:?}", table.shape());
        let numel: usize = ids_shape.iter().product();
        assert_eq!(numel, ids.len(), "ids length {} vs shape {ids_shape:?}", ids.len());
        let (v, h) = (table.shape()[0], table.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            let id = id as usize;
            assert!(id < v, "token id {id} out of vocabulary range {v}");
            data.extend_from_slice(&table.data()[id * h..(id + 1) * h]);
        }
        let mut out_shape = ids_shape.to_vec();
        out_shape.push(h);
        let tbl = table.clone();
        let ids_saved: Vec<u32> = ids.to_vec();
        Tensor::from_op(out_shape, data, vec![table.clone()], move |g| {
            let mut dt = vec![E::ZERO; tbl.numel()];
            for (row, &id) in ids_saved.iter().enumerate() {
                let dst = id as usize * h;
                let src = row * h;
                for i in 0..h {
                    dt[dst + i] += g[src + i];
                }
            }
            tbl.accumulate_grad(&dt);
        })
    }
}

// ── masked softmax ───────────────────────────────────────────────────

impl<E: Element> Tensor<E> {
    /// Numerically stabilized softmax over the last axis, restricted to
    /// positions where `mask` is true; masked positions are exactly 0.
    ///
    /// Panics if any row is fully masked (empty attention context).
    pub fn masked_softmax(&self, mask: &BoolMask) -> Tensor<E> {
        mask.assert_broadcasts_to(self.shape());
        let rank = self.shape().len();
        let last = self.shape()[rank - 1];
        let rows = self.numel() / last.max(1);
        assert!(last > 0, "softmax over empty axis");

        // Resolve the mask row for each output row once.
        let row_shape = &self.shape()[..rank - 1];
        let mut data = vec![E::ZERO; self.numel()];
        let mut row_mask = vec![true; last];
        let mut idx = vec![0usize; rank];
        for r in 0..rows {
            // multi-index of this row
            let mut rem = r;
            for i in (0..rank - 1).rev() {
                idx[i] = rem % row_shape[i];
                rem /= row_shape[i];
            }
            for j in 0..last {
                idx[rank - 1] = j;
                row_mask[j] = mask.at_broadcast(&idx, rank);
            }
            let x = &self.data()[r * last..(r + 1) * last];
            let mut maxv = E::NEG_INFINITY;
            for j in 0..last {
                if row_mask[j] && x[j] > maxv {
                    maxv = x[j];
                }
            }
            if maxv == E::NEG_INFINITY {
                panic!("fully masked softmax row {r} (empty attention context)");
            }
            let out = &mut data[r * last..(r + 1) * last];
            let mut denom = E::ZERO;
            for j in 0..last {
                if row_mask[j] {
                    let e = (x[j] - maxv).exp();
                    out[j] = e;
                    denom += e;
                }
            }
            for o in out.iter_mut() {
                *o = *o / denom;
            }
        }

        let input = self.clone();
        let y_saved = data.clone();
        Tensor::from_op(self.inner.shape.clone(), data, vec![self.clone()], move |g| {
            // dx = y .* (g - sum(y .* g)) per row; masked entries have y = 0
            let mut dx = vec![E::ZERO; input.numel()];
            for r in 0..rows {
                let y = &y_saved[r * last..(r + 1) * last];
                let gr = &g[r * last..(r + 1) * last];
                let mut dot = E::ZERO;
                for j in 0..last {
                    dot += y[j] * gr[j];
                }
                let d = &mut dx[r * last..(r + 1) * last];
                for j in 0..last {
                    d[j] = y[j] * (gr[j] - dot);
                }
            }
            input.accumulate_grad(&dx);
        })
    }
}

// ── RMS layer norm ───────────────────────────────────────────────────

impl<E: Element> Tensor<E> {
    /// RMS-style layer norm over the last axis: `y = x / rms(x) * gain` with
    /// `rms(x) = sqrt(mean(x^2) + eps)`. No mean-centering and no bias.
    pub fn layer_norm(&self, gain: &Tensor<E>, eps: f64) -> Tensor<E> {
        let rank = self.shape().len();
        let n = self.shape()[rank - 1];
        assert_eq!(
            gain.shape(),
            &[n],
            "layer_norm gain shape {:?} must be [{n}] for input {:?}",
            gain.shape(),
            self.shape()
        );
        let rows = self.numel() / n;
        let epse = E::from_f64(eps);
        let inv_n = E::ONE / E::from_f64(n as f64);

        let mut data = vec![E::ZERO; self.numel()];
        let mut inv_rms = vec![E::ZERO; rows];
        for r in 0..rows {
            let x = &self.data()[r * n..(r + 1) * n];
            let mut ms = E::ZERO;
            for &v in x {
                ms += v * v;
            }
            ms *= inv_n;
            let inv = E::ONE / (ms + epse).sqrt();
            inv_rms[r] = inv;
            let out = &mut data[r * n..(r + 1) * n];
            for j in 0..n {
                out[j] = x[j] * inv * gain.data()[j];
            }
        }

        let input = self.clone();
        let gain_t = gain.clone();
        Tensor::from_op(
            self.inner.shape.clone(),
            data,
            vec![self.clone(), gain.clone()],
            move |g| {
                let gd = gain_t.data();
                if input.inner.requires_grad {
                    let mut dx = vec![E::ZERO; input.numel()];
                    for r in 0..rows {
                        let x = &input.data()[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let inv = inv_rms[r];
                        let mut dot = E::ZERO;
                        for j in 0..n {
                            dot += gr[j] * gd[j] * x[j];
                        }
                        let scale = inv * inv * inv * inv_n * dot;
                        let d = &mut dx[r * n..(r + 1) * n];
                        for j in 0..n {
                            d[j] = inv * gd[j] * gr[j] - scale * x[j];
                        }
                    }
                    input.accumulate_grad(&dx);
                }
                if gain_t.inner.requires_grad {
                    let mut dgain = vec![E::ZERO; n];
                    for r in 0..rows {
                        let x = &input.data()[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let inv = inv_rms[r];
                        for j in 0..n {
                            dgain[j] += gr[j] * x[j] * inv;
                        }
                    }
                    gain_t.accumulate_grad(&dgain);
                }
            },
        )
    }
}

// ── fused masked cross entropy ───────────────────────────────────────

impl<E: Element> Tensor<E> {
    /// Token-summed cross entropy from logits of shape `[..., V]` against
    /// per-row targets, counting only rows where `mask` is true.
    ///
    /// Returns the scalar summed NLL and the number of contributing tokens.
    pub fn cross_entropy_logits(&self, targets: &[u32], mask: &[bool]) -> (Tensor<E>, usize) {
        let rank = self.shape().len();
        assert!(rank >= 1, "cross_entropy_logits on rank-0 tensor");
        let v = self.shape()[rank - 1];
        let rows = self.numel() / v;
        assert_eq!(targets.len(), rows, "targets length {} vs {} rows", targets.len(), rows);
        assert_eq!(mask.len(), rows, "mask length {} vs {} rows", mask.len(), rows);

        let mut nll = E::ZERO;
        let mut count = 0usize;
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let t = targets[r] as usize;
            assert!(t < v, "target id {t} out of vocabulary range {v}");
            let x = &self.data()[r * v..(r + 1) * v];
            let mut maxv = x[0];
            for &xv in x.iter().skip(1) {
                if xv > maxv {
                    maxv = xv;
                }
            }
            let mut sum = E::ZERO;
            for &xv in x {
                sum += (xv - maxv).exp();
            }
            nll += maxv + sum.ln() - x[t];
            count += 1;
        }
        assert!(count > 0, "cross_entropy_logits: empty mask (no contributing tokens)");

        let input = self.clone();
        let targets_saved: Vec<u32> = targets.to_vec();
        let mask_saved: Vec<bool> = mask.to_vec();
        let out = Tensor::from_op(vec![], vec![nll], vec![self.clone()], move |g| {
            let gs = g[0];
            let mut dx = vec![E::ZERO; input.numel()];
            for r in 0..rows {
                if !mask_saved[r] {
                    continue;
                }
                let t = targets_saved[r] as usize;
                let x = &input.data()[r * v..(r + 1) * v];
                let mut maxv = x[0];
                for &xv in x.iter().skip(1) {
                    if xv > maxv {
                        maxv = xv;
                    }
                }
                let mut sum = E::ZERO;
                let d = &mut dx[r * v..(r + 1) * v];
                for (j, &xv) in x.iter().enumerate() {
                    let e = (xv - maxv).exp();
                    d[j] = e;
                    sum += e;
                }
                for dj in d.iter_mut() {
                    *dj = *dj / sum * gs;
                }
                d[t] -= gs;
            }
            input.accumulate_grad(&dx);
        });
        (out, count)
    }
}
