use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::kernels::{self, ConvGeom, MatmulPlan};
use super::{Conv2dSpec, Element, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};

enum Op<S> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, S),
    Sum(usize),
    Mean(usize),
    MatMul {
        a: usize,
        b: usize,
        plan: MatmulPlan,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
        rows: usize,
        k: usize,
        d: usize,
    },
    Reshape(usize),
    Permute {
        a: usize,
        perm: Vec<usize>,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geo: ConvGeom,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        means: Vec<S>,
        rstds: Vec<S>,
    },
    Softmax(usize),
    Gelu(usize),
    Upsample {
        a: usize,
        planes: usize,
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
    },
    Bce {
        z: usize,
        target: Rc<Tensor<S>>,
    },
}

struct Node<S> {
    value: Rc<Tensor<S>>,
    op: Op<S>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// Values are computed eagerly as operations are recorded. `backward` walks
/// the record in exact reverse order. A tape may be differentiated once;
/// [`Tape::reset`] discards gradients so it can be differentiated again.
pub struct Tape<'s, S: Element> {
    store: Option<&'s ParamStore<S>>,
    nodes: RefCell<Vec<Node<S>>>,
    param_nodes: RefCell<HashMap<ParamId, usize>>,
    grads: RefCell<Option<Vec<Option<Tensor<S>>>>>,
    grad_enabled: bool,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, S: Element> {
    tape: &'t Tape<'t, S>,
    id: usize,
}

impl<S: Element> std::fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

impl<'s, S: Element> Tape<'s, S> {
    /// A tape with no parameter store; leaves are created explicitly.
    pub fn new() -> Self {
        Self::build(None, true)
    }

    /// A tape whose parameter leaves come from `store`.
    pub fn with_params(store: &'s ParamStore<S>) -> Self {
        Self::build(Some(store), true)
    }

    /// A tape that never tracks gradients.
    pub fn inference(store: &'s ParamStore<S>) -> Self {
        Self::build(Some(store), false)
    }

    fn build(store: Option<&'s ParamStore<S>>, grad_enabled: bool) -> Self {
        Self {
            store,
            nodes: RefCell::new(Vec::new()),
            param_nodes: RefCell::new(HashMap::new()),
            grads: RefCell::new(None),
            grad_enabled,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        nodes.len() - 1
    }

    fn var(&self, id: usize) -> Var<'_, S> {
        Var { tape: self, id }
    }

    /// A leaf that receives gradient when `requires_grad` is set.
    pub fn leaf(&self, value: Tensor<S>, requires_grad: bool) -> Var<'_, S> {
        let id = self.push(value, Op::Leaf, requires_grad);
        self.var(id)
    }

    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.leaf(value, false)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&self, id: ParamId) -> Var<'_, S> {
        if let Some(&node) = self.param_nodes.borrow().get(&id) {
            return self.var(node);
        }
        let store = self.store.expect("tape has no parameter store");
        let p = store.get(id);
        let node = self.push(p.value.clone(), Op::Leaf, p.requires_grad);
        self.param_nodes.borrow_mut().insert(id, node);
        self.var(node)
    }

    fn value(&self, id: usize) -> Rc<Tensor<S>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var<'_, S>) -> Option<Tensor<S>> {
        self.grads.borrow().as_ref().and_then(|g| g[v.id].clone())
    }

    /// Gradients of every stored parameter leaf that required them.
    pub fn param_grads(&self) -> Gradients<S> {
        let len = self.store.map_or(0, ParamStore::len);
        let mut out = Gradients::new(len);
        let grads = self.grads.borrow();
        if let Some(grads) = grads.as_ref() {
            for (&pid, &node) in self.param_nodes.borrow().iter() {
                if let Some(g) = &grads[node] {
                    out.set(pid, g.clone());
                }
            }
        }
        out
    }

    /// Discards gradients from a previous backward pass.
    pub fn reset(&self) {
        *self.grads.borrow_mut() = None;
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, S>) -> Result<()> {
        if !std::ptr::eq(loss.tape as *const _ as *const u8, self as *const _ as *const u8) {
            return Err(Error::State("loss belongs to a different tape".into()));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            ));
        }
        if self.grads.borrow().is_some() {
            return Err(Error::State("backward already ran on this tape; call reset() first".into()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; nodes.len()];
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(Tensor::ones(nodes[loss.id].value.shape().to_vec()));
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        *self.grads.borrow_mut() = Some(grads);
        Ok(())
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t, S>], axis: usize) -> Result<Var<'t, S>> {
        let first = parts.first().ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let shape0 = first.shape();
        if axis >= shape0.len() {
            return Err(shape_err!("concat axis {axis} out of range for {shape0:?}"));
        }
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            let ok = s.len() == shape0.len() && s.iter().zip(&shape0).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err!("concat shapes differ off-axis: {shape0:?} vs {s:?}"));
            }
            total += s[axis];
        }
        let outer: usize = shape0[..axis].iter().product();
        let inner: usize = shape0[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = shape0.clone();
        shape[axis] = total;
        let rg = parts.iter().any(|p| p.requires_grad());
        let id = self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                inputs: parts.iter().map(|p| p.id).collect(),
                axis,
            },
            rg,
        );
        Ok(self.var(id))
    }
}

impl<S: Element> Default for Tape<'_, S> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate<S: Element>(nodes: &[Node<S>], grads: &mut [Option<Tensor<S>>], id: usize, g: Tensor<S>) {
    if !nodes[id].requires_grad {
        return;
    }
    match grads[id].as_mut() {
        Some(existing) => existing.add_assign(&g),
        None => grads[id] = Some(g),
    }
}

fn with_shape<S: Element>(like: &Tensor<S>, data: Vec<S>) -> Tensor<S> {
    Tensor::from_parts(like.shape().to_vec(), data)
}

fn backprop<S: Element>(nodes: &[Node<S>], id: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
    let node = &nodes[id];
    let rg = |i: usize| nodes[i].requires_grad;
    let val = |i: usize| &*nodes[i].value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            if rg(*a) {
                let d = g.data().iter().zip(val(*b).data()).map(|(&x, &y)| x * y).collect();
                accumulate(nodes, grads, *a, with_shape(g, d));
            }
            if rg(*b) {
                let d = g.data().iter().zip(val(*a).data()).map(|(&x, &y)| x * y).collect();
                accumulate(nodes, grads, *b, with_shape(g, d));
            }
        }
        Op::Scale(a, c) => accumulate(nodes, grads, *a, g.map(|v| v * *c)),
        Op::Sum(a) => {
            let x = val(*a);
            accumulate(nodes, grads, *a, Tensor::full(x.shape().to_vec(), g.data()[0]));
        }
        Op::Mean(a) => {
            let x = val(*a);
            let v = g.data()[0] / S::from_f64(x.numel() as f64);
            accumulate(nodes, grads, *a, Tensor::full(x.shape().to_vec(), v));
        }
        Op::MatMul { a, b, plan } => {
            let (av, bv) = (val(*a), val(*b));
            let (da, db) = kernels::matmul_backward(plan, av.data(), bv.data(), g.data(), rg(*a), rg(*b));
            if let Some(da) = da {
                accumulate(nodes, grads, *a, with_shape(av, da));
            }
            if let Some(db) = db {
                accumulate(nodes, grads, *b, with_shape(bv, db));
            }
        }
        Op::Linear { x, w, b, rows, k, d } => {
            let (xv, wv) = (val(*x), val(*w));
            if rg(*x) {
                let mut dx = vec![S::zero(); rows * k];
                kernels::gemm_nn(g.data(), wv.data(), &mut dx, *rows, *d, *k);
                accumulate(nodes, grads, *x, with_shape(xv, dx));
            }
            if rg(*w) {
                let mut dw = vec![S::zero(); d * k];
                kernels::gemm_tn(g.data(), xv.data(), &mut dw, *d, *rows, *k);
                accumulate(nodes, grads, *w, with_shape(wv, dw));
            }
            if let Some(b) = b.filter(|&b| rg(b)) {
                let mut db = vec![S::zero(); *d];
                for row in g.data().chunks(*d) {
                    for (acc, &v) in db.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                accumulate(nodes, grads, b, with_shape(val(b), db));
            }
        }
        Op::Reshape(a) => {
            accumulate(nodes, grads, *a, with_shape(val(*a), g.data().to_vec()));
        }
        Op::Permute { a, perm } => {
            let inv = kernels::invert_perm(perm);
            let (_, d) = kernels::permute(g.shape(), g.data(), &inv).expect("valid inverse permutation");
            accumulate(nodes, grads, *a, with_shape(val(*a), d));
        }
        Op::Concat { inputs, axis } => {
            let shape = g.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis];
            let mut offset = 0;
            for &inp in inputs {
                let v = val(inp);
                let len = v.shape()[*axis];
                if rg(inp) {
                    let mut d = Vec::with_capacity(v.numel());
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        d.extend_from_slice(&g.data()[start..start + len * inner]);
                    }
                    accumulate(nodes, grads, inp, with_shape(v, d));
                }
                offset += len;
            }
        }
        Op::Conv2d { x, w, b, geo } => {
            let (xv, wv) = (val(*x), val(*w));
            let want_b = b.is_some_and(rg);
            let (dx, dw, db) = kernels::conv2d_backward(geo, xv.data(), wv.data(), g.data(), rg(*x), rg(*w), want_b);
            if let Some(dx) = dx {
                accumulate(nodes, grads, *x, with_shape(xv, dx));
            }
            if let Some(dw) = dw {
                accumulate(nodes, grads, *w, with_shape(wv, dw));
            }
            if let (Some(b), Some(db)) = (b, db) {
                accumulate(nodes, grads, *b, with_shape(val(*b), db));
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            means,
            rstds,
        } => {
            let (xv, gv) = (val(*x), val(*gamma));
            let d = gv.numel();
            let (dx, dg, db) = kernels::layer_norm_backward(xv.data(), gv.data(), means, rstds, g.data(), d);
            accumulate(nodes, grads, *x, with_shape(xv, dx));
            accumulate(nodes, grads, *gamma, with_shape(gv, dg));
            accumulate(nodes, grads, *beta, with_shape(val(*beta), db));
        }
        Op::Softmax(a) => {
            let y = &*node.value;
            let n = *y.shape().last().expect("non-empty shape");
            let dx = kernels::softmax_backward(y.data(), g.data(), n);
            accumulate(nodes, grads, *a, with_shape(y, dx));
        }
        Op::Gelu(a) => {
            let x = val(*a);
            let d = x.data().iter().zip(g.data()).map(|(&v, &gv)| kernels::gelu_grad(v) * gv).collect();
            accumulate(nodes, grads, *a, with_shape(x, d));
        }
        Op::Upsample { a, planes, h, w, oh, ow } => {
            let d = kernels::upsample_backward(g.data(), *planes, *h, *w, *oh, *ow);
            accumulate(nodes, grads, *a, with_shape(val(*a), d));
        }
        Op::Bce { z, target } => {
            let zv = val(*z);
            let scale = g.data()[0] / S::from_f64(zv.numel() as f64);
            let d = zv
                .data()
                .iter()
                .zip(target.data())
                .map(|(&zz, &t)| (kernels::sigmoid(zz) - t) * scale)
                .collect();
            accumulate(nodes, grads, *z, with_shape(zv, d));
        }
    }
}

// Fallible elementwise ops shadow the std operator names on purpose.
#[allow(clippy::should_implement_trait)]
impl<'t, S: Element> Var<'t, S> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<'t, S> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<S>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    fn emit(&self, value: Tensor<S>, op: Op<S>, rg: bool) -> Var<'t, S> {
        let id = self.tape.push(value, op, rg);
        self.tape.var(id)
    }

    fn binary(self, other: Var<'t, S>, name: &str, f: impl Fn(S, S) -> S) -> Result<(Tensor<S>, bool)> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(shape_err!("{name}: shapes differ {:?} vs {:?}", a.shape(), b.shape()));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((
            Tensor::from_parts(a.shape().to_vec(), data),
            self.requires_grad() || other.requires_grad(),
        ))
    }

    pub fn add(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        let (v, rg) = self.binary(other, "add", |a, b| a + b)?;
        Ok(self.emit(v, Op::Add(self.id, other.id), rg))
    }

    pub fn sub(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        let (v, rg) = self.binary(other, "sub", |a, b| a - b)?;
        Ok(self.emit(v, Op::Sub(self.id, other.id), rg))
    }

    pub fn mul(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        let (v, rg) = self.binary(other, "mul", |a, b| a * b)?;
        Ok(self.emit(v, Op::Mul(self.id, other.id), rg))
    }

    pub fn scale(self, c: f64) -> Var<'t, S> {
        let c = S::from_f64(c);
        let v = self.value().map(|x| x * c);
        self.emit(v, Op::Scale(self.id, c), self.requires_grad())
    }

    pub fn sum(self) -> Var<'t, S> {
        let s = self.value().data().iter().copied().sum();
        self.emit(Tensor::scalar(s), Op::Sum(self.id), self.requires_grad())
    }

    pub fn mean(self) -> Var<'t, S> {
        let x = self.value();
        let s = x.data().iter().copied().sum::<S>() / S::from_f64(x.numel() as f64);
        self.emit(Tensor::scalar(s), Op::Mean(self.id), self.requires_grad())
    }

    /// Batched matrix product `[..., m, n] · [..., n, p]` with broadcast batch axes.
    pub fn matmul(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        let (a, b) = (self.value(), other.value());
        let plan = kernels::matmul_plan(a.shape(), b.shape())?;
        let data = kernels::matmul_forward(&plan, a.data(), b.data());
        let v = Tensor::from_parts(plan.out_shape.clone(), data);
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.emit(
            v,
            Op::MatMul {
                a: self.id,
                b: other.id,
                plan,
            },
            rg,
        ))
    }

    /// `x · Wᵀ + b` over the last axis; `w` is `[d, k]`.
    pub fn linear(self, w: Var<'t, S>, b: Option<Var<'t, S>>) -> Result<Var<'t, S>> {
        let (x, wv) = (self.value(), w.value());
        let xs = x.shape();
        let k = *xs.last().expect("non-empty shape");
        if wv.ndim() != 2 || wv.shape()[1] != k {
            return Err(shape_err!("linear: input {xs:?} incompatible with weight {:?}", wv.shape()));
        }
        let d = wv.shape()[0];
        let bias = b.map(|b| b.value());
        if let Some(bias) = &bias {
            if bias.shape() != [d] {
                return Err(shape_err!("linear: bias {:?} does not match output width {d}", bias.shape()));
            }
        }
        let rows = x.numel() / k;
        let data = kernels::linear_forward(x.data(), wv.data(), bias.as_deref().map(Tensor::data), rows, k, d);
        let mut shape = xs.to_vec();
        *shape.last_mut().expect("non-empty") = d;
        let rg = self.requires_grad() || w.requires_grad() || b.is_some_and(|b| b.requires_grad());
        Ok(self.emit(
            Tensor::from_parts(shape, data),
            Op::Linear {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
                rows,
                k,
                d,
            },
            rg,
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, S>> {
        let x = self.value();
        let v = Tensor::new(shape.to_vec(), x.data().to_vec())
            .map_err(|_| shape_err!("cannot reshape {:?} into {shape:?}", x.shape()))?;
        Ok(self.emit(v, Op::Reshape(self.id), self.requires_grad()))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t, S>> {
        let v = self.value().permute(perm)?;
        Ok(self.emit(
            v,
            Op::Permute {
                a: self.id,
                perm: perm.to_vec(),
            },
            self.requires_grad(),
        ))
    }

    /// Swaps two axes.
    pub fn transpose(self, a: usize, b: usize) -> Result<Var<'t, S>> {
        let nd = self.value().ndim();
        if a >= nd || b >= nd {
            return Err(shape_err!("transpose axes ({a},{b}) out of range for rank {nd}"));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Cross-correlation of `[B,C,H,W]` with `[O,C/groups,kh,kw]`.
    pub fn conv2d(self, w: Var<'t, S>, b: Option<Var<'t, S>>, spec: Conv2dSpec) -> Result<Var<'t, S>> {
        let (x, wv) = (self.value(), w.value());
        let geo = kernels::conv_geom(x.shape(), wv.shape(), spec)?;
        let bias = b.map(|b| b.value());
        if let Some(bias) = &bias {
            if bias.shape() != [geo.out_c] {
                return Err(shape_err!("conv2d bias {:?} needs [{}]", bias.shape(), geo.out_c));
            }
        }
        let data = kernels::conv2d_forward(&geo, x.data(), wv.data(), bias.as_deref().map(Tensor::data));
        let shape = vec![geo.batch, geo.out_c, geo.oh, geo.ow];
        let rg = self.requires_grad() || w.requires_grad() || b.is_some_and(|b| b.requires_grad());
        Ok(self.emit(
            Tensor::from_parts(shape, data),
            Op::Conv2d {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
                geo,
            },
            rg,
        ))
    }

    /// Normalizes over the last axis then applies `gamma`/`beta`.
    pub fn layer_norm(self, gamma: Var<'t, S>, beta: Var<'t, S>, eps: f64) -> Result<Var<'t, S>> {
        let (x, gv, bv) = (self.value(), gamma.value(), beta.value());
        let d = *x.shape().last().expect("non-empty shape");
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(shape_err!(
                "layer_norm: gamma {:?} / beta {:?} must be [{d}]",
                gv.shape(),
                bv.shape()
            ));
        }
        let (data, means, rstds) = kernels::layer_norm_forward(x.data(), gv.data(), bv.data(), d, eps);
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        Ok(self.emit(
            Tensor::from_parts(x.shape().to_vec(), data),
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                means,
                rstds,
            },
            rg,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'t, S> {
        let x = self.value();
        let n = *x.shape().last().expect("non-empty shape");
        let data = kernels::softmax_forward(x.data(), n);
        self.emit(
            Tensor::from_parts(x.shape().to_vec(), data),
            Op::Softmax(self.id),
            self.requires_grad(),
        )
    }

    /// Exact (erf) GELU.
    pub fn gelu(self) -> Var<'t, S> {
        let v = self.value().map(kernels::gelu);
        self.emit(v, Op::Gelu(self.id), self.requires_grad())
    }

    /// Bilinear resize of `[B,C,H,W]` with align-corners=false sampling.
    pub fn upsample_bilinear(self, out_h: usize, out_w: usize) -> Result<Var<'t, S>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 4 || out_h == 0 || out_w == 0 {
            return Err(shape_err!("upsample needs [B,C,H,W] and positive size, got {s:?} -> {out_h}x{out_w}"));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let data = kernels::upsample_forward(x.data(), planes, h, w, out_h, out_w);
        let shape = vec![s[0], s[1], out_h, out_w];
        Ok(self.emit(
            Tensor::from_parts(shape, data),
            Op::Upsample {
                a: self.id,
                planes,
                h,
                w,
                oh: out_h,
                ow: out_w,
            },
            self.requires_grad(),
        ))
    }

    /// Mean binary cross-entropy of logits against a `{0,1}` target.
    pub fn bce_with_logits(self, target: &Tensor<S>) -> Result<Var<'t, S>> {
        let z = self.value();
        if z.shape() != target.shape() {
            return Err(shape_err!(
                "bce: logits {:?} and target {:?} differ",
                z.shape(),
                target.shape()
            ));
        }
        if let Some(bad) = target.data().iter().find(|&&t| t != S::zero() && t != S::one()) {
            return Err(Error::Validation(format!("bce target must be binary, found {bad}")));
        }
        let loss = kernels::bce_with_logits(z.data(), target.data());
        Ok(self.emit(
            Tensor::scalar(loss),
            Op::Bce {
                z: self.id,
                target: Rc::new(target.clone()),
            },
            self.requires_grad(),
        ))
    }
}

/// Elementwise logistic function on a plain tensor.
pub fn sigmoid<S: Element>(t: &Tensor<S>) -> Tensor<S> {
    t.map(kernels::sigmoid)
}
