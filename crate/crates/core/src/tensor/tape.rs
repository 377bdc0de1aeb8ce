use std::cell::{Ref, RefCell};
use std::rc::Rc;

use super::{gemm, Element, Result, Tensor, TensorError};

/// Shape of one executed matrix product: `batch` independent `m x k · k x n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatmulRecord {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

impl MatmulRecord {
    pub fn macs(&self) -> u64 {
        (self.batch * self.m * self.k * self.n) as u64
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        factor: T,
    },
    Gelu {
        a: usize,
    },
    Softmax {
        a: usize,
        axis: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Permute {
        a: usize,
        perm: Vec<usize>,
    },
    Reshape {
        a: usize,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Narrow {
        a: usize,
        axis: usize,
        start: usize,
    },
    MeanAxis {
        a: usize,
        axis: usize,
    },
    Sum {
        a: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    ScaleRows {
        a: usize,
        factors: Vec<T>,
    },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed primitive ops.
///
/// Nodes are appended in execution order, so the node list is always a
/// topological order of the computation graph.
pub struct Tape<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Vec<Option<Rc<Tensor<T>>>>>,
    matmuls: RefCell<Vec<MatmulRecord>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Element> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Element> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value().shape())
    }
}

fn shape_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

fn check_finite<T: Element>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn is_suffix(full: &[usize], suffix: &[usize]) -> bool {
    suffix.len() <= full.len() && full[full.len() - suffix.len()..] == *suffix
}

/// `(outer, extent, inner)` split of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

fn permute_data<T: Element>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = contiguous_strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..total {
        out.push(data[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

struct MatmulPlan {
    batch: usize,
    a_batched: bool,
    b_batched: bool,
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
}

fn plan_matmul(a: &[usize], b: &[usize], ta: bool, tb: bool) -> Result<MatmulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return shape_err("matmul", a, b);
    }
    let (ra, rb) = (a.len(), b.len());
    let (m, ka) = if ta { (a[ra - 1], a[ra - 2]) } else { (a[ra - 2], a[ra - 1]) };
    let (kb, n) = if tb { (b[rb - 1], b[rb - 2]) } else { (b[rb - 2], b[rb - 1]) };
    if ka != kb {
        return shape_err("matmul", a, b);
    }
    let (ba, bb) = (&a[..ra - 2], &b[..rb - 2]);
    let batch_shape = if ba == bb || bb.is_empty() {
        ba
    } else if ba.is_empty() {
        bb
    } else {
        return shape_err("matmul", a, b);
    };
    let mut out_shape = batch_shape.to_vec();
    out_shape.extend([m, n]);
    Ok(MatmulPlan {
        batch: batch_shape.iter().product(),
        a_batched: !ba.is_empty(),
        b_batched: !bb.is_empty(),
        m,
        k: ka,
        n,
        out_shape,
    })
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            matmuls: RefCell::new(Vec::new()),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every matrix product executed in forward order.
    pub fn matmul_records(&self) -> Ref<'_, Vec<MatmulRecord>> {
        self.matmuls.borrow()
    }

    pub fn total_matmul_macs(&self) -> u64 {
        self.matmuls.borrow().iter().map(MatmulRecord::macs).sum()
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Gradient of the most recent backward root with respect to `var`.
    pub fn grad(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads
            .borrow()
            .get(var.id)
            .and_then(|g| g.as_ref().map(|t| (**t).clone()))
    }

    /// Reverse sweep from a scalar root. Gradients from a previous sweep are
    /// discarded, so repeated calls give identical results.
    pub fn backward(&self, root: Var<'_, T>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.id].value;
        if root_value.len() != 1 {
            return Err(TensorError::Invalid {
                op: "backward",
                msg: format!("root must be scalar, got shape {:?}", root_value.shape()),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(vec![T::one()]);

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                self.node_vjp(&nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }

        let mut stored = self.grads.borrow_mut();
        stored.clear();
        stored.extend(grads.into_iter().enumerate().map(|(id, g)| {
            g.filter(|_| nodes[id].requires_grad).map(|data| {
                Rc::new(Tensor::new(nodes[id].value.shape().to_vec(), data).expect("grad shape"))
            })
        }));
        Ok(())
    }

    fn node_vjp(&self, nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = &nodes[id].value;
        let wants = |p: usize| nodes[p].requires_grad;
        fn acc<T: Element>(grads: &mut [Option<Vec<T>>], p: usize, len: usize) -> &mut Vec<T> {
            grads[p].get_or_insert_with(|| vec![T::zero(); len])
        }

        match &nodes[id].op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                let plan = plan_matmul(av.shape(), bv.shape(), *ta, *tb).expect("planned");
                let (m, k, n) = (plan.m, plan.k, plan.n);
                if wants(*a) {
                    let ga = acc(grads, *a, av.len());
                    for bi in 0..plan.batch {
                        let ao = if plan.a_batched { bi * m * k } else { 0 };
                        let bo = if plan.b_batched { bi * k * n } else { 0 };
                        let go = &g[bi * m * n..(bi + 1) * m * n];
                        let bs = &bv.data()[bo..bo + k * n];
                        let gs = &mut ga[ao..ao + m * k];
                        if *ta {
                            gemm(k, n, m, bs, *tb, go, true, gs, true);
                        } else {
                            gemm(m, n, k, go, false, bs, !*tb, gs, true);
                        }
                    }
                }
                if wants(*b) {
                    let gb = acc(grads, *b, bv.len());
                    for bi in 0..plan.batch {
                        let ao = if plan.a_batched { bi * m * k } else { 0 };
                        let bo = if plan.b_batched { bi * k * n } else { 0 };
                        let go = &g[bi * m * n..(bi + 1) * m * n];
                        let asl = &av.data()[ao..ao + m * k];
                        let gs = &mut gb[bo..bo + k * n];
                        if *tb {
                            gemm(n, m, k, go, true, asl, *ta, gs, true);
                        } else {
                            gemm(k, m, n, asl, !*ta, go, false, gs, true);
                        }
                    }
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(nodes[id].op, Op::Sub { .. }) { -T::one() } else { T::one() };
                if wants(*a) {
                    let ga = acc(grads, *a, g.len());
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if wants(*b) {
                    let blen = nodes[*b].value.len();
                    let gb = acc(grads, *b, blen);
                    for chunk in g.chunks(blen) {
                        gb.iter_mut().zip(chunk).for_each(|(x, &y)| *x += sign * y);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                let blen = bv.len();
                if wants(*a) {
                    let ga = acc(grads, *a, g.len());
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i] * bv.data()[i % blen];
                    }
                }
                if wants(*b) {
                    let gb = acc(grads, *b, blen);
                    for (i, (&gi, &ai)) in g.iter().zip(av.data()).enumerate() {
                        gb[i % blen] += gi * ai;
                    }
                }
            }
            Op::Scale { a, factor } => {
                if wants(*a) {
                    let ga = acc(grads, *a, g.len());
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *factor);
                }
            }
            Op::Gelu { a } => {
                if wants(*a) {
                    let av = &nodes[*a].value;
                    let ga = acc(grads, *a, g.len());
                    let half = T::from_f64_lossy(0.5);
                    let inv_sqrt2 = T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
                    let inv_sqrt_2pi = T::from_f64_lossy(0.398_942_280_401_432_7);
                    for ((x, &gi), &xi) in ga.iter_mut().zip(g).zip(av.data()) {
                        let cdf = half * (T::one() + (xi * inv_sqrt2).erf());
                        let pdf = inv_sqrt_2pi * (-half * xi * xi).exp();
                        *x += gi * (cdf + xi * pdf);
                    }
                }
            }
            Op::Softmax { a, axis } => {
                if wants(*a) {
                    let (outer, len, inner) = split_axis(out.shape(), *axis);
                    let y = out.data();
                    let ga = acc(grads, *a, g.len());
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = T::zero();
                            for j in 0..len {
                                let p = base + j * inner;
                                dot += g[p] * y[p];
                            }
                            for j in 0..len {
                                let p = base + j * inner;
                                ga[p] += y[p] * (g[p] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = nodes[*gamma].value.len();
                let gam = nodes[*gamma].value.data().to_vec();
                if wants(*gamma) {
                    let gg = acc(grads, *gamma, d);
                    for (row_g, row_x) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += row_g[j] * row_x[j];
                        }
                    }
                }
                if wants(*beta) {
                    let gb = acc(grads, *beta, d);
                    for row_g in g.chunks(d) {
                        gb.iter_mut().zip(row_g).for_each(|(x, &y)| *x += y);
                    }
                }
                if wants(*x) {
                    let gx = acc(grads, *x, g.len());
                    let dn = T::from_usize(d).unwrap();
                    for (r, (row_g, row_x)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut sum_dxh = T::zero();
                        let mut sum_dxh_xh = T::zero();
                        for j in 0..d {
                            let dxh = row_g[j] * gam[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * row_x[j];
                        }
                        let scale = rstd[r] / dn;
                        for j in 0..d {
                            let dxh = row_g[j] * gam[j];
                            gx[r * d + j] += scale * (dn * dxh - sum_dxh - row_x[j] * sum_dxh_xh);
                        }
                    }
                }
            }
            Op::Permute { a, perm } => {
                if wants(*a) {
                    let inv = inverse_perm(perm);
                    let (_, back) = permute_data(g, out.shape(), &inv);
                    let ga = acc(grads, *a, g.len());
                    ga.iter_mut().zip(&back).for_each(|(x, &y)| *x += y);
                }
            }
            Op::Reshape { a } => {
                if wants(*a) {
                    let ga = acc(grads, *a, g.len());
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = split_axis(out.shape(), *axis);
                let total_extent = out.shape()[*axis];
                let mut offset = 0;
                for &p in parts {
                    let extent = nodes[p].value.shape()[*axis];
                    if wants(p) {
                        let plen = nodes[p].value.len();
                        let gp = acc(grads, p, plen);
                        for o in 0..outer {
                            let src = (o * total_extent + offset) * inner;
                            let dst = o * extent * inner;
                            for i in 0..extent * inner {
                                gp[dst + i] += g[src + i];
                            }
                        }
                    }
                    offset += extent;
                }
            }
            Op::Narrow { a, axis, start } => {
                if wants(*a) {
                    let in_shape = nodes[*a].value.shape().to_vec();
                    let (outer, in_extent, inner) = split_axis(&in_shape, *axis);
                    let extent = out.shape()[*axis];
                    let ga = acc(grads, *a, nodes[*a].value.len());
                    for o in 0..outer {
                        let dst = (o * in_extent + start) * inner;
                        let src = o * extent * inner;
                        for i in 0..extent * inner {
                            ga[dst + i] += g[src + i];
                        }
                    }
                }
            }
            Op::MeanAxis { a, axis } => {
                if wants(*a) {
                    let in_shape = nodes[*a].value.shape().to_vec();
                    let (outer, len, inner) = split_axis(&in_shape, *axis);
                    let scale = T::one() / T::from_usize(len).unwrap();
                    let ga = acc(grads, *a, nodes[*a].value.len());
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                ga[(o * len + j) * inner + i] += g[o * inner + i] * scale;
                            }
                        }
                    }
                }
            }
            Op::Sum { a } => {
                if wants(*a) {
                    let ga = acc(grads, *a, nodes[*a].value.len());
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if wants(*logits) {
                    let c = probs.len() / labels.len();
                    let scale = g[0] / T::from_usize(labels.len()).unwrap();
                    let gl = acc(grads, *logits, probs.len());
                    for (b, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let target = if j == label { T::one() } else { T::zero() };
                            gl[b * c + j] += scale * (probs[b * c + j] - target);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if wants(*table) {
                    let d = nodes[*table].value.shape()[1];
                    let gt = acc(grads, *table, nodes[*table].value.len());
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[row * d + j];
                        }
                    }
                }
            }
            Op::ScaleRows { a, factors } => {
                if wants(*a) {
                    let per = g.len() / factors.len();
                    let ga = acc(grads, *a, g.len());
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i] * factors[i / per];
                    }
                }
            }
        }
    }
}

impl<'t, T: Element> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.grad(*self)
    }

    /// Same value, cut off from gradient flow.
    pub fn detach(&self) -> Var<'t, T> {
        let value = self.value();
        self.tape.constant((*value).clone())
    }

    fn unary(&self, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        self.tape.push(value, op, self.requires_grad())
    }

    fn binary(&self, other: &Var<'t, T>, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    /// Batched matrix product over the last two axes.
    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_t(other, false, false)
    }

    /// Matrix product with either operand read transposed in its last two axes.
    pub fn matmul_t(&self, other: &Var<'t, T>, ta: bool, tb: bool) -> Result<Var<'t, T>> {
        let (av, bv) = (self.value(), other.value());
        let plan = plan_matmul(av.shape(), bv.shape(), ta, tb)?;
        let (m, k, n) = (plan.m, plan.k, plan.n);
        let mut out = vec![T::zero(); plan.batch * m * n];
        if plan.b_batched || !plan.a_batched || ta {
            for bi in 0..plan.batch {
                let ao = if plan.a_batched { bi * m * k } else { 0 };
                let bo = if plan.b_batched { bi * k * n } else { 0 };
                gemm(
                    m,
                    k,
                    n,
                    &av.data()[ao..ao + m * k],
                    ta,
                    &bv.data()[bo..bo + k * n],
                    tb,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    false,
                );
            }
        } else {
            // Shared rhs and row-major lhs: fold the batch into the row count.
            gemm(plan.batch * m, k, n, av.data(), false, bv.data(), tb, &mut out, false);
        }
        check_finite("matmul", &out)?;
        self.tape.matmuls.borrow_mut().push(MatmulRecord {
            batch: plan.batch,
            m,
            k,
            n,
        });
        let value = Tensor::new(plan.out_shape, out)?;
        Ok(self.binary(
            other,
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
                ta,
                tb,
            },
        ))
    }

    fn broadcast_binary(
        &self,
        other: &Var<'t, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(), other.value());
        if !is_suffix(av.shape(), bv.shape()) || bv.is_empty() {
            return shape_err(name, av.shape(), bv.shape());
        }
        let blen = bv.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv.data()[i % blen]))
            .collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    /// Elementwise sum; `other` may be a trailing-axes suffix broadcast over leading axes.
    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let value = self.broadcast_binary(other, "add", |x, y| x + y)?;
        Ok(self.binary(other, value, Op::Add { a: self.id, b: other.id }))
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let value = self.broadcast_binary(other, "sub", |x, y| x - y)?;
        Ok(self.binary(other, value, Op::Sub { a: self.id, b: other.id }))
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let value = self.broadcast_binary(other, "mul", |x, y| x * y)?;
        Ok(self.binary(other, value, Op::Mul { a: self.id, b: other.id }))
    }

    pub fn scale(&self, factor: T) -> Var<'t, T> {
        let value = self.value().map(|x| x * factor);
        self.unary(value, Op::Scale { a: self.id, factor })
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self) -> Result<Var<'t, T>> {
        let half = T::from_f64_lossy(0.5);
        let inv_sqrt2 = T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
        let value = self
            .value()
            .map(|x| half * x * (T::one() + (x * inv_sqrt2).erf()));
        check_finite("gelu", value.data())?;
        Ok(self.unary(value, Op::Gelu { a: self.id }))
    }

    /// Softmax along `axis`, max-subtracted for stability.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t, T>> {
        self.softmax_impl(axis, None)
    }

    /// Softmax along the last axis with masked positions forced to zero weight.
    ///
    /// `valid` has one entry per (leading-batch-index, position) pair: the
    /// input is viewed as `[batch, rows, n]` where `batch = valid.len() / n`.
    pub fn masked_softmax_last(&self, valid: &[bool]) -> Result<Var<'t, T>> {
        let rank = self.shape().len();
        if rank == 0 {
            return Err(TensorError::Axis { op: "softmax", axis: 0, rank });
        }
        self.softmax_impl(rank - 1, Some(valid))
    }

    fn softmax_impl(&self, axis: usize, valid: Option<&[bool]>) -> Result<Var<'t, T>> {
        let av = self.value();
        let rank = av.rank();
        if axis >= rank {
            return Err(TensorError::Axis { op: "softmax", axis, rank });
        }
        check_finite("softmax", av.data())?;
        let (outer, len, inner) = split_axis(av.shape(), axis);
        if let Some(valid) = valid {
            if valid.len() % len != 0 || outer % (valid.len() / len).max(1) != 0 {
                return Err(TensorError::Invalid {
                    op: "softmax",
                    msg: format!("mask of {} entries does not tile shape {:?}", valid.len(), av.shape()),
                });
            }
        }
        let rows_per_batch = valid.map(|v| outer / (v.len() / len)).unwrap_or(1);
        let x = av.data();
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            let mask = valid.map(|v| {
                let b = o / rows_per_batch;
                &v[b * len..(b + 1) * len]
            });
            for i in 0..inner {
                let base = o * len * inner + i;
                let live = |j: usize| mask.map_or(true, |m| m[j]);
                let mut max = T::neg_infinity();
                for j in (0..len).filter(|&j| live(j)) {
                    max = max.max(x[base + j * inner]);
                }
                if max == T::neg_infinity() {
                    return Err(TensorError::Invalid {
                        op: "softmax",
                        msg: "every position of a row is masked".into(),
                    });
                }
                let mut sum = T::zero();
                for j in (0..len).filter(|&j| live(j)) {
                    let e = (x[base + j * inner] - max).exp();
                    y[base + j * inner] = e;
                    sum += e;
                }
                for j in (0..len).filter(|&j| live(j)) {
                    y[base + j * inner] = y[base + j * inner] / sum;
                }
            }
        }
        let value = Tensor::new(av.shape().to_vec(), y)?;
        Ok(self.unary(value, Op::Softmax { a: self.id, axis }))
    }

    /// LayerNorm over the last axis: `(x - mean) / sqrt(var + eps) * gamma + beta`.
    pub fn layer_norm(&self, gamma: &Var<'t, T>, beta: &Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        let xv = self.value();
        let (gv, bv) = (gamma.value(), beta.value());
        let d = *xv.shape().last().unwrap_or(&0);
        if gv.shape() != [d] || bv.shape() != [d] || d == 0 {
            return shape_err("layer_norm", xv.shape(), gv.shape());
        }
        let rows = xv.len() / d;
        let dn = T::from_usize(d).unwrap();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut y = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                y[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        check_finite("layer_norm", &y)?;
        let value = Tensor::new(xv.shape().to_vec(), y)?;
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        Ok(self.tape.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t, T>> {
        let av = self.value();
        let mut seen = vec![false; perm.len()];
        if perm.len() != av.rank() || perm.iter().any(|&p| p >= perm.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of rank {}", av.rank()),
            });
        }
        let (shape, data) = permute_data(av.data(), av.shape(), perm);
        let value = Tensor::new(shape, data)?;
        Ok(self.unary(value, Op::Permute { a: self.id, perm: perm.to_vec() }))
    }

    /// Swap of the last two axes.
    pub fn transpose(&self) -> Result<Var<'t, T>> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(TensorError::Axis { op: "transpose", axis: 1, rank });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(&perm)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let value = (*self.value()).clone().reshape(shape.to_vec())?;
        Ok(self.unary(value, Op::Reshape { a: self.id }))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let tape = first.tape;
        let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::Axis { op: "concat", axis, rank: base.len() });
        }
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return shape_err("concat", &base, s);
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let extent = v.shape()[axis];
                data.extend_from_slice(&v.data()[o * extent * inner..(o + 1) * extent * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        let rg = parts.iter().any(|p| p.requires_grad());
        Ok(tape.push(
            value,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
            rg,
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let av = self.value();
        let rank = av.rank();
        if axis >= rank {
            return Err(TensorError::Axis { op: "narrow", axis, rank });
        }
        if start + len > av.shape()[axis] {
            return Err(TensorError::Invalid {
                op: "narrow",
                msg: format!("range {start}..{} exceeds extent {}", start + len, av.shape()[axis]),
            });
        }
        let (outer, extent, inner) = split_axis(av.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * extent + start) * inner;
            data.extend_from_slice(&av.data()[s..s + len * inner]);
        }
        let mut shape = av.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(shape, data)?;
        Ok(self.unary(value, Op::Narrow { a: self.id, axis, start }))
    }

    /// Mean over `axis`, which is removed from the shape.
    ///
    /// Values are summed in sorted order, so permuting entries along `axis`
    /// leaves the result bitwise unchanged.
    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t, T>> {
        let av = self.value();
        let rank = av.rank();
        if axis >= rank {
            return Err(TensorError::Axis { op: "mean_axis", axis, rank });
        }
        let (outer, len, inner) = split_axis(av.shape(), axis);
        let scale = T::one() / T::from_usize(len.max(1)).unwrap();
        let mut data = vec![T::zero(); outer * inner];
        let mut column = Vec::with_capacity(len);
        for o in 0..outer {
            for i in 0..inner {
                column.clear();
                column.extend((0..len).map(|j| av.data()[(o * len + j) * inner + i]));
                column.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
                data[o * inner + i] = column.iter().fold(T::zero(), |acc, &x| acc + x) * scale;
            }
        }
        let mut shape = av.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, data)?;
        Ok(self.unary(value, Op::MeanAxis { a: self.id, axis }))
    }

    pub fn sum(&self) -> Var<'t, T> {
        let total = self.value().data().iter().copied().sum::<T>();
        self.unary(Tensor::scalar(total), Op::Sum { a: self.id })
    }

    pub fn mean(&self) -> Var<'t, T> {
        let n = self.value().len().max(1);
        self.sum().scale(T::one() / T::from_usize(n).unwrap())
    }

    /// Mean negative log-likelihood of `labels` under row-softmax of `[B, C]` logits.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'t, T>> {
        let lv = self.value();
        if lv.rank() != 2 || lv.shape()[0] != labels.len() || labels.is_empty() {
            return shape_err("cross_entropy", lv.shape(), &[labels.len()]);
        }
        let c = lv.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                msg: format!("label {bad} out of range for {c} classes"),
            });
        }
        check_finite("cross_entropy", lv.data())?;
        let mut probs = vec![T::zero(); lv.len()];
        let mut loss = T::zero();
        for (b, &label) in labels.iter().enumerate() {
            let row = &lv.data()[b * c..(b + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - row[label];
            for j in 0..c {
                probs[b * c + j] = (row[j] - lse).exp();
            }
        }
        loss = loss / T::from_usize(labels.len()).unwrap();
        let value = Tensor::scalar(loss);
        Ok(self.unary(
            value,
            Op::CrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Row lookup in a `[V, D]` table, giving `[ids.len(), D]`.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Var<'t, T>> {
        let tv = self.value();
        if tv.rank() != 2 {
            return shape_err("gather_rows", tv.shape(), &[ids.len()]);
        }
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::Invalid {
                    op: "gather_rows",
                    msg: format!("id {id} out of range for table of {v} rows"),
                });
            }
            data.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.unary(value, Op::Gather { table: self.id, ids: ids.to_vec() }))
    }

    /// Multiplies every slice along the leading axis by its own constant factor.
    pub fn scale_rows(&self, factors: &[T]) -> Result<Var<'t, T>> {
        let av = self.value();
        if av.rank() == 0 || av.shape()[0] != factors.len() {
            return shape_err("scale_rows", av.shape(), &[factors.len()]);
        }
        let per = av.len() / factors.len().max(1);
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * factors[i / per])
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.unary(value, Op::ScaleRows { a: self.id, factors: factors.to_vec() }))
    }
}
