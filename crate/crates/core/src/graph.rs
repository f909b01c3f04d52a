//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A `Graph` owns an append-only list of nodes; every operation records its
//! inputs, saved context and eagerly computed output. `Tensor` is a cheap
//! handle (graph + node id). `backward` walks the tape once in reverse,
//! accumulating gradients into pass-local buffers and folding the results
//! into persistent per-leaf gradients at the end, so calling it twice adds
//! the two gradients.
//!
//! A node requires a gradient iff any of its inputs does; gradient work for
//! frozen branches is skipped entirely.

use crate::array::{numel, Array};
use crate::error::{contract_err, shape_err, Result};
use crate::kernels::broadcast::{binary_map, broadcast_shape, reduce_to_shape};
use crate::kernels::conv2d::{self, out_dim, Conv2dSpec};
use crate::kernels::conv3d::{self, Conv3dSpec};
use crate::kernels::{layout, matmul, norm, resize};
use crate::scalar::Scalar;
use std::cell::RefCell;
use std::rc::Rc;

enum Op<T: Scalar> {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(T),
    AddScalar(T),
    Matmul {
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_batched: bool,
    },
    Conv2d {
        spec: Conv2dSpec,
        xs: (usize, usize, usize, usize),
        ks: (usize, usize, usize),
    },
    Conv3d {
        spec: Conv3dSpec,
        xs: (usize, usize, usize, usize, usize),
        ks: (usize, usize, usize, usize),
    },
    Upsample2d(usize),
    Upsample3dSpatial(usize),
    Softmax {
        axis: usize,
    },
    GroupNorm {
        groups: usize,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Silu,
    L2NormRows {
        inv: Vec<T>,
    },
    Reshape,
    Permute {
        perm: Vec<usize>,
    },
    Slice {
        axis: usize,
        start: usize,
        len: usize,
    },
    Concat {
        axis: usize,
    },
    SumAll,
    MeanAll,
    MeanTail {
        tail: usize,
    },
    GatherRows {
        ids: Vec<usize>,
    },
    CrossEntropyMean {
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T: Scalar> {
    op: Op<T>,
    inputs: Vec<usize>,
    shape: Vec<usize>,
    data: Rc<[T]>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

pub struct Graph<T: Scalar> {
    inner: Rc<RefCell<Vec<Node<T>>>>,
}

impl<T: Scalar> Clone for Graph<T> {
    fn clone(&self) -> Self {
        Graph {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one node of a graph.
pub struct Tensor<T: Scalar> {
    graph: Graph<T>,
    id: usize,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            graph: self.graph.clone(),
            id: self.id,
        }
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            inner: Rc::new(RefCell::new(Vec::new())),
        }
    }

    pub fn node_count(&self) -> usize {
        self.inner.borrow().len()
    }

    pub fn leaf(&self, value: &Array<T>, requires_grad: bool) -> Tensor<T> {
        self.push(
            Op::Leaf,
            vec![],
            value.shape().to_vec(),
            value.data().to_vec(),
            requires_grad,
        )
    }

    pub fn constant(&self, value: &Array<T>) -> Tensor<T> {
        self.leaf(value, false)
    }

    fn push(
        &self,
        op: Op<T>,
        inputs: Vec<usize>,
        shape: Vec<usize>,
        data: Vec<T>,
        requires_grad: bool,
    ) -> Tensor<T> {
        debug_assert_eq!(numel(&shape), data.len());
        let mut nodes = self.inner.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op,
            inputs,
            shape,
            data: data.into(),
            requires_grad,
            grad: None,
        });
        Tensor {
            graph: self.clone(),
            id,
        }
    }

    fn same_graph(&self, t: &Tensor<T>) -> Result<()> {
        if Rc::ptr_eq(&self.inner, &t.graph.inner) {
            Ok(())
        } else {
            contract_err("tensors belong to different graphs")
        }
    }

    /// Concatenate along `axis`.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        if parts.is_empty() {
            return contract_err("concat of zero tensors");
        }
        let graph = parts[0].graph.clone();
        for p in parts {
            graph.same_graph(p)?;
        }
        let (shapes, datas, rg) = {
            let nodes = graph.inner.borrow();
            let shapes: Vec<Vec<usize>> =
                parts.iter().map(|p| nodes[p.id].shape.clone()).collect();
            let datas: Vec<Rc<[T]>> =
                parts.iter().map(|p| Rc::clone(&nodes[p.id].data)).collect();
            let rg = parts.iter().any(|p| nodes[p.id].requires_grad);
            (shapes, datas, rg)
        };
        let rank = shapes[0].len();
        if axis >= rank {
            return contract_err(format!("concat axis {axis} out of range for rank {rank}"));
        }
        let mut out_shape = shapes[0].clone();
        for s in &shapes[1..] {
            if s.len() != rank {
                return shape_err(format!("concat rank mismatch: {:?} vs {:?}", shapes[0], s));
            }
            for (d, (&a, &b)) in shapes[0].iter().zip(s.iter()).enumerate() {
                if d != axis && a != b {
                    return shape_err(format!("concat shape mismatch: {:?} vs {:?}", shapes[0], s));
                }
            }
            out_shape[axis] += s[axis];
        }
        let part_refs: Vec<(&[T], &[usize])> = datas
            .iter()
            .zip(shapes.iter())
            .map(|(d, s)| (d.as_ref(), s.as_slice()))
            .collect();
        let data = layout::concat_copy(&part_refs, axis, &out_shape);
        Ok(graph.push(
            Op::Concat { axis },
            parts.iter().map(|p| p.id).collect(),
            out_shape,
            data,
            rg,
        ))
    }

    /// Reset stored leaf gradients.
    pub fn zero_grads(&self) {
        for node in self.inner.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    /// Reverse pass from a one-element loss node. Accumulates into leaf
    /// gradients; intermediate gradient buffers are local to this call.
    pub fn backward(&self, loss: &Tensor<T>) -> Result<()> {
        self.same_graph(loss)?;
        let mut nodes = self.inner.borrow_mut();
        if numel(&nodes[loss.id].shape) != 1 {
            return contract_err(format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[loss.id].shape
            ));
        }
        if !nodes[loss.id].requires_grad {
            return contract_err("backward on a graph with no trainable leaves");
        }
        let mut local: Vec<Option<Vec<T>>> = Vec::new();
        local.resize_with(loss.id + 1, || None);
        local[loss.id] = Some(vec![T::one()]);
        let mut leaf_grads: Vec<(usize, Vec<T>)> = Vec::new();
        for id in (0..=loss.id).rev() {
            let Some(g) = local[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            if matches!(nodes[id].op, Op::Leaf) {
                leaf_grads.push((id, g));
                continue;
            }
            for (input_id, contrib) in op_backward(&nodes, id, &g) {
                match &mut local[input_id] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(contrib) {
                            *a += v;
                        }
                    }
                    slot => *slot = Some(contrib),
                }
            }
        }
        for (id, g) in leaf_grads {
            match &mut nodes[id].grad {
                Some(acc) => {
                    for (a, v) in acc.iter_mut().zip(g) {
                        *a += v;
                    }
                }
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }
}

/// Gradient contributions of node `id` to each differentiable input.
fn op_backward<T: Scalar>(nodes: &[Node<T>], id: usize, g: &[T]) -> Vec<(usize, Vec<T>)> {
    let node = &nodes[id];
    let inp = |i: usize| -> &Node<T> { &nodes[node.inputs[i]] };
    let needs = |i: usize| -> bool { inp(i).requires_grad };
    let mut out: Vec<(usize, Vec<T>)> = Vec::new();
    let mut emit = |i: usize, v: Vec<T>| out.push((node.inputs[i], v));
    match &node.op {
        Op::Leaf => {}
        Op::Add => {
            for i in 0..2 {
                if needs(i) {
                    emit(i, reduce_to_shape(g, &node.shape, &inp(i).shape));
                }
            }
        }
        Op::Sub => {
            if needs(0) {
                emit(0, reduce_to_shape(g, &node.shape, &inp(0).shape));
            }
            if needs(1) {
                let mut d = reduce_to_shape(g, &node.shape, &inp(1).shape);
                for v in d.iter_mut() {
                    *v = -*v;
                }
                emit(1, d);
            }
        }
        Op::Mul => {
            for (i, j) in [(0usize, 1usize), (1, 0)] {
                if needs(i) {
                    let prod = binary_map(
                        g,
                        &node.shape,
                        &inp(j).data,
                        &inp(j).shape,
                        &node.shape,
                        |a, b| a * b,
                    );
                    emit(i, reduce_to_shape(&prod, &node.shape, &inp(i).shape));
                }
            }
        }
        Op::Scale(s) => {
            if needs(0) {
                emit(0, g.iter().map(|&v| v * *s).collect());
            }
        }
        Op::AddScalar(_) => {
            if needs(0) {
                emit(0, g.to_vec());
            }
        }
        Op::Matmul {
            batch,
            m,
            k,
            n,
            b_batched,
        } => {
            if needs(0) {
                let mut da = vec![T::zero(); batch * m * k];
                matmul::matmul_bwd_a(g, &inp(1).data, *batch, *m, *k, *n, *b_batched, &mut da);
                emit(0, da);
            }
            if needs(1) {
                let b_len = if *b_batched { batch * k * n } else { k * n };
                let mut db = vec![T::zero(); b_len];
                matmul::matmul_bwd_b(&inp(0).data, g, *batch, *m, *k, *n, *b_batched, &mut db);
                emit(1, db);
            }
        }
        Op::Conv2d { spec, xs, ks } => {
            if needs(0) {
                let mut dx = vec![T::zero(); xs.0 * xs.1 * xs.2 * xs.3];
                conv2d::conv2d_bwd_input(g, &inp(1).data, *xs, *ks, *spec, &mut dx);
                emit(0, dx);
            }
            if needs(1) {
                let mut dw = vec![T::zero(); ks.0 * (xs.1 / spec.groups) * ks.1 * ks.2];
                conv2d::conv2d_bwd_weight(g, &inp(0).data, *xs, *ks, *spec, &mut dw);
                emit(1, dw);
            }
            if node.inputs.len() > 2 && needs(2) {
                let plane = node.shape[2] * node.shape[3];
                let mut db = vec![T::zero(); ks.0];
                conv2d::conv2d_bwd_bias(g, xs.0, ks.0, plane, &mut db);
                emit(2, db);
            }
        }
        Op::Conv3d { spec, xs, ks } => {
            if needs(0) {
                let mut dx = vec![T::zero(); xs.0 * xs.1 * xs.2 * xs.3 * xs.4];
                conv3d::conv3d_bwd_input(g, &inp(1).data, *xs, *ks, *spec, &mut dx);
                emit(0, dx);
            }
            if needs(1) {
                let mut dw = vec![T::zero(); ks.0 * xs.1 * ks.1 * ks.2 * ks.3];
                conv3d::conv3d_bwd_weight(g, &inp(0).data, *xs, *ks, *spec, &mut dw);
                emit(1, dw);
            }
            if node.inputs.len() > 2 && needs(2) {
                let plane = node.shape[2] * node.shape[3] * node.shape[4];
                let mut db = vec![T::zero(); ks.0];
                conv2d::conv2d_bwd_bias(g, xs.0, ks.0, plane, &mut db);
                emit(2, db);
            }
        }
        Op::Upsample2d(f) => {
            if needs(0) {
                let s = &inp(0).shape;
                let mut dx = vec![T::zero(); numel(s)];
                resize::upsample2d_bwd(g, s[0] * s[1], s[2], s[3], *f, &mut dx);
                emit(0, dx);
            }
        }
        Op::Upsample3dSpatial(f) => {
            if needs(0) {
                let s = &inp(0).shape;
                let mut dx = vec![T::zero(); numel(s)];
                resize::upsample3d_bwd(g, s[0] * s[1], s[2], s[3], s[4], *f, &mut dx);
                emit(0, dx);
            }
        }
        Op::Softmax { axis } => {
            if needs(0) {
                let mut dx = vec![T::zero(); g.len()];
                norm::softmax_bwd(g, &node.data, &node.shape, *axis, &mut dx);
                emit(0, dx);
            }
        }
        Op::GroupNorm {
            groups,
            mean,
            inv_std,
        } => {
            let xs = &inp(0).shape;
            let (batch, channels) = (xs[0], xs[1]);
            let spatial: usize = xs[2..].iter().product();
            let mut dx = if needs(0) { vec![T::zero(); g.len()] } else { Vec::new() };
            let mut dgamma = if needs(1) { vec![T::zero(); channels] } else { Vec::new() };
            let mut dbeta = if needs(2) { vec![T::zero(); channels] } else { Vec::new() };
            norm::group_norm_bwd(
                g,
                &inp(0).data,
                &inp(1).data,
                mean,
                inv_std,
                batch,
                channels,
                spatial,
                *groups,
                &mut dx,
                &mut dgamma,
                &mut dbeta,
            );
            if needs(0) {
                emit(0, dx);
            }
            if needs(1) {
                emit(1, dgamma);
            }
            if needs(2) {
                emit(2, dbeta);
            }
        }
        Op::Silu => {
            if needs(0) {
                let mut dx = vec![T::zero(); g.len()];
                norm::silu_bwd(g, &inp(0).data, &mut dx);
                emit(0, dx);
            }
        }
        Op::L2NormRows { inv } => {
            if needs(0) {
                let d = *node.shape.last().unwrap();
                let rows = g.len() / d;
                let mut dx = vec![T::zero(); g.len()];
                norm::l2_normalize_bwd(g, &node.data, inv, rows, d, &mut dx);
                emit(0, dx);
            }
        }
        Op::Reshape => {
            if needs(0) {
                emit(0, g.to_vec());
            }
        }
        Op::Permute { perm } => {
            if needs(0) {
                emit(0, layout::permute_copy(g, &node.shape, &layout::invert_perm(perm)));
            }
        }
        Op::Slice { axis, start, len } => {
            if needs(0) {
                let mut dx = vec![T::zero(); numel(&inp(0).shape)];
                layout::slice_axis_bwd(g, &inp(0).shape, *axis, *start, *len, &mut dx);
                emit(0, dx);
            }
        }
        Op::Concat { axis } => {
            let shapes: Vec<&[usize]> = node
                .inputs
                .iter()
                .map(|&i| nodes[i].shape.as_slice())
                .collect();
            let parts = layout::concat_bwd(g, &shapes, *axis);
            for (i, part) in parts.into_iter().enumerate() {
                if needs(i) {
                    emit(i, part);
                }
            }
        }
        Op::SumAll => {
            if needs(0) {
                emit(0, vec![g[0]; numel(&inp(0).shape)]);
            }
        }
        Op::MeanAll => {
            if needs(0) {
                let n = numel(&inp(0).shape);
                emit(0, vec![g[0] / T::from_f64(n as f64); n]);
            }
        }
        Op::MeanTail { tail } => {
            if needs(0) {
                let scale = T::one() / T::from_f64(*tail as f64);
                let mut dx = Vec::with_capacity(numel(&inp(0).shape));
                for &gv in g {
                    let v = gv * scale;
                    dx.extend(std::iter::repeat(v).take(*tail));
                }
                emit(0, dx);
            }
        }
        Op::GatherRows { ids } => {
            if needs(0) {
                let d = *node.shape.last().unwrap();
                let mut dt = vec![T::zero(); numel(&inp(0).shape)];
                layout::scatter_rows_add(g, d, ids, &mut dt);
                emit(0, dt);
            }
        }
        Op::CrossEntropyMean { targets, probs } => {
            if needs(0) {
                let k = *inp(0).shape.last().unwrap();
                let rows = targets.len();
                let mut dl = vec![T::zero(); rows * k];
                norm::cross_entropy_bwd(g[0], probs, rows, k, targets, &mut dl);
                emit(0, dl);
            }
        }
    }
    out
}

impl<T: Scalar> Tensor<T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &Graph<T> {
        &self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.inner.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        numel(&self.graph.inner.borrow()[self.id].shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.inner.borrow()[self.id].requires_grad
    }

    pub fn value(&self) -> Array<T> {
        let nodes = self.graph.inner.borrow();
        Array::new(nodes[self.id].shape.clone(), nodes[self.id].data.to_vec())
            .expect("node shape/data consistent")
    }

    pub fn item(&self) -> Result<T> {
        let nodes = self.graph.inner.borrow();
        if numel(&nodes[self.id].shape) != 1 {
            return contract_err(format!(
                "item() on tensor of shape {:?}",
                nodes[self.id].shape
            ));
        }
        Ok(nodes[self.id].data[0])
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self) -> Option<Array<T>> {
        let nodes = self.graph.inner.borrow();
        nodes[self.id]
            .grad
            .as_ref()
            .map(|g| Array::new(nodes[self.id].shape.clone(), g.clone()).expect("grad shape"))
    }

    fn with_node<R>(&self, f: impl FnOnce(&Node<T>) -> R) -> R {
        f(&self.graph.inner.borrow()[self.id])
    }

    fn binary(&self, other: &Tensor<T>, op: Op<T>) -> Result<Tensor<T>> {
        self.graph.same_graph(other)?;
        let (a_shape, b_shape, a_data, b_data, rg) = {
            let nodes = self.graph.inner.borrow();
            (
                nodes[self.id].shape.clone(),
                nodes[other.id].shape.clone(),
                Rc::clone(&nodes[self.id].data),
                Rc::clone(&nodes[other.id].data),
                nodes[self.id].requires_grad || nodes[other.id].requires_grad,
            )
        };
        let out_shape = broadcast_shape(&a_shape, &b_shape)?;
        let f: fn(T, T) -> T = match op {
            Op::Add => |a, b| a + b,
            Op::Sub => |a, b| a - b,
            Op::Mul => |a, b| a * b,
            _ => unreachable!(),
        };
        let data = binary_map(&a_data, &a_shape, &b_data, &b_shape, &out_shape, f);
        Ok(self
            .graph
            .push(op, vec![self.id, other.id], out_shape, data, rg))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Op::Add)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Op::Sub)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Op::Mul)
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        let (shape, data, rg) =
            self.with_node(|n| (n.shape.clone(), n.data.iter().map(|&v| v * s).collect(), n.requires_grad));
        self.graph.push(Op::Scale(s), vec![self.id], shape, data, rg)
    }

    pub fn add_scalar(&self, s: T) -> Tensor<T> {
        let (shape, data, rg) =
            self.with_node(|n| (n.shape.clone(), n.data.iter().map(|&v| v + s).collect(), n.requires_grad));
        self.graph
            .push(Op::AddScalar(s), vec![self.id], shape, data, rg)
    }

    /// Batched matrix product. Leading dimensions of `self` are batch;
    /// `other` either shares them exactly or is a single 2D matrix applied
    /// to every batch element.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.graph.same_graph(other)?;
        let (a_shape, b_shape, a_data, b_data, rg) = {
            let nodes = self.graph.inner.borrow();
            (
                nodes[self.id].shape.clone(),
                nodes[other.id].shape.clone(),
                Rc::clone(&nodes[self.id].data),
                Rc::clone(&nodes[other.id].data),
                nodes[self.id].requires_grad || nodes[other.id].requires_grad,
            )
        };
        if a_shape.len() < 2 || b_shape.len() < 2 {
            return shape_err(format!("matmul needs rank >= 2, got {a_shape:?} @ {b_shape:?}"));
        }
        let (m, k) = (a_shape[a_shape.len() - 2], a_shape[a_shape.len() - 1]);
        let (bk, n) = (b_shape[b_shape.len() - 2], b_shape[b_shape.len() - 1]);
        if k != bk {
            return shape_err(format!("matmul inner dims differ: {a_shape:?} @ {b_shape:?}"));
        }
        let batch: usize = a_shape[..a_shape.len() - 2].iter().product();
        let b_batched = if b_shape.len() == 2 {
            false
        } else if b_shape[..b_shape.len() - 2] == a_shape[..a_shape.len() - 2] {
            true
        } else {
            return shape_err(format!(
                "matmul batch dims differ: {a_shape:?} @ {b_shape:?}"
            ));
        };
        let mut out_shape = a_shape[..a_shape.len() - 1].to_vec();
        out_shape.push(n);
        let mut data = vec![T::zero(); batch * m * n];
        matmul::matmul_fwd(&a_data, &b_data, batch, m, k, n, b_batched, &mut data);
        Ok(self.graph.push(
            Op::Matmul {
                batch,
                m,
                k,
                n,
                b_batched,
            },
            vec![self.id, other.id],
            out_shape,
            data,
            rg,
        ))
    }

    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: (usize, usize),
        padding: (usize, usize),
        groups: usize,
    ) -> Result<Tensor<T>> {
        self.graph.same_graph(weight)?;
        if let Some(b) = bias {
            self.graph.same_graph(b)?;
        }
        let nodes = self.graph.inner.borrow();
        let xs_shape = nodes[self.id].shape.clone();
        let ws_shape = nodes[weight.id].shape.clone();
        if xs_shape.len() != 4 || ws_shape.len() != 4 {
            return shape_err(format!(
                "conv2d expects x [B,C,H,W] and w [O,I,Kh,Kw], got {xs_shape:?}, {ws_shape:?}"
            ));
        }
        if stride.0 == 0 || stride.1 == 0 || groups == 0 {
            return contract_err("conv2d stride and groups must be nonzero");
        }
        let (batch, cin, h, w) = (xs_shape[0], xs_shape[1], xs_shape[2], xs_shape[3]);
        let (cout, wcin, kh, kw) = (ws_shape[0], ws_shape[1], ws_shape[2], ws_shape[3]);
        if cin % groups != 0 || cout % groups != 0 || wcin != cin / groups {
            return shape_err(format!(
                "conv2d channel/group mismatch: x {xs_shape:?}, w {ws_shape:?}, groups {groups}"
            ));
        }
        if h + 2 * padding.0 < kh || w + 2 * padding.1 < kw {
            return shape_err(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {h}x{w} pad {padding:?}"
            ));
        }
        if let Some(b) = bias {
            let bs = &nodes[b.id].shape;
            if bs.as_slice() != [cout] {
                return shape_err(format!("conv2d bias shape {bs:?} != [{cout}]"));
            }
        }
        let spec = Conv2dSpec {
            stride,
            padding,
            groups,
        };
        let ho = out_dim(h, kh, stride.0, padding.0);
        let wo = out_dim(w, kw, stride.1, padding.1);
        let x_data = Rc::clone(&nodes[self.id].data);
        let w_data = Rc::clone(&nodes[weight.id].data);
        let b_data = bias.map(|b| Rc::clone(&nodes[b.id].data));
        let mut rg = nodes[self.id].requires_grad || nodes[weight.id].requires_grad;
        let mut inputs = vec![self.id, weight.id];
        if let Some(b) = bias {
            rg |= nodes[b.id].requires_grad;
            inputs.push(b.id);
        }
        drop(nodes);
        let mut data = vec![T::zero(); batch * cout * ho * wo];
        conv2d::conv2d_fwd(
            &x_data,
            &w_data,
            b_data.as_deref(),
            (batch, cin, h, w),
            (cout, kh, kw),
            spec,
            &mut data,
        );
        Ok(self.graph.push(
            Op::Conv2d {
                spec,
                xs: (batch, cin, h, w),
                ks: (cout, kh, kw),
            },
            inputs,
            vec![batch, cout, ho, wo],
            data,
            rg,
        ))
    }

    pub fn conv3d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: (usize, usize, usize),
        padding: (usize, usize, usize),
    ) -> Result<Tensor<T>> {
        self.graph.same_graph(weight)?;
        if let Some(b) = bias {
            self.graph.same_graph(b)?;
        }
        let nodes = self.graph.inner.borrow();
        let xs_shape = nodes[self.id].shape.clone();
        let ws_shape = nodes[weight.id].shape.clone();
        if xs_shape.len() != 5 || ws_shape.len() != 5 {
            return shape_err(format!(
                "conv3d expects x [B,C,L,H,W] and w [O,I,Kl,Kh,Kw], got {xs_shape:?}, {ws_shape:?}"
            ));
        }
        if stride.0 == 0 || stride.1 == 0 || stride.2 == 0 {
            return contract_err("conv3d stride must be nonzero");
        }
        let (batch, cin, l, h, w) = (
            xs_shape[0], xs_shape[1], xs_shape[2], xs_shape[3], xs_shape[4],
        );
        let (cout, wcin, kl, kh, kw) = (
            ws_shape[0], ws_shape[1], ws_shape[2], ws_shape[3], ws_shape[4],
        );
        if wcin != cin {
            return shape_err(format!(
                "conv3d channel mismatch: x {xs_shape:?}, w {ws_shape:?}"
            ));
        }
        if l + 2 * padding.0 < kl || h + 2 * padding.1 < kh || w + 2 * padding.2 < kw {
            return shape_err(format!(
                "conv3d kernel {kl}x{kh}x{kw} larger than padded input {l}x{h}x{w} pad {padding:?}"
            ));
        }
        if let Some(b) = bias {
            let bs = &nodes[b.id].shape;
            if bs.as_slice() != [cout] {
                return shape_err(format!("conv3d bias shape {bs:?} != [{cout}]"));
            }
        }
        let spec = Conv3dSpec { stride, padding };
        let lo = out_dim(l, kl, stride.0, padding.0);
        let ho = out_dim(h, kh, stride.1, padding.1);
        let wo = out_dim(w, kw, stride.2, padding.2);
        let x_data = Rc::clone(&nodes[self.id].data);
        let w_data = Rc::clone(&nodes[weight.id].data);
        let b_data = bias.map(|b| Rc::clone(&nodes[b.id].data));
        let mut rg = nodes[self.id].requires_grad || nodes[weight.id].requires_grad;
        let mut inputs = vec![self.id, weight.id];
        if let Some(b) = bias {
            rg |= nodes[b.id].requires_grad;
            inputs.push(b.id);
        }
        drop(nodes);
        let mut data = vec![T::zero(); batch * cout * lo * ho * wo];
        conv3d::conv3d_fwd(
            &x_data,
            &w_data,
            b_data.as_deref(),
            (batch, cin, l, h, w),
            (cout, kl, kh, kw),
            spec,
            &mut data,
        );
        Ok(self.graph.push(
            Op::Conv3d {
                spec,
                xs: (batch, cin, l, h, w),
                ks: (cout, kl, kh, kw),
            },
            inputs,
            vec![batch, cout, lo, ho, wo],
            data,
            rg,
        ))
    }

    pub fn upsample_nearest2d(&self, factor: usize) -> Result<Tensor<T>> {
        let (shape, data, rg) =
            self.with_node(|n| (n.shape.clone(), Rc::clone(&n.data), n.requires_grad));
        if shape.len() != 4 {
            return shape_err(format!("upsample_nearest2d expects [B,C,H,W], got {shape:?}"));
        }
        if factor == 0 {
            return contract_err("upsample factor must be nonzero");
        }
        let out_shape = vec![shape[0], shape[1], shape[2] * factor, shape[3] * factor];
        let mut out = vec![T::zero(); numel(&out_shape)];
        resize::upsample2d_fwd(&data, shape[0] * shape[1], shape[2], shape[3], factor, &mut out);
        Ok(self
            .graph
            .push(Op::Upsample2d(factor), vec![self.id], out_shape, out, rg))
    }

    /// Nearest upsampling of H and W only; the third-from-last axis (frame
    /// count) is preserved.
    pub fn upsample_nearest3d_spatial(&self, factor: usize) -> Result<Tensor<T>> {
        let (shape, data, rg) =
            self.with_node(|n| (n.shape.clone(), Rc::clone(&n.data), n.requires_grad));
        if shape.len() != 5 {
            return shape_err(format!(
                "upsample_nearest3d_spatial expects [B,C,L,H,W], got {shape:?}"
            ));
        }
        if factor == 0 {
            return contract_err("upsample factor must be nonzero");
        }
        let out_shape = vec![
            shape[0],
            shape[1],
            shape[2],
            shape[3] * factor,
            shape[4] * factor,
        ];
        let mut out = vec![T::zero(); numel(&out_shape)];
        resize::upsample3d_fwd(
            &data,
            shape[0] * shape[1],
            shape[2],
            shape[3],
            shape[4],
            factor,
            &mut out,
        );
        Ok(self.graph.push(
            Op::Upsample3dSpatial(factor),
            vec![self.id],
            out_shape,
            out,
            rg,
        ))
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        let (shape, data, rg) =
            self.with_node(|n| (n.shape.clone(), Rc::clone(&n.data), n.requires_grad));
        if axis >= shape.len() {
            return contract_err(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            ));
        }
        let mut out = vec![T::zero(); data.len()];
        norm::softmax_fwd(&data, &shape, axis, &mut out);
        Ok(self
            .graph
            .push(Op::Softmax { axis }, vec![self.id], shape, out, rg))
    }

    pub fn group_norm(
        &self,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        groups: usize,
        eps: f64,
    ) -> Result<Tensor<T>> {
        self.graph.same_graph(gamma)?;
        self.graph.same_graph(beta)?;
        let nodes = self.graph.inner.borrow();
        let shape = nodes[self.id].shape.clone();
        if shape.len() < 3 {
            return shape_err(format!(
                "group_norm expects [B,C,spatial..], got {shape:?}"
            ));
        }
        let channels = shape[1];
        if groups == 0 || channels % groups != 0 {
            return contract_err(format!(
                "group_norm groups {groups} must divide channels {channels}"
            ));
        }
        if nodes[gamma.id].shape != [channels] || nodes[beta.id].shape != [channels] {
            return shape_err(format!(
                "group_norm affine shapes {:?}/{:?} != [{channels}]",
                nodes[gamma.id].shape, nodes[beta.id].shape
            ));
        }
        let spatial: usize = shape[2..].iter().product();
        let x_data = Rc::clone(&nodes[self.id].data);
        let g_data = Rc::clone(&nodes[gamma.id].data);
        let b_data = Rc::clone(&nodes[beta.id].data);
        let rg = nodes[self.id].requires_grad
            || nodes[gamma.id].requires_grad
            || nodes[beta.id].requires_grad;
        drop(nodes);
        let mut out = vec![T::zero(); x_data.len()];
        let (mean, inv_std) = norm::group_norm_fwd(
            &x_data, &g_data, &b_data, shape[0], channels, spatial, groups, eps, &mut out,
        );
        Ok(self.graph.push(
            Op::GroupNorm {
                groups,
                mean,
                inv_std,
            },
            vec![self.id, gamma.id, beta.id],
            shape,
            out,
            rg,
        ))
    }

    pub fn silu(&self) -> Tensor<T> {
        let (shape, data, rg) =
            self.with_node(|n| (n.shape.clone(), Rc::clone(&n.data), n.requires_grad));
        let mut out = vec![T::zero(); data.len()];
        norm::silu_fwd(&data, &mut out);
        self.graph.push(Op::Silu, vec![self.id], shape, out, rg)
    }

    /// L2-normalize the last axis.
    pub fn l2_normalize_rows(&self, eps: f64) -> Result<Tensor<T>> {
        let (shape, data, rg) =
            self.with_node(|n| (n.shape.clone(), Rc::clone(&n.data), n.requires_grad));
        if shape.is_empty() {
            return shape_err("l2_normalize_rows on rank-0 tensor");
        }
        let d = *shape.last().unwrap();
        let rows = data.len() / d.max(1);
        let mut out = vec![T::zero(); data.len()];
        let inv = norm::l2_normalize_fwd(&data, rows, d, eps, &mut out);
        Ok(self
            .graph
            .push(Op::L2NormRows { inv }, vec![self.id], shape, out, rg))
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor<T>> {
        let (shape, data, rg) =
            self.with_node(|n| (n.shape.clone(), Rc::clone(&n.data), n.requires_grad));
        if numel(new_shape) != data.len() {
            return shape_err(format!("cannot reshape {shape:?} to {new_shape:?}"));
        }
        Ok(self.graph.push(
            Op::Reshape,
            vec![self.id],
            new_shape.to_vec(),
            data.to_vec(),
            rg,
        ))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let (shape, data, rg) =
            self.with_node(|n| (n.shape.clone(), Rc::clone(&n.data), n.requires_grad));
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return contract_err(format!("invalid permutation {perm:?} for rank {rank}"));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = layout::permute_copy(&data, &shape, perm);
        Ok(self.graph.push(
            Op::Permute { perm: perm.to_vec() },
            vec![self.id],
            out_shape,
            out,
            rg,
        ))
    }

    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        let (shape, data, rg) =
            self.with_node(|n| (n.shape.clone(), Rc::clone(&n.data), n.requires_grad));
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return contract_err(format!(
                "slice [{start}, {start}+{len}) on axis {axis} of shape {shape:?}"
            ));
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let out = layout::slice_axis_copy(&data, &shape, axis, start, len);
        Ok(self.graph.push(
            Op::Slice { axis, start, len },
            vec![self.id],
            out_shape,
            out,
            rg,
        ))
    }

    pub fn sum_all(&self) -> Tensor<T> {
        let (data, rg) = self.with_node(|n| (Rc::clone(&n.data), n.requires_grad));
        let mut acc = T::zero();
        for &v in data.iter() {
            acc += v;
        }
        self.graph
            .push(Op::SumAll, vec![self.id], vec![1], vec![acc], rg)
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let (data, rg) = self.with_node(|n| (Rc::clone(&n.data), n.requires_grad));
        let mut acc = T::zero();
        for &v in data.iter() {
            acc += v;
        }
        let mean = acc / T::from_f64(data.len() as f64);
        self.graph
            .push(Op::MeanAll, vec![self.id], vec![1], vec![mean], rg)
    }

    /// Mean over the last `ndims` axes.
    pub fn mean_tail(&self, ndims: usize) -> Result<Tensor<T>> {
        let (shape, data, rg) =
            self.with_node(|n| (n.shape.clone(), Rc::clone(&n.data), n.requires_grad));
        if ndims == 0 || ndims >= shape.len() {
            return contract_err(format!(
                "mean_tail over {ndims} axes of rank-{} tensor",
                shape.len()
            ));
        }
        let out_shape = shape[..shape.len() - ndims].to_vec();
        let tail: usize = shape[shape.len() - ndims..].iter().product();
        let inv = T::one() / T::from_f64(tail as f64);
        let mut out = Vec::with_capacity(numel(&out_shape));
        for chunk in data.chunks(tail) {
            let mut acc = T::zero();
            for &v in chunk {
                acc += v;
            }
            out.push(acc * inv);
        }
        Ok(self
            .graph
            .push(Op::MeanTail { tail }, vec![self.id], out_shape, out, rg))
    }

    /// Row lookup into a [V, D] table; `ids` are row indices.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor<T>> {
        let (shape, data, rg) =
            self.with_node(|n| (n.shape.clone(), Rc::clone(&n.data), n.requires_grad));
        if shape.len() != 2 {
            return shape_err(format!("gather_rows expects a [V,D] table, got {shape:?}"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= shape[0]) {
            return contract_err(format!("gather_rows id {bad} out of range {}", shape[0]));
        }
        let out = layout::gather_rows(&data, shape[1], ids);
        Ok(self.graph.push(
            Op::GatherRows { ids: ids.to_vec() },
            vec![self.id],
            vec![ids.len(), shape[1]],
            out,
            rg,
        ))
    }

    /// Mean softmax cross-entropy of [N, K] logits against class indices.
    pub fn cross_entropy_mean(&self, targets: &[usize]) -> Result<Tensor<T>> {
        let (shape, data, rg) =
            self.with_node(|n| (n.shape.clone(), Rc::clone(&n.data), n.requires_grad));
        if shape.len() != 2 || shape[0] != targets.len() {
            return shape_err(format!(
                "cross_entropy_mean expects [N,K] logits with N={} targets, got {shape:?}",
                targets.len()
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= shape[1]) {
            return contract_err(format!("target class {bad} out of range {}", shape[1]));
        }
        let (loss, probs) = norm::cross_entropy_fwd(&data, shape[0], shape[1], targets);
        Ok(self.graph.push(
            Op::CrossEntropyMean {
                targets: targets.to_vec(),
                probs,
            },
            vec![self.id],
            vec![1],
            vec![loss],
            rg,
        ))
    }
}
