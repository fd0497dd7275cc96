use std::collections::HashMap;

use super::tensor::{permute_swap, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
    },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    LayerNorm { a: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax { a: Var },
    Gelu { a: Var },
    Cos { a: Var },
    Reshape { a: Var },
    Transpose { a: Var, ax0: usize, ax1: usize },
    Slice { a: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    GatherRows { a: Var, index: Vec<Vec<usize>> },
    Mean { a: Var },
    Mse { a: Var, b: Var },
    SoftmaxCe { logits: Var, targets: Vec<f64>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    finite: bool,
}

/// Tape of recorded operations. Node order is a topological order.
///
/// Parameters enter through [`Graph::param`], which dedupes by name so a
/// tensor used twice in one forward pass accumulates a single gradient.
/// Inside [`Graph::frozen`] parameters are recorded as constants.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    named: HashMap<String, Var>,
    names: Vec<(String, Var)>,
    frozen_depth: usize,
    consumed: bool,
}

/// Result of a backward pass: gradients for every leaf that requires grad.
#[derive(Debug, Default)]
pub struct Gradients {
    by_var: HashMap<Var, Tensor>,
    by_name: HashMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_var.get(&v)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.by_var.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_var.is_empty()
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let finite = value.is_finite();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            finite,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let rg = requires_grad && self.frozen_depth == 0;
        self.push(t, Op::Leaf, rg)
    }

    /// Named trainable leaf; repeated registration of the same name yields the same node.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        if self.frozen_depth > 0 {
            return self.push(t.clone(), Op::Leaf, false);
        }
        if let Some(&v) = self.named.get(name) {
            return v;
        }
        let v = self.push(t.clone(), Op::Leaf, true);
        self.named.insert(name.to_string(), v);
        self.names.push((name.to_string(), v));
        v
    }

    /// Run `f` with every [`Graph::param`] call recorded as a constant.
    pub fn frozen<T>(&mut self, f: impl FnOnce(&mut Graph) -> T) -> T {
        self.frozen_depth += 1;
        let out = f(self);
        self.frozen_depth -= 1;
        out
    }

    fn check_finite(&self, op: &'static str, inputs: &[Var]) -> Result<()> {
        if inputs.iter().all(|v| self.nodes[v.0].finite) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    fn any_grad(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, value: Tensor, op: Op, a: Var) -> Var {
        let rg = self.any_grad(&[a]);
        self.push(value, op, rg)
    }

    // ---- forward ops ------------------------------------------------------

    /// Batched matrix product. `a` is `[.., m, k]`; `b` is either `[k, n]`
    /// (shared across the batch) or `[.., k, n]` with the same leading extents.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_finite("matmul", &[a, b])?;
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let shared_b = lead_b.is_empty();
        if k != kb || (!shared_b && lead_a != lead_b) {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let batch: usize = lead_a.iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for bi in 0..batch {
                let b_off = if shared_b { 0 } else { bi * k * n };
                matmul_kernel(
                    &ad[bi * m * k..(bi + 1) * m * k],
                    &bd[b_off..b_off + k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = lead_a.to_vec();
        shape.extend([m, n]);
        let value = Tensor::new(&shape, out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            },
            rg,
        ))
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<usize> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(self.value(a).numel() / self.value(b).numel())
    }

    fn binary_elementwise(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(Var, Var) -> Op,
    ) -> Result<Var> {
        self.check_finite(op_name, &[a, b])?;
        self.broadcast_check(op_name, a, b)?;
        let value = {
            let av = self.value(a);
            let bd = self.value(b).data();
            let nb = bd.len();
            let data = av
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[i % nb]))
                .collect();
            Tensor::new(av.shape(), data)?
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, make(a, b), rg))
    }

    /// `a + b`, where `b`'s shape must equal a trailing suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("add", a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check_finite("scale", &[a])?;
        let av = self.value(a);
        let value = Tensor::new(av.shape(), av.data().iter().map(|x| x * c).collect())?;
        Ok(self.unary(value, Op::Scale { a, c }, a))
    }

    /// Normalize over the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        self.check_finite("layer_norm", &[a])?;
        let av = self.value(a);
        let d = *av.shape().last().ok_or_else(|| shape_err("layer_norm", &[], &[]))?;
        let rows = av.numel() / d;
        let mut xhat = Vec::with_capacity(av.numel());
        let mut rstd = Vec::with_capacity(rows);
        for row in av.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(r);
            xhat.extend(row.iter().map(|x| (x - mean) * r));
        }
        let value = Tensor::new(av.shape(), xhat.clone())?;
        Ok(self.unary(value, Op::LayerNorm { a, xhat, rstd }, a))
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        self.check_finite("softmax", &[a])?;
        let av = self.value(a);
        let d = *av.shape().last().ok_or_else(|| shape_err("softmax", &[], &[]))?;
        let mut out = Vec::with_capacity(av.numel());
        for row in av.data().chunks(d) {
            softmax_row(row, &mut out);
        }
        let value = Tensor::new(av.shape(), out)?;
        Ok(self.unary(value, Op::Softmax { a }, a))
    }

    /// Exact GELU, `x · Φ(x)` with the standard normal CDF.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.check_finite("gelu", &[a])?;
        let av = self.value(a);
        let value = Tensor::new(
            av.shape(),
            av.data()
                .iter()
                .map(|&x| x * normal_cdf(x))
                .collect(),
        )?;
        Ok(self.unary(value, Op::Gelu { a }, a))
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.check_finite("cos", &[a])?;
        let av = self.value(a);
        let value = Tensor::new(av.shape(), av.data().iter().map(|x| x.cos()).collect())?;
        Ok(self.unary(value, Op::Cos { a }, a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check_finite("reshape", &[a])?;
        let value = self.value(a).clone().reshaped(shape)?;
        Ok(self.unary(value, Op::Reshape { a }, a))
    }

    pub fn transpose(&mut self, a: Var, ax0: usize, ax1: usize) -> Result<Var> {
        self.check_finite("transpose", &[a])?;
        let value = self.value(a).transposed(ax0, ax1)?;
        Ok(self.unary(value, Op::Transpose { a, ax0, ax1 }, a))
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_finite("slice", &[a])?;
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || len == 0 || start + len > sa[axis] {
            return Err(shape_err("slice", &sa, &[axis, start, len]));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let ad = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * sa[axis] * inner + start * inner;
            out.extend_from_slice(&ad[base..base + len * inner]);
        }
        let mut shape = sa.clone();
        shape[axis] = len;
        let value = Tensor::new(&shape, out)?;
        Ok(self.unary(value, Op::Slice { a, axis, start }, a))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.check_finite("concat", parts)?;
        let first = self
            .shape(*parts.first().ok_or_else(|| shape_err("concat", &[], &[]))?)
            .to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let value = Tensor::new(&shape, out)?;
        let rg = self.any_grad(parts);
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Per-batch row selection: `a` is `[B, N, D]`, `index[b]` lists rows of batch `b`.
    /// Every batch must select the same number of rows.
    pub fn gather_rows(&mut self, a: Var, index: &[Vec<usize>]) -> Result<Var> {
        self.check_finite("gather_rows", &[a])?;
        let sa = self.shape(a).to_vec();
        if sa.len() != 3 || index.len() != sa[0] || index.is_empty() {
            return Err(shape_err("gather_rows", &sa, &[index.len()]));
        }
        let (n, d) = (sa[1], sa[2]);
        let k = index[0].len();
        if k == 0 || index.iter().any(|ix| ix.len() != k || ix.iter().any(|&i| i >= n)) {
            return Err(shape_err("gather_rows", &sa, &[index.len(), k]));
        }
        let ad = self.value(a).data();
        let mut out = Vec::with_capacity(sa[0] * k * d);
        for (b, ix) in index.iter().enumerate() {
            for &i in ix {
                let off = (b * n + i) * d;
                out.extend_from_slice(&ad[off..off + d]);
            }
        }
        let value = Tensor::new(&[sa[0], k, d], out)?;
        Ok(self.unary(
            value,
            Op::GatherRows {
                a,
                index: index.to_vec(),
            },
            a,
        ))
    }

    /// Mean over all elements, as a rank-0 tensor.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check_finite("mean", &[a])?;
        let av = self.value(a);
        let m = av.data().iter().sum::<f64>() / av.numel() as f64;
        Ok(self.unary(Tensor::scalar(m), Op::Mean { a }, a))
    }

    /// Mean squared difference between equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_finite("mse", &[a, b])?;
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mse", self.shape(a), self.shape(b)));
        }
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let m = ad
            .iter()
            .zip(bd)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / ad.len() as f64;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::scalar(m), Op::Mse { a, b }, rg))
    }

    /// Batch-mean cross-entropy of `[B, C]` logits against soft targets `[B, C]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        self.check_finite("softmax_cross_entropy", &[logits])?;
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || targets.shape() != sl.as_slice() {
            return Err(shape_err("softmax_cross_entropy", &sl, targets.shape()));
        }
        if !targets.is_finite() {
            return Err(Error::NonFinite {
                op: "softmax_cross_entropy",
            });
        }
        let c = sl[1];
        let mut probs = Vec::with_capacity(sl[0] * c);
        let mut total = 0.0;
        for (row, t) in self
            .value(logits)
            .data()
            .chunks(c)
            .zip(targets.data().chunks(c))
        {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for (x, y) in row.iter().zip(t) {
                total -= y * (x - lse);
                probs.push((x - lse).exp());
            }
        }
        let value = Tensor::scalar(total / sl[0] as f64);
        Ok(self.unary(
            value,
            Op::SoftmaxCe {
                logits,
                targets: targets.data().to_vec(),
                probs,
            },
            logits,
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Allow another backward pass over the same recorded graph.
    pub fn reset(&mut self) {
        self.consumed = false;
    }

    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }

        let mut out = Gradients::default();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                let data = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                let t = Tensor::new(node.value.shape(), data)?;
                out.by_var.insert(Var(i), t);
            }
        }
        for (name, v) in &self.names {
            if let Some(t) = out.by_var.get(v) {
                out.by_name.insert(name.clone(), t.clone());
            }
        }
        Ok(out)
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                if wants(*a) {
                    let mut da = vec![0.0; batch * m * k];
                    for bi in 0..batch {
                        let b_off = if *shared_b { 0 } else { bi * k * n };
                        matmul_nt_kernel(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bd[b_off..b_off + k * n],
                            &mut da[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    accumulate(grads, *a, da);
                }
                if wants(*b) {
                    if *shared_b {
                        let mut db = vec![0.0; k * n];
                        matmul_tn_kernel(ad, g, &mut db, batch * m, k, n);
                        accumulate(grads, *b, db);
                    } else {
                        let mut db = vec![0.0; batch * k * n];
                        for bi in 0..batch {
                            matmul_tn_kernel(
                                &ad[bi * m * k..(bi + 1) * m * k],
                                &g[bi * m * n..(bi + 1) * m * n],
                                &mut db[bi * k * n..(bi + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                        accumulate(grads, *b, db);
                    }
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                if wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if wants(*b) {
                    let nb = self.value(*b).numel();
                    let mut db = vec![0.0; nb];
                    for (j, gv) in g.iter().enumerate() {
                        db[j % nb] += sign * gv;
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Mul { a, b } => {
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                let nb = bd.len();
                if wants(*a) {
                    let da = g.iter().enumerate().map(|(j, gv)| gv * bd[j % nb]).collect();
                    accumulate(grads, *a, da);
                }
                if wants(*b) {
                    let mut db = vec![0.0; nb];
                    for (j, gv) in g.iter().enumerate() {
                        db[j % nb] += gv * ad[j];
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Scale { a, c } => {
                accumulate(grads, *a, g.iter().map(|x| x * c).collect());
            }
            Op::LayerNorm { a, xhat, rstd } => {
                let d = *self.shape(*a).last().unwrap();
                let mut da = Vec::with_capacity(g.len());
                for ((gr, xr), r) in g.chunks(d).zip(xhat.chunks(d)).zip(rstd) {
                    let mg = gr.iter().sum::<f64>() / d as f64;
                    let mgx = gr.iter().zip(xr).map(|(p, q)| p * q).sum::<f64>() / d as f64;
                    da.extend(gr.iter().zip(xr).map(|(gv, xv)| r * (gv - mg - xv * mgx)));
                }
                accumulate(grads, *a, da);
            }
            Op::Softmax { a } => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap();
                let mut da = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(d).zip(y.chunks(d)) {
                    let dot = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>();
                    da.extend(gr.iter().zip(yr).map(|(gv, yv)| yv * (gv - dot)));
                }
                accumulate(grads, *a, da);
            }
            Op::Gelu { a } => {
                let x = self.value(*a).data();
                let da = g
                    .iter()
                    .zip(x)
                    .map(|(gv, &xv)| gv * (normal_cdf(xv) + xv * normal_pdf(xv)))
                    .collect();
                accumulate(grads, *a, da);
            }
            Op::Cos { a } => {
                let x = self.value(*a).data();
                let da = g.iter().zip(x).map(|(gv, xv)| -gv * xv.sin()).collect();
                accumulate(grads, *a, da);
            }
            Op::Reshape { a } => accumulate(grads, *a, g.to_vec()),
            Op::Transpose { a, ax0, ax1 } => {
                let da = permute_swap(g, node.value.shape(), *ax0, *ax1);
                accumulate(grads, *a, da);
            }
            Op::Slice { a, axis, start } => {
                let sa = self.shape(*a);
                let len = node.value.shape()[*axis];
                let outer: usize = sa[..*axis].iter().product();
                let inner: usize = sa[*axis + 1..].iter().product();
                let mut da = vec![0.0; self.value(*a).numel()];
                for o in 0..outer {
                    let base = o * sa[*axis] * inner + start * inner;
                    da[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                accumulate(grads, *a, da);
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis] * inner;
                    if wants(p) {
                        let mut dp = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            dp.extend_from_slice(&g[o * row + offset..o * row + offset + len]);
                        }
                        accumulate(grads, p, dp);
                    }
                    offset += len;
                }
            }
            Op::GatherRows { a, index } => {
                let sa = self.shape(*a);
                let (n, d) = (sa[1], sa[2]);
                let mut da = vec![0.0; self.value(*a).numel()];
                let mut src = 0;
                for (b, ix) in index.iter().enumerate() {
                    for &r in ix {
                        let off = (b * n + r) * d;
                        for j in 0..d {
                            da[off + j] += g[src + j];
                        }
                        src += d;
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::Mean { a } => {
                let n = self.value(*a).numel();
                accumulate(grads, *a, vec![g[0] / n as f64; n]);
            }
            Op::Mse { a, b } => {
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                let s = 2.0 * g[0] / ad.len() as f64;
                if wants(*a) {
                    accumulate(grads, *a, ad.iter().zip(bd).map(|(x, y)| s * (x - y)).collect());
                }
                if wants(*b) {
                    accumulate(grads, *b, ad.iter().zip(bd).map(|(x, y)| s * (y - x)).collect());
                }
            }
            Op::SoftmaxCe {
                logits,
                targets,
                probs,
            } => {
                let sl = self.shape(*logits);
                let (rows, c) = (sl[0], sl[1]);
                let s = g[0] / rows as f64;
                let mut dl = Vec::with_capacity(rows * c);
                for (p, t) in probs.chunks(c).zip(targets.chunks(c)) {
                    let mass: f64 = t.iter().sum();
                    dl.extend(p.iter().zip(t).map(|(pv, tv)| s * (pv * mass - tv)));
                }
                accumulate(grads, *logits, dl);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contrib) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

pub(crate) fn softmax_row(row: &[f64], out: &mut Vec<f64>) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let start = out.len();
    let mut sum = 0.0;
    for x in row {
        let e = (x - max).exp();
        sum += e;
        out.push(e);
    }
    for v in &mut out[start..] {
        *v /= sum;
    }
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `c[m×n] = a[m×k] · b[k×n]`
fn matmul_kernel(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×k] = g[m×n] · b[k×n]ᵀ`
fn matmul_nt_kernel(g: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
}

/// `c[k×n] += a[r×k]ᵀ · g[r×n]`
fn matmul_tn_kernel(a: &[f64], g: &[f64], c: &mut [f64], r: usize, k: usize, n: usize) {
    for row in 0..r {
        let grow = &g[row * n..(row + 1) * n];
        for p in 0..k {
            let av = a[row * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, gv) in crow.iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    }
}
