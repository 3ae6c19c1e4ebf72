//! Dynamic reverse-mode tape.
//!
//! A [`Graph`] records every operation of one forward pass in execution
//! order. [`Graph::backward`] walks the record once in reverse and adds the
//! resulting gradients to every node that requires them. Graphs are cheap
//! to build and are dropped after their backward pass; the adversarial inner
//! loop builds a fresh one per step.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    /// `b` is either the same shape as `a` or a single row broadcast over `a`'s rows.
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Tanh(usize),
    LayerNorm {
        x: usize,
        scale: usize,
        shift: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(usize),
    CrossEntropy {
        logits: usize,
        target: usize,
        probs: Vec<f64>,
    },
    Sum(usize),
    Gather {
        table: usize,
        ids: Vec<usize>,
        mask: Option<Vec<bool>>,
    },
    Transpose(usize),
    Concat(Vec<usize>),
    Reshape(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf holding a copy of `t`. Gradients flow to it iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let mut value = Tensor::new(t.shape(), t.values().to_vec()).expect("valid tensor");
        value.set_requires_grad(t.requires_grad());
        self.push_node(value, Op::Leaf)
    }

    /// Leaf that receives gradients regardless of the source tensor's flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let v = self.leaf(t);
        self.nodes[v.0].value.set_requires_grad(true);
        v
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.set_requires_grad(false);
        self.push_node(t, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn values(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.values()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of `v` (all zeros before any backward pass).
    pub fn grad(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Clears every accumulated gradient in the graph.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn push_node(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: &[usize], values: Vec<f64>, op: Op, inputs: &[usize]) -> Var {
        let req = inputs.iter().any(|&i| self.nodes[i].value.requires_grad());
        let mut value = Tensor::new(shape, values).expect("op produced a consistent shape");
        value.set_requires_grad(req);
        self.push_node(value, op)
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = matmul_raw(self.values(a), self.values(b), m, k, n);
        Ok(self.push(&[m, n], out, Op::MatMul(a.0, b.0), &[a.0, b.0]))
    }

    fn check_broadcast(&self, name: &str, a: Var, b: Var) -> Result<()> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            return Ok(());
        }
        let row = *sa.last().unwrap();
        let b_is_row = self.value(b).numel() == row && (sb.len() == 1 || sb[0] == 1);
        if sa.len() == 2 && b_is_row {
            Ok(())
        } else {
            Err(Error::Dimension(format!("{name}: {sa:?} and {sb:?}")))
        }
    }

    fn broadcast_binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let av = self.values(a);
        let bv = self.values(b);
        if av.len() == bv.len() {
            av.iter().zip(bv).map(|(x, y)| f(*x, *y)).collect()
        } else {
            let d = bv.len();
            av.iter()
                .enumerate()
                .map(|(i, x)| f(*x, bv[i % d]))
                .collect()
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("add", a, b)?;
        let out = self.broadcast_binary(a, b, |x, y| x + y);
        let shape = self.shape(a).to_vec();
        Ok(self.push(&shape, out, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("sub", a, b)?;
        let out = self.broadcast_binary(a, b, |x, y| x - y);
        let shape = self.shape(a).to_vec();
        Ok(self.push(&shape, out, Op::Sub(a.0, b.0), &[a.0, b.0]))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "mul: {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = self.broadcast_binary(a, b, |x, y| x * y);
        let shape = self.shape(a).to_vec();
        Ok(self.push(&shape, out, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.values(a).iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        self.push(&shape, out, Op::Scale(a.0, s), &[a.0])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.values(a).iter().map(|x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        self.push(&shape, out, Op::Relu(a.0), &[a.0])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.values(a).iter().map(|x| x.tanh()).collect();
        let shape = self.shape(a).to_vec();
        self.push(&shape, out, Op::Tanh(a.0), &[a.0])
    }

    /// Row-wise layer normalization (population variance, eps 1e-5 inside
    /// the square root) followed by a learnable `scale` and `shift`, each a
    /// single row of the input width.
    pub fn layer_norm(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (n, d) = self.dims2(x)?;
        for p in [scale, shift] {
            if self.value(p).numel() != d {
                return Err(Error::Dimension(format!(
                    "layer_norm: input {:?}, affine {:?}",
                    self.shape(x),
                    self.shape(p)
                )));
            }
        }
        let xv = self.values(x);
        let sv = self.values(scale);
        let bv = self.values(shift);
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * sv[c] + bv[c];
            }
        }
        Ok(self.push(
            &[n, d],
            out,
            Op::LayerNorm {
                x: x.0,
                scale: scale.0,
                shift: shift.0,
                xhat,
                rstd,
            },
            &[x.0, scale.0, shift.0],
        ))
    }

    /// Row-wise softmax; a 1-D input is treated as a single row.
    pub fn softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        let mut out = self.values(x).to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        self.push(&shape, out, Op::Softmax(x.0), &[x.0])
    }

    /// `-log softmax(logits)[target]` over all entries of `logits`, as a
    /// scalar of shape `[1]`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let n = self.value(logits).numel();
        if target >= n {
            return Err(Error::Index(format!(
                "cross_entropy target {target} out of range for {n} logits"
            )));
        }
        let lv = self.values(logits);
        let max = lv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + lv.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - lv[target];
        let probs = lv.iter().map(|v| (v - lse).exp()).collect();
        Ok(self.push(
            &[1],
            vec![loss],
            Op::CrossEntropy {
                logits: logits.0,
                target,
                probs,
            },
            &[logits.0],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.values(x).iter().sum();
        self.push(&[1], vec![s], Op::Sum(x.0), &[x.0])
    }

    /// Embedding lookup: output row `i` is `table[ids[i]]`. The reverse
    /// pass scatter-adds, so repeated ids accumulate.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_impl(table, ids, None)
    }

    /// Like [`Graph::gather_rows`], but positions with `mask[i] == false`
    /// produce a zero row and send no gradient back to the table.
    pub fn gather_rows_masked(&mut self, table: Var, ids: &[usize], mask: &[bool]) -> Result<Var> {
        if mask.len() != ids.len() {
            return Err(Error::Contract(format!(
                "gather mask has {} entries for {} ids",
                mask.len(),
                ids.len()
            )));
        }
        self.gather_impl(table, ids, Some(mask.to_vec()))
    }

    fn gather_impl(&mut self, table: Var, ids: &[usize], mask: Option<Vec<bool>>) -> Result<Var> {
        let (v, d) = self.dims2(table)?;
        if ids.is_empty() {
            return Err(Error::Dimension("gather with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Index(format!("token id {bad} out of range for {v} rows")));
        }
        let tv = self.values(table);
        let mut out = vec![0.0; ids.len() * d];
        for (i, &id) in ids.iter().enumerate() {
            if mask.as_ref().map_or(true, |m| m[i]) {
                out[i * d..(i + 1) * d].copy_from_slice(&tv[id * d..(id + 1) * d]);
            }
        }
        Ok(self.push(
            &[ids.len(), d],
            out,
            Op::Gather {
                table: table.0,
                ids: ids.to_vec(),
                mask,
            },
            &[table.0],
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        let xv = self.values(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        Ok(self.push(&[c, r], out, Op::Transpose(x.0), &[x.0]))
    }

    /// Flattens and concatenates the inputs into a 1-D tensor.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Dimension("concat of nothing".into()));
        }
        let out: Vec<f64> = xs.iter().flat_map(|x| self.values(*x).to_vec()).collect();
        let ids: Vec<usize> = xs.iter().map(|x| x.0).collect();
        let n = out.len();
        Ok(self.push(&[n], out, Op::Concat(ids.clone()), &ids))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() || shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "reshape {:?} into {shape:?}",
                self.shape(x)
            )));
        }
        let out = self.values(x).to_vec();
        Ok(self.push(shape, out, Op::Reshape(x.0), &[x.0]))
    }

    /// Reverse pass from a scalar `loss`. Gradients are added to the
    /// existing buffers, so two passes without [`Graph::zero_grad`] double them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].value.requires_grad() {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            self.nodes[idx].value.accumulate_grad(&g);
        }
        Ok(())
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].value.requires_grad()
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.values();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[*a].value.dims2().unwrap();
                let n = self.nodes[*b].value.dims2().unwrap().1;
                let av = self.nodes[*a].value.values();
                let bv = self.nodes[*b].value.values();
                if self.wants(*a) {
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv[p * n + j];
                            }
                            da[i * k + p] = s;
                        }
                    }
                    add_into(grads, *a, &da);
                }
                if self.wants(*b) {
                    // dB = Aᵀ · G
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let a_ip = av[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            let row = &mut db[p * n..(p + 1) * n];
                            for (r, gv) in row.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                                *r += a_ip * gv;
                            }
                        }
                    }
                    add_into(grads, *b, &db);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.wants(*a) {
                    add_into(grads, *a, g);
                }
                if self.wants(*b) {
                    let d = self.nodes[*b].value.numel();
                    let mut db = vec![0.0; d];
                    for (i, gv) in g.iter().enumerate() {
                        db[i % d] += sign * gv;
                    }
                    add_into(grads, *b, &db);
                }
            }
            Op::Mul(a, b) => {
                let av = self.nodes[*a].value.values();
                let bv = self.nodes[*b].value.values();
                if self.wants(*a) {
                    let da: Vec<f64> = g.iter().zip(bv).map(|(g, b)| g * b).collect();
                    add_into(grads, *a, &da);
                }
                if self.wants(*b) {
                    let db: Vec<f64> = g.iter().zip(av).map(|(g, a)| g * a).collect();
                    add_into(grads, *b, &db);
                }
            }
            Op::Scale(a, s) => {
                let da: Vec<f64> = g.iter().map(|g| g * s).collect();
                add_into(grads, *a, &da);
            }
            Op::Relu(a) => {
                let av = self.nodes[*a].value.values();
                let da: Vec<f64> = g
                    .iter()
                    .zip(av)
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                add_into(grads, *a, &da);
            }
            Op::Tanh(a) => {
                let da: Vec<f64> = g.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)).collect();
                add_into(grads, *a, &da);
            }
            Op::LayerNorm {
                x,
                scale,
                shift,
                xhat,
                rstd,
            } => {
                let d = self.nodes[*scale].value.numel();
                let n = rstd.len();
                let sv = self.nodes[*scale].value.values();
                if self.wants(*scale) {
                    let mut ds = vec![0.0; d];
                    for i in 0..n * d {
                        ds[i % d] += g[i] * xhat[i];
                    }
                    add_into(grads, *scale, &ds);
                }
                if self.wants(*shift) {
                    let mut db = vec![0.0; d];
                    for i in 0..n * d {
                        db[i % d] += g[i];
                    }
                    add_into(grads, *shift, &db);
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; n * d];
                    for r in 0..n {
                        let o = r * d;
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for c in 0..d {
                            let dh = g[o + c] * sv[c];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[o + c];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for c in 0..d {
                            let dh = g[o + c] * sv[c];
                            dx[o + c] = rstd[r] * (dh - mean_dh - xhat[o + c] * mean_dh_h);
                        }
                    }
                    add_into(grads, *x, &dx);
                }
            }
            Op::Softmax(a) => {
                let d = *node.value.shape().last().unwrap();
                let mut da = vec![0.0; out.len()];
                for ((dr, gr), yr) in da.chunks_mut(d).zip(g.chunks(d)).zip(out.chunks(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for c in 0..d {
                        dr[c] = yr[c] * (gr[c] - dot);
                    }
                }
                add_into(grads, *a, &da);
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                let mut dl: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                dl[*target] -= g[0];
                add_into(grads, *logits, &dl);
            }
            Op::Sum(a) => {
                let n = self.nodes[*a].value.numel();
                add_into(grads, *a, &vec![g[0]; n]);
            }
            Op::Gather { table, ids, mask } => {
                let (v, d) = self.nodes[*table].value.dims2().unwrap();
                let mut dt = vec![0.0; v * d];
                for (i, &id) in ids.iter().enumerate() {
                    if mask.as_ref().map_or(true, |m| m[i]) {
                        for c in 0..d {
                            dt[id * d + c] += g[i * d + c];
                        }
                    }
                }
                add_into(grads, *table, &dt);
            }
            Op::Transpose(a) => {
                let (r, c) = self.nodes[*a].value.dims2().unwrap();
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = g[j * r + i];
                    }
                }
                add_into(grads, *a, &da);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p].value.numel();
                    if self.wants(p) {
                        add_into(grads, p, &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::Reshape(a) => add_into(grads, *a, g),
        }
    }
}

fn add_into(grads: &mut [Option<Vec<f64>>], idx: usize, g: &[f64]) {
    match &mut grads[idx] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += a_ip * bv;
            }
        }
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}
