//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Every operation evaluates
//! eagerly, stores its output value, and records enough to run its backward
//! rule later. Inputs always precede outputs on the tape, so the tape order is
//! a topological order and a single reverse sweep visits each node once.
//!
//! All reductions accumulate serially in index order; running the same graph
//! twice produces bit-identical values and gradients.

use crate::error::{Error, Result};
use crate::gemm::{gemm, gemm_ex};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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
        b_trans: bool,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        b_trans: bool,
    },
    Add(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Mul(Var, Var),
    Scale {
        x: Var,
        factor: f64,
    },
    Sum(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    CausalSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every leaf that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

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

    /// Adds a differentiable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Adds a non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    /// 2-D product `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// 2-D product `a[m×k] · b[n×k]ᵀ`, without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_trans: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if b_trans { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            self.value(b).data(),
            b_trans,
            &mut out,
            false,
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul { a, b, b_trans }, rg))
    }

    /// Batched product `a[g×m×k] · b[g×k×n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl(a, b, false)
    }

    /// Batched product `a[g×m×k] · b[g×n×k]ᵀ`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl(a, b, true)
    }

    fn bmm_impl(&mut self, a: Var, b: Var, b_trans: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(self.shape_err("bmm", a, b));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if b_trans { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return Err(self.shape_err("bmm", a, b));
        }
        let mut out = vec![0.0; g * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for gi in 0..g {
            gemm(
                m,
                k,
                n,
                &ad[gi * m * k..(gi + 1) * m * k],
                &bd[gi * k * n..(gi + 1) * k * n],
                b_trans,
                &mut out[gi * m * n..(gi + 1) * m * n],
                false,
            );
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::new([g, m, n], out)?,
            Op::BatchMatMul { a, b, b_trans },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("add", a, b));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), rg))
    }

    /// Adds a vector along the last dimension of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x);
        let sb = self.shape(bias);
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(self.shape_err("add_bias", x, bias));
        }
        let n = sb[0];
        let bd = self.value(bias).data();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bd[i % n])
            .collect();
        let shape = sx.to_vec();
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddBias { x, bias }, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("mul", a, b));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x);
        let out = Tensor::from_fn(value.shape().to_vec(), |i| value.data()[i] * factor);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Scale { x, factor }, rg)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(0.0, |acc, v| acc + v);
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::contract(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..n {
                    max = max.max(xd[at(j)]);
                }
                let mut total = 0.0;
                for j in 0..n {
                    let e = (xd[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[at(j)] /= total;
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, rg))
    }

    /// Softmax over the last axis of `[.., L, L]` scores where row `i` only
    /// sees columns `0..=i`. Masked entries of the output are exactly zero and
    /// never read from the input.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 || shape[r - 1] != shape[r - 2] {
            return Err(Error::contract(format!(
                "causal_softmax needs square trailing dims, got {shape:?}"
            )));
        }
        let l = shape[r - 1];
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for (row_idx, (src, dst)) in xd.chunks(l).zip(out.chunks_mut(l)).enumerate() {
            let visible = row_idx % l + 1;
            let max = src[..visible]
                .iter()
                .fold(f64::NEG_INFINITY, |m, v| m.max(*v));
            let mut total = 0.0;
            for j in 0..visible {
                let e = (src[j] - max).exp();
                dst[j] = e;
                total += e;
            }
            for d in &mut dst[..visible] {
                *d /= total;
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::CausalSoftmax(x), rg))
    }

    /// Normalizes over the last dimension, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap_or(&0);
        if self.shape(gain) != [n] {
            return Err(self.shape_err("layer_norm", x, gain));
        }
        if self.shape(bias) != [n] {
            return Err(self.shape_err("layer_norm", x, bias));
        }
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gain).data(), self.value(bias).data());
        let rows = xd.len() / n.max(1);
        let mut out = vec![0.0; xd.len()];
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xd[r * n..(r + 1) * n];
            let mean = row.iter().fold(0.0, |a, v| a + v) / n as f64;
            let var = row.iter().fold(0.0, |a, v| a + (v - mean) * (v - mean)) / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gd[j] + bd[j];
            }
        }
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x);
        let out = Tensor::from_fn(value.shape().to_vec(), |i| {
            let v = value.data()[i];
            0.5 * v * (1.0 + (SQRT_2_OVER_PI * (v + GELU_CUBIC * v * v * v)).tanh())
        });
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Gathers rows of a `[V×H]` table: output is `[ids.len()×H]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(Error::contract(format!(
                "embedding table must be 2-D, got {shape:?}"
            )));
        }
        let (v, h) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::Index {
                what: "embedding",
                index: bad,
                bound: v,
            });
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            out.extend_from_slice(&td[id * h..(id + 1) * h]);
        }
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            Tensor::new([ids.len(), h], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits[N×V]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 2 || shape[0] != targets.len() || targets.is_empty() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: shape.to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let (rows, v) = (shape[0], shape[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index {
                what: "target",
                index: bad,
                bound: v,
            });
        }
        let ld = self.value(logits).data();
        let mut probs = vec![0.0; ld.len()];
        let mut total = 0.0;
        for r in 0..rows {
            let row = &ld[r * v..(r + 1) * v];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(*x));
            let mut z = 0.0;
            for (j, x) in row.iter().enumerate() {
                let e = (x - max).exp();
                probs[r * v + j] = e;
                z += e;
            }
            for p in &mut probs[r * v..(r + 1) * v] {
                *p /= z;
            }
            total += max + z.ln() - row[targets[r]];
        }
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / rows as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape.to_vec())?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::contract(format!(
                "permute axes {axes:?} invalid for shape {shape:?}"
            )));
        }
        let (out, out_shape) = permute_data(self.value(x).data(), &shape, axes);
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    /// 2-D transpose, expressed as a permutation.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.permute(x, &[1, 0])
    }

    /// Reverse sweep from a scalar `loss`, returning gradients of every
    /// differentiable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut leaves: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                leaves[idx] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
            }
        }
        Ok(Gradients { grads: leaves })
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, b_trans } => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = node.value.shape()[1];
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                if let Some(da) = self.slot(grads, a) {
                    // dA = dC · op(B)ᵀ
                    gemm(m, n, k, g, bd, !b_trans, da, true);
                }
                if let Some(db) = self.slot(grads, b) {
                    if b_trans {
                        // B stored n×k: dB = dCᵀ · A
                        gemm_ex(n, m, k, g, true, ad, false, db, true);
                    } else {
                        // dB = Aᵀ · dC
                        gemm_ex(k, m, n, ad, true, g, false, db, true);
                    }
                }
            }
            &Op::BatchMatMul { a, b, b_trans } => {
                let sa = self.shape(a);
                let (groups, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                let (sa_len, sb_len, sc_len) = (m * k, k * n, m * n);
                if let Some(da) = self.slot(grads, a) {
                    for gi in 0..groups {
                        gemm(
                            m,
                            n,
                            k,
                            &g[gi * sc_len..(gi + 1) * sc_len],
                            &bd[gi * sb_len..(gi + 1) * sb_len],
                            !b_trans,
                            &mut da[gi * sa_len..(gi + 1) * sa_len],
                            true,
                        );
                    }
                }
                if let Some(db) = self.slot(grads, b) {
                    for gi in 0..groups {
                        let gc = &g[gi * sc_len..(gi + 1) * sc_len];
                        let av = &ad[gi * sa_len..(gi + 1) * sa_len];
                        let out = &mut db[gi * sb_len..(gi + 1) * sb_len];
                        if b_trans {
                            gemm_ex(n, m, k, gc, true, av, false, out, true);
                        } else {
                            gemm_ex(k, m, n, av, true, gc, false, out, true);
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = self.slot(grads, v) {
                        add_into(d, g);
                    }
                }
            }
            &Op::AddBias { x, bias } => {
                if let Some(dx) = self.slot(grads, x) {
                    add_into(dx, g);
                }
                if let Some(db) = self.slot(grads, bias) {
                    let n = db.len();
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if let Some(da) = self.slot(grads, a) {
                    for i in 0..g.len() {
                        da[i] += g[i] * bv[i];
                    }
                }
                if let Some(db) = self.slot(grads, b) {
                    for i in 0..g.len() {
                        db[i] += g[i] * av[i];
                    }
                }
            }
            &Op::Scale { x, factor } => {
                if let Some(dx) = self.slot(grads, x) {
                    for (d, gi) in dx.iter_mut().zip(g) {
                        *d += gi * factor;
                    }
                }
            }
            &Op::Sum(x) => {
                if let Some(dx) = self.slot(grads, x) {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            &Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_split(node.value.shape(), axis);
                let y = node.value.data();
                if let Some(dx) = self.slot(grads, x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            let mut dot = 0.0;
                            for j in 0..n {
                                dot += g[at(j)] * y[at(j)];
                            }
                            for j in 0..n {
                                dx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            &Op::CausalSoftmax(x) => {
                let l = *node.value.shape().last().unwrap();
                let y = node.value.data();
                if let Some(dx) = self.slot(grads, x) {
                    for (row_idx, ((yr, gr), dr)) in y
                        .chunks(l)
                        .zip(g.chunks(l))
                        .zip(dx.chunks_mut(l))
                        .enumerate()
                    {
                        let visible = row_idx % l + 1;
                        let mut dot = 0.0;
                        for j in 0..visible {
                            dot += gr[j] * yr[j];
                        }
                        for j in 0..visible {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = self.shape(*gain)[0];
                let gd = self.value(*gain).data();
                if let Some(dx) = self.slot(grads, *x) {
                    for (r, rs) in rstd.iter().enumerate() {
                        let base = r * n;
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..n {
                            let dh = g[base + j] * gd[j];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[base + j];
                        }
                        mean_dh /= n as f64;
                        mean_dh_h /= n as f64;
                        for j in 0..n {
                            let dh = g[base + j] * gd[j];
                            dx[base + j] += rs * (dh - mean_dh - xhat[base + j] * mean_dh_h);
                        }
                    }
                }
                if let Some(dg) = self.slot(grads, *gain) {
                    for (i, gi) in g.iter().enumerate() {
                        dg[i % n] += gi * xhat[i];
                    }
                }
                if let Some(db) = self.slot(grads, *bias) {
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                }
            }
            &Op::Gelu(x) => {
                let xv = self.value(x).data();
                if let Some(dx) = self.slot(grads, x) {
                    for i in 0..g.len() {
                        let v = xv[i];
                        let t = (SQRT_2_OVER_PI * (v + GELU_CUBIC * v * v * v)).tanh();
                        let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * v * v);
                        dx[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let h = self.shape(*table)[1];
                if let Some(dt) = self.slot(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * h..(id + 1) * h], &g[r * h..(r + 1) * h]);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = self.shape(*logits)[1];
                let scale = g[0] / targets.len() as f64;
                if let Some(dl) = self.slot(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            dl[r * v + j] += scale * (probs[r * v + j] - onehot);
                        }
                    }
                }
            }
            &Op::Reshape(x) => {
                if let Some(dx) = self.slot(grads, x) {
                    add_into(dx, g);
                }
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let (back, _) = permute_data(g, node.value.shape(), &inverse);
                if let Some(dx) = self.slot(grads, *x) {
                    add_into(dx, &back);
                }
            }
        }
    }

    /// Mutable gradient buffer for `var`, allocated on first use, or `None`
    /// when `var` does not need a gradient.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], var: Var) -> Option<&'g mut [f64]> {
        let node = &self.nodes[var.0];
        if !node.requires_grad {
            return None;
        }
        Some(
            grads[var.0]
                .get_or_insert_with(|| vec![0.0; node.value.numel()])
                .as_mut_slice(),
        )
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..data.len() {
        out.push(data[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let id = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.matmul(id, m).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let z = g.constant(Tensor::zeros([3, 2]));
        let p = g.matmul(z, m).unwrap();
        assert!(g.value(p).data().iter().all(|&v| v == 0.0));

        let b = g.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let p = g.matmul(m, b).unwrap();
        assert_eq!(g.value(p).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([4, 2]));
        match g.matmul(a, b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 2]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([3]));
        let y = g.softmax(x, 0).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(t(&[2], &[0.0, 3f64.ln()]));
        let y = g.softmax(x, 0).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_shift_invariance_and_axis() {
        let mut g = Graph::new();
        let base = t(&[2, 3], &[0.1, -0.4, 2.0, 1.5, 0.0, -1.0]);
        let shifted = Tensor::from_fn([2, 3], |i| base.data()[i] + 7.25);
        let a = g.constant(base);
        let b = g.constant(shifted);
        for axis in 0..2 {
            let ya = g.softmax(a, axis).unwrap();
            let yb = g.softmax(b, axis).unwrap();
            for (p, q) in g.value(ya).data().iter().zip(g.value(yb).data()) {
                assert!((p - q).abs() < 1e-14);
            }
        }
        // axis 0: each column sums to one
        let y = g.softmax(a, 0).unwrap();
        let d = g.value(y).data();
        for c in 0..3 {
            assert!((d[c] + d[3 + c] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn([3, 3], |i| i as f64 * 0.3));
        let y = g.causal_softmax(x).unwrap();
        let d = g.value(y).data();
        assert_eq!(d[0], 1.0);
        assert_eq!(&d[1..3], &[0.0, 0.0]);
        assert_eq!(d[5], 0.0);
        assert!((d[3] + d[4] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let gain = g.constant(Tensor::ones([2]));
        let bias = g.constant(Tensor::zeros([2]));
        let x = g.constant(t(&[1, 2], &[1.0, 3.0]));
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        let d = g.value(y).data();
        assert!((d[0] + 1.0).abs() < 1e-9 && (d[1] - 1.0).abs() < 1e-9);

        let gain3 = g.constant(Tensor::ones([3]));
        let bias3 = g.constant(Tensor::zeros([3]));
        let c = g.constant(Tensor::full([2, 3], 4.2));
        let y = g.layer_norm(c, gain3, bias3, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v.abs() < 1e-9));

        let bias_v = t(&[3], &[0.5, -0.25, 2.0]);
        let bias3 = g.constant(bias_v);
        let x = g.constant(t(&[2, 3], &[0.3, -1.2, 5.0, 2.0, 2.5, -0.7]));
        let y = g.layer_norm(x, gain3, bias3, 1e-5).unwrap();
        let d = g.value(y).data();
        for row in d.chunks(3) {
            let mean_out = row.iter().sum::<f64>() / 3.0;
            // gain is 1, so mean(output) = mean(bias)
            assert!((mean_out - (0.5 - 0.25 + 2.0) / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let uniform = g.constant(Tensor::zeros([5, 4]));
        let l = g.cross_entropy(uniform, &[0, 1, 2, 3, 0]).unwrap();
        assert!((g.value(l).item().unwrap() - 4f64.ln()).abs() < 1e-15);

        let x = g.constant(t(&[1, 2], &[0.0, 3f64.ln()]));
        let l = g.cross_entropy(x, &[0]).unwrap();
        assert!((g.value(l).item().unwrap() - 4f64.ln()).abs() < 1e-14);

        let sharp = g.constant(t(&[1, 3], &[60.0, 0.0, 0.0]));
        let l = g.cross_entropy(sharp, &[0]).unwrap();
        assert!(g.value(l).item().unwrap() < 1e-25);

        assert!(matches!(
            g.cross_entropy(x, &[2]),
            Err(Error::Index { index: 2, bound: 2, .. })
        ));
    }

    #[test]
    fn backward_trivial_cases() {
        let mut g = Graph::new();
        let xv = t(&[3], &[0.5, -2.0, 3.0]);
        let x = g.param(xv.clone());
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        let want: Vec<f64> = xv.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(grads.get(x).unwrap().data(), want.as_slice());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones([2]));
        let y = g.scale(x, 2.0);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_is_repeatable() {
        let mut g = Graph::new();
        let a = g.param(Tensor::from_fn([3, 4], |i| (i as f64 * 0.37).sin()));
        let b = g.param(Tensor::from_fn([4, 2], |i| (i as f64 * 0.11).cos()));
        let p = g.matmul(a, b).unwrap();
        let s = g.softmax(p, 1).unwrap();
        let l = g.cross_entropy(s, &[0, 1, 1]).unwrap();
        let g1 = g.backward(l).unwrap();
        let g2 = g.backward(l).unwrap();
        assert_eq!(g1.get(a), g2.get(a));
        assert_eq!(g1.get(b), g2.get(b));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.param(Tensor::ones([2]));
        let c = g.constant(Tensor::ones([2]));
        let p = g.mul(a, c).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(a).is_some());
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn permute_matches_manual_transpose() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn([2, 3, 4], |i| i as f64));
        let y = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.value(y).shape(), &[4, 2, 3]);
        let d = g.value(y).data();
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(d[(k * 2 + i) * 3 + j], (i * 12 + j * 4 + k) as f64);
                }
            }
        }
    }

    #[test]
    fn embedding_rejects_out_of_range() {
        let mut g = Graph::new();
        let table = g.param(Tensor::zeros([4, 2]));
        assert!(matches!(
            g.embedding(table, &[1, 4]),
            Err(Error::Index { index: 4, bound: 4, .. })
        ));
    }
}
