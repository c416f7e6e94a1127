//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as a node on a tape. Parameters live
//! outside the graph in a [`ParamStore`]; the graph only borrows them, so a
//! single store can serve many concurrent read-only graphs (one per sequence
//! in a batch). [`Graph::backward`] returns a [`Gradients`] value which the
//! caller folds into the store with [`ParamStore::accumulate`].
//!
//! Only nodes that transitively depend on a trainable parameter (or on an
//! input created with `requires_grad`) take part in the backward sweep, so a
//! frozen parameter never receives a gradient.

use std::collections::BTreeMap;

use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::tensor::{matmul_into, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamNode {
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

/// Named parameters in declaration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    nodes: Vec<ParamNode>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.names.push(name.into());
        self.nodes.push(ParamNode {
            value,
            grad,
            trainable,
        });
        ParamId(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamNode {
        &self.nodes[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamNode {
        &mut self.nodes[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.nodes.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &ParamNode)> {
        self.names
            .iter()
            .zip(&self.nodes)
            .enumerate()
            .map(|(i, (n, p))| (ParamId(i), n.as_str(), p))
    }

    /// Freezing a parameter also clears whatever gradient it held.
    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        let node = &mut self.nodes[id.0];
        node.trainable = trainable;
        if !trainable {
            node.grad.fill(0.0);
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for i in 0..self.nodes.len() {
            self.set_trainable(ParamId(i), trainable);
        }
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad.fill(0.0);
        }
    }

    /// Adds `grads` into the `.grad` of every trainable parameter.
    pub fn accumulate(&mut self, grads: &ParamGrads) -> Result<()> {
        for (id, g) in grads.iter() {
            let node = &mut self.nodes[id.0];
            if node.trainable {
                node.grad.add_assign(g)?;
            }
        }
        Ok(())
    }

    pub fn trainable_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.nodes.iter().map(|p| p.value.numel()).sum()
    }

    /// Per-parameter value checksums keyed by name.
    pub fn checksums(&self) -> BTreeMap<String, String> {
        self.iter()
            .map(|(_, n, p)| (n.to_string(), p.value.checksum()))
            .collect()
    }
}

/// Gradients with respect to parameters, indexed by [`ParamId`].
#[derive(Debug, Clone, Default)]
pub struct ParamGrads {
    grads: BTreeMap<ParamId, Tensor>,
}

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    fn add_tensor(&mut self, id: ParamId, g: Tensor) -> Result<()> {
        match self.grads.get_mut(&id) {
            Some(acc) => acc.add_assign(&g),
            None => {
                self.grads.insert(id, g);
                Ok(())
            }
        }
    }

    /// Elementwise sum; used to combine per-sequence gradients in a fixed order.
    pub fn merge(&mut self, other: ParamGrads) -> Result<()> {
        for (id, g) in other.grads {
            self.add_tensor(id, g)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Act(Var, Activation),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CausalSoftmax(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather {
        table: Var,
        rows: Vec<usize>,
    },
    CrossEntropySum {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Tape of recorded operations.
pub struct Graph<'s> {
    store: Option<&'s ParamStore>,
    nodes: Vec<Node>,
}

impl Default for Graph<'static> {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph<'static> {
    /// A graph without parameters; inputs only.
    pub fn new() -> Self {
        Graph {
            store: None,
            nodes: Vec::new(),
        }
    }
}

impl<'s> Graph<'s> {
    pub fn with_params(store: &'s ParamStore) -> Self {
        Graph {
            store: Some(store),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => &self.store.expect("param node without store").get(*id).value,
            (_, Some(t)) => t,
            (_, None) => unreachable!("non-param node without value"),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> Result<Var> {
        let t = t.ensure_finite("input")?;
        Ok(self.push(t, Op::Leaf, requires_grad))
    }

    /// Leaf reading a parameter from the store. Requires grad iff the parameter is trainable.
    pub fn param(&mut self, id: ParamId) -> Var {
        let store = self.store.expect("Graph::param needs a store");
        let trainable = store.get(id).trainable;
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: trainable,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?.ensure_finite("matmul")?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).expect_matrix("matmul_nt")?;
        let (n, k2) = self.value(b).expect_matrix("matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("[{m}x{k}] x [{n}x{k2}]^T")));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                let br = &bd[j * k..(j + 1) * k];
                out[i * n + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
            }
        }
        let out = Tensor::from_vec(vec![m, n], out)?.ensure_finite("matmul_nt")?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMulNT(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("add", format!("{:?} + {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_vec(av.shape().to_vec(), data)?.ensure_finite("add")?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Matrix plus a row vector broadcast over rows (the only broadcast supported).
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).expect_matrix("add_row")?;
        let bv = self.value(bias);
        if bv.numel() != n {
            return Err(Error::shape("add_row", format!("bias {:?} vs {n} columns", bv.shape())));
        }
        let bd = bv.data();
        let mut data = self.value(x).data().to_vec();
        for r in 0..m {
            for (o, b) in data[r * n..(r + 1) * n].iter_mut().zip(bd) {
                *o += b;
            }
        }
        let out = Tensor::from_vec(vec![m, n], data)?.ensure_finite("add_row")?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("mul", format!("{:?} * {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(av.shape().to_vec(), data)?.ensure_finite("mul")?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * s).collect();
        let out = Tensor::from_vec(av.shape().to_vec(), data)?.ensure_finite("scale")?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Scale(a, s), rg))
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Result<Var> {
        let out = act.apply_tensor(self.value(a))?.ensure_finite("activation")?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Act(a, act), rg))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Silu)
    }

    /// Row-wise layer norm with learned gain and bias (both of length `cols`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).expect_matrix("layer_norm")?;
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(Error::shape("layer_norm", format!("gain/bias must have {n} entries")));
        }
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xd[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = h * gd[c] + bd[c];
            }
        }
        let out = Tensor::from_vec(vec![m, n], out)?.ensure_finite("layer_norm")?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Row-wise softmax of a square score matrix where row `i` only sees columns `0..=i`.
    /// Masked entries come out as exactly zero.
    pub fn causal_softmax(&mut self, scores: Var) -> Result<Var> {
        let (m, n) = self.value(scores).expect_matrix("causal_softmax")?;
        if m != n {
            return Err(Error::shape("causal_softmax", format!("expected square, got [{m}x{n}]")));
        }
        let sd = self.value(scores).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &sd[i * n..i * n + i + 1];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..=i {
                let e = (row[j] - max).exp();
                out[i * n + j] = e;
                z += e;
            }
            for j in 0..=i {
                out[i * n + j] /= z;
            }
        }
        let out = Tensor::from_vec(vec![m, n], out)?.ensure_finite("causal_softmax")?;
        let rg = self.rg(&[scores]);
        Ok(self.push(out, Op::CausalSoftmax(scores), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(x).expect_matrix("slice_cols")?;
        if start + len > n {
            return Err(Error::shape("slice_cols", format!("{start}+{len} > {n}")));
        }
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&xd[r * n + start..r * n + start + len]);
        }
        let out = Tensor::from_vec(vec![m, len], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("concat_cols input"));
        }
        let m = self.value(parts[0]).expect_matrix("concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.value(p).expect_matrix("concat_cols")?;
            if pm != m {
                return Err(Error::shape("concat_cols", format!("row count {pm} vs {m}")));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::from_vec(vec![m, n], data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("concat_rows input"));
        }
        let n = self.value(parts[0]).expect_matrix("concat_rows")?.1;
        let mut m = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pm, pn) = self.value(p).expect_matrix("concat_rows")?;
            if pn != n {
                return Err(Error::shape("concat_rows", format!("column count {pn} vs {n}")));
            }
            m += pm;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::from_vec(vec![m, n], data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Selects rows of a 2-D table (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let (tm, n) = self.value(table).expect_matrix("gather_rows")?;
        let td = self.value(table).data();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= tm {
                return Err(Error::shape("gather_rows", format!("row {r} out of {tm}")));
            }
            data.extend_from_slice(&td[r * n..(r + 1) * n]);
        }
        let out = Tensor::from_vec(vec![rows.len(), n], data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Sum over rows with a target of `-log softmax(row)[target]`; rows with `None` are skipped.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (m, n) = self.value(logits).expect_matrix("cross_entropy")?;
        if targets.len() != m {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for {m} rows", targets.len()),
            ));
        }
        let ld = self.value(logits).data();
        let mut probs = vec![0.0; m * n];
        let mut loss = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= n {
                return Err(Error::shape("cross_entropy", format!("target {t} >= {n}")));
            }
            let row = &ld[r * n..(r + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + z.ln();
            for c in 0..n {
                probs[r * n + c] = (row[c] - log_z).exp();
            }
            loss += log_z - row[t];
        }
        let out = Tensor::scalar(loss).ensure_finite("cross_entropy")?;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropySum {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum()).ensure_finite("sum")?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Sum(a), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params = ParamGrads::default();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads, params });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads, &mut params)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, params })
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(
        &self,
        idx: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        params: &mut ParamGrads,
    ) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => params.add_tensor(*id, g.clone())?,
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = bv.cols();
                if self.requires_grad(*a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    let (gd, bd) = (g.data(), bv.data());
                    for i in 0..m {
                        for p in 0..k {
                            da[i * k + p] = (0..n).map(|j| gd[i * n + j] * bd[p * n + j]).sum();
                        }
                    }
                    self.accum(grads, *a, Tensor::from_vec(vec![m, k], da)?)?;
                }
                if self.requires_grad(*b) {
                    // dB = Aᵀ · dC
                    let at = av.transpose()?;
                    let mut db = vec![0.0; k * n];
                    matmul_into(at.data(), g.data(), &mut db, k, m, n);
                    self.accum(grads, *b, Tensor::from_vec(vec![k, n], db)?)?;
                }
            }
            Op::MatMulNT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = bv.rows();
                if self.requires_grad(*a) {
                    // dA = dC · B
                    let mut da = vec![0.0; m * k];
                    matmul_into(g.data(), bv.data(), &mut da, m, n, k);
                    self.accum(grads, *a, Tensor::from_vec(vec![m, k], da)?)?;
                }
                if self.requires_grad(*b) {
                    // dB = dCᵀ · A
                    let gt = g.transpose()?;
                    let mut db = vec![0.0; n * k];
                    matmul_into(gt.data(), av.data(), &mut db, n, m, k);
                    self.accum(grads, *b, Tensor::from_vec(vec![n, k], db)?)?;
                }
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone())?;
                self.accum(grads, *b, g.clone())?;
            }
            Op::AddRow(x, bias) => {
                self.accum(grads, *x, g.clone())?;
                if self.requires_grad(*bias) {
                    let n = g.cols();
                    let mut db = vec![0.0; n];
                    for r in 0..g.rows() {
                        for (d, v) in db.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    self.accum(grads, *bias, Tensor::from_vec(shape, db)?)?;
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    self.accum(grads, *a, Tensor::from_vec(g.shape().to_vec(), d)?)?;
                }
                if self.requires_grad(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    self.accum(grads, *b, Tensor::from_vec(g.shape().to_vec(), d)?)?;
                }
            }
            Op::Scale(a, s) => {
                let d = g.data().iter().map(|x| x * s).collect();
                self.accum(grads, *a, Tensor::from_vec(g.shape().to_vec(), d)?)?;
            }
            Op::Act(a, act) => {
                let xv = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(gv, x)| gv * act.derivative(*x))
                    .collect();
                self.accum(grads, *a, Tensor::from_vec(g.shape().to_vec(), d)?)?;
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (m, n) = (g.rows(), g.cols());
                let gd = g.data();
                let gain_v = self.value(*gain).data();
                if self.requires_grad(*gain) {
                    let mut dg = vec![0.0; n];
                    for r in 0..m {
                        for c in 0..n {
                            dg[c] += gd[r * n + c] * xhat[r * n + c];
                        }
                    }
                    let shape = self.value(*gain).shape().to_vec();
                    self.accum(grads, *gain, Tensor::from_vec(shape, dg)?)?;
                }
                if self.requires_grad(*bias) {
                    let mut db = vec![0.0; n];
                    for r in 0..m {
                        for c in 0..n {
                            db[c] += gd[r * n + c];
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    self.accum(grads, *bias, Tensor::from_vec(shape, db)?)?;
                }
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; m * n];
                    let nf = n as f64;
                    for r in 0..m {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for c in 0..n {
                            let dh = gd[r * n + c] * gain_v[c];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[r * n + c];
                        }
                        for c in 0..n {
                            let dh = gd[r * n + c] * gain_v[c];
                            let h = xhat[r * n + c];
                            dx[r * n + c] = inv_std[r] / nf * (nf * dh - sum_dh - h * sum_dh_h);
                        }
                    }
                    self.accum(grads, *x, Tensor::from_vec(vec![m, n], dx)?)?;
                }
            }
            Op::CausalSoftmax(s) => {
                let p = node.value.as_ref().expect("softmax value");
                let n = p.cols();
                let (pd, gd) = (p.data(), g.data());
                let mut dx = vec![0.0; pd.len()];
                for i in 0..p.rows() {
                    let dot: f64 = (0..=i).map(|j| pd[i * n + j] * gd[i * n + j]).sum();
                    for j in 0..=i {
                        dx[i * n + j] = pd[i * n + j] * (gd[i * n + j] - dot);
                    }
                }
                self.accum(grads, *s, Tensor::from_vec(p.shape().to_vec(), dx)?)?;
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (m, n) = (xv.rows(), xv.cols());
                let w = g.cols();
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    dx[r * n + start..r * n + start + w].copy_from_slice(g.row(r));
                }
                self.accum(grads, *x, Tensor::from_vec(vec![m, n], dx)?)?;
            }
            Op::ConcatCols(parts) => {
                let (m, n) = (g.rows(), g.cols());
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.requires_grad(p) {
                        let mut d = Vec::with_capacity(m * w);
                        for r in 0..m {
                            d.extend_from_slice(&g.data()[r * n + offset..r * n + offset + w]);
                        }
                        self.accum(grads, p, Tensor::from_vec(vec![m, w], d)?)?;
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let n = g.cols();
                let mut row = 0;
                for &p in parts {
                    let h = self.value(p).rows();
                    if self.requires_grad(p) {
                        let d = g.data()[row * n..(row + h) * n].to_vec();
                        self.accum(grads, p, Tensor::from_vec(vec![h, n], d)?)?;
                    }
                    row += h;
                }
            }
            Op::Gather { table, rows } => {
                let tv = self.value(*table);
                let n = tv.cols();
                let mut dt = vec![0.0; tv.numel()];
                for (i, &r) in rows.iter().enumerate() {
                    for (d, v) in dt[r * n..(r + 1) * n].iter_mut().zip(g.row(i)) {
                        *d += v;
                    }
                }
                self.accum(grads, *table, Tensor::from_vec(tv.shape().to_vec(), dt)?)?;
            }
            Op::CrossEntropySum {
                logits,
                targets,
                probs,
            } => {
                let scale = g.data()[0];
                let n = self.value(*logits).cols();
                let mut dl = vec![0.0; probs.len()];
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for c in 0..n {
                        dl[r * n + c] = scale * probs[r * n + c];
                    }
                    dl[r * n + t] -= scale;
                }
                let shape = self.value(*logits).shape().to_vec();
                self.accum(grads, *logits, Tensor::from_vec(shape, dl)?)?;
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accum(grads, *a, Tensor::full(&shape, g.data()[0]))?;
            }
        }
        Ok(())
    }
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: ParamGrads,
}

impl Gradients {
    /// Gradient with respect to any recorded node (None if it did not require grad).
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn params(&self) -> &ParamGrads {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads {
        self.params
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::from_rows(&[vec![1.0, -2.0], vec![3.0, 0.5]]), true);
        let mut g = Graph::with_params(&store);
        let wv = g.param(w);
        let loss = g.sum(wv).unwrap();
        let grads = g.backward(loss).unwrap();
        store.accumulate(grads.params()).unwrap();
        assert_eq!(store.get(w).grad.data(), &[1.0; 4]);
    }

    #[test]
    fn frozen_only_graph_yields_zero_grads() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::full(&[2, 2], 0.3), false);
        let x = store.add("x", Tensor::full(&[2, 2], -1.0), false);
        let mut g = Graph::with_params(&store);
        let (wv, xv) = (g.param(w), g.param(x));
        let y = g.matmul(wv, xv).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.params().is_empty());
        store.accumulate(grads.params()).unwrap();
        assert!(store.get(w).grad.data().iter().all(|&v| v == 0.0));
        assert!(store.get(x).grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2, 2]), true).unwrap();
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut g = Graph::new();
        let s = g.input(Tensor::from_rows(&[vec![1.0, 5.0], vec![2.0, 2.0]]), false).unwrap();
        let p = g.causal_softmax(s).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn input_rejects_nan() {
        let mut g = Graph::new();
        let t = Tensor::from_vec(vec![1], vec![f64::INFINITY]).unwrap();
        assert!(matches!(g.input(t, false), Err(Error::NonFinite(_))));
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_v() {
        let mut g = Graph::new();
        let l = g.input(Tensor::zeros(&[3, 7]), false).unwrap();
        let ce = g.cross_entropy_sum(l, &[Some(1), None, Some(6)]).unwrap();
        assert!((g.value(ce).data()[0] - 2.0 * 7f64.ln()).abs() < 1e-12);
    }
}
