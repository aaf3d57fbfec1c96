//! Recording executor: a tape of primitive applications plus reverse-mode
//! differentiation.
//!
//! Nodes are appended in execution order, which is already topological, so
//! the backward pass is a single reverse sweep visiting each node once. The
//! scan's backward runs the adjoint recurrence in reverse rather than
//! unrolling per-step nodes, keeping memory at one state row per channel.

use super::exec::Exec;
use super::kernels;
use super::{Element, Tensor};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Affine,
    Matmul,
    Transpose,
    Softmax,
    LayerNorm { eps: f64 },
    Scan,
    SelectiveScan { reverse: bool },
    Silu,
    Softplus,
    Exp,
    Mul,
    Add,
    Scale { c: f64 },
    AddConst,
    CrossEntropy { targets: Vec<usize> },
    Embed { ids: Vec<usize> },
    SliceCols { start: usize, width: usize },
    ConcatCols { widths: Vec<usize> },
    Rotary { base: f64 },
    RepeatEach { n: usize },
    TileLast { times: usize },
    SumGroups { n: usize },
    ReverseRows,
    BroadcastRows,
    SumAll,
}

struct Node<E: Element> {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor<E>,
    /// Saved intermediate beyond the output (the selective scan's state
    /// trajectory).
    aux: Option<Tensor<E>>,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Per-parameter gradient accumulator for one or more backward passes.
#[derive(Debug, Clone)]
pub struct GradStore<E: Element> {
    grads: Vec<Option<Vec<E>>>,
}

impl<E: Element> GradStore<E> {
    pub fn new(n_params: usize) -> Self {
        GradStore {
            grads: vec![None; n_params],
        }
    }

    pub fn accumulate(&mut self, id: ParamId, g: &[E]) {
        match &mut self.grads[id.0] {
            Some(slot) => {
                for (s, &v) in slot.iter_mut().zip(g) {
                    *s += v;
                }
            }
            None => self.grads[id.0] = Some(g.to_vec()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[E]> {
        self.grads[id.0].as_deref()
    }

    /// Fold another store into this one (deterministic: caller fixes order).
    pub fn merge(&mut self, other: &GradStore<E>) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        let cv = E::from_f64(c);
        for g in self.grads.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v *= cv;
            }
        }
    }

    /// Global L2 norm over every stored gradient, accumulated in f64 in
    /// parameter order.
    pub fn global_norm(&self) -> f64 {
        let mut sq = 0.0f64;
        for g in self.grads.iter().flatten() {
            for &v in g {
                let x = v.to_f64();
                sq += x * x;
            }
        }
        sq.sqrt()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Copy gradients into the parameter tensors' grad slots.
    pub fn write_back(&self, params: &mut ParamSet<E>) {
        for id in params.ids() {
            if let Some(g) = self.get(id) {
                params.get_mut(id).set_grad(g.to_vec());
            } else {
                params.get_mut(id).clear_grad();
            }
        }
    }
}

/// Tape of recorded primitive applications. Confined to one thread.
pub struct Graph<E: Element> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor<E>) -> NodeId {
        self.push_aux(op, inputs, value, None)
    }

    fn push_aux(
        &mut self,
        op: Op,
        inputs: Vec<NodeId>,
        value: Tensor<E>,
        aux: Option<Tensor<E>>,
    ) -> NodeId {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            aux,
            needs_grad,
            param: None,
        });
        self.nodes.len() - 1
    }

    fn val(&self, id: NodeId) -> &Tensor<E> {
        &self.nodes[id].value
    }

    /// Reverse sweep from a scalar loss; parameter gradients are accumulated
    /// into `store`. Each node is visited exactly once.
    pub fn backward(&self, loss: NodeId, store: &mut GradStore<E>) -> Result<()> {
        if self.val(loss).numel() != 1 {
            return Err(Error::domain(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.val(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<E>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![E::ONE]);

        for id in (0..=loss).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            if let Some(pid) = node.param {
                store.accumulate(pid, &g);
                continue;
            }
            self.vjp(id, &g, &mut grads)?;
        }
        Ok(())
    }

    fn accum(&self, grads: &mut [Option<Vec<E>>], id: NodeId, g: Vec<E>) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut grads[id] {
            Some(slot) => {
                for (s, v) in slot.iter_mut().zip(g) {
                    *s += v;
                }
            }
            None => grads[id] = Some(g),
        }
    }

    fn vjp(&self, id: NodeId, g: &[E], grads: &mut [Option<Vec<E>>]) -> Result<()> {
        let node = &self.nodes[id];
        let ins = &node.inputs;
        match &node.op {
            Op::Leaf => {}

            Op::Affine => {
                let (x, w) = (self.val(ins[0]), self.val(ins[1]));
                let (rows, m, n) = (x.rows(), w.shape()[0], w.shape()[1]);
                if self.nodes[ins[0]].needs_grad {
                    let mut dx = vec![E::ZERO; rows * m];
                    matmul_nt(g, w.data(), rows, n, m, &mut dx);
                    self.accum(grads, ins[0], dx);
                }
                if self.nodes[ins[1]].needs_grad {
                    let mut dw = vec![E::ZERO; m * n];
                    matmul_tn(x.data(), g, rows, m, n, &mut dw);
                    self.accum(grads, ins[1], dw);
                }
                if self.nodes[ins[2]].needs_grad {
                    let mut db = vec![E::ZERO; n];
                    for row in g.chunks(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accum(grads, ins[2], db);
                }
            }

            Op::Matmul => {
                let (a, b) = (self.val(ins[0]), self.val(ins[1]));
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                if self.nodes[ins[0]].needs_grad {
                    let mut da = vec![E::ZERO; m * k];
                    matmul_nt(g, b.data(), m, n, k, &mut da);
                    self.accum(grads, ins[0], da);
                }
                if self.nodes[ins[1]].needs_grad {
                    let mut db = vec![E::ZERO; k * n];
                    matmul_tn(a.data(), g, m, k, n, &mut db);
                    self.accum(grads, ins[1], db);
                }
            }

            Op::Transpose => {
                let x = self.val(ins[0]);
                let (r, c) = (x.shape()[0], x.shape()[1]);
                let mut dx = vec![E::ZERO; r * c];
                for i in 0..c {
                    for j in 0..r {
                        dx[j * c + i] = g[i * r + j];
                    }
                }
                self.accum(grads, ins[0], dx);
            }

            Op::Softmax => {
                let p = node.value.data();
                let n = node.value.cols();
                let mut dx = vec![E::ZERO; p.len()];
                for ((drow, prow), grow) in dx.chunks_mut(n).zip(p.chunks(n)).zip(g.chunks(n)) {
                    let mut dot = E::ZERO;
                    for (&gv, &pv) in grow.iter().zip(prow) {
                        dot += gv * pv;
                    }
                    for ((d, &gv), &pv) in drow.iter_mut().zip(grow).zip(prow) {
                        *d = pv * (gv - dot);
                    }
                }
                self.accum(grads, ins[0], dx);
            }

            Op::LayerNorm { eps } => {
                let x = self.val(ins[0]);
                let d = x.cols();
                let inv_d = E::ONE / E::from_f64(d as f64);
                let epsv = E::from_f64(*eps);
                let mut dx = vec![E::ZERO; x.numel()];
                for (drow, (row, grow)) in dx
                    .chunks_mut(d)
                    .zip(x.data().chunks(d).zip(g.chunks(d)))
                {
                    let mut mean = E::ZERO;
                    for &v in row {
                        mean += v;
                    }
                    mean *= inv_d;
                    let mut var = E::ZERO;
                    for &v in row {
                        let c = v - mean;
                        var += c * c;
                    }
                    var *= inv_d;
                    let inv_std = E::ONE / (var + epsv).sqrt();
                    let mut g_mean = E::ZERO;
                    let mut gx_mean = E::ZERO;
                    for (&gv, &v) in grow.iter().zip(row) {
                        g_mean += gv;
                        gx_mean += gv * (v - mean) * inv_std;
                    }
                    g_mean *= inv_d;
                    gx_mean *= inv_d;
                    for ((dv, &gv), &v) in drow.iter_mut().zip(grow).zip(row) {
                        let xhat = (v - mean) * inv_std;
                        *dv = inv_std * (gv - g_mean - xhat * gx_mean);
                    }
                }
                self.accum(grads, ins[0], dx);
            }

            Op::Scan => {
                // h_i = a_i ⊙ h_{i-1} + b_i. With λ_i = dL/dh_i (total):
                // λ_i = g_i + a_{i+1} ⊙ λ_{i+1};  da_i = λ_i ⊙ h_{i-1};
                // db_i = λ_i;  dh0 = a_1 ⊙ λ_1.
                let a = self.val(ins[0]);
                let h0 = self.val(ins[2]);
                let h = node.value.data();
                let (l, c) = (a.shape()[0], a.shape()[1]);
                let ad = a.data();
                let mut lam: Vec<E> = g[(l - 1) * c..].to_vec();
                let mut da = vec![E::ZERO; l * c];
                let mut db = vec![E::ZERO; l * c];
                for i in (0..l).rev() {
                    let prev = if i == 0 {
                        h0.data()
                    } else {
                        &h[(i - 1) * c..i * c]
                    };
                    for j in 0..c {
                        da[i * c + j] = lam[j] * prev[j];
                        db[i * c + j] = lam[j];
                    }
                    if i > 0 {
                        let arow = &ad[i * c..(i + 1) * c];
                        let grow = &g[(i - 1) * c..i * c];
                        for j in 0..c {
                            lam[j] = grow[j] + arow[j] * lam[j];
                        }
                    }
                }
                if self.nodes[ins[2]].needs_grad {
                    let a0 = &ad[0..c];
                    let dh0: Vec<E> = lam.iter().zip(a0).map(|(&l, &a)| l * a).collect();
                    self.accum(grads, ins[2], dh0);
                }
                self.accum(grads, ins[0], da);
                self.accum(grads, ins[1], db);
            }

            Op::SelectiveScan { reverse } => {
                let (decay, dx) = (self.val(ins[0]), self.val(ins[1]));
                let (b_sel, c_sel) = (self.val(ins[2]), self.val(ins[3]));
                let state = node.aux.as_ref().expect("selective scan saved its state");
                let (d_decay, d_dx, d_b, d_c) =
                    kernels::selective_scan_bwd(decay, dx, b_sel, c_sel, *reverse, state, g);
                self.accum(grads, ins[0], d_decay);
                self.accum(grads, ins[1], d_dx);
                self.accum(grads, ins[2], d_b);
                self.accum(grads, ins[3], d_c);
            }

            Op::Silu => {
                let x = self.val(ins[0]);
                let dx: Vec<E> = g
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &v)| gv * kernels::silu_deriv(v))
                    .collect();
                self.accum(grads, ins[0], dx);
            }

            Op::Softplus => {
                let x = self.val(ins[0]);
                let dx: Vec<E> = g
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &v)| gv * kernels::sigmoid_scalar(v))
                    .collect();
                self.accum(grads, ins[0], dx);
            }

            Op::Exp => {
                let y = node.value.data();
                let dx: Vec<E> = g.iter().zip(y).map(|(&gv, &yv)| gv * yv).collect();
                self.accum(grads, ins[0], dx);
            }

            Op::Mul => {
                let (a, b) = (self.val(ins[0]), self.val(ins[1]));
                if self.nodes[ins[0]].needs_grad {
                    let da: Vec<E> = g.iter().zip(b.data()).map(|(&gv, &bv)| gv * bv).collect();
                    self.accum(grads, ins[0], da);
                }
                if self.nodes[ins[1]].needs_grad {
                    let db: Vec<E> = g.iter().zip(a.data()).map(|(&gv, &av)| gv * av).collect();
                    self.accum(grads, ins[1], db);
                }
            }

            Op::Add => {
                if self.nodes[ins[0]].needs_grad {
                    self.accum(grads, ins[0], g.to_vec());
                }
                if self.nodes[ins[1]].needs_grad {
                    self.accum(grads, ins[1], g.to_vec());
                }
            }

            Op::Scale { c } => {
                let cv = E::from_f64(*c);
                let dx: Vec<E> = g.iter().map(|&gv| gv * cv).collect();
                self.accum(grads, ins[0], dx);
            }

            Op::AddConst => {
                self.accum(grads, ins[0], g.to_vec());
            }

            Op::CrossEntropy { targets } => {
                let logits = self.val(ins[0]);
                let v = logits.cols();
                let mut dx = vec![E::ZERO; logits.numel()];
                for (i, (row, &t)) in logits.data().chunks(v).zip(targets).enumerate() {
                    let mut mx = row[0];
                    for &x in &row[1..] {
                        mx = mx.maximum(x);
                    }
                    let mut sum = E::ZERO;
                    for &x in row {
                        sum += (x - mx).exp();
                    }
                    let inv = E::ONE / sum;
                    let gv = g[i];
                    let drow = &mut dx[i * v..(i + 1) * v];
                    for (d, &x) in drow.iter_mut().zip(row) {
                        *d = gv * (x - mx).exp() * inv;
                    }
                    drow[t] -= gv;
                }
                self.accum(grads, ins[0], dx);
            }

            Op::Embed { ids } => {
                let table = self.val(ins[0]);
                let d = table.cols();
                let mut dt = vec![E::ZERO; table.numel()];
                for (i, &id) in ids.iter().enumerate() {
                    let grow = &g[i * d..(i + 1) * d];
                    let trow = &mut dt[id * d..(id + 1) * d];
                    for (t, &gv) in trow.iter_mut().zip(grow) {
                        *t += gv;
                    }
                }
                self.accum(grads, ins[0], dt);
            }

            Op::SliceCols { start, width } => {
                let x = self.val(ins[0]);
                let c = x.cols();
                let mut dx = vec![E::ZERO; x.numel()];
                for (i, grow) in g.chunks(*width).enumerate() {
                    dx[i * c + start..i * c + start + width].copy_from_slice(grow);
                }
                self.accum(grads, ins[0], dx);
            }

            Op::ConcatCols { widths } => {
                let total: usize = widths.iter().sum();
                let mut at = 0;
                for (part, &w) in ins.iter().zip(widths) {
                    if self.nodes[*part].needs_grad {
                        let rows = g.len() / total;
                        let mut dp = vec![E::ZERO; rows * w];
                        for i in 0..rows {
                            dp[i * w..(i + 1) * w]
                                .copy_from_slice(&g[i * total + at..i * total + at + w]);
                        }
                        self.accum(grads, *part, dp);
                    }
                    at += w;
                }
            }

            Op::Rotary { base } => {
                // rotation is orthogonal: the adjoint rotates by -θ
                let d = node.value.cols();
                let l = node.value.rows();
                let half = d / 2;
                let mut dx = vec![E::ZERO; g.len()];
                for i in 0..l {
                    for j in 0..half {
                        let theta = i as f64 * base.powf(-2.0 * j as f64 / d as f64);
                        let (s, c) = (E::from_f64(theta.sin()), E::from_f64(theta.cos()));
                        let g0 = g[i * d + 2 * j];
                        let g1 = g[i * d + 2 * j + 1];
                        dx[i * d + 2 * j] = g0 * c + g1 * s;
                        dx[i * d + 2 * j + 1] = -g0 * s + g1 * c;
                    }
                }
                self.accum(grads, ins[0], dx);
            }

            Op::RepeatEach { n } => {
                let x = self.val(ins[0]);
                let c = x.cols();
                let rows = x.rows();
                let mut dx = vec![E::ZERO; x.numel()];
                for i in 0..rows {
                    let grow = &g[i * c * n..(i + 1) * c * n];
                    for j in 0..c {
                        let mut s = E::ZERO;
                        for &v in &grow[j * n..(j + 1) * n] {
                            s += v;
                        }
                        dx[i * c + j] = s;
                    }
                }
                self.accum(grads, ins[0], dx);
            }

            Op::TileLast { times } => {
                let x = self.val(ins[0]);
                let c = x.cols();
                let rows = x.rows();
                let mut dx = vec![E::ZERO; x.numel()];
                for i in 0..rows {
                    let grow = &g[i * c * times..(i + 1) * c * times];
                    let drow = &mut dx[i * c..(i + 1) * c];
                    for t in 0..*times {
                        for (d, &v) in drow.iter_mut().zip(&grow[t * c..(t + 1) * c]) {
                            *d += v;
                        }
                    }
                }
                self.accum(grads, ins[0], dx);
            }

            Op::SumGroups { n } => {
                let x = self.val(ins[0]);
                let cn = x.cols();
                let c = cn / n;
                let rows = x.rows();
                let mut dx = vec![E::ZERO; x.numel()];
                for i in 0..rows {
                    let grow = &g[i * c..(i + 1) * c];
                    let drow = &mut dx[i * cn..(i + 1) * cn];
                    for j in 0..c {
                        for d in &mut drow[j * n..(j + 1) * n] {
                            *d = grow[j];
                        }
                    }
                }
                self.accum(grads, ins[0], dx);
            }

            Op::ReverseRows => {
                let c = node.value.cols();
                let l = node.value.rows();
                let mut dx = vec![E::ZERO; g.len()];
                for i in 0..l {
                    dx[i * c..(i + 1) * c].copy_from_slice(&g[(l - 1 - i) * c..(l - i) * c]);
                }
                self.accum(grads, ins[0], dx);
            }

            Op::BroadcastRows => {
                let x = self.val(ins[0]);
                let c = x.cols();
                let mut dx = vec![E::ZERO; c];
                for grow in g.chunks(c) {
                    for (d, &v) in dx.iter_mut().zip(grow) {
                        *d += v;
                    }
                }
                self.accum(grads, ins[0], dx);
            }

            Op::SumAll => {
                let x = self.val(ins[0]);
                self.accum(grads, ins[0], vec![g[0]; x.numel()]);
            }
        }
        Ok(())
    }
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// c[m,p] = a[m,n] @ b[p,n]ᵀ (rows of b as columns).
fn matmul_nt<E: Element>(a: &[E], b: &[E], m: usize, n: usize, p: usize, out: &mut [E]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * p..(i + 1) * p];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * n..(j + 1) * n];
            let mut s = E::ZERO;
            for (&av, &bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            *o = s;
        }
    }
}

/// c[k,n] = a[m,k]ᵀ @ b[m,n].
fn matmul_tn<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
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

impl<E: Element> Exec<E> for Graph<E> {
    type H = NodeId;

    fn lit(&mut self, v: Tensor<E>) -> NodeId {
        self.push(Op::Leaf, vec![], v)
    }

    fn param(&mut self, set: &ParamSet<E>, id: ParamId) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            value: set.get(id).clone(),
            aux: None,
            needs_grad: true,
            param: Some(id),
        });
        self.nodes.len() - 1
    }

    fn value<'a>(&'a self, h: &'a NodeId) -> &'a Tensor<E> {
        self.val(*h)
    }

    fn affine(&mut self, x: &NodeId, w: &NodeId, b: &NodeId) -> Result<NodeId> {
        let v = kernels::affine(self.val(*x), self.val(*w), self.val(*b))?;
        Ok(self.push(Op::Affine, vec![*x, *w, *b], v))
    }
    fn matmul(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let v = kernels::matmul(self.val(*a), self.val(*b))?;
        Ok(self.push(Op::Matmul, vec![*a, *b], v))
    }
    fn transpose(&mut self, x: &NodeId) -> Result<NodeId> {
        let v = kernels::transpose(self.val(*x))?;
        Ok(self.push(Op::Transpose, vec![*x], v))
    }
    fn softmax(&mut self, x: &NodeId) -> Result<NodeId> {
        let v = kernels::softmax(self.val(*x))?;
        Ok(self.push(Op::Softmax, vec![*x], v))
    }
    fn layer_norm(&mut self, x: &NodeId, eps: f64) -> Result<NodeId> {
        let v = kernels::layer_norm(self.val(*x), eps)?;
        Ok(self.push(Op::LayerNorm { eps }, vec![*x], v))
    }
    fn scan(&mut self, a: &NodeId, b: &NodeId, h0: &NodeId) -> Result<NodeId> {
        let v = kernels::scan(self.val(*a), self.val(*b), self.val(*h0))?;
        Ok(self.push(Op::Scan, vec![*a, *b, *h0], v))
    }
    fn selective_scan(
        &mut self,
        decay: &NodeId,
        dx: &NodeId,
        b_sel: &NodeId,
        c_sel: &NodeId,
        reverse: bool,
    ) -> Result<NodeId> {
        let (y, state) = kernels::selective_scan(
            self.val(*decay),
            self.val(*dx),
            self.val(*b_sel),
            self.val(*c_sel),
            reverse,
            true,
        )?;
        Ok(self.push_aux(
            Op::SelectiveScan { reverse },
            vec![*decay, *dx, *b_sel, *c_sel],
            y,
            state,
        ))
    }
    fn silu(&mut self, x: &NodeId) -> Result<NodeId> {
        let v = kernels::silu(self.val(*x))?;
        Ok(self.push(Op::Silu, vec![*x], v))
    }
    fn softplus(&mut self, x: &NodeId) -> Result<NodeId> {
        let v = kernels::softplus(self.val(*x))?;
        Ok(self.push(Op::Softplus, vec![*x], v))
    }
    fn exp(&mut self, x: &NodeId) -> Result<NodeId> {
        let v = kernels::exp(self.val(*x))?;
        Ok(self.push(Op::Exp, vec![*x], v))
    }
    fn mul(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let v = kernels::mul(self.val(*a), self.val(*b))?;
        Ok(self.push(Op::Mul, vec![*a, *b], v))
    }
    fn add(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let v = kernels::add(self.val(*a), self.val(*b))?;
        Ok(self.push(Op::Add, vec![*a, *b], v))
    }
    fn scale(&mut self, x: &NodeId, c: f64) -> Result<NodeId> {
        let v = kernels::scale(self.val(*x), c)?;
        Ok(self.push(Op::Scale { c }, vec![*x], v))
    }
    fn add_const(&mut self, x: &NodeId, c: f64) -> Result<NodeId> {
        let v = kernels::add_const(self.val(*x), c)?;
        Ok(self.push(Op::AddConst, vec![*x], v))
    }
    fn cross_entropy(&mut self, logits: &NodeId, targets: &[usize]) -> Result<NodeId> {
        let v = kernels::cross_entropy(self.val(*logits), targets)?;
        Ok(self.push(
            Op::CrossEntropy {
                targets: targets.to_vec(),
            },
            vec![*logits],
            v,
        ))
    }
    fn embed(&mut self, table: &NodeId, ids: &[usize]) -> Result<NodeId> {
        let v = kernels::embed(self.val(*table), ids)?;
        Ok(self.push(Op::Embed { ids: ids.to_vec() }, vec![*table], v))
    }
    fn slice_cols(&mut self, x: &NodeId, start: usize, width: usize) -> Result<NodeId> {
        let v = kernels::slice_cols(self.val(*x), start, width)?;
        Ok(self.push(Op::SliceCols { start, width }, vec![*x], v))
    }
    fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let refs: Vec<&Tensor<E>> = parts.iter().map(|&p| self.val(p)).collect();
        let v = kernels::concat_cols(&refs)?;
        let widths = refs.iter().map(|t| t.cols()).collect();
        Ok(self.push(Op::ConcatCols { widths }, parts.to_vec(), v))
    }
    fn rotary(&mut self, x: &NodeId, base: f64) -> Result<NodeId> {
        let v = kernels::rotary(self.val(*x), base)?;
        Ok(self.push(Op::Rotary { base }, vec![*x], v))
    }
    fn repeat_each(&mut self, x: &NodeId, n: usize) -> Result<NodeId> {
        let v = kernels::repeat_each(self.val(*x), n)?;
        Ok(self.push(Op::RepeatEach { n }, vec![*x], v))
    }
    fn tile_last(&mut self, x: &NodeId, times: usize) -> Result<NodeId> {
        let v = kernels::tile_last(self.val(*x), times)?;
        Ok(self.push(Op::TileLast { times }, vec![*x], v))
    }
    fn sum_groups(&mut self, x: &NodeId, n: usize) -> Result<NodeId> {
        let v = kernels::sum_groups(self.val(*x), n)?;
        Ok(self.push(Op::SumGroups { n }, vec![*x], v))
    }
    fn reverse_rows(&mut self, x: &NodeId) -> Result<NodeId> {
        let v = kernels::reverse_rows(self.val(*x))?;
        Ok(self.push(Op::ReverseRows, vec![*x], v))
    }
    fn broadcast_rows(&mut self, x: &NodeId, rows: usize) -> Result<NodeId> {
        let v = kernels::broadcast_rows(self.val(*x), rows)?;
        Ok(self.push(Op::BroadcastRows, vec![*x], v))
    }
    fn sum_all(&mut self, x: &NodeId) -> Result<NodeId> {
        let v = kernels::sum_all(self.val(*x))?;
        Ok(self.push(Op::SumAll, vec![*x], v))
    }
}
