//! Reverse-mode differentiation over dense matrices and sparse-dense
//! products.
//!
//! A [`Tape`] records one forward computation; nodes are appended in
//! construction order, which is a topological order, so the backward pass
//! is a single reverse sweep. Gradients accumulate on leaves until
//! [`Tape::zero_grads`] is called; two backward passes without zeroing
//! yield exactly twice the gradient.
//!
//! The op set is intentionally small: dense matmul, sparse-dense matmul,
//! relu, bias add, row softmax, row log, epsilon clamp, row selection,
//! elementwise masking, weighted scalar combination, row cross-entropy,
//! row KL, and the two quadratic forms of the soft modularity objective.

use std::sync::Arc;

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::linalg::Csr;

/// Epsilon used by log-taking ops to clamp their inputs away from zero.
pub const LOG_EPS: f64 = 1e-10;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(usize);

enum Op {
    Leaf,
    DenseMatmul {
        a: usize,
        b: usize,
    },
    Spmm {
        s: Arc<Csr>,
        x: usize,
    },
    Relu {
        x: usize,
    },
    AddBias {
        x: usize,
        b: usize,
    },
    RowSoftmax {
        x: usize,
    },
    RowLog {
        x: usize,
    },
    ClampMin {
        x: usize,
        eps: f64,
    },
    SelectRows {
        x: usize,
        ids: Arc<Vec<usize>>,
    },
    MulMask {
        x: usize,
        mask: Arc<Array2<f64>>,
    },
    ScalarCombine {
        terms: Vec<usize>,
        weights: Vec<f64>,
    },
    CrossEntropyRows {
        probs: usize,
        targets: Arc<Array2<f64>>,
    },
    KlRows {
        p: Arc<Array2<f64>>,
        q: usize,
    },
    TraceQuadratic {
        q: usize,
        /// S·Q cached from the forward pass; S is symmetric so the
        /// backward contribution is 2·(S·Q).
        sq: Array2<f64>,
    },
    RankOneQuadratic {
        d: Arc<Vec<f64>>,
        q: usize,
        /// dᵀ·Q cached from the forward pass.
        v: Vec<f64>,
    },
}

struct Node {
    data: Array2<f64>,
    grad: Option<Array2<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Records one forward computation and plays it backwards.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn scalar(v: f64) -> Array2<f64> {
    Array2::from_elem((1, 1), v)
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, data: Array2<f64>, requires_grad: bool, op: Op) -> Value {
        self.nodes.push(Node {
            data,
            grad: None,
            requires_grad,
            op,
        });
        Value(self.nodes.len() - 1)
    }

    fn needs(&self, v: Value) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, data: Array2<f64>) -> Value {
        self.push(data, true, Op::Leaf)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, data: Array2<f64>) -> Value {
        self.push(data, false, Op::Leaf)
    }

    pub fn data(&self, v: Value) -> &Array2<f64> {
        &self.nodes[v.0].data
    }

    pub fn view(&self, v: Value) -> ArrayView2<'_, f64> {
        self.nodes[v.0].data.view()
    }

    /// Accumulated gradient of a leaf; `None` before any backward pass.
    pub fn grad(&self, v: Value) -> Option<&Array2<f64>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn dense_matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (am, ak) = self.nodes[a.0].data.dim();
        let (bk, bn) = self.nodes[b.0].data.dim();
        if ak != bk {
            return Err(Error::shape(format!(
                "dense_matmul: {am}x{ak} times {bk}x{bn}"
            )));
        }
        let data = self.nodes[a.0].data.dot(&self.nodes[b.0].data);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(data, rg, Op::DenseMatmul { a: a.0, b: b.0 }))
    }

    /// `s · x` with constant sparse `s`. Gradient flows into `x` as
    /// `sᵀ · g`.
    pub fn spmm(&mut self, s: Arc<Csr>, x: Value) -> Result<Value> {
        let (xr, xc) = self.nodes[x.0].data.dim();
        if s.cols() != xr {
            return Err(Error::shape(format!(
                "spmm: {}x{} times {}x{}",
                s.rows(),
                s.cols(),
                xr,
                xc
            )));
        }
        let data = s.mul_dense(&self.nodes[x.0].data.view());
        let rg = self.needs(x);
        Ok(self.push(data, rg, Op::Spmm { s, x: x.0 }))
    }

    pub fn relu(&mut self, x: Value) -> Value {
        let data = self.nodes[x.0].data.mapv(|v| v.max(0.0));
        let rg = self.needs(x);
        self.push(data, rg, Op::Relu { x: x.0 })
    }

    /// Adds a `1×k` bias row to every row of `x`.
    pub fn add_bias(&mut self, x: Value, b: Value) -> Result<Value> {
        let (_, xc) = self.nodes[x.0].data.dim();
        let (br, bc) = self.nodes[b.0].data.dim();
        if br != 1 || bc != xc {
            return Err(Error::shape(format!(
                "add_bias: {br}x{bc} bias onto {xc} columns"
            )));
        }
        let data = &self.nodes[x.0].data + &self.nodes[b.0].data;
        let rg = self.needs(x) || self.needs(b);
        Ok(self.push(data, rg, Op::AddBias { x: x.0, b: b.0 }))
    }

    /// Numerically stable softmax over each row.
    pub fn row_softmax(&mut self, x: Value) -> Value {
        let mut data = self.nodes[x.0].data.clone();
        for mut row in data.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - m).exp());
            let s: f64 = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let rg = self.needs(x);
        self.push(data, rg, Op::RowSoftmax { x: x.0 })
    }

    /// Elementwise natural log. Inputs must be positive; clamp first.
    pub fn row_log(&mut self, x: Value) -> Result<Value> {
        if self.nodes[x.0].data.iter().any(|&v| v <= 0.0) {
            return Err(Error::divergence(
                "row_log on non-positive entry; clamp first".to_string(),
            ));
        }
        let data = self.nodes[x.0].data.mapv(f64::ln);
        let rg = self.needs(x);
        Ok(self.push(data, rg, Op::RowLog { x: x.0 }))
    }

    /// `max(x, eps)` elementwise; gradient passes where `x >= eps`.
    pub fn clamp_min(&mut self, x: Value, eps: f64) -> Value {
        let data = self.nodes[x.0].data.mapv(|v| v.max(eps));
        let rg = self.needs(x);
        self.push(data, rg, Op::ClampMin { x: x.0, eps })
    }

    /// Gathers the given rows; backward scatter-adds, so repeated ids
    /// accumulate.
    pub fn select_rows(&mut self, x: Value, ids: Arc<Vec<usize>>) -> Result<Value> {
        let (xr, xc) = self.nodes[x.0].data.dim();
        if let Some(&bad) = ids.iter().find(|&&i| i >= xr) {
            return Err(Error::shape(format!(
                "select_rows: row {bad} out of {xr}"
            )));
        }
        let mut data = Array2::zeros((ids.len(), xc));
        for (k, &i) in ids.iter().enumerate() {
            data.row_mut(k).assign(&self.nodes[x.0].data.row(i));
        }
        let rg = self.needs(x);
        Ok(self.push(data, rg, Op::SelectRows { x: x.0, ids }))
    }

    /// Elementwise product with a constant mask (dropout and friends).
    pub fn mul_mask(&mut self, x: Value, mask: Arc<Array2<f64>>) -> Result<Value> {
        if self.nodes[x.0].data.dim() != mask.dim() {
            return Err(Error::shape("mul_mask: mask shape".to_string()));
        }
        let data = &self.nodes[x.0].data * &*mask;
        let rg = self.needs(x);
        Ok(self.push(data, rg, Op::MulMask { x: x.0, mask }))
    }

    /// Weighted sum of scalar values: `Σ wᵢ·termᵢ`.
    pub fn scalar_combine(&mut self, terms: &[Value], weights: &[f64]) -> Result<Value> {
        if terms.len() != weights.len() || terms.is_empty() {
            return Err(Error::shape("scalar_combine: arity".to_string()));
        }
        let mut acc = 0.0;
        for (t, w) in terms.iter().zip(weights) {
            let d = &self.nodes[t.0].data;
            if d.dim() != (1, 1) {
                return Err(Error::shape("scalar_combine: non-scalar term".to_string()));
            }
            acc += w * d[[0, 0]];
        }
        let rg = terms.iter().any(|&t| self.needs(t));
        Ok(self.push(
            scalar(acc),
            rg,
            Op::ScalarCombine {
                terms: terms.iter().map(|t| t.0).collect(),
                weights: weights.to_vec(),
            },
        ))
    }

    /// `−(1/n) Σᵢ Σⱼ targetsᵢⱼ · ln(max(probsᵢⱼ, ε))`.
    ///
    /// Targets may be one-hot or soft rows; gradient flows only into
    /// `probs` and is zero where the clamp is active.
    pub fn cross_entropy_rows(&mut self, probs: Value, targets: Arc<Array2<f64>>) -> Result<Value> {
        let pd = self.nodes[probs.0].data.dim();
        if pd != targets.dim() {
            return Err(Error::shape(format!(
                "cross_entropy_rows: probs {pd:?} vs targets {:?}",
                targets.dim()
            )));
        }
        let n = pd.0 as f64;
        let mut acc = 0.0;
        for (p, t) in self.nodes[probs.0].data.iter().zip(targets.iter()) {
            if *t != 0.0 {
                acc -= t * p.max(LOG_EPS).ln();
            }
        }
        let rg = self.needs(probs);
        Ok(self.push(
            scalar(acc / n),
            rg,
            Op::CrossEntropyRows {
                probs: probs.0,
                targets,
            },
        ))
    }

    /// `(1/n) Σᵢ Σⱼ pᵢⱼ · ln(pᵢⱼ / max(qᵢⱼ, ε))` with fixed `p`;
    /// gradient flows only into `q`.
    pub fn kl_rows(&mut self, p: Arc<Array2<f64>>, q: Value) -> Result<Value> {
        let qd = self.nodes[q.0].data.dim();
        if qd != p.dim() {
            return Err(Error::shape(format!(
                "kl_rows: p {:?} vs q {qd:?}",
                p.dim()
            )));
        }
        let n = qd.0 as f64;
        let mut acc = 0.0;
        for (pv, qv) in p.iter().zip(self.nodes[q.0].data.iter()) {
            if *pv > 0.0 {
                acc += pv * (pv / qv.max(LOG_EPS)).ln();
            }
        }
        let rg = self.needs(q);
        Ok(self.push(scalar(acc / n), rg, Op::KlRows { p, q: q.0 }))
    }

    /// `Σ_c q_cᵀ S q_c` for symmetric sparse `S`, one spmm per call.
    pub fn trace_quadratic(&mut self, s: Arc<Csr>, q: Value) -> Result<Value> {
        let (qr, _) = self.nodes[q.0].data.dim();
        if s.rows() != qr || s.cols() != qr {
            return Err(Error::shape(format!(
                "trace_quadratic: {}x{} vs q rows {qr}",
                s.rows(),
                s.cols()
            )));
        }
        let sq = s.mul_dense(&self.nodes[q.0].data.view());
        let acc: f64 = sq
            .iter()
            .zip(self.nodes[q.0].data.iter())
            .map(|(a, b)| a * b)
            .sum();
        let rg = self.needs(q);
        Ok(self.push(scalar(acc), rg, Op::TraceQuadratic { q: q.0, sq }))
    }

    /// `‖dᵀQ‖²` without materializing the rank-one outer product.
    pub fn rank_one_quadratic(&mut self, d: Arc<Vec<f64>>, q: Value) -> Result<Value> {
        let (qr, qc) = self.nodes[q.0].data.dim();
        if d.len() != qr {
            return Err(Error::shape(format!(
                "rank_one_quadratic: d len {} vs q rows {qr}",
                d.len()
            )));
        }
        let mut v = vec![0.0; qc];
        for (i, row) in self.nodes[q.0].data.rows().into_iter().enumerate() {
            let di = d[i];
            if di != 0.0 {
                for (c, val) in row.iter().enumerate() {
                    v[c] += di * val;
                }
            }
        }
        let acc: f64 = v.iter().map(|x| x * x).sum();
        let rg = self.needs(q);
        Ok(self.push(scalar(acc), rg, Op::RankOneQuadratic { d, q: q.0, v }))
    }

    /// Reverse sweep from a scalar output. Leaf gradients accumulate.
    pub fn backward(&mut self, out: Value) -> Result<()> {
        if self.nodes[out.0].data.dim() != (1, 1) {
            return Err(Error::shape("backward: output must be 1x1".to_string()));
        }
        // Transient per-pass flows; a node's flow is complete before the
        // reverse sweep reaches it, and is dropped right after its
        // vector-Jacobian products are pushed into its inputs.
        let mut flow: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        flow[out.0] = Some(scalar(1.0));

        for i in (0..=out.0).rev() {
            let Some(g) = flow[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            match &self.nodes[i].op {
                Op::Leaf => {
                    let slot = &mut self.nodes[i].grad;
                    match slot {
                        Some(acc) => *acc += &g,
                        None => *slot = Some(g),
                    }
                }
                Op::DenseMatmul { a, b } => {
                    let (a, b) = (*a, *b);
                    if self.nodes[a].requires_grad {
                        let ga = g.dot(&self.nodes[b].data.t());
                        add_flow(&mut flow, a, ga);
                    }
                    if self.nodes[b].requires_grad {
                        let gb = self.nodes[a].data.t().dot(&g);
                        add_flow(&mut flow, b, gb);
                    }
                }
                Op::Spmm { s, x } => {
                    let x = *x;
                    let gx = s.tr_mul_dense(&g.view());
                    add_flow(&mut flow, x, gx);
                }
                Op::Relu { x } => {
                    let x = *x;
                    let mut gx = g;
                    gx.zip_mut_with(&self.nodes[i].data, |gv, &y| {
                        if y <= 0.0 {
                            *gv = 0.0;
                        }
                    });
                    add_flow(&mut flow, x, gx);
                }
                Op::AddBias { x, b } => {
                    let (x, b) = (*x, *b);
                    if self.nodes[b].requires_grad {
                        let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        add_flow(&mut flow, b, gb);
                    }
                    if self.nodes[x].requires_grad {
                        add_flow(&mut flow, x, g);
                    }
                }
                Op::RowSoftmax { x } => {
                    let x = *x;
                    let y = &self.nodes[i].data;
                    let mut gx = g;
                    for (mut grow, yrow) in gx.rows_mut().into_iter().zip(y.rows()) {
                        let dot: f64 = grow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum();
                        for (gv, &yv) in grow.iter_mut().zip(yrow.iter()) {
                            *gv = yv * (*gv - dot);
                        }
                    }
                    add_flow(&mut flow, x, gx);
                }
                Op::RowLog { x } => {
                    let x = *x;
                    let mut gx = g;
                    gx.zip_mut_with(&self.nodes[x].data, |gv, &xv| *gv /= xv);
                    add_flow(&mut flow, x, gx);
                }
                Op::ClampMin { x, eps } => {
                    let (x, eps) = (*x, *eps);
                    let mut gx = g;
                    gx.zip_mut_with(&self.nodes[x].data, |gv, &xv| {
                        if xv < eps {
                            *gv = 0.0;
                        }
                    });
                    add_flow(&mut flow, x, gx);
                }
                Op::SelectRows { x, ids } => {
                    let x = *x;
                    let ids = Arc::clone(ids);
                    let mut gx = Array2::zeros(self.nodes[x].data.dim());
                    for (k, &r) in ids.iter().enumerate() {
                        let mut row = gx.row_mut(r);
                        row += &g.row(k);
                    }
                    add_flow(&mut flow, x, gx);
                }
                Op::MulMask { x, mask } => {
                    let x = *x;
                    let gx = &g * &**mask;
                    add_flow(&mut flow, x, gx);
                }
                Op::ScalarCombine { terms, weights } => {
                    let gs = g[[0, 0]];
                    let pairs: Vec<(usize, f64)> =
                        terms.iter().cloned().zip(weights.iter().cloned()).collect();
                    for (t, w) in pairs {
                        if self.nodes[t].requires_grad {
                            add_flow(&mut flow, t, scalar(gs * w));
                        }
                    }
                }
                Op::CrossEntropyRows { probs, targets } => {
                    let probs = *probs;
                    let targets = Arc::clone(targets);
                    let gs = g[[0, 0]];
                    let n = self.nodes[probs].data.nrows() as f64;
                    let mut gp = Array2::zeros(self.nodes[probs].data.dim());
                    for ((gv, &t), &p) in gp
                        .iter_mut()
                        .zip(targets.iter())
                        .zip(self.nodes[probs].data.iter())
                    {
                        if t != 0.0 && p >= LOG_EPS {
                            *gv = -gs * t / (p.max(LOG_EPS) * n);
                        }
                    }
                    add_flow(&mut flow, probs, gp);
                }
                Op::KlRows { p, q } => {
                    let q = *q;
                    let p = Arc::clone(p);
                    let gs = g[[0, 0]];
                    let n = self.nodes[q].data.nrows() as f64;
                    let mut gq = Array2::zeros(self.nodes[q].data.dim());
                    for ((gv, &pv), &qv) in gq
                        .iter_mut()
                        .zip(p.iter())
                        .zip(self.nodes[q].data.iter())
                    {
                        if pv > 0.0 && qv >= LOG_EPS {
                            *gv = -gs * pv / (qv.max(LOG_EPS) * n);
                        }
                    }
                    add_flow(&mut flow, q, gq);
                }
                Op::TraceQuadratic { q, sq } => {
                    let q = *q;
                    let gs = g[[0, 0]];
                    let gq = sq.mapv(|v| 2.0 * gs * v);
                    add_flow(&mut flow, q, gq);
                }
                Op::RankOneQuadratic { d, q, v } => {
                    let q = *q;
                    let gs = g[[0, 0]];
                    let (qr, qc) = self.nodes[q].data.dim();
                    let mut gq = Array2::zeros((qr, qc));
                    for (i_row, mut row) in gq.rows_mut().into_iter().enumerate() {
                        let di = d[i_row];
                        if di != 0.0 {
                            for (c, gv) in row.iter_mut().enumerate() {
                                *gv = 2.0 * gs * di * v[c];
                            }
                        }
                    }
                    add_flow(&mut flow, q, gq);
                }
            }
        }
        Ok(())
    }
}

fn add_flow(flow: &mut [Option<Array2<f64>>], idx: usize, g: Array2<f64>) {
    match &mut flow[idx] {
        Some(acc) => *acc += &g,
        None => flow[idx] = Some(g),
    }
}

/// Central-difference check of a scalar computation against the tape
/// gradients. Returns the worst relative error over all leaf entries,
/// where the error is `|a − n| / max(|a|, |n|, 1)` so near-zero gradients
/// are measured absolutely.
pub fn gradcheck<F>(f: F, leaf_data: &[Array2<f64>], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Value]) -> Result<Value>,
{
    let mut tape = Tape::new();
    let leaves: Vec<Value> = leaf_data.iter().map(|d| tape.leaf(d.clone())).collect();
    let out = f(&mut tape, &leaves)?;
    if tape.data(out).dim() != (1, 1) {
        return Err(Error::shape("gradcheck: output must be scalar".to_string()));
    }
    tape.backward(out)?;
    let analytic: Vec<Array2<f64>> = leaves
        .iter()
        .map(|&l| {
            tape.grad(l)
                .cloned()
                .unwrap_or_else(|| Array2::zeros(tape.data(l).dim()))
        })
        .collect();

    let eval = |data: &[Array2<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let ls: Vec<Value> = data.iter().map(|d| t.leaf(d.clone())).collect();
        let o = f(&mut t, &ls)?;
        Ok(t.data(o)[[0, 0]])
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Array2<f64>> = leaf_data.to_vec();
    for li in 0..leaf_data.len() {
        let dim = leaf_data[li].dim();
        for r in 0..dim.0 {
            for c in 0..dim.1 {
                let orig = work[li][[r, c]];
                work[li][[r, c]] = orig + step;
                let fp = eval(&work)?;
                work[li][[r, c]] = orig - step;
                let fm = eval(&work)?;
                work[li][[r, c]] = orig;
                let numeric = (fp - fm) / (2.0 * step);
                let a = analytic[li][[r, c]];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
                worst = worst.max(err);
            }
        }
    }
    Ok(worst)
}
