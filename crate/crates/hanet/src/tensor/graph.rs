//! Eagerly-evaluated computation graph with reverse-mode gradients.
//!
//! Every node holds a rank-2 tensor (rows x cols, row-major). Ops compute
//! their output immediately and, when the graph records, push a replayable
//! record so `backward` can run the chain rule in reverse. Scalars live as
//! 1x1 tensors, row vectors as 1xC, column vectors as Rx1.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::store::{ParamStore, BN_MEAN_PREFIX, BN_VAR_PREFIX};
use crate::tensor::{acc_dot, acc_sum, Tensor};

/// Handle to a node inside one [`Graph`]. Never valid across graphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

const BN_EPS: f32 = 1e-5;
const BN_MOMENTUM: f32 = 0.9;

struct Node {
    t: Tensor,
}

enum Op {
    MatMul { a: TensorId, b: TensorId, out: TensorId },
    Transpose { x: TensorId, out: TensorId },
    Conv1dSame { x: TensorId, w: TensorId, out: TensorId, k: usize },
    BatchNorm { x: TensorId, gamma: TensorId, beta: TensorId, out: TensorId, mean: Vec<f32>, inv_std: Vec<f32> },
    Sigmoid { x: TensorId, out: TensorId },
    Tanh { x: TensorId, out: TensorId },
    Relu { x: TensorId, out: TensorId },
    Exp { x: TensorId, out: TensorId },
    Log { x: TensorId, out: TensorId },
    Sqrt { x: TensorId, out: TensorId },
    Add { a: TensorId, b: TensorId, out: TensorId },
    Sub { a: TensorId, b: TensorId, out: TensorId },
    Mul { a: TensorId, b: TensorId, out: TensorId },
    Div { a: TensorId, b: TensorId, out: TensorId },
    AddScalar { x: TensorId, out: TensorId },
    MulScalar { x: TensorId, c: f32, out: TensorId },
    SoftmaxRows { x: TensorId, out: TensorId },
    SumAxis0 { x: TensorId, out: TensorId },
    SumAxis1 { x: TensorId, out: TensorId },
    MeanAxis0 { x: TensorId, out: TensorId },
    MeanAxis1 { x: TensorId, out: TensorId },
    SumAll { x: TensorId, out: TensorId },
    MeanAll { x: TensorId, out: TensorId },
    TopKCols { x: TensorId, out: TensorId, picked: Vec<usize> },
    ConcatRows { xs: Vec<TensorId>, out: TensorId },
    SliceRows { x: TensorId, out: TensorId, start: usize },
    GatherRows { x: TensorId, out: TensorId, idx: Vec<usize> },
    ExpandRows { x: TensorId, out: TensorId },
    ExpandCols { x: TensorId, out: TensorId },
}

/// One forward/backward scope. Training graphs record ops for `backward`;
/// inference graphs skip recording and use running batch-norm statistics.
pub struct Graph {
    nodes: Vec<Node>,
    ops: Vec<Op>,
    train: bool,
    record: bool,
    params: BTreeMap<String, TensorId>,
}

impl Graph {
    /// Recording graph with train-mode batch norm.
    pub fn training() -> Self {
        Graph::with_modes(true, true)
    }

    /// Non-recording graph with eval-mode batch norm.
    pub fn inference() -> Self {
        Graph::with_modes(false, false)
    }

    pub fn with_modes(train: bool, record: bool) -> Self {
        Graph { nodes: Vec::new(), ops: Vec::new(), train, record, params: BTreeMap::new() }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    // ── node access ──────────────────────────────────────────────────

    pub fn values(&self, id: TensorId) -> &[f32] {
        &self.nodes[id.0].t.values
    }

    pub fn dims(&self, id: TensorId) -> (usize, usize) {
        let t = &self.nodes[id.0].t;
        (t.shape[0], t.shape[1])
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f32]> {
        self.nodes[id.0].t.grad.as_deref()
    }

    pub fn scalar(&self, id: TensorId) -> Result<f32> {
        let t = &self.nodes[id.0].t;
        if t.numel() != 1 {
            return Err(Error::invalid(format!("expected scalar, got shape {:?}", t.shape)));
        }
        Ok(t.values[0])
    }

    /// Copy a node out as a standalone tensor (values only).
    pub fn to_tensor(&self, id: TensorId) -> Tensor {
        let t = &self.nodes[id.0].t;
        Tensor { shape: t.shape.clone(), values: t.values.clone(), grad: None, requires_grad: false }
    }

    /// Gradients of all parameter nodes, keyed by store name.
    pub fn param_grads(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.params.iter().filter_map(|(name, id)| {
            self.nodes[id.0].t.grad.as_deref().map(|g| (name.as_str(), g))
        })
    }

    // ── leaves ───────────────────────────────────────────────────────

    fn push(&mut self, rows: usize, cols: usize, values: Vec<f32>, requires_grad: bool) -> TensorId {
        debug_assert_eq!(rows * cols, values.len());
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            t: Tensor { shape: vec![rows, cols], values, grad: None, requires_grad },
        });
        id
    }

    /// Untracked input node.
    pub fn constant(&mut self, t: &Tensor) -> Result<TensorId> {
        let (r, c) = t.dims2()?;
        Ok(self.push(r, c, t.values.clone(), false))
    }

    pub fn constant_matrix(&mut self, rows: usize, cols: usize, values: Vec<f32>) -> Result<TensorId> {
        let t = Tensor::matrix(rows, cols, values)?;
        self.constant(&t)
    }

    pub fn scalar_constant(&mut self, v: f32) -> TensorId {
        self.push(1, 1, vec![v], false)
    }

    /// Tracked leaf that is not a stored parameter (gradient-check probes).
    pub fn leaf(&mut self, t: &Tensor) -> Result<TensorId> {
        let (r, c) = t.dims2()?;
        Ok(self.push(r, c, t.values.clone(), true))
    }

    /// Load a parameter from the store, deduplicated per graph so each
    /// parameter owns exactly one gradient slot.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<TensorId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let t = store.trainable(name)?;
        let (r, c) = t.dims2()?;
        let id = self.push(r, c, t.values.clone(), true);
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].t.requires_grad
    }

    fn record_op(&mut self, op: Op) {
        if self.record {
            self.ops.push(op);
        }
    }

    // ── primitives ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.dims(a);
        let (kb, n) = self.dims(b);
        if ka != kb {
            return Err(Error::Shape { op: "matmul", lhs: vec![m, ka], rhs: vec![kb, n] });
        }
        let av = self.values(a);
        let bv = self.values(b);
        let mut out = vec![0.0f32; m * n];
        if ka > 1024 {
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0f64;
                    for p in 0..ka {
                        s += av[i * ka + p] as f64 * bv[p * n + j] as f64;
                    }
                    out[i * n + j] = s as f32;
                }
            }
        } else {
            for i in 0..m {
                for p in 0..ka {
                    let x = av[i * ka + p];
                    if x != 0.0 {
                        let brow = &bv[p * n..(p + 1) * n];
                        let orow = &mut out[i * n..(i + 1) * n];
                        for j in 0..n {
                            orow[j] += x * brow[j];
                        }
                    }
                }
            }
        }
        let rg = self.requires(a) || self.requires(b);
        let id = self.push(m, n, out, rg);
        self.record_op(Op::MatMul { a, b, out: id });
        Ok(id)
    }

    pub fn transpose(&mut self, x: TensorId) -> TensorId {
        let (r, c) = self.dims(x);
        let xv = self.values(x);
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        let rg = self.requires(x);
        let id = self.push(c, r, out, rg);
        self.record_op(Op::Transpose { x, out: id });
        id
    }

    /// Temporal conv over rows: x is [N, c_in], w is [k*c_in, c_out], zero
    /// padding keeps the output N rows. The kernel must be odd.
    pub fn conv1d_same(&mut self, x: TensorId, w: TensorId, k: usize) -> Result<TensorId> {
        if k % 2 == 0 {
            return Err(Error::invalid(format!("conv1d_same: kernel size must be odd, got {k}")));
        }
        let (n, cin) = self.dims(x);
        let (wr, cout) = self.dims(w);
        if wr != k * cin {
            return Err(Error::Shape { op: "conv1d_same", lhs: vec![n, cin], rhs: vec![wr, cout] });
        }
        let half = (k - 1) / 2;
        let xv = self.values(x);
        let wv = self.values(w);
        let mut out = vec![0.0f32; n * cout];
        if k * cin > 1024 {
            for t in 0..n {
                for o in 0..cout {
                    let mut s = 0.0f64;
                    for d in 0..k {
                        let src = t as isize + d as isize - half as isize;
                        if src < 0 || src >= n as isize {
                            continue;
                        }
                        let src = src as usize;
                        for c in 0..cin {
                            s += xv[src * cin + c] as f64 * wv[(d * cin + c) * cout + o] as f64;
                        }
                    }
                    out[t * cout + o] = s as f32;
                }
            }
        } else {
            for t in 0..n {
                for d in 0..k {
                    let src = t as isize + d as isize - half as isize;
                    if src < 0 || src >= n as isize {
                        continue;
                    }
                    let src = src as usize;
                    for c in 0..cin {
                        let xval = xv[src * cin + c];
                        if xval != 0.0 {
                            let wrow = &wv[(d * cin + c) * cout..(d * cin + c + 1) * cout];
                            let orow = &mut out[t * cout..(t + 1) * cout];
                            for o in 0..cout {
                                orow[o] += xval * wrow[o];
                            }
                        }
                    }
                }
            }
        }
        let rg = self.requires(x) || self.requires(w);
        let id = self.push(n, cout, out, rg);
        self.record_op(Op::Conv1dSame { x, w, out: id, k });
        Ok(id)
    }

    /// Per-channel normalization over all rows. Train mode normalizes with
    /// this graph's batch statistics and folds them into the store's running
    /// stats; eval mode reads the running stats.
    pub fn batch_norm(&mut self, store: &mut ParamStore, x: TensorId, gamma: TensorId, beta: TensorId, key: &str) -> Result<TensorId> {
        let (rows, cols) = self.dims(x);
        let (gr, gc) = self.dims(gamma);
        if gr != 1 || gc != cols {
            return Err(Error::Shape { op: "batch_norm(gamma)", lhs: vec![rows, cols], rhs: vec![gr, gc] });
        }
        let (br, bc) = self.dims(beta);
        if br != 1 || bc != cols {
            return Err(Error::Shape { op: "batch_norm(beta)", lhs: vec![rows, cols], rhs: vec![br, bc] });
        }
        store.ensure_bn_stats(key, cols)?;
        let mean_key = format!("{BN_MEAN_PREFIX}{key}");
        let var_key = format!("{BN_VAR_PREFIX}{key}");

        let (mean, var) = if self.train {
            let xv = self.values(x);
            let mut mean = vec![0.0f32; cols];
            let mut var = vec![0.0f32; cols];
            let use_f64 = rows > 1024;
            for c in 0..cols {
                if use_f64 {
                    let mut s = 0.0f64;
                    for r in 0..rows {
                        s += xv[r * cols + c] as f64;
                    }
                    mean[c] = (s / rows as f64) as f32;
                    let mut v = 0.0f64;
                    for r in 0..rows {
                        let d = xv[r * cols + c] as f64 - mean[c] as f64;
                        v += d * d;
                    }
                    var[c] = (v / rows as f64) as f32;
                } else {
                    let mut s = 0.0f32;
                    for r in 0..rows {
                        s += xv[r * cols + c];
                    }
                    mean[c] = s / rows as f32;
                    let mut v = 0.0f32;
                    for r in 0..rows {
                        let d = xv[r * cols + c] - mean[c];
                        v += d * d;
                    }
                    var[c] = v / rows as f32;
                }
            }
            // Fold into running stats; variance stored unbiased when possible.
            let rm = store.get_mut(&mean_key)?;
            for c in 0..cols {
                rm.values[c] = BN_MOMENTUM * rm.values[c] + (1.0 - BN_MOMENTUM) * mean[c];
            }
            let unbias = if rows > 1 { rows as f32 / (rows as f32 - 1.0) } else { 1.0 };
            let rv = store.get_mut(&var_key)?;
            for c in 0..cols {
                rv.values[c] = BN_MOMENTUM * rv.values[c] + (1.0 - BN_MOMENTUM) * var[c] * unbias;
            }
            (mean, var)
        } else {
            let mean = store.get(&mean_key)?.values.clone();
            let var = store.get(&var_key)?.values.clone();
            (mean, var)
        };

        let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let xv = self.values(x);
        let gv = self.values(gamma);
        let bv = self.values(beta);
        let mut out = vec![0.0f32; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                let xhat = (xv[r * cols + c] - mean[c]) * inv_std[c];
                out[r * cols + c] = gv[c] * xhat + bv[c];
            }
        }
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        let id = self.push(rows, cols, out, rg);
        self.record_op(Op::BatchNorm { x, gamma, beta, out: id, mean, inv_std });
        Ok(id)
    }

    fn unary(&mut self, x: TensorId, f: impl Fn(f32) -> f32, make: impl Fn(TensorId, TensorId) -> Op) -> TensorId {
        let (r, c) = self.dims(x);
        let out: Vec<f32> = self.values(x).iter().map(|&v| f(v)).collect();
        let rg = self.requires(x);
        let id = self.push(r, c, out, rg);
        self.record_op(make(x, id));
        id
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), |x, out| Op::Sigmoid { x, out })
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        self.unary(x, f32::tanh, |x, out| Op::Tanh { x, out })
    }

    /// Elementwise max(x, 0).
    pub fn relu(&mut self, x: TensorId) -> TensorId {
        self.unary(x, |v| v.max(0.0), |x, out| Op::Relu { x, out })
    }

    pub fn exp(&mut self, x: TensorId) -> TensorId {
        self.unary(x, f32::exp, |x, out| Op::Exp { x, out })
    }

    pub fn log(&mut self, x: TensorId) -> Result<TensorId> {
        if self.values(x).iter().any(|&v| v <= 0.0) {
            return Err(Error::invalid("log: input must be strictly positive".to_string()));
        }
        Ok(self.unary(x, f32::ln, |x, out| Op::Log { x, out }))
    }

    pub fn sqrt(&mut self, x: TensorId) -> Result<TensorId> {
        if self.values(x).iter().any(|&v| v < 0.0) {
            return Err(Error::invalid("sqrt: input must be nonnegative".to_string()));
        }
        Ok(self.unary(x, f32::sqrt, |x, out| Op::Sqrt { x, out }))
    }

    fn binary(&mut self, op_name: &'static str, a: TensorId, b: TensorId, f: impl Fn(f32, f32) -> f32, make: impl Fn(TensorId, TensorId, TensorId) -> Op) -> Result<TensorId> {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        if (ra, ca) != (rb, cb) {
            return Err(Error::Shape { op: op_name, lhs: vec![ra, ca], rhs: vec![rb, cb] });
        }
        let out: Vec<f32> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.requires(a) || self.requires(b);
        let id = self.push(ra, ca, out, rg);
        self.record_op(make(a, b, id));
        Ok(id)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("add", a, b, |x, y| x + y, |a, b, out| Op::Add { a, b, out })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("sub", a, b, |x, y| x - y, |a, b, out| Op::Sub { a, b, out })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("mul", a, b, |x, y| x * y, |a, b, out| Op::Mul { a, b, out })
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.values(b).iter().any(|&v| v == 0.0) {
            return Err(Error::invalid("div: divisor contains zero".to_string()));
        }
        self.binary("div", a, b, |x, y| x / y, |a, b, out| Op::Div { a, b, out })
    }

    pub fn add_scalar(&mut self, x: TensorId, c: f32) -> TensorId {
        self.unary(x, |v| v + c, |x, out| Op::AddScalar { x, out })
    }

    pub fn mul_scalar(&mut self, x: TensorId, c: f32) -> TensorId {
        self.unary(x, |v| v * c, |x, out| Op::MulScalar { x, c, out })
    }

    /// Stable softmax along each row.
    pub fn softmax_rows(&mut self, x: TensorId) -> TensorId {
        let (r, c) = self.dims(x);
        let xv = self.values(x);
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f32;
            for j in 0..c {
                let e = (row[j] - mx).exp();
                out[i * c + j] = e;
                z += e;
            }
            for j in 0..c {
                out[i * c + j] /= z;
            }
        }
        let rg = self.requires(x);
        let id = self.push(r, c, out, rg);
        self.record_op(Op::SoftmaxRows { x, out: id });
        id
    }

    pub fn sum_axis0(&mut self, x: TensorId) -> TensorId {
        self.reduce_axis0(x, false)
    }

    pub fn mean_axis0(&mut self, x: TensorId) -> TensorId {
        self.reduce_axis0(x, true)
    }

    fn reduce_axis0(&mut self, x: TensorId, mean: bool) -> TensorId {
        let (r, c) = self.dims(x);
        let xv = self.values(x);
        let mut out = vec![0.0f32; c];
        let use_f64 = r > 1024;
        for j in 0..c {
            if use_f64 {
                let mut s = 0.0f64;
                for i in 0..r {
                    s += xv[i * c + j] as f64;
                }
                out[j] = s as f32;
            } else {
                let mut s = 0.0f32;
                for i in 0..r {
                    s += xv[i * c + j];
                }
                out[j] = s;
            }
            if mean {
                out[j] /= r as f32;
            }
        }
        let rg = self.requires(x);
        let id = self.push(1, c, out, rg);
        self.record_op(if mean { Op::MeanAxis0 { x, out: id } } else { Op::SumAxis0 { x, out: id } });
        id
    }

    pub fn sum_axis1(&mut self, x: TensorId) -> TensorId {
        self.reduce_axis1(x, false)
    }

    pub fn mean_axis1(&mut self, x: TensorId) -> TensorId {
        self.reduce_axis1(x, true)
    }

    fn reduce_axis1(&mut self, x: TensorId, mean: bool) -> TensorId {
        let (r, c) = self.dims(x);
        let xv = self.values(x);
        let mut out = vec![0.0f32; r];
        for i in 0..r {
            out[i] = acc_sum(&xv[i * c..(i + 1) * c]);
            if mean {
                out[i] /= c as f32;
            }
        }
        let rg = self.requires(x);
        let id = self.push(r, 1, out, rg);
        self.record_op(if mean { Op::MeanAxis1 { x, out: id } } else { Op::SumAxis1 { x, out: id } });
        id
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let total = acc_sum(self.values(x));
        let rg = self.requires(x);
        let id = self.push(1, 1, vec![total], rg);
        self.record_op(Op::SumAll { x, out: id });
        id
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.values(x).len();
        let total = acc_sum(self.values(x)) / n as f32;
        let rg = self.requires(x);
        let id = self.push(1, 1, vec![total], rg);
        self.record_op(Op::MeanAll { x, out: id });
        id
    }

    /// Top-k values of each column, sorted descending; value ties prefer
    /// the smaller row index.
    pub fn topk_cols(&mut self, x: TensorId, k: usize) -> Result<TensorId> {
        let (r, c) = self.dims(x);
        if k == 0 || k > r {
            return Err(Error::invalid(format!("topk_cols: k={k} out of range for {r} rows")));
        }
        let xv = self.values(x);
        let mut out = vec![0.0f32; k * c];
        let mut picked = vec![0usize; k * c];
        let mut order: Vec<usize> = Vec::with_capacity(r);
        for j in 0..c {
            order.clear();
            order.extend(0..r);
            order.sort_by(|&a, &b| {
                xv[b * c + j].total_cmp(&xv[a * c + j]).then(a.cmp(&b))
            });
            for rank in 0..k {
                out[rank * c + j] = xv[order[rank] * c + j];
                picked[rank * c + j] = order[rank];
            }
        }
        let rg = self.requires(x);
        let id = self.push(k, c, out, rg);
        self.record_op(Op::TopKCols { x, out: id, picked });
        Ok(id)
    }

    pub fn concat_rows(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(Error::invalid("concat_rows: no inputs".to_string()));
        }
        let (_, cols) = self.dims(xs[0]);
        let mut rows = 0;
        for &x in xs {
            let (r, c) = self.dims(x);
            if c != cols {
                return Err(Error::Shape { op: "concat_rows", lhs: vec![rows, cols], rhs: vec![r, c] });
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &x in xs {
            out.extend_from_slice(self.values(x));
        }
        let rg = xs.iter().any(|&x| self.requires(x));
        let id = self.push(rows, cols, out, rg);
        self.record_op(Op::ConcatRows { xs: xs.to_vec(), out: id });
        Ok(id)
    }

    pub fn slice_rows(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (r, c) = self.dims(x);
        if len == 0 || start + len > r {
            return Err(Error::invalid(format!(
                "slice_rows: range {start}..{} out of bounds for {r} rows",
                start + len
            )));
        }
        let out = self.values(x)[start * c..(start + len) * c].to_vec();
        let rg = self.requires(x);
        let id = self.push(len, c, out, rg);
        self.record_op(Op::SliceRows { x, out: id, start });
        Ok(id)
    }

    /// Select rows by index (repeats allowed); gradients scatter-add back.
    pub fn gather_rows(&mut self, x: TensorId, idx: &[usize]) -> Result<TensorId> {
        let (r, c) = self.dims(x);
        if idx.is_empty() {
            return Err(Error::invalid("gather_rows: empty index list".to_string()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::invalid(format!("gather_rows: index {bad} out of bounds for {r} rows")));
        }
        let xv = self.values(x);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let rg = self.requires(x);
        let id = self.push(idx.len(), c, out, rg);
        self.record_op(Op::GatherRows { x, out: id, idx: idx.to_vec() });
        Ok(id)
    }

    /// Repeat a 1xC row tensor into RxC.
    pub fn expand_rows(&mut self, x: TensorId, rows: usize) -> Result<TensorId> {
        let (r, c) = self.dims(x);
        if r != 1 {
            return Err(Error::Shape { op: "expand_rows", lhs: vec![r, c], rhs: vec![1, c] });
        }
        let mut out = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            out.extend_from_slice(self.values(x));
        }
        let rg = self.requires(x);
        let id = self.push(rows, c, out, rg);
        self.record_op(Op::ExpandRows { x, out: id });
        Ok(id)
    }

    /// Repeat an Rx1 column tensor into RxC.
    pub fn expand_cols(&mut self, x: TensorId, cols: usize) -> Result<TensorId> {
        let (r, c) = self.dims(x);
        if c != 1 {
            return Err(Error::Shape { op: "expand_cols", lhs: vec![r, c], rhs: vec![r, 1] });
        }
        let xv = self.values(x);
        let mut out = Vec::with_capacity(r * cols);
        for i in 0..r {
            for _ in 0..cols {
                out.push(xv[i]);
            }
        }
        let rg = self.requires(x);
        let id = self.push(r, cols, out, rg);
        self.record_op(Op::ExpandCols { x, out: id });
        Ok(id)
    }

    // ── composed helpers ─────────────────────────────────────────────

    /// Elementwise min via `a - relu(a - b)`.
    pub fn emin(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let d = self.sub(a, b)?;
        let r = self.relu(d);
        self.sub(a, r)
    }

    /// Elementwise max via `b + relu(a - b)`.
    pub fn emax(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let d = self.sub(a, b)?;
        let r = self.relu(d);
        self.add(b, r)
    }

    /// Clamp into [lo, hi] with pass-through gradient inside the range.
    pub fn clamp(&mut self, x: TensorId, lo: f32, hi: f32) -> Result<TensorId> {
        let a = self.add_scalar(x, -lo);
        let a = self.relu(a);
        let b = self.add_scalar(x, -hi);
        let b = self.relu(b);
        let d = self.sub(a, b)?;
        Ok(self.add_scalar(d, lo))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Each call adds a fresh chain-rule
    /// sweep into every tracked node's `grad`, so repeated calls accumulate.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if !self.record {
            return Err(Error::invalid("backward: graph was built without recording".to_string()));
        }
        {
            let t = &self.nodes[loss.0].t;
            if t.numel() != 1 {
                return Err(Error::invalid(format!("backward: loss must be scalar, got shape {:?}", t.shape)));
            }
        }
        let mut local: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        local[loss.0] = Some(vec![1.0]);

        for idx in (0..self.ops.len()).rev() {
            self.backward_op(idx, &mut local);
        }

        for (i, g) in local.into_iter().enumerate() {
            if let Some(g) = g {
                let t = &mut self.nodes[i].t;
                if !t.requires_grad {
                    continue;
                }
                match &mut t.grad {
                    Some(existing) => {
                        for (e, v) in existing.iter_mut().zip(&g) {
                            *e += v;
                        }
                    }
                    None => t.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn accum(&self, local: &mut [Option<Vec<f32>>], id: TensorId, add: impl FnOnce(&mut [f32])) {
        if !self.requires(id) {
            return;
        }
        let slot = &mut local[id.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[id.0].t.numel()]);
        }
        add(slot.as_mut().unwrap());
    }

    fn backward_op(&self, op_idx: usize, local: &mut [Option<Vec<f32>>]) {
        // Ops are immutable once recorded; split borrows by cloning the
        // light metadata and reading node values through `self`.
        let op = &self.ops[op_idx];
        macro_rules! out_grad {
            ($out:expr) => {
                match &local[$out.0] {
                    Some(g) => g.clone(),
                    None => return,
                }
            };
        }
        match op {
            Op::MatMul { a, b, out } => {
                let (a, b, out) = (*a, *b, *out);
                let g = out_grad!(out);
                let (m, k) = self.dims(a);
                let (_, n) = self.dims(b);
                if self.requires(a) {
                    let bv = self.values(b);
                    let mut da = vec![0.0f32; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            da[i * k + p] = acc_dot(&g[i * n..(i + 1) * n], &bv[p * n..(p + 1) * n]);
                        }
                    }
                    self.accum(local, a, |dst| {
                        for (d, v) in dst.iter_mut().zip(&da) {
                            *d += v;
                        }
                    });
                }
                if self.requires(b) {
                    let av = self.values(a);
                    let mut db = vec![0.0f32; k * n];
                    for p in 0..k {
                        for i in 0..m {
                            let x = av[i * k + p];
                            if x != 0.0 {
                                let grow = &g[i * n..(i + 1) * n];
                                let drow = &mut db[p * n..(p + 1) * n];
                                for j in 0..n {
                                    drow[j] += x * grow[j];
                                }
                            }
                        }
                    }
                    self.accum(local, b, |dst| {
                        for (d, v) in dst.iter_mut().zip(&db) {
                            *d += v;
                        }
                    });
                }
            }
            Op::Transpose { x, out } => {
                let (x, out) = (*x, *out);
                let g = out_grad!(out);
                let (r, c) = self.dims(x);
                self.accum(local, x, |dst| {
                    for i in 0..r {
                        for j in 0..c {
                            dst[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Conv1dSame { x, w, out, k } => {
                let (x, w, out, k) = (*x, *w, *out, *k);
                let g = out_grad!(out);
                let (n, cin) = self.dims(x);
                let (_, cout) = self.dims(w);
                let half = (k - 1) / 2;
                if self.requires(x) {
                    let wv = self.values(w);
                    let mut dx = vec![0.0f32; n * cin];
                    for t in 0..n {
                        for d in 0..k {
                            let src = t as isize + d as isize - half as isize;
                            if src < 0 || src >= n as isize {
                                continue;
                            }
                            let src = src as usize;
                            for c in 0..cin {
                                dx[src * cin + c] += acc_dot(
                                    &g[t * cout..(t + 1) * cout],
                                    &wv[(d * cin + c) * cout..(d * cin + c + 1) * cout],
                                );
                            }
                        }
                    }
                    self.accum(local, x, |dst| {
                        for (d, v) in dst.iter_mut().zip(&dx) {
                            *d += v;
                        }
                    });
                }
                if self.requires(w) {
                    let xv = self.values(x);
                    let mut dw = vec![0.0f32; k * cin * cout];
                    for t in 0..n {
                        for d in 0..k {
                            let src = t as isize + d as isize - half as isize;
                            if src < 0 || src >= n as isize {
                                continue;
                            }
                            let src = src as usize;
                            for c in 0..cin {
                                let xval = xv[src * cin + c];
                                if xval != 0.0 {
                                    let grow = &g[t * cout..(t + 1) * cout];
                                    let drow = &mut dw[(d * cin + c) * cout..(d * cin + c + 1) * cout];
                                    for o in 0..cout {
                                        drow[o] += xval * grow[o];
                                    }
                                }
                            }
                        }
                    }
                    self.accum(local, w, |dst| {
                        for (d, v) in dst.iter_mut().zip(&dw) {
                            *d += v;
                        }
                    });
                }
            }
            Op::BatchNorm { x, gamma, beta, out, mean, inv_std } => {
                let (x, gamma, beta, out) = (*x, *gamma, *beta, *out);
                let mean = mean.clone();
                let inv_std = inv_std.clone();
                let g = out_grad!(out);
                let (rows, cols) = self.dims(x);
                let xv = self.values(x).to_vec();
                let gv = self.values(gamma).to_vec();
                let xhat = |r: usize, c: usize| (xv[r * cols + c] - mean[c]) * inv_std[c];

                if self.requires(beta) {
                    self.accum(local, beta, |dst| {
                        for c in 0..cols {
                            let mut s = 0.0f32;
                            for r in 0..rows {
                                s += g[r * cols + c];
                            }
                            dst[c] += s;
                        }
                    });
                }
                if self.requires(gamma) {
                    let mut dg = vec![0.0f32; cols];
                    for c in 0..cols {
                        for r in 0..rows {
                            dg[c] += g[r * cols + c] * xhat(r, c);
                        }
                    }
                    self.accum(local, gamma, |dst| {
                        for (d, v) in dst.iter_mut().zip(&dg) {
                            *d += v;
                        }
                    });
                }
                if self.requires(x) {
                    let mut dx = vec![0.0f32; rows * cols];
                    if self.train {
                        for c in 0..cols {
                            let mut sum_g = 0.0f32;
                            let mut sum_gx = 0.0f32;
                            for r in 0..rows {
                                sum_g += g[r * cols + c];
                                sum_gx += g[r * cols + c] * xhat(r, c);
                            }
                            let mg = sum_g / rows as f32;
                            let mgx = sum_gx / rows as f32;
                            for r in 0..rows {
                                dx[r * cols + c] =
                                    gv[c] * inv_std[c] * (g[r * cols + c] - mg - xhat(r, c) * mgx);
                            }
                        }
                    } else {
                        for c in 0..cols {
                            for r in 0..rows {
                                dx[r * cols + c] = g[r * cols + c] * gv[c] * inv_std[c];
                            }
                        }
                    }
                    self.accum(local, x, |dst| {
                        for (d, v) in dst.iter_mut().zip(&dx) {
                            *d += v;
                        }
                    });
                }
            }
            Op::Sigmoid { x, out } => {
                let (x, out) = (*x, *out);
                let g = out_grad!(out);
                let y = self.values(out).to_vec();
                self.accum(local, x, |dst| {
                    for i in 0..dst.len() {
                        dst[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Tanh { x, out } => {
                let (x, out) = (*x, *out);
                let g = out_grad!(out);
                let y = self.values(out).to_vec();
                self.accum(local, x, |dst| {
                    for i in 0..dst.len() {
                        dst[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Relu { x, out } => {
                let (x, out) = (*x, *out);
                let g = out_grad!(out);
                let xv = self.values(x).to_vec();
                self.accum(local, x, |dst| {
                    for i in 0..dst.len() {
                        if xv[i] > 0.0 {
                            dst[i] += g[i];
                        }
                    }
                });
            }
            Op::Exp { x, out } => {
                let (x, out) = (*x, *out);
                let g = out_grad!(out);
                let y = self.values(out).to_vec();
                self.accum(local, x, |dst| {
                    for i in 0..dst.len() {
                        dst[i] += g[i] * y[i];
                    }
                });
            }
            Op::Log { x, out } => {
                let (x, out) = (*x, *out);
                let g = out_grad!(out);
                let xv = self.values(x).to_vec();
                self.accum(local, x, |dst| {
                    for i in 0..dst.len() {
                        dst[i] += g[i] / xv[i];
                    }
                });
            }
            Op::Sqrt { x, out } => {
                let (x, out) = (*x, *out);
                let g = out_grad!(out);
                let y = self.values(out).to_vec();
                self.accum(local, x, |dst| {
                    for i in 0..dst.len() {
                        dst[i] += g[i] * 0.5 / y[i].max(1e-12);
                    }
                });
            }
            Op::Add { a, b, out } => {
                let (a, b, out) = (*a, *b, *out);
                let g = out_grad!(out);
                self.accum(local, a, |dst| {
                    for (d, v) in dst.iter_mut().zip(&g) {
                        *d += v;
                    }
                });
                self.accum(local, b, |dst| {
                    for (d, v) in dst.iter_mut().zip(&g) {
                        *d += v;
                    }
                });
            }
            Op::Sub { a, b, out } => {
                let (a, b, out) = (*a, *b, *out);
                let g = out_grad!(out);
                self.accum(local, a, |dst| {
                    for (d, v) in dst.iter_mut().zip(&g) {
                        *d += v;
                    }
                });
                self.accum(local, b, |dst| {
                    for (d, v) in dst.iter_mut().zip(&g) {
                        *d -= v;
                    }
                });
            }
            Op::Mul { a, b, out } => {
                let (a, b, out) = (*a, *b, *out);
                let g = out_grad!(out);
                let av = self.values(a).to_vec();
                let bv = self.values(b).to_vec();
                self.accum(local, a, |dst| {
                    for i in 0..dst.len() {
                        dst[i] += g[i] * bv[i];
                    }
                });
                self.accum(local, b, |dst| {
                    for i in 0..dst.len() {
                        dst[i] += g[i] * av[i];
                    }
                });
            }
            Op::Div { a, b, out } => {
                let (a, b, out) = (*a, *b, *out);
                let g = out_grad!(out);
                let bv = self.values(b).to_vec();
                let y = self.values(out).to_vec();
                self.accum(local, a, |dst| {
                    for i in 0..dst.len() {
                        dst[i] += g[i] / bv[i];
                    }
                });
                self.accum(local, b, |dst| {
                    for i in 0..dst.len() {
                        dst[i] -= g[i] * y[i] / bv[i];
                    }
                });
            }
            Op::AddScalar { x, out } => {
                let (x, out) = (*x, *out);
                let g = out_grad!(out);
                self.accum(local, x, |dst| {
                    for (d, v) in dst.iter_mut().zip(&g) {
                        *d += v;
                    }
                });
            }
            Op::MulScalar { x, c, out } => {
                let (x, c, out) = (*x, *c, *out);
                let g = out_grad!(out);
                self.accum(local, x, |dst| {
                    for (d, v) in dst.iter_mut().zip(&g) {
                        *d += c * v;
                    }
                });
            }
            Op::SoftmaxRows { x, out } => {
                let (x, out) = (*x, *out);
                let g = out_grad!(out);
                let y = self.values(out).to_vec();
                let (r, c) = self.dims(out);
                self.accum(local, x, |dst| {
                    for i in 0..r {
                        let mut dot = 0.0f32;
                        for j in 0..c {
                            dot += g[i * c + j] * y[i * c + j];
                        }
                        for j in 0..c {
                            dst[i * c + j] += y[i * c + j] * (g[i * c + j] - dot);
                        }
                    }
                });
            }
            Op::SumAxis0 { x, out } | Op::MeanAxis0 { x, out } => {
                let mean = matches!(op, Op::MeanAxis0 { .. });
                let (x, out) = (*x, *out);
                let g = out_grad!(out);
                let (r, c) = self.dims(x);
                let scale = if mean { 1.0 / r as f32 } else { 1.0 };
                self.accum(local, x, |dst| {
                    for i in 0..r {
                        for j in 0..c {
                            dst[i * c + j] += g[j] * scale;
                        }
                    }
                });
            }
            Op::SumAxis1 { x, out } | Op::MeanAxis1 { x, out } => {
                let mean = matches!(op, Op::MeanAxis1 { .. });
                let (x, out) = (*x, *out);
                let g = out_grad!(out);
                let (r, c) = self.dims(x);
                let scale = if mean { 1.0 / c as f32 } else { 1.0 };
                self.accum(local, x, |dst| {
                    for i in 0..r {
                        for j in 0..c {
                            dst[i * c + j] += g[i] * scale;
                        }
                    }
                });
            }
            Op::SumAll { x, out } | Op::MeanAll { x, out } => {
                let mean = matches!(op, Op::MeanAll { .. });
                let (x, out) = (*x, *out);
                let g = out_grad!(out);
                let n = self.nodes[x.0].t.numel();
                let scale = if mean { 1.0 / n as f32 } else { 1.0 };
                self.accum(local, x, |dst| {
                    for d in dst.iter_mut() {
                        *d += g[0] * scale;
                    }
                });
            }
            Op::TopKCols { x, out, picked } => {
                let (x, out) = (*x, *out);
                let picked = picked.clone();
                let g = out_grad!(out);
                let (k, c) = self.dims(out);
                let (_, xc) = self.dims(x);
                self.accum(local, x, |dst| {
                    for rank in 0..k {
                        for j in 0..c {
                            dst[picked[rank * c + j] * xc + j] += g[rank * c + j];
                        }
                    }
                });
            }
            Op::ConcatRows { xs, out } => {
                let xs = xs.clone();
                let out = *out;
                let g = out_grad!(out);
                let (_, c) = self.dims(out);
                let mut offset = 0;
                for x in xs {
                    let (r, _) = self.dims(x);
                    let seg = g[offset * c..(offset + r) * c].to_vec();
                    self.accum(local, x, |dst| {
                        for (d, v) in dst.iter_mut().zip(&seg) {
                            *d += v;
                        }
                    });
                    offset += r;
                }
            }
            Op::SliceRows { x, out, start } => {
                let (x, out, start) = (*x, *out, *start);
                let g = out_grad!(out);
                let (len, c) = self.dims(out);
                self.accum(local, x, |dst| {
                    for i in 0..len {
                        for j in 0..c {
                            dst[(start + i) * c + j] += g[i * c + j];
                        }
                    }
                });
            }
            Op::GatherRows { x, out, idx } => {
                let (x, out) = (*x, *out);
                let idx = idx.clone();
                let g = out_grad!(out);
                let (_, c) = self.dims(out);
                self.accum(local, x, |dst| {
                    for (i, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            dst[src * c + j] += g[i * c + j];
                        }
                    }
                });
            }
            Op::ExpandRows { x, out } => {
                let (x, out) = (*x, *out);
                let g = out_grad!(out);
                let (r, c) = self.dims(out);
                self.accum(local, x, |dst| {
                    for i in 0..r {
                        for j in 0..c {
                            dst[j] += g[i * c + j];
                        }
                    }
                });
            }
            Op::ExpandCols { x, out } => {
                let (x, out) = (*x, *out);
                let g = out_grad!(out);
                let (r, c) = self.dims(out);
                self.accum(local, x, |dst| {
                    for i in 0..r {
                        for j in 0..c {
                            dst[i] += g[i * c + j];
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f32, b: f32, tol: f32) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::training();
        let x = g.constant_matrix(1, 3, vec![0.0, 0.0, 0.0]).unwrap();
        let y = g.softmax_rows(x);
        for &v in g.values(y) {
            assert!(close(v, 1.0 / 3.0, 1e-6));
        }
    }

    #[test]
    fn conv1d_preserves_temporal_length() {
        let mut g = Graph::training();
        let x = g.constant_matrix(7, 2, (0..14).map(|v| v as f32).collect()).unwrap();
        let w = g.constant_matrix(5 * 2, 3, vec![0.1; 30]).unwrap();
        let y = g.conv1d_same(x, w, 5).unwrap();
        assert_eq!(g.dims(y), (7, 3));
    }

    #[test]
    fn conv1d_rejects_even_kernel() {
        let mut g = Graph::training();
        let x = g.constant_matrix(4, 1, vec![1.0; 4]).unwrap();
        let w = g.constant_matrix(2, 1, vec![1.0; 2]).unwrap();
        assert!(g.conv1d_same(x, w, 2).is_err());
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut g = Graph::training();
        let x = g.scalar_constant(0.0);
        let y = g.sigmoid(x);
        assert!(close(g.values(y)[0], 0.5, 1e-7));
    }

    #[test]
    fn batchnorm_eval_centers_running_mean_to_zero() {
        let mut store = ParamStore::new();
        store.create("bn.gamma", Tensor::row(vec![1.0])).unwrap();
        store.create("bn.beta", Tensor::row(vec![0.0])).unwrap();
        store.ensure_bn_stats("bn", 1).unwrap();
        store.get_mut(&format!("{BN_MEAN_PREFIX}bn")).unwrap().values[0] = 3.5;
        store.get_mut(&format!("{BN_VAR_PREFIX}bn")).unwrap().values[0] = 1.0;

        let mut g = Graph::inference();
        let x = g.constant_matrix(4, 1, vec![3.5; 4]).unwrap();
        let gamma = g.param(&store, "bn.gamma").unwrap();
        let beta = g.param(&store, "bn.beta").unwrap();
        let y = g.batch_norm(&mut store, x, gamma, beta, "bn").unwrap();
        for &v in g.values(y) {
            assert!(close(v, 0.0, 1e-6));
        }
    }

    #[test]
    fn backward_of_squared_sum_doubles_values() {
        let mut store = ParamStore::new();
        store.create("w", Tensor::row(vec![1.0, 2.0])).unwrap();
        let mut g = Graph::training();
        let w = g.param(&store, "w").unwrap();
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates_exactly() {
        let mut store = ParamStore::new();
        store.create("w", Tensor::row(vec![1.0, 2.0])).unwrap();
        let mut g = Graph::training();
        let w = g.param(&store, "w").unwrap();
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[4.0, 8.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut store = ParamStore::new();
        store.create("w", Tensor::row(vec![1.0, 2.0])).unwrap();
        let mut g = Graph::training();
        let w = g.param(&store, "w").unwrap();
        let y = g.mul(w, w).unwrap();
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn shape_mismatch_names_the_operation() {
        let mut g = Graph::training();
        let a = g.constant_matrix(2, 3, vec![0.0; 6]).unwrap();
        let b = g.constant_matrix(2, 2, vec![0.0; 4]).unwrap();
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        assert!(err.contains('3') && err.contains('2'), "{err}");
    }

    #[test]
    fn topk_selects_largest_with_low_index_ties() {
        let mut g = Graph::training();
        let x = g
            .constant_matrix(4, 2, vec![0.9, 0.5, 0.1, 0.5, 0.5, 0.7, 0.7, 0.2])
            .unwrap();
        let y = g.topk_cols(x, 2).unwrap();
        // col 0: 0.9 (row 0), then 0.7 (row 3); col 1: 0.7 (row 2), then tie 0.5 -> row 0.
        assert_eq!(g.values(y), &[0.9, 0.7, 0.7, 0.5]);
    }

    #[test]
    fn clamp_bounds_and_passes_through() {
        let mut g = Graph::training();
        let x = g.constant_matrix(1, 3, vec![-1.0, 0.5, 2.0]).unwrap();
        let y = g.clamp(x, 0.0, 1.0).unwrap();
        assert_eq!(g.values(y), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn emin_emax_match_pointwise() {
        let mut g = Graph::training();
        let a = g.constant_matrix(1, 3, vec![1.0, -2.0, 0.5]).unwrap();
        let b = g.constant_matrix(1, 3, vec![0.0, 3.0, 0.5]).unwrap();
        let lo = g.emin(a, b).unwrap();
        let hi = g.emax(a, b).unwrap();
        assert_eq!(g.values(lo), &[0.0, -2.0, 0.5]);
        assert_eq!(g.values(hi), &[1.0, 3.0, 0.5]);
    }
}
