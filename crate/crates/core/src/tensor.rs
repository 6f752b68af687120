//! Dense 2-D tensors, a reverse-mode tape, and SGD/Adam.
//!
//! Parameters live in a [`ParamStore`]. A [`Tape`] is built per forward pass;
//! it copies the parameter values it reads (embedding lookups copy only the
//! gathered rows) and [`Tape::backward`] accumulates gradients back into the
//! store. Optimizers consume and clear those gradients.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Rng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: [usize; 2],
        rhs: [usize; 2],
    },
    #[error("tensor of shape {shape:?} cannot hold {len} values")]
    Length { shape: [usize; 2], len: usize },
    #[error("embedding row {id} out of range for table with {rows} rows")]
    Lookup { id: usize, rows: usize },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot([usize; 2]),
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("{0}")]
    Contract(&'static str),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major matrix. Scalars are `[1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: [usize; 2],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 2]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape[0] * shape[1]],
        }
    }

    pub fn filled(shape: [usize; 2], v: f64) -> Self {
        Self {
            shape,
            data: vec![v; shape[0] * shape[1]],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: [1, 1],
            data: vec![v],
        }
    }

    pub fn from_vec(shape: [usize; 2], data: Vec<f64>) -> Result<Self> {
        if data.len() != shape[0] * shape[1] {
            return Err(TensorError::Length {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn column(data: Vec<f64>) -> Self {
        Self {
            shape: [data.len(), 1],
            data,
        }
    }

    pub fn uniform(shape: [usize; 2], lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let data = (0..shape[0] * shape[1]).map(|_| rng.gen_range(lo..hi)).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> [usize; 2] {
        self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.shape[1];
        &mut self.data[r * c..(r + 1) * c]
    }

    /// Value of a `[1, 1]` tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    grad: Tensor,
    has_grad: bool,
    /// Whether the optimizer's l2 term applies.
    pub decay: bool,
    pub requires_grad: bool,
}

impl Param {
    pub fn grad(&self) -> Option<&Tensor> {
        self.has_grad.then_some(&self.grad)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
            has_grad: false,
            decay,
            requires_grad: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.params[id.0].grad()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            if p.has_grad {
                p.grad.data.iter_mut().for_each(|g| *g = 0.0);
                p.has_grad = false;
            }
        }
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// All gradients concatenated in parameter order; unset grads read as zero.
    pub fn flat_grad(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for p in &self.params {
            if p.has_grad {
                out.extend_from_slice(&p.grad.data);
            } else {
                out.extend(std::iter::repeat_n(0.0, p.value.len()));
            }
        }
        out
    }

    fn mark_all_grads(&mut self) {
        for p in &mut self.params {
            if p.requires_grad {
                p.has_grad = true;
            }
        }
    }
}

/// Node handle on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics produced by a training-mode batchnorm.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Embedding { table: ParamId, ids: Vec<usize> },
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat(Var, Var),
    SliceCols(Var, usize),
    RowSum(Var),
    Sum(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
        train: bool,
    },
    Dropout { x: Var, mask: Vec<f64> },
    LogSoftmax { x: Var, mask: Vec<bool> },
    Pick { x: Var, index: usize },
}

#[derive(Debug)]
struct Record {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

pub const BN_EPS: f64 = 1e-5;

/// Wengert list of primitive applications.
#[derive(Debug, Default)]
pub struct Tape {
    records: Vec<Record>,
    no_grad: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that records values but never tracks gradients.
    pub fn no_grad() -> Self {
        Self {
            records: Vec::new(),
            no_grad: true,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.records[v.0].value
    }

    fn rg(&self, v: Var) -> bool {
        self.records[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.records.push(Record {
            op,
            value,
            requires_grad: requires_grad && !self.no_grad,
        });
        Var(self.records.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.param(id);
        self.push(Op::Param(id), p.value.clone(), p.requires_grad)
    }

    /// Rows `ids` of the table, shape `[ids.len(), cols]`.
    pub fn embedding(&mut self, store: &ParamStore, table: ParamId, ids: &[usize]) -> Result<Var> {
        let p = store.param(table);
        let rows = p.value.rows();
        let cols = p.value.cols();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::Lookup { id, rows });
            }
            data.extend_from_slice(p.value.row(id));
        }
        let value = Tensor {
            shape: [ids.len(), cols],
            data,
        };
        Ok(self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            value,
            p.requires_grad,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let [n, k] = x.shape;
        let [k2, m] = y.shape;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: x.shape,
                rhs: y.shape,
            });
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for (p, &xv) in x.row(i).iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                for (o, &yv) in orow.iter_mut().zip(y.row(p)) {
                    *o += xv * yv;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), Tensor { shape: [n, m], data: out }, rg))
    }

    /// Elementwise sum. `b` may also be a `[1, cols]` row or a `[1, 1]`
    /// scalar, broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let value = broadcast_zip(x, y, "add", |p, q| p + q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), value, rg))
    }

    /// Elementwise product with the same broadcasting as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let value = broadcast_zip(x, y, "mul", |p, q| p * q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), value, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let x = self.value(a);
        let value = map(x, |v| v * c);
        let rg = self.rg(a);
        self.push(Op::Scale(a, c), value, rg)
    }

    /// Column-wise concatenation `[a | b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.rows() != y.rows() {
            return Err(TensorError::Shape {
                op: "concat",
                lhs: x.shape,
                rhs: y.shape,
            });
        }
        let cols = x.cols() + y.cols();
        let mut data = Vec::with_capacity(x.rows() * cols);
        for r in 0..x.rows() {
            data.extend_from_slice(x.row(r));
            data.extend_from_slice(y.row(r));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Op::Concat(a, b),
            Tensor {
                shape: [x.rows(), cols],
                data,
            },
            rg,
        ))
    }

    /// Columns `start..start + width`.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let x = self.value(a);
        if start + width > x.cols() {
            return Err(TensorError::Shape {
                op: "slice_cols",
                lhs: x.shape,
                rhs: [start, width],
            });
        }
        let mut data = Vec::with_capacity(x.rows() * width);
        for r in 0..x.rows() {
            data.extend_from_slice(&x.row(r)[start..start + width]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Op::SliceCols(a, start),
            Tensor {
                shape: [x.rows(), width],
                data,
            },
            rg,
        ))
    }

    /// Sum over columns, shape `[rows, 1]`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = (0..x.rows()).map(|r| x.row(r).iter().sum()).collect();
        let value = Tensor {
            shape: [x.rows(), 1],
            data,
        };
        let rg = self.rg(a);
        self.push(Op::RowSum(a), value, rg)
    }

    /// Sum of all entries, shape `[1, 1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let rg = self.rg(a);
        self.push(Op::Sum(a), Tensor::scalar(s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = map(self.value(a), |v| v.max(0.0));
        let rg = self.rg(a);
        self.push(Op::Relu(a), value, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = map(self.value(a), sigmoid);
        let rg = self.rg(a);
        self.push(Op::Sigmoid(a), value, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = map(self.value(a), f64::tanh);
        let rg = self.rg(a);
        self.push(Op::Tanh(a), value, rg)
    }

    /// Per-column batch normalisation with affine `gamma`, `beta` (`[1, cols]`).
    ///
    /// `Mode::Train` normalises with the batch statistics and returns them;
    /// `Mode::Eval` uses `running` (mean, variance).
    pub fn batchnorm(
        &mut self,
        a: Var,
        gamma: Var,
        beta: Var,
        mode: Mode,
        running: (&[f64], &[f64]),
    ) -> Result<(Var, Option<BatchStats>)> {
        let x = self.value(a);
        let [n, c] = x.shape;
        for v in [gamma, beta] {
            if self.value(v).shape != [1, c] {
                return Err(TensorError::Shape {
                    op: "batchnorm",
                    lhs: x.shape,
                    rhs: self.value(v).shape,
                });
            }
        }
        if running.0.len() != c || running.1.len() != c {
            return Err(TensorError::Contract("batchnorm running stats width"));
        }
        let (mean, var_biased, stats) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for r in 0..n {
                    for (m, v) in mean.iter_mut().zip(x.row(r)) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                for r in 0..n {
                    for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                let biased: Vec<f64> = var.iter().map(|s| s / n as f64).collect();
                let unbiased = var
                    .iter()
                    .map(|s| if n > 1 { s / (n - 1) as f64 } else { 0.0 })
                    .collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, biased, Some(stats))
            }
            Mode::Eval => (running.0.to_vec(), running.1.to_vec(), None),
        };
        let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = Tensor::zeros([n, c]);
        let g = self.value(gamma).data.clone();
        let b = self.value(beta).data.clone();
        let mut out = Tensor::zeros([n, c]);
        for r in 0..n {
            for j in 0..c {
                let h = (x.get(r, j) - mean[j]) * inv_std[j];
                xhat.data[r * c + j] = h;
                out.data[r * c + j] = g[j] * h + b[j];
            }
        }
        let rg = self.rg(a) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            Op::BatchNorm {
                x: a,
                gamma,
                beta,
                xhat,
                inv_std,
                train: mode == Mode::Train,
            },
            out,
            rg,
        );
        Ok((v, stats))
    }

    /// Inverted dropout: in training mode each entry is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
    /// Identity in eval mode.
    pub fn dropout(&mut self, a: Var, rate: f64, mode: Mode, rng: &mut Rng) -> Var {
        if mode == Mode::Eval || rate <= 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let x = self.value(a);
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = x.data.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor {
            shape: x.shape,
            data,
        };
        let rg = self.rg(a);
        self.push(Op::Dropout { x: a, mask }, value, rg)
    }

    /// Row-wise log-softmax restricted to columns where `mask` is true;
    /// masked-out columns read `-inf`. `mask.len()` must equal `cols`.
    pub fn log_softmax_masked(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let x = self.value(a);
        if mask.len() != x.cols() || !mask.iter().any(|&m| m) {
            return Err(TensorError::Contract("log_softmax mask must match width and allow one column"));
        }
        let mut out = Tensor::filled(x.shape, f64::NEG_INFINITY);
        for r in 0..x.rows() {
            let row = x.row(r);
            let mx = row
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|(v, _)| (v - mx).exp())
                .sum::<f64>()
                .ln();
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                if mask[j] {
                    *o = row[j] - lse;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Op::LogSoftmax {
                x: a,
                mask: mask.to_vec(),
            },
            out,
            rg,
        ))
    }

    /// Entry `index` of a single-row tensor, as a scalar.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let x = self.value(a);
        if x.rows() != 1 || index >= x.cols() {
            return Err(TensorError::Contract("pick needs a single row and an in-range index"));
        }
        let v = x.data[index];
        let rg = self.rg(a);
        Ok(self.push(Op::Pick { x: a, index }, Tensor::scalar(v), rg))
    }

    /// Accumulates `d root / d p` into every parameter's gradient.
    pub fn backward(&self, root: Var, store: &mut ParamStore) -> Result<()> {
        let shape = self.value(root).shape;
        if shape != [1, 1] {
            return Err(TensorError::NonScalarRoot(shape));
        }
        self.backward_with_seed(root, Tensor::scalar(1.0), store)
    }

    /// Reverse sweep from `root` with upstream gradient `seed` (same shape as
    /// `root`). Parameters the root does not depend on receive a zero gradient.
    pub fn backward_with_seed(&self, root: Var, seed: Tensor, store: &mut ParamStore) -> Result<()> {
        if seed.shape != self.value(root).shape {
            return Err(TensorError::Shape {
                op: "backward seed",
                lhs: self.value(root).shape,
                rhs: seed.shape,
            });
        }
        store.mark_all_grads();
        if !self.rg(root) {
            return Ok(());
        }
        let mut adj: Vec<Option<Tensor>> = Vec::new();
        adj.resize_with(root.0 + 1, || None);
        adj[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let rec = &self.records[idx];
            if !rec.requires_grad {
                continue;
            }
            self.propagate(rec, &g, &mut adj, store);
        }
        Ok(())
    }

    fn propagate(&self, rec: &Record, g: &Tensor, adj: &mut [Option<Tensor>], store: &mut ParamStore) {
        let mut send = |v: Var, t: Tensor| {
            if !self.records[v.0].requires_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &rec.op {
            Op::Leaf => {}
            Op::Param(id) => store.params[id.0].grad.add_assign(g),
            Op::Embedding { table, ids } => {
                let grad = &mut store.params[table.0].grad;
                for (r, &id) in ids.iter().enumerate() {
                    for (a, b) in grad.row_mut(id).iter_mut().zip(g.row(r)) {
                        *a += b;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let [n, k] = x.shape;
                let m = y.cols();
                if self.rg(*a) {
                    // dA = G · Bᵀ
                    let mut ga = Tensor::zeros([n, k]);
                    for i in 0..n {
                        let gi = g.row(i);
                        for p in 0..k {
                            ga.data[i * k + p] = gi.iter().zip(y.row(p)).map(|(u, v)| u * v).sum();
                        }
                    }
                    send(*a, ga);
                }
                if self.rg(*b) {
                    // dB = Aᵀ · G
                    let mut gb = Tensor::zeros([k, m]);
                    for i in 0..n {
                        let gi = g.row(i);
                        for (p, &xv) in x.row(i).iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            for (o, &gv) in gb.row_mut(p).iter_mut().zip(gi) {
                                *o += xv * gv;
                            }
                        }
                    }
                    send(*b, gb);
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    send(*a, g.clone());
                }
                if self.rg(*b) {
                    send(*b, reduce_to(g, self.value(*b).shape));
                }
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let ga = broadcast_zip(g, y, "mul", |p, q| p * q).expect("forward checked");
                    send(*a, ga);
                }
                if self.rg(*b) {
                    let full = broadcast_zip(g, x, "mul", |p, q| p * q).expect("forward checked");
                    send(*b, reduce_to(&full, y.shape));
                }
            }
            Op::Scale(a, c) => send(*a, map(g, |v| v * c)),
            Op::Concat(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                let n = g.rows();
                let mut ga = Tensor::zeros([n, ca]);
                let mut gb = Tensor::zeros([n, cb]);
                for r in 0..n {
                    ga.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                    gb.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                }
                send(*a, ga);
                send(*b, gb);
            }
            Op::SliceCols(a, start) => {
                let x = self.value(*a);
                let mut ga = Tensor::zeros(x.shape);
                let w = g.cols();
                for r in 0..g.rows() {
                    ga.row_mut(r)[*start..start + w].copy_from_slice(g.row(r));
                }
                send(*a, ga);
            }
            Op::RowSum(a) => {
                let x = self.value(*a);
                let mut ga = Tensor::zeros(x.shape);
                for r in 0..x.rows() {
                    let gr = g.data[r];
                    ga.row_mut(r).iter_mut().for_each(|v| *v = gr);
                }
                send(*a, ga);
            }
            Op::Sum(a) => send(*a, Tensor::filled(self.value(*a).shape, g.item())),
            Op::Relu(a) => {
                let x = self.value(*a);
                let data = g
                    .data
                    .iter()
                    .zip(&x.data)
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                send(*a, Tensor { shape: x.shape, data });
            }
            Op::Sigmoid(a) => {
                let data = g
                    .data
                    .iter()
                    .zip(&rec.value.data)
                    .map(|(gv, s)| gv * s * (1.0 - s))
                    .collect();
                send(*a, Tensor { shape: g.shape, data });
            }
            Op::Tanh(a) => {
                let data = g
                    .data
                    .iter()
                    .zip(&rec.value.data)
                    .map(|(gv, t)| gv * (1.0 - t * t))
                    .collect();
                send(*a, Tensor { shape: g.shape, data });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let [n, c] = xhat.shape;
                let gam = &self.value(*gamma).data;
                if self.rg(*gamma) {
                    let mut gg = Tensor::zeros([1, c]);
                    for r in 0..n {
                        for j in 0..c {
                            gg.data[j] += g.get(r, j) * xhat.get(r, j);
                        }
                    }
                    send(*gamma, gg);
                }
                if self.rg(*beta) {
                    send(*beta, reduce_to(g, [1, c]));
                }
                if self.rg(*x) {
                    let mut gx = Tensor::zeros([n, c]);
                    if *train {
                        let nf = n as f64;
                        for j in 0..c {
                            let mut sum_g = 0.0;
                            let mut sum_gx = 0.0;
                            for r in 0..n {
                                sum_g += g.get(r, j);
                                sum_gx += g.get(r, j) * xhat.get(r, j);
                            }
                            for r in 0..n {
                                gx.data[r * c + j] = gam[j] * inv_std[j] / nf
                                    * (nf * g.get(r, j) - sum_g - xhat.get(r, j) * sum_gx);
                            }
                        }
                    } else {
                        for r in 0..n {
                            for j in 0..c {
                                gx.data[r * c + j] = g.get(r, j) * gam[j] * inv_std[j];
                            }
                        }
                    }
                    send(*x, gx);
                }
            }
            Op::Dropout { x, mask } => {
                let data = g.data.iter().zip(mask).map(|(a, b)| a * b).collect();
                send(*x, Tensor { shape: g.shape, data });
            }
            Op::LogSoftmax { x, mask } => {
                let mut gx = Tensor::zeros(g.shape);
                for r in 0..g.rows() {
                    let lp = rec.value.row(r);
                    let gr = g.row(r);
                    let total: f64 = gr.iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| v).sum();
                    for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                        if mask[j] {
                            *o = gr[j] - lp[j].exp() * total;
                        }
                    }
                }
                send(*x, gx);
            }
            Op::Pick { x, index } => {
                let mut gx = Tensor::zeros(self.value(*x).shape);
                gx.data[*index] = g.item();
                send(*x, gx);
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: x.shape,
        data: x.data.iter().map(|&v| f(v)).collect(),
    }
}

fn broadcast_zip(x: &Tensor, y: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let [n, c] = x.shape;
    let data = if y.shape == x.shape {
        x.data.iter().zip(&y.data).map(|(&a, &b)| f(a, b)).collect()
    } else if y.shape == [1, c] {
        x.data
            .chunks(c.max(1))
            .flat_map(|row| row.iter().zip(&y.data).map(|(&a, &b)| f(a, b)).collect::<Vec<_>>())
            .collect()
    } else if y.shape == [1, 1] {
        let b = y.data[0];
        x.data.iter().map(|&a| f(a, b)).collect()
    } else {
        return Err(TensorError::Shape {
            op,
            lhs: x.shape,
            rhs: y.shape,
        });
    };
    Ok(Tensor { shape: [n, c], data })
}

/// Sums `g` down to `shape` (the inverse of broadcasting).
fn reduce_to(g: &Tensor, shape: [usize; 2]) -> Tensor {
    if g.shape == shape {
        return g.clone();
    }
    if shape == [1, 1] {
        return Tensor::scalar(g.data.iter().sum());
    }
    let mut out = Tensor::zeros(shape);
    for r in 0..g.rows() {
        for (o, v) in out.data.iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// SGD or Adam with an l2 term added to the gradient of every parameter
/// flagged `decay`.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub l2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Optimizer {
    pub fn sgd(lr: f64, l2: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr, l2)
    }

    pub fn adam(lr: f64, l2: f64) -> Self {
        Self::new(OptimizerKind::Adam, lr, l2)
    }

    pub fn new(kind: OptimizerKind, lr: f64, l2: f64) -> Self {
        Self {
            kind,
            lr,
            l2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the stored gradients, then clears them.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some(p) = store.params.iter().find(|p| p.requires_grad && !p.has_grad) {
            return Err(TensorError::MissingGrad(p.name.clone()));
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for p in store.params.iter_mut().filter(|p| p.requires_grad) {
                    let l2 = if p.decay { self.l2 } else { 0.0 };
                    for (w, g) in p.value.data.iter_mut().zip(p.grad.data.iter_mut()) {
                        *w -= self.lr * (*g + l2 * *w);
                        *g = 0.0;
                    }
                    p.has_grad = false;
                }
            }
            OptimizerKind::Adam => {
                if self.m.len() != store.params.len() {
                    self.m = store.params.iter().map(|p| Tensor::zeros(p.value.shape)).collect();
                    self.v = self.m.clone();
                }
                let t = self.step as i32;
                let bc1 = 1.0 - self.beta1.powi(t);
                let bc2 = 1.0 - self.beta2.powi(t);
                for ((p, m), v) in store.params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
                    if !p.requires_grad {
                        continue;
                    }
                    let l2 = if p.decay { self.l2 } else { 0.0 };
                    for (((w, g), mi), vi) in p
                        .value
                        .data
                        .iter_mut()
                        .zip(p.grad.data.iter_mut())
                        .zip(m.data.iter_mut())
                        .zip(v.data.iter_mut())
                    {
                        let gt = *g + l2 * *w;
                        *mi = self.beta1 * *mi + (1.0 - self.beta1) * gt;
                        *vi = self.beta2 * *vi + (1.0 - self.beta2) * gt * gt;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
                        *g = 0.0;
                    }
                    p.has_grad = false;
                }
            }
        }
        Ok(())
    }
}
