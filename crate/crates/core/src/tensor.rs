//! Dense f64 tensors and a reverse-mode gradient tape.
//!
//! The tape is rebuilt for every forward pass: leaves are registered with
//! [`Tape::leaf`], operations append nodes, and [`Tape::backward`] walks the
//! records in reverse execution order. Gradients accumulate only into nodes
//! that can reach a `requires_grad` leaf. Every operation validates that its
//! output is finite and fails with [`Error::Numeric`] otherwise.

use crate::error::{Error, Result};
use rand::Rng;

/// Forward-pass mode; controls dropout behaviour.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

// ── Tensor ──────────────────────────────────────────────────────────

/// Dense n-dimensional array of f64 in row-major order.
///
/// `grad` is allocated iff `requires_grad` is set; it mirrors the data shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("tensor constructed with non-finite value".into()));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    /// n×n identity matrix.
    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Uniform(lo, hi) fill drawn from `rng` in row-major element order.
    pub fn uniform<R: Rng>(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.random_range(lo..hi)).collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Number of rows when viewed as a 2-D matrix (1-D tensors are one row).
    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 0,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    /// Row `i` of a 2-D (or 1-D, i = 0) tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Toggling gradient participation allocates or drops the grad buffer.
    pub fn set_requires_grad(&mut self, requires: bool) {
        self.requires_grad = requires;
        if requires {
            if self.grad.is_none() {
                self.grad = Some(vec![0.0; self.data.len()]);
            }
        } else {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if !self.requires_grad {
            return Err(Error::Contract(
                "set_grad on a tensor without requires_grad".into(),
            ));
        }
        if grad.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "grad length {} does not match tensor numel {}",
                grad.len(),
                self.data.len()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

// ── Free-standing numeric helpers ───────────────────────────────────

/// Numerically stable softmax of one logit row (max-subtraction).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy `-log softmax(logits)[class]` in nats, stable form.
pub fn cross_entropy(logits: &[f64], class: usize) -> Result<f64> {
    if logits.len() < 2 {
        return Err(Error::Config(format!(
            "cross-entropy needs at least 2 classes, got {}",
            logits.len()
        )));
    }
    if class >= logits.len() {
        return Err(Error::Index(format!(
            "class {} out of range for {} logits",
            class,
            logits.len()
        )));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    let loss = lse - logits[class];
    if !loss.is_finite() {
        return Err(Error::Numeric("cross-entropy produced non-finite loss".into()));
    }
    // Clamp away the tiny negative round-off that lse - max can leave behind.
    Ok(loss.max(0.0))
}

/// Row-major matrix product C[m,n] = A[m,k] · B[k,n].
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

// ── Tape ────────────────────────────────────────────────────────────

/// Handle to a value stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// How the right operand of a binary op was broadcast.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    None,
    ScalarLeft,
    ScalarRight,
    RowRight,
}

#[derive(Debug, Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Matmul {
        a: usize,
        b: usize,
    },
    Binary {
        kind: BinKind,
        a: usize,
        b: usize,
        bc: Broadcast,
    },
    Sigmoid {
        x: usize,
    },
    Tanh {
        x: usize,
    },
    Relu {
        x: usize,
    },
    ConcatCols {
        a: usize,
        b: usize,
    },
    Dropout {
        x: usize,
        mask: Vec<f64>,
    },
    Sum {
        x: usize,
    },
    /// Fused mean softmax cross-entropy over rows; `probs` cached for backward.
    SoftmaxXent {
        logits: usize,
        classes: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

/// Reverse-mode gradient tape. One forward pass per tape; after
/// [`Tape::backward`] the tape is sealed and only gradient reads are allowed.
pub struct Tape {
    nodes: Vec<Node>,
    sealed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            sealed: false,
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool, op: Op) -> Result<Var> {
        if self.sealed {
            return Err(Error::Contract("tape already consumed by backward()".into()));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("operation produced non-finite output".into()));
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            needs_grad,
            op,
        });
        Ok(Var(id))
    }

    /// Register an external tensor as a leaf, honouring its `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        self.push(
            t.shape.clone(),
            t.data.clone(),
            t.requires_grad,
            Op::Leaf,
        )
    }

    /// Register a value that never receives gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "constant shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        self.push(shape, data, false, Op::Constant)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape_of(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Gradient of the loss w.r.t. `v`; `None` before backward or for
    /// nodes outside the gradient path.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let s = &self.nodes[v.0].shape;
        match s.len() {
            1 => (1, s[0]),
            2 => (s[0], s[1]),
            _ => (0, 0),
        }
    }

    // ── forward ops ─────────────────────────────────────────────────

    /// Matrix product; gradient rule dA = dC·Bᵀ, dB = Aᵀ·dC.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.dims2(a);
        let (kb, n) = self.dims2(b);
        if self.nodes[a.0].shape.len() > 2 || self.nodes[b.0].shape.len() > 2 || m == 0 || n == 0 {
            return Err(Error::Shape("matmul expects 1-D or 2-D operands".into()));
        }
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul inner dimensions disagree: {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        let data = matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, m, ka, n);
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        self.push(vec![m, n], data, needs, Op::Matmul { a: a.0, b: b.0 })
    }

    fn broadcast_of(&self, a: Var, b: Var) -> Result<Broadcast> {
        let an = self.nodes[a.0].data.len();
        let bn = self.nodes[b.0].data.len();
        if self.nodes[a.0].shape == self.nodes[b.0].shape {
            return Ok(Broadcast::None);
        }
        if bn == 1 {
            return Ok(Broadcast::ScalarRight);
        }
        if an == 1 {
            return Ok(Broadcast::ScalarLeft);
        }
        // row vector broadcast over the rows of a matrix
        let (_, ac) = self.dims2(a);
        let (br, bc) = self.dims2(b);
        if br == 1 && ac == bc {
            return Ok(Broadcast::RowRight);
        }
        Err(Error::Shape(format!(
            "incompatible shapes for elementwise op: {:?} vs {:?}",
            self.nodes[a.0].shape, self.nodes[b.0].shape
        )))
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let bc = self.broadcast_of(a, b)?;
        let av = &self.nodes[a.0].data;
        let bv = &self.nodes[b.0].data;
        let f = |x: f64, y: f64| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
        };
        let (shape, data) = match bc {
            Broadcast::None => (
                self.nodes[a.0].shape.clone(),
                av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            ),
            Broadcast::ScalarRight => (
                self.nodes[a.0].shape.clone(),
                av.iter().map(|&x| f(x, bv[0])).collect(),
            ),
            Broadcast::ScalarLeft => (
                self.nodes[b.0].shape.clone(),
                bv.iter().map(|&y| f(av[0], y)).collect(),
            ),
            Broadcast::RowRight => {
                let (m, n) = self.dims2(a);
                let mut out = Vec::with_capacity(m * n);
                for i in 0..m {
                    for j in 0..n {
                        out.push(f(av[i * n + j], bv[j]));
                    }
                }
                (self.nodes[a.0].shape.clone(), out)
            }
        };
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        self.push(
            shape,
            data,
            needs,
            Op::Binary {
                kind,
                a: a.0,
                b: b.0,
                bc,
            },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let data: Vec<f64> = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.nodes[x.0].needs_grad;
        self.push(shape, data, needs, Op::Sigmoid { x: x.0 })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| v.tanh()).collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.nodes[x.0].needs_grad;
        self.push(shape, data, needs, Op::Tanh { x: x.0 })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| v.max(0.0)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.nodes[x.0].needs_grad;
        self.push(shape, data, needs, Op::Relu { x: x.0 })
    }

    /// Column-wise concatenation of two matrices with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, na) = self.dims2(a);
        let (mb, nb) = self.dims2(b);
        if ma != mb {
            return Err(Error::Shape(format!(
                "concat_cols row counts disagree: {} vs {}",
                ma, mb
            )));
        }
        let mut data = Vec::with_capacity(ma * (na + nb));
        for i in 0..ma {
            data.extend_from_slice(&self.nodes[a.0].data[i * na..(i + 1) * na]);
            data.extend_from_slice(&self.nodes[b.0].data[i * nb..(i + 1) * nb]);
        }
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        self.push(
            vec![ma, na + nb],
            data,
            needs,
            Op::ConcatCols { a: a.0, b: b.0 },
        )
    }

    /// Inverted dropout: zero with probability `p`, scale survivors by
    /// 1/(1−p). Identity in eval mode or when p = 0.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!(
                "dropout probability must be in [0, 1), got {}",
                p
            )));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.nodes[x.0].data.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data: Vec<f64> = self.nodes[x.0]
            .data
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.nodes[x.0].needs_grad;
        self.push(shape, data, needs, Op::Dropout { x: x.0, mask })
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let needs = self.nodes[x.0].needs_grad;
        self.push(vec![1], vec![s], needs, Op::Sum { x: x.0 })
    }

    /// Mean softmax cross-entropy over the rows of `logits` ([B,G] or [G])
    /// against `classes` (one label per row), in nats. The gradient is the
    /// fused form (softmax − onehot)/B.
    pub fn softmax_cross_entropy(&mut self, logits: Var, classes: &[usize]) -> Result<Var> {
        let (rows, g) = self.dims2(logits);
        if g < 2 {
            return Err(Error::Config(format!(
                "softmax cross-entropy needs at least 2 classes, got {}",
                g
            )));
        }
        if classes.len() != rows {
            return Err(Error::Shape(format!(
                "{} logit rows but {} class labels",
                rows,
                classes.len()
            )));
        }
        let mut probs = Vec::with_capacity(rows * g);
        let mut total = 0.0;
        for (i, &class) in classes.iter().enumerate() {
            let row = &self.nodes[logits.0].data[i * g..(i + 1) * g];
            total += cross_entropy(row, class)?;
            probs.extend(softmax(row));
        }
        let mean = total / rows as f64;
        let needs = self.nodes[logits.0].needs_grad;
        self.push(
            vec![1],
            vec![mean],
            needs,
            Op::SoftmaxXent {
                logits: logits.0,
                classes: classes.to_vec(),
                probs,
            },
        )
    }

    // ── backward ────────────────────────────────────────────────────

    /// Accumulate `src.grad * coeff`-style contributions into node `idx`.
    fn accumulate(&mut self, idx: usize, contribution: &[f64]) {
        let node = &mut self.nodes[idx];
        if !node.needs_grad {
            return;
        }
        let grad = node
            .grad
            .get_or_insert_with(|| vec![0.0; node.data.len()]);
        for (g, &c) in grad.iter_mut().zip(contribution) {
            *g += c;
        }
    }

    /// Reverse pass from a scalar loss. Visits operations in exact reverse
    /// execution order, then seals the tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.sealed {
            return Err(Error::Contract("backward() called twice on one tape".into()));
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward() requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.sealed = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let grad = match self.nodes[i].grad.take() {
                Some(g) => g,
                None => continue,
            };
            // Put the gradient back for callers; work from the local copy.
            self.nodes[i].grad = Some(grad.clone());

            // Ops only reference earlier indices, so split-borrow via index math.
            match &self.nodes[i].op {
                Op::Leaf | Op::Constant => {}
                Op::Matmul { a, b } => {
                    let (a, b) = (*a, *b);
                    let (m, k) = {
                        let s = &self.nodes[a].shape;
                        if s.len() == 1 {
                            (1, s[0])
                        } else {
                            (s[0], s[1])
                        }
                    };
                    let n = self.nodes[i].shape[1];
                    if self.nodes[a].needs_grad {
                        // dA = dC · Bᵀ
                        let bt = transpose(&self.nodes[b].data, k, n);
                        let da = matmul_raw(&grad, &bt, m, n, k);
                        self.accumulate(a, &da);
                    }
                    if self.nodes[b].needs_grad {
                        // dB = Aᵀ · dC
                        let at = transpose(&self.nodes[a].data, m, k);
                        let db = matmul_raw(&at, &grad, k, m, n);
                        self.accumulate(b, &db);
                    }
                }
                Op::Binary { kind, a, b, bc } => {
                    let (kind, a, b, bc) = (*kind, *a, *b, *bc);
                    let (da, db): (Vec<f64>, Vec<f64>) = match bc {
                        Broadcast::None => {
                            let da = grad.clone();
                            let db = match kind {
                                BinKind::Add => grad.clone(),
                                BinKind::Sub => grad.iter().map(|g| -g).collect(),
                                BinKind::Mul => grad
                                    .iter()
                                    .zip(&self.nodes[a].data)
                                    .map(|(g, &x)| g * x)
                                    .collect(),
                            };
                            let da = match kind {
                                BinKind::Mul => grad
                                    .iter()
                                    .zip(&self.nodes[b].data)
                                    .map(|(g, &y)| g * y)
                                    .collect(),
                                _ => da,
                            };
                            (da, db)
                        }
                        Broadcast::ScalarRight => {
                            let y = self.nodes[b].data[0];
                            let da: Vec<f64> = match kind {
                                BinKind::Mul => grad.iter().map(|g| g * y).collect(),
                                _ => grad.clone(),
                            };
                            let db_val: f64 = match kind {
                                BinKind::Add => grad.iter().sum(),
                                BinKind::Sub => -grad.iter().sum::<f64>(),
                                BinKind::Mul => grad
                                    .iter()
                                    .zip(&self.nodes[a].data)
                                    .map(|(g, &x)| g * x)
                                    .sum(),
                            };
                            (da, vec![db_val])
                        }
                        Broadcast::ScalarLeft => {
                            let x = self.nodes[a].data[0];
                            let da_val: f64 = match kind {
                                BinKind::Add | BinKind::Sub => grad.iter().sum(),
                                BinKind::Mul => grad
                                    .iter()
                                    .zip(&self.nodes[b].data)
                                    .map(|(g, &y)| g * y)
                                    .sum(),
                            };
                            let db: Vec<f64> = match kind {
                                BinKind::Add => grad.clone(),
                                BinKind::Sub => grad.iter().map(|g| -g).collect(),
                                BinKind::Mul => grad.iter().map(|g| g * x).collect(),
                            };
                            (vec![da_val], db)
                        }
                        Broadcast::RowRight => {
                            let n = self.nodes[b].data.len();
                            let m = grad.len() / n;
                            let da: Vec<f64> = match kind {
                                BinKind::Mul => grad
                                    .iter()
                                    .enumerate()
                                    .map(|(idx, g)| g * self.nodes[b].data[idx % n])
                                    .collect(),
                                _ => grad.clone(),
                            };
                            let mut db = vec![0.0; n];
                            for r in 0..m {
                                for j in 0..n {
                                    let g = grad[r * n + j];
                                    db[j] += match kind {
                                        BinKind::Add => g,
                                        BinKind::Sub => -g,
                                        BinKind::Mul => g * self.nodes[a].data[r * n + j],
                                    };
                                }
                            }
                            (da, db)
                        }
                    };
                    if self.nodes[a].needs_grad {
                        self.accumulate(a, &da);
                    }
                    if self.nodes[b].needs_grad {
                        self.accumulate(b, &db);
                    }
                }
                Op::Sigmoid { x } => {
                    let x = *x;
                    let dx: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[i].data)
                        .map(|(g, &s)| g * s * (1.0 - s))
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::Tanh { x } => {
                    let x = *x;
                    let dx: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[i].data)
                        .map(|(g, &t)| g * (1.0 - t * t))
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::Relu { x } => {
                    let x = *x;
                    let dx: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[x].data)
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::ConcatCols { a, b } => {
                    let (a, b) = (*a, *b);
                    let na = if self.nodes[a].shape.len() == 1 {
                        self.nodes[a].shape[0]
                    } else {
                        self.nodes[a].shape[1]
                    };
                    let n = self.nodes[i].shape[1];
                    let m = self.nodes[i].shape[0];
                    let nb = n - na;
                    let mut da = Vec::with_capacity(m * na);
                    let mut db = Vec::with_capacity(m * nb);
                    for r in 0..m {
                        da.extend_from_slice(&grad[r * n..r * n + na]);
                        db.extend_from_slice(&grad[r * n + na..(r + 1) * n]);
                    }
                    if self.nodes[a].needs_grad {
                        self.accumulate(a, &da);
                    }
                    if self.nodes[b].needs_grad {
                        self.accumulate(b, &db);
                    }
                }
                Op::Dropout { x, mask } => {
                    let x = *x;
                    let dx: Vec<f64> = grad.iter().zip(mask).map(|(g, &m)| g * m).collect();
                    self.accumulate(x, &dx);
                }
                Op::Sum { x } => {
                    let x = *x;
                    let dx = vec![grad[0]; self.nodes[x].data.len()];
                    self.accumulate(x, &dx);
                }
                Op::SoftmaxXent {
                    logits,
                    classes,
                    probs,
                } => {
                    let logits = *logits;
                    let rows = classes.len();
                    let g = probs.len() / rows;
                    let scale = grad[0] / rows as f64;
                    let mut dl = Vec::with_capacity(rows * g);
                    for (r, &class) in classes.iter().enumerate() {
                        for j in 0..g {
                            let onehot = if j == class { 1.0 } else { 0.0 };
                            dl.push(scale * (probs[r * g + j] - onehot));
                        }
                    }
                    self.accumulate(logits, &dl);
                }
            }
        }
        Ok(())
    }
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn leaf_grad(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        let mut t = Tensor::from_vec(shape, data).unwrap();
        t.set_requires_grad(true);
        t
    }

    /// Central finite differences of `f` at `x`, h = 1e-4.
    fn finite_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        let h = 1e-4;
        (0..x.len())
            .map(|i| {
                let mut plus = x.to_vec();
                let mut minus = x.to_vec();
                plus[i] += h;
                minus[i] -= h;
                (f(&plus) - f(&minus)) / (2.0 * h)
            })
            .collect()
    }

    fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(&a, &n)| {
                let denom = a.abs().max(n.abs()).max(1e-8);
                (a - n).abs() / denom
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn matmul_identity_passes_vector_through() {
        let mut tape = Tape::new();
        let eye = tape.leaf(&Tensor::identity(3)).unwrap();
        let v = tape
            .constant(vec![3, 1], vec![2.0, -1.5, 0.25])
            .unwrap();
        let out = tape.matmul(eye, v).unwrap();
        assert_eq!(tape.value(out), &[2.0, -1.5, 0.25]);
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let mut tape = Tape::new();
        let a = tape
            .constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0])
            .unwrap();
        let b = tape.constant(vec![2, 1], vec![1.0, 1.0]).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_error() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a0 = Tensor::uniform(vec![5, 7], -1.0, 1.0, &mut rng);
        let b0 = Tensor::uniform(vec![7, 3], -1.0, 1.0, &mut rng);

        let run = |av: &[f64], bv: &[f64]| -> (f64, Option<(Vec<f64>, Vec<f64>)>) {
            let mut tape = Tape::new();
            let mut at = Tensor::from_vec(vec![5, 7], av.to_vec()).unwrap();
            let mut bt = Tensor::from_vec(vec![7, 3], bv.to_vec()).unwrap();
            at.set_requires_grad(true);
            bt.set_requires_grad(true);
            let a = tape.leaf(&at).unwrap();
            let b = tape.leaf(&bt).unwrap();
            let c = tape.matmul(a, b).unwrap();
            // weight the sum so gradient entries differ
            let w: Vec<f64> = (0..15).map(|i| 0.3 + 0.1 * i as f64).collect();
            let wv = tape.constant(vec![5, 3], w).unwrap();
            let prod = tape.mul(c, wv).unwrap();
            let loss = tape.sum(prod).unwrap();
            let l = tape.value(loss)[0];
            tape.backward(loss).unwrap();
            let grads = (
                tape.grad(a).unwrap().to_vec(),
                tape.grad(b).unwrap().to_vec(),
            );
            (l, Some(grads))
        };

        let (_, grads) = run(a0.data(), b0.data());
        let (ga, gb) = grads.unwrap();
        let na = finite_diff(&|av| run(av, b0.data()).0, a0.data());
        let nb = finite_diff(&|bv| run(a0.data(), bv).0, b0.data());
        assert!(max_rel_err(&ga, &na) < 1e-6, "dA err {}", max_rel_err(&ga, &na));
        assert!(max_rel_err(&gb, &nb) < 1e-6, "dB err {}", max_rel_err(&gb, &nb));
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1], vec![0.0]).unwrap();
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(s), &[0.5]);
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn tanh_gradient_matches_finite_difference() {
        let run = |xv: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let t = leaf_grad(vec![1], xv.to_vec());
            let x = tape.leaf(&t).unwrap();
            let y = tape.tanh(x).unwrap();
            let loss = tape.sum(y).unwrap();
            tape.value(loss)[0]
        };
        let x = vec![0.3];
        let numeric = finite_diff(&run, &x);

        let mut tape = Tape::new();
        let t = leaf_grad(vec![1], x.clone());
        let xv = tape.leaf(&t).unwrap();
        let y = tape.tanh(xv).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        let analytic = tape.grad(xv).unwrap();
        assert!(max_rel_err(analytic, &numeric) < 1e-6);
    }

    #[test]
    fn softmax_components_sum_to_one_and_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let logits: Vec<f64> = (0..8).map(|_| rng.random_range(-30.0..30.0)).collect();
            let p = softmax(&logits);
            let sum: f64 = p.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-9, "sum {}", sum);
            assert!(p.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn cross_entropy_uniform_prediction() {
        let logits = vec![0.7; 8];
        let loss = cross_entropy(&logits, 3).unwrap();
        assert!((loss - (8.0_f64).ln()).abs() < 1e-12, "loss {}", loss);
    }

    #[test]
    fn cross_entropy_confident_correct() {
        // -log sigmoid(20) = ln(1 + e^-20)
        let loss = cross_entropy(&[10.0, -10.0], 0).unwrap();
        let expected = (-20.0_f64).exp().ln_1p();
        // max-subtraction form cancels at ~1e-15 absolute, so compare loosely
        assert!(
            (loss - expected).abs() < 1e-6 * expected,
            "loss {} vs {}",
            loss,
            expected
        );
        assert!((loss - 2.06e-9).abs() < 0.02e-9);
    }

    #[test]
    fn cross_entropy_out_of_range_class() {
        assert!(matches!(
            cross_entropy(&[0.0, 1.0], 2),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn softmax_xent_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let logits0: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();

        let run = |lv: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let t = leaf_grad(vec![5], lv.to_vec());
            let l = tape.leaf(&t).unwrap();
            let loss = tape.softmax_cross_entropy(l, &[2]).unwrap();
            tape.value(loss)[0]
        };
        let numeric = finite_diff(&run, &logits0);

        let mut tape = Tape::new();
        let t = leaf_grad(vec![5], logits0.clone());
        let l = tape.leaf(&t).unwrap();
        let loss = tape.softmax_cross_entropy(l, &[2]).unwrap();
        tape.backward(loss).unwrap();
        let analytic = tape.grad(l).unwrap();
        assert!(max_rel_err(analytic, &numeric) < 1e-6);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let t = leaf_grad(vec![3], vec![4.0, -2.0, 0.5]);
        let x = tape.leaf(&t).unwrap();
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_quadratic() {
        let mut tape = Tape::new();
        let t = leaf_grad(vec![2], vec![1.0, 2.0]);
        let x = tape.leaf(&t).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let t = leaf_grad(vec![2], vec![1.0, 2.0]);
        let x = tape.leaf(&t).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn tape_is_sealed_after_backward() {
        let mut tape = Tape::new();
        let t = leaf_grad(vec![1], vec![2.0]);
        let x = tape.leaf(&t).unwrap();
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.sum(x), Err(Error::Contract(_))));
        assert!(matches!(tape.backward(loss), Err(Error::Contract(_))));
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.constant(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = tape.dropout(x, 0.5, Mode::Eval, &mut rng).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn dropout_p_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.constant(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = tape.dropout(x, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn dropout_p_one_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.constant(vec![1], vec![1.0]).unwrap();
        assert!(matches!(
            tape.dropout(x, 1.0, Mode::Train, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn dropout_preserves_mean_in_expectation() {
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut tape = Tape::new();
        let x = tape.constant(vec![n], vec![1.0; n]).unwrap();
        let y = tape.dropout(x, 0.5, Mode::Train, &mut rng).unwrap();
        let mean: f64 = tape.value(y).iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {}", mean);
    }

    #[test]
    fn seeded_computation_is_bitwise_reproducible() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let t = Tensor::uniform(vec![4, 4], -1.0, 1.0, &mut rng);
            let mut tape = Tape::new();
            let x = tape.leaf(&t).unwrap();
            let s = tape.sigmoid(x).unwrap();
            let d = tape.dropout(s, 0.3, Mode::Train, &mut rng).unwrap();
            tape.value(d).to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn non_finite_output_raises_numeric_error() {
        let mut tape = Tape::new();
        let big = tape.constant(vec![1], vec![1e308]).unwrap();
        let r = tape.mul(big, big);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn row_broadcast_add_and_backward() {
        let run = |bias: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let a = tape
                .constant(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
                .unwrap();
            let bt = leaf_grad(vec![3], bias.to_vec());
            let b = tape.leaf(&bt).unwrap();
            let y = tape.add(a, b).unwrap();
            let sq = tape.mul(y, y).unwrap();
            let loss = tape.sum(sq).unwrap();
            tape.value(loss)[0]
        };
        let bias = vec![0.5, -0.25, 1.0];
        let numeric = finite_diff(&run, &bias);

        let mut tape = Tape::new();
        let a = tape
            .constant(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
            .unwrap();
        let bt = leaf_grad(vec![3], bias.clone());
        let b = tape.leaf(&bt).unwrap();
        let y = tape.add(a, b).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert!(max_rel_err(tape.grad(b).unwrap(), &numeric) < 1e-6);
    }

    #[test]
    fn concat_cols_backward_splits_gradient() {
        let av = vec![1.0, 2.0, 3.0, 4.0];
        let bv = vec![5.0, 6.0];
        let run = |a_in: &[f64], b_in: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let at = leaf_grad(vec![2, 2], a_in.to_vec());
            let bt = leaf_grad(vec![2, 1], b_in.to_vec());
            let a = tape.leaf(&at).unwrap();
            let b = tape.leaf(&bt).unwrap();
            let c = tape.concat_cols(a, b).unwrap();
            let w = tape
                .constant(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
                .unwrap();
            let p = tape.mul(c, w).unwrap();
            let loss = tape.sum(p).unwrap();
            tape.value(loss)[0]
        };
        let na = finite_diff(&|a_in| run(a_in, &bv), &av);
        let nb = finite_diff(&|b_in| run(&av, b_in), &bv);

        let mut tape = Tape::new();
        let at = leaf_grad(vec![2, 2], av.clone());
        let bt = leaf_grad(vec![2, 1], bv.clone());
        let a = tape.leaf(&at).unwrap();
        let b = tape.leaf(&bt).unwrap();
        let c = tape.concat_cols(a, b).unwrap();
        let w = tape
            .constant(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
            .unwrap();
        let p = tape.mul(c, w).unwrap();
        let loss = tape.sum(p).unwrap();
        tape.backward(loss).unwrap();
        assert!(max_rel_err(tape.grad(a).unwrap(), &na) < 1e-6);
        assert!(max_rel_err(tape.grad(b).unwrap(), &nb) < 1e-6);
    }

    proptest::proptest! {
        /// Composite expression gradient vs finite differences on random
        /// small shapes.
        #[test]
        fn composite_gradients_match_fd(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = rng.random_range(1..4usize);
            let k = rng.random_range(1..4usize);
            let n = rng.random_range(2..4usize);
            let a0 = Tensor::uniform(vec![m, k], -1.0, 1.0, &mut rng);
            let b0 = Tensor::uniform(vec![k, n], -1.0, 1.0, &mut rng);
            let class = rng.random_range(0..n);

            let run = |av: &[f64], bv: &[f64]| -> (f64, Option<(Vec<f64>, Vec<f64>)>) {
                let mut tape = Tape::new();
                let mut at = Tensor::from_vec(vec![m, k], av.to_vec()).unwrap();
                let mut bt = Tensor::from_vec(vec![k, n], bv.to_vec()).unwrap();
                at.set_requires_grad(true);
                bt.set_requires_grad(true);
                let a = tape.leaf(&at).unwrap();
                let b = tape.leaf(&bt).unwrap();
                let c = tape.matmul(a, b).unwrap();
                let s = tape.tanh(c).unwrap();
                let g = tape.sigmoid(s).unwrap();
                let prod = tape.mul(g, c).unwrap();
                let classes: Vec<usize> = vec![class; m];
                let loss = tape.softmax_cross_entropy(prod, &classes).unwrap();
                let l = tape.value(loss)[0];
                tape.backward(loss).unwrap();
                let grads = (tape.grad(a).unwrap().to_vec(), tape.grad(b).unwrap().to_vec());
                (l, Some(grads))
            };
            let (_, grads) = run(a0.data(), b0.data());
            let (ga, gb) = grads.unwrap();
            let na = finite_diff(&|av| run(av, b0.data()).0, a0.data());
            let nb = finite_diff(&|bv| run(a0.data(), bv).0, b0.data());
            proptest::prop_assert!(max_rel_err(&ga, &na) < 1e-4);
            proptest::prop_assert!(max_rel_err(&gb, &nb) < 1e-4);
        }
    }
}
