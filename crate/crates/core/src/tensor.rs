//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation applied to the [`Var`] handles it
//! hands out. Nodes are appended in evaluation order, so the node list is
//! already a topological order and [`Tape::backward`] is a single reverse
//! sweep. Trainable parameters live outside the tape as [`Tensor`]s; they
//! are linked to a tape with [`Tape::watch`] and receive their gradients
//! when `backward` is called with them.
//!
//! Everything is two dimensional internally (`rows x cols`, scalars are
//! `1 x 1`). Only the operations the classifier and the distillation
//! losses need are implemented.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

/// Teacher probabilities are clamped to this before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance on the row sums of a teacher distribution.
pub const DISTRIBUTION_TOL: f64 = 1e-9;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a particular [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Dense real array with an optional gradient buffer.
///
/// `product(shape) == values.len()` always holds. A tensor created with
/// `requires_grad == false` never receives a gradient buffer.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    node: Option<Var>,
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self.requires_grad == other.requires_grad
            && self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl Tensor {
    /// A constant tensor.
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("extents must be positive, got {shape:?}"),
            });
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("shape {shape:?} holds {n} values, got {}", values.len()),
            });
        }
        if shape.len() > 2 {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("at most two dimensions supported, got {shape:?}"),
            });
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
            node: None,
        })
    }

    /// A trainable tensor.
    pub fn param(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let mut t = Tensor::new(shape, values)?;
        t.requires_grad = true;
        Ok(t)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![value],
            requires_grad: false,
            grad: None,
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access to the values. Any tape link is dropped since the
    /// recorded value no longer matches.
    pub fn values_mut(&mut self) -> &mut [f64] {
        self.node = None;
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Drops the accumulated gradient.
    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    fn dims(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => unreachable!("constructor rejects rank > 2"),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Affine { x: usize, w: usize, b: usize },
    Relu { x: usize },
    LogSoftmax { x: usize, temperature: f64 },
    KlDiv { p: Vec<f64>, log_q: usize },
    Mean { x: usize },
    Add { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    Gather { x: usize, index: Vec<usize> },
    Mmd2 { a: usize, b: usize, bandwidths: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    rows: usize,
    cols: usize,
    needs_grad: bool,
    op: Op,
}

/// Records operations for one forward pass.
///
/// A tape is single-threaded; distinct tapes are fully independent.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Vec<f64>, rows: usize, cols: usize, needs_grad: bool, op: Op) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            rows,
            cols,
            needs_grad,
            op,
        });
        Var {
            tape: self.id,
            index: nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.len() {
            return Err(Error::Detached);
        }
        Ok(v.index)
    }

    /// Records `t` as a leaf and links it to this tape. Trainable tensors
    /// receive gradients from [`Tape::backward`].
    pub fn watch(&self, t: &mut Tensor) -> Var {
        let (rows, cols) = t.dims();
        let v = self.push(t.values.clone(), rows, cols, t.requires_grad, Op::Leaf);
        t.node = Some(v);
        v
    }

    /// Records a constant leaf. No gradient flows to it.
    pub fn constant(&self, t: &Tensor) -> Var {
        let (rows, cols) = t.dims();
        self.push(t.values.clone(), rows, cols, false, Op::Leaf)
    }

    /// Records a constant `rows x cols` matrix.
    pub fn input(&self, values: Vec<f64>, rows: usize, cols: usize) -> Result<Var> {
        if rows == 0 || cols == 0 || values.len() != rows * cols {
            return Err(Error::Shape {
                op: "input",
                detail: format!("{} values for a {rows}x{cols} matrix", values.len()),
            });
        }
        Ok(self.push(values, rows, cols, false, Op::Leaf))
    }

    /// `(rows, cols)` of a recorded value.
    pub fn dims(&self, v: Var) -> Result<(usize, usize)> {
        let i = self.check(v)?;
        let nodes = self.nodes.borrow();
        Ok((nodes[i].rows, nodes[i].cols))
    }

    /// Copy of a recorded value as a constant tensor.
    pub fn value(&self, v: Var) -> Result<Tensor> {
        let i = self.check(v)?;
        let nodes = self.nodes.borrow();
        let n = &nodes[i];
        Tensor::new(vec![n.rows, n.cols], n.value.clone())
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        let i = self.check(v)?;
        let nodes = self.nodes.borrow();
        let n = &nodes[i];
        if n.value.len() != 1 {
            return Err(Error::Shape {
                op: "scalar",
                detail: format!("value is {}x{}", n.rows, n.cols),
            });
        }
        Ok(n.value[0])
    }

    /// Row-wise log-softmax of `logits / temperature`.
    pub fn log_softmax(&self, logits: Var, temperature: f64) -> Result<Var> {
        let i = self.check(logits)?;
        let (value, rows, cols, needs_grad) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[i];
            let y = log_softmax_rows(&n.value, n.rows, n.cols, temperature)?;
            (y, n.rows, n.cols, n.needs_grad)
        };
        Ok(self.push(
            value,
            rows,
            cols,
            needs_grad,
            Op::LogSoftmax { x: i, temperature },
        ))
    }

    /// Batch mean of `KL(p || q)` given teacher probabilities `p` and
    /// student log-probabilities `log_q`. `p` is a constant; the gradient
    /// flows only to `log_q`. Zero teacher entries contribute nothing.
    pub fn kl_div(&self, p_teacher: &Tensor, log_q_student: Var) -> Result<Var> {
        let i = self.check(log_q_student)?;
        let (value, needs_grad) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[i];
            if p_teacher.len() != n.value.len() {
                return Err(Error::Shape {
                    op: "kl_div",
                    detail: format!(
                        "teacher holds {} values, student {}x{}",
                        p_teacher.len(),
                        n.rows,
                        n.cols
                    ),
                });
            }
            check_distribution(p_teacher.values(), n.rows, n.cols)?;
            (
                kl_value(p_teacher.values(), &n.value, n.rows, n.cols),
                n.needs_grad,
            )
        };
        Ok(self.push(
            vec![value],
            1,
            1,
            needs_grad,
            Op::KlDiv {
                p: p_teacher.values.clone(),
                log_q: i,
            },
        ))
    }

    /// Arithmetic mean of all entries.
    pub fn reduce_mean(&self, t: Var) -> Result<Var> {
        let i = self.check(t)?;
        let (value, needs_grad) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[i];
            if n.value.is_empty() {
                return Err(Error::InvalidArgument("mean of an empty tensor".into()));
            }
            (
                n.value.iter().sum::<f64>() / n.value.len() as f64,
                n.needs_grad,
            )
        };
        Ok(self.push(vec![value], 1, 1, needs_grad, Op::Mean { x: i }))
    }

    /// `x W + b` for `x: r x i`, `W: i x o`, `b: 1 x o`.
    pub(crate) fn affine(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let (value, rows, cols, needs_grad) = {
            let nodes = self.nodes.borrow();
            let (xn, wn, bn) = (&nodes[xi], &nodes[wi], &nodes[bi]);
            if xn.cols != wn.rows || bn.value.len() != wn.cols {
                return Err(Error::Shape {
                    op: "affine",
                    detail: format!(
                        "x {}x{}, W {}x{}, b {}",
                        xn.rows,
                        xn.cols,
                        wn.rows,
                        wn.cols,
                        bn.value.len()
                    ),
                });
            }
            let y = affine_forward(&xn.value, xn.rows, &wn.value, wn.rows, wn.cols, &bn.value);
            (
                y,
                xn.rows,
                wn.cols,
                xn.needs_grad || wn.needs_grad || bn.needs_grad,
            )
        };
        Ok(self.push(
            value,
            rows,
            cols,
            needs_grad,
            Op::Affine {
                x: xi,
                w: wi,
                b: bi,
            },
        ))
    }

    pub(crate) fn relu(&self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let (value, rows, cols, needs_grad) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[i];
            (relu_forward(&n.value), n.rows, n.cols, n.needs_grad)
        };
        Ok(self.push(value, rows, cols, needs_grad, Op::Relu { x: i }))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (value, rows, cols, needs_grad) = {
            let nodes = self.nodes.borrow();
            let (an, bn) = (&nodes[ai], &nodes[bi]);
            if an.rows != bn.rows || an.cols != bn.cols {
                return Err(Error::Shape {
                    op: "add",
                    detail: format!("{}x{} + {}x{}", an.rows, an.cols, bn.rows, bn.cols),
                });
            }
            let v = an.value.iter().zip(&bn.value).map(|(x, y)| x + y).collect();
            (v, an.rows, an.cols, an.needs_grad || bn.needs_grad)
        };
        Ok(self.push(value, rows, cols, needs_grad, Op::Add { a: ai, b: bi }))
    }

    pub fn scale(&self, x: Var, c: f64) -> Result<Var> {
        let i = self.check(x)?;
        let (value, rows, cols, needs_grad) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[i];
            let v = n.value.iter().map(|v| c * v).collect();
            (v, n.rows, n.cols, n.needs_grad)
        };
        Ok(self.push(value, rows, cols, needs_grad, Op::Scale { x: i, c }))
    }

    /// Picks `x[r, index[r]]` from each row, giving an `r x 1` column.
    pub(crate) fn gather(&self, x: Var, index: &[usize]) -> Result<Var> {
        let i = self.check(x)?;
        let (value, rows, needs_grad) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[i];
            if index.len() != n.rows {
                return Err(Error::Shape {
                    op: "gather",
                    detail: format!("{} indices for {} rows", index.len(), n.rows),
                });
            }
            if let Some(r) = index.iter().position(|&c| c >= n.cols) {
                return Err(Error::InvalidArgument(format!(
                    "gather index {} out of range for {} columns at row {r}",
                    index[r], n.cols
                )));
            }
            let v = index
                .iter()
                .enumerate()
                .map(|(r, &c)| n.value[r * n.cols + c])
                .collect();
            (v, n.rows, n.needs_grad)
        };
        Ok(self.push(
            value,
            rows,
            1,
            needs_grad,
            Op::Gather {
                x: i,
                index: index.to_vec(),
            },
        ))
    }

    /// Biased squared MMD between the row sets of `a` and `b`, summed over a
    /// family of RBF kernels `exp(-|u - v|^2 / (2 sigma^2))`.
    pub(crate) fn mmd2_rbf(&self, a: Var, b: Var, bandwidths: &[f64]) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        if bandwidths.is_empty() {
            return Err(Error::InvalidArgument("empty bandwidth list".into()));
        }
        if let Some(s) = bandwidths.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::InvalidArgument(format!("bandwidth {s} is not positive")));
        }
        let (value, needs_grad) = {
            let nodes = self.nodes.borrow();
            let (an, bn) = (&nodes[ai], &nodes[bi]);
            if an.cols != bn.cols {
                return Err(Error::Shape {
                    op: "mmd2_rbf",
                    detail: format!("feature widths {} and {}", an.cols, bn.cols),
                });
            }
            if an.rows < 2 || bn.rows < 2 {
                return Err(Error::InvalidArgument(format!(
                    "mmd2_rbf needs at least two rows per set, got {} and {}",
                    an.rows, bn.rows
                )));
            }
            let gammas = rbf_gammas(bandwidths);
            let h = an.cols;
            let (m, n) = (an.rows as f64, bn.rows as f64);
            let kaa = kernel_sum(&an.value, &an.value, h, &gammas);
            let kbb = kernel_sum(&bn.value, &bn.value, h, &gammas);
            let kab = kernel_sum(&an.value, &bn.value, h, &gammas);
            (
                kaa / (m * m) + kbb / (n * n) - 2.0 * kab / (m * n),
                an.needs_grad || bn.needs_grad,
            )
        };
        Ok(self.push(
            vec![value],
            1,
            1,
            needs_grad,
            Op::Mmd2 {
                a: ai,
                b: bi,
                bandwidths: bandwidths.to_vec(),
            },
        ))
    }

    /// Back-propagates from the scalar `loss` and accumulates
    /// `d loss / d leaf` into every trainable tensor in `leaves` that was
    /// watched on this tape. Calling it twice without
    /// [`Tensor::zero_grad`] in between adds the gradients up.
    pub fn backward<'a, I>(&self, loss: Var, leaves: I) -> Result<()>
    where
        I: IntoIterator<Item = &'a mut Tensor>,
    {
        let adj = self.adjoints(loss)?;
        for t in leaves {
            if !t.requires_grad {
                continue;
            }
            let Some(node) = t.node.filter(|v| v.tape == self.id) else {
                continue;
            };
            let buf = t.grad.get_or_insert_with(|| vec![0.0; t.values.len()]);
            if let Some(g) = &adj[node.index] {
                for (b, g) in buf.iter_mut().zip(g) {
                    *b += g;
                }
            }
        }
        Ok(())
    }

    fn adjoints(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        let li = self.check(loss)?;
        let nodes = self.nodes.borrow();
        if nodes[li].value.len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                detail: format!(
                    "loss must be a scalar, got {}x{}",
                    nodes[li].rows, nodes[li].cols
                ),
            });
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; li + 1];
        adj[li] = Some(vec![1.0]);

        for i in (0..=li).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    adj[i] = Some(g);
                }
                Op::Affine { x, w, b } => {
                    let (xn, wn) = (&nodes[*x], &nodes[*w]);
                    let (r, inp, out) = (xn.rows, wn.rows, wn.cols);
                    if xn.needs_grad {
                        let dx = grad_buf(&mut adj, *x, r * inp);
                        for row in 0..r {
                            let grow = &g[row * out..(row + 1) * out];
                            let drow = &mut dx[row * inp..(row + 1) * inp];
                            for (k, d) in drow.iter_mut().enumerate() {
                                let wrow = &wn.value[k * out..(k + 1) * out];
                                *d += grow.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                    }
                    if wn.needs_grad {
                        let dw = grad_buf(&mut adj, *w, inp * out);
                        for row in 0..r {
                            let grow = &g[row * out..(row + 1) * out];
                            let xrow = &xn.value[row * inp..(row + 1) * inp];
                            for (k, &xv) in xrow.iter().enumerate() {
                                if xv == 0.0 {
                                    continue;
                                }
                                let dwrow = &mut dw[k * out..(k + 1) * out];
                                for (d, gv) in dwrow.iter_mut().zip(grow) {
                                    *d += xv * gv;
                                }
                            }
                        }
                    }
                    if nodes[*b].needs_grad {
                        let db = grad_buf(&mut adj, *b, out);
                        for row in 0..r {
                            for (d, gv) in db.iter_mut().zip(&g[row * out..(row + 1) * out]) {
                                *d += gv;
                            }
                        }
                    }
                }
                Op::Relu { x } => {
                    let xn = &nodes[*x];
                    if xn.needs_grad {
                        let dx = grad_buf(&mut adj, *x, g.len());
                        for ((d, gv), xv) in dx.iter_mut().zip(&g).zip(&xn.value) {
                            if *xv > 0.0 {
                                *d += gv;
                            }
                        }
                    }
                }
                Op::LogSoftmax { x, temperature } => {
                    let (rows, cols) = (node.rows, node.cols);
                    let dx = grad_buf(&mut adj, *x, rows * cols);
                    for row in 0..rows {
                        let y = &node.value[row * cols..(row + 1) * cols];
                        let gr = &g[row * cols..(row + 1) * cols];
                        let total: f64 = gr.iter().sum();
                        for c in 0..cols {
                            dx[row * cols + c] += (gr[c] - y[c].exp() * total) / temperature;
                        }
                    }
                }
                Op::KlDiv { p, log_q } => {
                    let rows = nodes[*log_q].rows as f64;
                    let dq = grad_buf(&mut adj, *log_q, p.len());
                    let s = g[0] / rows;
                    for (d, pv) in dq.iter_mut().zip(p) {
                        *d -= pv * s;
                    }
                }
                Op::Mean { x } => {
                    let n = nodes[*x].value.len();
                    let s = g[0] / n as f64;
                    for d in grad_buf(&mut adj, *x, n).iter_mut() {
                        *d += s;
                    }
                }
                Op::Add { a, b } => {
                    for idx in [*a, *b] {
                        if nodes[idx].needs_grad {
                            for (d, gv) in grad_buf(&mut adj, idx, g.len()).iter_mut().zip(&g) {
                                *d += gv;
                            }
                        }
                    }
                }
                Op::Scale { x, c } => {
                    for (d, gv) in grad_buf(&mut adj, *x, g.len()).iter_mut().zip(&g) {
                        *d += c * gv;
                    }
                }
                Op::Gather { x, index } => {
                    let cols = nodes[*x].cols;
                    let dx = grad_buf(&mut adj, *x, nodes[*x].value.len());
                    for (r, &c) in index.iter().enumerate() {
                        dx[r * cols + c] += g[r];
                    }
                }
                Op::Mmd2 { a, b, bandwidths } => {
                    let (an, bn) = (&nodes[*a], &nodes[*b]);
                    let gammas = rbf_gammas(bandwidths);
                    let h = an.cols;
                    let (m, n) = (an.rows as f64, bn.rows as f64);
                    if an.needs_grad {
                        let mut da = vec![0.0; an.value.len()];
                        kernel_grad(&an.value, &an.value, h, &gammas, 2.0 * g[0] / (m * m), &mut da);
                        kernel_grad(&an.value, &bn.value, h, &gammas, -2.0 * g[0] / (m * n), &mut da);
                        for (d, v) in grad_buf(&mut adj, *a, da.len()).iter_mut().zip(&da) {
                            *d += v;
                        }
                    }
                    if bn.needs_grad {
                        let mut db = vec![0.0; bn.value.len()];
                        kernel_grad(&bn.value, &bn.value, h, &gammas, 2.0 * g[0] / (n * n), &mut db);
                        kernel_grad(&bn.value, &an.value, h, &gammas, -2.0 * g[0] / (m * n), &mut db);
                        for (d, v) in grad_buf(&mut adj, *b, db.len()).iter_mut().zip(&db) {
                            *d += v;
                        }
                    }
                }
            }
        }
        Ok(adj)
    }
}

fn grad_buf(adj: &mut [Option<Vec<f64>>], index: usize, len: usize) -> &mut Vec<f64> {
    adj[index].get_or_insert_with(|| vec![0.0; len])
}

fn rbf_gammas(bandwidths: &[f64]) -> Vec<f64> {
    bandwidths.iter().map(|s| 1.0 / (2.0 * s * s)).collect()
}

fn sq_dist(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn kernel_sum(a: &[f64], b: &[f64], h: usize, gammas: &[f64]) -> f64 {
    let mut total = 0.0;
    for u in a.chunks_exact(h) {
        for v in b.chunks_exact(h) {
            let d2 = sq_dist(u, v);
            total += gammas.iter().map(|g| (-g * d2).exp()).sum::<f64>();
        }
    }
    total
}

/// Adds `coef * sum_j dK(u_i, v_j)/du_i` to `out[i]` for every row `u_i` of `a`.
fn kernel_grad(a: &[f64], b: &[f64], h: usize, gammas: &[f64], coef: f64, out: &mut [f64]) {
    for (u, o) in a.chunks_exact(h).zip(out.chunks_exact_mut(h)) {
        for v in b.chunks_exact(h) {
            let d2 = sq_dist(u, v);
            // dK/d(d2), summed over the kernel family
            let dk: f64 = gammas.iter().map(|g| -g * (-g * d2).exp()).sum();
            let s = coef * dk * 2.0;
            for k in 0..h {
                o[k] += s * (u[k] - v[k]);
            }
        }
    }
}

pub(crate) fn affine_forward(
    x: &[f64],
    rows: usize,
    w: &[f64],
    inp: usize,
    out: usize,
    b: &[f64],
) -> Vec<f64> {
    let mut y = Vec::with_capacity(rows * out);
    for row in 0..rows {
        y.extend_from_slice(b);
        let yrow = &mut y[row * out..(row + 1) * out];
        for (k, &xv) in x[row * inp..(row + 1) * inp].iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (yv, wv) in yrow.iter_mut().zip(&w[k * out..(k + 1) * out]) {
                *yv += xv * wv;
            }
        }
    }
    y
}

pub(crate) fn relu_forward(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

/// Row-wise log-softmax of `x / temperature`, max-shifted.
pub(crate) fn log_softmax_rows(
    x: &[f64],
    rows: usize,
    cols: usize,
    temperature: f64,
) -> Result<Vec<f64>> {
    if cols < 2 {
        return Err(Error::Shape {
            op: "log_softmax",
            detail: format!("need at least two classes, got {cols}"),
        });
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let mut y = Vec::with_capacity(x.len());
    for (r, row) in x.chunks_exact(cols).take(rows).enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "log_softmax",
                row: r,
            });
        }
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / temperature));
        let log_sum = row.iter().map(|&v| (v / temperature - max).exp()).sum::<f64>().ln();
        y.extend(row.iter().map(|&v| (v / temperature - max) - log_sum));
    }
    Ok(y)
}

/// Row-wise softmax of `x / temperature`.
pub(crate) fn softmax_rows(x: &[f64], rows: usize, cols: usize, temperature: f64) -> Result<Vec<f64>> {
    Ok(log_softmax_rows(x, rows, cols, temperature)?
        .into_iter()
        .map(f64::exp)
        .collect())
}

pub(crate) fn check_distribution(p: &[f64], rows: usize, cols: usize) -> Result<()> {
    for (r, row) in p.chunks_exact(cols).take(rows).enumerate() {
        let sum: f64 = row.iter().sum();
        if row.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (sum - 1.0).abs() > DISTRIBUTION_TOL {
            return Err(Error::NotADistribution { row: r, sum });
        }
    }
    Ok(())
}

fn kl_value(p: &[f64], log_q: &[f64], rows: usize, _cols: usize) -> f64 {
    let total: f64 = p
        .iter()
        .zip(log_q)
        .filter(|(pv, _)| **pv > 0.0)
        .map(|(pv, lq)| pv * (pv.max(PROB_FLOOR).ln() - lq))
        .sum();
    total / rows as f64
}

/// Hyperparameters of one SGD step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdParams {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// SGD with heavy-ball momentum and L2 weight decay:
///
/// ```text
/// v <- momentum * v + grad + weight_decay * param
/// param <- param - lr * v
/// ```
///
/// `velocity` is grown to one zeroed buffer per parameter on first use.
/// Gradients are cleared afterwards. Nothing is updated if any parameter
/// lacks a gradient.
pub fn sgd_step(params: &mut [Tensor], velocity: &mut Vec<Vec<f64>>, hp: SgdParams) -> Result<()> {
    if !(hp.lr > 0.0) || !(0.0..1.0).contains(&hp.momentum) || !(hp.weight_decay >= 0.0) {
        return Err(Error::InvalidArgument(format!("bad SGD hyperparameters {hp:?}")));
    }
    if let Some(index) = params.iter().position(|p| p.grad.is_none()) {
        return Err(Error::MissingGrad { index });
    }
    if velocity.len() != params.len() {
        *velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
    }
    for (p, v) in params.iter_mut().zip(velocity.iter_mut()) {
        let g = p.grad.take().expect("checked above");
        for ((x, vi), gi) in p.values.iter_mut().zip(v.iter_mut()).zip(&g) {
            *vi = hp.momentum * *vi + gi + hp.weight_decay * *x;
            *x -= hp.lr * *vi;
        }
        p.node = None;
    }
    Ok(())
}

/// Compares the tape gradient of `loss_builder` with central differences.
///
/// Returns the largest `|analytic - numeric| / max(1, |analytic|, |numeric|)`
/// over every coordinate of every parameter. `params` are not modified.
pub fn grad_check<F>(loss_builder: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let mut work: Vec<Tensor> = params
        .iter()
        .map(|p| {
            let mut t = p.clone();
            t.requires_grad = true;
            t.grad = None;
            t.node = None;
            t
        })
        .collect();

    let tape = Tape::new();
    let vars: Vec<Var> = work.iter_mut().map(|t| tape.watch(t)).collect();
    let loss = loss_builder(&tape, &vars)?;
    if !tape.scalar(loss)?.is_finite() {
        return Err(Error::InvalidArgument("non-finite loss at the base point".into()));
    }
    tape.backward(loss, work.iter_mut())?;
    let analytic: Vec<Vec<f64>> = work
        .iter_mut()
        .map(|t| t.grad.take().unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let eval = |work: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = work.iter().map(|t| tape.constant(t)).collect();
        let v = tape.scalar(loss_builder(&tape, &vars)?)?;
        if !v.is_finite() {
            return Err(Error::InvalidArgument("non-finite loss at a probe point".into()));
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    for pi in 0..work.len() {
        for k in 0..work[pi].len() {
            let orig = work[pi].values[k];
            work[pi].values[k] = orig + step;
            let plus = eval(&work)?;
            work[pi].values[k] = orig - step;
            let minus = eval(&work)?;
            work[pi].values[k] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[pi][k];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
