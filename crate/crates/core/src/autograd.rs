//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation of one forward pass as a node on a
//! tape. [`Graph::backward`] walks the tape in reverse and returns gradients
//! for every bound parameter. Everything is a 2-D matrix; scalars are `1x1`.
//!
//! The graph is rebuilt for every training step, so parameter values are
//! copied in at bind time and the tape owns all intermediate buffers.

use std::collections::{BTreeMap, HashMap};

use ndarray::{concatenate, s, Array2, Axis};

use crate::error::{Error, Result};

/// Norm below which a vector is considered degenerate for direction-based ops.
pub const NORM_EPS: f64 = 1e-12;

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// A named trainable matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Array2<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Array2<f64>) -> Self {
        Self {
            name: name.into(),
            value,
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Abs(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reverse {
        x: Var,
        lambda: f64,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Array2<f64>,
    },
    NllProbs {
        probs: Var,
        targets: Vec<usize>,
        eps: f64,
    },
    Sum(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar output with respect to bound parameters, keyed by
/// parameter name.
pub type ParamGrads = BTreeMap<String, Array2<f64>>;

/// Tape of one forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<String, Var>,
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

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1x1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Free leaf that receives a gradient but is not a named parameter.
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Bind a parameter into the graph. Binding the same name twice returns
    /// the first binding, so shared weights accumulate a single gradient.
    pub fn param(&mut self, p: &Param) -> Var {
        if let Some(&v) = self.bound.get(&p.name) {
            return v;
        }
        let v = self.push(p.value.clone(), Op::Leaf, true);
        self.bound.insert(p.name.clone(), v);
        v
    }

    /// Copy of `x` with no gradient linkage.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.grad_any(&[a, b]);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let ng = self.grad_any(&[a, b]);
        self.push(value, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        let ng = self.grad_any(&[a, b]);
        self.push(value, Op::Add(a, b), ng)
    }

    /// Broadcast-add a `1xd` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row: bias must be 1xd");
        let value = self.value(a) + self.value(row);
        let ng = self.grad_any(&[a, row]);
        self.push(value, Op::AddRow(a, row), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "sub: shape mismatch");
        let value = self.value(a) - self.value(b);
        let ng = self.grad_any(&[a, b]);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        let ng = self.grad_any(&[a]);
        self.push(value, Op::Scale(a, k), ng)
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| {
            let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
            0.5 * x * (1.0 + t)
        });
        let ng = self.grad_any(&[a]);
        self.push(value, Op::Gelu(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::abs);
        let ng = self.grad_any(&[a]);
        self.push(value, Op::Abs(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let ng = self.grad_any(&[a]);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (both `1xd`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| v * is);
            inv_std.push(is);
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        let ng = self.grad_any(&[x, gamma, beta]);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Row lookup into an embedding table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut value = Array2::zeros((ids.len(), t.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            value.row_mut(r).assign(&t.row(id));
        }
        let ng = self.grad_any(&[table]);
        self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice(s![start..start + len, ..]).to_owned();
        let ng = self.grad_any(&[x]);
        self.push(value, Op::SliceRows { x, start }, ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice(s![.., start..start + len]).to_owned();
        let ng = self.grad_any(&[x]);
        self.push(value, Op::SliceCols { x, start }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        let ng = self.grad_any(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let ng = self.grad_any(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Identity forward; multiplies the incoming gradient by `-lambda`.
    pub fn reverse_grad(&mut self, x: Var, lambda: f64) -> Var {
        let value = self.value(x).clone();
        let ng = self.grad_any(&[x]);
        self.push(value, Op::Reverse { x, lambda }, ng)
    }

    /// Scale every row to unit L2 norm. Fails on a row with norm `<= NORM_EPS`.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let mut value = xv.clone();
        let mut norms = Vec::with_capacity(xv.nrows());
        for (i, mut row) in value.rows_mut().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            if !(n > NORM_EPS) {
                return Err(Error::DegenerateVector(format!("row {i} has norm {n:e}")));
            }
            row.mapv_inplace(|v| v / n);
            norms.push(n);
        }
        let ng = self.grad_any(&[x]);
        Ok(self.push(value, Op::NormalizeRows { x, norms }, ng))
    }

    /// Mean over rows of `-log softmax(logits_i)[targets_i]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len(), "softmax_cross_entropy: target count");
        let probs = softmax_rows(lv);
        let n = targets.len() as f64;
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = lv.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        let ng = self.grad_any(&[logits]);
        self.push(
            Array2::from_elem((1, 1), loss / n),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Mean over rows of `-log clamp(probs_i[targets_i], eps, 1 - eps)`.
    pub fn nll_probs(&mut self, probs: Var, targets: &[usize], eps: f64) -> Var {
        let pv = self.value(probs);
        assert_eq!(pv.nrows(), targets.len(), "nll_probs: target count");
        let n = targets.len() as f64;
        let loss: f64 = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -pv[[i, t]].clamp(eps, 1.0 - eps).ln())
            .sum();
        let ng = self.grad_any(&[probs]);
        self.push(
            Array2::from_elem((1, 1), loss / n),
            Op::NllProbs {
                probs,
                targets: targets.to_vec(),
                eps,
            },
            ng,
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let ng = self.grad_any(&[a]);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Affine map `x · w + b` with `w: in x out`, `b: 1 x out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    /// Reverse pass from a `1x1` output. Returns gradients of every bound
    /// parameter that the output depends on.
    pub fn backward(&self, output: Var) -> ParamGrads {
        let grads = self.backward_all(output);
        let mut out = ParamGrads::new();
        for (name, v) in &self.bound {
            if let Some(g) = &grads[v.0] {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }

    /// Reverse pass returning the gradient of every node (`None` where the
    /// output does not depend on it).
    pub fn backward_all(&self, output: Var) -> Vec<Option<Array2<f64>>> {
        assert_eq!(self.value(output).dim(), (1, 1), "backward: output must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        grads
    }

    fn accumulate(&self, grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(
        &self,
        grads: &mut [Option<Array2<f64>>],
        v: Var,
        f: impl FnOnce(&mut Array2<f64>),
    ) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let shape = self.nodes[v.0].value.dim();
        let acc = grads[v.0].get_or_insert_with(|| Array2::zeros(shape));
        f(acc);
    }

    fn propagate(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.dot(self.value(*b)));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*row) {
                    self.accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, -g);
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g * *k),
            Op::Gelu(a) => {
                let mut ga = self.value(*a).mapv(|x| {
                    let u = GELU_C * (x + GELU_K * x * x * x);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
                });
                ga *= g;
                self.accumulate(grads, *a, ga);
            }
            Op::Abs(a) => {
                let mut ga = self.value(*a).mapv(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                ga *= g;
                self.accumulate(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = g * y;
                for (mut row, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                    let dot = row.sum();
                    row.zip_mut_with(&yrow, |gy, &yv| *gy -= yv * dot);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                if self.requires_grad(*gamma) {
                    self.accumulate(grads, *gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.requires_grad(*beta) {
                    self.accumulate(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.requires_grad(*x) {
                    let d = xhat.ncols() as f64;
                    let gxhat = g * self.value(*gamma);
                    let mut gx = Array2::zeros(xhat.dim());
                    for (r, mut out) in gx.rows_mut().into_iter().enumerate() {
                        let gr = gxhat.row(r);
                        let xr = xhat.row(r);
                        let sum_g = gr.sum();
                        let sum_gx = gr.dot(&xr);
                        let k = inv_std[r] / d;
                        for c in 0..out.len() {
                            out[c] = k * (d * gr[c] - sum_g - xr[c] * sum_gx);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Gather { table, ids } => {
                self.accumulate_with(grads, *table, |acc| {
                    for (r, &id) in ids.iter().enumerate() {
                        let mut dst = acc.row_mut(id);
                        dst += &g.row(r);
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let len = g.nrows();
                self.accumulate_with(grads, *x, |acc| {
                    let mut dst = acc.slice_mut(s![*start..*start + len, ..]);
                    dst += g;
                });
            }
            Op::SliceCols { x, start } => {
                let len = g.ncols();
                self.accumulate_with(grads, *x, |acc| {
                    let mut dst = acc.slice_mut(s![.., *start..*start + len]);
                    dst += g;
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).nrows();
                    if self.requires_grad(*p) {
                        self.accumulate(grads, *p, g.slice(s![offset..offset + n, ..]).to_owned());
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).ncols();
                    if self.requires_grad(*p) {
                        self.accumulate(grads, *p, g.slice(s![.., offset..offset + n]).to_owned());
                    }
                    offset += n;
                }
            }
            Op::Reverse { x, lambda } => self.accumulate(grads, *x, g * -*lambda),
            Op::NormalizeRows { x, norms } => {
                let y = &node.value;
                let mut gx = g.clone();
                for (r, mut row) in gx.rows_mut().into_iter().enumerate() {
                    let yr = y.row(r);
                    let dot = row.dot(&yr);
                    let n = norms[r];
                    row.zip_mut_with(&yr, |gv, &yv| *gv = (*gv - yv * dot) / n);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let upstream = g[[0, 0]];
                let n = targets.len() as f64;
                let mut gl = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    gl[[i, t]] -= 1.0;
                }
                gl *= upstream / n;
                self.accumulate(grads, *logits, gl);
            }
            Op::NllProbs {
                probs,
                targets,
                eps,
            } => {
                let upstream = g[[0, 0]];
                let pv = self.value(*probs);
                let n = targets.len() as f64;
                let mut gp = Array2::zeros(pv.dim());
                for (i, &t) in targets.iter().enumerate() {
                    let p = pv[[i, t]];
                    if p > *eps && p < 1.0 - *eps {
                        gp[[i, t]] = -upstream / (n * p);
                    }
                }
                self.accumulate(grads, *probs, gp);
            }
            Op::Sum(a) => {
                let shape = self.value(*a).dim();
                self.accumulate(grads, *a, Array2::from_elem(shape, g[[0, 0]]));
            }
        }
    }
}

/// Numerically stable row softmax.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}
