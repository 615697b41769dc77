//! Minimal reverse-mode differentiation over dense row-major matrices.
//!
//! Only the operations the tiny encoder-decoder needs are provided. Parameter
//! leaves borrow from a [`Params`] store, so building a graph never copies
//! weights.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `a · b`
fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows, "matmul shape mismatch");
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let x = a.data[i * a.cols + k];
            if x == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &y) in orow.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
    out
}

/// `a · bᵀ`
fn matmul_bt(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.cols, "matmul_bt shape mismatch");
    let mut out = Mat::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = arow.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · b`
fn matmul_at(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.rows, b.rows, "matmul_at shape mismatch");
    let mut out = Mat::zeros(a.cols, b.cols);
    for r in 0..a.rows {
        let brow = b.row(r);
        for i in 0..a.cols {
            let x = a.data[r * a.cols + i];
            if x == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &y) in orow.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Named parameter matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub names: Vec<String>,
    pub mats: Vec<Mat>,
}

impl Params {
    pub fn zeros_like(&self) -> Vec<Mat> {
        self.mats.iter().map(|m| Mat::zeros(m.rows, m.cols)).collect()
    }

    pub fn count(&self) -> usize {
        self.mats.iter().map(|m| m.data.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Param(usize),
    Gather { table: Var, ids: Vec<usize> },
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    Gelu(Var),
    Nll { logits: Var, targets: Vec<usize> },
}

struct Node {
    value: Option<Mat>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p Params,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p Params) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.mats.len()],
        }
    }

    pub fn value(&self, v: Var) -> &Mat {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(i)) => &self.params.mats[*i],
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value: Some(value), op });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for parameter `i`; one node per parameter per tape.
    pub fn param(&mut self, i: usize) -> Var {
        if let Some(v) = self.param_vars[i] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(i),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[i] = Some(v);
        v
    }

    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Mat::zeros(ids.len(), t.cols);
        for (r, &id) in ids.iter().enumerate() {
            out.data[r * t.cols..(r + 1) * t.cols].copy_from_slice(t.row(id));
        }
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = matmul(self.value(a), self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let out = matmul_bt(self.value(a), self.value(b));
        self.push(out, Op::MatMulBT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        let bv = self.value(b);
        assert_eq!((out.rows, out.cols), (bv.rows, bv.cols), "add shape mismatch");
        out.add_assign(bv);
        self.push(out, Op::Add(a, b))
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let mut out = self.value(a).clone();
        let r = self.value(row);
        assert_eq!((r.rows, r.cols), (1, out.cols), "add_row shape mismatch");
        for chunk in out.data.chunks_mut(r.cols) {
            for (o, &b) in chunk.iter_mut().zip(&r.data) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|x| *x *= s);
        self.push(out, Op::Scale(a, s))
    }

    /// Row-wise softmax; with `causal`, entry `(i, j)` for `j > i` is masked out.
    pub fn softmax(&mut self, x: Var, causal: bool) -> Var {
        let xv = self.value(x);
        let mut out = Mat::zeros(xv.rows, xv.cols);
        for i in 0..xv.rows {
            let lim = if causal { (i + 1).min(xv.cols) } else { xv.cols };
            let row = &xv.row(i)[..lim];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                out.data[i * xv.cols + j] = e;
                z += e;
            }
            for j in 0..lim {
                out.data[i * xv.cols + j] /= z;
            }
        }
        self.push(out, Op::Softmax(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v = gelu(*v));
        self.push(out, Op::Gelu(x))
    }

    /// `Σ_r −log softmax(logits_r)[targets_r]` as a `1 × 1` value.
    pub fn nll(&mut self, logits: Var, targets: &[usize]) -> Var {
        let l = self.value(logits);
        assert_eq!(l.rows, targets.len(), "nll needs one target per row");
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            total += crate::lm::logsumexp(l.row(r)) - l.at(r, t);
        }
        self.push(
            Mat {
                rows: 1,
                cols: 1,
                data: vec![total],
            },
            Op::Nll {
                logits,
                targets: targets.to_vec(),
            },
        )
    }

    /// Back-propagates from the scalar `root` and returns one gradient per parameter.
    pub fn backward(self, root: Var) -> Vec<Mat> {
        let Tape {
            params,
            nodes,
            param_vars: _,
        } = self;
        let value = |v: Var| -> &Mat {
            match (&nodes[v.0].value, &nodes[v.0].op) {
                (Some(m), _) => m,
                (None, Op::Param(i)) => &params.mats[*i],
                _ => unreachable!(),
            }
        };
        let mut grads: Vec<Option<Mat>> = (0..nodes.len()).map(|_| None).collect();
        let rv = value(root);
        assert_eq!((rv.rows, rv.cols), (1, 1), "backward needs a scalar root");
        grads[root.0] = Some(Mat {
            rows: 1,
            cols: 1,
            data: vec![1.0],
        });
        let mut param_grads = params.zeros_like();

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &nodes[idx].op {
                Op::Param(i) => param_grads[*i].add_assign(&g),
                Op::Gather { table, ids } => {
                    let t = value(*table);
                    let mut gt = Mat::zeros(t.rows, t.cols);
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..t.cols {
                            gt.data[id * t.cols + c] += g.data[r * t.cols + c];
                        }
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::MatMul(a, b) => {
                    let ga = matmul_bt(&g, value(*b));
                    let gb = matmul_at(value(*a), &g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulBT(a, b) => {
                    let ga = matmul(&g, value(*b));
                    let gb = matmul_at(&g, value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::AddRow(a, row) => {
                    let mut gr = Mat::zeros(1, g.cols);
                    for chunk in g.data.chunks(g.cols) {
                        for (o, &x) in gr.data.iter_mut().zip(chunk) {
                            *o += x;
                        }
                    }
                    acc(&mut grads, *a, g);
                    acc(&mut grads, *row, gr);
                }
                Op::Scale(a, s) => {
                    let mut ga = g;
                    ga.data.iter_mut().for_each(|x| *x *= s);
                    acc(&mut grads, *a, ga);
                }
                Op::Softmax(x) => {
                    let y = nodes[idx].value.as_ref().unwrap();
                    let mut gx = Mat::zeros(y.rows, y.cols);
                    for i in 0..y.rows {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..y.cols {
                            gx.data[i * y.cols + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Gelu(x) => {
                    let xv = value(*x);
                    let mut gx = g;
                    for (gv, &xv) in gx.data.iter_mut().zip(&xv.data) {
                        *gv *= gelu_grad(xv);
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Nll { logits, targets } => {
                    let l = value(*logits);
                    let scale = g.data[0];
                    let mut gl = Mat::zeros(l.rows, l.cols);
                    for (r, &t) in targets.iter().enumerate() {
                        let z = crate::lm::logsumexp(l.row(r));
                        for c in 0..l.cols {
                            gl.data[r * l.cols + c] = scale * (l.at(r, c) - z).exp();
                        }
                        gl.data[r * l.cols + t] -= scale;
                    }
                    acc(&mut grads, *logits, gl);
                }
            }
        }
        param_grads
    }
}
