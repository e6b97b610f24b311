//! Tape-based reverse-mode automatic differentiation over `f64` matrices.
//!
//! Everything in this crate that needs a gradient — training the miniature
//! vision-language models and descending on block-wise feature similarity
//! with respect to image pixels — runs through this one engine. The design
//! is deliberately small: a [`Tape`] records coarse matrix operations as they
//! execute, and [`Tape::backward`] replays them in reverse, accumulating
//! adjoints. There is no graph reuse, no broadcasting zoo, no in-place
//! mutation; a forward pass builds a fresh tape and drops it afterwards,
//! which keeps model parameters shareable across threads.
//!
//! Operations are matrix-level (matmul, row softmax, layer norm, GELU,
//! gathers) rather than scalar-level so a full forward pass stays in the
//! hundreds of nodes. All values are `f64`: the gradient-fidelity tests in
//! this crate compare analytic gradients against central finite differences
//! at relative error below `1e-4`, which leaves no headroom for `f32`
//! round-off through a dozen matrix products.
//!
//! Shape mismatches are programming errors, not runtime conditions, so the
//! ops panic on them just like `ndarray` does.

use ndarray::{Array2, Axis};

/// Dense row-major `f64` matrix. All tensors in this crate are rank-2;
/// vectors are `1×d` rows and scalars are `1×1`.
pub type Matrix = Array2<f64>;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that
/// produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Norm threshold below which cosine similarity is defined as zero (with a
/// zero gradient) instead of dividing by a vanishing norm.
pub const COS_NORM_FLOOR: f64 = 1e-12;

const LAYER_NORM_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    /// `[n×d] + [1×d]` with the row broadcast down the rows.
    AddRow(usize, usize),
    /// `[n×d] ⊙ [1×d]` with the row broadcast down the rows.
    MulRow(usize, usize),
    MatMul(usize, usize),
    /// `A @ Bᵀ` without materialising the transpose.
    MatMulNt(usize, usize),
    SoftmaxRows(usize),
    Gelu(usize),
    /// Row-wise standardisation `(x − μ) / √(σ² + ε)` (layer norm without
    /// the affine part; compose with [`Tape::mul_row`]/[`Tape::add_row`]).
    NormRows(usize),
    /// `out[i, :] = table[ids[i], :]`.
    GatherRows(usize, Vec<usize>),
    /// `out.flat[j] = src.flat[index[j]]`, reshaped to `rows × cols`.
    GatherFlat {
        src: usize,
        index: Vec<usize>,
    },
    ConcatRows(Vec<usize>),
    SliceRows {
        src: usize,
        start: usize,
        len: usize,
    },
    /// Sum of all entries, as a `1×1` matrix.
    SumAll(usize),
    /// Per-row cosine similarity against a fixed reference matrix, as `n×1`.
    /// Rows whose own or reference norm falls below [`COS_NORM_FLOOR`]
    /// produce exactly `0.0` and propagate a zero gradient.
    CosRowsVsConst {
        src: usize,
        reference: Matrix,
    },
    /// Mean cross-entropy of row `i` against class `targets[i]`, as `1×1`.
    CrossEntropyMean {
        logits: usize,
        targets: Vec<usize>,
    },
}

struct Node {
    value: Matrix,
    needs_grad: bool,
    op: Op,
}

/// Records a single forward computation for later reverse traversal.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, if any was accumulated.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Moves the gradient for `v` out, leaving `None` behind.
    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads[v.0].take()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a recorded node.
    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Registers a matrix that does not require a gradient. Backward passes
    /// prune every subgraph that depends only on constants.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Registers a matrix whose gradient should be tracked.
    pub fn variable(&mut self, value: Matrix) -> Var {
        self.push(value, true, Op::Leaf)
    }

    fn push(&mut self, value: Matrix, needs_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let needs = self.needs(&[a.0, b.0]);
        self.push(value, needs, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let needs = self.needs(&[a.0, b.0]);
        self.push(value, needs, Op::Sub(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x * c);
        let needs = self.needs(&[a.0]);
        self.push(value, needs, Op::Scale(a.0, c))
    }

    /// Adds a `1×d` row to every row of an `n×d` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (xv, rv) = (&self.nodes[x.0].value, &self.nodes[row.0].value);
        assert_eq!(rv.nrows(), 1, "add_row: row operand must be 1×d");
        assert_eq!(xv.ncols(), rv.ncols(), "add_row: column mismatch");
        let value = xv + &rv.row(0);
        let needs = self.needs(&[x.0, row.0]);
        self.push(value, needs, Op::AddRow(x.0, row.0))
    }

    /// Multiplies every row of an `n×d` matrix elementwise by a `1×d` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let (xv, rv) = (&self.nodes[x.0].value, &self.nodes[row.0].value);
        assert_eq!(rv.nrows(), 1, "mul_row: row operand must be 1×d");
        assert_eq!(xv.ncols(), rv.ncols(), "mul_row: column mismatch");
        let value = xv * &rv.row(0);
        let needs = self.needs(&[x.0, row.0]);
        self.push(value, needs, Op::MulRow(x.0, row.0))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        let needs = self.needs(&[a.0, b.0]);
        self.push(value, needs, Op::MatMul(a.0, b.0))
    }

    /// `A @ Bᵀ`; used for attention scores.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value.t());
        let needs = self.needs(&[a.0, b.0]);
        self.push(value, needs, Op::MatMulNt(a.0, b.0))
    }

    /// Numerically stable softmax applied to each row independently.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = softmax_rows_value(&self.nodes[x.0].value);
        let needs = self.needs(&[x.0]);
        self.push(value, needs, Op::SoftmaxRows(x.0))
    }

    /// GELU with the tanh approximation. Smooth everywhere, which matters
    /// for the finite-difference gradient checks.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.mapv(gelu_scalar);
        let needs = self.needs(&[x.0]);
        self.push(value, needs, Op::Gelu(x.0))
    }

    /// Row-wise standardisation (mean 0, variance 1 per row).
    pub fn norm_rows(&mut self, x: Var) -> Var {
        let value = norm_rows_value(&self.nodes[x.0].value);
        let needs = self.needs(&[x.0]);
        self.push(value, needs, Op::NormRows(x.0))
    }

    /// Row lookup: `out[i, :] = table[ids[i], :]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = &self.nodes[table.0].value;
        let mut value = Matrix::zeros((ids.len(), tv.ncols()));
        for (i, &id) in ids.iter().enumerate() {
            assert!(id < tv.nrows(), "gather_rows: id {id} out of range");
            value.row_mut(i).assign(&tv.row(id));
        }
        let needs = self.needs(&[table.0]);
        self.push(value, needs, Op::GatherRows(table.0, ids.to_vec()))
    }

    /// Arbitrary flat-index gather reshaped to `rows × cols`; the workhorse
    /// behind image patch extraction.
    pub fn gather_flat(&mut self, src: Var, index: &[usize], rows: usize, cols: usize) -> Var {
        assert_eq!(index.len(), rows * cols, "gather_flat: index length");
        let sv = &self.nodes[src.0].value;
        let flat = sv.as_slice().expect("gather_flat: source must be contiguous");
        let data: Vec<f64> = index.iter().map(|&i| flat[i]).collect();
        let value = Matrix::from_shape_vec((rows, cols), data).expect("gather_flat shape");
        let needs = self.needs(&[src.0]);
        self.push(
            value,
            needs,
            Op::GatherFlat {
                src: src.0,
                index: index.to_vec(),
            },
        )
    }

    /// Stacks matrices with identical column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: empty input");
        let cols = self.nodes[parts[0].0].value.ncols();
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.nrows()).sum();
        let mut value = Matrix::zeros((total, cols));
        let mut at = 0;
        for p in parts {
            let pv = &self.nodes[p.0].value;
            assert_eq!(pv.ncols(), cols, "concat_rows: column mismatch");
            value
                .slice_mut(ndarray::s![at..at + pv.nrows(), ..])
                .assign(pv);
            at += pv.nrows();
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let needs = self.needs(&ids);
        self.push(value, needs, Op::ConcatRows(ids))
    }

    /// Contiguous row slice `[start, start + len)`.
    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Var {
        let sv = &self.nodes[src.0].value;
        assert!(start + len <= sv.nrows(), "slice_rows: out of range");
        let value = sv.slice(ndarray::s![start..start + len, ..]).to_owned();
        let needs = self.needs(&[src.0]);
        self.push(
            value,
            needs,
            Op::SliceRows {
                src: src.0,
                start,
                len,
            },
        )
    }

    /// Sum of every entry, as a `1×1` matrix.
    pub fn sum_all(&mut self, src: Var) -> Var {
        let value = Matrix::from_elem((1, 1), self.nodes[src.0].value.sum());
        let needs = self.needs(&[src.0]);
        self.push(value, needs, Op::SumAll(src.0))
    }

    /// Cosine similarity of each row of `src` against the matching row of a
    /// fixed `reference`, yielding `n×1`. Rows where either side has norm
    /// below [`COS_NORM_FLOOR`] yield `0.0` with a zero gradient.
    pub fn cos_rows_vs_const(&mut self, src: Var, reference: &Matrix) -> Var {
        let sv = &self.nodes[src.0].value;
        assert_eq!(sv.dim(), reference.dim(), "cos_rows_vs_const: shape mismatch");
        let mut value = Matrix::zeros((sv.nrows(), 1));
        for i in 0..sv.nrows() {
            value[(i, 0)] = cosine_rows(&reference.row(i), &sv.row(i));
        }
        let needs = self.needs(&[src.0]);
        self.push(
            value,
            needs,
            Op::CosRowsVsConst {
                src: src.0,
                reference: reference.clone(),
            },
        )
    }

    /// Mean cross-entropy between row softmaxes of `logits` and integer
    /// `targets`, as `1×1`.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = &self.nodes[logits.0].value;
        assert_eq!(lv.nrows(), targets.len(), "cross_entropy_mean: row count");
        let probs = softmax_rows_value(lv);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            assert!(t < lv.ncols(), "cross_entropy_mean: target out of range");
            total -= probs[(i, t)].max(1e-300).ln();
        }
        let value = Matrix::from_elem((1, 1), total / targets.len() as f64);
        let needs = self.needs(&[logits.0]);
        self.push(
            value,
            needs,
            Op::CrossEntropyMean {
                logits: logits.0,
                targets: targets.to_vec(),
            },
        )
    }

    /// Reverse pass from a scalar (`1×1`) root. Returns one adjoint per
    /// gradient-requiring node reachable from the root; constants and
    /// subgraphs feeding only constants are skipped.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.nodes[root.0].value.dim(),
            (1, 1),
            "backward: root must be a 1×1 scalar"
        );
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::from_elem((1, 1), 1.0));

        for id in (0..=root.0).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(gy) = grads[id].take() else { continue };
            self.propagate(id, &gy, &mut grads);
            grads[id] = Some(gy);
        }
        Gradients { grads }
    }

    fn propagate(&self, id: usize, gy: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.mapv(|x| -x));
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, gy.mapv(|x| x * c));
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, gy.clone());
                let row_grad = gy.sum_axis(Axis(0)).insert_axis(Axis(0));
                self.accumulate(grads, *row, row_grad);
            }
            Op::MulRow(x, row) => {
                let rv = &self.nodes[*row].value;
                let xv = &self.nodes[*x].value;
                self.accumulate(grads, *x, gy * &rv.row(0));
                let row_grad = (gy * xv).sum_axis(Axis(0)).insert_axis(Axis(0));
                self.accumulate(grads, *row, row_grad);
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                self.accumulate(grads, *a, gy.dot(&bv.t()));
                self.accumulate(grads, *b, av.t().dot(gy));
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                self.accumulate(grads, *a, gy.dot(bv));
                self.accumulate(grads, *b, gy.t().dot(av));
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut gx = Matrix::zeros(y.raw_dim());
                for i in 0..y.nrows() {
                    let yi = y.row(i);
                    let gi = gy.row(i);
                    let dot: f64 = yi.iter().zip(gi.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..y.ncols() {
                        gx[(i, j)] = yi[j] * (gi[j] - dot);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Gelu(x) => {
                let xv = &self.nodes[*x].value;
                let mut gx = xv.mapv(gelu_grad_scalar);
                gx *= gy;
                self.accumulate(grads, *x, gx);
            }
            Op::NormRows(x) => {
                let xv = &self.nodes[*x].value;
                let y = &node.value;
                let d = xv.ncols() as f64;
                let mut gx = Matrix::zeros(xv.raw_dim());
                for i in 0..xv.nrows() {
                    let row = xv.row(i);
                    let mean = row.mean().unwrap();
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
                    let sigma = (var + LAYER_NORM_EPS).sqrt();
                    let gi = gy.row(i);
                    let yi = y.row(i);
                    let g_mean: f64 = gi.sum() / d;
                    let gy_dot_y: f64 = gi.iter().zip(yi.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
                    for j in 0..xv.ncols() {
                        gx[(i, j)] = (gi[j] - g_mean - yi[j] * gy_dot_y) / sigma;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::GatherRows(table, ids) => {
                let tv = &self.nodes[*table].value;
                let mut gt = Matrix::zeros(tv.raw_dim());
                for (i, &id) in ids.iter().enumerate() {
                    let mut target = gt.row_mut(id);
                    target += &gy.row(i);
                }
                self.accumulate(grads, *table, gt);
            }
            Op::GatherFlat { src, index } => {
                let sv = &self.nodes[*src].value;
                let mut gs = Matrix::zeros(sv.raw_dim());
                {
                    // `gy` may arrive in any memory layout; logical iteration
                    // order matches the forward fill order.
                    let gs_flat = gs.as_slice_mut().expect("fresh zeros are contiguous");
                    for (&i, &g) in index.iter().zip(gy.iter()) {
                        gs_flat[i] += g;
                    }
                }
                self.accumulate(grads, *src, gs);
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let rows = self.nodes[p].value.nrows();
                    let part_grad = gy.slice(ndarray::s![at..at + rows, ..]).to_owned();
                    self.accumulate(grads, p, part_grad);
                    at += rows;
                }
            }
            Op::SliceRows { src, start, len } => {
                let sv = &self.nodes[*src].value;
                let mut gs = Matrix::zeros(sv.raw_dim());
                gs.slice_mut(ndarray::s![*start..*start + *len, ..]).assign(gy);
                self.accumulate(grads, *src, gs);
            }
            Op::SumAll(src) => {
                let sv = &self.nodes[*src].value;
                let g = Matrix::from_elem(sv.raw_dim(), gy[(0, 0)]);
                self.accumulate(grads, *src, g);
            }
            Op::CosRowsVsConst { src, reference } => {
                let sv = &self.nodes[*src].value;
                let mut gs = Matrix::zeros(sv.raw_dim());
                for i in 0..sv.nrows() {
                    let r = reference.row(i);
                    let x = sv.row(i);
                    let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let xn = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if rn < COS_NORM_FLOOR || xn < COS_NORM_FLOOR {
                        continue; // defined as 0 with zero gradient
                    }
                    let dot: f64 = r.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
                    let cos = dot / (rn * xn);
                    let g = gy[(i, 0)];
                    for j in 0..sv.ncols() {
                        gs[(i, j)] = g * (r[j] / (rn * xn) - cos * x[j] / (xn * xn));
                    }
                }
                self.accumulate(grads, *src, gs);
            }
            Op::CrossEntropyMean { logits, targets } => {
                let lv = &self.nodes[*logits].value;
                let mut gl = softmax_rows_value(lv);
                let n = targets.len() as f64;
                for (i, &t) in targets.iter().enumerate() {
                    gl[(i, t)] -= 1.0;
                }
                gl.mapv_inplace(|v| v / n);
                gl *= gy[(0, 0)];
                self.accumulate(grads, *logits, gl);
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], id: usize, delta: Matrix) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut grads[id] {
            Some(existing) => *existing += &delta,
            slot @ None => *slot = Some(delta),
        }
    }
}

/// Numerically stable row softmax of a plain matrix.
pub fn softmax_rows_value(x: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.raw_dim());
    for i in 0..x.nrows() {
        let row = x.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..x.ncols() {
            let e = (row[j] - max).exp();
            out[(i, j)] = e;
            sum += e;
        }
        for j in 0..x.ncols() {
            out[(i, j)] /= sum;
        }
    }
    out
}

fn norm_rows_value(x: &Matrix) -> Matrix {
    let d = x.ncols() as f64;
    let mut out = Matrix::zeros(x.raw_dim());
    for i in 0..x.nrows() {
        let row = x.row(i);
        let mean = row.mean().unwrap();
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
        let sigma = (var + LAYER_NORM_EPS).sqrt();
        for j in 0..x.ncols() {
            out[(i, j)] = (row[j] - mean) / sigma;
        }
    }
    out
}

fn gelu_scalar(x: f64) -> f64 {
    const S: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
    const A: f64 = 0.044715;
    0.5 * x * (1.0 + (S * (x + A * x.powi(3))).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    const S: f64 = 0.797_884_560_802_865_4;
    const A: f64 = 0.044715;
    let u = S * (x + A * x.powi(3));
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * S * (1.0 + 3.0 * A * x * x)
}

/// Cosine similarity between two row views, with the zero-norm floor rule.
pub fn cosine_rows(a: &ndarray::ArrayView1<'_, f64>, b: &ndarray::ArrayView1<'_, f64>) -> f64 {
    let an = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let bn = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if an < COS_NORM_FLOOR || bn < COS_NORM_FLOOR {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    dot / (an * bn)
}

/// Cosine similarity between two slices, with the zero-norm floor rule.
pub fn cosine_slices(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine_slices: length mismatch");
    let an = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let bn = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if an < COS_NORM_FLOOR || bn < COS_NORM_FLOOR {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    dot / (an * bn)
}
