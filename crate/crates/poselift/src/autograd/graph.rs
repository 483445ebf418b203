//! The computation tape: nodes, forward operations and backpropagation.

use ndarray::{concatenate, Array2, Axis};

use super::{AutogradError, Result};

/// Handle to a node in a [`Graph`]. Only valid for the graph it came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// How the second operand of an elementwise op is broadcast.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Broadcast {
    /// Shapes equal.
    Same,
    /// `b` is `1 x d`, applied to every row of `a`.
    RowVec,
    /// `b` is `n x 1`, applied to every column of `a`.
    ColVec,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize, Broadcast),
    Sub(usize, usize, Broadcast),
    Mul(usize, usize, Broadcast),
    MatMul(usize, usize),
    ScalarMul(usize, f64),
    AddScalar(usize),
    Sum(usize),
    Mean(usize),
    Square(usize),
    Sqrt(usize),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Exp(usize),
    Sin(usize),
    Cos(usize),
    Recip(usize, f64),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize, usize),
    Reshape(usize),
}

struct Node {
    value: Array2<f64>,
    grad: Option<Array2<f64>>,
    op: Op,
}

/// A reverse-mode AD tape. Nodes are appended in topological order, so
/// backpropagation is a single reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn broadcast_kind(
    op: &'static str,
    a: (usize, usize),
    b: (usize, usize),
) -> Result<Broadcast> {
    if a == b {
        Ok(Broadcast::Same)
    } else if b == (1, a.1) {
        Ok(Broadcast::RowVec)
    } else if b == (a.0, 1) {
        Ok(Broadcast::ColVec)
    } else {
        Err(AutogradError::ShapeMismatch {
            op,
            left: a,
            right: b,
        })
    }
}

fn apply_broadcast<F>(a: &Array2<f64>, b: &Array2<f64>, kind: Broadcast, f: F) -> Array2<f64>
where
    F: Fn(f64, f64) -> f64,
{
    let mut out = a.clone();
    match kind {
        Broadcast::Same => {
            ndarray::Zip::from(&mut out).and(b).for_each(|o, &bv| *o = f(*o, bv));
        }
        Broadcast::RowVec => {
            for mut row in out.rows_mut() {
                for (o, &bv) in row.iter_mut().zip(b.row(0).iter()) {
                    *o = f(*o, bv);
                }
            }
        }
        Broadcast::ColVec => {
            for (mut row, &bv) in out.rows_mut().into_iter().zip(b.column(0).iter()) {
                for o in row.iter_mut() {
                    *o = f(*o, bv);
                }
            }
        }
    }
    out
}

/// Reduce an upstream gradient back onto the broadcast operand's shape.
fn reduce_broadcast(g: &Array2<f64>, kind: Broadcast) -> Array2<f64> {
    match kind {
        Broadcast::Same => g.clone(),
        Broadcast::RowVec => {
            let s = g.sum_axis(Axis(0));
            s.insert_axis(Axis(0))
        }
        Broadcast::ColVec => {
            let s = g.sum_axis(Axis(1));
            s.insert_axis(Axis(1))
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Insert a leaf holding `value`. Leaves are inputs, constants and
    /// bound parameters alike; what distinguishes a parameter is that its
    /// gradient gets read back after `backward`.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// 1x1 leaf.
    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(Array2::from_elem((1, 1), v))
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// Accumulated gradient of `v`; zeros if `v` was never reached by a
    /// backward pass.
    pub fn grad(&self, v: Var) -> Array2<f64> {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => Array2::zeros(self.nodes[v.0].value.dim()),
        }
    }

    /// Clear all accumulated gradients.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = broadcast_kind("add", self.shape(a), self.shape(b))?;
        let value = apply_broadcast(
            &self.nodes[a.0].value,
            &self.nodes[b.0].value,
            kind,
            |x, y| x + y,
        );
        Ok(self.push(value, Op::Add(a.0, b.0, kind)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = broadcast_kind("sub", self.shape(a), self.shape(b))?;
        let value = apply_broadcast(
            &self.nodes[a.0].value,
            &self.nodes[b.0].value,
            kind,
            |x, y| x - y,
        );
        Ok(self.push(value, Op::Sub(a.0, b.0, kind)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = broadcast_kind("mul", self.shape(a), self.shape(b))?;
        let value = apply_broadcast(
            &self.nodes[a.0].value,
            &self.nodes[b.0].value,
            kind,
            |x, y| x * y,
        );
        Ok(self.push(value, Op::Mul(a.0, b.0, kind)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(AutogradError::ShapeMismatch {
                op: "matmul",
                left: (ar, ac),
                right: (br, bc),
            });
        }
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        Ok(self.push(value, Op::MatMul(a.0, b.0)))
    }

    pub fn scalar_mul(&mut self, a: Var, c: f64) -> Var {
        let value = &self.nodes[a.0].value * c;
        self.push(value, Op::ScalarMul(a.0, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = &self.nodes[a.0].value + c;
        self.push(value, Op::AddScalar(a.0))
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        self.push(Array2::from_elem((1, 1), s), Op::Sum(a.0))
    }

    /// Mean of all entries, as a 1x1 node.
    pub fn mean(&mut self, a: Var) -> Var {
        let len = self.nodes[a.0].value.len() as f64;
        let s = self.nodes[a.0].value.sum() / len;
        self.push(Array2::from_elem((1, 1), s), Op::Mean(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x * x);
        self.push(value, Op::Square(a.0))
    }

    /// Elementwise square root. Inputs must be non-negative.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.nodes[a.0].value.iter().any(|x| *x < 0.0) {
            return Err(AutogradError::Domain { op: "sqrt" });
        }
        let value = self.nodes[a.0].value.mapv(f64::sqrt);
        Ok(self.push(value, Op::Sqrt(a.0)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::tanh);
        self.push(value, Op::Tanh(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(value, Op::Sigmoid(a.0))
    }

    /// `ln(1 + e^x)`, numerically stable for large |x|.
    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x.max(0.0) + (-x.abs()).exp().ln_1p());
        self.push(value, Op::Softplus(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::exp);
        self.push(value, Op::Exp(a.0))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::sin);
        self.push(value, Op::Sin(a.0))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::cos);
        self.push(value, Op::Cos(a.0))
    }

    /// Elementwise `1/x` with an epsilon guard: inputs with `|x| < eps`
    /// are clamped to `eps` (keeping their sign) before division, and
    /// their gradient is zero in the clamped region.
    pub fn recip(&mut self, a: Var, eps: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| {
            let g = if x.abs() < eps {
                if x < 0.0 {
                    -eps
                } else {
                    eps
                }
            } else {
                x
            };
            1.0 / g
        });
        self.push(value, Op::Recip(a.0, eps))
    }

    /// Concatenate along columns; all parts must share a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(AutogradError::ShapeMismatch {
                op: "concat_cols",
                left: (0, 0),
                right: (0, 0),
            });
        }
        let rows = self.shape(parts[0]).0;
        for p in parts {
            if self.shape(*p).0 != rows {
                return Err(AutogradError::ShapeMismatch {
                    op: "concat_cols",
                    left: (rows, self.shape(parts[0]).1),
                    right: self.shape(*p),
                });
            }
        }
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let value = concatenate(Axis(1), &views).expect("row counts checked");
        Ok(self.push(value, Op::ConcatCols(parts.iter().map(|p| p.0).collect())))
    }

    /// Concatenate along rows; all parts must share a column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(AutogradError::ShapeMismatch {
                op: "concat_rows",
                left: (0, 0),
                right: (0, 0),
            });
        }
        let cols = self.shape(parts[0]).1;
        for p in parts {
            if self.shape(*p).1 != cols {
                return Err(AutogradError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.shape(parts[0]),
                    right: self.shape(*p),
                });
            }
        }
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let value = concatenate(Axis(0), &views).expect("column counts checked");
        Ok(self.push(value, Op::ConcatRows(parts.iter().map(|p| p.0).collect())))
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start >= end || end > c {
            return Err(AutogradError::ShapeMismatch {
                op: "slice_cols",
                left: (r, c),
                right: (start, end),
            });
        }
        let value = self.nodes[a.0]
            .value
            .slice(ndarray::s![.., start..end])
            .to_owned();
        Ok(self.push(value, Op::SliceCols(a.0, start, end)))
    }

    /// Reinterpret `a` with a new shape holding the same number of
    /// elements (row-major order preserved).
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if r * c != rows * cols {
            return Err(AutogradError::ShapeMismatch {
                op: "reshape",
                left: (r, c),
                right: (rows, cols),
            });
        }
        let value = self.nodes[a.0]
            .value
            .clone()
            .into_shape_with_order((rows, cols))
            .expect("element count checked");
        Ok(self.push(value, Op::Reshape(a.0)))
    }

    /// Backpropagate from a scalar root, adding this pass's adjoints into
    /// each node's accumulated gradient. Calling twice without
    /// [`Graph::zero_grads`] doubles every gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.shape(root) != (1, 1) {
            return Err(AutogradError::NonScalarRoot {
                shape: self.shape(root),
            });
        }
        // Per-pass adjoints, kept separate from the persistent grads so
        // that repeated backward calls accumulate linearly.
        let mut adj: Vec<Option<Array2<f64>>> = (0..=root.0).map(|_| None).collect();
        adj[root.0] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            let slot = &mut self.nodes[i].grad;
            match slot {
                Some(acc) => *acc += &g,
                None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn accumulate(adj: &mut [Option<Array2<f64>>], idx: usize, delta: Array2<f64>) {
        match &mut adj[idx] {
            Some(acc) => *acc += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, i: usize, g: &Array2<f64>, adj: &mut [Option<Array2<f64>>]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b, kind) => {
                Self::accumulate(adj, a, g.clone());
                Self::accumulate(adj, b, reduce_broadcast(g, kind));
            }
            Op::Sub(a, b, kind) => {
                Self::accumulate(adj, a, g.clone());
                Self::accumulate(adj, b, -reduce_broadcast(g, kind));
            }
            Op::Mul(a, b, kind) => {
                let da = apply_broadcast(g, &self.nodes[b].value, kind, |x, y| x * y);
                Self::accumulate(adj, a, da);
                let ga = g * &self.nodes[a].value;
                Self::accumulate(adj, b, reduce_broadcast(&ga, kind));
            }
            Op::MatMul(a, b) => {
                let da = g.dot(&self.nodes[b].value.t());
                Self::accumulate(adj, a, da);
                let db = self.nodes[a].value.t().dot(g);
                Self::accumulate(adj, b, db);
            }
            Op::ScalarMul(a, c) => Self::accumulate(adj, a, g * c),
            Op::AddScalar(a) => Self::accumulate(adj, a, g.clone()),
            Op::Sum(a) => {
                let shape = self.nodes[a].value.dim();
                Self::accumulate(adj, a, Array2::from_elem(shape, g[[0, 0]]));
            }
            Op::Mean(a) => {
                let shape = self.nodes[a].value.dim();
                let len = self.nodes[a].value.len() as f64;
                Self::accumulate(adj, a, Array2::from_elem(shape, g[[0, 0]] / len));
            }
            Op::Square(a) => {
                let da = 2.0 * &self.nodes[a].value * g;
                Self::accumulate(adj, a, da);
            }
            Op::Sqrt(a) => {
                // dy/dx = 1/(2 sqrt(x)); use the stored output.
                let y = &self.nodes[i].value;
                let da = g / &(2.0 * y).mapv(|v| v.max(1e-300));
                Self::accumulate(adj, a, da);
            }
            Op::Relu(a) => {
                let mask = self.nodes[a].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                Self::accumulate(adj, a, g * &mask);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                let da = g * &y.mapv(|t| 1.0 - t * t);
                Self::accumulate(adj, a, da);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                let da = g * &y.mapv(|s| s * (1.0 - s));
                Self::accumulate(adj, a, da);
            }
            Op::Softplus(a) => {
                let da = g * &self.nodes[a].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
                Self::accumulate(adj, a, da);
            }
            Op::Exp(a) => {
                let da = g * &self.nodes[i].value;
                Self::accumulate(adj, a, da);
            }
            Op::Sin(a) => {
                let da = g * &self.nodes[a].value.mapv(f64::cos);
                Self::accumulate(adj, a, da);
            }
            Op::Cos(a) => {
                let da = -(g * &self.nodes[a].value.mapv(f64::sin));
                Self::accumulate(adj, a, da);
            }
            Op::Recip(a, eps) => {
                // d(1/x)/dx = -1/x^2 outside the guard band, 0 inside.
                let y = &self.nodes[i].value;
                let mask = self.nodes[a].value.mapv(|x| if x.abs() < eps { 0.0 } else { 1.0 });
                let da = -(g * &y.mapv(|v| v * v)) * &mask;
                Self::accumulate(adj, a, da);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.nodes[p].value.ncols();
                    let slice = g.slice(ndarray::s![.., start..start + w]).to_owned();
                    Self::accumulate(adj, p, slice);
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let h = self.nodes[p].value.nrows();
                    let slice = g.slice(ndarray::s![start..start + h, ..]).to_owned();
                    Self::accumulate(adj, p, slice);
                    start += h;
                }
            }
            Op::SliceCols(a, start, end) => {
                let mut da = Array2::zeros(self.nodes[a].value.dim());
                da.slice_mut(ndarray::s![.., start..end]).assign(g);
                Self::accumulate(adj, a, da);
            }
            Op::Reshape(a) => {
                let shape = self.nodes[a].value.dim();
                let da = g
                    .clone()
                    .into_shape_with_order(shape)
                    .expect("reshape gradient shape");
                Self::accumulate(adj, a, da);
            }
        }
    }
}
