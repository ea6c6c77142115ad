//! Minimal reverse-mode autodiff over 2-D f64 arrays.
//!
//! A `Tape` records operations as they execute; `backward` replays them in
//! reverse, accumulating gradients. Everything is dense `Array2<f64>` — the
//! scale here (toy transformer widths) does not justify a framework, and a
//! closed op set keeps the backward pass auditable against finite differences.

use ndarray::{concatenate, s, Array2, Axis};

pub type Arr = Array2<f64>;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    /// Adds a 1 x d row vector to every row.
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    /// The shift constant is forward-only; the gradient passes through.
    AddScalar(usize, #[allow(dead_code)] f64),
    MatMul(usize, usize),
    Transpose(usize),
    Relu(usize),
    Gelu(usize),
    /// Row-wise softmax.
    Softmax(usize),
    /// Row-wise log-softmax.
    LogSoftmax(usize),
    SumAll(usize),
    MeanAll(usize),
    /// Mean over rows -> 1 x d.
    MeanRows(usize),
    /// Row-wise L2 normalization.
    RowNorm(usize),
    /// Row-wise layer norm with affine params gamma, beta (1 x d each).
    LayerNorm(usize, usize, usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows(usize, usize, usize),
    SliceCols(usize, usize, usize),
    /// Row gather; gradient scatter-adds.
    GatherRows(usize, Vec<usize>),
}

struct Node {
    value: Arr,
    grad: Arr,
    op: Op,
}

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Arr, op: Op) -> Var {
        let grad = Arr::zeros(value.dim());
        self.nodes.push(Node { value, grad, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Arr) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Arr) -> Var {
        // Constants are leaves too; their accumulated gradient is simply unused.
        self.leaf(value)
    }

    pub fn value(&self, v: Var) -> &Arr {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> &Arr {
        &self.nodes[v.0].grad
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.dim(), (1, 1));
        self.nodes[v.0].value[(0, 0)]
    }

    // ---- forward ops ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a.0, b.0))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.nodes[row.0].value.nrows(), 1);
        let v = &self.nodes[a.0].value + &self.nodes[row.0].value;
        self.push(v, Op::AddRow(a.0, row.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(v, Op::Scale(a.0, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        self.push(v, Op::AddScalar(a.0, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(v, Op::MatMul(a.0, b.0))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.t().to_owned();
        self.push(v, Op::Transpose(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a.0))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(gelu_val);
        self.push(v, Op::Gelu(a.0))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let v = rowwise_softmax(&self.nodes[a.0].value);
        self.push(v, Op::Softmax(a.0))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let mx = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln() + mx;
            row.mapv_inplace(|v| v - lse);
        }
        self.push(v, Op::LogSoftmax(a.0))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        self.push(Arr::from_elem((1, 1), s), Op::SumAll(a.0))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let m = self.nodes[a.0].value.mean().unwrap();
        self.push(Arr::from_elem((1, 1), m), Op::MeanAll(a.0))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = self
            .nodes[a.0]
            .value
            .mean_axis(Axis(0))
            .unwrap()
            .insert_axis(Axis(0));
        self.push(m, Op::MeanRows(a.0))
    }

    pub fn row_normalize(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
            row.mapv_inplace(|v| v / n);
        }
        self.push(v, Op::RowNorm(a.0))
    }

    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let d = row.len() as f64;
            let mu = row.sum() / d;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
            let sd = (var + LN_EPS).sqrt();
            for (j, val) in row.iter_mut().enumerate() {
                *val = (*val - mu) / sd * g[(0, j)] + b[(0, j)];
            }
        }
        self.push(v, Op::LayerNorm(a.0, gamma.0, beta.0))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = concatenate(Axis(0), &views).unwrap();
        self.push(v, Op::ConcatRows(parts.iter().map(|p| p.0).collect()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = concatenate(Axis(1), &views).unwrap();
        self.push(v, Op::ConcatCols(parts.iter().map(|p| p.0).collect()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.nodes[a.0]
            .value
            .slice(s![start..start + len, ..])
            .to_owned();
        self.push(v, Op::SliceRows(a.0, start, len))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.nodes[a.0]
            .value
            .slice(s![.., start..start + len])
            .to_owned();
        self.push(v, Op::SliceCols(a.0, start, len))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let src = &self.nodes[a.0].value;
        let mut v = Arr::zeros((idx.len(), src.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            v.row_mut(r).assign(&src.row(i));
        }
        self.push(v, Op::GatherRows(a.0, idx.to_vec()))
    }

    // ---- backward ----

    /// Backpropagates from a 1x1 scalar root.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.nodes[root.0].value.dim(), (1, 1), "backward root must be scalar");
        for n in self.nodes.iter_mut() {
            n.grad.fill(0.0);
        }
        self.nodes[root.0].grad[(0, 0)] = 1.0;
        for i in (0..self.nodes.len()).rev() {
            let op = self.nodes[i].op.clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            let g = self.nodes[i].grad.clone();
            if g.iter().all(|v| *v == 0.0) {
                continue;
            }
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.nodes[a].grad += &g;
                    self.nodes[b].grad += &g;
                }
                Op::AddRow(a, row) => {
                    self.nodes[a].grad += &g;
                    let col_sum = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.nodes[row].grad += &col_sum;
                }
                Op::Sub(a, b) => {
                    self.nodes[a].grad += &g;
                    self.nodes[b].grad -= &g;
                }
                Op::Mul(a, b) => {
                    let gb = &g * &self.nodes[a].value;
                    let ga = &g * &self.nodes[b].value;
                    self.nodes[a].grad += &ga;
                    self.nodes[b].grad += &gb;
                }
                Op::Scale(a, c) => {
                    self.nodes[a].grad.scaled_add(c, &g);
                }
                Op::AddScalar(a, _) => {
                    self.nodes[a].grad += &g;
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.nodes[b].value.t());
                    let gb = self.nodes[a].value.t().dot(&g);
                    self.nodes[a].grad += &ga;
                    self.nodes[b].grad += &gb;
                }
                Op::Transpose(a) => {
                    let ga = g.t().to_owned();
                    self.nodes[a].grad += &ga;
                }
                Op::Relu(a) => {
                    let ga = ndarray::Zip::from(&g)
                        .and(&self.nodes[a].value)
                        .map_collect(|&g, &x| if x > 0.0 { g } else { 0.0 });
                    self.nodes[a].grad += &ga;
                }
                Op::Gelu(a) => {
                    let ga = ndarray::Zip::from(&g)
                        .and(&self.nodes[a].value)
                        .map_collect(|&g, &x| g * gelu_grad(x));
                    self.nodes[a].grad += &ga;
                }
                Op::Softmax(a) => {
                    let p = &self.nodes[i].value;
                    let mut ga = Arr::zeros(g.dim());
                    for r in 0..g.nrows() {
                        let dot: f64 = g.row(r).iter().zip(p.row(r)).map(|(x, y)| x * y).sum();
                        for c in 0..g.ncols() {
                            ga[(r, c)] = p[(r, c)] * (g[(r, c)] - dot);
                        }
                    }
                    self.nodes[a].grad += &ga;
                }
                Op::LogSoftmax(a) => {
                    let lp = &self.nodes[i].value;
                    let mut ga = Arr::zeros(g.dim());
                    for r in 0..g.nrows() {
                        let gs: f64 = g.row(r).sum();
                        for c in 0..g.ncols() {
                            ga[(r, c)] = g[(r, c)] - lp[(r, c)].exp() * gs;
                        }
                    }
                    self.nodes[a].grad += &ga;
                }
                Op::SumAll(a) => {
                    let ga = Arr::from_elem(self.nodes[a].value.dim(), g[(0, 0)]);
                    self.nodes[a].grad += &ga;
                }
                Op::MeanAll(a) => {
                    let n = self.nodes[a].value.len() as f64;
                    let ga = Arr::from_elem(self.nodes[a].value.dim(), g[(0, 0)] / n);
                    self.nodes[a].grad += &ga;
                }
                Op::MeanRows(a) => {
                    let n = self.nodes[a].value.nrows() as f64;
                    let ga = g.broadcast(self.nodes[a].value.dim()).unwrap().mapv(|v| v / n);
                    self.nodes[a].grad += &ga;
                }
                Op::RowNorm(a) => {
                    let x = &self.nodes[a].value;
                    let mut ga = Arr::zeros(g.dim());
                    for r in 0..g.nrows() {
                        let n = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
                        let xg: f64 = x.row(r).iter().zip(g.row(r)).map(|(x, g)| x * g).sum();
                        for c in 0..g.ncols() {
                            ga[(r, c)] = g[(r, c)] / n - x[(r, c)] * xg / (n * n * n);
                        }
                    }
                    self.nodes[a].grad += &ga;
                }
                Op::LayerNorm(a, gamma, beta) => {
                    let x = &self.nodes[a].value;
                    let gm = &self.nodes[gamma].value;
                    let d = x.ncols() as f64;
                    let mut ga = Arr::zeros(g.dim());
                    let mut ggamma = Arr::zeros((1, x.ncols()));
                    let mut gbeta = Arr::zeros((1, x.ncols()));
                    for r in 0..x.nrows() {
                        let mu = x.row(r).sum() / d;
                        let var = x.row(r).iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
                        let sd = (var + LN_EPS).sqrt();
                        let xhat: Vec<f64> = x.row(r).iter().map(|v| (v - mu) / sd).collect();
                        let gxhat: Vec<f64> = (0..x.ncols())
                            .map(|c| g[(r, c)] * gm[(0, c)])
                            .collect();
                        let mean_gxhat = gxhat.iter().sum::<f64>() / d;
                        let mean_gxhat_xhat =
                            gxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d;
                        for c in 0..x.ncols() {
                            ga[(r, c)] =
                                (gxhat[c] - mean_gxhat - xhat[c] * mean_gxhat_xhat) / sd;
                            ggamma[(0, c)] += g[(r, c)] * xhat[c];
                            gbeta[(0, c)] += g[(r, c)];
                        }
                    }
                    self.nodes[a].grad += &ga;
                    self.nodes[gamma].grad += &ggamma;
                    self.nodes[beta].grad += &gbeta;
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = self.nodes[p].value.nrows();
                        let slice = g.slice(s![start..start + n, ..]).to_owned();
                        self.nodes[p].grad += &slice;
                        start += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = self.nodes[p].value.ncols();
                        let slice = g.slice(s![.., start..start + n]).to_owned();
                        self.nodes[p].grad += &slice;
                        start += n;
                    }
                }
                Op::SliceRows(a, start, len) => {
                    let mut ga = self.nodes[a].grad.clone();
                    let mut region = ga.slice_mut(s![start..start + len, ..]);
                    region += &g;
                    self.nodes[a].grad = ga;
                }
                Op::SliceCols(a, start, len) => {
                    let mut ga = self.nodes[a].grad.clone();
                    let mut region = ga.slice_mut(s![.., start..start + len]);
                    region += &g;
                    self.nodes[a].grad = ga;
                }
                Op::GatherRows(a, idx) => {
                    let mut ga = Arr::zeros(self.nodes[a].value.dim());
                    for (r, &i) in idx.iter().enumerate() {
                        let mut row = ga.row_mut(i);
                        row += &g.row(r);
                    }
                    self.nodes[a].grad += &ga;
                }
            }
        }
    }
}

fn rowwise_softmax(x: &Arr) -> Arr {
    let mut v = x.clone();
    for mut row in v.rows_mut() {
        let mx = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - mx).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    v
}

// tanh-approximation GELU and its derivative.
const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_val(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
