//! Minimal reverse-mode automatic differentiation over `f64` matrices.
//!
//! A [`Graph`] is a tape of matrix-valued nodes built during one forward
//! pass. [`Graph::backward`] walks the tape in reverse creation order and
//! accumulates gradients for every node reachable from the root, including
//! the leaves holding model parameters.

use ndarray::{s, Array2, Axis};

pub type Mat = Array2<f64>;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    /// `[m,n] + [1,n]`, the bias broadcast over rows.
    AddBias(Var, Var),
    Scale(Var, f64),
    /// Add a constant matrix (attention mask, positional encoding).
    AddFixed(Var),
    /// Elementwise product with a constant matrix (dropout mask).
    MulFixed(Var, Mat),
    Relu(Var),
    RowSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    /// Row lookup into an embedding table.
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<Var>),
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads[v.0].take()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        debug_assert_eq!(self.value(bias).nrows(), 1);
        let value = self.value(a) + &self.value(bias).row(0);
        self.push(value, Op::AddBias(a, bias))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        self.push(value, Op::Scale(a, factor))
    }

    pub fn add_fixed(&mut self, a: Var, constant: &Mat) -> Var {
        let value = self.value(a) + constant;
        self.push(value, Op::AddFixed(a))
    }

    pub fn mul_fixed(&mut self, a: Var, constant: Mat) -> Var {
        let value = self.value(a) * &constant;
        self.push(value, Op::MulFixed(a, constant))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.axis_iter_mut(Axis(0)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        self.push(value, Op::RowSoftmax(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let g = self.value(gamma).row(0).to_owned();
        let b = self.value(beta).row(0).to_owned();
        let n = xv.ncols() as f64;
        let mut value = xv.clone();
        for mut row in value.axis_iter_mut(Axis(0)) {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv_std * g[j] + b[j];
            }
        }
        self.push(value, Op::LayerNorm { x, gamma, beta })
    }

    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut value = Mat::zeros((ids.len(), t.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            value.row_mut(r).assign(&t.row(id));
        }
        self.push(value, Op::Gather { table, ids: ids.to_vec() })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(value, Op::SliceCols { x, start, len })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).nrows();
        let total: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut value = Mat::zeros((rows, total));
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            value.slice_mut(s![.., offset..offset + pv.ncols()]).assign(pv);
            offset += pv.ncols();
        }
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    /// Reverse pass from `root`, seeded with `d(loss)/d(root)`.
    pub fn backward(&self, root: Var, seed: Mat) -> Gradients {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        debug_assert_eq!(seed.dim(), self.nodes[root.0].value.dim());
        grads[root.0] = Some(seed);

        for idx in (0..=root.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Leaf => {
                    grads[idx] = Some(gy);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = gy.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&gy);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, *a, gy.t().to_owned());
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, gy.clone());
                    accumulate(&mut grads, *b, gy);
                }
                Op::AddBias(a, bias) => {
                    let gb = gy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *bias, gb);
                    accumulate(&mut grads, *a, gy);
                }
                Op::Scale(a, factor) => {
                    accumulate(&mut grads, *a, gy * *factor);
                }
                Op::AddFixed(a) => {
                    accumulate(&mut grads, *a, gy);
                }
                Op::MulFixed(a, mask) => {
                    accumulate(&mut grads, *a, gy * mask);
                }
                Op::Relu(a) => {
                    let gx = &gy * &self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut grads, *a, gx);
                }
                Op::RowSoftmax(a) => {
                    let y = &self.nodes[idx].value;
                    let mut gx = gy;
                    for (mut grow, yrow) in gx.axis_iter_mut(Axis(0)).zip(y.axis_iter(Axis(0))) {
                        let dot: f64 = grow.iter().zip(yrow.iter()).map(|(g, y)| g * y).sum();
                        for (g, y) in grow.iter_mut().zip(yrow.iter()) {
                            *g = (*g - dot) * y;
                        }
                    }
                    accumulate(&mut grads, *a, gx);
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let xv = self.value(*x);
                    let g = self.value(*gamma).row(0).to_owned();
                    let n = xv.ncols() as f64;
                    let mut gx = Mat::zeros(xv.dim());
                    let mut ggamma = Mat::zeros((1, xv.ncols()));
                    let mut gbeta = Mat::zeros((1, xv.ncols()));
                    for r in 0..xv.nrows() {
                        let row = xv.row(r);
                        let mean = row.sum() / n;
                        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                        let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
                        let dy = gy.row(r);
                        // h = dy * gamma; dx = (h - mean(h) - xhat * mean(h * xhat)) / std
                        let h: Vec<f64> = dy.iter().zip(g.iter()).map(|(d, g)| d * g).collect();
                        let mean_h = h.iter().sum::<f64>() / n;
                        let mean_hx = h.iter().zip(&xhat).map(|(h, x)| h * x).sum::<f64>() / n;
                        for j in 0..xv.ncols() {
                            gx[[r, j]] = (h[j] - mean_h - xhat[j] * mean_hx) * inv_std;
                            ggamma[[0, j]] += dy[j] * xhat[j];
                            gbeta[[0, j]] += dy[j];
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gamma, ggamma);
                    accumulate(&mut grads, *beta, gbeta);
                }
                Op::Gather { table, ids } => {
                    let t = self.value(*table);
                    let mut gt = Mat::zeros(t.dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut dst = gt.row_mut(id);
                        dst += &gy.row(r);
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::SliceCols { x, start, len } => {
                    let xv = self.value(*x);
                    let mut gx = Mat::zeros(xv.dim());
                    gx.slice_mut(s![.., *start..*start + *len]).assign(&gy);
                    accumulate(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        let gp = gy.slice(s![.., offset..offset + w]).to_owned();
                        accumulate(&mut grads, p, gp);
                        offset += w;
                    }
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot => *slot = Some(g),
    }
}
