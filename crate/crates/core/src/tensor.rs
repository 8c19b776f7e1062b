//! Minimal reverse-mode autodiff over `ndarray::Array2<f64>`.
//!
//! Every value on the tape is a 2-D matrix (row vectors are `1×n`). A forward
//! pass appends nodes; `backward` walks the tape in reverse and accumulates
//! gradients for every node with `requires_grad`. Graphs are built per sample,
//! which keeps them small and lets batch items run on separate tapes in
//! parallel.

use ndarray::{concatenate, Array2, Axis};
use std::sync::Arc;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub usize);

#[derive(Clone)]
enum Op {
    Leaf,
    /// C = A · B
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// matrix + row vector, broadcast over rows
    AddRow(usize, usize),
    /// x * constant
    Scale(usize, f64),
    /// x * s where s is a 1×1 node
    ScaleVar(usize, usize),
    Transpose(usize),
    Gelu(usize),
    Sigmoid(usize),
    Tanh(usize),
    /// row-wise softmax with max subtraction
    Softmax(usize),
    /// row-wise layer norm with affine params (gamma, beta are 1×n)
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
    },
    /// column slice [start, end)
    Cols {
        x: usize,
        start: usize,
        end: usize,
    },
    /// row slice [start, end)
    Rows {
        x: usize,
        start: usize,
        end: usize,
    },
    ConcatCols(Vec<usize>),
    Reshape(usize),
    /// repeat a 1×n row m times
    BroadcastRows(usize, usize),
    /// sum of squared entries -> 1×1
    SumSq(usize),
    /// sum of all entries -> 1×1
    SumAll(usize),
}

struct Node {
    value: Arc<Array2<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by `Var`.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a node known to require it; zeros would be a logic error.
    pub fn expect(&self, v: Var) -> &Array2<f64> {
        self.get(v).expect("node has no gradient")
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
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

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.value(v);
        debug_assert_eq!(a.len(), 1);
        a[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Trainable leaf; the array is shared, not copied.
    pub fn param(&mut self, value: Arc<Array2<f64>>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_shared(&mut self, value: Arc<Array2<f64>>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let rg = self.any_grad(&[a.0, b.0]);
        self.push(v, Op::MatMul(a.0, b.0), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let rg = self.any_grad(&[a.0, b.0]);
        self.push(v, Op::Add(a.0, b.0), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let rg = self.any_grad(&[a.0, b.0]);
        self.push(v, Op::Sub(a.0, b.0), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let rg = self.any_grad(&[a.0, b.0]);
        self.push(v, Op::Mul(a.0, b.0), rg)
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let v = self.value(x) + self.value(row);
        let rg = self.any_grad(&[x.0, row.0]);
        self.push(v, Op::AddRow(x.0, row.0), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x) * s;
        let rg = self.requires_grad(x);
        self.push(v, Op::Scale(x.0, s), rg)
    }

    pub fn scale_var(&mut self, x: Var, s: Var) -> Var {
        debug_assert_eq!(self.value(s).len(), 1);
        let sv = self.scalar(s);
        let v = self.value(x) * sv;
        let rg = self.any_grad(&[x.0, s.0]);
        self.push(v, Op::ScaleVar(x.0, s.0), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.value(x).t().to_owned();
        let rg = self.requires_grad(x);
        self.push(v, Op::Transpose(x.0), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(gelu_scalar);
        let rg = self.requires_grad(x);
        self.push(v, Op::Gelu(x.0), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|t| 1.0 / (1.0 + (-t).exp()));
        let rg = self.requires_grad(x);
        self.push(v, Op::Sigmoid(x.0), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(f64::tanh);
        let rg = self.requires_grad(x);
        self.push(v, Op::Tanh(x.0), rg)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let a = self.value(x);
        let mut v = a.clone();
        for mut row in v.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|t| (t - m).exp());
            let s: f64 = row.sum();
            row.mapv_inplace(|t| t / s);
        }
        let rg = self.requires_grad(x);
        self.push(v, Op::Softmax(x.0), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let a = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let n = a.ncols() as f64;
        let mut v = Array2::zeros(a.raw_dim());
        for (i, row) in a.rows().into_iter().enumerate() {
            let mean = row.sum() / n;
            let var = row.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, t) in row.iter().enumerate() {
                v[[i, j]] = (t - mean) * inv * g[[0, j]] + b[[0, j]];
            }
        }
        let rg = self.any_grad(&[x.0, gamma.0, beta.0]);
        self.push(
            v,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
            },
            rg,
        )
    }

    pub fn cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let v = self
            .value(x)
            .slice(ndarray::s![.., start..end])
            .to_owned();
        let rg = self.requires_grad(x);
        self.push(v, Op::Cols { x: x.0, start, end }, rg)
    }

    pub fn rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let v = self
            .value(x)
            .slice(ndarray::s![start..end, ..])
            .to_owned();
        let rg = self.requires_grad(x);
        self.push(v, Op::Rows { x: x.0, start, end }, rg)
    }

    pub fn row(&mut self, x: Var, idx: usize) -> Var {
        self.rows(x, idx, idx + 1)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat shape mismatch");
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.any_grad(&ids);
        self.push(v, Op::ConcatCols(ids), rg)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let a = self.value(x);
        debug_assert_eq!(a.len(), rows * cols);
        let v = Array2::from_shape_vec((rows, cols), a.iter().cloned().collect())
            .expect("reshape size mismatch");
        let rg = self.requires_grad(x);
        self.push(v, Op::Reshape(x.0), rg)
    }

    pub fn broadcast_rows(&mut self, row: Var, m: usize) -> Var {
        let r = self.value(row);
        debug_assert_eq!(r.nrows(), 1);
        let n = r.ncols();
        let mut v = Array2::zeros((m, n));
        for mut out in v.rows_mut() {
            out.assign(&r.row(0));
        }
        let rg = self.requires_grad(row);
        self.push(v, Op::BroadcastRows(row.0, m), rg)
    }

    pub fn sum_sq(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().map(|t| t * t).sum();
        let rg = self.requires_grad(x);
        self.push(Array2::from_elem((1, 1), s), Op::SumSq(x.0), rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).sum();
        let rg = self.requires_grad(x);
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(x.0), rg)
    }

    /// Linear layer `x · Wᵀ + b` with `W: out×in`, `b: 1×out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let wt = self.transpose(w);
        let xw = self.matmul(x, wt);
        self.add_row(xw, b)
    }

    /// Backpropagate from a 1×1 output node.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.accumulate(i, &g, &mut grads);
            // keep gradients only for leaves; interior grads are transient
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Gradients { grads }
    }

    fn add_grad(
        &self,
        grads: &mut [Option<Array2<f64>>],
        id: usize,
        delta: Array2<f64>,
    ) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut grads[id] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate(&self, i: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                if self.nodes[*a].requires_grad {
                    self.add_grad(grads, *a, g.dot(&bv.t()));
                }
                if self.nodes[*b].requires_grad {
                    self.add_grad(grads, *b, av.t().dot(g));
                }
            }
            Op::Add(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                let av = &*self.nodes[*a].value;
                let bv = &*self.nodes[*b].value;
                if self.nodes[*a].requires_grad {
                    self.add_grad(grads, *a, g * bv);
                }
                if self.nodes[*b].requires_grad {
                    self.add_grad(grads, *b, g * av);
                }
            }
            Op::AddRow(x, row) => {
                self.add_grad(grads, *x, g.clone());
                if self.nodes[*row].requires_grad {
                    let summed = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.add_grad(grads, *row, summed);
                }
            }
            Op::Scale(x, s) => {
                self.add_grad(grads, *x, g * *s);
            }
            Op::ScaleVar(x, s) => {
                let sv = self.nodes[*s].value[[0, 0]];
                let xv = &*self.nodes[*x].value;
                if self.nodes[*x].requires_grad {
                    self.add_grad(grads, *x, g * sv);
                }
                if self.nodes[*s].requires_grad {
                    let d: f64 = (g * xv).sum();
                    self.add_grad(grads, *s, Array2::from_elem((1, 1), d));
                }
            }
            Op::Transpose(x) => {
                self.add_grad(grads, *x, g.t().to_owned());
            }
            Op::Gelu(x) => {
                let xv = &*self.nodes[*x].value;
                self.add_grad(grads, *x, g * &xv.mapv(gelu_grad_scalar));
            }
            Op::Sigmoid(x) => {
                let y = &*self.nodes[i].value;
                self.add_grad(grads, *x, g * &(y * &(1.0 - y)));
            }
            Op::Tanh(x) => {
                let y = &*self.nodes[i].value;
                self.add_grad(grads, *x, g * &(1.0 - y * y));
            }
            Op::Softmax(x) => {
                let p = &*self.nodes[i].value;
                let mut d = g * p;
                for (mut drow, prow) in d.rows_mut().into_iter().zip(p.rows()) {
                    let dot: f64 = drow.sum();
                    for (dj, pj) in drow.iter_mut().zip(prow.iter()) {
                        *dj -= dot * pj;
                    }
                }
                self.add_grad(grads, *x, d);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = &*self.nodes[*x].value;
                let gv = &*self.nodes[*gamma].value;
                let n = xv.ncols() as f64;
                let mut dx = Array2::zeros(xv.raw_dim());
                let mut dgamma = Array2::zeros((1, xv.ncols()));
                let mut dbeta = Array2::zeros((1, xv.ncols()));
                for (r, row) in xv.rows().into_iter().enumerate() {
                    let mean = row.sum() / n;
                    let var = row.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    // dy scaled by gamma
                    let mut mean_dg = 0.0;
                    let mut mean_dgx = 0.0;
                    let mut xhat = vec![0.0; xv.ncols()];
                    let mut dyg = vec![0.0; xv.ncols()];
                    for j in 0..xv.ncols() {
                        xhat[j] = (row[j] - mean) * inv;
                        dyg[j] = g[[r, j]] * gv[[0, j]];
                        mean_dg += dyg[j];
                        mean_dgx += dyg[j] * xhat[j];
                        dgamma[[0, j]] += g[[r, j]] * xhat[j];
                        dbeta[[0, j]] += g[[r, j]];
                    }
                    mean_dg /= n;
                    mean_dgx /= n;
                    for j in 0..xv.ncols() {
                        dx[[r, j]] = (dyg[j] - mean_dg - xhat[j] * mean_dgx) * inv;
                    }
                }
                self.add_grad(grads, *x, dx);
                self.add_grad(grads, *gamma, dgamma);
                self.add_grad(grads, *beta, dbeta);
            }
            Op::Cols { x, start, end } => {
                let xv = &self.nodes[*x].value;
                let mut d = Array2::zeros((xv.nrows(), xv.ncols()));
                d.slice_mut(ndarray::s![.., *start..*end]).assign(g);
                self.add_grad(grads, *x, d);
            }
            Op::Rows { x, start, end } => {
                let xv = &self.nodes[*x].value;
                let mut d = Array2::zeros((xv.nrows(), xv.ncols()));
                d.slice_mut(ndarray::s![*start..*end, ..]).assign(g);
                self.add_grad(grads, *x, d);
            }
            Op::ConcatCols(ids) => {
                let mut start = 0;
                for id in ids {
                    let w = self.nodes[*id].value.ncols();
                    if self.nodes[*id].requires_grad {
                        let part = g.slice(ndarray::s![.., start..start + w]).to_owned();
                        self.add_grad(grads, *id, part);
                    }
                    start += w;
                }
            }
            Op::Reshape(x) => {
                let xv = &self.nodes[*x].value;
                let d = Array2::from_shape_vec(
                    (xv.nrows(), xv.ncols()),
                    g.iter().cloned().collect(),
                )
                .expect("reshape grad");
                self.add_grad(grads, *x, d);
            }
            Op::BroadcastRows(row, _m) => {
                let summed = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                self.add_grad(grads, *row, summed);
            }
            Op::SumSq(x) => {
                let xv = &*self.nodes[*x].value;
                self.add_grad(grads, *x, xv * (2.0 * g[[0, 0]]));
            }
            Op::SumAll(x) => {
                let xv = &self.nodes[*x].value;
                self.add_grad(
                    grads,
                    *x,
                    Array2::from_elem((xv.nrows(), xv.ncols()), g[[0, 0]]),
                );
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normal_array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    /// Central finite difference on one entry of a leaf.
    fn fd_entry(
        build: &dyn Fn(&Array2<f64>) -> f64,
        at: &Array2<f64>,
        i: usize,
        j: usize,
        h: f64,
    ) -> f64 {
        let mut plus = at.clone();
        plus[[i, j]] += h;
        let mut minus = at.clone();
        minus[[i, j]] -= h;
        (build(&plus) - build(&minus)) / (2.0 * h)
    }

    fn check_op(name: &str, shape: (usize, usize), build: impl Fn(&mut Tape, Var) -> Var) {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let x0 = normal_array(&mut rng, shape.0, shape.1, 0.5);
        let eval = |x: &Array2<f64>| {
            let mut t = Tape::new();
            let v = t.param(Arc::new(x.clone()));
            let out = build(&mut t, v);
            t.scalar(out)
        };
        let mut t = Tape::new();
        let v = t.param(Arc::new(x0.clone()));
        let out = build(&mut t, v);
        let grads = t.backward(out);
        let g = grads.expect(v);
        for i in 0..shape.0 {
            for j in 0..shape.1 {
                let num = fd_entry(&eval, &x0, i, j, 1e-5);
                let ana = g[[i, j]];
                let denom = num.abs().max(ana.abs()).max(1e-6);
                assert!(
                    ((num - ana) / denom).abs() < 1e-6,
                    "{name} grad mismatch at ({i},{j}): fd={num} ana={ana}"
                );
            }
        }
    }

    #[test]
    fn grad_matmul() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let b0 = normal_array(&mut rng, 4, 3, 1.0);
        check_op("matmul", (5, 4), move |t, v| {
            let b = t.constant(b0.clone());
            let m = t.matmul(v, b);
            t.sum_sq(m)
        });
    }

    #[test]
    fn grad_elementwise_and_row() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let other = normal_array(&mut rng, 3, 4, 1.0);
        let row = normal_array(&mut rng, 1, 4, 1.0);
        check_op("add/mul/sub", (3, 4), move |t, v| {
            let o = t.constant(other.clone());
            let r = t.constant(row.clone());
            let a = t.add(v, o);
            let m = t.mul(a, v);
            let s = t.sub(m, o);
            let ar = t.add_row(s, r);
            t.sum_sq(ar)
        });
    }

    #[test]
    fn grad_row_param() {
        // gradient must flow into the broadcast row as well
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let base = normal_array(&mut rng, 3, 4, 1.0);
        check_op("add_row-row", (1, 4), move |t, v| {
            let b = t.constant(base.clone());
            let s = t.add_row(b, v);
            t.sum_sq(s)
        });
    }

    #[test]
    fn grad_nonlinearities() {
        check_op("gelu", (2, 3), |t, v| {
            let g = t.gelu(v);
            t.sum_sq(g)
        });
        check_op("sigmoid", (2, 3), |t, v| {
            let g = t.sigmoid(v);
            t.sum_sq(g)
        });
        check_op("tanh", (2, 3), |t, v| {
            let g = t.tanh(v);
            t.sum_sq(g)
        });
    }

    #[test]
    fn grad_softmax() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let w = normal_array(&mut rng, 4, 4, 1.0);
        check_op("softmax", (3, 4), move |t, v| {
            let p = t.softmax(v);
            let c = t.constant(w.clone());
            let m = t.matmul(p, c);
            t.sum_sq(m)
        });
    }

    #[test]
    fn grad_layer_norm() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let gamma = normal_array(&mut rng, 1, 5, 0.2);
        let beta = normal_array(&mut rng, 1, 5, 0.2);
        let g2 = gamma.clone();
        let b2 = beta.clone();
        check_op("layernorm-x", (3, 5), move |t, v| {
            let g = t.constant(g2.clone());
            let b = t.constant(b2.clone());
            let ln = t.layer_norm(v, g, b, 1e-5);
            t.sum_sq(ln)
        });
        // gamma path
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let x = normal_array(&mut rng, 3, 5, 1.0);
        let beta2 = beta.clone();
        check_op("layernorm-gamma", (1, 5), move |t, v| {
            let xx = t.constant(x.clone());
            let b = t.constant(beta2.clone());
            let ln = t.layer_norm(xx, v, b, 1e-5);
            t.sum_sq(ln)
        });
    }

    #[test]
    fn grad_slices_concat_reshape() {
        check_op("cols+rows+concat+reshape", (4, 6), |t, v| {
            let a = t.cols(v, 1, 4);
            let b = t.rows(v, 0, 2);
            let br = t.reshape(b, 4, 3);
            let c = t.concat_cols(&[a, br]);
            t.sum_sq(c)
        });
    }

    #[test]
    fn grad_scale_var_and_broadcast() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let x = normal_array(&mut rng, 3, 3, 1.0);
        check_op("scale_var-s", (1, 1), move |t, v| {
            let xx = t.constant(x.clone());
            let s = t.sigmoid(v);
            let y = t.scale_var(xx, s);
            t.sum_sq(y)
        });
        check_op("broadcast_rows", (1, 4), |t, v| {
            let b = t.broadcast_rows(v, 5);
            let s = t.gelu(b);
            t.sum_sq(s)
        });
    }

    #[test]
    fn grad_linear_chain() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let x = normal_array(&mut rng, 4, 3, 1.0);
        let b = normal_array(&mut rng, 1, 2, 1.0);
        check_op("linear-w", (2, 3), move |t, v| {
            let xx = t.constant(x.clone());
            let bb = t.constant(b.clone());
            let y = t.linear(xx, v, bb);
            let g = t.gelu(y);
            t.sum_sq(g)
        });
    }

    #[test]
    fn no_grad_for_constants() {
        let mut t = Tape::new();
        let c = t.constant(Array2::from_elem((2, 2), 3.0));
        let s = t.sum_sq(c);
        let grads = t.backward(s);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn sum_all_grad() {
        check_op("sum_all", (2, 3), |t, v| {
            let m = t.mul(v, v);
            t.sum_all(m)
        });
    }
}
