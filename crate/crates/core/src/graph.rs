//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Tape`] records a straight-line computation over rank-2 f64 tensors.
//! Each operation pushes one node holding its value and enough context to
//! propagate gradients; [`Tape::backward`] runs the nodes in reverse order
//! and accumulates gradients for every node, so parameter and input
//! gradients come out of a single pass.
//!
//! Typical use builds a fresh tape per mini-batch: insert parameters and the
//! batch as leaves, compose the forward pass and a scalar loss, call
//! `backward`, then read gradients through [`Tape::grad`].

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// [m x k] * [k x n]
    MatMul { a: usize, b: usize },
    /// [m x n] + broadcast [1 x n]
    AddBias { x: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    Tanh { x: usize },
    Relu { x: usize },
    /// Row-wise log-softmax.
    LogSoftmax { x: usize },
    Exp { x: usize },
    /// ln(max(x, floor)); zero gradient below the floor.
    LogClamped { x: usize, floor: f64 },
    SumAll { x: usize },
    MeanAll { x: usize },
    /// Column means of a [m x n] input, yielding [1 x n].
    ColMean { x: usize },
    /// out[i] = x[i, idx[i]], yielding [m x 1].
    PickPerRow { x: usize, idx: Vec<usize> },
    /// Mean pairwise contrastive penalty over all unordered row pairs.
    Contrastive {
        f: usize,
        labels: Vec<usize>,
        margin: f64,
    },
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
}

/// Recorded computation with, after `backward`, a gradient per node.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.dims(v)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        assert_eq!(n.value.len(), 1, "scalar() called on non-scalar node");
        n.value[0]
    }

    /// Gradient of the last `backward` target with respect to `v`.
    ///
    /// Panics if `backward` has not run on this tape.
    pub fn grad(&self, v: Var) -> &[f64] {
        assert!(
            !self.grads.is_empty(),
            "grad() requested before backward()"
        );
        &self.grads[v.0]
    }

    pub fn value_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(vec![n.rows, n.cols], n.value.clone()).expect("tape node shape is consistent")
    }

    // ------------------------------------------------------------------
    // Node constructors
    // ------------------------------------------------------------------

    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.rows(), t.cols(), t.data().to_vec(), Op::Leaf)
    }

    pub fn leaf_scalar(&mut self, v: f64) -> Var {
        self.push(1, 1, vec![v], Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        assert_eq!(k, k2, "matmul inner dimensions {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        matmul_into(
            &self.nodes[a.0].value,
            &self.nodes[b.0].value,
            &mut out,
            m,
            k,
            n,
        );
        self.push(m, n, out, Op::MatMul { a: a.0, b: b.0 })
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (m, n) = self.dims(x);
        let (br, bc) = self.dims(b);
        assert_eq!((br, bc), (1, n), "bias shape must be [1 x {n}]");
        let bias = &self.nodes[b.0].value;
        let mut out = self.nodes[x.0].value.clone();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += bias[j];
            }
        }
        self.push(m, n, out, Op::AddBias { x: x.0, b: b.0 })
    }

    fn binary_same_shape(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (m, n) = self.dims(a);
        assert_eq!(self.dims(a), self.dims(b), "elementwise shape mismatch");
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let out: Vec<f64> = av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect();
        self.push(m, n, out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let (m, n) = self.dims(x);
        let out: Vec<f64> = self.nodes[x.0].value.iter().map(|&v| v * c).collect();
        self.push(m, n, out, Op::Scale { x: x.0, c })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let out: Vec<f64> = self.nodes[x.0].value.iter().map(|v| v.tanh()).collect();
        self.push(m, n, out, Op::Tanh { x: x.0 })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let out: Vec<f64> = self.nodes[x.0].value.iter().map(|v| v.max(0.0)).collect();
        self.push(m, n, out, Op::Relu { x: x.0 })
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for j in 0..n {
                out[i * n + j] = row[j] - mx - lse;
            }
        }
        self.push(m, n, out, Op::LogSoftmax { x: x.0 })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let out: Vec<f64> = self.nodes[x.0].value.iter().map(|v| v.exp()).collect();
        self.push(m, n, out, Op::Exp { x: x.0 })
    }

    /// `ln(max(x, floor))`. The floor keeps vanishing probabilities out of
    /// the log; inputs below it contribute zero gradient.
    pub fn log_clamped(&mut self, x: Var, floor: f64) -> Var {
        assert!(floor > 0.0, "log floor must be positive");
        let (m, n) = self.dims(x);
        let out: Vec<f64> = self.nodes[x.0]
            .value
            .iter()
            .map(|&v| v.max(floor).ln())
            .collect();
        self.push(m, n, out, Op::LogClamped { x: x.0, floor })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].value.iter().sum();
        self.push(1, 1, vec![s], Op::SumAll { x: x.0 })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let s: f64 = v.iter().sum::<f64>() / v.len() as f64;
        self.push(1, 1, vec![s], Op::MeanAll { x: x.0 })
    }

    pub fn col_mean(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        assert!(m > 0, "col_mean over zero rows");
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += xv[i * n + j];
            }
        }
        for v in out.iter_mut() {
            *v /= m as f64;
        }
        self.push(1, n, out, Op::ColMean { x: x.0 })
    }

    pub fn pick_per_row(&mut self, x: Var, idx: &[usize]) -> Var {
        let (m, n) = self.dims(x);
        assert_eq!(idx.len(), m, "need one index per row");
        let xv = &self.nodes[x.0].value;
        let out: Vec<f64> = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                assert!(j < n, "pick index {j} out of {n} columns");
                xv[i * n + j]
            })
            .collect();
        self.push(
            m,
            1,
            out,
            Op::PickPerRow {
                x: x.0,
                idx: idx.to_vec(),
            },
        )
    }

    /// Mean over all unordered row pairs (i < j) of
    /// `0.5 * [same_label * D^2 + (1 - same_label) * max(0, margin - D)^2]`
    /// where `D` is the Euclidean distance between the two feature rows.
    /// A single-row input has no pairs and yields a constant zero.
    pub fn contrastive(&mut self, f: Var, labels: &[usize], margin: f64) -> Var {
        let (m, d) = self.dims(f);
        assert_eq!(labels.len(), m, "need one label per feature row");
        assert!(margin > 0.0, "contrastive margin must be positive");
        let fv = &self.nodes[f.0].value;
        let pairs = m * (m - 1) / 2;
        let mut acc = 0.0;
        if pairs > 0 {
            for i in 0..m {
                for j in (i + 1)..m {
                    let mut d2 = 0.0;
                    for k in 0..d {
                        let diff = fv[i * d + k] - fv[j * d + k];
                        d2 += diff * diff;
                    }
                    if labels[i] == labels[j] {
                        acc += 0.5 * d2;
                    } else {
                        let gap = margin - d2.sqrt();
                        if gap > 0.0 {
                            acc += 0.5 * gap * gap;
                        }
                    }
                }
            }
            acc /= pairs as f64;
        }
        self.push(
            1,
            1,
            vec![acc],
            Op::Contrastive {
                f: f.0,
                labels: labels.to_vec(),
                margin,
            },
        )
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Accumulates gradients of the scalar node `loss` into every node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::State(
                "backward target is not on this tape".into(),
            ));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::State(
                "backward target must be a scalar node".into(),
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|nd| vec![0.0; nd.value.len()])
            .collect();
        grads[loss.0][0] = 1.0;

        for id in (0..n).rev() {
            // Parents always precede their consumers, so splitting at `id`
            // separates the outgoing gradient from every parent slot.
            let (before, rest) = grads.split_at_mut(id);
            let g = &rest[0];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (m, k) = (self.nodes[*a].rows, self.nodes[*a].cols);
                    let nn = self.nodes[*b].cols;
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    // dA[i,p] += sum_j g[i,j] * B[p,j]
                    {
                        let da = &mut before[*a];
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..nn {
                                    s += g[i * nn + j] * bv[p * nn + j];
                                }
                                da[i * k + p] += s;
                            }
                        }
                    }
                    // dB[p,j] += sum_i A[i,p] * g[i,j]
                    {
                        let db = &mut before[*b];
                        for p in 0..k {
                            for i in 0..m {
                                let ap = av[i * k + p];
                                if ap == 0.0 {
                                    continue;
                                }
                                for j in 0..nn {
                                    db[p * nn + j] += ap * g[i * nn + j];
                                }
                            }
                        }
                    }
                }
                Op::AddBias { x, b } => {
                    let (m, nn) = (node.rows, node.cols);
                    for (dst, src) in before[*x].iter_mut().zip(g.iter()) {
                        *dst += src;
                    }
                    let db = &mut before[*b];
                    for i in 0..m {
                        for j in 0..nn {
                            db[j] += g[i * nn + j];
                        }
                    }
                }
                Op::Add { a, b } => {
                    for (dst, src) in before[*a].iter_mut().zip(g.iter()) {
                        *dst += src;
                    }
                    for (dst, src) in before[*b].iter_mut().zip(g.iter()) {
                        *dst += src;
                    }
                }
                Op::Sub { a, b } => {
                    for (dst, src) in before[*a].iter_mut().zip(g.iter()) {
                        *dst += src;
                    }
                    for (dst, src) in before[*b].iter_mut().zip(g.iter()) {
                        *dst -= src;
                    }
                }
                Op::Mul { a, b } => {
                    let av = self.nodes[*a].value.clone();
                    let bv = self.nodes[*b].value.clone();
                    for (i, src) in g.iter().enumerate() {
                        before[*a][i] += src * bv[i];
                        before[*b][i] += src * av[i];
                    }
                }
                Op::Scale { x, c } => {
                    for (dst, src) in before[*x].iter_mut().zip(g.iter()) {
                        *dst += c * src;
                    }
                }
                Op::Tanh { x } => {
                    for (i, src) in g.iter().enumerate() {
                        let y = node.value[i];
                        before[*x][i] += src * (1.0 - y * y);
                    }
                }
                Op::Relu { x } => {
                    let xv = &self.nodes[*x].value;
                    for (i, src) in g.iter().enumerate() {
                        if xv[i] > 0.0 {
                            before[*x][i] += src;
                        }
                    }
                }
                Op::LogSoftmax { x } => {
                    // dx = g - softmax * rowsum(g)
                    let (m, nn) = (node.rows, node.cols);
                    let dx = &mut before[*x];
                    for i in 0..m {
                        let mut rowsum = 0.0;
                        for j in 0..nn {
                            rowsum += g[i * nn + j];
                        }
                        for j in 0..nn {
                            let p = node.value[i * nn + j].exp();
                            dx[i * nn + j] += g[i * nn + j] - p * rowsum;
                        }
                    }
                }
                Op::Exp { x } => {
                    for (i, src) in g.iter().enumerate() {
                        before[*x][i] += src * node.value[i];
                    }
                }
                Op::LogClamped { x, floor } => {
                    let xv = &self.nodes[*x].value;
                    for (i, src) in g.iter().enumerate() {
                        if xv[i] >= *floor {
                            before[*x][i] += src / xv[i];
                        }
                    }
                }
                Op::SumAll { x } => {
                    let s = g[0];
                    for dst in before[*x].iter_mut() {
                        *dst += s;
                    }
                }
                Op::MeanAll { x } => {
                    let len = self.nodes[*x].value.len() as f64;
                    let s = g[0] / len;
                    for dst in before[*x].iter_mut() {
                        *dst += s;
                    }
                }
                Op::ColMean { x } => {
                    let (m, nn) = (self.nodes[*x].rows, self.nodes[*x].cols);
                    let dx = &mut before[*x];
                    for i in 0..m {
                        for j in 0..nn {
                            dx[i * nn + j] += g[j] / m as f64;
                        }
                    }
                }
                Op::PickPerRow { x, idx } => {
                    let nn = self.nodes[*x].cols;
                    let dx = &mut before[*x];
                    for (i, &j) in idx.iter().enumerate() {
                        dx[i * nn + j] += g[i];
                    }
                }
                Op::Contrastive { f, labels, margin } => {
                    let (m, d) = (self.nodes[*f].rows, self.nodes[*f].cols);
                    let pairs = m * (m - 1) / 2;
                    if pairs == 0 {
                        continue;
                    }
                    let scale = g[0] / pairs as f64;
                    let fv = self.nodes[*f].value.clone();
                    let df = &mut before[*f];
                    for i in 0..m {
                        for j in (i + 1)..m {
                            let mut d2 = 0.0;
                            for k in 0..d {
                                let diff = fv[i * d + k] - fv[j * d + k];
                                d2 += diff * diff;
                            }
                            if labels[i] == labels[j] {
                                for k in 0..d {
                                    let diff = fv[i * d + k] - fv[j * d + k];
                                    df[i * d + k] += scale * diff;
                                    df[j * d + k] -= scale * diff;
                                }
                            } else {
                                let dist = d2.sqrt();
                                let gap = margin - dist;
                                // The hinge is flat past the margin, and the
                                // distance is non-differentiable at zero; both
                                // get a zero subgradient.
                                if gap > 0.0 && dist > 0.0 {
                                    let coef = -scale * gap / dist;
                                    for k in 0..d {
                                        let diff = fv[i * d + k] - fv[j * d + k];
                                        df[i * d + k] += coef * diff;
                                        df[j * d + k] -= coef * diff;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        self.grads = grads;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tensor(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn backward_of_sum_gives_ones() {
        let mut t = Tape::new();
        let x = t.leaf(&tensor(2, 3, vec![0.5, -1.0, 2.0, 0.0, 3.0, -2.5]));
        let s = t.sum_all(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x), &[1.0; 6]);
    }

    #[test]
    fn backward_of_half_square_norm_gives_input() {
        let data = vec![0.5, -1.0, 2.0, 0.25];
        let mut t = Tape::new();
        let x = t.leaf(&tensor(2, 2, data.clone()));
        let sq = t.mul(x, x);
        let s = t.sum_all(sq);
        let half = t.scale(s, 0.5);
        t.backward(half).unwrap();
        for (g, v) in t.grad(x).iter().zip(&data) {
            assert_abs_diff_eq!(g, v, epsilon = 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_target() {
        let mut t = Tape::new();
        let x = t.leaf(&tensor(2, 2, vec![1.0; 4]));
        let y = t.scale(x, 2.0);
        assert!(matches!(t.backward(y), Err(Error::State(_))));
    }

    #[test]
    fn backward_rejects_foreign_var() {
        let mut t = Tape::new();
        assert!(t.backward(Var(3)).is_err());
    }

    /// Central-difference check of every op through a composite expression.
    #[test]
    fn finite_difference_composite_graph() {
        let x0 = vec![0.31, -0.62, 0.17, 0.88, -0.44, 0.09];
        let w0 = vec![0.5, -0.2, 0.8, 0.3, -0.7, 0.1, 0.25, -0.15, 0.6];
        let labels = vec![0usize, 2];

        let eval = |xd: &[f64], wd: &[f64]| -> f64 {
            let mut t = Tape::new();
            let x = t.leaf(&tensor(2, 3, xd.to_vec()));
            let w = t.leaf(&tensor(3, 3, wd.to_vec()));
            let h = t.matmul(x, w);
            let a = t.tanh(h);
            let lp = t.log_softmax(a);
            let p = t.exp(lp);
            let pl = t.mul(p, lp);
            let ent = t.sum_all(pl);
            let picked = t.pick_per_row(lp, &labels);
            let ce = t.mean_all(picked);
            let con = t.contrastive(a, &labels, 1.0);
            let s1 = t.scale(ent, -0.5);
            let s2 = t.scale(ce, -1.0);
            let s3 = t.add(s1, s2);
            let total = t.add(s3, con);
            t.scalar(total)
        };

        let mut t = Tape::new();
        let x = t.leaf(&tensor(2, 3, x0.clone()));
        let w = t.leaf(&tensor(3, 3, w0.clone()));
        let h = t.matmul(x, w);
        let a = t.tanh(h);
        let lp = t.log_softmax(a);
        let p = t.exp(lp);
        let pl = t.mul(p, lp);
        let ent = t.sum_all(pl);
        let picked = t.pick_per_row(lp, &labels);
        let ce = t.mean_all(picked);
        let con = t.contrastive(a, &labels, 1.0);
        let s1 = t.scale(ent, -0.5);
        let s2 = t.scale(ce, -1.0);
        let s3 = t.add(s1, s2);
        let total = t.add(s3, con);
        t.backward(total).unwrap();

        let h_step = 1e-5;
        for (buf, var, other, is_x) in [(&x0, x, &w0, true), (&w0, w, &x0, false)] {
            let analytic = t.grad(var).to_vec();
            for i in 0..buf.len() {
                let mut plus = buf.clone();
                let mut minus = buf.clone();
                plus[i] += h_step;
                minus[i] -= h_step;
                let (fp, fm) = if is_x {
                    (eval(&plus, other), eval(&minus, other))
                } else {
                    (eval(other, &plus), eval(other, &minus))
                };
                let numeric = (fp - fm) / (2.0 * h_step);
                let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
                assert!(
                    (analytic[i] - numeric).abs() / denom < 1e-4,
                    "coord {i}: analytic {} vs numeric {}",
                    analytic[i],
                    numeric
                );
            }
        }
    }
}
