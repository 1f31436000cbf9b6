//! Reverse-mode differentiation on an append-only expression graph.
//!
//! Every backward rule is itself written with graph operations, so the
//! gradient nodes produced by [`Graph::gradients`] are ordinary nodes that
//! can be differentiated again. That is what makes exact meta-gradients
//! through an inner SGD step possible: build the inner gradient, form the
//! updated parameters from it, evaluate the outer loss, and call
//! `gradients` a second time.
//!
//! Nodes hold 2-D values. Leaves come in two kinds: [`Graph::param`]
//! (tracked, receives gradients) and [`Graph::input`] (constant).
//! Non-smooth points (ReLU, clamping) use constant masks, so their second
//! derivatives are zero almost everywhere.

use super::tensor::{matmul, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { a: Var, scale: f64 },
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    LogSoftmax(Var),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    BroadcastRows(Var),
    BroadcastCols(Var),
    BroadcastScalar(Var),
    SliceCols { a: Var, start: usize },
    PadCols { a: Var, start: usize },
}

impl Op {
    fn inputs(&self) -> [Option<Var>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            MatMul { a, b, .. } | Add(a, b) | Sub(a, b) | Mul(a, b) => [Some(a), Some(b)],
            Affine { a, .. }
            | Sigmoid(a)
            | Tanh(a)
            | Exp(a)
            | LogSoftmax(a)
            | SumAll(a)
            | SumRows(a)
            | SumCols(a)
            | BroadcastRows(a)
            | BroadcastCols(a)
            | BroadcastScalar(a)
            | SliceCols { a, .. }
            | PadCols { a, .. } => [Some(a), None],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let tracked = op
            .inputs()
            .iter()
            .flatten()
            .any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: &Tensor, tracked: bool) -> Var {
        self.nodes.push(Node {
            value: value.as_matrix(),
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf.
    pub fn input(&mut self, value: &Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: &Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: f64) -> Var {
        self.input(&Tensor::filled(&[rows, cols], value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.len(), 1);
        t.data()[0]
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    /// Copies the value into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let value = matmul(self.value(a), self.value(b), ta, tb);
        self.push(value, Op::MatMul { a, b, ta, tb })
    }

    fn elementwise(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.dims(a), self.dims(b), "elementwise shape mismatch");
        self.value(a).zip_map(self.value(b), f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.elementwise(a, b, |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.elementwise(a, b, |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.elementwise(a, b, |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    /// `scale · a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(a).map(|x| scale * x + shift);
        self.push(value, Op::Affine { a, scale })
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.affine(a, k, 0.0)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 0.0)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mask = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
        let m = self.input(&mask);
        self.mul(a, m)
    }

    /// `max(a, min)` elementwise.
    pub fn clamp_min(&mut self, a: Var, min: f64) -> Var {
        let v = self.value(a);
        let mask = v.map(|x| if x > min { 1.0 } else { 0.0 });
        let floor = mask.map(|m| (1.0 - m) * min);
        let m = self.input(&mask);
        let f = self.input(&floor);
        let kept = self.mul(a, m);
        self.add(kept, f)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = t.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|x| x - lse));
        }
        self.push(Tensor::matrix(r, c, out), Op::LogSoftmax(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::matrix(1, 1, vec![s]), Op::SumAll(a))
    }

    /// Column sums: `r × c → 1 × c`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, x) in out.iter_mut().zip(t.row(i)) {
                *o += x;
            }
        }
        self.push(Tensor::matrix(1, c, out), Op::SumRows(a))
    }

    /// Row sums: `r × c → r × 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let r = t.rows();
        let out = (0..r).map(|i| t.row(i).iter().sum()).collect();
        self.push(Tensor::matrix(r, 1, out), Op::SumCols(a))
    }

    /// Repeats a `1 × c` row `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Var {
        let t = self.value(a);
        assert_eq!(t.rows(), 1, "broadcast_rows expects a single row");
        let c = t.cols();
        let mut out = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            out.extend_from_slice(t.data());
        }
        self.push(Tensor::matrix(rows, c, out), Op::BroadcastRows(a))
    }

    /// Repeats an `r × 1` column `cols` times.
    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Var {
        let t = self.value(a);
        assert_eq!(t.cols(), 1, "broadcast_cols expects a single column");
        let r = t.rows();
        let mut out = Vec::with_capacity(r * cols);
        for &x in t.data() {
            out.extend(std::iter::repeat_n(x, cols));
        }
        self.push(Tensor::matrix(r, cols, out), Op::BroadcastCols(a))
    }

    pub fn broadcast_scalar(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let x = self.scalar(a);
        self.push(
            Tensor::filled(&[rows, cols], x),
            Op::BroadcastScalar(a),
        )
    }

    /// `a + b` with the `1 × c` row `b` broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let rows = self.dims(a).0;
        let bb = if rows == 1 { b } else { self.broadcast_rows(b, rows) };
        self.add(a, bb)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        assert!(start + len <= c, "column slice out of range");
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&t.row(i)[start..start + len]);
        }
        self.push(Tensor::matrix(r, len, out), Op::SliceCols { a, start })
    }

    /// Embeds `a` into a zero matrix with `total` columns starting at `start`.
    pub fn pad_cols(&mut self, a: Var, start: usize, total: usize) -> Var {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        assert!(start + c <= total, "column pad out of range");
        let mut out = vec![0.0; r * total];
        for i in 0..r {
            out[i * total + start..i * total + start + c].copy_from_slice(t.row(i));
        }
        self.push(Tensor::matrix(r, total, out), Op::PadCols { a, start })
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// The returned nodes live in this graph and stay differentiable
    /// wherever they depend on tracked leaves. Unreachable targets get a
    /// zero constant.
    pub fn gradients(&mut self, output: Var, wrt: &[Var]) -> Vec<Var> {
        assert_eq!(self.dims(output), (1, 1), "gradients need a scalar output");
        let n = output.0 + 1;

        // Nodes through which some target influences the output.
        let mut relevant = vec![false; n];
        for w in wrt {
            if w.0 < n {
                relevant[w.0] = true;
            }
        }
        for i in 0..n {
            if !relevant[i] && self.nodes[i].tracked {
                relevant[i] = self.nodes[i]
                    .op
                    .inputs()
                    .iter()
                    .flatten()
                    .any(|v| relevant[v.0]);
            }
        }

        let mut adj: Vec<Option<Var>> = vec![None; n];
        adj[output.0] = Some(self.constant(1, 1, 1.0));
        for i in (0..n).rev() {
            let Some(g) = adj[i] else { continue };
            if !relevant[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            for (input, gi) in self.backward(Var(i), &op, g, &relevant) {
                adj[input.0] = Some(match adj[input.0] {
                    None => gi,
                    Some(prev) => self.add(prev, gi),
                });
            }
        }

        wrt.iter()
            .map(|w| match adj.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let (r, c) = self.dims(*w);
                    self.constant(r, c, 0.0)
                }
            })
            .collect()
    }

    fn backward(&mut self, out: Var, op: &Op, g: Var, relevant: &[bool]) -> Vec<(Var, Var)> {
        let want = |v: Var| relevant[v.0];
        let mut res = Vec::with_capacity(2);
        match *op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                if want(a) {
                    let ga = if ta {
                        self.matmul_t(b, g, tb, true)
                    } else {
                        self.matmul_t(g, b, false, !tb)
                    };
                    res.push((a, ga));
                }
                if want(b) {
                    let gb = if tb {
                        self.matmul_t(g, a, true, ta)
                    } else {
                        self.matmul_t(a, g, !ta, false)
                    };
                    res.push((b, gb));
                }
            }
            Op::Add(a, b) => {
                if want(a) {
                    res.push((a, g));
                }
                if want(b) {
                    res.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if want(a) {
                    res.push((a, g));
                }
                if want(b) {
                    let gb = self.neg(g);
                    res.push((b, gb));
                }
            }
            Op::Mul(a, b) => {
                if want(a) {
                    let ga = self.mul(g, b);
                    res.push((a, ga));
                }
                if want(b) {
                    let gb = self.mul(g, a);
                    res.push((b, gb));
                }
            }
            Op::Affine { a, scale } => {
                let ga = self.scale(g, scale);
                res.push((a, ga));
            }
            Op::Sigmoid(a) => {
                let one_minus = self.affine(out, -1.0, 1.0);
                let d = self.mul(out, one_minus);
                let ga = self.mul(g, d);
                res.push((a, ga));
            }
            Op::Tanh(a) => {
                let sq = self.mul(out, out);
                let d = self.affine(sq, -1.0, 1.0);
                let ga = self.mul(g, d);
                res.push((a, ga));
            }
            Op::Exp(a) => {
                let ga = self.mul(g, out);
                res.push((a, ga));
            }
            Op::LogSoftmax(a) => {
                let cols = self.dims(out).1;
                let p = self.exp(out);
                let s = self.sum_cols(g);
                let sb = self.broadcast_cols(s, cols);
                let ps = self.mul(p, sb);
                let ga = self.sub(g, ps);
                res.push((a, ga));
            }
            Op::SumAll(a) => {
                let (r, c) = self.dims(a);
                let ga = self.broadcast_scalar(g, r, c);
                res.push((a, ga));
            }
            Op::SumRows(a) => {
                let r = self.dims(a).0;
                let ga = self.broadcast_rows(g, r);
                res.push((a, ga));
            }
            Op::SumCols(a) => {
                let c = self.dims(a).1;
                let ga = self.broadcast_cols(g, c);
                res.push((a, ga));
            }
            Op::BroadcastRows(a) => {
                let ga = self.sum_rows(g);
                res.push((a, ga));
            }
            Op::BroadcastCols(a) => {
                let ga = self.sum_cols(g);
                res.push((a, ga));
            }
            Op::BroadcastScalar(a) => {
                let ga = self.sum(g);
                res.push((a, ga));
            }
            Op::SliceCols { a, start, .. } => {
                let total = self.dims(a).1;
                let ga = self.pad_cols(g, start, total);
                res.push((a, ga));
            }
            Op::PadCols { a, start, .. } => {
                let len = self.dims(a).1;
                let ga = self.slice_cols(g, start, len);
                res.push((a, ga));
            }
        }
        res
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let p = g.param(&Tensor::vector(vec![1.0, -2.0]));
        let sq = g.square(p);
        let loss = g.sum(sq);
        let grad = g.gradients(loss, &[p])[0];
        assert_eq!(g.value(grad).data(), &[2.0, -4.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut g = Graph::new();
        let p = g.param(&Tensor::vector(vec![3.0, 4.0]));
        let c = g.constant(1, 1, 5.0);
        let grad = g.gradients(c, &[p])[0];
        assert_eq!(g.value(grad).data(), &[0.0, 0.0]);
    }

    #[test]
    fn second_derivative_of_cube() {
        // f(x) = x^3, f'(x) = 3x^2, f''(x) = 6x
        let mut g = Graph::new();
        let x = g.param(&Tensor::vector(vec![1.5]));
        let x2 = g.mul(x, x);
        let x3 = g.mul(x2, x);
        let f = g.sum(x3);
        let d1 = g.gradients(f, &[x])[0];
        assert!((g.scalar(d1) - 6.75).abs() < 1e-12);
        let d1s = g.sum(d1);
        let d2 = g.gradients(d1s, &[x])[0];
        assert!((g.scalar(d2) - 9.0).abs() < 1e-12);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::vector(vec![2.0]));
        let d = g.detach(x);
        let y = g.mul(x, d);
        let s = g.sum(y);
        let gx = g.gradients(s, &[x])[0];
        assert_eq!(g.scalar(gx), 2.0);
    }

    #[test]
    fn log_softmax_rows_normalize() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 1000.0]));
        let l = g.log_softmax(x);
        let t = g.value(l).clone();
        for i in 0..2 {
            let s: f64 = t.row(i).iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
