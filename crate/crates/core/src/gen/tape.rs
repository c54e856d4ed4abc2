//! Minimal reverse-mode differentiation over dense `f64` matrices.
//!
//! Row vectors are `1 x n` matrices. Parameters enter the tape by index; the
//! backward pass accumulates their gradients into caller-owned buffers.

use ndarray::{s, Array2, Axis};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param(usize),
    Embed { param: usize, row: usize },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `m x n` plus a broadcast `1 x n`.
    AddRow(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Abs(Var),
    Sqrt(Var),
    Square(Var),
    Softplus(Var),
    Concat(Vec<Var>),
    Slice(Var, usize, usize),
    StackRows(Vec<Var>),
    Transpose(Var),
    SoftmaxRow(Var),
    /// Negative log-softmax of a `1 x n` row at one index.
    Nll(Var, usize),
    Sum(Var),
    MeanRows(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn row(values: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, values.len()), values.to_vec()).unwrap()
}

fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
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

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn row_values(&self, v: Var) -> Vec<f64> {
        self.value(v).iter().copied().collect()
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Const)
    }

    pub fn constant_row(&mut self, values: &[f64]) -> Var {
        self.constant(row(values))
    }

    pub fn param(&mut self, index: usize, value: &Array2<f64>) -> Var {
        self.push(value.clone(), Op::Param(index))
    }

    /// Row `row` of parameter table `index`, as a `1 x n` leaf.
    pub fn embed(&mut self, index: usize, table: &Array2<f64>, row: usize) -> Var {
        let v = table.slice(s![row..row + 1, ..]).to_owned();
        self.push(v, Op::Embed { param: index, row })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::AddRow(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, Op::Offset(a))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(a).mapv(f);
        self.push(v, op)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, f64::abs, Op::Abs(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, softplus, Op::Softplus(a))
    }

    /// Column-wise concatenation of equal-height blocks.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat heights differ");
        self.push(v, Op::Concat(parts.to_vec()))
    }

    /// Columns `start..end`.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::Slice(a, start, end))
    }

    /// Stacks `1 x n` rows into an `m x n` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Var {
        let views: Vec<_> = rows.iter().map(|&r| self.value(r).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("row widths differ");
        self.push(v, Op::StackRows(rows.to_vec()))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn softmax_row(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut v = x.mapv(|e| (e - m).exp());
        let z = v.sum();
        v /= z;
        self.push(v, Op::SoftmaxRow(a))
    }

    pub fn nll(&mut self, logits: Var, target: usize) -> Var {
        let x = self.value(logits);
        let xs: Vec<f64> = x.iter().copied().collect();
        let v = log_sum_exp(&xs) - xs[target];
        self.push(Array2::from_elem((1, 1), v), Op::Nll(logits, target))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).sum();
        self.push(Array2::from_elem((1, 1), v), Op::Sum(a))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).mean_axis(Axis(0)).unwrap().insert_axis(Axis(0));
        self.push(v, Op::MeanRows(a))
    }

    /// Adds `d loss / d param` into `grads[index]` for every parameter leaf.
    pub fn backward(&self, loss: Var, grads: &mut [Array2<f64>]) {
        let mut adj: Vec<Option<Array2<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Array2::ones(self.value(loss).raw_dim()));

        fn acc(adj: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut adj[v.0] {
                Some(a) => *a += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            let out = &node.value;
            match &node.op {
                Op::Const => {}
                Op::Param(p) => grads[*p] += &g,
                Op::Embed { param, row } => {
                    let mut r = grads[*param].slice_mut(s![*row..*row + 1, ..]);
                    r += &g;
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *b, g.clone());
                    acc(&mut adj, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *b, -&g);
                    acc(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::AddRow(a, b) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut adj, *b, gb);
                    acc(&mut adj, *a, g);
                }
                Op::Scale(a, c) => acc(&mut adj, *a, g * *c),
                Op::Offset(a) => acc(&mut adj, *a, g),
                Op::Sigmoid(a) => {
                    let d = ndarray::Zip::from(&g).and(out).map_collect(|g, y| g * y * (1.0 - y));
                    acc(&mut adj, *a, d);
                }
                Op::Tanh(a) => {
                    let d = ndarray::Zip::from(&g).and(out).map_collect(|g, y| g * (1.0 - y * y));
                    acc(&mut adj, *a, d);
                }
                Op::Exp(a) => acc(&mut adj, *a, g * out),
                Op::Abs(a) => {
                    let d = ndarray::Zip::from(&g)
                        .and(self.value(*a))
                        .map_collect(|g, x| if *x > 0.0 { *g } else if *x < 0.0 { -g } else { 0.0 });
                    acc(&mut adj, *a, d);
                }
                Op::Sqrt(a) => {
                    let d = ndarray::Zip::from(&g)
                        .and(out)
                        .map_collect(|g, y| if *y > 0.0 { 0.5 * g / y } else { 0.0 });
                    acc(&mut adj, *a, d);
                }
                Op::Square(a) => {
                    let d = ndarray::Zip::from(&g).and(self.value(*a)).map_collect(|g, x| 2.0 * g * x);
                    acc(&mut adj, *a, d);
                }
                Op::Softplus(a) => {
                    let d = ndarray::Zip::from(&g)
                        .and(self.value(*a))
                        .map_collect(|g, x| g * sigmoid(*x));
                    acc(&mut adj, *a, d);
                }
                Op::Concat(parts) => {
                    let mut col = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        acc(&mut adj, p, g.slice(s![.., col..col + w]).to_owned());
                        col += w;
                    }
                }
                Op::Slice(a, start, end) => {
                    let mut full = Array2::zeros(self.value(*a).raw_dim());
                    full.slice_mut(s![.., *start..*end]).assign(&g);
                    acc(&mut adj, *a, full);
                }
                Op::StackRows(rows) => {
                    for (k, &r) in rows.iter().enumerate() {
                        acc(&mut adj, r, g.slice(s![k..k + 1, ..]).to_owned());
                    }
                }
                Op::Transpose(a) => acc(&mut adj, *a, g.t().to_owned()),
                Op::SoftmaxRow(a) => {
                    let dot = (&g * out).sum();
                    let d = out * &(g - dot);
                    acc(&mut adj, *a, d);
                }
                Op::Nll(a, target) => {
                    let x = self.value(*a);
                    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut p = x.mapv(|e| (e - m).exp());
                    p /= p.sum();
                    p[[0, *target]] -= 1.0;
                    acc(&mut adj, *a, p * g[[0, 0]]);
                }
                Op::Sum(a) => {
                    acc(&mut adj, *a, Array2::from_elem(self.value(*a).raw_dim(), g[[0, 0]]));
                }
                Op::MeanRows(a) => {
                    let x = self.value(*a);
                    let m = x.nrows() as f64;
                    let d = g.broadcast(x.raw_dim()).unwrap().mapv(|v| v / m);
                    acc(&mut adj, *a, d);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central differences of `f` w.r.t. every entry of `p`.
    fn numeric(p: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
        let h = 1e-6;
        let mut g = Array2::zeros(p.raw_dim());
        for idx in ndarray::indices(p.raw_dim()) {
            let mut a = p.clone();
            a[idx] += h;
            let mut b = p.clone();
            b[idx] -= h;
            g[idx] = (f(&a) - f(&b)) / (2.0 * h);
        }
        g
    }

    fn check(p: Array2<f64>, build: impl Fn(&mut Tape, Var) -> Var) {
        let f = |q: &Array2<f64>| {
            let mut t = Tape::new();
            let v = t.param(0, q);
            let out = build(&mut t, v);
            t.scalar(out)
        };
        let mut t = Tape::new();
        let v = t.param(0, &p);
        let out = build(&mut t, v);
        let mut grads = vec![Array2::zeros(p.raw_dim())];
        t.backward(out, &mut grads);
        let n = numeric(&p, f);
        for (a, b) in grads[0].iter().zip(n.iter()) {
            assert!((a - b).abs() < 1e-6 * (1.0 + b.abs()), "{} vs {}", grads[0], n);
        }
    }

    #[test]
    fn elementwise_ops() {
        let p = array![[0.3, -1.2, 0.7]];
        check(p.clone(), |t, v| {
            let a = t.sigmoid(v);
            let b = t.tanh(v);
            let c = t.mul(a, b);
            let e = t.exp(c);
            let s = t.softplus(e);
            let q = t.square(s);
            let r = t.sqrt(q);
            let ab = t.abs(v);
            let y = t.add(r, ab);
            let y = t.offset(y, 2.0);
            let y = t.scale(y, -0.5);
            t.sum(y)
        });
    }

    #[test]
    fn matrix_ops() {
        let p = array![[0.3, -1.2, 0.7], [0.1, 0.4, -0.9]];
        check(p, |t, v| {
            let w = t.constant(array![[1.0, 0.5], [-0.3, 0.2], [0.7, 0.1]]);
            let m = t.matmul(v, w);
            let r = t.slice(v, 1, 3);
            let row = t.mean_rows(r);
            let shifted = t.add_row(m, row);
            let tr = t.transpose(shifted);
            let first = t.slice(tr, 0, 1);
            let first = t.transpose(first);
            let st = t.stack_rows(&[first, row]);
            let c = t.concat(&[st, st]);
            let sm = t.softmax_row(first);
            let s1 = t.mul(sm, first);
            let x = t.sum(c);
            let y = t.sum(s1);
            let z = t.sub(x, y);
            t.square(z)
        });
    }

    #[test]
    fn nll_and_embedding() {
        let table = array![[0.2, -0.4, 1.0], [0.5, 0.1, -0.3]];
        check(table.clone(), |t, v| {
            let r = t.slice(v, 0, 3);
            let s = t.mean_rows(r);
            t.nll(s, 2)
        });
        let mut t = Tape::new();
        let e = t.embed(0, &table, 1);
        let n = t.nll(e, 0);
        let mut grads = vec![Array2::zeros(table.raw_dim())];
        t.backward(n, &mut grads);
        assert_eq!(grads[0].row(0).to_vec(), vec![0.0; 3]);
        let p: Vec<f64> = {
            let ex: Vec<f64> = table.row(1).iter().map(|v| v.exp()).collect();
            let z: f64 = ex.iter().sum();
            ex.iter().map(|v| v / z).collect()
        };
        assert!((grads[0][[1, 0]] - (p[0] - 1.0)).abs() < 1e-12);
        assert!((grads[0][[1, 1]] - p[1]).abs() < 1e-12);
    }

    #[test]
    fn softmax_of_one_is_exact() {
        let mut t = Tape::new();
        let x = t.constant_row(&[3.7]);
        let s = t.softmax_row(x);
        assert_eq!(t.scalar(s), 1.0);
    }

    #[test]
    fn stable_sigmoid_and_softplus() {
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
    }
}
