//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value and
//! the parents it was computed from. Leaves are either constants (frozen
//! backbone weights, cached features) or parameters; only nodes that depend on
//! a parameter receive gradients during [`Graph::backward`].
//!
//! Every value is two-dimensional. Vectors are `1 x n` rows and scalars are
//! `1 x 1`.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

/// Smallest row norm used by [`Graph::normalize_rows`].
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    ScaleBy(Var, Var),
    Tanh(Var),
    SoftmaxRows(Var),
    NormalizeRows(Var, Vec<f64>),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    MeanRows(Var),
    MaxPerRow(Var, Vec<usize>),
    Mean(Var),
    SumAbs(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        inv_tau: f64,
        probs: Array2<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar node with respect to every tracked node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Array2<f64>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`, or zeros of `shape` when it was not reached.
    pub fn get_or_zeros(&self, var: Var, shape: (usize, usize)) -> Array2<f64> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(shape))
    }
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

    pub fn value(&self, var: Var) -> &Array2<f64> {
        &self.nodes[var.0].value
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, var: Var) -> f64 {
        let v = self.value(var);
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    pub fn shape(&self, var: Var) -> (usize, usize) {
        self.value(var).dim()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, var: Var) -> bool {
        self.nodes[var.0].tracked
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A `1 x n` constant row.
    pub fn constant_row(&mut self, values: &[f64]) -> Var {
        let row = Array2::from_shape_vec((1, values.len()), values.to_vec())
            .expect("row shape is always valid");
        self.constant(row)
    }

    pub fn parameter(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(
            av.ncols(),
            bv.nrows(),
            "matmul inner dimensions differ: {:?} x {:?}",
            av.dim(),
            bv.dim()
        );
        let value = av.dot(bv);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::MatMul(a, b), tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes differ");
        let value = self.value(a) + self.value(b);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Add(a, b), tracked)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shapes differ");
        let value = self.value(a) - self.value(b);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Sub(a, b), tracked)
    }

    /// Adds the `1 x n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(bv.nrows(), 1, "add_row expects a single row");
        assert_eq!(av.ncols(), bv.ncols(), "add_row widths differ");
        let value = av + bv;
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::AddRow(a, b), tracked)
    }

    /// `a * mul + add`, element-wise.
    pub fn affine(&mut self, a: Var, mul: f64, add: f64) -> Var {
        let value = self.value(a).mapv(|x| x * mul + add);
        let tracked = self.tracked(a);
        self.push(value, Op::Affine(a, mul), tracked)
    }

    pub fn scale(&mut self, a: Var, mul: f64) -> Var {
        self.affine(a, mul, 0.0)
    }

    /// Multiplies `a` by the `1 x 1` node `s`.
    pub fn scale_by(&mut self, s: Var, a: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1), "scale_by expects a scalar node");
        let k = self.scalar(s);
        let value = self.value(a) * k;
        let tracked = self.tracked(s) || self.tracked(a);
        self.push(value, Op::ScaleBy(s, a), tracked)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let tracked = self.tracked(a);
        self.push(value, Op::Tanh(a), tracked)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a).view());
        let tracked = self.tracked(a);
        self.push(value, Op::SoftmaxRows(a), tracked)
    }

    /// Divides every row by its L2 norm (floored at [`NORM_EPS`]).
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let norms: Vec<f64> = av
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt().max(NORM_EPS))
            .collect();
        let mut value = av.clone();
        for (mut row, n) in value.rows_mut().into_iter().zip(&norms) {
            row /= *n;
        }
        let tracked = self.tracked(a);
        self.push(value, Op::NormalizeRows(a, norms), tracked)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let tracked = self.tracked(a);
        self.push(value, Op::Transpose(a), tracked)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = concatenate(Axis(0), &views).expect("concat_rows widths differ");
        let tracked = parts.iter().any(|v| self.tracked(*v));
        self.push(value, Op::ConcatRows(parts.to_vec()), tracked)
    }

    /// Rows `start..end` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        let tracked = self.tracked(a);
        self.push(value, Op::SliceRows(a, start), tracked)
    }

    /// Column means as a `1 x n` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        assert!(av.nrows() > 0, "mean_rows of an empty matrix");
        let value = av
            .mean_axis(Axis(0))
            .expect("non-empty")
            .insert_axis(Axis(0));
        let tracked = self.tracked(a);
        self.push(value, Op::MeanRows(a), tracked)
    }

    /// Maximum of every row as an `n x 1` column; the first maximal entry wins.
    pub fn max_per_row(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut arg = Vec::with_capacity(av.nrows());
        let mut value = Array2::zeros((av.nrows(), 1));
        for (i, row) in av.rows().into_iter().enumerate() {
            let (j, m) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &x)| {
                    if x > best.1 {
                        (j, x)
                    } else {
                        best
                    }
                });
            arg.push(j);
            value[[i, 0]] = m;
        }
        let tracked = self.tracked(a);
        self.push(value, Op::MaxPerRow(a, arg), tracked)
    }

    /// Mean of all entries as a `1 x 1` node.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a).mean().expect("mean of an empty matrix");
        let tracked = self.tracked(a);
        self.push(Array2::from_elem((1, 1), v), Op::Mean(a), tracked)
    }

    /// Sum of absolute values of all entries as a `1 x 1` node.
    pub fn sum_abs(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| x.abs()).sum::<f64>();
        let tracked = self.tracked(a);
        self.push(Array2::from_elem((1, 1), v), Op::SumAbs(a), tracked)
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits / tau)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], tau: f64) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), labels.len(), "one label per logit row");
        let inv_tau = 1.0 / tau;
        let scaled = lv.mapv(|x| x * inv_tau);
        let probs = softmax_rows(scaled.view());
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = scaled.row(i);
            let top = row
                .iter()
                .enumerate()
                .fold(0, |best, (j, &x)| if x > row[best] { j } else { best });
            let max = row[top];
            let rest: f64 = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != top)
                .map(|(_, x)| (x - max).exp())
                .sum();
            total += (max - row[y]) + rest.ln_1p();
        }
        let loss = total / labels.len() as f64;
        let tracked = self.tracked(logits);
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                inv_tau,
                probs,
            },
            tracked,
        )
    }

    /// Back-propagates from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar node");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let send = |var: Var, g: Array2<f64>, grads: &mut Vec<Option<Array2<f64>>>| {
                if !self.nodes[var.0].tracked {
                    return;
                }
                match &mut grads[var.0] {
                    Some(acc) => *acc += &g,
                    slot @ None => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Leaf => grads[idx] = Some(upstream),
                Op::MatMul(a, b) => {
                    if self.tracked(*a) {
                        send(*a, upstream.dot(&self.value(*b).t()), &mut grads);
                    }
                    if self.tracked(*b) {
                        send(*b, self.value(*a).t().dot(&upstream), &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    send(*a, upstream.clone(), &mut grads);
                    send(*b, upstream.clone(), &mut grads);
                }
                Op::Sub(a, b) => {
                    send(*a, upstream.clone(), &mut grads);
                    send(*b, -&upstream, &mut grads);
                }
                Op::AddRow(a, b) => {
                    if self.tracked(*b) {
                        let row = upstream.sum_axis(Axis(0)).insert_axis(Axis(0));
                        send(*b, row, &mut grads);
                    }
                    send(*a, upstream.clone(), &mut grads);
                }
                Op::Affine(a, mul) => send(*a, &upstream * *mul, &mut grads),
                Op::ScaleBy(sv, a) => {
                    if self.tracked(*sv) {
                        let ds = (&upstream * self.value(*a)).sum();
                        send(*sv, Array2::from_elem((1, 1), ds), &mut grads);
                    }
                    if self.tracked(*a) {
                        send(*a, &upstream * self.scalar(*sv), &mut grads);
                    }
                }
                Op::Tanh(a) => {
                    let g = &upstream * &node.value.mapv(|y| 1.0 - y * y);
                    send(*a, g, &mut grads);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut g = Array2::zeros(y.dim());
                    for ((mut gr, yr), ur) in g
                        .rows_mut()
                        .into_iter()
                        .zip(y.rows())
                        .zip(upstream.rows())
                    {
                        let dot = yr.dot(&ur);
                        for ((gi, &yi), &ui) in gr.iter_mut().zip(yr).zip(ur) {
                            *gi = yi * (ui - dot);
                        }
                    }
                    send(*a, g, &mut grads);
                }
                Op::NormalizeRows(a, norms) => {
                    let y = &node.value;
                    let mut g = Array2::zeros(y.dim());
                    for (((mut gr, yr), ur), n) in g
                        .rows_mut()
                        .into_iter()
                        .zip(y.rows())
                        .zip(upstream.rows())
                        .zip(norms)
                    {
                        let dot = yr.dot(&ur);
                        for ((gi, &yi), &ui) in gr.iter_mut().zip(yr).zip(ur) {
                            *gi = (ui - yi * dot) / n;
                        }
                    }
                    send(*a, g, &mut grads);
                }
                Op::Transpose(a) => send(*a, upstream.t().to_owned(), &mut grads),
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let rows = self.value(*p).nrows();
                        if self.tracked(*p) {
                            let g = upstream.slice(s![start..start + rows, ..]).to_owned();
                            send(*p, g, &mut grads);
                        }
                        start += rows;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut g = Array2::zeros(self.shape(*a));
                    let rows = upstream.nrows();
                    g.slice_mut(s![*start..*start + rows, ..]).assign(&upstream);
                    send(*a, g, &mut grads);
                }
                Op::MeanRows(a) => {
                    let (rows, cols) = self.shape(*a);
                    let row = &upstream / rows as f64;
                    let g = row.broadcast((rows, cols)).expect("row broadcast").to_owned();
                    send(*a, g, &mut grads);
                }
                Op::MaxPerRow(a, arg) => {
                    let mut g = Array2::zeros(self.shape(*a));
                    for (i, &j) in arg.iter().enumerate() {
                        g[[i, j]] = upstream[[i, 0]];
                    }
                    send(*a, g, &mut grads);
                }
                Op::Mean(a) => {
                    let shape = self.shape(*a);
                    let n = (shape.0 * shape.1) as f64;
                    send(*a, Array2::from_elem(shape, upstream[[0, 0]] / n), &mut grads);
                }
                Op::SumAbs(a) => {
                    let u = upstream[[0, 0]];
                    let g = self.value(*a).mapv(|x| {
                        if x > 0.0 {
                            u
                        } else if x < 0.0 {
                            -u
                        } else {
                            0.0
                        }
                    });
                    send(*a, g, &mut grads);
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    inv_tau,
                    probs,
                } => {
                    let scale = upstream[[0, 0]] * inv_tau / labels.len() as f64;
                    let mut g = probs.clone();
                    for (i, &y) in labels.iter().enumerate() {
                        g[[i, y]] -= 1.0;
                    }
                    g *= scale;
                    send(*logits, g, &mut grads);
                }
            }
        }
        Gradients { grads }
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(a: ArrayView2<f64>) -> Array2<f64> {
    let mut out = a.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}
