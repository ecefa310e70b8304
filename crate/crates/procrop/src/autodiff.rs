//! Minimal reverse-mode automatic differentiation over `f64` matrices.
//!
//! Every tensor in the crate's model is a 2-D matrix (token rows x channel
//! columns); images enter through an im2col gather so convolutions reduce to
//! matrix products. A [`Tape`] records the forward graph; [`Tape::backward`]
//! walks it once in reverse and accumulates gradients for every node.
//!
//! The op set is deliberately small and chunky (matmul-level granularity).
//! Piecewise ops (relu, abs, min/max) route gradients to the active branch;
//! ties are measure-zero for the random inputs the gradient checks use.

use std::sync::Arc;

use ndarray::{Array2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    MulElem(Var, Var),
    DivElem(Var, Var),
    /// `a: n x d` plus a `1 x d` row broadcast over every row.
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Relu(Var),
    Abs(Var),
    SoftmaxRows(Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    /// Row gather: `out[r] = src[idx[r]]`.
    GatherRows(Var, Arc<Vec<usize>>),
    /// Flat-index gather with zero fill for negative indices; used for
    /// im2col. `out.flat[e] = if map[e] >= 0 { src.flat[map[e]] } else { 0 }`.
    GatherFlat(Var, Arc<Vec<i64>>),
    MaxElem(Var, Var),
    MinElem(Var, Var),
    SumAll(Var),
}

struct Node {
    op: Op,
    value: Array2<f64>,
}

/// Forward graph plus recorded values.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn to_standard(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().to_owned()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v` (zeros if `v` did not
    /// influence the loss).
    pub fn wrt(&self, tape: &Tape, v: Var) -> Array2<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(tape.shape(v)),
        }
    }
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

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.shape(v), (1, 1));
        self.nodes[v.0].value[(0, 0)]
    }

    fn push(&mut self, op: Op, value: Array2<f64>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn scalar_leaf(&mut self, value: f64) -> Var {
        self.leaf(Array2::from_elem((1, 1), value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(Op::MulElem(a, b), v)
    }

    pub fn div_elem(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) / self.value(b);
        self.push(Op::DivElem(a, b), v)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.shape(row).0, 1);
        debug_assert_eq!(self.shape(a).1, self.shape(row).1);
        let v = self.value(a) + self.value(row);
        self.push(Op::AddRow(a, row), v)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(Op::Scale(a, c), v)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(Op::AddScalar(a), v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(Op::Sigmoid(a), v)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::abs);
        self.push(Op::Abs(a), v)
    }

    /// Row-wise softmax with max subtraction; every output row sums to one.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        self.push(Op::SoftmaxRows(a), v)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        // `t().to_owned()` can keep Fortran order; normalize so flat-index
        // ops downstream can rely on standard layout.
        let v = to_standard(self.value(a).t().to_owned());
        self.push(Op::Transpose(a), v)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        debug_assert!(!parts.is_empty());
        let cols = self.shape(parts[0]).1;
        let rows: usize = parts.iter().map(|p| self.shape(*p).0).sum();
        let mut v = Array2::zeros((rows, cols));
        let mut at = 0;
        for p in parts {
            let pv = self.value(*p);
            let n = pv.nrows();
            v.slice_mut(ndarray::s![at..at + n, ..]).assign(pv);
            at += n;
        }
        self.push(Op::ConcatRows(parts.to_vec()), v)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self
            .value(a)
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        self.push(Op::SliceCols(a, start, len), v)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Var {
        let src = self.value(a);
        let mut v = Array2::zeros((idx.len(), src.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            v.row_mut(r).assign(&src.row(i));
        }
        self.push(Op::GatherRows(a, idx), v)
    }

    pub fn gather_flat(&mut self, a: Var, map: Arc<Vec<i64>>, shape: (usize, usize)) -> Var {
        debug_assert_eq!(map.len(), shape.0 * shape.1);
        let src = self.value(a);
        let owned;
        let s = match src.as_slice() {
            Some(s) => s,
            None => {
                owned = to_standard(src.clone());
                owned.as_slice().expect("normalized to standard layout")
            }
        };
        let flat: Vec<f64> = map
            .iter()
            .map(|&j| if j >= 0 { s[j as usize] } else { 0.0 })
            .collect();
        let v = Array2::from_shape_vec(shape, flat).expect("shape matches map");
        self.push(Op::GatherFlat(a, map), v)
    }

    pub fn max_elem(&mut self, a: Var, b: Var) -> Var {
        let v = ndarray::Zip::from(self.value(a))
            .and(self.value(b))
            .map_collect(|&x, &y| x.max(y));
        self.push(Op::MaxElem(a, b), v)
    }

    pub fn min_elem(&mut self, a: Var, b: Var) -> Var {
        let v = ndarray::Zip::from(self.value(a))
            .and(self.value(b))
            .map_collect(|&x, &y| x.min(y));
        self.push(Op::MinElem(a, b), v)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(Op::SumAll(a), v)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// `min(max(x, 0), 1)` composed from relu so gradients pass through the
    /// interior and vanish outside.
    pub fn clamp01(&mut self, a: Var) -> Var {
        let lo = self.relu(a);
        let flipped = self.scale(lo, -1.0);
        let shifted = self.add_scalar(flipped, 1.0);
        let hi = self.relu(shifted);
        let back = self.scale(hi, -1.0);
        self.add_scalar(back, 1.0)
    }

    /// Reverse pass from a `1 x 1` loss node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..self.nodes.len()).rev() {
            let dy = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            // Re-insert so callers can read gradients of interior nodes too.
            grads[i] = Some(dy.clone());

            let accum = |grads: &mut Vec<Option<Array2<f64>>>, v: Var, g: Array2<f64>| {
                match &mut grads[v.0] {
                    Some(existing) => *existing += &g,
                    slot @ None => *slot = Some(g),
                }
            };

            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = dy.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&dy);
                    accum(&mut grads, *a, da);
                    accum(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accum(&mut grads, *a, dy.clone());
                    accum(&mut grads, *b, dy);
                }
                Op::Sub(a, b) => {
                    accum(&mut grads, *a, dy.clone());
                    accum(&mut grads, *b, -dy);
                }
                Op::MulElem(a, b) => {
                    let da = &dy * self.value(*b);
                    let db = &dy * self.value(*a);
                    accum(&mut grads, *a, da);
                    accum(&mut grads, *b, db);
                }
                Op::DivElem(a, b) => {
                    let bv = self.value(*b);
                    let da = &dy / bv;
                    let db = -(&dy * &self.nodes[i].value) / bv;
                    accum(&mut grads, *a, da);
                    accum(&mut grads, *b, db);
                }
                Op::AddRow(a, row) => {
                    let drow = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accum(&mut grads, *a, dy);
                    accum(&mut grads, *row, drow);
                }
                Op::Scale(a, c) => accum(&mut grads, *a, dy * *c),
                Op::AddScalar(a) => accum(&mut grads, *a, dy),
                Op::Sigmoid(a) => {
                    let y = &self.nodes[i].value;
                    let da = &dy * y * &y.mapv(|v| 1.0 - v);
                    accum(&mut grads, *a, da);
                }
                Op::Relu(a) => {
                    let mask = self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    accum(&mut grads, *a, dy * mask);
                }
                Op::Abs(a) => {
                    let sign = self.value(*a).mapv(|x| {
                        if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    accum(&mut grads, *a, dy * sign);
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[i].value;
                    let mut da = Array2::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let yr = y.row(r);
                        let dr = dy.row(r);
                        let dot: f64 = yr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                        for c in 0..y.ncols() {
                            da[(r, c)] = yr[c] * (dr[c] - dot);
                        }
                    }
                    accum(&mut grads, *a, da);
                }
                Op::Transpose(a) => accum(&mut grads, *a, to_standard(dy.t().to_owned())),
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let n = self.shape(*p).0;
                        let part = dy.slice(ndarray::s![at..at + n, ..]).to_owned();
                        accum(&mut grads, *p, part);
                        at += n;
                    }
                }
                Op::SliceCols(a, start, len) => {
                    let mut da = Array2::zeros(self.shape(*a));
                    da.slice_mut(ndarray::s![.., *start..start + len]).assign(&dy);
                    accum(&mut grads, *a, da);
                }
                Op::GatherRows(a, idx) => {
                    let mut da = Array2::zeros(self.shape(*a));
                    for (r, &srow) in idx.iter().enumerate() {
                        let mut dst = da.row_mut(srow);
                        dst += &dy.row(r);
                    }
                    accum(&mut grads, *a, da);
                }
                Op::GatherFlat(a, map) => {
                    let mut da = Array2::zeros(self.shape(*a));
                    let dy = to_standard(dy);
                    {
                        let ds = da.as_slice_mut().expect("zeros are standard layout");
                        let dyf = dy.as_slice().expect("normalized to standard layout");
                        for (e, &j) in map.iter().enumerate() {
                            if j >= 0 {
                                ds[j as usize] += dyf[e];
                            }
                        }
                    }
                    accum(&mut grads, *a, da);
                }
                Op::MaxElem(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let mask = ndarray::Zip::from(av)
                        .and(bv)
                        .map_collect(|&x, &y| if x >= y { 1.0 } else { 0.0 });
                    let da = &dy * &mask;
                    let db = &dy * &mask.mapv(|m| 1.0 - m);
                    accum(&mut grads, *a, da);
                    accum(&mut grads, *b, db);
                }
                Op::MinElem(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let mask = ndarray::Zip::from(av)
                        .and(bv)
                        .map_collect(|&x, &y| if x <= y { 1.0 } else { 0.0 });
                    let da = &dy * &mask;
                    let db = &dy * &mask.mapv(|m| 1.0 - m);
                    accum(&mut grads, *a, da);
                    accum(&mut grads, *b, db);
                }
                Op::SumAll(a) => {
                    let da = Array2::from_elem(self.shape(*a), dy[(0, 0)]);
                    accum(&mut grads, *a, da);
                }
            }
        }
        Gradients { grads }
    }
}
