//! Dynamic reverse-mode tape.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and
//! accumulates adjoints for every node that contributed to it.

use crate::error::{Error, Result};

use super::Tensor;

/// Handle to a node on a [`Graph`].
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
    MatMul(usize, usize),
    AddBias(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Tanh(usize),
    Relu(usize),
    Square(usize),
    LogSigmoid(usize),
    GatherRows(usize, Vec<usize>),
    SegmentMean(usize, Vec<usize>),
    RowDot(usize, usize),
    RowNorm(usize),
    Sum(usize),
    Mean(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` did not
    /// contribute to the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// `out = A B` for an `m x k` by `k x n` product; operands are addressed by
/// `(row stride, column stride)` so transposes need no copy.
fn gemm(
    (m, k, n): (usize, usize, usize),
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    out: &mut [f64],
) {
    assert!(out.len() == m * n && a.len() >= m * k && b.len() >= k * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the strides address exactly the m x k, k x n and m x n
    // row-major or transposed buffers whose lengths are asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
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

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input. Leaves receive gradients like any other node.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ak) = self.value(a).dims();
        let (bk, bc) = self.value(b).dims();
        if ak != bk {
            return Err(Error::shape("matmul inner dimension", &[ar, ak], &[bk, bc]));
        }
        let mut out = vec![0.0; ar * bc];
        gemm(
            (ar, ak, bc),
            self.value(a).values(),
            (ak, 1),
            self.value(b).values(),
            (bc, 1),
            &mut out,
        );
        let value = Tensor::matrix(ar, bc, out)?;
        Ok(self.push(value, Op::MatMul(a.0, b.0)))
    }

    /// `x + bias` with `bias` broadcast over the rows of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims();
        let bl = self.value(bias).len();
        if bl != c {
            return Err(Error::shape("bias width", &[c], self.value(bias).shape()));
        }
        let b = self.value(bias).values();
        let mut out = self.value(x).values().to_vec();
        for i in 0..r {
            for (o, &bj) in out[i * c..(i + 1) * c].iter_mut().zip(b) {
                *o += bj;
            }
        }
        let value = Tensor::matrix(r, c, out)?;
        Ok(self.push(value, Op::AddBias(x.0, bias.0)))
    }

    fn same_dims(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (da, db) = (self.value(a).dims(), self.value(b).dims());
        if da != db {
            return Err(Error::shape(what, &[da.0, da.1], &[db.0, db.1]));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ra, ca) = self.value(a).dims();
        let vals = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::matrix(ra, ca, vals).expect("dims checked")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        t.with_values(t.values().iter().map(|&x| f(x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "add")?;
        let value = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(value, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "sub")?;
        let value = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(value, Op::Sub(a.0, b.0)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "mul")?;
        let value = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(value, Op::Mul(a.0, b.0)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.map(a, |x| c * x);
        self.push(value, Op::Scale(a.0, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.map(a, |x| x + c);
        self.push(value, Op::AddScalar(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.map(a, f64::tanh);
        self.push(value, Op::Tanh(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.map(a, |x| x.max(0.0));
        self.push(value, Op::Relu(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.map(a, |x| x * x);
        self.push(value, Op::Square(a.0))
    }

    /// `log(sigmoid(x))`, stable for large `|x|`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let value = self.map(a, log_sigmoid);
        self.push(value, Op::LogSigmoid(a.0))
    }

    /// Selects rows of `a` by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (r, c) = self.value(a).dims();
        let src = self.value(a).values();
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(Error::Invalid(format!("row index {i} out of range for {r} rows")));
            }
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let value = Tensor::matrix(indices.len(), c, out)?;
        Ok(self.push(value, Op::GatherRows(a.0, indices.to_vec())))
    }

    /// Averages consecutive groups of rows; group `g` spans `lengths[g]` rows.
    pub fn segment_mean(&mut self, a: Var, lengths: &[usize]) -> Result<Var> {
        let (r, c) = self.value(a).dims();
        let total: usize = lengths.iter().sum();
        if total != r || lengths.contains(&0) {
            return Err(Error::Invalid(format!(
                "segment lengths {lengths:?} do not partition {r} rows"
            )));
        }
        let src = self.value(a).values();
        let mut out = vec![0.0; lengths.len() * c];
        let mut start = 0;
        for (g, &len) in lengths.iter().enumerate() {
            let orow = &mut out[g * c..(g + 1) * c];
            for i in start..start + len {
                for (o, &x) in orow.iter_mut().zip(&src[i * c..(i + 1) * c]) {
                    *o += x;
                }
            }
            let inv = 1.0 / len as f64;
            orow.iter_mut().for_each(|o| *o *= inv);
            start += len;
        }
        let value = Tensor::matrix(lengths.len(), c, out)?;
        Ok(self.push(value, Op::SegmentMean(a.0, lengths.to_vec())))
    }

    /// Per-row inner product, producing an `r x 1` column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "row_dot")?;
        let (r, c) = self.value(a).dims();
        let (av, bv) = (self.value(a).values(), self.value(b).values());
        let out = (0..r)
            .map(|i| {
                av[i * c..(i + 1) * c]
                    .iter()
                    .zip(&bv[i * c..(i + 1) * c])
                    .map(|(x, y)| x * y)
                    .sum()
            })
            .collect();
        let value = Tensor::matrix(r, 1, out)?;
        Ok(self.push(value, Op::RowDot(a.0, b.0)))
    }

    /// Per-row Euclidean norm, producing an `r x 1` column.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let (r, c) = self.value(a).dims();
        let av = self.value(a).values();
        let out = (0..r)
            .map(|i| av[i * c..(i + 1) * c].iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let value = Tensor::matrix(r, 1, out).expect("column");
        self.push(value, Op::RowNorm(a.0))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).values().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.values().iter().sum::<f64>() / t.len().max(1) as f64;
        self.push(Tensor::scalar(m), Op::Mean(a.0))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(lv.with_values(vec![1.0]));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            // interior adjoints are dropped once propagated
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (ar, ak) = self.nodes[*a].value.dims();
                    let bc = self.nodes[*b].value.cols();
                    let av = self.nodes[*a].value.values();
                    let bv = self.nodes[*b].value.values();
                    let gv = g.values();
                    // dA = G B^T
                    let mut ga = vec![0.0; ar * ak];
                    gemm((ar, bc, ak), gv, (bc, 1), bv, (1, bc), &mut ga);
                    // dB = A^T G
                    let mut gb = vec![0.0; ak * bc];
                    gemm((ak, ar, bc), av, (1, ak), gv, (bc, 1), &mut gb);
                    let ta = self.nodes[*a].value.with_values(ga);
                    let tb = self.nodes[*b].value.with_values(gb);
                    accumulate(&mut grads, *a, ta);
                    accumulate(&mut grads, *b, tb);
                }
                Op::AddBias(x, bias) => {
                    let c = self.nodes[*x].value.cols();
                    let mut gb = vec![0.0; c];
                    for row in g.values().chunks(c) {
                        for (o, &v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    let tb = self.nodes[*bias].value.with_values(gb);
                    accumulate(&mut grads, *bias, tb);
                    let tx = self.nodes[*x].value.with_values(g.into_values());
                    accumulate(&mut grads, *x, tx);
                }
                Op::Add(a, b) => {
                    let tb = self.nodes[*b].value.with_values(g.values().to_vec());
                    accumulate(&mut grads, *b, tb);
                    let ta = self.nodes[*a].value.with_values(g.into_values());
                    accumulate(&mut grads, *a, ta);
                }
                Op::Sub(a, b) => {
                    let tb = self.nodes[*b]
                        .value
                        .with_values(g.values().iter().map(|v| -v).collect());
                    accumulate(&mut grads, *b, tb);
                    let ta = self.nodes[*a].value.with_values(g.into_values());
                    accumulate(&mut grads, *a, ta);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.nodes[*a].value.values(), self.nodes[*b].value.values());
                    let ga = g.values().iter().zip(bv).map(|(g, y)| g * y).collect();
                    let gb = g.values().iter().zip(av).map(|(g, x)| g * x).collect();
                    let ta = self.nodes[*a].value.with_values(ga);
                    let tb = self.nodes[*b].value.with_values(gb);
                    accumulate(&mut grads, *a, ta);
                    accumulate(&mut grads, *b, tb);
                }
                Op::Scale(a, c) => {
                    let ta = self.nodes[*a]
                        .value
                        .with_values(g.values().iter().map(|v| c * v).collect());
                    accumulate(&mut grads, *a, ta);
                }
                Op::AddScalar(a) => {
                    let ta = self.nodes[*a].value.with_values(g.into_values());
                    accumulate(&mut grads, *a, ta);
                }
                Op::Tanh(a) => {
                    let ga = g
                        .values()
                        .iter()
                        .zip(node.value.values())
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect();
                    let ta = self.nodes[*a].value.with_values(ga);
                    accumulate(&mut grads, *a, ta);
                }
                Op::Relu(a) => {
                    let ga = g
                        .values()
                        .iter()
                        .zip(self.nodes[*a].value.values())
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect();
                    let ta = self.nodes[*a].value.with_values(ga);
                    accumulate(&mut grads, *a, ta);
                }
                Op::Square(a) => {
                    let ga = g
                        .values()
                        .iter()
                        .zip(self.nodes[*a].value.values())
                        .map(|(g, x)| 2.0 * g * x)
                        .collect();
                    let ta = self.nodes[*a].value.with_values(ga);
                    accumulate(&mut grads, *a, ta);
                }
                Op::LogSigmoid(a) => {
                    let ga = g
                        .values()
                        .iter()
                        .zip(self.nodes[*a].value.values())
                        .map(|(g, x)| g * sigmoid(-x))
                        .collect();
                    let ta = self.nodes[*a].value.with_values(ga);
                    accumulate(&mut grads, *a, ta);
                }
                Op::GatherRows(a, indices) => {
                    let src = &self.nodes[*a].value;
                    let c = src.cols();
                    let mut ga = vec![0.0; src.len()];
                    for (row, &i) in g.values().chunks(c).zip(indices) {
                        for (o, &v) in ga[i * c..(i + 1) * c].iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    let ta = src.with_values(ga);
                    accumulate(&mut grads, *a, ta);
                }
                Op::SegmentMean(a, lengths) => {
                    let src = &self.nodes[*a].value;
                    let c = src.cols();
                    let mut ga = vec![0.0; src.len()];
                    let mut start = 0;
                    for (grow, &len) in g.values().chunks(c).zip(lengths) {
                        let inv = 1.0 / len as f64;
                        for i in start..start + len {
                            for (o, &v) in ga[i * c..(i + 1) * c].iter_mut().zip(grow) {
                                *o = v * inv;
                            }
                        }
                        start += len;
                    }
                    let ta = src.with_values(ga);
                    accumulate(&mut grads, *a, ta);
                }
                Op::RowDot(a, b) => {
                    let c = self.nodes[*a].value.cols();
                    let (av, bv) = (self.nodes[*a].value.values(), self.nodes[*b].value.values());
                    let mut ga = vec![0.0; av.len()];
                    let mut gb = vec![0.0; bv.len()];
                    for (i, &gi) in g.values().iter().enumerate() {
                        for j in i * c..(i + 1) * c {
                            ga[j] = gi * bv[j];
                            gb[j] = gi * av[j];
                        }
                    }
                    let ta = self.nodes[*a].value.with_values(ga);
                    let tb = self.nodes[*b].value.with_values(gb);
                    accumulate(&mut grads, *a, ta);
                    accumulate(&mut grads, *b, tb);
                }
                Op::RowNorm(a) => {
                    let src = &self.nodes[*a].value;
                    let c = src.cols();
                    let av = src.values();
                    let mut ga = vec![0.0; av.len()];
                    for (i, (&gi, &n)) in g.values().iter().zip(node.value.values()).enumerate() {
                        // subgradient 0 at the origin
                        if n > 0.0 {
                            for j in i * c..(i + 1) * c {
                                ga[j] = gi * av[j] / n;
                            }
                        }
                    }
                    let ta = src.with_values(ga);
                    accumulate(&mut grads, *a, ta);
                }
                Op::Sum(a) => {
                    let gi = g.values()[0];
                    let src = &self.nodes[*a].value;
                    let ta = src.with_values(vec![gi; src.len()]);
                    accumulate(&mut grads, *a, ta);
                }
                Op::Mean(a) => {
                    let src = &self.nodes[*a].value;
                    let gi = g.values()[0] / src.len().max(1) as f64;
                    let ta = src.with_values(vec![gi; src.len()]);
                    accumulate(&mut grads, *a, ta);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
    match &mut grads[idx] {
        Some(acc) => {
            for (a, v) in acc.values_mut().iter_mut().zip(g.values()) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
