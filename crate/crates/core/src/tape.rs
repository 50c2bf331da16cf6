//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive application in topological order; a
//! single backward pass over the reversed tape accumulates gradients
//! additively, so reusing a variable in several expressions produces the sum
//! of the partial gradients. The primitive set is exactly what the flow and
//! loss expressions need: matmul, elementwise arithmetic, row-broadcast bias
//! add, reductions, column concat/slice, pointwise nonlinearities, and a
//! fused softmax cross-entropy.
//!
//! All tape arithmetic is f64; gradient checks rely on that headroom.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct VarId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(VarId, VarId),
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    ScalarMul(VarId, f64),
    /// n×k plus a 1×k row vector broadcast over rows.
    AddRow(VarId, VarId),
    /// Elementwise multiply by a broadcast 1×1 variable.
    ScaleByScalar(VarId, VarId),
    Sum(VarId),
    Mean(VarId),
    Transpose(VarId),
    ConcatCols(VarId, VarId),
    SliceCols(VarId, usize, usize),
    Exp(VarId),
    Log(VarId),
    Sqrt(VarId),
    Tanh(VarId),
    Relu(VarId),
    Square(VarId),
    /// Mean softmax cross-entropy of n×k logits against class indices.
    SoftmaxCrossEntropy(VarId, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive applications and runs reverse-mode backward.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients keyed by the node index they belong to.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the differentiated scalar w.r.t. `id`; zeros if the
    /// variable never influenced the output.
    pub fn get(&self, id: VarId, like: &Tensor) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(like.rows(), like.cols()),
        }
    }

    pub fn try_get(&self, id: VarId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
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

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<VarId> {
        value.check_finite(op_name(&op))?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(VarId(self.nodes.len() - 1))
    }

    fn rg(&self, ids: &[VarId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Insert a leaf. Parameters use `requires_grad = true`; data constants
    /// use `constant`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<VarId> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<VarId> {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.value(a).zip(self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.value(a).zip(self.value(b), |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.value(a).zip(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scalar_mul(&mut self, a: VarId, c: f64) -> Result<VarId> {
        let v = self.value(a).map(|x| c * x);
        let rg = self.rg(&[a]);
        self.push(v, Op::ScalarMul(a, c), rg)
    }

    pub fn add_row(&mut self, a: VarId, row: VarId) -> Result<VarId> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(Error::Shape(format!(
                "add_row: {:?} + {:?}",
                av.shape(),
                rv.shape()
            )));
        }
        let c = av.cols();
        let mut out = av.clone();
        for i in 0..av.rows() {
            for j in 0..c {
                let v = out.at(i, j) + rv.at(0, j);
                out.set(i, j, v);
            }
        }
        let rg = self.rg(&[a, row]);
        self.push(out, Op::AddRow(a, row), rg)
    }

    pub fn scale_by_scalar(&mut self, a: VarId, s: VarId) -> Result<VarId> {
        let sv = self.value(s).scalar_value()?;
        let v = self.value(a).map(|x| x * sv);
        let rg = self.rg(&[a, s]);
        self.push(v, Op::ScaleByScalar(a, s), rg)
    }

    pub fn sum(&mut self, a: VarId) -> Result<VarId> {
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        let rg = self.rg(&[a]);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: VarId) -> Result<VarId> {
        let n = self.value(a).numel() as f64;
        let v = Tensor::scalar(self.value(a).data().iter().sum::<f64>() / n);
        let rg = self.rg(&[a]);
        self.push(v, Op::Mean(a), rg)
    }

    pub fn transpose(&mut self, a: VarId) -> Result<VarId> {
        let v = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(v, Op::Transpose(a), rg)
    }

    pub fn concat_cols(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(Error::Shape(format!(
                "concat_cols: {:?} | {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (n, ca, cb) = (av.rows(), av.cols(), bv.cols());
        let mut out = Tensor::zeros(n, ca + cb);
        for i in 0..n {
            for j in 0..ca {
                out.set(i, j, av.at(i, j));
            }
            for j in 0..cb {
                out.set(i, ca + j, bv.at(i, j));
            }
        }
        let rg = self.rg(&[a, b]);
        self.push(out, Op::ConcatCols(a, b), rg)
    }

    pub fn slice_cols(&mut self, a: VarId, from: usize, to: usize) -> Result<VarId> {
        let av = self.value(a);
        if from >= to || to > av.cols() {
            return Err(Error::Shape(format!(
                "slice_cols [{from},{to}) of {:?}",
                av.shape()
            )));
        }
        let n = av.rows();
        let mut out = Tensor::zeros(n, to - from);
        for i in 0..n {
            for j in from..to {
                out.set(i, j - from, av.at(i, j));
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::SliceCols(a, from, to), rg)
    }

    pub fn exp(&mut self, a: VarId) -> Result<VarId> {
        let v = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: VarId) -> Result<VarId> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::Domain("log of non-positive value".into()));
        }
        let v = self.value(a).map(f64::ln);
        let rg = self.rg(&[a]);
        self.push(v, Op::Log(a), rg)
    }

    pub fn sqrt(&mut self, a: VarId) -> Result<VarId> {
        if self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(Error::Domain("sqrt of negative value".into()));
        }
        let v = self.value(a).map(f64::sqrt);
        let rg = self.rg(&[a]);
        self.push(v, Op::Sqrt(a), rg)
    }

    pub fn tanh(&mut self, a: VarId) -> Result<VarId> {
        let v = self.value(a).map(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: VarId) -> Result<VarId> {
        let v = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn square(&mut self, a: VarId) -> Result<VarId> {
        let v = self.value(a).map(|x| x * x);
        let rg = self.rg(&[a]);
        self.push(v, Op::Square(a), rg)
    }

    /// ‖a‖₂ over all elements, as sqrt(sum(square)).
    pub fn l2_norm(&mut self, a: VarId) -> Result<VarId> {
        let sq = self.square(a)?;
        let s = self.sum(sq)?;
        self.sqrt(s)
    }

    pub fn softmax_cross_entropy(&mut self, logits: VarId, targets: &[usize]) -> Result<VarId> {
        let lv = self.value(logits);
        let (n, k) = (lv.rows(), lv.cols());
        if targets.len() != n {
            return Err(Error::Shape(format!(
                "cross-entropy: {n} rows, {} targets",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Contract(format!("target {t} out of range 0..{k}")));
        }
        let mut total = 0.0;
        for i in 0..n {
            let row: Vec<f64> = (0..k).map(|j| lv.at(i, j)).collect();
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            total += lse - row[targets[i]];
        }
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(total / n as f64),
            Op::SoftmaxCrossEntropy(logits, targets.to_vec()),
            rg,
        )
    }

    /// Reverse pass from a scalar output. Every node reachable from a
    /// requires_grad leaf is visited exactly once.
    pub fn backward(&self, output: VarId) -> Result<Gradients> {
        let out = &self.nodes[output.0];
        if !out.value.is_scalar() {
            return Err(Error::Contract(
                "backward requires a scalar output".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], id: VarId, delta: Tensor) -> Result<()> {
        if !self.nodes[id.0].requires_grad {
            return Ok(());
        }
        match &mut grads[id.0] {
            Some(g) => {
                *g = g.zip(&delta, |a, b| a + b)?;
            }
            slot @ None => *slot = Some(delta),
        }
        Ok(())
    }

    fn accumulate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let bt = self.value(*b).transpose();
                self.acc(grads, *a, g.matmul(&bt)?)?;
                let at = self.value(*a).transpose();
                self.acc(grads, *b, at.matmul(g)?)?;
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone())?;
                self.acc(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone())?;
                self.acc(grads, *b, g.map(|x| -x))?;
            }
            Op::Mul(a, b) => {
                self.acc(grads, *a, g.zip(self.value(*b), |x, y| x * y)?)?;
                self.acc(grads, *b, g.zip(self.value(*a), |x, y| x * y)?)?;
            }
            Op::ScalarMul(a, c) => {
                self.acc(grads, *a, g.map(|x| c * x))?;
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, g.clone())?;
                let c = g.cols();
                let mut rg = Tensor::zeros(1, c);
                for i in 0..g.rows() {
                    for j in 0..c {
                        let v = rg.at(0, j) + g.at(i, j);
                        rg.set(0, j, v);
                    }
                }
                self.acc(grads, *row, rg)?;
            }
            Op::ScaleByScalar(a, s) => {
                let sv = self.value(*s).scalar_value()?;
                self.acc(grads, *a, g.map(|x| x * sv))?;
                let dot: f64 = g
                    .data()
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(&gi, &ai)| gi * ai)
                    .sum();
                self.acc(grads, *s, Tensor::scalar(dot))?;
            }
            Op::Sum(a) => {
                let gv = g.scalar_value()?;
                self.acc(grads, *a, self.value(*a).map(|_| gv))?;
            }
            Op::Mean(a) => {
                let gv = g.scalar_value()? / self.value(*a).numel() as f64;
                self.acc(grads, *a, self.value(*a).map(|_| gv))?;
            }
            Op::Transpose(a) => {
                self.acc(grads, *a, g.transpose())?;
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.value(*a).cols(), self.value(*b).cols());
                let n = g.rows();
                let mut ga = Tensor::zeros(n, ca);
                let mut gb = Tensor::zeros(n, cb);
                for i in 0..n {
                    for j in 0..ca {
                        ga.set(i, j, g.at(i, j));
                    }
                    for j in 0..cb {
                        gb.set(i, j, g.at(i, ca + j));
                    }
                }
                self.acc(grads, *a, ga)?;
                self.acc(grads, *b, gb)?;
            }
            Op::SliceCols(a, from, _to) => {
                let av = self.value(*a);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        ga.set(i, from + j, g.at(i, j));
                    }
                }
                self.acc(grads, *a, ga)?;
            }
            Op::Exp(a) => {
                self.acc(grads, *a, g.zip(&node.value, |x, y| x * y)?)?;
            }
            Op::Log(a) => {
                self.acc(grads, *a, g.zip(self.value(*a), |x, y| x / y)?)?;
            }
            Op::Sqrt(a) => {
                self.acc(grads, *a, g.zip(&node.value, |x, y| x / (2.0 * y))?)?;
            }
            Op::Tanh(a) => {
                self.acc(grads, *a, g.zip(&node.value, |x, t| x * (1.0 - t * t))?)?;
            }
            Op::Relu(a) => {
                self.acc(
                    grads,
                    *a,
                    g.zip(self.value(*a), |x, v| if v > 0.0 { x } else { 0.0 })?,
                )?;
            }
            Op::Square(a) => {
                self.acc(grads, *a, g.zip(self.value(*a), |x, v| 2.0 * v * x)?)?;
            }
            Op::SoftmaxCrossEntropy(logits, targets) => {
                let gv = g.scalar_value()?;
                let lv = self.value(*logits);
                let (n, k) = (lv.rows(), lv.cols());
                let mut gl = Tensor::zeros(n, k);
                for i in 0..n {
                    let row: Vec<f64> = (0..k).map(|j| lv.at(i, j)).collect();
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = row.iter().map(|&x| (x - m).exp()).sum();
                    for j in 0..k {
                        let p = (row[j] - m).exp() / denom;
                        let ind = if targets[i] == j { 1.0 } else { 0.0 };
                        gl.set(i, j, gv * (p - ind) / n as f64);
                    }
                }
                self.acc(grads, *logits, gl)?;
            }
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::ScalarMul(..) => "scalar_mul",
        Op::AddRow(..) => "add_row",
        Op::ScaleByScalar(..) => "scale_by_scalar",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::Transpose(..) => "transpose",
        Op::ConcatCols(..) => "concat_cols",
        Op::SliceCols(..) => "slice_cols",
        Op::Exp(..) => "exp",
        Op::Log(..) => "log",
        Op::Sqrt(..) => "sqrt",
        Op::Tanh(..) => "tanh",
        Op::Relu(..) => "relu",
        Op::Square(..) => "square",
        Op::SoftmaxCrossEntropy(..) => "softmax_cross_entropy",
    }
}

/// Compare the reverse-mode gradient of `f` at `x` against central finite
/// differences with step `h`. Returns the maximum over coordinates of
/// |g_ad − g_fd| / max(1, |g_fd|).
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, VarId) -> Result<VarId>,
{
    if h <= 0.0 {
        return Err(Error::Contract("grad_check: h must be positive".into()));
    }
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let xid = tape.leaf(t.clone(), true)?;
        let out = f(&mut tape, xid)?;
        tape.value(out).scalar_value()
    };

    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone(), true)?;
    let out = f(&mut tape, xid)?;
    if !tape.value(out).is_scalar() {
        return Err(Error::Contract("grad_check: f must be scalar-valued".into()));
    }
    let grads = tape.backward(out)?;
    let g_ad = grads.get(xid, x);

    let mut max_err: f64 = 0.0;
    for i in 0..x.numel() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let g_fd = (eval(&xp)? - eval(&xm)?) / (2.0 * h);
        let err = (g_ad.data()[i] - g_fd).abs() / g_fd.abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}
