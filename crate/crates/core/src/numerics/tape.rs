use crate::error::{Error, Result};
use crate::numerics::params::{Init, ParamStore};
use crate::numerics::real::Real;
use crate::numerics::tensor::{matmul_into, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    /// Leaf: external input or constant. No adjoint propagation.
    Leaf,
    /// Leaf bound to a named parameter; adjoints flow into the ParamStore.
    Param(String),
    Matmul { a: Var, b: Var },
    Transpose { input: Var },
    Add { a: Var, b: Var },
    /// Broadcast-add a length-n vector to every row of an m×n matrix.
    AddRow { a: Var, row: Var },
    Scale { input: Var, factor: f64 },
    Relu { input: Var },
    SoftmaxRows { input: Var },
    LayerNorm { input: Var, gain: Var, bias: Var, eps: f64 },
    ColSlice { input: Var, start: usize, len: usize },
    ColConcat { inputs: Vec<Var> },
    VStack { inputs: Vec<Var> },
    Reshape { input: Var },
    Sum { input: Var },
    CrossEntropyMean { logits: Var, targets: Vec<usize> },
}

#[derive(Debug, Clone)]
struct Node<R: Real> {
    value: Tensor<R>,
    op: Op,
}

/// Record of one forward pass. Construction order is topological, so the
/// backward sweep is a reverse iteration over the node list.
#[derive(Debug)]
pub struct Tape<R: Real> {
    nodes: Vec<Node<R>>,
    backward_done: bool,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Shapes of every row-softmax recorded so far, for attention-cost
    /// instrumentation in tests.
    pub fn softmax_shapes(&self) -> Vec<(usize, usize)> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::SoftmaxRows { .. }))
            .map(|n| (n.value.rows(), n.value.cols()))
            .collect()
    }

    fn push(&mut self, value: Tensor<R>, op: Op, context: &str) -> Result<Var> {
        value.check_finite(context)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Record an external input or constant.
    pub fn input(&mut self, value: Tensor<R>) -> Result<Var> {
        self.push(value, Op::Leaf, "input")
    }

    /// Register a named parameter from the store, creating it on first use.
    pub fn param(
        &mut self,
        store: &mut ParamStore<R>,
        name: &str,
        shape: &[usize],
        init: Init,
    ) -> Result<Var> {
        let value = store.get_or_init(name, shape, init)?.clone();
        self.push(value, Op::Param(name.to_string()), "param")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.is_matrix() || !tb.is_matrix() || ta.cols() != tb.rows() {
            return Err(Error::Dimension(format!(
                "matmul {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = Tensor::zeros(vec![m, n]);
        matmul_into(ta.data(), tb.data(), out.data_mut(), m, k, n);
        self.push(out, Op::Matmul { a, b }, "matmul")
    }

    pub fn transpose(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        if !t.is_matrix() {
            return Err(Error::Dimension(format!("transpose of {:?}", t.shape())));
        }
        let (m, n) = (t.rows(), t.cols());
        let mut out = Tensor::zeros(vec![n, m]);
        for i in 0..m {
            for j in 0..n {
                out.data_mut()[j * m + i] = t.data()[i * n + j];
            }
        }
        self.push(out, Op::Transpose { input }, "transpose")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "add {:?} + {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data().iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(out, Op::Add { a, b }, "add")
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if !ta.is_matrix() || tr.numel() != ta.cols() {
            return Err(Error::Dimension(format!(
                "add_row {:?} + {:?}",
                ta.shape(),
                tr.shape()
            )));
        }
        let n = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + tr.data()[i % n])
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::AddRow { a, row }, "add_row")
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let c = R::from_f64(factor);
        let t = self.value(input);
        let data = t.data().iter().map(|&x| x * c).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(out, Op::Scale { input, factor }, "scale")
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        let data = t.data().iter().map(|&x| x.maximum(R::ZERO)).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(out, Op::Relu { input }, "relu")
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        if !t.is_matrix() {
            return Err(Error::Dimension(format!("softmax of {:?}", t.shape())));
        }
        t.check_finite("softmax input")?;
        let (m, n) = (t.rows(), t.cols());
        let mut out = Tensor::zeros(vec![m, n]);
        for r in 0..m {
            let row = t.row_slice(r);
            let mut mx = row[0];
            for &x in row {
                mx = mx.maximum(x);
            }
            let mut denom = R::ZERO;
            for (j, &x) in row.iter().enumerate() {
                let e = (x - mx).exp();
                out.data_mut()[r * n + j] = e;
                denom += e;
            }
            for j in 0..n {
                out.data_mut()[r * n + j] /= denom;
            }
        }
        self.push(out, Op::SoftmaxRows { input }, "softmax_rows")
    }

    /// Row-wise layer normalization with learned gain/bias of length n.
    pub fn layer_norm(&mut self, input: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let t = self.value(input);
        if !t.is_matrix() {
            return Err(Error::Dimension(format!("layer_norm of {:?}", t.shape())));
        }
        let n = t.cols();
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(Error::Dimension(format!(
                "layer_norm gain/bias length != {n}"
            )));
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps {eps} must be > 0")));
        }
        let m = t.rows();
        let mut out = Tensor::zeros(vec![m, n]);
        let inv_n = R::from_f64(1.0 / n as f64);
        let epsr = R::from_f64(eps);
        for r in 0..m {
            let row = self.value(input).row_slice(r);
            let mean = row.iter().copied().sum::<R>() * inv_n;
            let var = row
                .iter()
                .map(|&x| (x - mean) * (x - mean))
                .sum::<R>()
                * inv_n;
            let inv_std = R::ONE / (var + epsr).sqrt();
            for j in 0..n {
                let xhat = (row[j] - mean) * inv_std;
                out.data_mut()[r * n + j] =
                    xhat * self.value(gain).data()[j] + self.value(bias).data()[j];
            }
        }
        self.push(out, Op::LayerNorm { input, gain, bias, eps }, "layer_norm")
    }

    /// Columns `[start, start+len)` of a matrix.
    pub fn col_slice(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(input);
        if !t.is_matrix() || start + len > t.cols() {
            return Err(Error::Dimension(format!(
                "col_slice {start}..{} of {:?}",
                start + len,
                t.shape()
            )));
        }
        let (m, n) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&t.data()[r * n + start..r * n + start + len]);
        }
        let out = Tensor::matrix(m, len, data)?;
        self.push(out, Op::ColSlice { input, start, len }, "col_slice")
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn col_concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::EmptyInput("col_concat of zero inputs".into()))?;
        let m = self.value(*first).rows();
        let mut total = 0;
        for &v in inputs {
            if self.value(v).rows() != m {
                return Err(Error::Dimension("col_concat row mismatch".into()));
            }
            total += self.value(v).cols();
        }
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for &v in inputs {
                data.extend_from_slice(self.value(v).row_slice(r));
            }
        }
        let out = Tensor::matrix(m, total, data)?;
        self.push(out, Op::ColConcat { inputs: inputs.to_vec() }, "col_concat")
    }

    /// Stack matrices with equal column counts along rows.
    pub fn vstack(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::EmptyInput("vstack of zero inputs".into()))?;
        let n = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &v in inputs {
            if self.value(v).cols() != n {
                return Err(Error::Dimension("vstack column mismatch".into()));
            }
            rows += self.value(v).rows();
            data.extend_from_slice(self.value(v).data());
        }
        let out = Tensor::matrix(rows, n, data)?;
        self.push(out, Op::VStack { inputs: inputs.to_vec() }, "vstack")
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(input);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(Error::Dimension(format!(
                "reshape {:?} -> {shape:?}",
                t.shape()
            )));
        }
        let out = Tensor::new(shape, t.data().to_vec())?;
        self.push(out, Op::Reshape { input }, "reshape")
    }

    /// Scalar sum of every element.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let total = self.value(input).data().iter().copied().sum::<R>();
        self.push(Tensor::scalar(total), Op::Sum { input }, "sum")
    }

    /// Mean cross-entropy between row logits and integer class targets,
    /// computed through a per-row log-sum-exp.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if !t.is_matrix() || t.rows() != targets.len() {
            return Err(Error::Dimension(format!(
                "cross_entropy logits {:?} vs {} targets",
                t.shape(),
                targets.len()
            )));
        }
        let (m, n) = (t.rows(), t.cols());
        if let Some(&bad) = targets.iter().find(|&&c| c >= n) {
            return Err(Error::Dimension(format!(
                "target class {bad} out of range for {n} logits"
            )));
        }
        let mut total = R::ZERO;
        for (r, &y) in targets.iter().enumerate() {
            let row = t.row_slice(r);
            let mut mx = row[0];
            for &x in row {
                mx = mx.maximum(x);
            }
            let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<R>().ln();
            total += lse - row[y];
        }
        let loss = total * R::from_f64(1.0 / m as f64);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyMean { logits, targets: targets.to_vec() },
            "cross_entropy_mean",
        )
    }

    /// Reverse sweep from a scalar loss. Adjoints of named parameters are
    /// accumulated into `store` and remain there until `zero_grads`.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<R>) -> Result<()> {
        if self.backward_done {
            return Err(Error::State("backward already ran on this tape".into()));
        }
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::State("backward without a recorded forward pass".into()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar loss, got {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.backward_done = true;

        let mut adjoints: Vec<Option<Tensor<R>>> = vec![None; self.nodes.len()];
        adjoints[loss.0] = Some(Tensor::scalar(R::ONE));

        for idx in (0..=loss.0).rev() {
            let Some(d_out) = adjoints[idx].take() else {
                continue;
            };
            d_out.check_finite("backward adjoint")?;
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::Param(name) => store.accumulate_grad(&name, &d_out)?,
                Op::Matmul { a, b } => self.vjp_matmul(&mut adjoints, a, b, &d_out),
                Op::Transpose { input } => {
                    let (m, n) = (self.nodes[input.0].value.rows(), self.nodes[input.0].value.cols());
                    let mut d_in = Tensor::zeros(vec![m, n]);
                    for i in 0..n {
                        for j in 0..m {
                            d_in.data_mut()[j * n + i] = d_out.data()[i * m + j];
                        }
                    }
                    accumulate(&mut adjoints, input, d_in);
                }
                Op::Add { a, b } => {
                    accumulate(&mut adjoints, a, d_out.clone());
                    accumulate(&mut adjoints, b, d_out);
                }
                Op::AddRow { a, row } => {
                    let n = self.nodes[a.0].value.cols();
                    let mut d_row = Tensor::zeros(self.nodes[row.0].value.shape().to_vec());
                    for (i, &g) in d_out.data().iter().enumerate() {
                        d_row.data_mut()[i % n] += g;
                    }
                    accumulate(&mut adjoints, a, d_out);
                    accumulate(&mut adjoints, row, d_row);
                }
                Op::Scale { input, factor } => {
                    let c = R::from_f64(factor);
                    let data = d_out.data().iter().map(|&g| g * c).collect();
                    let d_in = Tensor::new(d_out.shape().to_vec(), data).expect("shape kept");
                    accumulate(&mut adjoints, input, d_in);
                }
                Op::Relu { input } => {
                    let x = &self.nodes[input.0].value;
                    let data = d_out
                        .data()
                        .iter()
                        .zip(x.data().iter())
                        .map(|(&g, &xi)| if xi > R::ZERO { g } else { R::ZERO })
                        .collect();
                    let d_in = Tensor::new(x.shape().to_vec(), data).expect("shape kept");
                    accumulate(&mut adjoints, input, d_in);
                }
                Op::SoftmaxRows { input } => {
                    let s = &self.nodes[idx].value;
                    let (m, n) = (s.rows(), s.cols());
                    let mut d_in = Tensor::zeros(vec![m, n]);
                    for r in 0..m {
                        let srow = s.row_slice(r);
                        let grow = &d_out.data()[r * n..(r + 1) * n];
                        let dot = srow
                            .iter()
                            .zip(grow.iter())
                            .map(|(&si, &gi)| si * gi)
                            .sum::<R>();
                        for j in 0..n {
                            d_in.data_mut()[r * n + j] = srow[j] * (grow[j] - dot);
                        }
                    }
                    accumulate(&mut adjoints, input, d_in);
                }
                Op::LayerNorm { input, gain, bias, eps } => {
                    self.vjp_layer_norm(&mut adjoints, input, gain, bias, eps, &d_out);
                }
                Op::ColSlice { input, start, len } => {
                    let (m, n) = (self.nodes[input.0].value.rows(), self.nodes[input.0].value.cols());
                    let mut d_in = Tensor::zeros(vec![m, n]);
                    for r in 0..m {
                        for j in 0..len {
                            d_in.data_mut()[r * n + start + j] = d_out.data()[r * len + j];
                        }
                    }
                    accumulate(&mut adjoints, input, d_in);
                }
                Op::ColConcat { inputs } => {
                    let m = self.nodes[idx].value.rows();
                    let total = self.nodes[idx].value.cols();
                    let mut start = 0;
                    for v in inputs {
                        let w = self.nodes[v.0].value.cols();
                        let mut d_in = Tensor::zeros(vec![m, w]);
                        for r in 0..m {
                            for j in 0..w {
                                d_in.data_mut()[r * w + j] = d_out.data()[r * total + start + j];
                            }
                        }
                        accumulate(&mut adjoints, v, d_in);
                        start += w;
                    }
                }
                Op::VStack { inputs } => {
                    let n = self.nodes[idx].value.cols();
                    let mut offset = 0;
                    for v in inputs {
                        let m = self.nodes[v.0].value.rows();
                        let data = d_out.data()[offset..offset + m * n].to_vec();
                        let d_in = Tensor::matrix(m, n, data).expect("vstack slice");
                        accumulate(&mut adjoints, v, d_in);
                        offset += m * n;
                    }
                }
                Op::Reshape { input } => {
                    let shape = self.nodes[input.0].value.shape().to_vec();
                    let d_in = Tensor::new(shape, d_out.data().to_vec()).expect("reshape back");
                    accumulate(&mut adjoints, input, d_in);
                }
                Op::Sum { input } => {
                    let g = d_out.item();
                    let shape = self.nodes[input.0].value.shape().to_vec();
                    let numel = self.nodes[input.0].value.numel();
                    let d_in = Tensor::new(shape, vec![g; numel]).expect("sum broadcast");
                    accumulate(&mut adjoints, input, d_in);
                }
                Op::CrossEntropyMean { logits, targets } => {
                    let t = &self.nodes[logits.0].value;
                    let (m, n) = (t.rows(), t.cols());
                    let scale = d_out.item() * R::from_f64(1.0 / m as f64);
                    let mut d_in = Tensor::zeros(vec![m, n]);
                    for (r, &y) in targets.iter().enumerate() {
                        let row = t.row_slice(r);
                        let mut mx = row[0];
                        for &x in row {
                            mx = mx.maximum(x);
                        }
                        let denom = row.iter().map(|&x| (x - mx).exp()).sum::<R>();
                        for j in 0..n {
                            let p = (row[j] - mx).exp() / denom;
                            let delta = if j == y { R::ONE } else { R::ZERO };
                            d_in.data_mut()[r * n + j] = (p - delta) * scale;
                        }
                    }
                    accumulate(&mut adjoints, logits, d_in);
                }
            }
        }
        Ok(())
    }

    fn vjp_matmul(&self, adjoints: &mut [Option<Tensor<R>>], a: Var, b: Var, d_out: &Tensor<R>) {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        // dA = dOut · Bᵀ
        let mut bt = vec![R::ZERO; n * k];
        for i in 0..k {
            for j in 0..n {
                bt[j * k + i] = tb.data()[i * n + j];
            }
        }
        let mut d_a = Tensor::zeros(vec![m, k]);
        matmul_into(d_out.data(), &bt, d_a.data_mut(), m, n, k);
        // dB = Aᵀ · dOut
        let mut at = vec![R::ZERO; k * m];
        for i in 0..m {
            for j in 0..k {
                at[j * m + i] = ta.data()[i * k + j];
            }
        }
        let mut d_b = Tensor::zeros(vec![k, n]);
        matmul_into(&at, d_out.data(), d_b.data_mut(), k, m, n);
        accumulate_slice(adjoints, a, d_a);
        accumulate_slice(adjoints, b, d_b);
    }

    fn vjp_layer_norm(
        &self,
        adjoints: &mut [Option<Tensor<R>>],
        input: Var,
        gain: Var,
        bias: Var,
        eps: f64,
        d_out: &Tensor<R>,
    ) {
        let x = &self.nodes[input.0].value;
        let g = &self.nodes[gain.0].value;
        let (m, n) = (x.rows(), x.cols());
        let inv_n = R::from_f64(1.0 / n as f64);
        let epsr = R::from_f64(eps);
        let mut d_in = Tensor::zeros(vec![m, n]);
        let mut d_gain = Tensor::zeros(g.shape().to_vec());
        let mut d_bias = Tensor::zeros(g.shape().to_vec());
        for r in 0..m {
            let row = x.row_slice(r);
            let grow = &d_out.data()[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<R>() * inv_n;
            let var = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<R>()
                * inv_n;
            let inv_std = R::ONE / (var + epsr).sqrt();
            // xhat_j and dxhat_j = g_j·dout_j
            let mut mean_dxhat = R::ZERO;
            let mut mean_dxhat_xhat = R::ZERO;
            let mut xhat = vec![R::ZERO; n];
            let mut dxhat = vec![R::ZERO; n];
            for j in 0..n {
                xhat[j] = (row[j] - mean) * inv_std;
                dxhat[j] = grow[j] * g.data()[j];
                mean_dxhat += dxhat[j];
                mean_dxhat_xhat += dxhat[j] * xhat[j];
            }
            mean_dxhat *= inv_n;
            mean_dxhat_xhat *= inv_n;
            for j in 0..n {
                d_in.data_mut()[r * n + j] =
                    (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat) * inv_std;
                d_gain.data_mut()[j] += grow[j] * xhat[j];
                d_bias.data_mut()[j] += grow[j];
            }
        }
        accumulate_slice(adjoints, input, d_in);
        accumulate_slice(adjoints, gain, d_gain);
        accumulate_slice(adjoints, bias, d_bias);
    }
}

fn accumulate<R: Real>(adjoints: &mut [Option<Tensor<R>>], v: Var, delta: Tensor<R>) {
    accumulate_slice(adjoints, v, delta)
}

fn accumulate_slice<R: Real>(adjoints: &mut [Option<Tensor<R>>], v: Var, delta: Tensor<R>) {
    match &mut adjoints[v.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta.data().iter()) {
                *e += *d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::params::Init;

    #[test]
    fn backward_without_forward_is_state_error() {
        let mut tape = Tape::<f64>::new();
        let mut store = ParamStore::new(0);
        let r = tape.backward(Var(0), &mut store);
        assert!(matches!(r, Err(Error::State(_))));
    }

    #[test]
    fn backward_twice_is_state_error() {
        let mut tape = Tape::<f64>::new();
        let mut store = ParamStore::new(0);
        let w = tape.param(&mut store, "w", &[2], Init::Ones).unwrap();
        let loss = tape.sum(w).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert!(matches!(tape.backward(loss, &mut store), Err(Error::State(_))));
    }

    #[test]
    fn backward_needs_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let mut store = ParamStore::new(0);
        let w = tape.param(&mut store, "w", &[2], Init::Ones).unwrap();
        assert!(matches!(
            tape.backward(w, &mut store),
            Err(Error::Dimension(_))
        ));
    }
}
