use super::{Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that made it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Gather { table: Var, ids: Vec<usize> },
    MatMul(Var, Var),
    MatMulT(Var, Var),
    AddRowBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LogFloor(Var, f64),
    MeanRows(Var),
    Sum(Var),
    Pick(Var, usize),
    Reshape(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Gather { .. } => "gather",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::AddRowBias(..) => "add_row_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::SoftmaxRows(..) => "softmax",
            Op::LogSoftmaxRows(..) => "log_softmax",
            Op::LogFloor(..) => "log",
            Op::MeanRows(..) => "mean_rows",
            Op::Sum(..) => "sum",
            Op::Pick(..) => "pick",
            Op::Reshape(..) => "reshape",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Ordered record of primitive operations. Nodes are appended in evaluation
/// order, so every operation's inputs precede it.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    replayed: usize,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `var`; zeros when `var` did not reach the loss.
    pub fn wrt(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        match self.grads[var.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    /// Number of tape nodes visited during the reverse sweep.
    pub fn replayed(&self) -> usize {
        self.replayed
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.0].value.data()[0]
    }

    /// Differentiable leaf (parameter or input).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        let node = self.nodes.len();
        if !value.is_finite() {
            return Err(TensorError::NonFinite {
                op: op.name(),
                node,
            });
        }
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(node))
    }

    /// Row gather: `out[i] = table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "gather",
                lhs: t.shape().to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let (rows, cols) = t.rows_cols();
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather",
                    index: id,
                    extent: rows,
                });
            }
            out.extend_from_slice(t.row(id));
        }
        let value = Tensor::new(vec![ids.len(), cols], out)?;
        self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(mismatch("matmul", av, bv));
        }
        let value = matmul_raw(av, bv);
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    /// `a[m,k] · b[n,k]ᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[1] {
            return Err(mismatch("matmul_t", av, bv));
        }
        let value = matmul_t_raw(av, bv);
        self.push(value, Op::MatMulT(a, b), &[a, b])
    }

    /// Adds a length-`n` bias to every row of `a`. The only broadcast supported.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        let (_, cols) = av.rows_cols();
        if bv.shape() != [cols] || av.is_scalar() {
            return Err(mismatch("add_row_bias", av, bv));
        }
        let mut value = av.clone();
        for row in value.data_mut().chunks_mut(cols) {
            for (x, b) in row.iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        self.push(value, Op::AddRowBias(a, bias), &[a, bias])
    }

    fn zip_with(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch(name, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "add", |x, y| x + y)?;
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "sub", |x, y| x - y)?;
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "mul", |x, y| x * y)?;
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let mut value = self.value(a).clone();
        value.scale_in_place(factor);
        self.push(value, Op::Scale(a, factor), &[a])
    }

    /// ReLU with subgradient 0 at 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let mut value = self.value(a).clone();
        for v in value.data_mut() {
            *v = v.max(0.0);
        }
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (_, cols) = av.rows_cols();
        let mut value = av.clone();
        for row in value.data_mut().chunks_mut(cols) {
            let p = super::softmax(row);
            row.copy_from_slice(&p);
        }
        self.push(value, Op::SoftmaxRows(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (_, cols) = av.rows_cols();
        let mut value = av.clone();
        for row in value.data_mut().chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            for z in row.iter_mut() {
                *z -= lse;
            }
        }
        self.push(value, Op::LogSoftmaxRows(a), &[a])
    }

    /// `ln(max(a, floor))`; the gradient is zero where the floor is active.
    pub fn log_floor(&mut self, a: Var, floor: f64) -> Result<Var> {
        let mut value = self.value(a).clone();
        for v in value.data_mut() {
            *v = v.max(floor).ln();
        }
        self.push(value, Op::LogFloor(a, floor), &[a])
    }

    /// Column means of a matrix; yields a vector.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (rows, cols) = av.rows_cols();
        if rows == 0 {
            return Err(TensorError::InvalidArgument("mean_rows over zero rows".into()));
        }
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for (o, x) in out.iter_mut().zip(av.row(r)) {
                *o += x;
            }
        }
        let inv = 1.0 / rows as f64;
        for o in &mut out {
            *o *= inv;
        }
        self.push(Tensor::vector(out), Op::MeanRows(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Scalar at flat index `index`.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let av = self.value(a);
        if index >= av.len() {
            return Err(TensorError::IndexOutOfRange {
                op: "pick",
                index,
                extent: av.len(),
            });
        }
        let v = av.data()[index];
        self.push(Tensor::scalar(v), Op::Pick(a, index), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push(value, Op::Reshape(a), &[a])
    }

    /// Activation pattern of every non-smooth primitive (ReLU sign, log floor).
    /// Two evaluations with different patterns straddle a kink.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut pattern = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::Relu(a) => pattern.extend(self.value(a).data().iter().map(|x| *x > 0.0)),
                Op::LogFloor(a, floor) => {
                    pattern.extend(self.value(a).data().iter().map(|x| *x > floor))
                }
                _ => {}
            }
        }
        pattern
    }

    /// Reverse sweep from a scalar `loss`, seeding its adjoint with 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(TensorError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut replayed = 0;

        for idx in (0..=loss.0).rev() {
            replayed += 1;
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !g.is_finite() {
                return Err(TensorError::NonFinite {
                    op: node.op.name(),
                    node: idx,
                });
            }
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            replayed,
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let accumulate = |var: Var, delta: Tensor, grads: &mut [Option<Tensor>]| -> Result<()> {
            if !self.nodes[var.0].tracked {
                return Ok(());
            }
            match &mut grads[var.0] {
                Some(existing) => existing.add_assign(&delta),
                slot => {
                    *slot = Some(delta);
                    Ok(())
                }
            }
        };

        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Gather { table, ids } => {
                if self.nodes[table.0].tracked {
                    let tv = self.value(*table);
                    let cols = tv.rows_cols().1;
                    let slot = grads[table.0].get_or_insert_with(|| Tensor::zeros(tv.shape()));
                    let dst = slot.data_mut();
                    for (i, &id) in ids.iter().enumerate() {
                        let src = g.row(i);
                        for (d, s) in dst[id * cols..(id + 1) * cols].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].tracked {
                    accumulate(*a, matmul_t_raw(g, bv), grads)?;
                }
                if self.nodes[b.0].tracked {
                    accumulate(*b, t_matmul_raw(av, g), grads)?;
                }
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].tracked {
                    accumulate(*a, matmul_raw(g, bv), grads)?;
                }
                if self.nodes[b.0].tracked {
                    accumulate(*b, t_matmul_raw(g, av), grads)?;
                }
            }
            Op::AddRowBias(a, bias) => {
                accumulate(*a, g.clone(), grads)?;
                if self.nodes[bias.0].tracked {
                    let (rows, cols) = g.rows_cols();
                    let mut db = vec![0.0; cols];
                    for r in 0..rows {
                        for (d, x) in db.iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    accumulate(*bias, Tensor::vector(db), grads)?;
                }
            }
            Op::Add(a, b) => {
                accumulate(*a, g.clone(), grads)?;
                accumulate(*b, g.clone(), grads)?;
            }
            Op::Sub(a, b) => {
                accumulate(*a, g.clone(), grads)?;
                let mut neg = g.clone();
                neg.scale_in_place(-1.0);
                accumulate(*b, neg, grads)?;
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].tracked {
                    accumulate(*a, elementwise(g, bv, |x, y| x * y), grads)?;
                }
                if self.nodes[b.0].tracked {
                    accumulate(*b, elementwise(g, av, |x, y| x * y), grads)?;
                }
            }
            Op::Scale(a, factor) => {
                let mut d = g.clone();
                d.scale_in_place(*factor);
                accumulate(*a, d, grads)?;
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                let d = elementwise(g, av, |gi, x| if x > 0.0 { gi } else { 0.0 });
                accumulate(*a, d, grads)?;
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let (rows, cols) = y.rows_cols();
                let mut d = y.clone();
                for r in 0..rows {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for c in 0..cols {
                        d.data_mut()[r * cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                accumulate(*a, d, grads)?;
            }
            Op::LogSoftmaxRows(a) => {
                let y = &node.value;
                let (rows, cols) = y.rows_cols();
                let mut d = y.clone();
                for r in 0..rows {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let total: f64 = gr.iter().sum();
                    for c in 0..cols {
                        d.data_mut()[r * cols + c] = gr[c] - yr[c].exp() * total;
                    }
                }
                accumulate(*a, d, grads)?;
            }
            Op::LogFloor(a, floor) => {
                let av = self.value(*a);
                let d = elementwise(g, av, |gi, x| if x > *floor { gi / x } else { 0.0 });
                accumulate(*a, d, grads)?;
            }
            Op::MeanRows(a) => {
                let av = self.value(*a);
                let (rows, cols) = av.rows_cols();
                let inv = 1.0 / rows as f64;
                let mut d = Tensor::zeros(av.shape());
                for r in 0..rows {
                    for c in 0..cols {
                        d.data_mut()[r * cols + c] = g.data()[c] * inv;
                    }
                }
                accumulate(*a, d, grads)?;
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                let mut d = Tensor::zeros(av.shape());
                d.data_mut().fill(g.data()[0]);
                accumulate(*a, d, grads)?;
            }
            Op::Pick(a, index) => {
                let av = self.value(*a);
                let mut d = Tensor::zeros(av.shape());
                d.data_mut()[*index] = g.data()[0];
                accumulate(*a, d, grads)?;
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                accumulate(*a, g.clone().reshape(&shape)?, grads)?;
            }
        }
        Ok(())
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(b.shape().to_vec(), data).expect("elementwise operands share a shape")
}

/// `a[m,k] · b[k,n]`
pub(crate) fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = a.rows_cols();
    let n = b.rows_cols().1;
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out).expect("matmul output shape")
}

/// `a[m,k] · b[n,k]ᵀ`
pub(crate) fn matmul_t_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let m = a.rows_cols().0;
    let n = b.rows_cols().0;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            out[i * n + j] = arow.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::new(vec![m, n], out).expect("matmul_t output shape")
}

/// `a[k,m]ᵀ · b[k,n]`
fn t_matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, m) = a.rows_cols();
    let n = b.rows_cols().1;
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let (arow, brow) = (a.row(p), b.row(p));
        for i in 0..m {
            let aip = arow[i];
            if aip == 0.0 {
                continue;
            }
            for (o, bv) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out).expect("t_matmul output shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0, 1.0]));
        let y = tape.relu(x).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 1.0]);
    }

    #[test]
    fn identity_matmul_returns_operand() {
        let mut tape = Tape::new();
        let a = mat(3, 3, &[1.0, -2.0, 3.5, 0.0, 4.0, 1.0, 9.0, -7.0, 2.0]);
        let i = tape.constant(Tensor::identity(3));
        let av = tape.leaf(a.clone());
        let out = tape.matmul(i, av).unwrap();
        assert_eq!(tape.value(out), &a);
    }

    #[test]
    fn matmul_rejects_bad_shapes_naming_the_primitive() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(TensorError::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn linear_form_gradient_is_the_other_operand() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![0.5, -1.0, 2.0]));
        let x = tape.constant(Tensor::vector(vec![3.0, 4.0, -5.0]));
        let wx = tape.mul(w, x).unwrap();
        let loss = tape.sum(wx).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(w).data(), &[3.0, 4.0, -5.0]);
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let c = tape.constant(Tensor::scalar(7.0));
        let g = tape.backward(c).unwrap();
        assert_eq!(g.wrt(w).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            tape.backward(w),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn gather_adjoint_scatter_adds_repeated_rows() {
        let mut tape = Tape::new();
        let table = tape.leaf(mat(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let rows = tape.gather(table, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(rows).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = tape.sum(rows).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(table).data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn replay_visits_each_node_once() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.3, -0.2, 0.9]));
        let y = tape.softmax_rows(x).unwrap();
        let z = tape.mul(y, y).unwrap();
        let s = tape.sum(z).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.replayed(), tape.len());
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let z = vec![0.2, -1.3, 0.7];
        let mut tape = Tape::new();
        let zv = tape.leaf(Tensor::vector(z.clone()));
        let lp = tape.log_softmax_rows(zv).unwrap();
        let pick = tape.pick(lp, 1).unwrap();
        let loss = tape.scale(pick, -1.0).unwrap();
        let g = tape.backward(loss).unwrap().wrt(zv);
        let p = crate::tensor::softmax(&z);
        for k in 0..3 {
            let expected = p[k] - if k == 1 { 1.0 } else { 0.0 };
            assert!((g.data()[k] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn nan_forward_is_reported_with_location() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![f64::MAX, f64::MAX]));
        match tape.add(x, x) {
            Err(TensorError::NonFinite { op, node }) => {
                assert_eq!(op, "add");
                assert_eq!(node, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
