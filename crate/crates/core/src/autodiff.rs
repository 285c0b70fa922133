//! Dense-tensor algebra with reverse-mode differentiation.
//!
//! A `Graph` records operations as they execute (define-by-run) and replays
//! them in reverse to populate gradients. Tensors are 64-bit, row-major, and
//! either 1-D or 2-D; the only broadcasting is scalar-tensor and row-over-rows.
//! Softmax is always max-stabilized.

use crate::error::{Error, Result};

/// Handle to a node inside one [`Graph`]. Cheap to copy; only meaningful for
/// the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor(usize);

/// A plain tensor value that lives outside any graph (parameters, checkpoints).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorData {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::ShapeMismatch {
                op: "TensorData::new",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(TensorData { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        TensorData { shape, data: vec![0.0; n] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: Tensor, b: Tensor },
    Transpose { x: Tensor },
    Add { a: Tensor, b: Tensor },
    Sub { a: Tensor, b: Tensor },
    Hadamard { a: Tensor, b: Tensor },
    /// Row vector added to every row of a matrix.
    AddRow { m: Tensor, row: Tensor },
    /// Row vector multiplied into every row of a matrix.
    MulRow { m: Tensor, row: Tensor },
    /// Scalar tensor ([1]) broadcast-multiplied over a tensor.
    MulScalar { s: Tensor, x: Tensor },
    /// Elementwise `mul * x + add`; only the slope matters to backward.
    Affine { x: Tensor, mul: f64 },
    Sigmoid { x: Tensor },
    Tanh { x: Tensor },
    Log { x: Tensor },
    Recip { x: Tensor },
    ClampMin { x: Tensor, min: f64 },
    Softmax { x: Tensor, axis: usize },
    /// Per-row zero-mean unit-variance normalization.
    LayerNormRows { x: Tensor, eps: f64 },
    /// Sum of all elements, producing a scalar ([1]).
    Sum { x: Tensor },
    Concat { parts: Vec<Tensor> },
    ConcatRows { a: Tensor, b: Tensor },
    Slice { x: Tensor, start: usize },
    GatherRows { m: Tensor, indices: Vec<usize> },
    /// Single element of a vector, as a scalar ([1]).
    Select { x: Tensor, index: usize },
    /// out[indices[j]] += values[j] into a fresh zero vector.
    ScatterAdd { values: Tensor, indices: Vec<usize> },
    Reshape { x: Tensor },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Ordered record of one forward pass. Inputs of every operation precede it,
/// so reverse iteration is a valid backward schedule.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { data, shape, requires_grad, grad: None, op });
        Tensor(self.nodes.len() - 1)
    }

    fn node(&self, t: Tensor) -> &Node {
        &self.nodes[t.0]
    }

    // ── Construction ─────────────────────────────────────────────────

    /// New leaf tensor. Rejects non-finite values and shape/data mismatch.
    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::ShapeMismatch {
                op: "leaf",
                left: shape,
                right: vec![data.len()],
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { context: "leaf tensor".into() });
        }
        Ok(self.push(data, shape, requires_grad, Op::Leaf))
    }

    /// Bind an out-of-graph value as a leaf.
    pub fn param(&mut self, value: &TensorData, requires_grad: bool) -> Result<Tensor> {
        self.leaf(value.data.clone(), value.shape.clone(), requires_grad)
    }

    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<Tensor> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, v: f64) -> Result<Tensor> {
        self.leaf(vec![v], vec![1], false)
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        self.push(vec![0.0; n], shape, false, Op::Leaf)
    }

    // ── Accessors ────────────────────────────────────────────────────

    pub fn data(&self, t: Tensor) -> &[f64] {
        &self.node(t).data
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.node(t).shape
    }

    pub fn grad(&self, t: Tensor) -> Option<&[f64]> {
        self.node(t).grad.as_deref()
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.node(t).requires_grad
    }

    /// Value of a scalar ([1]-shaped) tensor.
    pub fn value(&self, t: Tensor) -> f64 {
        debug_assert_eq!(self.node(t).data.len(), 1, "value() on non-scalar");
        self.node(t).data[0]
    }

    pub fn to_tensor_data(&self, t: Tensor) -> TensorData {
        let n = self.node(t);
        TensorData { shape: n.shape.clone(), data: n.data.clone() }
    }

    fn flows(&self, t: Tensor) -> bool {
        self.node(t).requires_grad
    }

    // ── Operations ───────────────────────────────────────────────────

    fn dims2(&self, t: Tensor, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(t);
        match s.len() {
            2 => Ok((s[0], s[1])),
            _ => Err(Error::ShapeMismatch { op, left: s.to_vec(), right: vec![] }),
        }
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (m, ka) = self.dims2(a, "matmul")?;
        let (kb, n) = self.dims2(b, "matmul")?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let out = matmul_raw(self.data(a), self.data(b), m, ka, n);
        let rg = self.flows(a) || self.flows(b);
        Ok(self.push(out, vec![m, n], rg, Op::Matmul { a, b }))
    }

    pub fn transpose(&mut self, x: Tensor) -> Result<Tensor> {
        let (r, c) = self.dims2(x, "transpose")?;
        let out = transpose_raw(self.data(x), r, c);
        let rg = self.flows(x);
        Ok(self.push(out, vec![c, r], rg, Op::Transpose { x }))
    }

    fn same_shape(&self, a: Tensor, b: Tensor, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.flows(a) || self.flows(b);
        Ok(self.push(out, shape, rg, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape(a, b, "sub")?;
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.flows(a) || self.flows(b);
        Ok(self.push(out, shape, rg, Op::Sub { a, b }))
    }

    /// Element-wise product.
    pub fn hadamard(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape(a, b, "hadamard")?;
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.flows(a) || self.flows(b);
        Ok(self.push(out, shape, rg, Op::Hadamard { a, b }))
    }

    pub fn add_row(&mut self, m: Tensor, row: Tensor) -> Result<Tensor> {
        let (r, c) = self.dims2(m, "add_row")?;
        if self.shape(row) != [c] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                left: self.shape(m).to_vec(),
                right: self.shape(row).to_vec(),
            });
        }
        let rowd = self.data(row);
        let mut out = self.data(m).to_vec();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] += rowd[j];
            }
        }
        let rg = self.flows(m) || self.flows(row);
        Ok(self.push(out, vec![r, c], rg, Op::AddRow { m, row }))
    }

    pub fn mul_row(&mut self, m: Tensor, row: Tensor) -> Result<Tensor> {
        let (r, c) = self.dims2(m, "mul_row")?;
        if self.shape(row) != [c] {
            return Err(Error::ShapeMismatch {
                op: "mul_row",
                left: self.shape(m).to_vec(),
                right: self.shape(row).to_vec(),
            });
        }
        let rowd = self.data(row);
        let mut out = self.data(m).to_vec();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] *= rowd[j];
            }
        }
        let rg = self.flows(m) || self.flows(row);
        Ok(self.push(out, vec![r, c], rg, Op::MulRow { m, row }))
    }

    /// Broadcast multiply by a scalar tensor; differentiable in both arguments.
    pub fn mul_scalar(&mut self, s: Tensor, x: Tensor) -> Result<Tensor> {
        if self.data(s).len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "mul_scalar",
                left: self.shape(s).to_vec(),
                right: vec![1],
            });
        }
        let sv = self.data(s)[0];
        let out: Vec<f64> = self.data(x).iter().map(|v| sv * v).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.flows(s) || self.flows(x);
        Ok(self.push(out, shape, rg, Op::MulScalar { s, x }))
    }

    /// Elementwise `mul * x + add` with constant coefficients.
    pub fn affine(&mut self, x: Tensor, mul: f64, add: f64) -> Tensor {
        let out: Vec<f64> = self.data(x).iter().map(|v| mul * v + add).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.flows(x);
        self.push(out, shape, rg, Op::Affine { x, mul })
    }

    pub fn scale(&mut self, x: Tensor, k: f64) -> Tensor {
        self.affine(x, k, 0.0)
    }

    pub fn sigmoid(&mut self, x: Tensor) -> Tensor {
        let out: Vec<f64> = self.data(x).iter().map(|&v| sigmoid_raw(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.flows(x);
        self.push(out, shape, rg, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: Tensor) -> Tensor {
        let out: Vec<f64> = self.data(x).iter().map(|v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.flows(x);
        self.push(out, shape, rg, Op::Tanh { x })
    }

    pub fn log(&mut self, x: Tensor) -> Tensor {
        let out: Vec<f64> = self.data(x).iter().map(|v| v.ln()).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.flows(x);
        self.push(out, shape, rg, Op::Log { x })
    }

    pub fn recip(&mut self, x: Tensor) -> Tensor {
        let out: Vec<f64> = self.data(x).iter().map(|v| 1.0 / v).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.flows(x);
        self.push(out, shape, rg, Op::Recip { x })
    }

    /// `max(x, min)` elementwise; gradient passes only where `x >= min`.
    pub fn clamp_min(&mut self, x: Tensor, min: f64) -> Tensor {
        let out: Vec<f64> = self.data(x).iter().map(|v| v.max(min)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.flows(x);
        self.push(out, shape, rg, Op::ClampMin { x, min })
    }

    /// Max-stabilized softmax along `axis`. Axis 0 is the only valid axis for
    /// vectors; for matrices axis 1 normalizes rows, axis 0 columns.
    pub fn softmax(&mut self, x: Tensor, axis: usize) -> Result<Tensor> {
        let shape = self.shape(x).to_vec();
        match (shape.len(), axis) {
            (1, 0) | (2, 0) | (2, 1) => {}
            _ => return Err(Error::InvalidAxis { op: "softmax", axis, shape }),
        }
        let (rows, cols, row_major) = match shape.len() {
            1 => (1, shape[0], true),
            _ => {
                if axis == 1 {
                    (shape[0], shape[1], true)
                } else {
                    (shape[1], shape[0], false)
                }
            }
        };
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let idx = |j: usize| if row_major { r * cols + j } else { j * rows + r };
            let mut max = f64::NEG_INFINITY;
            for j in 0..cols {
                max = max.max(xd[idx(j)]);
            }
            let mut sum = 0.0;
            for j in 0..cols {
                let e = (xd[idx(j)] - max).exp();
                out[idx(j)] = e;
                sum += e;
            }
            for j in 0..cols {
                out[idx(j)] /= sum;
            }
        }
        let rg = self.flows(x);
        Ok(self.push(out, shape, rg, Op::Softmax { x, axis }))
    }

    /// Per-row zero-mean unit-variance normalization of a matrix.
    pub fn layer_norm_rows(&mut self, x: Tensor, eps: f64) -> Result<Tensor> {
        let (r, c) = self.dims2(x, "layer_norm_rows")?;
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * inv;
            }
        }
        let rg = self.flows(x);
        Ok(self.push(out, vec![r, c], rg, Op::LayerNormRows { x, eps }))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Tensor) -> Tensor {
        let s: f64 = self.data(x).iter().sum();
        let rg = self.flows(x);
        self.push(vec![s], vec![1], rg, Op::Sum { x })
    }

    /// Concatenate 1-D tensors.
    pub fn concat(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        let mut out = Vec::new();
        let mut rg = false;
        for &p in parts {
            if self.shape(p).len() != 1 {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: self.shape(p).to_vec(),
                    right: vec![],
                });
            }
            out.extend_from_slice(self.data(p));
            rg |= self.flows(p);
        }
        let n = out.len();
        Ok(self.push(out, vec![n], rg, Op::Concat { parts: parts.to_vec() }))
    }

    /// Stack two matrices with equal column counts.
    pub fn concat_rows(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (ra, ca) = self.dims2(a, "concat_rows")?;
        let (rb, cb) = self.dims2(b, "concat_rows")?;
        if ca != cb {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = self.data(a).to_vec();
        out.extend_from_slice(self.data(b));
        let rg = self.flows(a) || self.flows(b);
        Ok(self.push(out, vec![ra + rb, ca], rg, Op::ConcatRows { a, b }))
    }

    /// Contiguous slice `[start, end)` of a vector.
    pub fn slice(&mut self, x: Tensor, start: usize, end: usize) -> Result<Tensor> {
        let s = self.shape(x);
        if s.len() != 1 || start > end || end > s[0] {
            return Err(Error::IndexOutOfBounds { op: "slice", index: end, len: s[0] });
        }
        let out = self.data(x)[start..end].to_vec();
        let rg = self.flows(x);
        Ok(self.push(out, vec![end - start], rg, Op::Slice { x, start }))
    }

    /// Row lookup (embedding). The index path carries no gradient.
    pub fn gather_rows(&mut self, m: Tensor, indices: &[usize]) -> Result<Tensor> {
        let (r, c) = self.dims2(m, "gather_rows")?;
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(Error::IndexOutOfBounds { op: "gather_rows", index: i, len: r });
            }
            out.extend_from_slice(&self.data(m)[i * c..(i + 1) * c]);
        }
        let rg = self.flows(m);
        Ok(self.push(out, vec![indices.len(), c], rg, Op::GatherRows { m, indices: indices.to_vec() }))
    }

    /// Single element of a vector, as a scalar.
    pub fn select(&mut self, x: Tensor, index: usize) -> Result<Tensor> {
        let s = self.shape(x);
        if s.len() != 1 || index >= s[0] {
            return Err(Error::IndexOutOfBounds {
                op: "select",
                index,
                len: if s.is_empty() { 0 } else { s[0] },
            });
        }
        let v = self.data(x)[index];
        let rg = self.flows(x);
        Ok(self.push(vec![v], vec![1], rg, Op::Select { x, index }))
    }

    /// Scatter-add vector entries into a fresh zero vector of length `len`.
    /// Duplicate indices accumulate.
    pub fn scatter_add(&mut self, values: Tensor, indices: &[usize], len: usize) -> Result<Tensor> {
        let s = self.shape(values);
        if s.len() != 1 || s[0] != indices.len() {
            return Err(Error::ShapeMismatch {
                op: "scatter_add",
                left: s.to_vec(),
                right: vec![indices.len()],
            });
        }
        let mut out = vec![0.0; len];
        for (j, &i) in indices.iter().enumerate() {
            if i >= len {
                return Err(Error::IndexOutOfBounds { op: "scatter_add", index: i, len });
            }
            out[i] += self.data(values)[j];
        }
        let rg = self.flows(values);
        Ok(self.push(out, vec![len], rg, Op::ScatterAdd { values, indices: indices.to_vec() }))
    }

    pub fn reshape(&mut self, x: Tensor, shape: Vec<usize>) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if expect != self.data(x).len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape(x).to_vec(),
                right: shape,
            });
        }
        let out = self.data(x).to_vec();
        let rg = self.flows(x);
        Ok(self.push(out, shape, rg, Op::Reshape { x }))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss; populates `grad` on every node that
    /// requires gradient and contributed to the loss.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        if self.node(loss).data.len() != 1 {
            return Err(Error::NonScalarLoss { shape: self.shape(loss).to_vec() });
        }
        if !self.node(loss).data[0].is_finite() {
            return Err(Error::NonFinite { context: "loss".into() });
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if self.nodes[idx].grad.is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            let d_out = self.nodes[idx].grad.clone().unwrap();
            self.backward_op(&op, &d_out, idx);
        }
        Ok(())
    }

    fn accumulate(&mut self, t: Tensor, delta: &[f64]) {
        if !self.nodes[t.0].requires_grad {
            return;
        }
        let n = self.nodes[t.0].data.len();
        debug_assert_eq!(delta.len(), n);
        match &mut self.nodes[t.0].grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => self.nodes[t.0].grad = Some(delta.to_vec()),
        }
    }

    fn backward_op(&mut self, op: &Op, d_out: &[f64], out_idx: usize) {
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.flows(*a) {
                    // dA = dOut * B^T
                    let bt = transpose_raw(self.data(*b), k, n);
                    let da = matmul_raw(d_out, &bt, m, n, k);
                    self.accumulate(*a, &da);
                }
                if self.flows(*b) {
                    // dB = A^T * dOut
                    let at = transpose_raw(self.data(*a), m, k);
                    let db = matmul_raw(&at, d_out, k, m, n);
                    self.accumulate(*b, &db);
                }
            }
            Op::Transpose { x } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let dx = transpose_raw(d_out, c, r);
                self.accumulate(*x, &dx);
            }
            Op::Add { a, b } => {
                self.accumulate(*a, d_out);
                self.accumulate(*b, d_out);
            }
            Op::Sub { a, b } => {
                self.accumulate(*a, d_out);
                let neg: Vec<f64> = d_out.iter().map(|v| -v).collect();
                self.accumulate(*b, &neg);
            }
            Op::Hadamard { a, b } => {
                if self.flows(*a) {
                    let da: Vec<f64> = d_out.iter().zip(self.data(*b)).map(|(d, y)| d * y).collect();
                    self.accumulate(*a, &da);
                }
                if self.flows(*b) {
                    let db: Vec<f64> = d_out.iter().zip(self.data(*a)).map(|(d, x)| d * x).collect();
                    self.accumulate(*b, &db);
                }
            }
            Op::AddRow { m, row } => {
                let (r, c) = (self.shape(*m)[0], self.shape(*m)[1]);
                self.accumulate(*m, d_out);
                if self.flows(*row) {
                    let mut drow = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            drow[j] += d_out[i * c + j];
                        }
                    }
                    self.accumulate(*row, &drow);
                }
            }
            Op::MulRow { m, row } => {
                let (r, c) = (self.shape(*m)[0], self.shape(*m)[1]);
                if self.flows(*m) {
                    let rowd = self.data(*row).to_vec();
                    let mut dm = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            dm[i * c + j] = d_out[i * c + j] * rowd[j];
                        }
                    }
                    self.accumulate(*m, &dm);
                }
                if self.flows(*row) {
                    let md = self.data(*m);
                    let mut drow = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            drow[j] += d_out[i * c + j] * md[i * c + j];
                        }
                    }
                    self.accumulate(*row, &drow);
                }
            }
            Op::MulScalar { s, x } => {
                if self.flows(*s) {
                    let ds: f64 = d_out.iter().zip(self.data(*x)).map(|(d, v)| d * v).sum();
                    self.accumulate(*s, &[ds]);
                }
                if self.flows(*x) {
                    let sv = self.data(*s)[0];
                    let dx: Vec<f64> = d_out.iter().map(|d| sv * d).collect();
                    self.accumulate(*x, &dx);
                }
            }
            Op::Affine { x, mul } => {
                let dx: Vec<f64> = d_out.iter().map(|d| mul * d).collect();
                self.accumulate(*x, &dx);
            }
            Op::Sigmoid { x } => {
                let out = &self.nodes[out_idx].data;
                let dx: Vec<f64> = d_out.iter().zip(out).map(|(d, y)| d * y * (1.0 - y)).collect();
                self.accumulate(*x, &dx);
            }
            Op::Tanh { x } => {
                let out = &self.nodes[out_idx].data;
                let dx: Vec<f64> = d_out.iter().zip(out).map(|(d, y)| d * (1.0 - y * y)).collect();
                self.accumulate(*x, &dx);
            }
            Op::Log { x } => {
                let dx: Vec<f64> = d_out.iter().zip(self.data(*x)).map(|(d, v)| d / v).collect();
                self.accumulate(*x, &dx);
            }
            Op::Recip { x } => {
                let dx: Vec<f64> =
                    d_out.iter().zip(self.data(*x)).map(|(d, v)| -d / (v * v)).collect();
                self.accumulate(*x, &dx);
            }
            Op::ClampMin { x, min } => {
                let dx: Vec<f64> = d_out
                    .iter()
                    .zip(self.data(*x))
                    .map(|(d, v)| if *v >= *min { *d } else { 0.0 })
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::Softmax { x, axis } => {
                let shape = self.shape(*x).to_vec();
                let (rows, cols, row_major) = match shape.len() {
                    1 => (1, shape[0], true),
                    _ => {
                        if *axis == 1 {
                            (shape[0], shape[1], true)
                        } else {
                            (shape[1], shape[0], false)
                        }
                    }
                };
                let out = self.nodes[out_idx].data.clone();
                let mut dx = vec![0.0; out.len()];
                for r in 0..rows {
                    let idx = |j: usize| if row_major { r * cols + j } else { j * rows + r };
                    let mut dot = 0.0;
                    for j in 0..cols {
                        dot += d_out[idx(j)] * out[idx(j)];
                    }
                    for j in 0..cols {
                        dx[idx(j)] = out[idx(j)] * (d_out[idx(j)] - dot);
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::LayerNormRows { x, eps } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let xd = self.data(*x).to_vec();
                let out = self.nodes[out_idx].data.clone();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let row = &xd[i * c..(i + 1) * c];
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let dr = &d_out[i * c..(i + 1) * c];
                    let yr = &out[i * c..(i + 1) * c];
                    let mean_d = dr.iter().sum::<f64>() / c as f64;
                    let mean_dy = dr.iter().zip(yr).map(|(d, y)| d * y).sum::<f64>() / c as f64;
                    for j in 0..c {
                        dx[i * c + j] = inv * (dr[j] - mean_d - yr[j] * mean_dy);
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::Sum { x } => {
                let n = self.data(*x).len();
                let dx = vec![d_out[0]; n];
                self.accumulate(*x, &dx);
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.data(p).len();
                    let dp = d_out[offset..offset + n].to_vec();
                    self.accumulate(p, &dp);
                    offset += n;
                }
            }
            Op::ConcatRows { a, b } => {
                let na = self.data(*a).len();
                let da = d_out[..na].to_vec();
                let db = d_out[na..].to_vec();
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::Slice { x, start } => {
                let n = self.data(*x).len();
                let mut dx = vec![0.0; n];
                dx[*start..*start + d_out.len()].copy_from_slice(d_out);
                self.accumulate(*x, &dx);
            }
            Op::GatherRows { m, indices } => {
                let (r, c) = (self.shape(*m)[0], self.shape(*m)[1]);
                let mut dm = vec![0.0; r * c];
                for (k, &i) in indices.iter().enumerate() {
                    for j in 0..c {
                        dm[i * c + j] += d_out[k * c + j];
                    }
                }
                self.accumulate(*m, &dm);
            }
            Op::Select { x, index } => {
                let n = self.data(*x).len();
                let mut dx = vec![0.0; n];
                dx[*index] = d_out[0];
                self.accumulate(*x, &dx);
            }
            Op::ScatterAdd { values, indices } => {
                let dv: Vec<f64> = indices.iter().map(|&i| d_out[i]).collect();
                self.accumulate(*values, &dv);
            }
            Op::Reshape { x } => {
                self.accumulate(*x, d_out);
            }
        }
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn transpose_raw(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

// Clamped to the open interval at f64 resolution so downstream contracts
// (p_gen strictly inside (0,1), -log never infinite) survive saturation.
pub(crate) fn sigmoid_raw(v: f64) -> f64 {
    let y = if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Max over coordinates of `|analytic - central difference| / max(1, |central|)`
/// for a scalar-valued tensor function, using central differences of size `step`.
pub fn grad_check<F>(mut f: F, x: &TensorData, step: f64) -> Result<f64>
where
    F: FnMut(&mut Graph, Tensor) -> Result<Tensor>,
{
    let mut g = Graph::new();
    let t = g.param(x, true)?;
    let y = f(&mut g, t)?;
    if g.data(y).len() != 1 {
        return Err(Error::NonScalarLoss { shape: g.shape(y).to_vec() });
    }
    g.backward(y)?;
    let analytic = g.grad(t).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut eval = |v: f64| -> Result<f64> {
            let mut probe = x.clone();
            probe.data[i] = v;
            let mut g = Graph::new();
            let t = g.param(&probe, false)?;
            let y = f(&mut g, t)?;
            Ok(g.value(y))
        };
        let hi = eval(x.data[i] + step)?;
        let lo = eval(x.data[i] - step)?;
        let central = (hi - lo) / (2.0 * step);
        let err = (analytic[i] - central).abs() / central.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
