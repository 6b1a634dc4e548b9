use std::fmt;
use std::sync::Arc;

use crate::error::{AutodiffError, Result};
use crate::tape::{NodeRef, Op, Saved, Tape};

/// Dense row-major `f64` tensor, optionally attached to a tape node.
///
/// Values without a node are plain immutable constants and may be shared
/// freely across threads. Any operation with at least one attached operand
/// records a node on that operand's tape.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<[f64]>,
    node: Option<NodeRef>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &&self.data[..])
            .field("node", &self.node.as_ref().map(|n| n.id))
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(AutodiffError::contract("from_vec", format!("zero extent in shape {shape:?}")));
        }
        if numel(shape) != data.len() {
            return Err(AutodiffError::shape("from_vec", shape, &[data.len()]));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFinite { op: "from_vec", index });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: data.into(),
            node: None,
        })
    }

    /// Row-major matrix from nested rows. Panics on ragged input; intended for literals.
    pub fn matrix(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged matrix literal");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::from_vec(&[rows.len(), cols], data).expect("valid matrix literal")
    }

    /// 1×n row vector.
    pub fn row(values: &[f64]) -> Self {
        Self::from_vec(&[1, values.len()], values.to_vec()).expect("valid row literal")
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec(&[], vec![value]).expect("finite scalar")
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::from_vec(shape, vec![value; numel(shape)]).expect("valid fill")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::from_vec(&[n, n], data).expect("valid identity")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn node(&self) -> Option<&NodeRef> {
        self.node.as_ref()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(AutodiffError::contract("item", format!("tensor of shape {:?} is not a scalar", self.shape)));
        }
        Ok(self.data[0])
    }

    /// Same values, no tape node.
    pub fn detach(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub(crate) fn saved(&self) -> Saved {
        Saved {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: self.node.as_ref().map(|n| n.id),
        }
    }

    pub(crate) fn from_saved(saved: &Saved, tape: Option<(&Tape, u64)>) -> Self {
        Self {
            shape: saved.shape.clone(),
            data: saved.data.clone(),
            node: match (saved.node, tape) {
                (Some(id), Some((tape, generation))) => Some(NodeRef {
                    tape: tape.clone(),
                    id,
                    generation,
                }),
                _ => None,
            },
        }
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(AutodiffError::contract(op, format!("expected a matrix, got shape {:?}", self.shape))),
        }
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(AutodiffError::shape(op, &self.shape, &other.shape));
        }
        Ok(())
    }
}

/// Builds the result of an operation, attaching a node when any operand is
/// recorded. Rejects non-finite outputs and operands from stale or foreign tapes.
fn record(name: &'static str, op: Op, inputs: &[&Tensor], shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(AutodiffError::NonFinite { op: name, index });
    }
    let mut tape: Option<&Tape> = None;
    for t in inputs {
        if let Some(n) = &t.node {
            n.tape.check_live(n)?;
            match tape {
                None => tape = Some(&n.tape),
                Some(existing) if !existing.same_as(&n.tape) => {
                    return Err(AutodiffError::TapeMismatch { op: name });
                }
                Some(_) => {}
            }
        }
    }
    let data: Arc<[f64]> = data.into();
    let node = tape.map(|tp| {
        let saved = inputs.iter().map(|t| t.saved()).collect();
        tp.push(op, saved, shape.clone(), data.clone())
    });
    Ok(Tensor { shape, data, node })
}

impl Tape {
    /// Attaches a copy of `value` to this tape as a differentiable leaf.
    pub fn leaf(&self, value: &Tensor) -> Tensor {
        let data = value.data.clone();
        let node = self.push(Op::Leaf, Vec::new(), value.shape.clone(), data.clone());
        Tensor {
            shape: value.shape.clone(),
            data,
            node: Some(node),
        }
    }
}

// Elementwise and reductions.
impl Tensor {
    fn zip(&self, other: &Tensor, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(other, name)?;
        let data = self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect();
        record(name, op, &[self, other], self.shape.clone(), data)
    }

    fn map(&self, name: &'static str, op: Op, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let data = self.data.iter().map(|&a| f(a)).collect();
        record(name, op, &[self], self.shape.clone(), data)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "sub", Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "mul", Op::Mul, |a, b| a * b)
    }

    pub fn square(&self) -> Result<Tensor> {
        self.mul(self)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        self.map("scale", Op::Scale(c), |a| a * c)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        self.map("add_scalar", Op::AddScalar, |a| a + c)
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.map("neg", Op::Neg, |a| -a)
    }

    pub fn recip(&self) -> Result<Tensor> {
        if let Some(index) = self.data.iter().position(|&v| v == 0.0) {
            return Err(AutodiffError::Domain {
                op: "recip",
                index,
                value: 0.0,
            });
        }
        self.map("recip", Op::Recip, |a| 1.0 / a)
    }

    pub fn tanh(&self) -> Result<Tensor> {
        self.map("tanh", Op::Tanh, f64::tanh)
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.map("relu", Op::Relu, |a| a.max(0.0))
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.map("exp", Op::Exp, f64::exp)
    }

    pub fn log(&self) -> Result<Tensor> {
        if let Some(index) = self.data.iter().position(|&v| v <= 0.0) {
            return Err(AutodiffError::Domain {
                op: "log",
                index,
                value: self.data[index],
            });
        }
        self.map("log", Op::Log, f64::ln)
    }

    /// Sum of all entries as a rank-0 scalar.
    pub fn sum(&self) -> Result<Tensor> {
        let s = self.data.iter().sum();
        record("sum", Op::Sum, &[self], Vec::new(), vec![s])
    }

    pub fn mean(&self) -> Result<Tensor> {
        self.sum()?.scale(1.0 / self.numel() as f64)
    }

    /// Column sums: `n×d → 1×d`.
    pub fn sum_axis0(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("sum_axis0")?;
        let mut out = vec![0.0; c];
        for row in self.data.chunks_exact(c).take(r) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        record("sum_axis0", Op::SumAxis0, &[self], vec![1, c], out)
    }

    /// Row sums: `n×d → n×1`.
    pub fn sum_axis1(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("sum_axis1")?;
        let out = self.data.chunks_exact(c).map(|row| row.iter().sum()).collect();
        record("sum_axis1", Op::SumAxis1, &[self], vec![r, 1], out)
    }

    /// Broadcasts a one-element tensor to `shape`.
    pub fn expand_scalar(&self, shape: &[usize]) -> Result<Tensor> {
        let v = self.item()?;
        record("expand_scalar", Op::ExpandScalar, &[self], shape.to_vec(), vec![v; numel(shape)])
    }

    /// Repeats a `1×d` row `n` times.
    pub fn expand_rows(&self, n: usize) -> Result<Tensor> {
        let (r, c) = self.dims2("expand_rows")?;
        if r != 1 || n == 0 {
            return Err(AutodiffError::shape("expand_rows", &self.shape, &[n, c]));
        }
        let data = self.data.iter().copied().cycle().take(n * c).collect();
        record("expand_rows", Op::ExpandRows, &[self], vec![n, c], data)
    }

    /// Repeats an `n×1` column `d` times.
    pub fn expand_cols(&self, d: usize) -> Result<Tensor> {
        let (r, c) = self.dims2("expand_cols")?;
        if c != 1 || d == 0 {
            return Err(AutodiffError::shape("expand_cols", &self.shape, &[r, d]));
        }
        let data = self.data.iter().flat_map(|&v| std::iter::repeat(v).take(d)).collect();
        record("expand_cols", Op::ExpandCols, &[self], vec![r, d], data)
    }

    /// Adds a `1×d` bias row to every row of an `n×d` matrix.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let (_, c) = self.dims2("add_row")?;
        if bias.shape != [1, c] {
            return Err(AutodiffError::shape("add_row", &self.shape, &bias.shape));
        }
        let data = self
            .data
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(bias.data.iter()).map(|(a, b)| a + b))
            .collect();
        record("add_row", Op::AddRow, &[self, bias], self.shape.clone(), data)
    }
}

// Matrix products and layout.
impl Tensor {
    /// `self · other` for `m×k` and `k×n` operands.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(AutodiffError::shape("matmul", &self.shape, &other.shape));
        }
        let (a, b) = (&self.data, &other.data);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        record("matmul", Op::MatMul, &[self, other], vec![m, n], out)
    }

    /// `self · otherᵀ` for `m×k` and `n×k` operands.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul_nt")?;
        let (n, k2) = other.dims2("matmul_nt")?;
        if k != k2 {
            return Err(AutodiffError::shape("matmul_nt", &self.shape, &other.shape));
        }
        let (a, b) = (&self.data, &other.data);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                out.push(arow.iter().zip(brow).map(|(x, y)| x * y).sum());
            }
        }
        record("matmul_nt", Op::MatMulNT, &[self, other], vec![m, n], out)
    }

    /// `selfᵀ · other` for `k×m` and `k×n` operands.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        let (k, m) = self.dims2("matmul_tn")?;
        let (k2, n) = other.dims2("matmul_tn")?;
        if k != k2 {
            return Err(AutodiffError::shape("matmul_tn", &self.shape, &other.shape));
        }
        let (a, b) = (&self.data, &other.data);
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            for i in 0..m {
                let av = a[p * m + i];
                if av == 0.0 {
                    continue;
                }
                for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        record("matmul_tn", Op::MatMulTN, &[self, other], vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        record("transpose", Op::Transpose, &[self], vec![c, r], out)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() || shape.iter().any(|&d| d == 0) {
            return Err(AutodiffError::shape("reshape", &self.shape, shape));
        }
        record("reshape", Op::Reshape, &[self], shape.to_vec(), self.data.to_vec())
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| AutodiffError::contract("concat_rows", "no operands"))?;
        let (_, c) = first.dims2("concat_rows")?;
        let mut sizes = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for p in parts {
            let (r, pc) = p.dims2("concat_rows")?;
            if pc != c {
                return Err(AutodiffError::shape("concat_rows", &first.shape, &p.shape));
            }
            sizes.push(r);
            data.extend_from_slice(&p.data);
        }
        let rows = sizes.iter().sum();
        record("concat_rows", Op::ConcatRows(sizes), parts, vec![rows, c], data)
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| AutodiffError::contract("concat_cols", "no operands"))?;
        let (r, _) = first.dims2("concat_cols")?;
        let mut sizes = Vec::with_capacity(parts.len());
        for p in parts {
            let (pr, pc) = p.dims2("concat_cols")?;
            if pr != r {
                return Err(AutodiffError::shape("concat_cols", &first.shape, &p.shape));
            }
            sizes.push(pc);
        }
        let total: usize = sizes.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (p, &w) in parts.iter().zip(&sizes) {
                data.extend_from_slice(&p.data[i * w..(i + 1) * w]);
            }
        }
        record("concat_cols", Op::ConcatCols(sizes), parts, vec![r, total], data)
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = self.dims2("slice_rows")?;
        if len == 0 || start + len > r {
            return Err(AutodiffError::contract("slice_rows", format!("rows {start}..{} out of 0..{r}", start + len)));
        }
        let data = self.data[start * c..(start + len) * c].to_vec();
        record("slice_rows", Op::SliceRows { start }, &[self], vec![len, c], data)
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = self.dims2("slice_cols")?;
        if len == 0 || start + len > c {
            return Err(AutodiffError::contract("slice_cols", format!("cols {start}..{} out of 0..{c}", start + len)));
        }
        let mut data = Vec::with_capacity(r * len);
        for row in self.data.chunks_exact(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        record("slice_cols", Op::SliceCols { start }, &[self], vec![r, len], data)
    }

    /// Embeds the rows of `self` at `start` inside a zero matrix with `total` rows.
    pub fn pad_rows(&self, start: usize, total: usize) -> Result<Tensor> {
        let (r, c) = self.dims2("pad_rows")?;
        if start + r > total {
            return Err(AutodiffError::contract("pad_rows", format!("{r} rows at {start} exceed {total}")));
        }
        let mut data = vec![0.0; total * c];
        data[start * c..(start + r) * c].copy_from_slice(&self.data);
        record("pad_rows", Op::PadRows { start }, &[self], vec![total, c], data)
    }

    /// Embeds the columns of `self` at `start` inside a zero matrix with `total` columns.
    pub fn pad_cols(&self, start: usize, total: usize) -> Result<Tensor> {
        let (r, c) = self.dims2("pad_cols")?;
        if start + c > total {
            return Err(AutodiffError::contract("pad_cols", format!("{c} cols at {start} exceed {total}")));
        }
        let mut data = vec![0.0; r * total];
        for (i, row) in self.data.chunks_exact(c).enumerate() {
            data[i * total + start..i * total + start + c].copy_from_slice(row);
        }
        record("pad_cols", Op::PadCols { start }, &[self], vec![r, total], data)
    }

    /// Embedding lookup: selects `indices` rows of a `V×d` table.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let (v, c) = self.dims2("gather_rows")?;
        if indices.is_empty() {
            return Err(AutodiffError::contract("gather_rows", "empty index list"));
        }
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= v {
                return Err(AutodiffError::contract("gather_rows", format!("index {i} out of range for {v} rows")));
            }
            data.extend_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        let op = Op::Gather(indices.to_vec().into());
        record("gather_rows", op, &[self], vec![indices.len(), c], data)
    }

    /// Adjoint of [`Tensor::gather_rows`]: accumulates row `k` into row `indices[k]`
    /// of a zero `rows×d` matrix.
    pub fn scatter_rows(&self, indices: &[usize], rows: usize) -> Result<Tensor> {
        let (n, c) = self.dims2("scatter_rows")?;
        if indices.len() != n || indices.iter().any(|&i| i >= rows) {
            return Err(AutodiffError::contract("scatter_rows", "index list does not match operand"));
        }
        let mut data = vec![0.0; rows * c];
        for (k, &i) in indices.iter().enumerate() {
            for (o, v) in data[i * c..(i + 1) * c].iter_mut().zip(&self.data[k * c..(k + 1) * c]) {
                *o += v;
            }
        }
        let op = Op::ScatterRows(indices.to_vec().into());
        record("scatter_rows", op, &[self], vec![rows, c], data)
    }

    /// Row-wise softmax.
    pub fn softmax(&self) -> Result<Tensor> {
        let (_, c) = self.dims2("softmax")?;
        let mut out = Vec::with_capacity(self.numel());
        for row in self.data.chunks_exact(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            let mut z = 0.0;
            for &v in row {
                let e = (v - m).exp();
                z += e;
                out.push(e);
            }
            for o in &mut out[start..] {
                *o /= z;
            }
        }
        record("softmax", Op::Softmax, &[self], self.shape.clone(), out)
    }

    /// Row-wise max-shifted log-sum-exp: `n×d → n×1`.
    pub fn logsumexp(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("logsumexp")?;
        let out = self
            .data
            .chunks_exact(c)
            .map(|row| {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
            })
            .collect();
        record("logsumexp", Op::LogSumExp, &[self], vec![r, 1], out)
    }

    /// Row-wise log-softmax, composed from differentiable primitives.
    pub fn log_softmax(&self) -> Result<Tensor> {
        let lse = self.logsumexp()?.expand_cols(self.cols())?;
        self.sub(&lse)
    }
}
