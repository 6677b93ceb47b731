//! Linear algebra, elementwise arithmetic and layout ops.

use crate::error::{shape_err, Result, TensorError};
use crate::graph::{GradSink, Graph, Op, Var};
use crate::tensor::{gemm_acc, gemm_at_acc, gemm_bt_acc, Real, Tensor};

pub(crate) enum BasicOp<F> {
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<F>),
    Scale(Var, F),
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Reshape(Var),
    WeightedRowSum { x: Var, weights: Vec<F> },
    SelectScale { x: Var, gate: Var, idx: usize },
    StraightThrough(Var),
}

fn dims2<F: Real>(t: &Tensor<F>) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<'p, F: Real> Graph<'p, F> {
    fn basic(&mut self, value: Tensor<F>, op: BasicOp<F>, name: &'static str) -> Var {
        self.push(value, Op::Basic(op), name)
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a));
        let (k2, n) = dims2(self.value(b));
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![F::zero(); m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.basic(value, BasicOp::MatMul(a, b), "matmul"))
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a));
        let (n, k2) = dims2(self.value(b));
        if k != k2 {
            return Err(shape_err("matmul_bt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![F::zero(); m * n];
        gemm_bt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.basic(value, BasicOp::MatMulBt(a, b), "matmul_bt"))
    }

    /// Adds a length-`n` vector to every row of `x[m×n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.value(b).numel() != n {
            return Err(shape_err("add_bias", self.shape(x), self.shape(b)));
        }
        let bias = self.value(b).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        Ok(self.basic(value, BasicOp::AddBias(x, b), "add_bias"))
    }

    fn zip_same(&self, a: Var, b: Var, op: &'static str, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.basic(value, BasicOp::Add(a, b), "add"))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.basic(value, BasicOp::Sub(a, b), "sub"))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.basic(value, BasicOp::Mul(a, b), "mul"))
    }

    /// Elementwise product with a constant of the same size.
    pub fn mul_const(&mut self, x: Var, k: Vec<F>) -> Result<Var> {
        if k.len() != self.value(x).numel() {
            return Err(shape_err("mul_const", self.shape(x), &[k.len()]));
        }
        let value = Tensor::new(
            self.shape(x).to_vec(),
            self.value(x).data().iter().zip(&k).map(|(&a, &b)| a * b).collect(),
        )?;
        Ok(self.basic(value, BasicOp::MulConst(x, k), "mul_const"))
    }

    /// Zeroes every row whose mask entry is false.
    pub fn mask_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (m, n) = dims2(self.value(x));
        if mask.len() != m {
            return Err(shape_err("mask_rows", self.shape(x), &[mask.len()]));
        }
        let k = mask
            .iter()
            .flat_map(|&keep| std::iter::repeat_n(if keep { F::one() } else { F::zero() }, n))
            .collect();
        self.mul_const(x, k)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = F::from_f64(s);
        let value = self.value(x).map(|v| v * s);
        self.basic(value, BasicOp::Scale(x, s), "scale")
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.basic(Tensor::scalar(s), BasicOp::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: F = t.data().iter().copied().sum();
        let m = s / F::from_f64(t.numel() as f64);
        self.basic(Tensor::scalar(m), BasicOp::Mean(x), "mean")
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(shape_err("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], out)?;
        Ok(self.basic(value, BasicOp::ConcatCols(parts.to_vec()), "concat_cols"))
    }

    /// Concatenates 2-D tensors with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        for &p in parts {
            if self.value(p).cols() != cols {
                return Err(shape_err("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
        }
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
            rows += self.value(p).rows();
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        Ok(self.basic(value, BasicOp::ConcatRows(parts.to_vec()), "concat_rows"))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = dims2(self.value(x));
        if len == 0 || start + len > m {
            return Err(TensorError::Contract(format!(
                "slice_rows [{start}, {}) out of range for {m} rows",
                start + len
            )));
        }
        let data = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let value = Tensor::new(vec![len, n], data)?;
        Ok(self.basic(value, BasicOp::SliceRows { x, start }, "slice_rows"))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.basic(value, BasicOp::Reshape(x), "reshape"))
    }

    /// Mean of the rows of `x[m×n]` whose mask entry is true, as a `[1×n]`
    /// tensor. All-false masks give zeros.
    pub fn mean_rows_masked(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (m, n) = dims2(self.value(x));
        if mask.len() != m {
            return Err(shape_err("mean_rows_masked", self.shape(x), &[mask.len()]));
        }
        let count = mask.iter().filter(|&&b| b).count();
        let w = if count == 0 {
            F::zero()
        } else {
            F::one() / F::from_f64(count as f64)
        };
        let weights: Vec<F> = mask.iter().map(|&b| if b { w } else { F::zero() }).collect();
        let mut out = vec![F::zero(); n];
        for (r, &wr) in weights.iter().enumerate() {
            if wr == F::zero() {
                continue;
            }
            for (o, &v) in out.iter_mut().zip(self.value(x).row(r)) {
                *o += wr * v;
            }
        }
        let value = Tensor::new(vec![1, n], out)?;
        Ok(self.basic(value, BasicOp::WeightedRowSum { x, weights }, "mean_rows_masked"))
    }

    /// `gate[idx] · x`, differentiable in both.
    pub fn select_scale(&mut self, x: Var, gate: Var, idx: usize) -> Result<Var> {
        let g = self.value(gate);
        if idx >= g.numel() {
            return Err(shape_err("select_scale", self.shape(gate), &[idx]));
        }
        let s = g.data()[idx];
        let value = self.value(x).map(|v| v * s);
        Ok(self.basic(value, BasicOp::SelectScale { x, gate, idx }, "select_scale"))
    }

    /// Forward value is `hard`; the gradient passes unchanged to `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Vec<F>) -> Result<Var> {
        let value = Tensor::new(self.shape(soft).to_vec(), hard)?;
        Ok(self.basic(value, BasicOp::StraightThrough(soft), "straight_through"))
    }
}

impl<F: Real> BasicOp<F> {
    pub(crate) fn backward(&self, out: &Tensor<F>, g: &[F], sink: &mut GradSink<'_, F>) {
        match self {
            BasicOp::MatMul(a, b) => {
                let (m, k) = dims2(sink.value(*a));
                let n = out.cols();
                // da = g · bᵀ
                {
                    let (bv, da) = sink.value_and_buf(*b, *a);
                    gemm_bt_acc(g, bv.data(), da, m, n, k);
                }
                // db = aᵀ · g
                let (av, db) = sink.value_and_buf(*a, *b);
                gemm_at_acc(av.data(), g, db, m, k, n);
            }
            BasicOp::MatMulBt(a, b) => {
                let (m, k) = dims2(sink.value(*a));
                let n = out.cols();
                // da = g · b
                {
                    let (bv, da) = sink.value_and_buf(*b, *a);
                    gemm_acc(g, bv.data(), da, m, n, k);
                }
                // db = gᵀ · a
                let (av, db) = sink.value_and_buf(*a, *b);
                gemm_at_acc(g, av.data(), db, m, n, k);
            }
            BasicOp::AddBias(x, b) => {
                sink.add(*x, g);
                let n = out.cols();
                let db = sink.buf(*b);
                for row in g.chunks(n) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
            }
            BasicOp::Add(a, b) => {
                sink.add(*a, g);
                sink.add(*b, g);
            }
            BasicOp::Sub(a, b) => {
                sink.add(*a, g);
                for (d, &v) in sink.buf(*b).iter_mut().zip(g) {
                    *d -= v;
                }
            }
            BasicOp::Mul(a, b) => {
                {
                    let (bv, da) = sink.value_and_buf(*b, *a);
                    for ((d, &gv), &y) in da.iter_mut().zip(g).zip(bv.data()) {
                        *d += gv * y;
                    }
                }
                let (av, db) = sink.value_and_buf(*a, *b);
                for ((d, &gv), &x) in db.iter_mut().zip(g).zip(av.data()) {
                    *d += gv * x;
                }
            }
            BasicOp::MulConst(x, k) => {
                for ((d, &gv), &kv) in sink.buf(*x).iter_mut().zip(g).zip(k) {
                    *d += gv * kv;
                }
            }
            BasicOp::Scale(x, s) => {
                for (d, &gv) in sink.buf(*x).iter_mut().zip(g) {
                    *d += gv * *s;
                }
            }
            BasicOp::Sum(x) => {
                let gv = g[0];
                sink.buf(*x).iter_mut().for_each(|d| *d += gv);
            }
            BasicOp::Mean(x) => {
                let n = sink.value(*x).numel();
                let gv = g[0] / F::from_f64(n as f64);
                sink.buf(*x).iter_mut().for_each(|d| *d += gv);
            }
            BasicOp::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let n = sink.value(p).cols();
                    let buf = sink.buf(p);
                    for (r, row) in buf.chunks_mut(n).enumerate() {
                        let src = &g[r * total + offset..r * total + offset + n];
                        for (d, &v) in row.iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                    offset += n;
                }
            }
            BasicOp::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = sink.value(p).numel();
                    sink.add(p, &g[offset..offset + len]);
                    offset += len;
                }
            }
            BasicOp::SliceRows { x, start } => {
                let n = out.cols();
                let buf = sink.buf(*x);
                for (d, &v) in buf[start * n..start * n + g.len()].iter_mut().zip(g) {
                    *d += v;
                }
            }
            BasicOp::Reshape(x) => sink.add(*x, g),
            BasicOp::WeightedRowSum { x, weights } => {
                let n = g.len();
                let buf = sink.buf(*x);
                for (row, &w) in buf.chunks_mut(n).zip(weights) {
                    if w == F::zero() {
                        continue;
                    }
                    for (d, &gv) in row.iter_mut().zip(g) {
                        *d += w * gv;
                    }
                }
            }
            BasicOp::SelectScale { x, gate, idx } => {
                {
                    let (gv, dx) = sink.value_and_buf(*gate, *x);
                    let s = gv.data()[*idx];
                    for (d, &v) in dx.iter_mut().zip(g) {
                        *d += s * v;
                    }
                }
                let (xv, dgate) = sink.value_and_buf(*x, *gate);
                let dot: F = xv.data().iter().zip(g).map(|(&a, &b)| a * b).sum();
                dgate[*idx] += dot;
            }
            BasicOp::StraightThrough(soft) => sink.add(*soft, g),
        }
    }
}
