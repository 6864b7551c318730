use rand::Rng;

use super::{CustomOp, Op, Real, Shape, Tape, Var};
use crate::error::{Error, Result};

/// sqrt(2/pi)
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Tanh-approximated GELU: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu_value(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_SCALE * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let t = (GELU_SCALE * (x + GELU_CUBIC * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_SCALE * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

fn matmul_f64(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &mut out[i * c..(i + 1) * c];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * c..(p + 1) * c];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose_f64(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

impl<T: Real> Tape<T> {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, k) = self.matrix_dims(a, "matmul")?;
        let (k2, c) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a).dims(), self.shape(b).dims()));
        }
        let out = matmul_f64(&self.value_f64(a), &self.value_f64(b), r, k, c);
        self.push(Op::MatMul(a, b), Shape::matrix(r, c), out)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(a, "transpose")?;
        let out = transpose_f64(&self.value_f64(a), r, c);
        self.push(Op::Transpose(a), Shape::matrix(c, r), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a).dims(), self.shape(b).dims()));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x.to_f64() + y.to_f64())
            .collect();
        let shape = self.shape(a).clone();
        self.push(Op::Add(a, b), shape, out)
    }

    /// Adds a row vector (`[c]` or `[1, c]`) to every row of an `r×c` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(a, "add_row")?;
        if self.shape(row).as_row() != Some(c) {
            return Err(Error::shape("add_row", self.shape(a).dims(), self.shape(row).dims()));
        }
        let bias = self.value_f64(row);
        let av = self.value(a);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            out.extend((0..c).map(|j| av[i * c + j].to_f64() + bias[j]));
        }
        self.push(Op::AddRow(a, row), Shape::matrix(r, c), out)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a).dims(), self.shape(b).dims()));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x.to_f64() * y.to_f64())
            .collect();
        let shape = self.shape(a).clone();
        self.push(Op::Mul(a, b), shape, out)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x.to_f64() * factor).collect();
        let shape = self.shape(a).clone();
        self.push(Op::Scale(a, factor), shape, out)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total: f64 = self.value(a).iter().map(|x| x.to_f64()).sum();
        self.push(Op::Sum(a), Shape::scalar(), vec![total])
    }

    /// Mean over all elements.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.shape(a).numel();
        if n == 0 {
            return Err(Error::InvalidArgument("mean of an empty tensor".into()));
        }
        let total: f64 = self.value(a).iter().map(|x| x.to_f64()).sum();
        self.push(Op::Mean(a), Shape::scalar(), vec![total / n as f64])
    }

    /// Column means of an `r×c` matrix, as a `1×c` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(a, "mean_rows")?;
        if r == 0 {
            return Err(Error::InvalidArgument("mean_rows over zero rows".into()));
        }
        let av = self.value(a);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(&av[i * c..(i + 1) * c]) {
                *o += v.to_f64();
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        self.push(Op::MeanRows(a), Shape::matrix(1, c), out)
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(a, "softmax_rows")?;
        let av = self.value_f64(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &av[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[i * c..(i + 1) * c];
            let mut total = 0.0;
            for (d, &x) in dst.iter_mut().zip(row) {
                *d = (x - max).exp();
                total += *d;
            }
            dst.iter_mut().for_each(|d| *d /= total);
        }
        self.push(Op::SoftmaxRows(a), Shape::matrix(r, c), out)
    }

    /// Per-row normalization to zero mean and unit (population) variance,
    /// then `gain * xhat + bias`. `eps` sits inside the square root, so a
    /// constant row maps to `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, d) = self.matrix_dims(x, "layer_norm")?;
        if d == 0 {
            return Err(Error::InvalidArgument("layer_norm over zero columns".into()));
        }
        if self.shape(gain).as_row() != Some(d) {
            return Err(Error::shape(
                "layer_norm",
                self.shape(x).dims(),
                self.shape(gain).dims(),
            ));
        }
        if self.shape(bias).as_row() != Some(d) {
            return Err(Error::shape(
                "layer_norm",
                self.shape(x).dims(),
                self.shape(bias).dims(),
            ));
        }
        let xv = self.value_f64(x);
        let g = self.value_f64(gain);
        let b = self.value_f64(bias);
        let mut xhat = vec![0.0; r * d];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * d];
        for i in 0..r {
            let row = &xv[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..d {
                let h = (row[j] - mean) * istd;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            Shape::matrix(r, d),
            out,
        )
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|x| gelu_value(x.to_f64())).collect();
        let shape = self.shape(a).clone();
        self.push(Op::Gelu(a), shape, out)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x.to_f64().max(0.0)).collect();
        let shape = self.shape(a).clone();
        self.push(Op::Relu(a), shape, out)
    }

    /// Inverted dropout drawing its mask from the tape's RNG. A rate of 0
    /// returns the input unchanged and records nothing.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} not in [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let n = self.shape(a).numel();
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng().random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = self.value(a).iter().zip(&mask).map(|(x, m)| x.to_f64() * m).collect();
        let shape = self.shape(a).clone();
        self.push(Op::Dropout(a, mask), shape, out)
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_rows of nothing".into()))?;
        let (_, c) = self.matrix_dims(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, pc) = self.matrix_dims(p, "concat_rows")?;
            if pc != c {
                return Err(Error::shape(
                    "concat_rows",
                    self.shape(first).dims(),
                    self.shape(p).dims(),
                ));
            }
            rows += r;
            out.extend(self.value(p).iter().map(|v| v.to_f64()));
        }
        self.push(Op::ConcatRows(parts.to_vec()), Shape::matrix(rows, c), out)
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_cols of nothing".into()))?;
        let (r, _) = self.matrix_dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.matrix_dims(p, "concat_cols")?;
            if pr != r {
                return Err(Error::shape(
                    "concat_cols",
                    self.shape(first).dims(),
                    self.shape(p).dims(),
                ));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend(self.value(p)[i * w..(i + 1) * w].iter().map(|v| v.to_f64()));
            }
        }
        self.push(Op::ConcatCols(parts.to_vec()), Shape::matrix(r, total), out)
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims(a, "slice_rows")?;
        if start > end || end > r {
            return Err(Error::shape("slice_rows", self.shape(a).dims(), &[start, end]));
        }
        let out = self.value(a)[start * c..end * c].iter().map(|v| v.to_f64()).collect();
        self.push(Op::SliceRows(a, start), Shape::matrix(end - start, c), out)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims(a, "slice_cols")?;
        if start > end || end > c {
            return Err(Error::shape("slice_cols", self.shape(a).dims(), &[start, end]));
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            out.extend(av[i * c + start..i * c + end].iter().map(|v| v.to_f64()));
        }
        self.push(Op::SliceCols(a, start), Shape::matrix(r, end - start), out)
    }

    pub fn reshape(&mut self, a: Var, shape: Shape) -> Result<Var> {
        if shape.numel() != self.shape(a).numel() {
            return Err(Error::shape("reshape", self.shape(a).dims(), shape.dims()));
        }
        let out = self.value_f64(a);
        self.push(Op::Reshape(a), shape, out)
    }

    /// Records an externally computed op; `op` supplies the backward rule.
    pub fn custom(&mut self, inputs: &[Var], shape: Shape, values: Vec<f64>, op: Box<dyn CustomOp>) -> Result<Var> {
        if shape.numel() != values.len() {
            return Err(Error::shape(op.name(), shape.dims(), &[values.len()]));
        }
        self.push(Op::Custom(inputs.to_vec(), op), shape, values)
    }

    /// Gradient contributions from node `id` to each parent that wants one.
    pub(super) fn local_gradients(&self, id: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[id];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (r, k) = self.shape(*a).as_matrix().unwrap();
                let c = self.shape(*b).as_matrix().unwrap().1;
                if self.wants(*a) {
                    let bv = self.value_f64(*b);
                    let mut da = vec![0.0; r * k];
                    for i in 0..r {
                        let grow = &g[i * c..(i + 1) * c];
                        for p in 0..k {
                            let brow = &bv[p * c..(p + 1) * c];
                            da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    out.push((*a, da));
                }
                if self.wants(*b) {
                    let av = self.value_f64(*a);
                    let mut db = vec![0.0; k * c];
                    for i in 0..r {
                        let grow = &g[i * c..(i + 1) * c];
                        for p in 0..k {
                            let aip = av[i * k + p];
                            for (d, &gv) in db[p * c..(p + 1) * c].iter_mut().zip(grow) {
                                *d += aip * gv;
                            }
                        }
                    }
                    out.push((*b, db));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.shape(*a).as_matrix().unwrap();
                // g is c×r
                out.push((*a, transpose_f64(g, c, r)));
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        out.push((v, g.to_vec()));
                    }
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.wants(*row) {
                    let (r, c) = self.shape(*a).as_matrix().unwrap();
                    let mut db = vec![0.0; c];
                    for i in 0..r {
                        db.iter_mut().zip(&g[i * c..(i + 1) * c]).for_each(|(d, x)| *d += x);
                    }
                    out.push((*row, db));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let bv = self.value(*b);
                    out.push((*a, g.iter().zip(bv).map(|(x, y)| x * y.to_f64()).collect()));
                }
                if self.wants(*b) {
                    let av = self.value(*a);
                    out.push((*b, g.iter().zip(av).map(|(x, y)| x * y.to_f64()).collect()));
                }
            }
            Op::Scale(a, f) => out.push((*a, g.iter().map(|x| x * f).collect())),
            Op::Sum(a) => out.push((*a, vec![g[0]; self.shape(*a).numel()])),
            Op::Mean(a) => {
                let n = self.shape(*a).numel();
                out.push((*a, vec![g[0] / n as f64; n]));
            }
            Op::MeanRows(a) => {
                let (r, c) = self.shape(*a).as_matrix().unwrap();
                let mut da = Vec::with_capacity(r * c);
                for _ in 0..r {
                    da.extend(g.iter().map(|x| x / r as f64));
                }
                out.push((*a, da));
            }
            Op::SoftmaxRows(a) => {
                let (r, c) = self.shape(*a).as_matrix().unwrap();
                let y = &node.tensor.data;
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y.to_f64() * g).sum();
                    for j in 0..c {
                        da[i * c + j] = yr[j].to_f64() * (gr[j] - dot);
                    }
                }
                out.push((*a, da));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (r, d) = self.shape(*x).as_matrix().unwrap();
                if self.wants(*x) {
                    let gv = self.value_f64(*gain);
                    let mut dx = vec![0.0; r * d];
                    for i in 0..r {
                        let gr = &g[i * d..(i + 1) * d];
                        let hr = &xhat[i * d..(i + 1) * d];
                        let dh: Vec<f64> = gr.iter().zip(&gv).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx[i * d + j] = inv_std[i] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    out.push((*x, dx));
                }
                if self.wants(*gain) {
                    let mut dg = vec![0.0; d];
                    for i in 0..r {
                        for j in 0..d {
                            dg[j] += g[i * d + j] * xhat[i * d + j];
                        }
                    }
                    out.push((*gain, dg));
                }
                if self.wants(*bias) {
                    let mut db = vec![0.0; d];
                    for i in 0..r {
                        db.iter_mut().zip(&g[i * d..(i + 1) * d]).for_each(|(a, b)| *a += b);
                    }
                    out.push((*bias, db));
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                out.push((
                    *a,
                    g.iter().zip(av).map(|(g, x)| g * gelu_derivative(x.to_f64())).collect(),
                ));
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                out.push((
                    *a,
                    g.iter()
                        .zip(av)
                        .map(|(g, x)| if x.to_f64() > 0.0 { *g } else { 0.0 })
                        .collect(),
                ));
            }
            Op::Dropout(a, mask) => {
                out.push((*a, g.iter().zip(mask).map(|(g, m)| g * m).collect()));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.shape(p).numel();
                    if self.wants(p) {
                        out.push((p, g[offset..offset + n].to_vec()));
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = node.tensor.shape.as_matrix().unwrap();
                let mut col = 0;
                for &p in parts {
                    let w = self.shape(p).as_matrix().unwrap().1;
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(r * w);
                        for i in 0..r {
                            dp.extend_from_slice(&g[i * total + col..i * total + col + w]);
                        }
                        out.push((p, dp));
                    }
                    col += w;
                }
            }
            Op::SliceRows(a, start) => {
                let (r, c) = self.shape(*a).as_matrix().unwrap();
                let mut da = vec![0.0; r * c];
                da[start * c..start * c + g.len()].copy_from_slice(g);
                out.push((*a, da));
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.shape(*a).as_matrix().unwrap();
                let w = node.tensor.shape.as_matrix().unwrap().1;
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    da[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                out.push((*a, da));
            }
            Op::Reshape(a) => out.push((*a, g.to_vec())),
            Op::Custom(inputs, op) => {
                let values: Vec<Vec<f64>> = inputs.iter().map(|&v| self.value_f64(v)).collect();
                let output = node.tensor.to_f64_vec();
                let grads = op.backward(&values, &output, g);
                for (&v, gv) in inputs.iter().zip(grads) {
                    if self.wants(v) {
                        out.push((v, gv));
                    }
                }
            }
        }
        out
    }
}
