//! Dense row-major `f64` tensors.
//!
//! Only what the lab needs: rank 0 to 2, elementwise ops with scalar
//! broadcast, matrix products, row-bias addition and a few reductions.
//! Every op rejects non-finite results.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

pub fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// `log σ(u) = -softplus(-u)`, evaluated without overflow for large `|u|`.
pub fn log_sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        -(-u).exp().ln_1p()
    } else {
        u - u.exp().ln_1p()
    }
}

/// `ln(1 + e^u)`.
pub fn softplus(u: f64) -> f64 {
    -log_sigmoid(-u)
}

pub fn silu(u: f64) -> f64 {
    u * sigmoid(u)
}

pub(crate) fn silu_grad(u: f64) -> f64 {
    let s = sigmoid(u);
    s * (1.0 + u * (1.0 - s))
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::invalid(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "new",
                left: shape,
                right: vec![data.len()],
            });
        }
        check_finite("new", &data)?;
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for data already known to be well formed.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Tensor::new(vec![], vec![v])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        if r == 0 {
            return Err(Error::EmptyBatch);
        }
        let c = rows[0].len();
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Shape {
                    op: "from_rows",
                    left: vec![c],
                    right: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::matrix(r, c, data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![0.0; n])
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor::from_parts(vec![n, n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::NotScalar(self.shape.clone()))
        }
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::Shape {
                op: "reshape",
                left: self.shape.clone(),
                right: shape,
            });
        }
        Ok(Tensor::from_parts(shape, self.data.clone()))
    }

    pub fn map(&self, op: &'static str, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        check_finite(op, &data)?;
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (shape, data): (Vec<usize>, Vec<f64>) = if self.shape == other.shape {
            (
                self.shape.clone(),
                self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            )
        } else if other.is_scalar() {
            let b = other.data[0];
            (self.shape.clone(), self.data.iter().map(|&a| f(a, b)).collect())
        } else if self.is_scalar() {
            let a = self.data[0];
            (other.shape.clone(), other.data.iter().map(|&b| f(a, b)).collect())
        } else {
            return Err(Error::Shape {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        };
        check_finite(op, &data)?;
        Ok(Tensor::from_parts(shape, data))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        self.map("scale", |v| v * c)
    }

    pub fn square(&self) -> Result<Tensor> {
        self.map("square", |v| v * v)
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.map("sigmoid", sigmoid)
    }

    pub fn log_sigmoid(&self) -> Result<Tensor> {
        self.map("log_sigmoid", log_sigmoid)
    }

    pub fn silu(&self) -> Result<Tensor> {
        self.map("silu", silu)
    }

    pub fn sum(&self) -> Result<Tensor> {
        let s: f64 = self.data.iter().sum();
        check_finite("sum", &[s])?;
        Ok(Tensor::from_parts(vec![], vec![s]))
    }

    pub fn mean(&self) -> Result<Tensor> {
        let s: f64 = self.data.iter().sum::<f64>() / self.numel() as f64;
        check_finite("mean", &[s])?;
        Ok(Tensor::from_parts(vec![], vec![s]))
    }

    /// Sum over the last axis: `[r, c] -> [r, 1]`, `[n] -> []`.
    pub fn sum_last(&self) -> Result<Tensor> {
        if self.shape.len() < 2 {
            return self.sum();
        }
        let c = self.cols();
        let data: Vec<f64> = self.data.chunks(c).map(|row| row.iter().sum()).collect();
        check_finite("sum_last", &data)?;
        Ok(Tensor::from_parts(vec![self.rows(), 1], data))
    }

    fn as_matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.len() {
            2 => Ok((self.shape[0], self.shape[1])),
            1 => Ok((self.shape[0], 1)),
            _ => Err(Error::Shape {
                op,
                left: self.shape.clone(),
                right: vec![],
            }),
        }
    }

    /// Matrix product. A rank-1 right operand is treated as a column vector
    /// and the result is rank 1.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = other.as_matrix_dims("matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &a) in arow.iter().enumerate() {
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        check_finite("matmul", &out)?;
        let shape = if other.shape.len() == 1 { vec![m] } else { vec![m, n] };
        Ok(Tensor::from_parts(shape, out))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.as_matrix_dims("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor::from_parts(vec![c, r], out))
    }

    /// `[r, c] + [1, c]` (or `[c]`), adding the row to every row.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        let c = self.cols();
        if self.shape.len() != 2 || row.numel() != c {
            return Err(Error::Shape {
                op: "add_row",
                left: self.shape.clone(),
                right: row.shape.clone(),
            });
        }
        let mut data = self.data.clone();
        for chunk in data.chunks_mut(c) {
            for (v, &b) in chunk.iter_mut().zip(&row.data) {
                *v += b;
            }
        }
        check_finite("add_row", &data)?;
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    /// Column sums of a matrix as a `[1, c]` row.
    pub fn sum_rows(&self) -> Result<Tensor> {
        let c = self.cols();
        let mut out = vec![0.0; c];
        for chunk in self.data.chunks(c) {
            for (o, &v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        Ok(Tensor::from_parts(vec![1, c], out))
    }

    /// Concatenate rank-2 tensors along `axis` (0 = rows, 1 = columns), or
    /// rank-1 tensors end to end.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::EmptyBatch)?;
        let rank = first.shape.len();
        if rank == 1 {
            let mut data = Vec::new();
            for p in parts {
                if p.shape.len() != 1 {
                    return Err(Error::Shape {
                        op: "concat",
                        left: first.shape.clone(),
                        right: p.shape.clone(),
                    });
                }
                data.extend_from_slice(&p.data);
            }
            return Ok(Tensor::from_parts(vec![data.len()], data));
        }
        if rank != 2 || axis > 1 {
            return Err(Error::invalid("concat supports rank 1 or rank 2 along axis 0/1"));
        }
        for p in parts {
            if p.shape.len() != 2 || p.shape[1 - axis] != first.shape[1 - axis] {
                return Err(Error::Shape {
                    op: "concat",
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                });
            }
        }
        if axis == 0 {
            let rows = parts.iter().map(|p| p.shape[0]).sum();
            let mut data = Vec::with_capacity(rows * first.shape[1]);
            for p in parts {
                data.extend_from_slice(&p.data);
            }
            Ok(Tensor::from_parts(vec![rows, first.shape[1]], data))
        } else {
            let r = first.shape[0];
            let cols: usize = parts.iter().map(|p| p.shape[1]).sum();
            let mut data = Vec::with_capacity(r * cols);
            for i in 0..r {
                for p in parts {
                    data.extend_from_slice(p.row(i));
                }
            }
            Ok(Tensor::from_parts(vec![r, cols], data))
        }
    }

    /// Columns `[start, end)` of a matrix.
    pub fn narrow_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        let c = self.cols();
        if self.shape.len() != 2 || start >= end || end > c {
            return Err(Error::invalid(format!(
                "narrow_cols {start}..{end} on shape {:?}",
                self.shape
            )));
        }
        let mut data = Vec::with_capacity(self.rows() * (end - start));
        for row in self.data.chunks(c) {
            data.extend_from_slice(&row[start..end]);
        }
        Ok(Tensor::from_parts(vec![self.rows(), end - start], data))
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Little-endian byte image of the values, used for checksums.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}
