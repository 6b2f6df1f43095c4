//! Dense row-major `f64` tensors and the forward kernels shared by the tape.

use std::io::{Read, Write};

use rand::Rng;

use crate::error::{shape_err, Error, Result};

/// Dense row-major tensor of 64-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return shape_err(format!("zero-sized dimension in shape {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            ));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
            requires_grad: false,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return shape_err("ragged rows");
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Gaussian init with the given standard deviation (Box-Muller).
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen();
            let r = (-2.0 * u1.ln()).sqrt();
            let th = std::f64::consts::TAU * u2;
            data.push(r * th.cos() * std);
            if data.len() < n {
                data.push(r * th.sin() * std);
            }
        }
        Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
        }
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows and columns when viewed as a matrix over the last axis.
    pub fn as_matrix(&self) -> (usize, usize) {
        let cols = *self.shape.last().unwrap_or(&1);
        (self.data.len() / cols.max(1), cols)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, c) = self.as_matrix();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return shape_err(format!("item() on tensor of shape {:?}", self.shape));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return shape_err(format!(
                "elementwise op on {:?} and {:?}",
                self.shape, other.shape
            ));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            requires_grad: false,
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return shape_err(format!("add_assign {:?} += {:?}", self.shape, other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Mean over rows of a matrix view: one value per column.
    pub fn mean_rows(&self) -> Self {
        let (r, c) = self.as_matrix();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(&self.data[i * c..(i + 1) * c]) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        Self {
            shape: vec![c],
            data: out,
            requires_grad: false,
        }
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = matrix_dims(self)?;
        let (k2, n) = matrix_dims(other)?;
        if k != k2 {
            return shape_err(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape, other.shape
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Self::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = matrix_dims(self)?;
        Self::new(vec![c, r], transpose_data(&self.data, r, c))
    }

    /// Row-wise softmax of `x / temperature`.
    pub fn softmax(&self, temperature: f64) -> Result<Self> {
        check_temperature(temperature)?;
        let (r, c) = self.as_matrix();
        let mut out = self.data.clone();
        for i in 0..r {
            softmax_row(&mut out[i * c..(i + 1) * c], temperature);
        }
        Self::new(self.shape.clone(), out)
    }

    pub fn log_softmax(&self, temperature: f64) -> Result<Self> {
        check_temperature(temperature)?;
        let (r, c) = self.as_matrix();
        let mut out = self.data.clone();
        for i in 0..r {
            log_softmax_row(&mut out[i * c..(i + 1) * c], temperature);
        }
        Self::new(self.shape.clone(), out)
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&self, eps: f64) -> Result<Self> {
        if eps <= 0.0 {
            return Err(Error::Parameter(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (r, c) = self.as_matrix();
        let mut out = self.data.clone();
        for i in 0..r {
            layer_norm_row(&mut out[i * c..(i + 1) * c], eps);
        }
        Self::new(self.shape.clone(), out)
    }

    pub fn gelu(&self) -> Self {
        self.map(gelu)
    }

    pub fn embedding_lookup(&self, id: usize) -> Result<Self> {
        let (r, c) = matrix_dims(self)?;
        if id >= r {
            return shape_err(format!("embedding id {id} out of range for {r} rows"));
        }
        Self::new(vec![c], self.row(id).to_vec())
    }
}

fn matrix_dims(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape.as_slice() {
        [r, c] => Ok((*r, *c)),
        s => shape_err(format!("expected a matrix, got shape {s:?}")),
    }
}

pub(crate) fn check_temperature(t: f64) -> Result<()> {
    if t <= 0.0 || !t.is_finite() {
        return Err(Error::Parameter(format!("temperature must be > 0, got {t}")));
    }
    Ok(())
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn matmul_nt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn matmul_tn_into(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Four-lane dot product; fixed summation order keeps results reproducible.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub(crate) fn transpose_data(d: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    out
}

pub(crate) fn softmax_row(row: &mut [f64], t: f64) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) / t).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

pub(crate) fn log_softmax_row(row: &mut [f64], t: f64) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = row.iter().map(|&v| ((v - max) / t).exp()).sum::<f64>().ln();
    for v in row.iter_mut() {
        *v = (*v - max) / t - lse;
    }
}

/// Normalizes in place; returns the inverse standard deviation.
pub(crate) fn layer_norm_row(row: &mut [f64], eps: f64) -> f64 {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    for v in row.iter_mut() {
        *v = (*v - mean) * inv;
    }
    inv
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean over rows of `H(target_row, softmax(logits_row / t))`.
///
/// Target rows must be probability distributions (sum within 1e-6 of 1).
pub fn soft_cross_entropy(target: &Tensor, logits: &Tensor, t_student: f64) -> Result<f64> {
    validate_distribution_rows(target)?;
    if target.shape != logits.shape {
        return shape_err(format!(
            "target {:?} vs logits {:?}",
            target.shape, logits.shape
        ));
    }
    let logp = logits.log_softmax(t_student)?;
    let (r, _) = target.as_matrix();
    let total: f64 = target
        .data
        .iter()
        .zip(&logp.data)
        .map(|(&p, &lq)| if p == 0.0 { 0.0 } else { -p * lq })
        .sum();
    Ok(total / r as f64)
}

/// Mean row entropy of a matrix of distributions.
pub fn entropy_rows(p: &Tensor) -> f64 {
    let (r, _) = p.as_matrix();
    let h: f64 = p
        .data
        .iter()
        .map(|&v| if v > 0.0 { -v * v.ln() } else { 0.0 })
        .sum();
    h / r as f64
}

pub(crate) fn validate_distribution_rows(t: &Tensor) -> Result<()> {
    let (r, _) = t.as_matrix();
    for i in 0..r {
        let row = t.row(i);
        if row.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::Validation(format!("target row {i} has invalid entries")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(format!(
                "target row {i} sums to {s}, expected 1"
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// GXB1 binary format: "GXB1", u32 rank, rank x u32 dims, f32 LE row-major.

pub const GXB1_MAGIC: &[u8; 4] = b"GXB1";

pub fn write_gxb1<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(GXB1_MAGIC)?;
    w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
    for &d in &t.shape {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.data.len() * 4);
    for &v in &t.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn encode_gxb1(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.numel());
    write_gxb1(&mut out, t).expect("writing to a Vec cannot fail");
    out
}

pub fn read_gxb1<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != GXB1_MAGIC {
        return Err(Error::Format(format!("bad GXB1 magic {magic:?}")));
    }
    let rank = read_u32(r)? as usize;
    if rank == 0 || rank > 16 {
        return Err(Error::Format(format!("implausible GXB1 rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r)? as usize);
    }
    let n: usize = shape.iter().product();
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    let data = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn decode_gxb1(bytes: &[u8]) -> Result<Tensor> {
    let mut cur = bytes;
    let t = read_gxb1(&mut cur)?;
    if !cur.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after GXB1 tensor", cur.len())));
    }
    Ok(t)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_products() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(Tensor::eye(2).matmul(&a).unwrap(), a);
        let b = Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[17.0, 39.0]);
        let z = Tensor::zeros(&[3, 2]);
        assert!(z.matmul(&a).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&Tensor::zeros(&[2, 2])), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_examples() {
        let t = Tensor::new(vec![3], vec![0.0; 3]).unwrap().softmax(1.0).unwrap();
        for &v in t.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let t = Tensor::new(vec![3], vec![1f64.ln(), 2f64.ln(), 3f64.ln()])
            .unwrap()
            .softmax(1.0)
            .unwrap();
        for (v, e) in t.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((v - e).abs() < 1e-15);
        }
        let t = Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap().softmax(1.0).unwrap();
        assert!(t.is_finite());
        assert!((t.data()[0] - 1.0).abs() < 1e-15 && t.data()[1] < 1e-300);
        assert!(matches!(
            Tensor::zeros(&[2]).softmax(0.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn layer_norm_gelu_lookup() {
        let c = Tensor::filled(&[1, 5], 3.5).layer_norm(1e-5).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
        assert_eq!(gelu(0.0), 0.0);
        let table = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(table.embedding_lookup(1).unwrap().data(), &[3.0, 4.0]);
        assert!(table.embedding_lookup(2).is_err());
        assert!(Tensor::zeros(&[2, 2]).layer_norm(0.0).is_err());
    }

    #[test]
    fn soft_cross_entropy_examples() {
        let logits = Tensor::from_rows(&[vec![0.3, -1.2, 2.0, 0.1]]).unwrap();
        let target = logits.softmax(0.5).unwrap();
        let ce = soft_cross_entropy(&target, &logits, 0.5).unwrap();
        assert!((ce - entropy_rows(&target)).abs() < 1e-12);

        let k = 7;
        let u = Tensor::filled(&[2, k], 1.0 / k as f64);
        let ce = soft_cross_entropy(&u, &Tensor::zeros(&[2, k]), 1.0).unwrap();
        assert!((ce - (k as f64).ln()).abs() < 1e-12);

        let onehot = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let sep = Tensor::from_rows(&[vec![-500.0, 500.0]]).unwrap();
        assert!(soft_cross_entropy(&onehot, &sep, 1.0).unwrap() < 1e-12);

        let bad = Tensor::from_rows(&[vec![0.5, 0.6]]).unwrap();
        assert!(matches!(
            soft_cross_entropy(&bad, &sep, 1.0),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn gxb1_layout_is_bit_exact() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let bytes = encode_gxb1(&t);
        let mut expect = b"GXB1".to_vec();
        expect.extend(2u32.to_le_bytes());
        expect.extend(2u32.to_le_bytes());
        expect.extend(1u32.to_le_bytes());
        expect.extend(1.0f32.to_le_bytes());
        expect.extend((-2.5f32).to_le_bytes());
        assert_eq!(bytes, expect);
        assert_eq!(decode_gxb1(&bytes).unwrap(), t);
        assert!(decode_gxb1(b"GXB2\0\0\0\0").is_err());
    }
}
