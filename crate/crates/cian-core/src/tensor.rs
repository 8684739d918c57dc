//! Dense row-major tensors (rank 1 and 2 in practice) and the small set of
//! primitives the rest of the crate computes with. Everything is f64.

use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&s| s == 0) {
            return Err(Error::dimension("Tensor::new", format!("zero extent in shape {shape:?}")));
        }
        if n != data.len() {
            return Err(Error::dimension(
                "Tensor::new",
                format!("shape {shape:?} implies {n} entries, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor { shape: vec![1], data: vec![x] }
    }

    /// Row-major matrix from rows.
    pub fn matrix(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::dimension("Tensor::matrix", "ragged rows".to_string()));
        }
        Tensor::new(vec![m, n], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dimension(op, format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
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

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| c * x)
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::dimension("dot", format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn l2_normalized(&self) -> Result<Tensor> {
        let n = self.norm();
        if n == 0.0 {
            return Err(Error::degenerate("l2_normalize", "zero-norm vector".to_string()));
        }
        Ok(self.scale(1.0 / n))
    }
}

/// C = A B for row-major rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::dimension(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a.data()[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b.data()[p * n..(p + 1) * n];
            for j in 0..n {
                c[i * n + j] += aip * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], c)
}

/// diag(d) * A: scales row i of A by d[i].
pub fn diag_matmul(d: &Tensor, a: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || d.shape() != [a.shape()[0]] {
        return Err(Error::dimension(
            "diag_matmul",
            format!("diag {:?} vs matrix {:?}", d.shape(), a.shape()),
        ));
    }
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let mut out = a.data().to_vec();
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] *= d.data()[i];
        }
    }
    Tensor::new(vec![m, n], out)
}

/// y[i] = sum_j W[i][j] * x[j] + b[i]
pub fn linear_forward(w: &Tensor, b: &Tensor, x: &Tensor) -> Result<Tensor> {
    if w.shape().len() != 2 {
        return Err(Error::dimension("linear_forward", format!("W must be rank 2, got {:?}", w.shape())));
    }
    let (m, n) = (w.shape()[0], w.shape()[1]);
    if b.shape() != [m] {
        return Err(Error::dimension(
            "linear_forward",
            format!("W is {m}x{n} but b has shape {:?}", b.shape()),
        ));
    }
    if x.shape() != [n] {
        return Err(Error::dimension(
            "linear_forward",
            format!("W is {m}x{n} but x has shape {:?}", x.shape()),
        ));
    }
    let wd = w.data();
    let xd = x.data();
    let mut y = b.data().to_vec();
    for i in 0..m {
        let row = &wd[i * n..(i + 1) * n];
        y[i] += row.iter().zip(xd).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(Tensor::vector(y))
}

/// Max-subtracted softmax over a rank-1 tensor.
pub fn softmax(s: &Tensor) -> Result<Tensor> {
    if s.is_empty() {
        return Err(Error::dimension("softmax", "empty input".to_string()));
    }
    let max = s.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = s.data().iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(Tensor { shape: s.shape().to_vec(), data: exps.into_iter().map(|e| e / sum).collect() })
}

/// <u,v> / (||u|| ||v||); zero-norm inputs are rejected rather than mapped to 0.
pub fn cosine_similarity(u: &Tensor, v: &Tensor) -> Result<f64> {
    let nu = u.norm();
    let nv = v.norm();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::degenerate("cosine_similarity", "zero-norm operand".to_string()));
    }
    Ok((u.dot(v)? / (nu * nv)).clamp(-1.0, 1.0))
}

/// Seedable, portable RNG used everywhere randomness is needed.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One standard-normal draw via Box-Muller (keeps the dependency set small
/// and the stream portable across platforms).
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}

/// Kaiming-normal init: i.i.d. N(0, 2/fan_in).
pub fn kaiming_init(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if fan_in == 0 {
        return Err(Error::Parameter("kaiming_init: fan_in must be >= 1".to_string()));
    }
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| std * standard_normal(rng)).collect();
    Tensor::new(shape, data)
}
