//! Subsampled orthonormal measurement operators, least-squares coarse
//! reconstruction, and training of a refinement network on `1 - SSIM`.
//!
//! `A` keeps `m` rows of an orthonormal `n×n` transform `Q` (row 0, the
//! constant row, always among them), so `A Aᵀ = I_m` and `A⁺ = Aᵀ`.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;

use crate::denoise::{fit, Example, LossKind, MetricsRecord, TrainConfig};
use crate::error::{Error, Result};
use crate::models::ModelConfig;
use crate::params::ModelParams;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const OPERATOR_MAGIC: &[u8; 4] = b"IMXO";
pub const OPERATOR_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    /// Sylvester-ordered Walsh-Hadamard on the flattened image (`H·W` a power of two).
    Hadamard,
    /// Separable orthonormal 2-D DCT-II.
    Dct,
}

impl Transform {
    fn code(self) -> u8 {
        match self {
            Transform::Hadamard => 0,
            Transform::Dct => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Transform::Hadamard),
            1 => Ok(Transform::Dct),
            _ => Err(Error::Format(format!("unknown transform code {code}"))),
        }
    }
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Transform::Hadamard => "hadamard",
            Transform::Dct => "dct",
        })
    }
}

impl FromStr for Transform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hadamard" => Ok(Transform::Hadamard),
            "dct" => Ok(Transform::Dct),
            _ => Err(Error::Config(format!("unknown transform `{s}` (valid: hadamard, dct)"))),
        }
    }
}

/// In-place unnormalized fast Walsh-Hadamard transform.
fn fwht(v: &mut [f64]) {
    let n = v.len();
    let mut len = 1;
    while len < n {
        for start in (0..n).step_by(2 * len) {
            for i in start..start + len {
                let (a, b) = (v[i], v[i + len]);
                v[i] = a + b;
                v[i + len] = a - b;
            }
        }
        len *= 2;
    }
}

/// Orthonormal DCT-II matrix `[k, k]`, row `u` = frequency `u`.
fn dct_matrix(k: usize) -> Vec<f64> {
    let mut d = vec![0.0; k * k];
    for u in 0..k {
        let alpha = if u == 0 { (1.0 / k as f64).sqrt() } else { (2.0 / k as f64).sqrt() };
        for i in 0..k {
            d[u * k + i] = alpha * (std::f64::consts::PI * (2 * i + 1) as f64 * u as f64 / (2 * k) as f64).cos();
        }
    }
    d
}

/// `out[r][c] = Σ_k m[r][k] x[k][c]` (or with `m` transposed).
fn left_mul(m: &[f64], k: usize, x: &[f64], cols: usize, transpose: bool) -> Vec<f64> {
    let mut out = vec![0.0; k * cols];
    for r in 0..k {
        for kk in 0..k {
            let coef = if transpose { m[kk * k + r] } else { m[r * k + kk] };
            if coef == 0.0 {
                continue;
            }
            let src = &x[kk * cols..(kk + 1) * cols];
            for (o, &s) in out[r * cols..(r + 1) * cols].iter_mut().zip(src) {
                *o += coef * s;
            }
        }
    }
    out
}

fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementOperator {
    transform: Transform,
    height: usize,
    width: usize,
    rows: Vec<usize>,
    seed: u64,
    dct_h: Vec<f64>,
    dct_w: Vec<f64>,
}

impl MeasurementOperator {
    /// `m = ⌊n / acceleration⌋` rows: row 0 plus `m - 1` distinct rows drawn
    /// from the `operator` stream, stored in ascending order.
    pub fn new(height: usize, width: usize, acceleration: f64, transform: Transform, seed: u64) -> Result<Self> {
        let n = height * width;
        if !(acceleration >= 1.0) {
            return Err(Error::Config(format!("acceleration must be >= 1, got {acceleration}")));
        }
        if transform == Transform::Hadamard && !n.is_power_of_two() {
            return Err(Error::Config(format!("hadamard needs H·W a power of two, got {height}x{width}")));
        }
        let m = (n as f64 / acceleration).floor() as usize;
        if m == 0 {
            return Err(Error::Config(format!("acceleration {acceleration} leaves no measurements for n = {n}")));
        }
        let mut r = rng::stream(seed, "operator", 0);
        let mut rows: Vec<usize> = index::sample(&mut r, n - 1, m - 1).into_iter().map(|i| i + 1).collect();
        rows.push(0);
        rows.sort_unstable();
        Self::from_rows(height, width, transform, rows, seed)
    }

    fn from_rows(height: usize, width: usize, transform: Transform, rows: Vec<usize>, seed: u64) -> Result<Self> {
        let n = height * width;
        if rows.iter().any(|&r| r >= n) || rows.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Format("operator rows must be strictly increasing and < n".into()));
        }
        let (dct_h, dct_w) = match transform {
            Transform::Dct => (dct_matrix(height), dct_matrix(width)),
            Transform::Hadamard => (Vec::new(), Vec::new()),
        };
        Ok(MeasurementOperator {
            transform,
            height,
            width,
            rows,
            seed,
            dct_h,
            dct_w,
        })
    }

    pub fn transform(&self) -> Transform {
        self.transform
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n(&self) -> usize {
        self.height * self.width
    }

    pub fn m(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn acceleration(&self) -> f64 {
        self.n() as f64 / self.m() as f64
    }

    /// `Q x` for a flattened image.
    fn forward_full(&self, x: &[f64]) -> Vec<f64> {
        match self.transform {
            Transform::Hadamard => {
                let mut v = x.to_vec();
                fwht(&mut v);
                let s = 1.0 / (v.len() as f64).sqrt();
                v.iter_mut().for_each(|e| *e *= s);
                v
            }
            Transform::Dct => {
                let (h, w) = (self.height, self.width);
                let t = left_mul(&self.dct_h, h, x, w, false);
                let tt = left_mul(&self.dct_w, w, &transpose(&t, h, w), h, false);
                transpose(&tt, w, h)
            }
        }
    }

    /// `Qᵀ c`.
    fn inverse_full(&self, c: &[f64]) -> Vec<f64> {
        match self.transform {
            Transform::Hadamard => self.forward_full(c),
            Transform::Dct => {
                let (h, w) = (self.height, self.width);
                let t = left_mul(&self.dct_h, h, c, w, true);
                let tt = left_mul(&self.dct_w, w, &transpose(&t, h, w), h, true);
                transpose(&tt, w, h)
            }
        }
    }

    /// `y = A x`.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n() {
            return Err(Error::shape("operator apply", &[x.len()], &[self.n()]));
        }
        let full = self.forward_full(x);
        Ok(self.rows.iter().map(|&r| full[r]).collect())
    }

    /// `Aᵀ y`.
    pub fn adjoint(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.m() {
            return Err(Error::shape("operator adjoint", &[y.len()], &[self.m()]));
        }
        let mut full = vec![0.0; self.n()];
        for (&r, &v) in self.rows.iter().zip(y) {
            full[r] = v;
        }
        Ok(self.inverse_full(&full))
    }

    /// Measurements of an `[H, W, 1]` image.
    pub fn measure(&self, img: &Tensor<f64>) -> Result<Vec<f64>> {
        if img.shape() != [self.height, self.width, 1] {
            return Err(Error::shape("measure", img.shape(), &[self.height, self.width, 1]));
        }
        self.apply(img.data())
    }

    /// Least-squares estimate `A⁺ y = Aᵀ y` as an `[H, W, 1]` image.
    pub fn coarse_reconstruct(&self, y: &[f64]) -> Result<Tensor<f64>> {
        Tensor::new(vec![self.height, self.width, 1], self.adjoint(y)?)
    }

    /// `A` as a dense row-major `[m, n]` matrix.
    pub fn dense(&self) -> Vec<f64> {
        let n = self.n();
        let mut a = vec![0.0; self.m() * n];
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            let col = self.forward_full(&e);
            e[j] = 0.0;
            for (i, &r) in self.rows.iter().enumerate() {
                a[i * n + j] = col[r];
            }
        }
        a
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(OPERATOR_MAGIC)?;
        w.write_all(&[OPERATOR_VERSION, self.transform.code()])?;
        for v in [self.height, self.width, self.m()] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for &r in &self.rows {
            w.write_all(&(r as u64).to_le_bytes())?;
        }
        w.write_all(&self.seed.to_le_bytes())?;
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let mut head = [0u8; 6];
        r.read_exact(&mut head)?;
        if &head[..4] != OPERATOR_MAGIC {
            return Err(Error::Format("bad operator magic".into()));
        }
        if head[4] != OPERATOR_VERSION {
            return Err(Error::Format(format!("unsupported operator version {}", head[4])));
        }
        let transform = Transform::from_code(head[5])?;
        let mut u64s = |count: usize| -> Result<Vec<u64>> {
            let mut out = Vec::with_capacity(count);
            let mut b = [0u8; 8];
            for _ in 0..count {
                r.read_exact(&mut b)?;
                out.push(u64::from_le_bytes(b));
            }
            Ok(out)
        };
        let dims = u64s(3)?;
        let (h, w, m) = (dims[0] as usize, dims[1] as usize, dims[2] as usize);
        if m > h.saturating_mul(w) {
            return Err(Error::Format("more rows than signal length".into()));
        }
        let rows = u64s(m)?.into_iter().map(|v| v as usize).collect();
        let seed = u64s(1)?[0];
        Self::from_rows(h, w, transform, rows, seed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Shorthand for [`MeasurementOperator::new`].
pub fn build_operator(
    height: usize,
    width: usize,
    acceleration: f64,
    transform: Transform,
    seed: u64,
) -> Result<MeasurementOperator> {
    MeasurementOperator::new(height, width, acceleration, transform, seed)
}

/// `(A⁺ A x, x)` pairs for grayscale images.
pub fn cs_examples(op: &MeasurementOperator, images: &[Tensor<f64>]) -> Result<Vec<Example>> {
    images
        .iter()
        .map(|x| {
            Ok(Example {
                input: op.coarse_reconstruct(&op.measure(x)?)?,
                clean: x.clone(),
            })
        })
        .collect()
}

/// Trains `params` to map coarse reconstructions to clean images under the
/// `1 - SSIM` loss; evaluation logs SSIM on `eval`.
pub fn train_cs_refiner<T: Scalar>(
    config: &ModelConfig,
    params: ModelParams<T>,
    train: &[Tensor<f64>],
    eval: &[Tensor<f64>],
    op: &MeasurementOperator,
    tc: &TrainConfig,
) -> Result<(ModelParams<T>, Vec<MetricsRecord>)> {
    if config.channels != 1 || config.height != op.height() || config.width != op.width() {
        return Err(Error::Config(format!(
            "refiner must be {}x{}x1 to match the operator",
            op.height(),
            op.width()
        )));
    }
    let tc = TrainConfig {
        loss: LossKind::OneMinusSsim,
        ..*tc
    };
    fit(config, params, &cs_examples(op, train)?, &cs_examples(op, eval)?, &tc)
}
