//! Seeded random-variate generation.
//!
//! Every stream is a ChaCha8 generator keyed by a 64-bit master seed with a
//! 64-bit stream id, so chains and simulation replicates can each own an
//! independent stream derived from one master seed.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, psd_factor, spd_inverse, SymMatrix};

/// Relative tolerance for treating covariance eigen-directions as zero in
/// [`draw_mvn`].
const PSD_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        RngStream { seed, stream_id, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// A fresh stream under the same master seed, keyed by this stream's id
    /// and `index`. Derivation does not consume variates from `self`.
    pub fn substream(&self, index: u64) -> RngStream {
        let id = splitmix64(self.stream_id ^ splitmix64(index.wrapping_add(0x5151)));
        RngStream::new(self.seed, id)
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn normal(&mut self, mean: f64, sd: f64) -> f64 {
        mean + sd * self.standard_normal()
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// `mean + L z` with `z` standard normal and `L` a factor of `cov`.
/// Positive semi-definite covariances are accepted.
pub fn draw_mvn(rng: &mut RngStream, mean: &DVector<f64>, cov: &SymMatrix) -> Result<DVector<f64>> {
    if cov.dim() != mean.len() {
        return Err(Error::Dimension("mean and covariance sizes differ".into()));
    }
    let l = psd_factor(cov, PSD_TOL)?;
    Ok(draw_mvn_factor(rng, mean, &l))
}

/// Like [`draw_mvn`] with a precomputed lower-triangular factor.
pub fn draw_mvn_factor(rng: &mut RngStream, mean: &DVector<f64>, factor: &DMatrix<f64>) -> DVector<f64> {
    let d = mean.len();
    let z: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
    let mut out = mean.clone();
    for i in 0..d {
        let mut s = 0.0;
        for (j, zj) in z.iter().enumerate().take(i + 1) {
            s += factor[(i, j)] * zj;
        }
        out[i] += s;
    }
    out
}

pub fn draw_chisq(rng: &mut RngStream, df: f64) -> Result<f64> {
    if !(df > 0.0) || !df.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "chi-squared df must be positive, got {df}"
        )));
    }
    let dist = ChiSquared::new(df).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    Ok(dist.sample(rng))
}

/// Scaled inverse chi-squared draw `scale / χ²_df`.
pub fn draw_scaled_inv_chisq(rng: &mut RngStream, df: f64, scale: f64) -> Result<f64> {
    Ok(scale / draw_chisq(rng, df)?)
}

/// Lower-triangular Bartlett factor `A` with `A Aᵀ ~ Wishart(df, I)`.
fn bartlett_factor(rng: &mut RngStream, df: f64, dim: usize) -> Result<DMatrix<f64>> {
    let mut a = DMatrix::<f64>::zeros(dim, dim);
    for i in 0..dim {
        a[(i, i)] = draw_chisq(rng, df - i as f64)?.sqrt();
        for j in 0..i {
            a[(i, j)] = rng.standard_normal();
        }
    }
    Ok(a)
}

/// Draw from `Wishart(df, scale)`, mean `df · scale`.
pub fn draw_wishart(rng: &mut RngStream, df: f64, scale: &SymMatrix) -> Result<SymMatrix> {
    let dim = scale.dim();
    if !(df > dim as f64 - 1.0) {
        return Err(Error::InvalidParameter(format!(
            "Wishart df {df} must exceed dim - 1 = {}",
            dim as f64 - 1.0
        )));
    }
    let l = cholesky(scale)?;
    let a = bartlett_factor(rng, df, dim)?;
    let la = l * a;
    Ok(SymMatrix::symmetrized(&la * la.transpose()))
}

/// Draw from the inverse Wishart with `df` degrees of freedom and scale
/// matrix `scale` (mean `scale / (df − dim − 1)`), by inverting a Bartlett
/// Wishart draw with scale `scale⁻¹`.
pub fn draw_inv_wishart(rng: &mut RngStream, df: f64, scale: &SymMatrix) -> Result<SymMatrix> {
    let dim = scale.dim();
    if !(df > dim as f64 - 1.0) {
        return Err(Error::InvalidParameter(format!(
            "inverse-Wishart df {df} must exceed dim - 1 = {}",
            dim as f64 - 1.0
        )));
    }
    let precision_scale = spd_inverse(scale)?;
    let w = draw_wishart(rng, df, &precision_scale)?;
    spd_inverse(&w)
}

pub fn draw_bernoulli(rng: &mut RngStream, p: f64) -> Result<u8> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidParameter(format!("probability {p} outside [0, 1]")));
    }
    Ok(u8::from(rng.uniform() < p))
}
