//! Ground truth, per-node statistics and streaming regression data.
//!
//! Every node observes `d = u·w° + v` with Gaussian `u ~ N(0, R_u)` and
//! `v ~ N(0, sigma2_v)`.
//!
//! # Stream splitting
//!
//! Data for replica `r`, node `k` and instant `i` comes from a ChaCha8
//! generator keyed by `replica_seed(data_seed, r)`, on stream id `k`,
//! positioned at word `i << 32`. Each `(r, k, i)` triple therefore owns a
//! disjoint substream, and any instant can be regenerated without replaying
//! the ones before it.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Symmetry tolerance for covariance matrices.
pub const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum DataModelError {
    #[error("invalid range [{lo}, {hi}] for {what}")]
    InvalidRange { what: &'static str, lo: f64, hi: f64 },
    #[error("dimension must be at least 1")]
    ZeroDimension,
    #[error("step size must be positive and finite, got {0}")]
    InvalidStepSize(f64),
    #[error("noise variance must be positive and finite, got {0}")]
    InvalidNoiseVariance(f64),
    #[error("regressor covariance is not symmetric positive definite")]
    NotPositiveDefinite,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for an independent purpose (`"topology"`, `"profiles"`, ...) derived
/// from a master seed.
pub fn derive_seed(master: u64, domain: &str) -> u64 {
    // FNV-1a over the tag, then mixed with the master seed.
    let tag = domain
        .bytes()
        .fold(0xCBF2_9CE4_8422_2325_u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01B3));
    splitmix64(master ^ splitmix64(tag))
}

/// Seed of Monte Carlo replica `replica`: `splitmix64(seed + (replica + 1) * GOLDEN_GAMMA)`.
pub fn replica_seed(seed: u64, replica: usize) -> u64 {
    splitmix64(seed.wrapping_add((replica as u64 + 1).wrapping_mul(GOLDEN_GAMMA)))
}

/// The unknown parameter `w°`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    w_star: DVector<f64>,
}

impl GroundTruth {
    pub fn new(w_star: DVector<f64>) -> Result<Self, DataModelError> {
        if w_star.is_empty() {
            return Err(DataModelError::ZeroDimension);
        }
        assert!(w_star.iter().all(|x| x.is_finite()), "ground truth must be finite");
        Ok(Self { w_star })
    }

    pub fn vector(&self) -> &DVector<f64> {
        &self.w_star
    }

    pub fn dim(&self) -> usize {
        self.w_star.len()
    }
}

/// Standard Gaussian draw normalized to unit length.
pub fn sample_ground_truth(m: usize, seed: u64) -> Result<GroundTruth, DataModelError> {
    if m == 0 {
        return Err(DataModelError::ZeroDimension);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let w = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = w.norm();
        if norm > 1e-12 {
            return GroundTruth::new(w / norm);
        }
    }
}

/// Step size, regressor covariance and noise variance of one node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeProfile {
    mu: f64,
    r_u: DMatrix<f64>,
    sigma2_v: f64,
    // Lower Cholesky factor of r_u, used to color regressors.
    r_u_factor: DMatrix<f64>,
}

impl NodeProfile {
    pub fn new(mu: f64, r_u: DMatrix<f64>, sigma2_v: f64) -> Result<Self, DataModelError> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(DataModelError::InvalidStepSize(mu));
        }
        if !(sigma2_v > 0.0 && sigma2_v.is_finite()) {
            return Err(DataModelError::InvalidNoiseVariance(sigma2_v));
        }
        if r_u.nrows() == 0 {
            return Err(DataModelError::ZeroDimension);
        }
        if r_u.nrows() != r_u.ncols() {
            return Err(DataModelError::NotPositiveDefinite);
        }
        let scale = r_u.amax().max(1.0);
        if (&r_u - r_u.transpose()).amax() > SYMMETRY_TOL * scale {
            return Err(DataModelError::NotPositiveDefinite);
        }
        let r_u = (&r_u + r_u.transpose()) * 0.5;
        let chol = r_u.clone().cholesky().ok_or(DataModelError::NotPositiveDefinite)?;
        let r_u_factor = chol.l();
        Ok(Self { mu, r_u, sigma2_v, r_u_factor })
    }

    /// Profile with `R_u = sigma2_u · I_M`.
    pub fn isotropic(mu: f64, m: usize, sigma2_u: f64, sigma2_v: f64) -> Result<Self, DataModelError> {
        Self::new(mu, DMatrix::identity(m, m) * sigma2_u, sigma2_v)
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn r_u(&self) -> &DMatrix<f64> {
        &self.r_u
    }

    pub fn sigma2_v(&self) -> f64 {
        self.sigma2_v
    }

    pub fn dim(&self) -> usize {
        self.r_u.nrows()
    }

    /// Mean regressor power `tr(R_u) / M`; equals `sigma2_u` for isotropic profiles.
    pub fn sigma2_u(&self) -> f64 {
        self.r_u.trace() / self.dim() as f64
    }

    pub fn with_mu(&self, mu: f64) -> Result<Self, DataModelError> {
        Self::new(mu, self.r_u.clone(), self.sigma2_v)
    }

    /// Eigenvalues of `R_u` in ascending order.
    pub fn r_u_eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = self.r_u.clone().symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Isotropic profiles with `sigma2_u ~ U[sigma2_u_range]` and noise power
/// uniform in dB over `noise_db_range`.
pub fn sample_profiles(
    n: usize,
    m: usize,
    sigma2_u_range: (f64, f64),
    noise_db_range: (f64, f64),
    mu: f64,
    seed: u64,
) -> Result<Vec<NodeProfile>, DataModelError> {
    let (ulo, uhi) = sigma2_u_range;
    if !(ulo > 0.0 && ulo <= uhi && uhi.is_finite()) {
        return Err(DataModelError::InvalidRange {
            what: "regressor power",
            lo: ulo,
            hi: uhi,
        });
    }
    let (vlo, vhi) = noise_db_range;
    if !(vlo.is_finite() && vhi.is_finite() && vlo <= vhi) {
        return Err(DataModelError::InvalidRange {
            what: "noise power (dB)",
            lo: vlo,
            hi: vhi,
        });
    }
    if m == 0 {
        return Err(DataModelError::ZeroDimension);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let sigma2_u = ulo + (uhi - ulo) * rng.random::<f64>();
            let db = vlo + (vhi - vlo) * rng.random::<f64>();
            NodeProfile::isotropic(mu, m, sigma2_u, db_to_linear(db))
        })
        .collect()
}

/// Table with one `node,sigma2_u,sigma2_v,mu` row per node (1-indexed).
pub fn profiles_table(profiles: &[NodeProfile]) -> String {
    let mut out = String::from("node,sigma2_u,sigma2_v,mu\n");
    for (k, p) in profiles.iter().enumerate() {
        let _ = writeln!(out, "{},{},{},{}", k + 1, p.sigma2_u(), p.sigma2_v(), p.mu());
    }
    out
}

/// One regression observation. `v` is kept so tests can check `d = u·w° + v`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSample {
    pub u: DVector<f64>,
    pub d: f64,
    pub v: f64,
}

impl DataSample {
    pub fn zeros(m: usize) -> Self {
        Self {
            u: DVector::zeros(m),
            d: 0.0,
            v: 0.0,
        }
    }
}

pub fn generate_sample<R: Rng + ?Sized>(profile: &NodeProfile, w_star: &GroundTruth, rng: &mut R) -> DataSample {
    let mut s = DataSample::zeros(profile.dim());
    generate_sample_into(profile, w_star, rng, &mut s);
    s
}

/// In-place version of [`generate_sample`]; `M` standard normals color the
/// regressor, one more scales the noise.
pub fn generate_sample_into<R: Rng + ?Sized>(
    profile: &NodeProfile,
    w_star: &GroundTruth,
    rng: &mut R,
    out: &mut DataSample,
) {
    let m = profile.dim();
    assert_eq!(w_star.dim(), m, "profile and ground truth dimensions differ");
    if out.u.len() != m {
        out.u = DVector::zeros(m);
    }
    for z in out.u.iter_mut() {
        *z = rng.sample(StandardNormal);
    }
    // u = L z in place: row r only reads z[..=r], so sweep rows bottom-up.
    let l = &profile.r_u_factor;
    for r in (0..m).rev() {
        let mut acc = 0.0;
        for c in 0..=r {
            acc += l[(r, c)] * out.u[c];
        }
        out.u[r] = acc;
    }
    out.v = profile.sigma2_v.sqrt() * rng.sample::<f64, _>(StandardNormal);
    out.d = out.u.dot(w_star.vector()) + out.v;
}

/// Per-node data streams of one Monte Carlo replica.
pub struct ReplicaStreams {
    rngs: Vec<ChaCha8Rng>,
    checksum: u64,
}

impl ReplicaStreams {
    pub fn new(data_seed: u64, replica: usize, n_nodes: usize) -> Self {
        let base = ChaCha8Rng::seed_from_u64(replica_seed(data_seed, replica));
        let rngs = (0..n_nodes)
            .map(|k| {
                let mut rng = base.clone();
                rng.set_stream(k as u64);
                rng
            })
            .collect();
        Self {
            rngs,
            checksum: 0xCBF2_9CE4_8422_2325,
        }
    }

    /// Draw the samples of instant `i` for every node into `out`.
    pub fn fill_instant(&mut self, i: usize, profiles: &[NodeProfile], w_star: &GroundTruth, out: &mut [DataSample]) {
        assert_eq!(profiles.len(), self.rngs.len());
        assert_eq!(out.len(), self.rngs.len());
        for ((rng, profile), sample) in self.rngs.iter_mut().zip(profiles).zip(out.iter_mut()) {
            rng.set_word_pos((i as u128) << 32);
            generate_sample_into(profile, w_star, rng, sample);
            for x in sample.u.iter().chain(std::iter::once(&sample.v)) {
                self.checksum = (self.checksum ^ x.to_bits()).wrapping_mul(0x0100_0000_01B3);
            }
        }
    }

    /// FNV-style digest of every `(u, v)` drawn so far.
    pub fn checksum(&self) -> u64 {
        self.checksum
    }
}

/// Standalone generator for node `k` of `replica` at instant `i`, matching
/// what [`ReplicaStreams`] produces.
pub fn substream(data_seed: u64, replica: usize, node: usize, instant: usize) -> impl RngCore {
    let mut rng = ChaCha8Rng::seed_from_u64(replica_seed(data_seed, replica));
    rng.set_stream(node as u64);
    rng.set_word_pos((instant as u128) << 32);
    rng
}
