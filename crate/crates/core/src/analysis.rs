//! Extended network matrices and the closed-form stability conditions and
//! error bounds of EB-ATC.
//!
//! With `A` the combination matrix, `M` the regressor dimension and `N` the
//! number of nodes, the workspace holds the `MN x MN` matrices
//!
//! ```text
//! combination          = A ⊗ I_M
//! combination_offdiag  = (A - diag(a_kk)) ⊗ I_M
//! step_sizes           = diag(mu_k I_M)
//! regressor_cov        = diag(R_u,k)
//! mean_transition      = combinationᵀ (I - step_sizes · regressor_cov)
//! noise_cov            = diag(sigma2_v,k R_u,k)
//! ```
//!
//! and, for `MN <= cap`, the `(MN)² x (MN)²` second-order transition
//! `2 · mean_transitionᵀ ⊗ mean_transitionᵀ`.

use std::f64::consts::FRAC_1_SQRT_2;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::datamodel::NodeProfile;
use crate::diffusion::TriggerPolicy;
use crate::topology::CombinationMatrix;

/// Largest `MN` for which the second-order transition is materialized.
pub const DEFAULT_DIMENSION_CAP: usize = 64;

/// Matrices up to this order get a dense eigensolver; larger ones fall back
/// to power iteration.
pub const DENSE_EIGEN_LIMIT: usize = 1024;

pub const POWER_ITERATION_TOL: f64 = 1e-10;
pub const POWER_ITERATION_MAX: usize = 10_000;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("MN = {mn} exceeds the dimension cap {cap} for the second-order transition")]
    DimensionCapExceeded { mn: usize, cap: usize },
    #[error("unsupported matrix structure: {0}")]
    UnsupportedStructure(String),
    #[error("mean recursion not contractive: block maximum norm {beta} >= 1")]
    UnstableConfiguration { beta: f64 },
    #[error("trigger weighting of node {node} is singular")]
    SingularWeighting { node: usize },
    #[error("second-order transition unstable: spectral radius {rho} >= 1")]
    UnstableF { rho: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("trigger rate {rate} of node {node} outside [0, 1]")]
    InvalidRate { node: usize, rate: f64 },
}

/// Spectral radius of a general real square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    assert!(m.is_square(), "spectral radius of a non-square matrix");
    if m.nrows() == 0 {
        return 0.0;
    }
    if m.nrows() <= DENSE_EIGEN_LIMIT {
        if let Some(schur) = m.clone().try_schur(f64::EPSILON, 100 * m.nrows().max(10)) {
            return schur.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
        }
    }
    power_iteration_radius(m, POWER_ITERATION_TOL, POWER_ITERATION_MAX)
}

/// Power iteration estimate of the spectral radius.
///
/// Stops when successive growth factors agree to `tol` (relative). If the
/// iteration cap is hit (complex or tied dominant eigenvalues), returns the
/// geometric mean growth over the second half of the iterations.
pub fn power_iteration_radius(m: &DMatrix<f64>, tol: f64, max_iter: usize) -> f64 {
    let n = m.nrows();
    let mut x = DVector::from_fn(n, |i, _| 1.0 + 0.1 * ((i as f64) * 0.7).sin());
    x /= x.norm();
    let mut prev = f64::NAN;
    let (mut log_sum, mut count) = (0.0, 0usize);
    for it in 0..max_iter {
        let y = m * &x;
        let growth = y.norm();
        if growth == 0.0 {
            return 0.0;
        }
        x = y / growth;
        if (growth - prev).abs() <= tol * growth {
            return growth;
        }
        prev = growth;
        if it >= max_iter / 2 {
            log_sum += growth.ln();
            count += 1;
        }
    }
    (log_sum / count.max(1) as f64).exp()
}

/// Block-diagonal matrix from square blocks.
pub fn block_diagonal(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let total: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(total, total);
    let mut at = 0;
    for b in blocks {
        let s = b.nrows();
        out.view_mut((at, at), (s, s)).copy_from(b);
        at += s;
    }
    out
}

/// Block maximum norm of a block-diagonal matrix with symmetric `block x block`
/// diagonal blocks: the largest spectral radius among the blocks.
pub fn block_max_norm(mat: &DMatrix<f64>, block: usize) -> Result<f64, AnalysisError> {
    let n = mat.nrows();
    if block == 0 || !mat.is_square() || !n.is_multiple_of(block) {
        return Err(AnalysisError::UnsupportedStructure(format!(
            "{}x{} matrix is not made of {block}x{block} blocks",
            mat.nrows(),
            mat.ncols()
        )));
    }
    let scale = mat.amax().max(1.0);
    let mut norm: f64 = 0.0;
    for r in 0..n {
        for c in 0..n {
            if r / block != c / block && mat[(r, c)] != 0.0 {
                return Err(AnalysisError::UnsupportedStructure(format!(
                    "nonzero entry ({r}, {c}) outside the diagonal blocks"
                )));
            }
        }
    }
    for k in 0..n / block {
        let b = mat.view((k * block, k * block), (block, block)).clone_owned();
        if (&b - b.transpose()).amax() > 1e-12 * scale {
            return Err(AnalysisError::UnsupportedStructure(format!("diagonal block {k} is not symmetric")));
        }
        let rho = b.symmetric_eigenvalues().iter().map(|x| x.abs()).fold(0.0, f64::max);
        norm = norm.max(rho);
    }
    Ok(norm)
}

/// Column-stacking vectorization.
pub fn vectorize(m: &DMatrix<f64>) -> DVector<f64> {
    let (r, c) = m.shape();
    let mut v = DVector::zeros(r * c);
    for j in 0..c {
        for i in 0..r {
            v[j * r + i] = m[(i, j)];
        }
    }
    v
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorkspaceOptions {
    pub materialize_second_order: bool,
    pub dimension_cap: usize,
}

impl Default for WorkspaceOptions {
    fn default() -> Self {
        Self {
            materialize_second_order: true,
            dimension_cap: DEFAULT_DIMENSION_CAP,
        }
    }
}

/// Extended matrices of the network error recursion.
#[derive(Debug, Clone)]
pub struct AnalysisWorkspace {
    n: usize,
    m: usize,
    dimension_cap: usize,
    pub combination: DMatrix<f64>,
    pub combination_offdiag: DMatrix<f64>,
    pub step_sizes: DMatrix<f64>,
    pub regressor_cov: DMatrix<f64>,
    pub mean_transition: DMatrix<f64>,
    pub noise_cov: DMatrix<f64>,
    second_order: Option<DMatrix<f64>>,
}

impl AnalysisWorkspace {
    pub fn n_nodes(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn mn(&self) -> usize {
        self.n * self.m
    }

    /// `2 · mean_transitionᵀ ⊗ mean_transitionᵀ`.
    pub fn second_order(&self) -> Result<&DMatrix<f64>, AnalysisError> {
        self.second_order.as_ref().ok_or(AnalysisError::DimensionCapExceeded {
            mn: self.mn(),
            cap: self.dimension_cap,
        })
    }

    /// `I_MN - step_sizes · regressor_cov`, block diagonal.
    pub fn adaptation_transition(&self) -> DMatrix<f64> {
        DMatrix::identity(self.mn(), self.mn()) - &self.step_sizes * &self.regressor_cov
    }
}

/// Build the extended matrices. With `MN` above the cap the second-order
/// transition is skipped; every other matrix is still built and
/// [`AnalysisWorkspace::second_order`] reports the cap.
pub fn build_workspace(
    a: &CombinationMatrix,
    profiles: &[NodeProfile],
    options: WorkspaceOptions,
) -> Result<AnalysisWorkspace, AnalysisError> {
    let n = a.n_nodes();
    if profiles.len() != n {
        return Err(AnalysisError::DimensionMismatch(format!(
            "{} profiles for {n} nodes",
            profiles.len()
        )));
    }
    let m = profiles[0].dim();
    if profiles.iter().any(|p| p.dim() != m) {
        return Err(AnalysisError::DimensionMismatch("profiles disagree on M".into()));
    }
    let eye_m = DMatrix::<f64>::identity(m, m);
    let combination = a.matrix().kronecker(&eye_m);
    let mut offdiag = a.matrix().clone();
    offdiag.fill_diagonal(0.0);
    let combination_offdiag = offdiag.kronecker(&eye_m);
    let step_sizes = block_diagonal(&profiles.iter().map(|p| &eye_m * p.mu()).collect::<Vec<_>>());
    let regressor_cov = block_diagonal(&profiles.iter().map(|p| p.r_u().clone()).collect::<Vec<_>>());
    let noise_cov = block_diagonal(&profiles.iter().map(|p| p.r_u() * p.sigma2_v()).collect::<Vec<_>>());
    let mn = n * m;
    let mean_transition = combination.transpose() * (DMatrix::identity(mn, mn) - &step_sizes * &regressor_cov);
    let second_order = (options.materialize_second_order && mn <= options.dimension_cap).then(|| {
        let bt = mean_transition.transpose();
        bt.kronecker(&bt) * 2.0
    });
    Ok(AnalysisWorkspace {
        n,
        m,
        dimension_cap: options.dimension_cap,
        combination,
        combination_offdiag,
        step_sizes,
        regressor_cov,
        mean_transition,
        noise_cov,
        second_order,
    })
}

/// Mean-stability step-size limit `2 / lambda_max(R_u)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStepBound {
    pub bound: f64,
    pub satisfied: bool,
}

pub fn mean_stability_condition(profile: &NodeProfile) -> MeanStepBound {
    let lmax = *profile.r_u_eigenvalues().last().expect("M >= 1");
    let bound = 2.0 / lmax;
    MeanStepBound {
        bound,
        satisfied: profile.mu() < bound,
    }
}

/// Step-size window `((1 - √2/2)/lambda_min, (1 + √2/2)/lambda_max)` that
/// keeps the MSD bound finite, and whether the eigenvalue spread admits it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSizeInterval {
    pub lo: f64,
    pub hi: f64,
    pub assumption3: bool,
}

impl StepSizeInterval {
    pub fn is_empty(&self) -> bool {
        self.lo >= self.hi
    }

    pub fn contains(&self, mu: f64) -> bool {
        self.lo < mu && mu < self.hi
    }
}

/// `(2 + √2) / (2 - √2)`, the admissible eigenvalue spread.
pub fn max_eigen_spread() -> f64 {
    let s = std::f64::consts::SQRT_2;
    (2.0 + s) / (2.0 - s)
}

pub fn msd_step_size_interval(profile: &NodeProfile) -> StepSizeInterval {
    let ev = profile.r_u_eigenvalues();
    let (lmin, lmax) = (ev[0], ev[ev.len() - 1]);
    StepSizeInterval {
        lo: (1.0 - FRAC_1_SQRT_2) / lmin,
        hi: (1.0 + FRAC_1_SQRT_2) / lmax,
        assumption3: lmax < max_eigen_spread() * lmin,
    }
}

/// Per-node `sqrt(delta_k / lambda_min(Y_k))`.
pub fn lemma1_bounds(policies: &[TriggerPolicy]) -> Result<Vec<f64>, AnalysisError> {
    policies
        .iter()
        .enumerate()
        .map(|(k, p)| {
            if p.lambda_min() <= 0.0 {
                Err(AnalysisError::SingularWeighting { node: k })
            } else {
                Ok((p.delta_sup() / p.lambda_min()).sqrt())
            }
        })
        .collect()
}

/// `Σ_k sqrt(delta_k / lambda_min(Y_k))`.
pub fn delta_total(policies: &[TriggerPolicy]) -> Result<f64, AnalysisError> {
    Ok(lemma1_bounds(policies)?.iter().sum())
}

/// `max_k (1 - a_kk)`.
pub fn combination_alpha(a: &CombinationMatrix) -> f64 {
    (0..a.n_nodes()).map(|k| 1.0 - a.get(k, k)).fold(0.0, f64::max)
}

/// Block maximum norm of `I - M R_u`.
pub fn adaptation_beta(profiles: &[NodeProfile]) -> Result<f64, AnalysisError> {
    let m = profiles.first().map_or(1, NodeProfile::dim);
    let blocks: Vec<_> = profiles
        .iter()
        .map(|p| DMatrix::identity(m, m) - p.r_u() * p.mu())
        .collect();
    block_max_norm(&block_diagonal(&blocks), m)
}

/// Steady-state bound `alpha / (1 - beta) · max_k sqrt(delta_k / lambda_min(Y_k))`
/// on the block maximum norm of the network mean error.
pub fn mean_error_bound(
    a: &CombinationMatrix,
    profiles: &[NodeProfile],
    policies: &[TriggerPolicy],
) -> Result<f64, AnalysisError> {
    if profiles.len() != a.n_nodes() || policies.len() != a.n_nodes() {
        return Err(AnalysisError::DimensionMismatch(format!(
            "{} profiles and {} policies for {} nodes",
            profiles.len(),
            policies.len(),
            a.n_nodes()
        )));
    }
    let beta = adaptation_beta(profiles)?;
    if beta >= 1.0 {
        return Err(AnalysisError::UnstableConfiguration { beta });
    }
    let worst = lemma1_bounds(policies)?.into_iter().fold(0.0, f64::max);
    Ok(combination_alpha(a) / (1.0 - beta) * worst)
}

fn check_cap(ws: &AnalysisWorkspace) -> Result<(), AnalysisError> {
    ws.second_order().map(|_| ())
}

/// `f1 = vec(𝓐ᵀ 𝓜 𝓢 𝓜 𝓐)` and `f2 = 2Δ · vec(𝓒ᵀ 𝓒)`.
pub fn msd_bound_vectors(ws: &AnalysisWorkspace, delta: f64) -> Result<(DVector<f64>, DVector<f64>), AnalysisError> {
    check_cap(ws)?;
    let msm = &ws.step_sizes * &ws.noise_cov * &ws.step_sizes;
    let f1 = vectorize(&(ws.combination.transpose() * msm * &ws.combination));
    let f2 = vectorize(&(ws.combination_offdiag.transpose() * &ws.combination_offdiag)) * (2.0 * delta);
    Ok((f1, f2))
}

/// `diag(rate_k I_M) - I_MN` from per-node trigger rates.
pub fn empirical_trigger_matrix(rates: &[f64], m: usize) -> Result<DMatrix<f64>, AnalysisError> {
    let mut g = DMatrix::zeros(rates.len() * m, rates.len() * m);
    for (k, &r) in rates.iter().enumerate() {
        if !(0.0..=1.0).contains(&r) {
            return Err(AnalysisError::InvalidRate { node: k, rate: r });
        }
        for j in 0..m {
            g[(k * m + j, k * m + j)] = r - 1.0;
        }
    }
    Ok(g)
}

/// `f3 = 2 vec(𝓒ᵀ 𝓖 𝓜 𝓢 𝓜 𝓐)`.
pub fn trigger_vector(ws: &AnalysisWorkspace, trigger_matrix: &DMatrix<f64>) -> Result<DVector<f64>, AnalysisError> {
    check_cap(ws)?;
    if trigger_matrix.shape() != (ws.mn(), ws.mn()) {
        return Err(AnalysisError::DimensionMismatch("trigger matrix must be MN x MN".into()));
    }
    let inner = trigger_matrix * &ws.step_sizes * &ws.noise_cov * &ws.step_sizes * &ws.combination;
    Ok(vectorize(&(ws.combination_offdiag.transpose() * inner)) * 2.0)
}

/// Steady-state MSD bound. The O(mu_max²) remainder is not included.
#[derive(Debug, Clone, PartialEq)]
pub struct MsdBound {
    pub value: f64,
    pub rho_second_order: f64,
    /// `(I - 𝓕)⁻¹ vec(I_MN)`, shared by every term of the bound.
    pub weights: DVector<f64>,
    pub remainder_dropped: bool,
}

fn solve_weights(ws: &AnalysisWorkspace) -> Result<(DVector<f64>, f64), AnalysisError> {
    let f = ws.second_order()?;
    let rho = spectral_radius(f);
    if rho >= 1.0 {
        return Err(AnalysisError::UnstableF { rho });
    }
    let n2 = f.nrows();
    let sigma = vectorize(&DMatrix::identity(ws.mn(), ws.mn()));
    let lhs = DMatrix::identity(n2, n2) - f;
    let z = lhs
        .lu()
        .solve(&sigma)
        .ok_or(AnalysisError::UnstableF { rho })?;
    Ok((z, rho))
}

/// `(1/N) (f1 + f2 + f3_ss)ᵀ (I - 𝓕)⁻¹ vec(I_MN)` with `f3_ss` built from a
/// constant steady-state trigger matrix.
pub fn msd_upper_bound(
    ws: &AnalysisWorkspace,
    f1: &DVector<f64>,
    f2: &DVector<f64>,
    trigger_matrix: &DMatrix<f64>,
) -> Result<MsdBound, AnalysisError> {
    let f3 = trigger_vector(ws, trigger_matrix)?;
    let (z, rho) = solve_weights(ws)?;
    let total = f1 + f2 + f3;
    Ok(MsdBound {
        value: total.dot(&z) / ws.n_nodes() as f64,
        rho_second_order: rho,
        weights: z,
        remainder_dropped: true,
    })
}

/// `(1/N) f1ᵀ (I - 𝓕)⁻¹ vec(I_MN)`: the bound without any event-triggering terms.
pub fn classical_msd_term(ws: &AnalysisWorkspace, f1: &DVector<f64>) -> Result<f64, AnalysisError> {
    let (z, _) = solve_weights(ws)?;
    Ok(f1.dot(&z) / ws.n_nodes() as f64)
}

/// Checks `Tr(AB) = vec(Aᵀ)ᵀ vec(B)` on a random `dim x dim` pair to 1e-10.
pub fn vec_trace_identity_check(dim: usize, seed: u64) -> bool {
    if dim == 0 || dim > 32 {
        return false;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
    let b = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
    vec_trace_identity_holds(&a, &b, 1e-10)
}

pub fn vec_trace_identity_holds(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
    let trace = (a * b).trace();
    let via_vec = vectorize(&a.transpose()).dot(&vectorize(b));
    (trace - via_vec).abs() <= tol
}

/// `xᵀ Y x >= lambda_min(Y) ‖x‖² - slack` for symmetric PSD `Y`.
pub fn rayleigh_lower_bound_holds(y: &DMatrix<f64>, x: &DVector<f64>, slack: f64) -> bool {
    let lmin = y.clone().symmetric_eigenvalues().min();
    let weighted = x.dot(&(y * x));
    weighted >= lmin * x.norm_squared() - slack
}

/// Per-node step-size diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeStability {
    pub mu: f64,
    pub mean: MeanStepBound,
    pub msd_interval: StepSizeInterval,
}

impl NodeStability {
    /// Margin `bound - mu` of the mean-stability condition.
    pub fn mean_margin(&self) -> f64 {
        self.mean.bound - self.mu
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub nodes: Vec<NodeStability>,
    pub rho_mean: f64,
    /// `None` when `MN` exceeds the dimension cap.
    pub rho_second_order: Option<f64>,
    pub beta: f64,
    pub alpha: f64,
}

pub fn stability_report(
    a: &CombinationMatrix,
    profiles: &[NodeProfile],
    ws: &AnalysisWorkspace,
) -> Result<StabilityReport, AnalysisError> {
    let nodes = profiles
        .iter()
        .map(|p| NodeStability {
            mu: p.mu(),
            mean: mean_stability_condition(p),
            msd_interval: msd_step_size_interval(p),
        })
        .collect();
    Ok(StabilityReport {
        nodes,
        rho_mean: spectral_radius(&ws.mean_transition),
        rho_second_order: ws.second_order().ok().map(spectral_radius),
        beta: adaptation_beta(profiles)?,
        alpha: combination_alpha(a),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "not_evaluated".to_string(), |x| x.to_string())
}

impl StabilityReport {
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "rho_mean_transition = {}", self.rho_mean);
        let _ = writeln!(s, "rho_second_order = {}", opt(self.rho_second_order));
        let _ = writeln!(s, "beta = {}", self.beta);
        let _ = writeln!(s, "alpha = {}", self.alpha);
        let _ = writeln!(s, "all_mean_stable = {}", self.nodes.iter().all(|n| n.mean.satisfied));
        let _ = writeln!(s, "all_assumption3 = {}", self.nodes.iter().all(|n| n.msd_interval.assumption3));
        for (k, n) in self.nodes.iter().enumerate() {
            let id = k + 1;
            let _ = writeln!(s, "node.{id}.mu = {}", n.mu);
            let _ = writeln!(s, "node.{id}.mean_step_bound = {}", n.mean.bound);
            let _ = writeln!(s, "node.{id}.mean_margin = {}", n.mean_margin());
            let _ = writeln!(s, "node.{id}.mean_stable = {}", n.mean.satisfied);
            let _ = writeln!(s, "node.{id}.msd_step_lo = {}", n.msd_interval.lo);
            let _ = writeln!(s, "node.{id}.msd_step_hi = {}", n.msd_interval.hi);
            let _ = writeln!(s, "node.{id}.msd_interval_empty = {}", n.msd_interval.is_empty());
            let _ = writeln!(s, "node.{id}.assumption3 = {}", n.msd_interval.assumption3);
        }
        s
    }

    pub const CSV_HEADER: &'static str =
        "node,mu,mean_step_bound,mean_stable,msd_step_lo,msd_step_hi,assumption3";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for (k, n) in self.nodes.iter().enumerate() {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                k + 1,
                n.mu,
                n.mean.bound,
                n.mean.satisfied,
                n.msd_interval.lo,
                n.msd_interval.hi,
                n.msd_interval.assumption3
            );
        }
        s
    }
}

/// Where the trigger term of the MSD bound came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriggerTerm {
    /// Measured per-node trigger rates.
    Empirical,
    /// No rates available; the trigger term is left out.
    Omitted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub lemma1_bounds: Vec<f64>,
    /// Infinite when the mean recursion is not contractive.
    pub mean_error_bound: f64,
    pub delta_total: f64,
    /// `None` when not evaluated (dimension cap); infinite when the
    /// second-order transition is unstable.
    pub msd_upper_bound: Option<f64>,
    pub trigger_term: TriggerTerm,
    pub remainder_dropped: bool,
}

/// Evaluate every bound. `trigger_rates` feeds the trigger term of the MSD
/// bound; with `None` that term is omitted.
pub fn bound_report(
    a: &CombinationMatrix,
    profiles: &[NodeProfile],
    policies: &[TriggerPolicy],
    ws: &AnalysisWorkspace,
    trigger_rates: Option<&[f64]>,
) -> Result<BoundReport, AnalysisError> {
    let lemma1 = lemma1_bounds(policies)?;
    let mean_bound = match mean_error_bound(a, profiles, policies) {
        Ok(v) => v,
        Err(AnalysisError::UnstableConfiguration { .. }) => f64::INFINITY,
        Err(e) => return Err(e),
    };
    let delta: f64 = lemma1.iter().sum();
    let msd = match msd_bound_vectors(ws, delta) {
        Ok((f1, f2)) => {
            let g = match trigger_rates {
                Some(r) => empirical_trigger_matrix(r, ws.dim())?,
                None => DMatrix::zeros(ws.mn(), ws.mn()),
            };
            match msd_upper_bound(ws, &f1, &f2, &g) {
                Ok(b) => Some(b.value),
                Err(AnalysisError::UnstableF { .. }) => Some(f64::INFINITY),
                Err(e) => return Err(e),
            }
        }
        Err(AnalysisError::DimensionCapExceeded { .. }) => None,
        Err(e) => return Err(e),
    };
    Ok(BoundReport {
        lemma1_bounds: lemma1,
        mean_error_bound: mean_bound,
        delta_total: delta,
        msd_upper_bound: msd,
        trigger_term: if trigger_rates.is_some() {
            TriggerTerm::Empirical
        } else {
            TriggerTerm::Omitted
        },
        remainder_dropped: true,
    })
}

impl BoundReport {
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mean_error_bound = {}", self.mean_error_bound);
        let _ = writeln!(s, "delta_total = {}", self.delta_total);
        let _ = writeln!(s, "msd_upper_bound = {}", opt(self.msd_upper_bound));
        if let Some(v) = self.msd_upper_bound.filter(|v| *v > 0.0) {
            let _ = writeln!(s, "msd_upper_bound_db = {}", 10.0 * v.log10());
        }
        let _ = writeln!(
            s,
            "msd_trigger_term = {}",
            match self.trigger_term {
                TriggerTerm::Empirical => "empirical",
                TriggerTerm::Omitted => "omitted",
            }
        );
        let _ = writeln!(s, "msd_remainder_dropped = {}", self.remainder_dropped);
        for (k, b) in self.lemma1_bounds.iter().enumerate() {
            let _ = writeln!(s, "node.{}.gap_bound = {}", k + 1, b);
        }
        s
    }

    pub const CSV_HEADER: &'static str = "mean_error_bound,delta_total,msd_upper_bound";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{}",
            self.mean_error_bound,
            self.delta_total,
            opt(self.msd_upper_bound)
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{metropolis_weights, path_topology, random_geometric_topology};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn iso(mu: f64, m: usize, s2u: f64) -> NodeProfile {
        NodeProfile::isotropic(mu, m, s2u, 0.01).unwrap()
    }

    fn diag(mu: f64, d: &[f64]) -> NodeProfile {
        NodeProfile::new(mu, DMatrix::from_diagonal(&DVector::from_column_slice(d)), 0.01).unwrap()
    }

    #[test]
    fn single_node_workspace() {
        let a = CombinationMatrix::identity(1);
        let p = diag(0.1, &[1.0, 3.0]);
        let ws = build_workspace(&a, &[p], WorkspaceOptions::default()).unwrap();
        assert_eq!(ws.combination_offdiag, DMatrix::zeros(2, 2));
        let expect = DMatrix::from_diagonal(&DVector::from_column_slice(&[0.9, 0.7]));
        assert!((&ws.mean_transition - expect).amax() < 1e-15);
    }

    #[test]
    fn two_node_mean_transition() {
        let a = CombinationMatrix::from_matrix(DMatrix::from_element(2, 2, 0.5)).unwrap();
        let ps = vec![iso(0.1, 1, 1.0), iso(0.1, 1, 1.0)];
        let ws = build_workspace(&a, &ps, WorkspaceOptions::default()).unwrap();
        let expect = a.matrix().transpose() * 0.9;
        assert!((&ws.mean_transition - expect).amax() < 1e-15);
    }

    #[test]
    fn second_order_respects_cap() {
        let topo = path_topology(9).unwrap();
        let a = metropolis_weights(&topo);
        let ps: Vec<_> = (0..9).map(|_| iso(0.1, 8, 1.0)).collect();
        let ws = build_workspace(&a, &ps, WorkspaceOptions::default()).unwrap();
        assert_eq!(ws.mn(), 72);
        assert_eq!(
            ws.second_order().unwrap_err(),
            AnalysisError::DimensionCapExceeded { mn: 72, cap: 64 }
        );
        assert_eq!(ws.mean_transition.nrows(), 72);
        assert!(matches!(
            msd_bound_vectors(&ws, 0.1),
            Err(AnalysisError::DimensionCapExceeded { .. })
        ));
    }

    #[test]
    fn kronecker_spectral_identity() {
        let topo = random_geometric_topology(4, 0.7, 2).unwrap();
        let a = metropolis_weights(&topo);
        let ps: Vec<_> = (0..4).map(|k| diag(0.2, &[1.0 + k as f64 * 0.2, 1.5])).collect();
        let ws = build_workspace(&a, &ps, WorkspaceOptions::default()).unwrap();
        let rb = spectral_radius(&ws.mean_transition);
        let rf = spectral_radius(ws.second_order().unwrap());
        assert_abs_diff_eq!(rf, 2.0 * rb * rb, epsilon = 1e-8);
    }

    #[test]
    fn power_iteration_agrees_with_dense() {
        let m = DMatrix::from_row_slice(3, 3, &[0.5, 0.2, 0.0, 0.1, 0.3, 0.4, 0.0, 0.2, 0.6]);
        let dense = spectral_radius(&m);
        let power = power_iteration_radius(&m, 1e-13, 10_000);
        assert_abs_diff_eq!(dense, power, epsilon = 1e-9);
        // Rotation: complex pair, the cap path.
        let rot = DMatrix::from_row_slice(2, 2, &[0.0, -0.8, 0.8, 0.0]);
        assert_abs_diff_eq!(power_iteration_radius(&rot, 1e-10, 2_000), 0.8, epsilon = 1e-9);
        assert_abs_diff_eq!(spectral_radius(&rot), 0.8, epsilon = 1e-12);
    }

    #[test]
    fn block_max_norm_cases() {
        let blocks = vec![DMatrix::identity(2, 2) * 0.9; 3];
        assert_abs_diff_eq!(block_max_norm(&block_diagonal(&blocks), 2).unwrap(), 0.9, epsilon = 1e-15);

        let two = block_diagonal(&[
            DMatrix::from_diagonal(&DVector::from_column_slice(&[0.5, 0.1])),
            DMatrix::from_diagonal(&DVector::from_column_slice(&[-0.95, 0.2])),
        ]);
        assert_abs_diff_eq!(block_max_norm(&two, 2).unwrap(), 0.95, epsilon = 1e-15);

        let r = DMatrix::from_diagonal(&DVector::from_column_slice(&[1.0, 3.0]));
        let b = DMatrix::identity(2, 2) - r * 0.5;
        assert_abs_diff_eq!(block_max_norm(&b, 2).unwrap(), 0.5, epsilon = 1e-15);

        let mut off = block_diagonal(&blocks);
        off[(0, 3)] = 0.1;
        assert!(matches!(block_max_norm(&off, 2), Err(AnalysisError::UnsupportedStructure(_))));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 1.0]);
        assert!(matches!(block_max_norm(&asym, 2), Err(AnalysisError::UnsupportedStructure(_))));
        assert!(matches!(block_max_norm(&asym, 3), Err(AnalysisError::UnsupportedStructure(_))));
    }

    #[test]
    fn mean_stability_cases() {
        assert_eq!(mean_stability_condition(&iso(0.1, 3, 1.0)).bound, 2.0);
        assert_eq!(mean_stability_condition(&iso(0.1, 3, 2.0)).bound, 1.0);
        let c = mean_stability_condition(&diag(0.6, &[1.0, 4.0]));
        assert_eq!(c.bound, 0.5);
        assert!(!c.satisfied);
    }

    #[test]
    fn msd_interval_cases() {
        let iv = msd_step_size_interval(&iso(0.1, 2, 1.0));
        assert_abs_diff_eq!(iv.lo, (2.0 - 2f64.sqrt()) / 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(iv.hi, (2.0 + 2f64.sqrt()) / 2.0, epsilon = 1e-15);
        assert!(iv.assumption3 && !iv.is_empty());
        assert!(iv.contains(0.35));
        for s in [0.3, 1.0, 1.7, 25.0] {
            assert!(msd_step_size_interval(&iso(0.01, 3, s)).assumption3);
        }
        let bad = msd_step_size_interval(&diag(0.1, &[1.0, 6.0]));
        assert!(!bad.assumption3);
        assert!(bad.is_empty());
        assert!(6.0 > max_eigen_spread());
        assert_abs_diff_eq!(max_eigen_spread(), 5.828_427_124_746_19, epsilon = 1e-12);
    }

    #[test]
    fn delta_total_cases() {
        let zero: Vec<_> = (0..3).map(|_| TriggerPolicy::constant(2, 0.0).unwrap()).collect();
        assert_eq!(delta_total(&zero).unwrap(), 0.0);
        let three: Vec<_> = (0..3).map(|_| TriggerPolicy::constant(2, 0.04).unwrap()).collect();
        assert_abs_diff_eq!(delta_total(&three).unwrap(), 0.6, epsilon = 1e-15);
        let mixed = [
            TriggerPolicy::constant(2, 0.01).unwrap(),
            TriggerPolicy::constant(2, 0.04).unwrap(),
        ];
        assert_abs_diff_eq!(delta_total(&mixed).unwrap(), 0.3, epsilon = 1e-15);
        let singular = TriggerPolicy::new(
            DMatrix::from_diagonal(&DVector::from_column_slice(&[1.0, 0.0])),
            crate::diffusion::ThresholdSchedule::Constant(0.1),
        )
        .unwrap();
        assert_eq!(
            delta_total(&[singular]),
            Err(AnalysisError::SingularWeighting { node: 0 })
        );
    }

    #[test]
    fn mean_error_bound_cases() {
        let path = metropolis_weights(&path_topology(3).unwrap());
        let ps: Vec<_> = (0..3).map(|_| iso(0.1, 2, 1.0)).collect();
        let pol: Vec<_> = (0..3).map(|_| TriggerPolicy::constant(2, 0.04).unwrap()).collect();
        assert_abs_diff_eq!(mean_error_bound(&path, &ps, &pol).unwrap(), 4.0 / 3.0, epsilon = 1e-12);

        let zero: Vec<_> = (0..3).map(|_| TriggerPolicy::constant(2, 0.0).unwrap()).collect();
        assert_eq!(mean_error_bound(&path, &ps, &zero).unwrap(), 0.0);

        let single = CombinationMatrix::identity(1);
        assert_eq!(
            mean_error_bound(&single, &ps[..1], &pol[..1]).unwrap(),
            0.0
        );

        let fast: Vec<_> = (0..3).map(|_| iso(2.5, 2, 1.0)).collect();
        assert!(matches!(
            mean_error_bound(&path, &fast, &pol),
            Err(AnalysisError::UnstableConfiguration { .. })
        ));
    }

    /// Element-by-element evaluation of `vec(𝓐ᵀ𝓜𝓢𝓜𝓐)` for `M = 1`.
    #[test]
    fn f1_matches_scripted_evaluation() {
        let a = CombinationMatrix::from_matrix(DMatrix::from_row_slice(2, 2, &[0.7, 0.4, 0.3, 0.6])).unwrap();
        let ps = vec![
            NodeProfile::isotropic(0.1, 1, 1.3, 0.02).unwrap(),
            NodeProfile::isotropic(0.2, 1, 1.7, 0.05).unwrap(),
        ];
        let ws = build_workspace(&a, &ps, WorkspaceOptions::default()).unwrap();
        let (f1, f2) = msd_bound_vectors(&ws, 0.0).unwrap();
        let mu = [0.1, 0.2];
        let s = [0.02 * 1.3, 0.05 * 1.7];
        let am = a.matrix();
        let mut expect = [0.0; 4];
        for col in 0..2 {
            for row in 0..2 {
                let mut acc = 0.0;
                for j in 0..2 {
                    // (𝓐ᵀ)_{row,j} = a_{j,row}; inner diagonal term mu_j² s_j; 𝓐_{j,col}.
                    acc += am[(j, row)] * mu[j] * s[j] * mu[j] * am[(j, col)];
                }
                expect[col * 2 + row] = acc;
            }
        }
        for i in 0..4 {
            assert_abs_diff_eq!(f1[i], expect[i], epsilon = 1e-16);
        }
        assert_eq!(f2, DVector::zeros(4));
    }

    #[test]
    fn f2_vanishes_without_neighbors() {
        let ws = build_workspace(&CombinationMatrix::identity(1), &[iso(0.1, 3, 1.0)], WorkspaceOptions::default())
            .unwrap();
        let (_, f2) = msd_bound_vectors(&ws, 5.0).unwrap();
        assert_eq!(f2, DVector::zeros(9));
    }

    #[test]
    fn trigger_matrix_cases() {
        assert_eq!(empirical_trigger_matrix(&[1.0, 1.0], 2).unwrap(), DMatrix::zeros(4, 4));
        assert_eq!(empirical_trigger_matrix(&[0.0; 3], 2).unwrap(), -DMatrix::identity(6, 6));
        let g = empirical_trigger_matrix(&[0.2, 0.5], 1).unwrap();
        assert_abs_diff_eq!(g[(0, 0)], -0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(g[(1, 1)], -0.5, epsilon = 1e-15);
        assert_eq!(g[(0, 1)], 0.0);
        assert!(matches!(
            empirical_trigger_matrix(&[1.2], 1),
            Err(AnalysisError::InvalidRate { node: 0, .. })
        ));
    }

    #[test]
    fn msd_bound_reduces_to_classical_form() {
        let a = metropolis_weights(&path_topology(3).unwrap());
        let ps: Vec<_> = (0..3).map(|_| iso(0.35, 2, 1.0)).collect();
        let ws = build_workspace(&a, &ps, WorkspaceOptions::default()).unwrap();
        let (f1, f2) = msd_bound_vectors(&ws, 0.0).unwrap();
        let g = empirical_trigger_matrix(&[1.0; 3], 2).unwrap();
        let bound = msd_upper_bound(&ws, &f1, &f2, &g).unwrap();
        assert_eq!(bound.value, classical_msd_term(&ws, &f1).unwrap());
        assert!(bound.remainder_dropped);

        let single = build_workspace(&CombinationMatrix::identity(1), &ps[..1], WorkspaceOptions::default()).unwrap();
        let (f1, f2) = msd_bound_vectors(&single, 0.3).unwrap();
        let g = empirical_trigger_matrix(&[0.4], 2).unwrap();
        assert_eq!(
            msd_upper_bound(&single, &f1, &f2, &g).unwrap().value,
            classical_msd_term(&single, &f1).unwrap()
        );
    }

    #[test]
    fn msd_bound_rejects_unstable_second_order() {
        let a = metropolis_weights(&path_topology(3).unwrap());
        let ps: Vec<_> = (0..3).map(|_| iso(0.05, 2, 1.0)).collect();
        let ws = build_workspace(&a, &ps, WorkspaceOptions::default()).unwrap();
        let (f1, f2) = msd_bound_vectors(&ws, 0.1).unwrap();
        let g = DMatrix::zeros(6, 6);
        assert!(matches!(
            msd_upper_bound(&ws, &f1, &f2, &g),
            Err(AnalysisError::UnstableF { .. })
        ));
    }

    #[test]
    fn vec_trace_cases() {
        let eye = DMatrix::<f64>::identity(2, 2);
        assert_eq!((&eye * &eye).trace(), 2.0);
        assert!(vec_trace_identity_holds(&eye, &eye, 0.0));
        assert!(vec_trace_identity_check(3, 1));
        let e = DVector::from_column_slice(&[1.0, -2.0, 0.5]);
        let b = DMatrix::from_fn(3, 3, |i, j| (i * 3 + j) as f64 * 0.1);
        let rank1 = &e * e.transpose();
        let expect = e.dot(&(&b * &e));
        assert_abs_diff_eq!((&rank1 * &b).trace(), expect, epsilon = 1e-12);
        assert!(vec_trace_identity_holds(&rank1, &b, 1e-12));
        assert!(!vec_trace_identity_check(33, 0));
    }

    #[test]
    fn reports_serialize() {
        let a = metropolis_weights(&path_topology(3).unwrap());
        let ps = vec![iso(0.35, 2, 1.0), diag(0.1, &[1.0, 6.0]), iso(0.35, 2, 1.0)];
        let ws = build_workspace(&a, &ps, WorkspaceOptions::default()).unwrap();
        let st = stability_report(&a, &ps, &ws).unwrap();
        let kv = st.to_key_value();
        assert!(kv.contains("node.2.assumption3 = false"));
        assert!(kv.contains("node.2.msd_interval_empty = true"));
        assert!(kv.contains("node.1.assumption3 = true"));
        assert_eq!(st.to_csv().lines().count(), 4);
        let pol: Vec<_> = (0..3).map(|_| TriggerPolicy::constant(2, 0.01).unwrap()).collect();
        let br = bound_report(&a, &ps, &pol, &ws, None).unwrap();
        assert_eq!(br.trigger_term, TriggerTerm::Omitted);
        assert!(br.to_key_value().contains("msd_trigger_term = omitted"));
        assert_eq!(br.to_csv_row().split(',').count(), 3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn mean_transition_radius_below_beta(
            n in 1usize..6, m in 1usize..4, seed in any::<u64>(), mu in 0.01f64..0.9,
        ) {
            let topo = random_geometric_topology(n, 0.6, seed).unwrap();
            let a = metropolis_weights(&topo);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ps: Vec<_> = (0..n).map(|_| {
                let q = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
                let r = &q * q.transpose() + DMatrix::identity(m, m) * 0.5;
                NodeProfile::new(mu, r, 0.01).unwrap()
            }).collect();
            let ws = build_workspace(&a, &ps, WorkspaceOptions::default()).unwrap();
            let rb = spectral_radius(&ws.mean_transition);
            let beta = adaptation_beta(&ps).unwrap();
            prop_assert!(rb <= beta + 1e-8);
            let rf = spectral_radius(ws.second_order().unwrap());
            prop_assert!((rf - 2.0 * rb * rb).abs() <= 1e-8 * rf.max(1.0));
            if rb < FRAC_1_SQRT_2 {
                prop_assert!(rf < 1.0);
            }
        }

        #[test]
        fn mean_error_bound_monotone_in_delta(d1 in 0.0f64..0.5, d2 in 0.0f64..0.5, k in 0usize..3) {
            let a = metropolis_weights(&path_topology(3).unwrap());
            let ps: Vec<_> = (0..3).map(|j| iso(0.1, 2, 1.0 + j as f64 * 0.3)).collect();
            let (lo, hi) = (d1.min(d2), d1.max(d2));
            let mk = |d: f64| -> Vec<TriggerPolicy> {
                (0..3).map(|j| TriggerPolicy::constant(2, if j == k { d } else { 0.05 }).unwrap()).collect()
            };
            let b_lo = mean_error_bound(&a, &ps, &mk(lo)).unwrap();
            let b_hi = mean_error_bound(&a, &ps, &mk(hi)).unwrap();
            prop_assert!(b_lo <= b_hi);
        }

        #[test]
        fn rayleigh_bound(seed in any::<u64>(), m in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
            let y = &q * q.transpose();
            let x = DVector::from_fn(m, |_, _| rng.random_range(-2.0..2.0));
            prop_assert!(rayleigh_lower_bound_holds(&y, &x, 1e-10));
        }
    }
}
