//! LMS adaptation, ATC combination and the event-triggered EB-ATC variant.
//!
//! One network instant runs in three barrier-separated phases: every node
//! adapts, then every node evaluates its trigger and publishes `psi_bar`,
//! then every node combines using the values published at this instant.
//! Initial state is `w = psi = psi_bar = 0`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::datamodel::{DataSample, GroundTruth};
use crate::topology::{CombinationColumn, CombinationMatrix};

/// Smallest accepted eigenvalue of a trigger weighting matrix; values in
/// `[-PSD_TOL, 0)` are clamped to zero.
pub const PSD_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum DiffusionError {
    #[error("non-finite estimate at node {node}, instant {instant}")]
    NonFiniteUpdate { node: usize, instant: usize },
    #[error("node {node} needs the published estimate of node {neighbor}, which is missing")]
    MissingNeighborState { node: usize, neighbor: usize },
    #[error("trigger weighting matrix is not symmetric positive semi-definite")]
    InvalidWeighting,
    #[error("invalid threshold schedule: {0}")]
    InvalidSchedule(String),
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch { what: &'static str, expected: usize, got: usize },
}

/// Marker error from [`adapt`]; [`step_network`] attaches node and instant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("adaptation produced a non-finite estimate")]
pub struct NonFiniteUpdate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Algorithm {
    Atc,
    EbAtc,
    NonCoop,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Atc => "atc",
            Algorithm::EbAtc => "ebatc",
            Algorithm::NonCoop => "noncoop",
        })
    }
}

/// Trigger threshold `delta(i)` as a function of the instant.
#[derive(Debug, Clone, PartialEq)]
pub enum ThresholdSchedule {
    Constant(f64),
    /// `(first instant, value)` pieces; the first piece starts at instant 0.
    Piecewise(Vec<(usize, f64)>),
}

impl ThresholdSchedule {
    pub fn piecewise(pieces: Vec<(usize, f64)>) -> Result<Self, DiffusionError> {
        if pieces.first().map(|p| p.0) != Some(0) {
            return Err(DiffusionError::InvalidSchedule("first piece must start at instant 0".into()));
        }
        if pieces.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(DiffusionError::InvalidSchedule("piece starts must increase".into()));
        }
        if pieces.iter().any(|p| !(p.1 >= 0.0 && p.1.is_finite())) {
            return Err(DiffusionError::InvalidSchedule("thresholds must be finite and >= 0".into()));
        }
        Ok(Self::Piecewise(pieces))
    }

    pub fn at(&self, instant: usize) -> f64 {
        match self {
            Self::Constant(d) => *d,
            Self::Piecewise(pieces) => {
                let idx = pieces.partition_point(|p| p.0 <= instant);
                pieces[idx - 1].1
            }
        }
    }

    pub fn sup(&self) -> f64 {
        match self {
            Self::Constant(d) => *d,
            Self::Piecewise(pieces) => pieces.iter().map(|p| p.1).fold(0.0, f64::max),
        }
    }
}

/// Weighting matrix `Y` and threshold schedule of one node.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerPolicy {
    weight: DMatrix<f64>,
    identity: bool,
    schedule: ThresholdSchedule,
    delta_sup: f64,
    lambda_min: f64,
}

impl TriggerPolicy {
    pub fn new(weight: DMatrix<f64>, schedule: ThresholdSchedule) -> Result<Self, DiffusionError> {
        let m = weight.nrows();
        if m == 0 || weight.ncols() != m {
            return Err(DiffusionError::InvalidWeighting);
        }
        if let ThresholdSchedule::Constant(d) = schedule {
            if !(d >= 0.0 && d.is_finite()) {
                return Err(DiffusionError::InvalidSchedule("thresholds must be finite and >= 0".into()));
            }
        }
        let scale = weight.amax().max(1.0);
        if (&weight - weight.transpose()).amax() > PSD_TOL * scale {
            return Err(DiffusionError::InvalidWeighting);
        }
        let weight = (&weight + weight.transpose()) * 0.5;
        let lambda_min = weight.clone().symmetric_eigenvalues().min();
        if lambda_min < -PSD_TOL {
            return Err(DiffusionError::InvalidWeighting);
        }
        let identity = weight == DMatrix::identity(m, m);
        let delta_sup = schedule.sup();
        Ok(Self {
            weight,
            identity,
            schedule,
            delta_sup,
            lambda_min: lambda_min.max(0.0),
        })
    }

    /// `Y = I_M` with a constant threshold.
    pub fn constant(m: usize, delta: f64) -> Result<Self, DiffusionError> {
        Self::new(DMatrix::identity(m, m), ThresholdSchedule::Constant(delta))
    }

    /// Zero threshold: any nonzero drift triggers, which reproduces ATC.
    pub fn always(m: usize) -> Self {
        Self::constant(m, 0.0).expect("identity weighting is valid")
    }

    pub fn weight(&self) -> &DMatrix<f64> {
        &self.weight
    }

    pub fn schedule(&self) -> &ThresholdSchedule {
        &self.schedule
    }

    pub fn dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn threshold(&self, instant: usize) -> f64 {
        self.schedule.at(instant)
    }

    /// `sup_i delta(i)`.
    pub fn delta_sup(&self) -> f64 {
        self.delta_sup
    }

    /// Smallest eigenvalue of `Y`, clamped at zero.
    pub fn lambda_min(&self) -> f64 {
        self.lambda_min
    }

    pub fn is_positive_definite(&self) -> bool {
        self.lambda_min > 0.0
    }

    pub fn is_identity(&self) -> bool {
        self.identity
    }

    /// Squared bound `delta_sup / lambda_min(Y)` on the a posteriori gap.
    /// Infinite when `Y` is singular and the threshold is positive.
    pub fn gap_bound_sq(&self) -> f64 {
        if self.delta_sup == 0.0 {
            0.0
        } else if self.lambda_min > 0.0 {
            self.delta_sup / self.lambda_min
        } else {
            f64::INFINITY
        }
    }

    /// `‖a - b‖²_Y`.
    pub fn weighted_dist_sq(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        if self.identity {
            return sq_dist(a, b);
        }
        let m = a.len();
        let mut acc = 0.0;
        for r in 0..m {
            let er = a[r] - b[r];
            let mut row = 0.0;
            for c in 0..m {
                row += self.weight[(r, c)] * (a[c] - b[c]);
            }
            acc += er * row;
        }
        acc
    }
}

/// `‖a - b‖²`.
pub fn sq_dist(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Estimates held by one node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeState {
    /// `w_k(i)`
    pub w: DVector<f64>,
    /// `psi_k(i)`
    pub psi: DVector<f64>,
    /// Last broadcast intermediate estimate.
    pub psi_bar: DVector<f64>,
    pub gamma: bool,
}

impl NodeState {
    pub fn zeros(m: usize) -> Self {
        Self {
            w: DVector::zeros(m),
            psi: DVector::zeros(m),
            psi_bar: DVector::zeros(m),
            gamma: false,
        }
    }

    /// A posteriori gap `‖psi - psi_bar‖²`.
    pub fn posterior_gap_sq(&self) -> f64 {
        sq_dist(&self.psi, &self.psi_bar)
    }
}

/// LMS adaptation `psi = w + mu·u·(d - u·w)`; `w` is left untouched.
pub fn adapt(state: &mut NodeState, sample: &DataSample, mu: f64) -> Result<(), NonFiniteUpdate> {
    let err = sample.d - sample.u.dot(&state.w);
    let scale = mu * err;
    for ((p, w), u) in state.psi.iter_mut().zip(state.w.iter()).zip(sample.u.iter()) {
        *p = w + scale * u;
    }
    if state.psi.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(NonFiniteUpdate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriggerOutcome {
    pub gamma: bool,
    /// `f(eps⁻) = ‖psi - psi_bar(i-1)‖²_Y`
    pub apriori_f: f64,
}

/// Broadcast iff `‖psi - psi_bar‖²_Y > delta(i)`; ties stay silent.
pub fn evaluate_trigger(state: &mut NodeState, policy: &TriggerPolicy, instant: usize) -> TriggerOutcome {
    let f = policy.weighted_dist_sq(&state.psi, &state.psi_bar);
    let gamma = f > policy.threshold(instant);
    if gamma {
        state.psi_bar.copy_from(&state.psi);
    }
    state.gamma = gamma;
    TriggerOutcome { gamma, apriori_f: f }
}

/// Source of neighbors' published estimates.
pub trait PsiBarLookup {
    fn psi_bar(&self, node: usize) -> Option<&DVector<f64>>;
}

impl PsiBarLookup for [NodeState] {
    fn psi_bar(&self, node: usize) -> Option<&DVector<f64>> {
        self.get(node).map(|s| &s.psi_bar)
    }
}

impl PsiBarLookup for BTreeMap<usize, DVector<f64>> {
    fn psi_bar(&self, node: usize) -> Option<&DVector<f64>> {
        self.get(&node)
    }
}

impl PsiBarLookup for HashMap<usize, DVector<f64>> {
    fn psi_bar(&self, node: usize) -> Option<&DVector<f64>> {
        self.get(&node)
    }
}

/// `w_k = a_kk·psi_k + Σ_{l≠k} a_lk·psi_bar_l`, written into `out`.
pub fn combine<L: PsiBarLookup + ?Sized>(
    psi_k: &DVector<f64>,
    column: &CombinationColumn,
    psi_bars: &L,
    out: &mut DVector<f64>,
) -> Result<(), DiffusionError> {
    for (o, p) in out.iter_mut().zip(psi_k.iter()) {
        *o = column.self_weight * p;
    }
    for &(l, a) in &column.neighbors {
        let pb = psi_bars.psi_bar(l).ok_or(DiffusionError::MissingNeighborState {
            node: column.node,
            neighbor: l,
        })?;
        for (o, x) in out.iter_mut().zip(pb.iter()) {
            *o += a * x;
        }
    }
    Ok(())
}

/// Estimates of one node at one instant, kept when a trace asks for them.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeEstimates {
    pub psi: DVector<f64>,
    pub w: DVector<f64>,
}

/// Per-node record of a single instant.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InstantTrace {
    pub gamma: Vec<bool>,
    /// `f(eps⁻_k(i))`; Euclidean for ATC, zero for the non-cooperative run.
    pub apriori_f: Vec<f64>,
    /// `‖psi_k(i) - psi_bar_k(i)‖²` after publication.
    pub gap_norm_sq: Vec<f64>,
    /// `‖w° - w_k(i)‖²`; filled by [`Simulator`].
    pub sq_deviation: Vec<f64>,
    pub estimates: Option<Vec<NodeEstimates>>,
}

impl InstantTrace {
    pub fn network_msd(&self) -> f64 {
        self.sq_deviation.iter().sum::<f64>() / self.sq_deviation.len() as f64
    }

    pub fn trigger_count(&self) -> usize {
        self.gamma.iter().filter(|g| **g).count()
    }
}

/// Full history of one replica; one entry per simulated instant.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct IterationTrace {
    pub instants: Vec<InstantTrace>,
}

impl IterationTrace {
    pub fn len(&self) -> usize {
        self.instants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instants.is_empty()
    }

    pub fn n_nodes(&self) -> usize {
        self.instants.first().map_or(0, |t| t.gamma.len())
    }

    pub const CSV_HEADER: &'static str = "replica,instant,node,gamma,gap_norm_sq,msd_contribution";

    /// Rows `replica,instant,node,gamma,gap_norm_sq,msd_contribution`
    /// (node 1-indexed), without header.
    pub fn write_csv_rows<W: Write>(&self, replica: usize, out: &mut W) -> io::Result<()> {
        for (i, t) in self.instants.iter().enumerate() {
            for k in 0..t.gamma.len() {
                writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    replica,
                    i,
                    k + 1,
                    u8::from(t.gamma[k]),
                    t.gap_norm_sq[k],
                    t.sq_deviation.get(k).copied().unwrap_or(0.0)
                )?;
            }
        }
        Ok(())
    }
}

/// Node states plus the scratch space the combination phase writes into.
#[derive(Debug, Clone)]
pub struct NetworkState {
    pub nodes: Vec<NodeState>,
    next_w: Vec<DVector<f64>>,
}

impl NetworkState {
    pub fn zeros(n: usize, m: usize) -> Self {
        Self {
            nodes: (0..n).map(|_| NodeState::zeros(m)).collect(),
            next_w: (0..n).map(|_| DVector::zeros(m)).collect(),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }
}

/// Advance every node by one instant.
///
/// `policies` is only read for [`Algorithm::EbAtc`]. ATC is EB-ATC with an
/// unconditional broadcast; the non-cooperative run sets `w = psi`.
#[allow(clippy::too_many_arguments)]
pub fn step_network(
    algorithm: Algorithm,
    state: &mut NetworkState,
    samples: &[DataSample],
    weights: &CombinationMatrix,
    step_sizes: &[f64],
    policies: &[TriggerPolicy],
    instant: usize,
    record_estimates: bool,
) -> Result<InstantTrace, DiffusionError> {
    let n = state.n_nodes();
    check_len("samples", n, samples.len())?;
    check_len("step sizes", n, step_sizes.len())?;
    if algorithm != Algorithm::NonCoop {
        check_len("combination matrix", n, weights.n_nodes())?;
    }
    if algorithm == Algorithm::EbAtc {
        check_len("trigger policies", n, policies.len())?;
    }

    for (k, ((node, sample), mu)) in state.nodes.iter_mut().zip(samples).zip(step_sizes).enumerate() {
        adapt(node, sample, *mu).map_err(|_| DiffusionError::NonFiniteUpdate { node: k, instant })?;
    }

    let mut trace = InstantTrace {
        gamma: vec![false; n],
        apriori_f: vec![0.0; n],
        gap_norm_sq: vec![0.0; n],
        sq_deviation: Vec::new(),
        estimates: None,
    };

    match algorithm {
        Algorithm::NonCoop => {
            for node in &mut state.nodes {
                node.gamma = false;
                node.w.copy_from(&node.psi);
            }
        }
        Algorithm::Atc | Algorithm::EbAtc => {
            for (k, node) in state.nodes.iter_mut().enumerate() {
                if algorithm == Algorithm::EbAtc {
                    let out = evaluate_trigger(node, &policies[k], instant);
                    trace.gamma[k] = out.gamma;
                    trace.apriori_f[k] = out.apriori_f;
                } else {
                    trace.apriori_f[k] = sq_dist(&node.psi, &node.psi_bar);
                    node.psi_bar.copy_from(&node.psi);
                    node.gamma = true;
                    trace.gamma[k] = true;
                }
                trace.gap_norm_sq[k] = node.posterior_gap_sq();
            }
            let NetworkState { nodes, next_w } = state;
            for (k, out) in next_w.iter_mut().enumerate() {
                combine(&nodes[k].psi, weights.column(k), nodes.as_slice(), out)?;
            }
            for (node, w) in nodes.iter_mut().zip(next_w.iter_mut()) {
                std::mem::swap(&mut node.w, w);
            }
        }
    }

    if record_estimates {
        trace.estimates = Some(
            state
                .nodes
                .iter()
                .map(|s| NodeEstimates {
                    psi: s.psi.clone(),
                    w: s.w.clone(),
                })
                .collect(),
        );
    }
    Ok(trace)
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), DiffusionError> {
    if expected == got {
        Ok(())
    } else {
        Err(DiffusionError::DimensionMismatch { what, expected, got })
    }
}

/// One algorithm running over one replica, recording an [`IterationTrace`].
#[derive(Debug, Clone)]
pub struct Simulator<'a> {
    algorithm: Algorithm,
    weights: &'a CombinationMatrix,
    step_sizes: Vec<f64>,
    policies: &'a [TriggerPolicy],
    w_star: &'a GroundTruth,
    state: NetworkState,
    record_estimates: bool,
    instant: usize,
    trace: IterationTrace,
}

impl<'a> Simulator<'a> {
    pub fn new(
        algorithm: Algorithm,
        weights: &'a CombinationMatrix,
        step_sizes: Vec<f64>,
        policies: &'a [TriggerPolicy],
        w_star: &'a GroundTruth,
    ) -> Self {
        let n = step_sizes.len();
        Self {
            algorithm,
            weights,
            step_sizes,
            policies,
            w_star,
            state: NetworkState::zeros(n, w_star.dim()),
            record_estimates: false,
            instant: 0,
            trace: IterationTrace::default(),
        }
    }

    pub fn record_estimates(mut self, yes: bool) -> Self {
        self.record_estimates = yes;
        self
    }

    pub fn algorithm(&self) -> Algorithm {
        self.algorithm
    }

    pub fn state(&self) -> &NetworkState {
        &self.state
    }

    pub fn trace(&self) -> &IterationTrace {
        &self.trace
    }

    pub fn into_trace(self) -> IterationTrace {
        self.trace
    }

    pub fn step(&mut self, samples: &[DataSample]) -> Result<&InstantTrace, DiffusionError> {
        let mut t = step_network(
            self.algorithm,
            &mut self.state,
            samples,
            self.weights,
            &self.step_sizes,
            self.policies,
            self.instant,
            self.record_estimates,
        )?;
        let w_star = self.w_star.vector();
        t.sq_deviation = self.state.nodes.iter().map(|s| sq_dist(w_star, &s.w)).collect();
        self.instant += 1;
        self.trace.instants.push(t);
        Ok(self.trace.instants.last().expect("just pushed"))
    }
}

/// Result of checking every recorded a posteriori gap against
/// `delta_k / lambda_min(Y_k)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GapAudit {
    pub checked: u64,
    pub violations: u64,
    /// Largest `‖eps‖² / (delta_k / lambda_min)` seen; 0 when all bounds are 0.
    pub max_ratio: f64,
    /// Instants where `gamma = 1` but the gap was not exactly zero.
    pub trigger_mismatches: u64,
}

impl GapAudit {
    pub fn merge(&mut self, other: &GapAudit) {
        self.checked += other.checked;
        self.violations += other.violations;
        self.max_ratio = self.max_ratio.max(other.max_ratio);
        self.trigger_mismatches += other.trigger_mismatches;
    }
}

pub fn audit_gap_bound(trace: &IterationTrace, policies: &[TriggerPolicy]) -> GapAudit {
    let mut audit = GapAudit::default();
    for t in &trace.instants {
        for (k, policy) in policies.iter().enumerate().take(t.gap_norm_sq.len()) {
            let gap = t.gap_norm_sq[k];
            let bound = policy.gap_bound_sq();
            audit.checked += 1;
            // With Y = I the comparison is exact; otherwise allow rounding in
            // the eigenvalue.
            let limit = if policy.is_identity() { bound } else { bound * (1.0 + 1e-12) };
            if gap > limit {
                audit.violations += 1;
            }
            if bound > 0.0 && bound.is_finite() {
                audit.max_ratio = audit.max_ratio.max(gap / bound);
            }
            if t.gamma[k] && gap != 0.0 {
                audit.trigger_mismatches += 1;
            }
        }
    }
    audit
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{sample_ground_truth, sample_profiles, ReplicaStreams};
    use crate::topology::{metropolis_weights, path_topology, random_geometric_topology};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn sample(u: &[f64], d: f64) -> DataSample {
        DataSample {
            u: DVector::from_column_slice(u),
            d,
            v: 0.0,
        }
    }

    #[test]
    fn adapt_fixed_point_and_arithmetic() {
        let w_star = DVector::from_column_slice(&[0.3, -0.4]);
        let mut s = NodeState::zeros(2);
        s.w = w_star.clone();
        let u = [1.2, 0.7];
        adapt(&mut s, &sample(&u, DVector::from_column_slice(&u).dot(&w_star)), 0.1).unwrap();
        assert_eq!(s.psi, w_star);

        let mut s = NodeState::zeros(1);
        adapt(&mut s, &sample(&[1.0], 2.0), 0.5).unwrap();
        assert_eq!(s.psi[0], 1.0);
        assert_eq!(s.w[0], 0.0);

        let mut s = NodeState::zeros(2);
        s.w = DVector::from_column_slice(&[0.5, 0.25]);
        adapt(&mut s, &sample(&[3.0, -1.0], 7.0), 0.0).unwrap();
        assert_eq!(s.psi, s.w);
    }

    #[test]
    fn adapt_flags_non_finite() {
        let mut s = NodeState::zeros(1);
        assert_eq!(adapt(&mut s, &sample(&[1e300], 1e300), 1e300), Err(NonFiniteUpdate));
    }

    #[test]
    fn trigger_rule() {
        let policy = TriggerPolicy::constant(2, 0.01).unwrap();
        let mut s = NodeState::zeros(2);
        s.psi = DVector::from_column_slice(&[0.2, 0.0]);
        let out = evaluate_trigger(&mut s, &policy, 0);
        assert!(out.gamma);
        assert_abs_diff_eq!(out.apriori_f, 0.04, epsilon = 1e-15);
        assert_eq!(s.psi_bar, s.psi);

        let out = evaluate_trigger(&mut s, &policy, 1);
        assert!(!out.gamma);
        assert_eq!(out.apriori_f, 0.0);

        let always = TriggerPolicy::always(2);
        s.psi[1] = 1e-100;
        assert!(evaluate_trigger(&mut s, &always, 2).gamma);
    }

    #[test]
    fn trigger_tie_stays_silent() {
        let policy = TriggerPolicy::constant(1, 0.25).unwrap();
        let mut s = NodeState::zeros(1);
        s.psi[0] = 0.5;
        let out = evaluate_trigger(&mut s, &policy, 0);
        assert_eq!(out.apriori_f, 0.25);
        assert!(!out.gamma);
        assert_eq!(s.psi_bar[0], 0.0);
    }

    #[test]
    fn weighted_trigger_uses_y() {
        let y = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.5]);
        let policy = TriggerPolicy::new(y, ThresholdSchedule::Constant(0.1)).unwrap();
        assert_eq!(policy.lambda_min(), 0.5);
        assert!(!policy.is_identity());
        assert_abs_diff_eq!(policy.gap_bound_sq(), 0.2, epsilon = 1e-15);
        let mut s = NodeState::zeros(2);
        s.psi = DVector::from_column_slice(&[0.0, 0.4]);
        let out = evaluate_trigger(&mut s, &policy, 0);
        assert_abs_diff_eq!(out.apriori_f, 0.08, epsilon = 1e-15);
        assert!(!out.gamma);
    }

    #[test]
    fn policy_validation() {
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.1]);
        assert_eq!(
            TriggerPolicy::new(indefinite, ThresholdSchedule::Constant(0.1)),
            Err(DiffusionError::InvalidWeighting)
        );
        let nearly = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-14]);
        let p = TriggerPolicy::new(nearly, ThresholdSchedule::Constant(0.1)).unwrap();
        assert_eq!(p.lambda_min(), 0.0);
        assert!(!p.is_positive_definite());
        assert_eq!(p.gap_bound_sq(), f64::INFINITY);
        assert!(TriggerPolicy::constant(2, -1.0).is_err());
    }

    #[test]
    fn piecewise_schedule() {
        let s = ThresholdSchedule::piecewise(vec![(0, 0.1), (100, 0.01), (500, 0.05)]).unwrap();
        assert_eq!(s.at(0), 0.1);
        assert_eq!(s.at(99), 0.1);
        assert_eq!(s.at(100), 0.01);
        assert_eq!(s.at(10_000), 0.05);
        assert_eq!(s.sup(), 0.1);
        assert!(ThresholdSchedule::piecewise(vec![(1, 0.1)]).is_err());
        assert!(ThresholdSchedule::piecewise(vec![(0, 0.1), (0, 0.2)]).is_err());
    }

    #[test]
    fn combine_cases() {
        let single = CombinationMatrix::identity(1);
        let psi = DVector::from_column_slice(&[1.5, -2.0]);
        let mut out = DVector::zeros(2);
        combine(&psi, single.column(0), &BTreeMap::new(), &mut out).unwrap();
        assert_eq!(out, psi);

        let a = metropolis_weights(&path_topology(3).unwrap());
        let c = DVector::from_column_slice(&[0.7]);
        let mut bars = BTreeMap::new();
        bars.insert(0, c.clone());
        bars.insert(2, c.clone());
        combine(&c, a.column(1), &bars, &mut out).unwrap();
        assert_abs_diff_eq!(out[0], 0.7, epsilon = 1e-15);

        let mut bars = HashMap::new();
        bars.insert(0, DVector::from_column_slice(&[0.0]));
        bars.insert(2, DVector::from_column_slice(&[3.0]));
        let mut out = DVector::zeros(1);
        combine(&DVector::from_column_slice(&[1.0]), a.column(1), &bars, &mut out).unwrap();
        assert_abs_diff_eq!(out[0], 4.0 / 3.0, epsilon = 1e-15);

        bars.remove(&2);
        assert_eq!(
            combine(&DVector::from_column_slice(&[1.0]), a.column(1), &bars, &mut out),
            Err(DiffusionError::MissingNeighborState { node: 1, neighbor: 2 })
        );
    }

    struct Setup {
        weights: CombinationMatrix,
        profiles: Vec<crate::datamodel::NodeProfile>,
        w_star: GroundTruth,
    }

    fn setup(n: usize, m: usize, seed: u64) -> Setup {
        let topo = random_geometric_topology(n, 0.5, seed).unwrap();
        Setup {
            weights: metropolis_weights(&topo),
            profiles: sample_profiles(n, m, (1.0, 2.0), (-25.0, -10.0), 0.05, seed).unwrap(),
            w_star: sample_ground_truth(m, seed).unwrap(),
        }
    }

    fn run(
        alg: Algorithm,
        s: &Setup,
        weights: &CombinationMatrix,
        policies: &[TriggerPolicy],
        horizon: usize,
    ) -> Vec<NetworkState> {
        let n = s.profiles.len();
        let mus: Vec<f64> = s.profiles.iter().map(|p| p.mu()).collect();
        let mut sim = Simulator::new(alg, weights, mus, policies, &s.w_star);
        let mut streams = ReplicaStreams::new(99, 0, n);
        let mut buf = vec![DataSample::zeros(s.w_star.dim()); n];
        let mut states = Vec::new();
        for i in 0..horizon {
            streams.fill_instant(i, &s.profiles, &s.w_star, &mut buf);
            sim.step(&buf).unwrap();
            states.push(sim.state().clone());
        }
        states
    }

    fn same_estimates(a: &[NetworkState], b: &[NetworkState]) -> bool {
        a.iter()
            .zip(b)
            .all(|(x, y)| x.nodes.iter().zip(&y.nodes).all(|(p, q)| p.w == q.w && p.psi == q.psi))
    }

    #[test]
    fn always_trigger_matches_atc_bitwise() {
        let s = setup(8, 3, 4);
        let always: Vec<_> = (0..8).map(|_| TriggerPolicy::always(3)).collect();
        let atc = run(Algorithm::Atc, &s, &s.weights, &[], 300);
        let eb = run(Algorithm::EbAtc, &s, &s.weights, &always, 300);
        assert!(same_estimates(&atc, &eb));
    }

    #[test]
    fn identity_weights_match_noncoop_bitwise() {
        let s = setup(6, 2, 5);
        let eye = CombinationMatrix::identity(6);
        let atc = run(Algorithm::Atc, &s, &eye, &[], 200);
        let nc = run(Algorithm::NonCoop, &s, &s.weights, &[], 200);
        assert!(same_estimates(&atc, &nc));

        let one = setup(1, 2, 6);
        let policy = [TriggerPolicy::constant(2, 0.01).unwrap()];
        let a = run(Algorithm::Atc, &one, &one.weights, &[], 100);
        let b = run(Algorithm::EbAtc, &one, &one.weights, &policy, 100);
        let c = run(Algorithm::NonCoop, &one, &one.weights, &[], 100);
        assert!(same_estimates(&a, &c));
        assert!(same_estimates(&b, &c));
    }

    /// Straight-line re-implementation of the recursions for N=2, M=1.
    #[test]
    fn two_node_trajectory_matches_scripted_oracle() {
        let s = setup(2, 1, 8);
        let a = s.weights.matrix().clone();
        let delta = 0.001;
        let policies: Vec<_> = (0..2).map(|_| TriggerPolicy::constant(1, delta).unwrap()).collect();
        let states = run(Algorithm::EbAtc, &s, &s.weights, &policies, 3);

        let mut streams = ReplicaStreams::new(99, 0, 2);
        let mut buf = vec![DataSample::zeros(1); 2];
        let (mut w, mut psi_bar) = ([0.0f64; 2], [0.0f64; 2]);
        for (i, st) in states.iter().enumerate() {
            streams.fill_instant(i, &s.profiles, &s.w_star, &mut buf);
            let mut psi = [0.0; 2];
            for k in 0..2 {
                let (u, d) = (buf[k].u[0], buf[k].d);
                psi[k] = w[k] + s.profiles[k].mu() * u * (d - u * w[k]);
            }
            for k in 0..2 {
                let gap = psi[k] - psi_bar[k];
                if gap * gap > delta {
                    psi_bar[k] = psi[k];
                }
            }
            w[0] = a[(0, 0)] * psi[0] + a[(1, 0)] * psi_bar[1];
            w[1] = a[(1, 1)] * psi[1] + a[(0, 1)] * psi_bar[0];
            for k in 0..2 {
                assert_abs_diff_eq!(st.nodes[k].w[0], w[k], epsilon = 1e-14);
                assert_abs_diff_eq!(st.nodes[k].psi_bar[0], psi_bar[k], epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn step_network_rejects_bad_shapes() {
        let s = setup(3, 2, 1);
        let mut st = NetworkState::zeros(3, 2);
        let buf = vec![DataSample::zeros(2); 2];
        let err = step_network(Algorithm::Atc, &mut st, &buf, &s.weights, &[0.1; 3], &[], 0, false);
        assert!(matches!(err, Err(DiffusionError::DimensionMismatch { what: "samples", .. })));
        let buf = vec![DataSample::zeros(2); 3];
        let err = step_network(Algorithm::EbAtc, &mut st, &buf, &s.weights, &[0.1; 3], &[], 0, false);
        assert!(matches!(err, Err(DiffusionError::DimensionMismatch { what: "trigger policies", .. })));
    }

    #[test]
    fn divergence_reports_node_and_instant() {
        let s = setup(3, 2, 1);
        let mut st = NetworkState::zeros(3, 2);
        let mut buf = vec![DataSample::zeros(2); 3];
        buf[2] = sample(&[1e200, 1e200], 1e200);
        let err = step_network(Algorithm::Atc, &mut st, &buf, &s.weights, &[1e200; 3], &[], 17, false);
        assert_eq!(err.unwrap_err(), DiffusionError::NonFiniteUpdate { node: 2, instant: 17 });
    }

    #[test]
    fn trace_is_deterministic_and_csv_shaped() {
        let s = setup(4, 2, 2);
        let policies: Vec<_> = (0..4).map(|_| TriggerPolicy::constant(2, 0.01).unwrap()).collect();
        let go = || {
            let mus: Vec<f64> = s.profiles.iter().map(|p| p.mu()).collect();
            let mut sim = Simulator::new(Algorithm::EbAtc, &s.weights, mus, &policies, &s.w_star);
            let mut streams = ReplicaStreams::new(3, 1, 4);
            let mut buf = vec![DataSample::zeros(2); 4];
            for i in 0..50 {
                streams.fill_instant(i, &s.profiles, &s.w_star, &mut buf);
                sim.step(&buf).unwrap();
            }
            sim.into_trace()
        };
        let a = go();
        assert_eq!(a, go());
        assert_eq!(a.len(), 50);
        let mut csv = Vec::new();
        a.write_csv_rows(1, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 200);
        assert!(text.starts_with("1,0,1,"));
    }

    #[test]
    fn stable_step_sizes_never_diverge() {
        // 200 replicas x 10^4 instants at the default and a large step size.
        for mu in [0.05, 0.35] {
            let topo = random_geometric_topology(4, 0.6, 3).unwrap();
            let weights = metropolis_weights(&topo);
            let profiles = sample_profiles(4, 2, (1.0, 1.0), (-25.0, -10.0), mu, 1).unwrap();
            let w_star = sample_ground_truth(2, 1).unwrap();
            let policies: Vec<_> = (0..4).map(|_| TriggerPolicy::constant(2, 0.01).unwrap()).collect();
            let mus: Vec<f64> = profiles.iter().map(|p| p.mu()).collect();
            for r in 0..200 {
                let mut state = NetworkState::zeros(4, 2);
                let mut streams = ReplicaStreams::new(5, r, 4);
                let mut buf = vec![DataSample::zeros(2); 4];
                for i in 0..10_000 {
                    streams.fill_instant(i, &profiles, &w_star, &mut buf);
                    step_network(Algorithm::EbAtc, &mut state, &buf, &weights, &mus, &policies, i, false).unwrap();
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn posterior_gap_respects_lemma_bound(
            seed in 0u64..1000,
            delta in 1e-4f64..0.2,
            y_diag in proptest::collection::vec(0.2f64..3.0, 3),
        ) {
            let s = setup(5, 3, seed);
            let y = DMatrix::from_diagonal(&DVector::from_vec(y_diag));
            let policies: Vec<_> = (0..5)
                .map(|_| TriggerPolicy::new(y.clone(), ThresholdSchedule::Constant(delta)).unwrap())
                .collect();
            let mus: Vec<f64> = s.profiles.iter().map(|p| p.mu()).collect();
            let mut sim = Simulator::new(Algorithm::EbAtc, &s.weights, mus, &policies, &s.w_star);
            let mut streams = ReplicaStreams::new(seed, 0, 5);
            let mut buf = vec![DataSample::zeros(3); 5];
            for i in 0..200 {
                streams.fill_instant(i, &s.profiles, &s.w_star, &mut buf);
                sim.step(&buf).unwrap();
            }
            let audit = audit_gap_bound(sim.trace(), &policies);
            prop_assert_eq!(audit.checked, 1000);
            prop_assert_eq!(audit.violations, 0);
            prop_assert_eq!(audit.trigger_mismatches, 0);
            prop_assert!(audit.max_ratio <= 1.0 + 1e-12);
        }
    }
}
