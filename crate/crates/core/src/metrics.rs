//! Replica-averaged learning curves and steady-state summaries.

use std::fmt::Write as _;

use nalgebra::DVector;
use thiserror::Error;

use crate::datamodel::GroundTruth;
use crate::diffusion::IterationTrace;

/// dB value reported for an exactly-zero MSD.
pub const DB_FLOOR: f64 = -300.0;
pub const DEFAULT_WINDOW_FRACTION: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("trace shape mismatch: expected {expected_instants} instants x {expected_nodes} nodes, got {instants} x {nodes}")]
    ShapeMismatch {
        expected_instants: usize,
        expected_nodes: usize,
        instants: usize,
        nodes: usize,
    },
    #[error("trace has no recorded estimates; mean error tracking needs them")]
    MissingEstimates,
    #[error("no replicas accumulated")]
    Empty,
    #[error("horizon {horizon} too short for window fraction {fraction}")]
    HorizonTooShort { horizon: usize, fraction: f64 },
    #[error("window fraction {0} outside (0, 1]")]
    InvalidWindow(f64),
}

/// `10 log10(x)`, floored at [`DB_FLOOR`].
pub fn to_db(x: f64) -> f64 {
    if x <= 0.0 {
        DB_FLOOR
    } else {
        (10.0 * x.log10()).max(DB_FLOOR)
    }
}

pub fn from_db(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Replica means per instant.
#[derive(Debug, Clone, PartialEq)]
pub struct LearningCurves {
    pub replicas: usize,
    pub n_nodes: usize,
    pub msd_linear: Vec<f64>,
    pub msd_db: Vec<f64>,
    pub entr: Vec<f64>,
    /// Mean `gamma_k(i)`, row-major by instant (`i * n_nodes + k`).
    pub node_trigger_mean: Vec<f64>,
    /// Mean `gamma_k` over the trailing steady-state window.
    pub per_node_trigger_rate: Vec<f64>,
    /// Replica-averaged `w° - w_k(i)`, row-major by instant, when tracked.
    pub mean_error: Option<Vec<DVector<f64>>>,
}

impl LearningCurves {
    pub fn horizon(&self) -> usize {
        self.msd_linear.len()
    }

    /// `max_k ‖E[w° - w_k(i)]‖`, the block maximum norm of the mean network error.
    pub fn mean_error_block_max(&self, instant: usize) -> Option<f64> {
        let errs = self.mean_error.as_ref()?;
        let row = &errs[instant * self.n_nodes..(instant + 1) * self.n_nodes];
        Some(row.iter().map(|e| e.norm()).fold(0.0, f64::max))
    }

    /// Largest ENTR at or after `instant`; `None` past the horizon.
    pub fn max_entr_from(&self, instant: usize) -> Option<f64> {
        self.entr.get(instant..).filter(|s| !s.is_empty()).map(|s| s.iter().copied().fold(f64::MIN, f64::max))
    }

    pub const CSV_HEADER: &'static str = "instant,msd_linear,msd_db,entr";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for i in 0..self.horizon() {
            let _ = writeln!(s, "{},{:e},{},{}", i, self.msd_linear[i], self.msd_db[i], self.entr[i]);
        }
        s
    }

    pub const NODE_RATE_HEADER: &'static str = "node,trigger_rate";

    pub fn node_rates_csv(&self) -> String {
        let mut s = format!("{}\n", Self::NODE_RATE_HEADER);
        for (k, r) in self.per_node_trigger_rate.iter().enumerate() {
            let _ = writeln!(s, "{},{}", k + 1, r);
        }
        s
    }
}

/// Folds replica traces one at a time. Sums run in the order traces are
/// added, so a fixed replica order gives bit-identical curves.
#[derive(Debug, Clone)]
pub struct CurveAccumulator {
    horizon: usize,
    n_nodes: usize,
    replicas: usize,
    msd_sum: Vec<f64>,
    trigger_sum: Vec<f64>,
    error_sum: Option<Vec<DVector<f64>>>,
}

impl CurveAccumulator {
    pub fn new(horizon: usize, n_nodes: usize) -> Self {
        Self {
            horizon,
            n_nodes,
            replicas: 0,
            msd_sum: vec![0.0; horizon],
            trigger_sum: vec![0.0; horizon * n_nodes],
            error_sum: None,
        }
    }

    /// Also average `w° - w_k(i)`; added traces must then carry estimates.
    pub fn with_mean_error(mut self, m: usize) -> Self {
        self.error_sum = Some(vec![DVector::zeros(m); self.horizon * self.n_nodes]);
        self
    }

    pub fn replicas(&self) -> usize {
        self.replicas
    }

    pub fn add(&mut self, trace: &IterationTrace, w_star: &GroundTruth) -> Result<(), MetricsError> {
        let shape_ok = trace.len() == self.horizon
            && trace
                .instants
                .iter()
                .all(|t| t.gamma.len() == self.n_nodes && t.sq_deviation.len() == self.n_nodes);
        if !shape_ok {
            return Err(MetricsError::ShapeMismatch {
                expected_instants: self.horizon,
                expected_nodes: self.n_nodes,
                instants: trace.len(),
                nodes: trace.n_nodes(),
            });
        }
        if self.error_sum.is_some() && trace.instants.iter().any(|t| t.estimates.is_none()) {
            return Err(MetricsError::MissingEstimates);
        }
        for (i, t) in trace.instants.iter().enumerate() {
            self.msd_sum[i] += t.network_msd();
            let row = &mut self.trigger_sum[i * self.n_nodes..(i + 1) * self.n_nodes];
            for (acc, &g) in row.iter_mut().zip(&t.gamma) {
                *acc += f64::from(u8::from(g));
            }
            if let (Some(sum), Some(est)) = (self.error_sum.as_mut(), t.estimates.as_ref()) {
                for (k, e) in est.iter().enumerate() {
                    let acc = &mut sum[i * self.n_nodes + k];
                    *acc += w_star.vector();
                    *acc -= &e.w;
                }
            }
        }
        self.replicas += 1;
        Ok(())
    }

    /// Add the sums of `other`. Merging single-replica accumulators in
    /// replica order matches adding the traces in that order bit for bit.
    pub fn merge(&mut self, other: &CurveAccumulator) -> Result<(), MetricsError> {
        if other.horizon != self.horizon
            || other.n_nodes != self.n_nodes
            || other.error_sum.is_some() != self.error_sum.is_some()
        {
            return Err(MetricsError::ShapeMismatch {
                expected_instants: self.horizon,
                expected_nodes: self.n_nodes,
                instants: other.horizon,
                nodes: other.n_nodes,
            });
        }
        for (a, b) in self.msd_sum.iter_mut().zip(&other.msd_sum) {
            *a += b;
        }
        for (a, b) in self.trigger_sum.iter_mut().zip(&other.trigger_sum) {
            *a += b;
        }
        if let (Some(a), Some(b)) = (self.error_sum.as_mut(), other.error_sum.as_ref()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.replicas += other.replicas;
        Ok(())
    }

    /// Replica means; per-node rates use the trailing `window_fraction` of the horizon.
    pub fn finish(self, window_fraction: f64) -> Result<LearningCurves, MetricsError> {
        if self.replicas == 0 {
            return Err(MetricsError::Empty);
        }
        let (start, _) = window_bounds(self.horizon, window_fraction)?;
        let r = self.replicas as f64;
        let n = self.n_nodes;
        let msd_linear: Vec<f64> = self.msd_sum.iter().map(|s| s / r).collect();
        let msd_db = msd_linear.iter().map(|&x| to_db(x)).collect();
        let node_trigger_mean: Vec<f64> = self.trigger_sum.iter().map(|s| s / r).collect();
        let entr = node_trigger_mean
            .chunks(n.max(1))
            .map(|row| if n == 0 { 0.0 } else { row.iter().sum::<f64>() / n as f64 })
            .collect();
        let len = (self.horizon - start) as f64;
        let per_node_trigger_rate = (0..n)
            .map(|k| (start..self.horizon).map(|i| node_trigger_mean[i * n + k]).sum::<f64>() / len)
            .collect();
        let mean_error = self.error_sum.map(|v| v.into_iter().map(|e| e / r).collect());
        Ok(LearningCurves {
            replicas: self.replicas,
            n_nodes: n,
            msd_linear,
            msd_db,
            entr,
            node_trigger_mean,
            per_node_trigger_rate,
            mean_error,
        })
    }
}

/// Average a batch of traces in slice order.
pub fn accumulate(
    traces: &[IterationTrace],
    w_star: &GroundTruth,
    window_fraction: f64,
) -> Result<LearningCurves, MetricsError> {
    let first = traces.first().ok_or(MetricsError::Empty)?;
    let mut acc = CurveAccumulator::new(first.len(), first.n_nodes());
    for t in traces {
        acc.add(t, w_star)?;
    }
    acc.finish(window_fraction)
}

/// Trailing window `[start, horizon)` covering `ceil(fraction * horizon)` instants.
pub fn window_bounds(horizon: usize, fraction: f64) -> Result<(usize, usize), MetricsError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(MetricsError::InvalidWindow(fraction));
    }
    if horizon == 0 || fraction * (horizon as f64) < 1.0 {
        return Err(MetricsError::HorizonTooShort { horizon, fraction });
    }
    let len = ((fraction * horizon as f64).ceil() as usize).min(horizon);
    Ok((horizon - len, horizon))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteadyStateSummary {
    /// Half-open `[start, end)`.
    pub window: (usize, usize),
    pub msd_ss_db: f64,
    pub msd_ss_linear: f64,
    pub entr_ss: f64,
    /// First instant that has covered 90% of the dB drop from instant 0 to
    /// the steady-state level.
    pub settle_instant: usize,
}

pub fn steady_state(curves: &LearningCurves, window_fraction: f64) -> Result<SteadyStateSummary, MetricsError> {
    let h = curves.horizon();
    let (start, end) = window_bounds(h, window_fraction)?;
    let len = (end - start) as f64;
    let msd_ss_db = curves.msd_db[start..end].iter().sum::<f64>() / len;
    let msd_ss_linear = curves.msd_linear[start..end].iter().sum::<f64>() / len;
    let entr_ss = curves.entr[start..end].iter().sum::<f64>() / len;
    let tol = 0.1 * (curves.msd_db[0] - msd_ss_db).abs();
    let settle_instant = curves
        .msd_db
        .iter()
        .position(|&x| (x - msd_ss_db).abs() <= tol)
        .unwrap_or(end)
        .min(end);
    Ok(SteadyStateSummary {
        window: (start, end),
        msd_ss_db,
        msd_ss_linear,
        entr_ss,
        settle_instant,
    })
}

impl SteadyStateSummary {
    pub fn to_key_value(&self, prefix: &str) -> String {
        format!(
            "{prefix}.window_start = {}\n{prefix}.window_end = {}\n{prefix}.msd_ss_db = {}\n{prefix}.msd_ss_linear = {}\n{prefix}.entr_ss = {}\n{prefix}.settle_instant = {}\n",
            self.window.0, self.window.1, self.msd_ss_db, self.msd_ss_linear, self.entr_ss, self.settle_instant
        )
    }
}
