//! Replica execution, output files and the bound-versus-simulation comparison.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use super::config::{ConfigError, ExperimentConfig, TopologySpec};
use crate::analysis::{
    bound_report, build_workspace, mean_error_bound, stability_report, AnalysisError, BoundReport, StabilityReport,
    WorkspaceOptions,
};
use crate::datamodel::{
    derive_seed, profiles_table, replica_seed, sample_ground_truth, sample_profiles, DataModelError, DataSample,
    GroundTruth, NodeProfile, ReplicaStreams,
};
use crate::diffusion::{
    audit_gap_bound, Algorithm, DiffusionError, GapAudit, IterationTrace, Simulator, ThresholdSchedule, TriggerPolicy,
};
use crate::metrics::{steady_state, CurveAccumulator, LearningCurves, MetricsError, SteadyStateSummary};
use crate::topology::{
    complete_topology, metropolis_weights, path_topology, random_geometric_topology, CombinationMatrix,
    NetworkTopology, TopologyError,
};

/// Replicas handed to the worker pool at a time. Fixed so that results never
/// depend on the thread count.
pub const REPLICA_CHUNK: usize = 32;

pub const SEED_SCHEME: &str = "replica r uses ChaCha8 seeded with splitmix64(data_seed + (r + 1) * 0x9E3779B97F4A7C15); \
node k reads stream k; instant i starts at word position i << 32";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    DataModel(#[from] DataModelError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{label}, replica {replica}: {source}")]
    Diverged {
        label: String,
        replica: usize,
        #[source]
        source: DiffusionError,
        /// Curves over the replicas finished before the failing one.
        partial: Option<Box<ExperimentOutcome>>,
    },
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

impl HarnessError {
    /// Whether the error is a bad configuration rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(self, HarnessError::Config(_))
    }
}

/// One algorithm/threshold combination of an experiment.
#[derive(Debug, Clone)]
pub struct Variant {
    pub label: String,
    pub algorithm: Algorithm,
    pub policies: Vec<TriggerPolicy>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedPlan {
    pub master: u64,
    pub topology: u64,
    pub profiles: u64,
    pub ground_truth: u64,
    pub data: u64,
}

impl SeedPlan {
    pub fn from_master(master: u64) -> Self {
        Self {
            master,
            topology: derive_seed(master, "topology"),
            profiles: derive_seed(master, "profiles"),
            ground_truth: derive_seed(master, "ground_truth"),
            data: derive_seed(master, "data"),
        }
    }
}

/// Everything fixed across replicas.
#[derive(Debug, Clone)]
pub struct Setup {
    pub topology: NetworkTopology,
    pub weights: CombinationMatrix,
    pub profiles: Vec<NodeProfile>,
    pub w_star: GroundTruth,
    pub variants: Vec<Variant>,
    pub seeds: SeedPlan,
}

fn delta_label(d: f64) -> String {
    format!("ebatc_d{d}")
}

pub fn prepare(config: &ExperimentConfig) -> Result<Setup, HarnessError> {
    config.validate()?;
    let seeds = SeedPlan::from_master(config.seed);
    let n = config.nodes;
    let m = config.dimension;
    let topology = match &config.topology {
        TopologySpec::Geometric { radius, seed } => {
            random_geometric_topology(n, *radius, seed.unwrap_or(seeds.topology))?
        }
        TopologySpec::Path => path_topology(n)?,
        TopologySpec::Complete => complete_topology(n)?,
        TopologySpec::File(path) => {
            let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
                path: path.clone(),
                source,
            })?;
            let t = NetworkTopology::from_edge_list(&text)?;
            if t.n_nodes() != n {
                return Err(ConfigError::Validation(vec![format!(
                    "topology_file has {} nodes, config says {n}",
                    t.n_nodes()
                )])
                .into());
            }
            t
        }
    };
    let weights = metropolis_weights(&topology);
    let mut profiles = sample_profiles(
        n,
        m,
        config.sigma2_u_range,
        config.noise_db_range,
        config.mu,
        seeds.profiles,
    )?;
    if let Some(diag) = &config.regressor_cov_diag {
        let r = DMatrix::from_diagonal(&DVector::from_column_slice(diag));
        profiles = profiles
            .iter()
            .map(|p| NodeProfile::new(p.mu(), r.clone(), p.sigma2_v()))
            .collect::<Result<_, _>>()?;
    }
    let w_star = sample_ground_truth(m, seeds.ground_truth)?;

    let y = match &config.y_diag {
        Some(d) => DMatrix::from_diagonal(&DVector::from_column_slice(d)),
        None => DMatrix::identity(m, m),
    };
    let policy_set = |schedule: ThresholdSchedule| -> Result<Vec<TriggerPolicy>, HarnessError> {
        let p = TriggerPolicy::new(y.clone(), schedule).map_err(|e| ConfigError::Validation(vec![e.to_string()]))?;
        Ok(vec![p; n])
    };
    let mut variants = Vec::new();
    for alg in &config.algorithms {
        match alg {
            Algorithm::Atc => variants.push(Variant {
                label: "atc".into(),
                algorithm: Algorithm::Atc,
                policies: vec![TriggerPolicy::always(m); n],
            }),
            Algorithm::NonCoop => variants.push(Variant {
                label: "noncoop".into(),
                algorithm: Algorithm::NonCoop,
                policies: vec![TriggerPolicy::always(m); n],
            }),
            Algorithm::EbAtc => {
                for &d in &config.deltas {
                    variants.push(Variant {
                        label: delta_label(d),
                        algorithm: Algorithm::EbAtc,
                        policies: policy_set(ThresholdSchedule::Constant(d))?,
                    });
                }
                if let Some(s) = &config.delta_schedule {
                    let sched = ThresholdSchedule::piecewise(s.clone())
                        .map_err(|e| ConfigError::Validation(vec![e.to_string()]))?;
                    variants.push(Variant {
                        label: "ebatc_schedule".into(),
                        algorithm: Algorithm::EbAtc,
                        policies: policy_set(sched)?,
                    });
                }
            }
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    if let Some(dup) = variants.iter().find(|v| !seen.insert(v.label.clone())) {
        return Err(ConfigError::Validation(vec![format!("run `{}` listed twice", dup.label)]).into());
    }
    Ok(Setup {
        topology,
        weights,
        profiles,
        w_star,
        variants,
        seeds,
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Worker threads; `None` uses all available cores.
    pub threads: Option<usize>,
    /// Record estimates and average `w° - w_k(i)` over replicas.
    pub track_mean_error: bool,
}

#[derive(Debug, Clone)]
pub struct VariantResult {
    pub label: String,
    pub algorithm: Algorithm,
    pub curves: LearningCurves,
    pub steady: SteadyStateSummary,
    pub audit: GapAudit,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub variants: Vec<VariantResult>,
    pub replica_seeds: Vec<u64>,
    /// Digest of the `(u, v)` stream of each replica; every variant consumed
    /// the same stream.
    pub stream_checksums: Vec<u64>,
    /// Full traces of the leading replicas, indexed `[replica][variant]`.
    pub traces: Vec<Vec<IterationTrace>>,
}

impl ExperimentOutcome {
    pub fn replicas(&self) -> usize {
        self.replica_seeds.len()
    }

    pub fn variant(&self, label: &str) -> Option<&VariantResult> {
        self.variants.iter().find(|v| v.label == label)
    }
}

struct ReplicaResult {
    accumulators: Vec<CurveAccumulator>,
    audits: Vec<GapAudit>,
    checksum: u64,
    traces: Option<Vec<IterationTrace>>,
}

fn run_replica(
    setup: &Setup,
    config: &ExperimentConfig,
    replica: usize,
    track_mean_error: bool,
) -> Result<ReplicaResult, HarnessError> {
    let n = config.nodes;
    let m = config.dimension;
    let step_sizes: Vec<f64> = setup.profiles.iter().map(NodeProfile::mu).collect();
    let mut sims: Vec<Simulator<'_>> = setup
        .variants
        .iter()
        .map(|v| {
            Simulator::new(v.algorithm, &setup.weights, step_sizes.clone(), &v.policies, &setup.w_star)
                .record_estimates(track_mean_error)
        })
        .collect();
    let mut streams = ReplicaStreams::new(setup.seeds.data, replica, n);
    let mut samples = vec![DataSample::zeros(m); n];
    for i in 0..config.horizon {
        streams.fill_instant(i, &setup.profiles, &setup.w_star, &mut samples);
        for (sim, v) in sims.iter_mut().zip(&setup.variants) {
            sim.step(&samples).map_err(|source| HarnessError::Diverged {
                label: v.label.clone(),
                replica,
                source,
                partial: None,
            })?;
        }
    }
    let mut accumulators = Vec::with_capacity(sims.len());
    let mut audits = Vec::with_capacity(sims.len());
    let keep = replica < config.trace_replicas;
    let mut kept = Vec::new();
    for (sim, v) in sims.into_iter().zip(&setup.variants) {
        let trace = sim.into_trace();
        let mut acc = CurveAccumulator::new(config.horizon, n);
        if track_mean_error {
            acc = acc.with_mean_error(m);
        }
        acc.add(&trace, &setup.w_star)?;
        accumulators.push(acc);
        audits.push(match v.algorithm {
            Algorithm::NonCoop => GapAudit::default(),
            _ => audit_gap_bound(&trace, &v.policies),
        });
        if keep {
            kept.push(trace);
        }
    }
    Ok(ReplicaResult {
        accumulators,
        audits,
        checksum: streams.checksum(),
        traces: keep.then_some(kept),
    })
}

struct Reduction {
    accumulators: Vec<CurveAccumulator>,
    audits: Vec<GapAudit>,
    seeds: Vec<u64>,
    checksums: Vec<u64>,
    traces: Vec<Vec<IterationTrace>>,
}

impl Reduction {
    fn finish(self, setup: &Setup, config: &ExperimentConfig) -> Result<ExperimentOutcome, HarnessError> {
        let mut variants = Vec::with_capacity(setup.variants.len());
        for ((acc, audit), v) in self.accumulators.into_iter().zip(self.audits).zip(&setup.variants) {
            let curves = acc.finish(config.window_fraction)?;
            let steady = steady_state(&curves, config.window_fraction)?;
            variants.push(VariantResult {
                label: v.label.clone(),
                algorithm: v.algorithm,
                curves,
                steady,
                audit,
            });
        }
        Ok(ExperimentOutcome {
            variants,
            replica_seeds: self.seeds,
            stream_checksums: self.checksums,
            traces: self.traces,
        })
    }
}

/// Run every replica of every variant on shared data streams.
///
/// Replicas run concurrently in fixed-size chunks and are folded in replica
/// order, so the outcome is identical for any thread count. On divergence the
/// error carries the curves of the replicas that completed before it.
pub fn run_experiment(
    config: &ExperimentConfig,
    setup: &Setup,
    options: RunOptions,
) -> Result<ExperimentOutcome, HarnessError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = options.threads {
        builder = builder.num_threads(t.max(1));
    }
    let pool = builder.build().map_err(|e| HarnessError::ThreadPool(e.to_string()))?;
    let fresh = || {
        let acc = CurveAccumulator::new(config.horizon, config.nodes);
        if options.track_mean_error {
            acc.with_mean_error(config.dimension)
        } else {
            acc
        }
    };
    let mut red = Reduction {
        accumulators: setup.variants.iter().map(|_| fresh()).collect(),
        audits: vec![GapAudit::default(); setup.variants.len()],
        seeds: Vec::with_capacity(config.replicas),
        checksums: Vec::with_capacity(config.replicas),
        traces: Vec::new(),
    };
    let mut start = 0;
    while start < config.replicas {
        let end = (start + REPLICA_CHUNK).min(config.replicas);
        let results: Vec<_> = pool.install(|| {
            (start..end)
                .into_par_iter()
                .map(|r| run_replica(setup, config, r, options.track_mean_error))
                .collect()
        });
        for (r, res) in (start..end).zip(results) {
            match res {
                Ok(rr) => {
                    for (acc, one) in red.accumulators.iter_mut().zip(&rr.accumulators) {
                        acc.merge(one)?;
                    }
                    for (a, b) in red.audits.iter_mut().zip(&rr.audits) {
                        a.merge(b);
                    }
                    red.seeds.push(replica_seed(setup.seeds.data, r));
                    red.checksums.push(rr.checksum);
                    if let Some(t) = rr.traces {
                        red.traces.push(t);
                    }
                }
                Err(HarnessError::Diverged {
                    label, replica, source, ..
                }) => {
                    let partial = if red.seeds.is_empty() {
                        None
                    } else {
                        red.finish(setup, config).ok().map(Box::new)
                    };
                    return Err(HarnessError::Diverged {
                        label,
                        replica,
                        source,
                        partial,
                    });
                }
                Err(e) => return Err(e),
            }
        }
        start = end;
    }
    red.finish(setup, config)
}

/// Flat `key = value` record of a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunManifest {
    pub entries: Vec<(String, String)>,
    pub files: Vec<String>,
}

impl RunManifest {
    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.push((key.into(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        let _ = writeln!(s, "files.count = {}", self.files.len());
        for (i, f) in self.files.iter().enumerate() {
            let _ = writeln!(s, "files.{} = {f}", i + 1);
        }
        s
    }
}

pub const MANIFEST_FILE: &str = "manifest.txt";

fn write_file(dir: &Path, name: &str, content: &str, files: &mut Vec<String>) -> Result<(), HarnessError> {
    let path = dir.join(name);
    fs::write(&path, content).map_err(|source| HarnessError::Io { path, source })?;
    files.push(name.to_string());
    Ok(())
}

/// Steady-state summaries and gap audits, one `key = value` per line.
pub fn summary_text(outcome: &ExperimentOutcome) -> String {
    let mut s = String::new();
    for v in &outcome.variants {
        s.push_str(&v.steady.to_key_value(&v.label));
        let _ = writeln!(s, "{}.gap_checked = {}", v.label, v.audit.checked);
        let _ = writeln!(s, "{}.gap_violations = {}", v.label, v.audit.violations);
        let _ = writeln!(s, "{}.gap_max_ratio = {}", v.label, v.audit.max_ratio);
        let _ = writeln!(s, "{}.trigger_mismatches = {}", v.label, v.audit.trigger_mismatches);
    }
    s
}

/// Write curves, node rates, traces, inputs and the manifest into `dir`.
///
/// `wall_clock` and `threads` go only into the manifest; every other file
/// depends on the configuration alone.
pub fn write_outputs(
    dir: &Path,
    config: &ExperimentConfig,
    setup: &Setup,
    outcome: &ExperimentOutcome,
    status: &str,
    wall_clock: f64,
    threads: Option<usize>,
) -> Result<RunManifest, HarnessError> {
    fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut files = Vec::new();
    for v in &outcome.variants {
        write_file(dir, &format!("curves_{}.csv", v.label), &v.curves.to_csv(), &mut files)?;
        write_file(dir, &format!("node_rates_{}.csv", v.label), &v.curves.node_rates_csv(), &mut files)?;
    }
    if !outcome.traces.is_empty() {
        for (vi, v) in setup.variants.iter().enumerate() {
            let mut buf = Vec::new();
            buf.extend_from_slice(IterationTrace::CSV_HEADER.as_bytes());
            buf.push(b'\n');
            for (r, per_variant) in outcome.traces.iter().enumerate() {
                per_variant[vi]
                    .write_csv_rows(r, &mut buf)
                    .expect("writing to a Vec cannot fail");
            }
            let text = String::from_utf8(buf).expect("CSV is ASCII");
            write_file(dir, &format!("trace_{}.csv", v.label), &text, &mut files)?;
        }
    }
    write_file(dir, "profiles.csv", &profiles_table(&setup.profiles), &mut files)?;
    write_file(dir, "topology.txt", &setup.topology.to_edge_list(), &mut files)?;
    write_file(dir, "summary.txt", &summary_text(outcome), &mut files)?;

    let mut man = RunManifest::default();
    man.push("software.name", env!("CARGO_PKG_NAME"));
    man.push("software.version", env!("CARGO_PKG_VERSION"));
    man.push("status", status);
    man.push("config.sha256", config.hash());
    for line in config.canonical().lines() {
        if let Some((k, v)) = line.split_once(" = ") {
            man.push(format!("config.{k}"), v);
        }
    }
    man.push("seed.scheme", SEED_SCHEME);
    man.push("seed.master", setup.seeds.master);
    man.push("seed.topology", setup.seeds.topology);
    man.push("seed.profiles", setup.seeds.profiles);
    man.push("seed.ground_truth", setup.seeds.ground_truth);
    man.push("seed.data", setup.seeds.data);
    man.push("runs", setup.variants.iter().map(|v| v.label.as_str()).collect::<Vec<_>>().join(","));
    man.push("replicas.completed", outcome.replicas());
    for (r, (seed, sum)) in outcome.replica_seeds.iter().zip(&outcome.stream_checksums).enumerate() {
        man.push(format!("replica.{r}.seed"), seed);
        man.push(format!("replica.{r}.stream_checksum"), format!("{sum:016x}"));
    }
    man.push("threads", threads.map_or_else(|| "auto".to_string(), |t| t.to_string()));
    man.push("wall_clock_seconds", format!("{wall_clock:.3}"));
    files.push(MANIFEST_FILE.to_string());
    man.files = files;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, man.to_text()).map_err(|source| HarnessError::Io { path, source })?;
    Ok(man)
}

/// Run and write outputs. A divergence still writes what finished before it,
/// with `status = aborted`, and then returns the error.
pub fn simulate(config: &ExperimentConfig, dir: &Path, threads: Option<usize>) -> Result<RunManifest, HarnessError> {
    let setup = prepare(config)?;
    let clock = Instant::now();
    match run_experiment(config, &setup, RunOptions { threads, ..Default::default() }) {
        Ok(outcome) => write_outputs(
            dir,
            config,
            &setup,
            &outcome,
            "complete",
            clock.elapsed().as_secs_f64(),
            threads,
        ),
        Err(HarnessError::Diverged {
            label,
            replica,
            source,
            partial,
        }) => {
            if let Some(p) = &partial {
                write_outputs(dir, config, &setup, p, "aborted", clock.elapsed().as_secs_f64(), threads)?;
            }
            Err(HarnessError::Diverged {
                label,
                replica,
                source,
                partial,
            })
        }
        Err(e) => Err(e),
    }
}

/// Closed-form reports for every cooperative run, without simulation.
#[derive(Debug, Clone)]
pub struct AnalysisSummary {
    pub stability: StabilityReport,
    /// `(label, report)`; the trigger term of the MSD bound is omitted.
    pub bounds: Vec<(String, BoundReport)>,
}

impl AnalysisSummary {
    pub fn to_key_value(&self) -> String {
        let mut s = self.stability.to_key_value();
        for (label, b) in &self.bounds {
            for line in b.to_key_value().lines() {
                let _ = writeln!(s, "{label}.{line}");
            }
        }
        s
    }
}

pub fn analyze(config: &ExperimentConfig) -> Result<AnalysisSummary, HarnessError> {
    let setup = prepare(config)?;
    let ws = build_workspace(&setup.weights, &setup.profiles, WorkspaceOptions::default())?;
    let stability = stability_report(&setup.weights, &setup.profiles, &ws)?;
    let bounds = setup
        .variants
        .iter()
        .filter(|v| v.algorithm != Algorithm::NonCoop)
        .map(|v| {
            bound_report(&setup.weights, &setup.profiles, &v.policies, &ws, None).map(|b| (v.label.clone(), b))
        })
        .collect::<Result<_, _>>()?;
    Ok(AnalysisSummary { stability, bounds })
}

/// Empirical steady-state values against the closed-form bounds for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub label: String,
    /// Largest block maximum norm of the replica-averaged error over the
    /// steady-state window.
    pub mean_error_empirical: f64,
    pub mean_error_bound: f64,
    /// Mean linear network MSD over the steady-state window.
    pub msd_empirical: f64,
    pub msd_bound: f64,
}

impl ComparisonRow {
    pub fn mean_error_slack(&self) -> f64 {
        self.mean_error_bound - self.mean_error_empirical
    }

    pub fn msd_slack(&self) -> f64 {
        self.msd_bound - self.msd_empirical
    }
}

#[derive(Debug, Clone)]
pub struct ComparisonReport {
    pub stability: StabilityReport,
    pub rows: Vec<ComparisonRow>,
    pub outcome: ExperimentOutcome,
}

impl ComparisonReport {
    pub fn row(&self, label: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub const CSV_HEADER: &'static str =
        "run,mean_error_empirical,mean_error_bound,mean_error_slack,msd_empirical,msd_bound,msd_slack";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.label,
                r.mean_error_empirical,
                r.mean_error_bound,
                r.mean_error_slack(),
                r.msd_empirical,
                r.msd_bound,
                r.msd_slack()
            );
        }
        s
    }

    pub fn to_key_value(&self) -> String {
        let mut s = self.stability.to_key_value();
        for r in &self.rows {
            let l = &r.label;
            let _ = writeln!(s, "{l}.mean_error_empirical = {}", r.mean_error_empirical);
            let _ = writeln!(s, "{l}.mean_error_bound = {}", r.mean_error_bound);
            let _ = writeln!(s, "{l}.mean_error_slack = {}", r.mean_error_slack());
            let _ = writeln!(s, "{l}.msd_empirical = {}", r.msd_empirical);
            let _ = writeln!(s, "{l}.msd_bound = {}", r.msd_bound);
            let _ = writeln!(s, "{l}.msd_slack = {}", r.msd_slack());
        }
        s
    }
}

/// Simulate a small network and set its steady state against both bounds.
/// The MSD bound uses the measured per-node trigger rates.
pub fn run_bound_comparison(config: &ExperimentConfig, threads: Option<usize>) -> Result<ComparisonReport, HarnessError> {
    let setup = prepare(config)?;
    let ws = build_workspace(&setup.weights, &setup.profiles, WorkspaceOptions::default())?;
    ws.second_order()?;
    let stability = stability_report(&setup.weights, &setup.profiles, &ws)?;
    let cooperative: Vec<&Variant> = setup
        .variants
        .iter()
        .filter(|v| v.algorithm != Algorithm::NonCoop)
        .collect();
    let mean_bounds = cooperative
        .iter()
        .map(|v| mean_error_bound(&setup.weights, &setup.profiles, &v.policies))
        .collect::<Result<Vec<_>, _>>()?;
    let outcome = run_experiment(
        config,
        &setup,
        RunOptions {
            threads,
            track_mean_error: true,
        },
    )?;
    let mut rows = Vec::with_capacity(cooperative.len());
    for (v, mean_bound) in cooperative.iter().zip(mean_bounds) {
        let res = outcome.variant(&v.label).expect("every variant has a result");
        let (start, end) = res.steady.window;
        let mean_error_empirical = (start..end)
            .filter_map(|i| res.curves.mean_error_block_max(i))
            .fold(0.0, f64::max);
        let report = bound_report(
            &setup.weights,
            &setup.profiles,
            &v.policies,
            &ws,
            Some(&res.curves.per_node_trigger_rate),
        )?;
        rows.push(ComparisonRow {
            label: v.label.clone(),
            mean_error_empirical,
            mean_error_bound: mean_bound,
            msd_empirical: res.steady.msd_ss_linear,
            msd_bound: report.msd_upper_bound.unwrap_or(f64::INFINITY),
        });
    }
    Ok(ComparisonReport {
        stability,
        rows,
        outcome,
    })
}
