//! Declarative experiments: instance and network sources, per-algorithm
//! parameter rules, oracle caching, trace/summary output and scalability
//! sweeps.

use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::allocators::{
    default_parameters, heterogeneous_betas, run_with, AgentState, Algorithm, AlgorithmConfig, RunOptions,
};
use crate::error::{Error, Result};
use crate::graph::{build_graph, MatrixKind, Network, Topology, TopologyFile, WeightRule};
use crate::metrics::{delta_bound_extra, delta_bound_p_extra, fit_geometric_rate, Field, FitWindow, RateFit, RoundMetrics};
use crate::oracle::{kkt_check, write_json, KktReport, OracleCache, OracleSettings, OracleSolution};
use crate::problem::{generate_conditioned_instance, generate_instance, InstanceFile, ProblemInstance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InstanceSource {
    Generate {
        n: usize,
        p: usize,
        seed: u64,
        #[serde(default)]
        boxes: bool,
        #[serde(default)]
        ensure_active_boxes: bool,
    },
    /// Unconstrained quadratics with `μ = 1` and `L = kappa`.
    GenerateConditioned { n: usize, p: usize, kappa: f64, seed: u64 },
    Load(PathBuf),
}

fn default_kind() -> MatrixKind {
    MatrixKind::HalfIMinusW
}

fn default_rule() -> WeightRule {
    WeightRule::LazyMetropolis
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphFamily {
    Path,
    Star,
    Complete,
    /// Random connected graph with the configured connectivity ratio.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum NetworkSource {
    Generate {
        ratio: f64,
        seed: u64,
        #[serde(default = "default_kind")]
        kind: MatrixKind,
        #[serde(default = "default_rule")]
        rule: WeightRule,
    },
    Family {
        family: GraphFamily,
        #[serde(default = "default_kind")]
        kind: MatrixKind,
        #[serde(default = "default_rule")]
        rule: WeightRule,
    },
    Load(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CRule {
    /// Per-algorithm default of [`crate::allocators::suggest_parameters`].
    Auto,
    /// `c = scale / sqrt(μ L λ̂)`.
    Spectral,
    /// `c = scale · n / sqrt(μ L)`.
    SizeScaled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CParam {
    Value(f64),
    Rule(CRule),
    Scaled { rule: CRule, scale: f64 },
}

impl Default for CParam {
    fn default() -> Self {
        CParam::Rule(CRule::Auto)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaRule {
    /// `β_i = c λmax(Ł)`.
    Auto,
    /// `β_i = φ_i c λmax(Ł)`, `φ_i ~ U[1, 1.5]`.
    Heterogeneous,
    /// `β_i = c`.
    EqualC,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BetaParam {
    Values(Vec<f64>),
    Rule(BetaRule),
}

impl Default for BetaParam {
    fn default() -> Self {
        BetaParam::Rule(BetaRule::Auto)
    }
}

fn default_max_rounds() -> usize {
    10_000
}

fn default_stop_tol() -> f64 {
    1e-10
}

fn default_one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmSpec {
    pub algorithm: Algorithm,
    #[serde(default)]
    pub c: CParam,
    #[serde(default)]
    pub betas: BetaParam,
    #[serde(default = "default_max_rounds")]
    pub max_rounds: usize,
    #[serde(default = "default_stop_tol")]
    pub stop_tol: f64,
    #[serde(default = "default_one")]
    pub record_every: usize,
    /// Seed of the heterogeneous `β` draw.
    #[serde(default)]
    pub seed: u64,
    /// Output file stem; defaults to `<index>_<algorithm>`.
    #[serde(default)]
    pub label: Option<String>,
    /// Allows step sizes outside the convergence conditions.
    #[serde(default)]
    pub unchecked: bool,
}

impl AlgorithmSpec {
    pub fn new(algorithm: Algorithm) -> Self {
        Self {
            algorithm,
            c: CParam::default(),
            betas: BetaParam::default(),
            max_rounds: default_max_rounds(),
            stop_tol: default_stop_tol(),
            record_every: 1,
            seed: 0,
            label: None,
            unchecked: false,
        }
    }

    /// Concrete configuration for an instance and network.
    pub fn resolve(&self, instance: &ProblemInstance, network: &Network) -> Result<AlgorithmConfig> {
        let (mu, l) = (instance.mu_const(), instance.l_const());
        let need_mu = |what: &str| {
            if mu > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} needs a strongly convex instance")))
            }
        };
        let (rule, scale) = match &self.c {
            CParam::Value(v) => (None, *v),
            CParam::Rule(r) => (Some(*r), 1.0),
            CParam::Scaled { rule, scale } => (Some(*rule), *scale),
        };
        let mut config = match rule {
            None => AlgorithmConfig::new(self.algorithm, scale, Vec::new()),
            Some(CRule::Auto) => {
                let mut cfg = default_parameters(instance, network, self.algorithm)?;
                cfg.c *= scale;
                cfg
            }
            Some(CRule::Spectral) => {
                need_mu("spectral")?;
                let c = scale / (mu * l * network.lambda_min_nz()).sqrt();
                AlgorithmConfig::new(self.algorithm, c, Vec::new())
            }
            Some(CRule::SizeScaled) => {
                need_mu("size_scaled")?;
                let c = scale * instance.n() as f64 / (mu * l).sqrt();
                AlgorithmConfig::new(self.algorithm, c, Vec::new())
            }
        };
        let n = instance.n();
        let c = config.c;
        config.betas = match (&self.betas, self.algorithm) {
            (_, Algorithm::MirrorExtra) => Vec::new(),
            (BetaParam::Values(v), _) => v.clone(),
            (BetaParam::Rule(BetaRule::Auto), _) => vec![c * network.lambda_max(); n],
            (BetaParam::Rule(BetaRule::Heterogeneous), _) => heterogeneous_betas(n, c, network.lambda_max(), self.seed),
            (BetaParam::Rule(BetaRule::EqualC), _) => vec![c; n],
        };
        config.max_rounds = self.max_rounds;
        config.stop_tol = self.stop_tol;
        config.record_every = self.record_every;
        Ok(config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSpec {
    #[serde(default = "default_oracle_tol")]
    pub tol: f64,
    #[serde(default = "default_oracle_iters")]
    pub max_iters: usize,
    #[serde(default = "default_true")]
    pub accelerated: bool,
}

fn default_oracle_tol() -> f64 {
    1e-10
}

fn default_oracle_iters() -> usize {
    1_000_000
}

fn default_true() -> bool {
    true
}

impl Default for OracleSpec {
    fn default() -> Self {
        Self {
            tol: default_oracle_tol(),
            max_iters: default_oracle_iters(),
            accelerated: true,
        }
    }
}

impl OracleSpec {
    pub fn settings(&self) -> OracleSettings {
        OracleSettings {
            tol: self.tol,
            max_iters: self.max_iters,
            accelerated: self.accelerated,
            initial: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub instance: InstanceSource,
    pub network: NetworkSource,
    pub algorithms: Vec<AlgorithmSpec>,
    #[serde(default)]
    pub oracle: OracleSpec,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Normalized-residual target for sweep iteration counts.
    #[serde(default = "default_sweep_target")]
    pub sweep_target: f64,
    /// KKT tolerance reported in the summary.
    #[serde(default = "default_kkt_tol")]
    pub kkt_tol: f64,
}

fn default_sweep_target() -> f64 {
    1e-6
}

fn default_kkt_tol() -> f64 {
    1e-6
}

impl ExperimentSpec {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn resolve_path(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn load_instance(path: &Path) -> Result<ProblemInstance> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str::<InstanceFile>(&text)?.into_instance()
}

pub fn load_network(path: &Path) -> Result<Network> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str::<TopologyFile>(&text)?.into_network()
}

/// Builds the instance; `n_override` replaces `n` of generated sources.
pub fn materialize_instance(source: &InstanceSource, base: &Path, n_override: Option<usize>) -> Result<ProblemInstance> {
    match source {
        InstanceSource::Generate {
            n,
            p,
            seed,
            boxes,
            ensure_active_boxes,
        } => generate_instance(n_override.unwrap_or(*n), *p, *seed, *boxes, *ensure_active_boxes),
        InstanceSource::GenerateConditioned { n, p, kappa, seed } => {
            generate_conditioned_instance(n_override.unwrap_or(*n), *p, *kappa, *seed)
        }
        InstanceSource::Load(path) => {
            if n_override.is_some() {
                return Err(Error::Config("cannot resize a loaded instance".into()));
            }
            load_instance(&resolve_path(base, path))
        }
    }
}

pub fn materialize_network(source: &NetworkSource, base: &Path, n: usize) -> Result<Network> {
    match source {
        NetworkSource::Generate { ratio, seed, kind, rule } => {
            Network::with_rule(build_graph(n, *ratio, *seed)?, *kind, *rule)
        }
        NetworkSource::Family { family, kind, rule } => {
            let topo = match family {
                GraphFamily::Path => Topology::path(n)?,
                GraphFamily::Star => Topology::star(n)?,
                GraphFamily::Complete => Topology::complete(n)?,
                GraphFamily::Random => {
                    return Err(Error::Config("random family needs a ratio; use \"generate\"".into()));
                }
            };
            Network::with_rule(topo, *kind, *rule)
        }
        NetworkSource::Load(path) => {
            let net = load_network(&resolve_path(base, path))?;
            if net.n() != n {
                return Err(Error::Dimension(format!(
                    "network file has {} agents, instance has {n}",
                    net.n()
                )));
            }
            Ok(net)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Converged,
    MaxRounds,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub algorithm: Algorithm,
    pub status: RunStatus,
    pub c: f64,
    pub beta_min: Option<f64>,
    pub beta_max: Option<f64>,
    pub rounds: usize,
    pub message_count: u64,
    pub final_metrics: Option<RoundMetrics>,
    pub rate_fit: Option<RateFit>,
    /// Analytic contraction bound for the configured parameters, when one applies.
    pub delta_bound: Option<f64>,
    pub kkt: Option<KktReport>,
    pub trace_file: Option<String>,
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSummary {
    pub n: usize,
    pub edges: usize,
    pub kind: MatrixKind,
    pub rule: Option<WeightRule>,
    pub lambda_max: f64,
    pub lambda_min_nz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSummary {
    pub iterations: usize,
    pub feasibility: f64,
    pub gradient_consensus: f64,
    pub complementarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub instance_fingerprint: String,
    pub n: usize,
    pub p: usize,
    pub boxes: bool,
    pub mu: f64,
    pub l: f64,
    pub network: NetworkSummary,
    pub oracle: OracleSummary,
    pub runs: Vec<RunSummary>,
}

impl ExperimentSummary {
    pub fn any_diverged(&self) -> bool {
        self.runs.iter().any(|r| r.status == RunStatus::Diverged)
    }
}

fn network_summary(net: &Network) -> NetworkSummary {
    NetworkSummary {
        n: net.n(),
        edges: net.topology().edges().len(),
        kind: net.kind(),
        rule: net.rule(),
        lambda_max: net.lambda_max(),
        lambda_min_nz: net.lambda_min_nz(),
    }
}

/// Analytic contraction bound for a configuration, if its preconditions hold.
pub fn analytic_delta_bound(instance: &ProblemInstance, network: &Network, config: &AlgorithmConfig) -> Option<f64> {
    let (mu, l) = (instance.mu_const(), instance.l_const());
    if !(mu > 0.0) || instance.boxes().is_some() {
        return None;
    }
    match config.algorithm {
        Algorithm::MirrorPExtra => {
            let beta = config.betas.iter().fold(0.0f64, |a, b| a.max(*b));
            Some(delta_bound_p_extra(mu, l, config.c, beta, network.lambda_min_nz()))
        }
        Algorithm::MirrorExtra => {
            delta_bound_extra(mu, l, config.c, network.lambda_min_nz(), network.lambda_max()).ok()
        }
        Algorithm::MirrorPgExtra => None,
    }
}

/// Result of one configured run inside an experiment.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub summary: RunSummary,
    pub trace: Option<crate::metrics::IterationTrace>,
}

/// Runs one algorithm against a prepared instance, network and oracle
/// solution. Divergence is reported in the summary instead of as an error.
pub fn run_configured(
    instance: &ProblemInstance,
    network: &Network,
    oracle: &OracleSolution,
    spec: &AlgorithmSpec,
    label: &str,
    kkt_tol: f64,
) -> Result<RunOutcome> {
    let config = spec.resolve(instance, network)?;
    let options = RunOptions {
        initial: None,
        oracle: Some(oracle),
        skip_step_size_check: spec.unchecked,
    };
    let beta_min = (!config.betas.is_empty()).then(|| config.betas.iter().fold(f64::INFINITY, |a, b| a.min(*b)));
    let beta_max = (!config.betas.is_empty()).then(|| config.betas.iter().fold(0.0f64, |a, b| a.max(*b)));
    let mut summary = RunSummary {
        label: label.to_string(),
        algorithm: config.algorithm,
        status: RunStatus::MaxRounds,
        c: config.c,
        beta_min,
        beta_max,
        rounds: 0,
        message_count: 0,
        final_metrics: None,
        rate_fit: None,
        delta_bound: analytic_delta_bound(instance, network, &config),
        kkt: None,
        trace_file: None,
        diagnostic: None,
    };
    match run_with(instance, network, &config, &options, &mut crate::allocators::NoHooks) {
        Ok(trace) => {
            summary.status = if trace.converged {
                RunStatus::Converged
            } else {
                RunStatus::MaxRounds
            };
            summary.rounds = trace.rounds_completed;
            summary.message_count = trace.messages_sent;
            summary.final_metrics = trace.last().copied();
            summary.rate_fit = fit_geometric_rate(&trace, Field::DistToStar, FitWindow::Auto).ok();
            summary.kkt = Some(kkt_check(instance, network, &trace.final_x, kkt_tol)?);
            Ok(RunOutcome {
                summary,
                trace: Some(trace),
            })
        }
        Err(Error::Divergence { round, reason }) => {
            summary.status = RunStatus::Diverged;
            summary.rounds = round;
            summary.diagnostic = Some(format!("divergence at round {round}: {reason}"));
            Ok(RunOutcome { summary, trace: None })
        }
        Err(e) => Err(e),
    }
}

/// Output of [`run_experiment`].
#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub summary: ExperimentSummary,
    pub summary_path: PathBuf,
    pub trace_paths: Vec<PathBuf>,
}

/// Runs every configured algorithm, writing `instance.json`,
/// `network.json`, one `<label>.trace.csv` per run and `summary.json`
/// into `output_dir`. Oracle solutions are cached under `oracle_cache/`.
pub fn run_experiment(spec: &ExperimentSpec, base_dir: &Path, output_dir: &Path) -> Result<ExperimentReport> {
    if spec.algorithms.is_empty() {
        return Err(Error::Config("experiment lists no algorithms".into()));
    }
    let instance = materialize_instance(&spec.instance, base_dir, None)?;
    let network = materialize_network(&spec.network, base_dir, instance.n())?;
    std::fs::create_dir_all(output_dir).map_err(|e| Error::io(output_dir, e))?;
    write_json(&output_dir.join("instance.json"), &instance.to_file()?)?;
    write_json(&output_dir.join("network.json"), &network.to_file())?;

    let cache = OracleCache::new(output_dir.join("oracle_cache"));
    let oracle = cache.solve(&instance, &spec.oracle.settings())?;

    let mut runs = Vec::with_capacity(spec.algorithms.len());
    let mut trace_paths = Vec::new();
    for (idx, alg) in spec.algorithms.iter().enumerate() {
        let label = alg
            .label
            .clone()
            .unwrap_or_else(|| format!("{idx}_{}", alg.algorithm.name()));
        let outcome = run_configured(&instance, &network, &oracle, alg, &label, spec.kkt_tol)?;
        let mut summary = outcome.summary;
        if let Some(trace) = &outcome.trace {
            let file = format!("{label}.trace.csv");
            let path = output_dir.join(&file);
            trace.write_csv(&path)?;
            summary.trace_file = Some(file);
            trace_paths.push(path);
        }
        runs.push(summary);
    }

    let summary = ExperimentSummary {
        instance_fingerprint: instance.fingerprint()?,
        n: instance.n(),
        p: instance.p(),
        boxes: instance.boxes().is_some(),
        mu: instance.mu_const(),
        l: instance.l_const(),
        network: network_summary(&network),
        oracle: OracleSummary {
            iterations: oracle.iterations_used,
            feasibility: oracle.kkt_residuals.feasibility,
            gradient_consensus: oracle.kkt_residuals.gradient_consensus,
            complementarity: oracle.kkt_residuals.complementarity,
        },
        runs,
    };
    let summary_path = output_dir.join("summary.json");
    write_json(&summary_path, &summary)?;
    Ok(ExperimentReport {
        summary,
        summary_path,
        trace_paths,
    })
}

/// Rounds until `normalized_residual <= target`, or `None` if `max_rounds`
/// passes first. Divergence is returned as an error.
pub fn iterations_to_target(
    instance: &ProblemInstance,
    network: &Network,
    oracle: &OracleSolution,
    config: &AlgorithmConfig,
    target: f64,
    skip_step_size_check: bool,
) -> Result<Option<usize>> {
    let mut cfg = config.clone();
    cfg.stop_tol = 0.0;
    cfg.record_every = cfg.max_rounds.max(1);
    let mut hit = None;
    let mut hook = |m: &RoundMetrics, _: &[AgentState]| {
        if m.normalized_residual <= target {
            hit = Some(m.round);
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    };
    let options = RunOptions {
        initial: None,
        oracle: Some(oracle),
        skip_step_size_check,
    };
    run_with(instance, network, &cfg, &options, &mut hook)?;
    Ok(hit)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Reached,
    NotReached,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    pub label: String,
    pub algorithm: Algorithm,
    pub status: CellStatus,
    pub iterations: Option<usize>,
    pub c: f64,
    pub lambda_min_nz: f64,
    pub lambda_max: f64,
    pub kappa_f: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub label: String,
    /// Least-squares slope of `ln(iterations)` against `ln(n)`.
    pub exponent: Option<f64>,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub family: GraphFamily,
    pub target: f64,
    pub rows: Vec<SweepRow>,
    pub fits: Vec<ScalingFit>,
}

/// Iterations to the normalized-residual target for each `n` and each
/// configured algorithm, plus a log-log fit per algorithm. Divergent or
/// unfinished cells are recorded and the sweep continues.
pub fn sweep_scalability(
    base: &ExperimentSpec,
    base_dir: &Path,
    n_list: &[usize],
    family: GraphFamily,
) -> Result<SweepReport> {
    if n_list.is_empty() {
        return Err(Error::Config("empty n list".into()));
    }
    let (kind, rule) = match &base.network {
        NetworkSource::Generate { kind, rule, .. } | NetworkSource::Family { kind, rule, .. } => (*kind, *rule),
        NetworkSource::Load(_) => (default_kind(), default_rule()),
    };
    let mut rows = Vec::new();
    for &n in n_list {
        let instance = materialize_instance(&base.instance, base_dir, Some(n))?;
        if instance.boxes().is_some() {
            return Err(Error::Config("scalability sweeps need unconstrained instances".into()));
        }
        let source = match (family, &base.network) {
            (GraphFamily::Random, NetworkSource::Generate { ratio, seed, .. }) => NetworkSource::Generate {
                ratio: *ratio,
                seed: *seed,
                kind,
                rule,
            },
            (GraphFamily::Random, _) => {
                return Err(Error::Config("random sweeps need a generated base network".into()));
            }
            (f, _) => NetworkSource::Family { family: f, kind, rule },
        };
        let network = materialize_network(&source, base_dir, n)?;
        let oracle = crate::oracle::solve_centralized(&instance, &base.oracle.settings())?;
        for (idx, alg) in base.algorithms.iter().enumerate() {
            let label = alg
                .label
                .clone()
                .unwrap_or_else(|| format!("{idx}_{}", alg.algorithm.name()));
            let config = alg.resolve(&instance, &network)?;
            let (status, iterations) =
                match iterations_to_target(&instance, &network, &oracle, &config, base.sweep_target, alg.unchecked) {
                    Ok(Some(k)) => (CellStatus::Reached, Some(k)),
                    Ok(None) => (CellStatus::NotReached, None),
                    Err(Error::Divergence { .. }) => (CellStatus::Diverged, None),
                    Err(e) => return Err(e),
                };
            rows.push(SweepRow {
                n,
                label,
                algorithm: alg.algorithm,
                status,
                iterations,
                c: config.c,
                lambda_min_nz: network.lambda_min_nz(),
                lambda_max: network.lambda_max(),
                kappa_f: instance.l_const() / instance.mu_const(),
            });
        }
    }
    let mut labels: Vec<String> = Vec::new();
    for r in &rows {
        if !labels.contains(&r.label) {
            labels.push(r.label.clone());
        }
    }
    let fits = labels
        .into_iter()
        .map(|label| {
            let pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.label == label)
                .filter_map(|r| r.iterations.filter(|k| *k > 0).map(|k| ((r.n as f64).ln(), (k as f64).ln())))
                .collect();
            let exponent = (pts.len() >= 2).then(|| log_log_slope(&pts));
            ScalingFit {
                label,
                exponent,
                points: pts.len(),
            }
        })
        .collect();
    Ok(SweepReport {
        family,
        target: base.sweep_target,
        rows,
        fits,
    })
}

fn log_log_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

impl SweepReport {
    /// One line per cell: `n,label,status,iterations,c,lambda_min_nz,kappa_f`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,label,status,iterations,c,lambda_min_nz,kappa_f\n");
        for r in &self.rows {
            let status = match r.status {
                CellStatus::Reached => "reached",
                CellStatus::NotReached => "not_reached",
                CellStatus::Diverged => "diverged",
            };
            let it = r.iterations.map_or(String::new(), |k| k.to_string());
            out.push_str(&format!(
                "{},{},{},{},{:.16e},{:.16e},{:.16e}\n",
                r.n, r.label, status, it, r.c, r.lambda_min_nz, r.kappa_f
            ));
        }
        out
    }
}
