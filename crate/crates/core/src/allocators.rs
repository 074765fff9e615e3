//! Synchronous round engine for Mirror-P-EXTRA, Mirror-EXTRA and
//! Mirror-PG-EXTRA.
//!
//! Every round, agent `i` broadcasts one payload `m_i^k` and forms
//! `y_i^k = y_i^{k-1} + Σ_j Ł_ij m_j^k` from the round-start snapshot, then
//! updates with the anchor `v_i = r_i - 2c y_i^k + c y_i^{k-1}`.

use std::ops::ControlFlow;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Network;
use crate::metrics::{IterationTrace, MetricsTracker, RoundMetrics};
use crate::oracle::OracleSolution;
use crate::problem::ProblemInstance;
use crate::prox::{box_project_in_place, prox_step_from, InnerSettings, ProxSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    MirrorPExtra,
    MirrorExtra,
    MirrorPgExtra,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::MirrorPExtra, Algorithm::MirrorExtra, Algorithm::MirrorPgExtra];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::MirrorPExtra => "mirror_p_extra",
            Algorithm::MirrorExtra => "mirror_extra",
            Algorithm::MirrorPgExtra => "mirror_pg_extra",
        }
    }

    fn uses_betas(self) -> bool {
        !matches!(self, Algorithm::MirrorExtra)
    }

    fn has_gradient_step(self) -> bool {
        !matches!(self, Algorithm::MirrorPExtra)
    }
}

/// Relative slack in the spectral check of `B - cŁ ⪰ 0`.
pub const PSD_RTOL: f64 = 1e-12;
/// `‖X‖_F` above `DIVERGENCE_FACTOR · (1 + ‖r‖_F)` aborts a run.
pub const DIVERGENCE_FACTOR: f64 = 1e12;
/// Seed offset for heterogeneous `β_i` draws.
pub const BETA_SEED_OFFSET: u64 = 0x5EED_BE7A;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmConfig {
    pub algorithm: Algorithm,
    pub c: f64,
    /// `β_i`; ignored by Mirror-EXTRA.
    pub betas: Vec<f64>,
    pub max_rounds: usize,
    /// Stop once `sqrt(grad_consensus_sq + feas_dual_sq) <= stop_tol`.
    pub stop_tol: f64,
    pub record_every: usize,
    #[serde(skip)]
    pub inner: InnerSettings,
}

impl AlgorithmConfig {
    pub fn new(algorithm: Algorithm, c: f64, betas: Vec<f64>) -> Self {
        Self {
            algorithm,
            c,
            betas,
            max_rounds: 1000,
            stop_tol: 1e-10,
            record_every: 1,
            inner: InnerSettings::default(),
        }
    }

    /// Checks shapes, box compatibility and both step-size conditions.
    pub fn validate(&self, instance: &ProblemInstance, network: &Network) -> Result<()> {
        self.validate_structure(instance, network)?;
        self.validate_step_sizes(instance, network)
    }

    fn validate_structure(&self, instance: &ProblemInstance, network: &Network) -> Result<()> {
        if network.n() != instance.n() {
            return Err(Error::Dimension(format!(
                "network has {} agents, instance has {}",
                network.n(),
                instance.n()
            )));
        }
        if !(self.c > 0.0) || !self.c.is_finite() {
            return Err(Error::Config(format!("c must be positive and finite, got {}", self.c)));
        }
        if self.record_every == 0 {
            return Err(Error::Config("record_every must be positive".into()));
        }
        if !(self.stop_tol >= 0.0) {
            return Err(Error::Config("stop_tol must be nonnegative".into()));
        }
        if self.algorithm.uses_betas() {
            if self.betas.len() != instance.n() {
                return Err(Error::Config(format!(
                    "{} betas for {} agents",
                    self.betas.len(),
                    instance.n()
                )));
            }
            if let Some(b) = self.betas.iter().find(|b| !(**b > 0.0) || !b.is_finite()) {
                return Err(Error::Config(format!("betas must be positive, got {b}")));
            }
        }
        if self.algorithm == Algorithm::MirrorExtra && instance.boxes().is_some() {
            return Err(Error::Config("mirror_extra does not support box constraints".into()));
        }
        Ok(())
    }

    fn validate_step_sizes(&self, instance: &ProblemInstance, network: &Network) -> Result<()> {
        if self.algorithm.has_gradient_step() {
            let limit = 1.0 / (2.0 * instance.l_const() * network.lambda_max());
            if self.c >= limit {
                return Err(Error::Config(format!(
                    "c = {} violates c < 1/(2 L λmax) = {limit}",
                    self.c
                )));
            }
        }
        if self.algorithm.uses_betas() {
            let min_eig = min_eig_b_minus_cl(&self.betas, self.c, network);
            let scale = self.betas.iter().fold(0.0f64, |a, b| a.max(*b));
            if min_eig < -PSD_RTOL * scale {
                return Err(Error::Config(format!(
                    "B - cŁ is not positive semidefinite (min eigenvalue {min_eig:e})"
                )));
            }
        }
        Ok(())
    }
}

/// Smallest eigenvalue of `diag(β) - cŁ`.
pub fn min_eig_b_minus_cl(betas: &[f64], c: f64, network: &Network) -> f64 {
    let mut m = -network.l_mat() * c;
    for (i, b) in betas.iter().enumerate() {
        m[(i, i)] += b;
    }
    SymmetricEigen::new(m).eigenvalues.min()
}

/// `β_i = φ_i c λmax(Ł)` with `φ_i ~ U[1, 1.5]`, seeded by `seed + BETA_SEED_OFFSET`.
pub fn heterogeneous_betas(n: usize, c: f64, lambda_max: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(BETA_SEED_OFFSET));
    (0..n).map(|_| rng.random_range(1.0..=1.5) * c * lambda_max).collect()
}

/// Default parameters per algorithm.
///
/// * Mirror-P-EXTRA: `c = 0.01 / sqrt(μ L λ̂)`, `β_i = c λmax`.
/// * Mirror-EXTRA: `c = 0.45 / (L λmax)`.
/// * Mirror-PG-EXTRA: `c = 0.45 / (L λmax)`, `β_i = c λmax`.
pub fn suggest_parameters(instance: &ProblemInstance, network: &Network, algorithm: Algorithm) -> Result<AlgorithmConfig> {
    let config = default_parameters(instance, network, algorithm)?;
    config.validate(instance, network)?;
    Ok(config)
}

/// [`suggest_parameters`] without the final validation.
pub fn default_parameters(instance: &ProblemInstance, network: &Network, algorithm: Algorithm) -> Result<AlgorithmConfig> {
    let (mu, l) = (instance.mu_const(), instance.l_const());
    let n = instance.n();
    let lmax = network.lambda_max();
    let config = match algorithm {
        Algorithm::MirrorPExtra => {
            if !(mu > 0.0) {
                return Err(Error::Config("mirror_p_extra default c needs strong convexity (mu > 0)".into()));
            }
            let c = 0.01 / (mu * l * network.lambda_min_nz()).sqrt();
            AlgorithmConfig::new(algorithm, c, vec![c * lmax; n])
        }
        Algorithm::MirrorExtra => AlgorithmConfig::new(algorithm, 0.45 / (l * lmax), Vec::new()),
        Algorithm::MirrorPgExtra => {
            let c = 0.45 / (l * lmax);
            AlgorithmConfig::new(algorithm, c, vec![c * lmax; n])
        }
    };
    Ok(config)
}

/// Local state of one agent at the start of a round: `x^k`, `s^k`,
/// `y_cur = y^{k-1}` and `y_prev = y^{k-2}`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub x: Vec<f64>,
    pub s: Vec<f64>,
    pub y_cur: Vec<f64>,
    pub y_prev: Vec<f64>,
}

/// Initial states. Default `x^0` is the box projection of `r` (Mirror-EXTRA:
/// `r`); `s^0 = ∇f(x^0)` for Mirror-P-EXTRA and `0` otherwise.
pub fn initial_states(
    instance: &ProblemInstance,
    algorithm: Algorithm,
    x0: Option<&DMatrix<f64>>,
) -> Result<Vec<AgentState>> {
    let x = match x0 {
        Some(x0) => {
            instance.check_shape(x0)?;
            if algorithm != Algorithm::MirrorExtra && instance.project_rows(x0) != *x0 {
                return Err(Error::Config("initial point must lie in the local boxes".into()));
            }
            x0.clone()
        }
        None if algorithm == Algorithm::MirrorExtra => instance.resources().clone(),
        None => instance.project_rows(instance.resources()),
    };
    let p = instance.p();
    let states = (0..instance.n())
        .map(|i| {
            let xi: Vec<f64> = x.row(i).iter().copied().collect();
            let mut s = vec![0.0; p];
            if algorithm == Algorithm::MirrorPExtra {
                instance.objective(i).gradient_into(&xi, &mut s);
            }
            AgentState {
                x: xi,
                s,
                y_cur: vec![0.0; p],
                y_prev: vec![0.0; p],
            }
        })
        .collect();
    Ok(states)
}

/// Round-start snapshot of the payload each agent sends to all neighbors:
/// `s_j` (Mirror-P-EXTRA), `∇f_j(x_j)` (Mirror-EXTRA) or `∇f_j(x_j) + s_j`
/// (Mirror-PG-EXTRA).
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMessages {
    pub payloads: Vec<Vec<f64>>,
    /// Point-to-point messages delivered this round (`Σ_i deg(i)`).
    pub delivered: usize,
}

impl RoundMessages {
    pub fn collect(algorithm: Algorithm, states: &[AgentState], instance: &ProblemInstance, network: &Network) -> Self {
        let payloads = states
            .iter()
            .enumerate()
            .map(|(i, st)| payload(algorithm, st, instance, i))
            .collect();
        let delivered = (0..network.n()).map(|i| network.links(i).len()).sum();
        Self { payloads, delivered }
    }
}

pub(crate) fn payload(algorithm: Algorithm, state: &AgentState, instance: &ProblemInstance, i: usize) -> Vec<f64> {
    match algorithm {
        Algorithm::MirrorPExtra => state.s.clone(),
        Algorithm::MirrorExtra | Algorithm::MirrorPgExtra => {
            let mut g = vec![0.0; state.x.len()];
            instance.objective(i).gradient_into(&state.x, &mut g);
            if algorithm == Algorithm::MirrorPgExtra {
                for (gk, sk) in g.iter_mut().zip(&state.s) {
                    *gk += sk;
                }
            }
            g
        }
    }
}

fn check_states(states: &[AgentState], instance: &ProblemInstance) -> Result<()> {
    let p = instance.p();
    if states.len() != instance.n()
        || states
            .iter()
            .any(|s| s.x.len() != p || s.s.len() != p || s.y_cur.len() != p || s.y_prev.len() != p)
    {
        return Err(Error::Dimension("agent states do not match the instance".into()));
    }
    Ok(())
}

/// One synchronous round of the given algorithm.
pub fn step(
    algorithm: Algorithm,
    states: &[AgentState],
    instance: &ProblemInstance,
    network: &Network,
    config: &AlgorithmConfig,
    round: usize,
) -> Result<Vec<AgentState>> {
    check_states(states, instance)?;
    if network.n() != instance.n() {
        return Err(Error::Dimension("network and instance sizes differ".into()));
    }
    if algorithm == Algorithm::MirrorExtra && instance.boxes().is_some() {
        return Err(Error::Config("mirror_extra does not support box constraints".into()));
    }
    let messages = RoundMessages::collect(algorithm, states, instance, network);
    step_with_messages(algorithm, states, &messages, instance, network, config, round)
}

fn step_with_messages(
    algorithm: Algorithm,
    states: &[AgentState],
    messages: &RoundMessages,
    instance: &ProblemInstance,
    network: &Network,
    config: &AlgorithmConfig,
    round: usize,
) -> Result<Vec<AgentState>> {
    let p = instance.p();
    let c = config.c;
    let rows: Vec<&[f64]> = messages.payloads.iter().map(Vec::as_slice).collect();
    let mut mixed = vec![0.0; p];
    let mut next = Vec::with_capacity(states.len());
    for (i, st) in states.iter().enumerate() {
        network.mix_row(i, &rows, &mut mixed);
        let y_new: Vec<f64> = (0..p).map(|k| st.y_cur[k] + mixed[k]).collect();
        let r = instance.resources().row(i);
        let anchor: Vec<f64> = (0..p).map(|k| r[k] - 2.0 * c * y_new[k] + c * st.y_cur[k]).collect();

        let (x, s) = match algorithm {
            Algorithm::MirrorExtra => (anchor, st.s.clone()),
            Algorithm::MirrorPExtra => {
                let beta = config.betas[i];
                let spec = ProxSpec {
                    objective: instance.objective(i),
                    bounds: instance.box_of(i),
                    tilt: &st.s,
                    anchor: &anchor,
                    beta,
                };
                let x = prox_step_from(&spec, &config.inner, Some(&st.x))
                    .map_err(|e| Error::Agent {
                        agent: i,
                        round,
                        source: Box::new(e),
                    })?
                    .as_slice()
                    .to_vec();
                let s = tracker_update(&st.s, &x, &anchor, beta);
                (x, s)
            }
            Algorithm::MirrorPgExtra => {
                let beta = config.betas[i];
                let mut x: Vec<f64> = (0..p).map(|k| anchor[k] + beta * st.s[k]).collect();
                if let Some(b) = instance.box_of(i) {
                    box_project_in_place(&mut x, b);
                }
                let s = tracker_update(&st.s, &x, &anchor, beta);
                (x, s)
            }
        };
        next.push(AgentState {
            x,
            s,
            y_prev: st.y_cur.clone(),
            y_cur: y_new,
        });
    }
    Ok(next)
}

/// `s^{k+1} = s^k - (x^{k+1} - v) / β`.
fn tracker_update(s: &[f64], x: &[f64], anchor: &[f64], beta: f64) -> Vec<f64> {
    (0..s.len()).map(|k| s[k] - (x[k] - anchor[k]) / beta).collect()
}

pub fn step_mirror_p_extra(
    states: &[AgentState],
    instance: &ProblemInstance,
    network: &Network,
    config: &AlgorithmConfig,
    round: usize,
) -> Result<Vec<AgentState>> {
    step(Algorithm::MirrorPExtra, states, instance, network, config, round)
}

pub fn step_mirror_extra(
    states: &[AgentState],
    instance: &ProblemInstance,
    network: &Network,
    config: &AlgorithmConfig,
    round: usize,
) -> Result<Vec<AgentState>> {
    step(Algorithm::MirrorExtra, states, instance, network, config, round)
}

pub fn step_mirror_pg_extra(
    states: &[AgentState],
    instance: &ProblemInstance,
    network: &Network,
    config: &AlgorithmConfig,
    round: usize,
) -> Result<Vec<AgentState>> {
    step(Algorithm::MirrorPgExtra, states, instance, network, config, round)
}

/// Stacks one field of the agent states into an `n × p` matrix.
pub fn stack(states: &[AgentState], field: impl Fn(&AgentState) -> &[f64]) -> DMatrix<f64> {
    let n = states.len();
    let p = states.first().map_or(0, |s| field(s).len());
    DMatrix::from_fn(n, p, |i, k| field(&states[i])[k])
}

/// Stacked payloads `M^k` of the given states.
pub fn payload_matrix(algorithm: Algorithm, states: &[AgentState], instance: &ProblemInstance) -> DMatrix<f64> {
    let rows: Vec<Vec<f64>> = states
        .iter()
        .enumerate()
        .map(|(i, st)| payload(algorithm, st, instance, i))
        .collect();
    DMatrix::from_fn(rows.len(), instance.p(), |i, k| rows[i][k])
}

/// Frobenius norm of the one-step recursion identity
/// `X^{k+1} - R + c Y^{k+1} + B (S^{k+1} - S^k) - c Ł (M^{k+1} - M^k)`
/// with `Y^{k+1} = Y^k + Ł M^{k+1}`, between consecutive states. It vanishes
/// for all three methods; for Mirror-P-EXTRA it reads
/// `X - R + cY + (B - cŁ)ΔS` and for Mirror-EXTRA `X - R + cY - cŁΔ∇f`.
pub fn recursion_residual(
    algorithm: Algorithm,
    before: &[AgentState],
    after: &[AgentState],
    instance: &ProblemInstance,
    network: &Network,
    config: &AlgorithmConfig,
) -> Result<f64> {
    check_states(before, instance)?;
    check_states(after, instance)?;
    let c = config.c;
    let m_old = payload_matrix(algorithm, before, instance);
    let m_new = payload_matrix(algorithm, after, instance);
    let y_next = stack(after, |s| &s.y_cur) + network.mix(&m_new)?;
    let mut res = stack(after, |s| &s.x) - instance.resources() + y_next * c - network.mix(&(&m_new - &m_old))? * c;
    if algorithm.uses_betas() {
        let ds = stack(after, |s| &s.s) - stack(before, |s| &s.s);
        for i in 0..instance.n() {
            for k in 0..instance.p() {
                res[(i, k)] += config.betas[i] * ds[(i, k)];
            }
        }
    }
    Ok(res.norm())
}

/// Round engine holding the current states and message count.
#[derive(Debug, Clone)]
pub struct Simulation<'a> {
    instance: &'a ProblemInstance,
    network: &'a Network,
    config: &'a AlgorithmConfig,
    states: Vec<AgentState>,
    round: usize,
    messages_sent: u64,
}

impl<'a> Simulation<'a> {
    /// Validates the configuration, including the step-size conditions.
    pub fn new(instance: &'a ProblemInstance, network: &'a Network, config: &'a AlgorithmConfig) -> Result<Self> {
        config.validate(instance, network)?;
        Self::unchecked(instance, network, config, None)
    }

    /// Skips the step-size conditions (shapes and box support are still
    /// checked); `x0` overrides the default initial point.
    pub fn unchecked(
        instance: &'a ProblemInstance,
        network: &'a Network,
        config: &'a AlgorithmConfig,
        x0: Option<&DMatrix<f64>>,
    ) -> Result<Self> {
        config.validate_structure(instance, network)?;
        let states = initial_states(instance, config.algorithm, x0)?;
        Ok(Self {
            instance,
            network,
            config,
            states,
            round: 0,
            messages_sent: 0,
        })
    }

    pub fn with_initial_point(mut self, x0: &DMatrix<f64>) -> Result<Self> {
        self.states = initial_states(self.instance, self.config.algorithm, Some(x0))?;
        self.round = 0;
        self.messages_sent = 0;
        Ok(self)
    }

    pub fn states(&self) -> &[AgentState] {
        &self.states
    }

    /// Number of completed rounds.
    pub fn round(&self) -> usize {
        self.round
    }

    pub fn messages_sent(&self) -> u64 {
        self.messages_sent
    }

    pub fn x(&self) -> DMatrix<f64> {
        stack(&self.states, |s| &s.x)
    }

    /// Runs one round, rejecting non-finite or exploding iterates.
    pub fn step(&mut self) -> Result<()> {
        let messages = RoundMessages::collect(self.config.algorithm, &self.states, self.instance, self.network);
        let next = step_with_messages(
            self.config.algorithm,
            &self.states,
            &messages,
            self.instance,
            self.network,
            self.config,
            self.round,
        )?;
        self.round += 1;
        self.messages_sent += messages.delivered as u64;
        self.states = next;
        self.check_divergence()
    }

    fn check_divergence(&self) -> Result<()> {
        let finite = self.states.iter().all(|s| {
            s.x.iter()
                .chain(&s.s)
                .chain(&s.y_cur)
                .chain(&s.y_prev)
                .all(|v| v.is_finite())
        });
        if !finite {
            return Err(Error::Divergence {
                round: self.round,
                reason: "non-finite iterate".into(),
            });
        }
        let norm = self.states.iter().flat_map(|s| &s.x).map(|v| v * v).sum::<f64>().sqrt();
        let limit = DIVERGENCE_FACTOR * (1.0 + self.instance.resources().norm());
        if norm > limit {
            return Err(Error::Divergence {
                round: self.round,
                reason: format!("‖x‖_F = {norm:e} exceeds {limit:e}"),
            });
        }
        Ok(())
    }
}

/// Callback invoked with the metrics of every round, including round 0.
pub trait RoundHook {
    fn on_round(&mut self, metrics: &RoundMetrics, states: &[AgentState]) -> ControlFlow<()>;
}

/// Hook that never interrupts.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoHooks;

impl RoundHook for NoHooks {
    fn on_round(&mut self, _: &RoundMetrics, _: &[AgentState]) -> ControlFlow<()> {
        ControlFlow::Continue(())
    }
}

impl<F: FnMut(&RoundMetrics, &[AgentState]) -> ControlFlow<()>> RoundHook for F {
    fn on_round(&mut self, metrics: &RoundMetrics, states: &[AgentState]) -> ControlFlow<()> {
        self(metrics, states)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions<'a> {
    pub initial: Option<&'a DMatrix<f64>>,
    /// Enables `dist_to_star` and `normalized_residual`.
    pub oracle: Option<&'a OracleSolution>,
    /// Skip the step-size conditions, e.g. to observe divergence.
    pub skip_step_size_check: bool,
}

/// Runs until the combined residual drops to `stop_tol`, `max_rounds` is
/// reached or a hook breaks.
pub fn run(
    instance: &ProblemInstance,
    network: &Network,
    config: &AlgorithmConfig,
    hooks: &mut dyn RoundHook,
) -> Result<IterationTrace> {
    run_with(instance, network, config, &RunOptions::default(), hooks)
}

pub fn run_with(
    instance: &ProblemInstance,
    network: &Network,
    config: &AlgorithmConfig,
    options: &RunOptions<'_>,
    hooks: &mut dyn RoundHook,
) -> Result<IterationTrace> {
    if !options.skip_step_size_check {
        config.validate(instance, network)?;
    }
    let mut sim = Simulation::unchecked(instance, network, config, options.initial)?;
    let mut tracker = MetricsTracker::new(instance, network, config, options.oracle)?;
    let mut trace = IterationTrace::new(config);

    let m0 = tracker.observe(0, sim.states())?;
    trace.push(m0);
    let mut stop = hooks.on_round(&m0, sim.states()).is_break();
    let mut last = m0;
    while !stop && sim.round() < config.max_rounds {
        sim.step()?;
        let k = sim.round();
        let m = tracker.observe(k, sim.states())?;
        last = m;
        let converged = m.combined_residual() <= config.stop_tol;
        if k % config.record_every == 0 || converged || k == config.max_rounds {
            trace.push(m);
        }
        if converged {
            trace.converged = true;
            stop = true;
        }
        if hooks.on_round(&m, sim.states()).is_break() {
            stop = true;
        }
    }
    if trace.rows.last().map(|r| r.round) != Some(last.round) {
        trace.push(last);
    }
    trace.rounds_completed = sim.round();
    trace.messages_sent = sim.messages_sent();
    trace.final_x = sim.x();
    Ok(trace)
}
