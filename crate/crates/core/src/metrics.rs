//! Per-round residuals, merit differences, iteration traces and rate
//! estimates.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::allocators::{payload_matrix, stack, AgentState, Algorithm, AlgorithmConfig};
use crate::error::{Error, Result};
use crate::graph::{laplacian_quadratic, Network};
use crate::oracle::OracleSolution;
use crate::problem::{aggregate_feasibility_residual, ProblemInstance};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    /// `⟨M, ŁM⟩` for the stacked payload `M` (`s`, `∇f` or `∇f + s`).
    pub grad_consensus_sq: f64,
    /// `‖X - R + cY‖_F²` with `Y = Y_cur + ŁM`.
    pub feas_dual_sq: f64,
    /// Successive merit difference; 0 at round 0.
    pub merit_diff: f64,
    /// `‖X - X*‖_F`; 0 without an oracle solution.
    pub dist_to_star: f64,
    /// `‖X - X*‖_F / ‖X⁰ - X*‖_F`; 0 without an oracle solution.
    pub normalized_residual: f64,
    /// `‖Σ_i (x_i - r_i)‖`.
    pub sum_violation: f64,
}

impl RoundMetrics {
    /// `sqrt(grad_consensus_sq + feas_dual_sq)`, the quantity the stop rule uses.
    pub fn combined_residual(&self) -> f64 {
        (self.grad_consensus_sq + self.feas_dual_sq).sqrt()
    }

    pub fn get(&self, field: Field) -> f64 {
        match field {
            Field::GradConsensusSq => self.grad_consensus_sq,
            Field::FeasDualSq => self.feas_dual_sq,
            Field::MeritDiff => self.merit_diff,
            Field::DistToStar => self.dist_to_star,
            Field::NormalizedResidual => self.normalized_residual,
            Field::SumViolation => self.sum_violation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    GradConsensusSq,
    FeasDualSq,
    MeritDiff,
    DistToStar,
    NormalizedResidual,
    SumViolation,
}

impl Field {
    pub const ALL: [Field; 6] = [
        Field::GradConsensusSq,
        Field::FeasDualSq,
        Field::MeritDiff,
        Field::DistToStar,
        Field::NormalizedResidual,
        Field::SumViolation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Field::GradConsensusSq => "grad_consensus_sq",
            Field::FeasDualSq => "feas_dual_sq",
            Field::MeritDiff => "merit_diff",
            Field::DistToStar => "dist_to_star",
            Field::NormalizedResidual => "normalized_residual",
            Field::SumViolation => "sum_violation",
        }
    }
}

/// `‖V‖²_{B - cŁ} = Σ_i β_i ‖v_i‖² - c⟨V, ŁV⟩`.
pub fn b_minus_cl_norm_sq(betas: &[f64], c: f64, network: &Network, v: &DMatrix<f64>) -> Result<f64> {
    let mut acc = 0.0;
    for (i, b) in betas.iter().enumerate() {
        acc += b * v.row(i).norm_squared();
    }
    Ok(acc - c * laplacian_quadratic(network, v)?)
}

/// Successive merit difference from two consecutive payload matrices.
///
/// Mirror-P-EXTRA and Mirror-PG-EXTRA: `c⟨M, ŁM⟩ + ‖M_prev - M‖²_{B-cŁ}`.
/// Mirror-EXTRA: `c⟨G, ŁG⟩ + (2/(Lλmax) - 3c)‖G - G_prev‖²_Ł`.
pub fn merit_difference(
    algorithm: Algorithm,
    config: &AlgorithmConfig,
    network: &Network,
    l_const: f64,
    previous: &DMatrix<f64>,
    current: &DMatrix<f64>,
) -> Result<f64> {
    let c = config.c;
    let dq = laplacian_quadratic(network, current)?;
    let delta = previous - current;
    let tail = match algorithm {
        Algorithm::MirrorExtra => {
            (2.0 / (l_const * network.lambda_max()) - 3.0 * c) * laplacian_quadratic(network, &delta)?
        }
        Algorithm::MirrorPExtra | Algorithm::MirrorPgExtra => b_minus_cl_norm_sq(&config.betas, c, network, &delta)?,
    };
    Ok(c * dq + tail)
}

/// Metric computation carrying the previous payload and the initial
/// distance to the oracle solution.
#[derive(Debug, Clone)]
pub struct MetricsTracker<'a> {
    instance: &'a ProblemInstance,
    network: &'a Network,
    config: &'a AlgorithmConfig,
    oracle: Option<&'a OracleSolution>,
    previous_payload: Option<DMatrix<f64>>,
    initial_distance: Option<f64>,
}

impl<'a> MetricsTracker<'a> {
    pub fn new(
        instance: &'a ProblemInstance,
        network: &'a Network,
        config: &'a AlgorithmConfig,
        oracle: Option<&'a OracleSolution>,
    ) -> Result<Self> {
        if let Some(o) = oracle {
            instance.check_shape(&o.x_star)?;
        }
        Ok(Self {
            instance,
            network,
            config,
            oracle,
            previous_payload: None,
            initial_distance: None,
        })
    }

    /// Metrics for `states`; successive calls must be consecutive rounds.
    pub fn observe(&mut self, round: usize, states: &[AgentState]) -> Result<RoundMetrics> {
        let m = payload_matrix(self.config.algorithm, states, self.instance);
        let metrics = compute_round_metrics(
            states,
            self.instance,
            self.network,
            self.config,
            self.previous_payload.as_ref(),
            self.oracle,
            self.initial_distance,
        )?;
        if self.initial_distance.is_none() && self.oracle.is_some() {
            self.initial_distance = Some(metrics.dist_to_star);
        }
        self.previous_payload = Some(m);
        Ok(RoundMetrics { round, ..metrics })
    }
}

/// Metrics of one state snapshot. `previous_payload` is the stacked payload
/// one round earlier (merit is 0 without it); `initial_distance` normalizes
/// `dist_to_star` (the current distance is used when absent).
pub fn compute_round_metrics(
    states: &[AgentState],
    instance: &ProblemInstance,
    network: &Network,
    config: &AlgorithmConfig,
    previous_payload: Option<&DMatrix<f64>>,
    oracle: Option<&OracleSolution>,
    initial_distance: Option<f64>,
) -> Result<RoundMetrics> {
    if states.len() != instance.n() || network.n() != instance.n() {
        return Err(Error::Dimension("states, instance and network sizes differ".into()));
    }
    let m = payload_matrix(config.algorithm, states, instance);
    let x = stack(states, |s| &s.x);
    instance.check_shape(&x)?;
    let grad_consensus_sq = laplacian_quadratic(network, &m)?.max(0.0);
    let y = stack(states, |s| &s.y_cur) + network.mix(&m)?;
    let feas_dual_sq = (&x - instance.resources() + y * config.c).norm_squared();
    let merit_diff = match previous_payload {
        Some(prev) => merit_difference(config.algorithm, config, network, instance.l_const(), prev, &m)?.max(0.0),
        None => 0.0,
    };
    let (dist_to_star, normalized_residual) = match oracle {
        Some(o) => {
            let d = (&x - &o.x_star).norm();
            let d0 = initial_distance.unwrap_or(d);
            (d, if d0 > 0.0 { d / d0 } else { 0.0 })
        }
        None => (0.0, 0.0),
    };
    Ok(RoundMetrics {
        round: 0,
        grad_consensus_sq,
        feas_dual_sq,
        merit_diff,
        dist_to_star,
        normalized_residual,
        sum_violation: aggregate_feasibility_residual(instance, &x)?,
    })
}

/// Recorded metrics of one run plus run-level totals.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationTrace {
    pub algorithm: Algorithm,
    pub c: f64,
    pub betas: Vec<f64>,
    pub rows: Vec<RoundMetrics>,
    pub rounds_completed: usize,
    pub messages_sent: u64,
    pub converged: bool,
    pub final_x: DMatrix<f64>,
}

pub const TRACE_HEADER: &str =
    "round,grad_consensus_sq,feas_dual_sq,merit_diff,dist_to_star,normalized_residual,sum_violation";

impl IterationTrace {
    pub fn new(config: &AlgorithmConfig) -> Self {
        Self {
            algorithm: config.algorithm,
            c: config.c,
            betas: config.betas.clone(),
            rows: Vec::new(),
            rounds_completed: 0,
            messages_sent: 0,
            converged: false,
            final_x: DMatrix::zeros(0, 0),
        }
    }

    pub fn push(&mut self, row: RoundMetrics) {
        self.rows.push(row);
    }

    pub fn last(&self) -> Option<&RoundMetrics> {
        self.rows.last()
    }

    /// `(round, value)` pairs of one field.
    pub fn series(&self, field: Field) -> Vec<(usize, f64)> {
        self.rows.iter().map(|r| (r.round, r.get(field))).collect()
    }

    /// CSV with [`TRACE_HEADER`] and 17 significant digits per value.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.rows.len() + 1));
        out.push_str(TRACE_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{}", r.round);
            for f in Field::ALL {
                let _ = write!(out, ",{:.16e}", r.get(f));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Parses a trace CSV written by [`IterationTrace::to_csv`].
pub fn parse_trace_csv(text: &str) -> Result<Vec<RoundMetrics>> {
    let mut lines = text.lines();
    if lines.next() != Some(TRACE_HEADER) {
        return Err(Error::Config("unexpected trace header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 7 {
                return Err(Error::Config(format!("malformed trace row: {line}")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Config(format!("{e}: {s}")));
            Ok(RoundMetrics {
                round: parts[0].parse().map_err(|e| Error::Config(format!("{e}")))?,
                grad_consensus_sq: num(parts[1])?,
                feas_dual_sq: num(parts[2])?,
                merit_diff: num(parts[3])?,
                dist_to_star: num(parts[4])?,
                normalized_residual: num(parts[5])?,
                sum_violation: num(parts[6])?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonotoneReport {
    pub pass: bool,
    /// Largest excess of `merit(k+1)` over `merit(k)(1 + 1e-9) + 1e-14`.
    pub worst_violation: f64,
}

pub const MERIT_RTOL: f64 = 1e-9;
pub const MERIT_ATOL: f64 = 1e-14;

/// Checks `merit(k+1) <= merit(k)(1 + 1e-9) + 1e-14` over consecutive
/// recorded rows, skipping round 0 where no difference exists.
pub fn check_merit_monotone(trace: &IterationTrace) -> MonotoneReport {
    check_merit_values(&trace.series(Field::MeritDiff))
}

pub fn check_merit_values(series: &[(usize, f64)]) -> MonotoneReport {
    let vals: Vec<f64> = series.iter().filter(|(k, _)| *k > 0).map(|(_, v)| *v).collect();
    let mut worst = 0.0f64;
    for w in vals.windows(2) {
        let excess = w[1] - (w[0] * (1.0 + MERIT_RTOL) + MERIT_ATOL);
        if excess > worst || excess.is_nan() {
            worst = if excess.is_nan() { f64::INFINITY } else { excess };
        }
    }
    MonotoneReport {
        pass: worst == 0.0,
        worst_violation: worst,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SublinearReport {
    pub pass: bool,
    /// `min_tail(k a_k) / (k a_k at the quartile start)`; 0 when the tail is
    /// entirely at the rounding floor.
    pub tail_stat: f64,
    /// Least-squares slope of `k a_k` over the last quartile.
    pub slope: f64,
}

/// Minimum number of recorded rounds for [`check_sublinear`].
pub const SUBLINEAR_MIN_POINTS: usize = 200;

/// Operational `o(1/k)` test on the last quartile of `field`: `k a_k` must
/// trend down and fall below half its value at the quartile start. A tail
/// entirely below `1e4 ε² max(a)` counts as converged.
pub fn check_sublinear(trace: &IterationTrace, field: Field) -> Result<SublinearReport> {
    check_sublinear_values(&trace.series(field))
}

pub fn check_sublinear_values(series: &[(usize, f64)]) -> Result<SublinearReport> {
    let pts: Vec<(usize, f64)> = series.iter().copied().filter(|(k, _)| *k > 0).collect();
    if pts.len() < SUBLINEAR_MIN_POINTS {
        return Err(Error::Config(format!(
            "sublinear check needs {SUBLINEAR_MIN_POINTS} recorded rounds, got {}",
            pts.len()
        )));
    }
    let tail = &pts[pts.len() - pts.len() / 4..];
    let max_all = pts.iter().fold(0.0f64, |a, (_, v)| a.max(*v));
    let floor = 1e4 * f64::EPSILON * f64::EPSILON * max_all;
    if tail.iter().all(|(_, v)| *v <= floor) {
        return Ok(SublinearReport {
            pass: true,
            tail_stat: 0.0,
            slope: 0.0,
        });
    }
    let ka: Vec<(f64, f64)> = tail.iter().map(|(k, v)| (*k as f64, *k as f64 * v)).collect();
    let (slope, _, _) = least_squares(&ka);
    let start = ka[0].1;
    let min_tail = ka.iter().fold(f64::INFINITY, |a, (_, v)| a.min(*v));
    let tail_stat = if start > 0.0 { min_tail / start } else { 0.0 };
    Ok(SublinearReport {
        pass: slope < 0.0 && min_tail < 0.5 * start,
        tail_stat,
        slope,
    })
}

/// Slope, intercept and r² of an ordinary least-squares line.
fn least_squares(pts: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my) * (p.1 - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let r2 = if sxx > 0.0 && syy > 0.0 {
        (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0)
    } else {
        1.0
    };
    (slope, my - slope * mx, r2)
}

/// Values at or below this are excluded from rate fits.
pub const FIT_FLOOR: f64 = 1e2 * f64::EPSILON;
/// Minimum number of points in a rate fit.
pub const FIT_MIN_POINTS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FitWindow {
    /// Rows whose value relative to the first positive value lies in
    /// `[1e-7, 1e-2]`, widened to `[1e-7, 1]` when that holds too few points.
    Auto,
    /// Inclusive round range.
    Rounds(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    /// `1/ρ̂ - 1`.
    pub delta_hat: f64,
    /// Fitted per-round factor in `a_k ≈ C ρ̂^k`.
    pub rho_hat: f64,
    pub fit_window: (usize, usize),
    pub r_squared: f64,
    pub points: usize,
}

pub fn fit_geometric_rate(trace: &IterationTrace, field: Field, window: FitWindow) -> Result<RateFit> {
    fit_geometric_values(&trace.series(field), window)
}

pub fn fit_geometric_values(series: &[(usize, f64)], window: FitWindow) -> Result<RateFit> {
    let usable = |v: f64| v.is_finite() && v > FIT_FLOOR;
    let selected: Vec<(usize, f64)> = match window {
        FitWindow::Rounds(a, b) => series
            .iter()
            .copied()
            .filter(|(k, v)| *k >= a && *k <= b && usable(*v))
            .collect(),
        FitWindow::Auto => {
            let v0 = series.iter().map(|p| p.1).find(|v| *v > 0.0).unwrap_or(0.0);
            let pick = |hi: f64| -> Vec<(usize, f64)> {
                series
                    .iter()
                    .copied()
                    .filter(|(_, v)| usable(*v) && *v <= hi * v0 && *v >= 1e-7 * v0)
                    .collect()
            };
            let narrow = pick(1e-2);
            if narrow.len() >= FIT_MIN_POINTS {
                narrow
            } else {
                pick(1.0)
            }
        }
    };
    if selected.len() < FIT_MIN_POINTS {
        return Err(Error::Config(format!(
            "rate fit needs {FIT_MIN_POINTS} points above the noise floor, got {}",
            selected.len()
        )));
    }
    let pts: Vec<(f64, f64)> = selected.iter().map(|(k, v)| (*k as f64, v.ln())).collect();
    let (slope, _, r2) = least_squares(&pts);
    let rho = slope.exp();
    Ok(RateFit {
        delta_hat: 1.0 / rho - 1.0,
        rho_hat: rho,
        fit_window: (selected[0].0, selected[selected.len() - 1].0),
        r_squared: r2,
        points: selected.len(),
    })
}

/// Guaranteed contraction `δ` for Mirror-P-EXTRA with `B ⪯ βI`:
/// `max(δ₁, δ₂)` at `γ = μc`.
pub fn delta_bound_p_extra(mu: f64, l: f64, c: f64, beta: f64, lambda_hat: f64) -> f64 {
    let g = mu * c;
    let shared = c * lambda_hat / (beta * (1.0 + 1.0 / g));
    let d1 = shared
        .min(c * l * lambda_hat / (beta * c * l * l * lambda_hat + 1.0 + g))
        .min(mu * l * c * lambda_hat / ((mu + l) * (1.0 + g)));
    let d2 = shared
        .min(c * mu * lambda_hat / (beta * c * mu * mu * lambda_hat + 1.0 + g))
        .min(1.0 / ((mu + l) * beta));
    d1.max(d2)
}

/// Guaranteed contraction `δ` for Mirror-EXTRA at `γ = 1`; requires
/// `λmax(Ł) <= 1` and `c < 1/(2L)`.
pub fn delta_bound_extra(mu: f64, l: f64, c: f64, lambda_hat: f64, lambda_max: f64) -> Result<f64> {
    if lambda_max > 1.0 + 1e-12 {
        return Err(Error::Unsupported(format!(
            "Mirror-EXTRA rate bound needs λmax <= 1, got {lambda_max}"
        )));
    }
    if !(c > 0.0 && c < 1.0 / (2.0 * l)) {
        return Err(Error::Unsupported(format!("Mirror-EXTRA rate bound needs 0 < c < 1/(2L), got {c}")));
    }
    let g = 1.0;
    let cl = c * l;
    let a = 2.0 * mu * l * c * lambda_hat / ((mu + l) * (1.0 + g));
    let b = cl * cl * lambda_hat / (1.0 + g + cl * (2.0 - 3.0 * cl) * lambda_hat + 2.0 * cl * cl * (1.0 + 1.0 / g));
    let d = (1.0 - 2.0 * cl) * lambda_hat / (cl * (1.0 + 1.0 / g));
    Ok(a.min(b).min(d))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(f: impl Fn(usize) -> f64, n: usize) -> Vec<(usize, f64)> {
        (0..n).map(|k| (k, f(k))).collect()
    }

    #[test]
    fn geometric_fit_exact() {
        let fit = fit_geometric_values(&series(|k| 0.5f64.powi(k as i32), 40), FitWindow::Rounds(0, 39)).unwrap();
        assert_close!(fit.delta_hat, 1.0, 1e-6);
        assert!(fit.r_squared > 0.999999);
    }

    #[test]
    fn fit_rejects_noise_floor() {
        let s = series(|k| if k < 5 { 1.0 } else { 1e-20 }, 100);
        assert!(fit_geometric_values(&s, FitWindow::Auto).is_err());
    }

    #[test]
    fn sublinear_examples() {
        let geo = check_sublinear_values(&series(|k| 0.9f64.powi(k as i32), 400)).unwrap();
        assert!(geo.pass);
        let harmonic = check_sublinear_values(&series(|k| 1.0 / k.max(1) as f64, 400)).unwrap();
        assert!(!harmonic.pass);
        assert!(check_sublinear_values(&series(|k| k as f64, 50)).is_err());
    }

    #[test]
    fn merit_detector() {
        let mut s = series(|k| 0.8f64.powi(k as i32), 50);
        assert!(check_merit_values(&s).pass);
        s[20].1 *= 1.5;
        let r = check_merit_values(&s);
        assert!(!r.pass && r.worst_violation > 0.0);
    }

    #[test]
    fn delta_bounds_by_hand() {
        // μ = 1, L = 2, c = 0.1, β = 0.1, λ̂ = 0.5 → γ = 0.1
        let d = delta_bound_p_extra(1.0, 2.0, 0.1, 0.1, 0.5);
        let d1 = (0.05f64 / (0.1 * 11.0)).min(0.1 / (0.1 * 0.1 * 4.0 * 0.5 + 1.1)).min(0.1 / (3.0 * 1.1));
        let d2 = (0.05f64 / (0.1 * 11.0)).min(0.05 / (0.1 * 0.1 * 0.5 + 1.1)).min(1.0 / 0.3);
        assert_close!(d, d1.max(d2), 1e-15);

        let e = delta_bound_extra(1.0, 2.0, 0.2, 0.5, 1.0).unwrap();
        let expect = (2.0f64 * 2.0 * 0.2 * 0.5 / (3.0 * 2.0))
            .min(0.16 * 0.5 / (2.0 + 0.4 * (2.0 - 1.2) * 0.5 + 2.0 * 0.16 * 2.0))
            .min(0.2 * 0.5 / (0.4 * 2.0));
        assert_close!(e, expect, 1e-15);
        assert!(delta_bound_extra(1.0, 2.0, 0.3, 0.5, 1.0).is_err());
        assert!(delta_bound_extra(1.0, 2.0, 0.2, 0.5, 2.0).is_err());
    }

    #[test]
    fn csv_roundtrip() {
        let cfg = AlgorithmConfig::new(Algorithm::MirrorExtra, 0.1, vec![]);
        let mut t = IterationTrace::new(&cfg);
        t.push(RoundMetrics {
            round: 3,
            grad_consensus_sq: 0.1 + 0.2,
            feas_dual_sq: 1e-300,
            merit_diff: 0.0,
            dist_to_star: std::f64::consts::PI,
            normalized_residual: 1.0 / 3.0,
            sum_violation: 2.5e-17,
        });
        let csv = t.to_csv();
        assert!(csv.starts_with(TRACE_HEADER));
        assert_eq!(parse_trace_csv(&csv).unwrap(), t.rows);
    }
}
