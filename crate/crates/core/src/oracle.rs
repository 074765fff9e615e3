//! Centralized reference solver and first-order optimality certificate.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{laplacian_quadratic, Network};
use crate::problem::{aggregate_feasibility_residual, ProblemInstance, BOUNDARY_TOL};
use crate::prox::knapsack_project;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSettings {
    /// Stop once `‖x - Π_C(x - ∇f(x)/L)‖_F <= tol`.
    pub tol: f64,
    pub max_iters: usize,
    /// Nesterov momentum with gradient-based adaptive restart. Plain
    /// projected gradient when false.
    pub accelerated: bool,
    /// Starting point; defaults to the projection of `r` onto the feasible set.
    pub initial: Option<DMatrix<f64>>,
}

impl Default for OracleSettings {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iters: 1_000_000,
            accelerated: true,
            initial: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktResiduals {
    pub feasibility: f64,
    pub gradient_consensus: f64,
    pub complementarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    pub x_star: DMatrix<f64>,
    pub kkt_residuals: KktResiduals,
    pub iterations_used: usize,
}

/// Euclidean projection onto `C = {Σ_i (x_i - r_i) = 0} ∩ Π_i Ω_i`, one
/// knapsack projection per coordinate.
pub fn project_coupled(instance: &ProblemInstance, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    instance.check_shape(x)?;
    let (n, p) = (instance.n(), instance.p());
    let mut out = DMatrix::zeros(n, p);
    let mut column = vec![0.0; n];
    for k in 0..p {
        let target: f64 = (0..n).map(|i| instance.resources()[(i, k)]).sum();
        for i in 0..n {
            column[i] = x[(i, k)];
        }
        match instance.boxes() {
            Some(boxes) => {
                let lo: Vec<f64> = boxes.iter().map(|b| b.lo[k]).collect();
                let hi: Vec<f64> = boxes.iter().map(|b| b.hi[k]).collect();
                let w = knapsack_project(&column, target, &lo, &hi)?;
                for i in 0..n {
                    out[(i, k)] = w[i];
                }
            }
            None => {
                let shift = (column.iter().sum::<f64>() - target) / n as f64;
                for i in 0..n {
                    out[(i, k)] = column[i] - shift;
                }
            }
        }
    }
    Ok(out)
}

fn step_point(instance: &ProblemInstance, x: &DMatrix<f64>, step: f64) -> Result<DMatrix<f64>> {
    let g = instance.gradient_matrix(x)?;
    project_coupled(instance, &(x - g * step))
}

/// Projected-gradient fixed-point residual `‖x - Π_C(x - ∇f(x)/L)‖_F`.
pub fn fixed_point_residual(instance: &ProblemInstance, x: &DMatrix<f64>) -> Result<f64> {
    let step = 1.0 / instance.l_const().max(f64::MIN_POSITIVE);
    Ok((x - step_point(instance, x, step)?).norm())
}

/// Projected gradient with step `1/L` on the coupled feasible set.
pub fn solve_centralized(instance: &ProblemInstance, settings: &OracleSettings) -> Result<OracleSolution> {
    if !(settings.tol > 0.0) {
        return Err(Error::Config("oracle tolerance must be positive".into()));
    }
    let step = 1.0 / instance.l_const().max(f64::MIN_POSITIVE);
    let start = match &settings.initial {
        Some(x0) => x0.clone(),
        None => instance.resources().clone(),
    };
    let mut x = project_coupled(instance, &start)?;
    let mut residual = (&x - step_point(instance, &x, step)?).norm();
    let mut iterations = 0;

    if settings.accelerated {
        let mut y = x.clone();
        let mut t = 1.0f64;
        while residual > settings.tol && iterations < settings.max_iters {
            let next = step_point(instance, &y, step)?;
            let restart = (&y - &next).dot(&(&next - &x)) > 0.0;
            if restart {
                t = 1.0;
                y = next.clone();
            } else {
                let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
                y = &next + (&next - &x) * ((t - 1.0) / t_next);
                t = t_next;
            }
            x = next;
            iterations += 1;
            residual = (&x - step_point(instance, &x, step)?).norm();
        }
    } else {
        while residual > settings.tol && iterations < settings.max_iters {
            let next = step_point(instance, &x, step)?;
            residual = (&x - &next).norm();
            x = next;
            iterations += 1;
        }
        residual = (&x - step_point(instance, &x, step)?).norm();
    }

    if !residual.is_finite() || residual > settings.tol {
        return Err(Error::Oracle { iterations, residual });
    }
    let kkt_residuals = multiplier_residuals(instance, &x)?;
    Ok(OracleSolution {
        x_star: x,
        kkt_residuals,
        iterations_used: iterations,
    })
}

/// Result of [`kkt_check`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    pub pass: bool,
    pub feasibility: f64,
    pub gradient_consensus: f64,
    pub complementarity: f64,
    /// Largest distance of an entry of `x` outside its box.
    pub box_violation: f64,
}

/// Multiplier-based residuals shared by [`kkt_check`] and the oracle.
///
/// Per coordinate `k` a common multiplier `λ_k` must satisfy `g_ik = λ_k` for
/// interior agents, `g_ik >= λ_k` at the lower bound and `g_ik <= λ_k` at the
/// upper bound. `gradient_consensus` is half the spread of interior
/// gradients; `complementarity` is half the gap between the largest lower and
/// smallest upper bound on `λ_k` once boundary agents are included.
fn multiplier_residuals(instance: &ProblemInstance, x: &DMatrix<f64>) -> Result<KktResiduals> {
    let feasibility = aggregate_feasibility_residual(instance, x)?;
    let g = instance.gradient_matrix(x)?;
    let (n, p) = (instance.n(), instance.p());
    let mut consensus = 0.0f64;
    let mut complementarity = 0.0f64;
    for k in 0..p {
        let mut int_max = f64::NEG_INFINITY;
        let mut int_min = f64::INFINITY;
        let mut lower = f64::NEG_INFINITY;
        let mut upper = f64::INFINITY;
        for i in 0..n {
            let gi = g[(i, k)];
            let (at_lo, at_hi) = match instance.box_of(i) {
                Some(b) => (
                    x[(i, k)] <= b.lo[k] + BOUNDARY_TOL,
                    x[(i, k)] >= b.hi[k] - BOUNDARY_TOL,
                ),
                None => (false, false),
            };
            match (at_lo, at_hi) {
                (true, true) => {}
                (true, false) => upper = upper.min(gi),
                (false, true) => lower = lower.max(gi),
                (false, false) => {
                    int_max = int_max.max(gi);
                    int_min = int_min.min(gi);
                    lower = lower.max(gi);
                    upper = upper.min(gi);
                }
            }
        }
        if int_max >= int_min {
            consensus = consensus.max(0.5 * (int_max - int_min));
        }
        if lower.is_finite() && upper.is_finite() {
            complementarity = complementarity.max(0.5 * (lower - upper).max(0.0));
        }
    }
    Ok(KktResiduals {
        feasibility,
        gradient_consensus: consensus,
        complementarity,
    })
}

/// First-order optimality certificate.
///
/// Without boxes: pass iff `⟨∇f, Ł∇f⟩ <= tol²` and the feasibility residual is
/// at most `tol`; `gradient_consensus` then reports `sqrt(⟨∇f, Ł∇f⟩)`. With
/// boxes the multiplier-existence residuals are used and `x` must lie in the
/// boxes up to `tol`.
pub fn kkt_check(instance: &ProblemInstance, network: &Network, x: &DMatrix<f64>, tol: f64) -> Result<KktReport> {
    instance.check_shape(x)?;
    if network.n() != instance.n() {
        return Err(Error::Dimension("network and instance sizes differ".into()));
    }
    match instance.boxes() {
        None => {
            let feasibility = aggregate_feasibility_residual(instance, x)?;
            let g = instance.gradient_matrix(x)?;
            let lq = laplacian_quadratic(network, &g)?;
            Ok(KktReport {
                pass: lq <= tol * tol && feasibility <= tol,
                feasibility,
                gradient_consensus: lq.max(0.0).sqrt(),
                complementarity: 0.0,
                box_violation: 0.0,
            })
        }
        Some(boxes) => {
            let r = multiplier_residuals(instance, x)?;
            let mut box_violation = 0.0f64;
            for (i, b) in boxes.iter().enumerate() {
                for k in 0..instance.p() {
                    box_violation = box_violation.max(b.lo[k] - x[(i, k)]).max(x[(i, k)] - b.hi[k]);
                }
            }
            Ok(KktReport {
                pass: r.feasibility <= tol
                    && r.gradient_consensus <= tol
                    && r.complementarity <= tol
                    && box_violation <= tol,
                feasibility: r.feasibility,
                gradient_consensus: r.gradient_consensus,
                complementarity: r.complementarity,
                box_violation,
            })
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CachedSolution {
    fingerprint: String,
    x_star: Vec<Vec<f64>>,
    kkt_residuals: KktResiduals,
    iterations_used: usize,
}

/// On-disk cache of oracle solutions keyed by instance fingerprint.
#[derive(Debug, Clone)]
pub struct OracleCache {
    dir: PathBuf,
}

impl OracleCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path_for(&self, fingerprint: &str) -> PathBuf {
        self.dir.join(format!("{fingerprint}.json"))
    }

    pub fn load(&self, fingerprint: &str) -> Result<Option<OracleSolution>> {
        let path = self.path_for(fingerprint);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let cached: CachedSolution = serde_json::from_str(&text)?;
        if cached.fingerprint != fingerprint {
            return Ok(None);
        }
        let n = cached.x_star.len();
        let p = cached.x_star.first().map_or(0, Vec::len);
        let x_star = DMatrix::from_fn(n, p, |i, k| cached.x_star[i][k]);
        Ok(Some(OracleSolution {
            x_star,
            kkt_residuals: cached.kkt_residuals,
            iterations_used: cached.iterations_used,
        }))
    }

    pub fn store(&self, fingerprint: &str, solution: &OracleSolution) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let x = &solution.x_star;
        let cached = CachedSolution {
            fingerprint: fingerprint.to_string(),
            x_star: (0..x.nrows()).map(|i| x.row(i).iter().copied().collect()).collect(),
            kkt_residuals: solution.kkt_residuals,
            iterations_used: solution.iterations_used,
        };
        let path = self.path_for(fingerprint);
        write_json(&path, &cached)?;
        Ok(path)
    }

    /// Cached solution for `instance`, solving and storing it on a miss.
    pub fn solve(&self, instance: &ProblemInstance, settings: &OracleSettings) -> Result<OracleSolution> {
        let fp = instance.fingerprint()?;
        if let Some(sol) = self.load(&fp)? {
            return Ok(sol);
        }
        let sol = solve_centralized(instance, settings)?;
        self.store(&fp, &sol)?;
        Ok(sol)
    }
}

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{MatrixKind, Topology, WeightRule};
    use crate::problem::{generate_instance, BoxSet, Objective, QuadraticObjective};
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identical_half_squares(r: DMatrix<f64>) -> ProblemInstance {
        let p = r.ncols();
        let objectives = (0..r.nrows())
            .map(|_| Objective::Quadratic(QuadraticObjective::new(DMatrix::identity(p, p), DVector::zeros(p)).unwrap()))
            .collect();
        ProblemInstance::new(objectives, None, r, None).unwrap()
    }

    fn path_network(n: usize) -> Network {
        Network::build(Topology::path(n).unwrap(), MatrixKind::StandardLaplacian, None).unwrap()
    }

    #[test]
    fn identical_objectives_give_the_mean() {
        let r = DMatrix::from_row_slice(4, 2, &[1.0, -2.0, 3.0, 0.5, -1.0, 4.0, 0.0, 1.5]);
        let inst = identical_half_squares(r.clone());
        let sol = solve_centralized(&inst, &OracleSettings::default()).unwrap();
        for k in 0..2 {
            let mean = r.column(k).sum() / 4.0;
            for i in 0..4 {
                assert!((sol.x_star[(i, k)] - mean).abs() < 1e-10);
            }
        }
        assert!(kkt_check(&inst, &path_network(4), &sol.x_star, 1e-8).unwrap().pass);
    }

    /// Stacked KKT system: `Q_i x_i + b_i = λ` for all `i`, `Σ x_i = Σ r_i`.
    fn kkt_linear_solve(inst: &ProblemInstance) -> DMatrix<f64> {
        let (n, p) = (inst.n(), inst.p());
        let m = n * p + p;
        let mut a = DMatrix::zeros(m, m);
        let mut rhs = DVector::zeros(m);
        for i in 0..n {
            let q = inst.objective(i).as_quadratic().unwrap();
            for r in 0..p {
                for c in 0..p {
                    a[(i * p + r, i * p + c)] = q.q()[(r, c)];
                }
                a[(i * p + r, n * p + r)] = -1.0;
                rhs[i * p + r] = -q.b()[r];
                a[(n * p + r, i * p + r)] = 1.0;
                rhs[n * p + r] += inst.resources()[(i, r)];
            }
        }
        let sol = a.lu().solve(&rhs).unwrap();
        DMatrix::from_fn(n, p, |i, k| sol[i * p + k])
    }

    #[test]
    fn unconstrained_matches_linear_kkt_solve() {
        for seed in 0..5 {
            let inst = generate_instance(6, 2, seed, false, false).unwrap();
            let settings = OracleSettings {
                tol: 1e-12,
                ..OracleSettings::default()
            };
            let sol = solve_centralized(&inst, &settings).unwrap();
            let direct = kkt_linear_solve(&inst);
            assert!((&sol.x_star - &direct).norm() < 1e-8, "seed {seed}: {} mu {} L {}", (&sol.x_star - &direct).norm(), inst.mu_const(), inst.l_const());
        }
    }

    #[test]
    fn plain_and_accelerated_agree() {
        let inst = generate_instance(5, 2, 11, true, false).unwrap();
        let fast = solve_centralized(&inst, &OracleSettings::default()).unwrap();
        let slow = solve_centralized(
            &inst,
            &OracleSettings {
                accelerated: false,
                ..OracleSettings::default()
            },
        )
        .unwrap();
        assert!((&fast.x_star - &slow.x_star).norm() < 1e-7);
    }

    #[test]
    fn boxed_solution_beats_random_feasible_points() {
        let inst = generate_instance(6, 2, 4, true, false).unwrap();
        let sol = solve_centralized(&inst, &OracleSettings::default()).unwrap();
        let best = inst.total_value(&sol.x_star);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let boxes = inst.boxes().unwrap();
        for _ in 0..1000 {
            let z = DMatrix::from_fn(6, 2, |i, k| rng.random_range(boxes[i].lo[k]..=boxes[i].hi[k]));
            let z = project_coupled(&inst, &z).unwrap();
            assert!(inst.total_value(&z) >= best - 1e-9);
        }
        let net = path_network(6);
        assert!(kkt_check(&inst, &net, &sol.x_star, 1e-6).unwrap().pass);
    }

    #[test]
    fn different_starts_agree() {
        let inst = generate_instance(5, 3, 21, true, false).unwrap();
        let tol = 1e-10;
        let a = solve_centralized(&inst, &OracleSettings::default()).unwrap();
        let b = solve_centralized(
            &inst,
            &OracleSettings {
                initial: Some(DMatrix::from_element(5, 3, 7.0)),
                ..OracleSettings::default()
            },
        )
        .unwrap();
        // strong convexity turns the fixed-point residual into a distance bound
        let bound = 10.0 * tol * (1.0 + inst.l_const() / inst.mu_const());
        assert!((&a.x_star - &b.x_star).norm() <= bound);
    }

    #[test]
    fn non_consensual_point_fails() {
        let r = DMatrix::from_row_slice(3, 1, &[1.0, 0.0, -1.0]);
        let inst = identical_half_squares(r.clone());
        let report = kkt_check(&inst, &path_network(3), &r, 1e-6).unwrap();
        assert!(!report.pass);
        assert!(report.gradient_consensus > 0.0);

        let bx = vec![BoxSet::new(vec![-2.0], vec![2.0]).unwrap(); 3];
        let boxed = ProblemInstance::new(inst.objectives().to_vec(), Some(bx), r.clone(), None).unwrap();
        let report = kkt_check(&boxed, &path_network(3), &r, 1e-6).unwrap();
        assert!(!report.pass && report.gradient_consensus > 0.0);
    }

    #[test]
    fn unconstrained_check_is_laplacian_test() {
        let inst = generate_instance(4, 2, 3, false, false).unwrap();
        let net = Network::with_rule(Topology::star(4).unwrap(), MatrixKind::HalfIMinusW, WeightRule::LazyMetropolis)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let x = DMatrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0));
            let x = project_coupled(&inst, &x).unwrap();
            let tol = 0.5;
            let g = inst.gradient_matrix(&x).unwrap();
            let lq = laplacian_quadratic(&net, &g).unwrap();
            let feas = aggregate_feasibility_residual(&inst, &x).unwrap();
            let report = kkt_check(&inst, &net, &x, tol).unwrap();
            assert_eq!(report.pass, lq <= tol * tol && feas <= tol);
        }
    }

    #[test]
    fn iteration_budget_error() {
        let inst = generate_instance(5, 2, 1, false, false).unwrap();
        let err = solve_centralized(
            &inst,
            &OracleSettings {
                max_iters: 1,
                tol: 1e-14,
                ..OracleSettings::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Oracle { iterations: 1, .. }));
    }

    #[test]
    fn cache_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cache = OracleCache::new(dir.path());
        let inst = generate_instance(4, 2, 2, true, false).unwrap();
        let first = cache.solve(&inst, &OracleSettings::default()).unwrap();
        let fp = inst.fingerprint().unwrap();
        assert!(cache.path_for(&fp).exists());
        let second = cache.load(&fp).unwrap().unwrap();
        assert_eq!(first.x_star, second.x_star);
    }
}
