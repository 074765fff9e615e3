//! Local subproblem solvers: the per-agent prox step, box projection, and the
//! sum-constrained box projection (continuous quadratic knapsack).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::problem::{BoxSet, Objective};

/// Stopping rule for the inner accelerated projected-gradient loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerSettings {
    /// The loop stops once the gradient mapping is below `tol_scale * (1 + ‖v‖)`.
    pub tol_scale: f64,
    pub max_iters: usize,
}

impl Default for InnerSettings {
    fn default() -> Self {
        Self {
            tol_scale: 1e-12,
            max_iters: 10_000,
        }
    }
}

/// Data of one prox subproblem
/// `argmin_{x ∈ Ω} f(x) - ⟨s, x⟩ + ‖x - v‖² / (2β)`.
#[derive(Debug, Clone, Copy)]
pub struct ProxSpec<'a> {
    pub objective: &'a Objective,
    pub bounds: Option<&'a BoxSet>,
    /// Linear tilt `s`.
    pub tilt: &'a [f64],
    /// Anchor `v`.
    pub anchor: &'a [f64],
    pub beta: f64,
}

impl ProxSpec<'_> {
    fn validate(&self) -> Result<usize> {
        let p = self.objective.dim();
        if self.tilt.len() != p || self.anchor.len() != p {
            return Err(Error::Dimension(format!(
                "prox data lengths {} / {} for dimension {p}",
                self.tilt.len(),
                self.anchor.len()
            )));
        }
        if let Some(b) = self.bounds {
            if b.dim() != p {
                return Err(Error::Dimension("box dimension mismatch".into()));
            }
        }
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        Ok(p)
    }

    fn tolerance(&self, settings: &InnerSettings) -> f64 {
        let vnorm = self.anchor.iter().map(|v| v * v).sum::<f64>().sqrt();
        settings.tol_scale * (1.0 + vnorm)
    }

    /// `∇φ(x) = ∇f(x) - s + (x - v)/β`.
    fn gradient_into(&self, x: &[f64], out: &mut [f64]) {
        self.objective.gradient_into(x, out);
        let inv_beta = 1.0 / self.beta;
        for k in 0..x.len() {
            out[k] += -self.tilt[k] + (x[k] - self.anchor[k]) * inv_beta;
        }
    }

    /// Unit-step gradient mapping `‖x - P(x - ∇φ(x))‖`.
    pub fn gradient_mapping(&self, x: &[f64]) -> f64 {
        let mut g = vec![0.0; x.len()];
        self.gradient_into(x, &mut g);
        let mut acc = 0.0;
        for k in 0..x.len() {
            let mut t = x[k] - g[k];
            if let Some(b) = self.bounds {
                t = t.clamp(b.lo[k], b.hi[k]);
            }
            acc += (x[k] - t) * (x[k] - t);
        }
        acc.sqrt()
    }
}

/// Solves the prox subproblem.
///
/// Quadratic objectives without a box use the closed form
/// `x = (Q + I/β)⁻¹ (s - b + v/β)`. Everything else runs accelerated projected
/// gradient; for quadratics the result is then polished by an exact solve on
/// the detected active set when that lowers the gradient mapping.
pub fn prox_step(spec: &ProxSpec<'_>, settings: &InnerSettings) -> Result<DVector<f64>> {
    prox_step_from(spec, settings, None)
}

/// [`prox_step`] with an optional warm start for the iterative path.
pub fn prox_step_from(spec: &ProxSpec<'_>, settings: &InnerSettings, start: Option<&[f64]>) -> Result<DVector<f64>> {
    let p = spec.validate()?;
    let quad = spec.objective.as_quadratic();

    if let Some(q) = quad {
        let unconstrained = quadratic_solve(q.q(), q.b(), spec, &vec![false; p], &vec![0.0; p]);
        match spec.bounds {
            None => return Ok(unconstrained),
            Some(b) => {
                let clamped = box_project(unconstrained.as_slice(), b);
                if spec.gradient_mapping(&clamped) <= spec.tolerance(settings) {
                    return Ok(DVector::from_vec(clamped));
                }
            }
        }
    }

    let mut x: Vec<f64> = match start {
        Some(s) if s.len() == p => s.to_vec(),
        _ => spec.anchor.to_vec(),
    };
    if let Some(b) = spec.bounds {
        x = box_project(&x, b);
    }
    let x = accelerated_projected_gradient(spec, settings, x)?;

    if let (Some(q), Some(b)) = (quad, spec.bounds) {
        let polished = polish_on_active_set(q.q(), q.b(), spec, b, &x);
        if spec.gradient_mapping(polished.as_slice()) <= spec.gradient_mapping(&x) {
            return Ok(polished);
        }
    }
    Ok(DVector::from_vec(x))
}

fn accelerated_projected_gradient(spec: &ProxSpec<'_>, settings: &InnerSettings, mut x: Vec<f64>) -> Result<Vec<f64>> {
    let p = x.len();
    let tol = spec.tolerance(settings);
    let lip = spec.objective.lipschitz() + 1.0 / spec.beta;
    let mu = spec.objective.strong_convexity() + 1.0 / spec.beta;
    let momentum = (lip.sqrt() - mu.sqrt()) / (lip.sqrt() + mu.sqrt());
    let step = 1.0 / lip;

    let mut y = x.clone();
    let mut g = vec![0.0; p];
    let mut next = vec![0.0; p];
    let mut residual = spec.gradient_mapping(&x);
    for _ in 0..settings.max_iters {
        if residual <= tol {
            return Ok(x);
        }
        spec.gradient_into(&y, &mut g);
        for k in 0..p {
            next[k] = y[k] - step * g[k];
        }
        if let Some(b) = spec.bounds {
            box_project_in_place(&mut next, b);
        }
        for k in 0..p {
            y[k] = next[k] + momentum * (next[k] - x[k]);
        }
        std::mem::swap(&mut x, &mut next);
        residual = spec.gradient_mapping(&x);
    }
    if residual <= tol {
        return Ok(x);
    }
    Err(Error::InnerSolver {
        iterations: settings.max_iters,
        residual,
    })
}

/// Solves `(Q + I/β) x = s - b + v/β` on the free coordinates with the fixed
/// coordinates pinned at `fixed_values`.
fn quadratic_solve(
    q: &DMatrix<f64>,
    b: &DVector<f64>,
    spec: &ProxSpec<'_>,
    fixed: &[bool],
    fixed_values: &[f64],
) -> DVector<f64> {
    let p = b.len();
    let free: Vec<usize> = (0..p).filter(|&k| !fixed[k]).collect();
    let mut x = DVector::from_column_slice(fixed_values);
    if free.is_empty() {
        return x;
    }
    let inv_beta = 1.0 / spec.beta;
    let m = free.len();
    let mut h = DMatrix::zeros(m, m);
    let mut rhs = DVector::zeros(m);
    for (a, &i) in free.iter().enumerate() {
        for (c, &j) in free.iter().enumerate() {
            h[(a, c)] = q[(i, j)];
        }
        h[(a, a)] += inv_beta;
        let mut r = spec.tilt[i] - b[i] + spec.anchor[i] * inv_beta;
        for k in 0..p {
            if fixed[k] {
                r -= q[(i, k)] * fixed_values[k];
            }
        }
        rhs[a] = r;
    }
    let sol = match h.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => h.lu().solve(&rhs).unwrap_or_else(|| DVector::zeros(m)),
    };
    for (a, &i) in free.iter().enumerate() {
        x[i] = sol[a];
    }
    x
}

fn polish_on_active_set(
    q: &DMatrix<f64>,
    b: &DVector<f64>,
    spec: &ProxSpec<'_>,
    bounds: &BoxSet,
    x: &[f64],
) -> DVector<f64> {
    let p = x.len();
    let mut g = vec![0.0; p];
    spec.gradient_into(x, &mut g);
    let mut fixed = vec![false; p];
    let mut values = vec![0.0; p];
    for k in 0..p {
        let at_lo = x[k] <= bounds.lo[k] && g[k] >= 0.0;
        let at_hi = x[k] >= bounds.hi[k] && g[k] <= 0.0;
        if at_lo || at_hi {
            fixed[k] = true;
            values[k] = if at_lo { bounds.lo[k] } else { bounds.hi[k] };
        }
    }
    let sol = quadratic_solve(q, b, spec, &fixed, &values);
    DVector::from_vec(box_project(sol.as_slice(), bounds))
}

/// Componentwise clamp onto the box. When `lo = hi` the shared value is returned.
pub fn box_project(x: &[f64], bounds: &BoxSet) -> Vec<f64> {
    let mut out = x.to_vec();
    box_project_in_place(&mut out, bounds);
    out
}

pub fn box_project_in_place(x: &mut [f64], bounds: &BoxSet) {
    for (k, v) in x.iter_mut().enumerate() {
        *v = v.max(bounds.lo[k]).min(bounds.hi[k]);
    }
}

/// Maximum bisection steps on the knapsack multiplier.
pub const KNAPSACK_MAX_ITERS: usize = 200;

/// Euclidean projection of `v` onto `{w : Σ w = target_sum, lo <= w <= hi}`.
///
/// Bisection on the multiplier `τ` in `w_i(τ) = clamp(v_i - τ, lo_i, hi_i)`,
/// started from the bracket `[min(v - hi), max(v - lo)]`, until the sum is
/// within `1e-12 · max(1, |target_sum|)`. The final multiplier is then
/// recomputed exactly on the free coordinates when that is more accurate.
pub fn knapsack_project(v: &[f64], target_sum: f64, lo: &[f64], hi: &[f64]) -> Result<Vec<f64>> {
    let n = v.len();
    if lo.len() != n || hi.len() != n {
        return Err(Error::Dimension(format!(
            "knapsack lengths {n}, {}, {}",
            lo.len(),
            hi.len()
        )));
    }
    if lo.iter().zip(hi).any(|(l, h)| !(l <= h)) {
        return Err(Error::Config("knapsack bounds require lo <= hi".into()));
    }
    let sum_lo: f64 = lo.iter().sum();
    let sum_hi: f64 = hi.iter().sum();
    let tol = 1e-12 * target_sum.abs().max(1.0);
    if target_sum < sum_lo - tol || target_sum > sum_hi + tol {
        return Err(Error::Infeasible(format!(
            "target {target_sum} outside [{sum_lo}, {sum_hi}]"
        )));
    }

    let eval = |tau: f64, out: &mut Vec<f64>| -> f64 {
        out.clear();
        let mut s = 0.0;
        for i in 0..n {
            let w = (v[i] - tau).max(lo[i]).min(hi[i]);
            s += w;
            out.push(w);
        }
        s
    };

    let mut t_lo = (0..n).map(|i| v[i] - hi[i]).fold(f64::INFINITY, f64::min);
    let mut t_hi = (0..n).map(|i| v[i] - lo[i]).fold(f64::NEG_INFINITY, f64::max);
    let mut w = Vec::with_capacity(n);
    let mut tau = 0.5 * (t_lo + t_hi);
    let mut sum = eval(tau, &mut w);
    for _ in 0..KNAPSACK_MAX_ITERS {
        if (sum - target_sum).abs() <= tol {
            break;
        }
        if sum > target_sum {
            t_lo = tau;
        } else {
            t_hi = tau;
        }
        tau = 0.5 * (t_lo + t_hi);
        sum = eval(tau, &mut w);
    }

    // exact multiplier on the current free set
    let mut free_count = 0usize;
    let mut free_v = 0.0;
    let mut pinned = 0.0;
    for i in 0..n {
        if w[i] > lo[i] && w[i] < hi[i] {
            free_count += 1;
            free_v += v[i];
        } else {
            pinned += w[i];
        }
    }
    if free_count > 0 {
        let exact_tau = (free_v + pinned - target_sum) / free_count as f64;
        let mut w2 = Vec::with_capacity(n);
        let sum2 = eval(exact_tau, &mut w2);
        if (sum2 - target_sum).abs() <= (sum - target_sum).abs() {
            w = w2;
        }
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::QuadraticObjective;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn half_square() -> Objective {
        Objective::Quadratic(QuadraticObjective::new(DMatrix::identity(1, 1), DVector::zeros(1)).unwrap())
    }

    fn grid_argmin(f: impl Fn(f64) -> f64, lo: f64, hi: f64, step: f64) -> f64 {
        let mut best = (f64::INFINITY, lo);
        let mut x = lo;
        while x <= hi + 1e-15 {
            let v = f(x);
            if v < best.0 {
                best = (v, x);
            }
            x += step;
        }
        best.1
    }

    #[test]
    fn prox_symmetric_fixed_point() {
        let f = half_square();
        let spec = ProxSpec {
            objective: &f,
            bounds: None,
            tilt: &[0.0],
            anchor: &[0.0],
            beta: 1.0,
        };
        assert_eq!(prox_step(&spec, &InnerSettings::default()).unwrap()[0], 0.0);
    }

    #[test]
    fn prox_with_tilt_matches_grid_search() {
        let f = half_square();
        let spec = ProxSpec {
            objective: &f,
            bounds: None,
            tilt: &[1.0],
            anchor: &[0.0],
            beta: 1.0,
        };
        let x = prox_step(&spec, &InnerSettings::default()).unwrap()[0];
        assert!((x - 0.5).abs() < 1e-15);
        let grid = grid_argmin(|x| 0.5 * x * x - x + 0.5 * x * x, -2.0, 2.0, 1e-4);
        assert!((x - grid).abs() <= 1e-4);
    }

    #[test]
    fn prox_with_box_matches_grid_search() {
        let f = half_square();
        let bx = BoxSet::new(vec![0.0], vec![0.2]).unwrap();
        let spec = ProxSpec {
            objective: &f,
            bounds: Some(&bx),
            tilt: &[1.0],
            anchor: &[0.0],
            beta: 1.0,
        };
        let x = prox_step(&spec, &InnerSettings::default()).unwrap()[0];
        assert!((x - 0.2).abs() < 1e-15);
        let grid = grid_argmin(|x| x * x - x, 0.0, 0.2, 1e-4);
        assert!((x - grid).abs() <= 1e-4);
    }

    #[derive(Debug)]
    struct LogCosh;

    impl crate::problem::SmoothObjective for LogCosh {
        fn dim(&self) -> usize {
            2
        }
        fn value(&self, x: &[f64]) -> f64 {
            x.iter().map(|v| v.cosh().ln()).sum()
        }
        fn gradient_into(&self, x: &[f64], out: &mut [f64]) {
            for (o, v) in out.iter_mut().zip(x) {
                *o = v.tanh();
            }
        }
        fn lipschitz(&self) -> f64 {
            1.0
        }
    }

    #[test]
    fn prox_custom_objective_reaches_tolerance() {
        let f = Objective::Custom(std::sync::Arc::new(LogCosh));
        let bx = BoxSet::new(vec![-0.3, -1.0], vec![0.3, 1.0]).unwrap();
        for bounds in [None, Some(&bx)] {
            let spec = ProxSpec {
                objective: &f,
                bounds,
                tilt: &[2.0, -0.5],
                anchor: &[1.0, 0.7],
                beta: 0.8,
            };
            let settings = InnerSettings::default();
            let x = prox_step(&spec, &settings).unwrap();
            assert!(spec.gradient_mapping(x.as_slice()) <= spec.tolerance(&settings));
        }
    }

    #[test]
    fn inner_loop_budget_exhaustion_is_reported() {
        let f = Objective::Custom(std::sync::Arc::new(LogCosh));
        let spec = ProxSpec {
            objective: &f,
            bounds: None,
            tilt: &[2.0, -0.5],
            anchor: &[1.0, 0.7],
            beta: 100.0,
        };
        let settings = InnerSettings {
            tol_scale: 1e-14,
            max_iters: 2,
        };
        assert!(matches!(prox_step(&spec, &settings), Err(Error::InnerSolver { .. })));
    }

    #[test]
    fn boxed_quadratic_prox_optimality_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let settings = InnerSettings::default();
        for _ in 0..200 {
            let a = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.5..1.5));
            let b = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            let f = Objective::Quadratic(QuadraticObjective::from_factor(&a, b).unwrap());
            let hi: Vec<f64> = (0..3).map(|_| rng.random_range(0.1..1.0)).collect();
            let bx = BoxSet::new(vec![-0.2; 3], hi).unwrap();
            let tilt: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
            let anchor: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
            let spec = ProxSpec {
                objective: &f,
                bounds: Some(&bx),
                tilt: &tilt,
                anchor: &anchor,
                beta: rng.random_range(0.05..5.0),
            };
            let x = prox_step(&spec, &settings).unwrap();
            assert!(bx.contains(x.as_slice()));
            assert!(spec.gradient_mapping(x.as_slice()) <= spec.tolerance(&settings));
        }
    }

    #[test]
    fn closed_form_satisfies_stationarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let a = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-2.0..2.0));
            let b = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            let f = Objective::Quadratic(QuadraticObjective::from_factor(&a, b).unwrap());
            let tilt = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let anchor = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let spec = ProxSpec {
                objective: &f,
                bounds: None,
                tilt: &tilt,
                anchor: &anchor,
                beta: 0.7,
            };
            let x = prox_step(&spec, &InnerSettings::default()).unwrap();
            let mut g = [0.0; 2];
            spec.gradient_into(x.as_slice(), &mut g);
            let scale = 1.0 + tilt.iter().chain(&anchor).map(|v| v.abs()).sum::<f64>() / 0.7;
            assert!(g.iter().all(|v| v.abs() <= 1e-12 * scale), "{g:?}");
        }
    }

    #[test]
    fn box_project_examples() {
        let bx = BoxSet::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        assert_eq!(box_project(&[0.3, 0.9], &bx), vec![0.3, 0.9]);
        assert_eq!(box_project(&[-1.0, 3.0], &bx), vec![0.0, 1.0]);
    }

    #[test]
    fn box_project_beats_random_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let bx = BoxSet::new(vec![-1.0, 0.0, 2.0], vec![1.0, 0.5, 3.0]).unwrap();
        let x = [1.7, -0.4, 2.5];
        let p = box_project(&x, &bx);
        let dist = |w: &[f64]| w.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let best = dist(&p);
        for _ in 0..10_000 {
            let w: Vec<f64> = (0..3).map(|k| rng.random_range(bx.lo[k]..=bx.hi[k])).collect();
            assert!(dist(&w) >= best - 1e-15);
        }
    }

    #[test]
    fn knapsack_examples() {
        let w = knapsack_project(&[0.5, 1.5], 1.0, &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((w[0] - 0.0).abs() < 1e-12 && (w[1] - 1.0).abs() < 1e-12, "{w:?}");
        let w = knapsack_project(&[0.3, 0.7], 1.0, &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((w[0] - 0.3).abs() < 1e-15 && (w[1] - 0.7).abs() < 1e-15);
        let w = knapsack_project(&[2.0, 2.0], 2.0, &[0.0, 0.0], &[2.0, 2.0]).unwrap();
        assert!((w[0] - 1.0).abs() < 1e-12 && (w[1] - 1.0).abs() < 1e-12);
        assert!(matches!(
            knapsack_project(&[0.0, 0.0], 5.0, &[0.0, 0.0], &[1.0, 1.0]),
            Err(Error::Infeasible(_))
        ));
    }

    proptest! {
        #[test]
        fn knapsack_feasible_and_variational(
            data in prop::collection::vec((-3.0f64..3.0, -1.0f64..0.5, 0.0f64..1.5), 2..12),
            frac in 0.0f64..1.0,
            seed in any::<u64>(),
        ) {
            let v: Vec<f64> = data.iter().map(|d| d.0).collect();
            let lo: Vec<f64> = data.iter().map(|d| d.1).collect();
            let hi: Vec<f64> = data.iter().map(|d| d.1 + d.2).collect();
            let s_lo: f64 = lo.iter().sum();
            let s_hi: f64 = hi.iter().sum();
            let target = s_lo + frac * (s_hi - s_lo);
            let w = knapsack_project(&v, target, &lo, &hi).unwrap();
            let sum: f64 = w.iter().sum();
            prop_assert!((sum - target).abs() <= 1e-12 * target.abs().max(1.0));
            for i in 0..v.len() {
                prop_assert!(lo[i] <= w[i] && w[i] <= hi[i]);
            }
            // random feasible comparison points: clamp a random point, then repair
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..20 {
                let z: Vec<f64> = (0..v.len()).map(|i| rng.random_range(lo[i]..=hi[i])).collect();
                let u = knapsack_project(&z, target, &lo, &hi).unwrap();
                let vi: f64 = (0..v.len()).map(|i| (v[i] - w[i]) * (u[i] - w[i])).sum();
                prop_assert!(vi <= 1e-10, "variational inequality violated: {}", vi);
            }
        }

        #[test]
        fn prox_is_nonexpansive_in_anchor(
            a in prop::collection::vec(-2.0f64..2.0, 4),
            v1 in prop::collection::vec(-3.0f64..3.0, 2),
            v2 in prop::collection::vec(-3.0f64..3.0, 2),
            boxed in any::<bool>(),
        ) {
            let a = DMatrix::from_row_slice(2, 2, &a);
            let f = Objective::Quadratic(QuadraticObjective::from_factor(&a, DVector::from_vec(vec![0.3, -0.2])).unwrap());
            let bx = BoxSet::new(vec![-0.5, -0.5], vec![0.5, 0.8]).unwrap();
            let bounds = boxed.then_some(&bx);
            let tilt = [0.4, -0.1];
            let settings = InnerSettings::default();
            let x1 = prox_step(&ProxSpec { objective: &f, bounds, tilt: &tilt, anchor: &v1, beta: 0.9 }, &settings).unwrap();
            let x2 = prox_step(&ProxSpec { objective: &f, bounds, tilt: &tilt, anchor: &v2, beta: 0.9 }, &settings).unwrap();
            let dv = DVector::from_vec(v1.clone()) - DVector::from_vec(v2.clone());
            prop_assert!((x1 - x2).norm() <= dv.norm() + 1e-10);
        }
    }
}
