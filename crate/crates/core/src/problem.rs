//! Per-agent objectives, box sets and resource demands.
//!
//! The network problem is
//! `min Σ_i f_i(x_i)  s.t.  Σ_i (x_i - r_i) = 0,  x_i ∈ Ω_i`
//! with `x` stacked as an `n × p` matrix, one row per agent.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Tolerance used to decide whether a matrix is symmetric / PSD on input.
const SYMMETRY_RTOL: f64 = 1e-12;

/// Number of regenerations tried when an instance with an active box is requested.
pub const ACTIVE_BOX_RETRIES: usize = 100;

/// Distance from a bound below which a coordinate counts as on the boundary.
pub const BOUNDARY_TOL: f64 = 1e-9;

/// `f(x) = 0.5 xᵀ Q x + bᵀ x` with `Q` symmetric positive semidefinite.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticObjective {
    q: DMatrix<f64>,
    b: DVector<f64>,
    lambda_min: f64,
    lambda_max: f64,
}

impl QuadraticObjective {
    pub fn new(q: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        let p = b.len();
        if q.nrows() != p || q.ncols() != p {
            return Err(Error::Dimension(format!(
                "Q is {}x{} but b has length {p}",
                q.nrows(),
                q.ncols()
            )));
        }
        let scale = q.amax().max(1.0);
        if (&q - q.transpose()).amax() > SYMMETRY_RTOL * scale {
            return Err(Error::Config("Q must be symmetric".into()));
        }
        let eig = SymmetricEigen::new(q.clone());
        let lambda_min = eig.eigenvalues.min();
        let lambda_max = eig.eigenvalues.max();
        if lambda_min < -SYMMETRY_RTOL * scale {
            return Err(Error::Config(format!(
                "Q must be positive semidefinite (smallest eigenvalue {lambda_min:e})"
            )));
        }
        Ok(Self {
            q,
            b,
            lambda_min: lambda_min.max(0.0),
            lambda_max: lambda_max.max(0.0),
        })
    }

    /// `Q = Aᵀ A`.
    pub fn from_factor(a: &DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        let q = a.transpose() * a;
        let q = (&q + q.transpose()) * 0.5;
        Self::new(q, b)
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn lambda_min(&self) -> f64 {
        self.lambda_min
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let p = self.dim();
        let mut v = 0.0;
        for i in 0..p {
            let mut qx = 0.0;
            for j in 0..p {
                qx += self.q[(i, j)] * x[j];
            }
            v += 0.5 * x[i] * qx + self.b[i] * x[i];
        }
        v
    }

    pub fn gradient_into(&self, x: &[f64], out: &mut [f64]) {
        let p = self.dim();
        for i in 0..p {
            let mut g = self.b[i];
            for j in 0..p {
                g += self.q[(i, j)] * x[j];
            }
            out[i] = g;
        }
    }
}

/// A smooth convex local objective supplied by the caller.
///
/// Convexity and the Lipschitz bound on the gradient are caller obligations;
/// nothing here checks them.
pub trait SmoothObjective: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn gradient_into(&self, x: &[f64], out: &mut [f64]);
    /// Lipschitz constant of the gradient.
    fn lipschitz(&self) -> f64;
    /// Strong convexity modulus (0 when merely convex).
    fn strong_convexity(&self) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone)]
pub enum Objective {
    Quadratic(QuadraticObjective),
    Custom(Arc<dyn SmoothObjective>),
}

impl Objective {
    pub fn dim(&self) -> usize {
        match self {
            Objective::Quadratic(q) => q.dim(),
            Objective::Custom(c) => c.dim(),
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            Objective::Quadratic(q) => q.value(x),
            Objective::Custom(c) => c.value(x),
        }
    }

    pub fn gradient_into(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Objective::Quadratic(q) => q.gradient_into(x, out),
            Objective::Custom(c) => c.gradient_into(x, out),
        }
    }

    pub fn lipschitz(&self) -> f64 {
        match self {
            Objective::Quadratic(q) => q.lambda_max(),
            Objective::Custom(c) => c.lipschitz(),
        }
    }

    pub fn strong_convexity(&self) -> f64 {
        match self {
            Objective::Quadratic(q) => q.lambda_min(),
            Objective::Custom(c) => c.strong_convexity(),
        }
    }

    pub fn as_quadratic(&self) -> Option<&QuadraticObjective> {
        match self {
            Objective::Quadratic(q) => Some(q),
            Objective::Custom(_) => None,
        }
    }
}

/// Axis-aligned box `{x : lo <= x <= hi}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxSet {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::Dimension(format!(
                "box bounds have lengths {} and {}",
                lo.len(),
                hi.len()
            )));
        }
        if lo.iter().zip(&hi).any(|(l, h)| !(l <= h)) {
            return Err(Error::Config("box requires lo <= hi componentwise".into()));
        }
        Ok(Self { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (l, h))| *l <= *v && *v <= *h)
    }

    pub fn midpoint(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| 0.5 * (l + h)).collect()
    }
}

/// Immutable description of one resource allocation problem.
#[derive(Debug, Clone)]
pub struct ProblemInstance {
    n: usize,
    p: usize,
    seed: Option<u64>,
    objectives: Vec<Objective>,
    boxes: Option<Vec<BoxSet>>,
    resources: DMatrix<f64>,
    l_const: f64,
    mu_const: f64,
}

impl ProblemInstance {
    pub fn new(
        objectives: Vec<Objective>,
        boxes: Option<Vec<BoxSet>>,
        resources: DMatrix<f64>,
        seed: Option<u64>,
    ) -> Result<Self> {
        let n = objectives.len();
        if n < 2 {
            return Err(Error::Config(format!("need at least two agents, got {n}")));
        }
        let p = resources.ncols();
        if resources.nrows() != n {
            return Err(Error::Dimension(format!(
                "resources have {} rows for {n} agents",
                resources.nrows()
            )));
        }
        if p == 0 {
            return Err(Error::Dimension("p must be at least 1".into()));
        }
        if let Some(i) = objectives.iter().position(|o| o.dim() != p) {
            return Err(Error::Dimension(format!(
                "objective {i} has dimension {}, expected {p}",
                objectives[i].dim()
            )));
        }
        if let Some(bs) = &boxes {
            if bs.len() != n {
                return Err(Error::Dimension(format!("{} boxes for {n} agents", bs.len())));
            }
            if let Some(i) = bs.iter().position(|b| b.dim() != p) {
                return Err(Error::Dimension(format!("box {i} has wrong dimension")));
            }
            for j in 0..p {
                let lo: f64 = bs.iter().map(|b| b.lo[j]).sum();
                let hi: f64 = bs.iter().map(|b| b.hi[j]).sum();
                let r: f64 = resources.column(j).sum();
                let slack = 1e-12 * (1.0 + r.abs());
                if r < lo - slack || r > hi + slack {
                    return Err(Error::Infeasible(format!(
                        "coordinate {j}: total resource {r} outside [{lo}, {hi}]"
                    )));
                }
            }
        }
        let l_const = objectives.iter().map(Objective::lipschitz).fold(0.0, f64::max);
        let mu_const = objectives
            .iter()
            .map(Objective::strong_convexity)
            .fold(f64::INFINITY, f64::min);
        if !(l_const > 0.0) {
            return Err(Error::Config("global Lipschitz constant must be positive".into()));
        }
        Ok(Self {
            n,
            p,
            seed,
            objectives,
            boxes,
            resources,
            l_const,
            mu_const,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn objectives(&self) -> &[Objective] {
        &self.objectives
    }

    pub fn objective(&self, i: usize) -> &Objective {
        &self.objectives[i]
    }

    pub fn boxes(&self) -> Option<&[BoxSet]> {
        self.boxes.as_deref()
    }

    pub fn box_of(&self, i: usize) -> Option<&BoxSet> {
        self.boxes.as_ref().map(|b| &b[i])
    }

    pub fn resources(&self) -> &DMatrix<f64> {
        &self.resources
    }

    /// `max_i L_i`.
    pub fn l_const(&self) -> f64 {
        self.l_const
    }

    /// `min_i μ_i`; zero as soon as one local objective is not strongly convex.
    pub fn mu_const(&self) -> f64 {
        self.mu_const
    }

    /// Returns a copy with agent `i`'s objective replaced.
    pub fn with_objective(&self, i: usize, objective: Objective) -> Result<Self> {
        let mut objectives = self.objectives.clone();
        objectives[i] = objective;
        Self::new(objectives, self.boxes.clone(), self.resources.clone(), self.seed)
    }

    /// `f(x) = Σ_i f_i(x_i)`.
    pub fn total_value(&self, x: &DMatrix<f64>) -> f64 {
        (0..self.n)
            .map(|i| {
                let row: Vec<f64> = x.row(i).iter().copied().collect();
                self.objectives[i].value(&row)
            })
            .sum()
    }

    /// Stacked gradients, one row per agent.
    pub fn gradient_matrix(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_shape(x)?;
        let mut g = DMatrix::zeros(self.n, self.p);
        let mut xi = vec![0.0; self.p];
        let mut gi = vec![0.0; self.p];
        for i in 0..self.n {
            for k in 0..self.p {
                xi[k] = x[(i, k)];
            }
            self.objectives[i].gradient_into(&xi, &mut gi);
            for k in 0..self.p {
                g[(i, k)] = gi[k];
            }
        }
        Ok(g)
    }

    pub(crate) fn check_shape(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.nrows() != self.n || x.ncols() != self.p {
            return Err(Error::Dimension(format!(
                "expected {}x{} matrix, got {}x{}",
                self.n,
                self.p,
                x.nrows(),
                x.ncols()
            )));
        }
        Ok(())
    }

    /// Whether any coordinate of `x` sits on its box boundary.
    pub fn touches_boundary(&self, x: &DMatrix<f64>) -> bool {
        let Some(boxes) = &self.boxes else {
            return false;
        };
        boxes.iter().enumerate().any(|(i, b)| {
            (0..self.p).any(|k| {
                (x[(i, k)] - b.lo[k]).abs() <= BOUNDARY_TOL || (b.hi[k] - x[(i, k)]).abs() <= BOUNDARY_TOL
            })
        })
    }

    /// Projects each row of `x` onto its box (identity when boxes are absent).
    pub fn project_rows(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x.clone();
        if let Some(boxes) = &self.boxes {
            for (i, b) in boxes.iter().enumerate() {
                for k in 0..self.p {
                    out[(i, k)] = out[(i, k)].clamp(b.lo[k], b.hi[k]);
                }
            }
        }
        out
    }

    pub fn to_file(&self) -> Result<InstanceFile> {
        let objectives = self
            .objectives
            .iter()
            .map(|o| match o {
                Objective::Quadratic(q) => Ok(QuadraticRecord {
                    q: (0..self.p).map(|i| q.q().row(i).iter().copied().collect()).collect(),
                    b: q.b().iter().copied().collect(),
                }),
                Objective::Custom(_) => Err(Error::Unsupported(
                    "only quadratic objectives can be serialized".into(),
                )),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(InstanceFile {
            n: self.n,
            p: self.p,
            seed: self.seed,
            objectives,
            boxes: self.boxes.clone(),
            resources: (0..self.n).map(|i| self.resources.row(i).iter().copied().collect()).collect(),
        })
    }

    /// SHA-256 of the canonical JSON form; used to key cached oracle solutions.
    pub fn fingerprint(&self) -> Result<String> {
        let json = serde_json::to_vec(&self.to_file()?)?;
        Ok(hex::encode(Sha256::digest(&json)))
    }
}

/// `∇f_i(x) = Q_i x + b_i` (or the custom gradient).
pub fn gradient(instance: &ProblemInstance, i: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
    if i >= instance.n() {
        return Err(Error::Dimension(format!("agent index {i} out of range")));
    }
    if x.len() != instance.p() {
        return Err(Error::Dimension(format!(
            "point has length {}, expected {}",
            x.len(),
            instance.p()
        )));
    }
    let mut g = DVector::zeros(instance.p());
    instance.objective(i).gradient_into(x.as_slice(), g.as_mut_slice());
    Ok(g)
}

/// `‖Σ_i (x_i - r_i)‖₂`.
pub fn aggregate_feasibility_residual(instance: &ProblemInstance, x: &DMatrix<f64>) -> Result<f64> {
    instance.check_shape(x)?;
    let mut total = 0.0;
    for k in 0..instance.p() {
        let s: f64 = (0..instance.n()).map(|i| x[(i, k)] - instance.resources()[(i, k)]).sum();
        total += s * s;
    }
    Ok(total.sqrt())
}

/// Random instance: `A_i`, `b_i` standard normal, `Q_i = A_iᵀ A_i`.
///
/// With boxes, `lo = 0`, `hi ~ U[1, 2]` per coordinate and `r_i` is the box
/// midpoint; without boxes `r_i` is standard normal. With
/// `ensure_active_boxes`, instances are redrawn (up to [`ACTIVE_BOX_RETRIES`]
/// times) until the centralized solution touches a box boundary.
pub fn generate_instance(
    n: usize,
    p: usize,
    seed: u64,
    with_boxes: bool,
    ensure_active_boxes: bool,
) -> Result<ProblemInstance> {
    if n < 2 || p < 1 {
        return Err(Error::Config(format!("need n >= 2 and p >= 1, got n = {n}, p = {p}")));
    }
    if ensure_active_boxes && !with_boxes {
        return Err(Error::Config("active boxes requested without boxes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last = None;
    let attempts = if ensure_active_boxes { ACTIVE_BOX_RETRIES } else { 1 };
    for _ in 0..attempts {
        let inst = draw_instance(&mut rng, n, p, seed, with_boxes)?;
        if !ensure_active_boxes {
            return Ok(inst);
        }
        let sol = crate::oracle::solve_centralized(&inst, &crate::oracle::OracleSettings::default())?;
        if inst.touches_boundary(&sol.x_star) {
            return Ok(inst);
        }
        last = Some(inst);
    }
    Err(Error::ActiveBoxesExhausted {
        attempts,
        last: Box::new(last.expect("at least one attempt")),
    })
}

fn draw_instance(rng: &mut ChaCha8Rng, n: usize, p: usize, seed: u64, with_boxes: bool) -> Result<ProblemInstance> {
    let mut objectives = Vec::with_capacity(n);
    let mut boxes = Vec::with_capacity(n);
    let mut resources = DMatrix::zeros(n, p);
    for i in 0..n {
        let a = DMatrix::from_fn(p, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let b = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        objectives.push(Objective::Quadratic(QuadraticObjective::from_factor(&a, b)?));
        if with_boxes {
            let hi: Vec<f64> = (0..p).map(|_| rng.random_range(1.0..=2.0)).collect();
            let bx = BoxSet::new(vec![0.0; p], hi)?;
            for (k, m) in bx.midpoint().into_iter().enumerate() {
                resources[(i, k)] = m;
            }
            boxes.push(bx);
        } else {
            for k in 0..p {
                resources[(i, k)] = rng.sample(StandardNormal);
            }
        }
    }
    ProblemInstance::new(objectives, with_boxes.then_some(boxes), resources, Some(seed))
}

/// Unconstrained instance with a prescribed condition number: every `Q_i`
/// has spectrum inside `[1, kappa]`, agent 0 attains 1 and agent `n-1`
/// attains `kappa`, so `μ = 1` and `L = kappa`.
pub fn generate_conditioned_instance(n: usize, p: usize, kappa: f64, seed: u64) -> Result<ProblemInstance> {
    if n < 2 || p < 1 {
        return Err(Error::Config(format!("need n >= 2 and p >= 1, got n = {n}, p = {p}")));
    }
    if !(kappa >= 1.0) {
        return Err(Error::Config(format!("condition number must be >= 1, got {kappa}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut objectives = Vec::with_capacity(n);
    let mut resources = DMatrix::zeros(n, p);
    for i in 0..n {
        let g = DMatrix::from_fn(p, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let rot = g.qr().q();
        let mut eig: Vec<f64> = (0..p).map(|_| rng.random_range(1.0..=kappa)).collect();
        if i == 0 {
            eig[0] = 1.0;
        }
        if i == n - 1 {
            eig[p - 1] = kappa;
        }
        let q = &rot * DMatrix::from_diagonal(&DVector::from_vec(eig)) * rot.transpose();
        let q = (&q + q.transpose()) * 0.5;
        let b = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        objectives.push(Objective::Quadratic(QuadraticObjective::new(q, b)?));
        for k in 0..p {
            resources[(i, k)] = rng.sample(StandardNormal);
        }
    }
    ProblemInstance::new(objectives, None, resources, Some(seed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticRecord {
    #[serde(rename = "Q")]
    pub q: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

/// JSON instance file: `{n, p, seed, objectives: [{Q, b}], boxes | null, resources}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceFile {
    pub n: usize,
    pub p: usize,
    pub seed: Option<u64>,
    pub objectives: Vec<QuadraticRecord>,
    pub boxes: Option<Vec<BoxSet>>,
    pub resources: Vec<Vec<f64>>,
}

impl InstanceFile {
    pub fn into_instance(self) -> Result<ProblemInstance> {
        if self.objectives.len() != self.n || self.resources.len() != self.n {
            return Err(Error::Dimension("instance file lists do not match n".into()));
        }
        let objectives = self
            .objectives
            .into_iter()
            .map(|rec| {
                if rec.q.len() != self.p || rec.q.iter().any(|row| row.len() != self.p) {
                    return Err(Error::Dimension("Q has wrong shape".into()));
                }
                let q = DMatrix::from_fn(self.p, self.p, |i, j| rec.q[i][j]);
                Ok(Objective::Quadratic(QuadraticObjective::new(q, DVector::from_vec(rec.b))?))
            })
            .collect::<Result<Vec<_>>>()?;
        if self.resources.iter().any(|r| r.len() != self.p) {
            return Err(Error::Dimension("resource row has wrong length".into()));
        }
        let resources = DMatrix::from_fn(self.n, self.p, |i, k| self.resources[i][k]);
        ProblemInstance::new(objectives, self.boxes, resources, self.seed)
    }
}
