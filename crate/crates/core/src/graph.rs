//! Agent communication graphs and the mixing matrix `Ł` built on them.
//!
//! `Ł` is any symmetric positive semidefinite matrix that is compatible with the
//! graph and whose null space is exactly `span{1}`. Three constructions are
//! provided: the standard Laplacian `D - J`, the Laplacian scaled by its largest
//! eigenvalue, and `0.5 (I - W)` for a Metropolis-type doubly stochastic `W`.
//!
//! The factor `U` with `Ł = Uᵀ U` is never formed; every quantity of the form
//! `‖U V‖²` is evaluated as `⟨V, Ł V⟩`.

use std::collections::{BTreeSet, BinaryHeap, VecDeque};
use std::cmp::Reverse;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative threshold below which an eigenvalue of `Ł` counts as zero.
pub const NULL_EIGEN_RTOL: f64 = 1e-10;

/// Simple undirected graph on vertices `0..n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    n: usize,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
    seed: Option<u64>,
}

impl Topology {
    /// Builds a topology from an edge list. Each edge is stored once as `(i, j)`
    /// with `i < j`; self loops, duplicates and out-of-range vertices are rejected.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if n == 0 {
            return Err(Error::Graph("graph needs at least one vertex".into()));
        }
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::Graph(format!("edge ({a}, {b}) out of range for n = {n}")));
            }
            if a == b {
                return Err(Error::Graph(format!("self loop at vertex {a}")));
            }
            let e = (a.min(b), a.max(b));
            if !set.insert(e) {
                return Err(Error::Graph(format!("duplicate edge ({}, {})", e.0, e.1)));
            }
        }
        let edges: Vec<_> = set.into_iter().collect();
        let mut neighbors = vec![Vec::new(); n];
        for &(a, b) in &edges {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for nb in &mut neighbors {
            nb.sort_unstable();
        }
        Ok(Self {
            n,
            edges,
            neighbors,
            seed: None,
        })
    }

    pub fn path(n: usize) -> Result<Self> {
        Self::from_edges(n, (1..n).map(|i| (i - 1, i)))
    }

    /// Star with vertex 0 at the center.
    pub fn star(n: usize) -> Result<Self> {
        Self::from_edges(n, (1..n).map(|i| (0, i)))
    }

    pub fn complete(n: usize) -> Result<Self> {
        Self::from_edges(n, (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.neighbors.iter().map(Vec::len).collect()
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.neighbors[a].binary_search(&b).is_ok()
    }

    pub fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.n];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = queue.pop_front() {
            for &w in &self.neighbors[v] {
                if !seen[w] {
                    seen[w] = true;
                    count += 1;
                    queue.push_back(w);
                }
            }
        }
        count == self.n
    }
}

/// Number of edges requested by a connectivity ratio, `⌈ratio · n(n-1)/2⌉`.
///
/// The product is rounded to 9 decimals first so that e.g. `0.04 · 4950`
/// yields 198 rather than 199.
pub fn edge_count_for_ratio(n: usize, ratio: f64) -> usize {
    let pairs = (n * (n.saturating_sub(1)) / 2) as f64;
    let raw = ratio * pairs;
    ((raw * 1e9).round() / 1e9).ceil() as usize
}

/// Random connected graph: a uniform random labeled tree (Prüfer code) plus
/// extra edges drawn uniformly without replacement from the non-edges until
/// `⌈ratio · n(n-1)/2⌉` edges are present.
pub fn build_graph(n: usize, connectivity_ratio: f64, seed: u64) -> Result<Topology> {
    if n < 2 {
        return Err(Error::Graph(format!("need n >= 2 agents, got {n}")));
    }
    if !(connectivity_ratio > 0.0 && connectivity_ratio <= 1.0) {
        return Err(Error::Graph(format!(
            "connectivity ratio must lie in (0, 1], got {connectivity_ratio}"
        )));
    }
    let target = edge_count_for_ratio(n, connectivity_ratio);
    let max_edges = n * (n - 1) / 2;
    if target < n - 1 {
        return Err(Error::Graph(format!(
            "{target} edges cannot connect {n} vertices (need at least {})",
            n - 1
        )));
    }
    if target > max_edges {
        return Err(Error::Graph(format!("{target} edges exceed the maximum {max_edges}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges: BTreeSet<(usize, usize)> = random_tree(n, &mut rng).into_iter().collect();

    let extra = target - edges.len();
    if extra > 0 {
        let non_edges: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|e| !edges.contains(e))
            .collect();
        for idx in sample(&mut rng, non_edges.len(), extra) {
            edges.insert(non_edges[idx]);
        }
    }

    let mut topo = Topology::from_edges(n, edges)?;
    topo.seed = Some(seed);
    Ok(topo)
}

/// Uniform random labeled tree on `n >= 2` vertices via Prüfer decoding.
fn random_tree(n: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    if n == 2 {
        return vec![(0, 1)];
    }
    let code: Vec<usize> = (0..n - 2).map(|_| rng.random_range(0..n)).collect();
    let mut degree = vec![1usize; n];
    for &v in &code {
        degree[v] += 1;
    }
    let mut leaves: BinaryHeap<Reverse<usize>> =
        (0..n).filter(|&v| degree[v] == 1).map(Reverse).collect();
    let mut edges = Vec::with_capacity(n - 1);
    for &v in &code {
        let Reverse(leaf) = leaves.pop().expect("prufer decoding always has a leaf");
        edges.push((leaf.min(v), leaf.max(v)));
        degree[v] -= 1;
        if degree[v] == 1 {
            leaves.push(Reverse(v));
        }
    }
    let Reverse(a) = leaves.pop().expect("two leaves remain");
    let Reverse(b) = leaves.pop().expect("two leaves remain");
    edges.push((a.min(b), a.max(b)));
    edges
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightRule {
    /// `w_ij = 1 / (1 + max(d_i, d_j))`.
    MetropolisHastings,
    /// `w_ij = 1 / (2 max(d_i, d_j))`.
    LazyMetropolis,
}

/// Symmetric doubly stochastic matrix compatible with a topology.
#[derive(Debug, Clone)]
pub struct WeightMatrix {
    pub w: DMatrix<f64>,
    pub rule: WeightRule,
}

pub fn metropolis_weights(topology: &Topology, rule: WeightRule) -> Result<WeightMatrix> {
    if !topology.is_connected() {
        return Err(Error::Graph("topology is not connected".into()));
    }
    let n = topology.n();
    let mut w = DMatrix::zeros(n, n);
    for &(i, j) in topology.edges() {
        let dmax = topology.degree(i).max(topology.degree(j)) as f64;
        let wij = match rule {
            WeightRule::MetropolisHastings => 1.0 / (1.0 + dmax),
            WeightRule::LazyMetropolis => 1.0 / (2.0 * dmax),
        };
        w[(i, j)] = wij;
        w[(j, i)] = wij;
    }
    for i in 0..n {
        let off: f64 = topology.neighbors(i).iter().map(|&j| w[(i, j)]).sum();
        w[(i, i)] = 1.0 - off;
    }
    Ok(WeightMatrix { w, rule })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixKind {
    StandardLaplacian,
    NormalizedLaplacian,
    HalfIMinusW,
}

/// A connected topology together with its mixing matrix `Ł` and spectral bounds.
#[derive(Debug, Clone)]
pub struct Network {
    topology: Topology,
    kind: MatrixKind,
    rule: Option<WeightRule>,
    l_mat: DMatrix<f64>,
    /// `links[i]` holds `(j, -Ł_ij)` for every neighbor `j`; the weights are positive.
    links: Vec<Vec<(usize, f64)>>,
    lambda_max: f64,
    lambda_min_nz: f64,
}

impl Network {
    /// Builds `Ł` of the requested kind. `weights` must be given exactly when
    /// `kind` is [`MatrixKind::HalfIMinusW`].
    pub fn build(topology: Topology, kind: MatrixKind, weights: Option<&WeightMatrix>) -> Result<Self> {
        if !topology.is_connected() {
            return Err(Error::Graph("topology is not connected".into()));
        }
        if topology.n() < 2 {
            return Err(Error::Graph("a network needs at least two agents".into()));
        }
        let n = topology.n();
        let off_weight = |i: usize, j: usize| -> Result<f64> {
            match (kind, weights) {
                (MatrixKind::HalfIMinusW, Some(wm)) => Ok(0.5 * wm.w[(i, j)]),
                (MatrixKind::HalfIMinusW, None) => {
                    Err(Error::Config("0.5(I - W) requires a weight matrix".into()))
                }
                (_, Some(_)) => Err(Error::Config(format!("{kind:?} takes no weight matrix"))),
                (_, None) => Ok(1.0),
            }
        };
        if let Some(wm) = weights {
            if wm.w.nrows() != n || wm.w.ncols() != n {
                return Err(Error::Dimension(format!(
                    "weight matrix is {}x{}, topology has {n} vertices",
                    wm.w.nrows(),
                    wm.w.ncols()
                )));
            }
        }

        let mut links = vec![Vec::new(); n];
        for &(i, j) in topology.edges() {
            let w = off_weight(i, j)?;
            links[i].push((j, w));
            links[j].push((i, w));
        }
        for l in &mut links {
            l.sort_by_key(|&(j, _)| j);
        }

        let mut l_mat = DMatrix::zeros(n, n);
        for (i, row) in links.iter().enumerate() {
            let mut diag = 0.0;
            for &(j, w) in row {
                l_mat[(i, j)] = -w;
                diag += w;
            }
            l_mat[(i, i)] = diag;
        }

        let (mut lambda_max, mut lambda_min_nz) = spectral_bounds(&l_mat)?;
        if kind == MatrixKind::NormalizedLaplacian {
            let scale = lambda_max;
            l_mat /= scale;
            for row in &mut links {
                for (_, w) in row.iter_mut() {
                    *w /= scale;
                }
            }
            lambda_min_nz /= scale;
            lambda_max = 1.0;
        }

        Ok(Self {
            topology,
            kind,
            rule: weights.map(|w| w.rule),
            l_mat,
            links,
            lambda_max,
            lambda_min_nz,
        })
    }

    /// Convenience constructor picking the weight rule when needed.
    pub fn with_rule(topology: Topology, kind: MatrixKind, rule: WeightRule) -> Result<Self> {
        match kind {
            MatrixKind::HalfIMinusW => {
                let w = metropolis_weights(&topology, rule)?;
                Self::build(topology, kind, Some(&w))
            }
            _ => Self::build(topology, kind, None),
        }
    }

    pub fn n(&self) -> usize {
        self.topology.n()
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn kind(&self) -> MatrixKind {
        self.kind
    }

    pub fn rule(&self) -> Option<WeightRule> {
        self.rule
    }

    pub fn l_mat(&self) -> &DMatrix<f64> {
        &self.l_mat
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    pub fn lambda_min_nz(&self) -> f64 {
        self.lambda_min_nz
    }

    /// Neighbor links of agent `i` as `(j, -Ł_ij)` pairs.
    pub fn links(&self, i: usize) -> &[(usize, f64)] {
        &self.links[i]
    }

    /// Row `i` of `Ł V` where `rows[j]` is row `j` of `V`, written in the form
    /// `Σ_j -Ł_ij (v_i - v_j)` which relies on the zero row sums of `Ł`.
    pub fn mix_row(&self, i: usize, rows: &[&[f64]], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        let vi = rows[i];
        for &(j, w) in &self.links[i] {
            let vj = rows[j];
            for k in 0..out.len() {
                out[k] += w * (vi[k] - vj[k]);
            }
        }
    }

    /// `Ł V` for an `n × p` matrix.
    pub fn mix(&self, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_rows(v)?;
        let p = v.ncols();
        let mut out = DMatrix::zeros(self.n(), p);
        for i in 0..self.n() {
            for &(j, w) in &self.links[i] {
                for k in 0..p {
                    out[(i, k)] += w * (v[(i, k)] - v[(j, k)]);
                }
            }
        }
        Ok(out)
    }

    fn check_rows(&self, v: &DMatrix<f64>) -> Result<()> {
        if v.nrows() != self.n() {
            return Err(Error::Dimension(format!(
                "matrix has {} rows, network has {} agents",
                v.nrows(),
                self.n()
            )));
        }
        Ok(())
    }

    pub fn to_file(&self) -> TopologyFile {
        TopologyFile {
            n: self.n(),
            edges: self.topology.edges().iter().map(|&(a, b)| [a, b]).collect(),
            seed: self.topology.seed(),
            kind: self.kind,
            rule: self.rule,
        }
    }
}

/// `trace(Vᵀ Ł V) = ‖U V‖_F²`, evaluated edge by edge as
/// `Σ_{{i,j}∈E} -Ł_ij ‖v_i - v_j‖²`.
pub fn laplacian_quadratic(network: &Network, v: &DMatrix<f64>) -> Result<f64> {
    network.check_rows(v)?;
    let p = v.ncols();
    let mut total = 0.0;
    for &(i, j) in network.topology.edges() {
        let w = network.links[i]
            .iter()
            .find(|&&(k, _)| k == j)
            .map(|&(_, w)| w)
            .expect("edge present in links");
        let mut d2 = 0.0;
        for k in 0..p {
            let d = v[(i, k)] - v[(j, k)];
            d2 += d * d;
        }
        total += w * d2;
    }
    Ok(total)
}

/// Largest and smallest nonzero eigenvalue of a symmetric PSD matrix whose
/// null space must be one dimensional.
fn spectral_bounds(m: &DMatrix<f64>) -> Result<(f64, f64)> {
    let eig = SymmetricEigen::new(m.clone());
    let lambda_max = eig.eigenvalues.max();
    if !(lambda_max > 0.0) {
        return Err(Error::Graph("mixing matrix is zero".into()));
    }
    let thresh = NULL_EIGEN_RTOL * lambda_max;
    let zero_count = eig.eigenvalues.iter().filter(|&&l| l <= thresh).count();
    if zero_count != 1 {
        return Err(Error::Graph(format!(
            "mixing matrix has {zero_count} null eigenvalues, expected exactly one"
        )));
    }
    let lambda_min_nz = eig
        .eigenvalues
        .iter()
        .copied()
        .filter(|&l| l > thresh)
        .fold(f64::INFINITY, f64::min);
    Ok((lambda_max, lambda_min_nz))
}

/// JSON form of a network: `{"n", "edges", "seed", "kind", "rule"}` with 0-based vertices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyFile {
    pub n: usize,
    pub edges: Vec<[usize; 2]>,
    pub seed: Option<u64>,
    pub kind: MatrixKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule: Option<WeightRule>,
}

impl TopologyFile {
    pub fn into_network(self) -> Result<Network> {
        let mut topo = Topology::from_edges(self.n, self.edges.iter().map(|e| (e[0], e[1])))?;
        topo.seed = self.seed;
        let rule = self.rule.unwrap_or(WeightRule::LazyMetropolis);
        Network::with_rule(topo, self.kind, rule)
    }
}
