//! Two-agent runs replayed in exact rational arithmetic.

use nalgebra::{DMatrix, DVector};
use num_rational::Ratio;
use resalloc::allocators::{Algorithm, AlgorithmConfig, Simulation};
use resalloc::graph::{MatrixKind, Network, Topology};
use resalloc::problem::{BoxSet, Objective, ProblemInstance, QuadraticObjective};

type Q = Ratio<i128>;

const ROUNDS: usize = 8;

fn q(num: i128, den: i128) -> Q {
    Q::new(num, den)
}

fn to_f64(v: Q) -> f64 {
    *v.numer() as f64 / *v.denom() as f64
}

fn clamp(v: Q, lo: Q, hi: Q) -> Q {
    v.max(lo).min(hi)
}

/// `f_i(x) = x²/2`, `r = (1, -1)`, Laplacian of the single edge.
fn setup(boxes: Option<(f64, f64)>) -> (ProblemInstance, Network) {
    let objectives = (0..2)
        .map(|_| Objective::Quadratic(QuadraticObjective::new(DMatrix::identity(1, 1), DVector::zeros(1)).unwrap()))
        .collect();
    let boxes = boxes.map(|(lo, hi)| vec![BoxSet::new(vec![lo], vec![hi]).unwrap(); 2]);
    let r = DMatrix::from_column_slice(2, 1, &[1.0, -1.0]);
    let instance = ProblemInstance::new(objectives, boxes, r, None).unwrap();
    let network = Network::build(Topology::path(2).unwrap(), MatrixKind::StandardLaplacian, None).unwrap();
    (instance, network)
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Exact {
    x: [Q; 2],
    s: [Q; 2],
    y_cur: [Q; 2],
}

/// `Ł v` for the two-vertex Laplacian.
fn mix(v: [Q; 2]) -> [Q; 2] {
    [v[0] - v[1], v[1] - v[0]]
}

fn replay(alg: Algorithm, x0: [Q; 2], bounds: Option<(Q, Q)>) -> Vec<Exact> {
    let c = q(1, 10);
    let beta = q(1, 1);
    let r = [q(1, 1), q(-1, 1)];
    let zero = q(0, 1);
    let s0 = match alg {
        Algorithm::MirrorPExtra => x0,
        _ => [zero; 2],
    };
    let mut st = Exact {
        x: x0,
        s: s0,
        y_cur: [zero; 2],
    };
    let mut out = vec![st];
    for _ in 0..ROUNDS {
        let payload = match alg {
            Algorithm::MirrorPExtra => st.s,
            Algorithm::MirrorExtra => st.x,
            Algorithm::MirrorPgExtra => [st.x[0] + st.s[0], st.x[1] + st.s[1]],
        };
        let lm = mix(payload);
        let mut next = st;
        for i in 0..2 {
            let y = st.y_cur[i] + lm[i];
            let v = r[i] - q(2, 1) * c * y + c * st.y_cur[i];
            let x = match alg {
                // argmin x²/2 - s x + (x - v)²/(2β)
                Algorithm::MirrorPExtra => (beta * st.s[i] + v) / (beta + q(1, 1)),
                Algorithm::MirrorExtra => v,
                Algorithm::MirrorPgExtra => {
                    let (lo, hi) = bounds.expect("boxes");
                    clamp(v + beta * st.s[i], lo, hi)
                }
            };
            next.x[i] = x;
            if alg != Algorithm::MirrorExtra {
                next.s[i] = st.s[i] - (x - v) / beta;
            }
            next.y_cur[i] = y;
        }
        st = next;
        out.push(st);
    }
    out
}

fn compare(alg: Algorithm, boxes: Option<(f64, f64)>, x0: [f64; 2], exact: &[Exact]) {
    let (instance, network) = setup(boxes);
    let betas = if alg == Algorithm::MirrorExtra { vec![] } else { vec![1.0, 1.0] };
    let cfg = AlgorithmConfig::new(alg, 0.1, betas);
    let x0 = DMatrix::from_column_slice(2, 1, &x0);
    let mut sim = Simulation::unchecked(&instance, &network, &cfg, Some(&x0)).unwrap();
    for (k, e) in exact.iter().enumerate() {
        for (i, st) in sim.states().iter().enumerate() {
            assert!((st.x[0] - to_f64(e.x[i])).abs() < 1e-13, "{alg:?} round {k} x_{i}");
            if alg != Algorithm::MirrorExtra {
                assert!((st.s[0] - to_f64(e.s[i])).abs() < 1e-13, "{alg:?} round {k} s_{i}");
            }
            assert!((st.y_cur[0] - to_f64(e.y_cur[i])).abs() < 1e-13, "{alg:?} round {k} y_{i}");
        }
        if k < ROUNDS {
            sim.step().unwrap();
        }
    }
}

#[test]
fn p_extra_first_round_by_hand() {
    let exact = replay(Algorithm::MirrorPExtra, [q(1, 1), q(-1, 1)], None);
    assert_eq!(exact[1].y_cur, [q(2, 1), q(-2, 1)]);
    assert_eq!(exact[1].x, [q(4, 5), q(-4, 5)]);
    assert_eq!(exact[1].s, [q(4, 5), q(-4, 5)]);
}

#[test]
fn p_extra_matches_exact_replay() {
    let exact = replay(Algorithm::MirrorPExtra, [q(1, 1), q(-1, 1)], None);
    compare(Algorithm::MirrorPExtra, None, [1.0, -1.0], &exact);
}

#[test]
fn extra_matches_exact_replay() {
    let exact = replay(Algorithm::MirrorExtra, [q(1, 1), q(-1, 1)], None);
    assert_eq!(exact[1].x, [q(3, 5), q(-3, 5)]);
    compare(Algorithm::MirrorExtra, None, [1.0, -1.0], &exact);
}

#[test]
fn pg_extra_matches_exact_replay_with_boxes() {
    let bounds = (q(-1, 2), q(1, 2));
    let exact = replay(Algorithm::MirrorPgExtra, [q(1, 2), q(-1, 2)], Some(bounds));
    assert!(exact.iter().all(|e| e.x.iter().all(|x| *x >= bounds.0 && *x <= bounds.1)));
    compare(Algorithm::MirrorPgExtra, Some((-0.5, 0.5)), [0.5, -0.5], &exact);
}
