//! Distributed resource allocation over undirected networks.
//!
//! Agents minimize `Σ_i f_i(x_i)` subject to `Σ_i (x_i - r_i) = 0` and
//! optional local boxes, exchanging one vector per neighbor per round.

// NaN-rejecting comparisons such as `!(x > 0.0)` and index loops over
// small dense blocks are deliberate.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

#[cfg(test)]
macro_rules! assert_close {
    ($a:expr, $b:expr, $tol:expr) => {{
        let (a, b, tol): (f64, f64, f64) = ($a, $b, $tol);
        assert!((a - b).abs() <= tol, "{} vs {} (tol {})", a, b, tol);
    }};
}

pub mod allocators;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod metrics;
pub mod oracle;
pub mod problem;
pub mod prox;

pub use error::{Error, Result};
