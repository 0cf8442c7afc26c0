//! Two-phase image segmentation driven by exemplar feature histograms.
//!
//! The relaxed segmentation `u ∈ [0,1]^N` minimizes a total-variation prior plus
//! two histogram fidelity terms, one per region. Fidelities are optimal-transport
//! distances (exact Monge-Kantorovich, or its entropic Sinkhorn regularization)
//! or the bin-to-bin L1 norm, and the convex problem is solved with a first-order
//! primal-dual iteration.
//!
//! Module map:
//! - [`features`]: feature transforms, K-means codebooks, bin assignment, histograms.
//! - [`linops`]: matrix-free operators (gradient, histogram operator, rank-one blocks).
//! - [`transport`]: cost matrices, LP oracle, Sinkhorn, conjugates, Lambert W, proxes.
//! - [`solver`]: the saddle-point iteration with four fidelity backends.
//! - [`pipeline`]: image/scribble I/O, thresholding, and end-to-end jobs.

pub mod error;
pub mod features;
pub mod linops;
pub mod pipeline;
pub mod solver;
pub mod transport;

pub use error::{Error, Result};
