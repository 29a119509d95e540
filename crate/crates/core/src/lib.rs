//! Neural manifold gluing for multi-domain graph pre-training.
//!
//! Each graph gets a local Riemannian geometry (coordinates, an orthogonal
//! tangent frame and an SPD metric) learned through a sparse perturbation of
//! its structure. Local pieces are glued along a k-nearest-neighbour skeleton
//! with isometric edge transports, regularised by holonomy and
//! log-determinant curvature losses. Per-domain prototypes are tracked by
//! EMA in `(z, log G)` space and anchor few-shot adaptation to new domains,
//! where the same gluing losses yield a geometric transfer metric.

// `!(x > 0.0)` is how NaN gets rejected alongside non-positive values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapt;
pub mod checkpoint;
pub mod config;
pub mod diff;
pub mod encoder;
pub mod frame;
pub mod gluing;
pub mod graph;
pub mod linalg;
pub mod model;
pub mod pretrain;
pub mod prototypes;
pub mod rng;
