//! Desk-scale laboratory for point-set vector-map detection.
//!
//! The crate covers the whole pipeline at toy scale: vector-map graphs and
//! their decomposition into instances ([`geometry`]), seeded synthetic BEV
//! scenes ([`synthgen`]), a small dense kernel with explicit reverse-mode
//! gradients ([`numcore`]), object-query generation schemes ([`queries`]),
//! inner-instance query fusion and masked inner-instance self-attention
//! ([`decoder`]), a trainable detector ([`detector`]) and Chamfer-AP / TOPO
//! evaluation ([`metrics`]).

pub mod error;
pub mod geometry;
pub mod numcore;
pub mod queries;
pub mod decoder;
pub mod synthgen;
pub mod metrics;
pub mod detector;
pub mod gradsuite;

pub use error::{Error, Result};
pub use geometry::{
    ElementClass, Instance, InstanceKind, Point, SampledInstance, VectorMapGraph,
};
