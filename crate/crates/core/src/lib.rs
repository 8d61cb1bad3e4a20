//! Geometry, cascade and statistics engine for automated chromosome
//! karyotyping: raster primitives, the multi-stage detection cascade, the
//! model wire protocol, synthetic spread generation and evaluation.

pub mod imaging;
pub mod cascade;
pub mod protocol;
pub mod synthgen;
pub mod pipeline;
pub mod evalstats;
