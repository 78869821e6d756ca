//! Joint optimization of coordinate neural fields and per-frame camera warps.

pub mod autodiff;
pub mod encoding;
pub mod geometry;
pub mod registration;
pub mod warp;
pub mod field;
pub mod render;
pub mod raster;
pub mod metrics;
pub mod data;
pub mod train;
pub mod checkpoint;
pub mod harness;
pub mod suite;
