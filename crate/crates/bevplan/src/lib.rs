//! End-to-end trajectory planner on a synthetic 2D driving benchmark.
//!
//! The pipeline encodes ego-centric BEV rasters of the recent past, predicts
//! a prior trajectory from sparse scene queries, models scene dynamics
//! through temporal residuals of those queries, expands the predicted
//! dynamics back onto the BEV grid, and refines the trajectory against the
//! predicted future feature with deformable attention.

pub mod ablate;
pub mod autodiff;
pub mod collision;
pub mod config;
pub mod eval;
pub mod fgtr;
pub mod geometry;
pub mod gradsuite;
pub mod model;
pub mod nn;
pub mod planner;
pub mod report;
pub mod scene;
pub mod sim;
pub mod train;
pub mod world;
