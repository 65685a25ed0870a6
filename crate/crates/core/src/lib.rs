//! Semi-supervised BEV motion prediction: voxelization, optimal-transport
//! label refinement, augmentations, a small convolutional predictor with a
//! mean-teacher loop, and a synthetic benchmark.

pub mod augment;
pub mod container;
pub mod error;
pub mod grid;
pub mod ground;
pub mod knn;
pub mod msrm;
pub mod synthworld;
pub mod trainer;
pub mod transport;

pub use error::{Error, Result};
pub use grid::{
    cells_to_meters, meters_to_cells, nonempty_cells, voxelize, warp_cells, BevMap, BevSequence,
    Cell, CellSet, GridSpec, MotionField, PointCloud,
};
