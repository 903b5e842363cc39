//! Optical-flow leak baseline: dense polynomial-expansion flow between
//! consecutive residual frames, thresholded by speed and moving area.

mod baseline;
mod farneback;

pub use baseline::{
    build_grids, classify_frame, classify_speeds, fit_baseline, grid_search, log_space, moving_pixels, quantile,
    BaselineModel, GridCell, GridSearch, ThresholdPair, GRID_SIZE,
};
pub use farneback::{farneback_flow, flow_between, FarnebackParams, FlowField, FramePyramid};
