//! File formats: PFM disparities, PNG images, key-value configuration and
//! dataset directories.

pub mod colormap;
pub mod config;
pub mod dataset;
pub mod pfm;
pub mod png;
