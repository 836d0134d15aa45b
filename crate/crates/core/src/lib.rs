//! Synthetic difference-description data: pair synthesis, region mining,
//! captioning, object removal and dataset emission.

pub mod areas;
pub mod backend;
pub mod captions;
pub mod config;
pub mod dataset;
pub mod diversity;
pub mod funnel;
pub mod geometry;
pub mod hash;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod raster;
pub mod removal;
pub mod scene;
pub mod similarity;
pub mod sweep;
pub mod synthesis;
