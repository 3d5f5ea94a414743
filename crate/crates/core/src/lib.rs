//! Traffic-movie forecasting on city grids.
//!
//! A day of city traffic is a "movie" of 288 five-minute frames, each pixel
//! holding volume, speed and a heading code. This crate assembles 101-channel
//! feature stacks from an archive of such movies, crops the city into five
//! overlapping tiles, trains a small masked encoder–decoder per
//! (city, subtask, tile) with a staged schedule, stitches tile predictions
//! back together and scores them with pixel metrics and a CE + MAPE
//! composite loss.

pub mod cli;
pub mod error;
pub mod feature_stack;
pub mod losses_metrics;
pub mod movie_store;
pub mod neuralnet;
pub mod tensor;
pub mod tiling;
pub mod trainer;

pub use error::{Error, Result};
pub use feature_stack::{assemble, FeatureConfig, FeatureRequest, FeatureStack, SmoothingConfig};
pub use losses_metrics::{composite_loss, LossReport, LossWeights};
pub use movie_store::{GridDims, Movie, MovieArchive, Subtask};
pub use neuralnet::{init_model, HeadKind, MaskPlane, NetConfig, Network, UNetModel};
pub use tensor::{Plane, Tensor3};
pub use tiling::{plan_layout, Rect, TileLayout};
