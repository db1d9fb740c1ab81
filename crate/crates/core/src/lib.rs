pub mod backbones;
pub mod config;
pub mod data;
pub mod experiment;
pub mod inference;
pub mod label;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod train;
pub mod video;
