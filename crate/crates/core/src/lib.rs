pub mod bitstream;
pub mod controller;
pub mod diffusion;
pub mod embedding;
pub mod features;
pub mod gateway;
pub mod harness;
pub mod image;
pub mod initial_codec;
pub mod metrics;
pub mod pipeline;
pub mod scenes;
pub mod segmentation;
pub mod semantics;
