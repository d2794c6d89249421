pub mod numerics;
pub mod bounds;
pub mod checkpoint;
pub mod cli;
pub mod ccam;
pub mod corpus;
pub mod diffusion;
pub mod encoders;
pub mod error;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod train;
