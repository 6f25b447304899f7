pub mod config;
pub mod evaluation;
pub mod features;
pub mod ingest;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod tuning;
