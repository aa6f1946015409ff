pub mod cli;
pub mod data;
pub mod eval;
pub mod generator;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod motion;
pub mod nn;
pub mod scale_transform;
pub mod tensor;
pub mod training;
pub mod verify;

#[cfg(test)]
mod test_support;
