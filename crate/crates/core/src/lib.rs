pub mod cli;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod plan;
pub mod tensor;
