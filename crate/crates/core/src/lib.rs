//! Weakly supervised binary segmentation with size-constrained and
//! adversarial constrained losses, trained on seeded synthetic benchmarks.

pub mod cli;
pub mod eval;
pub mod exec;
pub mod losses;
pub mod mask;
pub mod nets;
pub mod optim;
pub mod synthdata;
pub mod tensor;
pub mod trainer;
