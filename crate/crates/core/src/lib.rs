//! Event-based adapt-then-combine (EB-ATC) diffusion LMS over sensor
//! networks: simulation, Monte Carlo metrics and closed-form stability and
//! error-bound analysis.

pub mod analysis;
pub mod datamodel;
pub mod diffusion;
pub mod harness;
pub mod metrics;
pub mod topology;
