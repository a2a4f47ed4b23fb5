pub mod artifact_sim;
pub mod dataset;
pub mod metrics;
pub mod phantoms;
pub mod seeds;
pub mod translate;
pub mod volumes;
