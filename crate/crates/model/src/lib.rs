//! Networks, objectives and adversarial training for regularized
//! volume-to-volume translation.

pub mod checkpoint;
pub mod layers;
pub mod losses;
pub mod nets;
pub mod optim;
pub mod real;
pub mod training;
pub mod translator;
