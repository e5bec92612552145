//! Multi-UAV data collection with Age-of-Information objectives: the
//! physical simulator, return-to-base masking, the Dec-POMDP wrapper,
//! value-decomposition learners, baselines and the experiment harness.

pub mod baselines;
pub mod decpomdp;
pub mod feasibility;
pub mod harness;
pub mod nn;
pub mod qmix;
pub mod rng;
pub mod world;
