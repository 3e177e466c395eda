//! Imitation-learning motion planner with attention-guided token pruning and
//! cross-scenario feature interpolation, plus the synthetic scenario
//! generator and closed-loop harness used to train and evaluate it.

pub mod autodiff;
pub mod csfi;
pub mod encoder;
pub mod geometry;
pub mod harness;
pub mod nn;
pub mod planner;
pub mod rng;
pub mod scene;
