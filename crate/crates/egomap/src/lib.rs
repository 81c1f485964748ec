//! Differentiable egocentric spatial memory for first-person RL agents,
//! with the raycast environment and actor-critic harness used to train it.

pub mod diff;
pub mod geometry;
pub mod real;
pub mod tensor;
