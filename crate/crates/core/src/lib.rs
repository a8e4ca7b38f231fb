//! Rover terrain-navigation laboratory: procedural terrain, skid-steer
//! kinematics, a goal-seeking MDP, an actor-critic network with analytic
//! gradients, PPO training, and zero-shot transfer evaluation.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod env;
pub mod evalx;
pub mod nn;
pub mod ppo;
pub mod rng;
pub mod rover;
pub mod telemetry;
pub mod terrain;
pub mod train;
