//! Dual-stream disentangled policy learning for long-horizon embodied tasks.
//!
//! The crate is organized as a pipeline:
//!
//! ```text
//!   raw obs ──► obs::separate ──► obs_env ──► encoders::env_encode ──► z_env ─┐
//!                          └────► obs_self ─► encoders::self_encode ─► z_self ┤
//!                                                                             ▼
//!                         fusion::{cross_attention, gated, moe} ──► 3 tokens ─┐
//!                                                                             ▼
//!                              policy trunk (pre-norm transformer) ──► π, V
//! ```
//!
//! Everything differentiable runs on the reverse-mode tape in [`autodiff`];
//! [`training`] drives the staged protocol (env pretrain → self pretrain →
//! frozen-encoder fusion → joint fine-tune) with PPO; [`sim`] provides a
//! deterministic kinematic world with scenes, heightmaps, trajectories, and
//! sequential multi-skill episodes; [`metrics`] turns episode outcomes into
//! success rates and the two generalization ratios (EGR / SGR).
//!
//! All numerics are `f64` and all randomness flows through seeded ChaCha
//! streams, so fixed-seed runs are bitwise reproducible.

pub mod autodiff;
pub mod bench;
pub mod cli;
pub mod config;
pub mod diagnostics;
pub mod encoders;
pub mod fusion;
pub mod metrics;
pub mod nn;
pub mod obs;
pub mod optim;
pub mod params;
pub mod policy;
pub mod sim;
pub mod training;
