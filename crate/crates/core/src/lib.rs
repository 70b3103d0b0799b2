//! Policy mirror descent with multi-step lookahead for finite MDPs.
//!
//! The crate implements the h-PMD family of algorithms: at every iteration
//! the policy improvement step is regularized by a Bregman divergence and
//! driven by the lookahead action values
//! Q_h(s,a) = r(s,a) + γ (P 𝒯^{h-1} V^π)(s,a), so that the suboptimality gap
//! contracts with factor γ^h instead of γ. Setting h = 1 recovers standard
//! PMD (natural policy gradient under the KL divergence); sending the
//! stepsize to infinity recovers policy iteration with h-step greedy
//! improvement.
//!
//! Modules:
//! - [`mdp`]: tabular MDPs, Bellman operators, exact evaluation, lookahead
//!   values, and a JSON interchange schema.
//! - [`mirror`]: mirror maps (negative entropy, squared Euclidean), Bregman
//!   divergences, proximal policy updates, adaptive stepsizes.
//! - [`estimator`]: Monte Carlo estimation of Q_h under a generative model
//!   (layered sampling tree with rollout leaves) and the sample-size
//!   formulas that drive it.
//! - [`engine`]: the exact and inexact h-PMD iteration drivers plus the
//!   convergence-bound evaluators used as runtime oracles.
//! - [`fa`]: linear function approximation — Kiefer-Wolfowitz optimal
//!   design, least-squares fitting of lookahead values, and on-demand
//!   policy reconstruction from stored parameter vectors.
//! - [`envs`]: benchmark MDP builders (DeepSea, seeded random MDPs).
//!
//! All algorithms are deterministic given their seeds, independent of the
//! number of worker threads. Data-parallel sections use rayon when the
//! `parallel` feature (default) is enabled and fall back to sequential
//! execution otherwise.

pub mod engine;
pub mod envs;
pub mod error;
pub mod estimator;
pub mod fa;
pub mod mdp;
pub mod mirror;

pub(crate) mod par;
pub(crate) mod rng;

pub use error::{Error, Result};
