//! Graph contrastive recommendation with relation-aware view generation,
//! embedding-space diffusion and asymmetric contrastive objectives.
//!
//! The crate is organised bottom-up: [`numerics`] provides tensors, sparse
//! products and autodiff; [`dataset`] and [`graph`] turn interaction logs
//! into normalised bipartite adjacencies; [`encoder`], [`vgae`], [`denoise`],
//! [`diffusion`] and [`contrastive`] hold the model pieces; [`trainer`] runs
//! the three-phase optimisation, [`eval`] the all-ranking protocol and
//! [`experiments`] the ablation, noise-robustness and λ sweeps. [`stats`]
//! holds the two hypothesis tests used around them.

pub mod contrastive;
pub mod dataset;
pub mod denoise;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod graph;
pub mod numerics;
pub mod stats;
pub mod trainer;
pub mod vgae;

pub use error::{Error, Result};
