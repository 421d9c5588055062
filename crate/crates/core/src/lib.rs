//! Joint beamforming, compute allocation and RRH switching for a cloud
//! radio access network that trades energy with the grid.
//!
//! The problem minimizes the cost of buying (or the revenue of selling)
//! grid energy at the RRHs and at the cloud, subject to per-user delay
//! bounds. [`runner::wmmse_admm`] is the entry point: it wraps consensus
//! ADMM ([`consensus`]) in a WMMSE outer loop ([`wmmse`]).

pub mod consensus;
pub mod convex_solver;
pub mod energy;
pub mod error;
pub mod mip_solver;
pub mod model;
pub mod qos;
pub mod runner;
pub mod wmmse;

pub use error::{Error, Result};
pub use model::{ChannelState, ScenarioConfig};
pub use runner::{sweep_arrival_rates, wmmse_admm, RunOptions, RunReport, SweepTable};
