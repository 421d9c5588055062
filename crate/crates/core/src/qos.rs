//! Physical-layer SINR and the two-stage M/M/1 tandem delay model.

use crate::error::{Error, Result};
use crate::model::{Beamformers, ChannelState};

/// Per-user rate and compute variables, in bits/s. `compute_cubed` is the
/// `μ³` parameterization used inside the solver.
#[derive(Debug, Clone, PartialEq)]
pub struct RateDelayVars {
    pub rates: Vec<f64>,
    pub compute: Vec<f64>,
    pub compute_cubed: Vec<f64>,
}

impl RateDelayVars {
    pub fn new(rates: Vec<f64>, compute: Vec<f64>) -> Self {
        let compute_cubed = compute.iter().map(|m| m * m * m).collect();
        Self {
            rates,
            compute,
            compute_cubed,
        }
    }

    pub fn from_cubed(rates: Vec<f64>, compute_cubed: Vec<f64>) -> Self {
        let compute = compute_cubed.iter().map(|m| m.cbrt()).collect();
        Self {
            rates,
            compute,
            compute_cubed,
        }
    }

    /// Delay of every user, or the first unstable queue.
    pub fn delays(&self, arrival_rates: &[f64]) -> Result<Vec<f64>> {
        self.rates
            .iter()
            .zip(&self.compute)
            .zip(arrival_rates)
            .map(|((&r, &mu), &lambda)| total_delay(mu, r, lambda))
            .collect()
    }
}

fn check_dims(k: usize, w: &Beamformers, h: &ChannelState) -> Result<()> {
    if w.dims() != h.dims() {
        return Err(Error::Domain(format!(
            "beamformer dims {:?} do not match channel dims {:?}",
            w.dims(),
            h.dims()
        )));
    }
    if k >= h.dims().n_users {
        return Err(Error::Domain(format!("user index {k} out of range")));
    }
    Ok(())
}

/// Received power `|h_kᴴ w_j|²` of every stream `j` at user `k`.
pub fn stream_powers(k: usize, w: &Beamformers, h: &ChannelState) -> Vec<f64> {
    (0..w.dims().n_users)
        .map(|j| h.gain(k, w, j).norm_sqr())
        .collect()
}

/// `|h_kᴴ w_k|² / (σ_k² + Σ_{j≠k} |h_kᴴ w_j|²)`.
pub fn sinr(k: usize, w: &Beamformers, h: &ChannelState, noise: f64) -> Result<f64> {
    check_dims(k, w, h)?;
    let powers = stream_powers(k, w, h);
    let interference: f64 = powers
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != k)
        .map(|(_, p)| p)
        .sum();
    Ok(powers[k] / (noise + interference))
}

/// Achievable rate `B·log₂(1 + SINR_k)` in bits/s.
pub fn shannon_rate(
    k: usize,
    w: &Beamformers,
    h: &ChannelState,
    noise: f64,
    bandwidth_hz: f64,
) -> Result<f64> {
    Ok(bandwidth_hz * sinr(k, w, h, noise)?.ln_1p() / std::f64::consts::LN_2)
}

/// Processing plus transmission delay, `1/(μ−λ) + 1/(r−λ)` seconds.
pub fn total_delay(compute: f64, rate: f64, arrival: f64) -> Result<f64> {
    if !(compute > arrival) {
        return Err(Error::UnstableQueue {
            service: compute,
            arrival,
        });
    }
    if !(rate > arrival) {
        return Err(Error::UnstableQueue {
            service: rate,
            arrival,
        });
    }
    Ok(1.0 / (compute - arrival) + 1.0 / (rate - arrival))
}

/// Delay QoS check in the cubed-compute parameterization.
pub fn delay_feasible(compute_cubed: f64, rate: f64, arrival: f64, bound: f64) -> bool {
    total_delay(compute_cubed.cbrt(), rate, arrival).is_ok_and(|t| t <= bound)
}
