//! Grid energy-trading cost and the cloud power model.

use crate::error::{Error, Result};

/// Slope decomposition of the trading cost: `ψ = (α_b − α_s)/2`,
/// `φ = (α_b + α_s)/2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TradePrices {
    pub psi: f64,
    pub phi: f64,
}

impl TradePrices {
    pub fn new(price_buy: f64, price_sell: f64) -> Result<Self> {
        if !(price_sell > 0.0 && price_sell < price_buy && price_buy.is_finite()) {
            return Err(Error::Domain(format!(
                "prices must satisfy 0 < sell ({price_sell}) < buy ({price_buy})"
            )));
        }
        Ok(Self {
            psi: 0.5 * (price_buy - price_sell),
            phi: 0.5 * (price_buy + price_sell),
        })
    }

    pub fn price_buy(&self) -> f64 {
        self.phi + self.psi
    }

    pub fn price_sell(&self) -> f64 {
        self.phi - self.psi
    }

    /// Right-derivative of the cost at `power`.
    pub fn slope(&self, power: f64, harvested: f64) -> f64 {
        if power >= harvested {
            self.price_buy()
        } else {
            self.price_sell()
        }
    }
}

/// `α_b·max(P − P_h, 0) − α_s·max(P_h − P, 0)`: positive when buying the
/// deficit, negative when selling the surplus.
pub fn trade_cost(power: f64, harvested: f64, price_buy: f64, price_sell: f64) -> f64 {
    price_buy * (power - harvested).max(0.0) - price_sell * (harvested - power).max(0.0)
}

/// `ψ|P − P_h| + φ(P − P_h)`, identical to [`trade_cost`] but written as a
/// convex expression.
pub fn trade_cost_convex(power: f64, harvested: f64, prices: &TradePrices) -> f64 {
    let d = power - harvested;
    prices.psi * d.abs() + prices.phi * d
}

/// `P_e = k_c·Σ μ′_k + P_C·Σ b_n`.
pub fn cloud_power(compute_cubed: &[f64], active: &[bool], compute_coeff: f64, backhaul: f64) -> f64 {
    compute_coeff * compute_cubed.iter().sum::<f64>()
        + backhaul * active.iter().filter(|&&b| b).count() as f64
}
