//! Scenario data, channel generation and the complex beamformer container.
//!
//! All powers are linear watts, rates are bits/s, delays are seconds and
//! positions are kilometres. Conversion to display units happens only in
//! the runner/CLI layer.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Users closer than this to an RRH are outside the validity range of the
/// pathloss formula.
pub const MIN_LINK_DISTANCE_KM: f64 = 0.035;

/// Radius of the circle carrying the micro RRHs and bounding user drops.
pub const CELL_RADIUS_KM: f64 = 0.6;

/// Problem dimensions `(N, K, L)` and the flat index conventions shared by
/// every solver stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n_rrh: usize,
    pub n_users: usize,
    pub n_antennas: usize,
}

impl Dims {
    pub fn new(n_rrh: usize, n_users: usize, n_antennas: usize) -> Self {
        Self {
            n_rrh,
            n_users,
            n_antennas,
        }
    }

    /// Length `N·L` of an aggregate channel or beamforming vector.
    pub fn stack_len(&self) -> usize {
        self.n_rrh * self.n_antennas
    }

    /// Number of (RRH, user) pairs, `N·K`.
    pub fn n_pairs(&self) -> usize {
        self.n_rrh * self.n_users
    }

    /// Position of pair `(n, k)` in `t`, `x` and `a`: RRH-major, so
    /// `t = [t_1; …; t_N]` with `t_n = [t_{n,1}, …, t_{n,K}]`.
    pub fn pair(&self, n: usize, k: usize) -> usize {
        n * self.n_users + k
    }
}

/// `K × (N·L)` complex array, row-major. Row `k` is the aggregate vector of
/// user `k`, made of `N` consecutive per-RRH blocks of length `L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackedVectors {
    dims: Dims,
    data: Vec<Complex64>,
}

impl StackedVectors {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            data: vec![Complex64::new(0.0, 0.0); dims.n_users * dims.stack_len()],
        }
    }

    pub fn from_rows(dims: Dims, rows: Vec<Vec<Complex64>>) -> Result<Self> {
        if rows.len() != dims.n_users || rows.iter().any(|r| r.len() != dims.stack_len()) {
            return Err(Error::Domain(format!(
                "expected {} rows of length {}",
                dims.n_users,
                dims.stack_len()
            )));
        }
        Ok(Self {
            dims,
            data: rows.into_iter().flatten().collect(),
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn user(&self, k: usize) -> &[Complex64] {
        let m = self.dims.stack_len();
        &self.data[k * m..(k + 1) * m]
    }

    pub fn user_mut(&mut self, k: usize) -> &mut [Complex64] {
        let m = self.dims.stack_len();
        &mut self.data[k * m..(k + 1) * m]
    }

    /// Per-RRH block `v_{k,n}` of length `L`.
    pub fn block(&self, k: usize, n: usize) -> &[Complex64] {
        let l = self.dims.n_antennas;
        &self.user(k)[n * l..(n + 1) * l]
    }

    pub fn block_mut(&mut self, k: usize, n: usize) -> &mut [Complex64] {
        let l = self.dims.n_antennas;
        &mut self.user_mut(k)[n * l..(n + 1) * l]
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn block_norm_sqr(&self, k: usize, n: usize) -> f64 {
        self.block(k, n).iter().map(|c| c.norm_sqr()).sum()
    }

    pub fn scale(&mut self, factor: f64) {
        for c in &mut self.data {
            *c *= factor;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }
}

/// Beamformer stack `w = [w_1, …, w_K]`, same layout as the channel.
pub type Beamformers = StackedVectors;

/// Inner product `aᴴ b`.
pub fn inner(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// Aggregate channels of all users; row `k` is `h_k = [h_{k,1}; …; h_{k,N}]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelState {
    pub h: StackedVectors,
}

impl ChannelState {
    pub fn new(h: StackedVectors) -> Result<Self> {
        if !h.is_finite() {
            return Err(Error::Domain("channel contains non-finite entries".into()));
        }
        Ok(Self { h })
    }

    pub fn dims(&self) -> Dims {
        self.h.dims()
    }

    /// `h_kᴴ w_j`.
    pub fn gain(&self, k: usize, w: &Beamformers, j: usize) -> Complex64 {
        inner(self.h.user(k), w.user(j))
    }
}

/// All physical and algorithmic parameters of one problem instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub n_rrh: usize,
    pub n_users: usize,
    pub n_antennas: usize,
    pub bandwidth_hz: f64,
    /// Noise power per user, watts.
    pub noise_power: Vec<f64>,
    /// Mean packet arrival rate per user, bits/s.
    pub arrival_rates: Vec<f64>,
    /// End-to-end delay bound per user, seconds.
    pub delay_qos: Vec<f64>,
    /// Maximum transmit power per RRH, watts.
    pub max_tx_power: Vec<f64>,
    /// Inverse power-amplifier efficiency per RRH (≥ 1).
    pub amp_inefficiency: Vec<f64>,
    /// Backhaul power drawn per active RRH, watts.
    pub backhaul_power: f64,
    /// Cloud compute coefficient, watts per (bit/s)³.
    pub compute_coeff: f64,
    pub price_buy: f64,
    pub price_sell: f64,
    pub harvested_rrh: Vec<f64>,
    pub harvested_cloud: f64,
    pub rrh_positions: Vec<[f64; 2]>,
    pub user_positions: Vec<[f64; 2]>,
    pub shadowing_mean_db: f64,
    pub shadowing_var_db: f64,
    pub antenna_gain_db: f64,
    pub rng_seed: u64,
}

impl ScenarioConfig {
    pub fn dims(&self) -> Dims {
        Dims::new(self.n_rrh, self.n_users, self.n_antennas)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Domain(msg));
        if self.n_rrh == 0 || self.n_users == 0 || self.n_antennas == 0 {
            return bad("N, K and L must all be at least 1".into());
        }
        let (n, k) = (self.n_rrh, self.n_users);
        let lens: [(&str, usize, usize); 8] = [
            ("noise_power", self.noise_power.len(), k),
            ("arrival_rates", self.arrival_rates.len(), k),
            ("delay_qos", self.delay_qos.len(), k),
            ("user_positions", self.user_positions.len(), k),
            ("max_tx_power", self.max_tx_power.len(), n),
            ("amp_inefficiency", self.amp_inefficiency.len(), n),
            ("harvested_rrh", self.harvested_rrh.len(), n),
            ("rrh_positions", self.rrh_positions.len(), n),
        ];
        for (name, got, want) in lens {
            if got != want {
                return bad(format!("{name} has length {got}, expected {want}"));
            }
        }
        let positive = |v: &[f64]| v.iter().all(|x| x.is_finite() && *x > 0.0);
        if !(self.bandwidth_hz.is_finite() && self.bandwidth_hz > 0.0) {
            return bad("bandwidth_hz must be positive".into());
        }
        if !positive(&self.noise_power) {
            return bad("noise_power must be positive".into());
        }
        if !positive(&self.arrival_rates) {
            return bad("arrival_rates must be positive".into());
        }
        if !positive(&self.delay_qos) {
            return bad("delay_qos must be positive".into());
        }
        if !positive(&self.max_tx_power) {
            return bad("max_tx_power must be positive".into());
        }
        if self.amp_inefficiency.iter().any(|x| !(x.is_finite() && *x >= 1.0)) {
            return bad("amp_inefficiency must be at least 1".into());
        }
        if !(self.compute_coeff.is_finite() && self.compute_coeff > 0.0) {
            return bad("compute_coeff must be positive".into());
        }
        if !(self.backhaul_power.is_finite() && self.backhaul_power >= 0.0) {
            return bad("backhaul_power must be non-negative".into());
        }
        if !(self.price_sell > 0.0 && self.price_sell < self.price_buy) {
            return bad("prices must satisfy 0 < price_sell < price_buy".into());
        }
        if self.harvested_rrh.iter().any(|x| !(x.is_finite() && *x >= 0.0))
            || !(self.harvested_cloud.is_finite() && self.harvested_cloud >= 0.0)
        {
            return bad("harvested powers must be non-negative".into());
        }
        if !(self.shadowing_var_db.is_finite() && self.shadowing_var_db > 0.0) {
            return bad("shadowing_var_db must be positive".into());
        }
        Ok(())
    }

    /// Applies the same arrival rate to every user.
    pub fn with_arrival_rate(mut self, lambda_bps: f64) -> Self {
        self.arrival_rates = vec![lambda_bps; self.n_users];
        self
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }
}

/// 3GPP macro pathloss in dB for a distance in km.
pub fn pathloss_db(distance_km: f64) -> f64 {
    128.1 + 37.6 * distance_km.log10()
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Draws one channel realization: each coefficient is
/// `Γ · sqrt(G · PL(d)⁻¹ · δ)` with Rayleigh small-scale fading `Γ`, and
/// log-normal shadowing `δ` shared by the `L` antennas of a link.
pub fn generate_channels(cfg: &ScenarioConfig, seed: u64) -> Result<ChannelState> {
    cfg.validate()?;
    let dims = cfg.dims();
    let shadow = Normal::new(cfg.shadowing_mean_db, cfg.shadowing_var_db.sqrt())
        .map_err(|e| Error::Domain(format!("shadowing distribution: {e}")))?;
    let gain = db_to_linear(cfg.antenna_gain_db);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut h = StackedVectors::zeros(dims);
    for k in 0..dims.n_users {
        for n in 0..dims.n_rrh {
            let d = distance(cfg.rrh_positions[n], cfg.user_positions[k]);
            if !(d > 0.0) {
                return Err(Error::Domain(format!(
                    "user {k} is co-located with RRH {n}"
                )));
            }
            let shadow_db: f64 = shadow.sample(&mut rng);
            let amplitude =
                (gain * db_to_linear(-pathloss_db(d)) * db_to_linear(shadow_db)).sqrt();
            for c in h.block_mut(k, n) {
                let re: f64 = StandardNormal.sample(&mut rng);
                let im: f64 = StandardNormal.sample(&mut rng);
                *c = Complex64::new(re, im) * (amplitude / 2f64.sqrt());
            }
        }
    }
    ChannelState::new(h)
}

/// Thermal noise over `bandwidth_hz` with a receiver noise figure, watts.
pub fn thermal_noise_w(bandwidth_hz: f64, noise_figure_db: f64) -> f64 {
    db_to_linear(-174.0 + 10.0 * bandwidth_hz.log10() + noise_figure_db) * 1e-3
}

/// Drops `count` users uniformly in the disc of `radius_km` around the
/// origin, rejecting positions too close to any RRH.
pub fn drop_users(
    count: usize,
    radius_km: f64,
    rrh_positions: &[[f64; 2]],
    seed: u64,
) -> Vec<[f64; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut users = Vec::with_capacity(count);
    while users.len() < count {
        let r = radius_km * rng.gen::<f64>().sqrt();
        let theta = 2.0 * PI * rng.gen::<f64>();
        let p = [r * theta.cos(), r * theta.sin()];
        if rrh_positions
            .iter()
            .all(|&q| distance(p, q) >= MIN_LINK_DISTANCE_KM)
        {
            users.push(p);
        }
    }
    users
}

/// One macro RRH at the origin plus `n_micro` micro RRHs evenly spaced on
/// the cell circle.
pub fn macro_micro_layout(n_micro: usize) -> Vec<[f64; 2]> {
    let mut pos = vec![[0.0, 0.0]];
    for i in 0..n_micro {
        let theta = 2.0 * PI * i as f64 / n_micro as f64;
        pos.push([CELL_RADIUS_KM * theta.cos(), CELL_RADIUS_KM * theta.sin()]);
    }
    pos
}

const MACRO_MAX_POWER_W: f64 = 20.0;
const MICRO_MAX_POWER_W: f64 = 1.0;
const MACRO_AMP_INEFFICIENCY: f64 = 2.5;
const MICRO_AMP_INEFFICIENCY: f64 = 2.0;
const NOISE_FIGURE_DB: f64 = 9.0;

/// Seven-RRH heterogeneous scenario: a macro RRH with six micro RRHs on a
/// 0.6 km circle, four 4-antenna sites serving four users, 1 ms delay bound
/// and a 10:1 buy/sell price ratio. Harvested powers are zero; callers pick
/// a profile (see [`default_harvest_profile`]).
pub fn default_paper_scenario() -> ScenarioConfig {
    let n_rrh = 7;
    let n_users = 4;
    let seed = 1;
    let rrh_positions = macro_micro_layout(n_rrh - 1);
    let user_positions = drop_users(n_users, CELL_RADIUS_KM, &rrh_positions, seed);
    let bandwidth_hz = 5e6;
    let mut max_tx_power = vec![MICRO_MAX_POWER_W; n_rrh];
    max_tx_power[0] = MACRO_MAX_POWER_W;
    let mut amp_inefficiency = vec![MICRO_AMP_INEFFICIENCY; n_rrh];
    amp_inefficiency[0] = MACRO_AMP_INEFFICIENCY;
    ScenarioConfig {
        n_rrh,
        n_users,
        n_antennas: 4,
        bandwidth_hz,
        noise_power: vec![thermal_noise_w(bandwidth_hz, NOISE_FIGURE_DB); n_users],
        arrival_rates: vec![4e6; n_users],
        delay_qos: vec![1e-3; n_users],
        max_tx_power,
        amp_inefficiency,
        backhaul_power: 2.0,
        compute_coeff: 1e-20,
        price_buy: 1.0,
        price_sell: 0.1,
        harvested_rrh: vec![0.0; n_rrh],
        harvested_cloud: 0.0,
        rrh_positions,
        user_positions,
        shadowing_mean_db: 1.0,
        shadowing_var_db: 6.31,
        antenna_gain_db: 9.0,
        rng_seed: seed,
    }
}

/// Harvested-power profile used for the arrival-rate sweep: the macro site
/// harvests more than each micro site, and the cloud more than any RRH.
pub fn default_harvest_profile(cfg: &mut ScenarioConfig) {
    let n = cfg.n_rrh;
    cfg.harvested_rrh = (0..n).map(|i| if i == 0 { 4.0 } else { 0.5 }).collect();
    cfg.harvested_cloud = 10.0;
}

/// Three RRHs, two 2-antenna users: the reference instance for convergence
/// tests and quick runs.
pub fn default_small_scenario() -> ScenarioConfig {
    let n_rrh = 3;
    let n_users = 2;
    let seed = 7;
    let rrh_positions = vec![[0.0, 0.0], [0.4, 0.0], [-0.2, 0.35]];
    let user_positions = drop_users(n_users, 0.4, &rrh_positions, seed);
    let bandwidth_hz = 5e6;
    ScenarioConfig {
        n_rrh,
        n_users,
        n_antennas: 2,
        bandwidth_hz,
        noise_power: vec![thermal_noise_w(bandwidth_hz, NOISE_FIGURE_DB); n_users],
        arrival_rates: vec![4e6; n_users],
        delay_qos: vec![1e-3; n_users],
        max_tx_power: vec![10.0, 1.0, 1.0],
        amp_inefficiency: vec![2.5, 2.0, 2.0],
        backhaul_power: 1.0,
        compute_coeff: 1e-20,
        price_buy: 1.0,
        price_sell: 0.1,
        harvested_rrh: vec![1.0, 0.3, 0.3],
        harvested_cloud: 2.0,
        rrh_positions,
        user_positions,
        shadowing_mean_db: 1.0,
        shadowing_var_db: 6.31,
        antenna_gain_db: 9.0,
        rng_seed: seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pathloss_reference_points() {
        assert!((pathloss_db(1.0) - 128.1).abs() < 1e-12);
        assert!((pathloss_db(0.1) - 90.5).abs() < 1e-12);
    }

    #[test]
    fn doubling_distance_adds_fixed_loss() {
        for d in [0.05, 0.3, 1.7] {
            let delta = pathloss_db(2.0 * d) - pathloss_db(d);
            assert!((delta - 37.6 * 2f64.log10()).abs() < 1e-10);
        }
    }

    #[test]
    fn seven_rrh_defaults() {
        let cfg = default_paper_scenario();
        cfg.validate().unwrap();
        assert_eq!((cfg.n_rrh, cfg.n_users, cfg.n_antennas), (7, 4, 4));
        assert!((cfg.price_sell / cfg.price_buy - 0.1).abs() < 1e-15);
        assert!(cfg.delay_qos.iter().all(|&t| t == 1e-3));
        for p in &cfg.rrh_positions[1..] {
            assert!(((p[0].powi(2) + p[1].powi(2)).sqrt() - 0.6).abs() < 1e-12);
        }
        assert_eq!(cfg.antenna_gain_db, 9.0);
        assert_eq!((cfg.shadowing_mean_db, cfg.shadowing_var_db), (1.0, 6.31));
    }

    #[test]
    fn channels_are_deterministic_per_seed() {
        let cfg = default_paper_scenario();
        let a = generate_channels(&cfg, 11).unwrap();
        let b = generate_channels(&cfg, 11).unwrap();
        let c = generate_channels(&cfg, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.dims(), cfg.dims());
    }

    #[test]
    fn colocated_user_is_rejected() {
        let mut cfg = default_small_scenario();
        cfg.user_positions[0] = cfg.rrh_positions[1];
        assert!(matches!(generate_channels(&cfg, 1), Err(Error::Domain(_))));
    }

    #[test]
    fn bad_shadowing_variance_is_rejected() {
        let mut cfg = default_small_scenario();
        cfg.shadowing_var_db = 0.0;
        assert!(generate_channels(&cfg, 1).is_err());
    }

    #[test]
    fn mean_gain_scales_with_distance_exponent() {
        // Single link, many antennas: compare the average |h|² at d and 2d.
        let mut cfg = default_small_scenario();
        cfg.n_rrh = 1;
        cfg.n_users = 1;
        cfg.n_antennas = 20_000;
        cfg.rrh_positions = vec![[0.0, 0.0]];
        cfg.max_tx_power = vec![1.0];
        cfg.amp_inefficiency = vec![1.0];
        cfg.harvested_rrh = vec![0.0];
        cfg.noise_power = vec![1e-13];
        cfg.arrival_rates = vec![1e6];
        cfg.delay_qos = vec![1e-3];
        let mean_gain = |d: f64| {
            let mut c = cfg.clone();
            c.user_positions = vec![[d, 0.0]];
            let h = generate_channels(&c, 3).unwrap();
            h.h.user(0).iter().map(|x| x.norm_sqr()).sum::<f64>() / 20_000.0
        };
        // Same seed means the same shadowing draw, so the ratio isolates
        // the pathloss up to fading noise.
        let ratio = mean_gain(0.4) / mean_gain(0.2);
        let expected = 2f64.powf(-3.76);
        assert!((ratio / expected - 1.0).abs() < 0.05, "ratio {ratio}");
    }

    #[test]
    fn toml_round_trip() {
        let cfg = default_paper_scenario();
        let text = cfg.to_toml().unwrap();
        let back = ScenarioConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn rejects_inverted_prices() {
        let mut cfg = default_small_scenario();
        cfg.price_sell = 2.0;
        assert!(cfg.validate().is_err());
    }
}
