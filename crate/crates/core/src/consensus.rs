//! Two-block consensus ADMM over the split problem.
//!
//! The smooth block `y = [y_m; r; w]` with `y_m = [p; P_e; μ′; t]` and the
//! mixed-integer block `z = [b; a; x]` are coupled by the equality rows
//!
//! ```text
//!   P_n − Λ_n·Σ_k x_{n,k} = 0        n = 1..N
//!   t_{n,k} − x_{n,k}     = 0        (n, k) pairs, RRH-major
//!   P_e − k_c·Σ_k μ′_k − P_C·Σ_n b_n = 0
//! ```
//!
//! written `A·y_m + B·z = 0`. Each iteration minimizes the augmented
//! Lagrangian over `y` (convex, [`crate::convex_solver`]), then over `z`
//! (enumeration, [`crate::mip_solver`]), then takes a dual ascent step.
//!
//! Inside `y_m` the cubed compute variable is expressed in (Mbit/s)³ so the
//! matrix entries stay O(1); the row values are unchanged by this scaling.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::convex_solver::{self, ConvexSubproblem, SubproblemMode};
use crate::energy::{trade_cost_convex, TradePrices};
use crate::error::Result;
use crate::mip_solver::{self, TopologyStrategy};
use crate::model::{Beamformers, ChannelState, Dims, ScenarioConfig};
use crate::wmmse::SurrogateCoeffs;

/// Rate unit used inside the solvers (bits/s per working unit).
pub const RATE_UNIT_BPS: f64 = 1e6;

/// Instance data converted to solver working units: rates in Mbit/s,
/// cubed compute in (Mbit/s)³, powers in watts.
#[derive(Debug, Clone)]
pub struct ScaledInstance {
    pub dims: Dims,
    pub prices: TradePrices,
    /// Arrival rates, Mbit/s.
    pub arrival: Vec<f64>,
    /// Delay bounds multiplied by the rate unit, so `1/(μ−λ) + 1/(r−λ) ≤ τ`
    /// holds with rates in Mbit/s.
    pub delay_bound: Vec<f64>,
    /// `B / (ln 2 · RATE_UNIT)`: nats per unit bandwidth → Mbit/s.
    pub rate_scale: f64,
    /// `k_c` in watts per (Mbit/s)³.
    pub compute_coeff: f64,
    pub backhaul_power: f64,
    pub amp: Vec<f64>,
    pub max_power: Vec<f64>,
    pub harvested_rrh: Vec<f64>,
    pub harvested_cloud: f64,
    pub noise: Vec<f64>,
}

impl ScaledInstance {
    pub fn new(cfg: &ScenarioConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            dims: cfg.dims(),
            prices: TradePrices::new(cfg.price_buy, cfg.price_sell)?,
            arrival: cfg.arrival_rates.iter().map(|l| l / RATE_UNIT_BPS).collect(),
            delay_bound: cfg.delay_qos.iter().map(|t| t * RATE_UNIT_BPS).collect(),
            rate_scale: SurrogateCoeffs::rate_scale(cfg.bandwidth_hz) / RATE_UNIT_BPS,
            compute_coeff: cfg.compute_coeff * RATE_UNIT_BPS.powi(3),
            backhaul_power: cfg.backhaul_power,
            amp: cfg.amp_inefficiency.clone(),
            max_power: cfg.max_tx_power.clone(),
            harvested_rrh: cfg.harvested_rrh.clone(),
            harvested_cloud: cfg.harvested_cloud,
            noise: cfg.noise_power.clone(),
        })
    }

    /// `f(y) = Σ_n G′(P_n) + G′(P_e)`.
    pub fn trade_objective(&self, p: &[f64], p_cloud: f64) -> f64 {
        p.iter()
            .zip(&self.harvested_rrh)
            .map(|(&pn, &h)| trade_cost_convex(pn, h, &self.prices))
            .sum::<f64>()
            + trade_cost_convex(p_cloud, self.harvested_cloud, &self.prices)
    }
}

/// Smooth block: powers, cubed compute, slack powers, rates, beamformers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YBlock {
    /// RRH power consumption `P_n`, watts.
    pub p: Vec<f64>,
    /// Cloud power consumption `P_e`, watts.
    pub p_cloud: f64,
    /// `μ′_k = μ_k³`, (bit/s)³.
    pub mu_cubed: Vec<f64>,
    /// Per-pair power slack `t_{n,k}`, watts.
    pub t: Vec<f64>,
    /// Rate variables `r_k`, bits/s.
    pub rates: Vec<f64>,
    pub w: Beamformers,
}

/// Mixed-integer block: RRH on/off, user association, per-pair powers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZBlock {
    pub b: Vec<bool>,
    pub a: Vec<bool>,
    pub x: Vec<f64>,
}

impl ZBlock {
    pub fn active_count(&self) -> usize {
        self.b.iter().filter(|&&b| b).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimalState {
    pub y: YBlock,
    pub z: ZBlock,
}

/// Lagrange multipliers of the equality rows and the penalty parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    pub gamma: Vec<f64>,
    pub rho: f64,
}

impl DualState {
    pub fn zeros(dims: Dims, rho: f64) -> Self {
        Self {
            gamma: vec![0.0; n_rows(dims)],
            rho,
        }
    }
}

pub fn n_rows(d: Dims) -> usize {
    d.n_rrh * (d.n_users + 1) + 1
}

pub fn ym_len(d: Dims) -> usize {
    (d.n_rrh + 1) * (d.n_users + 1)
}

pub fn z_len(d: Dims) -> usize {
    (2 * d.n_users + 1) * d.n_rrh
}

/// Row index of the cloud power row.
pub fn cloud_row(d: Dims) -> usize {
    n_rows(d) - 1
}

/// Row index of the `t_{n,k} = x_{n,k}` row.
pub fn slack_row(d: Dims, n: usize, k: usize) -> usize {
    d.n_rrh + d.pair(n, k)
}

/// Equality-constraint matrices `A` (acting on `y_m`) and `B` (on `z`).
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusMatrices {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

/// Selector `d_n`: ones on the `K` entries of RRH `n` in an `N·K` vector.
pub fn rrh_selector(d: Dims, n: usize) -> DVector<f64> {
    DVector::from_fn(d.n_pairs(), |i, _| if i / d.n_users == n { 1.0 } else { 0.0 })
}

/// Selector `d_{n,k}`: the unit vector of pair `(n, k)`.
pub fn pair_selector(d: Dims, n: usize, k: usize) -> DVector<f64> {
    let mut v = DVector::zeros(d.n_pairs());
    v[d.pair(n, k)] = 1.0;
    v
}

pub fn build_matrices(cfg: &ScenarioConfig) -> ConsensusMatrices {
    let d = cfg.dims();
    let (n, k) = (d.n_rrh, d.n_users);
    let mut a = DMatrix::zeros(n_rows(d), ym_len(d));
    let mut b = DMatrix::zeros(n_rows(d), z_len(d));
    let x_col = n + n * k;
    let t_col = n + 1 + k;
    for rrh in 0..n {
        a[(rrh, rrh)] = 1.0;
        let sel = rrh_selector(d, rrh);
        for (i, s) in sel.iter().enumerate() {
            b[(rrh, x_col + i)] = -cfg.amp_inefficiency[rrh] * s;
        }
        for user in 0..k {
            let row = slack_row(d, rrh, user);
            let sel = pair_selector(d, rrh, user);
            for (i, s) in sel.iter().enumerate() {
                a[(row, t_col + i)] = *s;
                b[(row, x_col + i)] = -*s;
            }
        }
    }
    let e = cloud_row(d);
    a[(e, n)] = 1.0;
    for user in 0..k {
        a[(e, n + 1 + user)] = -cfg.compute_coeff * RATE_UNIT_BPS.powi(3);
    }
    for rrh in 0..n {
        b[(e, rrh)] = -cfg.backhaul_power;
    }
    ConsensusMatrices { a, b }
}

/// Stacks `y_m = [p; P_e; μ′; t]` with `μ′` in (Mbit/s)³.
pub fn pack_ym(y: &YBlock) -> DVector<f64> {
    let unit3 = RATE_UNIT_BPS.powi(3);
    let it = y
        .p
        .iter()
        .copied()
        .chain(std::iter::once(y.p_cloud))
        .chain(y.mu_cubed.iter().map(|m| m / unit3))
        .chain(y.t.iter().copied());
    DVector::from_iterator(y.p.len() + 1 + y.mu_cubed.len() + y.t.len(), it)
}

/// Stacks `z = [b; a; x]` with binaries as 0/1.
pub fn pack_z(z: &ZBlock) -> DVector<f64> {
    let bit = |v: &bool| if *v { 1.0 } else { 0.0 };
    let it = z
        .b
        .iter()
        .map(bit)
        .chain(z.a.iter().map(bit))
        .chain(z.x.iter().copied());
    DVector::from_iterator(z.b.len() + z.a.len() + z.x.len(), it)
}

/// `A·y_m + B·z`, evaluated row by row without the matrices.
pub fn consensus_residual(inst: &ScaledInstance, y: &YBlock, z: &ZBlock) -> Vec<f64> {
    let d = inst.dims;
    let mut res = vec![0.0; n_rows(d)];
    for n in 0..d.n_rrh {
        let sum_x: f64 = (0..d.n_users).map(|k| z.x[d.pair(n, k)]).sum();
        res[n] = y.p[n] - inst.amp[n] * sum_x;
        for k in 0..d.n_users {
            res[slack_row(d, n, k)] = y.t[d.pair(n, k)] - z.x[d.pair(n, k)];
        }
    }
    res[cloud_row(d)] = cloud_row_value(inst, y, z.active_count());
    res
}

/// `P_e − k_c·Σμ′ − P_C·m` for `m` active RRHs.
pub fn cloud_row_value(inst: &ScaledInstance, y: &YBlock, active: usize) -> f64 {
    let unit3 = RATE_UNIT_BPS.powi(3);
    y.p_cloud
        - inst.compute_coeff * y.mu_cubed.iter().map(|m| m / unit3).sum::<f64>()
        - inst.backhaul_power * active as f64
}

/// Whether `z` lies in the mixed-integer set: at least one RRH on,
/// association only to active RRHs, per-RRH and per-pair power caps.
pub fn in_topology_set(inst: &ScaledInstance, z: &ZBlock, tol: f64) -> bool {
    let d = inst.dims;
    if z.active_count() == 0 {
        return false;
    }
    for n in 0..d.n_rrh {
        let cap = if z.b[n] { inst.max_power[n] } else { 0.0 };
        let mut sum = 0.0;
        for k in 0..d.n_users {
            let i = d.pair(n, k);
            if z.a[i] && !z.b[n] {
                return false;
            }
            let pair_cap = if z.a[i] { inst.max_power[n] } else { 0.0 };
            if z.x[i] < -tol || z.x[i] > pair_cap + tol {
                return false;
            }
            sum += z.x[i];
        }
        if inst.amp[n] * sum > cap + tol {
            return false;
        }
    }
    true
}

/// `L_ρ(y, z, γ) = f(y) + g(z) + γᵀ(A·y_m + B·z) + (ρ/2)‖A·y_m + B·z‖²`,
/// with `g` the indicator of the topology set (`+∞` outside it).
pub fn augmented_lagrangian(
    inst: &ScaledInstance,
    y: &YBlock,
    z: &ZBlock,
    dual: &DualState,
    mats: &ConsensusMatrices,
) -> f64 {
    if !in_topology_set(inst, z, 1e-12) {
        return f64::INFINITY;
    }
    let res = &mats.a * pack_ym(y) + &mats.b * pack_z(z);
    let gamma = DVector::from_column_slice(&dual.gamma);
    inst.trade_objective(&y.p, y.p_cloud) + gamma.dot(&res) + 0.5 * dual.rho * res.norm_squared()
}

/// Primal residual `A·y_m + B·z` and dual residual `ρ·Aᵀ·B·(z − z_prev)`.
pub fn residuals(
    y: &YBlock,
    z: &ZBlock,
    z_prev: &ZBlock,
    mats: &ConsensusMatrices,
    rho: f64,
) -> (DVector<f64>, DVector<f64>) {
    let primal = &mats.a * pack_ym(y) + &mats.b * pack_z(z);
    let dz = pack_z(z) - pack_z(z_prev);
    let dual = mats.a.transpose() * (&mats.b * dz) * rho;
    (primal, dual)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmmOptions {
    pub rho: f64,
    pub adaptive_rho: bool,
    /// Iterations of residual balancing before the penalty starts growing.
    pub rho_warmup: usize,
    /// Penalty factor applied, after the warm-up, whenever the on/off
    /// pattern changes.
    pub rho_growth: f64,
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iter: usize,
    pub topology: TopologyStrategy,
    /// Duality-gap tolerance of the convex `y`-update.
    pub y_tol: f64,
}

impl Default for AdmmOptions {
    fn default() -> Self {
        Self {
            rho: 1.0,
            adaptive_rho: true,
            rho_warmup: 50,
            rho_growth: 2.0,
            eps_abs: 1e-4,
            eps_rel: 1e-3,
            max_iter: 500,
            topology: TopologyStrategy::default(),
            y_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub objective: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub eps_primal: f64,
    pub eps_dual: f64,
    pub rho: f64,
    pub active_rrhs: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTrace {
    pub rows: Vec<TraceRow>,
    pub converged: bool,
    /// Set when the greedy topology heuristic produced any `z`-update.
    pub approximate_topology: bool,
}

impl ConvergenceTrace {
    /// Delimited table: iteration, objective, primal and dual residual.
    pub fn to_table(&self) -> String {
        let mut out = String::from("iteration,objective,primal_residual,dual_residual\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.12e},{:.12e},{:.12e}\n",
                r.iteration, r.objective, r.primal_residual, r.dual_residual
            ));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct AdmmOutcome {
    pub state: PrimalState,
    pub dual: DualState,
    pub trace: ConvergenceTrace,
}

/// Runs ADMM from `init` with zero multipliers.
pub fn admm_solve(
    coeffs: &SurrogateCoeffs,
    cfg: &ScenarioConfig,
    h: &ChannelState,
    init: &PrimalState,
    opts: &AdmmOptions,
) -> Result<AdmmOutcome> {
    let dual = DualState::zeros(cfg.dims(), opts.rho);
    admm_solve_from(coeffs, cfg, h, init, dual, opts)
}

/// Runs ADMM from `init` and the given multipliers. `init.y.w` must be
/// strictly feasible for the rate bound built from `coeffs` (the expansion
/// point is).
pub fn admm_solve_from(
    coeffs: &SurrogateCoeffs,
    cfg: &ScenarioConfig,
    h: &ChannelState,
    init: &PrimalState,
    mut dual: DualState,
    opts: &AdmmOptions,
) -> Result<AdmmOutcome> {
    let inst = ScaledInstance::new(cfg)?;
    let mats = build_matrices(cfg);
    let d = inst.dims;
    let sqrt_rows = (n_rows(d) as f64).sqrt();
    let sqrt_cols = (ym_len(d) as f64).sqrt();
    let anchor = init.y.w.clone();

    let mut y = init.y.clone();
    let mut z = init.z.clone();
    let mut trace = ConvergenceTrace::default();
    let mut best: Option<(f64, PrimalState)> = None;

    for iteration in 0..opts.max_iter {
        let sub = ConvexSubproblem {
            inst: &inst,
            channel: h,
            coeffs,
            anchor: &anchor,
            mode: SubproblemMode::Consensus { z: &z, dual: &dual },
        };
        y = convex_solver::solve_y(&sub, &y, opts.y_tol)?;

        let zr = mip_solver::solve_z(&inst, &y, &dual, opts.topology)?;
        trace.approximate_topology |= zr.approximate;
        let z_new = zr.z;

        let (primal, dual_res) = residuals(&y, &z_new, &z, &mats, dual.rho);
        for (g, r) in dual.gamma.iter_mut().zip(primal.iter()) {
            *g += dual.rho * r;
        }

        let ay = (&mats.a * pack_ym(&y)).norm();
        let bz = (&mats.b * pack_z(&z_new)).norm();
        let aty = (mats.a.transpose() * DVector::from_column_slice(&dual.gamma)).norm();
        let eps_primal = sqrt_rows * opts.eps_abs + opts.eps_rel * ay.max(bz);
        let eps_dual = sqrt_cols * opts.eps_abs + opts.eps_rel * aty;
        let (rn, sn) = (primal.norm(), dual_res.norm());
        trace.rows.push(TraceRow {
            iteration,
            objective: inst.trade_objective(&y.p, y.p_cloud),
            primal_residual: rn,
            dual_residual: sn,
            eps_primal,
            eps_dual,
            rho: dual.rho,
            active_rrhs: z_new.active_count(),
        });
        let switched = z_new.b != z.b;
        z = z_new;

        if best.as_ref().map_or(true, |(b, _)| rn < *b) {
            best = Some((rn, PrimalState { y: y.clone(), z: z.clone() }));
        }
        if rn <= eps_primal && sn <= eps_dual {
            trace.converged = true;
            break;
        }
        if iteration + 1 >= opts.rho_warmup {
            // Past the warm-up the penalty grows whenever the on/off
            // pattern changes, until the pattern settles; from then on the
            // iteration is ordinary ADMM on a convex problem.
            if switched {
                dual.rho *= opts.rho_growth;
            }
        } else if opts.adaptive_rho {
            if rn > 10.0 * sn {
                dual.rho *= 2.0;
            } else if sn > 10.0 * rn {
                dual.rho /= 2.0;
            }
        }
    }

    let state = if trace.converged {
        PrimalState { y, z }
    } else {
        best.map(|(_, s)| s).unwrap_or_else(|| init.clone())
    };
    Ok(AdmmOutcome { state, dual, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{default_small_scenario, StackedVectors};

    fn tiny_cfg() -> ScenarioConfig {
        let mut cfg = default_small_scenario();
        cfg.n_rrh = 1;
        cfg.n_users = 1;
        cfg.n_antennas = 1;
        cfg.rrh_positions.truncate(1);
        cfg.user_positions.truncate(1);
        cfg.max_tx_power.truncate(1);
        cfg.amp_inefficiency.truncate(1);
        cfg.harvested_rrh.truncate(1);
        cfg.noise_power.truncate(1);
        cfg.arrival_rates.truncate(1);
        cfg.delay_qos.truncate(1);
        cfg
    }

    fn hand_built_point(cfg: &ScenarioConfig) -> (YBlock, ZBlock) {
        let d = cfg.dims();
        let x: Vec<f64> = (0..d.n_pairs()).map(|i| 0.05 + 0.02 * i as f64).collect();
        let b: Vec<bool> = (0..d.n_rrh).map(|n| n != 1).collect();
        let x: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(i, &v)| if b[i / d.n_users] { v } else { 0.0 })
            .collect();
        let a: Vec<bool> = x.iter().map(|&v| v > 0.0).collect();
        let p: Vec<f64> = (0..d.n_rrh)
            .map(|n| cfg.amp_inefficiency[n] * (0..d.n_users).map(|k| x[d.pair(n, k)]).sum::<f64>())
            .collect();
        let mu_cubed: Vec<f64> = (0..d.n_users).map(|k| (5e6 + 1e5 * k as f64).powi(3)).collect();
        let m = b.iter().filter(|&&v| v).count() as f64;
        let p_cloud = cfg.compute_coeff * mu_cubed.iter().sum::<f64>() + cfg.backhaul_power * m;
        let y = YBlock {
            p,
            p_cloud,
            mu_cubed,
            t: x.clone(),
            rates: vec![5e6; d.n_users],
            w: StackedVectors::zeros(d),
        };
        (y, ZBlock { b, a, x })
    }

    #[test]
    fn dimensions_follow_formulas() {
        let cfg = tiny_cfg();
        let m = build_matrices(&cfg);
        assert_eq!(m.a.shape(), (3, 4));
        assert_eq!(m.b.shape(), (3, 3));
        for (n, k) in [(1, 1), (3, 2), (7, 4), (4, 3)] {
            let d = Dims::new(n, k, 2);
            assert_eq!(n_rows(d), n * (k + 1) + 1);
            assert_eq!(ym_len(d), (n + 1) * (k + 1));
            assert_eq!(z_len(d), (2 * k + 1) * n);
        }
    }

    #[test]
    fn association_columns_are_zero() {
        let cfg = default_small_scenario();
        let m = build_matrices(&cfg);
        let d = cfg.dims();
        for c in d.n_rrh..d.n_rrh + d.n_pairs() {
            assert!(m.b.column(c).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn selectors_pick_expected_entries() {
        let d = Dims::new(3, 2, 1);
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(rrh_selector(d, 1).dot(&x), 7.0);
        assert_eq!(pair_selector(d, 2, 0).dot(&x), 5.0);
    }

    #[test]
    fn hand_built_point_is_in_consensus() {
        let cfg = default_small_scenario();
        let inst = ScaledInstance::new(&cfg).unwrap();
        let m = build_matrices(&cfg);
        let (y, z) = hand_built_point(&cfg);
        let res = &m.a * pack_ym(&y) + &m.b * pack_z(&z);
        assert!(res.norm() < 1e-12, "{res}");
        let structured = consensus_residual(&inst, &y, &z);
        assert!(structured.iter().all(|v| v.abs() < 1e-12));
        let (p, s) = residuals(&y, &z, &z, &m, 3.0);
        assert!(p.norm() < 1e-12 && s.norm() == 0.0);
    }

    #[test]
    fn structured_residual_matches_matrices() {
        let cfg = default_small_scenario();
        let inst = ScaledInstance::new(&cfg).unwrap();
        let m = build_matrices(&cfg);
        let (mut y, z) = hand_built_point(&cfg);
        y.p[0] += 0.3;
        y.t[2] -= 0.05;
        y.p_cloud += 1.7;
        y.mu_cubed[1] *= 1.1;
        let dense = &m.a * pack_ym(&y) + &m.b * pack_z(&z);
        let fast = consensus_residual(&inst, &y, &z);
        for (a, b) in dense.iter().zip(&fast) {
            assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn lagrangian_examples() {
        let cfg = default_small_scenario();
        let inst = ScaledInstance::new(&cfg).unwrap();
        let m = build_matrices(&cfg);
        let (mut y, z) = hand_built_point(&cfg);
        let f = inst.trade_objective(&y.p, y.p_cloud);
        let dual = DualState {
            gamma: vec![0.7; n_rows(cfg.dims())],
            rho: 2.0,
        };
        let at_consensus = augmented_lagrangian(&inst, &y, &z, &dual, &m);
        assert!((at_consensus - f).abs() < 1e-12 * (1.0 + f.abs()), "{at_consensus} vs {f}");

        y.p_cloud += 1.0;
        let f = inst.trade_objective(&y.p, y.p_cloud);
        let zero = DualState::zeros(cfg.dims(), 2.0);
        assert!((augmented_lagrangian(&inst, &y, &z, &zero, &m) - (f + 1.0)).abs() < 1e-9);

        let mut prev = f64::NEG_INFINITY;
        for rho in [0.1, 0.5, 1.0, 4.0] {
            let v = augmented_lagrangian(&inst, &y, &z, &DualState { gamma: dual.gamma.clone(), rho }, &m);
            assert!(v >= prev);
            prev = v;
        }

        let mut bad = z.clone();
        bad.b = vec![false; cfg.n_rrh];
        bad.a = vec![false; bad.a.len()];
        bad.x = vec![0.0; bad.x.len()];
        assert_eq!(augmented_lagrangian(&inst, &y, &bad, &zero, &m), f64::INFINITY);
    }

    #[test]
    fn dual_residual_scales_with_rho() {
        let cfg = default_small_scenario();
        let m = build_matrices(&cfg);
        let (y, z) = hand_built_point(&cfg);
        let mut z2 = z.clone();
        z2.x[0] += 0.2;
        z2.b[1] = true;
        let (_, s1) = residuals(&y, &z2, &z, &m, 1.0);
        let (_, s3) = residuals(&y, &z2, &z, &m, 3.0);
        assert!(s1.norm() > 0.0);
        assert!((s3 - s1 * 3.0).norm() < 1e-12);
    }
}
