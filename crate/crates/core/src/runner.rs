//! Outer WMMSE loop around consensus ADMM, arrival-rate sweeps and the
//! reports written by the command-line tool.
//!
//! One outer iteration builds the surrogate coefficients at the current
//! beamformer, runs ADMM on the split problem and then re-solves the convex
//! problem with the topology ADMM selected held fixed. The second solve
//! returns a point that meets every constraint of the original problem
//! (the surrogate rate is a lower bound on the true rate), and its
//! beamformer is the expansion point of the next iteration.

use std::time::Instant;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::consensus::{
    admm_solve_from, AdmmOptions, ConvergenceTrace, DualState, PrimalState, ScaledInstance, YBlock, ZBlock,
};
use crate::convex_solver::{solve_y, ConvexSubproblem, SubproblemMode};
use crate::energy::{cloud_power, trade_cost};
use crate::error::{Error, Result};
use crate::model::{generate_channels, Beamformers, ChannelState, ScenarioConfig};
use crate::qos::{shannon_rate, total_delay};
use crate::wmmse::build_coeffs;

/// Minimum margin `(r − λ)·τ` a starting point must clear. Points closer to
/// the delay bound leave the compute variable no room.
const START_MARGIN: f64 = 1.01;

/// Relative shrink applied to beamformers sitting on a power cap so that
/// they are strictly inside it.
const CAP_SHRINK: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub admm: AdmmOptions,
    /// Relative objective change that counts as converged.
    pub outer_tol: f64,
    pub max_outer: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            admm: AdmmOptions::default(),
            outer_tol: 1e-4,
            max_outer: 30,
        }
    }
}

/// Wall-clock timings in seconds. Excluded from serialized reports so that
/// repeated runs produce identical files.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Timings {
    pub total: f64,
    pub per_outer: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterRecord {
    pub iteration: usize,
    /// Trading cost of the feasible point after this iteration.
    pub objective: f64,
    pub admm_iterations: usize,
    pub admm_converged: bool,
    /// RRHs switched on by the topology step.
    pub active_rrhs: usize,
    /// Set when the previous topology was kept because the one chosen by
    /// ADMM was infeasible or more expensive.
    pub kept_previous_topology: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// SHA-256 of the scenario configuration serialized as TOML.
    pub config_hash: String,
    pub seed: u64,
    /// Objective after every outer iteration; entry 0 is the initial point.
    pub objectives: Vec<f64>,
    pub outer: Vec<OuterRecord>,
    pub converged: bool,
    /// `b_n`, one per RRH.
    pub topology: Vec<bool>,
    /// `a_{n,k}`, RRH-major.
    pub association: Vec<Vec<bool>>,
    /// `P_n`, watts.
    pub rrh_power: Vec<f64>,
    /// Radiated power `Σ_k ‖w_{n,k}‖²` per RRH, watts.
    pub radiated_power: Vec<f64>,
    /// `P_e`, watts.
    pub cloud_power: f64,
    /// Rates actually achieved by the final beamformer, bits/s.
    pub rates: Vec<f64>,
    /// Compute capacity `μ_k`, bits/s.
    pub compute: Vec<f64>,
    /// End-to-end delay per user, seconds.
    pub delays: Vec<f64>,
    /// `Σ_n G(P_n) + G(P_e)`.
    pub cost: f64,
    /// Final beamformer, one `[re, im]` list per user (RRH-major inside).
    pub beamformer: Vec<Vec<[f64; 2]>>,
    pub admm_traces: Vec<ConvergenceTrace>,
    pub approximate_topology: bool,
    #[serde(skip)]
    pub timings: Timings,
}

impl RunReport {
    pub fn admm_iterations_total(&self) -> usize {
        self.outer.iter().map(|o| o.admm_iterations).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Every outer iteration's ADMM trace as one labeled table.
    pub fn trace_table(&self) -> String {
        let mut out = String::from(
            "outer_iter,iteration,objective,primal_residual,dual_residual,eps_primal,eps_dual,rho,active_rrhs\n",
        );
        for (i, trace) in self.admm_traces.iter().enumerate() {
            for r in &trace.rows {
                out.push_str(&format!(
                    "{},{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.6e},{}\n",
                    i + 1,
                    r.iteration,
                    r.objective,
                    r.primal_residual,
                    r.dual_residual,
                    r.eps_primal,
                    r.eps_dual,
                    r.rho,
                    r.active_rrhs
                ));
            }
        }
        out
    }
}

pub fn config_hash(cfg: &ScenarioConfig) -> Result<String> {
    let text = cfg.to_toml()?;
    let digest = Sha256::digest(text.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Rates of every user under `w`, bits/s.
pub fn achieved_rates(cfg: &ScenarioConfig, h: &ChannelState, w: &Beamformers) -> Result<Vec<f64>> {
    (0..cfg.n_users)
        .map(|k| shannon_rate(k, w, h, cfg.noise_power[k], cfg.bandwidth_hz))
        .collect()
}

fn short_users(cfg: &ScenarioConfig, rates: &[f64]) -> Vec<usize> {
    (0..cfg.n_users)
        .filter(|&k| !((rates[k] - cfg.arrival_rates[k]) * cfg.delay_qos[k] > START_MARGIN))
        .collect()
}

/// Smallest cubed compute meeting the delay bound with some slack, given
/// the transmission rate.
fn compute_cubed_for(rate: f64, lambda: f64, tau: f64) -> f64 {
    let room = tau - 1.0 / (rate - lambda);
    (lambda + 2.0 / room).powi(3)
}

fn radiated(w: &Beamformers, n: usize) -> f64 {
    (0..w.dims().n_users).map(|k| w.block_norm_sqr(k, n)).sum()
}

/// Builds the `y`/`z` pair that corresponds to a beamformer and topology:
/// slack powers from the blocks, powers from the slacks, rates from the
/// channel, compute from the delay bound.
fn state_from_beamformer(
    cfg: &ScenarioConfig,
    h: &ChannelState,
    w: Beamformers,
    b: Vec<bool>,
    a: Vec<bool>,
    mu_cubed: Option<Vec<f64>>,
) -> Result<PrimalState> {
    let d = cfg.dims();
    let rates = achieved_rates(cfg, h, &w)?;
    if mu_cubed.is_none() {
        let short = short_users(cfg, &rates);
        if !short.is_empty() {
            return Err(Error::Infeasible { users: short });
        }
    }
    let mut t = vec![0.0; d.n_pairs()];
    for n in 0..d.n_rrh {
        for k in 0..d.n_users {
            t[d.pair(n, k)] = w.block_norm_sqr(k, n);
        }
    }
    let p: Vec<f64> = (0..d.n_rrh).map(|n| cfg.amp_inefficiency[n] * radiated(&w, n)).collect();
    let mu_cubed = mu_cubed.unwrap_or_else(|| {
        (0..d.n_users)
            .map(|k| compute_cubed_for(rates[k], cfg.arrival_rates[k], cfg.delay_qos[k]))
            .collect()
    });
    let p_cloud = cloud_power(&mu_cubed, &b, cfg.compute_coeff, cfg.backhaul_power);
    let y = YBlock {
        p,
        p_cloud,
        mu_cubed,
        t: t.clone(),
        rates,
        w,
    };
    Ok(PrimalState { y, z: ZBlock { b, a, x: t } })
}

/// Each active RRH's power budget split equally between the users, each
/// block along its channel direction.
fn matched_filter(cfg: &ScenarioConfig, h: &ChannelState, b: &[bool]) -> Beamformers {
    let d = cfg.dims();
    let mut w = Beamformers::zeros(d);
    for k in 0..d.n_users {
        for n in (0..d.n_rrh).filter(|&n| b[n]) {
            let share = cfg.max_tx_power[n] / (cfg.amp_inefficiency[n] * d.n_users as f64);
            let hb = h.h.block(k, n);
            let norm = hb.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
            let scale = if norm > 0.0 { share.sqrt() / norm } else { 0.0 };
            for (dst, c) in w.block_mut(k, n).iter_mut().zip(hb) {
                *dst = c * scale;
            }
        }
    }
    w
}

/// Starting point: every RRH on at full power with matched-filter
/// beamformers.
pub fn initial_state(cfg: &ScenarioConfig, h: &ChannelState) -> Result<PrimalState> {
    cfg.validate()?;
    let d = cfg.dims();
    let b = vec![true; d.n_rrh];
    let w = matched_filter(cfg, h, &b);
    state_from_beamformer(cfg, h, w, b, vec![true; d.n_pairs()], None)
}

/// Zeroes the blocks of inactive pairs and pulls every RRH strictly inside
/// its power cap.
fn fit_to_topology(cfg: &ScenarioConfig, w: &Beamformers, b: &[bool], a: &[bool]) -> Beamformers {
    let d = cfg.dims();
    let mut out = w.clone();
    for n in 0..d.n_rrh {
        for k in 0..d.n_users {
            if !(b[n] && a[d.pair(n, k)]) {
                out.block_mut(k, n).iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
            }
        }
        let used = cfg.amp_inefficiency[n] * radiated(&out, n);
        let limit = cfg.max_tx_power[n] * (1.0 - CAP_SHRINK);
        if used > limit {
            let s = (limit / used).sqrt();
            for k in 0..d.n_users {
                out.block_mut(k, n).iter_mut().for_each(|c| *c *= s);
            }
        }
    }
    out
}

/// Topology read off a `z`-block. Association carries no cost, so every
/// active RRH may serve every user; the re-solve decides the actual split.
fn topology_of(cfg: &ScenarioConfig, z: &ZBlock) -> (Vec<bool>, Vec<bool>) {
    let d = cfg.dims();
    let a = (0..d.n_pairs()).map(|i| z.b[i / d.n_users]).collect();
    (z.b.clone(), a)
}

/// Minimizes the trading cost with the topology fixed, expanding the rate
/// surrogate at `w` (which must meet the delay bounds and caps strictly).
fn solve_fixed_topology(
    cfg: &ScenarioConfig,
    inst: &ScaledInstance,
    h: &ChannelState,
    w: &Beamformers,
    b: &[bool],
    a: &[bool],
    y_tol: f64,
) -> Result<PrimalState> {
    let start = state_from_beamformer(cfg, h, w.clone(), b.to_vec(), a.to_vec(), None)?;
    let coeffs = build_coeffs(w, h, &cfg.noise_power)?;
    let sub = ConvexSubproblem {
        inst,
        channel: h,
        coeffs: &coeffs,
        anchor: w,
        mode: SubproblemMode::FixedTopology { b, a },
    };
    let y = solve_y(&sub, &start.y, y_tol)?;
    // Report the rates the beamformer really achieves; they are at least
    // the optimized ones.
    let w = fit_to_topology(cfg, &y.w, b, a);
    state_from_beamformer(cfg, h, w, b.to_vec(), a.to_vec(), Some(y.mu_cubed))
}

fn cost_of(cfg: &ScenarioConfig, y: &YBlock) -> f64 {
    y.p
        .iter()
        .zip(&cfg.harvested_rrh)
        .map(|(&p, &hv)| trade_cost(p, hv, cfg.price_buy, cfg.price_sell))
        .sum::<f64>()
        + trade_cost(y.p_cloud, cfg.harvested_cloud, cfg.price_buy, cfg.price_sell)
}

/// Runs the outer loop to convergence from the full-power starting point.
pub fn wmmse_admm(cfg: &ScenarioConfig, h: &ChannelState, opts: &RunOptions) -> Result<RunReport> {
    let start = initial_state(cfg, h)?;
    wmmse_admm_from(cfg, h, opts, start)
}

/// Outer loop from a caller-supplied point, which must satisfy every
/// constraint of `cfg`. The reported objective never exceeds the cost of
/// `start`.
pub fn wmmse_admm_from(
    cfg: &ScenarioConfig,
    h: &ChannelState,
    opts: &RunOptions,
    start: PrimalState,
) -> Result<RunReport> {
    let clock = Instant::now();
    let inst = ScaledInstance::new(cfg)?;
    let d = cfg.dims();
    let mut current = start;
    let mut objectives = vec![cost_of(cfg, &current.y)];
    let mut outer = Vec::new();
    let mut traces = Vec::new();
    let mut per_outer = Vec::new();
    let mut approximate = false;
    let mut dual = DualState::zeros(d, opts.admm.rho);
    let mut calm = 0;
    let mut converged = false;

    for iteration in 1..=opts.max_outer {
        let started = Instant::now();
        // The expansion point must sit strictly inside the caps.
        let (b0, a0) = (current.z.b.clone(), current.z.a.clone());
        let w0 = fit_to_topology(cfg, &current.y.w, &b0, &a0);
        current = state_from_beamformer(cfg, h, w0, b0, a0, Some(current.y.mu_cubed.clone()))?;
        let coeffs = build_coeffs(&current.y.w, h, &cfg.noise_power)?;

        let admm = admm_solve_from(&coeffs, cfg, h, &current, dual.clone(), &opts.admm)?;
        dual = admm.dual.clone();
        approximate |= admm.trace.approximate_topology;

        // Re-solve on the topology ADMM chose, expanding at its beamformer
        // or, failing that, at a fresh matched filter on the active RRHs.
        // The previous topology, expanded at the current point, is always a
        // candidate too, so the objective never increases.
        let (b, a) = topology_of(cfg, &admm.state.z);
        let mut candidates = Vec::new();
        for w in [
            fit_to_topology(cfg, &admm.state.y.w, &b, &a),
            fit_to_topology(cfg, &matched_filter(cfg, h, &b), &b, &a),
        ] {
            match solve_fixed_topology(cfg, &inst, h, &w, &b, &a, opts.admm.y_tol) {
                Ok(s) => {
                    candidates.push((s, false));
                    break;
                }
                Err(Error::Infeasible { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        let incumbent = solve_fixed_topology(cfg, &inst, h, &current.y.w, &current.z.b, &current.z.a, opts.admm.y_tol)?;
        candidates.push((incumbent, true));
        let (next, kept) = candidates
            .into_iter()
            .min_by(|x, y| cost_of(cfg, &x.0.y).total_cmp(&cost_of(cfg, &y.0.y)))
            .expect("incumbent candidate");

        let prev = *objectives.last().expect("initial objective");
        let f = cost_of(cfg, &next.y);
        objectives.push(f);
        outer.push(OuterRecord {
            iteration,
            objective: f,
            admm_iterations: admm.trace.rows.len(),
            admm_converged: admm.trace.converged,
            active_rrhs: next.z.active_count(),
            kept_previous_topology: kept,
        });
        traces.push(admm.trace);
        current = next;
        per_outer.push(started.elapsed().as_secs_f64());

        if (f - prev).abs() <= opts.outer_tol * prev.abs().max(1.0) {
            calm += 1;
            if calm >= 2 {
                converged = true;
                break;
            }
        } else {
            calm = 0;
        }
    }
    if opts.max_outer == 0 {
        converged = true;
    }
    finish(cfg, current, objectives, outer, traces, converged, approximate, per_outer, clock)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    cfg: &ScenarioConfig,
    state: PrimalState,
    objectives: Vec<f64>,
    outer: Vec<OuterRecord>,
    admm_traces: Vec<ConvergenceTrace>,
    converged: bool,
    approximate_topology: bool,
    per_outer: Vec<f64>,
    clock: Instant,
) -> Result<RunReport> {
    let d = cfg.dims();
    let y = &state.y;
    let compute: Vec<f64> = y.mu_cubed.iter().map(|m| m.cbrt()).collect();
    let delays = (0..d.n_users)
        .map(|k| total_delay(compute[k], y.rates[k], cfg.arrival_rates[k]))
        .collect::<Result<Vec<_>>>()?;
    let association = (0..d.n_rrh)
        .map(|n| (0..d.n_users).map(|k| state.z.a[d.pair(n, k)]).collect())
        .collect();
    let beamformer = (0..d.n_users)
        .map(|k| y.w.user(k).iter().map(|c| [c.re, c.im]).collect())
        .collect();
    Ok(RunReport {
        config_hash: config_hash(cfg)?,
        seed: cfg.rng_seed,
        cost: cost_of(cfg, y),
        objectives,
        outer,
        converged,
        topology: state.z.b.clone(),
        association,
        rrh_power: y.p.clone(),
        radiated_power: (0..d.n_rrh).map(|n| radiated(&y.w, n)).collect(),
        cloud_power: y.p_cloud,
        rates: y.rates.clone(),
        compute,
        delays,
        beamformer,
        admm_traces,
        approximate_topology,
        timings: Timings {
            total: clock.elapsed().as_secs_f64(),
            per_outer,
        },
    })
}

/// Generates the channel from `cfg.rng_seed` and runs the outer loop.
pub fn solve_instance(cfg: &ScenarioConfig, opts: &RunOptions) -> Result<RunReport> {
    let h = generate_channels(cfg, cfg.rng_seed)?;
    wmmse_admm(cfg, &h, opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda_mbps: f64,
    /// Mean cost over the realizations; `None` when any was infeasible.
    pub cost: Option<f64>,
    pub feasible: bool,
    pub outer_iters: usize,
    pub admm_iters_total: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub config_hash: String,
    pub seed: u64,
    pub realizations: usize,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// Columns: `lambda_mbps,cost,feasible,outer_iters,admm_iters_total`.
    /// Infeasible points have an empty cost field.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lambda_mbps,cost,feasible,outer_iters,admm_iters_total\n");
        for r in &self.rows {
            let cost = r.cost.map(|c| format!("{c:.9e}")).unwrap_or_default();
            out.push_str(&format!(
                "{:.4},{},{},{},{}\n",
                r.lambda_mbps, cost, r.feasible, r.outer_iters, r.admm_iters_total
            ));
        }
        out
    }

    pub fn all_converged(&self) -> bool {
        self.rows.iter().all(|r| !r.feasible || r.converged)
    }
}

/// Expands `start:stop:step` (inclusive of `stop` up to rounding).
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').collect();
    let bad = || Error::Config(format!("grid '{text}' is not start:stop:step"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let nums: Vec<f64> = parts
        .iter()
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    let (start, stop, step) = (nums[0], nums[1], nums[2]);
    if !(step > 0.0 && start > 0.0 && stop >= start && start.is_finite() && stop.is_finite()) {
        return Err(bad());
    }
    let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|i| start + step * i as f64).collect())
}

/// Restates a final point of a run at a higher arrival rate as a starting
/// point for `cfg`. Lowering λ only loosens the delay bounds, so the point
/// stays feasible with the same powers and hence the same cost.
fn continuation_start(cfg: &ScenarioConfig, h: &ChannelState, prev: &RunReport) -> Result<PrimalState> {
    let d = cfg.dims();
    let rows = prev
        .beamformer
        .iter()
        .map(|row| row.iter().map(|&[re, im]| Complex64::new(re, im)).collect())
        .collect();
    let w = Beamformers::from_rows(d, rows)?;
    let a = (0..d.n_pairs())
        .map(|i| prev.association[i / d.n_users][i % d.n_users])
        .collect();
    let mu_cubed = prev.compute.iter().map(|m| m.powi(3)).collect();
    state_from_beamformer(cfg, h, w, prev.topology.clone(), a, Some(mu_cubed))
}

/// One channel realization over the whole grid, from the highest arrival
/// rate down, each point starting from the solution of the point above.
/// Returns one outcome per grid entry, in grid order.
fn sweep_chain(
    cfg: &ScenarioConfig,
    h: &ChannelState,
    lambda_grid_mbps: &[f64],
    opts: &RunOptions,
) -> Vec<Option<RunReport>> {
    let mut order: Vec<usize> = (0..lambda_grid_mbps.len()).collect();
    order.sort_by(|&x, &y| lambda_grid_mbps[y].total_cmp(&lambda_grid_mbps[x]));
    let mut out: Vec<Option<RunReport>> = vec![None; lambda_grid_mbps.len()];
    let mut prev: Option<RunReport> = None;
    for i in order {
        let cfg = cfg.clone().with_arrival_rate(lambda_grid_mbps[i] * 1e6);
        let start = match &prev {
            Some(rep) => continuation_start(&cfg, h, rep),
            None => initial_state(&cfg, h),
        };
        let report = start.and_then(|s| wmmse_admm_from(&cfg, h, opts, s)).ok();
        if report.is_some() {
            prev = report.clone();
        }
        out[i] = report;
    }
    out
}

/// Solves the instance at every arrival rate of `lambda_grid_mbps` (applied
/// to all users) on the same channel realizations, seeded `seed`,
/// `seed + 1`, …. Each realization sweeps the grid downward, warm-starting
/// every point from the solution at the next higher rate; realizations run
/// on separate threads.
pub fn sweep_arrival_rates(
    cfg: &ScenarioConfig,
    lambda_grid_mbps: &[f64],
    seed: u64,
    realizations: usize,
    opts: &RunOptions,
) -> Result<SweepTable> {
    if lambda_grid_mbps.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
        return Err(Error::Domain("arrival rates must be positive".into()));
    }
    let realizations = realizations.max(1);
    let mut cfg = cfg.clone();
    cfg.rng_seed = seed;
    let channels = (0..realizations as u64)
        .map(|i| generate_channels(&cfg, seed.wrapping_add(i)))
        .collect::<Result<Vec<_>>>()?;
    let chains: Vec<Vec<Option<RunReport>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = channels
            .iter()
            .map(|h| {
                let cfg = &cfg;
                scope.spawn(move || sweep_chain(cfg, h, lambda_grid_mbps, opts))
            })
            .collect();
        handles
            .into_iter()
            .map(|handle| handle.join().expect("sweep worker panicked"))
            .collect()
    });
    let rows = lambda_grid_mbps
        .iter()
        .enumerate()
        .map(|(i, &lambda_mbps)| {
            let mut row = SweepRow {
                lambda_mbps,
                cost: None,
                feasible: true,
                outer_iters: 0,
                admm_iters_total: 0,
                converged: true,
            };
            let mut total = 0.0;
            for chain in &chains {
                match &chain[i] {
                    Some(rep) => {
                        total += rep.cost;
                        row.outer_iters += rep.outer.len();
                        row.admm_iters_total += rep.admm_iterations_total();
                        row.converged &= rep.converged;
                    }
                    None => {
                        row.feasible = false;
                        row.converged = false;
                    }
                }
            }
            if row.feasible {
                row.cost = Some(total / chains.len() as f64);
            }
            row
        })
        .collect();
    Ok(SweepTable {
        config_hash: config_hash(&cfg)?,
        seed,
        realizations,
        rows,
    })
}

/// Process exit codes of the command-line tool.
pub mod exit_code {
    pub const SUCCESS: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const INFEASIBLE: i32 = 2;
    pub const NOT_CONVERGED: i32 = 3;
}
