//! The `z`-update: minimize `γᵀB·z + (ρ/2)‖A·y_m + B·z‖²` over the
//! topology set (at least one RRH on, `a ≤ b`, per-RRH power caps).
//!
//! For a fixed on/off pattern `b` the objective splits into one small QP
//! per RRH (its power row plus its `K` slack rows) and a cloud-row term
//! that depends only on how many RRHs are on. Each per-RRH QP is solved
//! once for "on" and once for "off", after which every pattern costs
//! `O(N)` to score.
//!
//! The association variables `a` carry no objective weight and appear in
//! no equality row, so for any optimal `(b, x)` the choice
//! `a_{n,k} = b_n ∧ (x_{n,k} > 0)` is feasible and attains the same value;
//! they are reconstructed from the support of `x` instead of enumerated.

use serde::{Deserialize, Serialize};

use crate::consensus::{cloud_row, cloud_row_value, slack_row, DualState, ScaledInstance, YBlock, ZBlock};
use crate::error::{Error, Result};

/// Entries of `x` at or below this are treated as zero.
pub const SUPPORT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TopologyStrategy {
    /// Exhaustive search over all `2^N − 1` patterns, refused above `max_rrh`.
    Enumerate { max_rrh: usize },
    /// Switch-off descent from the all-on pattern; approximate.
    Greedy,
}

impl Default for TopologyStrategy {
    fn default() -> Self {
        TopologyStrategy::Enumerate { max_rrh: 12 }
    }
}

#[derive(Debug, Clone)]
pub struct ZUpdate {
    pub z: ZBlock,
    /// Value of the `z`-dependent part of the augmented Lagrangian
    /// (`γᵀres + (ρ/2)‖res‖²` at the fixed `y`).
    pub objective: f64,
    pub approximate: bool,
}

/// Data of one RRH's QP: minimize
/// `γ_P·(p − Λ·Σx) + (ρ/2)(p − Λ·Σx)² + Σ_k [γ_k(t_k − x_k) + (ρ/2)(t_k − x_k)²]`
/// over `0 ≤ x_k ≤ upper_k`, `Λ·Σx ≤ cap`.
#[derive(Debug, Clone)]
pub struct RrhQp<'a> {
    pub power: f64,
    pub slack: &'a [f64],
    pub gamma_power: f64,
    pub gamma_slack: &'a [f64],
    pub rho: f64,
    pub amp: f64,
    pub cap: f64,
    pub upper: &'a [f64],
}

impl RrhQp<'_> {
    pub fn objective(&self, x: &[f64]) -> f64 {
        let r = self.power - self.amp * x.iter().sum::<f64>();
        let mut v = self.gamma_power * r + 0.5 * self.rho * r * r;
        for ((&t, &g), &xk) in self.slack.iter().zip(self.gamma_slack).zip(x) {
            let r = t - xk;
            v += g * r + 0.5 * self.rho * r * r;
        }
        v
    }

    fn centers(&self) -> Vec<f64> {
        self.slack
            .iter()
            .zip(self.gamma_slack)
            .map(|(t, g)| t + g / self.rho)
            .collect()
    }
}

fn clamp_sum(c: &[f64], upper: &[f64], theta: f64) -> f64 {
    c.iter().zip(upper).map(|(&ci, &u)| (ci - theta).clamp(0.0, u)).sum()
}

/// Root of an increasing function on `[lo, hi]` by bisection.
fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Solves the linear equation for `θ` on the active set found at `theta`
/// and keeps it if the set is unchanged.
fn polish_theta(
    c: &[f64],
    upper: &[f64],
    theta: f64,
    solve: impl Fn(usize, f64) -> Option<f64>,
) -> f64 {
    let mut free = 0usize;
    let mut fixed = 0.0;
    for (&ci, &u) in c.iter().zip(upper) {
        let v = ci - theta;
        if v > 0.0 && v < u {
            free += 1;
            fixed += ci;
        } else if v >= u {
            fixed += u;
        }
    }
    if free == 0 {
        return theta;
    }
    match solve(free, fixed) {
        Some(exact) => {
            let same_set = c.iter().zip(upper).all(|(&ci, &u)| {
                let (a, b) = (ci - theta, ci - exact);
                let class = |v: f64| if v <= 0.0 { 0 } else if v >= u { 2 } else { 1 };
                class(a) == class(b) || (a - b).abs() < 1e-12 * (1.0 + a.abs())
            });
            if same_set {
                exact
            } else {
                theta
            }
        }
        None => theta,
    }
}

/// Exact minimizer of one RRH's QP. The stationarity conditions give
/// `x_k = clamp(c_k − θ, 0, upper_k)` with `c_k = t_k + γ_k/ρ`; `θ` is the
/// root of an increasing scalar function, or of the sum constraint when
/// that is active.
pub fn per_rrh_qp(qp: &RrhQp) -> Vec<f64> {
    let k = qp.slack.len();
    if qp.cap <= 0.0 || qp.upper.iter().all(|&u| u <= 0.0) {
        return vec![0.0; k];
    }
    let c = qp.centers();
    let lam = qp.amp;
    let offset = lam * qp.power + lam * qp.gamma_power / qp.rho;
    let g = |theta: f64| theta - lam * lam * clamp_sum(&c, qp.upper, theta) + offset;
    let cmin = c.iter().cloned().fold(f64::INFINITY, f64::min);
    let cmax = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let umax = qp.upper.iter().cloned().fold(0.0, f64::max);
    let lo = (cmin - umax).min(-offset) - 1.0;
    let hi = cmax.max(-offset) + 1.0;
    let theta = bisect(lo, hi, g);
    let theta = polish_theta(&c, qp.upper, theta, |free, fixed| {
        Some((lam * lam * fixed - offset) / (1.0 + lam * lam * free as f64))
    });
    let mut x: Vec<f64> = c.iter().zip(qp.upper).map(|(&ci, &u)| (ci - theta).clamp(0.0, u)).collect();

    let budget = qp.cap / lam;
    if x.iter().sum::<f64>() > budget {
        // Sum constraint active: find the water level that spends exactly
        // the budget.
        let s = |theta: f64| budget - clamp_sum(&c, qp.upper, theta);
        let theta = bisect(cmin - umax - 1.0, cmax + 1.0, s);
        let theta = polish_theta(&c, qp.upper, theta, |free, fixed| Some((fixed - budget) / free as f64));
        x = c.iter().zip(qp.upper).map(|(&ci, &u)| (ci - theta).clamp(0.0, u)).collect();
    }
    x
}

struct RrhValues {
    on: Vec<f64>,
    off: Vec<f64>,
    on_x: Vec<Vec<f64>>,
}

fn rrh_values(inst: &ScaledInstance, y: &YBlock, dual: &DualState) -> RrhValues {
    let d = inst.dims;
    let mut out = RrhValues {
        on: Vec::with_capacity(d.n_rrh),
        off: Vec::with_capacity(d.n_rrh),
        on_x: Vec::with_capacity(d.n_rrh),
    };
    for n in 0..d.n_rrh {
        let lo = d.pair(n, 0);
        let hi = lo + d.n_users;
        let upper = vec![inst.max_power[n]; d.n_users];
        let qp = RrhQp {
            power: y.p[n],
            slack: &y.t[lo..hi],
            gamma_power: dual.gamma[n],
            gamma_slack: &dual.gamma[slack_row(d, n, 0)..slack_row(d, n, 0) + d.n_users],
            rho: dual.rho,
            amp: inst.amp[n],
            cap: inst.max_power[n],
            upper: &upper,
        };
        let x = per_rrh_qp(&qp);
        out.on.push(qp.objective(&x));
        out.off.push(qp.objective(&vec![0.0; d.n_users]));
        out.on_x.push(x);
    }
    out
}

fn cloud_term(inst: &ScaledInstance, y: &YBlock, dual: &DualState, active: usize) -> f64 {
    let r = cloud_row_value(inst, y, active);
    dual.gamma[cloud_row(inst.dims)] * r + 0.5 * dual.rho * r * r
}

fn pattern_value(values: &RrhValues, cloud: &[f64], pattern: u64) -> f64 {
    let mut v = cloud[pattern.count_ones() as usize];
    for (n, (on, off)) in values.on.iter().zip(&values.off).enumerate() {
        v += if pattern >> n & 1 == 1 { *on } else { *off };
    }
    v
}

fn assemble(inst: &ScaledInstance, values: &RrhValues, pattern: u64) -> ZBlock {
    let d = inst.dims;
    let mut z = ZBlock {
        b: vec![false; d.n_rrh],
        a: vec![false; d.n_pairs()],
        x: vec![0.0; d.n_pairs()],
    };
    for n in 0..d.n_rrh {
        if pattern >> n & 1 == 1 {
            z.b[n] = true;
            for k in 0..d.n_users {
                let v = values.on_x[n][k];
                if v > SUPPORT_TOL {
                    z.a[d.pair(n, k)] = true;
                    z.x[d.pair(n, k)] = v;
                }
            }
        }
    }
    z
}

fn better(val: f64, pattern: u64, best_val: f64, best_pattern: u64) -> bool {
    let tol = 1e-12 * (1.0 + best_val.abs());
    if val < best_val - tol {
        return true;
    }
    if val <= best_val + tol {
        let (c, bc) = (pattern.count_ones(), best_pattern.count_ones());
        return c < bc || (c == bc && pattern < best_pattern);
    }
    false
}

pub fn solve_z(
    inst: &ScaledInstance,
    y: &YBlock,
    dual: &DualState,
    strategy: TopologyStrategy,
) -> Result<ZUpdate> {
    let d = inst.dims;
    let values = rrh_values(inst, y, dual);
    let cloud: Vec<f64> = (0..=d.n_rrh).map(|m| cloud_term(inst, y, dual, m)).collect();
    let (pattern, approximate) = match strategy {
        TopologyStrategy::Enumerate { max_rrh } => {
            if d.n_rrh > max_rrh || d.n_rrh > 62 {
                return Err(Error::Domain(format!(
                    "{} RRHs exceed the enumeration limit of {max_rrh}; use the greedy topology strategy",
                    d.n_rrh
                )));
            }
            let mut best = (f64::INFINITY, 0u64);
            for pattern in 1..(1u64 << d.n_rrh) {
                let v = pattern_value(&values, &cloud, pattern);
                if best.1 == 0 || better(v, pattern, best.0, best.1) {
                    best = (v, pattern);
                }
            }
            (best.1, false)
        }
        TopologyStrategy::Greedy => (greedy_pattern(&values, &cloud, d.n_rrh), true),
    };
    let z = assemble(inst, &values, pattern);
    let objective = pattern_value(&values, &cloud, pattern);
    Ok(ZUpdate {
        z,
        objective,
        approximate,
    })
}

fn greedy_pattern(values: &RrhValues, cloud: &[f64], n_rrh: usize) -> u64 {
    let mut pattern = (1u64 << n_rrh) - 1;
    let mut current = pattern_value(values, cloud, pattern);
    loop {
        if pattern.count_ones() <= 1 {
            return pattern;
        }
        let mut best: Option<(f64, u64)> = None;
        for n in 0..n_rrh {
            if pattern >> n & 1 == 0 {
                continue;
            }
            let cand = pattern & !(1u64 << n);
            let v = pattern_value(values, cloud, cand);
            if best.map_or(true, |(bv, bp)| better(v, cand, bv, bp)) {
                best = Some((v, cand));
            }
        }
        match best {
            Some((v, cand)) if v < current - 1e-12 * (1.0 + current.abs()) => {
                pattern = cand;
                current = v;
            }
            _ => return pattern,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consensus::{augmented_lagrangian, build_matrices, n_rows, ScaledInstance};
    use crate::model::{default_small_scenario, Beamformers};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn qp_grid_min(qp: &RrhQp, steps: usize) -> f64 {
        // Two users only.
        let mut best = f64::INFINITY;
        for i in 0..=steps {
            for j in 0..=steps {
                let x = [qp.upper[0] * i as f64 / steps as f64, qp.upper[1] * j as f64 / steps as f64];
                if qp.amp * (x[0] + x[1]) <= qp.cap {
                    best = best.min(qp.objective(&x));
                }
            }
        }
        best
    }

    #[test]
    fn off_rrh_gets_zero() {
        let qp = RrhQp {
            power: 1.0,
            slack: &[0.5, 0.5],
            gamma_power: 0.1,
            gamma_slack: &[0.0, 0.0],
            rho: 1.0,
            amp: 2.0,
            cap: 0.0,
            upper: &[0.0, 0.0],
        };
        assert_eq!(per_rrh_qp(&qp), vec![0.0, 0.0]);
    }

    #[test]
    fn interior_minimizer_is_exact() {
        // p = Λ·Σt and zero multipliers: x = t is the unconstrained optimum.
        let t = [0.2, 0.35];
        let qp = RrhQp {
            power: 2.0 * 0.55,
            slack: &t,
            gamma_power: 0.0,
            gamma_slack: &[0.0, 0.0],
            rho: 1.3,
            amp: 2.0,
            cap: 10.0,
            upper: &[10.0, 10.0],
        };
        let x = per_rrh_qp(&qp);
        assert!((x[0] - 0.2).abs() < 1e-14 && (x[1] - 0.35).abs() < 1e-14, "{x:?}");
    }

    #[test]
    fn slack_dominated_penalty_clamps_targets() {
        // Without the power row the QP is a pure projection of t onto the box.
        let t = [-0.3, 0.4];
        let qp = RrhQp {
            power: 0.0,
            slack: &t,
            gamma_power: 0.0,
            gamma_slack: &[0.0, 0.0],
            rho: 1.0,
            amp: 1e-9,
            cap: 1.0,
            upper: &[0.3, 0.3],
        };
        let x = per_rrh_qp(&qp);
        assert!(x[0].abs() < 1e-12 && (x[1] - 0.3).abs() < 1e-9, "{x:?}");
    }

    #[test]
    fn active_sum_constraint_satisfies_kkt() {
        let t = [0.9, 0.8];
        let qp = RrhQp {
            power: 3.0,
            slack: &t,
            gamma_power: -0.4,
            gamma_slack: &[-0.2, 0.1],
            rho: 0.8,
            amp: 2.0,
            cap: 2.0,
            upper: &[2.0, 2.0],
        };
        let x = per_rrh_qp(&qp);
        let sum: f64 = x.iter().sum();
        assert!((qp.amp * sum - qp.cap).abs() < 1e-12);
        // Gradient of the objective; on the free coordinates it must equal
        // −ν·Λ for one ν ≥ 0.
        let r = qp.power - qp.amp * sum;
        let grads: Vec<f64> = (0..2)
            .map(|k| -qp.amp * qp.gamma_power - qp.rho * qp.amp * r - qp.gamma_slack[k] - qp.rho * (t[k] - x[k]))
            .collect();
        let free: Vec<usize> = (0..2).filter(|&k| x[k] > 1e-12 && x[k] < qp.upper[k] - 1e-12).collect();
        assert!(!free.is_empty());
        let nu = -grads[free[0]] / qp.amp;
        assert!(nu >= -1e-12, "multiplier {nu}");
        for &k in &free {
            assert!((grads[k] + nu * qp.amp).abs() < 1e-9);
        }
        assert!(qp.objective(&x) <= qp_grid_min(&qp, 400) + 1e-12);
    }

    #[test]
    fn per_rrh_qp_matches_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let t = [rng.gen_range(-0.5..1.5), rng.gen_range(-0.5..1.5)];
            let g = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let upper = [rng.gen_range(0.1..2.0), rng.gen_range(0.1..2.0)];
            let qp = RrhQp {
                power: rng.gen_range(-1.0..4.0),
                slack: &t,
                gamma_power: rng.gen_range(-1.0..1.0),
                gamma_slack: &g,
                rho: rng.gen_range(0.1..5.0),
                amp: rng.gen_range(1.0..3.0),
                cap: rng.gen_range(0.1..4.0),
                upper: &upper,
            };
            let x = per_rrh_qp(&qp);
            assert!(x.iter().zip(&upper).all(|(v, u)| *v >= 0.0 && *v <= *u + 1e-12));
            assert!(qp.amp * x.iter().sum::<f64>() <= qp.cap + 1e-9);
            let grid = qp_grid_min(&qp, 300);
            assert!(qp.objective(&x) <= grid + 1e-9, "{} vs {}", qp.objective(&x), grid);
        }
    }

    fn random_y(inst: &ScaledInstance, rng: &mut ChaCha8Rng) -> YBlock {
        let d = inst.dims;
        YBlock {
            p: (0..d.n_rrh).map(|_| rng.gen_range(0.0..3.0)).collect(),
            p_cloud: rng.gen_range(0.0..5.0),
            mu_cubed: (0..d.n_users).map(|_| rng.gen_range(1.0..5.0f64).powi(3) * 1e18).collect(),
            t: (0..d.n_pairs()).map(|_| rng.gen_range(0.0..1.0)).collect(),
            rates: vec![1e6; d.n_users],
            w: Beamformers::zeros(d),
        }
    }

    #[test]
    fn enumeration_agrees_with_lagrangian_ordering() {
        // The chosen pattern must have the smallest full augmented
        // Lagrangian among every pattern evaluated with its own optimal x.
        let cfg = default_small_scenario();
        let inst = ScaledInstance::new(&cfg).unwrap();
        let mats = build_matrices(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let y = random_y(&inst, &mut rng);
            let dual = DualState {
                gamma: (0..n_rows(inst.dims)).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                rho: rng.gen_range(0.2..3.0),
            };
            let out = solve_z(&inst, &y, &dual, TopologyStrategy::default()).unwrap();
            assert!(crate::consensus::in_topology_set(&inst, &out.z, 1e-12));
            let chosen = augmented_lagrangian(&inst, &y, &out.z, &dual, &mats);
            let values = rrh_values(&inst, &y, &dual);
            for pattern in 1..(1u64 << cfg.n_rrh) {
                let z = assemble(&inst, &values, pattern);
                assert!(augmented_lagrangian(&inst, &y, &z, &dual, &mats) >= chosen - 1e-9);
            }
            // a from the support of x, a ≤ b.
            for n in 0..cfg.n_rrh {
                for k in 0..cfg.n_users {
                    let i = inst.dims.pair(n, k);
                    assert_eq!(out.z.a[i], out.z.x[i] > SUPPORT_TOL);
                    assert!(!out.z.a[i] || out.z.b[n]);
                }
            }
        }
    }

    #[test]
    fn single_rrh_survives_when_nothing_is_needed() {
        let mut cfg = default_small_scenario();
        cfg.harvested_rrh = vec![1e3; cfg.n_rrh];
        cfg.harvested_cloud = 1e3;
        let inst = ScaledInstance::new(&cfg).unwrap();
        let d = inst.dims;
        let y = YBlock {
            p: vec![0.0; d.n_rrh],
            p_cloud: cfg.backhaul_power,
            mu_cubed: vec![0.0; d.n_users],
            t: vec![0.0; d.n_pairs()],
            rates: vec![0.0; d.n_users],
            w: Beamformers::zeros(d),
        };
        let dual = DualState::zeros(d, 1.0);
        let out = solve_z(&inst, &y, &dual, TopologyStrategy::default()).unwrap();
        assert_eq!(out.z.active_count(), 1);
        // Every single-RRH pattern ties; lowest index wins.
        assert!(out.z.b[0]);
    }

    #[test]
    fn enumeration_guard_and_greedy_fallback() {
        let cfg = default_small_scenario();
        let inst = ScaledInstance::new(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let y = random_y(&inst, &mut rng);
        let dual = DualState::zeros(inst.dims, 1.0);
        assert!(solve_z(&inst, &y, &dual, TopologyStrategy::Enumerate { max_rrh: 2 }).is_err());
        for _ in 0..20 {
            let y = random_y(&inst, &mut rng);
            let dual = DualState {
                gamma: (0..n_rows(inst.dims)).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                rho: 1.0,
            };
            let exact = solve_z(&inst, &y, &dual, TopologyStrategy::default()).unwrap();
            let greedy = solve_z(&inst, &y, &dual, TopologyStrategy::Greedy).unwrap();
            assert!(greedy.approximate && !exact.approximate);
            assert!(greedy.objective >= exact.objective - 1e-12);
        }
    }

    #[test]
    fn reoptimizing_never_worsens_the_objective() {
        let cfg = default_small_scenario();
        let inst = ScaledInstance::new(&cfg).unwrap();
        let mats = build_matrices(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let y = random_y(&inst, &mut rng);
            let dual = DualState {
                gamma: (0..n_rows(inst.dims)).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                rho: 1.0,
            };
            let first = solve_z(&inst, &y, &dual, TopologyStrategy::default()).unwrap();
            // Any other feasible z (here: all on, x = clamp(t)) scores no better.
            let d = inst.dims;
            let other = ZBlock {
                b: vec![true; d.n_rrh],
                a: vec![true; d.n_pairs()],
                x: y.t.iter().map(|t| t.clamp(0.0, 0.3)).collect(),
            };
            assert!(
                augmented_lagrangian(&inst, &y, &first.z, &dual, &mats)
                    <= augmented_lagrangian(&inst, &y, &other, &dual, &mats) + 1e-12
            );
        }
    }
}
