//! The convex `y`-update, solved with a log-barrier method.
//!
//! Decision vector (solver units; rates in Mbit/s):
//!
//! ```text
//!   [ epigraph slacks | P_e (consensus mode only) | μ′ (K) | r (K) ]   global block
//!   [ t_{·,k} | re/im of w_{·,k} ]  for each user k                   user blocks
//! ```
//!
//! Constraints: rate bound `r_k ≤ β·bound_k(w)` (concave RHS), delay
//! `1/(∛μ′_k − λ_k) + 1/(r_k − λ_k) ≤ τ_k`, stability `∛μ′_k ≥ λ_k`,
//! `r_k ≥ λ_k`, power cones `‖w_{n,k}‖² ≤ t_{n,k}`, and the epigraph
//! rows `±(P − P_h) ≤ s` replacing the absolute values of the trading cost.
//!
//! Every constraint except the rate bounds (and, with a fixed topology,
//! the per-RRH power rows) lives inside one block, so the Newton matrix is
//! block diagonal plus a low-rank term and is solved with the Woodbury
//! identity.
//!
//! Transmit powers `P_n` enter the consensus-mode objective separably and
//! are set in closed form by [`prox_trade_cost`].

use nalgebra::{DMatrix, DVector};

use crate::consensus::{slack_row, cloud_row, DualState, ScaledInstance, YBlock, ZBlock, RATE_UNIT_BPS};
use crate::error::{Error, Result};
use crate::model::{Beamformers, ChannelState};
use crate::wmmse::SurrogateCoeffs;

/// Which objective the `y`-problem carries.
#[derive(Debug, Clone, Copy)]
pub enum SubproblemMode<'a> {
    /// ADMM step: `f(y) + γᵀA·y_m + (ρ/2)‖A·y_m + B·z‖²` at fixed `z`.
    Consensus { z: &'a ZBlock, dual: &'a DualState },
    /// Direct minimization of `Σ G′(P_n) + G′(P_e)` for a fixed topology,
    /// with `P_n = Λ_n·Σ_k t_{n,k}` and the per-RRH power caps enforced.
    FixedTopology { b: &'a [bool], a: &'a [bool] },
}

#[derive(Debug, Clone, Copy)]
pub struct ConvexSubproblem<'a> {
    pub inst: &'a ScaledInstance,
    pub channel: &'a ChannelState,
    pub coeffs: &'a SurrogateCoeffs,
    /// Strictly feasible beamformer used to restore feasibility of a warm
    /// start (the expansion point of `coeffs`).
    pub anchor: &'a Beamformers,
    pub mode: SubproblemMode<'a>,
}

/// Barrier schedule and Newton settings.
#[derive(Debug, Clone, Copy)]
pub struct BarrierSettings {
    /// Factor by which the barrier weight grows per stage.
    pub growth: f64,
    pub max_newton: usize,
    pub newton_tol: f64,
}

impl Default for BarrierSettings {
    fn default() -> Self {
        Self {
            growth: 10.0,
            max_newton: 500,
            newton_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct YSolution {
    pub y: YBlock,
    /// Duality-gap bound `m/t` at termination.
    pub gap: f64,
    pub newton_steps: usize,
    /// False when some centering stage ran out of Newton steps, in which
    /// case `gap` is nominal only.
    pub centered: bool,
}

/// `argmin_p G′(p) + γ·p + (ρ/2)(p − c)²` for the piecewise-linear trading
/// cost with harvested power `harvested`.
pub fn prox_trade_cost(inst: &ScaledInstance, harvested: f64, gamma: f64, rho: f64, c: f64) -> f64 {
    let buy = c - (inst.prices.price_buy() + gamma) / rho;
    if buy >= harvested {
        return buy;
    }
    let sell = c - (inst.prices.price_sell() + gamma) / rho;
    if sell <= harvested {
        return sell;
    }
    harvested
}

#[derive(Debug, Clone)]
struct PairVar {
    n: usize,
    k: usize,
    t: usize,
    w: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    /// RRH of each epigraph slack; `None` marks the cloud slack (last).
    epi: Vec<Option<usize>>,
    pe: Option<usize>,
    mu: usize,
    r: usize,
    n_global: usize,
    pairs: Vec<PairVar>,
    /// `[start, end)` of each user block.
    user_range: Vec<(usize, usize)>,
    /// Start and length of the w coordinates of each user.
    user_w: Vec<(usize, usize)>,
    pair_of: Vec<Option<usize>>,
    n: usize,
}

impl Layout {
    fn new(sub: &ConvexSubproblem) -> Self {
        let d = sub.inst.dims;
        let l2 = 2 * d.n_antennas;
        let (epi, pe, active_pair): (Vec<Option<usize>>, Option<usize>, Vec<bool>) = match sub.mode {
            SubproblemMode::Consensus { .. } => (vec![None], Some(1), vec![true; d.n_pairs()]),
            SubproblemMode::FixedTopology { b, a } => {
                let mut epi: Vec<Option<usize>> = (0..d.n_rrh).filter(|&n| b[n]).map(Some).collect();
                epi.push(None);
                let act = (0..d.n_pairs()).map(|i| a[i] && b[i / d.n_users]).collect();
                (epi, None, act)
            }
        };
        let mu = epi.len() + usize::from(pe.is_some());
        let r = mu + d.n_users;
        let n_global = r + d.n_users;
        let mut next = n_global;
        let mut pairs = Vec::new();
        let mut user_range = Vec::new();
        let mut user_w = Vec::new();
        let mut pair_of = vec![None; d.n_pairs()];
        for k in 0..d.n_users {
            let start = next;
            let rrhs: Vec<usize> = (0..d.n_rrh).filter(|&n| active_pair[d.pair(n, k)]).collect();
            let w_start = start + rrhs.len();
            for (i, &n) in rrhs.iter().enumerate() {
                pair_of[d.pair(n, k)] = Some(pairs.len());
                pairs.push(PairVar {
                    n,
                    k,
                    t: start + i,
                    w: w_start + i * l2,
                });
            }
            next = w_start + rrhs.len() * l2;
            user_range.push((start, next));
            user_w.push((w_start, rrhs.len() * l2));
        }
        Self {
            epi,
            pe,
            mu,
            r,
            n_global,
            pairs,
            user_range,
            user_w,
            pair_of,
            n: next,
        }
    }

    /// Block id: 0 for the global block, `k + 1` for user `k`.
    fn block_of(&self, i: usize) -> usize {
        if i < self.n_global {
            return 0;
        }
        self.user_range.iter().position(|&(s, e)| i >= s && i < e).unwrap() + 1
    }

    fn block_start(&self, b: usize) -> usize {
        if b == 0 {
            0
        } else {
            self.user_range[b - 1].0
        }
    }

    fn block_len(&self, b: usize) -> usize {
        if b == 0 {
            self.n_global
        } else {
            self.user_range[b - 1].1 - self.user_range[b - 1].0
        }
    }
}

/// Rate-bound data of one user `k` in real coordinates.
#[derive(Debug, Clone)]
struct RateTerm {
    c1: f64,
    c4: f64,
    /// Gradient of `Re(c_{2,k}·w_k)` over user `k`'s w coordinates.
    lin: Vec<f64>,
    /// For every user `j`: gradients of `Re(h_kᴴw_j)` and `Im(h_kᴴw_j)`
    /// over user `j`'s w coordinates.
    re: Vec<Vec<f64>>,
    im: Vec<Vec<f64>>,
}

/// Newton matrix `blockdiag(D) + Σ u uᵀ`.
struct NewtonMatrix {
    blocks: Vec<DMatrix<f64>>,
    low_rank: Vec<DVector<f64>>,
}

struct Problem<'a> {
    sub: ConvexSubproblem<'a>,
    layout: Layout,
    rates: Vec<RateTerm>,
    /// Active-RRH count of the topology the objective refers to.
    active: usize,
    m: usize,
}

impl<'a> Problem<'a> {
    fn new(sub: ConvexSubproblem<'a>) -> Self {
        let layout = Layout::new(&sub);
        let d = sub.inst.dims;
        let mut rates = Vec::with_capacity(d.n_users);
        for k in 0..d.n_users {
            let wcoords = |j: usize| -> Vec<(usize, usize)> {
                // (pair index, antenna) list of user j in block order.
                layout
                    .pairs
                    .iter()
                    .filter(|p| p.k == j)
                    .flat_map(|p| (0..d.n_antennas).map(move |l| (p.n, l)))
                    .collect()
            };
            let mut lin = Vec::new();
            for (n, l) in wcoords(k) {
                let c = sub.coeffs.c2.user(k)[n * d.n_antennas + l];
                lin.push(c.re);
                lin.push(-c.im);
            }
            let mut re = Vec::with_capacity(d.n_users);
            let mut im = Vec::with_capacity(d.n_users);
            for j in 0..d.n_users {
                let mut gr = Vec::new();
                let mut gi = Vec::new();
                for (n, l) in wcoords(j) {
                    let h = sub.channel.h.user(k)[n * d.n_antennas + l];
                    gr.push(h.re);
                    gr.push(h.im);
                    gi.push(-h.im);
                    gi.push(h.re);
                }
                re.push(gr);
                im.push(gi);
            }
            rates.push(RateTerm {
                c1: sub.coeffs.c1[k],
                c4: sub.coeffs.c4[k],
                lin,
                re,
                im,
            });
        }
        let active = match sub.mode {
            SubproblemMode::Consensus { z, .. } => z.active_count(),
            SubproblemMode::FixedTopology { b, .. } => b.iter().filter(|&&v| v).count(),
        };
        let n_caps = match sub.mode {
            SubproblemMode::Consensus { .. } => 0,
            SubproblemMode::FixedTopology { .. } => layout.epi.len() - 1,
        };
        let m = 2 * layout.epi.len() + 4 * d.n_users + layout.pairs.len() + n_caps;
        Self {
            sub,
            layout,
            rates,
            active,
            m,
        }
    }

    fn w_of<'x>(&self, x: &'x [f64], j: usize) -> &'x [f64] {
        let (s, len) = self.layout.user_w[j];
        &x[s..s + len]
    }

    /// Rate bound of user `k` in Mbit/s, plus `(Re, Im)` of `h_kᴴw_j`.
    fn rate_bound(&self, x: &[f64], k: usize) -> (f64, Vec<(f64, f64)>) {
        let term = &self.rates[k];
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        let z: Vec<(f64, f64)> = (0..self.rates.len())
            .map(|j| {
                let wj = self.w_of(x, j);
                (dot(&term.re[j], wj), dot(&term.im[j], wj))
            })
            .collect();
        let received: f64 = z.iter().map(|(a, b)| a * a + b * b).sum();
        let nats = term.c1 + dot(&term.lin, self.w_of(x, k)) - term.c4 * received;
        (self.sub.inst.rate_scale * nats, z)
    }

    /// `P_n − P_h` style linear terms with their sparse gradients.
    fn epi_terms(&self, x: &[f64]) -> Vec<(f64, Vec<(usize, f64)>)> {
        let inst = self.sub.inst;
        let d = inst.dims;
        let mut out = Vec::with_capacity(self.layout.epi.len());
        for rrh in &self.layout.epi {
            match (rrh, self.layout.pe) {
                (Some(n), _) => {
                    let mut g = Vec::new();
                    let mut v = -inst.harvested_rrh[*n];
                    for k in 0..d.n_users {
                        if let Some(p) = self.layout.pair_of[d.pair(*n, k)] {
                            let ti = self.layout.pairs[p].t;
                            v += inst.amp[*n] * x[ti];
                            g.push((ti, inst.amp[*n]));
                        }
                    }
                    out.push((v, g));
                }
                (None, Some(pe)) => out.push((x[pe] - inst.harvested_cloud, vec![(pe, 1.0)])),
                (None, None) => {
                    let mut v = inst.backhaul_power * self.active as f64 - inst.harvested_cloud;
                    let mut g = Vec::new();
                    for k in 0..d.n_users {
                        v += inst.compute_coeff * x[self.layout.mu + k];
                        g.push((self.layout.mu + k, inst.compute_coeff));
                    }
                    out.push((v, g));
                }
            }
        }
        out
    }

    fn cloud_residual(&self, x: &[f64]) -> Option<f64> {
        let inst = self.sub.inst;
        let pe = self.layout.pe?;
        let mu: f64 = (0..inst.dims.n_users).map(|k| x[self.layout.mu + k]).sum();
        Some(x[pe] - inst.compute_coeff * mu - inst.backhaul_power * self.active as f64)
    }

    /// Smooth objective value.
    fn objective(&self, x: &[f64]) -> f64 {
        let inst = self.sub.inst;
        let d = inst.dims;
        let (psi, phi) = (inst.prices.psi, inst.prices.phi);
        let epi = self.epi_terms(x);
        let mut v: f64 = epi
            .iter()
            .enumerate()
            .map(|(i, (g, _))| psi * x[i] + phi * g)
            .sum();
        if let SubproblemMode::Consensus { z, dual } = self.sub.mode {
            let e = self.cloud_residual(x).unwrap();
            let g_e = dual.gamma[cloud_row(d)];
            v += g_e * (e + inst.backhaul_power * self.active as f64) + 0.5 * dual.rho * e * e;
            for p in &self.layout.pairs {
                let i = d.pair(p.n, p.k);
                let r = x[p.t] - z.x[i];
                v += dual.gamma[slack_row(d, p.n, p.k)] * x[p.t] + 0.5 * dual.rho * r * r;
            }
        }
        v
    }

    /// Values of all constraint functions (each must be < 0), or `None`
    /// outside the barrier domain.
    fn constraint_values(&self, x: &[f64]) -> Option<Vec<f64>> {
        let inst = self.sub.inst;
        let d = inst.dims;
        let mut out = Vec::with_capacity(self.m);
        for (i, (g, _)) in self.epi_terms(x).iter().enumerate() {
            out.push(g - x[i]);
            out.push(-g - x[i]);
        }
        for k in 0..d.n_users {
            let lambda = inst.arrival[k];
            let mu = x[self.layout.mu + k];
            let r = x[self.layout.r + k];
            let gap_mu = mu.cbrt() - lambda;
            let gap_r = r - lambda;
            if !(gap_mu > 0.0 && gap_r > 0.0) {
                return None;
            }
            out.push(-gap_mu);
            out.push(-gap_r);
            out.push(1.0 / gap_mu + 1.0 / gap_r - inst.delay_bound[k]);
            out.push(r - self.rate_bound(x, k).0);
        }
        for p in &self.layout.pairs {
            let w = &x[p.w..p.w + 2 * d.n_antennas];
            out.push(w.iter().map(|v| v * v).sum::<f64>() - x[p.t]);
        }
        if let SubproblemMode::FixedTopology { .. } = self.sub.mode {
            for ((g, _), slot) in self.epi_terms(x).iter().take(self.layout.epi.len() - 1).zip(&self.layout.epi) {
                let n = slot.expect("RRH slack");
                out.push(g + inst.harvested_rrh[n] - inst.max_power[n]);
            }
        }
        if out.iter().all(|v| *v < 0.0 && v.is_finite()) {
            Some(out)
        } else {
            None
        }
    }

    fn barrier_value(&self, x: &[f64], t: f64) -> Option<f64> {
        let cons = self.constraint_values(x)?;
        Some(t * self.objective(x) - cons.iter().map(|f| (-f).ln()).sum::<f64>())
    }

    /// Gradient and Newton matrix of `t·F₀ − Σ log(−f_i)`.
    fn derivatives(&self, x: &[f64], t: f64) -> (Vec<f64>, NewtonMatrix) {
        let inst = self.sub.inst;
        let d = inst.dims;
        let lay = &self.layout;
        let n_blocks = d.n_users + 1;
        let mut grad = vec![0.0; lay.n];
        let mut h = NewtonMatrix {
            blocks: (0..n_blocks).map(|b| DMatrix::zeros(lay.block_len(b), lay.block_len(b))).collect(),
            low_rank: Vec::new(),
        };
        let (psi, phi) = (inst.prices.psi, inst.prices.phi);

        // Objective.
        let epi = self.epi_terms(x);
        for (i, (_, g)) in epi.iter().enumerate() {
            grad[i] += t * psi;
            for &(j, v) in g {
                grad[j] += t * phi * v;
            }
        }
        if let SubproblemMode::Consensus { z, dual } = self.sub.mode {
            let pe = lay.pe.unwrap();
            let e = self.cloud_residual(x).unwrap();
            let g_e = dual.gamma[cloud_row(d)];
            let kc = inst.compute_coeff;
            grad[pe] += t * (g_e + dual.rho * e);
            let mut idx = vec![pe];
            let mut coef = vec![1.0];
            for k in 0..d.n_users {
                grad[lay.mu + k] += t * (-kc * g_e - dual.rho * kc * e);
                idx.push(lay.mu + k);
                coef.push(-kc);
            }
            let glob = &mut h.blocks[0];
            for (a, &i) in idx.iter().enumerate() {
                for (b, &j) in idx.iter().enumerate() {
                    glob[(i, j)] += t * dual.rho * coef[a] * coef[b];
                }
            }
            for p in &lay.pairs {
                let i = d.pair(p.n, p.k);
                grad[p.t] += t * (dual.gamma[slack_row(d, p.n, p.k)] + dual.rho * (x[p.t] - z.x[i]));
                let b = p.k + 1;
                let loc = p.t - lay.block_start(b);
                h.blocks[b][(loc, loc)] += t * dual.rho;
            }
        }

        // Linear constraints with sparse gradients.
        let linear = |f: f64, g: &[(usize, f64)], grad: &mut Vec<f64>, h: &mut NewtonMatrix| {
            let inv = 1.0 / (-f);
            for &(j, v) in g {
                grad[j] += v * inv;
            }
            let b0 = lay.block_of(g[0].0);
            if g.iter().all(|&(j, _)| lay.block_of(j) == b0) {
                let s = lay.block_start(b0);
                for &(i, vi) in g {
                    for &(j, vj) in g {
                        h.blocks[b0][(i - s, j - s)] += vi * vj * inv * inv;
                    }
                }
            } else {
                let mut u = DVector::zeros(lay.n);
                for &(j, v) in g {
                    u[j] += v * inv;
                }
                h.low_rank.push(u);
            }
        };
        for (i, (g, gg)) in epi.iter().enumerate() {
            for sign in [1.0, -1.0] {
                let f = sign * g - x[i];
                let mut sparse: Vec<(usize, f64)> = gg.iter().map(|&(j, v)| (j, sign * v)).collect();
                sparse.push((i, -1.0));
                linear(f, &sparse, &mut grad, &mut h);
            }
        }
        if let SubproblemMode::FixedTopology { .. } = self.sub.mode {
            for (i, rrh) in lay.epi.iter().enumerate() {
                if let Some(n) = rrh {
                    let f = epi[i].0 + inst.harvested_rrh[*n] - inst.max_power[*n];
                    linear(f, &epi[i].1, &mut grad, &mut h);
                }
            }
        }

        // Delay and stability, per user in the global block.
        for k in 0..d.n_users {
            let lambda = inst.arrival[k];
            let (im, ir) = (lay.mu + k, lay.r + k);
            let mu = x[im];
            let cb = mu.cbrt();
            let a = cb - lambda;
            let a1 = cb / (3.0 * mu);
            let a2 = -2.0 * cb / (9.0 * mu * mu);
            let b = x[ir] - lambda;
            let glob = &mut h.blocks[0];
            // Stability: f = −a (μ), f = −b (r).
            grad[im] -= a1 / a;
            glob[(im, im)] += a1 * a1 / (a * a) - a2 / a;
            grad[ir] -= 1.0 / b;
            glob[(ir, ir)] += 1.0 / (b * b);
            // Delay: f = 1/a + 1/b − τ.
            let f = 1.0 / a + 1.0 / b - inst.delay_bound[k];
            let inv = 1.0 / (-f);
            let fm = -a1 / (a * a);
            let fmm = 2.0 * a1 * a1 / (a * a * a) - a2 / (a * a);
            let fr = -1.0 / (b * b);
            let frr = 2.0 / (b * b * b);
            grad[im] += fm * inv;
            grad[ir] += fr * inv;
            glob[(im, im)] += fm * fm * inv * inv + fmm * inv;
            glob[(ir, ir)] += fr * fr * inv * inv + frr * inv;
            glob[(im, ir)] += fm * fr * inv * inv;
            glob[(ir, im)] += fm * fr * inv * inv;
        }

        // Power cones, inside user blocks.
        let l2 = 2 * d.n_antennas;
        for p in &lay.pairs {
            let b = p.k + 1;
            let s = lay.block_start(b);
            let w = &x[p.w..p.w + l2];
            let f = w.iter().map(|v| v * v).sum::<f64>() - x[p.t];
            let inv = 1.0 / (-f);
            let blk = &mut h.blocks[b];
            let ti = p.t - s;
            grad[p.t] -= inv;
            blk[(ti, ti)] += inv * inv;
            for (a, &wa) in w.iter().enumerate() {
                let ia = p.w + a - s;
                grad[p.w + a] += 2.0 * wa * inv;
                blk[(ia, ti)] -= 2.0 * wa * inv * inv;
                blk[(ti, ia)] -= 2.0 * wa * inv * inv;
                blk[(ia, ia)] += 2.0 * inv;
                for (c, &wc) in w.iter().enumerate() {
                    blk[(ia, p.w + c - s)] += 4.0 * wa * wc * inv * inv;
                }
            }
        }

        // Rate bounds: rank-one coupling across users plus per-user
        // curvature of the interference term.
        let beta = inst.rate_scale;
        for k in 0..d.n_users {
            let term = &self.rates[k];
            let (bound, z) = self.rate_bound(x, k);
            let f = x[lay.r + k] - bound;
            let inv = 1.0 / (-f);
            let mut u = DVector::zeros(lay.n);
            u[lay.r + k] = 1.0;
            for j in 0..d.n_users {
                let (ws, wl) = lay.user_w[j];
                for c in 0..wl {
                    let mut g = beta * term.c4 * 2.0 * (z[j].0 * term.re[j][c] + z[j].1 * term.im[j][c]);
                    if j == k {
                        g -= beta * term.lin[c];
                    }
                    u[ws + c] = g;
                }
                if term.c4 > 0.0 && wl > 0 {
                    let scale = 2.0 * beta * term.c4 * inv;
                    let b = j + 1;
                    let off = ws - lay.block_start(b);
                    let blk = &mut h.blocks[b];
                    for a in 0..wl {
                        for c in 0..wl {
                            blk[(off + a, off + c)] +=
                                scale * (term.re[j][a] * term.re[j][c] + term.im[j][a] * term.im[j][c]);
                        }
                    }
                }
            }
            for (gi, ui) in grad.iter_mut().zip(u.iter()) {
                *gi += ui * inv;
            }
            u *= inv;
            h.low_rank.push(u);
        }
        (grad, h)
    }
}

impl NewtonMatrix {
    fn apply(&self, layout: &Layout, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(v.len());
        for (b, blk) in self.blocks.iter().enumerate() {
            let s = layout.block_start(b);
            let len = blk.nrows();
            let seg = blk * v.rows(s, len);
            out.rows_mut(s, len).copy_from(&seg);
        }
        for u in &self.low_rank {
            out.axpy(u.dot(v), u, 1.0);
        }
        out
    }

    #[cfg(test)]
    fn dense(&self, layout: &Layout) -> DMatrix<f64> {
        let n = layout.n;
        let mut m = DMatrix::zeros(n, n);
        for (b, blk) in self.blocks.iter().enumerate() {
            let s = layout.block_start(b);
            m.view_mut((s, s), (blk.nrows(), blk.ncols())).copy_from(blk);
        }
        for u in &self.low_rank {
            m += u * u.transpose();
        }
        m
    }
}

fn cholesky(mut m: DMatrix<f64>) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let scale = (0..m.nrows()).map(|i| m[(i, i)].abs()).fold(0.0, f64::max).max(1e-300);
    let mut ridge = 0.0;
    for _ in 0..8 {
        if let Some(c) = m.clone().cholesky() {
            return Some(c);
        }
        let next = if ridge == 0.0 { 1e-14 * scale } else { ridge * 100.0 };
        for i in 0..m.nrows() {
            m[(i, i)] += next - ridge;
        }
        ridge = next;
    }
    None
}

/// Factored Newton matrix.
struct Factored<'l> {
    layout: &'l Layout,
    blocks: Vec<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    low_rank: Vec<DVector<f64>>,
    /// `D⁻¹U`.
    y: Vec<DVector<f64>>,
    cap: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
}

impl<'l> Factored<'l> {
    fn new(layout: &'l Layout, m: NewtonMatrix) -> Option<Self> {
        let blocks = m.blocks.into_iter().map(cholesky).collect::<Option<Vec<_>>>()?;
        let mut f = Self {
            layout,
            blocks,
            low_rank: m.low_rank,
            y: Vec::new(),
            cap: None,
        };
        let y: Vec<DVector<f64>> = f.low_rank.iter().map(|u| f.solve_diag(u)).collect();
        let r = y.len();
        if r > 0 {
            let mut c = DMatrix::identity(r, r);
            for i in 0..r {
                for j in 0..r {
                    c[(i, j)] += f.low_rank[i].dot(&y[j]);
                }
            }
            f.cap = Some(cholesky(c)?);
        }
        f.y = y;
        Some(f)
    }

    fn solve_diag(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(v.len());
        for (b, ch) in self.blocks.iter().enumerate() {
            let s = self.layout.block_start(b);
            let len = self.layout.block_len(b);
            let seg = ch.solve(&v.rows(s, len).into_owned());
            out.rows_mut(s, len).copy_from(&seg);
        }
        out
    }

    fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut x = self.solve_diag(v);
        if let Some(cap) = &self.cap {
            let proj = DVector::from_iterator(self.low_rank.len(), self.low_rank.iter().map(|u| u.dot(&x)));
            let coef = cap.solve(&proj);
            for (yi, c) in self.y.iter().zip(coef.iter()) {
                x.axpy(-c, yi, 1.0);
            }
        }
        x
    }
}

impl ConvexSubproblem<'_> {
    fn warm_vector(&self, layout: &Layout, warm: &YBlock) -> Result<Vec<f64>> {
        let inst = self.inst;
        let d = inst.dims;
        let unit3 = RATE_UNIT_BPS.powi(3);
        let problem_rates = |w: &Beamformers| -> Vec<f64> {
            (0..d.n_users)
                .map(|k| inst.rate_scale * self.coeffs.bound_nats(k, w, self.channel))
                .collect()
        };
        let masked = |w: &Beamformers| -> Beamformers {
            let mut out = w.clone();
            for k in 0..d.n_users {
                for n in 0..d.n_rrh {
                    if layout.pair_of[d.pair(n, k)].is_none() {
                        out.block_mut(k, n).iter_mut().for_each(|c| *c = num_complex::Complex64::new(0.0, 0.0));
                    }
                }
            }
            out
        };
        let caps_ok = |w: &Beamformers| -> bool {
            match self.mode {
                SubproblemMode::Consensus { .. } => true,
                SubproblemMode::FixedTopology { .. } => layout.epi.iter().flatten().all(|&n| {
                    let used: f64 = (0..d.n_users).map(|k| w.block_norm_sqr(k, n)).sum();
                    inst.amp[n] * used < inst.max_power[n] * (1.0 - 1e-9)
                }),
            }
        };
        let rates_ok = |rates: &[f64]| -> Vec<usize> {
            (0..d.n_users)
                .filter(|&k| !(rates[k] - inst.arrival[k] > 1.01 / inst.delay_bound[k]))
                .collect()
        };

        // Beamformer: warm start, else blend toward the anchor.
        let anchor = masked(self.anchor);
        let mut w = masked(&warm.w);
        let mut theta = 0.0;
        loop {
            let rates = problem_rates(&w);
            let failing = rates_ok(&rates);
            if failing.is_empty() && caps_ok(&w) && w.is_finite() {
                break;
            }
            if theta >= 1.0 {
                return Err(Error::Infeasible {
                    users: if failing.is_empty() { (0..d.n_users).collect() } else { failing },
                });
            }
            theta = if theta == 0.0 { 0.5 } else if theta > 0.99 { 1.0 } else { 0.5 * (1.0 + theta) };
            let mut blend = masked(&warm.w);
            blend.scale(1.0 - theta);
            for k in 0..d.n_users {
                for (dst, a) in blend.user_mut(k).iter_mut().zip(anchor.user(k)) {
                    *dst += a * theta;
                }
            }
            w = blend;
        }
        let rates = problem_rates(&w);

        let mut x = vec![0.0; layout.n];
        for k in 0..d.n_users {
            let lambda = inst.arrival[k];
            let tau = inst.delay_bound[k];
            let r_max = rates[k];
            // Keep a warm rate unless it sits on (or past) either bound.
            let mut r = (warm.rates[k] / RATE_UNIT_BPS).min(lambda + (1.0 - 1e-6) * (r_max - lambda));
            if !(r - lambda > 1.0 / tau) {
                r = lambda + 0.995 * (r_max - lambda);
            }
            let room = tau - 1.0 / (r - lambda);
            let mut mu = warm.mu_cubed[k] / unit3;
            let gap = mu.cbrt() - lambda;
            if !(gap > 0.0 && 1.0 / gap < room * (1.0 - 1e-9)) {
                mu = (lambda + 2.0 / room).powi(3);
            }
            x[layout.mu + k] = mu;
            x[layout.r + k] = r;
        }
        for p in &layout.pairs {
            let blk = w.block(p.k, p.n);
            for (l, c) in blk.iter().enumerate() {
                x[p.w + 2 * l] = c.re;
                x[p.w + 2 * l + 1] = c.im;
            }
            let used = w.block_norm_sqr(p.k, p.n);
            let wt = warm.t[d.pair(p.n, p.k)];
            x[p.t] = match self.mode {
                SubproblemMode::Consensus { .. } if wt > used * (1.0 + 1e-12) + 1e-300 => wt,
                SubproblemMode::Consensus { .. } => used * (1.0 + 1e-3) + 1e-9,
                SubproblemMode::FixedTopology { .. } => used,
            };
        }
        if let SubproblemMode::FixedTopology { .. } = self.mode {
            // Split each RRH's remaining headroom between its pairs.
            for &n in layout.epi.iter().flatten() {
                let ts: Vec<usize> = (0..d.n_users)
                    .filter_map(|k| layout.pair_of[d.pair(n, k)].map(|p| layout.pairs[p].t))
                    .collect();
                let used: f64 = ts.iter().map(|&i| x[i]).sum();
                let head = (inst.max_power[n] / inst.amp[n] - used).max(0.0);
                let extra = (0.5 * head / ts.len().max(1) as f64).min(1e-3 * (used + 1e-6));
                for &i in &ts {
                    x[i] += extra.max(1e-12);
                }
            }
        }
        if let Some(pe) = layout.pe {
            x[pe] = warm.p_cloud;
        }
        let problem = Problem::new(*self);
        for (i, (g, _)) in problem.epi_terms(&x).iter().enumerate() {
            x[i] = g.abs() + 1e-4 * (1.0 + g.abs());
        }
        if problem.constraint_values(&x).is_none() {
            return Err(Error::Solver("could not build a strictly feasible start".into()));
        }
        Ok(x)
    }

    fn extract(&self, layout: &Layout, x: &[f64]) -> YBlock {
        let inst = self.inst;
        let d = inst.dims;
        let unit3 = RATE_UNIT_BPS.powi(3);
        let mut w = Beamformers::zeros(d);
        let mut t = vec![0.0; d.n_pairs()];
        for p in &layout.pairs {
            for (l, c) in w.block_mut(p.k, p.n).iter_mut().enumerate() {
                *c = num_complex::Complex64::new(x[p.w + 2 * l], x[p.w + 2 * l + 1]);
            }
            t[d.pair(p.n, p.k)] = x[p.t];
        }
        let mu_cubed: Vec<f64> = (0..d.n_users).map(|k| x[layout.mu + k] * unit3).collect();
        let rates: Vec<f64> = (0..d.n_users).map(|k| x[layout.r + k] * RATE_UNIT_BPS).collect();
        let (p, p_cloud) = match self.mode {
            SubproblemMode::Consensus { z, dual } => {
                let p = (0..d.n_rrh)
                    .map(|n| {
                        let c = inst.amp[n] * (0..d.n_users).map(|k| z.x[d.pair(n, k)]).sum::<f64>();
                        prox_trade_cost(inst, inst.harvested_rrh[n], dual.gamma[n], dual.rho, c)
                    })
                    .collect();
                (p, x[layout.pe.unwrap()])
            }
            SubproblemMode::FixedTopology { b, .. } => {
                let p = (0..d.n_rrh)
                    .map(|n| inst.amp[n] * (0..d.n_users).map(|k| t[d.pair(n, k)]).sum::<f64>())
                    .collect();
                let active = b.iter().filter(|&&v| v).count() as f64;
                let pc = inst.compute_coeff * (0..d.n_users).map(|k| x[layout.mu + k]).sum::<f64>()
                    + inst.backhaul_power * active;
                (p, pc)
            }
        };
        YBlock {
            p,
            p_cloud,
            mu_cubed,
            t,
            rates,
            w,
        }
    }
}

/// Minimizes the `y`-subproblem to duality gap `tol`, warm-started from
/// `warm` (repaired toward the anchor when it is not strictly feasible).
pub fn solve_y(sub: &ConvexSubproblem, warm: &YBlock, tol: f64) -> Result<YBlock> {
    Ok(solve_y_detailed(sub, warm, tol, BarrierSettings::default())?.y)
}

pub fn solve_y_detailed(
    sub: &ConvexSubproblem,
    warm: &YBlock,
    tol: f64,
    settings: BarrierSettings,
) -> Result<YSolution> {
    let problem = Problem::new(*sub);
    let mut x = sub.warm_vector(&problem.layout, warm)?;
    let m = problem.m as f64;
    let f0 = problem.objective(&x);
    let mut t = (m / (1e-2 * (1.0 + f0.abs()))).max(1e-3);
    let mut steps = 0;
    let mut centered = true;
    loop {
        let (n, done) = center(&problem, &mut x, t, &settings)?;
        steps += n;
        centered &= done;
        if m / t <= tol {
            break;
        }
        t = (t * settings.growth).min(m / tol);
    }
    Ok(YSolution {
        y: sub.extract(&problem.layout, &x),
        gap: m / t,
        newton_steps: steps,
        centered,
    })
}

/// Newton centering at barrier weight `t`; returns the step count and
/// whether the stage finished before the step limit.
fn center(problem: &Problem, x: &mut Vec<f64>, t: f64, settings: &BarrierSettings) -> Result<(usize, bool)> {
    let lay = &problem.layout;
    let mut phi = problem
        .barrier_value(x, t)
        .ok_or_else(|| Error::Solver("iterate left the barrier domain".into()))?;
    for step in 0..settings.max_newton {
        let (grad, hess) = problem.derivatives(x, t);
        let g = DVector::from_column_slice(&grad);
        let applied = NewtonMatrix {
            blocks: hess.blocks.clone(),
            low_rank: hess.low_rank.clone(),
        };
        let fac = Factored::new(lay, hess).ok_or_else(|| Error::Solver("Newton matrix is singular".into()))?;
        let mut dir = fac.solve(&(-&g));
        let resid = -&g - applied.apply(lay, &dir);
        dir += fac.solve(&resid);
        let decrement = -g.dot(&dir);
        if !decrement.is_finite() {
            return Err(Error::Solver("non-finite Newton direction".into()));
        }
        if decrement <= 2.0 * settings.newton_tol {
            return Ok((step, true));
        }
        let mut s = 1.0;
        let mut accepted = false;
        while s > 1e-14 {
            let trial: Vec<f64> = x.iter().zip(dir.iter()).map(|(a, b)| a + s * b).collect();
            if let Some(v) = problem.barrier_value(&trial, t) {
                if v <= phi - 0.25 * s * decrement {
                    *x = trial;
                    phi = v;
                    accepted = true;
                    break;
                }
            }
            s *= 0.5;
        }
        if !accepted {
            // No further progress at machine precision.
            return Ok((step, true));
        }
    }
    Ok((settings.max_newton, false))
}
