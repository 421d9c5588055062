//! MSE/rate machinery of the weighted-MMSE method: receivers, MSE weights
//! and the concave quadratic lower bound on each user's rate.
//!
//! Everything here uses the natural logarithm, for which
//! `max_{u,v} [1 + ln v − v·e(w, u)] = ln(1 + SINR)` holds exactly with
//! `v = 1/e`. Conversion to bits/s (`B / ln 2`) is applied only by
//! [`surrogate_rate`] and [`SurrogateCoeffs::rate_scale`].

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::model::{inner, Beamformers, ChannelState, StackedVectors};
use crate::qos;

/// Expansion coefficients of the rate bound around a beamformer `w⁰`.
///
/// `c2` row `k` holds the entries of the row vector
/// `c_{2,k} = 2·v_k·conj(u_k)·h_kᴴ`, so `c_{2,k}·w_k = 2·v_k·conj(u_k)·h_kᴴw_k`.
/// The bound's linear term is `Re(c_{2,k}·w_k) = ½(c_{2,k}w_k + w_kᴴc_{3,k})`
/// with `c_{3,k} = c_{2,k}ᴴ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateCoeffs {
    pub u: Vec<Complex64>,
    pub v: Vec<f64>,
    pub c1: Vec<f64>,
    pub c2: StackedVectors,
    pub c4: Vec<f64>,
}

impl SurrogateCoeffs {
    /// Factor turning the natural-log bound into bits/s.
    pub fn rate_scale(bandwidth_hz: f64) -> f64 {
        bandwidth_hz / std::f64::consts::LN_2
    }

    /// Bound value in nats (per unit bandwidth) for user `k`.
    pub fn bound_nats(&self, k: usize, w: &Beamformers, h: &ChannelState) -> f64 {
        let linear = self
            .c2
            .user(k)
            .iter()
            .zip(w.user(k))
            .map(|(c, x)| c * x)
            .sum::<Complex64>()
            .re;
        let received: f64 = qos::stream_powers(k, w, h).iter().sum();
        self.c1[k] + linear - self.c4[k] * received
    }
}

fn check_dims(w: &Beamformers, h: &ChannelState, noise: &[f64]) -> Result<()> {
    if w.dims() != h.dims() || noise.len() != h.dims().n_users {
        return Err(Error::Domain("beamformer, channel and noise dimensions differ".into()));
    }
    Ok(())
}

/// `e_k = 1 − 2·Re(conj(u_k)·h_kᴴw_k) + |u_k|²(σ_k² + Σ_j |h_kᴴw_j|²)`.
pub fn mse(k: usize, w: &Beamformers, u: Complex64, h: &ChannelState, noise: f64) -> Result<f64> {
    if w.dims() != h.dims() || k >= h.dims().n_users {
        return Err(Error::Domain("mse: dimension mismatch".into()));
    }
    let signal = h.gain(k, w, k);
    let received: f64 = qos::stream_powers(k, w, h).iter().sum();
    Ok(1.0 - 2.0 * (u.conj() * signal).re + u.norm_sqr() * (noise + received))
}

/// MMSE receivers `u_k = h_kᴴw_k / (σ_k² + Σ_j |h_kᴴw_j|²)`.
pub fn update_receivers(w: &Beamformers, h: &ChannelState, noise: &[f64]) -> Result<Vec<Complex64>> {
    check_dims(w, h, noise)?;
    Ok((0..h.dims().n_users)
        .map(|k| {
            let received: f64 = qos::stream_powers(k, w, h).iter().sum();
            h.gain(k, w, k) / (noise[k] + received)
        })
        .collect())
}

/// MSE weights `v_k = 1/e_k(w, u_k)`. A user with no useful signal gets
/// `v_k = 1`.
pub fn update_weights(
    w: &Beamformers,
    u: &[Complex64],
    h: &ChannelState,
    noise: &[f64],
) -> Result<Vec<f64>> {
    check_dims(w, h, noise)?;
    (0..h.dims().n_users)
        .map(|k| {
            let e = mse(k, w, u[k], h, noise[k])?;
            if e >= 1.0 - 1e-15 || u[k] == Complex64::new(0.0, 0.0) {
                Ok(1.0)
            } else if !(e > 0.0) {
                Err(Error::Domain(format!("non-positive MSE {e} for user {k}")))
            } else {
                Ok(1.0 / e)
            }
        })
        .collect()
}

/// Second closed form of the weight, valid only at the MMSE receiver:
/// `1 / (1 − w_kᴴh_k·u_k)`.
pub fn weight_closed_form(k: usize, w: &Beamformers, u: Complex64, h: &ChannelState) -> f64 {
    let signal = inner(w.user(k), h.h.user(k));
    1.0 / (1.0 - signal * u).re
}

/// `1 + ln v − v·e_k(w, u)`, the quantity maximized over `(u, v)`.
pub fn weighted_mse_objective(
    k: usize,
    w: &Beamformers,
    u: Complex64,
    v: f64,
    h: &ChannelState,
    noise: f64,
) -> Result<f64> {
    Ok(1.0 + v.ln() - v * mse(k, w, u, h, noise)?)
}

/// Builds the rate-bound coefficients at the expansion point `w`.
pub fn build_coeffs(w: &Beamformers, h: &ChannelState, noise: &[f64]) -> Result<SurrogateCoeffs> {
    let u = update_receivers(w, h, noise)?;
    let v = update_weights(w, &u, h, noise)?;
    Ok(coeffs_from(&u, &v, h, noise))
}

/// Assembles `c₁, c₂, c₄` from given receivers and weights.
pub fn coeffs_from(
    u: &[Complex64],
    v: &[f64],
    h: &ChannelState,
    noise: &[f64],
) -> SurrogateCoeffs {
    let dims = h.dims();
    let mut c2 = StackedVectors::zeros(dims);
    let mut c1 = Vec::with_capacity(dims.n_users);
    let mut c4 = Vec::with_capacity(dims.n_users);
    for k in 0..dims.n_users {
        let (uk, vk) = (u[k], v[k]);
        c1.push(1.0 + vk.ln() - vk * (1.0 + noise[k] * uk.norm_sqr()));
        c4.push(vk * uk.norm_sqr());
        let scale = 2.0 * vk * uk.conj();
        for (dst, hk) in c2.user_mut(k).iter_mut().zip(h.h.user(k)) {
            *dst = scale * hk.conj();
        }
    }
    SurrogateCoeffs {
        u: u.to_vec(),
        v: v.to_vec(),
        c1,
        c2,
        c4,
    }
}

/// Concave lower bound on user `k`'s rate, bits/s; tight at the expansion
/// point of `coeffs`.
pub fn surrogate_rate(
    k: usize,
    w: &Beamformers,
    coeffs: &SurrogateCoeffs,
    h: &ChannelState,
    bandwidth_hz: f64,
) -> f64 {
    SurrogateCoeffs::rate_scale(bandwidth_hz) * coeffs.bound_nats(k, w, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Dims;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(h: f64, w: f64) -> (Beamformers, ChannelState) {
        let dims = Dims::new(1, 1, 1);
        let hh = StackedVectors::from_rows(dims, vec![vec![Complex64::new(h, 0.0)]]).unwrap();
        let ww = StackedVectors::from_rows(dims, vec![vec![Complex64::new(w, 0.0)]]).unwrap();
        (ww, ChannelState::new(hh).unwrap())
    }

    pub(crate) fn random_instance(rng: &mut ChaCha8Rng, dims: Dims) -> (Beamformers, ChannelState, Vec<f64>) {
        let mut draw = |scale: f64| {
            let rows = (0..dims.n_users)
                .map(|_| {
                    (0..dims.stack_len())
                        .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * scale)
                        .collect()
                })
                .collect();
            StackedVectors::from_rows(dims, rows).unwrap()
        };
        let h = ChannelState::new(draw(1.0)).unwrap();
        let w = draw(0.7);
        let noise = (0..dims.n_users).map(|_| rng.gen_range(0.05..2.0)).collect();
        (w, h, noise)
    }

    #[test]
    fn scalar_chain() {
        let (w, h) = scalar(1.0, 1.0);
        assert_eq!(mse(0, &w, Complex64::new(0.0, 0.0), &h, 1.0).unwrap(), 1.0);
        assert!((mse(0, &w, Complex64::new(0.5, 0.0), &h, 1.0).unwrap() - 0.5).abs() < 1e-15);
        let u = update_receivers(&w, &h, &[1.0]).unwrap();
        assert!((u[0] - Complex64::new(0.5, 0.0)).norm() < 1e-15);
        let v = update_weights(&w, &u, &h, &[1.0]).unwrap();
        assert!((v[0] - 2.0).abs() < 1e-14);
        let c = build_coeffs(&w, &h, &[1.0]).unwrap();
        assert!((c.c4[0] - 0.5).abs() < 1e-14);
        assert!((c.v[0] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn zero_beamformer_is_degenerate() {
        let (w, h) = scalar(1.0, 0.0);
        let u = update_receivers(&w, &h, &[1.0]).unwrap();
        assert_eq!(u[0], Complex64::new(0.0, 0.0));
        let v = update_weights(&w, &u, &h, &[1.0]).unwrap();
        assert_eq!(v[0], 1.0);
        let c = build_coeffs(&w, &h, &[1.0]).unwrap();
        assert_eq!(surrogate_rate(0, &w, &c, &h, 1e6), 0.0);
    }

    #[test]
    fn mmse_identities_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..200 {
            let dims = Dims::new(1 + trial % 3, 1 + trial % 4, 1 + trial % 2);
            let (w, h, noise) = random_instance(&mut rng, dims);
            let u = update_receivers(&w, &h, &noise).unwrap();
            let v = update_weights(&w, &u, &h, &noise).unwrap();
            for k in 0..dims.n_users {
                let e = mse(k, &w, u[k], &h, noise[k]).unwrap();
                let s = qos::sinr(k, &w, &h, noise[k]).unwrap();
                assert!((e - 1.0 / (1.0 + s)).abs() < 1e-12);
                assert!((v[k] - weight_closed_form(k, &w, u[k], &h)).abs() <= 1e-10 * v[k]);
                // Receiver optimality against random perturbations.
                for _ in 0..5 {
                    let d = Complex64::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1));
                    assert!(mse(k, &w, u[k] + d, &h, noise[k]).unwrap() >= e - 1e-14);
                }
            }
        }
    }

    #[test]
    fn coefficients_are_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dims = Dims::new(2, 3, 2);
        let (w, h, noise) = random_instance(&mut rng, dims);
        let c = build_coeffs(&w, &h, &noise).unwrap();
        let again = coeffs_from(&c.u, &c.v, &h, &noise);
        assert_eq!(c, again);
        for k in 0..dims.n_users {
            assert!(c.v[k] > 0.0 && c.c4[k] >= 0.0);
            let row_norm: f64 = c.c2.user(k).iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
            let h_norm: f64 = h.h.user(k).iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
            assert!((row_norm - 2.0 * c.v[k] * c.u[k].norm() * h_norm).abs() < 1e-12 * row_norm.max(1.0));
        }
    }

    #[test]
    fn alternating_updates_never_decrease_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dims = Dims::new(2, 2, 2);
        let (w, h, noise) = random_instance(&mut rng, dims);
        for k in 0..dims.n_users {
            let mut u = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let mut v = rng.gen_range(0.2..3.0);
            let mut prev = weighted_mse_objective(k, &w, u, v, &h, noise[k]).unwrap();
            for _ in 0..3 {
                u = update_receivers(&w, &h, &noise).unwrap()[k];
                let after_u = weighted_mse_objective(k, &w, u, v, &h, noise[k]).unwrap();
                assert!(after_u >= prev - 1e-12);
                v = 1.0 / mse(k, &w, u, &h, noise[k]).unwrap();
                let after_v = weighted_mse_objective(k, &w, u, v, &h, noise[k]).unwrap();
                assert!(after_v >= after_u - 1e-12);
                prev = after_v;
            }
            let s = qos::sinr(k, &w, &h, noise[k]).unwrap();
            assert!((prev - s.ln_1p()).abs() < 1e-10);
        }
    }

    #[test]
    fn grid_search_never_beats_closed_form_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let dims = Dims::new(2, 2, 1);
        let (w, h, noise) = random_instance(&mut rng, dims);
        let u_star = update_receivers(&w, &h, &noise).unwrap();
        for k in 0..dims.n_users {
            let best = s_ln(k, &w, &h, noise[k]);
            for i in 0..21 {
                for j in 0..21 {
                    for vi in 1..30 {
                        let u = u_star[k] + Complex64::new(-0.5 + 0.05 * i as f64, -0.5 + 0.05 * j as f64);
                        let v = 0.1 * vi as f64;
                        let val = weighted_mse_objective(k, &w, u, v, &h, noise[k]).unwrap();
                        assert!(val <= best + 1e-12);
                    }
                }
            }
        }
    }

    fn s_ln(k: usize, w: &Beamformers, h: &ChannelState, noise: f64) -> f64 {
        qos::sinr(k, w, h, noise).unwrap().ln_1p()
    }

    #[test]
    fn bound_is_concave_along_lines() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let dims = Dims::new(2, 2, 2);
        let (w0, h, noise) = random_instance(&mut rng, dims);
        let c = build_coeffs(&w0, &h, &noise).unwrap();
        for _ in 0..50 {
            let (a, _, _) = random_instance(&mut rng, dims);
            let (b, _, _) = random_instance(&mut rng, dims);
            let mut mid = a.clone();
            for k in 0..dims.n_users {
                for (m, y) in mid.user_mut(k).iter_mut().zip(b.user(k)) {
                    *m = (*m + y) * 0.5;
                }
            }
            for k in 0..dims.n_users {
                let fm = c.bound_nats(k, &mid, &h);
                let avg = 0.5 * (c.bound_nats(k, &a, &h) + c.bound_nats(k, &b, &h));
                assert!(fm >= avg - 1e-12);
            }
        }
    }

    #[test]
    fn bound_is_tight_and_below_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dims = Dims::new(3, 2, 2);
        let (w0, h, noise) = random_instance(&mut rng, dims);
        let c = build_coeffs(&w0, &h, &noise).unwrap();
        let bw = 2e6;
        for k in 0..dims.n_users {
            let r = qos::shannon_rate(k, &w0, &h, noise[k], bw).unwrap();
            assert!((surrogate_rate(k, &w0, &c, &h, bw) - r).abs() <= 1e-9 * r);
        }
        for _ in 0..200 {
            let (w, _, _) = random_instance(&mut rng, dims);
            for k in 0..dims.n_users {
                let r = qos::shannon_rate(k, &w, &h, noise[k], bw).unwrap();
                assert!(surrogate_rate(k, &w, &c, &h, bw) <= r + 1e-9 * r.max(1.0));
            }
        }
    }
}
