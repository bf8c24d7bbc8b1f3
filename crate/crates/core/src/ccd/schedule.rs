//! Noise schedule and the closed-form pieces of the prior-shifted chain.
//!
//! The forward process noises a class prototype toward the prior:
//!
//! ```text
//! y_t = sqrt(abar_t) * y0 + sqrt(1 - abar_t) * eps + (1 - sqrt(abar_t)) * f
//! ```
//!
//! where `f` is the frozen classifier's probability output for the instance.
//! Subtracting `f` turns this into the standard Gaussian chain on `y - f`,
//! which is where the reverse-step coefficients below come from.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Beta/alpha tables for a noising chain of fixed length.
#[derive(Debug, Clone)]
pub struct Schedule<S: Scalar> {
    beta: Vec<S>,
    alpha: Vec<S>,
    alpha_bar: Vec<S>,
}

impl<S: Scalar> Schedule<S> {
    /// Linear beta schedule. Requires `0 < beta_start <= beta_end < 1` and
    /// at least one step.
    pub fn linear(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_steps == 0 {
            return Err(Error::config("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::config(format!(
                "invalid beta range [{beta_start}, {beta_end}]; need 0 < start <= end < 1"
            )));
        }
        let mut beta = Vec::with_capacity(t_steps);
        for i in 0..t_steps {
            let frac = if t_steps == 1 {
                0.0
            } else {
                i as f64 / (t_steps - 1) as f64
            };
            beta.push(S::from_f64_lossy(beta_start + frac * (beta_end - beta_start)));
        }
        Self::from_betas(beta)
    }

    /// Builds the alpha tables from explicit betas.
    pub fn from_betas(beta: Vec<S>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::config("schedule needs at least one step"));
        }
        if beta.iter().any(|&b| b <= S::zero() || b >= S::one()) {
            return Err(Error::config("every beta must lie in (0, 1)"));
        }
        let alpha: Vec<S> = beta.iter().map(|&b| S::one() - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut prod = S::one();
        for &a in &alpha {
            prod = prod * a;
            alpha_bar.push(prod);
        }
        Ok(Schedule {
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn t_steps(&self) -> usize {
        self.beta.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= 1 && t <= self.t_steps() {
            Ok(())
        } else {
            Err(Error::contract(format!(
                "timestep {t} outside [1, {}]",
                self.t_steps()
            )))
        }
    }

    /// `beta_t` for `t` in `[1, T]`.
    pub fn beta(&self, t: usize) -> S {
        self.beta[t - 1]
    }

    /// `alpha_t = 1 - beta_t` for `t` in `[1, T]`.
    pub fn alpha(&self, t: usize) -> S {
        self.alpha[t - 1]
    }

    /// Cumulative product `abar_t`; `abar_0` is defined as 1.
    pub fn alpha_bar(&self, t: usize) -> S {
        if t == 0 {
            S::one()
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Mean coefficients `(g0, g1, g2)` for `y0`, `y_t`, `f` and the
    /// posterior variance `beta_hat_t` of one reverse step.
    pub fn reverse_coefficients(&self, t: usize) -> Result<ReverseCoefficients<S>> {
        self.check_t(t)?;
        let beta_t = self.beta(t);
        let alpha_t = self.alpha(t);
        let abar_t = self.alpha_bar(t);
        let abar_prev = self.alpha_bar(t - 1);
        let one = S::one();
        let denom = one - abar_t;
        let g0 = beta_t * abar_prev.sqrt() / denom;
        let g1 = (one - abar_prev) * alpha_t.sqrt() / denom;
        let g2 = one + (abar_t.sqrt() - one) * (alpha_t.sqrt() + abar_prev.sqrt()) / denom;
        let beta_hat = beta_t * (one - abar_prev) / denom;
        Ok(ReverseCoefficients {
            y0: g0,
            y_t: g1,
            prior: g2,
            beta_hat,
        })
    }
}

/// Coefficients of the reverse-step mean plus the step variance.
#[derive(Debug, Clone, Copy)]
pub struct ReverseCoefficients<S: Scalar> {
    pub y0: S,
    pub y_t: S,
    pub prior: S,
    pub beta_hat: S,
}

fn check_same_len<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, op: &'static str) -> Result<()> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(Error::Dimension {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

/// The forward marginal at a given `abar`, exposed separately so the
/// endpoint conventions (`abar = 1` returns `y0`, `abar -> 0` returns
/// `eps + f`) can be exercised directly.
pub fn diffuse_closed_form<S: Scalar>(
    y0: &Tensor<S>,
    prior: &Tensor<S>,
    alpha_bar: S,
    eps: &Tensor<S>,
) -> Result<Tensor<S>> {
    check_same_len(y0, prior, "diffuse")?;
    check_same_len(y0, eps, "diffuse")?;
    let root = alpha_bar.sqrt();
    let noise_scale = (S::one() - alpha_bar).sqrt();
    let data = y0
        .data()
        .iter()
        .zip(prior.data())
        .zip(eps.data())
        .map(|((&y, &f), &e)| root * y + noise_scale * e + (S::one() - root) * f)
        .collect();
    Tensor::new(y0.shape().to_vec(), data)
}

/// `y_t` from `y0` at timestep `t` in `[1, T]`.
pub fn forward_diffuse<S: Scalar>(
    schedule: &Schedule<S>,
    t: usize,
    y0: &Tensor<S>,
    prior: &Tensor<S>,
    eps: &Tensor<S>,
) -> Result<Tensor<S>> {
    schedule.check_t(t)?;
    diffuse_closed_form(y0, prior, schedule.alpha_bar(t), eps)
}

/// One step of the sequential forward chain, `y_{t-1} -> y_t`. Composing
/// these reproduces the closed-form marginal; the marginal-consistency test
/// checks exactly that.
pub fn forward_chain_step<S: Scalar>(
    schedule: &Schedule<S>,
    t: usize,
    y_prev: &Tensor<S>,
    prior: &Tensor<S>,
    eps: &Tensor<S>,
) -> Result<Tensor<S>> {
    schedule.check_t(t)?;
    let root_a = schedule.alpha(t).sqrt();
    let root_b = schedule.beta(t).sqrt();
    let data = y_prev
        .data()
        .iter()
        .zip(prior.data())
        .zip(eps.data())
        .map(|((&y, &f), &e)| root_a * y + (S::one() - root_a) * f + root_b * e)
        .collect();
    Tensor::new(y_prev.shape().to_vec(), data)
}

/// Inverts the forward marginal for a noise estimate:
/// `y0_hat = (y_t - sqrt(1-abar)*eps_hat - (1-sqrt(abar))*f) / sqrt(abar)`.
pub fn reconstruct_y0<S: Scalar>(
    schedule: &Schedule<S>,
    t: usize,
    y_t: &Tensor<S>,
    eps_hat: &Tensor<S>,
    prior: &Tensor<S>,
) -> Result<Tensor<S>> {
    schedule.check_t(t)?;
    let abar = schedule.alpha_bar(t);
    if abar <= S::zero() {
        return Err(Error::contract("alpha_bar must stay positive"));
    }
    reconstruct_with_alpha_bar(y_t, eps_hat, prior, abar)
}

pub fn reconstruct_with_alpha_bar<S: Scalar>(
    y_t: &Tensor<S>,
    eps_hat: &Tensor<S>,
    prior: &Tensor<S>,
    alpha_bar: S,
) -> Result<Tensor<S>> {
    check_same_len(y_t, eps_hat, "reconstruct_y0")?;
    check_same_len(y_t, prior, "reconstruct_y0")?;
    let root = alpha_bar.sqrt();
    let noise_scale = (S::one() - alpha_bar).sqrt();
    let data = y_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .zip(prior.data())
        .map(|((&y, &e), &f)| (y - noise_scale * e - (S::one() - root) * f) / root)
        .collect();
    Tensor::new(y_t.shape().to_vec(), data)
}

/// One reverse transition `y_t -> y_{t-1}`.
///
/// The mean interpolates the reconstructed prototype, the current state and
/// the prior with coefficients that sum to one; `z` is a standard normal
/// draw, forced to zero at `t = 1`.
pub fn reverse_step<S: Scalar>(
    schedule: &Schedule<S>,
    t: usize,
    y_t: &Tensor<S>,
    eps_hat: &Tensor<S>,
    prior: &Tensor<S>,
    z: &Tensor<S>,
) -> Result<Tensor<S>> {
    let coefs = schedule.reverse_coefficients(t)?;
    let y0_hat = reconstruct_y0(schedule, t, y_t, eps_hat, prior)?;
    let sigma = coefs.beta_hat.sqrt();
    let data = y0_hat
        .data()
        .iter()
        .zip(y_t.data())
        .zip(prior.data())
        .zip(z.data())
        .map(|(((&y0v, &ytv), &fv), &zv)| {
            let mean = coefs.y0 * y0v + coefs.y_t * ytv + coefs.prior * fv;
            if t == 1 {
                mean
            } else {
                mean + sigma * zv
            }
        })
        .collect();
    Tensor::new(y_t.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    type T = Tensor<f64>;

    fn vec_t(v: &[f64]) -> T {
        T::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn single_step_schedule() {
        let s = Schedule::<f64>::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar(1), 0.5);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn constant_beta_closed_form() {
        let b = 0.1;
        let s = Schedule::<f64>::linear(8, b, b).unwrap();
        for t in 1..=8 {
            let expected = (1.0 - b).powi(t as i32);
            assert!((s.alpha_bar(t) - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn alpha_bar_matches_log_domain_product() {
        // Independent cumulative product through the log domain.
        let s = Schedule::<f64>::linear(100, 1e-4, 0.02).unwrap();
        let mut log_sum = 0.0f64;
        for t in 1..=100 {
            log_sum += (1.0 - s.beta(t)).ln();
        }
        let expected = log_sum.exp();
        assert!(
            (s.alpha_bar(100) - expected).abs() < 1e-12,
            "{} vs {expected}",
            s.alpha_bar(100)
        );
    }

    #[test]
    fn alpha_bar_strictly_decreasing() {
        let s = Schedule::<f64>::linear(50, 1e-4, 0.05).unwrap();
        for t in 1..=50 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
    }

    #[test]
    fn invalid_ranges_rejected() {
        assert!(Schedule::<f64>::linear(10, 0.0, 0.1).is_err());
        assert!(Schedule::<f64>::linear(10, 0.2, 0.1).is_err());
        assert!(Schedule::<f64>::linear(10, 0.1, 1.0).is_err());
        assert!(Schedule::<f64>::linear(0, 0.1, 0.2).is_err());
    }

    #[test]
    fn diffuse_endpoints() {
        let y0 = vec_t(&[1.0, 0.0]);
        let f = vec_t(&[0.5, 0.5]);
        let eps = vec_t(&[0.25, -0.75]);
        // abar = 1: no noise, the prototype passes through.
        let y = diffuse_closed_form(&y0, &f, 1.0, &eps).unwrap();
        assert_eq!(y.data(), y0.data());
        // abar = 0: prior-centered terminal state eps + f.
        let y = diffuse_closed_form(&y0, &f, 0.0, &eps).unwrap();
        assert_eq!(y.data(), &[0.75, -0.25]);
    }

    #[test]
    fn diffuse_quarter_alpha_bar_hand_case() {
        // sqrt(abar) = 0.5: 0.5*[1,0] + 0.5*[0.5,0.5] = [0.75, 0.25].
        let y0 = vec_t(&[1.0, 0.0]);
        let f = vec_t(&[0.5, 0.5]);
        let eps = vec_t(&[0.0, 0.0]);
        let y = diffuse_closed_form(&y0, &f, 0.25, &eps).unwrap();
        assert_eq!(y.data(), &[0.75, 0.25]);
    }

    #[test]
    fn reconstruct_inverts_diffuse() {
        let s = Schedule::<f64>::linear(40, 1e-3, 0.04).unwrap();
        let y0 = vec_t(&[0.9, -0.2, 0.3]);
        let f = vec_t(&[0.2, 0.5, 0.3]);
        let eps = vec_t(&[0.4, -1.1, 0.7]);
        for t in [1, 17, 40] {
            let y_t = forward_diffuse(&s, t, &y0, &f, &eps).unwrap();
            let back = reconstruct_y0(&s, t, &y_t, &eps, &f).unwrap();
            assert!(back.max_abs_diff(&y0).unwrap() < 1e-10);
        }
    }

    #[test]
    fn reconstruct_quarter_alpha_bar_hand_case() {
        let y_t = vec_t(&[0.75, 0.25]);
        let f = vec_t(&[0.5, 0.5]);
        let eps = vec_t(&[0.0, 0.0]);
        let y0 = reconstruct_with_alpha_bar(&y_t, &eps, &f, 0.25).unwrap();
        assert_eq!(y0.data(), &[1.0, 0.0]);
    }

    #[test]
    fn reconstruct_identity_endpoint() {
        let y_t = vec_t(&[0.4, 0.6]);
        let f = vec_t(&[0.1, 0.9]);
        let eps = vec_t(&[0.0, 0.0]);
        let y0 = reconstruct_with_alpha_bar(&y_t, &eps, &f, 1.0).unwrap();
        assert_eq!(y0.data(), y_t.data());
    }

    #[test]
    fn reverse_coefficients_sum_to_one() {
        for (steps, lo, hi) in [(1, 0.3, 0.3), (10, 1e-4, 0.02), (100, 1e-4, 0.02), (250, 1e-3, 0.3)] {
            let s = Schedule::<f64>::linear(steps, lo, hi).unwrap();
            for t in 1..=steps {
                let c = s.reverse_coefficients(t).unwrap();
                let total: f64 = c.y0 + c.y_t + c.prior;
                assert!(
                    (total - 1.0).abs() < 1e-12,
                    "t={t}: coefficients sum to {total}"
                );
                assert!(c.beta_hat >= 0.0);
            }
        }
    }

    #[test]
    fn terminal_step_is_deterministic() {
        let s = Schedule::<f64>::linear(20, 1e-3, 0.05).unwrap();
        let y0 = vec_t(&[1.0, 0.0, 0.0]);
        let f = vec_t(&[0.2, 0.3, 0.5]);
        let eps = vec_t(&[0.9, -0.4, 0.1]);
        let y1 = forward_diffuse(&s, 1, &y0, &f, &eps).unwrap();
        // With the true noise and z = 0 the final step lands exactly on y0.
        let z = vec_t(&[5.0, 5.0, 5.0]);
        let out = reverse_step(&s, 1, &y1, &eps, &f, &z).unwrap();
        assert!(out.max_abs_diff(&y0).unwrap() < 1e-10);
    }

    #[test]
    fn timestep_bounds_enforced() {
        let s = Schedule::<f64>::linear(5, 0.01, 0.1).unwrap();
        let y = vec_t(&[1.0]);
        assert!(forward_diffuse(&s, 0, &y, &y, &y).is_err());
        assert!(forward_diffuse(&s, 6, &y, &y, &y).is_err());
        assert!(s.reverse_coefficients(0).is_err());
    }
}
