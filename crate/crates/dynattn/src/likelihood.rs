//! Likelihood heads: parameter links, log-probabilities, means, and
//! survival/exceedance functions for ZINB, NB, Poisson, and Gaussian
//! observation models.
//!
//! Plain `f64` routines serve forecasting and evaluation; the `graph`
//! submodule builds the same negative log-likelihoods on a [`Tape`] so the
//! training loss is differentiable end to end.
//!
//! NB uses the mean-dispersion parameterization, Var = mu + mu^2/theta.

use crate::diff::{sigmoid, softplus, Tape, Var};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

/// Zero-inflation probability is kept strictly inside (0,1).
pub const PI_EPS: f64 = 1e-7;
/// Floor applied to mu and theta inside log expressions.
pub const RATE_FLOOR: f64 = 1e-8;

/// Observation families supported by the final parametric head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LikelihoodFamily {
    Zinb,
    Nb,
    Poisson,
    Gaussian,
}

impl Default for LikelihoodFamily {
    fn default() -> Self {
        LikelihoodFamily::Zinb
    }
}

/// Per-horizon distribution parameters after the link functions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DistParams {
    Zinb { mu: f64, pi: f64, theta: f64 },
    Nb { mu: f64, theta: f64 },
    Poisson { lambda: f64 },
    Gaussian { mean: f64, sd: f64 },
}

fn clamp_pi(pi: f64) -> f64 {
    pi.clamp(PI_EPS, 1.0 - PI_EPS)
}

impl DistParams {
    /// Map raw head outputs to valid parameters for the family.
    /// `raw_theta` is the single global dispersion logit.
    pub fn from_raw(family: LikelihoodFamily, raw1: f64, raw2: f64, raw_theta: f64) -> DistParams {
        match family {
            LikelihoodFamily::Zinb => DistParams::Zinb {
                mu: softplus(raw1),
                pi: clamp_pi(sigmoid(raw2)),
                theta: softplus(raw_theta).max(RATE_FLOOR),
            },
            LikelihoodFamily::Nb => DistParams::Nb {
                mu: softplus(raw1),
                theta: softplus(raw_theta).max(RATE_FLOOR),
            },
            LikelihoodFamily::Poisson => DistParams::Poisson {
                lambda: softplus(raw1),
            },
            LikelihoodFamily::Gaussian => DistParams::Gaussian {
                mean: raw1,
                sd: softplus(raw2).max(RATE_FLOOR),
            },
        }
    }

    /// Expected count: (1-pi)*mu for ZINB, the mean otherwise.
    pub fn expected_count(&self) -> f64 {
        match *self {
            DistParams::Zinb { mu, pi, .. } => (1.0 - pi) * mu,
            DistParams::Nb { mu, .. } => mu,
            DistParams::Poisson { lambda } => lambda,
            DistParams::Gaussian { mean, .. } => mean,
        }
    }

    /// Log probability (mass for count families, density for Gaussian).
    pub fn log_prob(&self, y: f64) -> Result<f64> {
        match *self {
            DistParams::Zinb { mu, pi, theta } => zinb_log_pmf(y, mu, theta, pi),
            DistParams::Nb { mu, theta } => nb_log_pmf(y, mu, theta),
            DistParams::Poisson { lambda } => poisson_log_pmf(y, lambda),
            DistParams::Gaussian { mean, sd } => gaussian_log_pdf(y, mean, sd),
        }
    }

    /// P(Y >= tau). tau = 0 returns 1 for count families.
    pub fn exceedance(&self, tau: f64) -> Result<f64> {
        match *self {
            DistParams::Zinb { mu, pi, theta } => {
                if tau <= 0.0 {
                    return Ok(1.0);
                }
                Ok(((1.0 - pi) * nb_survival(tau as u64, mu, theta)?).clamp(0.0, 1.0))
            }
            DistParams::Nb { mu, theta } => {
                if tau <= 0.0 {
                    return Ok(1.0);
                }
                nb_survival(tau as u64, mu, theta)
            }
            DistParams::Poisson { lambda } => {
                if tau <= 0.0 {
                    return Ok(1.0);
                }
                poisson_survival(tau as u64, lambda)
            }
            DistParams::Gaussian { mean, sd } => {
                if sd <= 0.0 {
                    return Err(Error::Numeric("gaussian sd must be positive".into()));
                }
                Ok(0.5 * erfc((tau - mean) / (sd * std::f64::consts::SQRT_2)))
            }
        }
    }
}

fn check_count(y: f64) -> Result<u64> {
    if !y.is_finite() || y < 0.0 || y.fract() != 0.0 {
        return Err(Error::Numeric(format!("invalid count observation {y}")));
    }
    Ok(y as u64)
}

/// Log pmf of NB(mu, theta) in the mean-dispersion parameterization:
/// log[ Gamma(y+theta)/(Gamma(theta) y!) (theta/(theta+mu))^theta
/// (mu/(theta+mu))^y ]. mu = 0 degenerates to a point mass at 0.
pub fn nb_log_pmf(y: f64, mu: f64, theta: f64) -> Result<f64> {
    let y = check_count(y)?;
    if theta <= 0.0 || !theta.is_finite() {
        return Err(Error::Numeric(format!("theta must be positive, got {theta}")));
    }
    if mu < 0.0 || !mu.is_finite() {
        return Err(Error::Numeric(format!("mu must be non-negative, got {mu}")));
    }
    if mu == 0.0 {
        return Ok(if y == 0 { 0.0 } else { f64::NEG_INFINITY });
    }
    let mu = mu.max(RATE_FLOOR);
    let yf = y as f64;
    let ln_ratio = (theta + mu).ln();
    Ok(ln_gamma(yf + theta) - ln_gamma(theta) - ln_gamma(yf + 1.0)
        + theta * (theta.ln() - ln_ratio)
        + yf * (mu.ln() - ln_ratio))
}

/// Log pmf of ZINB: zero inflation mixes only at y = 0.
pub fn zinb_log_pmf(y: f64, mu: f64, theta: f64, pi: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&pi) {
        return Err(Error::Numeric(format!("pi must be in [0,1], got {pi}")));
    }
    let pi = clamp_pi(pi);
    let nb = nb_log_pmf(y, mu, theta)?;
    if y == 0.0 {
        // pi + (1-pi) e^{nb0}; nb0 <= 0 so the sum is in (0, 1].
        Ok((pi + (1.0 - pi) * nb.exp()).ln())
    } else {
        Ok((1.0 - pi).ln() + nb)
    }
}

/// Poisson log pmf with softplus-linked rate semantics; lambda = 0
/// degenerates to a point mass at 0.
pub fn poisson_log_pmf(y: f64, lambda: f64) -> Result<f64> {
    let yu = check_count(y)?;
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::Numeric(format!("lambda must be non-negative, got {lambda}")));
    }
    if lambda == 0.0 {
        return Ok(if yu == 0 { 0.0 } else { f64::NEG_INFINITY });
    }
    let lambda = lambda.max(RATE_FLOOR);
    Ok(y * lambda.ln() - lambda - ln_gamma(y + 1.0))
}

pub fn gaussian_log_pdf(y: f64, mean: f64, sd: f64) -> Result<f64> {
    if sd <= 0.0 || !sd.is_finite() {
        return Err(Error::Numeric(format!("sd must be positive, got {sd}")));
    }
    let z = (y - mean) / sd;
    Ok(-0.5 * z * z - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln())
}

/// P(Y >= tau) for NB via log-space summation of the pmf below tau.
/// This is the primary route; [`nb_survival_beta`] is the cross-check.
pub fn nb_survival(tau: u64, mu: f64, theta: f64) -> Result<f64> {
    if tau == 0 {
        return Ok(1.0);
    }
    let mut below = 0.0;
    for y in 0..tau {
        below += nb_log_pmf(y as f64, mu, theta)?.exp();
    }
    Ok((1.0 - below).clamp(0.0, 1.0))
}

/// P(Y >= tau) for NB through the regularized incomplete beta function:
/// I_{mu/(mu+theta)}(tau, theta).
pub fn nb_survival_beta(tau: u64, mu: f64, theta: f64) -> Result<f64> {
    if theta <= 0.0 || mu < 0.0 {
        return Err(Error::Numeric("invalid NB parameters".into()));
    }
    if tau == 0 {
        return Ok(1.0);
    }
    if mu == 0.0 {
        return Ok(0.0);
    }
    Ok(beta_reg(tau as f64, theta, mu / (mu + theta)).clamp(0.0, 1.0))
}

pub fn poisson_survival(tau: u64, lambda: f64) -> Result<f64> {
    if tau == 0 {
        return Ok(1.0);
    }
    let mut below = 0.0;
    for y in 0..tau {
        below += poisson_log_pmf(y as f64, lambda)?.exp();
    }
    Ok((1.0 - below).clamp(0.0, 1.0))
}

/// Tape-side negative log-likelihood builders used by the training loss.
pub mod graph {
    use super::*;

    /// min(max(v, lo), hi) built from clamp primitives; subgradient 0 on the
    /// clamped regions.
    pub fn clamp(tape: &mut Tape, v: Var, lo: f64, hi: f64) -> Result<Var> {
        let shifted = tape.add_const(v, -lo)?;
        let lower = tape.clamp_min0(shifted)?;
        let lower = tape.add_const(lower, lo)?;
        let gap = tape.scale(lower, -1.0)?;
        let gap = tape.add_const(gap, hi)?;
        let gap = tape.clamp_min0(gap)?;
        let neg = tape.scale(gap, -1.0)?;
        tape.add_const(neg, hi)
    }

    /// max(v, lo).
    pub fn floor(tape: &mut Tape, v: Var, lo: f64) -> Result<Var> {
        let shifted = tape.add_const(v, -lo)?;
        let clamped = tape.clamp_min0(shifted)?;
        tape.add_const(clamped, lo)
    }

    /// NB log pmf for a fixed observed count; `mu` and `theta` are scalar
    /// tape variables (already floored by the caller or here).
    pub fn nb_log_pmf(tape: &mut Tape, y: f64, mu: Var, theta: Var) -> Result<Var> {
        let mu = floor(tape, mu, RATE_FLOOR)?;
        let theta = floor(tape, theta, RATE_FLOOR)?;
        let sum = tape.add(theta, mu)?;
        let ln_sum = tape.ln(sum)?;
        let ln_theta = tape.ln(theta)?;
        let t1 = tape.sub(ln_theta, ln_sum)?;
        let t1 = tape.mul(theta, t1)?;
        let mut out = t1;
        if y > 0.0 {
            let ln_mu = tape.ln(mu)?;
            let t2 = tape.sub(ln_mu, ln_sum)?;
            let t2 = tape.scale(t2, y)?;
            out = tape.add(out, t2)?;
            let y_theta = tape.add_const(theta, y)?;
            let lg_yt = tape.ln_gamma(y_theta)?;
            let lg_t = tape.ln_gamma(theta)?;
            let gamma_part = tape.sub(lg_yt, lg_t)?;
            let gamma_part = tape.add_const(gamma_part, -ln_gamma(y + 1.0))?;
            out = tape.add(out, gamma_part)?;
        }
        Ok(out)
    }

    /// Negative log-likelihood of one ZINB observation.
    pub fn zinb_nll(tape: &mut Tape, y: f64, mu: Var, pi: Var, theta: Var) -> Result<Var> {
        let pi = clamp(tape, pi, PI_EPS, 1.0 - PI_EPS)?;
        let one_minus_pi = tape.scale(pi, -1.0)?;
        let one_minus_pi = tape.add_const(one_minus_pi, 1.0)?;
        let nll = if y == 0.0 {
            let nb0 = nb_log_pmf(tape, 0.0, mu, theta)?;
            let p_nb0 = tape.exp(nb0)?;
            let mixture = tape.mul(one_minus_pi, p_nb0)?;
            let mixture = tape.add(pi, mixture)?;
            tape.ln(mixture)?
        } else {
            let ln_1mpi = tape.ln(one_minus_pi)?;
            let nb = nb_log_pmf(tape, y, mu, theta)?;
            tape.add(ln_1mpi, nb)?
        };
        tape.scale(nll, -1.0)
    }

    pub fn nb_nll(tape: &mut Tape, y: f64, mu: Var, theta: Var) -> Result<Var> {
        let lp = nb_log_pmf(tape, y, mu, theta)?;
        tape.scale(lp, -1.0)
    }

    pub fn poisson_nll(tape: &mut Tape, y: f64, lambda: Var) -> Result<Var> {
        let lambda = floor(tape, lambda, RATE_FLOOR)?;
        let ln_l = tape.ln(lambda)?;
        let t = tape.scale(ln_l, y)?;
        let t = tape.sub(t, lambda)?;
        let lp = tape.add_const(t, -ln_gamma(y + 1.0))?;
        tape.scale(lp, -1.0)
    }

    pub fn gaussian_nll(tape: &mut Tape, y: f64, mean: Var, sd: Var) -> Result<Var> {
        let sd = floor(tape, sd, RATE_FLOOR)?;
        let yv = tape.scalar_const(y)?;
        let diff = tape.sub(yv, mean)?;
        let z = tape.div(diff, sd)?;
        let z2 = tape.mul(z, z)?;
        let half_z2 = tape.scale(z2, 0.5)?;
        let ln_sd = tape.ln(sd)?;
        let t = tape.add(half_z2, ln_sd)?;
        tape.add_const(t, 0.5 * (2.0 * std::f64::consts::PI).ln())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MU_GRID: [f64; 4] = [0.1, 1.0, 10.0, 100.0];
    const THETA_GRID: [f64; 4] = [0.5, 1.0, 5.0, 50.0];
    const PI_GRID: [f64; 3] = [0.1, 0.4, 0.8];
    const TAU_GRID: [u64; 4] = [1, 5, 25, 100];

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn nb_zero_at_unit_params_is_half() {
        close(nb_log_pmf(0.0, 1.0, 1.0).unwrap(), 0.5f64.ln(), 1e-12);
    }

    #[test]
    fn nb_zero_mean_is_point_mass() {
        assert_eq!(nb_log_pmf(0.0, 0.0, 1.0).unwrap(), 0.0);
        assert_eq!(nb_log_pmf(3.0, 0.0, 1.0).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn nb_matches_closed_form_rational() {
        // y=2, mu=2, theta=5: pmf = 15 * (5/7)^5 * (2/7)^2 = 187500/823543
        close(
            nb_log_pmf(2.0, 2.0, 5.0).unwrap(),
            (187500.0f64 / 823543.0).ln(),
            1e-12,
        );
    }

    #[test]
    fn nb_rejects_bad_domains() {
        assert!(nb_log_pmf(-1.0, 1.0, 1.0).is_err());
        assert!(nb_log_pmf(1.0, 1.0, 0.0).is_err());
        assert!(nb_log_pmf(1.0, 1.0, -2.0).is_err());
    }

    #[test]
    fn zinb_zero_mixes_inflation_and_nb_mass() {
        close(
            zinb_log_pmf(0.0, 1.0, 1.0, 0.5).unwrap(),
            0.75f64.ln(),
            1e-9,
        );
        close(zinb_log_pmf(0.0, 1.0, 1.0, 0.5).unwrap(), -0.287682, 1e-6);
    }

    #[test]
    fn zinb_reduces_to_nb_when_pi_vanishes() {
        for y in [0.0, 1.0, 4.0] {
            close(
                zinb_log_pmf(y, 2.0, 1.5, 0.0).unwrap(),
                nb_log_pmf(y, 2.0, 1.5).unwrap(),
                1e-5,
            );
        }
    }

    /// Adaptive summation oracle for count-family normalization.
    fn total_mass(log_pmf: impl Fn(f64) -> f64, mean: f64) -> f64 {
        let mut total = 0.0;
        let mut y = 0.0;
        loop {
            let lp = log_pmf(y);
            total += lp.exp();
            if (y > 4.0 * mean + 50.0 && lp < -40.0) || y > 1e6 {
                return total;
            }
            y += 1.0;
        }
    }

    #[test]
    fn zinb_mass_sums_to_one_on_grid() {
        for mu in MU_GRID {
            for theta in THETA_GRID {
                for pi in PI_GRID {
                    let mass = total_mass(|y| zinb_log_pmf(y, mu, theta, pi).unwrap(), mu);
                    close(mass, 1.0, 1e-6);
                }
            }
        }
    }

    #[test]
    fn nb_mass_sums_to_one_on_grid() {
        for mu in MU_GRID {
            for theta in THETA_GRID {
                let mass = total_mass(|y| nb_log_pmf(y, mu, theta).unwrap(), mu);
                close(mass, 1.0, 1e-6);
            }
        }
    }

    #[test]
    fn poisson_mass_sums_to_one() {
        for lambda in [0.3, 1.0, 7.5, 40.0] {
            let mass = total_mass(|y| poisson_log_pmf(y, lambda).unwrap(), lambda);
            close(mass, 1.0, 1e-8);
        }
    }

    #[test]
    fn poisson_zero_at_unit_rate() {
        close(poisson_log_pmf(0.0, 1.0).unwrap(), -1.0, 1e-12);
    }

    #[test]
    fn gaussian_peak_density() {
        for sd in [0.5, 1.0, 3.0] {
            close(
                gaussian_log_pdf(2.0, 2.0, sd).unwrap(),
                -(sd * (2.0 * std::f64::consts::PI).sqrt()).ln(),
                1e-12,
            );
        }
    }

    #[test]
    fn survival_at_zero_threshold_is_one() {
        assert_eq!(nb_survival(0, 3.0, 2.0).unwrap(), 1.0);
        assert_eq!(nb_survival_beta(0, 3.0, 2.0).unwrap(), 1.0);
    }

    #[test]
    fn survival_tau_one_unit_params() {
        close(nb_survival(1, 1.0, 1.0).unwrap(), 0.5, 1e-12);
    }

    #[test]
    fn survival_dual_route_agreement() {
        for mu in MU_GRID {
            for theta in THETA_GRID {
                for tau in TAU_GRID {
                    let a = nb_survival(tau, mu, theta).unwrap();
                    let b = nb_survival_beta(tau, mu, theta).unwrap();
                    assert!(
                        (a - b).abs() < 1e-8,
                        "mu={mu} theta={theta} tau={tau}: {a} vs {b}"
                    );
                }
            }
        }
    }

    #[test]
    fn exceedance_zinb_example() {
        let p = DistParams::Zinb {
            mu: 1.0,
            pi: 0.5,
            theta: 1.0,
        };
        close(p.exceedance(1.0).unwrap(), 0.25, 1e-12);
        close(p.exceedance(0.0).unwrap(), 1.0, 1e-15);
    }

    #[test]
    fn exceedance_vanishes_in_full_inflation_limit() {
        let p = DistParams::from_raw(LikelihoodFamily::Zinb, 5.0, 100.0, 0.0);
        for tau in [1.0, 5.0, 25.0] {
            assert!(p.exceedance(tau).unwrap() < 1e-6);
        }
    }

    #[test]
    fn expected_count_examples() {
        let p = DistParams::Zinb {
            mu: 4.0,
            pi: 0.25,
            theta: 1.0,
        };
        close(p.expected_count(), 3.0, 1e-15);
        let p = DistParams::Zinb {
            mu: 7.3,
            pi: 0.0,
            theta: 1.0,
        };
        close(p.expected_count(), 7.3, 1e-15);
    }

    #[test]
    fn exceedance_monotone_on_grid() {
        for mu in MU_GRID {
            for theta in THETA_GRID {
                for pi in PI_GRID {
                    let p = |mu, pi| DistParams::Zinb { mu, pi, theta };
                    // non-increasing in tau
                    let mut prev = 1.0;
                    for tau in [1.0, 2.0, 5.0, 25.0] {
                        let e = p(mu, pi).exceedance(tau).unwrap();
                        assert!(e <= prev + 1e-12);
                        prev = e;
                    }
                    // non-increasing in pi, non-decreasing in mu
                    let e1 = p(mu, pi).exceedance(5.0).unwrap();
                    let e2 = p(mu, (pi + 0.1).min(0.99)).exceedance(5.0).unwrap();
                    assert!(e2 <= e1 + 1e-12);
                    let e3 = p(mu * 2.0, pi).exceedance(5.0).unwrap();
                    assert!(e3 + 1e-12 >= e1);
                }
            }
        }
    }

    #[test]
    fn links_produce_valid_parameters() {
        for raw in [-30.0, -1.0, 0.0, 2.5, 40.0] {
            if let DistParams::Zinb { mu, pi, theta } =
                DistParams::from_raw(LikelihoodFamily::Zinb, raw, raw, raw)
            {
                assert!(mu >= 0.0);
                assert!(pi > 0.0 && pi < 1.0);
                assert!(theta > 0.0);
            } else {
                unreachable!()
            }
        }
        // all-zero raw outputs: mu = ln 2, pi = 0.5, theta = ln 2
        if let DistParams::Zinb { mu, pi, theta } =
            DistParams::from_raw(LikelihoodFamily::Zinb, 0.0, 0.0, 0.0)
        {
            close(mu, std::f64::consts::LN_2, 1e-12);
            close(pi, 0.5, 1e-12);
            close(theta, std::f64::consts::LN_2, 1e-12);
        }
    }

    #[test]
    fn graph_nll_matches_plain_evaluation() {
        for y in [0.0, 1.0, 6.0] {
            for (mu, pi, theta) in [(0.8, 0.3, 1.2), (4.0, 0.6, 0.7), (12.0, 0.1, 5.0)] {
                let mut t = Tape::new();
                let muv = t.param(1, 1, vec![mu]).unwrap();
                let piv = t.param(1, 1, vec![pi]).unwrap();
                let thv = t.param(1, 1, vec![theta]).unwrap();
                let nll = graph::zinb_nll(&mut t, y, muv, piv, thv).unwrap();
                close(
                    t.scalar(nll),
                    -zinb_log_pmf(y, mu, theta, pi).unwrap(),
                    1e-12,
                );
            }
        }
    }

    #[test]
    fn graph_nll_gradients_match_finite_differences() {
        let eval = |y: f64, p: &[f64]| -> f64 {
            let mut t = Tape::new();
            let mu = t.param(1, 1, vec![p[0]]).unwrap();
            let pi = t.param(1, 1, vec![p[1]]).unwrap();
            let th = t.param(1, 1, vec![p[2]]).unwrap();
            let nll = graph::zinb_nll(&mut t, y, mu, pi, th).unwrap();
            t.scalar(nll)
        };
        for y in [0.0, 3.0] {
            let p0 = [1.7, 0.35, 2.1];
            let mut t = Tape::new();
            let mu = t.param(1, 1, vec![p0[0]]).unwrap();
            let pi = t.param(1, 1, vec![p0[1]]).unwrap();
            let th = t.param(1, 1, vec![p0[2]]).unwrap();
            let nll = graph::zinb_nll(&mut t, y, mu, pi, th).unwrap();
            let grads = t.backward(nll).unwrap();
            let analytic = [
                grads.wrt(&t, mu)[0],
                grads.wrt(&t, pi)[0],
                grads.wrt(&t, th)[0],
            ];
            let h = 1e-6;
            for i in 0..3 {
                let mut plus = p0;
                plus[i] += h;
                let mut minus = p0;
                minus[i] -= h;
                let fd = (eval(y, &plus) - eval(y, &minus)) / (2.0 * h);
                let denom = fd.abs().max(analytic[i].abs()).max(1.0);
                assert!(
                    (analytic[i] - fd).abs() <= 1e-8 + 1e-4 * denom,
                    "y={y} param {i}: {} vs {fd}",
                    analytic[i]
                );
            }
        }
    }
}
