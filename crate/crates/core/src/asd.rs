//! Attack detection from aggregated counts.
//!
//! Items whose estimated count exceeds a noise threshold `xi` form the set
//! `A`. Without an attack their counts sum to about `n`; promoted targets
//! push the sum above `n`.

use serde::{Deserialize, Serialize};

use crate::domain::ProtocolParams;
use crate::error::{invalid, Result};
use crate::oracles::EstimateVector;
use crate::stats::{normal_cdf, normal_pdf, normal_quantile};

pub const DEFAULT_GAMMA_GRID: [f64; 10] = [0.80, 0.85, 0.90, 0.95, 0.975, 0.99, 0.995, 0.999, 0.9995, 0.9999];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AsdConfig {
    /// Error budget as a fraction of `n`.
    pub lambda: f64,
    /// Candidate confidence levels, strictly increasing.
    pub gamma_grid: Vec<f64>,
}

impl Default for AsdConfig {
    fn default() -> Self {
        Self { lambda: 0.02, gamma_grid: DEFAULT_GAMMA_GRID.to_vec() }
    }
}

impl AsdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(invalid(format!("lambda must be in (0, 1), got {}", self.lambda)));
        }
        if self.gamma_grid.is_empty() {
            return Err(invalid("gamma grid is empty"));
        }
        if self.gamma_grid.iter().any(|g| !(*g > 0.0 && *g < 1.0)) {
            return Err(invalid("gamma values must lie in (0, 1)"));
        }
        if self.gamma_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("gamma grid must be strictly increasing"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsdResult {
    pub attack_detected: bool,
    pub xi: f64,
    pub gamma: f64,
    /// Sum of counts above `xi`.
    #[serde(rename = "sum_A")]
    pub sum_a: f64,
    pub set_b_size: usize,
    /// `|B| * xi * (1 - gamma)` at the chosen gamma.
    pub err: f64,
    /// No grid point met `err < lambda * n`; the best one was used.
    pub constraint_saturated: bool,
    /// Every item was above `xi` at every gamma.
    pub degenerate: bool,
}

/// `xi(gamma) = Z * sigma_0` with `Z = Phi^-1((1 + gamma) / 2)`.
pub fn xi_threshold(gamma: f64, params: &ProtocolParams) -> Result<f64> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(invalid(format!("gamma must be in (0, 1), got {gamma}")));
    }
    Ok(normal_quantile((1.0 + gamma) / 2.0) * params.zero_freq_sigma())
}

/// The chosen confidence level with its threshold and low-count set size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaChoice {
    pub gamma: f64,
    pub xi: f64,
    pub set_b_size: usize,
    pub err: f64,
    pub saturated: bool,
    pub degenerate: bool,
}

/// Smallest grid gamma with `|B| * xi * (1 - gamma) < lambda * n`.
pub fn choose_gamma(counts: &[f64], params: &ProtocolParams, cfg: &AsdConfig) -> Result<GammaChoice> {
    cfg.validate()?;
    if counts.len() != params.d {
        return Err(invalid(format!("expected {} counts, got {}", params.d, counts.len())));
    }
    let budget = cfg.lambda * params.n as f64;
    let mut best: Option<GammaChoice> = None;
    let mut any_b = false;
    for &gamma in &cfg.gamma_grid {
        let xi = xi_threshold(gamma, params)?;
        let b = counts.iter().filter(|&&c| c <= xi).count();
        any_b |= b > 0;
        let err = b as f64 * xi * (1.0 - gamma);
        let c = GammaChoice { gamma, xi, set_b_size: b, err, saturated: false, degenerate: false };
        if err < budget {
            return Ok(GammaChoice { degenerate: b == 0 && !any_b, ..c });
        }
        if best.is_none_or(|x| err < x.err) {
            best = Some(c);
        }
    }
    let b = best.expect("grid is non-empty");
    Ok(GammaChoice { saturated: true, degenerate: !any_b, ..b })
}

/// Flags an attack when the counts above `xi` sum to more than `n`.
pub fn asd_detect(est: &EstimateVector, params: &ProtocolParams, cfg: &AsdConfig) -> Result<AsdResult> {
    let ch = choose_gamma(&est.counts, params, cfg)?;
    let sum_a: f64 = est.counts.iter().filter(|&&c| c > ch.xi).sum();
    Ok(AsdResult {
        attack_detected: sum_a > params.n as f64,
        xi: ch.xi,
        gamma: ch.gamma,
        sum_a,
        set_b_size: ch.set_b_size,
        err: ch.err,
        constraint_saturated: ch.saturated,
        degenerate: ch.degenerate,
    })
}

/// Gaussian reference for the mass that thresholding at `xi` removes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorReference {
    /// `sum_i E[C_i * 1(C_i <= xi)]` over all items.
    pub err: f64,
    /// Magnitude of the zero-frequency items' share, `n0 * sigma_0 * phi(Z)`.
    pub zero_item_term: f64,
}

/// Evaluates the Gaussian reference error for true frequencies `truth`.
pub fn true_error_reference(truth: &[f64], params: &ProtocolParams, gamma: f64) -> Result<ErrorReference> {
    let xi = xi_threshold(gamma, params)?;
    let n = params.n as f64;
    let mut err = 0.0;
    let mut zero = 0.0;
    for &f in truth {
        let mu = n * f;
        let sd = params.count_variance(f).max(0.0).sqrt();
        let z = (xi - mu) / sd;
        err += mu * normal_cdf(z) - sd * normal_pdf(z);
        if f == 0.0 {
            zero += sd * normal_pdf(z);
        }
    }
    Ok(ErrorReference { err, zero_item_term: zero })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Protocol;

    #[test]
    fn xi_example_oue() {
        let p = ProtocolParams::new(Protocol::Oue, 1.0, 1024, 10_000).unwrap();
        let q = 1.0 / (1f64.exp() + 1.0);
        let sigma = (1e4 * q * (1.0 - q)).sqrt() / (0.5 - q);
        assert!((sigma - 191.9).abs() < 0.1);
        let xi = xi_threshold(0.95, &p).unwrap();
        assert!((xi - 1.959_963_985 * sigma).abs() < 1e-6);
        assert!((xi - 376.2).abs() < 0.2);
        assert!(xi_threshold(1e-12, &p).unwrap() < 1e-6);
        assert!(xi_threshold(1.0, &p).is_err());
    }

    #[test]
    fn xi_increases_along_grid() {
        let p = ProtocolParams::new(Protocol::Grr, 0.5, 100, 1000).unwrap();
        let xs: Vec<f64> = DEFAULT_GAMMA_GRID.iter().map(|&g| xi_threshold(g, &p).unwrap()).collect();
        assert!(xs.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn err_matches_hand_computation() {
        // |B| = 100, xi = 300, gamma = 0.99 gives 300.
        let b = 100.0;
        assert!((b * 300.0 * (1.0 - 0.99) - 300.0f64).abs() < 1e-9);
    }

    #[test]
    fn loose_budget_takes_smallest_gamma() {
        let p = ProtocolParams::new(Protocol::Oue, 1.0, 50, 10_000).unwrap();
        let counts = vec![200.0; 50];
        let cfg = AsdConfig { lambda: 0.99, ..Default::default() };
        let c = choose_gamma(&counts, &p, &cfg).unwrap();
        assert_eq!(c.gamma, 0.80);
        assert!(!c.saturated);
    }

    #[test]
    fn quiet_counts_are_not_flagged() {
        let p = ProtocolParams::new(Protocol::Oue, 1.0, 50, 10_000).unwrap();
        let est = EstimateVector {
            protocol: p.protocol,
            epsilon: p.epsilon,
            d: 50,
            n: p.n,
            counts: vec![10.0; 50],
            freqs: vec![0.001; 50],
        };
        let r = asd_detect(&est, &p, &AsdConfig::default()).unwrap();
        assert_eq!(r.sum_a, 0.0);
        assert!(!r.attack_detected);
        assert_eq!(r.set_b_size, 50);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(AsdConfig { lambda: 0.0, ..Default::default() }.validate().is_err());
        assert!(AsdConfig { lambda: 0.1, gamma_grid: vec![0.9, 0.8] }.validate().is_err());
    }

    #[test]
    fn reference_zero_term_vanishes_without_zero_items_and_shrinks_with_gamma() {
        let p = ProtocolParams::new(Protocol::Oue, 1.0, 4, 100_000).unwrap();
        let r = true_error_reference(&[0.25; 4], &p, 0.95).unwrap();
        assert_eq!(r.zero_item_term, 0.0);
        let truth: Vec<f64> = (0..1000).map(|i| if i < 10 { 0.1 } else { 0.0 }).collect();
        let p = ProtocolParams::new(Protocol::Oue, 1.0, 1000, 100_000).unwrap();
        let lo = true_error_reference(&truth, &p, 0.9).unwrap().zero_item_term;
        let hi = true_error_reference(&truth, &p, 0.999).unwrap().zero_item_term;
        assert!(hi < lo);
    }
}
