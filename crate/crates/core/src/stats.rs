//! Small numeric helpers: normal distribution and binomial pmf.

use statrs::distribution::{Continuous, ContinuousCDF, Normal};
use statrs::function::gamma::ln_gamma;

fn std_normal() -> Normal {
    Normal::standard()
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    std_normal().inverse_cdf(p)
}

pub fn normal_cdf(x: f64) -> f64 {
    std_normal().cdf(x)
}

pub fn normal_pdf(x: f64) -> f64 {
    std_normal().pdf(x)
}

/// `Binomial(d, p)` pmf for `k = 0..=d`, computed in log space.
pub fn binomial_pmf(d: usize, p: f64) -> Vec<f64> {
    if p <= 0.0 {
        let mut v = vec![0.0; d + 1];
        v[0] = 1.0;
        return v;
    }
    if p >= 1.0 {
        let mut v = vec![0.0; d + 1];
        v[d] = 1.0;
        return v;
    }
    let (lp, lq) = (p.ln(), (1.0 - p).ln());
    let lnd = ln_gamma(d as f64 + 1.0);
    (0..=d)
        .map(|k| {
            let lc = lnd - ln_gamma(k as f64 + 1.0) - ln_gamma((d - k) as f64 + 1.0);
            (lc + k as f64 * lp + (d - k) as f64 * lq).exp()
        })
        .collect()
}
