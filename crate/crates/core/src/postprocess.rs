//! Consistency post-processing and recovery: Norm-Sub, Base-Cut,
//! Normalization, an LDPRecover-style projection, and robust segment
//! normalization (RSN).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::asd::xi_threshold;
use crate::domain::ProtocolParams;
use crate::error::{invalid, Error, Result};
use crate::oracles::EstimateVector;
use crate::stats::normal_quantile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecoveryMethod {
    NormSub,
    BaseCut,
    Normalization,
    Ldprecover,
    Rsn,
}

impl RecoveryMethod {
    pub const ALL: [RecoveryMethod; 5] = [
        RecoveryMethod::NormSub,
        RecoveryMethod::BaseCut,
        RecoveryMethod::Normalization,
        RecoveryMethod::Ldprecover,
        RecoveryMethod::Rsn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RecoveryMethod::NormSub => "norm-sub",
            RecoveryMethod::BaseCut => "base-cut",
            RecoveryMethod::Normalization => "normalization",
            RecoveryMethod::Ldprecover => "ldprecover",
            RecoveryMethod::Rsn => "rsn",
        }
    }
}

impl fmt::Display for RecoveryMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RecoveryMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        RecoveryMethod::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| invalid(format!("unknown recovery method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryResult {
    pub method: RecoveryMethod,
    pub freqs: Vec<f64>,
    /// Additive shift, where the method uses one.
    pub delta: Option<f64>,
    /// RSN low-count region.
    pub region_low: Option<Vec<usize>>,
    /// The method's constraints could not be met as stated.
    pub infeasible: bool,
    /// LDPRecover fell back to Norm-Sub.
    pub fallback: bool,
}

impl RecoveryResult {
    fn plain(method: RecoveryMethod, freqs: Vec<f64>, delta: Option<f64>) -> Self {
        Self { method, freqs, delta, region_low: None, infeasible: false, fallback: false }
    }
}

/// Non-negative and summing to one, both within `1e-9`.
pub fn consistency_check(freqs: &[f64]) -> bool {
    let min = freqs.iter().copied().fold(f64::INFINITY, f64::min);
    let sum: f64 = freqs.iter().sum();
    min >= -1e-9 && (sum - 1.0).abs() <= 1e-9
}

fn check_finite(x: &[f64]) -> Result<()> {
    if x.is_empty() {
        return Err(Error::EmptyInput("no estimates".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(invalid("estimates must be finite"));
    }
    Ok(())
}

/// Solves `sum_i clamp(a_i + x, lo_i, hi_i) = target` for `x`.
///
/// The left side is continuous and non-decreasing in `x`, so the solution
/// set is an interval; the point of it nearest zero is returned. When the
/// target is out of reach, `Err` carries the shift that comes closest.
pub fn solve_shift(a: &[f64], lo: &[f64], hi: &[f64], target: f64) -> std::result::Result<f64, f64> {
    let sum_lo: f64 = lo.iter().sum();
    let sum_hi: f64 = hi.iter().sum();
    let mut events: Vec<(f64, i32)> = Vec::with_capacity(2 * a.len());
    for i in 0..a.len() {
        events.push((lo[i] - a[i], 1));
        if hi[i].is_finite() {
            events.push((hi[i] - a[i], -1));
        }
    }
    events.sort_by(|x, y| x.0.total_cmp(&y.0).then(y.1.cmp(&x.1)));
    let first = events.first().map_or(0.0, |e| e.0);
    let last = events.last().map_or(0.0, |e| e.0);
    let tol = 1e-12 * target.abs().max(1.0);
    if target < sum_lo - tol {
        return Err(first);
    }
    if target > sum_hi + tol {
        return Err(last);
    }
    let at_zero: f64 = (0..a.len()).map(|i| a[i].clamp(lo[i], hi[i])).sum();
    if (at_zero - target).abs() <= tol {
        return Ok(0.0);
    }
    // Lowest solution: sweep segments left to right.
    let mut f = sum_lo;
    let mut slope = 0i64;
    let mut x = f64::NEG_INFINITY;
    let mut lo_sol = None;
    let mut k = 0;
    if f >= target - tol {
        lo_sol = Some(f64::NEG_INFINITY);
    }
    while lo_sol.is_none() && k < events.len() {
        let pos = events[k].0;
        if x.is_finite() {
            let next = f + slope as f64 * (pos - x);
            if next >= target - tol {
                lo_sol = Some(if slope > 0 { x + (target - f) / slope as f64 } else { pos });
                break;
            }
            f = next;
        }
        x = pos;
        while k < events.len() && events[k].0 == pos {
            slope += events[k].1 as i64;
            k += 1;
        }
    }
    let lo_sol = lo_sol.unwrap_or_else(|| if slope > 0 { x + (target - f) / slope as f64 } else { x });
    // Highest solution: the first point past `lo_sol` where the slope turns
    // positive.
    let mut hi_sol = f64::INFINITY;
    let mut s = 0i64;
    for &(pos, dlt) in &events {
        if pos > lo_sol && s > 0 {
            hi_sol = lo_sol;
            break;
        }
        if pos > lo_sol && s == 0 {
            hi_sol = pos;
            break;
        }
        s += dlt as i64;
    }
    if hi_sol.is_infinite() && s > 0 {
        hi_sol = lo_sol;
    }
    let hi_sol = hi_sol.max(lo_sol);
    Ok(0f64.max(lo_sol).min(hi_sol))
}

/// `max(f + delta, 0)` with `delta` chosen so the result sums to one.
pub fn norm_sub(freqs: &[f64]) -> Result<RecoveryResult> {
    check_finite(freqs)?;
    let lo = vec![0.0; freqs.len()];
    let hi = vec![f64::INFINITY; freqs.len()];
    let delta = solve_shift(freqs, &lo, &hi, 1.0).map_err(|_| Error::Infeasible("no shift reaches sum one".into()))?;
    let out = freqs.iter().map(|f| (f + delta).max(0.0)).collect();
    Ok(RecoveryResult::plain(RecoveryMethod::NormSub, out, Some(delta)))
}

/// Zeroes estimates at or below `Phi^-1(1 - alpha/d) * sigma_0 / n`.
pub fn base_cut(freqs: &[f64], params: &ProtocolParams, alpha: f64) -> Result<RecoveryResult> {
    check_finite(freqs)?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid(format!("alpha must be in (0, 1), got {alpha}")));
    }
    let t = base_cut_threshold(params, alpha);
    let out = freqs.iter().map(|&f| if f > t { f } else { 0.0 }).collect();
    Ok(RecoveryResult::plain(RecoveryMethod::BaseCut, out, None))
}

/// Frequency threshold used by [`base_cut`].
pub fn base_cut_threshold(params: &ProtocolParams, alpha: f64) -> f64 {
    normal_quantile(1.0 - alpha / params.d as f64) * params.zero_freq_sigma() / params.n as f64
}

/// `(f - min f) / sum(f - min f)`.
pub fn normalization(freqs: &[f64]) -> Result<RecoveryResult> {
    check_finite(freqs)?;
    let min = freqs.iter().copied().fold(f64::INFINITY, f64::min);
    let den: f64 = freqs.iter().map(|f| f - min).sum();
    if den <= 0.0 {
        return Err(invalid("normalization of a constant vector is undefined"));
    }
    let out = freqs.iter().map(|f| (f - min) / den).collect();
    Ok(RecoveryResult::plain(RecoveryMethod::Normalization, out, Some(-min)))
}

/// Least-squares projection onto the simplex in which items above
/// `xi(0.95) / n` are suspected of being inflated and may only shrink.
///
/// Falls back to Norm-Sub, flagged, when the suspected items alone cannot
/// carry unit mass and nothing else can absorb the rest.
pub fn ldprecover(freqs: &[f64], params: &ProtocolParams) -> Result<RecoveryResult> {
    check_finite(freqs)?;
    let tau = xi_threshold(0.95, params)? / params.n as f64;
    let lo = vec![0.0; freqs.len()];
    let hi: Vec<f64> = freqs.iter().map(|&f| if f > tau { f } else { f64::INFINITY }).collect();
    match solve_shift(freqs, &lo, &hi, 1.0) {
        Ok(delta) => {
            let out = freqs.iter().zip(&hi).map(|(f, h)| (f + delta).clamp(0.0, *h)).collect();
            Ok(RecoveryResult::plain(RecoveryMethod::Ldprecover, out, Some(delta)))
        }
        Err(_) => {
            let mut r = norm_sub(freqs)?;
            r.method = RecoveryMethod::Ldprecover;
            r.infeasible = true;
            r.fallback = true;
            Ok(r)
        }
    }
}

/// Robust segment normalization.
///
/// Counts below `4 sigma_0` form the low region `L` and receive a common
/// additive shift (clipped at zero) so the total count is conserved; the
/// rest keep their counts. The result is normalized, so ratios among
/// high-region items are preserved. When conservation is out of reach the
/// shift is clamped at the nearest extreme and the result is flagged.
pub fn rsn(est: &EstimateVector, params: &ProtocolParams) -> Result<RecoveryResult> {
    rsn_with_boundary(&est.counts, 4.0 * params.zero_freq_sigma())
}

/// RSN with an explicit low-region boundary `tau`.
pub fn rsn_with_boundary(counts: &[f64], tau: f64) -> Result<RecoveryResult> {
    check_finite(counts)?;
    let total: f64 = counts.iter().sum();
    if total <= 0.0 {
        return Err(invalid("counts sum to a non-positive value"));
    }
    let low: Vec<usize> = (0..counts.len()).filter(|&i| counts[i] < tau).collect();
    let high_mass: f64 = counts.iter().filter(|&&c| c >= tau).map(|c| c.max(0.0)).sum();
    let a: Vec<f64> = low.iter().map(|&i| counts[i]).collect();
    let (delta, infeasible) = if low.is_empty() {
        (0.0, false)
    } else {
        let lo = vec![0.0; a.len()];
        let hi = vec![f64::INFINITY; a.len()];
        match solve_shift(&a, &lo, &hi, total - high_mass) {
            Ok(d) => (d, false),
            Err(d) => (d, true),
        }
    };
    let mut adj: Vec<f64> = counts.iter().map(|c| c.max(0.0)).collect();
    for &i in &low {
        adj[i] = (counts[i] + delta).max(0.0);
    }
    let s: f64 = adj.iter().sum();
    if s <= 0.0 {
        return Err(Error::Infeasible("adjusted counts are all zero".into()));
    }
    let freqs = adj.iter().map(|c| c / s).collect();
    Ok(RecoveryResult {
        method: RecoveryMethod::Rsn,
        freqs,
        delta: Some(delta),
        region_low: Some(low),
        infeasible,
        fallback: false,
    })
}

/// Default significance for [`base_cut`].
pub const BASE_CUT_ALPHA: f64 = 0.05;

/// Runs `method` on an estimate vector with default settings.
pub fn recover(method: RecoveryMethod, est: &EstimateVector, params: &ProtocolParams) -> Result<RecoveryResult> {
    match method {
        RecoveryMethod::NormSub => norm_sub(&est.freqs),
        RecoveryMethod::BaseCut => base_cut(&est.freqs, params, BASE_CUT_ALPHA),
        RecoveryMethod::Normalization => normalization(&est.freqs),
        RecoveryMethod::Ldprecover => ldprecover(&est.freqs, params),
        RecoveryMethod::Rsn => rsn(est, params),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Protocol;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    fn est(counts: Vec<f64>, n: usize) -> EstimateVector {
        let freqs = counts.iter().map(|c| c / n as f64).collect();
        EstimateVector { protocol: Protocol::Oue, epsilon: 1.0, d: counts.len(), n, counts, freqs }
    }

    #[test]
    fn norm_sub_example() {
        let r = norm_sub(&[0.5, 0.3, -0.1, 0.1]).unwrap();
        assert!((r.delta.unwrap() - 1.0 / 30.0).abs() < 1e-12);
        assert!(close(&r.freqs, &[0.5 + 1.0 / 30.0, 0.3 + 1.0 / 30.0, 0.0, 0.1 + 1.0 / 30.0], 1e-12));
        let same = norm_sub(&[0.2, 0.3, 0.5]).unwrap();
        assert_eq!(same.delta, Some(0.0));
        assert!(close(&same.freqs, &[0.2, 0.3, 0.5], 1e-15));
    }

    #[test]
    fn normalization_example() {
        let r = normalization(&[0.5, 0.3, -0.1, 0.1]).unwrap();
        assert!(close(&r.freqs, &[0.5, 1.0 / 3.0, 0.0, 1.0 / 6.0], 1e-12));
        assert!(normalization(&[0.2, 0.2]).is_err());
    }

    #[test]
    fn rsn_hand_case() {
        let r = rsn_with_boundary(&[900.0, 80.0, 30.0, -10.0], 40.0).unwrap();
        assert_eq!(r.region_low, Some(vec![2, 3]));
        assert!((r.delta.unwrap() + 10.0).abs() < 1e-9);
        assert!(close(&r.freqs, &[0.9, 0.08, 0.02, 0.0], 1e-12));
    }

    #[test]
    fn rsn_with_empty_low_region_is_ratio_normalization() {
        let p = ProtocolParams::new(Protocol::Oue, 1.0, 3, 100).unwrap();
        let r = rsn(&est(vec![500.0, 300.0, 200.0], 100), &p).unwrap();
        assert!(close(&r.freqs, &[0.5, 0.3, 0.2], 1e-15));
    }

    #[test]
    fn base_cut_drops_small_entries() {
        let p = ProtocolParams::new(Protocol::Oue, 1.0, 1024, 1_000_000).unwrap();
        let t = base_cut_threshold(&p, 0.05);
        let z = normal_quantile(1.0 - 0.05 / 1024.0);
        assert!((t - z * p.zero_freq_sigma() / 1e6).abs() < 1e-15);
        let r = base_cut(&[t / 2.0, 2.0 * t, -1.0], &p, 0.05).unwrap();
        assert_eq!(r.freqs, vec![0.0, 2.0 * t, 0.0]);
    }

    #[test]
    fn solve_shift_picks_point_nearest_zero() {
        // Everything clipped to 0 above shift -1 .. solution set is flat.
        let x = solve_shift(&[1.0, 1.0], &[0.0, 0.0], &[1.0, 1.0], 2.0).unwrap();
        assert_eq!(x, 0.0);
        let x = solve_shift(&[3.0, 3.0], &[0.0, 0.0], &[1.0, 1.0], 2.0).unwrap();
        assert_eq!(x, 0.0);
        let x = solve_shift(&[0.0, 0.0], &[0.0, 0.0], &[1.0, 1.0], 2.0).unwrap();
        assert_eq!(x, 1.0);
        assert!(solve_shift(&[0.0], &[0.0], &[1.0], 2.0).is_err());
        let x = solve_shift(&[0.5, -0.5], &[0.0, 0.0], &[f64::INFINITY; 2], 1.0).unwrap();
        assert!((x - 0.5).abs() < 1e-15);
    }

    #[test]
    fn consistency_examples() {
        assert!(consistency_check(&[0.2, 0.8]));
        assert!(!consistency_check(&[1.2, -0.2]));
    }

    #[test]
    fn ldprecover_keeps_consistent_input() {
        let p = ProtocolParams::new(Protocol::Oue, 1.0, 4, 100_000).unwrap();
        let f = [0.4, 0.3, 0.2, 0.1];
        let r = ldprecover(&f, &p).unwrap();
        assert!(close(&r.freqs, &f, 1e-12));
        assert!(!r.fallback);
        // Inflated entries shrink instead of everything else collapsing.
        let r = ldprecover(&[0.6, 0.6, 0.001, 0.0], &p).unwrap();
        assert!(consistency_check(&r.freqs));
        assert!(r.freqs[0] <= 0.6 && r.freqs[2] <= 0.001 + 1e-12);
    }

    #[test]
    fn method_names_round_trip() {
        for m in RecoveryMethod::ALL {
            assert_eq!(m.name().parse::<RecoveryMethod>().unwrap(), m);
        }
    }
}
