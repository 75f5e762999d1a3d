//! Fake-user detection from support-size statistics.
//!
//! Genuine reports have support sizes close to `Binomial(d, p~)`. Crafted
//! reports distort that histogram. The detector peels off size buckets in
//! order of best fit, looks for groups of remaining users that jointly
//! support the most common items, and keeps the group whose removal makes
//! the histogram fit best by chi-square.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::domain::{Protocol, ProtocolParams, ReportSet};
use crate::error::{invalid, Error, Result};
use crate::oracles::SupportIndex;
use crate::par;
use crate::stats::binomial_pmf;

/// Cells with model probability below this are pooled into a neighbour.
pub const POOL_THRESHOLD: f64 = 1e-12;
/// Largest supported subset width.
pub const MAX_L: usize = 16;

/// Model of genuine support sizes, `X ~ Binomial(d, p~)`.
#[derive(Debug, Clone)]
pub struct SupportModel {
    pub d: usize,
    pub p_tilde: f64,
    pmf: Vec<f64>,
    cell_of: Vec<usize>,
    cell_prob: Vec<f64>,
}

/// Per-item support probability of a genuine report.
pub fn p_tilde(params: &ProtocolParams) -> Result<f64> {
    let d = params.d as f64;
    match params.protocol {
        Protocol::Grr => Err(Error::Unsupported(
            "support-size model needs a multi-item support; GRR reports support one item".into(),
        )),
        Protocol::Oue => Ok((params.p + (d - 1.0) * params.q) / d),
        Protocol::OlhUser | Protocol::OlhServer => Ok(1.0 / params.g() as f64),
        Protocol::HstUser | Protocol::HstServer => Ok(0.5),
    }
}

impl SupportModel {
    pub fn new(params: &ProtocolParams) -> Result<Self> {
        Ok(Self::from_p(params.d, p_tilde(params)?))
    }

    pub fn from_p(d: usize, p_tilde: f64) -> Self {
        let pmf = binomial_pmf(d, p_tilde);
        let (cell_of, cell_prob) = pool_cells(&pmf, POOL_THRESHOLD);
        Self { d, p_tilde, pmf, cell_of, cell_prob }
    }

    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }

    /// `Y[k] = n * P(X = k)`.
    pub fn expected_histogram(&self, n: usize) -> Vec<f64> {
        self.pmf.iter().map(|p| p * n as f64).collect()
    }

    /// Typical support size of a genuine report, `floor(d * p~)`.
    ///
    /// For OUE this is `floor(p + (d-1) q)`.
    pub fn typical_size(&self) -> usize {
        ((self.d as f64 * self.p_tilde) + 1e-9).floor() as usize
    }

    /// Most likely support size.
    pub fn mode(&self) -> usize {
        argmax(&self.pmf)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Assigns each index to a cell. Indices with weight below
/// `threshold * total` join the nearest index above it (ties go low).
fn pool_cells(weights: &[f64], threshold: f64) -> (Vec<usize>, Vec<f64>) {
    let total: f64 = weights.iter().sum();
    let keep: Vec<usize> = (0..weights.len()).filter(|&k| weights[k] >= threshold * total && weights[k] > 0.0).collect();
    if keep.is_empty() {
        return (vec![0; weights.len()], vec![total]);
    }
    let mut cell_of = vec![0usize; weights.len()];
    let mut j = 0usize;
    for (k, c) in cell_of.iter_mut().enumerate() {
        while j + 1 < keep.len() && keep[j + 1] <= k {
            j += 1;
        }
        let mut best = j;
        if keep[j] < k && j + 1 < keep.len() && keep[j + 1] - k < k - keep[j] {
            best = j + 1;
        }
        *c = best;
    }
    let mut cell_prob = vec![0.0; keep.len()];
    for (k, &c) in cell_of.iter().enumerate() {
        cell_prob[c] += weights[k];
    }
    (cell_of, cell_prob)
}

/// Expected support-size histogram of `params.n` genuine reports.
pub fn expected_histogram(params: &ProtocolParams) -> Result<Vec<f64>> {
    Ok(SupportModel::new(params)?.expected_histogram(params.n))
}

/// Squared error `(O[k] - Y[k])^2` at one support size.
pub fn e_sq(observed: &[f64], expected: &[f64], k: usize) -> f64 {
    let e = observed[k] - expected[k];
    e * e
}

/// Chi-square statistic `sum_k (O[k] - Y[k])^2 / Y[k]`.
///
/// Cells whose expected count is below `1e-12 * sum(Y)` are pooled into the
/// nearest cell above that level before summing.
pub fn e_freq(observed: &[f64], expected: &[f64]) -> f64 {
    let (cell_of, cell_y) = pool_cells(expected, POOL_THRESHOLD);
    let mut cell_o = vec![0.0; cell_y.len()];
    for (k, &c) in cell_of.iter().enumerate() {
        cell_o[c] += observed[k];
    }
    cell_o
        .iter()
        .zip(&cell_y)
        .map(|(o, y)| {
            if *y > 0.0 {
                (o - y) * (o - y) / y
            } else if *o == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .sum()
}

/// Population the expected histogram is scaled to when a group is removed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExpectedScale {
    /// `Y = n' * P` for the `n'` users left, so totals match. Removing extra
    /// genuine users is then nearly free and the detector over-flags.
    Remaining,
    /// `Y = n * P` throughout; every removed user must pay for itself.
    #[default]
    Full,
}

/// Detector settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffstatsConfig {
    /// Number of most commonly supported items whose subsets are tested.
    pub l: usize,
    /// Stop after this many outer iterations instead of `d + 1`.
    pub max_iters: Option<usize>,
    pub expected_scale: ExpectedScale,
}

impl Default for DiffstatsConfig {
    fn default() -> Self {
        Self { l: 6, max_iters: None, expected_scale: ExpectedScale::Full }
    }
}

/// One outer iteration of the detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    /// Support size removed from the candidate sizes this iteration.
    pub delta: usize,
    /// Users whose support size is still a candidate.
    pub candidates: usize,
    pub subsets_examined: usize,
    /// Best chi-square value seen within this iteration.
    pub best_e: f64,
}

/// Output of [`diffstats_detect`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    /// Users flagged as fake, ascending.
    pub fake_user_ids: Vec<usize>,
    pub e_min: f64,
    /// Chi-square value with nobody removed.
    pub e_initial: f64,
    pub trace: Vec<TraceEntry>,
    pub wall_time_ms: f64,
}

struct Best {
    e: f64,
    iteration: usize,
    items: Vec<usize>,
    mask: usize,
}

/// Identifies fake users in a report set.
///
/// Sizes are removed in ascending order of `E_sq`, ties toward the smaller
/// size. After removing a group the chi-square compares against the expected
/// histogram scaled per [`ExpectedScale`].
pub fn diffstats_detect(set: &ReportSet, cfg: &DiffstatsConfig) -> Result<DetectionResult> {
    let start = Instant::now();
    let params = set.params();
    let model = SupportModel::new(params)?;
    if set.is_empty() {
        return Err(Error::EmptyInput("report set has no reports".into()));
    }
    let (d, n, l) = (params.d, set.len(), cfg.l);
    if l == 0 || l > d {
        return Err(invalid(format!("L must be in 1..={d}, got {l}")));
    }
    if l > MAX_L {
        return Err(invalid(format!("L above {MAX_L} is not supported")));
    }
    let index = SupportIndex::build(set);
    let sizes = index.sizes();

    let mut observed = vec![0u64; d + 1];
    let mut by_size: Vec<Vec<u32>> = vec![Vec::new(); d + 1];
    for (u, &s) in sizes.iter().enumerate() {
        observed[s as usize] += 1;
        by_size[s as usize].push(u as u32);
    }

    // Removal order of sizes: ascending E_sq against the full population.
    let y_full = model.expected_histogram(n);
    let obs_f: Vec<f64> = observed.iter().map(|&o| o as f64).collect();
    let mut order: Vec<usize> = (0..=d).collect();
    order.sort_by(|&a, &b| e_sq(&obs_f, &y_full, a).total_cmp(&e_sq(&obs_f, &y_full, b)).then(a.cmp(&b)));

    // Chi-square bookkeeping over pooled cells.
    let ncell = model.cell_prob.len();
    let mut cell_o = vec![0f64; ncell];
    for k in 0..=d {
        cell_o[model.cell_of[k]] += observed[k] as f64;
    }
    let base: f64 = cell_o.iter().zip(&model.cell_prob).map(|(o, p)| o * o / p).sum();
    let chi = |removed: &[(usize, u64)]| -> f64 {
        // `removed` lists (size, count) in ascending size order.
        let total: u64 = removed.iter().map(|r| r.1).sum();
        let np = (n as u64 - total) as f64;
        if np == 0.0 {
            return f64::INFINITY;
        }
        let mut acc = base;
        let mut i = 0;
        while i < removed.len() {
            let c = model.cell_of[removed[i].0];
            let mut r = 0f64;
            while i < removed.len() && model.cell_of[removed[i].0] == c {
                r += removed[i].1 as f64;
                i += 1;
            }
            let o = cell_o[c];
            acc -= (o * o - (o - r) * (o - r)) / model.cell_prob[c];
        }
        match cfg.expected_scale {
            ExpectedScale::Remaining => acc / np - np,
            ExpectedScale::Full => acc / n as f64 - 2.0 * np + n as f64,
        }
    };
    let e_initial = chi(&[]);

    let mut active = vec![true; d + 1];
    let mut common = vec![0i64; d];
    for u in 0..n {
        for i in crate::bits::iter_ones(index.row(u)) {
            common[i] += 1;
        }
    }
    let mut remaining = n;
    let iters = cfg.max_iters.map_or(d + 1, |m| m.min(d + 1));
    let nmask = 1usize << l;
    let mut best = Best { e: f64::INFINITY, iteration: 0, items: Vec::new(), mask: 0 };
    let mut trace = Vec::with_capacity(iters);
    let mut top: Vec<usize> = Vec::new();
    let mut masks: Vec<u16> = vec![0; n];
    // sup[s][k]: candidate users of size k whose mask contains s.
    let mut sup: Vec<Vec<u32>> = Vec::new();
    let mut table_sizes: Vec<usize> = Vec::new();

    for (t, &delta) in order.iter().take(iters).enumerate() {
        active[delta] = false;
        for &u in &by_size[delta] {
            for i in crate::bits::iter_ones(index.row(u as usize)) {
                common[i] -= 1;
            }
        }
        remaining -= by_size[delta].len();

        if remaining == 0 {
            if e_initial < best.e {
                best = Best { e: e_initial, iteration: t, items: Vec::new(), mask: 0 };
            }
            trace.push(TraceEntry { delta, candidates: 0, subsets_examined: 0, best_e: e_initial });
            continue;
        }

        let new_top = top_items(&common, l);
        if new_top != top {
            top = new_top;
            for (u, m) in masks.iter_mut().enumerate() {
                let row = index.row(u);
                let mut x = 0u16;
                for (b, &i) in top.iter().enumerate() {
                    x |= ((row[i / 64] >> (i % 64) & 1) as u16) << b;
                }
                *m = x;
            }
            // Sizes only ever leave the candidate set, so a table built now
            // stays valid once inactive columns are skipped.
            table_sizes = (0..=d).filter(|&k| active[k] && !by_size[k].is_empty()).collect();
            sup = superset_table(&masks, &by_size, &table_sizes, l);
        }

        let evals: Vec<f64> = par::map_range(nmask - 1, |i| {
            let s = i + 1;
            let removed: Vec<(usize, u64)> = table_sizes
                .iter()
                .enumerate()
                .filter(|(_, &k)| active[k])
                .map(|(j, &k)| (k, sup[s][j] as u64))
                .filter(|&(_, c)| c > 0)
                .collect();
            chi(&removed)
        });
        let mut iter_best = f64::INFINITY;
        for (i, &e) in evals.iter().enumerate() {
            if e < iter_best {
                iter_best = e;
            }
            if e < best.e {
                best = Best { e, iteration: t, items: top.clone(), mask: i + 1 };
            }
        }
        trace.push(TraceEntry { delta, candidates: remaining, subsets_examined: nmask - 1, best_e: iter_best });
    }

    // Rebuild the winning group: candidates at that iteration supporting
    // every item of the winning subset.
    let mut fake_user_ids = Vec::new();
    if best.mask != 0 {
        let excluded: Vec<bool> = {
            let mut ex = vec![false; d + 1];
            for &k in order.iter().take(best.iteration + 1) {
                ex[k] = true;
            }
            ex
        };
        let items: Vec<usize> = (0..l).filter(|b| best.mask >> b & 1 == 1).map(|b| best.items[b]).collect();
        for u in 0..n {
            if !excluded[sizes[u] as usize] && items.iter().all(|&i| index.supports(u, i)) {
                fake_user_ids.push(u);
            }
        }
    }
    Ok(DetectionResult {
        fake_user_ids,
        e_min: best.e,
        e_initial,
        trace,
        wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// The `l` items with the largest counts, ties toward the smaller index,
/// returned in ascending item order.
fn top_items(counts: &[i64], l: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..counts.len()).collect();
    let cmp = |a: &usize, b: &usize| counts[*b].cmp(&counts[*a]).then(a.cmp(b));
    if l < idx.len() {
        idx.select_nth_unstable_by(l - 1, cmp);
        idx.truncate(l);
    }
    idx.sort_unstable();
    idx
}

/// `table[s][j]` = users of size `sizes[j]` whose mask is a superset of `s`.
fn superset_table(masks: &[u16], by_size: &[Vec<u32>], sizes: &[usize], l: usize) -> Vec<Vec<u32>> {
    let nmask = 1usize << l;
    let mut t = vec![vec![0u32; sizes.len()]; nmask];
    for (j, &k) in sizes.iter().enumerate() {
        for &u in &by_size[k] {
            t[masks[u as usize] as usize][j] += 1;
        }
    }
    for b in 0..l {
        for s in 0..nmask {
            if s >> b & 1 == 0 {
                let (lo, hi) = t.split_at_mut(s | 1 << b);
                lo[s].iter_mut().zip(&hi[0]).for_each(|(x, y)| *x += y);
            }
        }
    }
    t
}

/// Closed-form expected errors under MGA and APA.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedForms {
    /// Support size every MGA fake report has.
    pub l_g: usize,
    pub e_sq_mga: Vec<f64>,
    pub e_freq_mga: f64,
    pub e_sq_apa: Option<Vec<f64>>,
    pub e_freq_apa: Option<f64>,
    /// Whether MGA's expected `E_sq` at `l_g` strictly exceeds APA's.
    pub mga_exceeds_apa_at_lg: Option<bool>,
}

/// Expected `E_sq` per size and expected `E_freq` for `m` fake users among
/// `params.n`, for MGA (all fakes at size `l_g`) and, when `omega` is given,
/// for APA with fake size profile `omega`.
pub fn closed_forms(params: &ProtocolParams, m: usize, omega: Option<&[u64]>) -> Result<ClosedForms> {
    let model = SupportModel::new(params)?;
    let n = params.n as f64;
    let mf = m as f64;
    if m > params.n {
        return Err(invalid("more fake users than users"));
    }
    let pmf = model.pmf();
    let l_g = model.typical_size();
    let noise = |p: f64| (n - mf) * p * (1.0 - p);
    let e_sq_mga: Vec<f64> = pmf
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let bias = if k == l_g { mf * (1.0 - p) } else { mf * p };
            bias * bias + noise(p)
        })
        .collect();
    let pl = pmf[l_g];
    let e_freq_mga = mf * mf / n * (1.0 / pl - 1.0) + (n - mf) * params.d as f64 / n;

    let (e_sq_apa, e_freq_apa, cmp) = match omega {
        None => (None, None, None),
        Some(w) => {
            if w.len() != params.d + 1 {
                return Err(invalid("omega must have d + 1 entries"));
            }
            if w.iter().sum::<u64>() != m as u64 {
                return Err(invalid("omega must sum to m"));
            }
            let sq: Vec<f64> = pmf
                .iter()
                .zip(w)
                .map(|(&p, &wk)| {
                    let b = mf * p - wk as f64;
                    b * b + noise(p)
                })
                .collect();
            let first: f64 = pmf
                .iter()
                .zip(w)
                .filter(|(&p, _)| p > 0.0)
                .map(|(&p, &wk)| {
                    let b = mf * p - wk as f64;
                    b * b / (n * p)
                })
                .sum();
            let ef = first + (n - mf) * params.d as f64 / n;
            let c = e_sq_mga[l_g] > sq[l_g];
            (Some(sq), Some(ef), Some(c))
        }
    };
    Ok(ClosedForms { l_g, e_sq_mga, e_freq_mga, e_sq_apa, e_freq_apa, mga_exceeds_apa_at_lg: cmp })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_expected_histogram() {
        let m = SupportModel::from_p(2, 0.5);
        let y = m.expected_histogram(4);
        for (a, b) in y.iter().zip([1.0, 2.0, 1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn oue_mode_and_typical_size() {
        let p = ProtocolParams::new(Protocol::Oue, 1.0, 1024, 100_000).unwrap();
        let m = SupportModel::new(&p).unwrap();
        assert!([275, 276].contains(&m.mode()));
        assert_eq!(m.typical_size(), (p.p + 1023.0 * p.q).floor() as usize);
        let y = m.expected_histogram(p.n);
        assert!((y.iter().sum::<f64>() - 1e5).abs() < 1e-6 * 1e5);
    }

    #[test]
    fn grr_has_no_support_model() {
        let p = ProtocolParams::new(Protocol::Grr, 1.0, 16, 10).unwrap();
        assert!(matches!(SupportModel::new(&p), Err(Error::Unsupported(_))));
    }

    #[test]
    fn e_sq_and_e_freq_examples() {
        assert_eq!(e_sq(&[4.0], &[4.0], 0), 0.0);
        assert_eq!(e_sq(&[7.0], &[4.0], 0), 9.0);
        assert!((e_freq(&[5.0, 15.0], &[10.0, 10.0]) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn pooling_merges_tails() {
        let (cell, prob) = pool_cells(&[1e-20, 0.5, 0.5, 1e-30, 0.0], 1e-12);
        assert_eq!(cell, vec![0, 0, 1, 1, 1]);
        assert_eq!(prob.len(), 2);
        // A pooled tail observation is not an infinite outlier.
        assert!(e_freq(&[1.0, 5.0, 5.0, 0.0, 0.0], &[1e-20, 5.0, 5.0, 0.0, 0.0]).is_finite());
    }

    #[test]
    fn superset_table_counts_supersets() {
        let masks = [0b11u16, 0b01, 0b10, 0b00];
        let by_size = vec![vec![0, 1, 2, 3]];
        let t = superset_table(&masks, &by_size, &[0], 2);
        assert_eq!(t[0][0], 4);
        assert_eq!(t[1][0], 2);
        assert_eq!(t[2][0], 2);
        assert_eq!(t[3][0], 1);
    }

    #[test]
    fn top_items_breaks_ties_low() {
        assert_eq!(top_items(&[5, 9, 9, 1, 9], 2), vec![1, 2]);
    }

    #[test]
    fn closed_form_identities() {
        let p = ProtocolParams::new(Protocol::Oue, 1.0, 1024, 100_000).unwrap();
        let model = SupportModel::new(&p).unwrap();
        let m = 5000usize;
        let lg = model.typical_size();

        let mut w = vec![0u64; 1025];
        w[lg] = m as u64;
        let o = closed_forms(&p, m, Some(&w)).unwrap();
        assert!((o.e_sq_apa.as_ref().unwrap()[lg] - o.e_sq_mga[lg]).abs() < 1e-6);
        assert_eq!(o.mga_exceeds_apa_at_lg, Some(false));

        let mut w = vec![0u64; 1025];
        w[lg] = (m / 2) as u64;
        w[lg + 1] = (m / 2) as u64;
        let o = closed_forms(&p, m, Some(&w)).unwrap();
        assert_eq!(o.mga_exceeds_apa_at_lg, Some(true));

        let mga = closed_forms(&p, m, None).unwrap();
        let pl = model.pmf()[lg];
        let expect = (m * m) as f64 / 1e5 * (1.0 / pl - 1.0) + 95_000.0 * 1024.0 / 1e5;
        assert!((mga.e_freq_mga - expect).abs() < 1e-9 * expect);
        // The closed form is the sum of per-size expectations over Y, where
        // each of the d + 1 sizes contributes (n - m)(1 - P) / n of noise.
        // Sizes whose probability underflows to zero contribute nothing to
        // the sum but still count in the closed form.
        let y = model.expected_histogram(p.n);
        let sum: f64 = mga.e_sq_mga.iter().zip(&y).filter(|(_, &y)| y > 0.0).map(|(e, y)| e / y).sum();
        let dead = y.iter().filter(|&&y| y == 0.0).count() as f64;
        let expect = mga.e_freq_mga - 0.95 * dead;
        assert!((sum - expect).abs() < 1e-6 * sum, "{sum} vs {expect}");
    }

    #[test]
    fn apa_with_exact_profile_collapses_to_noise_term() {
        // Profile proportional to the pmf gives a vanishing first sum.
        let p = ProtocolParams::new(Protocol::HstUser, 1.0, 4, 1600).unwrap();
        let w = vec![10u64, 40, 60, 40, 10];
        let o = closed_forms(&p, 160, Some(&w)).unwrap();
        assert!((o.e_freq_apa.unwrap() - 1440.0 * 4.0 / 1600.0).abs() < 1e-9);
    }
}
