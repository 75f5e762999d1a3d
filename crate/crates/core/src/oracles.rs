//! Perturbation, aggregation and support statistics for the six protocols.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bits::Bits;
use crate::domain::{fill_support, Assignment, Protocol, ProtocolParams, PublicVector, Report, ReportSet};
use crate::error::{invalid, Result};
use crate::hash::{domain_keys, hash_with_key, universal_hash};
use crate::par;
use crate::rng::{Purpose, RngPolicy};

const CHUNK: usize = 2048;

/// Perturbs item `v` held by user `user`.
///
/// `assignment` supplies server-chosen hashes and vectors; user-chosen ones
/// are drawn from `rng`.
pub fn perturb<R: Rng + ?Sized>(
    v: usize,
    user: usize,
    params: &ProtocolParams,
    assignment: &Assignment,
    rng: &mut R,
) -> Result<Report> {
    let d = params.d;
    if v >= d {
        return Err(invalid(format!("item {v} outside domain of size {d}")));
    }
    Ok(match params.protocol {
        Protocol::Grr => {
            let value = if rng.random::<f64>() < params.p {
                v
            } else {
                let x = rng.random_range(0..d - 1);
                if x >= v {
                    x + 1
                } else {
                    x
                }
            };
            Report::Grr { value }
        }
        Protocol::Oue => {
            let mut bits = Bits::zeros(d);
            // Geometric skipping: gaps between 1-bits among the d positions.
            let l1q = (1.0 - params.q).ln();
            let mut pos = 0usize;
            while pos < d {
                let u = 1.0 - rng.random::<f64>();
                let skip = (u.ln() / l1q).floor();
                if skip >= (d - pos) as f64 {
                    break;
                }
                pos += skip as usize;
                bits.set(pos, true);
                pos += 1;
            }
            bits.set(v, rng.random::<f64>() < params.p);
            Report::Oue { bits }
        }
        Protocol::OlhUser | Protocol::OlhServer => {
            let g = params.g();
            let hash_id = if params.protocol == Protocol::OlhServer {
                assignment.hash_id(user)
            } else {
                rng.random()
            };
            let x = universal_hash(hash_id, v, g);
            let value = if rng.random::<f64>() < params.p {
                x
            } else {
                let y = rng.random_range(0..g - 1);
                if y >= x {
                    y + 1
                } else {
                    y
                }
            };
            Report::Olh { hash_id, value }
        }
        Protocol::HstUser | Protocol::HstServer => {
            let vector = if params.protocol == Protocol::HstServer {
                PublicVector::Seeded(assignment.vector_seed(user))
            } else {
                PublicVector::Seeded(rng.random())
            };
            let s = vector.get(v);
            let positive = if rng.random::<f64>() < params.p { s } else { !s };
            Report::Hst { positive, vector }
        }
    })
}

/// Perturbs every user's item with its own stream `(trial, Perturb, user)`.
///
/// `params.n` is ignored; the output has one report per entry of `items`.
pub fn perturb_population(
    items: &[usize],
    params: &ProtocolParams,
    policy: &RngPolicy,
    trial: u64,
) -> Result<Vec<Report>> {
    let assignment = Assignment::for_trial(policy.master_seed, trial);
    par::map_range(items.len(), |u| {
        let mut rng = policy.stream(trial, Purpose::Perturb, u as u64);
        perturb(items[u], u, params, &assignment, &mut rng)
    })
    .into_iter()
    .collect()
}

/// Raw per-item support tallies of a slice of reports.
///
/// GRR: value counts. OUE: bit counts. OLH: number of reports whose hash maps
/// the item onto the reported value. HST: number of reports whose sign agrees
/// with the public vector at the item. Tallies are additive over reports.
pub fn tally_reports(reports: &[Report], params: &ProtocolParams) -> Vec<u64> {
    let d = params.d;
    let keys = if params.protocol.is_olh() { domain_keys(d) } else { Vec::new() };
    let words = d.div_ceil(64);
    par::histogram(reports.len(), d, CHUNK, |s, e, acc| {
        let mut row = vec![0u64; words];
        for r in &reports[s..e] {
            match r {
                Report::Grr { value } => acc[*value] += 1,
                Report::Oue { bits } => bits.ones().for_each(|i| acc[i] += 1),
                Report::Olh { .. } => {
                    fill_support(r, params, &keys, &mut row);
                    crate::bits::iter_ones(&row).for_each(|i| acc[i] += 1);
                }
                Report::Hst { positive, vector } => {
                    vector.fill_words(d, &mut row);
                    if *positive {
                        crate::bits::iter_ones(&row).for_each(|i| acc[i] += 1);
                    } else {
                        for (i, a) in acc.iter_mut().enumerate() {
                            if row[i / 64] >> (i % 64) & 1 == 0 {
                                *a += 1;
                            }
                        }
                    }
                }
            }
        }
    })
}

/// Unbiased per-item estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateVector {
    pub protocol: Protocol,
    pub epsilon: f64,
    pub d: usize,
    pub n: usize,
    /// `n * f~` per item.
    pub counts: Vec<f64>,
    /// `f~` per item.
    pub freqs: Vec<f64>,
}

impl EstimateVector {
    /// Estimates from raw tallies of `params.n` reports.
    pub fn from_tally(params: &ProtocolParams, tally: &[u64]) -> Self {
        let n = params.n as f64;
        let counts: Vec<f64> = tally.iter().map(|&t| params.count_from_tally(t as f64)).collect();
        let freqs = counts.iter().map(|c| if n > 0.0 { c / n } else { 0.0 }).collect();
        Self { protocol: params.protocol, epsilon: params.epsilon, d: params.d, n: params.n, counts, freqs }
    }

    /// Parameters recorded alongside the estimates.
    pub fn params(&self) -> Result<ProtocolParams> {
        ProtocolParams::new(self.protocol, self.epsilon, self.d, self.n)
    }
}

/// Aggregates a report set into unbiased estimates.
pub fn aggregate(set: &ReportSet) -> EstimateVector {
    EstimateVector::from_tally(set.params(), &tally_reports(set.reports(), set.params()))
}

/// Support size of every report.
pub fn support_sizes(reports: &[Report], params: &ProtocolParams) -> Vec<u32> {
    let keys = if params.protocol.is_olh() { domain_keys(params.d) } else { Vec::new() };
    let g = params.g();
    par::map_slice(reports, |r| match r {
        Report::Grr { .. } => 1,
        Report::Oue { bits } => bits.count_ones() as u32,
        Report::Olh { hash_id, value } => {
            keys.iter().filter(|&&k| hash_with_key(*hash_id, k, g) == *value).count() as u32
        }
        Report::Hst { vector, .. } => match vector {
            PublicVector::Explicit(b) => b.count_ones() as u32,
            PublicVector::Seeded(_) => {
                let mut w = vec![0u64; params.d.div_ceil(64)];
                vector.fill_words(params.d, &mut w);
                w.iter().map(|x| x.count_ones()).sum()
            }
        },
    })
}

/// Histogram `h[k]` = number of reports supporting exactly `k` items.
pub fn observed_support_histogram(set: &ReportSet) -> Vec<u64> {
    let mut h = vec![0u64; set.params().d + 1];
    for s in support_sizes(set.reports(), set.params()) {
        h[s as usize] += 1;
    }
    h
}

/// Materialized support rows: one `ceil(d/64)`-word bitset per report.
#[derive(Debug, Clone)]
pub struct SupportIndex {
    pub d: usize,
    pub words: usize,
    rows: Vec<u64>,
    sizes: Vec<u32>,
}

impl SupportIndex {
    pub fn build(set: &ReportSet) -> Self {
        let params = set.params();
        let d = params.d;
        let words = d.div_ceil(64);
        let keys = if params.protocol.is_olh() { domain_keys(d) } else { Vec::new() };
        let reports = set.reports();
        let mut rows = vec![0u64; reports.len() * words];
        let per = 256usize;
        par::for_each_chunk_mut(&mut rows, per * words.max(1), |c, chunk| {
            for (j, row) in chunk.chunks_mut(words.max(1)).enumerate() {
                fill_support(&reports[c * per + j], params, &keys, row);
            }
        });
        let sizes = rows
            .chunks(words.max(1))
            .map(|r| r.iter().map(|w| w.count_ones()).sum())
            .collect();
        Self { d, words, rows, sizes }
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    #[inline]
    pub fn row(&self, user: usize) -> &[u64] {
        &self.rows[user * self.words..(user + 1) * self.words]
    }

    #[inline]
    pub fn supports(&self, user: usize, item: usize) -> bool {
        self.rows[user * self.words + item / 64] >> (item % 64) & 1 == 1
    }

    pub fn sizes(&self) -> &[u32] {
        &self.sizes
    }
}
