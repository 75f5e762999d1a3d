//! Protocols, derived parameters, reports and report sets.
//!
//! Items are indexed `0..d`. A [`ReportSet`] is exactly what a collector sees:
//! protocol parameters and one report per user. It carries no labels about
//! which users are genuine.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bits::Bits;
use crate::error::{invalid, Error, Result};
use crate::hash::{combine, domain_keys, hash_with_key, mix64};

/// Frequency-oracle protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "GRR")]
    Grr,
    #[serde(rename = "OUE")]
    Oue,
    #[serde(rename = "OLH-User")]
    OlhUser,
    #[serde(rename = "OLH-Server")]
    OlhServer,
    #[serde(rename = "HST-User")]
    HstUser,
    #[serde(rename = "HST-Server")]
    HstServer,
}

impl Protocol {
    pub const ALL: [Protocol; 6] = [
        Protocol::Grr,
        Protocol::Oue,
        Protocol::OlhUser,
        Protocol::OlhServer,
        Protocol::HstUser,
        Protocol::HstServer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Grr => "GRR",
            Protocol::Oue => "OUE",
            Protocol::OlhUser => "OLH-User",
            Protocol::OlhServer => "OLH-Server",
            Protocol::HstUser => "HST-User",
            Protocol::HstServer => "HST-Server",
        }
    }

    pub fn is_olh(self) -> bool {
        matches!(self, Protocol::OlhUser | Protocol::OlhServer)
    }

    pub fn is_hst(self) -> bool {
        matches!(self, Protocol::HstUser | Protocol::HstServer)
    }

    /// Whether the server, not the user, picks the hash or public vector.
    pub fn server_assigned(self) -> bool {
        matches!(self, Protocol::OlhServer | Protocol::HstServer)
    }

    /// Fake-user detection needs reports that support many items.
    pub fn supports_fake_detection(self) -> bool {
        self != Protocol::Grr
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('_', "-");
        Protocol::ALL
            .into_iter()
            .find(|p| p.name().to_ascii_uppercase() == norm)
            .ok_or_else(|| invalid(format!("unknown protocol `{s}`")))
    }
}

/// Protocol parameters derived from `(protocol, epsilon, d, n)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtocolParams {
    pub protocol: Protocol,
    pub epsilon: f64,
    pub d: usize,
    pub n: usize,
    pub p: f64,
    pub q: f64,
    /// Hash range for OLH.
    pub g: Option<usize>,
    /// Report magnitude `(e^eps + 1) / (e^eps - 1)` for HST.
    pub hst_coeff: Option<f64>,
}

impl ProtocolParams {
    pub fn new(protocol: Protocol, epsilon: f64, d: usize, n: usize) -> Result<Self> {
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(invalid(format!("epsilon must be positive and finite, got {epsilon}")));
        }
        if d < 2 {
            return Err(invalid(format!("domain size must be at least 2, got {d}")));
        }
        if d > u32::MAX as usize {
            return Err(invalid("domain size too large"));
        }
        let e = epsilon.exp();
        let (p, q, g, hst_coeff) = match protocol {
            Protocol::Grr => {
                let den = e + d as f64 - 1.0;
                (e / den, 1.0 / den, None, None)
            }
            Protocol::Oue => (0.5, 1.0 / (e + 1.0), None, None),
            Protocol::OlhUser | Protocol::OlhServer => {
                let g = (e + 1.0).floor() as usize;
                let den = e + g as f64 - 1.0;
                (e / den, 1.0 / den, Some(g), None)
            }
            Protocol::HstUser | Protocol::HstServer => {
                (e / (e + 1.0), 1.0 / (e + 1.0), None, Some((e + 1.0) / (e - 1.0)))
            }
        };
        Ok(Self { protocol, epsilon, d, n, p, q, g, hst_coeff })
    }

    /// Same protocol, epsilon and domain with a different user count.
    pub fn with_n(&self, n: usize) -> Self {
        Self { n, ..*self }
    }

    pub fn g(&self) -> usize {
        self.g.unwrap_or(2)
    }

    pub fn hst_coeff(&self) -> f64 {
        self.hst_coeff.unwrap_or(1.0)
    }

    /// `(p*, q*)`: probability that a genuine report supports the user's own
    /// item, and that it supports any fixed other item.
    ///
    /// For HST "support" here means the report sign agrees with the public
    /// vector at that item, which is what the unbiased estimator counts.
    pub fn support_probs(&self) -> (f64, f64) {
        match self.protocol {
            Protocol::Grr | Protocol::Oue => (self.p, self.q),
            Protocol::OlhUser | Protocol::OlhServer => (self.p, 1.0 / self.g() as f64),
            Protocol::HstUser | Protocol::HstServer => (self.p, 0.5),
        }
    }

    /// Turns a raw support tally into the unbiased count estimate `n * f~`.
    #[inline]
    pub fn count_from_tally(&self, tally: f64) -> f64 {
        let (ps, qs) = self.support_probs();
        (tally - self.n as f64 * qs) / (ps - qs)
    }

    /// Standard deviation of the count estimate of an item nobody holds.
    pub fn zero_freq_sigma(&self) -> f64 {
        let (ps, qs) = self.support_probs();
        (self.n as f64 * qs * (1.0 - qs)).sqrt() / (ps - qs)
    }

    /// Variance of the count estimate of an item with true frequency `f`.
    pub fn count_variance(&self, f: f64) -> f64 {
        let (ps, qs) = self.support_probs();
        let n = self.n as f64;
        n * (qs * (1.0 - qs) + f * (ps - qs) * (1.0 - ps - qs)) / ((ps - qs) * (ps - qs))
    }
}

/// Server-side assignment of hash functions and public vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Assignment {
    pub master_seed: u64,
}

const OLH_TAG: u64 = 0x4f4c_485f_5345_4544;
const HST_TAG: u64 = 0x4853_545f_5645_4354;

impl Assignment {
    pub fn new(master_seed: u64) -> Self {
        Self { master_seed }
    }

    /// Fresh assignment per trial, so Monte Carlo runs average over the
    /// server's choice of hash functions and vectors too.
    pub fn for_trial(master_seed: u64, trial: u64) -> Self {
        Self::new(combine(master_seed, trial))
    }

    pub fn hash_id(&self, user: usize) -> u64 {
        combine(self.master_seed ^ OLH_TAG, user as u64)
    }

    pub fn vector_seed(&self, user: usize) -> u64 {
        combine(self.master_seed ^ HST_TAG, user as u64)
    }
}

/// Public `{+1,-1}^d` vector of an HST report. `true` means `+1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PublicVector {
    /// Expanded deterministically from a seed.
    Seeded(u64),
    /// Spelled out, as attackers craft them.
    Explicit(Bits),
}

impl PublicVector {
    /// Fills `out` (length `ceil(d/64)`) with the `+1` positions.
    pub fn fill_words(&self, d: usize, out: &mut [u64]) {
        match self {
            PublicVector::Seeded(seed) => {
                for (i, w) in out.iter_mut().enumerate() {
                    *w = seeded_word(*seed, i);
                }
                let rem = d % 64;
                if rem != 0 {
                    if let Some(last) = out.last_mut() {
                        *last &= (1u64 << rem) - 1;
                    }
                }
            }
            PublicVector::Explicit(b) => out.copy_from_slice(b.words()),
        }
    }

    pub fn to_bits(&self, d: usize) -> Bits {
        match self {
            PublicVector::Explicit(b) => b.clone(),
            PublicVector::Seeded(_) => {
                let mut w = vec![0u64; d.div_ceil(64)];
                self.fill_words(d, &mut w);
                Bits::from_words(d, w)
            }
        }
    }

    /// Whether position `v` is `+1`.
    #[inline]
    pub fn get(&self, v: usize) -> bool {
        match self {
            PublicVector::Explicit(b) => b.get(v),
            PublicVector::Seeded(seed) => seeded_word(*seed, v / 64) >> (v % 64) & 1 == 1,
        }
    }
}

#[inline]
fn seeded_word(seed: u64, i: usize) -> u64 {
    mix64(seed.wrapping_add((i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)))
}

/// One user's report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Report {
    Grr { value: usize },
    Oue { bits: Bits },
    Olh { hash_id: u64, value: usize },
    /// Signed report `positive ? +c : -c` with its public vector.
    Hst { positive: bool, vector: PublicVector },
}

impl Report {
    fn kind(&self) -> &'static str {
        match self {
            Report::Grr { .. } => "GRR",
            Report::Oue { .. } => "OUE",
            Report::Olh { .. } => "OLH",
            Report::Hst { .. } => "HST",
        }
    }

    /// Checks that the report is well formed for `params`.
    pub fn validate(&self, params: &ProtocolParams) -> Result<()> {
        let d = params.d;
        let ok = match (self, params.protocol) {
            (Report::Grr { value }, Protocol::Grr) => *value < d,
            (Report::Oue { bits }, Protocol::Oue) => bits.len() == d,
            (Report::Olh { value, .. }, p) if p.is_olh() => *value < params.g(),
            (Report::Hst { vector, .. }, p) if p.is_hst() => match vector {
                PublicVector::Explicit(b) => b.len() == d,
                PublicVector::Seeded(_) => true,
            },
            _ => {
                return Err(Error::ProtocolMismatch {
                    expected: params.protocol.name().into(),
                    found: self.kind().into(),
                })
            }
        };
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("malformed {} report for d={d}", self.kind())))
        }
    }
}

/// Writes the support row of `report` into `out` (length `ceil(d/64)`).
///
/// `keys` are the item keys from [`crate::hash::domain_keys`], used by OLH.
pub fn fill_support(report: &Report, params: &ProtocolParams, keys: &[u64], out: &mut [u64]) {
    out.iter_mut().for_each(|w| *w = 0);
    match report {
        Report::Grr { value } => out[value / 64] |= 1 << (value % 64),
        Report::Oue { bits } => out.copy_from_slice(bits.words()),
        Report::Olh { hash_id, value } => {
            let g = params.g();
            for (v, &k) in keys.iter().enumerate() {
                if hash_with_key(*hash_id, k, g) == *value {
                    out[v / 64] |= 1 << (v % 64);
                }
            }
        }
        Report::Hst { vector, .. } => vector.fill_words(params.d, out),
    }
}

/// Items supported by a report, in increasing order.
///
/// For HST the support is the set of `+1` positions of the public vector.
pub fn support_set(report: &Report, params: &ProtocolParams) -> Result<Vec<usize>> {
    report.validate(params)?;
    let keys = if params.protocol.is_olh() { domain_keys(params.d) } else { Vec::new() };
    let mut row = vec![0u64; params.d.div_ceil(64)];
    fill_support(report, params, &keys, &mut row);
    Ok(crate::bits::iter_ones(&row).collect())
}

/// Everything the collector receives: parameters plus one report per user.
///
/// There is deliberately no field or accessor for which users are fake; that
/// knowledge lives with whoever ran the attack.
///
/// ```compile_fail
/// # use ldp_defense::domain::*;
/// # let params = ProtocolParams::new(Protocol::Oue, 1.0, 4, 0).unwrap();
/// let set = ReportSet::new(params, vec![], 0).unwrap();
/// let _ = set.fake_user_ids();
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct ReportSet {
    params: ProtocolParams,
    reports: Vec<Report>,
    master_seed: u64,
}

impl ReportSet {
    /// Validates each report. `params.n` must equal the number of reports.
    pub fn new(params: ProtocolParams, reports: Vec<Report>, master_seed: u64) -> Result<Self> {
        if params.n != reports.len() {
            return Err(invalid(format!(
                "params.n = {} but {} reports supplied",
                params.n,
                reports.len()
            )));
        }
        for r in &reports {
            r.validate(&params)?;
        }
        Ok(Self { params, reports, master_seed })
    }

    pub fn params(&self) -> &ProtocolParams {
        &self.params
    }

    pub fn reports(&self) -> &[Report] {
        &self.reports
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn len(&self) -> usize {
        self.reports.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reports.is_empty()
    }

    /// The report set with the given users removed. Indices must be sorted.
    pub fn without_users(&self, removed: &[usize]) -> ReportSet {
        let mut it = removed.iter().peekable();
        let reports: Vec<Report> = self
            .reports
            .iter()
            .enumerate()
            .filter(|(i, _)| {
                while it.peek().is_some_and(|&&r| r < *i) {
                    it.next();
                }
                it.peek() != Some(&i)
            })
            .map(|(_, r)| r.clone())
            .collect();
        ReportSet {
            params: self.params.with_n(reports.len()),
            reports,
            master_seed: self.master_seed,
        }
    }

    pub fn into_reports(self) -> Vec<Report> {
        self.reports
    }
}
