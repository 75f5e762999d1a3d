//! Fake-user attacks: baseline, MGA, adaptive MGA and the adaptive pattern
//! attack (APA).
//!
//! Every fake user crafts its report from its own stream
//! `(trial, Attack, user)`, so outcomes do not depend on scheduling.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bits::Bits;
use crate::diffstats::SupportModel;
use crate::domain::{Assignment, Protocol, ProtocolParams, PublicVector, Report};
use crate::error::{invalid, Error, Result};
use crate::hash::{domain_keys, hash_with_key};
use crate::oracles::perturb;
use crate::par;
use crate::rng::{Purpose, RngPolicy};

/// Default per-fake-user budget of hash seeds for OLH-User searches.
pub const DEFAULT_SEARCH_BUDGET: u64 = 2_000_000;
/// Full-coverage seeds an MGA fake collects before picking the best one.
pub const DEFAULT_OLH_CANDIDATES: usize = 4;
/// Full-coverage seeds an APA fake inspects while looking for its size.
const APA_CANDIDATE_CAP: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttackKind {
    Baseline,
    #[serde(rename = "MGA")]
    Mga,
    #[serde(rename = "MGA-A")]
    MgaA,
    #[serde(rename = "APA")]
    Apa,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Baseline => "Baseline",
            AttackKind::Mga => "MGA",
            AttackKind::MgaA => "MGA-A",
            AttackKind::Apa => "APA",
        }
    }
}

impl std::str::FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().replace('_', "-").as_str() {
            "BASELINE" => Ok(AttackKind::Baseline),
            "MGA" => Ok(AttackKind::Mga),
            "MGA-A" => Ok(AttackKind::MgaA),
            "APA" => Ok(AttackKind::Apa),
            _ => Err(invalid(format!("unknown attack `{s}`"))),
        }
    }
}

impl std::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// What the attacker does.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub targets: Vec<usize>,
    /// Fraction of users replaced by fakes, `m = floor(beta * n)`.
    pub beta: f64,
    /// Targets each fake supports under MGA-A and APA.
    #[serde(default)]
    pub r_prime: Option<usize>,
    /// APA support-size profile; defaults to [`build_optimal_omega`].
    #[serde(default)]
    pub omega: Option<Vec<u64>>,
}

impl AttackSpec {
    pub fn fake_count(&self, n: usize) -> usize {
        (self.beta * n as f64 + 1e-9).floor() as usize
    }

    pub fn r(&self) -> usize {
        self.targets.len()
    }

    pub fn validate(&self, params: &ProtocolParams) -> Result<()> {
        if self.targets.is_empty() {
            return Err(invalid("target set is empty"));
        }
        let mut t = self.targets.clone();
        t.sort_unstable();
        t.dedup();
        if t.len() != self.targets.len() {
            return Err(invalid("targets must be distinct"));
        }
        if let Some(&bad) = t.iter().find(|&&x| x >= params.d) {
            return Err(invalid(format!("target {bad} outside domain of size {}", params.d)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(invalid(format!("beta must be in [0, 1], got {}", self.beta)));
        }
        if matches!(self.kind, AttackKind::MgaA | AttackKind::Apa) {
            match self.r_prime {
                Some(rp) if rp >= 1 && rp < self.r() => {}
                _ => return Err(invalid("MGA-A and APA need 1 <= r' < r")),
            }
        }
        if self.kind == AttackKind::MgaA && params.protocol == Protocol::Grr {
            return Err(Error::Unsupported("MGA-A has no subset form on GRR; run MGA instead".into()));
        }
        if self.kind == AttackKind::Apa {
            if !matches!(params.protocol, Protocol::Oue | Protocol::OlhUser | Protocol::HstUser) {
                return Err(Error::Unsupported(format!(
                    "APA needs user-chosen support; {} is not supported",
                    params.protocol
                )));
            }
            if let Some(w) = &self.omega {
                if w.len() != params.d + 1 {
                    return Err(invalid("omega must have d + 1 entries"));
                }
                let m = self.fake_count(params.n) as u64;
                if w.iter().sum::<u64>() != m {
                    return Err(invalid(format!("omega sums to {} but m = {m}", w.iter().sum::<u64>())));
                }
            }
        }
        Ok(())
    }
}

/// Bookkeeping for OLH hash searches.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchStats {
    pub seeds_tried: u64,
    /// Fakes whose report covers every target they aimed at.
    pub full_coverage: usize,
    /// Fakes that fell back to a partially covering seed.
    pub fallbacks: usize,
    /// Smallest number of aimed-at targets covered by any fake.
    pub min_coverage: Option<usize>,
    /// Mean `|support size - wanted size|` over searched fakes.
    pub mean_size_gap: f64,
}

/// Reports crafted by the attacker and which users they replace.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub fake_reports: Vec<Report>,
    pub fake_user_indices: Vec<usize>,
    pub search_stats: SearchStats,
    pub warnings: Vec<String>,
}

/// Everything an attack needs besides its spec.
#[derive(Debug, Clone, Copy)]
pub struct AttackContext<'a> {
    /// Parameters of the attacked population (`n` counts fakes too).
    pub params: &'a ProtocolParams,
    pub policy: &'a RngPolicy,
    pub trial: u64,
    pub search_budget: u64,
    pub olh_candidates: usize,
}

impl<'a> AttackContext<'a> {
    pub fn new(params: &'a ProtocolParams, policy: &'a RngPolicy, trial: u64) -> Self {
        Self { params, policy, trial, search_budget: DEFAULT_SEARCH_BUDGET, olh_candidates: DEFAULT_OLH_CANDIDATES }
    }
}

/// Whether GRR is more exposed to MGA than to the baseline attack.
pub fn grr_vulnerability_check(params: &ProtocolParams, r: usize) -> bool {
    let bound = (2.0 * r as f64 - 1.0) * (params.epsilon.exp() - 1.0) + 3.0 * r as f64;
    params.d as f64 > bound
}

/// `omega[k] = floor(m * P(X = k))`, with the remainder handed to the sizes
/// with the largest fractional parts (ties toward smaller `k`).
pub fn build_optimal_omega(m: usize, params: &ProtocolParams) -> Result<Vec<u64>> {
    let model = SupportModel::new(params)?;
    let raw: Vec<f64> = model.pmf().iter().map(|p| p * m as f64).collect();
    let mut w: Vec<u64> = raw.iter().map(|x| x.floor() as u64).collect();
    let short = m as u64 - w.iter().sum::<u64>().min(m as u64);
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    for &k in order.iter().take(short as usize) {
        w[k] += 1;
    }
    Ok(w)
}

/// Runs the attack named by `spec.kind`.
pub fn craft(spec: &AttackSpec, ctx: &AttackContext, fake_users: &[usize]) -> Result<AttackOutcome> {
    match spec.kind {
        AttackKind::Baseline => baseline_attack(spec, ctx, fake_users),
        AttackKind::Mga => mga(spec, ctx, fake_users),
        AttackKind::MgaA => mga_adaptive(spec, ctx, fake_users),
        AttackKind::Apa => apa(spec, ctx, fake_users),
    }
}

fn check(spec: &AttackSpec, ctx: &AttackContext, fake_users: &[usize], kind: AttackKind) -> Result<()> {
    if spec.kind != kind {
        return Err(invalid(format!("expected a {kind} spec, got {}", spec.kind)));
    }
    spec.validate(ctx.params)?;
    let m = spec.fake_count(ctx.params.n);
    if fake_users.len() != m {
        return Err(invalid(format!("{} fake users supplied but beta * n gives {m}", fake_users.len())));
    }
    Ok(())
}

/// Fakes pick a target uniformly and perturb it honestly.
pub fn baseline_attack(spec: &AttackSpec, ctx: &AttackContext, fake_users: &[usize]) -> Result<AttackOutcome> {
    check(spec, ctx, fake_users, AttackKind::Baseline)?;
    let assignment = Assignment::for_trial(ctx.policy.master_seed, ctx.trial);
    let reports: Result<Vec<Report>> = par::map_slice(fake_users, |&u| {
        let mut rng = ctx.policy.stream(ctx.trial, Purpose::Attack, u as u64);
        let t = spec.targets[rng.random_range(0..spec.targets.len())];
        perturb(t, u, ctx.params, &assignment, &mut rng)
    })
    .into_iter()
    .collect();
    Ok(AttackOutcome {
        fake_reports: reports?,
        fake_user_indices: fake_users.to_vec(),
        search_stats: SearchStats::default(),
        warnings: Vec::new(),
    })
}

/// Maximal gain attack: every fake supports all targets.
pub fn mga(spec: &AttackSpec, ctx: &AttackContext, fake_users: &[usize]) -> Result<AttackOutcome> {
    check(spec, ctx, fake_users, AttackKind::Mga)?;
    let mut targets = spec.targets.clone();
    targets.sort_unstable();
    let plan: Vec<Vec<usize>> = vec![targets; fake_users.len()];
    Crafter::new(ctx)?.run(fake_users, &plan, None)
}

/// MGA on a fresh uniform `r'`-subset of the targets per fake.
pub fn mga_adaptive(spec: &AttackSpec, ctx: &AttackContext, fake_users: &[usize]) -> Result<AttackOutcome> {
    check(spec, ctx, fake_users, AttackKind::MgaA)?;
    let plan = subset_plan(spec, ctx, fake_users);
    Crafter::new(ctx)?.run(fake_users, &plan, None)
}

/// Adaptive pattern attack: MGA-A with fake support sizes drawn to follow
/// the profile `omega`.
pub fn apa(spec: &AttackSpec, ctx: &AttackContext, fake_users: &[usize]) -> Result<AttackOutcome> {
    check(spec, ctx, fake_users, AttackKind::Apa)?;
    let m = fake_users.len();
    let omega = match &spec.omega {
        Some(w) => w.clone(),
        None => build_optimal_omega(m, ctx.params)?,
    };
    let mut sizes: Vec<usize> = omega.iter().enumerate().flat_map(|(k, &c)| std::iter::repeat_n(k, c as usize)).collect();
    sizes.shuffle(&mut ctx.policy.stream(ctx.trial, Purpose::AttackPlan, 0));
    let plan = subset_plan(spec, ctx, fake_users);
    Crafter::new(ctx)?.run(fake_users, &plan, Some(&sizes))
}

/// Per-fake sorted target subsets of size `r'`.
fn subset_plan(spec: &AttackSpec, ctx: &AttackContext, fake_users: &[usize]) -> Vec<Vec<usize>> {
    let rp = spec.r_prime.unwrap_or(spec.r());
    par::map_slice(fake_users, |&u| {
        let mut rng = ctx.policy.stream(ctx.trial, Purpose::AttackPlan, u as u64 + 1);
        let mut s: Vec<usize> = index::sample(&mut rng, spec.r(), rp).into_iter().map(|i| spec.targets[i]).collect();
        s.sort_unstable();
        s
    })
}

/// Result of an OLH seed search.
#[derive(Debug, Clone, Copy)]
struct Found {
    hash_id: u64,
    value: usize,
    covered: usize,
    support: usize,
    seeds: u64,
}

/// Search result per (aimed subset, wanted size), flagged when infeasible.
type SeedTable = BTreeMap<(Vec<usize>, Option<usize>), (Found, bool)>;

struct Crafter<'a> {
    ctx: &'a AttackContext<'a>,
    params: &'a ProtocolParams,
    assignment: Assignment,
    keys: Vec<u64>,
}

struct FakeResult {
    report: Report,
    covered: usize,
    aimed: usize,
    seeds: u64,
    size_gap: Option<f64>,
    fallback: bool,
}

impl<'a> Crafter<'a> {
    fn new(ctx: &'a AttackContext<'a>) -> Result<Self> {
        let params = ctx.params;
        let keys = if params.protocol.is_olh() { domain_keys(params.d) } else { Vec::new() };
        Ok(Self { ctx, params, assignment: Assignment::for_trial(ctx.policy.master_seed, ctx.trial), keys })
    }

    /// Crafts one report per fake. `sizes` switches to APA size shaping.
    fn run(&self, fake_users: &[usize], plan: &[Vec<usize>], sizes: Option<&[usize]>) -> Result<AttackOutcome> {
        let mut warnings = Vec::new();
        if let Some(short) = self.padding_shortfall(plan) {
            warnings.push(short);
        }
        // OLH-User: one hash search per distinct (subset, wanted size), shared
        // by every fake with that plan. The attacker is free to reuse a good
        // hash function, so searching again per fake buys nothing.
        let mut found: SeedTable = BTreeMap::new();
        let mut search_seeds = 0u64;
        if self.params.protocol == Protocol::OlhUser {
            let mut keys: Vec<(Vec<usize>, Option<usize>)> =
                plan.iter().enumerate().map(|(i, s)| (s.clone(), sizes.map(|z| z[i]))).collect();
            keys.sort();
            keys.dedup();
            let results = par::map_range(keys.len(), |i| {
                let mut rng = self.ctx.policy.stream(self.ctx.trial, Purpose::AttackPlan, u64::MAX - i as u64);
                let (aimed, size) = &keys[i];
                let want = size.map_or(self.params.d as f64 / self.params.g() as f64, |k| k as f64);
                let cands = if size.is_some() { APA_CANDIDATE_CAP } else { self.ctx.olh_candidates.max(1) };
                self.search(aimed, Some(want), rng.random(), cands)
            });
            let infeasible = results.iter().filter(|r| !r.1).count();
            if infeasible > 0 {
                warnings.push(format!(
                    "{infeasible} target subset(s) could not be fully covered within {} seeds; using best partial seeds",
                    self.ctx.search_budget
                ));
            }
            for (k, r) in keys.into_iter().zip(results) {
                search_seeds += r.0.seeds;
                found.insert(k, r);
            }
        }
        let results: Vec<FakeResult> = par::map_range(fake_users.len(), |i| {
            let u = fake_users[i];
            let mut rng = self.ctx.policy.stream(self.ctx.trial, Purpose::Attack, u as u64);
            self.craft_one(u, &plan[i], sizes.map(|s| s[i]), &found, &mut rng)
        });
        let mut stats = SearchStats { seeds_tried: search_seeds, ..Default::default() };
        let mut gaps = (0.0, 0usize);
        for r in &results {
            stats.seeds_tried += r.seeds;
            if r.covered == r.aimed {
                stats.full_coverage += 1;
            }
            stats.fallbacks += r.fallback as usize;
            stats.min_coverage = Some(stats.min_coverage.map_or(r.covered, |c| c.min(r.covered)));
            if let Some(g) = r.size_gap {
                gaps.0 += g;
                gaps.1 += 1;
            }
        }
        if gaps.1 > 0 {
            stats.mean_size_gap = gaps.0 / gaps.1 as f64;
        }
        if !self.params.protocol.is_olh() {
            stats.min_coverage = None;
        }
        Ok(AttackOutcome {
            fake_reports: results.into_iter().map(|r| r.report).collect(),
            fake_user_indices: fake_users.to_vec(),
            search_stats: stats,
            warnings,
        })
    }

    /// Padding count for MGA-style reports that support `aimed` targets.
    fn padding(&self, aimed: usize) -> (usize, bool) {
        let d = self.params.d as f64;
        let raw = match self.params.protocol {
            Protocol::Oue => (self.params.p + (d - 1.0) * self.params.q - aimed as f64 + 1e-9).floor(),
            _ => (d / 2.0 - aimed as f64 + 1e-9).floor(),
        };
        if raw < 0.0 {
            (0, true)
        } else {
            (raw as usize, false)
        }
    }

    fn padding_shortfall(&self, plan: &[Vec<usize>]) -> Option<String> {
        if !matches!(self.params.protocol, Protocol::Oue | Protocol::HstUser) {
            return None;
        }
        let aimed = plan.first()?.len();
        let (_, clamped) = self.padding(aimed);
        clamped.then(|| format!("padding formula is negative for {aimed} targets; clamped to 0"))
    }

    /// `aimed` plus `extra` random items outside `aimed`, as a bit vector.
    fn padded<R: Rng>(&self, aimed: &[usize], extra: usize, rng: &mut R) -> Bits {
        let d = self.params.d;
        let mut bits = Bits::from_indices(d, aimed.iter().copied());
        let extra = extra.min(d - aimed.len());
        for j in index::sample(rng, d - aimed.len(), extra) {
            bits.set(nth_outside(aimed, j), true);
        }
        bits
    }

    fn craft_one<R: Rng>(
        &self,
        user: usize,
        aimed: &[usize],
        size: Option<usize>,
        found: &SeedTable,
        rng: &mut R,
    ) -> FakeResult {
        let r = aimed.len();
        let simple = |report| FakeResult { report, covered: r, aimed: r, seeds: 0, size_gap: None, fallback: false };
        match self.params.protocol {
            Protocol::Grr => simple(Report::Grr { value: aimed[rng.random_range(0..r)] }),
            Protocol::Oue | Protocol::HstUser => {
                let extra = match size {
                    Some(k) => k.saturating_sub(r),
                    None => self.padding(r).0,
                };
                let bits = self.padded(aimed, extra, rng);
                if self.params.protocol == Protocol::Oue {
                    simple(Report::Oue { bits })
                } else {
                    simple(Report::Hst { positive: true, vector: PublicVector::Explicit(bits) })
                }
            }
            Protocol::HstServer => {
                let vector = PublicVector::Seeded(self.assignment.vector_seed(user));
                let score: i64 = aimed.iter().map(|&t| if vector.get(t) { 1 } else { -1 }).sum();
                simple(Report::Hst { positive: score >= 0, vector })
            }
            Protocol::OlhServer => {
                let hash_id = self.assignment.hash_id(user);
                let g = self.params.g();
                let mut support = vec![0usize; g];
                for &k in &self.keys {
                    support[hash_with_key(hash_id, k, g)] += 1;
                }
                let mut cover = vec![0usize; g];
                for &t in aimed {
                    cover[hash_with_key(hash_id, self.keys[t], g)] += 1;
                }
                let ideal = self.params.d as f64 / g as f64;
                let value = (0..g)
                    .min_by(|&a, &b| {
                        cover[b]
                            .cmp(&cover[a])
                            .then((support[a] as f64 - ideal).abs().total_cmp(&(support[b] as f64 - ideal).abs()))
                            .then(a.cmp(&b))
                    })
                    .unwrap_or(0);
                FakeResult {
                    report: Report::Olh { hash_id, value },
                    covered: cover[value],
                    aimed: r,
                    seeds: 0,
                    size_gap: Some((support[value] as f64 - ideal).abs()),
                    fallback: false,
                }
            }
            Protocol::OlhUser => {
                let want = size.map(|k| k as f64).unwrap_or(self.params.d as f64 / self.params.g() as f64);
                let (found, full) = found[&(aimed.to_vec(), size)];
                FakeResult {
                    report: Report::Olh { hash_id: found.hash_id, value: found.value },
                    covered: found.covered,
                    aimed: r,
                    seeds: 0,
                    size_gap: Some((found.support as f64 - want).abs()),
                    fallback: !full,
                }
            }
        }
    }

    /// Scans seeds `start, start+1, ...` for a hash mapping every item of
    /// `aimed` to one value. Among the first `cands` such seeds it keeps the
    /// one whose support size is nearest `want` (an exact match stops the
    /// scan). Without a full cover the best partial cover is returned and
    /// the flag is false.
    fn search(&self, aimed: &[usize], want: Option<f64>, start: u64, cands: usize) -> (Found, bool) {
        let g = self.params.g();
        let budget = self.ctx.search_budget.max(1);
        let akeys: Vec<u64> = aimed.iter().map(|&t| self.keys[t]).collect();
        let mut best: Option<(f64, Found)> = None;
        let mut partial = Found { hash_id: start, value: hash_with_key(start, akeys[0], g), covered: 1, support: 0, seeds: 0 };
        let mut found = 0usize;
        let mut tried = 0u64;
        while tried < budget {
            let seed = start.wrapping_add(tried);
            tried += 1;
            let v = hash_with_key(seed, akeys[0], g);
            let covered = 1 + akeys[1..].iter().take_while(|&&k| hash_with_key(seed, k, g) == v).count();
            if covered < akeys.len() {
                if covered > partial.covered {
                    partial = Found { hash_id: seed, value: v, covered, support: 0, seeds: 0 };
                }
                continue;
            }
            let Some(want) = want else {
                return (Found { hash_id: seed, value: v, covered, support: 0, seeds: tried }, true);
            };
            let support = self.keys.iter().filter(|&&k| hash_with_key(seed, k, g) == v).count();
            let gap = (support as f64 - want).abs();
            if best.as_ref().is_none_or(|(bg, _)| gap < *bg) {
                best = Some((gap, Found { hash_id: seed, value: v, covered, support, seeds: 0 }));
            }
            found += 1;
            if found >= cands || gap < 0.5 {
                break;
            }
        }
        match best {
            Some((_, f)) => (Found { seeds: tried, ..f }, true),
            None => {
                let support = self.keys.iter().filter(|&&k| hash_with_key(partial.hash_id, k, g) == partial.value).count();
                (Found { support, seeds: tried, ..partial }, false)
            }
        }
    }
}

/// The `j`-th item (0-based) not in the sorted list `skip`.
fn nth_outside(skip: &[usize], j: usize) -> usize {
    let mut x = j;
    for &s in skip {
        if s <= x {
            x += 1;
        } else {
            break;
        }
    }
    x
}
