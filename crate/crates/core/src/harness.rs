//! Experiment orchestration: dataset, perturbation, attack, detection path,
//! recovery and metrics over trials and parameter sweeps.
//!
//! The harness is the only place that knows which users are fake. Detectors
//! receive a [`ReportSet`] built from reports alone.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::asd::{asd_detect, AsdConfig};
use crate::attacks::{craft, AttackContext, AttackKind, AttackSpec, DEFAULT_OLH_CANDIDATES, DEFAULT_SEARCH_BUDGET};
use crate::data::{self, Dataset, DatasetSpec};
use crate::diffstats::{diffstats_detect, DiffstatsConfig};
use crate::domain::{Protocol, ProtocolParams, Report, ReportSet};
use crate::error::{invalid, Error, Result};
use crate::hash::combine;
use crate::metrics::{detection_accuracy, f1, mse, Accuracy};
use crate::oracles::{perturb_population, tally_reports, EstimateVector};
use crate::par;
use crate::postprocess::{recover, RecoveryMethod};
use crate::rng::{Purpose, RngPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectorChoice {
    None,
    Diffstats,
    Asd,
    Both,
}

/// Which mitigation path feeds recovery.
///
/// Path 1 removes identified fakes before aggregating. Path 2 and Path 3
/// aggregate everything and run attack detection; Path 2 is the positive
/// outcome (recovery is flagged as under attack), Path 3 the negative one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PathPolicy {
    Path1,
    Path2,
    Path3,
    Auto,
}

fn default_beta() -> f64 {
    0.05
}
fn default_r() -> usize {
    10
}
fn default_r_prime() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_r")]
    pub r: usize,
    #[serde(default = "default_r_prime")]
    pub r_prime: usize,
    /// Explicit targets; otherwise `r` distinct items drawn at random.
    #[serde(default)]
    pub targets: Option<Vec<usize>>,
}

/// Sweep axes. An empty axis keeps the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepAxes {
    #[serde(default)]
    pub epsilon: Vec<f64>,
    #[serde(default)]
    pub beta: Vec<f64>,
    #[serde(default)]
    pub r: Vec<usize>,
    #[serde(default)]
    pub r_prime: Vec<usize>,
}

fn default_trials() -> usize {
    5
}
fn default_budget() -> u64 {
    DEFAULT_SEARCH_BUDGET
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub dataset: DatasetSpec,
    pub protocol: Protocol,
    pub epsilon: f64,
    #[serde(default)]
    pub attack: Option<AttackConfig>,
    pub detector: DetectorChoice,
    pub path: PathPolicy,
    #[serde(default)]
    pub recovery: Option<RecoveryMethod>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    pub master_seed: u64,
    #[serde(default)]
    pub sweep: SweepAxes,
    #[serde(default)]
    pub diffstats: DiffstatsConfig,
    #[serde(default)]
    pub asd: AsdConfig,
    #[serde(default = "default_budget")]
    pub search_budget: u64,
}

/// One point of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub epsilon: f64,
    pub beta: f64,
    pub r: usize,
    pub r_prime: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    /// Path actually taken: `none`, `path1`, `path2` or `path3`.
    pub path: String,
    pub fake_count: usize,
    pub flagged: Option<usize>,
    pub f1: Option<f64>,
    pub mse: f64,
    pub igr: Option<f64>,
    /// `sum_T (f_final - f_before)`.
    pub target_gain: Option<f64>,
    /// `sum_T (f_base - f_before)`.
    pub baseline_gain: Option<f64>,
    pub asd_attacked: Option<bool>,
    pub asd_clean: Option<bool>,
    pub recovery_flagged: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub perturb_ms: f64,
    pub attack_ms: f64,
    pub detect_ms: f64,
    pub recover_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub f1: Option<f64>,
    pub mse: f64,
    /// Ratio of trial means.
    pub igr: Option<f64>,
    pub accuracy: Option<Accuracy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub spec_hash: String,
    pub protocol: Protocol,
    pub attack: Option<AttackKind>,
    pub detector: DetectorChoice,
    pub recovery: Option<RecoveryMethod>,
    pub point: SweepPoint,
    pub targets: Vec<usize>,
    pub trials: Vec<TrialRecord>,
    pub summary: Summary,
    pub notes: Vec<String>,
    pub stage_times: StageTimes,
}

/// Attack/protocol/detector combinations the workbench can run.
pub const APPLICABILITY: &str = "\
applicability:
  Baseline  : all protocols
  MGA       : all protocols
  MGA-A     : OUE, OLH-User, OLH-Server, HST-User, HST-Server (on GRR it runs as MGA)
  APA       : OUE, OLH-User, HST-User
  Diffstats : every protocol except GRR
  ASD       : all protocols
  path1 needs detector diffstats or both; path2/path3 need asd or both";

fn incompatible(msg: String) -> Error {
    Error::Unsupported(format!("{msg}\n{APPLICABILITY}"))
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(invalid("trials must be at least 1"));
        }
        let diff = matches!(self.detector, DetectorChoice::Diffstats | DetectorChoice::Both);
        let asd = matches!(self.detector, DetectorChoice::Asd | DetectorChoice::Both);
        if diff && !self.protocol.supports_fake_detection() {
            return Err(incompatible(format!("Diffstats cannot run on {}", self.protocol)));
        }
        match self.path {
            PathPolicy::Path1 if !diff => return Err(incompatible("path1 needs Diffstats".into())),
            PathPolicy::Path2 | PathPolicy::Path3 if !asd => {
                return Err(incompatible("path2/path3 need ASD".into()))
            }
            PathPolicy::Path1 if self.detector == DetectorChoice::Diffstats => {}
            _ if self.detector == DetectorChoice::Diffstats && self.path != PathPolicy::Auto => {
                return Err(incompatible("Diffstats alone only supports path1 or auto".into()))
            }
            _ => {}
        }
        if let Some(a) = &self.attack {
            if a.kind == AttackKind::Apa && !matches!(self.protocol, Protocol::Oue | Protocol::OlhUser | Protocol::HstUser) {
                return Err(incompatible(format!("APA cannot run on {}", self.protocol)));
            }
        }
        self.asd.validate()?;
        Ok(())
    }

    pub fn points(&self) -> Vec<SweepPoint> {
        let a = self.attack.as_ref();
        let base = SweepPoint {
            epsilon: self.epsilon,
            beta: a.map_or(0.0, |a| a.beta),
            r: a.map_or(0, |a| a.r),
            r_prime: a.map_or(0, |a| a.r_prime),
        };
        let or = |v: &Vec<f64>, b: f64| if v.is_empty() { vec![b] } else { v.clone() };
        let oru = |v: &Vec<usize>, b: usize| if v.is_empty() { vec![b] } else { v.clone() };
        let mut out = Vec::new();
        for &epsilon in &or(&self.sweep.epsilon, base.epsilon) {
            for &beta in &or(&self.sweep.beta, base.beta) {
                for &r in &oru(&self.sweep.r, base.r) {
                    for &r_prime in &oru(&self.sweep.r_prime, base.r_prime) {
                        out.push(SweepPoint { epsilon, beta, r, r_prime });
                    }
                }
            }
        }
        out
    }

    /// Stable hash of the serialized spec.
    pub fn hash(&self) -> String {
        let s = serde_json::to_string(self).unwrap_or_default();
        let h = s.bytes().fold(0x51_7cc1_b727_220a_u64, |h, b| combine(h, b as u64));
        format!("{h:016x}")
    }
}

/// Runs the base point of `spec`, ignoring sweep axes.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<RunRecord> {
    spec.validate()?;
    let ds = data::load(&spec.dataset)?;
    let a = spec.attack.as_ref();
    let point = SweepPoint {
        epsilon: spec.epsilon,
        beta: a.map_or(0.0, |a| a.beta),
        r: a.map_or(0, |a| a.r),
        r_prime: a.map_or(0, |a| a.r_prime),
    };
    run_point(spec, &ds, point)
}

/// Runs every point of the sweep and renders the CSV.
pub fn sweep(spec: &ExperimentSpec) -> Result<(Vec<RunRecord>, String)> {
    spec.validate()?;
    let ds = data::load(&spec.dataset)?;
    let recs: Result<Vec<RunRecord>> = spec.points().into_iter().map(|p| run_point(spec, &ds, p)).collect();
    let recs = recs?;
    let csv = records_to_csv(&recs);
    Ok((recs, csv))
}

fn targets_for(spec: &ExperimentSpec, cfg: &AttackConfig, r: usize, d: usize) -> Result<Vec<usize>> {
    if let Some(t) = &cfg.targets {
        return Ok(t.clone());
    }
    if r == 0 || r > d {
        return Err(invalid(format!("cannot pick {r} targets from {d} items")));
    }
    let mut rng = RngPolicy::new(spec.master_seed).stream(0, Purpose::Targets, r as u64);
    let mut t = index::sample(&mut rng, d, r).into_vec();
    t.sort_unstable();
    Ok(t)
}

struct TrialOut {
    rec: TrialRecord,
    times: StageTimes,
    notes: Vec<String>,
}

fn gain(f: &[f64], before: &[f64], targets: &[usize]) -> f64 {
    targets.iter().map(|&t| f[t] - before[t]).sum()
}

fn subtally(reports: &[Report], users: &[usize], params: &ProtocolParams) -> Vec<u64> {
    let picked: Vec<Report> = users.iter().map(|&u| reports[u].clone()).collect();
    tally_reports(&picked, params)
}

fn swap_tally(base: &[u64], out: &[u64], inn: &[u64]) -> Vec<u64> {
    base.iter().zip(out).zip(inn).map(|((b, o), i)| b - o + i).collect()
}

fn run_point(spec: &ExperimentSpec, ds: &Dataset, point: SweepPoint) -> Result<RunRecord> {
    let n = ds.n();
    let d = ds.d();
    let params = ProtocolParams::new(spec.protocol, point.epsilon, d, n)?;
    let policy = RngPolicy::new(spec.master_seed);
    let truth = ds.truth.freqs();
    let mut notes = Vec::new();

    let attack = match &spec.attack {
        None => None,
        Some(cfg) => {
            let mut kind = cfg.kind;
            if kind == AttackKind::MgaA && spec.protocol == Protocol::Grr {
                kind = AttackKind::Mga;
                notes.push("MGA-A has no subset form on GRR; ran MGA".into());
            }
            let targets = targets_for(spec, cfg, point.r, d)?;
            let r_prime = matches!(kind, AttackKind::MgaA | AttackKind::Apa).then_some(point.r_prime);
            let s = AttackSpec { kind, targets, beta: point.beta, r_prime, omega: None };
            s.validate(&params)?;
            Some(s)
        }
    };
    if attack.as_ref().is_some_and(|a| a.kind == AttackKind::Apa) && spec.detector == DetectorChoice::Diffstats {
        notes.push("APA shapes fake support sizes to evade Diffstats; path2 (ASD) is recommended".into());
    }

    let outs: Vec<Result<TrialOut>> =
        par::map_range(spec.trials, |t| run_trial(spec, ds, &params, &policy, attack.as_ref(), &truth, t));
    let mut trials = Vec::with_capacity(spec.trials);
    let mut times = StageTimes::default();
    for o in outs {
        let o = o?;
        times.perturb_ms += o.times.perturb_ms;
        times.attack_ms += o.times.attack_ms;
        times.detect_ms += o.times.detect_ms;
        times.recover_ms += o.times.recover_ms;
        for note in o.notes {
            if !notes.contains(&note) {
                notes.push(note);
            }
        }
        trials.push(o.rec);
    }
    let summary = summarize(&trials, attack.as_ref().map_or(0, |a| a.r()));
    Ok(RunRecord {
        spec_hash: spec.hash(),
        protocol: spec.protocol,
        attack: attack.as_ref().map(|a| a.kind),
        detector: spec.detector,
        recovery: spec.recovery,
        point,
        targets: attack.as_ref().map(|a| a.targets.clone()).unwrap_or_default(),
        trials,
        summary,
        notes,
        stage_times: times,
    })
}

fn summarize(trials: &[TrialRecord], r: usize) -> Summary {
    let f1s: Vec<f64> = trials.iter().filter_map(|t| t.f1).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let igr = {
        let num: Vec<f64> = trials.iter().filter_map(|t| t.target_gain).collect();
        let den: Vec<f64> = trials.iter().filter_map(|t| t.baseline_gain).collect();
        (r > 0 && !den.is_empty() && mean(&den) > 0.0).then(|| mean(&num) / (mean(&den) * r as f64))
    };
    let mut outcomes = Vec::new();
    for t in trials {
        if let Some(x) = t.asd_attacked {
            outcomes.push((x, true));
        }
        if let Some(x) = t.asd_clean {
            outcomes.push((x, false));
        }
    }
    Summary {
        f1: (!f1s.is_empty()).then(|| mean(&f1s)),
        mse: mean(&trials.iter().map(|t| t.mse).collect::<Vec<_>>()),
        igr,
        accuracy: detection_accuracy(&outcomes).ok(),
    }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn run_trial(
    spec: &ExperimentSpec,
    ds: &Dataset,
    params: &ProtocolParams,
    policy: &RngPolicy,
    attack: Option<&AttackSpec>,
    truth: &[f64],
    t: usize,
) -> Result<TrialOut> {
    let n = ds.n();
    let trial = t as u64;
    let mut times = StageTimes::default();
    let mut notes = Vec::new();

    let clock = Instant::now();
    let clean = perturb_population(&ds.items, params, policy, trial)?;
    let clean_tally = tally_reports(&clean, params);
    times.perturb_ms = ms(clock);
    let before = EstimateVector::from_tally(params, &clean_tally);

    // Attack: replace a random subset of users with crafted reports.
    let clock = Instant::now();
    let (reports, tally, fakes, base_est) = match attack {
        None => (clean, clean_tally, Vec::new(), None),
        Some(a) => {
            let m = a.fake_count(n);
            let mut rng = policy.stream(trial, Purpose::FakeSelection, 0);
            let mut fakes = index::sample(&mut rng, n, m).into_vec();
            fakes.sort_unstable();
            let ctx = AttackContext {
                params,
                policy,
                trial,
                search_budget: spec.search_budget,
                olh_candidates: DEFAULT_OLH_CANDIDATES,
            };
            let out = craft(a, &ctx, &fakes)?;
            notes.extend(out.warnings.iter().cloned());
            let removed = subtally(&clean, &fakes, params);
            let attacked_tally = swap_tally(&clean_tally, &removed, &tally_reports(&out.fake_reports, params));
            let base_est = if a.kind == AttackKind::Baseline {
                EstimateVector::from_tally(params, &attacked_tally)
            } else {
                let bspec = AttackSpec { kind: AttackKind::Baseline, r_prime: None, omega: None, ..a.clone() };
                let b = craft(&bspec, &ctx, &fakes)?;
                EstimateVector::from_tally(params, &swap_tally(&clean_tally, &removed, &tally_reports(&b.fake_reports, params)))
            };
            let mut reports = clean;
            for (&u, r) in fakes.iter().zip(out.fake_reports) {
                reports[u] = r;
            }
            (reports, attacked_tally, fakes, Some(base_est))
        }
    };
    times.attack_ms = ms(clock);
    let attacked = EstimateVector::from_tally(params, &tally);

    // Detection. Detectors see the report set and public parameters only.
    let clock = Instant::now();
    let set = ReportSet::new(*params, reports, policy.master_seed)?;
    let run_diff = matches!(spec.detector, DetectorChoice::Diffstats | DetectorChoice::Both);
    let run_asd = matches!(spec.detector, DetectorChoice::Asd | DetectorChoice::Both);
    let diff = if run_diff { Some(diffstats_detect(&set, &spec.diffstats)?) } else { None };
    let asd_att = if run_asd { Some(asd_detect(&attacked, params, &spec.asd)?) } else { None };
    let asd_clean = if run_asd && attack.is_some() { Some(asd_detect(&before, params, &spec.asd)?.attack_detected) } else { None };
    let asd_clean = asd_clean.or_else(|| asd_att.as_ref().filter(|_| attack.is_none()).map(|r| r.attack_detected));
    times.detect_ms = ms(clock);

    let use_path1 = match (spec.detector, spec.path) {
        (DetectorChoice::None, _) => false,
        (DetectorChoice::Diffstats, _) => true,
        (DetectorChoice::Asd, _) => false,
        (DetectorChoice::Both, PathPolicy::Path1) => true,
        (DetectorChoice::Both, PathPolicy::Auto) => {
            spec.protocol.supports_fake_detection() && attack.is_none_or(|a| a.kind != AttackKind::Apa)
        }
        (DetectorChoice::Both, _) => false,
    };
    let (est, est_params, path) = if use_path1 {
        let flagged = &diff.as_ref().expect("diffstats ran").fake_user_ids;
        let out = subtally(set.reports(), flagged, params);
        let kept: Vec<u64> = tally.iter().zip(&out).map(|(a, b)| a - b).collect();
        let p2 = params.with_n(n - flagged.len());
        (EstimateVector::from_tally(&p2, &kept), p2, "path1")
    } else {
        let path = match &asd_att {
            None => "none",
            Some(r) if r.attack_detected => "path2",
            Some(_) => "path3",
        };
        (attacked.clone(), *params, path)
    };

    let clock = Instant::now();
    let (final_freqs, recovery_flagged) = match spec.recovery {
        None => (est.freqs.clone(), false),
        Some(m) => {
            let r = recover(m, &est, &est_params)?;
            (r.freqs, r.infeasible || r.fallback)
        }
    };
    times.recover_ms = ms(clock);

    let score = diff.as_ref().filter(|_| !fakes.is_empty()).map(|dr| f1(&dr.fake_user_ids, &fakes));
    let (target_gain, baseline_gain, igr) = match (attack, &base_est) {
        (Some(a), Some(b)) => {
            let num = gain(&final_freqs, &before.freqs, &a.targets);
            let den = gain(&b.freqs, &before.freqs, &a.targets);
            let igr = (den > 0.0).then(|| num / (den * a.r() as f64));
            (Some(num), Some(den), igr)
        }
        _ => (None, None, None),
    };
    Ok(TrialOut {
        rec: TrialRecord {
            trial: t,
            path: path.into(),
            fake_count: fakes.len(),
            flagged: diff.as_ref().map(|d| d.fake_user_ids.len()),
            f1: score.and_then(|s| s.f1),
            mse: mse(&final_freqs, truth)?,
            igr,
            target_gain,
            baseline_gain,
            asd_attacked: asd_att.filter(|_| attack.is_some()).map(|r| r.attack_detected),
            asd_clean,
            recovery_flagged,
        },
        times,
        notes,
    })
}

/// Column header of the results CSV.
pub const CSV_HEADER: &str =
    "protocol,epsilon,beta,r,r_prime,attack,detector,recovery,trial,path,fake_count,flagged,f1,mse,igr,accuracy,ci_lo,ci_hi";

fn opt<T: std::fmt::Display>(x: Option<T>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// One row per (point, trial) plus one `mean` row per point.
pub fn records_to_csv(recs: &[RunRecord]) -> String {
    let mut s = String::new();
    s.push_str(CSV_HEADER);
    s.push('\n');
    for rec in recs {
        let p = rec.point;
        let lead = format!(
            "{},{},{},{},{},{},{},{}",
            rec.protocol,
            p.epsilon,
            p.beta,
            p.r,
            p.r_prime,
            opt(rec.attack),
            serde_json::to_value(rec.detector).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
            opt(rec.recovery),
        );
        for t in &rec.trials {
            let _ = writeln!(
                s,
                "{lead},{},{},{},{},{},{},{},,,",
                t.trial,
                t.path,
                t.fake_count,
                opt(t.flagged),
                opt(t.f1),
                t.mse,
                opt(t.igr),
            );
        }
        let acc = rec.summary.accuracy;
        let _ = writeln!(
            s,
            "{lead},mean,,{},,{},{},{},{},{},{}",
            rec.trials.first().map_or(0, |t| t.fake_count),
            opt(rec.summary.f1),
            rec.summary.mse,
            opt(rec.summary.igr),
            opt(acc.map(|a| a.value)),
            opt(acc.map(|a| a.ci_lo)),
            opt(acc.map(|a| a.ci_hi)),
        );
    }
    s
}
