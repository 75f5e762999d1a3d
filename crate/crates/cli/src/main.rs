//! `ldpd`: command-line front end for the LDP poisoning workbench.
//!
//! Exit codes: 0 ok, 1 a detector fired, 2 error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ldp_defense::asd::{asd_detect, AsdConfig};
use ldp_defense::attacks::{craft, AttackContext, AttackKind, AttackSpec, DEFAULT_SEARCH_BUDGET};
use ldp_defense::data::{self, DataSource, DatasetSpec};
use ldp_defense::diffstats::{diffstats_detect, DetectionResult, DiffstatsConfig, ExpectedScale};
use ldp_defense::domain::{Protocol, ProtocolParams, ReportSet};
use ldp_defense::harness::{self, ExperimentSpec};
use ldp_defense::io::{self, AttackManifest};
use ldp_defense::metrics::{f1, mse};
use ldp_defense::oracles::{aggregate, perturb_population, EstimateVector};
use ldp_defense::postprocess::{recover, RecoveryMethod};
use ldp_defense::rng::{Purpose, RngPolicy};
use rand::seq::index;
use serde_json::json;

#[derive(Parser)]
#[command(name = "ldpd", version, about = "Poisoning attacks, detection and recovery for LDP frequency estimation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset.
    #[command(subcommand)]
    Synth(Synth),
    /// Perturb a dataset into a report file.
    Perturb(PerturbArgs),
    /// Replace a fraction of users with crafted reports.
    Attack(AttackArgs),
    /// Print frequency estimates for a report file.
    Aggregate(AggregateArgs),
    /// Run a detector. Exits 1 when it fires.
    #[command(subcommand)]
    Detect(Detect),
    /// Post-process estimates.
    Recover(RecoverArgs),
    /// Score detections and estimates against ground truth.
    Eval(EvalArgs),
    /// Run configured experiments.
    #[command(subcommand)]
    Experiment(Experiment),
}

#[derive(Subcommand)]
enum Synth {
    /// Zipf-distributed item counts, written as a counts CSV.
    Zipf {
        #[arg(long, default_value_t = 1.5)]
        s: f64,
        #[arg(long, default_value_t = 1024)]
        d: usize,
        #[arg(long, default_value_t = 100_000)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct PerturbArgs {
    /// Counts CSV (`item,count`), or a raw CSV when `--column` is given.
    #[arg(long)]
    data: PathBuf,
    /// Column holding each user's item in a raw CSV.
    #[arg(long)]
    column: Option<String>,
    /// GRR, OUE, OLH-User, OLH-Server, HST-User or HST-Server.
    #[arg(long)]
    protocol: Protocol,
    #[arg(long, default_value_t = 1.0)]
    epsilon: f64,
    /// Master seed for perturbation and public hash/vector assignment.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    trial: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    input: PathBuf,
    /// Baseline, MGA, MGA-A or APA.
    #[arg(long)]
    kind: AttackKind,
    #[arg(long, default_value_t = 0.05)]
    beta: f64,
    /// Comma-separated target items. Drawn at random when omitted.
    #[arg(long, value_delimiter = ',')]
    targets: Option<Vec<usize>>,
    /// Number of random targets when `--targets` is omitted.
    #[arg(long, default_value_t = 10)]
    r: usize,
    #[arg(long)]
    r_prime: Option<usize>,
    #[arg(long, default_value_t = 0)]
    trial: u64,
    /// Hash seeds an OLH-User attacker may try per search.
    #[arg(long, default_value_t = DEFAULT_SEARCH_BUDGET)]
    budget: u64,
    /// Attacked report file. Fake user ids go to `<out>.fakes`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AggregateArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Detect {
    /// Identify fake users from support-size statistics.
    Fake {
        #[arg(long)]
        input: PathBuf,
        #[arg(long = "L", default_value_t = 6)]
        l: usize,
        #[arg(long)]
        max_iters: Option<usize>,
        /// Keep the expected histogram at the full population (`full`) or
        /// rescale it to the users left after a removal (`remaining`).
        #[arg(long, value_enum, default_value = "full")]
        expected: Scale,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decide whether estimates show signs of an attack.
    Asd {
        /// Estimates JSON or a report file.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0.02)]
        lambda: f64,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Scale {
    Remaining,
    Full,
}

#[derive(Args)]
struct RecoverArgs {
    /// Estimates JSON or a report file.
    #[arg(long)]
    input: PathBuf,
    /// norm-sub, base-cut, normalization, ldprecover or rsn.
    #[arg(long)]
    method: RecoveryMethod,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Detection JSON from `detect fake`.
    #[arg(long)]
    detection: Option<PathBuf>,
    /// Attack sidecar (`<reports>.fakes`).
    #[arg(long)]
    fakes: Option<PathBuf>,
    /// JSON with a `freqs` array to score against `--truth`.
    #[arg(long)]
    estimate: Option<PathBuf>,
    /// Counts CSV of the true distribution.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Clean estimates, for the item gain ratio.
    #[arg(long)]
    before: Option<PathBuf>,
    /// Estimates under the baseline attack, for the item gain ratio.
    #[arg(long)]
    baseline: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Experiment {
    /// Run the base point of a config and print its record.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every sweep point and write the results CSV.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Full records, including stage wall times.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match run(cli.cmd) {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("LDPD_THREADS") else { return Ok(()) };
    let n: usize = v.parse().with_context(|| format!("LDPD_THREADS must be a positive integer, got `{v}`"))?;
    if n == 0 {
        bail!("LDPD_THREADS must be at least 1");
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn emit(value: &serde_json::Value, out: Option<&Path>) -> Result<()> {
    let s = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => fs::write(p, s + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => {
            use std::io::Write;
            // A closed pipe (`| head`) is not an error worth reporting.
            match writeln!(std::io::stdout().lock(), "{s}") {
                Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => {}
                r => r?,
            }
        }
    }
    Ok(())
}

fn is_report_file(p: &Path) -> Result<bool> {
    use std::io::Read;
    let mut head = Vec::with_capacity(16);
    fs::File::open(p)
        .with_context(|| format!("reading {}", p.display()))?
        .take(13)
        .read_to_end(&mut head)?;
    Ok(head == b"# ldp-reports")
}

fn read_reports(p: &Path) -> Result<ReportSet> {
    io::read_reports(p).with_context(|| format!("reading reports from {}", p.display()))
}

/// Estimates from either a report file or an estimates JSON.
fn load_estimates(p: &Path) -> Result<(EstimateVector, ProtocolParams)> {
    if is_report_file(p)? {
        let set = read_reports(p)?;
        Ok((aggregate(&set), *set.params()))
    } else {
        let est: EstimateVector = io::read_json(p).with_context(|| format!("reading estimates from {}", p.display()))?;
        let params = est.params()?;
        Ok((est, params))
    }
}

fn read_freqs(p: &Path) -> Result<Vec<f64>> {
    let v: serde_json::Value = io::read_json(p).with_context(|| format!("reading {}", p.display()))?;
    let arr = v.get("freqs").and_then(|f| f.as_array()).with_context(|| format!("{} has no `freqs` array", p.display()))?;
    arr.iter().map(|x| x.as_f64().context("non-numeric frequency")).collect()
}

fn run(cmd: Cmd) -> Result<bool> {
    match cmd {
        Cmd::Synth(Synth::Zipf { s, d, n, seed, out }) => {
            let ds = data::synthesize_zipf(s, d, n, seed)?;
            data::write_counts_csv(&out, &ds.labels, &ds.truth)?;
            eprintln!("wrote {d} items, {n} users to {}", out.display());
            Ok(false)
        }
        Cmd::Perturb(a) => {
            let source = match a.column {
                Some(item_column) => DataSource::CsvRaw { path: a.data, item_column },
                None => DataSource::CsvCounts { path: a.data },
            };
            let ds = data::load(&DatasetSpec { source, seed: a.seed })?;
            let params = ProtocolParams::new(a.protocol, a.epsilon, ds.d(), ds.n())?;
            let reports = perturb_population(&ds.items, &params, &RngPolicy::new(a.seed), a.trial)?;
            io::write_reports(&a.out, &ReportSet::new(params, reports, a.seed)?)?;
            eprintln!("wrote {} {} reports to {}", ds.n(), a.protocol, a.out.display());
            Ok(false)
        }
        Cmd::Attack(a) => attack(a),
        Cmd::Aggregate(a) => {
            let set = read_reports(&a.input)?;
            emit(&serde_json::to_value(aggregate(&set))?, a.out.as_deref())?;
            Ok(false)
        }
        Cmd::Detect(Detect::Fake { input, l, max_iters, expected, out }) => {
            let set = read_reports(&input)?;
            let expected_scale = match expected {
                Scale::Remaining => ExpectedScale::Remaining,
                Scale::Full => ExpectedScale::Full,
            };
            let r: DetectionResult = diffstats_detect(&set, &DiffstatsConfig { l, max_iters, expected_scale })?;
            let flagged = !r.fake_user_ids.is_empty();
            match out {
                Some(p) => {
                    io::write_json(&p, &r)?;
                    eprintln!("flagged {} of {} users (E_min {:.3})", r.fake_user_ids.len(), set.len(), r.e_min);
                }
                None => emit(&serde_json::to_value(&r)?, None)?,
            }
            Ok(flagged)
        }
        Cmd::Detect(Detect::Asd { input, lambda }) => {
            let (est, params) = load_estimates(&input)?;
            let cfg = AsdConfig { lambda, ..AsdConfig::default() };
            let r = asd_detect(&est, &params, &cfg)?;
            emit(&serde_json::to_value(&r)?, None)?;
            Ok(r.attack_detected)
        }
        Cmd::Recover(a) => {
            let (est, params) = load_estimates(&a.input)?;
            let r = recover(a.method, &est, &params)?;
            let low = r.region_low.as_ref().map(|v| v.len());
            let mut v = serde_json::to_value(&r)?;
            if let (Some(low), Some(obj)) = (low, v.as_object_mut()) {
                obj.insert("region_low_size".into(), json!(low));
                obj.insert("region_high_size".into(), json!(est.d - low));
            }
            emit(&v, a.out.as_deref())?;
            Ok(false)
        }
        Cmd::Eval(a) => eval(a),
        Cmd::Experiment(Experiment::Run { config, out }) => {
            let spec = read_spec(&config)?;
            let rec = harness::run_experiment(&spec)?;
            emit(&serde_json::to_value(&rec)?, out.as_deref())?;
            Ok(false)
        }
        Cmd::Experiment(Experiment::Sweep { config, out, json }) => {
            let spec = read_spec(&config)?;
            let (recs, csv) = harness::sweep(&spec)?;
            fs::write(&out, csv).with_context(|| format!("writing {}", out.display()))?;
            if let Some(j) = json {
                io::write_json(&j, &recs)?;
            }
            eprintln!("wrote {} sweep point(s) to {}", recs.len(), out.display());
            Ok(false)
        }
    }
}

fn read_spec(p: &Path) -> Result<ExperimentSpec> {
    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    let spec = if p.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
    } else {
        toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
    };
    Ok(spec)
}

fn attack(a: AttackArgs) -> Result<bool> {
    let set = read_reports(&a.input)?;
    let params = *set.params();
    let policy = RngPolicy::new(set.master_seed());
    let targets = match a.targets {
        Some(t) => t,
        None => {
            if a.r == 0 || a.r > params.d {
                bail!("cannot draw {} targets from {} items", a.r, params.d);
            }
            let mut rng = policy.stream(0, Purpose::Targets, a.r as u64);
            let mut t = index::sample(&mut rng, params.d, a.r).into_vec();
            t.sort_unstable();
            t
        }
    };
    let mut kind = a.kind;
    if kind == AttackKind::MgaA && params.protocol == Protocol::Grr {
        eprintln!("note: MGA-A has no subset form on GRR; running MGA");
        kind = AttackKind::Mga;
    }
    let r_prime = match kind {
        AttackKind::MgaA | AttackKind::Apa => Some(a.r_prime.unwrap_or(4)),
        _ => None,
    };
    let spec = AttackSpec { kind, targets, beta: a.beta, r_prime, omega: None };
    spec.validate(&params)?;
    let n = set.len();
    let m = spec.fake_count(n);
    let mut rng = policy.stream(a.trial, Purpose::FakeSelection, 0);
    let mut fakes = index::sample(&mut rng, n, m).into_vec();
    fakes.sort_unstable();
    let ctx = AttackContext { search_budget: a.budget, ..AttackContext::new(&params, &policy, a.trial) };
    let out = craft(&spec, &ctx, &fakes)?;
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    let seed = set.master_seed();
    let mut reports = set.into_reports();
    for (&u, r) in fakes.iter().zip(out.fake_reports) {
        reports[u] = r;
    }
    io::write_reports(&a.out, &ReportSet::new(params, reports, seed)?)?;
    let manifest =
        AttackManifest { kind, targets: spec.targets.clone(), beta: a.beta, r_prime, fake_user_ids: fakes };
    io::write_json(&io::sidecar_path(&a.out), &manifest)?;
    eprintln!("replaced {m} of {n} users; fake ids in {}", io::sidecar_path(&a.out).display());
    Ok(false)
}

fn eval(a: EvalArgs) -> Result<bool> {
    let mut out = serde_json::Map::new();
    let manifest: Option<AttackManifest> = a.fakes.as_deref().map(io::read_json).transpose()?;
    if let Some(det) = &a.detection {
        let m = manifest.as_ref().context("--detection needs --fakes")?;
        let r: DetectionResult = io::read_json(det)?;
        out.insert("f1".into(), serde_json::to_value(f1(&r.fake_user_ids, &m.fake_user_ids))?);
    }
    if let Some(est) = &a.estimate {
        let freqs = read_freqs(est)?;
        if let Some(t) = &a.truth {
            let ds = data::load(&DatasetSpec { source: DataSource::CsvCounts { path: t.clone() }, seed: 0 })?;
            out.insert("mse".into(), json!(mse(&freqs, &ds.truth.freqs())?));
        }
        if let (Some(b), Some(base)) = (&a.before, &a.baseline) {
            let m = manifest.as_ref().context("the item gain ratio needs --fakes for the targets")?;
            let (before, base) = (read_freqs(b)?, read_freqs(base)?);
            let pick = |f: &[f64]| m.targets.iter().map(|&t| f[t]).collect::<Vec<_>>();
            let inputs = ldp_defense::metrics::IgrInputs {
                f_before: pick(&before),
                f_recovery: pick(&freqs),
                f_base: pick(&base),
                r: m.targets.len(),
            };
            out.insert("igr".into(), json!(ldp_defense::metrics::igr(&inputs)?));
        }
    }
    if out.is_empty() {
        bail!("nothing to evaluate: give --detection with --fakes, or --estimate with --truth or --before/--baseline");
    }
    emit(&serde_json::Value::Object(out), None)?;
    Ok(false)
}

