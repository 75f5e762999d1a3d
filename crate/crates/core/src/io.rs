//! File formats: report files, estimate and detection JSON, attack sidecars.
//!
//! A report file is line oriented:
//!
//! ```text
//! # ldp-reports v1 protocol=OUE epsilon=1 d=8 n=2 master_seed=7
//! user_id,protocol,payload
//! 0,OUE,1:2;3:1
//! 1,OUE,
//! ```
//!
//! Payloads: GRR `value`; OUE runs of ones as `gap:len` pairs, each gap
//! counted from the end of the previous run; OLH `hash_id:value`; HST a sign
//! followed by `seed:<u64>` or `vec:<runs>`.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::attacks::AttackKind;
use crate::bits::Bits;
use crate::domain::{Protocol, ProtocolParams, PublicVector, Report, ReportSet};
use crate::error::{Error, Result};

const MAGIC: &str = "# ldp-reports v1";

fn runs(bits: &Bits) -> String {
    let mut out = String::new();
    let mut prev_end = 0usize;
    let mut iter = bits.ones().peekable();
    while let Some(start) = iter.next() {
        let mut end = start + 1;
        while iter.peek() == Some(&end) {
            iter.next();
            end += 1;
        }
        if !out.is_empty() {
            out.push(';');
        }
        let _ = write!(out, "{}:{}", start - prev_end, end - start);
        prev_end = end;
    }
    out
}

fn parse_runs(s: &str, d: usize) -> std::result::Result<Bits, String> {
    let mut bits = Bits::zeros(d);
    let mut pos = 0usize;
    for tok in s.split(';').filter(|t| !t.is_empty()) {
        let (g, l) = tok.split_once(':').ok_or_else(|| format!("bad run `{tok}`"))?;
        let g: usize = g.parse().map_err(|_| format!("bad gap `{g}`"))?;
        let l: usize = l.parse().map_err(|_| format!("bad length `{l}`"))?;
        let start = pos + g;
        if start + l > d {
            return Err(format!("run `{tok}` overflows domain {d}"));
        }
        (start..start + l).for_each(|i| bits.set(i, true));
        pos = start + l;
    }
    Ok(bits)
}

fn payload(r: &Report) -> String {
    match r {
        Report::Grr { value } => value.to_string(),
        Report::Oue { bits } => runs(bits),
        Report::Olh { hash_id, value } => format!("{hash_id}:{value}"),
        Report::Hst { positive, vector } => {
            let sign = if *positive { '+' } else { '-' };
            match vector {
                PublicVector::Seeded(s) => format!("{sign}seed:{s}"),
                PublicVector::Explicit(b) => format!("{sign}vec:{}", runs(b)),
            }
        }
    }
}

fn parse_payload(p: &str, params: &ProtocolParams) -> std::result::Result<Report, String> {
    let num = |s: &str| s.parse::<u64>().map_err(|_| format!("bad number `{s}`"));
    Ok(match params.protocol {
        Protocol::Grr => Report::Grr { value: num(p)? as usize },
        Protocol::Oue => Report::Oue { bits: parse_runs(p, params.d)? },
        Protocol::OlhUser | Protocol::OlhServer => {
            let (h, v) = p.split_once(':').ok_or_else(|| format!("bad OLH payload `{p}`"))?;
            Report::Olh { hash_id: num(h)?, value: num(v)? as usize }
        }
        Protocol::HstUser | Protocol::HstServer => {
            let positive = match p.chars().next() {
                Some('+') => true,
                Some('-') => false,
                _ => return Err(format!("HST payload must start with a sign: `{p}`")),
            };
            let rest = &p[1..];
            let vector = if let Some(s) = rest.strip_prefix("seed:") {
                PublicVector::Seeded(num(s)?)
            } else if let Some(v) = rest.strip_prefix("vec:") {
                PublicVector::Explicit(parse_runs(v, params.d)?)
            } else {
                return Err(format!("bad HST vector `{rest}`"));
            };
            Report::Hst { positive, vector }
        }
    })
}

pub fn write_reports(path: &Path, set: &ReportSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let p = set.params();
    writeln!(
        w,
        "{MAGIC} protocol={} epsilon={} d={} n={} master_seed={}",
        p.protocol,
        p.epsilon,
        p.d,
        p.n,
        set.master_seed()
    )?;
    writeln!(w, "user_id,protocol,payload")?;
    for (u, r) in set.reports().iter().enumerate() {
        writeln!(w, "{u},{},{}", p.protocol, payload(r))?;
    }
    w.flush()?;
    Ok(())
}

fn header_field<'a>(fields: &'a [(&'a str, &'a str)], key: &str) -> Result<&'a str> {
    fields
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| *v)
        .ok_or_else(|| Error::Parse { line: 1, msg: format!("header is missing `{key}`") })
}

pub fn read_reports(path: &Path) -> Result<ReportSet> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let perr = |line: usize, msg: String| Error::Parse { line, msg };
    let head = lines.next().ok_or_else(|| Error::EmptyInput("report file is empty".into()))??;
    let rest = head.strip_prefix(MAGIC).ok_or_else(|| perr(1, "not an ldp-reports v1 file".into()))?;
    let fields: Vec<(&str, &str)> = rest.split_whitespace().filter_map(|kv| kv.split_once('=')).collect();
    let protocol: Protocol = header_field(&fields, "protocol")?.parse()?;
    let bad = |k: &str| perr(1, format!("bad `{k}`"));
    let epsilon: f64 = header_field(&fields, "epsilon")?.parse().map_err(|_| bad("epsilon"))?;
    let d: usize = header_field(&fields, "d")?.parse().map_err(|_| bad("d"))?;
    let n: usize = header_field(&fields, "n")?.parse().map_err(|_| bad("n"))?;
    let seed: u64 = header_field(&fields, "master_seed")?.parse().map_err(|_| bad("master_seed"))?;
    let params = ProtocolParams::new(protocol, epsilon, d, n)?;
    let mut reports = Vec::with_capacity(n);
    for (i, line) in lines.enumerate() {
        let line = line?;
        let ln = i + 2;
        if line.is_empty() || (i == 0 && line.starts_with("user_id")) {
            continue;
        }
        let mut parts = line.splitn(3, ',');
        let (u, proto, pl) = match (parts.next(), parts.next(), parts.next()) {
            (Some(u), Some(p), Some(pl)) => (u, p, pl),
            _ => return Err(perr(ln, "expected `user_id,protocol,payload`".into())),
        };
        let u: usize = u.trim().parse().map_err(|_| perr(ln, format!("bad user id `{u}`")))?;
        if u != reports.len() {
            return Err(perr(ln, format!("user ids must run 0..n in order; found {u}")));
        }
        if proto.parse::<Protocol>()? != protocol {
            return Err(perr(ln, format!("row protocol `{proto}` differs from header `{protocol}`")));
        }
        let r = parse_payload(pl.trim(), &params).map_err(|m| perr(ln, m))?;
        r.validate(&params).map_err(|e| perr(ln, e.to_string()))?;
        reports.push(r);
    }
    ReportSet::new(params, reports, seed)
}

/// Attack provenance stored beside a report file. Evaluation only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackManifest {
    pub kind: AttackKind,
    pub targets: Vec<usize>,
    pub beta: f64,
    pub r_prime: Option<usize>,
    pub fake_user_ids: Vec<usize>,
}

/// `reports.ldp` -> `reports.ldp.fakes`.
pub fn sidecar_path(reports: &Path) -> PathBuf {
    let mut s = reports.as_os_str().to_owned();
    s.push(".fakes");
    PathBuf::from(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}
