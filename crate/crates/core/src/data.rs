//! Datasets: true item counts plus one item per user.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::par;
use crate::rng::{Purpose, RngPolicy};

/// True item counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrueDistribution {
    counts: Vec<u64>,
}

impl TrueDistribution {
    pub fn new(counts: Vec<u64>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::EmptyInput("distribution has no items".into()));
        }
        Ok(Self { counts })
    }

    pub fn from_items(d: usize, items: &[usize]) -> Result<Self> {
        let mut counts = vec![0u64; d];
        for &v in items {
            *counts.get_mut(v).ok_or_else(|| invalid(format!("item {v} outside domain {d}")))? += 1;
        }
        Self::new(counts)
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn d(&self) -> usize {
        self.counts.len()
    }

    pub fn n(&self) -> usize {
        self.counts.iter().sum::<u64>() as usize
    }

    pub fn freqs(&self) -> Vec<f64> {
        let n = self.n().max(1) as f64;
        self.counts.iter().map(|&c| c as f64 / n).collect()
    }
}

/// Where a dataset comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    Zipf { s: f64, d: usize, n: usize },
    CsvCounts { path: PathBuf },
    CsvRaw { path: PathBuf, item_column: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub seed: u64,
}

/// Truth, per-user items and item labels. Items are ranked by descending
/// count (ties keep their original order).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub truth: TrueDistribution,
    pub items: Vec<usize>,
    pub labels: Vec<String>,
}

impl Dataset {
    pub fn d(&self) -> usize {
        self.truth.d()
    }

    pub fn n(&self) -> usize {
        self.items.len()
    }
}

pub fn load(spec: &DatasetSpec) -> Result<Dataset> {
    match &spec.source {
        DataSource::Zipf { s, d, n } => synthesize_zipf(*s, *d, *n, spec.seed),
        _ => load_csv(spec),
    }
}

const ZIPF_CHUNK: usize = 1 << 16;

/// Draws `n` users i.i.d. with `P(rank k) ∝ k^-s` over ranks `1..=d`.
pub fn synthesize_zipf(s: f64, d: usize, n: usize, seed: u64) -> Result<Dataset> {
    if !(s > 0.0 && s.is_finite()) {
        return Err(invalid(format!("zipf exponent must be positive, got {s}")));
    }
    if d < 2 || n < 1 {
        return Err(invalid("zipf needs d >= 2 and n >= 1"));
    }
    let weights: Vec<f64> = (1..=d).map(|k| (k as f64).powf(-s)).collect();
    let alias = WeightedAliasIndex::new(weights).map_err(|e| invalid(format!("zipf weights: {e}")))?;
    let policy = RngPolicy::new(seed);
    let mut items = vec![0usize; n];
    par::for_each_chunk_mut(&mut items, ZIPF_CHUNK, |c, chunk| {
        let mut rng = policy.stream(0, Purpose::Dataset, c as u64);
        chunk.iter_mut().for_each(|x| *x = alias.sample(&mut rng));
    });
    let labels: Vec<String> = (1..=d).map(|k| k.to_string()).collect();
    let truth = TrueDistribution::from_items(d, &items)?;
    Ok(rank(truth.counts().to_vec(), labels, Some(items), seed))
}

/// Re-indexes by descending count and materializes users if needed.
fn rank(counts: Vec<u64>, labels: Vec<String>, items: Option<Vec<usize>>, seed: u64) -> Dataset {
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]));
    let mut new_of = vec![0usize; counts.len()];
    for (new, &old) in order.iter().enumerate() {
        new_of[old] = new;
    }
    let counts: Vec<u64> = order.iter().map(|&o| counts[o]).collect();
    let labels: Vec<String> = order.iter().map(|&o| labels[o].clone()).collect();
    let items = match items {
        Some(mut it) => {
            it.iter_mut().for_each(|v| *v = new_of[*v]);
            it
        }
        None => {
            let mut it: Vec<usize> =
                counts.iter().enumerate().flat_map(|(v, &c)| std::iter::repeat_n(v, c as usize)).collect();
            it.shuffle(&mut RngPolicy::new(seed).stream(0, Purpose::Shuffle, 0));
            it
        }
    };
    Dataset { truth: TrueDistribution { counts }, items, labels }
}

/// Loads `item,count` rows or a raw per-user column.
pub fn load_csv(spec: &DatasetSpec) -> Result<Dataset> {
    let (labels, counts) = match &spec.source {
        DataSource::CsvCounts { path } => read_counts(path)?,
        DataSource::CsvRaw { path, item_column } => read_raw(path, item_column)?,
        DataSource::Zipf { .. } => return Err(invalid("not a CSV source")),
    };
    if counts.is_empty() || counts.iter().all(|&c| c == 0) {
        return Err(Error::EmptyInput("CSV holds no users".into()));
    }
    Ok(rank(counts, labels, None, spec.seed))
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

fn reader(path: &Path, headers: bool) -> Result<csv::Reader<std::fs::File>> {
    Ok(csv::ReaderBuilder::new().has_headers(headers).flexible(true).trim(csv::Trim::All).from_path(path)?)
}

fn read_counts(path: &Path) -> Result<(Vec<String>, Vec<u64>)> {
    let mut labels = Vec::new();
    let mut counts: Vec<u64> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (i, rec) in reader(path, false)?.records().enumerate() {
        let rec = rec?;
        let line = rec.position().map_or(i + 1, |p| p.line() as usize);
        if rec.len() != 2 {
            return Err(parse_err(line, format!("expected `item,count`, found {} fields", rec.len())));
        }
        let c: u64 = match rec[1].parse() {
            Ok(c) => c,
            Err(_) if i == 0 => continue,
            Err(_) => return Err(parse_err(line, format!("bad count `{}`", &rec[1]))),
        };
        let label = rec[0].to_string();
        match index.get(&label) {
            Some(&j) => counts[j] += c,
            None => {
                index.insert(label.clone(), labels.len());
                labels.push(label);
                counts.push(c);
            }
        }
    }
    Ok((labels, counts))
}

fn read_raw(path: &Path, column: &str) -> Result<(Vec<String>, Vec<u64>)> {
    let mut rdr = reader(path, true)?;
    let col = rdr
        .headers()?
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| parse_err(1, format!("no column named `{column}`")))?;
    let mut labels = Vec::new();
    let mut counts: Vec<u64> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = rec.position().map_or(i + 2, |p| p.line() as usize);
        let v = rec.get(col).ok_or_else(|| parse_err(line, "row is missing the item column"))?;
        match index.get(v) {
            Some(&j) => counts[j] += 1,
            None => {
                index.insert(v.to_string(), labels.len());
                labels.push(v.to_string());
                counts.push(1);
            }
        }
    }
    Ok((labels, counts))
}

/// Writes `item,count` rows in index order.
pub fn write_counts_csv(path: &Path, labels: &[String], truth: &TrueDistribution) -> Result<()> {
    if labels.len() != truth.d() {
        return Err(invalid("one label per item required"));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["item", "count"])?;
    for (l, c) in labels.iter().zip(truth.counts()) {
        w.write_record([l.as_str(), &c.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
