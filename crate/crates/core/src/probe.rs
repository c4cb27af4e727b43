//! Activation statistics: per-site average mean, average variance,
//! fraction of negative entries and a fixed 64-bin histogram, recorded on
//! every forward pass of an instrumented model.
//!
//! Sites are named `emb` (raw concatenated embeddings), `emb_norm` (after
//! field-wise normalization), `mlp{i}_pre` (input of hidden layer `i`'s
//! activation) and `mlp{i}_post` (output of hidden layer `i`). Mean and
//! variance are taken per segment and averaged: per field (width `k`) at the
//! embedding sites, over the whole layer at MLP sites.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{mean_var, Matrix};

pub const HISTOGRAM_BINS: usize = 64;
pub const DEFAULT_HISTOGRAM_RANGE: (f64, f64) = (-5.0, 5.0);
pub const EMA_COEFFICIENT: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsRecord {
    pub layer: String,
    pub step: u64,
    pub mean: f64,
    pub variance: f64,
    pub neg_frac: f64,
    /// 64 equal-width bins over the configured range; the first and last
    /// bins also absorb values below and above it.
    pub histogram: Vec<u64>,
}

impl StatsRecord {
    pub fn observe(layer: &str, step: u64, x: &Matrix, segment: usize, range: (f64, f64)) -> StatsRecord {
        let segment = segment.clamp(1, x.cols().max(1));
        let (mut mean_sum, mut var_sum, mut count) = (0.0, 0.0, 0usize);
        for r in 0..x.rows() {
            for chunk in x.row(r).chunks(segment) {
                let (m, v) = mean_var(chunk);
                mean_sum += m;
                var_sum += v;
                count += 1;
            }
        }
        let n = count.max(1) as f64;
        StatsRecord {
            layer: layer.to_string(),
            step,
            mean: mean_sum / n,
            variance: var_sum / n,
            neg_frac: negative_fraction(x),
            histogram: histogram(x.as_slice(), range),
        }
    }
}

/// Share of entries strictly below zero.
pub fn negative_fraction(x: &Matrix) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.as_slice().iter().filter(|v| **v < 0.0).count() as f64 / x.len() as f64
}

fn histogram(values: &[f64], (lo, hi): (f64, f64)) -> Vec<u64> {
    let mut bins = vec![0u64; HISTOGRAM_BINS];
    let width = (hi - lo) / HISTOGRAM_BINS as f64;
    for v in values {
        let idx = ((v - lo) / width).floor();
        let idx = if idx.is_nan() { 0 } else { idx.clamp(0.0, (HISTOGRAM_BINS - 1) as f64) as usize };
        bins[idx] += 1;
    }
    bins
}

/// EMA-smoothed statistics for one site.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothedStats {
    pub mean: f64,
    pub variance: f64,
    pub neg_frac: f64,
}

/// Recorder attached to a model. Holds raw per-step records and a smoothed
/// view per site.
#[derive(Debug, Clone)]
pub struct Probe {
    sites: Vec<String>,
    range: (f64, f64),
    step: u64,
    records: Vec<StatsRecord>,
    smoothed: BTreeMap<String, SmoothedStats>,
}

impl Probe {
    pub fn new(sites: Vec<String>) -> Self {
        Probe { sites, range: DEFAULT_HISTOGRAM_RANGE, step: 0, records: Vec::new(), smoothed: BTreeMap::new() }
    }

    pub fn with_range(mut self, lo: f64, hi: f64) -> Self {
        self.range = (lo, hi);
        self
    }

    pub fn sites(&self) -> &[String] {
        &self.sites
    }

    pub fn wants(&self, site: &str) -> bool {
        self.sites.iter().any(|s| s == site)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn record(&mut self, site: &str, x: &Matrix, segment: usize) {
        if !self.wants(site) {
            return;
        }
        let rec = StatsRecord::observe(site, self.step, x, segment, self.range);
        let entry = self.smoothed.entry(site.to_string());
        entry
            .and_modify(|s| {
                s.mean = EMA_COEFFICIENT * s.mean + (1.0 - EMA_COEFFICIENT) * rec.mean;
                s.variance = EMA_COEFFICIENT * s.variance + (1.0 - EMA_COEFFICIENT) * rec.variance;
                s.neg_frac = EMA_COEFFICIENT * s.neg_frac + (1.0 - EMA_COEFFICIENT) * rec.neg_frac;
            })
            .or_insert(SmoothedStats { mean: rec.mean, variance: rec.variance, neg_frac: rec.neg_frac });
        self.records.push(rec);
    }

    /// Marks the end of one forward pass.
    pub fn advance(&mut self) {
        self.step += 1;
    }

    pub fn records(&self) -> &[StatsRecord] {
        &self.records
    }

    pub fn take_records(&mut self) -> Vec<StatsRecord> {
        std::mem::take(&mut self.records)
    }

    pub fn smoothed(&self, site: &str) -> Option<&SmoothedStats> {
        self.smoothed.get(site)
    }

    /// Raw record of `site` at `step`, if one was taken.
    pub fn at(&self, site: &str, step: u64) -> Option<&StatsRecord> {
        self.records.iter().find(|r| r.layer == site && r.step == step)
    }
}

fn header() -> Vec<String> {
    let mut h: Vec<String> = ["layer", "step", "mean", "variance", "neg_frac"].iter().map(|s| s.to_string()).collect();
    h.extend((0..HISTOGRAM_BINS).map(|i| format!("bin_{i}")));
    h
}

/// Writes one CSV row per record: `layer,step,mean,variance,neg_frac,bin_0..bin_63`.
pub fn export_stats(records: &[StatsRecord], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = csv::Writer::from_writer(file);
    let csv_err = |e: csv::Error| Error::Data(format!("writing {}: {e}", path.display()));
    w.write_record(header()).map_err(csv_err)?;
    for r in records {
        let mut row = vec![r.layer.clone(), r.step.to_string(), r.mean.to_string(), r.variance.to_string(), r.neg_frac.to_string()];
        row.extend(r.histogram.iter().map(|c| c.to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_stats(path: &Path) -> Result<Vec<StatsRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("reading {}: {e}", path.display())))?;
    let expected = header();
    let found: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Data(format!("reading {}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    if found != expected {
        return Err(Error::Data(format!("{}: unexpected stats header", path.display())));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let parse_err = |msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
        let rec = rec.map_err(|e| parse_err(e.to_string()))?;
        let num = |j: usize| -> Result<f64> { rec[j].parse::<f64>().map_err(|e| parse_err(format!("column {j}: {e}"))) };
        let histogram = (5..5 + HISTOGRAM_BINS)
            .map(|j| rec[j].parse::<u64>().map_err(|e| parse_err(format!("column {j}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        out.push(StatsRecord {
            layer: rec[0].to_string(),
            step: rec[1].parse().map_err(|e| parse_err(format!("step: {e}")))?,
            mean: num(2)?,
            variance: num(3)?,
            neg_frac: num(4)?,
            histogram,
        });
    }
    Ok(out)
}

/// Per-site averages over all recorded steps, in first-seen site order.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteSummary {
    pub layer: String,
    pub steps: usize,
    pub mean: f64,
    pub variance: f64,
    pub neg_frac: f64,
}

pub fn summarize(records: &[StatsRecord]) -> Vec<SiteSummary> {
    let mut order: Vec<String> = Vec::new();
    let mut acc: BTreeMap<String, (usize, f64, f64, f64)> = BTreeMap::new();
    for r in records {
        if !acc.contains_key(&r.layer) {
            order.push(r.layer.clone());
        }
        let e = acc.entry(r.layer.clone()).or_insert((0, 0.0, 0.0, 0.0));
        e.0 += 1;
        e.1 += r.mean;
        e.2 += r.variance;
        e.3 += r.neg_frac;
    }
    order
        .into_iter()
        .map(|layer| {
            let (n, m, v, f) = acc[&layer];
            let n_f = n as f64;
            SiteSummary { layer, steps: n, mean: m / n_f, variance: v / n_f, neg_frac: f / n_f }
        })
        .collect()
}

/// Plain-text table of per-site averages.
pub fn summary_table(records: &[StatsRecord]) -> String {
    let mut out = format!("{:<14} {:>6} {:>12} {:>12} {:>9}\n", "site", "steps", "mean", "variance", "neg_frac");
    for s in summarize(records) {
        let _ = writeln!(out, "{:<14} {:>6} {:>12.6} {:>12.6} {:>9.4}", s.layer, s.steps, s.mean, s.variance, s.neg_frac);
    }
    out
}

/// Side-by-side comparison of two runs; sites missing from one run are skipped.
pub fn compare_table(a: &[StatsRecord], b: &[StatsRecord]) -> String {
    let sb: BTreeMap<String, SiteSummary> = summarize(b).into_iter().map(|s| (s.layer.clone(), s)).collect();
    let mut out = format!(
        "{:<14} {:>12} {:>12} {:>12} {:>12} {:>9} {:>9}\n",
        "site", "mean_a", "mean_b", "var_a", "var_b", "neg_a", "neg_b"
    );
    for sa in summarize(a) {
        if let Some(s2) = sb.get(&sa.layer) {
            let _ = writeln!(
                out,
                "{:<14} {:>12.6} {:>12.6} {:>12.6} {:>12.6} {:>9.4} {:>9.4}",
                sa.layer, sa.mean, s2.mean, sa.variance, s2.variance, sa.neg_frac, s2.neg_frac
            );
        }
    }
    out
}
