use std::collections::BTreeMap;

use crate::error::HarnessError;

/// One finished episode of one run; episodes count from 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub run: usize,
    pub episode: usize,
    /// Cumulative reward.
    pub cr: f64,
    /// Moving average reward.
    pub mar: f64,
}

/// `0.1 cr + 0.9 mar_prev`.
pub fn mar_update(cr: f64, mar_prev: f64) -> f64 {
    0.1 * cr + 0.9 * mar_prev
}

/// Moving averages of a run, starting from the first reward itself.
pub fn mar_series(crs: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(crs.len());
    for &cr in crs {
        let next = out.last().map_or(cr, |&prev| mar_update(cr, prev));
        out.push(next);
    }
    out
}

pub fn records_for_run(run: usize, crs: &[f64]) -> Vec<EpisodeRecord> {
    crs.iter().zip(mar_series(crs)).enumerate().map(|(i, (&cr, mar))| EpisodeRecord { run, episode: i + 1, cr, mar }).collect()
}

/// Per-episode mean and population standard deviation of MAR across runs.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub runs: usize,
}

impl Aggregate {
    pub fn episodes(&self) -> usize {
        self.mean.len()
    }
}

pub fn aggregate(records: &[EpisodeRecord]) -> Result<Aggregate, HarnessError> {
    let mut runs: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
    for r in records {
        runs.entry(r.run).or_default().push((r.episode, r.mar));
    }
    if runs.is_empty() {
        return Err(HarnessError::Aggregate("no records".into()));
    }
    let mut series = Vec::with_capacity(runs.len());
    for (run, mut eps) in runs {
        eps.sort_by_key(|e| e.0);
        if eps.iter().enumerate().any(|(i, e)| e.0 != i + 1) {
            return Err(HarnessError::Aggregate(format!("run {run} does not cover episodes 1..={} exactly once", eps.len())));
        }
        series.push(eps.into_iter().map(|e| e.1).collect::<Vec<_>>());
    }
    let n = series[0].len();
    if series.iter().any(|s| s.len() != n) {
        return Err(HarnessError::Aggregate("runs have different episode counts".into()));
    }
    let k = series.len() as f64;
    let mut mean = Vec::with_capacity(n);
    let mut std = Vec::with_capacity(n);
    for e in 0..n {
        let m = series.iter().map(|s| s[e]).sum::<f64>() / k;
        let var = series.iter().map(|s| (s[e] - m).powi(2)).sum::<f64>() / k;
        mean.push(m);
        std.push(var.sqrt());
    }
    Ok(Aggregate { mean, std, runs: series.len() })
}

/// Median of the final MAR over runs.
pub fn final_mar_median(records: &[EpisodeRecord]) -> Option<f64> {
    let mut last: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    for r in records {
        let e = last.entry(r.run).or_insert((0, 0.0));
        if r.episode >= e.0 {
            *e = (r.episode, r.mar);
        }
    }
    let mut v: Vec<f64> = last.values().map(|e| e.1).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}
