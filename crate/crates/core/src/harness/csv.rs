use std::fs;
use std::path::Path;

use super::metrics::EpisodeRecord;
use crate::error::HarnessError;

pub const EPISODE_HEADER: &str = "run,episode,cr,mar";

/// `x` rounded to `digits` significant digits, without trailing zeros.
pub fn fmt_sig(x: f64, digits: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    let magnitude = x.abs().log10().floor() as i64;
    let decimals = (digits as i64 - 1 - magnitude).max(0) as usize;
    let s = format!("{x:.decimals$}");
    let s = if s.contains('.') { s.trim_end_matches('0').trim_end_matches('.').to_string() } else { s };
    if s == "-0" {
        "0".into()
    } else {
        s
    }
}

pub fn episode_line(r: &EpisodeRecord) -> String {
    format!("{},{},{},{}", r.run, r.episode, fmt_sig(r.cr, 6), fmt_sig(r.mar, 6))
}

pub fn write_episodes(path: &Path, records: &[EpisodeRecord]) -> Result<(), HarnessError> {
    let io = |e: std::io::Error| HarnessError::io(path, e);
    let mut w = csv::Writer::from_path(path).map_err(|e| io(e.into()))?;
    w.write_record(EPISODE_HEADER.split(',')).map_err(|e| io(e.into()))?;
    for r in records {
        w.write_record([r.run.to_string(), r.episode.to_string(), fmt_sig(r.cr, 6), fmt_sig(r.mar, 6)]).map_err(|e| io(e.into()))?;
    }
    w.flush().map_err(io)
}

pub fn read_episodes(path: &Path) -> Result<Vec<EpisodeRecord>, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    parse_episodes(&text).map_err(|message| HarnessError::Csv { path: path.to_path_buf(), message })
}

pub fn parse_episodes(text: &str) -> Result<Vec<EpisodeRecord>, String> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| e.to_string())?;
    if header.iter().collect::<Vec<_>>().join(",") != EPISODE_HEADER {
        return Err(format!("expected header `{EPISODE_HEADER}`"));
    }
    let mut out = Vec::new();
    for (i, row) in r.records().enumerate() {
        let row = row.map_err(|e| e.to_string())?;
        let bad = |what: &str| format!("line {}: {what}", i + 2);
        if row.len() != 4 {
            return Err(bad("expected 4 fields"));
        }
        out.push(EpisodeRecord {
            run: row[0].parse().map_err(|_| bad("bad run"))?,
            episode: row[1].parse().map_err(|_| bad("bad episode"))?,
            cr: row[2].parse().map_err(|_| bad("bad cr"))?,
            mar: row[3].parse().map_err(|_| bad("bad mar"))?,
        });
    }
    Ok(out)
}
