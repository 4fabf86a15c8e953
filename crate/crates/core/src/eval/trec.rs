//! Whitespace-separated TREC files.
//!
//! qrels: `qid 0 pid grade`, one judgement per line.
//! run: `qid Q0 pid rank score tag`, ranks contiguous from 1 per query.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::metrics::{Qrels, RunFile};
use crate::error::{Error, Result};

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split_whitespace().collect::<Vec<_>>()))
        .filter(|(_, cols)| !cols.is_empty())
}

/// `path` only labels error messages.
pub fn parse_qrels(text: &str, path: &Path) -> Result<Qrels> {
    let mut qrels = Qrels::new();
    for (line, cols) in content_lines(text) {
        let [qid, _, pid, grade] = cols[..] else {
            return Err(parse_error(path, line, format!("expected 4 columns, got {}", cols.len())));
        };
        let grade: u32 = grade
            .parse()
            .map_err(|_| parse_error(path, line, format!("grade `{grade}` is not an integer >= 0")))?;
        qrels
            .insert(qid, pid, grade)
            .map_err(|_| parse_error(path, line, format!("repeated judgement {qid}/{pid}")))?;
    }
    Ok(qrels)
}

pub fn read_qrels(path: &Path) -> Result<Qrels> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_qrels(&text, path)
}

pub fn format_qrels(qrels: &Qrels) -> String {
    let mut out = String::new();
    for (q, p, g) in qrels.iter() {
        writeln!(out, "{q} 0 {p} {g}").expect("write to string");
    }
    out
}

/// Rankings are rebuilt from the scores; the rank column is only checked
/// for contiguity.
pub fn parse_run(text: &str, path: &Path) -> Result<RunFile> {
    let mut grouped: BTreeMap<&str, Vec<(usize, String, f64, usize)>> = BTreeMap::new();
    for (line, cols) in content_lines(text) {
        let [qid, _, pid, rank, score, _] = cols[..] else {
            return Err(parse_error(path, line, format!("expected 6 columns, got {}", cols.len())));
        };
        let rank: usize = rank
            .parse()
            .map_err(|_| parse_error(path, line, format!("rank `{rank}` is not a positive integer")))?;
        let score: f64 = score
            .parse()
            .ok()
            .filter(|s: &f64| s.is_finite())
            .ok_or_else(|| parse_error(path, line, format!("score `{score}` is not a finite number")))?;
        grouped
            .entry(qid)
            .or_default()
            .push((rank, pid.to_string(), score, line));
    }
    let mut run = RunFile::new();
    for (qid, mut rows) in grouped {
        rows.sort_by_key(|r| r.0);
        for (expected, row) in rows.iter().enumerate() {
            if row.0 != expected + 1 {
                return Err(parse_error(
                    path,
                    row.3,
                    format!("query {qid}: rank {} where {} was expected", row.0, expected + 1),
                ));
            }
        }
        let last_line = rows.last().map_or(0, |r| r.3);
        let results = rows.into_iter().map(|(_, p, s, _)| (p, s)).collect();
        run.insert(qid, results)
            .map_err(|e| parse_error(path, last_line, format!("query {qid}: {e}")))?;
    }
    Ok(run)
}

pub fn read_run(path: &Path) -> Result<RunFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_run(&text, path)
}

/// Scores are written in shortest round-trip form, so parsing the output
/// restores them exactly.
pub fn format_run(run: &RunFile, tag: &str) -> String {
    let mut out = String::new();
    for (qid, ranking) in run.iter() {
        for (i, e) in ranking.iter().enumerate() {
            writeln!(out, "{qid} Q0 {} {} {} {tag}", e.passage, i + 1, e.score).expect("write to string");
        }
    }
    out
}

pub fn write_run(path: &Path, run: &RunFile, tag: &str) -> Result<()> {
    fs::write(path, format_run(run, tag)).map_err(|e| Error::io(path, e))
}
