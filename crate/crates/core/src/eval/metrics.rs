use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::error::{Error, Result};

/// Relevance judgements: query id → passage id → grade. A grade of at
/// least 1 marks a relevant passage.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Qrels {
    judgements: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fails on a repeated (query, passage) pair.
    pub fn insert(&mut self, qid: &str, pid: &str, grade: u32) -> Result<()> {
        let per_query = self.judgements.entry(qid.to_string()).or_default();
        if per_query.insert(pid.to_string(), grade).is_some() {
            return Err(Error::DuplicateId(format!("{qid}/{pid}")));
        }
        Ok(())
    }

    pub fn grade(&self, qid: &str, pid: &str) -> Option<u32> {
        self.judgements.get(qid)?.get(pid).copied()
    }

    pub fn contains_query(&self, qid: &str) -> bool {
        self.judgements.contains_key(qid)
    }

    pub fn relevant(&self, qid: &str) -> BTreeSet<&str> {
        self.judgements
            .get(qid)
            .map(|m| {
                m.iter()
                    .filter(|(_, &g)| g > 0)
                    .map(|(p, _)| p.as_str())
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.judgements.keys().map(String::as_str)
    }

    /// `(query, passage, grade)` in id order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, u32)> {
        self.judgements.iter().flat_map(|(q, m)| {
            m.iter().map(move |(p, &g)| (q.as_str(), p.as_str(), g))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunEntry {
    pub passage: String,
    pub score: f64,
}

/// Ranked results per query, each list ordered by descending score with
/// ascending passage id on ties. Rank `r` is position `r - 1`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunFile {
    rankings: BTreeMap<String, Vec<RunEntry>>,
}

impl RunFile {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores a ranking for `qid`, ordering it canonically. Fails on a
    /// repeated query, a repeated passage or a non-finite score.
    pub fn insert(&mut self, qid: &str, results: Vec<(String, f64)>) -> Result<()> {
        if self.rankings.contains_key(qid) {
            return Err(Error::DuplicateId(qid.to_string()));
        }
        let mut seen = BTreeSet::new();
        for (pid, score) in &results {
            if !seen.insert(pid.as_str()) {
                return Err(Error::DuplicateId(format!("{qid}/{pid}")));
            }
            if !score.is_finite() {
                return Err(Error::NonFinite(format!("score of {qid}/{pid}")));
            }
        }
        let mut entries: Vec<RunEntry> = results
            .into_iter()
            .map(|(passage, score)| RunEntry { passage, score })
            .collect();
        entries.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.passage.cmp(&b.passage)));
        self.rankings.insert(qid.to_string(), entries);
        Ok(())
    }

    pub fn ranking(&self, qid: &str) -> Option<&[RunEntry]> {
        self.rankings.get(qid).map(Vec::as_slice)
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.rankings.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[RunEntry])> {
        self.rankings.iter().map(|(q, v)| (q.as_str(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.rankings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rankings.is_empty()
    }
}

/// A metric mean plus the queries left out of it.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub value: f64,
    pub evaluated: usize,
    /// Run queries with no judgements at all.
    pub skipped_unjudged: Vec<String>,
    /// Judged queries without a single relevant passage.
    pub skipped_no_relevant: Vec<String>,
}

fn evaluate(
    run: &RunFile,
    qrels: &Qrels,
    k: usize,
    per_query: impl Fn(&[RunEntry], &BTreeSet<&str>) -> f64,
) -> Result<MetricReport> {
    if k == 0 {
        return Err(Error::InvalidConfig("metric cutoff k must be >= 1".into()));
    }
    let mut sum = 0.0;
    let mut evaluated = 0;
    let mut skipped_unjudged = Vec::new();
    let mut skipped_no_relevant = Vec::new();
    for (qid, ranking) in run.iter() {
        if !qrels.contains_query(qid) {
            skipped_unjudged.push(qid.to_string());
            continue;
        }
        let relevant = qrels.relevant(qid);
        if relevant.is_empty() {
            skipped_no_relevant.push(qid.to_string());
            continue;
        }
        let top = &ranking[..ranking.len().min(k)];
        sum += per_query(top, &relevant);
        evaluated += 1;
    }
    for qid in skipped_unjudged.iter().chain(&skipped_no_relevant) {
        log::warn!("query {qid} skipped: no relevant judgement");
    }
    Ok(MetricReport {
        value: if evaluated == 0 { 0.0 } else { sum / evaluated as f64 },
        evaluated,
        skipped_unjudged,
        skipped_no_relevant,
    })
}

/// Mean reciprocal rank of the first relevant passage within the top `k`.
pub fn mrr_at_k(run: &RunFile, qrels: &Qrels, k: usize) -> Result<MetricReport> {
    evaluate(run, qrels, k, |top, relevant| {
        top.iter()
            .position(|e| relevant.contains(e.passage.as_str()))
            .map_or(0.0, |i| 1.0 / (i + 1) as f64)
    })
}

/// Mean fraction of each query's relevant passages found in the top `k`.
pub fn recall_at_k(run: &RunFile, qrels: &Qrels, k: usize) -> Result<MetricReport> {
    evaluate(run, qrels, k, |top, relevant| {
        let hits = top
            .iter()
            .filter(|e| relevant.contains(e.passage.as_str()))
            .count();
        hits as f64 / relevant.len() as f64
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Mrr(usize),
    Recall(usize),
}

pub const SUPPORTED_METRICS: &str = "mrr@K, recall@K (also r@K)";

impl Metric {
    /// Parses `mrr@10`, `recall@100` or `r@100`.
    pub fn parse(name: &str) -> Result<Self> {
        let unknown = || Error::UnknownMetric {
            name: name.to_string(),
            supported: SUPPORTED_METRICS.to_string(),
        };
        let (kind, k) = name.trim().split_once('@').ok_or_else(unknown)?;
        let k: usize = k.parse().map_err(|_| unknown())?;
        if k == 0 {
            return Err(unknown());
        }
        match kind.to_ascii_lowercase().as_str() {
            "mrr" => Ok(Metric::Mrr(k)),
            "recall" | "r" => Ok(Metric::Recall(k)),
            _ => Err(unknown()),
        }
    }

    pub fn evaluate(&self, run: &RunFile, qrels: &Qrels) -> Result<MetricReport> {
        match *self {
            Metric::Mrr(k) => mrr_at_k(run, qrels, k),
            Metric::Recall(k) => recall_at_k(run, qrels, k),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Metric::Mrr(k) => write!(f, "mrr@{k}"),
            Metric::Recall(k) => write!(f, "recall@{k}"),
        }
    }
}
