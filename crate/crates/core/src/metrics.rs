//! Retrieval and mining evaluation: precision at N, threshold-optimized
//! precision/recall/F1, precision-recall curves with average precision, and
//! cosine separation diagnostics.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::miner::CandidatePair;

/// Gold alignment: each source id maps to its single correct target id.
pub type GoldMap = BTreeMap<String, String>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub p_at: BTreeMap<usize, f64>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub best_threshold: f64,
    pub average_precision: f64,
    pub pr_points: Vec<PrPoint>,
    pub mean_positive_cosine: f64,
    pub mean_negative_cosine: f64,
}

/// Fraction of queries whose gold target appears in their top-n candidates.
/// `ranked` holds each query's candidates in rank order. Every query in
/// `ranked` must have a gold entry.
pub fn precision_at_n(
    ranked: &BTreeMap<String, Vec<String>>,
    gold: &GoldMap,
    n: usize,
) -> Result<f64> {
    if ranked.is_empty() {
        return Err(Error::EmptyInput("no queries to evaluate".into()));
    }
    let mut hits = 0usize;
    for (q, cands) in ranked {
        let g = gold
            .get(q)
            .ok_or_else(|| Error::Other(format!("query {q} has no gold target")))?;
        if cands.iter().take(n).any(|c| c == g) {
            hits += 1;
        }
    }
    Ok(hits as f64 / ranked.len() as f64)
}

/// Groups candidates per source in score-descending order (ties by target
/// id), suitable for `precision_at_n`.
pub fn rank_candidates(pairs: &[CandidatePair]) -> BTreeMap<String, Vec<String>> {
    let mut per_src: BTreeMap<String, Vec<(f64, String)>> = BTreeMap::new();
    for p in pairs {
        per_src
            .entry(p.src_id.clone())
            .or_default()
            .push((p.score(), p.tgt_id.clone()));
    }
    per_src
        .into_iter()
        .map(|(src, mut v)| {
            v.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
            (src, v.into_iter().map(|(_, t)| t).collect())
        })
        .collect()
}

/// Precision, recall and F1 of the pair set scoring at or above `tau`.
/// An empty predicted set has precision 1.0 by convention (and F1 0 when
/// gold is non-empty).
pub fn prf_at_threshold(pairs: &[CandidatePair], gold: &GoldMap, tau: f64) -> (f64, f64, f64) {
    let predicted: BTreeSet<(&str, &str)> = pairs
        .iter()
        .filter(|p| p.score() >= tau)
        .map(|p| (p.src_id.as_str(), p.tgt_id.as_str()))
        .collect();
    let tp = predicted
        .iter()
        .filter(|(s, t)| gold.get(*s).map(String::as_str) == Some(*t))
        .count();
    let precision = if predicted.is_empty() {
        1.0
    } else {
        tp as f64 / predicted.len() as f64
    };
    let recall = if gold.is_empty() {
        0.0
    } else {
        tp as f64 / gold.len() as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

/// Sweeps every distinct candidate score as a threshold and returns
/// `(tau*, precision, recall, f1)` maximizing F1; ties resolve to the larger
/// threshold.
pub fn optimize_threshold(pairs: &[CandidatePair], gold: &GoldMap) -> Result<(f64, f64, f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("no candidate pairs".into()));
    }
    // Set semantics as in `prf_at_threshold`: a (src, tgt) pair is predicted
    // at tau when its best score reaches tau, so duplicates collapse to
    // their maximum. Sweeping the deduplicated scores in descending order
    // with running counts gives every attainable (P, R, F) in O(n log n);
    // skipped duplicate scores always tie a swept one and lose the
    // larger-threshold tie-break anyway.
    let mut best_score: HashMap<(&str, &str), f64> = HashMap::new();
    for p in pairs {
        let e = best_score
            .entry((p.src_id.as_str(), p.tgt_id.as_str()))
            .or_insert(f64::NEG_INFINITY);
        if p.score() > *e {
            *e = p.score();
        }
    }
    let mut entries: Vec<(f64, bool)> = best_score
        .iter()
        .map(|(&(s, t), &sc)| (sc, gold.get(s).map(String::as_str) == Some(t)))
        .collect();
    entries.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut best: Option<(f64, f64, f64, f64)> = None;
    let mut tp = 0usize;
    let mut i = 0;
    while i < entries.len() {
        let tau = entries[i].0;
        while i < entries.len() && entries[i].0 == tau {
            if entries[i].1 {
                tp += 1;
            }
            i += 1;
        }
        let precision = tp as f64 / i as f64;
        let recall = if gold.is_empty() {
            0.0
        } else {
            tp as f64 / gold.len() as f64
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        let better = match best {
            None => true,
            // descending sweep: the first of an F1 tie has the larger tau
            Some((_, _, _, bf)) => f1 > bf,
        };
        if better {
            best = Some((tau, precision, recall, f1));
        }
    }
    Ok(best.expect("at least one threshold"))
}

/// Precision-recall points over descending thresholds, plus ranked average
/// precision. Pairs are ranked by score descending with (src, tgt) id
/// tie-breaks; each gold hit contributes its precision-at-rank, and gold
/// entries never retrieved contribute zero.
pub fn pr_curve_ap(pairs: &[CandidatePair], gold: &GoldMap) -> Result<(Vec<PrPoint>, f64)> {
    if gold.is_empty() {
        return Err(Error::EmptyInput("empty gold map".into()));
    }
    let mut ranked: Vec<&CandidatePair> = pairs.iter().collect();
    ranked.sort_by(|a, b| {
        b.score()
            .total_cmp(&a.score())
            .then_with(|| a.src_id.cmp(&b.src_id))
            .then_with(|| a.tgt_id.cmp(&b.tgt_id))
    });
    let mut points = Vec::new();
    let mut tp = 0usize;
    let mut ap_sum = 0.0;
    let mut seen: BTreeSet<&str> = BTreeSet::new();
    for (rank, p) in ranked.iter().enumerate() {
        let is_gold = gold.get(&p.src_id).map(String::as_str) == Some(p.tgt_id.as_str())
            && seen.insert(p.src_id.as_str());
        if is_gold {
            tp += 1;
            ap_sum += tp as f64 / (rank + 1) as f64;
        }
        points.push(PrPoint {
            threshold: p.score(),
            precision: tp as f64 / (rank + 1) as f64,
            recall: tp as f64 / gold.len() as f64,
        });
    }
    Ok((points, ap_sum / gold.len() as f64))
}

/// Mean cosine of correct top-1 pairs and of the runner-up (rank-2)
/// candidates for those same queries. A wider gap means better-separated
/// translations.
pub fn cosine_separation(pairs: &[CandidatePair], gold: &GoldMap) -> Result<(f64, f64)> {
    let mut per_src: BTreeMap<&str, Vec<(f64, &str)>> = BTreeMap::new();
    for p in pairs {
        per_src
            .entry(p.src_id.as_str())
            .or_default()
            .push((p.cosine, p.tgt_id.as_str()));
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (src, mut cands) in per_src {
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        if cands.len() < 2 {
            continue;
        }
        if gold.get(src).map(String::as_str) == Some(cands[0].1) {
            pos.push(cands[0].0);
            neg.push(cands[1].0);
        }
    }
    if pos.is_empty() {
        return Err(Error::Degenerate(
            "no queries with a correct top-1 and a runner-up".into(),
        ));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok((mean(&pos), mean(&neg)))
}

impl EvalReport {
    /// `metric<TAB>value` lines, one per scalar metric.
    pub fn write_tsv<W: Write>(&self, w: &mut W) -> Result<()> {
        for (n, v) in &self.p_at {
            writeln!(w, "p_at_{n}\t{v}")?;
        }
        writeln!(w, "precision\t{}", self.precision)?;
        writeln!(w, "recall\t{}", self.recall)?;
        writeln!(w, "f1\t{}", self.f1)?;
        writeln!(w, "best_threshold\t{}", self.best_threshold)?;
        writeln!(w, "average_precision\t{}", self.average_precision)?;
        writeln!(w, "mean_positive_cosine\t{}", self.mean_positive_cosine)?;
        writeln!(w, "mean_negative_cosine\t{}", self.mean_negative_cosine)?;
        Ok(())
    }

    /// Aligned human-readable table.
    pub fn write_table<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut rows: Vec<(String, f64)> = self
            .p_at
            .iter()
            .map(|(n, v)| (format!("P@{n}"), *v))
            .collect();
        rows.push(("precision".into(), self.precision));
        rows.push(("recall".into(), self.recall));
        rows.push(("F1".into(), self.f1));
        rows.push(("best threshold".into(), self.best_threshold));
        rows.push(("average precision".into(), self.average_precision));
        rows.push(("mean positive cosine".into(), self.mean_positive_cosine));
        rows.push(("mean negative cosine".into(), self.mean_negative_cosine));
        let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0);
        for (name, v) in rows {
            writeln!(w, "{name:width$}  {v:.6}")?;
        }
        Ok(())
    }

    /// `recall,precision` CSV of the PR curve.
    pub fn write_pr_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "recall,precision")?;
        for p in &self.pr_points {
            writeln!(w, "{},{}", p.recall, p.precision)?;
        }
        Ok(())
    }
}

/// Parses `metric<TAB>value` lines back into a flat map.
pub fn read_report_tsv(text: &str) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (name, val) = line.split_once('\t').ok_or_else(|| Error::MalformedLine {
            path: "<report>".into(),
            line: i + 1,
            msg: "expected metric<TAB>value".into(),
        })?;
        let v: f64 = val.parse().map_err(|_| Error::MalformedLine {
            path: "<report>".into(),
            line: i + 1,
            msg: format!("bad value {val:?}"),
        })?;
        out.insert(name.to_string(), v);
    }
    Ok(out)
}
