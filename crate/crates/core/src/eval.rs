//! Term-weighted value evaluation: greedy one-to-one matching of hits to
//! references, per-term miss and false-alarm rates, TWV at a threshold,
//! ATWV at an externally chosen threshold, and MTWV via a sweep over all
//! distinct hit scores.
//!
//! Terms are scored only when they have at least one reference occurrence;
//! false alarms for terms absent from the references are ignored and
//! reported separately.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::search::Hit;

/// Default false-alarm weight in the TWV formula.
pub const DEFAULT_BETA_FA: f64 = 999.9;
/// Default matching tolerance around a reference span, in seconds.
pub const DEFAULT_MATCH_TOLERANCE_S: f64 = 0.5;

/// A ground-truth occurrence of a term.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceOccurrence {
    pub doc_id: String,
    pub term: String,
    pub t_begin: f64,
    pub t_end: f64,
}

/// One hit after matching: kept score plus whether it was credited to a
/// reference.
#[derive(Debug, Clone)]
pub struct AssignedHit {
    pub doc_id: String,
    pub term: String,
    pub score: f64,
    pub matched: bool,
}

/// The outcome of hit-to-reference matching, the input to all TWV metrics.
#[derive(Debug, Clone, Default)]
pub struct Assignment {
    pub hits: Vec<AssignedHit>,
    /// Reference occurrence counts per term.
    pub n_true: BTreeMap<String, usize>,
}

/// Greedy one-to-one matching by descending score: a hit matches an
/// unmatched same-term, same-document reference when the hit's midpoint
/// falls within the reference span extended by `tolerance_s` on both sides.
/// Among several candidates the reference with the closest midpoint wins.
pub fn match_hits(hits: &[Hit], refs: &[ReferenceOccurrence], tolerance_s: f64) -> Assignment {
    let mut order: Vec<usize> = (0..hits.len()).collect();
    order.sort_by(|&a, &b| hits[b].score.partial_cmp(&hits[a].score).unwrap());

    let mut ref_taken = vec![false; refs.len()];
    let mut assigned: Vec<Option<AssignedHit>> = vec![None; hits.len()];
    for &hi in &order {
        let hit = &hits[hi];
        let mid = 0.5 * (hit.t_begin + hit.t_end);
        let mut best: Option<(usize, f64)> = None;
        for (ri, r) in refs.iter().enumerate() {
            if ref_taken[ri] || r.term != hit.term || r.doc_id != hit.doc_id {
                continue;
            }
            if mid < r.t_begin - tolerance_s || mid > r.t_end + tolerance_s {
                continue;
            }
            let dist = (mid - 0.5 * (r.t_begin + r.t_end)).abs();
            if best.map_or(true, |(_, d)| dist < d) {
                best = Some((ri, dist));
            }
        }
        let matched = match best {
            Some((ri, _)) => {
                ref_taken[ri] = true;
                true
            }
            None => false,
        };
        assigned[hi] = Some(AssignedHit {
            doc_id: hit.doc_id.clone(),
            term: hit.term.clone(),
            score: hit.score,
            matched,
        });
    }

    let mut n_true: BTreeMap<String, usize> = BTreeMap::new();
    for r in refs {
        *n_true.entry(r.term.clone()).or_insert(0) += 1;
    }
    Assignment { hits: assigned.into_iter().flatten().collect(), n_true }
}

/// Per-term detection counts and rates at one decision threshold.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TermReport {
    pub n_true: usize,
    pub n_correct: usize,
    pub n_fa: usize,
    pub p_miss: f64,
    pub p_fa: f64,
    pub twv: f64,
}

/// TWV at threshold `theta`: `1 - mean_t(P_miss(t) + beta_fa * P_FA(t))`
/// over terms with at least one reference. A hit counts iff its score is at
/// or above the threshold. `P_FA` uses `T_speech - N_true` non-target
/// seconds as the trial count.
pub fn twv(
    assignment: &Assignment,
    theta: f64,
    beta_fa: f64,
    t_speech_s: f64,
) -> Result<(f64, BTreeMap<String, TermReport>)> {
    if t_speech_s <= 0.0 {
        return Err(Error::Config(format!("T_speech must be positive, got {t_speech_s}")));
    }
    let scored_terms: Vec<(&String, usize)> = assignment
        .n_true
        .iter()
        .filter(|(_, &n)| n > 0)
        .map(|(t, &n)| (t, n))
        .collect();
    if scored_terms.is_empty() {
        return Err(Error::UndefinedMetric(
            "no term has a reference occurrence; TWV is undefined".into(),
        ));
    }

    let mut per_term = BTreeMap::new();
    let mut penalty_sum = 0.0;
    for (term, n_true) in scored_terms {
        let mut n_correct = 0usize;
        let mut n_fa = 0usize;
        for h in assignment.hits.iter().filter(|h| &h.term == term && h.score >= theta) {
            if h.matched {
                n_correct += 1;
            } else {
                n_fa += 1;
            }
        }
        let p_miss = 1.0 - n_correct as f64 / n_true as f64;
        let p_fa = n_fa as f64 / (t_speech_s - n_true as f64);
        let penalty = p_miss + beta_fa * p_fa;
        penalty_sum += penalty;
        per_term.insert(
            term.clone(),
            TermReport { n_true, n_correct, n_fa, p_miss, p_fa, twv: 1.0 - penalty },
        );
    }
    Ok((1.0 - penalty_sum / per_term.len() as f64, per_term))
}

/// ATWV: TWV at an externally supplied decision threshold.
pub fn atwv(
    assignment: &Assignment,
    theta_dev: f64,
    beta_fa: f64,
    t_speech_s: f64,
) -> Result<f64> {
    Ok(twv(assignment, theta_dev, beta_fa, t_speech_s)?.0)
}

/// One point of the TWV-vs-threshold curve.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct CurvePoint {
    pub theta: f64,
    pub twv: f64,
}

/// Result of the MTWV sweep. `theta_star` is `None` when rejecting every
/// hit (an infinite threshold) is optimal; the TWV is then `all_miss_twv`.
#[derive(Debug, Clone)]
pub struct Sweep {
    pub theta_star: Option<f64>,
    pub mtwv: f64,
    pub all_miss_twv: f64,
    pub curve: Vec<CurvePoint>,
}

/// Evaluates TWV at every distinct hit score (the curve is piecewise
/// constant between them) plus the all-miss point, and returns the maximum.
/// Ties break toward the larger threshold.
pub fn mtwv_sweep(assignment: &Assignment, beta_fa: f64, t_speech_s: f64) -> Result<Sweep> {
    let mut thresholds: Vec<f64> = assignment.hits.iter().map(|h| h.score).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();

    // The all-miss value doubles as the theta = infinity point.
    let all_miss = {
        let empty = Assignment { hits: Vec::new(), n_true: assignment.n_true.clone() };
        twv(&empty, 0.0, beta_fa, t_speech_s)?.0
    };
    let mut best_theta: Option<f64> = None;
    let mut best = all_miss;
    let mut curve = Vec::with_capacity(thresholds.len());
    for &theta in &thresholds {
        let (value, _) = twv(assignment, theta, beta_fa, t_speech_s)?;
        curve.push(CurvePoint { theta, twv: value });
        // Descending thresholds: strict improvement keeps the larger theta.
        if value > best {
            best = value;
            best_theta = Some(theta);
        }
    }
    Ok(Sweep { theta_star: best_theta, mtwv: best, all_miss_twv: all_miss, curve })
}

/// A complete evaluation report, serializable as JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub t_speech_s: f64,
    pub beta_fa: f64,
    pub tolerance_s: f64,
    /// Decision threshold the per-term numbers are reported at; `None`
    /// stands for an infinite threshold (reject everything).
    pub theta: Option<f64>,
    pub twv: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub atwv: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mtwv: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta_star: Option<f64>,
    pub curve: Vec<CurvePoint>,
    pub per_term: BTreeMap<String, TermReport>,
    /// Terms that produced hits but have no reference occurrences; their
    /// false alarms are excluded from the average.
    pub ignored_terms: Vec<String>,
}

fn ignored_terms(assignment: &Assignment) -> Vec<String> {
    let mut terms: Vec<String> = assignment
        .hits
        .iter()
        .map(|h| h.term.clone())
        .filter(|t| assignment.n_true.get(t).copied().unwrap_or(0) == 0)
        .collect();
    terms.sort();
    terms.dedup();
    terms
}

/// Full ATWV report at a fixed threshold.
pub fn evaluate_atwv(
    assignment: &Assignment,
    theta_dev: f64,
    beta_fa: f64,
    t_speech_s: f64,
    tolerance_s: f64,
) -> Result<EvalReport> {
    let (value, per_term) = twv(assignment, theta_dev, beta_fa, t_speech_s)?;
    Ok(EvalReport {
        mode: "atwv".into(),
        t_speech_s,
        beta_fa,
        tolerance_s,
        theta: Some(theta_dev),
        twv: value,
        atwv: Some(value),
        mtwv: None,
        theta_star: None,
        curve: Vec::new(),
        per_term,
        ignored_terms: ignored_terms(assignment),
    })
}

/// Full MTWV report: the sweep plus per-term numbers at the maximizer.
pub fn evaluate_mtwv(
    assignment: &Assignment,
    beta_fa: f64,
    t_speech_s: f64,
    tolerance_s: f64,
) -> Result<EvalReport> {
    let sweep = mtwv_sweep(assignment, beta_fa, t_speech_s)?;
    let per_term = match sweep.theta_star {
        Some(theta) => twv(assignment, theta, beta_fa, t_speech_s)?.1,
        None => {
            let empty = Assignment { hits: Vec::new(), n_true: assignment.n_true.clone() };
            twv(&empty, 0.0, beta_fa, t_speech_s)?.1
        }
    };
    Ok(EvalReport {
        mode: "mtwv".into(),
        t_speech_s,
        beta_fa,
        tolerance_s,
        theta: sweep.theta_star,
        twv: sweep.mtwv,
        atwv: None,
        mtwv: Some(sweep.mtwv),
        theta_star: sweep.theta_star,
        curve: sweep.curve,
        per_term,
        ignored_terms: ignored_terms(assignment),
    })
}

fn refs_err(reason: impl Into<String>) -> Error {
    Error::Format { format: "references TSV", reason: reason.into() }
}

/// Reads a references TSV: `doc_id  term  t_begin  t_end`.
pub fn read_references(path: &Path) -> Result<Vec<ReferenceOccurrence>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(refs_err(format!(
                "line {}: expected 4 fields, got {}",
                i + 1,
                fields.len()
            )));
        }
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| refs_err(format!("line {}: bad {what} {s:?}", i + 1)))
        };
        out.push(ReferenceOccurrence {
            doc_id: fields[0].to_string(),
            term: fields[1].to_string(),
            t_begin: parse(fields[2], "t_begin")?,
            t_end: parse(fields[3], "t_end")?,
        });
    }
    Ok(out)
}

/// Writes references in the TSV format.
pub fn write_references(path: &Path, refs: &[ReferenceOccurrence]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in refs {
        writeln!(w, "{}\t{}\t{}\t{}", r.doc_id, r.term, r.t_begin, r.t_end)?;
    }
    w.flush()?;
    Ok(())
}
