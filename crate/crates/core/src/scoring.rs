//! Verification back-end: cosine scoring, adaptive s-norm against a
//! cohort, EER and minDCF sweeps, and score-level ensembling.
//!
//! The threshold sweeps visit every unique score plus one sentinel above
//! the maximum, count errors as integers, and divide once per rate. A
//! brute-force oracle in the tests replays the same arithmetic so the two
//! can be compared for exact equality rather than within a tolerance.

use std::path::Path;

use crate::error::{ensure_finite, Error, Result};
use crate::fusion::UtteranceEmbedding;

/// Guard below which an s-norm side's deviation is treated as zero spread.
const SNORM_STD_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrialLabel {
    Target,
    Nontarget,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub label: TrialLabel,
    pub enroll: String,
    pub test: String,
}

/// Verification trial list, `label enroll_id test_id` per line.
#[derive(Debug, Clone)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

impl TrialList {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut trials = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(Error::parse(
                    source.to_string(),
                    format!(
                        "line {}: expected 'label enroll_id test_id', got {} fields",
                        lineno + 1,
                        fields.len()
                    ),
                ));
            }
            let label = match fields[0] {
                "1" => TrialLabel::Target,
                "0" => TrialLabel::Nontarget,
                other => {
                    return Err(Error::parse(
                        source.to_string(),
                        format!("line {}: label must be 1 or 0, got '{other}'", lineno + 1),
                    ))
                }
            };
            trials.push(Trial {
                label,
                enroll: fields[1].to_string(),
                test: fields[2].to_string(),
            });
        }
        if trials.is_empty() {
            return Err(Error::contract(format!("trial list {source} is empty")));
        }
        Ok(TrialList { trials })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.trials {
            let label = match t.label {
                TrialLabel::Target => "1",
                TrialLabel::Nontarget => "0",
            };
            out.push_str(&format!("{label} {} {}\n", t.enroll, t.test));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Trial scores split by ground-truth label.
#[derive(Debug, Clone)]
pub struct ScoreSet {
    pub target: Vec<f64>,
    pub nontarget: Vec<f64>,
}

impl ScoreSet {
    pub fn new(target: Vec<f64>, nontarget: Vec<f64>) -> Result<Self> {
        ensure_finite("target scores", target.iter().copied())?;
        ensure_finite("nontarget scores", nontarget.iter().copied())?;
        Ok(ScoreSet { target, nontarget })
    }

    fn require_both_sides(&self) -> Result<()> {
        if self.target.is_empty() || self.nontarget.is_empty() {
            return Err(Error::contract(format!(
                "error-rate sweep needs both trial kinds, got {} target and {} nontarget scores",
                self.target.len(),
                self.nontarget.len()
            )));
        }
        Ok(())
    }
}

/// S-norm cohort: embeddings each trial side is scored against.
#[derive(Debug, Clone)]
pub struct CohortStats {
    pub embeddings: Vec<UtteranceEmbedding>,
    pub top_k: usize,
}

impl CohortStats {
    pub fn new(embeddings: Vec<UtteranceEmbedding>, top_k: usize) -> Result<Self> {
        if embeddings.is_empty() {
            return Err(Error::contract("s-norm cohort is empty"));
        }
        if top_k == 0 || top_k > embeddings.len() {
            return Err(Error::contract(format!(
                "top_k must be in 1..={}, got {top_k}",
                embeddings.len()
            )));
        }
        Ok(CohortStats { embeddings, top_k })
    }
}

pub fn cosine_score(e1: &UtteranceEmbedding, e2: &UtteranceEmbedding) -> Result<f64> {
    let (a, b) = (&e1.values, &e2.values);
    if a.len() != b.len() {
        return Err(Error::contract(format!(
            "cosine over mismatched dims {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return Err(Error::contract(format!(
            "cosine over a zero-norm embedding ('{}' or '{}')",
            e1.utt_id, e2.utt_id
        )));
    }
    Ok((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Mean and population standard deviation of one side's `top_k` highest
/// cohort scores.
fn top_k_stats(mut scores: Vec<f64>, top_k: usize) -> (f64, f64) {
    scores.sort_by(|x, y| y.partial_cmp(x).unwrap());
    scores.truncate(top_k);
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn snorm_from_stats(raw: f64, e_stats: (f64, f64), t_stats: (f64, f64)) -> f64 {
    let term = |(mean, std): (f64, f64)| {
        if std < SNORM_STD_EPS {
            0.0
        } else {
            (raw - mean) / std
        }
    };
    0.5 * (term(e_stats) + term(t_stats))
}

/// Adaptive s-norm of one raw trial score against the cohort.
pub fn adaptive_snorm(
    raw: f64,
    enroll: &UtteranceEmbedding,
    test: &UtteranceEmbedding,
    cohort: &CohortStats,
) -> Result<f64> {
    let side = |emb: &UtteranceEmbedding| -> Result<(f64, f64)> {
        let scores = cohort
            .embeddings
            .iter()
            .map(|c| cosine_score(emb, c))
            .collect::<Result<Vec<f64>>>()?;
        Ok(top_k_stats(scores, cohort.top_k))
    };
    Ok(snorm_from_stats(raw, side(enroll)?, side(test)?))
}

/// Candidate thresholds: every unique score ascending, then one sentinel
/// past the maximum so the reject-all operating point is swept too.
fn sweep_thresholds(s: &ScoreSet) -> Vec<f64> {
    let mut all: Vec<f64> = s.target.iter().chain(s.nontarget.iter()).copied().collect();
    all.sort_by(|x, y| x.partial_cmp(y).unwrap());
    all.dedup();
    let max = *all.last().unwrap();
    all.push(max + 1.0);
    all
}

fn far_frr_at(sorted_tar: &[f64], sorted_non: &[f64], theta: f64) -> (f64, f64) {
    let below_non = sorted_non.partition_point(|&s| s < theta);
    let below_tar = sorted_tar.partition_point(|&s| s < theta);
    let far = (sorted_non.len() - below_non) as f64 / sorted_non.len() as f64;
    let frr = below_tar as f64 / sorted_tar.len() as f64;
    (far, frr)
}

/// Interpolate the crossing of FAR and FRR over adjacent sweep points.
/// Both rate curves are step functions of the threshold; the sweep finds
/// the first sign change of FAR - FRR and blends linearly inside it.
/// The lowest threshold accepts everything (FAR 1, FRR 0) and the
/// sentinel rejects everything (FAR 0, FRR 1), so the difference starts
/// positive and a crossing always exists at some i >= 1.
fn eer_from_curves(thresholds: &[f64], rates: &[(f64, f64)]) -> (f64, f64) {
    for i in 0..rates.len() {
        let (far, frr) = rates[i];
        let d = far - frr;
        if d == 0.0 {
            return (far, thresholds[i]);
        }
        if d < 0.0 {
            let (far0, frr0) = rates[i - 1];
            let d0 = far0 - frr0;
            let t = d0 / (d0 - d);
            let eer = far0 + t * (far - far0);
            let theta = thresholds[i - 1] + t * (thresholds[i] - thresholds[i - 1]);
            return (eer, theta);
        }
    }
    unreachable!("threshold sweep never crossed");
}

/// Equal error rate and the threshold attaining it.
pub fn compute_eer(s: &ScoreSet) -> Result<(f64, f64)> {
    s.require_both_sides()?;
    let mut tar = s.target.clone();
    let mut non = s.nontarget.clone();
    tar.sort_by(|x, y| x.partial_cmp(y).unwrap());
    non.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let thresholds = sweep_thresholds(s);
    let rates: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| far_frr_at(&tar, &non, t))
        .collect();
    Ok(eer_from_curves(&thresholds, &rates))
}

/// Minimum normalized detection cost over the same threshold sweep.
pub fn compute_mindcf(s: &ScoreSet, p_target: f64, c_miss: f64, c_fa: f64) -> Result<f64> {
    s.require_both_sides()?;
    if !(p_target > 0.0 && p_target < 1.0) {
        return Err(Error::contract(format!(
            "p_target must sit strictly inside (0, 1), got {p_target}"
        )));
    }
    if c_miss <= 0.0 || c_fa <= 0.0 {
        return Err(Error::contract(format!(
            "detection costs must be positive, got c_miss {c_miss}, c_fa {c_fa}"
        )));
    }
    let mut tar = s.target.clone();
    let mut non = s.nontarget.clone();
    tar.sort_by(|x, y| x.partial_cmp(y).unwrap());
    non.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let mut min_cost = f64::INFINITY;
    for &t in &sweep_thresholds(s) {
        let (far, frr) = far_frr_at(&tar, &non, t);
        let cost = p_target * c_miss * frr + (1.0 - p_target) * c_fa * far;
        if cost < min_cost {
            min_cost = cost;
        }
    }
    Ok(min_cost / (p_target * c_miss).min((1.0 - p_target) * c_fa))
}

/// Trial-wise weighted mean of several systems' score arrays. `None`
/// weights mean uniform.
pub fn ensemble_scores(systems: &[Vec<f64>], weights: Option<&[f64]>) -> Result<Vec<f64>> {
    if systems.is_empty() {
        return Err(Error::contract("ensemble over zero systems"));
    }
    let n = systems[0].len();
    for (i, s) in systems.iter().enumerate() {
        if s.len() != n {
            return Err(Error::contract(format!(
                "ensemble member {i} has {} scores, expected {n}",
                s.len()
            )));
        }
    }
    let uniform = vec![1.0 / systems.len() as f64; systems.len()];
    let w = match weights {
        Some(w) => {
            if w.len() != systems.len() {
                return Err(Error::contract(format!(
                    "{} weights for {} systems",
                    w.len(),
                    systems.len()
                )));
            }
            let total: f64 = w.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::contract(format!(
                    "ensemble weights must sum to 1, got {total}"
                )));
            }
            w
        }
        None => &uniform,
    };
    let mut out = vec![0.0; n];
    for (s, &wi) in systems.iter().zip(w.iter()) {
        for (o, &v) in out.iter_mut().zip(s.iter()) {
            *o += wi * v;
        }
    }
    Ok(out)
}

/// One scored trial line for the score file.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTrial {
    pub enroll: String,
    pub test: String,
    pub score: f64,
}

pub fn write_scores(path: &Path, scores: &[ScoredTrial]) -> Result<()> {
    let mut out = String::new();
    for s in scores {
        out.push_str(&format!("{} {} {:.6}\n", s.enroll, s.test, s.score));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoredTrial>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let source = path.display().to_string();
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::parse(
                source.clone(),
                format!(
                    "line {}: expected 'enroll_id test_id score', got {} fields",
                    lineno + 1,
                    fields.len()
                ),
            ));
        }
        let score: f64 = fields[2].parse().map_err(|_| {
            Error::parse(
                source.clone(),
                format!("line {}: unreadable score '{}'", lineno + 1, fields[2]),
            )
        })?;
        out.push(ScoredTrial {
            enroll: fields[0].to_string(),
            test: fields[1].to_string(),
            score,
        });
    }
    Ok(out)
}
