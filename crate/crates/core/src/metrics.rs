//! LRE-style evaluation: detection trials, equal error rate, actual and
//! minimum primary cost, per-language reports, confusion matrix.
//!
//! The cost contract: per operating point `P_target` in {0.5, 0.1} with
//! unit miss/false-alarm costs, decisions accept iff LLR >= theta.
//! `C(P_t)` averages `P_t * P_miss(L) + (1 - P_t) * P_fa(L)` over target
//! languages L, where `P_fa(L)` pools all nontarget trials with hypothesis
//! L. The actual cost uses the Bayes threshold `theta = ln((1-P_t)/P_t)`;
//! the minimum cost picks one global threshold per operating point by
//! exhaustive sweep. Both average over the two operating points.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::corpus::LabelSet;
use crate::fusion::ScoreMatrix;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("utterance {0:?} has no label in the key")]
    MissingLabel(String),
    #[error("label {0:?} is not in the label set")]
    UnknownLabel(String),
    #[error("trial set needs both target and nontarget trials")]
    DegenerateTrials,
    #[error("empty score matrix")]
    EmptyScores,
}

/// One detection trial: an (utterance, hypothesis language) pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trial {
    pub llr: f64,
    pub target: bool,
    /// hypothesis language index into the label set
    pub language: usize,
}

/// All detection trials of an evaluation: N x L LLRs with exactly one
/// target hypothesis per utterance.
#[derive(Debug, Clone)]
pub struct TrialSet {
    pub trials: Vec<Trial>,
    pub n_languages: usize,
}

/// Operating points of the primary cost (unit miss/false-alarm costs).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostParams {
    pub p_targets: [f64; 2],
}

impl Default for CostParams {
    fn default() -> Self {
        CostParams {
            p_targets: [0.5, 0.1],
        }
    }
}

/// Build detection trials from a score matrix and a key.
///
/// The detection LLR for (utterance u, language L) is
/// `S[u,L] - log-mean-exp over L' != L of S[u,L']` (flat prior over the
/// non-target languages); the trial is a target iff L is u's true language.
pub fn make_trials(
    scores: &ScoreMatrix,
    key: &BTreeMap<String, String>,
    labels: &LabelSet,
) -> Result<TrialSet, MetricError> {
    if scores.ids.is_empty() {
        return Err(MetricError::EmptyScores);
    }
    let n = labels.len();
    let mut trials = Vec::with_capacity(scores.ids.len() * n);
    for (u, id) in scores.ids.iter().enumerate() {
        let true_lang = key.get(id).ok_or_else(|| MetricError::MissingLabel(id.clone()))?;
        let true_idx = labels
            .index(true_lang)
            .ok_or_else(|| MetricError::UnknownLabel(true_lang.clone()))?;
        let row = scores.row(u);
        for lang in 0..n {
            let llr = row[lang] - log_mean_exp_excluding(row, lang);
            trials.push(Trial {
                llr,
                target: lang == true_idx,
                language: lang,
            });
        }
    }
    Ok(TrialSet {
        trials,
        n_languages: n,
    })
}

fn log_mean_exp_excluding(row: &[f64], skip: usize) -> f64 {
    let m = row
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != skip)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let count = row.len() - 1;
    let sum: f64 = row
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != skip)
        .map(|(_, &v)| (v - m).exp())
        .sum();
    m + (sum / count as f64).ln()
}

/// Pooled equal error rate, in percent.
///
/// Threshold sweep over distinct scores with linear interpolation between
/// adjacent ROC vertices; tied scores form a single ROC step.
pub fn eer(trials: &TrialSet) -> Result<f64, MetricError> {
    let targets: Vec<f64> = trials.trials.iter().filter(|t| t.target).map(|t| t.llr).collect();
    let nontargets: Vec<f64> = trials
        .trials
        .iter()
        .filter(|t| !t.target)
        .map(|t| t.llr)
        .collect();
    eer_from_scores(&targets, &nontargets)
}

/// EER from raw target/nontarget detection scores (percent).
pub fn eer_from_scores(targets: &[f64], nontargets: &[f64]) -> Result<f64, MetricError> {
    if targets.is_empty() || nontargets.is_empty() {
        return Err(MetricError::DegenerateTrials);
    }
    let mut thresholds: Vec<f64> = targets.iter().chain(nontargets).cloned().collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();
    let max = *thresholds.last().unwrap();
    thresholds.push(max + 1.0); // reject-everything vertex

    let mut sorted_t = targets.to_vec();
    let mut sorted_n = nontargets.to_vec();
    sorted_t.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sorted_n.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // accept iff score >= theta: P_miss counts targets below theta
    let count_below = |sorted: &[f64], theta: f64| sorted.partition_point(|&s| s < theta);

    let mut prev: Option<(f64, f64)> = None;
    for &theta in &thresholds {
        let p_miss = count_below(&sorted_t, theta) as f64 / sorted_t.len() as f64;
        let p_fa = 1.0 - count_below(&sorted_n, theta) as f64 / sorted_n.len() as f64;
        let diff = p_miss - p_fa;
        if diff.abs() < 1e-15 {
            return Ok(p_miss * 100.0);
        }
        if let Some((m0, f0)) = prev {
            if (m0 - f0) < 0.0 && diff > 0.0 {
                // linear interpolation on the ROC segment between vertices
                let d0 = m0 - f0;
                let t = d0 / (d0 - diff);
                let eer = m0 + t * (p_miss - m0);
                return Ok(eer * 100.0);
            }
        }
        prev = Some((p_miss, p_fa));
    }
    // P_miss - P_fa never crossed zero within the sweep; the ROC is
    // degenerate and EER sits at the closest endpoint
    let (m, f) = prev.unwrap();
    Ok(m.min(f) * 100.0)
}

/// Average detection cost at one threshold for one operating point.
fn cost_at_threshold(trials: &TrialSet, p_target: f64, theta: f64) -> f64 {
    let n = trials.n_languages;
    let mut miss = vec![0usize; n];
    let mut n_targets = vec![0usize; n];
    let mut fa = vec![0usize; n];
    let mut n_nontargets = vec![0usize; n];
    for t in &trials.trials {
        if t.target {
            n_targets[t.language] += 1;
            if t.llr < theta {
                miss[t.language] += 1;
            }
        } else {
            n_nontargets[t.language] += 1;
            if t.llr >= theta {
                fa[t.language] += 1;
            }
        }
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for lang in 0..n {
        if n_targets[lang] == 0 || n_nontargets[lang] == 0 {
            continue;
        }
        let p_miss = miss[lang] as f64 / n_targets[lang] as f64;
        let p_fa = fa[lang] as f64 / n_nontargets[lang] as f64;
        total += p_target * p_miss + (1.0 - p_target) * p_fa;
        counted += 1;
    }
    total / counted.max(1) as f64
}

/// Actual and minimum primary cost.
pub fn c_primary(trials: &TrialSet, params: &CostParams) -> Result<(f64, f64), MetricError> {
    let has_target = trials.trials.iter().any(|t| t.target);
    let has_nontarget = trials.trials.iter().any(|t| !t.target);
    if !has_target || !has_nontarget {
        return Err(MetricError::DegenerateTrials);
    }
    // candidate thresholds cover every achievable decision pattern
    let mut candidates: Vec<f64> = trials.trials.iter().map(|t| t.llr).collect();
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    candidates.dedup();
    candidates.push(candidates.last().unwrap() + 1.0);

    let mut act_sum = 0.0;
    let mut min_sum = 0.0;
    for &p_t in &params.p_targets {
        let bayes_theta = ((1.0 - p_t) / p_t).ln();
        act_sum += cost_at_threshold(trials, p_t, bayes_theta);
        let best = candidates
            .iter()
            .map(|&theta| cost_at_threshold(trials, p_t, theta))
            .fold(f64::INFINITY, f64::min);
        min_sum += best;
    }
    let k = params.p_targets.len() as f64;
    Ok((act_sum / k, min_sum / k))
}

/// Per-language EER table plus row-argmax confusion matrix.
#[derive(Debug, Clone)]
pub struct Reports {
    /// EER (%) per hypothesis language, in label-set order.
    pub per_language_eer: Vec<f64>,
    /// confusion[true][predicted] counts.
    pub confusion: Vec<Vec<usize>>,
    pub labels: LabelSet,
}

impl Reports {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("language\teer_percent\n");
        for (code, eer) in self.labels.codes().iter().zip(&self.per_language_eer) {
            out.push_str(&format!("{code}\t{eer:.4}\n"));
        }
        out.push('\n');
        out.push_str("confusion");
        for code in self.labels.codes() {
            out.push_str(&format!("\t{code}"));
        }
        out.push('\n');
        for (code, row) in self.labels.codes().iter().zip(&self.confusion) {
            out.push_str(code);
            for &c in row {
                out.push_str(&format!("\t{c}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn summary_text(&self) -> String {
        let mut out = String::from("per-language EER (%):\n");
        for (code, eer) in self.labels.codes().iter().zip(&self.per_language_eer) {
            out.push_str(&format!("  {code:>14}  {eer:6.2}\n"));
        }
        let correct: usize = (0..self.labels.len()).map(|i| self.confusion[i][i]).sum();
        let total: usize = self.confusion.iter().map(|r| r.iter().sum::<usize>()).sum();
        out.push_str(&format!(
            "identification accuracy: {correct}/{total} ({:.2}%)\n",
            100.0 * correct as f64 / total.max(1) as f64
        ));
        out
    }
}

/// Per-language EER and confusion matrix for a scored evaluation set.
pub fn reports(
    scores: &ScoreMatrix,
    key: &BTreeMap<String, String>,
    labels: &LabelSet,
) -> Result<Reports, MetricError> {
    let trials = make_trials(scores, key, labels)?;
    let n = labels.len();
    let mut per_language_eer = Vec::with_capacity(n);
    for lang in 0..n {
        let targets: Vec<f64> = trials
            .trials
            .iter()
            .filter(|t| t.language == lang && t.target)
            .map(|t| t.llr)
            .collect();
        let nontargets: Vec<f64> = trials
            .trials
            .iter()
            .filter(|t| t.language == lang && !t.target)
            .map(|t| t.llr)
            .collect();
        per_language_eer.push(eer_from_scores(&targets, &nontargets)?);
    }
    let mut confusion = vec![vec![0usize; n]; n];
    for (u, id) in scores.ids.iter().enumerate() {
        let true_lang = key.get(id).ok_or_else(|| MetricError::MissingLabel(id.clone()))?;
        let true_idx = labels
            .index(true_lang)
            .ok_or_else(|| MetricError::UnknownLabel(true_lang.clone()))?;
        let row = scores.row(u);
        let pred = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        confusion[true_idx][pred] += 1;
    }
    Ok(Reports {
        per_language_eer,
        confusion,
        labels: labels.clone(),
    })
}
