//! Evaluation and fusion reporting over completed runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use lidkit::corpus::LabelSet;
use lidkit::fusion::{apply_fusion, fit_fusion, FusionWeights, ScoreMatrix};
use lidkit::metrics::{c_primary, eer, make_trials, reports, CostParams, Reports};

use crate::bench::BenchRecord;
use crate::pipeline::{load_key, PipelineError, RunMeta};

const FUSION_LAMBDA: f64 = 1e-4;

fn stage_err(stage: &'static str, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Stage {
        stage,
        detail: e.to_string(),
    }
}

/// Pooled metrics of one (possibly fused) system.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemMetrics {
    pub system: String,
    pub eer_percent: f64,
    pub act_c: f64,
    pub min_c: f64,
}

/// Table-3-style report: singles, requested fusion subsets, the
/// all-system fusion, plus any benchmark timings found in the run dirs.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub rows: Vec<SystemMetrics>,
    pub bench: Vec<BenchRecord>,
}

impl RunReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("system\teer_percent\tact_c_primary\tmin_c_primary\n");
        for r in &self.rows {
            writeln!(
                out,
                "{}\t{:.4}\t{:.5}\t{:.5}",
                r.system, r.eer_percent, r.act_c, r.min_c
            )
            .unwrap();
        }
        if !self.bench.is_empty() {
            out.push('\n');
            out.push_str("system\tseconds_per_100_files\tpeak_rss_mb\tn_files\n");
            for b in &self.bench {
                writeln!(
                    out,
                    "{}\t{:.3}\t{:.1}\t{}",
                    b.system, b.seconds_per_100, b.peak_rss_mb, b.n_files
                )
                .unwrap();
            }
        }
        out
    }

    pub fn summary_text(&self) -> String {
        let mut out = String::from("system            EER%    actC     minC\n");
        for r in &self.rows {
            writeln!(
                out,
                "{:<16} {:6.2}  {:.5}  {:.5}",
                r.system, r.eer_percent, r.act_c, r.min_c
            )
            .unwrap();
        }
        out
    }
}

/// Pooled EER and primary costs for one score matrix.
pub fn evaluate_scores(
    scores: &ScoreMatrix,
    key: &BTreeMap<String, String>,
    labels: &LabelSet,
) -> Result<SystemMetrics, PipelineError> {
    let trials = make_trials(scores, key, labels).map_err(|e| stage_err("evaluate", e))?;
    let eer_pct = eer(&trials).map_err(|e| stage_err("evaluate", e))?;
    let (act_c, min_c) =
        c_primary(&trials, &CostParams::default()).map_err(|e| stage_err("evaluate", e))?;
    Ok(SystemMetrics {
        system: scores.system_id.clone(),
        eer_percent: eer_pct,
        act_c,
        min_c,
    })
}

/// Per-language EER table and confusion matrix for one score matrix.
pub fn evaluate_reports(
    scores: &ScoreMatrix,
    key: &BTreeMap<String, String>,
    labels: &LabelSet,
) -> Result<Reports, PipelineError> {
    reports(scores, key, labels).map_err(|e| stage_err("evaluate", e))
}

/// A completed run's validation scores and metadata.
pub struct LoadedRun {
    pub meta: RunMeta,
    pub val_scores: ScoreMatrix,
    pub codes: Vec<String>,
    pub bench: Option<BenchRecord>,
}

pub fn load_run(run_dir: &Path) -> Result<LoadedRun, PipelineError> {
    let meta_text = std::fs::read_to_string(run_dir.join("run.toml"))
        .map_err(|e| stage_err("report", format!("{}: {e}", run_dir.display())))?;
    let meta: RunMeta =
        toml::from_str(&meta_text).map_err(|e| stage_err("report", e.to_string()))?;
    let (val_scores, codes) =
        ScoreMatrix::load_tsv(&run_dir.join("scores_val.tsv"), &meta.label)
            .map_err(|e| stage_err("report", e))?;
    let bench = BenchRecord::load(&run_dir.join("bench.tsv")).ok();
    Ok(LoadedRun {
        meta,
        val_scores,
        codes,
        bench,
    })
}

/// Fit fusion on validation scores and evaluate singles, the requested
/// subsets, and the all-system fusion. Fusion weight files land in
/// `out_dir` when given.
pub fn run_fusion_report(
    run_dirs: &[PathBuf],
    key_path: &Path,
    subsets: &[String],
    out_dir: Option<&Path>,
) -> Result<RunReport, PipelineError> {
    if run_dirs.is_empty() {
        return Err(stage_err("report", "no runs given"));
    }
    let key = load_key(key_path)?;
    let runs: Vec<LoadedRun> = run_dirs.iter().map(|d| load_run(d)).collect::<Result<_, _>>()?;
    let codes = runs[0].codes.clone();
    for r in &runs {
        if r.codes != codes {
            return Err(stage_err(
                "report",
                format!("run {} has a different language set", r.meta.label),
            ));
        }
    }
    let labels = LabelSet::new(codes);
    let by_label: BTreeMap<&str, &LoadedRun> = runs
        .iter()
        .map(|r| (r.meta.label.as_str(), r))
        .collect();

    let mut rows = Vec::new();
    for run in &runs {
        rows.push(evaluate_scores(&run.val_scores, &key, &labels)?);
    }

    let mut fusion_jobs: Vec<Vec<String>> = subsets
        .iter()
        .map(|s| s.split('+').map(|p| p.trim().to_string()).collect())
        .collect();
    if runs.len() > 1 {
        // the all-system fusion mirrors the final-fusion row
        let all: Vec<String> = runs.iter().map(|r| r.meta.label.clone()).collect();
        if !fusion_jobs.contains(&all) {
            fusion_jobs.push(all);
        }
    }
    for job in &fusion_jobs {
        let mut systems = Vec::with_capacity(job.len());
        for label in job {
            let run = by_label.get(label.as_str()).ok_or_else(|| {
                stage_err("report", format!("fusion subset references unknown run {label:?}"))
            })?;
            systems.push(run.val_scores.clone());
        }
        let name = job.join("+");
        let (weights, fused) = fuse_systems(&systems, &key, &labels)?;
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| stage_err("report", e))?;
            let system_ids: Vec<String> = job.clone();
            weights
                .save_tsv(&dir.join(format!("fusion_{}.tsv", name.replace('+', "_"))), &system_ids)
                .map_err(|e| stage_err("report", e))?;
        }
        let mut metrics = evaluate_scores(&fused, &key, &labels)?;
        metrics.system = name;
        rows.push(metrics);
    }

    let bench = runs.iter().filter_map(|r| r.bench.clone()).collect();
    Ok(RunReport { rows, bench })
}

/// Fit-and-apply on the same validation scores (the paper's protocol:
/// fusion weights come from the validation set).
pub fn fuse_systems(
    systems: &[ScoreMatrix],
    key: &BTreeMap<String, String>,
    labels: &LabelSet,
) -> Result<(FusionWeights, ScoreMatrix), PipelineError> {
    let weights = fit_fusion(systems, key, labels, FUSION_LAMBDA).map_err(|e| {
        PipelineError::Numeric {
            stage: "fuse",
            detail: e.to_string(),
        }
    })?;
    let fused = apply_fusion(&weights, systems).map_err(|e| stage_err("fuse", e))?;
    Ok((weights, fused))
}
