//! Scoring throughput and peak-memory measurement over a completed run.

use std::path::Path;
use std::time::Instant;

use lidkit::corpus::{load_manifest, LabelSet};

use crate::pipeline::{score_archive_inner, PipelineError, RunMeta};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub system: String,
    pub n_files: usize,
    pub seconds_per_100: f64,
    pub peak_rss_mb: f64,
}

impl BenchRecord {
    pub fn to_tsv(&self) -> String {
        format!(
            "system\tn_files\tseconds_per_100_files\tpeak_rss_mb\n{}\t{}\t{:.3}\t{:.1}\n",
            self.system, self.n_files, self.seconds_per_100, self.peak_rss_mb
        )
    }

    pub fn load(path: &Path) -> Result<BenchRecord, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Stage {
            stage: "bench",
            detail: format!("{}: {e}", path.display()),
        })?;
        let row = text.lines().nth(1).ok_or_else(|| PipelineError::Stage {
            stage: "bench",
            detail: "missing data row".into(),
        })?;
        let cols: Vec<&str> = row.split('\t').collect();
        if cols.len() != 4 {
            return Err(PipelineError::Stage {
                stage: "bench",
                detail: "expected 4 columns".into(),
            });
        }
        Ok(BenchRecord {
            system: cols[0].to_string(),
            n_files: cols[1].parse().map_err(|_| PipelineError::Stage {
                stage: "bench",
                detail: "bad n_files".into(),
            })?,
            seconds_per_100: cols[2].parse().unwrap_or(f64::NAN),
            peak_rss_mb: cols[3].parse().unwrap_or(f64::NAN),
        })
    }
}

/// Peak resident set size of this process, from /proc/self/status.
pub fn peak_rss_mb() -> f64 {
    let Ok(status) = std::fs::read_to_string("/proc/self/status") else {
        return f64::NAN;
    };
    for line in status.lines() {
        if let Some(rest) = line.strip_prefix("VmHWM:") {
            let kb: f64 = rest
                .trim()
                .trim_end_matches("kB")
                .trim()
                .parse()
                .unwrap_or(f64::NAN);
            return kb / 1024.0;
        }
    }
    f64::NAN
}

/// Time validation-set scoring for `n_files` utterances (cycling through
/// the validation manifest when it is shorter) and record peak memory.
pub fn benchmark(run_dir: &Path, n_files: usize) -> Result<BenchRecord, PipelineError> {
    if n_files == 0 {
        return Err(PipelineError::Stage {
            stage: "bench",
            detail: "empty benchmark set".into(),
        });
    }
    let meta_text = std::fs::read_to_string(run_dir.join("run.toml")).map_err(|e| {
        PipelineError::Stage {
            stage: "bench",
            detail: format!("{}: {e}", run_dir.display()),
        }
    })?;
    let meta: RunMeta = toml::from_str(&meta_text).map_err(|e| PipelineError::Stage {
        stage: "bench",
        detail: e.to_string(),
    })?;
    let manifest = load_val_manifest(run_dir, &meta)?;
    // score whole validation passes until n_files utterances are timed
    let started = Instant::now();
    let mut scored = 0usize;
    while scored < n_files {
        let take = (n_files - scored).min(manifest.records.len());
        let mut pass = manifest.clone();
        pass.records.truncate(take);
        score_archive_inner(&meta.model_path, &meta.val_archive, &pass, 3.0, &meta.label)?;
        scored += take;
    }
    let elapsed = started.elapsed().as_secs_f64();
    Ok(BenchRecord {
        system: meta.label.clone(),
        n_files,
        seconds_per_100: elapsed * 100.0 / n_files as f64,
        peak_rss_mb: peak_rss_mb(),
    })
}

fn load_val_manifest(
    run_dir: &Path,
    meta: &RunMeta,
) -> Result<lidkit::corpus::Manifest, PipelineError> {
    // the label set is recoverable from the scores header
    let (_, codes) = lidkit::fusion::ScoreMatrix::load_tsv(
        &run_dir.join("scores_val.tsv"),
        &meta.label,
    )
    .map_err(|e| PipelineError::Stage {
        stage: "bench",
        detail: e.to_string(),
    })?;
    let labels = LabelSet::new(codes);
    load_manifest(&run_dir.join("val.tsv"), &labels).map_err(|e| PipelineError::Stage {
        stage: "bench",
        detail: e.to_string(),
    })
}
