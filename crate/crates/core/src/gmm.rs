//! Diagonal-covariance GMM back-end: UBM training by EM with binary
//! mixture splitting, MAP mean adaptation of per-language models, and
//! length-normalized log-likelihood-ratio scoring.

use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::features::{FeatureKind, FeatureMatrix};
use crate::mat::Mat;

#[derive(Debug, Error)]
pub enum GmmError {
    #[error("no frames to train on")]
    EmptyData,
    #[error("{frames} frames cannot support {k} mixtures")]
    TooFewFrames { frames: usize, k: usize },
    #[error("dimension mismatch: model D={model}, data D={data}")]
    DimMismatch { model: usize, data: usize },
    #[error("feature kind mismatch: model {model:?}, utterance {utt:?}")]
    KindMismatch { model: FeatureKind, utt: FeatureKind },
    #[error("empty feature matrix")]
    EmptyFeatures,
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: corrupt model file: {detail}")]
    Corrupt { path: String, detail: String },
}

/// Relative variance floor: this fraction of the global per-dim variance.
const VARIANCE_FLOOR_FRACTION: f64 = 1e-3;
/// Frame block size for the deterministic parallel E-step reduction.
const EM_BLOCK: usize = 4096;

/// Diagonal-covariance Gaussian mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    /// K x D
    pub means: Mat,
    /// K x D
    pub variances: Mat,
    pub kind: FeatureKind,
}

impl GmmModel {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.cols
    }

    /// log N(x; m_k, diag sigma2_k) + log w_k for every component.
    fn component_log_joint(&self, x: &[f64], out: &mut [f64]) {
        const LOG_2PI: f64 = 1.837_877_066_409_345_5;
        for k in 0..self.k() {
            let m = self.means.row(k);
            let v = self.variances.row(k);
            let mut acc = 0.0;
            for d in 0..x.len() {
                let diff = x[d] - m[d];
                acc += (v[d].ln() + LOG_2PI) + diff * diff / v[d];
            }
            out[k] = self.weights[k].max(1e-300).ln() - 0.5 * acc;
        }
    }

    /// Total log-density of one frame.
    pub fn log_likelihood(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim());
        let mut joint = vec![0.0; self.k()];
        self.component_log_joint(x, &mut joint);
        log_sum_exp(&joint)
    }

    /// Mean per-frame log-likelihood over a set of frames.
    pub fn avg_log_likelihood(&self, frames: &[Vec<f64>]) -> f64 {
        let total: f64 = frames.iter().map(|x| self.log_likelihood(x)).sum();
        total / frames.len() as f64
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return m;
    }
    m + v.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Closed-form single-Gaussian fit (the K=1 M-step).
fn global_gaussian(frames: &[Vec<f64>], kind: FeatureKind) -> (GmmModel, Vec<f64>) {
    let d = frames[0].len();
    let n = frames.len() as f64;
    let mut mean = vec![0.0f64; d];
    for x in frames {
        for (m, &v) in mean.iter_mut().zip(x) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0f64; d];
    for x in frames {
        for (s, (&v, &m)) in var.iter_mut().zip(x.iter().zip(&mean)) {
            *s += (v - m) * (v - m);
        }
    }
    for v in &mut var {
        *v /= n;
    }
    let floor: Vec<f64> = var
        .iter()
        .map(|&v| (v * VARIANCE_FLOOR_FRACTION).max(1e-10))
        .collect();
    let var_floored: Vec<f64> = var.iter().zip(&floor).map(|(&v, &f)| v.max(f)).collect();
    (
        GmmModel {
            weights: vec![1.0],
            means: Mat {
                rows: 1,
                cols: d,
                data: mean,
            },
            variances: Mat {
                rows: 1,
                cols: d,
                data: var_floored,
            },
            kind,
        },
        floor,
    )
}

struct EmAccumulator {
    n: Vec<f64>,
    sum: Mat,
    sq_sum: Mat,
    log_likelihood: f64,
}

impl EmAccumulator {
    fn zeros(k: usize, d: usize) -> Self {
        EmAccumulator {
            n: vec![0.0; k],
            sum: Mat::zeros(k, d),
            sq_sum: Mat::zeros(k, d),
            log_likelihood: 0.0,
        }
    }

    fn merge(&mut self, other: &EmAccumulator) {
        for (a, b) in self.n.iter_mut().zip(&other.n) {
            *a += b;
        }
        for (a, b) in self.sum.data.iter_mut().zip(&other.sum.data) {
            *a += b;
        }
        for (a, b) in self.sq_sum.data.iter_mut().zip(&other.sq_sum.data) {
            *a += b;
        }
        self.log_likelihood += other.log_likelihood;
    }
}

/// One E-step pass. Blocks are accumulated in parallel and merged in fixed
/// block order, so results do not depend on the worker count.
fn e_step(model: &GmmModel, frames: &[Vec<f64>]) -> EmAccumulator {
    let k = model.k();
    let d = model.dim();
    let blocks: Vec<EmAccumulator> = frames
        .par_chunks(EM_BLOCK)
        .map(|block| {
            let mut acc = EmAccumulator::zeros(k, d);
            let mut joint = vec![0.0f64; k];
            for x in block {
                model.component_log_joint(x, &mut joint);
                let lse = log_sum_exp(&joint);
                acc.log_likelihood += lse;
                for c in 0..k {
                    let resp = (joint[c] - lse).exp();
                    if resp < 1e-12 {
                        continue;
                    }
                    acc.n[c] += resp;
                    let sum_row = acc.sum.row_mut(c);
                    for (s, &v) in sum_row.iter_mut().zip(x) {
                        *s += resp * v;
                    }
                    let sq_row = acc.sq_sum.row_mut(c);
                    for (s, &v) in sq_row.iter_mut().zip(x) {
                        *s += resp * v * v;
                    }
                }
            }
            acc
        })
        .collect();
    let mut total = EmAccumulator::zeros(k, d);
    for b in &blocks {
        total.merge(b);
    }
    total
}

/// EM at fixed K. Returns the refined model and the per-iteration total
/// log-likelihood (evaluated under the model entering each iteration).
pub fn em_fit(
    model: &GmmModel,
    frames: &[Vec<f64>],
    iters: usize,
    variance_floor: &[f64],
) -> (GmmModel, Vec<f64>) {
    let mut model = model.clone();
    let mut ll_trace = Vec::with_capacity(iters);
    for _ in 0..iters {
        let acc = e_step(&model, frames);
        ll_trace.push(acc.log_likelihood);
        let total_n: f64 = acc.n.iter().sum();
        for c in 0..model.k() {
            if acc.n[c] < 1e-8 {
                continue; // starved component: leave untouched
            }
            model.weights[c] = acc.n[c] / total_n;
            let inv_n = 1.0 / acc.n[c];
            for d in 0..model.dim() {
                let mean = acc.sum.at(c, d) * inv_n;
                let var = (acc.sq_sum.at(c, d) * inv_n - mean * mean).max(variance_floor[d]);
                *model.means.at_mut(c, d) = mean;
                *model.variances.at_mut(c, d) = var;
            }
        }
        let wsum: f64 = model.weights.iter().sum();
        for w in &mut model.weights {
            *w /= wsum;
        }
    }
    (model, ll_trace)
}

/// Split the heaviest `count` components in two along their largest-
/// variance dimension (+/- 0.2 standard deviations), with a small random
/// jitter that breaks symmetric ties.
fn split_components(model: &GmmModel, count: usize, rng: &mut ChaCha8Rng) -> GmmModel {
    let k = model.k();
    let d = model.dim();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        model.weights[b]
            .partial_cmp(&model.weights[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let to_split: Vec<usize> = order.into_iter().take(count).collect();
    let mut weights = Vec::with_capacity(k + count);
    let mut means = Vec::with_capacity((k + count) * d);
    let mut vars = Vec::with_capacity((k + count) * d);
    for c in 0..k {
        if to_split.contains(&c) {
            let row = model.variances.row(c);
            let d_max = (0..d)
                .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
                .unwrap();
            let jitter: Vec<f64> = (0..d)
                .map(|dd| 0.01 * model.variances.at(c, dd).sqrt() * rng.gen_range(-1.0..1.0))
                .collect();
            for sign in [1.0, -1.0] {
                weights.push(model.weights[c] / 2.0);
                for dd in 0..d {
                    let offset = if dd == d_max {
                        sign * 0.2 * model.variances.at(c, dd).sqrt()
                    } else {
                        0.0
                    };
                    means.push(model.means.at(c, dd) + offset + sign * jitter[dd]);
                    vars.push(model.variances.at(c, dd));
                }
            }
        } else {
            weights.push(model.weights[c]);
            means.extend_from_slice(model.means.row(c));
            vars.extend_from_slice(model.variances.row(c));
        }
    }
    let k_new = weights.len();
    GmmModel {
        weights,
        means: Mat {
            rows: k_new,
            cols: d,
            data: means,
        },
        variances: Mat {
            rows: k_new,
            cols: d,
            data: vars,
        },
        kind: model.kind,
    }
}

/// Train a universal background model: start from the closed-form global
/// Gaussian and double the mixture count by binary splitting, running
/// `em_iters` EM iterations after each split.
pub fn train_ubm(
    frames: &[Vec<f64>],
    kind: FeatureKind,
    k: usize,
    em_iters: usize,
    seed: u64,
) -> Result<GmmModel, GmmError> {
    if frames.is_empty() {
        return Err(GmmError::EmptyData);
    }
    if frames.len() < k {
        return Err(GmmError::TooFewFrames {
            frames: frames.len(),
            k,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut model, floor) = global_gaussian(frames, kind);
    while model.k() < k {
        let split = (k - model.k()).min(model.k());
        model = split_components(&model, split, &mut rng);
        let (refined, _) = em_fit(&model, frames, em_iters, &floor);
        model = refined;
    }
    Ok(model)
}

/// MAP configuration: relevance factor for mean adaptation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapConfig {
    pub relevance_r: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        MapConfig { relevance_r: 16.0 }
    }
}

/// MAP-adapt component means toward per-language data:
/// `m' = (n_k x_k + r m_k) / (n_k + r)`; weights and variances are copied
/// from the UBM unchanged.
pub fn map_adapt_means(
    ubm: &GmmModel,
    frames: &[Vec<f64>],
    cfg: &MapConfig,
) -> Result<GmmModel, GmmError> {
    assert!(cfg.relevance_r > 0.0);
    if let Some(x) = frames.first() {
        if x.len() != ubm.dim() {
            return Err(GmmError::DimMismatch {
                model: ubm.dim(),
                data: x.len(),
            });
        }
    } else {
        eprintln!("warning: empty adaptation set, returning the UBM unchanged");
        return Ok(ubm.clone());
    }
    let acc = e_step(ubm, frames);
    let mut adapted = ubm.clone();
    for c in 0..ubm.k() {
        if acc.n[c] < 1e-12 {
            continue;
        }
        let n_k = acc.n[c];
        let w = n_k / (n_k + cfg.relevance_r);
        for d in 0..ubm.dim() {
            let data_mean = acc.sum.at(c, d) / n_k;
            *adapted.means.at_mut(c, d) = w * data_mean + (1.0 - w) * ubm.means.at(c, d);
        }
    }
    Ok(adapted)
}

/// Length-normalized log-likelihood ratios against the UBM, one score per
/// adapted language model.
pub fn gmm_score(
    ubm: &GmmModel,
    language_models: &[GmmModel],
    utt: &FeatureMatrix,
) -> Result<Vec<f64>, GmmError> {
    if utt.frames == 0 {
        return Err(GmmError::EmptyFeatures);
    }
    if utt.kind != ubm.kind {
        return Err(GmmError::KindMismatch {
            model: ubm.kind,
            utt: utt.kind,
        });
    }
    if utt.dims != ubm.dim() {
        return Err(GmmError::DimMismatch {
            model: ubm.dim(),
            data: utt.dims,
        });
    }
    let frames: Vec<Vec<f64>> = utt.rows().map(<[f64]>::to_vec).collect();
    Ok(score_frames(ubm, language_models, &frames))
}

/// Scoring core over raw frames (no kind checks); test harnesses with toy
/// dimensionalities call this directly.
pub fn score_frames(ubm: &GmmModel, language_models: &[GmmModel], frames: &[Vec<f64>]) -> Vec<f64> {
    let ubm_ll = ubm.avg_log_likelihood(frames);
    language_models
        .iter()
        .map(|m| m.avg_log_likelihood(frames) - ubm_ll)
        .collect()
}

const MODEL_MAGIC: &[u8; 4] = b"LIDG";
const MODEL_VERSION: u32 = 1;

/// Serialize as versioned little-endian binary:
/// magic "LIDG", version, kind tag, K, D, weights, means, variances.
pub fn save_model(path: &Path, model: &GmmModel) -> Result<(), GmmError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    buf.push(model.kind.tag());
    buf.extend_from_slice(&(model.k() as u32).to_le_bytes());
    buf.extend_from_slice(&(model.dim() as u32).to_le_bytes());
    for &w in &model.weights {
        buf.extend_from_slice(&w.to_le_bytes());
    }
    for &m in &model.means.data {
        buf.extend_from_slice(&m.to_le_bytes());
    }
    for &v in &model.variances.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| GmmError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_model(path: &Path) -> Result<GmmModel, GmmError> {
    let mut file = std::fs::File::open(path).map_err(|e| GmmError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| GmmError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let corrupt = |detail: &str| GmmError::Corrupt {
        path: path.display().to_string(),
        detail: detail.to_string(),
    };
    if bytes.len() < 17 || &bytes[..4] != MODEL_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != MODEL_VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let kind = FeatureKind::from_tag(bytes[8]).ok_or_else(|| corrupt("unknown feature kind"))?;
    let k = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[13..17].try_into().unwrap()) as usize;
    let need = 17 + 8 * (k + 2 * k * d);
    if bytes.len() != need {
        return Err(corrupt("wrong payload size"));
    }
    let mut vals = bytes[17..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let weights: Vec<f64> = (&mut vals).take(k).collect();
    let means: Vec<f64> = (&mut vals).take(k * d).collect();
    let variances: Vec<f64> = (&mut vals).take(k * d).collect();
    Ok(GmmModel {
        weights,
        means: Mat {
            rows: k,
            cols: d,
            data: means,
        },
        variances: Mat {
            rows: k,
            cols: d,
            data: variances,
        },
        kind,
    })
}

/// Write a language-model bundle (UBM + adapted models) to a directory.
pub fn save_bundle(dir: &Path, ubm: &GmmModel, models: &[GmmModel]) -> Result<(), GmmError> {
    std::fs::create_dir_all(dir).map_err(|e| GmmError::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    save_model(&dir.join("ubm.gmm"), ubm)?;
    for (i, m) in models.iter().enumerate() {
        save_model(&dir.join(format!("lang{i:03}.gmm")), m)?;
    }
    let meta = dir.join("bundle.tsv");
    let mut out = String::from("n_models\t");
    out.push_str(&models.len().to_string());
    out.push('\n');
    std::fs::write(&meta, out).map_err(|e| GmmError::Io {
        path: meta.display().to_string(),
        source: e,
    })
}

pub fn load_bundle(dir: &Path) -> Result<(GmmModel, Vec<GmmModel>), GmmError> {
    let meta_path = dir.join("bundle.tsv");
    let meta = std::fs::read_to_string(&meta_path).map_err(|e| GmmError::Io {
        path: meta_path.display().to_string(),
        source: e,
    })?;
    let n: usize = meta
        .lines()
        .next()
        .and_then(|l| l.strip_prefix("n_models\t"))
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| GmmError::Corrupt {
            path: meta_path.display().to_string(),
            detail: "bad bundle metadata".into(),
        })?;
    let ubm = load_model(&dir.join("ubm.gmm"))?;
    let models: Result<Vec<GmmModel>, GmmError> = (0..n)
        .map(|i| load_model(&dir.join(format!("lang{i:03}.gmm"))))
        .collect();
    Ok((ubm, models?))
}

/// Draw frames from a GMM (testing and synthetic-study support).
pub fn sample_frames(model: &GmmModel, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    use rand_distr::{Distribution, Normal};
    let mut frames = Vec::with_capacity(n);
    for _ in 0..n {
        let draw: f64 = rng.gen();
        let mut cdf = 0.0;
        let mut comp = model.k() - 1;
        for (c, &w) in model.weights.iter().enumerate() {
            cdf += w;
            if draw < cdf {
                comp = c;
                break;
            }
        }
        let frame: Vec<f64> = (0..model.dim())
            .map(|d| {
                let dist =
                    Normal::new(model.means.at(comp, d), model.variances.at(comp, d).sqrt())
                        .expect("valid normal");
                dist.sample(rng)
            })
            .collect();
        frames.push(frame);
    }
    frames
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_frames(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect()
    }

    #[test]
    fn k1_is_the_closed_form_gaussian() {
        let frames = random_frames(500, 3, 71);
        let model = train_ubm(&frames, FeatureKind::Mfcc16Sdc112, 1, 5, 0).unwrap();
        let n = frames.len() as f64;
        for d in 0..3 {
            let mean: f64 = frames.iter().map(|f| f[d]).sum::<f64>() / n;
            let var: f64 = frames.iter().map(|f| (f[d] - mean).powi(2)).sum::<f64>() / n;
            assert!((model.means.at(0, d) - mean).abs() < 1e-9);
            assert!((model.variances.at(0, d) - var).abs() < 1e-9);
        }
        assert_eq!(model.weights, vec![1.0]);
    }

    fn two_cluster_data(seed: u64) -> (Vec<Vec<f64>>, [[f64; 2]; 2]) {
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers = [[-2.0, -1.5], [2.0, 1.5]];
        let noise = Normal::new(0.0, 0.3).unwrap();
        let mut frames = Vec::new();
        for i in 0..2000 {
            let c = centers[i % 2];
            frames.push(vec![c[0] + noise.sample(&mut rng), c[1] + noise.sample(&mut rng)]);
        }
        (frames, centers)
    }

    #[test]
    fn k2_recovers_separated_clusters() {
        let (frames, centers) = two_cluster_data(72);
        let model = train_ubm(&frames, FeatureKind::Mfcc16Sdc112, 2, 15, 1).unwrap();
        // match recovered components to true centers
        let m0 = model.means.row(0);
        let (want0, want1) = if m0[0] < 0.0 {
            (centers[0], centers[1])
        } else {
            (centers[1], centers[0])
        };
        for d in 0..2 {
            assert!(
                (model.means.at(0, d) - want0[d]).abs() < 0.1,
                "component 0 dim {d}: {} vs {}",
                model.means.at(0, d),
                want0[d]
            );
            assert!((model.means.at(1, d) - want1[d]).abs() < 0.1);
        }
        for &w in &model.weights {
            assert!((w - 0.5).abs() < 0.05, "weights {:?}", model.weights);
        }
    }

    #[test]
    fn em_log_likelihood_is_monotone() {
        let frames = random_frames(800, 3, 73);
        let (start, floor) = global_gaussian(&frames, FeatureKind::Mfcc16Sdc112);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let split = split_components(&start, 1, &mut rng);
        let split = split_components(&split, 2, &mut rng);
        let (_, trace) = em_fit(&split, &frames, 20, &floor);
        assert_eq!(trace.len(), 20);
        for w in trace.windows(2) {
            assert!(
                w[1] >= w[0] - 1e-6 * w[0].abs().max(1.0),
                "log-likelihood decreased: {} -> {}",
                w[0],
                w[1]
            );
        }
    }

    #[test]
    fn em_monotone_on_random_small_instances() {
        let mut seed_rng = ChaCha8Rng::seed_from_u64(74);
        for trial in 0..10 {
            let k = 1 + (seed_rng.gen::<u64>() % 8) as usize;
            let d = 1 + (seed_rng.gen::<u64>() % 4) as usize;
            let frames = random_frames(300 + k * 30, d, 75 + trial);
            let (start, floor) = global_gaussian(&frames, FeatureKind::Mfcc16Sdc112);
            let mut model = start;
            let mut rng = ChaCha8Rng::seed_from_u64(trial);
            while model.k() < k {
                let split = (k - model.k()).min(model.k());
                model = split_components(&model, split, &mut rng);
            }
            let (_, trace) = em_fit(&model, &frames, 8, &floor);
            for w in trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-6 * w[0].abs().max(1.0), "trial {trial}");
            }
        }
    }

    #[test]
    fn map_with_huge_relevance_keeps_the_ubm() {
        let frames = random_frames(400, 2, 76);
        let ubm = train_ubm(&frames, FeatureKind::Mfcc16Sdc112, 4, 8, 3).unwrap();
        let adapt_data = random_frames(100, 2, 77);
        let adapted = map_adapt_means(
            &ubm,
            &adapt_data,
            &MapConfig {
                relevance_r: 1e9,
            },
        )
        .unwrap();
        for (a, b) in adapted.means.data.iter().zip(&ubm.means.data) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(adapted.weights, ubm.weights);
        assert_eq!(adapted.variances, ubm.variances);
    }

    #[test]
    fn map_single_component_approaches_sample_mean() {
        let frames = random_frames(300, 2, 78);
        let ubm = train_ubm(&frames, FeatureKind::Mfcc16Sdc112, 1, 3, 4).unwrap();
        let adapt_data: Vec<Vec<f64>> = random_frames(5000, 2, 79)
            .into_iter()
            .map(|f| vec![f[0] + 3.0, f[1] - 2.0])
            .collect();
        let cfg = MapConfig { relevance_r: 16.0 };
        let adapted = map_adapt_means(&ubm, &adapt_data, &cfg).unwrap();
        let n = adapt_data.len() as f64;
        for d in 0..2 {
            let sample_mean: f64 = adapt_data.iter().map(|f| f[d]).sum::<f64>() / n;
            let bound =
                cfg.relevance_r / (n + cfg.relevance_r) * (ubm.means.at(0, d) - sample_mean).abs();
            assert!(
                (adapted.means.at(0, d) - sample_mean).abs() <= bound + 1e-9,
                "dim {d}"
            );
        }
    }

    #[test]
    fn map_empty_set_returns_ubm() {
        let frames = random_frames(200, 2, 80);
        let ubm = train_ubm(&frames, FeatureKind::Mfcc16Sdc112, 2, 4, 5).unwrap();
        let adapted = map_adapt_means(&ubm, &[], &MapConfig::default()).unwrap();
        assert_eq!(adapted, ubm);
    }

    #[test]
    fn map_mean_lies_between_ubm_and_data_mean() {
        let frames = random_frames(500, 3, 81);
        let ubm = train_ubm(&frames, FeatureKind::Mfcc16Sdc112, 4, 6, 6).unwrap();
        let adapt_data: Vec<Vec<f64>> = random_frames(400, 3, 82)
            .into_iter()
            .map(|f| vec![f[0] * 1.5 + 1.0, f[1] - 0.5, f[2]])
            .collect();
        let adapted = map_adapt_means(&ubm, &adapt_data, &MapConfig::default()).unwrap();
        // recompute the posterior-weighted data means the same way
        let acc = e_step(&ubm, &adapt_data);
        for c in 0..ubm.k() {
            if acc.n[c] < 1e-12 {
                continue;
            }
            for d in 0..3 {
                let data_mean = acc.sum.at(c, d) / acc.n[c];
                let lo = ubm.means.at(c, d).min(data_mean) - 1e-12;
                let hi = ubm.means.at(c, d).max(data_mean) + 1e-12;
                let got = adapted.means.at(c, d);
                assert!((lo..=hi).contains(&got), "component {c} dim {d}");
            }
        }
    }

    #[test]
    fn component_density_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        let frames = random_frames(200, 3, 84);
        let model = train_ubm(&frames, FeatureKind::Mfcc16Sdc112, 4, 5, 7).unwrap();
        for _ in 0..50 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let mut joint = vec![0.0; model.k()];
            model.component_log_joint(&x, &mut joint);
            for c in 0..model.k() {
                // brute force: density from first principles
                let mut dens = model.weights[c];
                for d in 0..3 {
                    let v = model.variances.at(c, d);
                    let diff = x[d] - model.means.at(c, d);
                    dens *= (-diff * diff / (2.0 * v)).exp()
                        / (2.0 * std::f64::consts::PI * v).sqrt();
                }
                assert!(
                    (joint[c] - dens.ln()).abs() < 1e-8,
                    "component {c}: {} vs {}",
                    joint[c],
                    dens.ln()
                );
            }
        }
    }

    #[test]
    fn identical_models_score_zero() {
        let frames = random_frames(100, 2, 85);
        let ubm = train_ubm(&frames, FeatureKind::Mfcc16Sdc112, 2, 4, 8).unwrap();
        let models = vec![ubm.clone(); 14];
        let scores = score_frames(&ubm, &models, &frames);
        for s in scores {
            assert_eq!(s, 0.0);
        }
    }

    #[test]
    fn frame_duplication_leaves_scores_unchanged() {
        let frames = random_frames(60, 2, 86);
        let ubm = train_ubm(&frames, FeatureKind::Mfcc16Sdc112, 2, 4, 9).unwrap();
        let lang = map_adapt_means(&ubm, &random_frames(60, 2, 87), &MapConfig::default()).unwrap();
        let utt = random_frames(30, 2, 88);
        let mut doubled = utt.clone();
        doubled.extend(utt.iter().cloned());
        let a = score_frames(&ubm, std::slice::from_ref(&lang), &utt);
        let b = score_frames(&ubm, std::slice::from_ref(&lang), &doubled);
        assert!((a[0] - b[0]).abs() < 1e-9);
    }

    #[test]
    fn frame_order_does_not_matter() {
        let frames = random_frames(80, 2, 89);
        let ubm = train_ubm(&frames, FeatureKind::Mfcc16Sdc112, 2, 4, 10).unwrap();
        let lang = map_adapt_means(&ubm, &random_frames(70, 2, 90), &MapConfig::default()).unwrap();
        let utt = random_frames(40, 2, 91);
        let mut reversed = utt.clone();
        reversed.reverse();
        let a = score_frames(&ubm, std::slice::from_ref(&lang), &utt);
        let b = score_frames(&ubm, std::slice::from_ref(&lang), &reversed);
        assert!((a[0] - b[0]).abs() < 1e-9);
    }

    #[test]
    fn sampling_oracle_prefers_the_generating_language() {
        // two-language toy: draw utterances from language 0's model and
        // check argmax over scores
        let mut rng = ChaCha8Rng::seed_from_u64(92);
        let base = random_frames(600, 2, 93);
        let ubm = train_ubm(&base, FeatureKind::Mfcc16Sdc112, 2, 6, 11).unwrap();
        let data0: Vec<Vec<f64>> = base.iter().take(300).map(|f| vec![f[0] + 1.2, f[1]]).collect();
        let data1: Vec<Vec<f64>> = base.iter().skip(300).map(|f| vec![f[0] - 1.2, f[1]]).collect();
        let lang0 = map_adapt_means(&ubm, &data0, &MapConfig { relevance_r: 4.0 }).unwrap();
        let lang1 = map_adapt_means(&ubm, &data1, &MapConfig { relevance_r: 4.0 }).unwrap();
        let mut correct = 0;
        for _ in 0..100 {
            let utt = sample_frames(&lang0, 50, &mut rng);
            let scores = score_frames(&ubm, &[lang0.clone(), lang1.clone()], &utt);
            if scores[0] > scores[1] {
                correct += 1;
            }
        }
        assert!(correct >= 95, "only {correct}/100 draws preferred language 0");
    }

    #[test]
    fn model_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let frames = random_frames(200, 2, 94);
        let model = train_ubm(&frames, FeatureKind::Mfcc16Sdc112, 4, 4, 12).unwrap();
        let path = dir.path().join("m.gmm");
        save_model(&path, &model).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn empty_data_is_an_error() {
        assert!(matches!(
            train_ubm(&[], FeatureKind::Mfcc16Sdc112, 2, 4, 0),
            Err(GmmError::EmptyData)
        ));
    }

    #[test]
    fn k_exceeding_frames_is_an_error() {
        let frames = random_frames(3, 2, 95);
        assert!(matches!(
            train_ubm(&frames, FeatureKind::Mfcc16Sdc112, 8, 4, 0),
            Err(GmmError::TooFewFrames { .. })
        ));
    }
}
