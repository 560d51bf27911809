//! Experiment orchestration: split -> (augment) -> features -> train ->
//! score, with content-addressed stage caching and per-stage error labels.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use lidkit::augment::{augment_utterance, AugmentSources};
use lidkit::corpus::{
    self, AugmentCategory, AudioBuffer, Manifest, Origin, SplitSpec, UtteranceRecord,
};
use lidkit::features::{
    chunk, cms, mfcc16, mfcc40, rasta_plp, sdc, FeatureArchiveReader, FeatureArchiveWriter,
    FeatureKind, FeatureMatrix, FrameConfig, SdcSpec,
};
use lidkit::fusion::ScoreMatrix;
use lidkit::gmm::{self, GmmModel, MapConfig};
use lidkit::mat::Mat;
use lidkit::nnet::{
    self, build_model, chunk_to_input, epoch_log_tsv, score_utterance, ModelSpec, TrainConfig,
};

use crate::config::{ClassifierSel, ExperimentConfig, FeatureSel, SystemCombo};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("[{stage}] {detail}")]
    Stage { stage: &'static str, detail: String },
    #[error("[{stage}] numeric failure: {detail}")]
    Numeric { stage: &'static str, detail: String },
}

impl PipelineError {
    pub fn is_numeric(&self) -> bool {
        matches!(self, PipelineError::Numeric { .. })
    }
}

fn stage_err(stage: &'static str, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Stage {
        stage,
        detail: e.to_string(),
    }
}

fn hash_hex(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    let digest = h.finalize();
    let mut out = String::new();
    for b in &digest[..8] {
        write!(out, "{b:02x}").unwrap();
    }
    out
}

/// Metadata written into every run directory; a run plus the cache it
/// references is enough to rescore and re-evaluate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub label: String,
    pub seed: u64,
    pub feature_kind: String,
    pub classifier: String,
    pub model_path: PathBuf,
    pub train_archive: PathBuf,
    pub val_archive: PathBuf,
    pub n_languages: usize,
}

pub struct RunArtifacts {
    pub run_dir: PathBuf,
    pub label: String,
    pub val_scores: PathBuf,
    pub train_scores: PathBuf,
}

const FRAME_CFG: FrameConfig = FrameConfig {
    window_ms: 25.0,
    hop_ms: 10.0,
    fft_size: 256,
};

/// Feature kind a system combination extracts.
pub fn feature_kind_of(combo: &SystemCombo) -> FeatureKind {
    match (combo.classifier, combo.feature) {
        (ClassifierSel::Gmm, _) => FeatureKind::Mfcc16Sdc112,
        (_, FeatureSel::Mfcc) => FeatureKind::Mfcc40,
        (_, FeatureSel::RastaPlp) => FeatureKind::Plp20,
    }
}

/// Front-end for one utterance: VAD -> cepstra -> CMS (-> SDC for the
/// generative path).
pub fn extract_features(audio: &AudioBuffer, kind: FeatureKind) -> Result<FeatureMatrix, String> {
    let out = match kind {
        FeatureKind::Mfcc40 => cms(&mfcc40(audio, &FRAME_CFG).map_err(|e| e.to_string())?),
        FeatureKind::Plp20 => cms(&rasta_plp(audio, &FRAME_CFG, 19).map_err(|e| e.to_string())?),
        FeatureKind::Mfcc16 => cms(&mfcc16(audio, &FRAME_CFG).map_err(|e| e.to_string())?),
        FeatureKind::Mfcc16Sdc112 => {
            let base = cms(&mfcc16(audio, &FRAME_CFG).map_err(|e| e.to_string())?);
            sdc(&base, &SdcSpec::default()).map_err(|e| e.to_string())?
        }
    };
    Ok(out)
}

/// Extract features for every record of a manifest into an archive.
pub fn extract_manifest_features(
    manifest: &Manifest,
    kind: FeatureKind,
    out_dir: &Path,
) -> Result<(), PipelineError> {
    let results: Vec<(String, Result<FeatureMatrix, String>)> = manifest
        .records
        .par_iter()
        .map(|r| {
            let features = corpus::read_audio(&r.path)
                .map_err(|e| e.to_string())
                .and_then(|audio| extract_features(&audio, kind));
            (r.id.clone(), features)
        })
        .collect();
    let mut writer = FeatureArchiveWriter::create(out_dir).map_err(|e| stage_err("features", e))?;
    for (id, features) in results {
        let features = features.map_err(|e| stage_err("features", format!("{id}: {e}")))?;
        writer.add(&id, &features).map_err(|e| stage_err("features", e))?;
    }
    writer.finalize().map_err(|e| stage_err("features", e))
}

fn fnv64(s: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn load_sources_dir(dir: &Path) -> Result<Vec<AudioBuffer>, PipelineError> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| stage_err("augment", format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map_or(false, |x| x == "wav" || x == "sph"))
        .collect();
    names.sort();
    names
        .iter()
        .map(|p| corpus::read_audio(p).map_err(|e| stage_err("augment", e)))
        .collect()
}

/// Generate augmented copies of every record in `manifest`, writing WAVs
/// under `out_dir` and returning the augmented-only manifest.
///
/// Each (utterance, copy) pair draws from its own seeded stream, so the
/// output is independent of worker count and record order.
pub fn augment_manifest(
    manifest: &Manifest,
    category: AugmentCategory,
    sources: &AugmentSources,
    out_dir: &Path,
    seed: u64,
    copies: usize,
) -> Result<Manifest, PipelineError> {
    std::fs::create_dir_all(out_dir).map_err(|e| stage_err("augment", e))?;
    let jobs: Vec<(usize, usize)> = (0..manifest.records.len())
        .flat_map(|i| (0..copies).map(move |c| (i, c)))
        .collect();
    let records: Vec<Result<UtteranceRecord, PipelineError>> = jobs
        .par_iter()
        .map(|&(i, c)| {
            let r = &manifest.records[i];
            let audio = corpus::read_audio(&r.path).map_err(|e| stage_err("augment", e))?;
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed ^ fnv64(&r.id) ^ ((c as u64) << 48) ^ fnv64(category.as_str()),
            );
            let out = augment_utterance(&audio, category, sources, &mut rng)
                .map_err(|e| stage_err("augment", format!("{}: {e}", r.id)))?;
            let new_id = format!("{}-{}{}", r.id, category.as_str(), c);
            let path = out_dir.join(format!("{new_id}.wav"));
            corpus::write_wav_pcm16(&path, &out).map_err(|e| stage_err("augment", e))?;
            Ok(UtteranceRecord {
                id: new_id,
                path,
                language: r.language.clone(),
                session: r.session.clone(),
                duration_s: out.duration_s(),
                origin: Origin::Augmented(category),
            })
        })
        .collect();
    let records: Result<Vec<_>, _> = records.into_iter().collect();
    Manifest::new(records?, manifest.labels.clone()).map_err(|e| stage_err("augment", e))
}

fn manifest_fingerprint(m: &Manifest) -> String {
    let mut text = String::new();
    for r in &m.records {
        writeln!(
            text,
            "{}\t{}\t{}\t{}\t{}",
            r.id,
            r.path.display(),
            r.language,
            r.session,
            r.duration_s
        )
        .unwrap();
    }
    hash_hex(&[&text])
}

struct StageCache {
    root: PathBuf,
}

impl StageCache {
    fn dir(&self, stage: &str, key: &str) -> PathBuf {
        self.root.join(format!("{stage}-{key}"))
    }

    fn is_complete(&self, dir: &Path) -> bool {
        dir.join(".complete").exists()
    }

    fn mark_complete(&self, dir: &Path) -> Result<(), PipelineError> {
        std::fs::write(dir.join(".complete"), b"ok").map_err(|e| stage_err("cache", e))
    }
}

/// Execute one experiment end to end. Stage outputs are cached by content
/// hash under the configured cache directory, so systems sharing a split
/// or feature configuration reuse them.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunArtifacts, PipelineError> {
    let run_dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&run_dir).map_err(|e| stage_err("setup", e))?;
    let cache = StageCache {
        root: cfg.cache_dir.clone(),
    };
    std::fs::create_dir_all(&cache.root).map_err(|e| stage_err("setup", e))?;

    // resolved config serialized alongside the artifacts
    let config_text = crate::config::serialize_config(&cfg.file);
    std::fs::write(run_dir.join("config.toml"), &config_text).map_err(|e| stage_err("setup", e))?;

    // ---- split ----
    let corpus_manifest =
        corpus::load_manifest(&cfg.data_manifest, &cfg.labels).map_err(|e| stage_err("split", e))?;
    let split_key = hash_hex(&[
        &manifest_fingerprint(&corpus_manifest),
        &format!(
            "{}:{}:{}",
            cfg.split.train_sessions, cfg.split.val_sessions, cfg.seed
        ),
    ]);
    let split_dir = cache.dir("split", &split_key);
    let (train, val) = if cache.is_complete(&split_dir) {
        (
            corpus::load_manifest(&split_dir.join("train.tsv"), &cfg.labels)
                .map_err(|e| stage_err("split", e))?,
            corpus::load_manifest(&split_dir.join("val.tsv"), &cfg.labels)
                .map_err(|e| stage_err("split", e))?,
        )
    } else {
        let spec = SplitSpec {
            train_sessions_per_lang: cfg.split.train_sessions,
            val_sessions_per_lang: cfg.split.val_sessions,
            seed: cfg.seed,
        };
        let (train, val) =
            corpus::split_sessions(&corpus_manifest, &spec).map_err(|e| stage_err("split", e))?;
        std::fs::create_dir_all(&split_dir).map_err(|e| stage_err("split", e))?;
        corpus::save_manifest(&split_dir.join("train.tsv"), &train)
            .map_err(|e| stage_err("split", e))?;
        corpus::save_manifest(&split_dir.join("val.tsv"), &val).map_err(|e| stage_err("split", e))?;
        cache.mark_complete(&split_dir)?;
        (train, val)
    };
    corpus::save_manifest(&run_dir.join("train.tsv"), &train).map_err(|e| stage_err("split", e))?;
    corpus::save_manifest(&run_dir.join("val.tsv"), &val).map_err(|e| stage_err("split", e))?;
    save_key(&run_dir.join("key_val.tsv"), &val)?;
    save_key(&run_dir.join("key_train.tsv"), &train)?;

    // ---- augmentation ----
    let enabled: Vec<AugmentCategory> = [
        (cfg.combo.nonspeech, AugmentCategory::Additive),
        (cfg.combo.signal_perturb, AugmentCategory::Signal),
        (cfg.combo.enhancement, AugmentCategory::Enhance),
    ]
    .iter()
    .filter(|(on, _)| *on)
    .map(|&(_, cat)| cat)
    .collect();

    let train_final = if enabled.is_empty() {
        train.clone()
    } else {
        let sources = load_augment_sources(cfg, &enabled)?;
        let mut augmented: BTreeMap<AugmentCategory, Manifest> = BTreeMap::new();
        for &cat in &enabled {
            let key = hash_hex(&[
                &manifest_fingerprint(&train),
                cat.as_str(),
                &format!("{}:{}", cfg.seed, cfg.augment.copies_per_utterance),
            ]);
            let dir = cache.dir("aug", &key);
            let m = if cache.is_complete(&dir) {
                corpus::load_manifest(&dir.join("manifest.tsv"), &cfg.labels)
                    .map_err(|e| stage_err("augment", e))?
            } else {
                let m = augment_manifest(
                    &train,
                    cat,
                    &sources,
                    &dir,
                    cfg.seed,
                    cfg.augment.copies_per_utterance,
                )?;
                corpus::save_manifest(&dir.join("manifest.tsv"), &m)
                    .map_err(|e| stage_err("augment", e))?;
                cache.mark_complete(&dir)?;
                m
            };
            augmented.insert(cat, m);
        }
        if enabled.len() == 1 {
            // single-category system: originals plus every augmented copy
            let mut records = train.records.clone();
            records.extend(augmented.values().next().unwrap().records.clone());
            Manifest::new(records, cfg.labels.clone()).map_err(|e| stage_err("augment", e))?
        } else {
            // pooled-augmented set across the categories
            let target = (train.len() as f64 * cfg.augment.pool_multiplier).round() as usize;
            corpus::pool_augmented(&train, &augmented, target, cfg.seed)
                .map_err(|e| stage_err("augment", e))?
        }
    };

    // ---- features ----
    let kind = feature_kind_of(&cfg.combo);
    let train_arch_dir = feature_stage(&cache, &train_final, kind)?;
    let val_arch_dir = feature_stage(&cache, &val, kind)?;

    // ---- train ----
    let model_path: PathBuf;
    match cfg.combo.classifier {
        ClassifierSel::Gmm => {
            model_path = run_dir.join("model.gmm");
            train_gmm_system(cfg, &train_final, &train_arch_dir, &model_path)?;
        }
        _ => {
            model_path = run_dir.join("model.ckpt");
            train_nnet_system(cfg, &train_final, &val, &train_arch_dir, &val_arch_dir, &model_path, &run_dir)?;
        }
    }

    // ---- score ----
    let train_scores_path = run_dir.join("scores_train.tsv");
    let val_scores_path = run_dir.join("scores_val.tsv");
    let train_scores = score_archive(cfg, &model_path, &train_arch_dir, &train_final)?;
    let val_scores = score_archive(cfg, &model_path, &val_arch_dir, &val)?;
    train_scores
        .save_tsv(&train_scores_path, &cfg.labels)
        .map_err(|e| stage_err("score", e))?;
    val_scores
        .save_tsv(&val_scores_path, &cfg.labels)
        .map_err(|e| stage_err("score", e))?;

    let meta = RunMeta {
        label: cfg.label.clone(),
        seed: cfg.seed,
        feature_kind: kind.as_str().to_string(),
        classifier: format!("{:?}", cfg.combo.classifier),
        model_path: model_path.clone(),
        train_archive: train_arch_dir,
        val_archive: val_arch_dir,
        n_languages: cfg.labels.len(),
    };
    std::fs::write(
        run_dir.join("run.toml"),
        toml::to_string_pretty(&meta).expect("meta serializes"),
    )
    .map_err(|e| stage_err("setup", e))?;

    Ok(RunArtifacts {
        run_dir,
        label: cfg.label.clone(),
        val_scores: val_scores_path,
        train_scores: train_scores_path,
    })
}

fn save_key(path: &Path, manifest: &Manifest) -> Result<(), PipelineError> {
    let mut out = String::new();
    for r in &manifest.records {
        writeln!(out, "{}\t{}", r.id, r.language).unwrap();
    }
    std::fs::write(path, out).map_err(|e| stage_err("setup", e))
}

/// Key file loader: accepts a two-column `segmentid<TAB>language` TSV or a
/// full manifest (language in the third column).
pub fn load_key(path: &Path) -> Result<BTreeMap<String, String>, PipelineError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| stage_err("evaluate", format!("{}: {e}", path.display())))?;
    let mut key = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with("segmentid\t") {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let (id, lang) = match cols.len() {
            2 => (cols[0], cols[1]),
            5 | 6 => (cols[0], cols[2]),
            n => {
                return Err(stage_err(
                    "evaluate",
                    format!("{} row {}: {n} columns", path.display(), lineno + 1),
                ))
            }
        };
        key.insert(id.to_string(), lang.to_string());
    }
    Ok(key)
}

fn load_augment_sources(
    cfg: &ExperimentConfig,
    enabled: &[AugmentCategory],
) -> Result<AugmentSources, PipelineError> {
    let mut sources = AugmentSources {
        noises: Vec::new(),
        babbles: Vec::new(),
        musics: Vec::new(),
        rirs: Vec::new(),
    };
    if enabled.contains(&AugmentCategory::Additive) {
        let Some(noise_dir) = &cfg.noise_dir else {
            return Err(stage_err(
                "augment",
                "additive augmentation needs paths.noise_dir",
            ));
        };
        // subdirectories babble/ and music/ refine the pool when present;
        // a flat directory serves all additive kinds
        let babble = noise_dir.join("babble");
        let music = noise_dir.join("music");
        if babble.is_dir() || music.is_dir() {
            if babble.is_dir() {
                sources.babbles = load_sources_dir(&babble)?;
            }
            if music.is_dir() {
                sources.musics = load_sources_dir(&music)?;
            }
            let noise = noise_dir.join("noise");
            if noise.is_dir() {
                sources.noises = load_sources_dir(&noise)?;
            }
        } else {
            sources.noises = load_sources_dir(noise_dir)?;
        }
        if let Some(rir_dir) = &cfg.rir_dir {
            sources.rirs = load_sources_dir(rir_dir)?;
        }
        if sources.noises.is_empty() && sources.babbles.is_empty() && sources.musics.is_empty() {
            return Err(stage_err("augment", "no additive noise sources found"));
        }
    }
    Ok(sources)
}

fn feature_stage(
    cache: &StageCache,
    manifest: &Manifest,
    kind: FeatureKind,
) -> Result<PathBuf, PipelineError> {
    let key = hash_hex(&[&manifest_fingerprint(manifest), kind.as_str()]);
    let dir = cache.dir("feats", &key);
    if !cache.is_complete(&dir) {
        extract_manifest_features(manifest, kind, &dir)?;
        cache.mark_complete(&dir)?;
    }
    Ok(dir)
}

fn gather_label_indices(manifest: &Manifest) -> Vec<usize> {
    manifest
        .records
        .iter()
        .map(|r| manifest.labels.index(&r.language).expect("validated"))
        .collect()
}

fn train_gmm_system(
    cfg: &ExperimentConfig,
    train: &Manifest,
    archive_dir: &Path,
    out_dir: &Path,
) -> Result<(), PipelineError> {
    let archive = FeatureArchiveReader::open(archive_dir).map_err(|e| stage_err("train", e))?;
    let label_idx = gather_label_indices(train);
    let mut all_frames: Vec<Vec<f64>> = Vec::new();
    let mut per_lang: Vec<Vec<Vec<f64>>> = vec![Vec::new(); cfg.labels.len()];
    for (r, &lang) in train.records.iter().zip(&label_idx) {
        let features = archive.get(&r.id).map_err(|e| stage_err("train", e))?;
        for row in features.rows() {
            all_frames.push(row.to_vec());
            per_lang[lang].push(row.to_vec());
        }
    }
    let ubm = gmm::train_ubm(
        &all_frames,
        FeatureKind::Mfcc16Sdc112,
        cfg.params.gmm_mixtures,
        cfg.params.gmm_em_iters,
        cfg.seed,
    )
    .map_err(|e| PipelineError::Numeric {
        stage: "train",
        detail: e.to_string(),
    })?;
    let models: Result<Vec<GmmModel>, _> = per_lang
        .iter()
        .map(|frames| gmm::map_adapt_means(&ubm, frames, &MapConfig::default()))
        .collect();
    let models = models.map_err(|e| PipelineError::Numeric {
        stage: "train",
        detail: e.to_string(),
    })?;
    gmm::save_bundle(out_dir, &ubm, &models).map_err(|e| stage_err("train", e))
}

fn chunks_of(
    archive: &FeatureArchiveReader,
    manifest: &Manifest,
    chunk_seconds: f64,
) -> Result<Vec<(Mat, usize)>, PipelineError> {
    let label_idx = gather_label_indices(manifest);
    let mut out = Vec::new();
    for (r, &lang) in manifest.records.iter().zip(&label_idx) {
        let features = archive.get(&r.id).map_err(|e| stage_err("train", e))?;
        for c in chunk(&features, chunk_seconds) {
            out.push((chunk_to_input(&c), lang));
        }
    }
    Ok(out)
}

fn train_nnet_system(
    cfg: &ExperimentConfig,
    train: &Manifest,
    val: &Manifest,
    train_arch_dir: &Path,
    val_arch_dir: &Path,
    model_path: &Path,
    run_dir: &Path,
) -> Result<(), PipelineError> {
    let arch = cfg
        .combo
        .classifier
        .arch()
        .expect("nnet training on a neural classifier");
    let train_archive =
        FeatureArchiveReader::open(train_arch_dir).map_err(|e| stage_err("train", e))?;
    let val_archive = FeatureArchiveReader::open(val_arch_dir).map_err(|e| stage_err("train", e))?;
    let train_chunks = chunks_of(&train_archive, train, cfg.params.chunk_seconds)?;
    let val_chunks = chunks_of(&val_archive, val, cfg.params.chunk_seconds)?;
    let feat_dim = feature_kind_of(&cfg.combo).dims();
    let spec = ModelSpec {
        arch,
        feat_dim,
        channels: cfg.params.channels,
        embed_dim: cfg.params.embed_dim,
        n_classes: cfg.labels.len(),
        pre_pool_channels: cfg.params.pre_pool_channels,
        res2_scale: cfg.params.res2_scale,
        se_bottleneck: (cfg.params.channels / 4).max(4),
        attn_bottleneck: (cfg.params.channels / 4).max(4),
        logit_scale: cfg.params.logit_scale,
    };
    let mut model = build_model(&spec, cfg.seed).map_err(|e| stage_err("train", e))?;
    let train_cfg = TrainConfig {
        epochs: cfg.params.epochs,
        batch_size: cfg.params.batch_size,
        lr: cfg.params.lr,
        weight_decay: cfg.params.weight_decay,
        aam_margin: cfg.params.aam_margin,
        seed: cfg.seed,
    };
    let log = nnet::train(&mut model, &train_chunks, &val_chunks, &train_cfg).map_err(|e| {
        PipelineError::Numeric {
            stage: "train",
            detail: e.to_string(),
        }
    })?;
    std::fs::write(run_dir.join("epochs.tsv"), epoch_log_tsv(&log))
        .map_err(|e| stage_err("train", e))?;
    nnet::save_checkpoint(model_path, &mut model).map_err(|e| stage_err("train", e))
}

/// Score every utterance of a manifest with whatever model lives at
/// `model_path` (GMM bundle directory or TDNN checkpoint file).
pub fn score_archive(
    cfg: &ExperimentConfig,
    model_path: &Path,
    archive_dir: &Path,
    manifest: &Manifest,
) -> Result<ScoreMatrix, PipelineError> {
    score_archive_inner(
        model_path,
        archive_dir,
        manifest,
        cfg.params.chunk_seconds,
        &cfg.label,
    )
}

pub fn score_archive_inner(
    model_path: &Path,
    archive_dir: &Path,
    manifest: &Manifest,
    chunk_seconds: f64,
    label: &str,
) -> Result<ScoreMatrix, PipelineError> {
    let archive = FeatureArchiveReader::open(archive_dir).map_err(|e| stage_err("score", e))?;
    let ids: Vec<String> = manifest.records.iter().map(|r| r.id.clone()).collect();
    let rows: Vec<Vec<f64>> = if model_path.is_dir() {
        let (ubm, models) = gmm::load_bundle(model_path).map_err(|e| stage_err("score", e))?;
        let results: Vec<Result<Vec<f64>, PipelineError>> = ids
            .par_iter()
            .map(|id| {
                let features = archive.get(id).map_err(|e| stage_err("score", e))?;
                gmm::gmm_score(&ubm, &models, &features).map_err(|e| stage_err("score", e))
            })
            .collect();
        results.into_iter().collect::<Result<Vec<_>, _>>()?
    } else {
        let snapshot = nnet::load_checkpoint(model_path)
            .map_err(|e| stage_err("score", e))?
            .snapshot();
        let results: Vec<Result<Vec<Vec<f64>>, PipelineError>> = ids
            .par_chunks(32)
            .map(|chunk_ids| {
                let mut model = snapshot.instantiate();
                chunk_ids
                    .iter()
                    .map(|id| {
                        let features = archive.get(id).map_err(|e| stage_err("score", e))?;
                        let chunks: Vec<Mat> = chunk(&features, chunk_seconds)
                            .iter()
                            .map(chunk_to_input)
                            .collect();
                        score_utterance(&mut model, &chunks).map_err(|e| stage_err("score", e))
                    })
                    .collect()
            })
            .collect();
        let mut rows = Vec::with_capacity(ids.len());
        for block in results {
            rows.extend(block?);
        }
        rows
    };
    Ok(ScoreMatrix::new(label.to_string(), ids, rows))
}
