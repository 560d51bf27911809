//! lidkit command-line interface.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lidkit::corpus::{
    self, AugmentCategory, LabelSet, SplitSpec,
};
use lidkit::features::{FeatureArchiveReader, FeatureKind};
use lidkit::fusion::{apply_fusion, fit_fusion, ScoreMatrix};
use lidkit::gmm::{self, MapConfig};
use lidkit_cli::bench::benchmark;
use lidkit_cli::config::{load_config, resolve_config, Profile};
use lidkit_cli::pipeline::{
    augment_manifest, extract_manifest_features, load_key, run_experiment, PipelineError,
};
use lidkit_cli::report::{evaluate_reports, evaluate_scores, run_fusion_report};

use lidkit_cli::pipeline::score_archive_inner;

#[derive(Parser)]
#[command(name = "lidkit", version, about = "Low-resource spoken language identification toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a full experiment from a config file
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// desk or full
        #[arg(long)]
        profile: Option<String>,
    },
    /// Session-disjoint train/validation split
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_train: PathBuf,
        #[arg(long)]
        out_val: PathBuf,
        #[arg(long, default_value_t = 25)]
        train_sessions: usize,
        #[arg(long, default_value_t = 5)]
        val_sessions: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// comma-separated language codes (default: the 14 LRE22 codes)
        #[arg(long)]
        languages: Option<String>,
    },
    /// Generate augmented audio for one category
    Augment {
        /// additive | signal | enhance
        #[arg(long)]
        category: String,
        #[arg(long, name = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        noise_dir: Option<PathBuf>,
        #[arg(long)]
        rir_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        copies: usize,
        #[arg(long)]
        languages: Option<String>,
    },
    /// Extract a feature archive for a manifest
    Features {
        /// mfcc40 | plp20 | mfcc16sdc112
        #[arg(long)]
        kind: String,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        languages: Option<String>,
    },
    /// Train the generative back-end (UBM + MAP-adapted language models)
    TrainGmm {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2048)]
        mixtures: usize,
        #[arg(long, default_value_t = 10)]
        em_iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        languages: Option<String>,
    },
    /// Train a TDNN classifier
    TrainNnet {
        /// xvector | resnet_tdnn | ecapa
        #[arg(long)]
        arch: String,
        #[arg(long)]
        train_features: PathBuf,
        #[arg(long)]
        train_manifest: PathBuf,
        #[arg(long)]
        val_features: PathBuf,
        #[arg(long)]
        val_manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "desk")]
        profile: String,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        languages: Option<String>,
    },
    /// Score a feature archive with a trained model
    #[command(alias = "score-gmm", alias = "score-nnet")]
    Score {
        /// GMM bundle directory or TDNN checkpoint file
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "system")]
        system_id: String,
        #[arg(long)]
        languages: Option<String>,
    },
    /// Fit fusion weights on validation scores
    Fuse {
        /// comma-separated score TSVs
        #[arg(long)]
        scores: String,
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1e-4)]
        lambda: f64,
        /// optional output for the fused score matrix
        #[arg(long)]
        fused_out: Option<PathBuf>,
    },
    /// EER / cost metrics and reports for one score file
    Evaluate {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Fusion report over completed runs
    Report {
        /// comma-separated run directories
        #[arg(long)]
        runs: String,
        #[arg(long)]
        key: PathBuf,
        /// comma-separated fusion subsets, e.g. "S1+S2,S1+S3"
        #[arg(long)]
        subsets: Option<String>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Scoring throughput and peak memory for a completed run
    Bench {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 100)]
        n_files: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap help/version are success paths
            if e.use_stderr() {
                eprintln!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        if e.is_numeric() {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

fn data<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Data(e.to_string())
}

fn parse_languages(spec: &Option<String>) -> LabelSet {
    match spec {
        Some(csv) => LabelSet::new(csv.split(',').map(|s| s.trim().to_string()).collect()),
        None => LabelSet::lre22(),
    }
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Run {
            config,
            seed,
            profile,
        } => {
            let file = load_config(&config).map_err(data)?;
            let profile = match profile {
                Some(p) => Some(
                    Profile::parse(&p)
                        .ok_or_else(|| CliError::Usage(format!("unknown profile {p:?}")))?,
                ),
                None => None,
            };
            let cfg = resolve_config(&file, seed, profile).map_err(data)?;
            let artifacts = run_experiment(&cfg)?;
            println!(
                "run {} complete: {}",
                artifacts.label,
                artifacts.run_dir.display()
            );
            Ok(())
        }
        Command::Split {
            manifest,
            out_train,
            out_val,
            train_sessions,
            val_sessions,
            seed,
            languages,
        } => {
            let labels = parse_languages(&languages);
            let m = corpus::load_manifest(&manifest, &labels).map_err(data)?;
            let spec = SplitSpec {
                train_sessions_per_lang: train_sessions,
                val_sessions_per_lang: val_sessions,
                seed,
            };
            let (train, val) = corpus::split_sessions(&m, &spec).map_err(data)?;
            corpus::save_manifest(&out_train, &train).map_err(data)?;
            corpus::save_manifest(&out_val, &val).map_err(data)?;
            println!(
                "split: {} train / {} val utterances",
                train.len(),
                val.len()
            );
            Ok(())
        }
        Command::Augment {
            category,
            input,
            out,
            noise_dir,
            rir_dir,
            seed,
            copies,
            languages,
        } => {
            let cat = AugmentCategory::parse(&category)
                .ok_or_else(|| CliError::Usage(format!("unknown category {category:?}")))?;
            let labels = parse_languages(&languages);
            let m = corpus::load_manifest(&input, &labels).map_err(data)?;
            let sources = pipeline_sources(cat, noise_dir.as_deref(), rir_dir.as_deref())?;
            let augmented = augment_manifest(&m, cat, &sources, &out, seed, copies)?;
            corpus::save_manifest(&out.join("manifest.tsv"), &augmented).map_err(data)?;
            println!("augment: {} records -> {}", augmented.len(), out.display());
            Ok(())
        }
        Command::Features {
            kind,
            manifest,
            out,
            languages,
        } => {
            let kind = match kind.as_str() {
                "mfcc40" => FeatureKind::Mfcc40,
                "plp20" => FeatureKind::Plp20,
                "mfcc16" => FeatureKind::Mfcc16,
                "mfcc16sdc112" => FeatureKind::Mfcc16Sdc112,
                other => return Err(CliError::Usage(format!("unknown feature kind {other:?}"))),
            };
            let labels = parse_languages(&languages);
            let m = corpus::load_manifest(&manifest, &labels).map_err(data)?;
            extract_manifest_features(&m, kind, &out)?;
            println!("features: {} utterances -> {}", m.len(), out.display());
            Ok(())
        }
        Command::TrainGmm {
            features,
            manifest,
            out,
            mixtures,
            em_iters,
            seed,
            languages,
        } => {
            let labels = parse_languages(&languages);
            let m = corpus::load_manifest(&manifest, &labels).map_err(data)?;
            let archive = FeatureArchiveReader::open(&features).map_err(data)?;
            let mut all = Vec::new();
            let mut per_lang: Vec<Vec<Vec<f64>>> = vec![Vec::new(); labels.len()];
            for r in &m.records {
                let f = archive.get(&r.id).map_err(data)?;
                let lang = labels.index(&r.language).expect("validated");
                for row in f.rows() {
                    all.push(row.to_vec());
                    per_lang[lang].push(row.to_vec());
                }
            }
            let ubm = gmm::train_ubm(&all, FeatureKind::Mfcc16Sdc112, mixtures, em_iters, seed)
                .map_err(|e| CliError::Numeric(e.to_string()))?;
            let models: Result<Vec<_>, _> = per_lang
                .iter()
                .map(|f| gmm::map_adapt_means(&ubm, f, &MapConfig::default()))
                .collect();
            let models = models.map_err(|e| CliError::Numeric(e.to_string()))?;
            gmm::save_bundle(&out, &ubm, &models).map_err(data)?;
            println!("gmm: {} mixtures, {} language models -> {}", mixtures, labels.len(), out.display());
            Ok(())
        }
        Command::TrainNnet {
            arch,
            train_features,
            train_manifest,
            val_features,
            val_manifest,
            out,
            profile,
            epochs,
            seed,
            languages,
        } => {
            let labels = parse_languages(&languages);
            let profile = Profile::parse(&profile)
                .ok_or_else(|| CliError::Usage(format!("unknown profile {profile:?}")))?;
            train_nnet_cmd(
                &arch,
                &train_features,
                &train_manifest,
                &val_features,
                &val_manifest,
                &out,
                profile,
                epochs,
                seed,
                &labels,
            )
        }
        Command::Score {
            model,
            features,
            manifest,
            out,
            system_id,
            languages,
        } => {
            let labels = parse_languages(&languages);
            let m = corpus::load_manifest(&manifest, &labels).map_err(data)?;
            let scores = score_archive_inner(&model, &features, &m, 3.0, &system_id)?;
            scores.save_tsv(&out, &labels).map_err(data)?;
            println!("score: {} utterances -> {}", scores.len(), out.display());
            Ok(())
        }
        Command::Fuse {
            scores,
            key,
            out,
            lambda,
            fused_out,
        } => {
            let key_map = load_key(&key)?;
            let mut systems = Vec::new();
            let mut codes: Option<Vec<String>> = None;
            for (i, path) in scores.split(',').enumerate() {
                let path = Path::new(path.trim());
                let name = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().to_string())
                    .unwrap_or_else(|| format!("sys{i}"));
                let (matrix, c) = ScoreMatrix::load_tsv(path, &name).map_err(data)?;
                if let Some(prev) = &codes {
                    if *prev != c {
                        return Err(CliError::Data(format!(
                            "{}: language header differs from the first system",
                            path.display()
                        )));
                    }
                } else {
                    codes = Some(c);
                }
                systems.push(matrix);
            }
            let labels = LabelSet::new(codes.ok_or_else(|| CliError::Usage("no score files".into()))?);
            let weights =
                fit_fusion(&systems, &key_map, &labels, lambda).map_err(|e| CliError::Numeric(e.to_string()))?;
            let ids: Vec<String> = systems.iter().map(|s| s.system_id.clone()).collect();
            weights.save_tsv(&out, &ids).map_err(data)?;
            if let Some(fused_path) = fused_out {
                let fused = apply_fusion(&weights, &systems).map_err(data)?;
                fused.save_tsv(&fused_path, &labels).map_err(data)?;
            }
            println!("fusion weights -> {}", out.display());
            Ok(())
        }
        Command::Evaluate { scores, key, out_dir } => {
            let key_map = load_key(&key)?;
            let (matrix, codes) = ScoreMatrix::load_tsv(&scores, "scores").map_err(data)?;
            let labels = LabelSet::new(codes);
            let metrics = evaluate_scores(&matrix, &key_map, &labels)?;
            let rep = evaluate_reports(&matrix, &key_map, &labels)?;
            println!(
                "EER {:.2}%  actC {:.5}  minC {:.5}",
                metrics.eer_percent, metrics.act_c, metrics.min_c
            );
            print!("{}", rep.summary_text());
            if let Some(dir) = out_dir {
                std::fs::create_dir_all(&dir).map_err(data)?;
                std::fs::write(
                    dir.join("metrics.tsv"),
                    format!(
                        "system\teer_percent\tact_c_primary\tmin_c_primary\n{}\t{:.4}\t{:.5}\t{:.5}\n",
                        metrics.system, metrics.eer_percent, metrics.act_c, metrics.min_c
                    ),
                )
                .map_err(data)?;
                std::fs::write(dir.join("reports.tsv"), rep.to_tsv()).map_err(data)?;
            }
            Ok(())
        }
        Command::Report {
            runs,
            key,
            subsets,
            out_dir,
        } => {
            let run_dirs: Vec<PathBuf> = runs.split(',').map(|s| PathBuf::from(s.trim())).collect();
            let subset_list: Vec<String> = subsets
                .map(|s| s.split(',').map(|x| x.trim().to_string()).collect())
                .unwrap_or_default();
            let report = run_fusion_report(&run_dirs, &key, &subset_list, out_dir.as_deref())?;
            print!("{}", report.summary_text());
            if let Some(dir) = out_dir {
                std::fs::create_dir_all(&dir).map_err(data)?;
                std::fs::write(dir.join("report.tsv"), report.to_tsv()).map_err(data)?;
            }
            Ok(())
        }
        Command::Bench { run, n_files } => {
            let record = benchmark(&run, n_files)?;
            print!("{}", record.to_tsv());
            std::fs::write(run.join("bench.tsv"), record.to_tsv()).map_err(data)?;
            Ok(())
        }
    }
}

fn pipeline_sources(
    category: AugmentCategory,
    noise_dir: Option<&Path>,
    rir_dir: Option<&Path>,
) -> Result<lidkit::augment::AugmentSources, CliError> {
    let mut sources = lidkit::augment::AugmentSources {
        noises: Vec::new(),
        babbles: Vec::new(),
        musics: Vec::new(),
        rirs: Vec::new(),
    };
    if category == AugmentCategory::Additive {
        let noise_dir = noise_dir.ok_or_else(|| {
            CliError::Usage("additive augmentation needs --noise-dir".to_string())
        })?;
        sources.noises = read_dir_audio(noise_dir)?;
        if let Some(rir) = rir_dir {
            sources.rirs = read_dir_audio(rir)?;
        }
        if sources.noises.is_empty() {
            return Err(CliError::Data(format!(
                "{}: no .wav/.sph noise sources",
                noise_dir.display()
            )));
        }
    }
    Ok(sources)
}

fn read_dir_audio(dir: &Path) -> Result<Vec<corpus::AudioBuffer>, CliError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map_or(false, |x| x == "wav" || x == "sph"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| corpus::read_audio(p).map_err(data))
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn train_nnet_cmd(
    arch: &str,
    train_features: &Path,
    train_manifest: &Path,
    val_features: &Path,
    val_manifest: &Path,
    out: &Path,
    profile: Profile,
    epochs: Option<usize>,
    seed: u64,
    labels: &LabelSet,
) -> Result<(), CliError> {
    use lidkit::features::chunk;
    use lidkit::nnet::{build_model, chunk_to_input, epoch_log_tsv, Arch, ModelSpec, TrainConfig};
    use lidkit_cli::config::ResolvedParams;

    let arch = match arch {
        "xvector" => Arch::Xvector,
        "resnet_tdnn" => Arch::ResnetTdnn,
        "ecapa" => Arch::Ecapa,
        other => return Err(CliError::Usage(format!("unknown architecture {other:?}"))),
    };
    let params = ResolvedParams::for_profile(profile);
    let train_m = corpus::load_manifest(train_manifest, labels).map_err(data)?;
    let val_m = corpus::load_manifest(val_manifest, labels).map_err(data)?;
    let train_archive = FeatureArchiveReader::open(train_features).map_err(data)?;
    let val_archive = FeatureArchiveReader::open(val_features).map_err(data)?;

    let collect = |archive: &FeatureArchiveReader,
                   manifest: &corpus::Manifest|
     -> Result<Vec<(lidkit::mat::Mat, usize)>, CliError> {
        let mut out = Vec::new();
        for r in &manifest.records {
            let f = archive.get(&r.id).map_err(data)?;
            let lang = labels.index(&r.language).expect("validated");
            for c in chunk(&f, params.chunk_seconds) {
                out.push((chunk_to_input(&c), lang));
            }
        }
        Ok(out)
    };
    let train_chunks = collect(&train_archive, &train_m)?;
    let val_chunks = collect(&val_archive, &val_m)?;
    let feat_dim = train_chunks
        .first()
        .map(|(m, _)| m.rows)
        .ok_or_else(|| CliError::Data("empty training set".into()))?;
    let spec = ModelSpec {
        arch,
        feat_dim,
        channels: params.channels,
        embed_dim: params.embed_dim,
        n_classes: labels.len(),
        pre_pool_channels: params.pre_pool_channels,
        res2_scale: params.res2_scale,
        se_bottleneck: (params.channels / 4).max(4),
        attn_bottleneck: (params.channels / 4).max(4),
        logit_scale: params.logit_scale,
    };
    let mut model = build_model(&spec, seed).map_err(data)?;
    let cfg = TrainConfig {
        epochs: epochs.unwrap_or(params.epochs),
        batch_size: params.batch_size,
        lr: params.lr,
        weight_decay: params.weight_decay,
        aam_margin: params.aam_margin,
        seed,
    };
    let log = lidkit::nnet::train(&mut model, &train_chunks, &val_chunks, &cfg)
        .map_err(|e| CliError::Numeric(e.to_string()))?;
    lidkit::nnet::save_checkpoint(out, &mut model).map_err(data)?;
    if let Some(parent) = out.parent() {
        std::fs::write(parent.join("epochs.tsv"), epoch_log_tsv(&log)).map_err(data)?;
    }
    println!("nnet: {} epochs -> {}", log.len(), out.display());
    Ok(())
}
