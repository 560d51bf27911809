//! Experiment configuration: the S0-S8 system matrix, desk/full profiles,
//! and the TOML config file format.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use lidkit::corpus::LabelSet;
use lidkit::nnet::Arch;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {detail}")]
    Parse { path: String, detail: String },
    #[error("unknown system id {0:?} (expected S0..S8 or an explicit [combo])")]
    UnknownSystem(String),
    #[error("combination {0} matches no system-matrix row; mark the experiment custom to run it")]
    UnmatchedCombination(String),
    #[error("config declares both a preset system and an explicit [combo]")]
    AmbiguousSystem,
    #[error("config needs either experiment.system or a [combo] section")]
    MissingSystem,
}

/// Identifiers of the nine preset systems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SystemId {
    S0,
    S1,
    S2,
    S3,
    S4,
    S5,
    S6,
    S7,
    S8,
}

impl SystemId {
    pub const ALL: [SystemId; 9] = [
        SystemId::S0,
        SystemId::S1,
        SystemId::S2,
        SystemId::S3,
        SystemId::S4,
        SystemId::S5,
        SystemId::S6,
        SystemId::S7,
        SystemId::S8,
    ];

    pub fn parse(s: &str) -> Option<SystemId> {
        Self::ALL.iter().copied().find(|id| id.as_str() == s)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SystemId::S0 => "S0",
            SystemId::S1 => "S1",
            SystemId::S2 => "S2",
            SystemId::S3 => "S3",
            SystemId::S4 => "S4",
            SystemId::S5 => "S5",
            SystemId::S6 => "S6",
            SystemId::S7 => "S7",
            SystemId::S8 => "S8",
        }
    }
}

impl fmt::Display for SystemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSel {
    Mfcc,
    RastaPlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierSel {
    Xvector,
    Ecapa,
    ResnetTdnn,
    Gmm,
}

impl ClassifierSel {
    pub fn arch(self) -> Option<Arch> {
        match self {
            ClassifierSel::Xvector => Some(Arch::Xvector),
            ClassifierSel::Ecapa => Some(Arch::Ecapa),
            ClassifierSel::ResnetTdnn => Some(Arch::ResnetTdnn),
            ClassifierSel::Gmm => None,
        }
    }
}

/// One row of the system matrix: augmentation flags, feature family,
/// classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemCombo {
    pub nonspeech: bool,
    pub signal_perturb: bool,
    pub enhancement: bool,
    pub feature: FeatureSel,
    pub classifier: ClassifierSel,
}

impl SystemCombo {
    pub fn any_augmentation(&self) -> bool {
        self.nonspeech || self.signal_perturb || self.enhancement
    }

    fn describe(&self) -> String {
        format!(
            "nonspeech={} signal={} enhance={} feature={:?} classifier={:?}",
            self.nonspeech, self.signal_perturb, self.enhancement, self.feature, self.classifier
        )
    }
}

/// The system matrix: which augmentations, features, and classifiers each
/// preset system uses.
pub fn system_matrix(id: SystemId) -> SystemCombo {
    use ClassifierSel::*;
    use FeatureSel::*;
    let row = |nonspeech, signal_perturb, enhancement, feature, classifier| SystemCombo {
        nonspeech,
        signal_perturb,
        enhancement,
        feature,
        classifier,
    };
    match id {
        SystemId::S0 => row(false, false, false, Mfcc, Xvector),
        SystemId::S1 => row(false, false, false, Mfcc, Ecapa),
        SystemId::S2 => row(true, false, false, Mfcc, Ecapa),
        SystemId::S3 => row(false, true, false, Mfcc, Ecapa),
        SystemId::S4 => row(false, false, true, Mfcc, Ecapa),
        SystemId::S5 => row(true, true, true, Mfcc, Ecapa),
        SystemId::S6 => row(true, true, true, RastaPlp, Ecapa),
        SystemId::S7 => row(true, true, true, Mfcc, ResnetTdnn),
        SystemId::S8 => row(false, false, false, Mfcc, Gmm),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Desk,
    Full,
}

impl Profile {
    pub fn parse(s: &str) -> Option<Profile> {
        match s {
            "desk" => Some(Profile::Desk),
            "full" => Some(Profile::Full),
            _ => None,
        }
    }
}

/// Numeric knobs after profile resolution and per-config overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedParams {
    pub channels: usize,
    pub embed_dim: usize,
    pub res2_scale: usize,
    pub pre_pool_channels: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub aam_margin: f64,
    pub logit_scale: f64,
    pub gmm_mixtures: usize,
    pub gmm_em_iters: usize,
    pub chunk_seconds: f64,
}

impl ResolvedParams {
    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => ResolvedParams {
                channels: 32,
                embed_dim: 48,
                res2_scale: 4,
                pre_pool_channels: 96,
                epochs: 8,
                batch_size: 32,
                lr: 1e-3,
                weight_decay: 2e-5,
                aam_margin: 0.2,
                logit_scale: 30.0,
                gmm_mixtures: 32,
                gmm_em_iters: 6,
                chunk_seconds: 3.0,
            },
            Profile::Full => ResolvedParams {
                channels: 512,
                embed_dim: 192,
                res2_scale: 8,
                pre_pool_channels: 1500,
                epochs: 30,
                batch_size: 32,
                lr: 1e-3,
                weight_decay: 2e-5,
                aam_margin: 0.2,
                logit_scale: 30.0,
                gmm_mixtures: 2048,
                gmm_em_iters: 10,
                chunk_seconds: 3.0,
            },
        }
    }
}

// --- on-disk TOML schema ---------------------------------------------------

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub experiment: ExperimentSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub combo: Option<SystemCombo>,
    pub paths: PathsSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub languages: Option<LanguagesSection>,
    #[serde(default, skip_serializing_if = "is_default_split")]
    pub split: SplitSection,
    #[serde(default, skip_serializing_if = "is_default_augment")]
    pub augment: AugmentSection,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub overrides: BTreeMap<String, toml::Value>,
}

fn is_default_split(s: &SplitSection) -> bool {
    *s == SplitSection::default()
}

fn is_default_augment(a: &AugmentSection) -> bool {
    *a == AugmentSection::default()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    #[serde(default)]
    pub custom: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_profile")]
    pub profile: String,
}

fn default_profile() -> String {
    "desk".to_string()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub data_manifest: PathBuf,
    pub output_dir: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rir_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguagesSection {
    pub codes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    pub train_sessions: usize,
    pub val_sessions: usize,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            train_sessions: 25,
            val_sessions: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSection {
    pub copies_per_utterance: usize,
    /// pooled-augmented target as a multiple of the training-set size
    pub pool_multiplier: f64,
}

impl Default for AugmentSection {
    fn default() -> Self {
        AugmentSection {
            copies_per_utterance: 1,
            pool_multiplier: 2.0,
        }
    }
}

/// A fully resolved experiment: the validated combination plus every knob.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// "S0".."S8" or "custom"
    pub label: String,
    pub combo: SystemCombo,
    pub seed: u64,
    pub profile: Profile,
    pub params: ResolvedParams,
    pub labels: LabelSet,
    pub data_manifest: PathBuf,
    pub output_dir: PathBuf,
    pub cache_dir: PathBuf,
    pub noise_dir: Option<PathBuf>,
    pub rir_dir: Option<PathBuf>,
    pub split: SplitSection,
    pub augment: AugmentSection,
    /// the file form this config resolves back to
    pub file: ConfigFile,
}

pub fn parse_config_text(text: &str, origin: &Path) -> Result<ConfigFile, ConfigError> {
    toml::from_str(text).map_err(|e| ConfigError::Parse {
        path: origin.display().to_string(),
        detail: e.to_string(),
    })
}

pub fn serialize_config(file: &ConfigFile) -> String {
    toml::to_string_pretty(file).expect("config serializes")
}

/// Resolve and validate a config file into a runnable experiment.
///
/// A preset system takes its combination from the matrix. An explicit
/// [combo] must match some matrix row unless the experiment is marked
/// custom.
pub fn resolve_config(
    file: &ConfigFile,
    seed_override: Option<u64>,
    profile_override: Option<Profile>,
) -> Result<ExperimentConfig, ConfigError> {
    let (label, combo) = match (&file.experiment.system, &file.combo) {
        (Some(_), Some(_)) => return Err(ConfigError::AmbiguousSystem),
        (Some(name), None) => {
            let id = SystemId::parse(name).ok_or_else(|| ConfigError::UnknownSystem(name.clone()))?;
            (id.as_str().to_string(), system_matrix(id))
        }
        (None, Some(combo)) => {
            let matched = SystemId::ALL.iter().any(|&id| system_matrix(id) == *combo);
            if !matched && !file.experiment.custom {
                return Err(ConfigError::UnmatchedCombination(combo.describe()));
            }
            let label = SystemId::ALL
                .iter()
                .find(|&&id| system_matrix(id) == *combo)
                .map(|id| id.as_str().to_string())
                .unwrap_or_else(|| "custom".to_string());
            (label, *combo)
        }
        (None, None) => return Err(ConfigError::MissingSystem),
    };
    let profile = profile_override
        .or_else(|| Profile::parse(&file.experiment.profile))
        .ok_or_else(|| ConfigError::Parse {
            path: "<config>".into(),
            detail: format!("unknown profile {:?}", file.experiment.profile),
        })?;
    let mut params = ResolvedParams::for_profile(profile);
    apply_overrides(&mut params, &file.overrides)?;
    let labels = match &file.languages {
        Some(l) => LabelSet::new(l.codes.clone()),
        None => LabelSet::lre22(),
    };
    let cache_dir = file.paths.cache_dir.clone().unwrap_or_else(|| {
        file.paths
            .output_dir
            .parent()
            .map(|p| p.join("cache"))
            .unwrap_or_else(|| PathBuf::from("cache"))
    });
    Ok(ExperimentConfig {
        label,
        combo,
        seed: seed_override.unwrap_or(file.experiment.seed),
        profile,
        params,
        labels,
        data_manifest: file.paths.data_manifest.clone(),
        output_dir: file.paths.output_dir.clone(),
        cache_dir,
        noise_dir: file.paths.noise_dir.clone(),
        rir_dir: file.paths.rir_dir.clone(),
        split: file.split.clone(),
        augment: file.augment.clone(),
        file: file.clone(),
    })
}

fn apply_overrides(
    params: &mut ResolvedParams,
    overrides: &BTreeMap<String, toml::Value>,
) -> Result<(), ConfigError> {
    for (key, value) in overrides {
        let bad = || ConfigError::Parse {
            path: "<config>".into(),
            detail: format!("override {key:?}: unexpected value {value}"),
        };
        let as_usize = || value.as_integer().map(|v| v as usize).ok_or_else(bad);
        let as_f64 = || {
            value
                .as_float()
                .or_else(|| value.as_integer().map(|v| v as f64))
                .ok_or_else(bad)
        };
        match key.as_str() {
            "channels" => params.channels = as_usize()?,
            "embed_dim" => params.embed_dim = as_usize()?,
            "res2_scale" => params.res2_scale = as_usize()?,
            "pre_pool_channels" => params.pre_pool_channels = as_usize()?,
            "epochs" => params.epochs = as_usize()?,
            "batch_size" => params.batch_size = as_usize()?,
            "lr" => params.lr = as_f64()?,
            "weight_decay" => params.weight_decay = as_f64()?,
            "aam_margin" => params.aam_margin = as_f64()?,
            "logit_scale" => params.logit_scale = as_f64()?,
            "gmm_mixtures" => params.gmm_mixtures = as_usize()?,
            "gmm_em_iters" => params.gmm_em_iters = as_usize()?,
            "chunk_seconds" => params.chunk_seconds = as_f64()?,
            other => {
                return Err(ConfigError::Parse {
                    path: "<config>".into(),
                    detail: format!("unknown override key {other:?}"),
                })
            }
        }
    }
    Ok(())
}

pub fn load_config(path: &Path) -> Result<ConfigFile, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_config_text(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_toml(system: &str) -> String {
        format!(
            "[experiment]\nsystem = \"{system}\"\nseed = 3\n\n[paths]\ndata_manifest = \"corpus.tsv\"\noutput_dir = \"runs/x\"\n"
        )
    }

    #[test]
    fn matrix_matches_the_published_system_table() {
        use ClassifierSel::*;
        use FeatureSel::*;
        // (nonspeech, signal, enhance, feature, classifier) per system
        let want: [(bool, bool, bool, FeatureSel, ClassifierSel); 9] = [
            (false, false, false, Mfcc, Xvector),
            (false, false, false, Mfcc, Ecapa),
            (true, false, false, Mfcc, Ecapa),
            (false, true, false, Mfcc, Ecapa),
            (false, false, true, Mfcc, Ecapa),
            (true, true, true, Mfcc, Ecapa),
            (true, true, true, RastaPlp, Ecapa),
            (true, true, true, Mfcc, ResnetTdnn),
            (false, false, false, Mfcc, Gmm),
        ];
        for (id, (ns, sp, en, feat, cls)) in SystemId::ALL.iter().zip(want) {
            let row = system_matrix(*id);
            assert_eq!(row.nonspeech, ns, "{id} nonspeech");
            assert_eq!(row.signal_perturb, sp, "{id} signal");
            assert_eq!(row.enhancement, en, "{id} enhance");
            assert_eq!(row.feature, feat, "{id} feature");
            assert_eq!(row.classifier, cls, "{id} classifier");
        }
    }

    #[test]
    fn preset_config_resolves() {
        let file = parse_config_text(&minimal_toml("S3"), Path::new("t.toml")).unwrap();
        let cfg = resolve_config(&file, None, None).unwrap();
        assert_eq!(cfg.label, "S3");
        assert!(cfg.combo.signal_perturb);
        assert!(!cfg.combo.nonspeech);
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.labels.len(), 14);
    }

    #[test]
    fn serialize_parse_is_idempotent() {
        let text = minimal_toml("S5");
        let parsed = parse_config_text(&text, Path::new("t.toml")).unwrap();
        let once = serialize_config(&parsed);
        let reparsed = parse_config_text(&once, Path::new("t.toml")).unwrap();
        let twice = serialize_config(&reparsed);
        assert_eq!(once, twice);
        assert_eq!(parsed, reparsed);
    }

    #[test]
    fn unmatched_combination_is_rejected_without_custom() {
        // enhancement + GMM matches no row of the matrix
        let toml_text = r#"
[experiment]
seed = 1

[combo]
nonspeech = false
signal_perturb = false
enhancement = true
feature = "mfcc"
classifier = "gmm"

[paths]
data_manifest = "c.tsv"
output_dir = "runs/y"
"#;
        let file = parse_config_text(toml_text, Path::new("t.toml")).unwrap();
        assert!(matches!(
            resolve_config(&file, None, None),
            Err(ConfigError::UnmatchedCombination(_))
        ));
        // the same combination runs when marked custom
        let mut custom = file.clone();
        custom.experiment.custom = true;
        let cfg = resolve_config(&custom, None, None).unwrap();
        assert_eq!(cfg.label, "custom");
    }

    #[test]
    fn explicit_combo_matching_a_row_inherits_its_label() {
        let toml_text = r#"
[experiment]
seed = 1

[combo]
nonspeech = true
signal_perturb = false
enhancement = false
feature = "mfcc"
classifier = "ecapa"

[paths]
data_manifest = "c.tsv"
output_dir = "runs/y"
"#;
        let file = parse_config_text(toml_text, Path::new("t.toml")).unwrap();
        let cfg = resolve_config(&file, None, None).unwrap();
        assert_eq!(cfg.label, "S2");
    }

    #[test]
    fn overrides_apply_and_unknown_keys_fail() {
        let mut file = parse_config_text(&minimal_toml("S0"), Path::new("t.toml")).unwrap();
        file.overrides.insert("epochs".into(), toml::Value::Integer(3));
        file.overrides.insert("lr".into(), toml::Value::Float(0.01));
        let cfg = resolve_config(&file, None, None).unwrap();
        assert_eq!(cfg.params.epochs, 3);
        assert_eq!(cfg.params.lr, 0.01);
        file.overrides.insert("bogus".into(), toml::Value::Integer(1));
        assert!(resolve_config(&file, None, None).is_err());
    }

    #[test]
    fn seed_and_profile_overrides_win() {
        let file = parse_config_text(&minimal_toml("S1"), Path::new("t.toml")).unwrap();
        let cfg = resolve_config(&file, Some(99), Some(Profile::Full)).unwrap();
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.params.channels, 512);
        assert_eq!(cfg.params.gmm_mixtures, 2048);
    }
}
