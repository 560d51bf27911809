//! Dataset ingestion: manifests, label sets, session-disjoint splitting, and
//! pooled-augmented sampling.
//!
//! A manifest is a TSV file with one row per utterance:
//!
//! ```text
//! id<TAB>path<TAB>language<TAB>session<TAB>duration_s[<TAB>origin]
//! ```
//!
//! The optional sixth column tags augmented copies with their category
//! (`additive`, `signal`, or `enhance`); rows without it are originals.

mod audio;

use std::collections::BTreeMap;
use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use audio::{read_audio, ulaw_to_linear, write_wav_pcm16, AudioBuffer, SAMPLE_RATE};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: unsupported format: {detail}")]
    UnsupportedFormat { path: String, detail: String },
    #[error("{path}: unsupported encoding: {detail}")]
    UnsupportedEncoding { path: String, detail: String },
    #[error("{path}: unsupported sample rate {rate} (expected 8000, no implicit resampling)")]
    UnsupportedSampleRate { path: String, rate: u32 },
    #[error("{path}: {channels} channels, expected mono")]
    MultiChannel { path: String, channels: u16 },
    #[error("manifest row {line}: {detail}")]
    MalformedRow { line: usize, detail: String },
    #[error("manifest row {line}: unknown language code {code:?}")]
    UnknownLanguage { line: usize, code: String },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("language {language:?} has {available} sessions, need {required}")]
    InsufficientSessions {
        language: String,
        available: usize,
        required: usize,
    },
    #[error("target count {target} exceeds available augmented supply {available}")]
    TargetExceedsSupply { target: usize, available: usize },
}

/// Ordered set of language codes. Score matrices, classifier outputs and
/// trial keys all follow this order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    codes: Vec<String>,
}

impl LabelSet {
    pub fn new(codes: Vec<String>) -> Self {
        let mut seen = HashSet::new();
        for c in &codes {
            assert!(seen.insert(c.clone()), "duplicate language code {c:?}");
        }
        LabelSet { codes }
    }

    /// The 14 LRE22 target language codes.
    pub fn lre22() -> Self {
        LabelSet::new(
            [
                "afr-afr", "ara-aeb", "ara-arq", "ara-ayl", "eng-ens", "eng-iaf", "fra-ntf",
                "nbl-nbl", "orm-orm", "tir-tir", "tso-tso", "ven-ven", "xho-xho", "zul-zul",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        )
    }

    pub fn index(&self, code: &str) -> Option<usize> {
        self.codes.iter().position(|c| c == code)
    }

    pub fn code(&self, idx: usize) -> &str {
        &self.codes[idx]
    }

    pub fn codes(&self) -> &[String] {
        &self.codes
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

/// Augmentation family that produced a derived utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AugmentCategory {
    Additive,
    Signal,
    Enhance,
}

impl AugmentCategory {
    pub const ALL: [AugmentCategory; 3] = [
        AugmentCategory::Additive,
        AugmentCategory::Signal,
        AugmentCategory::Enhance,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AugmentCategory::Additive => "additive",
            AugmentCategory::Signal => "signal",
            AugmentCategory::Enhance => "enhance",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "additive" => Some(AugmentCategory::Additive),
            "signal" => Some(AugmentCategory::Signal),
            "enhance" => Some(AugmentCategory::Enhance),
            _ => None,
        }
    }
}

impl fmt::Display for AugmentCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Original,
    Augmented(AugmentCategory),
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceRecord {
    pub id: String,
    pub path: PathBuf,
    pub language: String,
    pub session: String,
    pub duration_s: f64,
    pub origin: Origin,
}

/// Validated collection of utterance records plus the label set they were
/// validated against.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub records: Vec<UtteranceRecord>,
    pub labels: LabelSet,
}

impl Manifest {
    pub fn new(records: Vec<UtteranceRecord>, labels: LabelSet) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        for r in &records {
            if labels.index(&r.language).is_none() {
                return Err(CorpusError::UnknownLanguage {
                    line: 0,
                    code: r.language.clone(),
                });
            }
            if !seen.insert(r.id.clone()) {
                return Err(CorpusError::DuplicateId(r.id.clone()));
            }
        }
        Ok(Manifest { records, labels })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records grouped by language, in label-set order.
    pub fn by_language(&self) -> Vec<(usize, Vec<&UtteranceRecord>)> {
        let mut groups: Vec<(usize, Vec<&UtteranceRecord>)> =
            (0..self.labels.len()).map(|i| (i, Vec::new())).collect();
        for r in &self.records {
            let idx = self.labels.index(&r.language).expect("validated language");
            groups[idx].1.push(r);
        }
        groups
    }
}

/// Parse and validate a manifest TSV against `labels`.
pub fn load_manifest(path: &Path, labels: &LabelSet) -> Result<Manifest, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|e| CorpusError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_nr = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 && cols.len() != 6 {
            return Err(CorpusError::MalformedRow {
                line: line_nr,
                detail: format!("expected 5 or 6 tab-separated columns, got {}", cols.len()),
            });
        }
        let duration_s: f64 = cols[4].parse().map_err(|_| CorpusError::MalformedRow {
            line: line_nr,
            detail: format!("bad duration {:?}", cols[4]),
        })?;
        if !(duration_s > 0.0) {
            return Err(CorpusError::MalformedRow {
                line: line_nr,
                detail: format!("duration must be positive, got {duration_s}"),
            });
        }
        if labels.index(cols[2]).is_none() {
            return Err(CorpusError::UnknownLanguage {
                line: line_nr,
                code: cols[2].to_string(),
            });
        }
        let origin = match cols.get(5) {
            None => Origin::Original,
            Some(&"") | Some(&"original") => Origin::Original,
            Some(tag) => Origin::Augmented(AugmentCategory::parse(tag).ok_or_else(|| {
                CorpusError::MalformedRow {
                    line: line_nr,
                    detail: format!("unknown origin tag {tag:?}"),
                }
            })?),
        };
        let id = cols[0].to_string();
        if !seen.insert(id.clone()) {
            return Err(CorpusError::DuplicateId(id));
        }
        records.push(UtteranceRecord {
            id,
            path: PathBuf::from(cols[1]),
            language: cols[2].to_string(),
            session: cols[3].to_string(),
            duration_s,
            origin,
        });
    }
    Ok(Manifest {
        records,
        labels: labels.clone(),
    })
}

/// Write a manifest TSV. Augmented rows carry the origin column.
pub fn save_manifest(path: &Path, manifest: &Manifest) -> Result<(), CorpusError> {
    let mut out = String::new();
    for r in &manifest.records {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}",
            r.id,
            r.path.display(),
            r.language,
            r.session,
            r.duration_s
        ));
        if let Origin::Augmented(cat) = r.origin {
            out.push('\t');
            out.push_str(cat.as_str());
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| CorpusError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Session-disjoint split configuration.
#[derive(Debug, Clone, Copy)]
pub struct SplitSpec {
    pub train_sessions_per_lang: usize,
    pub val_sessions_per_lang: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_sessions_per_lang: 25,
            val_sessions_per_lang: 5,
            seed: 0,
        }
    }
}

/// Split a manifest into session-disjoint train and validation manifests.
///
/// Per language, `train_sessions_per_lang` sessions are drawn uniformly
/// without replacement, then `val_sessions_per_lang` from the remainder.
/// Utterances of unselected sessions are dropped.
pub fn split_sessions(
    manifest: &Manifest,
    spec: &SplitSpec,
) -> Result<(Manifest, Manifest), CorpusError> {
    assert!(spec.train_sessions_per_lang > 0 && spec.val_sessions_per_lang > 0);
    let need = spec.train_sessions_per_lang + spec.val_sessions_per_lang;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut train_sessions: HashSet<(usize, String)> = HashSet::new();
    let mut val_sessions: HashSet<(usize, String)> = HashSet::new();

    for (lang_idx, records) in manifest.by_language() {
        let mut sessions: Vec<&str> = {
            let set: HashSet<&str> = records.iter().map(|r| r.session.as_str()).collect();
            let mut v: Vec<&str> = set.into_iter().collect();
            v.sort_unstable();
            v
        };
        if records.is_empty() {
            continue;
        }
        if sessions.len() < need {
            return Err(CorpusError::InsufficientSessions {
                language: manifest.labels.code(lang_idx).to_string(),
                available: sessions.len(),
                required: need,
            });
        }
        sessions.shuffle(&mut rng);
        for s in &sessions[..spec.train_sessions_per_lang] {
            train_sessions.insert((lang_idx, s.to_string()));
        }
        for s in &sessions[spec.train_sessions_per_lang..need] {
            val_sessions.insert((lang_idx, s.to_string()));
        }
    }

    let mut train = Vec::new();
    let mut val = Vec::new();
    for r in &manifest.records {
        let lang_idx = manifest.labels.index(&r.language).expect("validated");
        let key = (lang_idx, r.session.clone());
        if train_sessions.contains(&key) {
            train.push(r.clone());
        } else if val_sessions.contains(&key) {
            val.push(r.clone());
        }
    }
    Ok((
        Manifest {
            records: train,
            labels: manifest.labels.clone(),
        },
        Manifest {
            records: val,
            labels: manifest.labels.clone(),
        },
    ))
}

/// Pool original training records with a stratified sample of augmented
/// records.
///
/// `target_count` augmented records are drawn without replacement,
/// stratified first over categories (counts differing by at most one) and
/// then over languages within each category. When a stratum cannot supply
/// its share the deficit spills over to the remaining strata in fixed
/// (category, language) order.
pub fn pool_augmented(
    train: &Manifest,
    augmented: &BTreeMap<AugmentCategory, Manifest>,
    target_count: usize,
    seed: u64,
) -> Result<Manifest, CorpusError> {
    let available: usize = augmented.values().map(Manifest::len).sum();
    if target_count > available {
        return Err(CorpusError::TargetExceedsSupply {
            target: target_count,
            available,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pooled = train.records.clone();

    // Strata in fixed order: categories as given, languages in label order.
    let mut strata: Vec<Vec<&UtteranceRecord>> = Vec::new();
    for manifest in augmented.values() {
        for (_, records) in manifest.by_language() {
            strata.push(records);
        }
    }
    let langs_per_cat = train.labels.len();
    let cat_shares = even_shares(target_count, augmented.len());
    let mut shares: Vec<usize> = Vec::new();
    for &cat_share in &cat_shares {
        shares.extend(even_shares(cat_share, langs_per_cat));
    }

    // Waterfill: cap each share by supply, then hand leftovers to strata
    // with spare records in fixed order.
    let supplies: Vec<usize> = strata.iter().map(Vec::len).collect();
    let mut alloc: Vec<usize> = shares
        .iter()
        .zip(&supplies)
        .map(|(&s, &sup)| s.min(sup))
        .collect();
    let mut leftover = target_count - alloc.iter().sum::<usize>();
    while leftover > 0 {
        let mut progressed = false;
        for (a, &sup) in alloc.iter_mut().zip(&supplies) {
            if leftover == 0 {
                break;
            }
            if *a < sup {
                *a += 1;
                leftover -= 1;
                progressed = true;
            }
        }
        assert!(progressed, "supply accounting broken");
    }

    for (records, take) in strata.into_iter().zip(alloc) {
        let mut idx: Vec<usize> = (0..records.len()).collect();
        idx.shuffle(&mut rng);
        let mut chosen: Vec<usize> = idx.into_iter().take(take).collect();
        chosen.sort_unstable();
        for i in chosen {
            pooled.push(records[i].clone());
        }
    }
    Manifest::new(pooled, train.labels.clone())
}

fn even_shares(total: usize, n: usize) -> Vec<usize> {
    assert!(n > 0);
    let base = total / n;
    let rem = total % n;
    (0..n).map(|i| base + usize::from(i < rem)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn labels(n: usize) -> LabelSet {
        LabelSet::new((0..n).map(|i| format!("lang{i:02}")).collect())
    }

    fn synthetic_manifest(n_langs: usize, n_sessions: usize, utts_per_session: usize) -> Manifest {
        let labels = labels(n_langs);
        let mut records = Vec::new();
        for l in 0..n_langs {
            for s in 0..n_sessions {
                for u in 0..utts_per_session {
                    records.push(UtteranceRecord {
                        id: format!("l{l}s{s}u{u}"),
                        path: PathBuf::from(format!("/data/l{l}s{s}u{u}.wav")),
                        language: format!("lang{l:02}"),
                        session: format!("sess{s:02}"),
                        duration_s: 5.0,
                        origin: Origin::Original,
                    });
                }
            }
        }
        Manifest::new(records, labels).unwrap()
    }

    #[test]
    fn load_two_row_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "u1\t/a/u1.wav\tafr-afr\ts1\t4.5").unwrap();
        writeln!(f, "u2\t/a/u2.wav\tzul-zul\ts2\t6.25").unwrap();
        let m = load_manifest(&path, &LabelSet::lre22()).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.records[1].language, "zul-zul");
        assert_eq!(m.records[0].origin, Origin::Original);
    }

    #[test]
    fn negative_duration_names_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        std::fs::write(&path, "u1\t/a/u1.wav\tafr-afr\ts1\t-3\n").unwrap();
        match load_manifest(&path, &LabelSet::lre22()) {
            Err(CorpusError::MalformedRow { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected malformed row, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_id_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        std::fs::write(
            &path,
            "u1\t/a/u1.wav\tafr-afr\ts1\t3\nu1\t/a/u2.wav\tafr-afr\ts1\t3\n",
        )
        .unwrap();
        assert!(matches!(
            load_manifest(&path, &LabelSet::lre22()),
            Err(CorpusError::DuplicateId(_))
        ));
    }

    #[test]
    fn unknown_language_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        std::fs::write(&path, "u1\t/a/u1.wav\tklingon\ts1\t3\n").unwrap();
        assert!(matches!(
            load_manifest(&path, &LabelSet::lre22()),
            Err(CorpusError::UnknownLanguage { .. })
        ));
    }

    #[test]
    fn manifest_roundtrip_preserves_origin() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        let labels = labels(2);
        let m = Manifest::new(
            vec![
                UtteranceRecord {
                    id: "a".into(),
                    path: "/x/a.wav".into(),
                    language: "lang00".into(),
                    session: "s".into(),
                    duration_s: 1.0,
                    origin: Origin::Original,
                },
                UtteranceRecord {
                    id: "a-sig".into(),
                    path: "/x/a-sig.wav".into(),
                    language: "lang00".into(),
                    session: "s".into(),
                    duration_s: 1.1,
                    origin: Origin::Augmented(AugmentCategory::Signal),
                },
            ],
            labels.clone(),
        )
        .unwrap();
        save_manifest(&path, &m).unwrap();
        let back = load_manifest(&path, &labels).unwrap();
        assert_eq!(back.records[1].origin, Origin::Augmented(AugmentCategory::Signal));
        assert_eq!(back.records[1].duration_s, 1.1);
    }

    #[test]
    fn default_split_yields_250_train_50_val_per_language() {
        let m = synthetic_manifest(14, 30, 10);
        let (train, val) = split_sessions(&m, &SplitSpec::default()).unwrap();
        assert_eq!(train.len(), 14 * 250);
        assert_eq!(val.len(), 14 * 50);
        for (_, group) in train.by_language() {
            assert_eq!(group.len(), 250);
        }
        for (_, group) in val.by_language() {
            assert_eq!(group.len(), 50);
        }
    }

    #[test]
    fn split_is_deterministic_for_a_seed() {
        let m = synthetic_manifest(4, 30, 2);
        let spec = SplitSpec {
            seed: 42,
            ..Default::default()
        };
        let (t1, v1) = split_sessions(&m, &spec).unwrap();
        let (t2, v2) = split_sessions(&m, &spec).unwrap();
        assert_eq!(t1.records, t2.records);
        assert_eq!(v1.records, v2.records);
    }

    #[test]
    fn insufficient_sessions_names_language() {
        let m = synthetic_manifest(2, 20, 1);
        match split_sessions(&m, &SplitSpec::default()) {
            Err(CorpusError::InsufficientSessions { language, available, required }) => {
                assert_eq!(language, "lang00");
                assert_eq!(available, 20);
                assert_eq!(required, 30);
            }
            other => panic!("expected insufficient sessions, got {other:?}"),
        }
    }

    #[test]
    fn train_and_val_sessions_are_disjoint_for_many_seeds() {
        let m = synthetic_manifest(3, 12, 3);
        for seed in 0..25 {
            let spec = SplitSpec {
                train_sessions_per_lang: 7,
                val_sessions_per_lang: 4,
                seed,
            };
            let (train, val) = split_sessions(&m, &spec).unwrap();
            for lang in 0..3 {
                let ts: HashSet<_> = train
                    .records
                    .iter()
                    .filter(|r| r.language == format!("lang{lang:02}"))
                    .map(|r| r.session.clone())
                    .collect();
                let vs: HashSet<_> = val
                    .records
                    .iter()
                    .filter(|r| r.language == format!("lang{lang:02}"))
                    .map(|r| r.session.clone())
                    .collect();
                assert!(ts.is_disjoint(&vs), "seed {seed} lang {lang}");
            }
        }
    }

    #[test]
    fn split_preserves_selected_records_exactly_once() {
        let m = synthetic_manifest(2, 10, 4);
        let spec = SplitSpec {
            train_sessions_per_lang: 6,
            val_sessions_per_lang: 4,
            seed: 7,
        };
        let (train, val) = split_sessions(&m, &spec).unwrap();
        // 6+4 = all 10 sessions selected: every record appears exactly once.
        let mut ids: Vec<&str> = train
            .records
            .iter()
            .chain(&val.records)
            .map(|r| r.id.as_str())
            .collect();
        ids.sort_unstable();
        let mut want: Vec<&str> = m.records.iter().map(|r| r.id.as_str()).collect();
        want.sort_unstable();
        assert_eq!(ids, want);
    }

    fn augmented_copy(m: &Manifest, cat: AugmentCategory) -> Manifest {
        let records = m
            .records
            .iter()
            .map(|r| UtteranceRecord {
                id: format!("{}-{}", r.id, cat.as_str()),
                origin: Origin::Augmented(cat),
                ..r.clone()
            })
            .collect();
        Manifest::new(records, m.labels.clone()).unwrap()
    }

    #[test]
    fn pooling_matches_paper_counts() {
        // 14 langs x 250 train = 3500 originals; 3 x 3500 augmented; target
        // 7000 -> pooled manifest of 10500 records.
        let m = synthetic_manifest(14, 25, 10);
        let mut augmented = BTreeMap::new();
        for cat in AugmentCategory::ALL {
            augmented.insert(cat, augmented_copy(&m, cat));
        }
        let pooled = pool_augmented(&m, &augmented, 7000, 3).unwrap();
        assert_eq!(pooled.len(), 10500);
        // per-category counts differ by <= 1 from 7000/3
        let mut counts = BTreeMap::new();
        for r in &pooled.records {
            if let Origin::Augmented(cat) = r.origin {
                *counts.entry(cat).or_insert(0usize) += 1;
            }
        }
        let ideal = 7000.0 / 3.0;
        for (&cat, &n) in &counts {
            assert!(
                (n as f64 - ideal).abs() <= 1.0,
                "category {cat} drew {n}, ideal {ideal}"
            );
        }
        // and per (category, language) strata differ by <= 1 from 7000/42
        let mut stratum = BTreeMap::new();
        for r in &pooled.records {
            if let Origin::Augmented(cat) = r.origin {
                *stratum.entry((cat, r.language.clone())).or_insert(0usize) += 1;
            }
        }
        let ideal = 7000.0 / 42.0;
        for (&(cat, ref lang), &n) in &stratum {
            assert!(
                (n as f64 - ideal).abs() <= 1.0,
                "stratum ({cat},{lang}) drew {n}, ideal {ideal}"
            );
        }
    }

    #[test]
    fn pooling_zero_target_returns_train() {
        let m = synthetic_manifest(2, 5, 2);
        let mut augmented = BTreeMap::new();
        for cat in AugmentCategory::ALL {
            augmented.insert(cat, augmented_copy(&m, cat));
        }
        let pooled = pool_augmented(&m, &augmented, 0, 1).unwrap();
        assert_eq!(pooled.records, m.records);
    }

    #[test]
    fn pooling_rejects_excess_target() {
        let m = synthetic_manifest(2, 5, 2);
        let mut augmented = BTreeMap::new();
        augmented.insert(AugmentCategory::Signal, augmented_copy(&m, AugmentCategory::Signal));
        assert!(matches!(
            pool_augmented(&m, &augmented, 1000, 1),
            Err(CorpusError::TargetExceedsSupply { .. })
        ));
    }
}
