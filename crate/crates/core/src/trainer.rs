//! Bias-aware training protocol for the MLP classifier: gender balancing,
//! corpus equalization, speaker-disjoint splits, one random excerpt per
//! speaker per epoch, and early stopping on the dev loss plus the absolute
//! gap between male and female dev losses.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::mlp::Mlp;
use crate::classifier::{pooled_stats_values, ArchSpec, FeatureConfig, ModelBundle, ModelError, ModelMetadata, DROPOUT_RATE};
use crate::features::{MelFrames, INFERENCE_PATCH_HOP, PATCH_FRAMES};
use crate::Gender;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("corpus '{corpus}' has no {gender} speakers")]
    EmptyGender { corpus: String, gender: Gender },
    #[error("need at least {needed} {gender} speakers, found {found}")]
    TooFewSpeakers { gender: Gender, found: usize, needed: usize },
    #[error("speaker {0} has less than one patch of usable speech")]
    SpeakerTooShort(String),
    #[error("non-finite loss for seed {seed} at epoch {epoch}")]
    NonFiniteLoss { seed: u64, epoch: usize },
    #[error("every seed failed: {0}")]
    AllSeedsFailed(String),
    #[error("training supports MLP architectures only")]
    UnsupportedArch,
    #[error("speaker {speaker_id} appears twice in corpus '{corpus}'")]
    DuplicateSpeaker { corpus: String, speaker_id: String },
    #[error("no training material for speaker {0}")]
    MissingMaterial(String),
    #[error("feature dimension mismatch: model expects {expected}, data has {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("{path}:{line}: {message}")]
    Csv { path: String, line: usize, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("training i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Speakers are identified by corpus tag and id.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SpeakerKey {
    pub corpus: String,
    pub speaker_id: String,
}

impl std::fmt::Display for SpeakerKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.corpus, self.speaker_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerEntry {
    pub key: SpeakerKey,
    pub gender: Gender,
    /// WAV paths or embedding ids.
    pub recordings: Vec<String>,
}

/// Speaker list, kept sorted by key.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusIndex {
    entries: Vec<SpeakerEntry>,
}

/// Column naming what `recordings` refer to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordingKind {
    WavPath,
    EmbeddingId,
}

impl CorpusIndex {
    pub fn new(mut entries: Vec<SpeakerEntry>) -> Result<Self, TrainError> {
        entries.sort_by(|a, b| a.key.cmp(&b.key));
        for w in entries.windows(2) {
            if w[0].key == w[1].key {
                return Err(TrainError::DuplicateSpeaker {
                    corpus: w[0].key.corpus.clone(),
                    speaker_id: w[0].key.speaker_id.clone(),
                });
            }
        }
        if let Some(e) = entries.iter().find(|e| e.recordings.is_empty()) {
            return Err(TrainError::MissingMaterial(e.key.to_string()));
        }
        Ok(Self { entries })
    }

    fn from_sorted(entries: Vec<SpeakerEntry>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[SpeakerEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, gender: Gender) -> usize {
        self.entries.iter().filter(|e| e.gender == gender).count()
    }

    pub fn corpora(&self) -> BTreeSet<String> {
        self.entries.iter().map(|e| e.key.corpus.clone()).collect()
    }

    /// Speaker counts per `(corpus, gender)`.
    pub fn cell_counts(&self) -> BTreeMap<(String, Gender), usize> {
        let mut m = BTreeMap::new();
        for e in &self.entries {
            *m.entry((e.key.corpus.clone(), e.gender)).or_insert(0) += 1;
        }
        m
    }

    pub fn keys(&self) -> BTreeSet<SpeakerKey> {
        self.entries.iter().map(|e| e.key.clone()).collect()
    }

    fn cells(&self) -> BTreeMap<(String, Gender), Vec<&SpeakerEntry>> {
        let mut m: BTreeMap<_, Vec<_>> = BTreeMap::new();
        for e in &self.entries {
            m.entry((e.key.corpus.clone(), e.gender)).or_default().push(e);
        }
        m
    }

    /// Reads `speaker_id,gender,corpus_tag,wav_path` or
    /// `speaker_id,gender,corpus_tag,embedding_id`. Rows sharing a speaker
    /// add recordings to it.
    pub fn load_csv(path: impl AsRef<Path>) -> Result<(Self, RecordingKind), TrainError> {
        let path = path.as_ref();
        let shown = path.display().to_string();
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| TrainError::Csv {
            path: shown.clone(),
            line: 0,
            message: e.to_string(),
        })?;
        let csv_err = |line: usize, message: String| TrainError::Csv { path: shown.clone(), line, message };
        let headers = reader.headers().map_err(|e| csv_err(1, e.to_string()))?.clone();
        let names: Vec<&str> = headers.iter().collect();
        let kind = match names.as_slice() {
            ["speaker_id", "gender", "corpus_tag", "wav_path"] => RecordingKind::WavPath,
            ["speaker_id", "gender", "corpus_tag", "embedding_id"] => RecordingKind::EmbeddingId,
            _ => {
                return Err(csv_err(
                    1,
                    format!("expected header speaker_id,gender,corpus_tag,wav_path|embedding_id, found {}", names.join(",")),
                ))
            }
        };
        let mut map: BTreeMap<SpeakerKey, SpeakerEntry> = BTreeMap::new();
        for (i, row) in reader.records().enumerate() {
            let line = i + 2;
            let row = row.map_err(|e| csv_err(line, e.to_string()))?;
            let gender: Gender = row[1].parse().map_err(|e: String| csv_err(line, e))?;
            if row[0].is_empty() || row[3].is_empty() {
                return Err(csv_err(line, "empty speaker id or recording".into()));
            }
            let key = SpeakerKey { corpus: row[2].to_string(), speaker_id: row[0].to_string() };
            let entry = map.entry(key.clone()).or_insert_with(|| SpeakerEntry { key, gender, recordings: Vec::new() });
            if entry.gender != gender {
                return Err(csv_err(line, format!("speaker {} listed with two genders", entry.key)));
            }
            entry.recordings.push(row[3].to_string());
        }
        Ok((Self::from_sorted(map.into_values().collect()), kind))
    }
}

fn sub_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Drops random speakers of the larger gender, corpus by corpus, until
/// both genders have the same count in every corpus.
pub fn balance_by_gender(idx: &CorpusIndex, seed: u64) -> Result<CorpusIndex, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept = Vec::new();
    for corpus in idx.corpora() {
        let by_gender = |g: Gender| -> Vec<&SpeakerEntry> {
            idx.entries.iter().filter(|e| e.key.corpus == corpus && e.gender == g).collect()
        };
        let (mut f, mut m) = (by_gender(Gender::F), by_gender(Gender::M));
        for (list, g) in [(&f, Gender::F), (&m, Gender::M)] {
            if list.is_empty() {
                return Err(TrainError::EmptyGender { corpus: corpus.clone(), gender: g });
            }
        }
        let n = f.len().min(m.len());
        for list in [&mut f, &mut m] {
            if list.len() > n {
                list.shuffle(&mut rng);
                list.truncate(n);
            }
            kept.extend(list.iter().map(|e| (*e).clone()));
        }
    }
    if idx.is_empty() {
        return Err(TrainError::EmptyGender { corpus: String::new(), gender: Gender::F });
    }
    kept.sort_by(|a, b| a.key.cmp(&b.key));
    Ok(CorpusIndex::from_sorted(kept))
}

/// Reduces every (gender-balanced) corpus to the smallest per-gender count.
pub fn equalize_corpora(corpora: &[CorpusIndex], seed: u64) -> Vec<CorpusIndex> {
    let target = corpora.iter().map(|c| c.count(Gender::F).min(c.count(Gender::M))).min().unwrap_or(0);
    corpora
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut rng = sub_rng(seed, i as u64);
            let mut kept = Vec::new();
            for g in [Gender::F, Gender::M] {
                let mut list: Vec<&SpeakerEntry> = c.entries.iter().filter(|e| e.gender == g).collect();
                if list.len() > target {
                    list.shuffle(&mut rng);
                    list.truncate(target);
                }
                kept.extend(list.into_iter().cloned());
            }
            kept.sort_by(|a, b| a.key.cmp(&b.key));
            CorpusIndex::from_sorted(kept)
        })
        .collect()
}

/// Merges indexes from several corpora into one.
pub fn merge(corpora: &[CorpusIndex]) -> Result<CorpusIndex, TrainError> {
    CorpusIndex::new(corpora.iter().flat_map(|c| c.entries.iter().cloned()).collect())
}

pub const MIN_SPEAKERS_PER_GENDER: usize = 5;

/// Speaker-disjoint split, stratified by corpus and gender.
pub fn split_train_dev(idx: &CorpusIndex, ratio: f64, seed: u64) -> Result<(CorpusIndex, CorpusIndex), TrainError> {
    for g in [Gender::F, Gender::M] {
        let found = idx.count(g);
        if found < MIN_SPEAKERS_PER_GENDER {
            return Err(TrainError::TooFewSpeakers { gender: g, found, needed: MIN_SPEAKERS_PER_GENDER });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut dev) = (Vec::new(), Vec::new());
    for (_, mut cell) in idx.cells() {
        cell.shuffle(&mut rng);
        let n_train = (cell.len() as f64 * ratio).round() as usize;
        let (a, b) = cell.split_at(n_train.min(cell.len()));
        train.extend(a.iter().map(|e| (*e).clone()));
        dev.extend(b.iter().map(|e| (*e).clone()));
    }
    train.sort_by(|a, b| a.key.cmp(&b.key));
    dev.sort_by(|a, b| a.key.cmp(&b.key));
    Ok((CorpusIndex::from_sorted(train), CorpusIndex::from_sorted(dev)))
}

/// The full selection protocol: balance genders within each corpus,
/// equalize corpora, merge, then split speakers into train and dev.
pub fn protocol_split(idx: &CorpusIndex, ratio: f64, seed: u64) -> Result<(CorpusIndex, CorpusIndex), TrainError> {
    let balanced = idx
        .corpora()
        .into_iter()
        .map(|c| {
            let sub = CorpusIndex::new(idx.entries.iter().filter(|e| e.key.corpus == c).cloned().collect())?;
            balance_by_gender(&sub, seed)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let merged = merge(&equalize_corpora(&balanced, seed))?;
    split_train_dev(&merged, ratio, seed)
}

/// Usable material for one speaker, one item per recording.
#[derive(Debug, Clone)]
pub enum SpeakerMaterial {
    /// Speech-only log-Mel frames.
    Mel(Vec<MelFrames>),
    /// Fixed-size embeddings.
    Embedding(Vec<Vec<f64>>),
}

impl SpeakerMaterial {
    fn usable(&self) -> Vec<usize> {
        match self {
            SpeakerMaterial::Mel(recs) => {
                recs.iter().enumerate().filter(|(_, m)| m.n_frames() >= PATCH_FRAMES).map(|(i, _)| i).collect()
            }
            SpeakerMaterial::Embedding(recs) => (0..recs.len()).collect(),
        }
    }
}

pub type MaterialTable = BTreeMap<SpeakerKey, SpeakerMaterial>;

/// Speech-only log-Mel frames for every recording in `idx`. Relative WAV
/// paths resolve against `base_dir`.
pub fn load_wav_material(
    idx: &CorpusIndex,
    base_dir: &Path,
    n_bands: usize,
    vad_cfg: &crate::vad::VadConfig,
) -> Result<MaterialTable, crate::Error> {
    idx.entries
        .par_iter()
        .map(|e| {
            let recs = e
                .recordings
                .iter()
                .map(|r| {
                    let buf = crate::audio::read_wav_file(base_dir.join(r))?;
                    Ok(crate::pipeline::speech_features(&buf, n_bands, vad_cfg)?.mel)
                })
                .collect::<Result<Vec<_>, crate::Error>>()?;
            Ok((e.key.clone(), SpeakerMaterial::Mel(recs)))
        })
        .collect()
}

/// Looks up every recording's embedding id in `table`.
pub fn embedding_material(idx: &CorpusIndex, table: &BTreeMap<String, Vec<f64>>) -> Result<MaterialTable, TrainError> {
    idx.entries
        .iter()
        .map(|e| {
            let recs = e
                .recordings
                .iter()
                .map(|r| table.get(r).cloned().ok_or_else(|| TrainError::MissingMaterial(format!("{} (embedding {r})", e.key))))
                .collect::<Result<Vec<_>, _>>()?;
            Ok((e.key.clone(), SpeakerMaterial::Embedding(recs)))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Excerpt {
    pub speaker: SpeakerKey,
    pub gender: Gender,
    pub recording: usize,
    /// First frame of the patch (`None` for embeddings).
    pub start_frame: Option<usize>,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochBatch {
    pub excerpts: Vec<Excerpt>,
    /// Speakers left out this epoch: too short, or partners dropped to keep cells equal.
    pub skipped: Vec<SpeakerKey>,
}

impl EpochBatch {
    pub fn cell_counts(&self) -> BTreeMap<(String, Gender), usize> {
        let mut m = BTreeMap::new();
        for e in &self.excerpts {
            *m.entry((e.speaker.corpus.clone(), e.gender)).or_insert(0) += 1;
        }
        m
    }

    /// Every (corpus, gender) cell holds the same number of excerpts.
    pub fn is_balanced(&self) -> bool {
        let counts = self.cell_counts();
        let corpora: BTreeSet<&String> = counts.keys().map(|(c, _)| c).collect();
        let first = counts.values().next().copied();
        counts.len() == 2 * corpora.len() && counts.values().all(|&n| Some(n) == first)
    }
}

fn excerpt_features(material: &SpeakerMaterial, recording: usize, start: usize) -> Vec<f64> {
    match material {
        SpeakerMaterial::Mel(recs) => {
            let mel = &recs[recording];
            let n = mel.n_bands();
            pooled_stats_values(&mel.values()[start * n..(start + PATCH_FRAMES) * n], n)
        }
        SpeakerMaterial::Embedding(recs) => recs[recording].clone(),
    }
}

/// Speakers taking part in training, with cells trimmed to equal size.
/// Depends on `seed` only, so the same partners are dropped every epoch.
fn eligible(train: &CorpusIndex, material: &MaterialTable, seed: u64) -> Result<(Vec<SpeakerEntry>, Vec<SpeakerKey>), TrainError> {
    let mut skipped = Vec::new();
    let mut cells: BTreeMap<(String, Gender), Vec<&SpeakerEntry>> = BTreeMap::new();
    for corpus in train.corpora() {
        for g in [Gender::F, Gender::M] {
            cells.insert((corpus.clone(), g), Vec::new());
        }
    }
    for e in &train.entries {
        let ok = material.get(&e.key).is_some_and(|m| !m.usable().is_empty());
        if ok {
            cells.get_mut(&(e.key.corpus.clone(), e.gender)).expect("cell exists").push(e);
        } else {
            log::warn!("{}", TrainError::SpeakerTooShort(e.key.to_string()));
            skipped.push(e.key.clone());
        }
    }
    if let Some(((corpus, gender), _)) = cells.iter().find(|(_, v)| v.is_empty()) {
        return Err(TrainError::EmptyGender { corpus: corpus.clone(), gender: *gender });
    }
    let target = cells.values().map(Vec::len).min().unwrap_or(0);
    let mut rng = sub_rng(seed, u64::MAX);
    let mut kept = Vec::new();
    for (_, mut cell) in cells {
        if cell.len() > target {
            cell.shuffle(&mut rng);
            skipped.extend(cell[target..].iter().map(|e| e.key.clone()));
            cell.truncate(target);
        }
        kept.extend(cell.into_iter().cloned());
    }
    kept.sort_by(|a, b| a.key.cmp(&b.key));
    Ok((kept, skipped))
}

/// One random excerpt (recording, then start frame) per speaker.
pub fn sample_epoch(train: &CorpusIndex, material: &MaterialTable, seed: u64, epoch_no: usize) -> Result<EpochBatch, TrainError> {
    let (speakers, skipped) = eligible(train, material, seed)?;
    Ok(draw(&speakers, skipped, material, seed, epoch_no))
}

fn draw(speakers: &[SpeakerEntry], skipped: Vec<SpeakerKey>, material: &MaterialTable, seed: u64, epoch_no: usize) -> EpochBatch {
    let mut rng = sub_rng(seed, epoch_no as u64);
    let excerpts = speakers
        .iter()
        .map(|e| {
            let m = &material[&e.key];
            let usable = m.usable();
            let recording = usable[rng.random_range(0..usable.len())];
            let start_frame = match m {
                SpeakerMaterial::Mel(recs) => Some(rng.random_range(0..=recs[recording].n_frames() - PATCH_FRAMES)),
                SpeakerMaterial::Embedding(_) => None,
            };
            Excerpt {
                speaker: e.key.clone(),
                gender: e.gender,
                recording,
                start_frame,
                features: excerpt_features(m, recording, start_frame.unwrap_or(0)),
            }
        })
        .collect();
    EpochBatch { excerpts, skipped }
}

/// Fixed evaluation excerpts: every patch at the inference hop (or every embedding).
pub fn dev_excerpts(dev: &CorpusIndex, material: &MaterialTable) -> Vec<Excerpt> {
    let mut out = Vec::new();
    for e in &dev.entries {
        let Some(m) = material.get(&e.key) else { continue };
        for recording in m.usable() {
            let starts: Vec<Option<usize>> = match m {
                SpeakerMaterial::Mel(recs) => {
                    (0..=recs[recording].n_frames() - PATCH_FRAMES).step_by(INFERENCE_PATCH_HOP).map(Some).collect()
                }
                SpeakerMaterial::Embedding(_) => vec![None],
            };
            for start_frame in starts {
                out.push(Excerpt {
                    speaker: e.key.clone(),
                    gender: e.gender,
                    recording,
                    start_frame,
                    features: excerpt_features(m, recording, start_frame.unwrap_or(0)),
                });
            }
        }
    }
    out
}

/// Mean losses over a labelled set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenderLosses {
    pub loss_f: f64,
    pub loss_m: f64,
    pub n_f: usize,
    pub n_m: usize,
}

impl GenderLosses {
    /// Loss over the union of both genders.
    pub fn loss_all(&self) -> f64 {
        (self.loss_f * self.n_f as f64 + self.loss_m * self.n_m as f64) / (self.n_f + self.n_m) as f64
    }
}

/// `loss_all + |loss_m - loss_f|`.
pub fn monitored_objective(l: &GenderLosses) -> Result<f64, TrainError> {
    for (n, g) in [(l.n_f, Gender::F), (l.n_m, Gender::M)] {
        if n == 0 {
            return Err(TrainError::EmptyGender { corpus: "dev".into(), gender: g });
        }
    }
    Ok(l.loss_all() + (l.loss_m - l.loss_f).abs())
}

/// Patience-based stopping on a minimized objective.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub max_epochs: usize,
    best: f64,
    best_epoch: usize,
    epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, max_epochs: usize) -> Self {
        Self { patience, max_epochs, best: f64::INFINITY, best_epoch: 0, epoch: 0 }
    }

    /// Records one epoch's objective. Returns `(improved, stop)`.
    pub fn observe(&mut self, objective: f64) -> (bool, bool) {
        self.epoch += 1;
        let improved = objective < self.best;
        if improved {
            self.best = objective;
            self.best_epoch = self.epoch;
        }
        let stop = self.epoch >= self.max_epochs || self.epoch - self.best_epoch >= self.patience;
        (improved, stop)
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn epochs_run(&self) -> usize {
        self.epoch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub patience: usize,
    pub max_epochs: usize,
    pub n_seeds: usize,
    pub learning_rate: f64,
    pub base_seed: u64,
    pub dropout: f64,
    /// Standardize inputs with train-set statistics stored in the bundle.
    pub standardize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            patience: 50,
            max_epochs: 160,
            n_seeds: 3,
            learning_rate: 0.1,
            base_seed: 0,
            dropout: DROPOUT_RATE,
            standardize: true,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), TrainError> {
        if self.patience > self.max_epochs {
            return Err(TrainError::InvalidConfig("patience exceeds max_epochs".into()));
        }
        if self.n_seeds == 0 || self.max_epochs == 0 {
            return Err(TrainError::InvalidConfig("need at least one seed and one epoch".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(self.learning_rate > 0.0) {
            return Err(TrainError::InvalidConfig("dropout must be in [0, 1) and learning rate positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub seed: u64,
    pub epoch: usize,
    pub train_loss: f64,
    pub loss_all: f64,
    pub loss_f: f64,
    pub loss_m: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub best_objective: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub bundle: ModelBundle,
    pub best_seed: u64,
    pub best_objective: f64,
    pub seeds: Vec<SeedSummary>,
    pub log: Vec<EpochLog>,
}

pub fn write_log_jsonl(log: &[EpochLog], mut out: impl Write) -> std::io::Result<()> {
    for rec in log {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn gender_losses(net: &Mlp, xs: &[Vec<f64>], genders: &[Gender]) -> GenderLosses {
    let (mut sf, mut sm, mut nf, mut nm) = (0.0, 0.0, 0, 0);
    for (x, g) in xs.iter().zip(genders) {
        let l = crate::classifier::mlp::bce_with_logit(net.logit(x), g.target());
        match g {
            Gender::F => {
                sf += l;
                nf += 1;
            }
            Gender::M => {
                sm += l;
                nm += 1;
            }
        }
    }
    GenderLosses { loss_f: sf / nf.max(1) as f64, loss_m: sm / nm.max(1) as f64, n_f: nf, n_m: nm }
}

/// Per-dimension mean and population std (1 where the std vanishes).
fn standardization(xs: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = xs[0].len();
    let n = xs.len() as f64;
    let mut mean = vec![0.0; d];
    for x in xs {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; d];
    for x in xs {
        for ((s, v), m) in var.iter_mut().zip(x).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let scale = var.into_iter().map(|v| if v.sqrt() > 1e-8 { v.sqrt() } else { 1.0 }).collect();
    (mean, scale)
}

fn apply_standardization(x: &[f64], mean: &[f64], scale: &[f64]) -> Vec<f64> {
    x.iter().zip(mean).zip(scale).map(|((v, m), s)| (v - m) / s).collect()
}

struct SeedRun {
    net: Mlp,
    objective: f64,
    summary: SeedSummary,
    log: Vec<EpochLog>,
}

/// Trains `cfg.n_seeds` initializations and keeps the one with the lowest
/// dev objective, restored to its best epoch.
pub fn train(
    spec: &ArchSpec,
    feature_config: FeatureConfig,
    train_idx: &CorpusIndex,
    dev_idx: &CorpusIndex,
    material: &MaterialTable,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let ArchSpec::Mlp(mlp_spec) = spec else {
        return Err(TrainError::UnsupportedArch);
    };
    spec.validate()?;
    let train_keys = train_idx.keys();
    if let Some(k) = dev_idx.keys().intersection(&train_keys).next() {
        return Err(TrainError::InvalidConfig(format!("speaker {k} is in both train and dev")));
    }
    let (speakers, skipped) = eligible(train_idx, material, cfg.base_seed)?;
    let dev = dev_excerpts(dev_idx, material);
    let dim = dev.first().map(|e| e.features.len()).unwrap_or(mlp_spec.input_dim);
    if dim != mlp_spec.input_dim {
        return Err(TrainError::DimensionMismatch { expected: mlp_spec.input_dim, got: dim });
    }

    // Standardization statistics from every training patch at the inference hop.
    let standardizer = if cfg.standardize {
        let idx = CorpusIndex::from_sorted(speakers.clone());
        let all: Vec<Vec<f64>> = dev_excerpts(&idx, material).into_iter().map(|e| e.features).collect();
        Some(standardization(&all))
    } else {
        None
    };
    let prep = |x: &[f64]| match &standardizer {
        Some((m, s)) => apply_standardization(x, m, s),
        None => x.to_vec(),
    };
    let dev_x: Vec<Vec<f64>> = dev.iter().map(|e| prep(&e.features)).collect();
    let dev_g: Vec<Gender> = dev.iter().map(|e| e.gender).collect();
    if !dev_g.contains(&Gender::F) || !dev_g.contains(&Gender::M) {
        let gender = if dev_g.contains(&Gender::F) { Gender::M } else { Gender::F };
        return Err(TrainError::EmptyGender { corpus: "dev".into(), gender });
    }

    let mut sizes = vec![mlp_spec.input_dim];
    sizes.extend(&mlp_spec.hidden);
    sizes.push(1);

    let runs: Vec<Result<SeedRun, (u64, TrainError)>> = (0..cfg.n_seeds as u64)
        .into_par_iter()
        .map(|s| {
            let seed = cfg.base_seed + s;
            let mut net = Mlp::new(&sizes, &mut sub_rng(seed, u64::MAX - 1));
            let mut dropout_rng = sub_rng(seed, u64::MAX - 2);
            let mut stopper = EarlyStopping::new(cfg.patience, cfg.max_epochs);
            let mut best = net.clone();
            let mut log = Vec::new();
            loop {
                let epoch = stopper.epochs_run() + 1;
                let batch = draw(&speakers, skipped.clone(), material, seed, epoch);
                assert!(batch.is_balanced(), "epoch {epoch} batch is not gender/corpus balanced");
                let xs: Vec<Vec<f64>> = batch.excerpts.iter().map(|e| prep(&e.features)).collect();
                let ys: Vec<f64> = batch.excerpts.iter().map(|e| e.gender.target()).collect();
                let dropout = (cfg.dropout > 0.0).then_some((cfg.dropout, &mut dropout_rng));
                let (train_loss, grad) = net.loss_and_grad(&xs, &ys, dropout);
                net.step(&grad, cfg.learning_rate);
                let losses = gender_losses(&net, &dev_x, &dev_g);
                let objective = monitored_objective(&losses).map_err(|e| (seed, e))?;
                if !train_loss.is_finite() || !objective.is_finite() {
                    return Err((seed, TrainError::NonFiniteLoss { seed, epoch }));
                }
                log.push(EpochLog {
                    seed,
                    epoch,
                    train_loss,
                    loss_all: losses.loss_all(),
                    loss_f: losses.loss_f,
                    loss_m: losses.loss_m,
                    objective,
                });
                let (improved, stop) = stopper.observe(objective);
                if improved {
                    best = net.clone();
                }
                if stop {
                    break;
                }
            }
            Ok(SeedRun {
                net: best,
                objective: stopper.best(),
                summary: SeedSummary {
                    seed,
                    best_epoch: stopper.best_epoch(),
                    epochs_run: stopper.epochs_run(),
                    best_objective: Some(stopper.best()),
                    error: None,
                },
                log,
            })
        })
        .collect();

    let mut seeds = Vec::new();
    let mut log = Vec::new();
    let mut best: Option<SeedRun> = None;
    let mut failures = Vec::new();
    for run in runs {
        match run {
            Ok(mut r) => {
                seeds.push(r.summary.clone());
                log.append(&mut r.log);
                if best.as_ref().is_none_or(|b| r.objective < b.objective) {
                    best = Some(r);
                }
            }
            Err((seed, e)) => {
                log::warn!("seed {seed} aborted: {e}");
                failures.push(e.to_string());
                seeds.push(SeedSummary { seed, best_epoch: 0, epochs_run: 0, best_objective: None, error: Some(e.to_string()) });
            }
        }
    }
    let best = best.ok_or_else(|| TrainError::AllSeedsFailed(failures.join("; ")))?;
    let best_seed = best.summary.seed;
    let mut extra = BTreeMap::new();
    extra.insert("best_epoch".to_string(), best.summary.best_epoch.to_string());
    extra.insert("objective".to_string(), format!("{:.6}", best.objective));
    let metadata = ModelMetadata {
        training_corpus: train_idx.corpora().into_iter().collect::<Vec<_>>().join("+"),
        seed: best_seed,
        extra,
    };
    let bundle = ModelBundle::from_mlp(&best.net, feature_config, metadata, standardizer)?;
    Ok(TrainOutcome { bundle, best_seed, best_objective: best.objective, seeds, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::MlpSpec;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};

    fn index(corpus: &str, n_f: usize, n_m: usize) -> CorpusIndex {
        let mk = |g: Gender, i: usize| SpeakerEntry {
            key: SpeakerKey { corpus: corpus.into(), speaker_id: format!("{g}{i:04}") },
            gender: g,
            recordings: vec![format!("{g}{i}.wav")],
        };
        CorpusIndex::new((0..n_f).map(|i| mk(Gender::F, i)).chain((0..n_m).map(|i| mk(Gender::M, i))).collect()).unwrap()
    }

    fn mel_material(idx: &CorpusIndex, frames: usize, seed: u64) -> MaterialTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        idx.entries()
            .iter()
            .map(|e| {
                let shift = if e.gender == Gender::F { 1.0 } else { -1.0 };
                let v: Vec<f64> = (0..frames * 4).map(|_| shift + rng.random_range(-0.5..0.5)).collect();
                (e.key.clone(), SpeakerMaterial::Mel(vec![MelFrames::from_values(v, 4, 0.025, 0.01).unwrap()]))
            })
            .collect()
    }

    #[test]
    fn ina1_shape_balances() {
        let b = balance_by_gender(&index("INA1", 494, 1790), 1).unwrap();
        assert_eq!((b.count(Gender::F), b.count(Gender::M)), (494, 494));
        let orig = index("INA1", 494, 1790).keys();
        assert!(b.keys().is_subset(&orig));
    }

    #[test]
    fn balanced_input_unchanged() {
        let idx = index("c", 10, 10);
        assert_eq!(balance_by_gender(&idx, 3).unwrap(), idx);
    }

    #[test]
    fn missing_gender() {
        assert!(matches!(balance_by_gender(&index("c", 0, 50), 0), Err(TrainError::EmptyGender { gender: Gender::F, .. })));
    }

    #[test]
    fn equalize_to_minimum() {
        let out = equalize_corpora(&[index("INA1", 494, 494), index("CVFr", 758, 758)], 2);
        for c in &out {
            assert_eq!((c.count(Gender::F), c.count(Gender::M)), (494, 494));
        }
        let three = equalize_corpora(&[index("a", 100, 100), index("b", 80, 80), index("c", 60, 60)], 0);
        assert!(three.iter().all(|c| c.count(Gender::F) == 60 && c.count(Gender::M) == 60));
        let single = index("a", 7, 7);
        assert_eq!(equalize_corpora(std::slice::from_ref(&single), 0)[0], single);
    }

    #[test]
    fn split_counts_and_determinism() {
        let idx = index("c", 10, 10);
        let (tr, dv) = split_train_dev(&idx, 0.8, 5).unwrap();
        assert_eq!((tr.count(Gender::F), tr.count(Gender::M)), (8, 8));
        assert_eq!((dv.count(Gender::F), dv.count(Gender::M)), (2, 2));
        assert!(tr.keys().is_disjoint(&dv.keys()));
        assert_eq!(split_train_dev(&idx, 0.8, 5).unwrap(), (tr, dv));
        assert!(matches!(split_train_dev(&index("c", 4, 10), 0.8, 0), Err(TrainError::TooFewSpeakers { .. })));
    }

    #[test]
    fn protocol_split_two_corpora() {
        let both = merge(&[index("INA1", 49, 179), index("CVFr", 75, 76)]).unwrap();
        let (tr, dv) = protocol_split(&both, 0.8, 9).unwrap();
        let mut all = tr.cell_counts();
        for (k, v) in dv.cell_counts() {
            *all.entry(k).or_default() += v;
        }
        assert!(all.values().all(|&n| n == 49), "{all:?}");
        assert!(tr.keys().is_disjoint(&dv.keys()));
    }

    proptest! {
        #[test]
        fn split_is_disjoint(n_f in 5usize..40, n_m in 5usize..40, seed in any::<u64>()) {
            let idx = index("c", n_f, n_m);
            let (tr, dv) = split_train_dev(&idx, 0.8, seed).unwrap();
            prop_assert!(tr.keys().is_disjoint(&dv.keys()));
            prop_assert_eq!(tr.len() + dv.len(), idx.len());
            for (g, n) in [(Gender::F, n_f), (Gender::M, n_m)] {
                prop_assert!((tr.count(g) as f64 - 0.8 * n as f64).abs() <= 1.0);
            }
        }

        #[test]
        fn objective_bounds(lf in 0.0f64..5.0, lm in 0.0f64..5.0, nf in 1usize..50, nm in 1usize..50) {
            let l = GenderLosses { loss_f: lf, loss_m: lm, n_f: nf, n_m: nm };
            let obj = monitored_objective(&l).unwrap();
            prop_assert!(obj >= l.loss_all() - 1e-12);
            prop_assert_eq!(obj == l.loss_all(), lf == lm);
            let swapped = GenderLosses { loss_f: lm, loss_m: lf, n_f: nm, n_m: nf };
            prop_assert!((monitored_objective(&swapped).unwrap() - obj).abs() < 1e-12);
        }
    }

    #[test]
    fn objective_examples() {
        let eq = GenderLosses { loss_f: 0.3, loss_m: 0.3, n_f: 4, n_m: 4 };
        assert!((monitored_objective(&eq).unwrap() - 0.3).abs() < 1e-12);
        let gap = GenderLosses { loss_f: 0.2, loss_m: 0.4, n_f: 4, n_m: 4 };
        assert!((monitored_objective(&gap).unwrap() - 0.5).abs() < 1e-12);
        let empty = GenderLosses { loss_f: 0.2, loss_m: 0.0, n_f: 4, n_m: 0 };
        assert!(matches!(monitored_objective(&empty), Err(TrainError::EmptyGender { .. })));
    }

    #[test]
    fn constant_objective_stops_at_51() {
        let mut es = EarlyStopping::new(50, 160);
        let mut epoch = 0;
        loop {
            epoch += 1;
            if es.observe(0.7).1 {
                break;
            }
        }
        assert_eq!(epoch, 51);
        assert_eq!(es.best_epoch(), 1);
    }

    #[test]
    fn improving_objective_runs_to_max() {
        let mut es = EarlyStopping::new(50, 160);
        let mut epoch = 0;
        loop {
            epoch += 1;
            if es.observe(1.0 / epoch as f64).1 {
                break;
            }
        }
        assert_eq!(epoch, 160);
    }

    #[test]
    fn epoch_balance() {
        let idx = index("c", 10, 10);
        let mat = mel_material(&idx, 400, 0);
        let b = sample_epoch(&idx, &mat, 1, 1).unwrap();
        assert_eq!(b.excerpts.len(), 20);
        assert!(b.is_balanced());
        let speakers: BTreeSet<_> = b.excerpts.iter().map(|e| e.speaker.clone()).collect();
        assert_eq!(speakers.len(), 20);

        let two = merge(&[index("a", 5, 5), index("b", 5, 5)]).unwrap();
        let mat2 = mel_material(&two, 400, 1);
        let b2 = sample_epoch(&two, &mat2, 1, 1).unwrap();
        assert_eq!(b2.excerpts.len(), 20);
        assert!(b2.cell_counts().values().all(|&n| n == 5));
    }

    #[test]
    fn epochs_draw_new_offsets() {
        let idx = index("c", 3, 3);
        let mat = mel_material(&idx, 1000, 0);
        let first = sample_epoch(&idx, &mat, 9, 1).unwrap();
        let moved = (2..=100).all(|e| {
            let b = sample_epoch(&idx, &mat, 9, e).unwrap();
            b.excerpts.iter().zip(&first.excerpts).any(|(x, y)| x.start_frame != y.start_frame)
        });
        assert!(moved);
        assert_eq!(sample_epoch(&idx, &mat, 9, 4).unwrap(), sample_epoch(&idx, &mat, 9, 4).unwrap());
    }

    #[test]
    fn short_speaker_drops_partner() {
        let idx = index("c", 6, 6);
        let mut mat = mel_material(&idx, 400, 0);
        let short = idx.entries().iter().find(|e| e.gender == Gender::F).unwrap().key.clone();
        mat.insert(short.clone(), SpeakerMaterial::Mel(vec![MelFrames::from_values(vec![0.0; 4 * 100], 4, 0.025, 0.01).unwrap()]));
        let b = sample_epoch(&idx, &mat, 0, 1).unwrap();
        assert_eq!(b.excerpts.len(), 10);
        assert!(b.is_balanced());
        assert!(b.skipped.contains(&short));
        assert_eq!(b.skipped.len(), 2);
    }

    fn separable_setup() -> (CorpusIndex, CorpusIndex, MaterialTable) {
        let idx = index("syn", 30, 30);
        let mat = mel_material(&idx, 300, 7);
        let (tr, dv) = split_train_dev(&idx, 0.8, 1).unwrap();
        (tr, dv, mat)
    }

    #[test]
    fn trains_separable_data() {
        let (tr, dv, mat) = separable_setup();
        let spec = ArchSpec::Mlp(MlpSpec { input_dim: 8, hidden: vec![32] });
        let cfg = TrainConfig { max_epochs: 40, patience: 20, n_seeds: 2, ..Default::default() };
        let out = train(&spec, FeatureConfig::pooled_stats(4), &tr, &dv, &mat, &cfg).unwrap();
        let dev = dev_excerpts(&dv, &mat);
        let correct = dev
            .iter()
            .filter(|e| {
                let p = out.bundle.forward(crate::classifier::ModelInput::Vector(&e.features)).unwrap();
                (p >= 0.5) == (e.gender == Gender::F)
            })
            .count();
        assert!(correct as f64 / dev.len() as f64 >= 0.95);
        assert_eq!(out.seeds.len(), 2);
        assert!(out.log.iter().all(|r| r.objective >= r.loss_all - 1e-12));

        let again = train(&spec, FeatureConfig::pooled_stats(4), &tr, &dv, &mat, &cfg).unwrap();
        assert_eq!(again.bundle, out.bundle);
        assert_eq!(again.log, out.log);
    }

    #[test]
    fn rejects_cnn_and_overlap() {
        let (tr, dv, mat) = separable_setup();
        let cnn = ArchSpec::Tpcnn(crate::classifier::TpcnnSpec {
            n_conv: 2,
            n_dense: 0,
            n_filters: 32,
            n_neurons: 32,
            kernel_time: 3,
            kernel_freq: 3,
            pooling: vec![crate::classifier::Pooling::Time],
            n_time: 150,
            n_bands: 24,
        });
        let cfg = TrainConfig::default();
        assert!(matches!(train(&cnn, FeatureConfig::mel_patch(24), &tr, &dv, &mat, &cfg), Err(TrainError::UnsupportedArch)));
        let spec = ArchSpec::Mlp(MlpSpec { input_dim: 8, hidden: vec![32] });
        assert!(matches!(train(&spec, FeatureConfig::pooled_stats(4), &tr, &tr, &mat, &cfg), Err(TrainError::InvalidConfig(_))));
    }

    #[test]
    fn non_finite_seed_aborts() {
        let (tr, dv, mat) = separable_setup();
        let spec = ArchSpec::Mlp(MlpSpec { input_dim: 8, hidden: vec![32] });
        let cfg = TrainConfig { learning_rate: 1e300, max_epochs: 5, patience: 5, n_seeds: 2, ..Default::default() };
        let r = train(&spec, FeatureConfig::pooled_stats(4), &tr, &dv, &mat, &cfg);
        assert!(matches!(r, Err(TrainError::AllSeedsFailed(_))));
    }

    #[test]
    fn index_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("idx.csv");
        std::fs::write(&p, "speaker_id,gender,corpus_tag,wav_path\ns1,F,c,a.wav\ns1,F,c,b.wav\ns2,M,c,c.wav\n").unwrap();
        let (idx, kind) = CorpusIndex::load_csv(&p).unwrap();
        assert_eq!(kind, RecordingKind::WavPath);
        assert_eq!(idx.len(), 2);
        assert_eq!(idx.entries()[0].recordings.len(), 2);
        std::fs::write(&p, "speaker_id,gender,corpus_tag,wav_path\ns1,X,c,a.wav\n").unwrap();
        assert!(matches!(CorpusIndex::load_csv(&p), Err(TrainError::Csv { line: 2, .. })));
    }

    #[test]
    fn log_is_jsonl() {
        let log = vec![EpochLog { seed: 0, epoch: 1, train_loss: 0.7, loss_all: 0.6, loss_f: 0.5, loss_m: 0.7, objective: 0.8 }];
        let mut buf = Vec::new();
        write_log_jsonl(&log, &mut buf).unwrap();
        let line = String::from_utf8(buf).unwrap();
        let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
        for k in ["epoch", "loss_all", "loss_f", "loss_m", "objective"] {
            assert!(v.get(k).is_some());
        }
    }
}
