//! Command-line verbs. Validation problems (missing files, bad CSV rows,
//! unusable input) exit with 2, everything else with 1.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use vfp_core::calibration::{fit_isotonic, CalibrationError, CalibrationMap};
use vfp_core::classifier::{load_external_embeddings, ArchSpec, FeatureConfig, ModelBundle, ModelError};
use vfp_core::metrics::{evaluate_bgc, evaluate_vfp, AgeBand, BgcRecord, VfpOutcome};
use vfp_core::perception::{self, ListenerGender, PerceptionError, SpeakerCategory};
use vfp_core::pipeline::{estimate_vfp, PipelineConfig, PipelineError, VfpResult};
use vfp_core::trainer::{self, CorpusIndex, RecordingKind, TrainConfig, TrainError};
use vfp_core::{audio, Gender};

use crate::config::ServiceConfig;

#[derive(Debug, Parser)]
#[command(name = "vfp", version, about = "Voice femininity percentage estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate the VFP of one WAV recording.
    Analyze {
        wav: PathBuf,
        #[arg(long)]
        json: bool,
        #[arg(long, env = "VFP_MODEL", default_value = "model.vfpm")]
        model: PathBuf,
        #[arg(long, env = "VFP_CALIB", default_value = "calibration.json")]
        calib: PathBuf,
    },
    /// Fit an isotonic map from a `raw_score,vfp` CSV.
    Calibrate {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an MLP from a corpus index with the balanced protocol.
    Train {
        #[arg(long)]
        index: PathBuf,
        /// Architecture as a JSON file or inline JSON.
        #[arg(long)]
        arch: String,
        #[arg(long)]
        out: PathBuf,
        /// Embedding table, required when the index lists embedding ids.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Per-epoch log as JSON lines.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long, default_value_t = 50)]
        patience: usize,
        #[arg(long, default_value_t = 160)]
        max_epochs: usize,
        #[arg(long, default_value_t = 0.1)]
        learning_rate: f64,
    },
    /// Accuracy tables on a labelled test set.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        /// CSV `recording_id,speaker_id,gender,age,wav_path[,category,perceptual_vfp]`.
        #[arg(long)]
        testset: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Listener answer statistics.
    Perception {
        #[arg(long)]
        answers: PathBuf,
        #[arg(long)]
        speakers: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Internal(_) => 1,
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

fn internal(e: impl std::fmt::Display) -> CliError {
    CliError::Internal(e.to_string())
}

impl From<vfp_core::Error> for CliError {
    fn from(e: vfp_core::Error) -> Self {
        use vfp_core::Error as E;
        let bad_input = match &e {
            E::Audio(_) | E::Metrics(_) => true,
            E::Pipeline(p) => matches!(p, PipelineError::InsufficientSpeech { .. } | PipelineError::DimensionMismatch(_)),
            E::Model(m) => !matches!(m, ModelError::Io(_)),
            E::Calibration(c) => !matches!(c, CalibrationError::Io(_)),
            E::Perception(p) => !matches!(p, PerceptionError::Io(_)),
            E::Training(t) => matches!(
                t,
                TrainError::Csv { .. }
                    | TrainError::EmptyGender { .. }
                    | TrainError::TooFewSpeakers { .. }
                    | TrainError::DuplicateSpeaker { .. }
                    | TrainError::MissingMaterial(_)
                    | TrainError::DimensionMismatch { .. }
                    | TrainError::InvalidConfig(_)
                    | TrainError::UnsupportedArch
            ),
            _ => false,
        };
        if bad_input {
            CliError::Validation(e.to_string())
        } else {
            CliError::Internal(e.to_string())
        }
    }
}

fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Validation(format!("file not found: {}", path.display())))
    }
}

pub fn run(cli: Cli, out: &mut String) -> Result<(), CliError> {
    match cli.command {
        Command::Analyze { wav, json, model, calib } => analyze(&wav, &model, &calib, json, out),
        Command::Calibrate { pairs, out: dest } => calibrate(&pairs, &dest, out),
        Command::Train { index, arch, out: dest, embeddings, log, seed, seeds, patience, max_epochs, learning_rate } => {
            let cfg =
                TrainConfig { patience, max_epochs, n_seeds: seeds, learning_rate, base_seed: seed, ..Default::default() };
            train(&index, &arch, &dest, embeddings.as_deref(), log.as_deref(), &cfg, out)
        }
        Command::Evaluate { model, calib, testset, json } => evaluate(&model, &calib, &testset, json, out),
        Command::Perception { answers, speakers, json } => perception_report(&answers, &speakers, json, out),
        Command::Serve { config } => serve(config.as_deref()),
    }
}

fn load_model_and_map(model: &Path, calib: &Path) -> Result<(ModelBundle, CalibrationMap), CliError> {
    require_file(model)?;
    require_file(calib)?;
    let bundle = ModelBundle::load(model).map_err(vfp_core::Error::from)?;
    let map = CalibrationMap::load(calib).map_err(vfp_core::Error::from)?;
    if !map.is_fitted() {
        return Err(invalid(format!("{}: {}", calib.display(), CalibrationError::UnfittedMap)));
    }
    Ok((bundle, map))
}

fn analyze_file(wav: &Path, bundle: &ModelBundle, map: &CalibrationMap, cfg: &PipelineConfig) -> Result<VfpResult, CliError> {
    require_file(wav)?;
    let buf = audio::read_wav_file(wav).map_err(vfp_core::Error::from)?;
    Ok(estimate_vfp(&buf, bundle, map, cfg).map_err(vfp_core::Error::from)?)
}

fn opt(v: Option<f64>, unit: &str) -> String {
    v.filter(|x| x.is_finite()).map_or("n/a".into(), |x| format!("{x:.2}{unit}"))
}

pub fn render_result(r: &VfpResult) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "VFP            {:.1} %", r.vfp);
    let _ = writeln!(s, "raw score      {:.3}", r.raw_score);
    let _ = writeln!(s, "windows        {}", r.n_windows);
    let _ = writeln!(s, "speech ratio   {:.2}", r.speech_ratio);
    let _ = writeln!(s, "median F0      {} ({})", opt(r.f0_median_hz, " Hz"), opt(r.f0_median_st, " ST"));
    let _ = writeln!(s, "VTL            {}", opt(r.vtl_cm, " cm"));
    for w in &r.warnings {
        let _ = writeln!(s, "warning: {w}");
    }
    s
}

fn analyze(wav: &Path, model: &Path, calib: &Path, json: bool, out: &mut String) -> Result<(), CliError> {
    require_file(wav)?;
    let (bundle, map) = load_model_and_map(model, calib)?;
    let r = analyze_file(wav, &bundle, &map, &PipelineConfig::default())?;
    if json {
        out.push_str(&serde_json::to_string_pretty(&r).map_err(internal)?);
        out.push('\n');
    } else {
        out.push_str(&render_result(&r));
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct PairRow {
    raw_score: f64,
    vfp: f64,
}

/// Reads `raw_score,vfp` rows.
pub fn read_pairs(path: &Path) -> Result<Vec<(f64, f64)>, CliError> {
    require_file(path)?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(invalid)?;
    let mut pairs = Vec::new();
    for (i, row) in reader.deserialize::<PairRow>().enumerate() {
        let row = row.map_err(|e| invalid(format!("{}:{}: {e}", path.display(), i + 2)))?;
        pairs.push((row.raw_score, row.vfp));
    }
    Ok(pairs)
}

fn calibrate(pairs: &Path, dest: &Path, out: &mut String) -> Result<(), CliError> {
    let pairs = read_pairs(pairs)?;
    let map = fit_isotonic(&pairs).map_err(vfp_core::Error::from)?;
    map.save(dest).map_err(vfp_core::Error::from)?;
    let _ = writeln!(out, "wrote {} knots to {}", map.knots.len(), dest.display());
    Ok(())
}

fn parse_arch(arg: &str) -> Result<ArchSpec, CliError> {
    let text = if arg.trim_start().starts_with('{') {
        arg.to_string()
    } else {
        let p = Path::new(arg);
        require_file(p)?;
        std::fs::read_to_string(p).map_err(internal)?
    };
    let spec: ArchSpec = serde_json::from_str(&text).map_err(|e| invalid(format!("architecture: {e}")))?;
    spec.validate().map_err(vfp_core::Error::from)?;
    Ok(spec)
}

fn train(
    index: &Path,
    arch: &str,
    dest: &Path,
    embeddings: Option<&Path>,
    log: Option<&Path>,
    cfg: &TrainConfig,
    out: &mut String,
) -> Result<(), CliError> {
    require_file(index)?;
    let spec = parse_arch(arch)?;
    let ArchSpec::Mlp(mlp) = &spec else {
        return Err(invalid(TrainError::UnsupportedArch));
    };
    let (idx, kind) = CorpusIndex::load_csv(index).map_err(vfp_core::Error::from)?;
    let (train_idx, dev_idx) = trainer::protocol_split(&idx, 0.8, cfg.base_seed).map_err(vfp_core::Error::from)?;
    let used = trainer::merge(&[train_idx.clone(), dev_idx.clone()]).map_err(vfp_core::Error::from)?;
    let (material, features) = match kind {
        RecordingKind::EmbeddingId => {
            let path = embeddings.ok_or_else(|| invalid("the index lists embedding ids; pass --embeddings"))?;
            require_file(path)?;
            let table = load_external_embeddings(path).map_err(vfp_core::Error::from)?;
            (trainer::embedding_material(&used, &table).map_err(vfp_core::Error::from)?, FeatureConfig::external())
        }
        RecordingKind::WavPath => {
            if mlp.input_dim % 2 != 0 {
                return Err(invalid(format!("input_dim {} must be twice the band count", mlp.input_dim)));
            }
            let features = FeatureConfig::pooled_stats(mlp.input_dim / 2);
            let base = index.parent().unwrap_or(Path::new("."));
            let vad = PipelineConfig::default().vad;
            (trainer::load_wav_material(&used, base, features.n_bands, &vad)?, features)
        }
    };
    let outcome = trainer::train(&spec, features, &train_idx, &dev_idx, &material, cfg).map_err(vfp_core::Error::from)?;
    outcome.bundle.save(dest).map_err(vfp_core::Error::from)?;
    if let Some(p) = log {
        let f = std::fs::File::create(p).map_err(internal)?;
        trainer::write_log_jsonl(&outcome.log, std::io::BufWriter::new(f)).map_err(internal)?;
    }
    let _ = writeln!(out, "train {} speakers, dev {} speakers", train_idx.len(), dev_idx.len());
    for s in &outcome.seeds {
        match &s.error {
            Some(e) => _ = writeln!(out, "seed {:>3}: failed: {e}", s.seed),
            None => _ = writeln!(
                out,
                "seed {:>3}: best epoch {:>3} of {:>3}, objective {}",
                s.seed,
                s.best_epoch,
                s.epochs_run,
                s.best_objective.map_or("n/a".into(), |o| format!("{o:.4}"))
            ),
        }
    }
    let _ = writeln!(out, "kept seed {} ({}), wrote {}", outcome.best_seed, outcome.bundle.version_tag(), dest.display());
    Ok(())
}

#[derive(Debug, Deserialize)]
struct TestRow {
    recording_id: String,
    speaker_id: String,
    gender: String,
    age: f64,
    wav_path: PathBuf,
    #[serde(default)]
    category: Option<String>,
    #[serde(default)]
    perceptual_vfp: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct EvaluationOutput {
    pub report: vfp_core::metrics::EvalReport,
    pub recordings: Vec<BgcRecord>,
    pub warnings: Vec<String>,
}

fn evaluate(model: &Path, calib: &Path, testset: &Path, json: bool, out: &mut String) -> Result<(), CliError> {
    require_file(testset)?;
    let (bundle, map) = load_model_and_map(model, calib)?;
    let base = testset.parent().unwrap_or(Path::new("."));
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(testset).map_err(invalid)?;
    let cfg = PipelineConfig { diagnostics: false, ..Default::default() };
    let mut records = Vec::new();
    let mut per_speaker: BTreeMap<String, (Option<SpeakerCategory>, Option<f64>, Vec<f64>)> = BTreeMap::new();
    for (i, row) in reader.deserialize::<TestRow>().enumerate() {
        let line = i + 2;
        let at = |e: String| invalid(format!("{}:{line}: {e}", testset.display()));
        let row = row.map_err(|e| at(e.to_string()))?;
        let gender: Gender = row.gender.parse().map_err(at)?;
        let category = row.category.as_deref().filter(|c| !c.is_empty()).map(str::parse).transpose().map_err(at)?;
        let r = analyze_file(&base.join(&row.wav_path), &bundle, &map, &cfg)
            .map_err(|e| at(format!("{}: {e}", row.wav_path.display())))?;
        let entry = per_speaker.entry(row.speaker_id.clone()).or_insert((category, row.perceptual_vfp, Vec::new()));
        entry.2.push(r.vfp);
        records.push(BgcRecord {
            recording_id: row.recording_id,
            speaker_id: row.speaker_id,
            gender: Some(gender),
            age_band: AgeBand::from_age(row.age),
            p_female: r.raw_score,
        });
    }
    let mut report = evaluate_bgc(&records).map_err(vfp_core::Error::from)?;
    let mut warnings = Vec::new();
    let outcomes: Option<Vec<VfpOutcome>> = per_speaker
        .iter()
        .map(|(id, (cat, target, vfps))| {
            Some(VfpOutcome {
                speaker_id: id.clone(),
                category: (*cat)?,
                perceptual_vfp: (*target)?,
                predicted_vfp: vfps.iter().sum::<f64>() / vfps.len() as f64,
            })
        })
        .collect();
    match outcomes {
        Some(o) => match evaluate_vfp(&o) {
            Ok((cis, tf)) => {
                report.r2_cis = Some(cis);
                report.r2_tf = Some(tf);
            }
            Err(e) => warnings.push(format!("VFP R2 unavailable: {e}")),
        },
        None => warnings.push("VFP R2 skipped: category or perceptual_vfp missing".into()),
    }
    if json {
        let doc = EvaluationOutput { report, recordings: records, warnings };
        out.push_str(&serde_json::to_string_pretty(&doc).map_err(internal)?);
        out.push('\n');
    } else {
        let name = model.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
        out.push_str(&report.render(&name));
        for w in &warnings {
            let _ = writeln!(out, "warning: {w}");
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct PerceptionReport {
    pub table: perception::CategoryTable,
    pub speakers: Vec<perception::SpeakerPerception>,
    pub rt_parabola: Option<perception::Parabola>,
    pub listener_mean_f: Option<f64>,
    pub listener_mean_m: Option<f64>,
    pub rank_sum: Option<perception::RankSumResult>,
    pub warnings: Vec<String>,
}

pub fn perception_stats(answers: &Path, speakers: &Path) -> Result<PerceptionReport, CliError> {
    require_file(answers)?;
    require_file(speakers)?;
    let answers = perception::load_answers(answers).map_err(vfp_core::Error::from)?;
    let meta = perception::load_speakers(speakers).map_err(vfp_core::Error::from)?;
    let table = perception::category_stats(&answers, &meta).map_err(vfp_core::Error::from)?;
    let per = perception::per_speaker(&answers);
    let mut warnings = Vec::new();
    let points: Vec<(f64, f64)> = per.iter().map(|s| (s.vfp, s.mean_rt)).collect();
    let rt_parabola = perception::fit_rt_parabola(&points)
        .map_err(|e| warnings.push(format!("RT parabola unavailable: {e}")))
        .ok();
    let listeners = perception::per_listener(&answers);
    let group = |g: ListenerGender| -> Vec<f64> {
        listeners.iter().filter(|l| l.listener_gender == g).map(|l| l.mean_judgment).collect()
    };
    let (f, m) = (group(ListenerGender::F), group(ListenerGender::M));
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let rank_sum = perception::wilcoxon_rank_sum(&f, &m)
        .map_err(|e| warnings.push(format!("listener rank-sum test unavailable: {e}")))
        .ok();
    Ok(PerceptionReport {
        listener_mean_f: mean(&f),
        listener_mean_m: mean(&m),
        table,
        speakers: per,
        rt_parabola,
        rank_sum,
        warnings,
    })
}

fn perception_report(answers: &Path, speakers: &Path, json: bool, out: &mut String) -> Result<(), CliError> {
    let rep = perception_stats(answers, speakers)?;
    if json {
        out.push_str(&serde_json::to_string_pretty(&rep).map_err(internal)?);
        out.push('\n');
        return Ok(());
    }
    out.push_str(&rep.table.render());
    if let Some(p) = &rep.rt_parabola {
        let _ = writeln!(out, "\nRT = {:.4} + {:.4e} v + {:.4e} v^2", p.a, p.b, p.c);
        match p.vertex {
            Some(v) => _ = writeln!(out, "RT vertex at VFP {v:.1}"),
            None => _ = writeln!(out, "RT vertex undefined (linear fit)"),
        }
    }
    if let (Some(f), Some(m)) = (rep.listener_mean_f, rep.listener_mean_m) {
        let _ = writeln!(out, "\nmean judgment: female listeners {f:.3}, male listeners {m:.3}");
    }
    if let Some(w) = &rep.rank_sum {
        let _ = writeln!(out, "rank-sum: U = {:.1}, z = {:.3}, p = {:.4}", w.u_a, w.z, w.p_value);
    }
    for w in &rep.warnings {
        let _ = writeln!(out, "warning: {w}");
    }
    Ok(())
}

fn serve(config: Option<&Path>) -> Result<(), CliError> {
    if let Some(p) = config {
        require_file(p)?;
    }
    let cfg = ServiceConfig::load(config).map_err(invalid)?;
    cfg.validate().map_err(invalid)?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(internal)?;
    rt.block_on(crate::http::serve(cfg)).map_err(|e| match e {
        crate::http::ServeError::Config(c) => invalid(c),
        other => internal(other),
    })
}
