//! End-to-end VFP estimation: VAD, speech-only log-Mel patches, per-window
//! scoring, averaging, and isotonic calibration. Also the F0 / VTL
//! baselines and the linear SVM behind the combined one.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acoustics::{self, AcousticsError, VtlConfig};
use crate::audio::AudioBuffer;
use crate::calibration::{CalibrationError, CalibrationMap};
use crate::classifier::{sigmoid, GenderScore, InputKind, ModelBundle, ModelError, ModelInput};
use crate::features::{make_patches, FeatureError, MelAnalyzer, MelFrames, FRAME_HOP_S, FRAME_LEN_S, PATCH_FRAMES};
use crate::vad::{self, SpeechSegment, VadConfig};
use crate::Gender;

/// Minimum detected speech, in seconds: one full patch.
pub fn min_speech_s() -> f64 {
    (PATCH_FRAMES - 1) as f64 * FRAME_HOP_S + FRAME_LEN_S
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("insufficient speech: {speech_s:.3} s detected, {needed_s:.3} s needed")]
    InsufficientSpeech { speech_s: f64, needed_s: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("linear SVM needs both classes")]
    SingleClass,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Acoustics(#[from] AcousticsError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub vad: VadConfig,
    /// Patch hop in frames.
    pub patch_hop: usize,
    /// Compute F0 and VTL alongside the classifier.
    pub diagnostics: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { vad: VadConfig::default(), patch_hop: crate::features::INFERENCE_PATCH_HOP, diagnostics: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VfpResult {
    pub vfp: f64,
    pub raw_score: f64,
    pub n_windows: usize,
    pub window_scores: Vec<GenderScore>,
    pub speech_ratio: f64,
    pub f0_median_st: Option<f64>,
    pub f0_median_hz: Option<f64>,
    pub vtl_cm: Option<f64>,
    pub warnings: Vec<String>,
}

/// Speech-only material extracted from one recording.
#[derive(Debug, Clone)]
pub struct SpeechFeatures {
    pub segments: Vec<SpeechSegment>,
    /// Log-Mel frames whose centres fall in speech, concatenated.
    pub mel: MelFrames,
    /// Fraction of all frames kept.
    pub speech_ratio: f64,
}

impl SpeechFeatures {
    /// Span covered by the retained frames.
    pub fn speech_s(&self) -> f64 {
        match self.mel.n_frames() {
            0 => 0.0,
            n => (n - 1) as f64 * FRAME_HOP_S + FRAME_LEN_S,
        }
    }
}

pub fn speech_features(buf: &AudioBuffer, n_bands: usize, vad_cfg: &VadConfig) -> Result<SpeechFeatures, PipelineError> {
    let segments = vad::detect_speech(buf, vad_cfg);
    let analyzer = MelAnalyzer::new(n_bands, buf.sample_rate())?;
    let all = match analyzer.analyze(buf) {
        Ok(m) => m,
        Err(FeatureError::SignalTooShort { .. }) => MelFrames::empty(n_bands),
        Err(e) => return Err(e.into()),
    };
    let mel = vad::apply_segments(&all, &segments);
    let speech_ratio = if all.n_frames() == 0 { 0.0 } else { mel.n_frames() as f64 / all.n_frames() as f64 };
    Ok(SpeechFeatures { segments, mel, speech_ratio })
}

/// Mean window score and its calibrated VFP.
pub fn aggregate(window_scores: &[GenderScore], map: &CalibrationMap) -> Result<(f64, f64), PipelineError> {
    if window_scores.is_empty() {
        return Err(PipelineError::InsufficientSpeech { speech_s: 0.0, needed_s: min_speech_s() });
    }
    let raw = window_scores.iter().map(|s| s.p_female).sum::<f64>() / window_scores.len() as f64;
    Ok((raw, map.predict(raw)?))
}

/// Scores every patch of the speech-only frames.
pub fn score_windows(mel: &MelFrames, model: &ModelBundle, patch_hop: usize) -> Result<Vec<GenderScore>, PipelineError> {
    let patches = make_patches(mel, PATCH_FRAMES, patch_hop)?;
    patches
        .par_iter()
        .map(|p| Ok(GenderScore { t_start: p.t_start(), p_female: model.forward(ModelInput::Patch(p))? }))
        .collect()
}

pub fn estimate_vfp(
    buf: &AudioBuffer,
    model: &ModelBundle,
    map: &CalibrationMap,
    cfg: &PipelineConfig,
) -> Result<VfpResult, PipelineError> {
    if !map.is_fitted() {
        return Err(CalibrationError::UnfittedMap.into());
    }
    let fc = model.feature_config();
    if fc.input == InputKind::ExternalEmbedding {
        return Err(PipelineError::DimensionMismatch(
            "model consumes external embeddings, which cannot be computed from audio here".into(),
        ));
    }
    let speech = speech_features(buf, fc.n_bands, &cfg.vad)?;
    if speech.mel.n_frames() < PATCH_FRAMES {
        return Err(PipelineError::InsufficientSpeech { speech_s: speech.speech_s(), needed_s: min_speech_s() });
    }
    let window_scores = score_windows(&speech.mel, model, cfg.patch_hop)?;
    let (raw_score, vfp) = aggregate(&window_scores, map)?;
    let mut result = VfpResult {
        vfp,
        raw_score,
        n_windows: window_scores.len(),
        window_scores,
        speech_ratio: speech.speech_ratio,
        f0_median_st: None,
        f0_median_hz: None,
        vtl_cm: None,
        warnings: Vec::new(),
    };
    if cfg.diagnostics {
        let audio = vad::speech_audio(buf, &speech.segments);
        let d = diagnostics(&audio);
        result.f0_median_hz = d.f0_hz;
        result.f0_median_st = d.f0_hz.map(acoustics::hz_to_st);
        result.vtl_cm = d.vtl_cm;
        result.warnings = d.warnings;
    }
    Ok(result)
}

struct Diagnostics {
    f0_hz: Option<f64>,
    vtl_cm: Option<f64>,
    warnings: Vec<String>,
}

fn diagnostics(speech: &AudioBuffer) -> Diagnostics {
    let mut warnings = Vec::new();
    let track = acoustics::estimate_f0_track(speech);
    let f0_hz = match track.median_hz() {
        Ok(f) => Some(f),
        Err(e) => {
            warnings.push(format!("f0: {e}"));
            None
        }
    };
    let vtl_cm = match acoustics::estimate_formants(speech, &track) {
        Ok(fmt) => Some(acoustics::estimate_vtl(&fmt, &VtlConfig::default())),
        Err(e) => {
            warnings.push(format!("vtl: {e}"));
            None
        }
    };
    Diagnostics { f0_hz, vtl_cm, warnings }
}

/// Median F0 (ST) and VTL (cm) of the speech in a recording.
pub fn acoustic_features(buf: &AudioBuffer, vad_cfg: &VadConfig) -> Result<(f64, f64), PipelineError> {
    let audio = vad::speech_audio(buf, &vad::detect_speech(buf, vad_cfg));
    let track = acoustics::estimate_f0_track(&audio);
    let st = acoustics::median_f0_st(&track)?;
    let fmt = acoustics::estimate_formants(&audio, &track)?;
    Ok((st, acoustics::estimate_vtl(&fmt, &VtlConfig::default())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    F0,
    Vtl,
    F0Vtl,
}

impl std::str::FromStr for Baseline {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "f0" => Ok(Baseline::F0),
            "vtl" => Ok(Baseline::Vtl),
            "f0vtl" => Ok(Baseline::F0Vtl),
            other => Err(format!("unknown baseline '{other}' (expected f0, vtl or f0vtl)")),
        }
    }
}

/// Linear SVM on standardized `(f0_st, vtl_cm)`; positive decision means female.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSvm {
    pub weights: [f64; 2],
    pub bias: f64,
    pub mean: [f64; 2],
    pub scale: [f64; 2],
}

impl LinearSvm {
    pub fn decision(&self, f0_st: f64, vtl_cm: f64) -> f64 {
        let z = [(f0_st - self.mean[0]) / self.scale[0], (vtl_cm - self.mean[1]) / self.scale[1]];
        self.weights[0] * z[0] + self.weights[1] * z[1] + self.bias
    }

    pub fn predict(&self, f0_st: f64, vtl_cm: f64) -> Gender {
        if self.decision(f0_st, vtl_cm) >= 0.0 {
            Gender::F
        } else {
            Gender::M
        }
    }
}

pub const SVM_LAMBDA: f64 = 0.01;
pub const SVM_EPOCHS: usize = 200;
/// Offset in the `1 / (lambda (t + t0))` step schedule, keeps early steps near 1.
const SVM_T0: f64 = 100.0;

/// L2-regularized hinge loss, full-batch subgradient descent from zero.
pub fn fit_linear_svm(features: &[(f64, f64)], labels: &[Gender]) -> Result<LinearSvm, PipelineError> {
    if features.len() != labels.len() {
        return Err(PipelineError::DimensionMismatch(format!("{} feature rows, {} labels", features.len(), labels.len())));
    }
    if !labels.contains(&Gender::F) || !labels.contains(&Gender::M) {
        return Err(PipelineError::SingleClass);
    }
    let n = features.len() as f64;
    let col = |k: usize| features.iter().map(move |f| if k == 0 { f.0 } else { f.1 });
    let mut mean = [0.0; 2];
    let mut scale = [1.0; 2];
    for k in 0..2 {
        mean[k] = col(k).sum::<f64>() / n;
        let sd = (col(k).map(|v| (v - mean[k]).powi(2)).sum::<f64>() / n).sqrt();
        scale[k] = if sd > 1e-12 { sd } else { 1.0 };
    }
    let z: Vec<[f64; 2]> = features.iter().map(|f| [(f.0 - mean[0]) / scale[0], (f.1 - mean[1]) / scale[1]]).collect();
    let y: Vec<f64> = labels.iter().map(|g| if *g == Gender::F { 1.0 } else { -1.0 }).collect();

    let (mut w, mut b) = ([0.0f64; 2], 0.0f64);
    for t in 1..=SVM_EPOCHS {
        let eta = 1.0 / (SVM_LAMBDA * (t as f64 + SVM_T0));
        let mut gw = [SVM_LAMBDA * w[0], SVM_LAMBDA * w[1]];
        let mut gb = 0.0;
        for (zi, &yi) in z.iter().zip(&y) {
            if yi * (w[0] * zi[0] + w[1] * zi[1] + b) < 1.0 {
                gw[0] -= yi * zi[0] / n;
                gw[1] -= yi * zi[1] / n;
                gb -= yi / n;
            }
        }
        w[0] -= eta * gw[0];
        w[1] -= eta * gw[1];
        b -= eta * gb;
    }
    Ok(LinearSvm { weights: w, bias: b, mean, scale })
}

/// Rescaling ranges (from calibration-fit data) and the optional SVM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineParams {
    pub f0_range_st: (f64, f64),
    pub vtl_range_cm: (f64, f64),
    pub svm: Option<LinearSvm>,
}

impl BaselineParams {
    /// Ranges spanning the given `(f0_st, vtl_cm)` features.
    pub fn from_features(features: &[(f64, f64)], svm: Option<LinearSvm>) -> Self {
        let range = |it: &mut dyn Iterator<Item = f64>| {
            it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
        };
        Self {
            f0_range_st: range(&mut features.iter().map(|f| f.0)),
            vtl_range_cm: range(&mut features.iter().map(|f| f.1)),
            svm,
        }
    }

    /// Raw score in `[0, 1]`, higher meaning more female-typical.
    pub fn raw_score(&self, baseline: Baseline, f0_st: f64, vtl_cm: f64) -> Result<f64, PipelineError> {
        let rescale = |v: f64, (lo, hi): (f64, f64)| if hi > lo { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.5 };
        Ok(match baseline {
            Baseline::F0 => rescale(f0_st, self.f0_range_st),
            Baseline::Vtl => 1.0 - rescale(vtl_cm, self.vtl_range_cm),
            Baseline::F0Vtl => {
                let svm = self
                    .svm
                    .as_ref()
                    .ok_or_else(|| PipelineError::DimensionMismatch("f0vtl baseline needs a fitted SVM".into()))?;
                sigmoid(svm.decision(f0_st, vtl_cm))
            }
        })
    }
}

/// Baseline counterpart of [`estimate_vfp`]; the single "window" carries the raw score.
pub fn estimate_vfp_baseline(
    buf: &AudioBuffer,
    baseline: Baseline,
    params: &BaselineParams,
    map: &CalibrationMap,
    cfg: &PipelineConfig,
) -> Result<VfpResult, PipelineError> {
    if !map.is_fitted() {
        return Err(CalibrationError::UnfittedMap.into());
    }
    let segments = vad::detect_speech(buf, &cfg.vad);
    let audio = vad::speech_audio(buf, &segments);
    let track = acoustics::estimate_f0_track(&audio);
    let f0_hz = track.median_hz()?;
    let f0_st = acoustics::hz_to_st(f0_hz);
    let mut warnings = Vec::new();
    let vtl_cm = match acoustics::estimate_formants(&audio, &track) {
        Ok(fmt) => Some(acoustics::estimate_vtl(&fmt, &VtlConfig::default())),
        Err(e) if baseline == Baseline::F0 => {
            warnings.push(format!("vtl: {e}"));
            None
        }
        Err(e) => return Err(e.into()),
    };
    let raw = params.raw_score(baseline, f0_st, vtl_cm.unwrap_or(f64::NAN))?;
    let window_scores = vec![GenderScore { t_start: 0.0, p_female: raw }];
    let (raw_score, vfp) = aggregate(&window_scores, map)?;
    let total = buf.duration();
    let speech: f64 = segments.iter().map(SpeechSegment::duration).sum();
    Ok(VfpResult {
        vfp,
        raw_score,
        n_windows: 1,
        window_scores,
        speech_ratio: if total > 0.0 { (speech / total).min(1.0) } else { 0.0 },
        f0_median_st: Some(f0_st),
        f0_median_hz: Some(f0_hz),
        vtl_cm,
        warnings,
    })
}
