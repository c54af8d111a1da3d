//! Evaluation metrics: harmonic accuracy, gender bias, R², and per-age
//! breakdowns of binary gender classification.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::perception::SpeakerCategory;
use crate::Gender;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("harmonic accuracy undefined when both accuracies are zero")]
    BothZero,
    #[error("targets have zero variance")]
    ZeroVariance,
    #[error("length mismatch: {0} targets vs {1} predictions")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 values, got {0}")]
    TooFew(usize),
    #[error("missing metadata for {0}")]
    MissingMetadata(String),
}

/// Harmonic mean of per-gender accuracies (percent).
pub fn hacc(acc_m: f64, acc_f: f64) -> Result<f64, MetricsError> {
    if acc_m + acc_f == 0.0 {
        return Err(MetricsError::BothZero);
    }
    Ok(2.0 * acc_m * acc_f / (acc_m + acc_f))
}

/// Male minus female accuracy, in percentage points.
pub fn gender_bias(acc_m: f64, acc_f: f64) -> f64 {
    acc_m - acc_f
}

/// Coefficient of determination `1 - SS_res / SS_tot`.
pub fn r2(targets: &[f64], predictions: &[f64]) -> Result<f64, MetricsError> {
    if targets.len() != predictions.len() {
        return Err(MetricsError::LengthMismatch(targets.len(), predictions.len()));
    }
    if targets.len() < 2 {
        return Err(MetricsError::TooFew(targets.len()));
    }
    let mean = targets.iter().sum::<f64>() / targets.len() as f64;
    let ss_tot: f64 = targets.iter().map(|y| (y - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(MetricsError::ZeroVariance);
    }
    let ss_res: f64 = targets.iter().zip(predictions).map(|(y, p)| (y - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Speaker age bands; lower edge inclusive, upper edge exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AgeBand {
    #[serde(rename = "20-35")]
    From20To35,
    #[serde(rename = "36-50")]
    From36To50,
    #[serde(rename = "51-65")]
    From51To65,
    #[serde(rename = "over 65")]
    Over65,
}

impl AgeBand {
    pub const ALL: [AgeBand; 4] = [AgeBand::From20To35, AgeBand::From36To50, AgeBand::From51To65, AgeBand::Over65];

    /// `None` for ages under 20.
    pub fn from_age(age: f64) -> Option<Self> {
        match age {
            a if a < 20.0 => None,
            a if a < 36.0 => Some(Self::From20To35),
            a if a < 51.0 => Some(Self::From36To50),
            a if a < 66.0 => Some(Self::From51To65),
            _ => Some(Self::Over65),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::From20To35 => "20-35",
            Self::From36To50 => "36-50",
            Self::From51To65 => "51-65",
            Self::Over65 => "over 65",
        }
    }
}

/// One classified recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BgcRecord {
    pub recording_id: String,
    pub speaker_id: String,
    pub gender: Option<Gender>,
    pub age_band: Option<AgeBand>,
    pub p_female: f64,
}

impl BgcRecord {
    /// `p_female >= 0.5` is a female decision.
    pub fn predicted(&self) -> Gender {
        if self.p_female >= 0.5 {
            Gender::F
        } else {
            Gender::M
        }
    }
}

/// Accuracy and counts for one cell (global or an age band).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BgcCell {
    pub n_f: usize,
    pub n_m: usize,
    pub correct_f: usize,
    pub correct_m: usize,
    /// `None` when either gender is missing from the cell.
    pub hacc: Option<f64>,
    pub gb: Option<f64>,
}

impl BgcCell {
    fn add(&mut self, gender: Gender, correct: bool) {
        match gender {
            Gender::F => {
                self.n_f += 1;
                self.correct_f += correct as usize;
            }
            Gender::M => {
                self.n_m += 1;
                self.correct_m += correct as usize;
            }
        }
    }

    pub fn acc_f(&self) -> Option<f64> {
        (self.n_f > 0).then(|| 100.0 * self.correct_f as f64 / self.n_f as f64)
    }

    pub fn acc_m(&self) -> Option<f64> {
        (self.n_m > 0).then(|| 100.0 * self.correct_m as f64 / self.n_m as f64)
    }

    fn finish(&mut self) {
        if let (Some(m), Some(f)) = (self.acc_m(), self.acc_f()) {
            self.hacc = Some(hacc(m, f).unwrap_or(0.0));
            self.gb = Some(gender_bias(m, f));
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub global: BgcCell,
    pub by_age: BTreeMap<AgeBand, BgcCell>,
    pub r2_cis: Option<f64>,
    pub r2_tf: Option<f64>,
}

/// Per-recording accuracy, globally and per age band.
pub fn evaluate_bgc(records: &[BgcRecord]) -> Result<EvalReport, MetricsError> {
    let mut report = EvalReport::default();
    for r in records {
        let gender = r.gender.ok_or_else(|| MetricsError::MissingMetadata(format!("gender of {}", r.recording_id)))?;
        let band = r.age_band.ok_or_else(|| MetricsError::MissingMetadata(format!("age band of {}", r.recording_id)))?;
        let correct = r.predicted() == gender;
        report.global.add(gender, correct);
        report.by_age.entry(band).or_default().add(gender, correct);
    }
    report.global.finish();
    for cell in report.by_age.values_mut() {
        cell.finish();
    }
    Ok(report)
}

/// One speaker's perceptual and predicted VFP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VfpOutcome {
    pub speaker_id: String,
    pub category: SpeakerCategory,
    pub perceptual_vfp: f64,
    pub predicted_vfp: f64,
}

/// R² over cisgender (CF and CM) and transgender (TF) speakers separately.
pub fn evaluate_vfp(outcomes: &[VfpOutcome]) -> Result<(f64, f64), MetricsError> {
    let subset = |cis: bool| -> (Vec<f64>, Vec<f64>) {
        outcomes
            .iter()
            .filter(|o| (o.category != SpeakerCategory::TF) == cis)
            .map(|o| (o.perceptual_vfp, o.predicted_vfp))
            .unzip()
    };
    let (ct, cp) = subset(true);
    let (tt, tp) = subset(false);
    Ok((r2(&ct, &cp)?, r2(&tt, &tp)?))
}

fn fmt_opt(v: Option<f64>, signed: bool) -> String {
    match (v, signed) {
        (Some(x), true) => format!("{x:+.1}"),
        (Some(x), false) => format!("{x:.1}"),
        (None, _) => "n/a".to_string(),
    }
}

impl EvalReport {
    /// Aligned text tables: a summary row and the per-age breakdown.
    pub fn render(&self, model_name: &str) -> String {
        let mut out = String::new();
        let r2 = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
        let _ = writeln!(out, "{:<16} {:>6} {:>6} {:>8} {:>8}", "Model", "Hacc", "GB", "CIS R2", "TF R2");
        let _ = writeln!(
            out,
            "{:<16} {:>6} {:>6} {:>8} {:>8}",
            model_name,
            fmt_opt(self.global.hacc, false),
            fmt_opt(self.global.gb, true),
            r2(self.r2_cis),
            r2(self.r2_tf)
        );
        let _ = writeln!(out);
        let _ = write!(out, "{:<16} {:<5}", "", "");
        for band in AgeBand::ALL {
            let _ = write!(out, " {:>8}", band.label());
        }
        let _ = writeln!(out);
        for (label, pick) in [("Hacc", false), ("GB", true)] {
            let _ = write!(out, "{:<16} {:<5}", if pick { "" } else { model_name }, label);
            for band in AgeBand::ALL {
                let cell = self.by_age.get(&band);
                let v = cell.and_then(|c| if pick { c.gb } else { c.hacc });
                let _ = write!(out, " {:>8}", fmt_opt(v, pick));
            }
            let _ = writeln!(out);
        }
        out
    }
}
