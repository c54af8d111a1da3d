//! Perceptual statistics from listener answer tables: per-speaker VFP,
//! per-category answer proportions and reaction times, the RT-vs-VFP
//! parabola, and the Wilcoxon rank-sum test.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PerceptionError {
    #[error("no answers")]
    NoAnswers,
    #[error("answer references unknown speaker {0}")]
    UnknownSpeaker(String),
    #[error("degenerate design: {0}")]
    DegenerateDesign(String),
    #[error("empty group")]
    EmptyGroup,
    #[error("{path}:{line}: {message}")]
    Csv { path: String, line: u64, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Answer {
    F,
    M,
    #[serde(rename = "IDK")]
    Idk,
}

impl std::str::FromStr for Answer {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "F" | "FEMALE" => Ok(Self::F),
            "M" | "MALE" => Ok(Self::M),
            "IDK" => Ok(Self::Idk),
            other => Err(format!("unknown answer '{other}' (expected F, M or IDK)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ListenerGender {
    F,
    M,
    Other,
}

impl std::str::FromStr for ListenerGender {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "F" => Ok(Self::F),
            "M" => Ok(Self::M),
            "OTHER" | "CONFIDENTIAL" | "" => Ok(Self::Other),
            other => Err(format!("unknown listener gender '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SpeakerCategory {
    CF,
    CM,
    TF,
}

impl SpeakerCategory {
    pub const ALL: [SpeakerCategory; 3] = [SpeakerCategory::CF, SpeakerCategory::CM, SpeakerCategory::TF];
}

impl std::str::FromStr for SpeakerCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "CF" => Ok(Self::CF),
            "CM" => Ok(Self::CM),
            "TF" => Ok(Self::TF),
            other => Err(format!("unknown speaker category '{other}' (expected CF, CM or TF)")),
        }
    }
}

/// One listener's judgment of one speaker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub listener_id: String,
    pub listener_gender: ListenerGender,
    pub listener_age_band: String,
    pub speaker_id: String,
    pub answer: Answer,
    /// Reaction time in seconds.
    pub rt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerMeta {
    pub speaker_id: String,
    pub category: SpeakerCategory,
    pub age: f64,
}

/// `100 * (F + IDK/2) / total`.
pub fn vfp_from_answers<'a>(answers: impl IntoIterator<Item = &'a Answer>) -> Result<f64, PerceptionError> {
    let (mut f, mut idk, mut n) = (0usize, 0usize, 0usize);
    for a in answers {
        n += 1;
        match a {
            Answer::F => f += 1,
            Answer::Idk => idk += 1,
            Answer::M => {}
        }
    }
    if n == 0 {
        return Err(PerceptionError::NoAnswers);
    }
    Ok(100.0 * (f as f64 + 0.5 * idk as f64) / n as f64)
}

/// Per-speaker VFP and mean reaction time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerPerception {
    pub speaker_id: String,
    pub vfp: f64,
    pub mean_rt: f64,
    pub n_answers: usize,
}

pub fn per_speaker(answers: &[AnswerRecord]) -> Vec<SpeakerPerception> {
    let mut groups: BTreeMap<&str, Vec<&AnswerRecord>> = BTreeMap::new();
    for a in answers {
        groups.entry(a.speaker_id.as_str()).or_default().push(a);
    }
    groups
        .into_iter()
        .map(|(id, recs)| SpeakerPerception {
            speaker_id: id.to_string(),
            vfp: vfp_from_answers(recs.iter().map(|r| &r.answer)).expect("non-empty group"),
            mean_rt: recs.iter().map(|r| r.rt).sum::<f64>() / recs.len() as f64,
            n_answers: recs.len(),
        })
        .collect()
}

/// Mean judgment of one listener over every answer they gave
/// (F = 1, IDK = 0.5, M = 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ListenerJudgment {
    pub listener_id: String,
    pub listener_gender: ListenerGender,
    pub mean_judgment: f64,
    pub n_answers: usize,
}

pub fn per_listener(answers: &[AnswerRecord]) -> Vec<ListenerJudgment> {
    let mut groups: BTreeMap<&str, Vec<&AnswerRecord>> = BTreeMap::new();
    for a in answers {
        groups.entry(a.listener_id.as_str()).or_default().push(a);
    }
    groups
        .into_iter()
        .map(|(id, recs)| ListenerJudgment {
            listener_id: id.to_string(),
            listener_gender: recs[0].listener_gender,
            mean_judgment: vfp_from_answers(recs.iter().map(|r| &r.answer)).expect("non-empty group") / 100.0,
            n_answers: recs.len(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub category: SpeakerCategory,
    pub pct_female: f64,
    pub pct_male: f64,
    pub pct_idk: f64,
    pub vfp: f64,
    pub rt_mean: f64,
    /// Sample standard deviation (0 for a single answer).
    pub rt_std: f64,
    pub n_answers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryTable {
    pub rows: Vec<CategoryRow>,
    pub warnings: Vec<String>,
}

/// Answer proportions and reaction-time statistics per speaker category.
pub fn category_stats(answers: &[AnswerRecord], meta: &[SpeakerMeta]) -> Result<CategoryTable, PerceptionError> {
    let cat_of: HashMap<&str, SpeakerCategory> = meta.iter().map(|m| (m.speaker_id.as_str(), m.category)).collect();
    let mut by_cat: HashMap<SpeakerCategory, Vec<&AnswerRecord>> = HashMap::new();
    for a in answers {
        let cat = cat_of
            .get(a.speaker_id.as_str())
            .ok_or_else(|| PerceptionError::UnknownSpeaker(a.speaker_id.clone()))?;
        by_cat.entry(*cat).or_default().push(a);
    }
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for cat in SpeakerCategory::ALL {
        let Some(recs) = by_cat.get(&cat) else {
            warnings.push(format!("no answers for category {cat:?}; row omitted"));
            continue;
        };
        let n = recs.len() as f64;
        let count = |ans: Answer| recs.iter().filter(|r| r.answer == ans).count() as f64;
        let rts: Vec<f64> = recs.iter().map(|r| r.rt).collect();
        let rt_mean = rts.iter().sum::<f64>() / n;
        let rt_std = if recs.len() > 1 {
            (rts.iter().map(|r| (r - rt_mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        rows.push(CategoryRow {
            category: cat,
            pct_female: 100.0 * count(Answer::F) / n,
            pct_male: 100.0 * count(Answer::M) / n,
            pct_idk: 100.0 * count(Answer::Idk) / n,
            vfp: vfp_from_answers(recs.iter().map(|r| &r.answer))?,
            rt_mean,
            rt_std,
            n_answers: recs.len(),
        });
    }
    Ok(CategoryTable { rows, warnings })
}

impl CategoryTable {
    /// Text table with one column per category.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<28}", "");
        for r in &self.rows {
            let _ = write!(out, " {:>7}", format!("{:?}", r.category));
        }
        let _ = writeln!(out);
        let lines: [(&str, fn(&CategoryRow) -> f64); 6] = [
            ("Perceived as Female (%)", |r| r.pct_female),
            ("Perceived as Male (%)", |r| r.pct_male),
            ("IDK (%)", |r| r.pct_idk),
            ("VFP (%)", |r| r.vfp),
            ("Average RT (s)", |r| r.rt_mean),
            ("Standard deviation RT (s)", |r| r.rt_std),
        ];
        for (label, get) in lines {
            let _ = write!(out, "{label:<28}");
            for r in &self.rows {
                let _ = write!(out, " {:>7.1}", get(r));
            }
            let _ = writeln!(out);
        }
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }
}

/// `rt = a + b v + c v^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Parabola {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// `-b / 2c`, absent when the fit is a line.
    pub vertex: Option<f64>,
}

impl Parabola {
    pub fn eval(&self, v: f64) -> f64 {
        self.a + self.b * v + self.c * v * v
    }
}

/// Least-squares quadratic through `(vfp, mean_rt)` points.
///
/// The normal equations are solved in a centred, scaled abscissa and mapped
/// back, which keeps them well conditioned on a 0..100 axis.
pub fn fit_rt_parabola(points: &[(f64, f64)]) -> Result<Parabola, PerceptionError> {
    let mut distinct: Vec<f64> = points.iter().map(|p| p.0).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(PerceptionError::DegenerateDesign(format!(
            "{} distinct abscissae, need 3",
            distinct.len()
        )));
    }
    let n = points.len() as f64;
    let centre = points.iter().map(|p| p.0).sum::<f64>() / n;
    let scale = points.iter().map(|p| (p.0 - centre).abs()).fold(0.0, f64::max);
    let mut xtx = Matrix3::<f64>::zeros();
    let mut xty = Vector3::<f64>::zeros();
    for &(v, rt) in points {
        let u = (v - centre) / scale;
        let row = Vector3::new(1.0, u, u * u);
        xtx += row * row.transpose();
        xty += row * rt;
    }
    let coef = xtx
        .lu()
        .solve(&xty)
        .ok_or_else(|| PerceptionError::DegenerateDesign("singular normal equations".into()))?;
    let (p, q, r) = (coef[0], coef[1] / scale, coef[2] / (scale * scale));
    // Expand p + q (v - m) + r (v - m)^2.
    let a = p - q * centre + r * centre * centre;
    let b = q - 2.0 * r * centre;
    let c = r;
    let curvature_scale = points.iter().map(|p| p.1.abs()).fold(0.0, f64::max).max(1.0) / (scale * scale);
    let vertex = (c.abs() > 1e-9 * curvature_scale).then(|| -b / (2.0 * c));
    Ok(Parabola { a, b, c, vertex })
}

/// Wilcoxon rank-sum (Mann-Whitney) test result.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankSumResult {
    /// `R_a - n_a (n_a + 1) / 2`.
    pub u_a: f64,
    pub u_b: f64,
    /// Rank sum of group a.
    pub rank_sum_a: f64,
    pub z: f64,
    /// Two-sided p from the normal approximation with tie and continuity corrections.
    pub p_value: f64,
}

pub fn wilcoxon_rank_sum(a: &[f64], b: &[f64]) -> Result<RankSumResult, PerceptionError> {
    if a.is_empty() || b.is_empty() {
        return Err(PerceptionError::EmptyGroup);
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let mut pooled: Vec<(f64, bool)> = a.iter().map(|&v| (v, true)).chain(b.iter().map(|&v| (v, false))).collect();
    pooled.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut rank_sum_a = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        let mid_rank = (i + j) as f64 / 2.0 + 1.0;
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        rank_sum_a += pooled[i..=j].iter().filter(|p| p.1).count() as f64 * mid_rank;
        i = j + 1;
    }
    let u_a = rank_sum_a - na * (na + 1.0) / 2.0;
    let u_b = na * nb - u_a;
    let n = na + nb;
    let mean = na * nb / 2.0;
    let var = na * nb / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)).max(1.0));
    let (z, p_value) = if var <= 0.0 {
        (0.0, 1.0)
    } else {
        let dev = ((u_a - mean).abs() - 0.5).max(0.0);
        let z = dev / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        (z, (2.0 * (1.0 - normal.cdf(z))).min(1.0))
    };
    Ok(RankSumResult { u_a, u_b, rank_sum_a, z, p_value })
}

fn csv_error(path: &Path, line: u64, message: impl Into<String>) -> PerceptionError {
    PerceptionError::Csv { path: path.display().to_string(), line, message: message.into() }
}

fn read_rows(path: &Path, expected: &[&str]) -> Result<Vec<(u64, csv::StringRecord)>, PerceptionError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, 0, e.to_string()))?;
    let headers = reader.headers().map_err(|e| csv_error(path, 1, e.to_string()))?.clone();
    let got: Vec<&str> = headers.iter().collect();
    if got != expected {
        return Err(csv_error(path, 1, format!("expected header {}, got {}", expected.join(","), got.join(","))));
    }
    reader
        .records()
        .map(|r| {
            let rec = r.map_err(|e| csv_error(path, e.position().map_or(0, |p| p.line()), e.to_string()))?;
            let line = rec.position().map_or(0, |p| p.line());
            Ok((line, rec))
        })
        .collect()
}

/// Reads `listener_id,listener_gender,listener_age_band,speaker_id,answer,rt_ms`.
pub fn load_answers(path: impl AsRef<Path>) -> Result<Vec<AnswerRecord>, PerceptionError> {
    let path = path.as_ref();
    let header = ["listener_id", "listener_gender", "listener_age_band", "speaker_id", "answer", "rt_ms"];
    read_rows(path, &header)?
        .into_iter()
        .map(|(line, r)| {
            let rt_ms: f64 = r[5].parse().map_err(|_| csv_error(path, line, format!("bad rt_ms '{}'", &r[5])))?;
            if !(rt_ms > 0.0) {
                return Err(csv_error(path, line, "rt_ms must be positive"));
            }
            Ok(AnswerRecord {
                listener_id: r[0].to_string(),
                listener_gender: r[1].parse().map_err(|e: String| csv_error(path, line, e))?,
                listener_age_band: r[2].to_string(),
                speaker_id: r[3].to_string(),
                answer: r[4].parse().map_err(|e: String| csv_error(path, line, e))?,
                rt: rt_ms / 1000.0,
            })
        })
        .collect()
}

/// Reads `speaker_id,category,age`.
pub fn load_speakers(path: impl AsRef<Path>) -> Result<Vec<SpeakerMeta>, PerceptionError> {
    let path = path.as_ref();
    read_rows(path, &["speaker_id", "category", "age"])?
        .into_iter()
        .map(|(line, r)| {
            let age: f64 = r[2].parse().map_err(|_| csv_error(path, line, format!("bad age '{}'", &r[2])))?;
            if !(18.0..=100.0).contains(&age) {
                return Err(csv_error(path, line, format!("age {age} outside 18..=100")));
            }
            Ok(SpeakerMeta {
                speaker_id: r[0].to_string(),
                category: r[1].parse().map_err(|e: String| csv_error(path, line, e))?,
                age,
            })
        })
        .collect()
}
