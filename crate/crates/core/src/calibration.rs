//! Isotonic calibration of averaged classifier scores to perceived
//! femininity percentages.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CALIBRATION_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("weight {weight} at index {index} is not positive")]
    NonPositiveWeight { index: usize, weight: f64 },
    #[error("values and weights differ in length ({values} vs {weights})")]
    LengthMismatch { values: usize, weights: usize },
    #[error("isotonic fit needs at least 2 pairs, got {0}")]
    TooFewPairs(usize),
    #[error("pair {index} out of range: raw {raw} (0..=1), target {target} (0..=100)")]
    OutOfRange { index: usize, raw: f64, target: f64 },
    #[error("calibration map is not fitted")]
    UnfittedMap,
    #[error("invalid calibration map: {0}")]
    InvalidMap(String),
    #[error("unsupported calibration version {0}")]
    VersionMismatch(u32),
    #[error("calibration file: {0}")]
    Io(#[from] std::io::Error),
    #[error("calibration json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Pool-adjacent-violators: the non-decreasing sequence closest to `y` in
/// weighted least squares.
pub fn pava(y: &[f64], w: &[f64]) -> Result<Vec<f64>, CalibrationError> {
    if y.len() != w.len() {
        return Err(CalibrationError::LengthMismatch { values: y.len(), weights: w.len() });
    }
    if let Some((index, &weight)) = w.iter().enumerate().find(|(_, &v)| !(v > 0.0)) {
        return Err(CalibrationError::NonPositiveWeight { index, weight });
    }
    // Blocks of (weighted mean, total weight, length).
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(y.len());
    for (&v, &wt) in y.iter().zip(w) {
        blocks.push((v, wt, 1));
        while blocks.len() > 1 {
            let (m2, w2, n2) = blocks[blocks.len() - 1];
            let (m1, w1, n1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            blocks.pop();
            let total = w1 + w2;
            *blocks.last_mut().expect("two blocks") = ((m1 * w1 + m2 * w2) / total, total, n1 + n2);
        }
    }
    Ok(blocks.into_iter().flat_map(|(m, _, n)| std::iter::repeat_n(m, n)).collect())
}

/// Monotone piecewise-linear map from raw score to VFP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMap {
    pub version: u32,
    /// `(raw score, vfp)` with strictly increasing x and non-decreasing y.
    pub knots: Vec<(f64, f64)>,
}

impl CalibrationMap {
    /// Validates and wraps knots.
    pub fn from_knots(knots: Vec<(f64, f64)>) -> Result<Self, CalibrationError> {
        let map = Self { version: CALIBRATION_VERSION, knots };
        map.validate()?;
        Ok(map)
    }

    /// Identity-like map `(0, 0) -> (1, 100)`.
    pub fn linear() -> Self {
        Self { version: CALIBRATION_VERSION, knots: vec![(0.0, 0.0), (1.0, 100.0)] }
    }

    fn validate(&self) -> Result<(), CalibrationError> {
        if self.version != CALIBRATION_VERSION {
            return Err(CalibrationError::VersionMismatch(self.version));
        }
        if self.knots.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(CalibrationError::InvalidMap("non-finite knot".into()));
        }
        for w in self.knots.windows(2) {
            if w[0].0 >= w[1].0 {
                return Err(CalibrationError::InvalidMap("knot x values must be strictly increasing".into()));
            }
            if w[0].1 > w[1].1 {
                return Err(CalibrationError::InvalidMap("knot y values must be non-decreasing".into()));
            }
        }
        Ok(())
    }

    pub fn is_fitted(&self) -> bool {
        self.knots.len() >= 2
    }

    /// Interpolates linearly between knots and clamps outside them.
    pub fn predict(&self, raw: f64) -> Result<f64, CalibrationError> {
        if !self.is_fitted() {
            return Err(CalibrationError::UnfittedMap);
        }
        let k = &self.knots;
        let (x0, y0) = k[0];
        let (xn, yn) = k[k.len() - 1];
        let v = if raw <= x0 {
            y0
        } else if raw >= xn {
            yn
        } else {
            let i = k.partition_point(|(x, _)| *x <= raw);
            let (xa, ya) = k[i - 1];
            let (xb, yb) = k[i];
            ya + (yb - ya) * (raw - xa) / (xb - xa)
        };
        Ok(v.clamp(0.0, 100.0))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("serializable map")
    }

    pub fn from_json(s: &str) -> Result<Self, CalibrationError> {
        let map: Self = serde_json::from_str(s)?;
        map.validate()?;
        Ok(map)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CalibrationError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CalibrationError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Fits an isotonic map from `(raw score in [0,1], target VFP in [0,100])` pairs.
///
/// Pairs sharing a raw score are merged by their mean with summed weight.
/// Runs of equal fitted values keep only their end knots.
pub fn fit_isotonic(pairs: &[(f64, f64)]) -> Result<CalibrationMap, CalibrationError> {
    if pairs.len() < 2 {
        return Err(CalibrationError::TooFewPairs(pairs.len()));
    }
    for (index, &(raw, target)) in pairs.iter().enumerate() {
        if !(0.0..=1.0).contains(&raw) || !(0.0..=100.0).contains(&target) {
            return Err(CalibrationError::OutOfRange { index, raw, target });
        }
    }
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut xs: Vec<f64> = Vec::new();
    let mut sums: Vec<(f64, f64)> = Vec::new();
    for (x, y) in sorted {
        match xs.last() {
            Some(&last) if last == x => {
                let s = sums.last_mut().expect("parallel vectors");
                s.0 += y;
                s.1 += 1.0;
            }
            _ => {
                xs.push(x);
                sums.push((y, 1.0));
            }
        }
    }
    let means: Vec<f64> = sums.iter().map(|(s, n)| s / n).collect();
    let weights: Vec<f64> = sums.iter().map(|(_, n)| *n).collect();
    let fitted = pava(&means, &weights)?;

    let mut knots: Vec<(f64, f64)> = Vec::with_capacity(xs.len());
    for (i, (&x, &y)) in xs.iter().zip(&fitted).enumerate() {
        let interior_of_run = i > 0 && i + 1 < xs.len() && fitted[i - 1] == y && fitted[i + 1] == y;
        if !interior_of_run {
            knots.push((x, y));
        }
    }
    if knots.len() < 2 {
        // Every raw score was identical.
        return Err(CalibrationError::TooFewPairs(knots.len()));
    }
    CalibrationMap::from_knots(knots)
}

/// Predicts each pair's target from a map fitted on all the other pairs.
pub fn leave_one_out_predictions(pairs: &[(f64, f64)]) -> Result<Vec<f64>, CalibrationError> {
    (0..pairs.len())
        .map(|i| {
            let rest: Vec<(f64, f64)> =
                pairs.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, p)| *p).collect();
            fit_isotonic(&rest)?.predict(pairs[i].0)
        })
        .collect()
}
