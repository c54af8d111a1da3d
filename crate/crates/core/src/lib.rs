//! Voice femininity percentage (VFP) estimation.
//!
//! A recording is reduced to speech by [`vad`], turned into log-Mel patches
//! by [`features`], scored window by window by a binary gender
//! [`classifier`], averaged, and mapped to a 0–100 perceptual scale by an
//! isotonic [`calibration`] map. [`acoustics`] provides the classical F0 and
//! vocal-tract-length measurements used as diagnostics and baselines,
//! [`trainer`] the bias-aware training protocol, and [`perception`] and
//! [`metrics`] the listener-study statistics and evaluation measures.
//!
//! ```no_run
//! use vfp_core::{audio, calibration::CalibrationMap, classifier::ModelBundle, pipeline};
//!
//! let buf = audio::read_wav_file("reading.wav")?;
//! let model = ModelBundle::load("model.vfpm")?;
//! let map = CalibrationMap::load("calibration.json")?;
//! let result = pipeline::estimate_vfp(&buf, &model, &map, &pipeline::PipelineConfig::default())?;
//! println!("VFP {:.1}", result.vfp);
//! # Ok::<(), vfp_core::Error>(())
//! ```

use serde::{Deserialize, Serialize};

pub mod acoustics;
pub mod audio;
pub mod calibration;
pub mod classifier;
pub mod features;
pub mod metrics;
pub mod perception;
pub mod pipeline;
pub mod synth;
pub mod trainer;
pub mod vad;

/// Binary speaker gender label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Gender {
    F,
    M,
}

impl Gender {
    /// Target for the `p_female` output.
    pub fn target(self) -> f64 {
        match self {
            Gender::F => 1.0,
            Gender::M => 0.0,
        }
    }
}

impl std::str::FromStr for Gender {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "F" | "FEMALE" => Ok(Gender::F),
            "M" | "MALE" => Ok(Gender::M),
            other => Err(format!("unknown gender '{other}' (expected F or M)")),
        }
    }
}

impl std::fmt::Display for Gender {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Gender::F => "F",
            Gender::M => "M",
        })
    }
}

/// Any error raised by this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Audio(#[from] audio::AudioError),
    #[error(transparent)]
    Feature(#[from] features::FeatureError),
    #[error(transparent)]
    Acoustics(#[from] acoustics::AcousticsError),
    #[error(transparent)]
    Model(#[from] classifier::ModelError),
    #[error(transparent)]
    Training(#[from] trainer::TrainError),
    #[error(transparent)]
    Calibration(#[from] calibration::CalibrationError),
    #[error(transparent)]
    Pipeline(#[from] pipeline::PipelineError),
    #[error(transparent)]
    Perception(#[from] perception::PerceptionError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
}
