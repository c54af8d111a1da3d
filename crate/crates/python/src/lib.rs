//! Python bindings: load a model and calibration, analyze WAV files or
//! bytes, and call the perception and metric helpers.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;
use vfp_core::audio;
use vfp_core::calibration::{self, CalibrationMap};
use vfp_core::classifier::{build_model, ArchSpec, FeatureConfig, MlpSpec, ModelBundle};
use vfp_core::perception::{self, Answer};
use vfp_core::pipeline::{self, PipelineConfig, PipelineError, VfpResult};
use vfp_core::{acoustics, metrics, synth, Error};

create_exception!(vfp, InsufficientSpeechError, PyValueError);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Pipeline(p @ PipelineError::InsufficientSpeech { .. }) => InsufficientSpeechError::new_err(p.to_string()),
        Error::Audio(audio::AudioError::Io(io)) => PyIOError::new_err(io.to_string()),
        Error::Model(_) | Error::Calibration(_) | Error::Audio(_) | Error::Perception(_) | Error::Metrics(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

/// A loaded model and calibration map.
pub struct Engine {
    model: ModelBundle,
    map: CalibrationMap,
    cfg: PipelineConfig,
}

impl Engine {
    pub fn open(model: &std::path::Path, calib: &std::path::Path) -> Result<Self, Error> {
        let model = ModelBundle::load(model)?;
        let map = CalibrationMap::load(calib)?;
        if !map.is_fitted() {
            return Err(calibration::CalibrationError::UnfittedMap.into());
        }
        Ok(Self { model, map, cfg: PipelineConfig::default() })
    }

    pub fn analyze_bytes(&self, bytes: &[u8]) -> Result<VfpResult, Error> {
        let buf = audio::load_wav(bytes)?;
        Ok(pipeline::estimate_vfp(&buf, &self.model, &self.map, &self.cfg)?)
    }
}

#[pyclass(frozen)]
struct Analyzer {
    engine: Engine,
}

#[pymethods]
impl Analyzer {
    #[new]
    fn new(model_path: PathBuf, calibration_path: PathBuf) -> PyResult<Self> {
        Ok(Self { engine: Engine::open(&model_path, &calibration_path).map_err(to_py)? })
    }

    /// Model version tag, e.g. `v1-...`.
    #[getter]
    fn model_version(&self) -> String {
        self.engine.model.version_tag()
    }

    /// Analyzes WAV bytes and returns the result as a dict.
    fn analyze_bytes<'py>(&self, py: Python<'py>, data: &[u8]) -> PyResult<Bound<'py, PyAny>> {
        let r = self.engine.analyze_bytes(data).map_err(to_py)?;
        json_to_py(py, &serde_json::to_string(&r).map_err(|e| PyRuntimeError::new_err(e.to_string()))?)
    }

    fn analyze_file<'py>(&self, py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyAny>> {
        let bytes = std::fs::read(&path).map_err(|e| PyIOError::new_err(format!("{}: {e}", path.display())))?;
        self.analyze_bytes(py, &bytes)
    }
}

pub fn parse_answers(answers: &[String]) -> Result<Vec<Answer>, String> {
    answers.iter().map(|a| a.parse()).collect()
}

/// VFP from answer labels `F`, `M` or `IDK`.
#[pyfunction]
fn vfp_from_answers(answers: Vec<String>) -> PyResult<f64> {
    let parsed = parse_answers(&answers).map_err(PyValueError::new_err)?;
    perception::vfp_from_answers(&parsed).map_err(|e| to_py(e.into()))
}

#[pyfunction]
fn pava(y: Vec<f64>, w: Vec<f64>) -> PyResult<Vec<f64>> {
    calibration::pava(&y, &w).map_err(|e| to_py(e.into()))
}

/// Isotonic map knots from `(raw_score, vfp)` pairs.
#[pyfunction]
fn fit_isotonic(pairs: Vec<(f64, f64)>) -> PyResult<Vec<(f64, f64)>> {
    Ok(calibration::fit_isotonic(&pairs).map_err(|e| to_py(e.into()))?.knots)
}

#[pyfunction]
fn hacc(acc_m: f64, acc_f: f64) -> PyResult<f64> {
    metrics::hacc(acc_m, acc_f).map_err(|e| to_py(e.into()))
}

#[pyfunction]
fn gender_bias(acc_m: f64, acc_f: f64) -> f64 {
    metrics::gender_bias(acc_m, acc_f)
}

#[pyfunction]
fn hz_to_st(hz: f64) -> f64 {
    acoustics::hz_to_st(hz)
}

/// `(a, b, c, vertex)` for `rt = a + b v + c v^2`.
#[pyfunction]
fn fit_rt_parabola(points: Vec<(f64, f64)>) -> PyResult<(f64, f64, f64, Option<f64>)> {
    let p = perception::fit_rt_parabola(&points).map_err(|e| to_py(e.into()))?;
    Ok((p.a, p.b, p.c, p.vertex))
}

/// `(u_a, p_value)` of the two-sided rank-sum test.
#[pyfunction]
fn wilcoxon_rank_sum(a: Vec<f64>, b: Vec<f64>) -> PyResult<(f64, f64)> {
    let r = perception::wilcoxon_rank_sum(&a, &b).map_err(|e| to_py(e.into()))?;
    Ok((r.u_a, r.p_value))
}

/// WAV bytes of a synthetic read-speech voice (`high` or low register).
#[pyfunction]
#[pyo3(signature = (high, secs, seed=0))]
fn synthetic_voice_wav(py: Python<'_>, high: bool, secs: f64, seed: u64) -> PyResult<Bound<'_, PyBytes>> {
    if !(secs > 0.0 && secs <= 600.0) {
        return Err(PyValueError::new_err("secs must be in (0, 600]"));
    }
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let voice = if high { synth::VoiceProfile::sample_high(&mut rng) } else { synth::VoiceProfile::sample_low(&mut rng) };
    Ok(PyBytes::new(py, &audio::encode_wav_pcm16(&synth::read_speech(voice, secs, seed, 16_000))))
}

/// Writes a freshly initialized (untrained) pooled-statistics MLP.
#[pyfunction]
#[pyo3(signature = (path, hidden=vec![64], seed=0))]
fn init_model(path: PathBuf, hidden: Vec<usize>, seed: u64) -> PyResult<String> {
    let spec = ArchSpec::Mlp(MlpSpec { input_dim: 48, hidden });
    let bundle = build_model(&spec, FeatureConfig::pooled_stats(24), seed).map_err(|e| to_py(e.into()))?;
    bundle.save(&path).map_err(|e| to_py(e.into()))?;
    Ok(bundle.version_tag())
}

/// Writes a calibration map fitted on `(raw_score, vfp)` pairs.
#[pyfunction]
fn save_calibration(path: PathBuf, pairs: Vec<(f64, f64)>) -> PyResult<()> {
    calibration::fit_isotonic(&pairs).and_then(|m| m.save(&path)).map_err(|e| to_py(e.into()))
}

#[pymodule]
fn vfp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Analyzer>()?;
    m.add("InsufficientSpeechError", m.py().get_type::<InsufficientSpeechError>())?;
    m.add_function(wrap_pyfunction!(vfp_from_answers, m)?)?;
    m.add_function(wrap_pyfunction!(pava, m)?)?;
    m.add_function(wrap_pyfunction!(fit_isotonic, m)?)?;
    m.add_function(wrap_pyfunction!(hacc, m)?)?;
    m.add_function(wrap_pyfunction!(gender_bias, m)?)?;
    m.add_function(wrap_pyfunction!(hz_to_st, m)?)?;
    m.add_function(wrap_pyfunction!(fit_rt_parabola, m)?)?;
    m.add_function(wrap_pyfunction!(wilcoxon_rank_sum, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_voice_wav, m)?)?;
    m.add_function(wrap_pyfunction!(init_model, m)?)?;
    m.add_function(wrap_pyfunction!(save_calibration, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn answers_parse() {
        let a = parse_answers(&["F".into(), "idk".into(), "M".into()]).unwrap();
        assert_eq!(a, vec![Answer::F, Answer::Idk, Answer::M]);
        assert!(parse_answers(&["maybe".into()]).is_err());
    }

    #[test]
    fn engine_round_trip() {
        let dir = std::env::temp_dir().join(format!("vfp-py-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let (m, c) = (dir.join("m.vfpm"), dir.join("c.json"));
        let spec = ArchSpec::Mlp(MlpSpec { input_dim: 48, hidden: vec![32] });
        build_model(&spec, FeatureConfig::pooled_stats(24), 1).unwrap().save(&m).unwrap();
        CalibrationMap::linear().save(&c).unwrap();
        let engine = Engine::open(&m, &c).unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(2);
        let voice = vfp_core::synth::VoiceProfile::sample_high(&mut rng);
        let wav = audio::encode_wav_pcm16(&vfp_core::synth::read_speech(voice, 4.0, 2, 16_000));
        let r = engine.analyze_bytes(&wav).unwrap();
        assert!((0.0..=100.0).contains(&r.vfp));
        let short = audio::encode_wav_pcm16(&vfp_core::synth::read_speech(voice, 1.0, 2, 16_000));
        assert!(matches!(engine.analyze_bytes(&short), Err(Error::Pipeline(PipelineError::InsufficientSpeech { .. }))));
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
