#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vfp_core::audio::{encode_wav_pcm16, AudioBuffer};
use vfp_core::calibration::CalibrationMap;
use vfp_core::classifier::{build_model, ArchSpec, FeatureConfig, MlpSpec, ModelBundle};
use vfp_core::synth::{self, VoiceProfile};

pub const RATE: u32 = 16_000;

/// Untrained pooled-statistics MLP; enough for contract tests.
pub fn contract_model() -> ModelBundle {
    build_model(&ArchSpec::Mlp(MlpSpec { input_dim: 48, hidden: vec![64] }), FeatureConfig::pooled_stats(24), 7).unwrap()
}

pub fn contract_map() -> CalibrationMap {
    CalibrationMap::from_knots(vec![(0.0, 0.0), (0.4, 20.0), (0.6, 80.0), (1.0, 100.0)]).unwrap()
}

pub fn speech(secs: f64, high: bool, seed: u64) -> AudioBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let profile = if high { VoiceProfile::sample_high(&mut rng) } else { VoiceProfile::sample_low(&mut rng) };
    synth::read_speech(profile, secs, seed, RATE)
}

pub fn speech_wav(secs: f64, high: bool, seed: u64) -> Vec<u8> {
    encode_wav_pcm16(&speech(secs, high, seed))
}

/// Writes the model and map into `dir` and returns their paths.
pub fn write_artifacts(dir: &Path) -> (PathBuf, PathBuf) {
    let m = dir.join("model.vfpm");
    let c = dir.join("calibration.json");
    contract_model().save(&m).unwrap();
    contract_map().save(&c).unwrap();
    (m, c)
}

/// Two-point reaction-time values (90 % at `lo`, 10 % at `hi`) with the
/// requested mean and standard deviation.
fn rt_ms(i: usize, mean: f64, sd: f64) -> f64 {
    let gap = sd / 0.3;
    let lo = mean - 0.1 * gap;
    1000.0 * if i % 10 == 9 { lo + gap } else { lo }
}

/// Answer and speaker tables whose per-category answer proportions and RT
/// means match the perceptual study's summary table: 1000 answers per
/// category from 50 listeners on 20 speakers.
pub fn write_table1_csvs(dir: &Path) -> (PathBuf, PathBuf) {
    // (category, n_female, n_male, n_idk, rt mean s, rt sd s)
    let cats = [("CF", 996, 4, 0, 3.4, 4.1), ("CM", 0, 998, 2, 3.7, 4.3), ("TF", 476, 474, 50, 6.2, 5.8)];
    let mut answers = String::from("listener_id,listener_gender,listener_age_band,speaker_id,answer,rt_ms\n");
    let mut speakers = String::from("speaker_id,category,age\n");
    for (cat, f, m, idk, mean, sd) in cats {
        for s in 0..20 {
            let _ = writeln!(speakers, "{cat}{s:02},{cat},{}", 25 + 2 * s);
        }
        let labels = std::iter::repeat_n("F", f).chain(std::iter::repeat_n("M", m)).chain(std::iter::repeat_n("IDK", idk));
        for (i, ans) in labels.enumerate() {
            let listener = i / 20;
            let gender = if listener % 2 == 0 { "F" } else { "M" };
            let _ = writeln!(answers, "L{listener:02},{gender},20-35,{cat}{:02},{ans},{:.1}", i % 20, rt_ms(i, mean, sd));
        }
    }
    let a = dir.join("table1_synthetic.csv");
    let s = dir.join("meta.csv");
    std::fs::write(&a, answers).unwrap();
    std::fs::write(&s, speakers).unwrap();
    (a, s)
}
