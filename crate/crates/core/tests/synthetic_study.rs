//! Reduced-scale end-to-end study on synthetic voices: train the MLP with
//! the balanced protocol, classify held-out speakers, then calibrate
//! mixture voices leave-one-out.

use std::collections::BTreeMap;

use rayon::prelude::*;
use vfp_core::calibration::leave_one_out_predictions;
use vfp_core::classifier::{ArchSpec, FeatureConfig, MlpSpec};
use vfp_core::metrics::{evaluate_bgc, r2, AgeBand, BgcRecord};
use vfp_core::pipeline::{estimate_vfp, speech_features, PipelineConfig};
use vfp_core::synth::{self, VoiceProfile};
use vfp_core::trainer::{self, CorpusIndex, SpeakerEntry, SpeakerKey, SpeakerMaterial, TrainConfig};

const RATE: u32 = 16_000;

#[test]
fn synthetic_study_reduced() {
    let pop = synth::population(40, 42);
    let entries: Vec<SpeakerEntry> = pop
        .iter()
        .map(|s| SpeakerEntry {
            key: SpeakerKey { corpus: "synthetic".into(), speaker_id: s.id.clone() },
            gender: s.gender,
            recordings: vec![format!("{}.wav", s.id)],
        })
        .collect();
    let idx = CorpusIndex::new(entries).unwrap();
    let (train_all, test) = trainer::split_train_dev(&idx, 0.8, 1).unwrap();
    let (train, dev) = trainer::split_train_dev(&train_all, 0.8, 2).unwrap();

    let by_id: BTreeMap<&str, &synth::SyntheticSpeaker> = pop.iter().map(|s| (s.id.as_str(), s)).collect();
    let vad = PipelineConfig::default().vad;
    let material: trainer::MaterialTable = train_all
        .entries()
        .par_iter()
        .map(|e| {
            let spk = by_id[e.key.speaker_id.as_str()];
            let mel = speech_features(&spk.recording(0, 6.0, RATE), 24, &vad).unwrap().mel;
            (e.key.clone(), SpeakerMaterial::Mel(vec![mel]))
        })
        .collect();

    let spec = ArchSpec::Mlp(MlpSpec { input_dim: 48, hidden: vec![64] });
    let cfg = TrainConfig::default();
    let out = trainer::train(&spec, FeatureConfig::pooled_stats(24), &train, &dev, &material, &cfg).unwrap();
    assert!(out.seeds.iter().all(|s| s.error.is_none()));

    let pcfg = PipelineConfig { diagnostics: false, ..Default::default() };
    let linear = vfp_core::calibration::CalibrationMap::linear();
    let records: Vec<BgcRecord> = test
        .entries()
        .par_iter()
        .map(|e| {
            let spk = by_id[e.key.speaker_id.as_str()];
            let r = estimate_vfp(&spk.recording(1, 6.0, RATE), &out.bundle, &linear, &pcfg).unwrap();
            BgcRecord {
                recording_id: format!("{}-1", spk.id),
                speaker_id: spk.id.clone(),
                gender: Some(spk.gender),
                age_band: AgeBand::from_age(spk.age),
                p_female: r.raw_score,
            }
        })
        .collect();
    let report = evaluate_bgc(&records).unwrap();
    let hacc = report.global.hacc.unwrap();
    let gb = report.global.gb.unwrap();
    assert!(hacc >= 90.0, "hacc {hacc}");
    assert!(gb.abs() <= 10.0, "gb {gb}");

    let pairs: Vec<(f64, f64)> = (0..20u64)
        .into_par_iter()
        .map(|i| {
            let m = i as f64 / 19.0;
            let seed = 100 + i;
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
            let (hi, lo) = (VoiceProfile::sample_high(&mut rng), VoiceProfile::sample_low(&mut rng));
            let buf = synth::mixture(hi, lo, m, 10.0, seed, RATE);
            let r = estimate_vfp(&buf, &out.bundle, &linear, &pcfg).unwrap();
            (r.raw_score, 100.0 * m)
        })
        .collect();
    let loo = leave_one_out_predictions(&pairs).unwrap();
    let targets: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let r2v = r2(&targets, &loo).unwrap();
    assert!(r2v >= 0.8, "r2 {r2v}");
}
