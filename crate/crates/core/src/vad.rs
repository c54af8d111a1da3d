//! Energy and spectral-flatness voice activity detection.
//!
//! Frames are speech when their log-energy clears an adaptive threshold (a
//! low percentile of the recording's frame energies plus a margin, when that
//! percentile is clearly below the loud frames) and their spectrum is not
//! noise-flat. Short gaps are bridged and short segments
//! dropped.

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::AudioBuffer;
use crate::features::{frame_samples, hamming, MelFrames, FRAME_HOP_S, FRAME_LEN_S};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VadConfig {
    /// Percentile of frame energies taken as the noise level.
    pub percentile: f64,
    /// Margin above the noise level, in dB.
    pub margin_db: f64,
    /// Segments shorter than this are dropped.
    pub min_segment_ms: f64,
    /// Gaps shorter than this between speech runs are closed.
    pub hangover_ms: f64,
    /// Frames quieter than this (dBFS) are never speech.
    pub absolute_floor_db: f64,
    /// Frames with spectral flatness at or above this are treated as noise.
    pub max_flatness: f64,
    /// Loud-minus-noise spread (dB) below which the quiet frames are taken
    /// to be soft speech rather than background.
    pub min_contrast_db: f64,
    /// Frames this far (dB) below the loud level are never speech.
    pub dynamic_range_db: f64,
}

impl Default for VadConfig {
    fn default() -> Self {
        Self {
            percentile: 30.0,
            margin_db: 6.0,
            min_segment_ms: 200.0,
            hangover_ms: 200.0,
            absolute_floor_db: -70.0,
            max_flatness: 0.45,
            min_contrast_db: 15.0,
            dynamic_range_db: 40.0,
        }
    }
}

/// Half-open speech interval in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeechSegment {
    pub t_start: f64,
    pub t_end: f64,
}

impl SpeechSegment {
    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.t_start && t < self.t_end
    }
}

/// Per-frame measurements used by the detector.
#[derive(Debug, Clone)]
pub struct FrameStats {
    pub energy_db: Vec<f64>,
    pub flatness: Vec<f64>,
}

pub fn frame_stats(buf: &AudioBuffer) -> FrameStats {
    let rate = buf.sample_rate() as f64;
    let frame_len = (FRAME_LEN_S * rate).round() as usize;
    let hop = (FRAME_HOP_S * rate).round() as usize;
    let Ok(frames) = frame_samples(buf.samples(), frame_len, hop) else {
        return FrameStats { energy_db: vec![], flatness: vec![] };
    };
    let n_fft = frame_len.next_power_of_two();
    let fft = FftPlanner::new().plan_fft_forward(n_fft);
    let window = hamming(frame_len);
    let mut spec = vec![Complex::new(0.0, 0.0); n_fft];
    let mut energy_db = Vec::with_capacity(frames.len());
    let mut flatness = Vec::with_capacity(frames.len());
    for frame in frames {
        let power = frame.iter().map(|v| v * v).sum::<f64>() / frame.len() as f64;
        energy_db.push(10.0 * (power + 1e-12).log10());
        for (i, slot) in spec.iter_mut().enumerate() {
            *slot = Complex::new(if i < frame_len { frame[i] * window[i] } else { 0.0 }, 0.0);
        }
        fft.process(&mut spec);
        let bins = &spec[1..n_fft / 2];
        let arith = bins.iter().map(|c| c.norm_sqr()).sum::<f64>() / bins.len() as f64;
        if arith < 1e-20 {
            flatness.push(1.0);
        } else {
            let log_mean = bins.iter().map(|c| (c.norm_sqr() + 1e-20).ln()).sum::<f64>() / bins.len() as f64;
            flatness.push((log_mean.exp() / arith).min(1.0));
        }
    }
    FrameStats { energy_db, flatness }
}

/// Returns sorted, disjoint speech segments; an empty list when nothing qualifies.
pub fn detect_speech(buf: &AudioBuffer, cfg: &VadConfig) -> Vec<SpeechSegment> {
    let stats = frame_stats(buf);
    let n = stats.energy_db.len();
    if n == 0 {
        return Vec::new();
    }
    let noise = percentile(&stats.energy_db, cfg.percentile);
    let loud = percentile(&stats.energy_db, 95.0);
    // Without enough contrast the low percentile is still speech (few or no
    // pauses), so only the floors apply.
    let floor = cfg.absolute_floor_db.max(loud - cfg.dynamic_range_db);
    let threshold = if loud - noise < cfg.min_contrast_db { floor } else { (noise + cfg.margin_db).max(floor) };
    let active: Vec<bool> = stats
        .energy_db
        .iter()
        .zip(&stats.flatness)
        .map(|(&e, &f)| e > threshold && f < cfg.max_flatness)
        .collect();

    let hop = FRAME_HOP_S;
    let half_hop = hop / 2.0;
    let centre = |i: usize| i as f64 * hop + FRAME_LEN_S / 2.0;
    let duration = buf.duration();

    let mut runs: Vec<SpeechSegment> = Vec::new();
    let mut i = 0;
    while i < n {
        if !active[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i < n && active[i] {
            i += 1;
        }
        let seg = SpeechSegment {
            t_start: (centre(start) - half_hop).max(0.0),
            t_end: (centre(i - 1) + half_hop).min(duration),
        };
        match runs.last_mut() {
            Some(prev) if seg.t_start - prev.t_end < cfg.hangover_ms / 1000.0 => prev.t_end = seg.t_end,
            _ => runs.push(seg),
        }
    }
    let min = cfg.min_segment_ms / 1000.0;
    runs.retain(|s| s.duration() >= min - 1e-9);
    runs
}

/// Keeps the frames whose centres fall inside any segment.
pub fn apply_segments(mel: &MelFrames, segs: &[SpeechSegment]) -> MelFrames {
    let mut seg_idx = 0;
    mel.select(|i| {
        let t = mel.frame_centre(i);
        while seg_idx < segs.len() && segs[seg_idx].t_end <= t {
            seg_idx += 1;
        }
        seg_idx < segs.len() && segs[seg_idx].contains(t)
    })
}

/// Concatenated samples of the speech segments.
pub fn speech_audio(buf: &AudioBuffer, segs: &[SpeechSegment]) -> AudioBuffer {
    let rate = buf.sample_rate() as f64;
    let s = segs
        .iter()
        .flat_map(|seg| {
            let a = ((seg.t_start * rate).round() as usize).min(buf.len());
            let b = ((seg.t_end * rate).round() as usize).min(buf.len());
            buf.samples()[a..b].iter().copied()
        })
        .collect();
    AudioBuffer::new(s, buf.sample_rate()).expect("subset of a valid buffer")
}

/// Linear-interpolated percentile, `p` in `[0, 100]`.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.len() == 1 {
        return v[0];
    }
    let pos = (p / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    fn speech_between_silences(amp: f64) -> AudioBuffer {
        synth::concat(&[
            synth::silence(0.5, 16_000),
            synth::sawtooth(150.0, 2.0, amp, 16_000),
            synth::silence(0.5, 16_000),
        ])
    }

    #[test]
    fn silence_has_no_speech() {
        assert!(detect_speech(&synth::silence(3.0, 16_000), &VadConfig::default()).is_empty());
    }

    #[test]
    fn finds_voiced_block() {
        let segs = detect_speech(&speech_between_silences(0.5), &VadConfig::default());
        assert_eq!(segs.len(), 1, "{segs:?}");
        assert!((segs[0].t_start - 0.5).abs() <= 0.1);
        assert!((segs[0].t_end - 2.5).abs() <= 0.1);
    }

    #[test]
    fn amplitude_scaling_keeps_segmentation() {
        let cfg = VadConfig::default();
        let a = detect_speech(&speech_between_silences(0.5), &cfg);
        for gain in [0.25, 0.1, 0.8] {
            let b = detect_speech(&speech_between_silences(0.5 * gain), &cfg);
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(&b) {
                assert!((x.t_start - y.t_start).abs() <= FRAME_HOP_S + 1e-9);
                assert!((x.t_end - y.t_end).abs() <= FRAME_HOP_S + 1e-9);
            }
        }
    }

    #[test]
    fn bridges_short_gaps_and_drops_blips() {
        let buf = synth::concat(&[
            synth::sawtooth(150.0, 1.0, 0.5, 16_000),
            synth::silence(0.1, 16_000),
            synth::sawtooth(150.0, 1.0, 0.5, 16_000),
            synth::silence(1.0, 16_000),
            synth::sawtooth(150.0, 0.1, 0.5, 16_000),
            synth::silence(1.0, 16_000),
        ]);
        let segs = detect_speech(&buf, &VadConfig::default());
        assert_eq!(segs.len(), 1, "{segs:?}");
        assert!((segs[0].duration() - 2.1).abs() < 0.05);
    }

    #[test]
    fn white_noise_is_not_speech() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let noise: Vec<f64> = (0..32_000).map(|_| rng.random_range(-0.3..0.3)).collect();
        let buf = synth::concat(&[
            AudioBuffer::new(noise, 16_000).unwrap(),
            synth::silence(0.5, 16_000),
        ]);
        assert!(detect_speech(&buf, &VadConfig::default()).is_empty());
    }

    #[test]
    fn stationary_voice_without_pauses_is_all_speech() {
        let segs = detect_speech(&synth::sawtooth(180.0, 3.0, 0.4, 16_000), &VadConfig::default());
        assert_eq!(segs.len(), 1);
        assert!(segs[0].duration() > 2.9);
    }

    #[test]
    fn read_speech_is_mostly_kept() {
        let buf = synth::read_speech(synth::VoiceProfile { f0_hz: 200.0, vtl_cm: 15.0 }, 4.0, 5, 16_000);
        let kept: f64 = detect_speech(&buf, &VadConfig::default()).iter().map(SpeechSegment::duration).sum();
        assert!(kept > 3.4, "{kept}");
    }

    #[test]
    fn quiet_background_between_speech_is_dropped() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mut hum = |secs: f64| {
            let s: Vec<f64> = (0..(secs * 16_000.0) as usize).map(|_| rng.random_range(-0.002..0.002)).collect();
            AudioBuffer::new(s, 16_000).unwrap()
        };
        let buf = synth::concat(&[
            hum(1.0),
            synth::sawtooth(150.0, 1.0, 0.5, 16_000),
            hum(1.0),
            synth::sawtooth(150.0, 1.0, 0.5, 16_000),
            hum(1.0),
        ]);
        let segs = detect_speech(&buf, &VadConfig::default());
        assert_eq!(segs.len(), 2, "{segs:?}");
        assert!((segs[0].t_start - 1.0).abs() < 0.1 && (segs[1].t_end - 4.0).abs() < 0.1);
    }

    fn mel(frames: usize) -> MelFrames {
        MelFrames::from_values((0..frames).map(|i| i as f64).collect(), 1, 0.025, 0.01).unwrap()
    }

    #[test]
    fn apply_segments_cases() {
        let m = mel(300);
        let whole = [SpeechSegment { t_start: 0.0, t_end: 3.1 }];
        assert_eq!(apply_segments(&m, &whole), m);
        assert!(apply_segments(&m, &[]).is_empty());

        let m = mel(500);
        let two = [
            SpeechSegment { t_start: 0.5, t_end: 1.5 },
            SpeechSegment { t_start: 3.0, t_end: 4.0 },
        ];
        let kept = apply_segments(&m, &two);
        assert!((kept.n_frames() as i64 - 200).abs() <= 2, "{}", kept.n_frames());
        assert!(kept.values().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[3.0, 1.0, 2.0], 50.0), 2.0);
        assert_eq!(percentile(&[0.0, 10.0], 30.0), 3.0);
    }

    proptest::proptest! {
        #[test]
        fn segments_sorted_disjoint_and_long_enough(
            blocks in proptest::collection::vec((0.05f64..0.8, 0.05f64..0.8, 0.1f64..0.9), 1..5)
        ) {
            let mut parts = vec![];
            for (sil, voice, amp) in &blocks {
                parts.push(synth::silence(*sil, 16_000));
                parts.push(synth::sawtooth(140.0, *voice, *amp, 16_000));
            }
            let buf = synth::concat(&parts);
            let cfg = VadConfig::default();
            let segs = detect_speech(&buf, &cfg);
            for s in &segs {
                proptest::prop_assert!(s.t_start >= 0.0 && s.t_start < s.t_end && s.t_end <= buf.duration());
                proptest::prop_assert!(s.duration() >= cfg.min_segment_ms / 1000.0 - 1e-9);
            }
            for w in segs.windows(2) {
                proptest::prop_assert!(w[0].t_end <= w[1].t_start);
            }
        }
    }
}
