//! Classical voice measurements: F0 track, median F0 in semitones, formants
//! (Burg LPC), and vocal tract length from a uniform closed-open tube.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{resample, AudioBuffer};
use crate::features::{frame_samples, hamming};

#[derive(Debug, Error, PartialEq)]
pub enum AcousticsError {
    #[error("no voiced frames")]
    NoVoicedFrames,
    #[error("formant tracking failed: {0}")]
    FormantTrackingFailed(String),
}

/// Voiced F0 range in Hz.
pub const F0_MIN_HZ: f64 = 50.0;
pub const F0_MAX_HZ: f64 = 600.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PitchConfig {
    pub window_s: f64,
    pub hop_s: f64,
    /// Cumulative-mean-normalized difference below which a dip counts as voiced.
    pub threshold: f64,
    pub f0_min: f64,
    pub f0_max: f64,
    /// Mean-square level under which a frame is unvoiced regardless of shape.
    pub silence_power: f64,
}

impl Default for PitchConfig {
    fn default() -> Self {
        Self { window_s: 0.040, hop_s: 0.010, threshold: 0.15, f0_min: F0_MIN_HZ, f0_max: F0_MAX_HZ, silence_power: 1e-10 }
    }
}

/// Per-frame F0 in Hz, `None` for unvoiced frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PitchTrack {
    pub f0: Vec<Option<f64>>,
    pub frame_hop: f64,
    pub frame_len: f64,
}

impl PitchTrack {
    pub fn voiced(&self) -> impl Iterator<Item = f64> + '_ {
        self.f0.iter().flatten().copied()
    }

    pub fn voiced_count(&self) -> usize {
        self.f0.iter().filter(|f| f.is_some()).count()
    }

    pub fn voiced_fraction(&self) -> f64 {
        if self.f0.is_empty() {
            0.0
        } else {
            self.voiced_count() as f64 / self.f0.len() as f64
        }
    }

    /// Median voiced F0 in Hz.
    pub fn median_hz(&self) -> Result<f64, AcousticsError> {
        median(self.voiced().collect()).ok_or(AcousticsError::NoVoicedFrames)
    }

    /// Whether the frame whose centre is nearest to `t` seconds is voiced.
    pub fn is_voiced_at(&self, t: f64) -> bool {
        if self.f0.is_empty() {
            return false;
        }
        let idx = ((t - self.frame_len / 2.0) / self.frame_hop).round();
        let idx = idx.clamp(0.0, (self.f0.len() - 1) as f64) as usize;
        self.f0[idx].is_some()
    }
}

/// Semitones relative to 1 Hz.
pub fn hz_to_st(hz: f64) -> f64 {
    12.0 * hz.log2()
}

pub fn st_to_hz(st: f64) -> f64 {
    2f64.powf(st / 12.0)
}

pub fn estimate_f0_track(buf: &AudioBuffer) -> PitchTrack {
    estimate_f0_track_with(buf, &PitchConfig::default())
}

/// YIN-style tracker: cumulative-mean-normalized difference, absolute
/// threshold, parabolic refinement of the lag.
pub fn estimate_f0_track_with(buf: &AudioBuffer, cfg: &PitchConfig) -> PitchTrack {
    let fs = buf.sample_rate() as f64;
    let frame_len = (cfg.window_s * fs).round() as usize;
    let hop = (cfg.hop_s * fs).round() as usize;
    let tau_min = ((fs / cfg.f0_max).floor() as usize).max(2);
    let tau_max = (fs / cfg.f0_min).ceil() as usize;
    let f0 = match frame_samples(buf.samples(), frame_len, hop) {
        Ok(frames) if frame_len > tau_max + 1 => {
            let width = frame_len - tau_max;
            let mut diff = vec![0.0; tau_max + 1];
            frames
                .iter()
                .map(|frame| yin_frame(frame, width, tau_min, tau_max, cfg, fs, &mut diff))
                .collect()
        }
        _ => Vec::new(),
    };
    PitchTrack { f0, frame_hop: hop as f64 / fs, frame_len: frame_len as f64 / fs }
}

fn yin_frame(
    frame: &[f64],
    width: usize,
    tau_min: usize,
    tau_max: usize,
    cfg: &PitchConfig,
    fs: f64,
    diff: &mut [f64],
) -> Option<f64> {
    let power = frame[..width].iter().map(|v| v * v).sum::<f64>() / width as f64;
    if power < cfg.silence_power {
        return None;
    }
    diff[0] = 0.0;
    for tau in 1..=tau_max {
        diff[tau] = frame[..width]
            .iter()
            .zip(&frame[tau..tau + width])
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
    }
    // Cumulative mean normalization, in place.
    let mut running = 0.0;
    diff[0] = 1.0;
    for tau in 1..=tau_max {
        running += diff[tau];
        diff[tau] = if running > 0.0 { diff[tau] * tau as f64 / running } else { 1.0 };
    }
    let mut tau = tau_min;
    while tau <= tau_max {
        if diff[tau] < cfg.threshold {
            while tau < tau_max && diff[tau + 1] < diff[tau] {
                tau += 1;
            }
            break;
        }
        tau += 1;
    }
    if tau > tau_max {
        return None;
    }
    let refined = if tau > 1 && tau < tau_max {
        let (a, b, c) = (diff[tau - 1], diff[tau], diff[tau + 1]);
        let denom = a - 2.0 * b + c;
        if denom.abs() > 1e-12 {
            tau as f64 + 0.5 * (a - c) / denom
        } else {
            tau as f64
        }
    } else {
        tau as f64
    };
    let f0 = fs / refined;
    (cfg.f0_min..=cfg.f0_max).contains(&f0).then_some(f0)
}

/// Median voiced F0 in semitones re 1 Hz.
pub fn median_f0_st(track: &PitchTrack) -> Result<f64, AcousticsError> {
    track.median_hz().map(hz_to_st)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FormantConfig {
    /// Analysis rate; the top formant ceiling is half of it.
    pub sample_rate: u32,
    pub lpc_order: usize,
    pub window_s: f64,
    pub hop_s: f64,
    pub min_freq: f64,
    pub max_freq: f64,
    pub max_bandwidth: f64,
    /// Pre-emphasis from this frequency upwards.
    pub pre_emphasis_hz: f64,
    pub min_voiced_frames: usize,
}

impl Default for FormantConfig {
    fn default() -> Self {
        Self {
            sample_rate: 11_000,
            lpc_order: 12,
            window_s: 0.040,
            hop_s: 0.010,
            min_freq: 90.0,
            max_freq: 5500.0,
            max_bandwidth: 400.0,
            pre_emphasis_hz: 50.0,
            min_voiced_frames: 10,
        }
    }
}

/// Median F1..F4 over voiced frames, plus the per-frame candidates they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormantEstimate {
    pub formants: [f64; 4],
    pub per_frame: Vec<[f64; 4]>,
}

impl FormantEstimate {
    /// Builds an estimate from given formant values, checking the ordering
    /// invariant `0 < f1 < f2 < f3 < f4 < 5500`.
    pub fn from_formants(formants: [f64; 4]) -> Result<Self, AcousticsError> {
        check_ordering(&formants)?;
        Ok(Self { formants, per_frame: Vec::new() })
    }
}

fn check_ordering(f: &[f64; 4]) -> Result<(), AcousticsError> {
    let ok = f[0] > 0.0 && f.windows(2).all(|w| w[0] < w[1]) && f[3] < 5500.0;
    if ok {
        Ok(())
    } else {
        Err(AcousticsError::FormantTrackingFailed(format!("formant medians not strictly increasing: {f:?}")))
    }
}

pub fn estimate_formants(buf: &AudioBuffer, track: &PitchTrack) -> Result<FormantEstimate, AcousticsError> {
    estimate_formants_with(buf, track, &FormantConfig::default())
}

/// Burg LPC formants on voiced frames: resample, pre-emphasize, window,
/// root the predictor polynomial, keep narrow in-band resonances, and take
/// the first four per frame.
pub fn estimate_formants_with(
    buf: &AudioBuffer,
    track: &PitchTrack,
    cfg: &FormantConfig,
) -> Result<FormantEstimate, AcousticsError> {
    if track.voiced_count() < cfg.min_voiced_frames {
        return Err(AcousticsError::NoVoicedFrames);
    }
    let low = resample(buf, cfg.sample_rate);
    let fs = cfg.sample_rate as f64;
    let alpha = (-2.0 * std::f64::consts::PI * cfg.pre_emphasis_hz / fs).exp();
    let x = low.samples();
    let emphasized: Vec<f64> = (0..x.len())
        .map(|i| if i == 0 { x[0] } else { x[i] - alpha * x[i - 1] })
        .collect();
    let frame_len = (cfg.window_s * fs).round() as usize;
    let hop = (cfg.hop_s * fs).round() as usize;
    let frames = frame_samples(&emphasized, frame_len, hop).map_err(|_| AcousticsError::NoVoicedFrames)?;
    let window = hamming(frame_len);

    let mut per_frame = Vec::new();
    let mut voiced_frames = 0;
    let mut windowed = vec![0.0; frame_len];
    for (i, frame) in frames.iter().enumerate() {
        let centre = (i * hop) as f64 / fs + cfg.window_s / 2.0;
        if !track.is_voiced_at(centre) {
            continue;
        }
        voiced_frames += 1;
        for ((w, s), h) in windowed.iter_mut().zip(frame.iter()).zip(&window) {
            *w = s * h;
        }
        if windowed.iter().all(|v| *v == 0.0) {
            continue;
        }
        let coeffs = burg(&windowed, cfg.lpc_order);
        let mut cands: Vec<f64> = resonances(&coeffs, fs)
            .into_iter()
            .filter(|&(f, bw)| f >= cfg.min_freq && f < cfg.max_freq && bw < cfg.max_bandwidth)
            .map(|(f, _)| f)
            .collect();
        cands.sort_by(f64::total_cmp);
        if cands.len() >= 4 {
            per_frame.push([cands[0], cands[1], cands[2], cands[3]]);
        }
    }
    if voiced_frames == 0 {
        return Err(AcousticsError::NoVoicedFrames);
    }
    if per_frame.len() < 4 {
        return Err(AcousticsError::FormantTrackingFailed(format!(
            "only {} of {voiced_frames} voiced frames had four stable resonances",
            per_frame.len()
        )));
    }
    let mut formants = [0.0; 4];
    for (k, slot) in formants.iter_mut().enumerate() {
        *slot = median(per_frame.iter().map(|f| f[k]).collect()).expect("non-empty");
    }
    check_ordering(&formants)?;
    Ok(FormantEstimate { formants, per_frame })
}

/// Burg's method. Returns `[1, a1, .., ap]` for `A(z) = 1 + sum a_k z^-k`.
pub fn burg(x: &[f64], order: usize) -> Vec<f64> {
    let n = x.len();
    let mut fwd = x.to_vec();
    let mut bwd = x.to_vec();
    let mut a = vec![0.0; order + 1];
    a[0] = 1.0;
    let mut prev = a.clone();
    for m in 0..order.min(n.saturating_sub(1)) {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in (m + 1)..n {
            num += fwd[i] * bwd[i - 1];
            den += fwd[i] * fwd[i] + bwd[i - 1] * bwd[i - 1];
        }
        let k = if den > 0.0 { -2.0 * num / den } else { 0.0 };
        prev.copy_from_slice(&a);
        for j in 1..=m + 1 {
            a[j] = prev[j] + k * prev[m + 1 - j];
        }
        for i in ((m + 1)..n).rev() {
            let f = fwd[i];
            fwd[i] = f + k * bwd[i - 1];
            bwd[i] = bwd[i - 1] + k * f;
        }
    }
    a
}

/// (frequency, bandwidth) in Hz of each upper-half-plane root of `A(z)`.
pub fn resonances(coeffs: &[f64], fs: f64) -> Vec<(f64, f64)> {
    let p = coeffs.len() - 1;
    if p == 0 {
        return Vec::new();
    }
    let mut companion = DMatrix::<f64>::zeros(p, p);
    for j in 0..p {
        companion[(0, j)] = -coeffs[j + 1] / coeffs[0];
    }
    for i in 1..p {
        companion[(i, i - 1)] = 1.0;
    }
    companion
        .complex_eigenvalues()
        .iter()
        .filter(|r| r.im > 0.0)
        .map(|r| {
            let freq = r.im.atan2(r.re) * fs / (2.0 * std::f64::consts::PI);
            let bw = -(fs / std::f64::consts::PI) * r.norm().ln();
            (freq, bw)
        })
        .collect()
}

/// Speed of sound used by the tube model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VtlConfig {
    /// m/s
    pub speed_of_sound: f64,
}

impl Default for VtlConfig {
    fn default() -> Self {
        Self { speed_of_sound: 350.0 }
    }
}

/// Uniform closed-open tube: mean over k of `(2k-1) c / (4 F_k)`, in cm.
pub fn estimate_vtl(fmt: &FormantEstimate, cfg: &VtlConfig) -> f64 {
    let c_cm = cfg.speed_of_sound * 100.0;
    fmt.formants
        .iter()
        .enumerate()
        .map(|(i, f)| (2 * i + 1) as f64 * c_cm / (4.0 * f))
        .sum::<f64>()
        / 4.0
}

pub(crate) fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    fn constant_track(hz: f64, n: usize) -> PitchTrack {
        PitchTrack { f0: vec![Some(hz); n], frame_hop: 0.01, frame_len: 0.04 }
    }

    #[test]
    fn sawtooth_pitch() {
        let track = estimate_f0_track(&synth::sawtooth(220.0, 2.0, 0.5, 16_000));
        assert!(track.voiced_fraction() >= 0.9);
        assert!((track.median_hz().unwrap() - 220.0).abs() <= 1.0);
    }

    #[test]
    fn silence_is_unvoiced() {
        let track = estimate_f0_track(&synth::silence(1.0, 16_000));
        assert!(!track.f0.is_empty());
        assert_eq!(track.voiced_count(), 0);
        assert_eq!(median_f0_st(&track), Err(AcousticsError::NoVoicedFrames));
    }

    #[test]
    fn pitch_is_amplitude_invariant() {
        let a = estimate_f0_track(&synth::sawtooth(220.0, 2.0, 0.5, 16_000));
        let b = estimate_f0_track(&synth::sawtooth(220.0, 2.0, 0.25, 16_000));
        let va: Vec<bool> = a.f0.iter().map(Option::is_some).collect();
        let vb: Vec<bool> = b.f0.iter().map(Option::is_some).collect();
        assert_eq!(va, vb);
        assert!((a.median_hz().unwrap() - b.median_hz().unwrap()).abs() <= 0.1);
    }

    #[test]
    fn harmonic_signals_within_a_third_of_a_semitone() {
        for f0 in [100.0, 150.0, 200.0, 250.0, 300.0] {
            let track = estimate_f0_track(&synth::harmonic(f0, 10, 1.0, 0.5, 16_000));
            let st = median_f0_st(&track).unwrap();
            assert!((st - hz_to_st(f0)).abs() <= 0.3, "{f0}: {st}");
        }
    }

    #[test]
    fn semitone_values() {
        assert_eq!(median_f0_st(&constant_track(1.0, 5)).unwrap(), 0.0);
        assert!((median_f0_st(&constant_track(2.0, 5)).unwrap() - 12.0).abs() < 1e-12);
        // 12 * ln(220) / ln(2), evaluated independently.
        let expected = 12.0 * 220f64.ln() / 2f64.ln();
        assert!((median_f0_st(&constant_track(220.0, 5)).unwrap() - expected).abs() < 1e-3);
        assert!((expected - 93.376).abs() < 1e-3);
    }

    #[test]
    fn vtl_tube_values() {
        let f = FormantEstimate::from_formants([500.0, 1500.0, 2500.0, 3500.0]).unwrap();
        assert!((estimate_vtl(&f, &VtlConfig::default()) - 17.5).abs() < 1e-12);
        let unordered = FormantEstimate::from_formants([1500.0, 500.0, 2500.0, 3500.0]).unwrap_err();
        assert!(matches!(unordered, AcousticsError::FormantTrackingFailed(_)));
        // Doubling all four (bypassing the 5.5 kHz cap, which only applies to measurements).
        let d = FormantEstimate { formants: [1000.0, 3000.0, 5000.0, 7000.0], per_frame: vec![] };
        assert!((estimate_vtl(&d, &VtlConfig::default()) - 8.75).abs() < 1e-12);
        assert!((estimate_vtl(&f, &VtlConfig { speed_of_sound: 340.0 }) - 17.0).abs() < 1e-12);
    }

    #[test]
    fn burg_recovers_ar2_poles() {
        // y[n] = 2 r cos(w) y[n-1] - r^2 y[n-2] + e[n]
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let (r, w) = (0.95f64, 0.6f64);
        let (a1, a2) = (2.0 * r * w.cos(), -r * r);
        let mut y = vec![0.0; 4000];
        for n in 2..y.len() {
            y[n] = a1 * y[n - 1] + a2 * y[n - 2] + rng.random_range(-1.0..1.0);
        }
        let c = burg(&y, 2);
        assert!((c[1] + a1).abs() < 0.05 && (c[2] + a2).abs() < 0.05, "{c:?}");
    }

    fn vowel_formants(scale: f64) -> FormantEstimate {
        let targets = [500.0, 1500.0, 2500.0, 3500.0].map(|f| f * scale);
        let buf = synth::all_pole_vowel(&targets, &[80.0, 120.0, 160.0, 200.0], 120.0, 1.0, 16_000);
        let track = estimate_f0_track(&buf);
        estimate_formants(&buf, &track).unwrap()
    }

    #[test]
    fn synthetic_vowel_formants() {
        let est = vowel_formants(1.0);
        for (got, want) in est.formants.iter().zip([500.0, 1500.0, 2500.0, 3500.0]) {
            assert!((got - want).abs() / want <= 0.05, "{:?}", est.formants);
        }
    }

    #[test]
    fn scaled_vowel_scales_estimates() {
        let base = vowel_formants(1.0);
        let scaled = vowel_formants(1.1);
        for (a, b) in base.formants.iter().zip(scaled.formants) {
            assert!((b / a - 1.1).abs() <= 0.055, "{:?} vs {:?}", base.formants, scaled.formants);
        }
    }

    #[test]
    fn formants_of_silence_fail() {
        let buf = synth::silence(1.0, 16_000);
        let track = estimate_f0_track(&buf);
        assert_eq!(estimate_formants(&buf, &track), Err(AcousticsError::NoVoicedFrames));
    }

    proptest::proptest! {
        #[test]
        fn octave_is_twelve_semitones(f in 50.0f64..600.0) {
            proptest::prop_assert!((hz_to_st(2.0 * f) - hz_to_st(f) - 12.0).abs() < 1e-9);
        }

        #[test]
        fn vtl_inverse_in_scale(alpha in 0.5f64..1.5) {
            let base = FormantEstimate { formants: [500.0, 1500.0, 2500.0, 3500.0], per_frame: vec![] };
            let scaled = FormantEstimate { formants: base.formants.map(|f| f * alpha), per_frame: vec![] };
            let cfg = VtlConfig::default();
            proptest::prop_assert!((estimate_vtl(&scaled, &cfg) - estimate_vtl(&base, &cfg) / alpha).abs() < 1e-9);
        }
    }
}
