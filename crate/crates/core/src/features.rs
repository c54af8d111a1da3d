//! Short-time framing, log-Mel filterbank energies, and fixed-size patches.

use std::sync::Arc;

use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::AudioBuffer;

/// Analysis window length in seconds.
pub const FRAME_LEN_S: f64 = 0.025;
/// Analysis hop in seconds.
pub const FRAME_HOP_S: f64 = 0.010;
/// Frames per classifier patch (1515 ms of signal).
pub const PATCH_FRAMES: usize = 150;
/// Patch hop used at inference (50% overlap).
pub const INFERENCE_PATCH_HOP: usize = 75;
/// Natural log of the power floor applied before taking logs.
pub const LOG_FLOOR: f64 = -23.025850929940457; // ln(1e-10)
const POWER_FLOOR: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("signal too short: {samples} samples, need at least {needed}")]
    SignalTooShort { samples: usize, needed: usize },
    #[error("insufficient frames: {frames}, need at least {needed}")]
    InsufficientFrames { frames: usize, needed: usize },
    #[error("invalid feature configuration: {0}")]
    InvalidConfig(String),
}

/// Splits a buffer into overlapping frames; a trailing partial frame is dropped.
pub fn frame_signal(buf: &AudioBuffer, frame_len_s: f64, hop_s: f64) -> Result<Vec<&[f64]>, FeatureError> {
    let rate = buf.sample_rate() as f64;
    let frame_len = (frame_len_s * rate).round() as usize;
    let hop = (hop_s * rate).round() as usize;
    frame_samples(buf.samples(), frame_len, hop)
}

/// Sample-domain framing. Frame count is `floor((len - frame_len) / hop) + 1`.
pub fn frame_samples(samples: &[f64], frame_len: usize, hop: usize) -> Result<Vec<&[f64]>, FeatureError> {
    if hop == 0 || frame_len < hop {
        return Err(FeatureError::InvalidConfig(format!(
            "frame length {frame_len} must be >= hop {hop} > 0"
        )));
    }
    if samples.len() < frame_len {
        return Err(FeatureError::SignalTooShort { samples: samples.len(), needed: frame_len });
    }
    let count = (samples.len() - frame_len) / hop + 1;
    Ok((0..count).map(|i| &samples[i * hop..i * hop + frame_len]).collect())
}

/// Row-major `F x N` matrix of log-Mel energies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelFrames {
    values: Vec<f64>,
    n_bands: usize,
    frame_len: f64,
    frame_hop: f64,
}

impl MelFrames {
    /// Wraps precomputed values. `values.len()` must be a multiple of `n_bands`.
    pub fn from_values(values: Vec<f64>, n_bands: usize, frame_len: f64, frame_hop: f64) -> Result<Self, FeatureError> {
        if n_bands == 0 || values.len() % n_bands != 0 {
            return Err(FeatureError::InvalidConfig(format!(
                "{} values do not form rows of {n_bands} bands",
                values.len()
            )));
        }
        Ok(Self { values, n_bands, frame_len, frame_hop })
    }

    pub fn empty(n_bands: usize) -> Self {
        Self { values: Vec::new(), n_bands, frame_len: FRAME_LEN_S, frame_hop: FRAME_HOP_S }
    }

    pub fn n_frames(&self) -> usize {
        self.values.len() / self.n_bands
    }

    pub fn n_bands(&self) -> usize {
        self.n_bands
    }

    pub fn frame_len(&self) -> f64 {
        self.frame_len
    }

    pub fn frame_hop(&self) -> f64 {
        self.frame_hop
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_bands..(i + 1) * self.n_bands]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.n_bands)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Centre of frame `i` in seconds.
    pub fn frame_centre(&self, i: usize) -> f64 {
        i as f64 * self.frame_hop + self.frame_len / 2.0
    }

    /// Keeps the frames whose index satisfies `keep`, in order.
    pub fn select(&self, mut keep: impl FnMut(usize) -> bool) -> MelFrames {
        let values = (0..self.n_frames())
            .filter(|&i| keep(i))
            .flat_map(|i| self.frame(i).iter().copied())
            .collect();
        MelFrames { values, ..*self }
    }
}

/// A `T x N` window onto a [`MelFrames`] matrix.
#[derive(Debug, Clone, Copy)]
pub struct MelPatch<'a> {
    source: &'a MelFrames,
    start: usize,
    len: usize,
}

impl<'a> MelPatch<'a> {
    /// Row-major `T x N` values, borrowed from the source matrix.
    pub fn values(&self) -> &'a [f64] {
        let n = self.source.n_bands;
        &self.source.values[self.start * n..(self.start + self.len) * n]
    }

    pub fn frames(&self) -> impl Iterator<Item = &'a [f64]> {
        self.values().chunks_exact(self.source.n_bands)
    }

    pub fn n_frames(&self) -> usize {
        self.len
    }

    pub fn n_bands(&self) -> usize {
        self.source.n_bands
    }

    pub fn start_frame(&self) -> usize {
        self.start
    }

    /// Start time of the first frame, in seconds.
    pub fn t_start(&self) -> f64 {
        self.start as f64 * self.source.frame_hop
    }
}

/// Cuts `len`-frame patches every `hop` frames.
pub fn make_patches(mel: &MelFrames, len: usize, hop: usize) -> Result<Vec<MelPatch<'_>>, FeatureError> {
    if hop == 0 || len == 0 {
        return Err(FeatureError::InvalidConfig("patch length and hop must be positive".into()));
    }
    let frames = mel.n_frames();
    if frames < len {
        return Err(FeatureError::InsufficientFrames { frames, needed: len });
    }
    let count = (frames - len) / hop + 1;
    Ok((0..count).map(|i| MelPatch { source: mel, start: i * hop, len }).collect())
}

/// Patch starting at an arbitrary frame (used for random training excerpts).
pub fn patch_at(mel: &MelFrames, start: usize, len: usize) -> Result<MelPatch<'_>, FeatureError> {
    if start + len > mel.n_frames() {
        return Err(FeatureError::InsufficientFrames { frames: mel.n_frames(), needed: start + len });
    }
    Ok(MelPatch { source: mel, start, len })
}

/// HTK Mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular Mel filters over the one-sided power spectrum.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    n_bands: usize,
    n_fft: usize,
    sample_rate: u32,
    /// Per band: first bin and its weights.
    filters: Vec<(usize, Vec<f64>)>,
    centres: Vec<f64>,
}

impl MelFilterbank {
    /// Filters spanning 0 Hz to Nyquist.
    pub fn new(n_bands: usize, n_fft: usize, sample_rate: u32) -> Result<Self, FeatureError> {
        if n_bands < 2 {
            return Err(FeatureError::InvalidConfig(format!("need at least 2 bands, got {n_bands}")));
        }
        let nyquist = sample_rate as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..n_bands + 2)
            .map(|i| mel_to_hz(top * i as f64 / (n_bands + 1) as f64))
            .collect();
        let n_bins = n_fft / 2 + 1;
        let bin_hz = sample_rate as f64 / n_fft as f64;
        let filters = (0..n_bands)
            .map(|b| {
                let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
                let weights: Vec<(usize, f64)> = (0..n_bins)
                    .filter_map(|k| {
                        let f = k as f64 * bin_hz;
                        let w = ((f - lo) / (mid - lo)).min((hi - f) / (hi - mid));
                        (w > 0.0).then_some((k, w))
                    })
                    .collect();
                match weights.first() {
                    Some(&(start, _)) => (start, weights.into_iter().map(|(_, w)| w).collect()),
                    None => (0, Vec::new()),
                }
            })
            .collect();
        Ok(Self { n_bands, n_fft, sample_rate, filters, centres: edges[1..=n_bands].to_vec() })
    }

    pub fn n_bands(&self) -> usize {
        self.n_bands
    }

    /// Centre frequency of each band in Hz.
    pub fn centres(&self) -> &[f64] {
        &self.centres
    }

    /// Dense `N x (n_fft/2 + 1)` weight matrix.
    pub fn dense(&self) -> Vec<Vec<f64>> {
        let n_bins = self.n_fft / 2 + 1;
        self.filters
            .iter()
            .map(|(start, w)| {
                let mut row = vec![0.0; n_bins];
                row[*start..start + w.len()].copy_from_slice(w);
                row
            })
            .collect()
    }

    fn apply(&self, power: &[f64], out: &mut Vec<f64>) {
        for (start, w) in &self.filters {
            let e: f64 = w.iter().zip(&power[*start..]).map(|(a, b)| a * b).sum();
            out.push(e.max(POWER_FLOOR).ln());
        }
    }
}

/// Reusable log-Mel front-end: Hamming window, power spectrum, Mel filters, log.
#[derive(Clone)]
pub struct MelAnalyzer {
    filterbank: MelFilterbank,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    frame_len: usize,
    hop: usize,
}

impl std::fmt::Debug for MelAnalyzer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelAnalyzer")
            .field("n_bands", &self.filterbank.n_bands)
            .field("frame_len", &self.frame_len)
            .field("hop", &self.hop)
            .finish()
    }
}

impl MelAnalyzer {
    /// 25 ms / 10 ms analysis at `sample_rate`.
    pub fn new(n_bands: usize, sample_rate: u32) -> Result<Self, FeatureError> {
        let frame_len = (FRAME_LEN_S * sample_rate as f64).round() as usize;
        let hop = (FRAME_HOP_S * sample_rate as f64).round() as usize;
        let n_fft = frame_len.next_power_of_two();
        let filterbank = MelFilterbank::new(n_bands, n_fft, sample_rate)?;
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Ok(Self { filterbank, window: hamming(frame_len), fft, frame_len, hop })
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    /// Log-Mel energies of already-cut frames.
    pub fn analyze_frames(&self, frames: &[&[f64]]) -> MelFrames {
        let n_fft = self.filterbank.n_fft;
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; n_fft / 2 + 1];
        let mut values = Vec::with_capacity(frames.len() * self.filterbank.n_bands);
        for frame in frames {
            for (i, slot) in buf.iter_mut().enumerate() {
                let s = if i < frame.len() { frame[i] * self.window.get(i).copied().unwrap_or(1.0) } else { 0.0 };
                *slot = Complex::new(s, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            self.filterbank.apply(&power, &mut values);
        }
        let rate = self.filterbank.sample_rate as f64;
        MelFrames {
            values,
            n_bands: self.filterbank.n_bands,
            frame_len: self.frame_len as f64 / rate,
            frame_hop: self.hop as f64 / rate,
        }
    }

    /// Frames and analyzes a whole buffer.
    pub fn analyze(&self, buf: &AudioBuffer) -> Result<MelFrames, FeatureError> {
        let frames = frame_samples(buf.samples(), self.frame_len, self.hop)?;
        Ok(self.analyze_frames(&frames))
    }
}

/// Log-Mel energies of pre-cut frames at 16 kHz.
pub fn mel_filterbank(frames: &[&[f64]], n_bands: usize) -> Result<MelFrames, FeatureError> {
    Ok(MelAnalyzer::new(n_bands, crate::audio::CANONICAL_RATE)?.analyze_frames(frames))
}

/// Symmetric Hamming window.
pub fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, n: usize, amp: f64) -> Vec<f64> {
        (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / 16_000.0).sin())
            .collect()
    }

    #[test]
    fn frame_counts() {
        let one_second = AudioBuffer::new(vec![0.0; 16_000], 16_000).unwrap();
        assert_eq!(frame_signal(&one_second, 0.025, 0.010).unwrap().len(), 98);
        let exact = AudioBuffer::new(vec![0.0; 400], 16_000).unwrap();
        assert_eq!(frame_signal(&exact, 0.025, 0.010).unwrap().len(), 1);
        let short = AudioBuffer::new(vec![0.0; 399], 16_000).unwrap();
        assert_eq!(
            frame_signal(&short, 0.025, 0.010).unwrap_err(),
            FeatureError::SignalTooShort { samples: 399, needed: 400 }
        );
    }

    #[test]
    fn tone_at_band_centre_peaks_in_that_band() {
        let analyzer = MelAnalyzer::new(24, 16_000).unwrap();
        for (k, &c) in analyzer.filterbank().centres().iter().enumerate() {
            let x = tone(c, 400, 0.5);
            let mel = analyzer.analyze_frames(&[&x]);
            let argmax = mel
                .frame(0)
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(argmax, k, "tone at {c:.1} Hz");
        }
    }

    #[test]
    fn zero_frame_hits_log_floor() {
        let z = vec![0.0; 400];
        let mel = mel_filterbank(&[&z], 24).unwrap();
        assert!(mel.frame(0).iter().all(|&v| v == LOG_FLOOR));
        assert!((LOG_FLOOR - 1e-10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn doubling_amplitude_adds_ln4() {
        let x = tone(1000.0, 400, 0.2);
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let a = mel_filterbank(&[&x], 24).unwrap();
        let b = mel_filterbank(&[&x2], 24).unwrap();
        for (u, v) in a.frame(0).iter().zip(b.frame(0)) {
            if *u > LOG_FLOOR + 5.0 {
                assert!((v - u - 4f64.ln()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn filter_rows_nonnegative_and_overlap_at_most_two() {
        for n in [24, 64] {
            let fb = MelFilterbank::new(n, 512, 16_000).unwrap();
            let dense = fb.dense();
            for bin in 0..257 {
                let mut active = vec![];
                for (b, row) in dense.iter().enumerate() {
                    assert!(row[bin] >= 0.0);
                    if row[bin] > 0.0 {
                        active.push(b);
                    }
                }
                assert!(active.len() <= 2);
                if active.len() == 2 {
                    assert_eq!(active[1], active[0] + 1);
                }
            }
        }
    }

    #[test]
    fn time_reversal_reverses_frame_order() {
        // (len - 400) divisible by the hop so reversed frames line up.
        let n = 400 + 160 * 20;
        let x: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 / 16_000.0;
                (0.1 + t) * (2.0 * std::f64::consts::PI * 300.0 * t).sin() * (1.0 + (7.0 * t).cos()) / 4.0
            })
            .collect();
        let rev: Vec<f64> = x.iter().rev().copied().collect();
        let a = MelAnalyzer::new(24, 16_000).unwrap();
        let fwd = a.analyze(&AudioBuffer::new(x, 16_000).unwrap()).unwrap();
        let bwd = a.analyze(&AudioBuffer::new(rev, 16_000).unwrap()).unwrap();
        let f = fwd.n_frames();
        for i in 0..f {
            for (u, v) in fwd.frame(i).iter().zip(bwd.frame(f - 1 - i)) {
                assert!((u - v).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn patch_counts() {
        let mel = |f: usize| MelFrames::from_values(vec![0.0; f * 24], 24, 0.025, 0.01).unwrap();
        assert_eq!(make_patches(&mel(150), 150, 75).unwrap().len(), 1);
        let m = mel(1000);
        let patches = make_patches(&m, 150, 75).unwrap();
        assert_eq!(patches.len(), 12);
        let last = patches.last().unwrap();
        assert!(last.start_frame() + last.n_frames() - 1 < 1000);
        assert_eq!(last.values().len(), 150 * 24);
        assert_eq!(
            make_patches(&mel(149), 150, 75).unwrap_err(),
            FeatureError::InsufficientFrames { frames: 149, needed: 150 }
        );
    }

    #[test]
    fn patches_borrow_source_rows() {
        let values: Vec<f64> = (0..300 * 2).map(|v| v as f64).collect();
        let m = MelFrames::from_values(values, 2, 0.025, 0.01).unwrap();
        let p = make_patches(&m, 150, 75).unwrap();
        assert_eq!(p[1].values()[0], 150.0);
        assert!((p[1].t_start() - 0.75).abs() < 1e-12);
        assert!(std::ptr::eq(p[1].values().as_ptr(), m.frame(75).as_ptr()));
    }
}
