//! Synthetic test signals with known ground truth.
//!
//! Tones, sawtooths, all-pole vowels with prescribed resonances, and a
//! read-speech-like voice whose F0 and vocal tract length are set by a
//! [`VoiceProfile`]. Used as oracles by the test suites and the Python smoke
//! test.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::audio::AudioBuffer;
use crate::Gender;

const TAU: f64 = 2.0 * std::f64::consts::PI;

/// Tube length the vowel templates below were measured for.
pub const TEMPLATE_VTL_CM: f64 = 17.5;

/// F1..F4 (Hz) of five vowels for a 17.5 cm vocal tract.
const VOWELS: [[f64; 4]; 5] = [
    [730.0, 1090.0, 2440.0, 3400.0],
    [270.0, 2290.0, 3010.0, 3700.0],
    [300.0, 870.0, 2240.0, 3400.0],
    [530.0, 1840.0, 2480.0, 3500.0],
    [570.0, 840.0, 2410.0, 3400.0],
];
const VOWEL_BANDWIDTHS: [f64; 4] = [80.0, 100.0, 140.0, 180.0];

pub fn sine(freq: f64, secs: f64, amp: f64, rate: u32) -> AudioBuffer {
    let n = (secs * rate as f64).round() as usize;
    let s = (0..n).map(|i| amp * (TAU * freq * i as f64 / rate as f64).sin()).collect();
    AudioBuffer::new(s, rate).expect("finite tone")
}

pub fn sawtooth(freq: f64, secs: f64, amp: f64, rate: u32) -> AudioBuffer {
    let n = (secs * rate as f64).round() as usize;
    let s = (0..n)
        .map(|i| {
            let phase = (freq * i as f64 / rate as f64).fract();
            amp * (2.0 * phase - 1.0)
        })
        .collect();
    AudioBuffer::new(s, rate).expect("finite sawtooth")
}

/// Sum of the first `n_harmonics` harmonics with 1/k amplitudes, peak-normalized to `amp`.
pub fn harmonic(f0: f64, n_harmonics: usize, secs: f64, amp: f64, rate: u32) -> AudioBuffer {
    let n = (secs * rate as f64).round() as usize;
    let nyq = rate as f64 / 2.0;
    let raw: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / rate as f64;
            (1..=n_harmonics)
                .take_while(|&k| k as f64 * f0 < nyq)
                .map(|k| (TAU * k as f64 * f0 * t).sin() / k as f64)
                .sum()
        })
        .collect();
    AudioBuffer::new(normalize_peak(raw, amp), rate).expect("finite harmonic signal")
}

pub fn silence(secs: f64, rate: u32) -> AudioBuffer {
    AudioBuffer::new(vec![0.0; (secs * rate as f64).round() as usize], rate).expect("silence")
}

/// Concatenates buffers sharing one sample rate.
pub fn concat(parts: &[AudioBuffer]) -> AudioBuffer {
    let rate = parts.first().map(|p| p.sample_rate()).unwrap_or(crate::audio::CANONICAL_RATE);
    assert!(parts.iter().all(|p| p.sample_rate() == rate), "mixed sample rates");
    let s = parts.iter().flat_map(|p| p.samples().iter().copied()).collect();
    AudioBuffer::new(s, rate).expect("concatenation of valid buffers")
}

/// Impulse train at `f0` through a cascade of two-pole resonators.
pub fn all_pole_vowel(formants: &[f64], bandwidths: &[f64], f0: f64, secs: f64, rate: u32) -> AudioBuffer {
    let n = (secs * rate as f64).round() as usize;
    let period = rate as f64 / f0;
    let mut next_pulse = 0.0;
    let excitation: Vec<f64> = (0..n)
        .map(|i| {
            if i as f64 >= next_pulse {
                next_pulse += period;
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let mut bank = ResonatorBank::new(formants.len());
    bank.set(formants, bandwidths, rate);
    let out: Vec<f64> = excitation.into_iter().map(|x| bank.step(x)).collect();
    AudioBuffer::new(normalize_peak(out, 0.5), rate).expect("finite vowel")
}

/// Cascade of second-order resonators with unit DC gain.
struct ResonatorBank {
    coeffs: Vec<(f64, f64, f64)>,
    state: Vec<(f64, f64)>,
}

impl ResonatorBank {
    fn new(n: usize) -> Self {
        Self { coeffs: vec![(1.0, 0.0, 0.0); n], state: vec![(0.0, 0.0); n] }
    }

    fn set(&mut self, freqs: &[f64], bws: &[f64], rate: u32) {
        let fs = rate as f64;
        for (c, (&f, &bw)) in self.coeffs.iter_mut().zip(freqs.iter().zip(bws)) {
            let r = (-std::f64::consts::PI * bw / fs).exp();
            let a1 = 2.0 * r * (TAU * f / fs).cos();
            let a2 = -r * r;
            *c = (1.0 - a1 - a2, a1, a2);
        }
    }

    fn step(&mut self, x: f64) -> f64 {
        let mut v = x;
        for ((g, a1, a2), (y1, y2)) in self.coeffs.iter().zip(self.state.iter_mut()) {
            let y = g * v + a1 * *y1 + a2 * *y2;
            *y2 = *y1;
            *y1 = y;
            v = y;
        }
        v
    }
}

fn normalize_peak(mut x: Vec<f64>, amp: f64) -> Vec<f64> {
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        for v in x.iter_mut() {
            *v *= amp / peak;
        }
    }
    x
}

/// Speaker-level parameters of a synthetic voice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoiceProfile {
    /// Mean fundamental frequency in Hz.
    pub f0_hz: f64,
    /// Vocal tract length in cm; formants scale with `TEMPLATE_VTL_CM / vtl_cm`.
    pub vtl_cm: f64,
}

impl VoiceProfile {
    /// Draws a speaker from `N(f0_mean, f0_sd)` and `N(vtl_mean, vtl_sd)`.
    pub fn sample(rng: &mut impl Rng, f0_mean: f64, f0_sd: f64, vtl_mean: f64, vtl_sd: f64) -> Self {
        let f0 = Normal::new(f0_mean, f0_sd).expect("valid sd").sample(rng);
        let vtl = Normal::new(vtl_mean, vtl_sd).expect("valid sd").sample(rng);
        Self { f0_hz: f0.clamp(60.0, 500.0), vtl_cm: vtl.clamp(10.0, 22.0) }
    }

    /// Typical low voice: F0 ~ N(110, 10) Hz, long tract.
    pub fn sample_low(rng: &mut impl Rng) -> Self {
        Self::sample(rng, 110.0, 10.0, 17.5, 0.6)
    }

    /// Typical high voice: F0 ~ N(210, 15) Hz, short tract.
    pub fn sample_high(rng: &mut impl Rng) -> Self {
        Self::sample(rng, 210.0, 15.0, 14.5, 0.6)
    }
}

/// Member of a synthetic two-class population: high voices are labelled
/// female and low voices male.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpeaker {
    pub id: String,
    pub gender: Gender,
    pub profile: VoiceProfile,
    pub age: f64,
    pub seed: u64,
}

impl SyntheticSpeaker {
    /// The `take`-th recording: fresh prosody and a random level in [-10, 0] dB.
    pub fn recording(&self, take: u64, secs: f64, rate: u32) -> AudioBuffer {
        let seed = self.seed.wrapping_mul(1_000_003).wrapping_add(take);
        let gain = 10f64.powf(-ChaCha8Rng::seed_from_u64(seed ^ 0x5eed).random_range(0.0..10.0) / 20.0);
        let buf = read_speech(self.profile, secs, seed, rate);
        AudioBuffer::new(buf.samples().iter().map(|v| v * gain).collect(), rate).expect("scaled speech")
    }
}

/// `n_per_gender` high and `n_per_gender` low voices with ages uniform in [20, 80).
pub fn population(n_per_gender: usize, seed: u64) -> Vec<SyntheticSpeaker> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * n_per_gender);
    for gender in [Gender::F, Gender::M] {
        for i in 0..n_per_gender {
            let profile = match gender {
                Gender::F => VoiceProfile::sample_high(&mut rng),
                Gender::M => VoiceProfile::sample_low(&mut rng),
            };
            out.push(SyntheticSpeaker {
                id: format!("{gender}{i:04}"),
                gender,
                profile,
                age: rng.random_range(20.0..80.0),
                seed: rng.random(),
            });
        }
    }
    out
}

/// Read-speech-like signal: syllables of varying vowels with an F0 contour,
/// a syllabic amplitude envelope, and occasional short pauses.
pub fn read_speech(profile: VoiceProfile, secs: f64, seed: u64, rate: u32) -> AudioBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = rate as f64;
    let n_total = (secs * fs).round() as usize;
    let scale = TEMPLATE_VTL_CM / profile.vtl_cm;
    let mut out = Vec::with_capacity(n_total);
    let mut bank = ResonatorBank::new(4);
    let mut phase = 0.0f64;
    let mut since_pause = 0.0;
    let mut next_pause = rng.random_range(1.5..3.0);

    while out.len() < n_total {
        let t_global = out.len() as f64 / fs;
        if since_pause >= next_pause {
            let pause = rng.random_range(0.08..0.18);
            let n = ((pause * fs) as usize).min(n_total - out.len());
            out.extend(std::iter::repeat_n(0.0, n));
            since_pause = 0.0;
            next_pause = rng.random_range(1.5..3.0);
            continue;
        }
        let dur = rng.random_range(0.16..0.26);
        let vowel = VOWELS[rng.random_range(0..VOWELS.len())];
        let freqs: Vec<f64> = vowel.iter().map(|f| f * scale).collect();
        bank.set(&freqs, &VOWEL_BANDWIDTHS, rate);
        // Slow declination plus per-syllable accent.
        let accent = 1.0 + rng.random_range(-0.06..0.06);
        let declination = 1.0 + 0.04 * (TAU * t_global / 3.0).cos();
        let f_start = profile.f0_hz * accent * declination;
        let f_end = f_start * (1.0 + rng.random_range(-0.04..0.04));
        let n = ((dur * fs) as usize).min(n_total - out.len());
        for i in 0..n {
            let u = i as f64 / n as f64;
            let f0 = f_start + (f_end - f_start) * u;
            phase += f0 / fs;
            if phase >= 1.0 {
                phase -= 1.0;
            }
            // Sawtooth source with a small breath-noise component.
            let src = (2.0 * phase - 1.0) + 0.02 * rng.random_range(-1.0..1.0);
            let env = 0.35 + 0.65 * (std::f64::consts::PI * u).sin();
            out.push(env * bank.step(src));
        }
        since_pause += dur;
    }
    out.truncate(n_total);
    // Per-syllable filter gain varies; normalize the whole utterance.
    let mut out = normalize_peak(out, 0.6);
    for v in out.iter_mut() {
        *v = v.clamp(-1.0, 1.0);
    }
    AudioBuffer::new(out, rate).expect("finite speech")
}

/// Recording whose first `fraction` of the duration is `high` and the rest `low`.
pub fn mixture(high: VoiceProfile, low: VoiceProfile, fraction: f64, secs: f64, seed: u64, rate: u32) -> AudioBuffer {
    let fraction = fraction.clamp(0.0, 1.0);
    let split = (fraction * secs * rate as f64).round() as usize;
    let a = read_speech(high, secs, seed, rate);
    let b = read_speech(low, secs, seed.wrapping_add(1), rate);
    let s: Vec<f64> = a.samples()[..split].iter().chain(&b.samples()[split..]).copied().collect();
    AudioBuffer::new(s, rate).expect("finite mixture")
}
