//! WAV decoding and sample-rate conversion.
//!
//! Everything downstream works on [`AudioBuffer`]s: mono, amplitudes in
//! `[-1, 1]`, and (after [`load_wav`]) sampled at [`CANONICAL_RATE`].

use std::io::Cursor;
use std::path::Path;
use std::sync::OnceLock;

use thiserror::Error;

/// Sample rate expected by the feature front-end and the classifiers.
pub const CANONICAL_RATE: u32 = 16_000;

/// Number of taps of the windowed-sinc kernel at the lower of the two rates.
const RESAMPLER_TAPS: usize = 64;
const KAISER_BETA: f64 = 8.6;
/// Kernel table resolution (entries per tap).
const TABLE_DENSITY: usize = 512;
/// Passband edge as a fraction of the lower Nyquist frequency.
const CUTOFF: f64 = 0.97;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("malformed WAV container: {0}")]
    MalformedContainer(String),
    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("invalid audio buffer: {0}")]
    InvalidBuffer(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Mono audio with amplitudes in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioBuffer {
    /// Builds a buffer, clamping amplitudes into `[-1, 1]`.
    ///
    /// Fails on a zero sample rate or non-finite samples.
    pub fn new(mut samples: Vec<f64>, sample_rate: u32) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::InvalidBuffer("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(AudioError::InvalidBuffer(format!("non-finite sample at index {i}")));
        }
        for s in samples.iter_mut() {
            *s = s.clamp(-1.0, 1.0);
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Duration in seconds.
    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }
}

/// Decodes a RIFF/WAVE file (PCM 16-bit or IEEE float32, one or two
/// channels, any rate) into a mono buffer at [`CANONICAL_RATE`].
pub fn load_wav(bytes: &[u8]) -> Result<AudioBuffer, AudioError> {
    let reader = hound::WavReader::new(Cursor::new(bytes)).map_err(map_hound_error)?;
    let spec = reader.spec();
    if spec.channels == 0 || spec.channels > 2 {
        return Err(AudioError::UnsupportedEncoding(format!(
            "{} channels (mono or stereo only)",
            spec.channels
        )));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(map_hound_error)?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<Result<_, _>>()
            .map_err(map_hound_error)?,
        (fmt, bits) => {
            return Err(AudioError::UnsupportedEncoding(format!(
                "{bits}-bit {fmt:?} samples (PCM16 or float32 only)"
            )))
        }
    };
    let channels = spec.channels as usize;
    let mono: Vec<f64> = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    let buf = AudioBuffer::new(mono, spec.sample_rate)?;
    Ok(resample(&buf, CANONICAL_RATE))
}

/// Reads and decodes a WAV file from disk.
pub fn read_wav_file(path: impl AsRef<Path>) -> Result<AudioBuffer, AudioError> {
    let bytes = std::fs::read(path)?;
    load_wav(&bytes)
}

/// Encodes a buffer as a mono PCM 16-bit WAV file.
pub fn encode_wav_pcm16(buf: &AudioBuffer) -> Vec<u8> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: buf.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut out = Cursor::new(Vec::with_capacity(44 + 2 * buf.len()));
    {
        // Writing into a Vec cannot fail.
        let mut writer = hound::WavWriter::new(&mut out, spec).expect("in-memory wav writer");
        for &s in &buf.samples {
            let v = (s * 32767.0).round() as i16;
            writer.write_sample(v).expect("in-memory wav write");
        }
        writer.finalize().expect("in-memory wav finalize");
    }
    out.into_inner()
}

fn map_hound_error(err: hound::Error) -> AudioError {
    match err {
        hound::Error::Unsupported => AudioError::UnsupportedEncoding("unsupported WAV format".into()),
        hound::Error::IoError(e) => AudioError::MalformedContainer(e.to_string()),
        other => AudioError::MalformedContainer(other.to_string()),
    }
}

/// Windowed-sinc (Kaiser) sample-rate conversion.
///
/// The kernel spans [`RESAMPLER_TAPS`] taps at the lower of the two rates and
/// cuts off just below that rate's Nyquist frequency. Converting to the
/// buffer's own rate returns the samples untouched.
pub fn resample(buf: &AudioBuffer, target: u32) -> AudioBuffer {
    assert!(target > 0, "target sample rate must be positive");
    let src = buf.sample_rate;
    if target == src || buf.is_empty() {
        return AudioBuffer { samples: buf.samples.clone(), sample_rate: target };
    }
    let ratio = target as f64 / src as f64;
    // Kernel stretch: downsampling widens the kernel in input samples.
    let scale = ratio.min(1.0);
    let half_width = (RESAMPLER_TAPS / 2) as f64 / scale;
    let out_len = ((buf.len() as u64 * target as u64 + src as u64 / 2) / src as u64) as usize;
    let table = kernel_table();
    let input = &buf.samples;
    let last = input.len() as isize - 1;

    let samples = (0..out_len)
        .map(|n| {
            let centre = n as f64 / ratio;
            let lo = (centre - half_width).ceil().max(0.0) as isize;
            let hi = ((centre + half_width).floor() as isize).min(last);
            let mut acc = 0.0;
            for k in lo..=hi {
                let d = (centre - k as f64).abs() * scale;
                acc += input[k as usize] * lookup(table, d);
            }
            (acc * scale).clamp(-1.0, 1.0)
        })
        .collect();
    AudioBuffer { samples, sample_rate: target }
}

/// Kernel sampled at `TABLE_DENSITY` points per tap over `[0, taps/2]`.
fn kernel_table() -> &'static [f64] {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let half = (RESAMPLER_TAPS / 2) as f64;
        let n = RESAMPLER_TAPS / 2 * TABLE_DENSITY + 2;
        let i0_beta = bessel_i0(KAISER_BETA);
        (0..n)
            .map(|i| {
                let d = i as f64 / TABLE_DENSITY as f64;
                if d >= half {
                    return 0.0;
                }
                let u = d / half;
                let window = bessel_i0(KAISER_BETA * (1.0 - u * u).sqrt()) / i0_beta;
                CUTOFF * sinc(CUTOFF * d) * window
            })
            .collect()
    })
}

fn lookup(table: &[f64], d: f64) -> f64 {
    let pos = d * TABLE_DENSITY as f64;
    let i = pos as usize;
    if i + 1 >= table.len() {
        return 0.0;
    }
    let frac = pos - i as f64;
    table[i] + (table[i + 1] - table[i]) * frac
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..64 {
        term *= (half / k as f64).powi(2);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::{num_complex::Complex, FftPlanner};

    fn tone(freq: f64, rate: u32, secs: f64, amp: f64) -> AudioBuffer {
        let n = (rate as f64 * secs) as usize;
        let s = (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin())
            .collect();
        AudioBuffer::new(s, rate).unwrap()
    }

    fn wav_bytes(channels: u16, rate: u32, frames: &[Vec<i16>]) -> Vec<u8> {
        let spec = hound::WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut out = Cursor::new(Vec::new());
        let mut w = hound::WavWriter::new(&mut out, spec).unwrap();
        for f in frames {
            for &s in f {
                w.write_sample(s).unwrap();
            }
        }
        w.finalize().unwrap();
        out.into_inner()
    }

    fn peak_bin_hz(buf: &AudioBuffer) -> f64 {
        let n = buf.len();
        let mut data: Vec<Complex<f64>> =
            buf.samples().iter().map(|&s| Complex::new(s, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut data);
        let (bin, _) = data[..n / 2]
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.norm().total_cmp(&b.1.norm()))
            .unwrap();
        bin as f64 * buf.sample_rate() as f64 / n as f64
    }

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    #[test]
    fn silence_decodes_to_zeros() {
        let bytes = wav_bytes(1, 16_000, &[vec![0; 16_000]]);
        let buf = load_wav(&bytes).unwrap();
        assert_eq!(buf.len(), 16_000);
        assert!(buf.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn identical_stereo_channels_average_to_either() {
        let ch: Vec<i16> = (0..1600).map(|i| ((i * 37) % 2000) as i16 - 1000).collect();
        let interleaved: Vec<i16> = ch.iter().flat_map(|&s| [s, s]).collect();
        let buf = load_wav(&wav_bytes(2, 16_000, &[interleaved])).unwrap();
        let mono = load_wav(&wav_bytes(1, 16_000, &[ch])).unwrap();
        assert_eq!(buf, mono);
    }

    #[test]
    fn eight_khz_upsamples_to_canonical_length() {
        let bytes = wav_bytes(1, 8_000, &[vec![100; 8_000]]);
        let buf = load_wav(&bytes).unwrap();
        assert_eq!(buf.sample_rate(), CANONICAL_RATE);
        assert!((buf.len() as i64 - 16_000).abs() <= 1);
    }

    #[test]
    fn float32_and_rejections() {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16_000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut out = Cursor::new(Vec::new());
        let mut w = hound::WavWriter::new(&mut out, spec).unwrap();
        for _ in 0..100 {
            w.write_sample(0.5f32).unwrap();
        }
        w.finalize().unwrap();
        let buf = load_wav(&out.into_inner()).unwrap();
        assert!(buf.samples().iter().all(|&s| s == 0.5));

        assert!(matches!(load_wav(b"not a wav"), Err(AudioError::MalformedContainer(_))));
        assert!(matches!(load_wav(&[]), Err(AudioError::MalformedContainer(_))));
        let three = wav_bytes(3, 16_000, &[vec![0; 30]]);
        assert!(matches!(load_wav(&three), Err(AudioError::UnsupportedEncoding(_))));
    }

    #[test]
    fn identity_resample_is_bit_identical() {
        let t = tone(440.0, 16_000, 0.1, 0.3);
        assert_eq!(resample(&t, 16_000), t);
    }

    #[test]
    fn downsampled_tone_keeps_its_frequency() {
        let t = tone(440.0, 48_000, 1.0, 0.5);
        let r = resample(&t, 16_000);
        assert_eq!(r.len(), 16_000);
        // 1 s of signal: bins are 1 Hz wide.
        assert!((peak_bin_hz(&r) - 440.0).abs() <= 1.0);
    }

    #[test]
    fn tone_frequency_preserved_within_tenth_percent() {
        for (from, to, f) in [(16_000, 11_000, 1234.0), (8_000, 16_000, 700.0), (44_100, 16_000, 3000.0)] {
            let r = resample(&tone(f, from, 2.0, 0.5), to);
            let got = peak_bin_hz(&r);
            assert!((got - f).abs() / f < 1e-3, "{from}->{to}: {got} vs {f}");
        }
    }

    #[test]
    fn duration_preserved_for_formant_rate() {
        let t = tone(200.0, 16_000, 1.0, 0.5);
        let r = resample(&t, 11_000);
        assert!((r.duration() - t.duration()).abs() <= 1.0 / 11_000.0);
    }

    #[test]
    fn round_trip_preserves_rms() {
        let t = tone(300.0, 16_000, 1.0, 0.6);
        let back = resample(&resample(&t, 11_000), 16_000);
        let a = rms(t.samples());
        let b = rms(back.samples());
        assert!((a - b).abs() / a < 0.01, "{a} vs {b}");
    }

    #[test]
    fn amplitudes_stay_in_range() {
        let square: Vec<f64> = (0..4000).map(|i| if (i / 20) % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let buf = AudioBuffer::new(square, 16_000).unwrap();
        let r = resample(&buf, 44_100);
        assert!(r.samples().iter().all(|s| (-1.0..=1.0).contains(s)));
    }

    #[test]
    fn rejects_non_finite_samples() {
        assert!(AudioBuffer::new(vec![0.0, f64::NAN], 16_000).is_err());
        assert!(AudioBuffer::new(vec![0.0], 0).is_err());
    }
}
