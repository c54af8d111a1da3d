//! Binary gender scoring of one patch or embedding.
//!
//! Two architecture families share one [`ModelBundle`] container: a
//! temporal-pooling CNN over log-Mel patches and an MLP over fixed-size
//! vectors (pooled patch statistics or external speaker embeddings).
//!
//! Bundle file layout: the magic `VFPMODEL`, a little-endian `u32` header
//! length, a JSON header (version, arch, feature config, metadata, and the
//! name and shape of every tensor), then each tensor's values as
//! little-endian `f32` in header order.

pub mod mlp;
pub mod tpcnn;

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::MelPatch;
use mlp::{Dense, Mlp};
use tpcnn::{ConvBlock, Tpcnn};

pub const MODEL_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"VFPMODEL";
/// Allowed layer widths and filter counts.
pub const LAYER_SIZES: [usize; 5] = [32, 64, 128, 256, 512];
pub const KERNEL_SIZES: [usize; 4] = [3, 5, 7, 9];
/// Dimension of external speaker embeddings.
pub const EMBEDDING_DIM: usize = 256;
pub const DROPOUT_RATE: f64 = 0.2;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("shape underflow: {0}")]
    ShapeUnderflow(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: String, got: String },
    #[error("unsupported model version {0}")]
    VersionMismatch(u32),
    #[error("corrupt weights: {0}")]
    CorruptWeights(String),
    #[error("{path}:{line}: embedding has {got} values, expected {expected}")]
    BadDimension { path: String, line: usize, got: usize, expected: usize },
    #[error("{path}:{line}: duplicate recording id {id}")]
    DuplicateId { path: String, line: usize, id: String },
    #[error("{path}:{line}: {message}")]
    BadRow { path: String, line: usize, message: String },
    #[error("model i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// 1x2 (frequency invariance).
    Freq,
    /// 2x1 (time invariance).
    Time,
    /// 2x2.
    TimeFreq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpcnnSpec {
    pub n_conv: usize,
    pub n_dense: usize,
    pub n_filters: usize,
    pub n_neurons: usize,
    /// K1
    pub kernel_time: usize,
    /// K2
    pub kernel_freq: usize,
    /// One entry per slot between consecutive blocks (`n_conv - 1`).
    pub pooling: Vec<Pooling>,
    #[serde(default = "default_time")]
    pub n_time: usize,
    #[serde(default = "default_bands")]
    pub n_bands: usize,
}

fn default_time() -> usize {
    crate::features::PATCH_FRAMES
}

fn default_bands() -> usize {
    24
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ArchSpec {
    Tpcnn(TpcnnSpec),
    Mlp(MlpSpec),
}

impl ArchSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidArch(m));
        match self {
            ArchSpec::Tpcnn(s) => {
                if !(2..=5).contains(&s.n_conv) {
                    return bad(format!("n_conv {} outside 2..=5", s.n_conv));
                }
                if s.n_dense > 4 {
                    return bad(format!("n_dense {} outside 0..=4", s.n_dense));
                }
                if !LAYER_SIZES.contains(&s.n_filters) || !LAYER_SIZES.contains(&s.n_neurons) {
                    return bad(format!("n_filters/n_neurons must be in {LAYER_SIZES:?}"));
                }
                if !KERNEL_SIZES.contains(&s.kernel_time) || !KERNEL_SIZES.contains(&s.kernel_freq) {
                    return bad(format!("kernel sizes must be in {KERNEL_SIZES:?}"));
                }
                if s.pooling.len() != s.n_conv - 1 {
                    return bad(format!("{} pooling slots for {} blocks", s.pooling.len(), s.n_conv));
                }
                tpcnn::walk_shapes(s)?;
            }
            ArchSpec::Mlp(s) => {
                if s.input_dim == 0 {
                    return bad("input_dim must be positive".into());
                }
                if !(1..=4).contains(&s.hidden.len()) {
                    return bad(format!("{} hidden layers outside 1..=4", s.hidden.len()));
                }
                if let Some(h) = s.hidden.iter().find(|h| !LAYER_SIZES.contains(h)) {
                    return bad(format!("hidden size {h} not in {LAYER_SIZES:?}"));
                }
            }
        }
        Ok(())
    }

    /// Tensor names and shapes in storage order.
    pub fn tensor_layout(&self) -> Result<Vec<(String, Vec<usize>)>, ModelError> {
        let mut out = Vec::new();
        let dense = |out: &mut Vec<(String, Vec<usize>)>, name: &str, n_in: usize, n_out: usize| {
            out.push((format!("{name}.weight"), vec![n_out, n_in]));
            out.push((format!("{name}.bias"), vec![n_out]));
        };
        match self {
            ArchSpec::Mlp(s) => {
                let mut n_in = s.input_dim;
                for (i, &h) in s.hidden.iter().enumerate() {
                    dense(&mut out, &format!("dense{i}"), n_in, h);
                    n_in = h;
                }
                dense(&mut out, "out", n_in, 1);
            }
            ArchSpec::Tpcnn(s) => {
                let shapes = tpcnn::walk_shapes(s)?;
                let mut c_in = 1;
                for i in 0..s.n_conv {
                    out.push((format!("conv{i}.weight"), vec![s.n_filters, c_in, s.kernel_time, s.kernel_freq]));
                    out.push((format!("conv{i}.bias"), vec![s.n_filters]));
                    for stat in ["gamma", "beta", "running_mean", "running_var"] {
                        out.push((format!("bn{i}.{stat}"), vec![s.n_filters]));
                    }
                    c_in = s.n_filters;
                }
                let (_, freq, channels) = *shapes.last().expect("n_conv >= 2");
                let mut n_in = channels * freq;
                for j in 0..s.n_dense {
                    dense(&mut out, &format!("dense{j}"), n_in, s.n_neurons);
                    n_in = s.n_neurons;
                }
                dense(&mut out, "out", n_in, 1);
            }
        }
        Ok(out)
    }

    /// Number of stored scalars (batch-norm running statistics included).
    pub fn parameter_count(&self) -> Result<usize, ModelError> {
        Ok(self.tensor_layout()?.iter().map(|(_, s)| s.iter().product::<usize>()).sum())
    }
}

/// What the model consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    /// Raw `T x N` log-Mel patch.
    MelPatch,
    /// Per-band mean and standard deviation of a patch (`2N` values).
    PooledStats,
    /// External fixed-size speaker embedding.
    ExternalEmbedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub n_bands: usize,
    pub input: InputKind,
    /// Per-utterance mean/variance normalization of Mel features (not applied by this version).
    #[serde(default)]
    pub cmvn: bool,
    /// Whether `input.mean` / `input.scale` tensors standardize MLP inputs.
    #[serde(default)]
    pub standardize: bool,
}

impl FeatureConfig {
    pub fn pooled_stats(n_bands: usize) -> Self {
        Self { n_bands, input: InputKind::PooledStats, cmvn: false, standardize: false }
    }

    pub fn mel_patch(n_bands: usize) -> Self {
        Self { n_bands, input: InputKind::MelPatch, cmvn: false, standardize: false }
    }

    pub fn external() -> Self {
        Self { n_bands: 64, input: InputKind::ExternalEmbedding, cmvn: false, standardize: false }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    #[serde(default)]
    pub training_corpus: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    arch: ArchSpec,
    feature_config: FeatureConfig,
    metadata: ModelMetadata,
    tensors: Vec<TensorInfo>,
}

#[derive(Debug, Clone, PartialEq)]
enum Network {
    Mlp(Mlp),
    Tpcnn(Tpcnn),
}

#[derive(Debug, Clone, PartialEq)]
struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

/// Architecture, weights (stored as `f32`), and feature configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    arch: ArchSpec,
    feature_config: FeatureConfig,
    pub metadata: ModelMetadata,
    tensors: Vec<(TensorInfo, Vec<f32>)>,
    net: Network,
    standardizer: Option<Standardizer>,
}

/// Model input.
#[derive(Debug, Clone, Copy)]
pub enum ModelInput<'a> {
    Patch(&'a MelPatch<'a>),
    Vector(&'a [f64]),
}

/// Window-level output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenderScore {
    pub t_start: f64,
    pub p_female: f64,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Keeps probabilities strictly inside (0, 1).
fn open_unit(p: f64) -> f64 {
    p.clamp(1e-12, 1.0 - 1e-12)
}

/// He-uniform initialization: `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
pub(crate) fn he_uniform(fan_in: usize, n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let limit = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.random_range(-limit..limit)).collect()
}

/// Per-band mean and population standard deviation over the patch frames.
pub fn pooled_stats_embedding(patch: &MelPatch<'_>) -> Vec<f64> {
    pooled_stats_values(patch.values(), patch.n_bands())
}

/// Same as [`pooled_stats_embedding`] over row-major `frames x n_bands` values.
pub fn pooled_stats_values(values: &[f64], n_bands: usize) -> Vec<f64> {
    let rows = || values.chunks_exact(n_bands);
    let mut mean = vec![0.0; n_bands];
    let mut count = 0.0;
    for row in rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
        count += 1.0;
    }
    for m in mean.iter_mut() {
        *m /= count;
    }
    let mut var = vec![0.0; n_bands];
    for row in rows() {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    mean.into_iter().chain(var.into_iter().map(|s| (s / count).sqrt())).collect()
}

/// Initializes a model: He-uniform weights, zero biases, identity batch norm.
pub fn build_model(arch: &ArchSpec, feature_config: FeatureConfig, seed: u64) -> Result<ModelBundle, ModelError> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = match arch {
        ArchSpec::Mlp(s) => {
            let mut sizes = vec![s.input_dim];
            sizes.extend(&s.hidden);
            sizes.push(1);
            Network::Mlp(Mlp::new(&sizes, &mut rng))
        }
        ArchSpec::Tpcnn(s) => {
            let shapes = tpcnn::walk_shapes(s)?;
            let mut c_in = 1;
            let blocks = (0..s.n_conv)
                .map(|_| {
                    let fan_in = c_in * s.kernel_time * s.kernel_freq;
                    let block = ConvBlock {
                        in_channels: c_in,
                        out_channels: s.n_filters,
                        kernel_time: s.kernel_time,
                        kernel_freq: s.kernel_freq,
                        weight: he_uniform(fan_in, fan_in * s.n_filters, &mut rng),
                        bias: vec![0.0; s.n_filters],
                        gamma: vec![1.0; s.n_filters],
                        beta: vec![0.0; s.n_filters],
                        running_mean: vec![0.0; s.n_filters],
                        running_var: vec![1.0; s.n_filters],
                    };
                    c_in = s.n_filters;
                    block
                })
                .collect();
            let (_, freq, channels) = *shapes.last().expect("n_conv >= 2");
            let mut n_in = channels * freq;
            let mut dense = Vec::new();
            for _ in 0..s.n_dense {
                dense.push(Dense::new(n_in, s.n_neurons, &mut rng));
                n_in = s.n_neurons;
            }
            dense.push(Dense::new(n_in, 1, &mut rng));
            Network::Tpcnn(Tpcnn { spec: s.clone(), blocks, dense })
        }
    };
    let metadata = ModelMetadata { seed, ..Default::default() };
    ModelBundle::from_network(arch.clone(), feature_config, metadata, net, None)
}

impl ModelBundle {
    fn from_network(
        arch: ArchSpec,
        feature_config: FeatureConfig,
        metadata: ModelMetadata,
        net: Network,
        standardizer: Option<Standardizer>,
    ) -> Result<Self, ModelError> {
        let mut named: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut put_dense = |name: &str, d: &Dense| {
            named.insert(format!("{name}.weight"), d.weight.clone());
            named.insert(format!("{name}.bias"), d.bias.clone());
        };
        match &net {
            Network::Mlp(m) => {
                let last = m.layers.len() - 1;
                for (i, l) in m.layers.iter().enumerate() {
                    put_dense(&if i == last { "out".to_string() } else { format!("dense{i}") }, l);
                }
            }
            Network::Tpcnn(t) => {
                let last = t.dense.len() - 1;
                for (i, l) in t.dense.iter().enumerate() {
                    put_dense(&if i == last { "out".to_string() } else { format!("dense{i}") }, l);
                }
                for (i, b) in t.blocks.iter().enumerate() {
                    named.insert(format!("conv{i}.weight"), b.weight.clone());
                    named.insert(format!("conv{i}.bias"), b.bias.clone());
                    named.insert(format!("bn{i}.gamma"), b.gamma.clone());
                    named.insert(format!("bn{i}.beta"), b.beta.clone());
                    named.insert(format!("bn{i}.running_mean"), b.running_mean.clone());
                    named.insert(format!("bn{i}.running_var"), b.running_var.clone());
                }
            }
        }
        let mut layout = arch.tensor_layout()?;
        if let Some(s) = &standardizer {
            named.insert("input.mean".into(), s.mean.clone());
            named.insert("input.scale".into(), s.scale.clone());
            layout.push(("input.mean".into(), vec![s.mean.len()]));
            layout.push(("input.scale".into(), vec![s.scale.len()]));
        }
        let tensors = layout
            .into_iter()
            .map(|(name, shape)| {
                let data: Vec<f32> = named.remove(&name).expect("layout matches network").iter().map(|&v| v as f32).collect();
                (TensorInfo { name, shape }, data)
            })
            .collect();
        Self::from_tensors(arch, FeatureConfig { standardize: standardizer.is_some(), ..feature_config }, metadata, tensors)
    }

    /// Rebuilds the network from stored `f32` tensors, validating shapes.
    fn from_tensors(
        arch: ArchSpec,
        feature_config: FeatureConfig,
        metadata: ModelMetadata,
        tensors: Vec<(TensorInfo, Vec<f32>)>,
    ) -> Result<Self, ModelError> {
        arch.validate()?;
        let mut expected = arch.tensor_layout()?;
        if feature_config.standardize {
            let dim = match &arch {
                ArchSpec::Mlp(s) => s.input_dim,
                ArchSpec::Tpcnn(_) => {
                    return Err(ModelError::CorruptWeights("input standardization only applies to MLPs".into()))
                }
            };
            expected.push(("input.mean".into(), vec![dim]));
            expected.push(("input.scale".into(), vec![dim]));
        }
        if expected.len() != tensors.len() {
            return Err(ModelError::CorruptWeights(format!("expected {} tensors, found {}", expected.len(), tensors.len())));
        }
        let mut by_name: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for ((name, shape), (info, data)) in expected.iter().zip(&tensors) {
            if &info.name != name || &info.shape != shape || data.len() != shape.iter().product::<usize>() {
                return Err(ModelError::CorruptWeights(format!(
                    "tensor {} {:?} does not match expected {name} {shape:?}",
                    info.name, info.shape
                )));
            }
            if data.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::CorruptWeights(format!("non-finite value in {name}")));
            }
            by_name.insert(name.as_str(), data.iter().map(|&v| v as f64).collect());
        }
        let mut take = |name: &str| by_name.remove(name).expect("validated above");
        let mut dense = |name: &str, n_in: usize, n_out: usize| Dense {
            n_in,
            n_out,
            weight: take(&format!("{name}.weight")),
            bias: take(&format!("{name}.bias")),
        };
        let net = match &arch {
            ArchSpec::Mlp(s) => {
                let mut layers = Vec::new();
                let mut n_in = s.input_dim;
                for (i, &h) in s.hidden.iter().enumerate() {
                    layers.push(dense(&format!("dense{i}"), n_in, h));
                    n_in = h;
                }
                layers.push(dense("out", n_in, 1));
                Network::Mlp(Mlp { layers })
            }
            ArchSpec::Tpcnn(s) => {
                let shapes = tpcnn::walk_shapes(s)?;
                let (_, freq, channels) = *shapes.last().expect("n_conv >= 2");
                let mut n_in = channels * freq;
                let mut dense_layers = Vec::new();
                for j in 0..s.n_dense {
                    dense_layers.push(dense(&format!("dense{j}"), n_in, s.n_neurons));
                    n_in = s.n_neurons;
                }
                dense_layers.push(dense("out", n_in, 1));
                let mut c_in = 1;
                let blocks = (0..s.n_conv)
                    .map(|i| {
                        let b = ConvBlock {
                            in_channels: c_in,
                            out_channels: s.n_filters,
                            kernel_time: s.kernel_time,
                            kernel_freq: s.kernel_freq,
                            weight: take(&format!("conv{i}.weight")),
                            bias: take(&format!("conv{i}.bias")),
                            gamma: take(&format!("bn{i}.gamma")),
                            beta: take(&format!("bn{i}.beta")),
                            running_mean: take(&format!("bn{i}.running_mean")),
                            running_var: take(&format!("bn{i}.running_var")),
                        };
                        c_in = s.n_filters;
                        b
                    })
                    .collect();
                Network::Tpcnn(Tpcnn { spec: s.clone(), blocks, dense: dense_layers })
            }
        };
        let standardizer = feature_config
            .standardize
            .then(|| Standardizer { mean: take("input.mean"), scale: take("input.scale") });
        Ok(Self { arch, feature_config, metadata, tensors, net, standardizer })
    }

    /// Wraps a trained MLP, rounding its weights to the stored `f32` precision.
    pub fn from_mlp(
        mlp: &Mlp,
        feature_config: FeatureConfig,
        metadata: ModelMetadata,
        input_standardization: Option<(Vec<f64>, Vec<f64>)>,
    ) -> Result<Self, ModelError> {
        let hidden = mlp.layers[..mlp.layers.len() - 1].iter().map(|l| l.n_out).collect();
        let arch = ArchSpec::Mlp(MlpSpec { input_dim: mlp.input_dim(), hidden });
        let standardizer = input_standardization.map(|(mean, scale)| Standardizer { mean, scale });
        Self::from_network(arch, feature_config, metadata, Network::Mlp(mlp.clone()), standardizer)
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn feature_config(&self) -> &FeatureConfig {
        &self.feature_config
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&TensorInfo, &[f32])> {
        self.tensors.iter().map(|(i, d)| (i, d.as_slice()))
    }

    pub fn parameter_count(&self) -> usize {
        self.arch.parameter_count().expect("validated at construction")
    }

    /// Short tag identifying the weights, for audit trails.
    pub fn version_tag(&self) -> String {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (info, data) in &self.tensors {
            info.name.hash(&mut h);
            for v in data {
                v.to_bits().hash(&mut h);
            }
        }
        format!("v{MODEL_VERSION}-{:016x}", h.finish())
    }

    /// Trained MLP with `f64` copies of the stored weights.
    pub fn mlp(&self) -> Option<&Mlp> {
        match &self.net {
            Network::Mlp(m) => Some(m),
            Network::Tpcnn(_) => None,
        }
    }

    /// Dimension of the vector the MLP head consumes.
    pub fn vector_dim(&self) -> Option<usize> {
        self.mlp().map(Mlp::input_dim)
    }

    /// Probability that the input is a female voice, strictly inside (0, 1).
    pub fn forward(&self, input: ModelInput<'_>) -> Result<f64, ModelError> {
        let logit = match (&self.net, input) {
            (Network::Tpcnn(t), ModelInput::Patch(p)) => {
                if p.n_frames() != t.spec.n_time || p.n_bands() != t.spec.n_bands {
                    return Err(ModelError::DimensionMismatch {
                        expected: format!("{}x{} patch", t.spec.n_time, t.spec.n_bands),
                        got: format!("{}x{} patch", p.n_frames(), p.n_bands()),
                    });
                }
                t.logit(p.values())
            }
            (Network::Mlp(m), ModelInput::Patch(p)) => {
                if self.feature_config.input != InputKind::PooledStats {
                    return Err(ModelError::DimensionMismatch {
                        expected: format!("{}-dim embedding", m.input_dim()),
                        got: "mel patch".into(),
                    });
                }
                self.mlp_logit(m, &pooled_stats_embedding(p))?
            }
            (Network::Mlp(m), ModelInput::Vector(v)) => self.mlp_logit(m, v)?,
            (Network::Tpcnn(t), ModelInput::Vector(v)) => {
                return Err(ModelError::DimensionMismatch {
                    expected: format!("{}x{} patch", t.spec.n_time, t.spec.n_bands),
                    got: format!("{}-dim vector", v.len()),
                })
            }
        };
        Ok(open_unit(sigmoid(logit)))
    }

    fn mlp_logit(&self, m: &Mlp, v: &[f64]) -> Result<f64, ModelError> {
        if v.len() != m.input_dim() {
            return Err(ModelError::DimensionMismatch {
                expected: format!("{}-dim vector", m.input_dim()),
                got: format!("{}-dim vector", v.len()),
            });
        }
        Ok(match &self.standardizer {
            Some(s) => {
                let z: Vec<f64> = v.iter().zip(&s.mean).zip(&s.scale).map(|((x, m), sc)| (x - m) / sc).collect();
                m.logit(&z)
            }
            None => m.logit(v),
        })
    }

    /// Applies the stored input standardization (identity when absent).
    pub fn standardize(&self, v: &[f64]) -> Vec<f64> {
        match &self.standardizer {
            Some(s) => v.iter().zip(&s.mean).zip(&s.scale).map(|((x, m), sc)| (x - m) / sc).collect(),
            None => v.to_vec(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            version: MODEL_VERSION,
            arch: self.arch.clone(),
            feature_config: self.feature_config.clone(),
            metadata: self.metadata.clone(),
            tensors: self.tensors.iter().map(|(i, _)| i.clone()).collect(),
        };
        let json = serde_json::to_vec(&header).expect("serializable header");
        let n_values: usize = self.tensors.iter().map(|(_, d)| d.len()).sum();
        let mut out = Vec::with_capacity(12 + json.len() + 4 * n_values);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, data) in &self.tensors {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let corrupt = |m: &str| ModelError::CorruptWeights(m.to_string());
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(corrupt("missing model header"));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(12..12 + header_len).ok_or_else(|| corrupt("truncated header"))?;
        let raw: serde_json::Value = serde_json::from_slice(body).map_err(|e| ModelError::CorruptWeights(e.to_string()))?;
        let version = raw.get("version").and_then(|v| v.as_u64()).ok_or_else(|| corrupt("header lacks a version"))?;
        if version != MODEL_VERSION as u64 {
            return Err(ModelError::VersionMismatch(version as u32));
        }
        let header: Header = serde_json::from_value(raw).map_err(|e| ModelError::CorruptWeights(e.to_string()))?;
        let mut offset = 12 + header_len;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for info in header.tensors {
            let n: usize = info.shape.iter().product();
            let chunk = bytes
                .get(offset..offset + 4 * n)
                .ok_or_else(|| ModelError::CorruptWeights(format!("truncated data in tensor {}", info.name)))?;
            offset += 4 * n;
            let data = chunk.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            tensors.push((info, data));
        }
        if offset != bytes.len() {
            return Err(corrupt("trailing bytes after tensor data"));
        }
        Self::from_tensors(header.arch, header.feature_config, header.metadata, tensors)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Reads `recording_id,v0..v255` CSV (header optional) or JSON lines
/// `{"recording_id": .., "embedding": [..]}` (chosen by `.jsonl`/`.json` extension).
pub fn load_external_embeddings(path: impl AsRef<Path>) -> Result<BTreeMap<String, Vec<f64>>, ModelError> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let jsonl = matches!(path.extension().and_then(|e| e.to_str()), Some("jsonl" | "json"));
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut table = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || (!jsonl && i == 0 && trimmed.starts_with("recording_id")) {
            continue;
        }
        let bad_row = |message: String| ModelError::BadRow { path: shown.clone(), line: lineno, message };
        let (id, values): (String, Vec<f64>) = if jsonl {
            #[derive(Deserialize)]
            struct Row {
                recording_id: String,
                embedding: Vec<f64>,
            }
            let row: Row = serde_json::from_str(trimmed).map_err(|e| bad_row(e.to_string()))?;
            (row.recording_id, row.embedding)
        } else {
            let mut fields = trimmed.split(',');
            let id = fields.next().unwrap_or_default().trim().to_string();
            let values = fields
                .map(|f| f.trim().parse::<f64>().map_err(|_| bad_row(format!("bad value '{f}'"))))
                .collect::<Result<Vec<_>, _>>()?;
            (id, values)
        };
        if values.len() != EMBEDDING_DIM {
            return Err(ModelError::BadDimension { path: shown, line: lineno, got: values.len(), expected: EMBEDDING_DIM });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(bad_row("non-finite value".into()));
        }
        if table.contains_key(&id) {
            return Err(ModelError::DuplicateId { path: shown, line: lineno, id });
        }
        table.insert(id, values);
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{make_patches, MelFrames};

    fn mlp_arch(hidden: Vec<usize>) -> ArchSpec {
        ArchSpec::Mlp(MlpSpec { input_dim: 48, hidden })
    }

    fn small_cnn() -> TpcnnSpec {
        TpcnnSpec {
            n_conv: 2,
            n_dense: 1,
            n_filters: 32,
            n_neurons: 32,
            kernel_time: 3,
            kernel_freq: 3,
            pooling: vec![Pooling::TimeFreq],
            n_time: 150,
            n_bands: 24,
        }
    }

    fn random_mel(frames: usize, bands: usize, seed: u64) -> MelFrames {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MelFrames::from_values((0..frames * bands).map(|_| rng.random_range(-8.0..2.0)).collect(), bands, 0.025, 0.01).unwrap()
    }

    #[test]
    fn mlp_parameter_count() {
        let m = build_model(&mlp_arch(vec![32]), FeatureConfig::pooled_stats(24), 1).unwrap();
        assert_eq!(m.parameter_count(), 1601);
    }

    #[test]
    fn kernel_exhaustion_underflows() {
        let spec = TpcnnSpec { kernel_time: 9, kernel_freq: 3, n_conv: 5, pooling: vec![Pooling::Time; 4], ..small_cnn() };
        // 150 -> 142 -> 71 -> 63 -> 31 -> 23 -> 11 -> 3 -> 1, then a 9-tap kernel cannot fit.
        assert!(matches!(build_model(&ArchSpec::Tpcnn(spec), FeatureConfig::mel_patch(24), 0), Err(ModelError::ShapeUnderflow(_))));
        let freq = TpcnnSpec { kernel_freq: 9, n_conv: 3, pooling: vec![Pooling::Freq; 2], ..small_cnn() };
        assert!(matches!(build_model(&ArchSpec::Tpcnn(freq), FeatureConfig::mel_patch(24), 0), Err(ModelError::ShapeUnderflow(_))));
    }

    #[test]
    fn invalid_arch_rejected() {
        assert!(matches!(mlp_arch(vec![]).validate(), Err(ModelError::InvalidArch(_))));
        assert!(matches!(mlp_arch(vec![33]).validate(), Err(ModelError::InvalidArch(_))));
        assert!(matches!(mlp_arch(vec![32; 5]).validate(), Err(ModelError::InvalidArch(_))));
        let cnn = TpcnnSpec { n_conv: 6, pooling: vec![Pooling::Freq; 5], ..small_cnn() };
        assert!(matches!(ArchSpec::Tpcnn(cnn).validate(), Err(ModelError::InvalidArch(_))));
        let slots = TpcnnSpec { pooling: vec![], ..small_cnn() };
        assert!(matches!(ArchSpec::Tpcnn(slots).validate(), Err(ModelError::InvalidArch(_))));
    }

    #[test]
    fn same_seed_same_weights() {
        let a = build_model(&ArchSpec::Tpcnn(small_cnn()), FeatureConfig::mel_patch(24), 9).unwrap();
        let b = build_model(&ArchSpec::Tpcnn(small_cnn()), FeatureConfig::mel_patch(24), 9).unwrap();
        let c = build_model(&ArchSpec::Tpcnn(small_cnn()), FeatureConfig::mel_patch(24), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn zero_weights_give_half() {
        let m = build_model(&mlp_arch(vec![32]), FeatureConfig::pooled_stats(24), 0).unwrap();
        let zeros = Mlp::zeros(&[48, 32, 1]);
        let z = ModelBundle::from_mlp(&zeros, FeatureConfig::pooled_stats(24), m.metadata.clone(), None).unwrap();
        assert_eq!(z.forward(ModelInput::Vector(&[0.3; 48])).unwrap(), 0.5);
    }

    #[test]
    fn forced_logit_ln3() {
        let mut net = Mlp::zeros(&[48, 32, 1]);
        net.layers[1].bias[0] = 3f64.ln();
        let m = ModelBundle::from_mlp(&net, FeatureConfig::pooled_stats(24), ModelMetadata::default(), None).unwrap();
        let p = m.forward(ModelInput::Vector(&[1.0; 48])).unwrap();
        // ln 3 rounds through f32 storage.
        assert!((p - 0.75).abs() < 1e-7);
    }

    #[test]
    fn forward_is_order_free_and_repeatable() {
        let m = build_model(&ArchSpec::Tpcnn(small_cnn()), FeatureConfig::mel_patch(24), 4).unwrap();
        let mel = random_mel(450, 24, 2);
        let patches = make_patches(&mel, 150, 75).unwrap();
        let fwd: Vec<f64> = patches.iter().map(|p| m.forward(ModelInput::Patch(p)).unwrap()).collect();
        let rev: Vec<f64> = patches.iter().rev().map(|p| m.forward(ModelInput::Patch(p)).unwrap()).collect();
        assert_eq!(fwd, rev.into_iter().rev().collect::<Vec<_>>());
        assert!(fwd.iter().all(|&p| p > 0.0 && p < 1.0));
        let again = m.forward(ModelInput::Patch(&patches[0])).unwrap();
        assert_eq!(again, fwd[0]);
    }

    #[test]
    fn dimension_mismatches() {
        let cnn = build_model(&ArchSpec::Tpcnn(small_cnn()), FeatureConfig::mel_patch(24), 4).unwrap();
        let mel64 = random_mel(150, 64, 1);
        let p = make_patches(&mel64, 150, 75).unwrap();
        assert!(matches!(cnn.forward(ModelInput::Patch(&p[0])), Err(ModelError::DimensionMismatch { .. })));
        assert!(matches!(cnn.forward(ModelInput::Vector(&[0.0; 48])), Err(ModelError::DimensionMismatch { .. })));
        let mlp = build_model(&mlp_arch(vec![32]), FeatureConfig::pooled_stats(24), 0).unwrap();
        assert!(matches!(mlp.forward(ModelInput::Vector(&[0.0; 47])), Err(ModelError::DimensionMismatch { .. })));
        assert!(matches!(mlp.forward(ModelInput::Patch(&p[0])), Err(ModelError::DimensionMismatch { .. })));
    }

    #[test]
    fn pooled_stats_cases() {
        let constant = MelFrames::from_values(vec![2.5; 150 * 3], 3, 0.025, 0.01).unwrap();
        let p = make_patches(&constant, 150, 75).unwrap();
        let e = pooled_stats_embedding(&p[0]);
        assert_eq!(e, vec![2.5, 2.5, 2.5, 0.0, 0.0, 0.0]);

        let alternating: Vec<f64> = (0..150).map(|i| if i % 2 == 0 { 0.0 } else { 2.0 }).collect();
        let m = MelFrames::from_values(alternating, 1, 0.025, 0.01).unwrap();
        let e = pooled_stats_embedding(&make_patches(&m, 150, 75).unwrap()[0]);
        assert_eq!(e, vec![1.0, 1.0]);

        let mel = random_mel(150, 4, 8);
        let mut rows: Vec<Vec<f64>> = mel.frames().map(|r| r.to_vec()).collect();
        rows.reverse();
        rows.swap(3, 77);
        let shuffled = MelFrames::from_values(rows.concat(), 4, 0.025, 0.01).unwrap();
        let a = pooled_stats_embedding(&make_patches(&mel, 150, 75).unwrap()[0]);
        let b = pooled_stats_embedding(&make_patches(&shuffled, 150, 75).unwrap()[0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn bundle_round_trip() {
        let m = build_model(&ArchSpec::Tpcnn(small_cnn()), FeatureConfig::mel_patch(24), 21).unwrap();
        let bytes = m.to_bytes();
        let back = ModelBundle::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        let mel = random_mel(150 + 9 * 75, 24, 3);
        for p in make_patches(&mel, 150, 75).unwrap() {
            assert_eq!(
                m.forward(ModelInput::Patch(&p)).unwrap().to_bits(),
                back.forward(ModelInput::Patch(&p)).unwrap().to_bits()
            );
        }
    }

    #[test]
    fn bundle_corruption() {
        let m = build_model(&mlp_arch(vec![32]), FeatureConfig::pooled_stats(24), 2).unwrap();
        let bytes = m.to_bytes();
        assert!(matches!(ModelBundle::from_bytes(&bytes[..bytes.len() - 3]), Err(ModelError::CorruptWeights(_))));
        assert!(matches!(ModelBundle::from_bytes(&bytes[..20]), Err(ModelError::CorruptWeights(_))));
        assert!(matches!(ModelBundle::from_bytes(b"garbage"), Err(ModelError::CorruptWeights(_))));

        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[12..12 + header_len]).unwrap();
        let bumped = header.replacen("\"version\":1", "\"version\":7", 1);
        let mut out = bytes[..8].to_vec();
        out.extend_from_slice(&(bumped.len() as u32).to_le_bytes());
        out.extend_from_slice(bumped.as_bytes());
        out.extend_from_slice(&bytes[12 + header_len..]);
        assert!(matches!(ModelBundle::from_bytes(&out), Err(ModelError::VersionMismatch(7))));
    }

    #[test]
    fn embeddings_table() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.csv");
        let row = |id: &str, n: usize| format!("{id},{}\n", vec!["0"; n].join(","));
        std::fs::write(&path, row("rec1", 256)).unwrap();
        assert_eq!(load_external_embeddings(&path).unwrap().len(), 1);

        std::fs::write(&path, row("rec1", 255)).unwrap();
        assert!(matches!(load_external_embeddings(&path), Err(ModelError::BadDimension { got: 255, .. })));

        std::fs::write(&path, row("rec1", 256) + &row("rec1", 256)).unwrap();
        assert!(matches!(load_external_embeddings(&path), Err(ModelError::DuplicateId { line: 2, .. })));

        let jl = dir.path().join("emb.jsonl");
        let vals: Vec<f64> = (0..256).map(|i| i as f64 / 256.0).collect();
        std::fs::write(&jl, serde_json::json!({"recording_id": "a", "embedding": vals}).to_string() + "\n").unwrap();
        assert_eq!(load_external_embeddings(&jl).unwrap()["a"][255], 255.0 / 256.0);
    }
}
