//! Temporal-pooling CNN: valid convolution blocks (conv, batch norm, ReLU)
//! with max-pooling between blocks, a max over the remaining time axis, and
//! dense layers down to one logit. Inference only.

use super::mlp::Dense;
use super::{ModelError, Pooling, TpcnnSpec};

pub const BN_EPSILON: f64 = 1e-3;

/// Output `(time, freq, channels)` of every block, after its pooling slot.
pub fn walk_shapes(spec: &TpcnnSpec) -> Result<Vec<(usize, usize, usize)>, ModelError> {
    let (mut t, mut f) = (spec.n_time as isize, spec.n_bands as isize);
    let mut shapes = Vec::with_capacity(spec.n_conv);
    for block in 0..spec.n_conv {
        t -= spec.kernel_time as isize - 1;
        f -= spec.kernel_freq as isize - 1;
        if t < 1 || f < 1 {
            return Err(ModelError::ShapeUnderflow(format!(
                "convolution block {} leaves {t}x{f}",
                block + 1
            )));
        }
        if let Some(pool) = spec.pooling.get(block) {
            let (pt, pf) = pool.factors();
            t /= pt as isize;
            f /= pf as isize;
            if t < 1 || f < 1 {
                return Err(ModelError::ShapeUnderflow(format!(
                    "{pool:?} pooling after block {} leaves {t}x{f}",
                    block + 1
                )));
            }
        }
        shapes.push((t as usize, f as usize, spec.n_filters));
    }
    Ok(shapes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_time: usize,
    pub kernel_freq: usize,
    /// `[out][in][kt][kf]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tpcnn {
    pub spec: TpcnnSpec,
    pub blocks: Vec<ConvBlock>,
    pub dense: Vec<Dense>,
}

/// Channel-major feature map.
struct FeatureMap {
    channels: usize,
    time: usize,
    freq: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    fn at(&self, c: usize, t: usize, f: usize) -> f64 {
        self.data[(c * self.time + t) * self.freq + f]
    }
}

impl ConvBlock {
    fn forward(&self, x: &FeatureMap) -> FeatureMap {
        let time = x.time + 1 - self.kernel_time;
        let freq = x.freq + 1 - self.kernel_freq;
        let mut data = vec![0.0; self.out_channels * time * freq];
        let k_size = self.kernel_time * self.kernel_freq;
        for o in 0..self.out_channels {
            let scale = self.gamma[o] / (self.running_var[o] + BN_EPSILON).sqrt();
            let shift = self.beta[o] - self.running_mean[o] * scale;
            for t in 0..time {
                for f in 0..freq {
                    let mut acc = self.bias[o];
                    for c in 0..self.in_channels {
                        let w = &self.weight[(o * self.in_channels + c) * k_size..][..k_size];
                        for dt in 0..self.kernel_time {
                            let row = &x.data[(c * x.time + t + dt) * x.freq + f..][..self.kernel_freq];
                            let wrow = &w[dt * self.kernel_freq..][..self.kernel_freq];
                            acc += row.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                    data[(o * time + t) * freq + f] = (acc * scale + shift).max(0.0);
                }
            }
        }
        FeatureMap { channels: self.out_channels, time, freq, data }
    }
}

fn max_pool(x: &FeatureMap, pt: usize, pf: usize) -> FeatureMap {
    let time = x.time / pt;
    let freq = x.freq / pf;
    let mut data = Vec::with_capacity(x.channels * time * freq);
    for c in 0..x.channels {
        for t in 0..time {
            for f in 0..freq {
                let mut m = f64::NEG_INFINITY;
                for dt in 0..pt {
                    for df in 0..pf {
                        m = m.max(x.at(c, t * pt + dt, f * pf + df));
                    }
                }
                data.push(m);
            }
        }
    }
    FeatureMap { channels: x.channels, time, freq, data }
}

impl Tpcnn {
    /// Logit for one row-major `T x N` patch.
    pub fn logit(&self, patch: &[f64]) -> f64 {
        let mut x = FeatureMap { channels: 1, time: self.spec.n_time, freq: self.spec.n_bands, data: patch.to_vec() };
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(&x);
            if let Some(pool) = self.spec.pooling.get(i) {
                let (pt, pf) = pool.factors();
                x = max_pool(&x, pt, pf);
            }
        }
        // Temporal max-pool over the whole remaining time axis.
        let mut v = max_pool(&x, x.time, 1).data;
        let mut next = Vec::new();
        let last = self.dense.len() - 1;
        for (i, layer) in self.dense.iter().enumerate() {
            layer_apply(layer, &v, &mut next);
            if i < last {
                for a in next.iter_mut() {
                    *a = a.max(0.0);
                }
            }
            std::mem::swap(&mut v, &mut next);
        }
        v[0]
    }
}

fn layer_apply(layer: &Dense, x: &[f64], out: &mut Vec<f64>) {
    out.clear();
    out.extend(
        layer
            .weight
            .chunks_exact(layer.n_in)
            .zip(&layer.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()),
    );
}

impl Pooling {
    /// `(time, freq)` pooling factors.
    pub fn factors(self) -> (usize, usize) {
        match self {
            Pooling::Freq => (1, 2),
            Pooling::Time => (2, 1),
            Pooling::TimeFreq => (2, 2),
        }
    }
}
