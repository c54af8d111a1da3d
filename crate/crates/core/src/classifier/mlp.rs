//! Fully connected ReLU network with a single logit output, trained with
//! binary cross-entropy.

use rand::Rng;

use super::{he_uniform, sigmoid};

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub n_in: usize,
    pub n_out: usize,
    /// Row-major `n_out x n_in`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn new(n_in: usize, n_out: usize, rng: &mut impl Rng) -> Self {
        Self { n_in, n_out, weight: he_uniform(n_in, n_in * n_out, rng), bias: vec![0.0; n_out] }
    }

    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self { n_in, n_out, weight: vec![0.0; n_in * n_out], bias: vec![0.0; n_out] }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.weight.chunks_exact(self.n_in).zip(&self.bias).map(|(row, b)| {
            b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
        }));
    }

    pub fn n_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Hidden ReLU layers followed by a linear output unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Gradients with the same layout as [`Mlp::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrad {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// `sizes = [input, hidden.., 1]`.
    pub fn new(sizes: &[usize], rng: &mut impl Rng) -> Self {
        assert!(sizes.len() >= 2 && *sizes.last().expect("non-empty") == 1, "MLP must end in one unit");
        Self { layers: sizes.windows(2).map(|w| Dense::new(w[0], w[1], rng)).collect() }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        Self { layers: sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect() }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Dense::n_params).sum()
    }

    pub fn logit(&self, x: &[f64]) -> f64 {
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.apply(&cur, &mut next);
            if i < last {
                for v in next.iter_mut() {
                    *v = v.max(0.0);
                }
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur[0]
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        sigmoid(self.logit(x))
    }

    /// Mean binary cross-entropy over `(x, y)` pairs.
    pub fn loss(&self, xs: &[Vec<f64>], ys: &[f64]) -> f64 {
        xs.iter().zip(ys).map(|(x, &y)| bce_with_logit(self.logit(x), y)).sum::<f64>() / xs.len() as f64
    }

    /// Mean BCE and its gradient. With `dropout = Some((rate, rng))` hidden
    /// activations are dropped (inverted dropout) during the forward pass.
    pub fn loss_and_grad<R: Rng>(&self, xs: &[Vec<f64>], ys: &[f64], mut dropout: Option<(f64, &mut R)>) -> (f64, MlpGrad) {
        let mut grad = MlpGrad { layers: self.layers.iter().map(|l| Dense::zeros(l.n_in, l.n_out)).collect() };
        let n = xs.len() as f64;
        let last = self.layers.len() - 1;
        let mut total = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            // Forward, keeping each layer's input and the post-activation mask.
            let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
            let mut masks: Vec<Vec<f64>> = Vec::with_capacity(last);
            let mut cur = x.clone();
            for (i, layer) in self.layers.iter().enumerate() {
                let mut out = Vec::with_capacity(layer.n_out);
                layer.apply(&cur, &mut out);
                inputs.push(cur);
                if i < last {
                    let mask: Vec<f64> = out
                        .iter()
                        .map(|&v| {
                            let keep = match dropout.as_mut() {
                                Some((rate, rng)) => {
                                    if rng.random::<f64>() < *rate {
                                        0.0
                                    } else {
                                        1.0 / (1.0 - *rate)
                                    }
                                }
                                None => 1.0,
                            };
                            if v > 0.0 { keep } else { 0.0 }
                        })
                        .collect();
                    for (o, m) in out.iter_mut().zip(&mask) {
                        *o = if *m > 0.0 { *o * m } else { 0.0 };
                    }
                    masks.push(mask);
                }
                cur = out;
            }
            let z = cur[0];
            total += bce_with_logit(z, y);

            // Backward.
            let mut delta = vec![(sigmoid(z) - y) / n];
            for i in (0..self.layers.len()).rev() {
                let layer = &self.layers[i];
                let g = &mut grad.layers[i];
                let input = &inputs[i];
                for (o, &d) in delta.iter().enumerate() {
                    g.bias[o] += d;
                    let row = &mut g.weight[o * layer.n_in..(o + 1) * layer.n_in];
                    for (gw, &v) in row.iter_mut().zip(input) {
                        *gw += d * v;
                    }
                }
                if i == 0 {
                    break;
                }
                let mask = &masks[i - 1];
                let mut prev = vec![0.0; layer.n_in];
                for (o, &d) in delta.iter().enumerate() {
                    let row = &layer.weight[o * layer.n_in..(o + 1) * layer.n_in];
                    for (p, &w) in prev.iter_mut().zip(row) {
                        *p += d * w;
                    }
                }
                for (p, &m) in prev.iter_mut().zip(mask) {
                    *p *= m;
                }
                delta = prev;
            }
        }
        (total / n, grad)
    }

    /// `self -= lr * grad`.
    pub fn step(&mut self, grad: &MlpGrad, lr: f64) {
        for (l, g) in self.layers.iter_mut().zip(&grad.layers) {
            for (w, gw) in l.weight.iter_mut().zip(&g.weight) {
                *w -= lr * gw;
            }
            for (b, gb) in l.bias.iter_mut().zip(&g.bias) {
                *b -= lr * gb;
            }
        }
    }

    /// Flat parameter view for finite-difference checks: weights then bias, layer by layer.
    pub fn params_mut(&mut self) -> Vec<&mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
            .collect()
    }
}

impl MlpGrad {
    pub fn flat(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(&l.bias).copied()).collect()
    }
}

/// Numerically stable `-(y ln p + (1-y) ln(1-p))` with `p = sigmoid(z)`.
pub fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parameter_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(Mlp::new(&[48, 32, 1], &mut rng).n_params(), 48 * 32 + 32 + 32 + 1);
    }

    #[test]
    fn zero_net_outputs_half() {
        assert_eq!(Mlp::zeros(&[4, 8, 1]).predict(&[1.0, -2.0, 3.0, 0.5]), 0.5);
    }

    #[test]
    fn bce_matches_direct_formula() {
        for (z, y) in [(0.3, 1.0), (-2.0, 0.0), (5.0, 0.0), (-7.0, 1.0)] {
            let p = sigmoid(z);
            let direct = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
            assert!((bce_with_logit(z, y) - direct).abs() < 1e-9);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let sizes = [3 + trial % 5, 5, 4, 1];
            let mut net = Mlp::new(&sizes, &mut rng);
            // Nonzero biases keep pre-activations off the ReLU kink at exactly 0.
            for l in net.layers.iter_mut() {
                for b in l.bias.iter_mut() {
                    *b = rng.random_range(-0.2..0.2);
                }
            }
            let xs: Vec<Vec<f64>> = (0..6).map(|_| (0..sizes[0]).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let ys: Vec<f64> = (0..6).map(|i| (i % 2) as f64).collect();
            let (_, g) = net.loss_and_grad::<ChaCha8Rng>(&xs, &ys, None);
            let analytic = g.flat();
            let h = 1e-6;
            for (k, a) in analytic.iter().enumerate() {
                let mut plus = net.clone();
                *plus.params_mut()[k] += h;
                let mut minus = net.clone();
                *minus.params_mut()[k] -= h;
                let numeric = (plus.loss(&xs, &ys) - minus.loss(&xs, &ys)) / (2.0 * h);
                let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
                assert!(rel < 1e-4 || (a - numeric).abs() < 1e-9, "param {k}: {a} vs {numeric}");
            }
        }
    }

    #[test]
    fn gradient_descent_fits_separable_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = Mlp::new(&[2, 8, 1], &mut rng);
        let xs: Vec<Vec<f64>> = (0..40).map(|i| vec![if i % 2 == 0 { 1.0 } else { -1.0 }, rng.random_range(-0.3..0.3)]).collect();
        let ys: Vec<f64> = (0..40).map(|i| (i % 2 == 0) as u8 as f64).collect();
        let before = net.loss(&xs, &ys);
        for _ in 0..200 {
            let (_, g) = net.loss_and_grad::<ChaCha8Rng>(&xs, &ys, None);
            net.step(&g, 0.5);
        }
        assert!(net.loss(&xs, &ys) < before * 0.2);
    }
}
