//! Causal-window autoregressive pixel model.
//!
//! Pixels are visited in raster order (row, column, channel). The conditional
//! of each symbol is a categorical distribution produced by one weight-shared
//! tanh network looking at a causal neighbourhood of already-visited values:
//! the `radius` rows above (`2 * radius + 1` columns wide), the `radius`
//! pixels to the left, and the earlier channels of the current pixel.
//! Positions outside the image or not yet visited are masked to zero with a
//! validity flag. The output layer starts at zero so an untrained model is
//! exactly uniform.

use serde::{Deserialize, Serialize};

use super::nn::{log_softmax, tanh_backward, tanh_inplace, Dense, Layout};
use super::ModelError;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArSpec {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub alphabet: usize,
    pub hidden: usize,
    pub radius: usize,
}

impl ArSpec {
    /// 256 symbols, 64 hidden units, radius 2.
    pub fn for_image(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            alphabet: 256,
            hidden: 64,
            radius: 2,
        }
    }

    /// A 1-D sequence model of length `len` over `alphabet` symbols.
    pub fn sequence(len: usize, alphabet: usize) -> Self {
        Self {
            width: len,
            height: 1,
            channels: 1,
            alphabet,
            hidden: 8,
            radius: 2,
        }
    }

    /// Sequence length `T`.
    pub fn len(&self) -> usize {
        self.width * self.height * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArModel {
    spec: ArSpec,
    seed: u64,
    offsets: Vec<(isize, isize)>,
    features: usize,
    hidden: Dense,
    out: Dense,
    params: Vec<f64>,
}

fn causal_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=0 {
        for dx in -r..=r {
            if dy < 0 || dx < 0 {
                out.push((dy, dx));
            }
        }
    }
    out
}

impl ArModel {
    pub fn new(spec: ArSpec, seed: u64) -> Result<Self, ModelError> {
        if spec.is_empty() || spec.hidden == 0 || spec.alphabet < 2 || spec.alphabet > 256 {
            return Err(ModelError::InvalidSpec(format!("degenerate AR spec {spec:?}")));
        }
        let offsets = causal_offsets(spec.radius);
        let c = spec.channels;
        let features = 2 * c * (offsets.len() + 1) + if c > 1 { c } else { 0 };
        let mut layout = Layout::default();
        let hidden = layout.dense(features, spec.hidden);
        let out = layout.dense(spec.hidden, spec.alphabet);
        let mut params = vec![0.0; layout.len()];
        hidden.init_normal(&mut params, 1.0, &mut rng::seeded(seed));
        out.init_zero(&mut params);
        Ok(Self {
            spec,
            seed,
            offsets,
            features,
            hidden,
            out,
            params,
        })
    }

    pub fn spec(&self) -> &ArSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub(crate) fn set_params(&mut self, params: Vec<f64>) -> Result<(), ModelError> {
        if params.len() != self.params.len() {
            return Err(ModelError::ParamCount {
                expected: self.params.len(),
                got: params.len(),
            });
        }
        self.params = params;
        Ok(())
    }

    pub fn feature_count(&self) -> usize {
        self.features
    }

    fn check(&self, x: &[u8]) -> Result<(), ModelError> {
        if x.len() != self.spec.len() {
            return Err(ModelError::Dimension {
                expected: self.spec.len(),
                got: x.len(),
            });
        }
        if let Some(&v) = x.iter().find(|&&v| v as usize >= self.spec.alphabet) {
            return Err(ModelError::Symbol {
                value: v,
                alphabet: self.spec.alphabet,
            });
        }
        Ok(())
    }

    /// Context features of step `t`; only `x[..t]` is read.
    pub fn features_at(&self, x: &[u8], t: usize, out: &mut [f64]) {
        let ArSpec {
            width,
            height,
            channels,
            alphabet,
            ..
        } = self.spec;
        let scale = 2.0 / (alphabet - 1) as f64;
        let value = |v: u8| f64::from(v) * scale - 1.0;
        let pixel = t / channels;
        let ch = t % channels;
        let (py, px) = ((pixel / width) as isize, (pixel % width) as isize);

        out.fill(0.0);
        let mut k = 0;
        for &(dy, dx) in &self.offsets {
            let (y, xx) = (py + dy, px + dx);
            let inside = y >= 0 && xx >= 0 && (y as usize) < height && (xx as usize) < width;
            for c in 0..channels {
                if inside {
                    let idx = (y as usize * width + xx as usize) * channels + c;
                    out[k] = value(x[idx]);
                    out[k + 1] = 1.0;
                }
                k += 2;
            }
        }
        for c in 0..channels {
            if c < ch {
                out[k] = value(x[pixel * channels + c]);
                out[k + 1] = 1.0;
            }
            k += 2;
        }
        if channels > 1 {
            out[k + ch] = 1.0;
        }
    }

    /// Hidden activations and log-probabilities of every symbol at step `t`.
    fn step(&self, feats: &[f64], h: &mut [f64], logits: &mut [f64], logp: &mut [f64]) {
        self.hidden.forward(&self.params, feats, h);
        tanh_inplace(h);
        self.out.forward(&self.params, h, logits);
        log_softmax(logits, logp);
    }

    /// Log-probabilities over the whole alphabet for step `t` of `x`.
    pub fn distribution_at(&self, x: &[u8], t: usize) -> Result<Vec<f64>, ModelError> {
        self.check(x)?;
        if t >= x.len() {
            return Err(ModelError::Dimension {
                expected: self.spec.len(),
                got: t,
            });
        }
        let mut feats = vec![0.0; self.features];
        let mut h = vec![0.0; self.spec.hidden];
        let mut logits = vec![0.0; self.spec.alphabet];
        let mut logp = vec![0.0; self.spec.alphabet];
        self.features_at(x, t, &mut feats);
        self.step(&feats, &mut h, &mut logits, &mut logp);
        Ok(logp)
    }

    /// `log p(x_t | x_<t)` for every step, in raster order.
    pub fn conditionals(&self, x: &[u8]) -> Result<Vec<f64>, ModelError> {
        self.check(x)?;
        let mut feats = vec![0.0; self.features];
        let mut h = vec![0.0; self.spec.hidden];
        let mut logits = vec![0.0; self.spec.alphabet];
        let mut logp = vec![0.0; self.spec.alphabet];
        Ok((0..x.len())
            .map(|t| {
                self.features_at(x, t, &mut feats);
                self.step(&feats, &mut h, &mut logits, &mut logp);
                logp[x[t] as usize]
            })
            .collect())
    }

    /// Accumulates the gradient of `-sum_t log p(x_t | x_<t)` into `grads`
    /// and returns that negative log-likelihood.
    pub fn accumulate_nll_grad(&self, x: &[u8], grads: &mut [f64]) -> Result<f64, ModelError> {
        self.check(x)?;
        let a = self.spec.alphabet;
        let mut feats = vec![0.0; self.features];
        let mut h = vec![0.0; self.spec.hidden];
        let mut logits = vec![0.0; a];
        let mut logp = vec![0.0; a];
        let mut g_logits = vec![0.0; a];
        let mut g_h = vec![0.0; self.spec.hidden];
        let mut nll = 0.0;
        for t in 0..x.len() {
            self.features_at(x, t, &mut feats);
            self.step(&feats, &mut h, &mut logits, &mut logp);
            let target = x[t] as usize;
            nll -= logp[target];
            for (g, &lp) in g_logits.iter_mut().zip(&logp) {
                *g = lp.exp();
            }
            g_logits[target] -= 1.0;
            g_h.fill(0.0);
            self.out.backward(&self.params, &h, &g_logits, grads, Some(&mut g_h));
            tanh_backward(&h, &mut g_h);
            self.hidden.backward(&self.params, &feats, &g_h, grads, None);
        }
        Ok(nll)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn untrained_model_is_uniform() {
        let model = ArModel::new(ArSpec::for_image(4, 4, 1), 1).unwrap();
        let x: Vec<u8> = (0..16).map(|i| (i * 17) as u8).collect();
        for lp in model.conditionals(&x).unwrap() {
            assert!((lp - (1.0f64 / 256.0).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn every_step_is_normalized() {
        let mut model = ArModel::new(ArSpec::for_image(3, 3, 3), 4).unwrap();
        let mut rng = rng::seeded(2);
        for p in model.params_mut() {
            *p = rand::Rng::gen_range(&mut rng, -1.0..1.0);
        }
        let x: Vec<u8> = (0..27).map(|i| (i * 31 % 256) as u8).collect();
        for t in 0..27 {
            let lp = model.distribution_at(&x, t).unwrap();
            let s: f64 = lp.iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(lp.iter().all(|v| v.exp() > 0.0));
        }
    }

    #[test]
    fn context_ignores_the_future() {
        let model = ArModel::new(ArSpec::for_image(4, 3, 3), 0).unwrap();
        let mut a: Vec<u8> = (0..36).map(|i| i as u8).collect();
        let mut fa = vec![0.0; model.feature_count()];
        let mut fb = vec![0.0; model.feature_count()];
        for t in 0..36 {
            model.features_at(&a, t, &mut fa);
            let mut b = a.clone();
            for v in &mut b[t..] {
                *v = 255;
            }
            model.features_at(&b, t, &mut fb);
            assert_eq!(fa, fb, "step {t}");
        }
        a[0] = 9;
        model.features_at(&a, 1, &mut fa);
        assert_eq!(fa[2 * 3 * model.offsets.len()], 9.0 * 2.0 / 255.0 - 1.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut spec = ArSpec::sequence(3, 3);
        spec.hidden = 3;
        let mut model = ArModel::new(spec, 5).unwrap();
        let mut rng = rng::seeded(8);
        for p in model.params_mut() {
            *p = rand::Rng::gen_range(&mut rng, -0.5..0.5);
        }
        let x = [2u8, 0, 1];
        let nll = |m: &ArModel| -m.conditionals(&x).unwrap().iter().sum::<f64>();
        let mut grads = vec![0.0; model.params().len()];
        let got = model.accumulate_nll_grad(&x, &mut grads).unwrap();
        assert!((got - nll(&model)).abs() < 1e-12);
        let eps = 1e-6;
        for i in 0..grads.len() {
            let mut a = model.clone();
            a.params_mut()[i] += eps;
            let mut b = model.clone();
            b.params_mut()[i] -= eps;
            let fd = (nll(&a) - nll(&b)) / (2.0 * eps);
            assert!((fd - grads[i]).abs() < 1e-7, "param {i}");
        }
    }

    #[test]
    fn symbols_outside_alphabet_are_rejected() {
        let model = ArModel::new(ArSpec::sequence(2, 2), 0).unwrap();
        assert!(matches!(
            model.conditionals(&[0, 2]),
            Err(ModelError::Symbol { value: 2, alphabet: 2 })
        ));
    }
}
