//! Generic representation maps `x in R^D -> z in R^m`.

use serde::{Deserialize, Serialize};

use super::nn::{tanh_backward, tanh_inplace, Dense, Layout};
use super::ModelError;
use crate::rng;

/// Layer widths of a tanh multilayer perceptron; the last layer is linear.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    seed: u64,
    layers: Vec<Dense>,
    params: Vec<f64>,
}

impl Mlp {
    pub fn new(spec: MlpSpec, seed: u64) -> Result<Self, ModelError> {
        let mut widths = vec![spec.input];
        widths.extend(&spec.hidden);
        widths.push(spec.output);
        if widths.contains(&0) {
            return Err(ModelError::InvalidSpec(format!("zero-width layer in {spec:?}")));
        }
        let mut layout = Layout::default();
        let layers: Vec<Dense> = widths.windows(2).map(|w| layout.dense(w[0], w[1])).collect();
        let mut params = vec![0.0; layout.len()];
        let mut rng = rng::seeded(seed);
        for l in &layers {
            l.init_normal(&mut params, 1.0, &mut rng);
        }
        Ok(Self {
            spec,
            seed,
            layers,
            params,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
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

    /// Activations of every layer, input first.
    fn activations(&self, params: &[f64], x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        for (i, l) in self.layers.iter().enumerate() {
            let mut out = vec![0.0; l.outputs];
            l.forward(params, acts.last().expect("non-empty"), &mut out);
            if i + 1 < self.layers.len() {
                tanh_inplace(&mut out);
            }
            acts.push(out);
        }
        acts
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.activations(&self.params, x).pop().expect("non-empty")
    }

    /// Accumulates the parameter gradient for output partials `g_out`.
    fn backward(&self, params: &[f64], acts: &[Vec<f64>], g_out: &[f64], grads: &mut [f64]) {
        let mut g = g_out.to_vec();
        for (i, l) in self.layers.iter().enumerate().rev() {
            if i + 1 < self.layers.len() {
                tanh_backward(&acts[i + 1], &mut g);
            }
            let mut g_in = vec![0.0; l.inputs];
            l.backward(params, &acts[i], &g, grads, (i > 0).then_some(&mut g_in[..]));
            g = g_in;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Encoder {
    Identity { dim: usize },
    /// Row-major `rows x cols` matrix.
    Linear { rows: usize, cols: usize, matrix: Vec<f64> },
    Mlp(Mlp),
}

impl Encoder {
    pub fn linear(rows: usize, cols: usize, matrix: Vec<f64>) -> Result<Self, ModelError> {
        if matrix.len() != rows * cols || rows == 0 || cols == 0 {
            return Err(ModelError::ParamCount {
                expected: rows * cols,
                got: matrix.len(),
            });
        }
        Ok(Encoder::Linear { rows, cols, matrix })
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Encoder::Identity { dim } => *dim,
            Encoder::Linear { cols, .. } => *cols,
            Encoder::Mlp(m) => m.spec.input,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Encoder::Identity { dim } => *dim,
            Encoder::Linear { rows, .. } => *rows,
            Encoder::Mlp(m) => m.spec.output,
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        if x.len() != self.input_dim() {
            return Err(ModelError::Dimension {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(match self {
            Encoder::Identity { .. } => x.to_vec(),
            Encoder::Linear { cols, matrix, .. } => {
                matrix.chunks_exact(*cols).map(|row| super::nn::dot(row, x)).collect()
            }
            Encoder::Mlp(m) => m.forward(x),
        })
    }
}

/// An MLP encoder with a linear decoder back to the input space, trained on
/// squared reconstruction error.
#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder {
    encoder: Mlp,
    decoder: Dense,
    params: Vec<f64>,
}

impl Autoencoder {
    pub fn new(encoder: Mlp) -> Self {
        let enc_len = encoder.params.len();
        let decoder = Dense {
            offset: enc_len,
            inputs: encoder.spec.output,
            outputs: encoder.spec.input,
        };
        let mut params = encoder.params.clone();
        params.resize(enc_len + decoder.len(), 0.0);
        let mut rng = rng::stream(encoder.seed, 0xDEC0);
        decoder.init_normal(&mut params, 1.0, &mut rng);
        Self {
            encoder,
            decoder,
            params,
        }
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// The trained encoder half.
    pub fn encoder(&self) -> Mlp {
        let mut enc = self.encoder.clone();
        let n = enc.params.len();
        enc.params.copy_from_slice(&self.params[..n]);
        enc
    }

    pub fn reconstruct(&self, x: &[f64]) -> Vec<f64> {
        let z = self.encoder.activations(&self.params, x).pop().expect("non-empty");
        let mut out = vec![0.0; self.decoder.outputs];
        self.decoder.forward(&self.params, &z, &mut out);
        out
    }

    /// Accumulates the gradient of `0.5 |decode(encode(x)) - x|^2` and returns it.
    pub fn accumulate_loss_grad(&self, x: &[f64], grads: &mut [f64]) -> Result<f64, ModelError> {
        if x.len() != self.encoder.spec.input {
            return Err(ModelError::Dimension {
                expected: self.encoder.spec.input,
                got: x.len(),
            });
        }
        let acts = self.encoder.activations(&self.params, x);
        let z = acts.last().expect("non-empty");
        let mut out = vec![0.0; self.decoder.outputs];
        self.decoder.forward(&self.params, z, &mut out);
        let resid: Vec<f64> = out.iter().zip(x).map(|(o, v)| o - v).collect();
        let mut g_z = vec![0.0; z.len()];
        self.decoder.backward(&self.params, z, &resid, grads, Some(&mut g_z));
        self.encoder.backward(&self.params, &acts, &g_z, grads);
        Ok(0.5 * resid.iter().map(|r| r * r).sum::<f64>())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_linear() {
        let x = [0.1, -0.4, 2.0];
        assert_eq!(Encoder::Identity { dim: 3 }.forward(&x).unwrap(), x.to_vec());
        let a = vec![1.0, 2.0, 3.0, 0.0, -1.0, 0.5];
        let enc = Encoder::linear(2, 3, a.clone()).unwrap();
        let z = enc.forward(&x).unwrap();
        assert_eq!(z, vec![0.1 - 0.8 + 6.0, 0.4 + 1.0]);
        assert!(Encoder::linear(2, 2, a).is_err());
    }

    #[test]
    fn mlp_shape_and_purity() {
        let spec = MlpSpec {
            input: 6,
            hidden: vec![5],
            output: 3,
        };
        let enc = Encoder::Mlp(Mlp::new(spec, 1).unwrap());
        let x = [0.2; 6];
        let z = enc.forward(&x).unwrap();
        assert_eq!(z.len(), 3);
        assert_eq!(z, enc.forward(&x).unwrap());
        assert!(enc.forward(&[0.0; 5]).is_err());
    }

    #[test]
    fn autoencoder_gradient_matches_finite_differences() {
        let spec = MlpSpec {
            input: 3,
            hidden: vec![4],
            output: 2,
        };
        let ae = Autoencoder::new(Mlp::new(spec, 3).unwrap());
        let x = [0.3, -0.2, 0.9];
        let loss = |a: &Autoencoder| {
            let r = a.reconstruct(&x);
            0.5 * r.iter().zip(&x).map(|(o, v)| (o - v) * (o - v)).sum::<f64>()
        };
        let mut grads = vec![0.0; ae.params().len()];
        let l = ae.accumulate_loss_grad(&x, &mut grads).unwrap();
        assert!((l - loss(&ae)).abs() < 1e-12);
        let eps = 1e-6;
        for i in 0..grads.len() {
            let mut a = ae.clone();
            a.params_mut()[i] += eps;
            let mut b = ae.clone();
            b.params_mut()[i] -= eps;
            let fd = (loss(&a) - loss(&b)) / (2.0 * eps);
            assert!((fd - grads[i]).abs() < 1e-7, "param {i}");
        }
    }
}
