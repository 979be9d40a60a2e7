//! Affine coupling flow.
//!
//! Each layer leaves the conditioning half of the input untouched and maps the
//! free half as `y = x * exp(s) + t`, where `(s, t)` come from a one-hidden-layer
//! tanh network of the conditioning half. The log-scale is squashed to
//! `(-bound, bound)`, so the layer's log-determinant is `sum(s)` exactly.
//! Halves alternate between the two checkerboard parities and, for color
//! images, between channel 0 and the remaining channels.
//!
//! The conditioner is either fully connected or convolutional. The
//! convolutional one sees the image with its free half zeroed and shares its
//! weights across positions, so it learns a local predictor rather than one
//! value per pixel.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::nn::{Activation, Conv, Dense, Layout, Padding};
use super::ModelError;
use crate::rng;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Conditioner {
    /// Hidden layer of `hidden` units over the conditioning values.
    #[default]
    Dense,
    /// `kernel x kernel` convolutions with `hidden` channels.
    Conv {
        kernel: usize,
        #[serde(default)]
        padding: Padding,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSpec {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub layers: usize,
    pub hidden: usize,
    pub log_scale_bound: f64,
    #[serde(default)]
    pub conditioner: Conditioner,
    #[serde(default)]
    pub activation: Activation,
}

impl FlowSpec {
    /// 8 layers, 3x3 convolutional conditioners with 16 channels, log-scales
    /// bounded by 3.
    pub fn for_image(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            layers: 8,
            hidden: 16,
            log_scale_bound: 3.0,
            conditioner: Conditioner::Conv {
                kernel: 3,
                padding: Padding::Zero,
            },
            activation: Activation::Tanh,
        }
    }

    /// A flow over plain vectors of length `dim` (alternating-index masks)
    /// with dense conditioners of width `4 * dim`.
    pub fn vector(dim: usize) -> Self {
        Self {
            hidden: 4 * dim,
            conditioner: Conditioner::Dense,
            ..Self::for_image(dim, 1, 1)
        }
    }

    pub fn dim(&self) -> usize {
        self.width * self.height * self.channels
    }
}

/// Initialization of each conditioner's output layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FlowInit {
    /// Every layer starts as the identity map.
    Zero,
    /// Output weights drawn with standard deviation `scale / sqrt(hidden)`.
    Random { scale: f64 },
}

#[derive(Debug, Clone, PartialEq)]
enum Net {
    /// Output holds all log-scales, then all shifts, in `free` order.
    Dense { hidden: Dense, out: Dense },
    /// Output channels per position: `channels` log-scales, then shifts.
    Conv { hidden: Conv, out: Conv },
}

#[derive(Debug, Clone, PartialEq)]
struct CouplingLayer {
    cond: Vec<usize>,
    free: Vec<usize>,
    net: Net,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingFlow {
    spec: FlowSpec,
    seed: u64,
    layers: Vec<CouplingLayer>,
    params: Vec<f64>,
}

/// Which input positions a layer transforms.
fn free_mask(spec: &FlowSpec, layer: usize) -> Vec<bool> {
    let c = spec.channels;
    let schedule = if c > 1 { layer % 4 } else { layer % 2 };
    let mut mask = Vec::with_capacity(spec.dim());
    for y in 0..spec.height {
        for x in 0..spec.width {
            for ch in 0..c {
                mask.push(match schedule {
                    0 => (x + y) % 2 == 1,
                    1 => (x + y) % 2 == 0,
                    2 => ch != 0,
                    _ => ch == 0,
                });
            }
        }
    }
    mask
}

/// Per-layer intermediates kept for backpropagation.
#[derive(Debug, Clone)]
pub struct FlowTrace {
    inputs: Vec<Vec<f64>>,
    hidden: Vec<Vec<f64>>,
    scales: Vec<Vec<f64>>,
    pub z: Vec<f64>,
    pub logdet: f64,
}

impl CouplingFlow {
    pub fn new(spec: FlowSpec, seed: u64, init: FlowInit) -> Result<Self, ModelError> {
        if spec.dim() == 0 || spec.layers == 0 || spec.hidden == 0 {
            return Err(ModelError::InvalidSpec(format!("degenerate flow spec {spec:?}")));
        }
        if !(spec.log_scale_bound > 0.0 && spec.log_scale_bound.is_finite()) {
            return Err(ModelError::InvalidSpec("log-scale bound must be positive".into()));
        }
        if let Conditioner::Conv { kernel, .. } = spec.conditioner {
            if kernel % 2 == 0 {
                return Err(ModelError::InvalidSpec(format!("kernel size {kernel} must be odd")));
            }
        }
        let mut layout = Layout::default();
        let layers: Vec<CouplingLayer> = (0..spec.layers)
            .map(|l| {
                let mask = free_mask(&spec, l);
                let free: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
                let cond: Vec<usize> = (0..mask.len()).filter(|&i| !mask[i]).collect();
                let net = match spec.conditioner {
                    Conditioner::Dense => Net::Dense {
                        hidden: layout.dense(cond.len(), spec.hidden),
                        out: layout.dense(spec.hidden, 2 * free.len()),
                    },
                    Conditioner::Conv { kernel, padding } => {
                        let (wh, c) = ((spec.width, spec.height), spec.channels);
                        Net::Conv {
                            hidden: layout.conv(wh, c, spec.hidden, kernel, padding),
                            out: layout.conv(wh, spec.hidden, 2 * c, kernel, padding),
                        }
                    }
                };
                CouplingLayer { cond, free, net }
            })
            .collect();

        let mut params = vec![0.0; layout.len()];
        let mut rng = rng::seeded(seed);
        for layer in &layers {
            match &layer.net {
                Net::Dense { hidden, out } => {
                    hidden.init_normal(&mut params, 1.0, &mut rng);
                    match init {
                        FlowInit::Zero => out.init_zero(&mut params),
                        FlowInit::Random { scale } => out.init_normal(&mut params, scale, &mut rng),
                    }
                }
                Net::Conv { hidden, out } => {
                    hidden.init_normal(&mut params, 1.0, &mut rng);
                    match init {
                        FlowInit::Zero => out.init_zero(&mut params),
                        FlowInit::Random { scale } => out.init_normal(&mut params, scale, &mut rng),
                    }
                }
            }
        }
        Ok(Self {
            spec,
            seed,
            layers,
            params,
        })
    }

    pub fn spec(&self) -> &FlowSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.spec.dim()
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

    /// Overwrites every log-scale output with zero, turning each layer into a
    /// pure shift.
    pub fn zero_log_scales(&mut self) {
        let c = self.spec.channels;
        for layer in &self.layers {
            match &layer.net {
                Net::Dense { out, .. } => {
                    let f = layer.free.len();
                    out.weights_mut(&mut self.params)[..f * out.inputs].fill(0.0);
                    out.bias_mut(&mut self.params)[..f].fill(0.0);
                }
                Net::Conv { out, .. } => {
                    out.weights_of_mut(&mut self.params, 0..c).fill(0.0);
                    out.bias_mut(&mut self.params)[..c].fill(0.0);
                }
            }
        }
    }

    /// Sets every shift output to `t` and every log-scale to `s` regardless of input.
    pub fn set_constant_outputs(&mut self, s: f64, t: f64) {
        let bound = self.spec.log_scale_bound;
        let raw = bound * (s / bound).atanh();
        let c = self.spec.channels;
        for layer in &self.layers {
            let (b, split) = match &layer.net {
                Net::Dense { out, .. } => {
                    out.weights_mut(&mut self.params).fill(0.0);
                    (out.bias_mut(&mut self.params), layer.free.len())
                }
                Net::Conv { out, .. } => {
                    out.weights_of_mut(&mut self.params, 0..2 * c).fill(0.0);
                    (out.bias_mut(&mut self.params), c)
                }
            };
            b[..split].fill(raw);
            b[split..].fill(t);
        }
    }

    /// Number of positions each layer transforms.
    pub fn free_counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.free.len()).collect()
    }

    fn check_dim(&self, v: &[f64]) -> Result<(), ModelError> {
        if v.len() != self.dim() {
            return Err(ModelError::Dimension {
                expected: self.dim(),
                got: v.len(),
            });
        }
        Ok(())
    }

    /// Network input of a layer: the conditioning values (dense) or the
    /// whole map with the free half zeroed (convolutional).
    fn net_input(layer: &CouplingLayer, x: &[f64]) -> Vec<f64> {
        match layer.net {
            Net::Dense { .. } => layer.cond.iter().map(|&i| x[i]).collect(),
            Net::Conv { .. } => {
                let mut xm = x.to_vec();
                for &i in &layer.free {
                    xm[i] = 0.0;
                }
                xm
            }
        }
    }

    /// `(log-scales, shifts)` of one layer for the given input; `h` receives
    /// the hidden activations.
    fn conditioner(&self, layer: &CouplingLayer, x: &[f64], h: &mut Vec<f64>) -> (Vec<f64>, Vec<f64>) {
        let input = Self::net_input(layer, x);
        let f = layer.free.len();
        let bound = self.spec.log_scale_bound;
        let squash = |r: f64| bound * (r / bound).tanh();
        match &layer.net {
            Net::Dense { hidden, out } => {
                h.resize(hidden.outputs, 0.0);
                hidden.forward(&self.params, &input, h);
                self.spec.activation.apply(h);
                let mut o = vec![0.0; 2 * f];
                out.forward(&self.params, h, &mut o);
                let shifts = o.split_off(f);
                (o.into_iter().map(squash).collect(), shifts)
            }
            Net::Conv { hidden, out } => {
                let c = self.spec.channels;
                h.resize(hidden.width * hidden.height * hidden.outputs, 0.0);
                hidden.forward(&self.params, &input, h);
                self.spec.activation.apply(h);
                let mut o = vec![0.0; hidden.width * hidden.height * out.outputs];
                out.forward(&self.params, h, &mut o);
                let at = |i: usize| (i / c) * 2 * c + i % c;
                let scales = layer.free.iter().map(|&i| squash(o[at(i)])).collect();
                let shifts = layer.free.iter().map(|&i| o[at(i) + c]).collect();
                (scales, shifts)
            }
        }
    }

    /// `z = f(x)` and `log |det df/dx|`.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64), ModelError> {
        let trace = self.forward_trace(x)?;
        Ok((trace.z, trace.logdet))
    }

    /// Forward pass keeping the intermediates needed by [`Self::backward`].
    pub fn forward_trace(&self, x: &[f64]) -> Result<FlowTrace, ModelError> {
        self.check_dim(x)?;
        let n = self.layers.len();
        let mut trace = FlowTrace {
            inputs: Vec::with_capacity(n),
            hidden: Vec::with_capacity(n),
            scales: Vec::with_capacity(n),
            z: x.to_vec(),
            logdet: 0.0,
        };
        for (li, layer) in self.layers.iter().enumerate() {
            let input = trace.z.clone();
            let mut h = Vec::new();
            let (s, t) = self.conditioner(layer, &input, &mut h);
            for (j, &i) in layer.free.iter().enumerate() {
                trace.z[i] = input[i] * s[j].exp() + t[j];
                trace.logdet += s[j];
            }
            if !trace.z.iter().all(|v| v.is_finite()) || !trace.logdet.is_finite() {
                return Err(ModelError::NonFinite { layer: li });
            }
            trace.inputs.push(input);
            trace.hidden.push(h);
            trace.scales.push(s);
        }
        Ok(trace)
    }

    /// Accumulates into `grads` the parameter gradient of a loss whose partials
    /// are `g_z = dL/dz` and `g_logdet = dL/dlogdet`. Returns `dL/dx`.
    pub fn backward(&self, trace: &FlowTrace, g_z: &[f64], g_logdet: f64, grads: &mut [f64]) -> Vec<f64> {
        let bound = self.spec.log_scale_bound;
        let mut g = g_z.to_vec();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let x = &trace.inputs[li];
            let h = &trace.hidden[li];
            let s = &trace.scales[li];
            let f = layer.free.len();
            let mut g_o = vec![0.0; 2 * f];
            for (j, &i) in layer.free.iter().enumerate() {
                let e = s[j].exp();
                let gy = g[i];
                let g_s = gy * x[i] * e + g_logdet;
                let r = s[j] / bound;
                g_o[j] = g_s * (1.0 - r * r);
                g_o[f + j] = gy;
                g[i] = gy * e;
            }
            let input = Self::net_input(layer, x);
            let mut g_h = vec![0.0; h.len()];
            let mut g_in = vec![0.0; input.len()];
            match &layer.net {
                Net::Dense { hidden, out } => {
                    out.backward(&self.params, h, &g_o, grads, Some(&mut g_h));
                    self.spec.activation.backward(h, &mut g_h);
                    hidden.backward(&self.params, &input, &g_h, grads, Some(&mut g_in));
                    for (&i, gx) in layer.cond.iter().zip(g_in) {
                        g[i] += gx;
                    }
                }
                Net::Conv { hidden, out } => {
                    let c = self.spec.channels;
                    let mut g_full = vec![0.0; hidden.width * hidden.height * out.outputs];
                    for (j, &i) in layer.free.iter().enumerate() {
                        let at = (i / c) * 2 * c + i % c;
                        g_full[at] = g_o[j];
                        g_full[at + c] = g_o[f + j];
                    }
                    out.backward(&self.params, h, &g_full, grads, Some(&mut g_h));
                    self.spec.activation.backward(h, &mut g_h);
                    hidden.backward(&self.params, &input, &g_h, grads, Some(&mut g_in));
                    // free entries were zeroed in the input, so only conditioning ones carry gradient
                    for &i in &layer.cond {
                        g[i] += g_in[i];
                    }
                }
            }
        }
        g
    }

    pub fn inverse(&self, z: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_dim(z)?;
        let mut x = z.to_vec();
        let mut h = Vec::new();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let (s, t) = self.conditioner(layer, &x, &mut h);
            for (j, &i) in layer.free.iter().enumerate() {
                x[i] = (x[i] - t[j]) * (-s[j]).exp();
            }
            if !x.iter().all(|v| v.is_finite()) {
                return Err(ModelError::NonFinite { layer: li });
            }
        }
        Ok(x)
    }

    /// Random flow for oracles: small random output layers instead of zeros.
    pub fn random(spec: FlowSpec, seed: u64) -> Result<Self, ModelError> {
        let mut flow = Self::new(spec, seed, FlowInit::Random { scale: 0.5 })?;
        let mut rng = rng::stream(seed, 1);
        for layer in &flow.layers {
            let bias = match &layer.net {
                Net::Dense { out, .. } => out.bias_mut(&mut flow.params),
                Net::Conv { out, .. } => out.bias_mut(&mut flow.params),
            };
            for b in bias {
                *b = rng.gen_range(-0.3..0.3);
            }
        }
        Ok(flow)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_vec(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = rng::seeded(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn masks_alternate_and_cover() {
        let gray = FlowSpec::for_image(4, 4, 1);
        let a = free_mask(&gray, 0);
        let b = free_mask(&gray, 1);
        assert!(a.iter().zip(&b).all(|(x, y)| x != y));
        assert_eq!(a.iter().filter(|&&m| m).count(), 8);

        let rgb = FlowSpec::for_image(2, 2, 3);
        let c = free_mask(&rgb, 2);
        assert_eq!(c, (0..12).map(|i| i % 3 != 0).collect::<Vec<_>>());
    }

    #[test]
    fn zero_init_is_identity() {
        let flow = CouplingFlow::new(FlowSpec::vector(6), 3, FlowInit::Zero).unwrap();
        let x = random_vec(1, 6);
        let (z, logdet) = flow.forward(&x).unwrap();
        assert_eq!(z, x);
        assert_eq!(logdet, 0.0);
        assert_eq!(flow.inverse(&x).unwrap(), x);
    }

    #[test]
    fn zero_log_scale_flow_is_a_shift() {
        let mut flow = CouplingFlow::random(FlowSpec::vector(8), 5).unwrap();
        flow.zero_log_scales();
        let x = random_vec(2, 8);
        let (z, logdet) = flow.forward(&x).unwrap();
        assert_eq!(logdet, 0.0);
        assert!(z.iter().zip(&x).any(|(a, b)| a != b));
        let back = flow.inverse(&z).unwrap();
        assert!(back.iter().zip(&x).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn constant_log_scale_single_layer() {
        let mut spec = FlowSpec::vector(8);
        spec.layers = 1;
        let mut flow = CouplingFlow::new(spec, 0, FlowInit::Zero).unwrap();
        let s = 0.7;
        flow.set_constant_outputs(s, -0.1);
        let (_, logdet) = flow.forward(&random_vec(4, 8)).unwrap();
        assert!((logdet - s * 4.0).abs() < 1e-12);
    }

    #[test]
    fn round_trip_both_ways() {
        let flow = CouplingFlow::random(FlowSpec::for_image(4, 2, 1), 9).unwrap();
        for seed in 0..20 {
            let x = random_vec(seed, 8);
            let (z, _) = flow.forward(&x).unwrap();
            let back = flow.inverse(&z).unwrap();
            assert!(back.iter().zip(&x).all(|(a, b)| (a - b).abs() <= 1e-5));

            let z = random_vec(100 + seed, 8);
            let (again, _) = flow.forward(&flow.inverse(&z).unwrap()).unwrap();
            assert!(again.iter().zip(&z).all(|(a, b)| (a - b).abs() <= 1e-5));
        }
    }

    fn check_gradients(spec: FlowSpec, seed: u64) {
        let flow = CouplingFlow::random(spec, seed).unwrap();
        let d = flow.dim();
        let x = random_vec(7, d);
        // L = 0.5 |z|^2 - logdet
        let loss = |f: &CouplingFlow, x: &[f64]| {
            let (z, ld) = f.forward(x).unwrap();
            0.5 * z.iter().map(|v| v * v).sum::<f64>() - ld
        };
        let trace = flow.forward_trace(&x).unwrap();
        let mut grads = vec![0.0; flow.params().len()];
        let g_x = flow.backward(&trace, &trace.z.clone(), -1.0, &mut grads);

        let eps = 1e-6;
        for i in 0..flow.params().len() {
            let mut a = flow.clone();
            a.params_mut()[i] += eps;
            let mut b = flow.clone();
            b.params_mut()[i] -= eps;
            let fd = (loss(&a, &x) - loss(&b, &x)) / (2.0 * eps);
            assert!((fd - grads[i]).abs() < 1e-6 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", grads[i]);
        }
        for j in 0..d {
            let mut a = x.clone();
            a[j] += eps;
            let mut b = x.clone();
            b[j] -= eps;
            let fd = (loss(&flow, &a) - loss(&flow, &b)) / (2.0 * eps);
            assert!((fd - g_x[j]).abs() < 1e-6 * (1.0 + fd.abs()), "input {j}");
        }
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        let mut spec = FlowSpec::vector(4);
        spec.hidden = 5;
        spec.layers = 3;
        check_gradients(spec.clone(), 2);
        // relu kinks are measure-zero for random inputs
        check_gradients(FlowSpec { activation: Activation::Relu, ..spec }, 2);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        for padding in [Padding::Zero, Padding::Circular] {
            for (w, h, c) in [(3, 3, 1), (2, 3, 3)] {
                let mut spec = FlowSpec::for_image(w, h, c);
                spec.hidden = 3;
                spec.layers = 4;
                spec.conditioner = Conditioner::Conv { kernel: 3, padding };
                check_gradients(spec.clone(), 5);
                check_gradients(FlowSpec { activation: Activation::Relu, ..spec }, 5);
            }
        }
    }

    #[test]
    fn conv_conditioner_ignores_free_inputs() {
        let mut spec = FlowSpec::for_image(4, 4, 1);
        spec.layers = 1;
        let flow = CouplingFlow::random(spec, 8).unwrap();
        let mut x = random_vec(3, 16);
        let (z, ld) = flow.forward(&x).unwrap();
        // moving a free pixel changes only its own output, by exp(s) per unit
        let free = flow.layers[0].free[0];
        x[free] += 0.25;
        let (z2, ld2) = flow.forward(&x).unwrap();
        assert_eq!(ld, ld2);
        for i in 0..16 {
            if i != free {
                assert_eq!(z[i], z2[i]);
            }
        }
        assert!(z2[free] != z[free]);
        assert!(CouplingFlow::new(FlowSpec { conditioner: Conditioner::Conv { kernel: 2, padding: Padding::Zero }, ..FlowSpec::for_image(4, 4, 1) }, 0, FlowInit::Zero).is_err());
    }

    #[test]
    fn wrong_dimension_is_an_error() {
        let flow = CouplingFlow::new(FlowSpec::vector(4), 0, FlowInit::Zero).unwrap();
        assert!(matches!(
            flow.forward(&[0.0; 3]),
            Err(ModelError::Dimension { expected: 4, got: 3 })
        ));
    }

    #[test]
    fn non_finite_activations_name_the_layer() {
        let mut flow = CouplingFlow::new(FlowSpec::vector(2), 0, FlowInit::Zero).unwrap();
        flow.set_constant_outputs(0.0, 1e308);
        match flow.forward(&[1e308, 1e308]) {
            Err(ModelError::NonFinite { layer }) => assert!(layer <= 1),
            other => panic!("{other:?}"),
        }
    }
}
