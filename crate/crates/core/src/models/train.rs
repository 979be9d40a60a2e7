//! Minibatch training with Adam (decoupled weight decay).

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ArModel, Autoencoder, CouplingFlow, ModelError};
use crate::data::{dequantize, Dataset};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// 0 leaves the model at its initialization.
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub schedule: Schedule,
}

/// Learning-rate multiplier over epochs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    /// Half-cosine from the full rate in epoch 1 down to zero after the last.
    Cosine,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 20,
            batch_size: 32,
            seed: 0,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 50.0,
            schedule: Schedule::Constant,
        }
    }
}

impl TrainConfig {
    /// Learning rate used throughout a 1-based epoch.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Cosine => {
                let t = (epoch.saturating_sub(1)) as f64 / self.epochs.max(1) as f64;
                self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return bad("eps must be positive; weight_decay and grad_clip non-negative");
        }
        Ok(())
    }
}

/// Adam moment state.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, cfg: &TrainConfig, lr: f64, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let update = (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
            *p -= lr * (update + cfg.weight_decay * *p);
        }
    }
}

/// Anything with a flat parameter vector.
pub trait Parameterized: Clone {
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
}

macro_rules! parameterized {
    ($($t:ty),*) => {$(
        impl Parameterized for $t {
            fn params(&self) -> &[f64] {
                <$t>::params(self)
            }
            fn params_mut(&mut self) -> &mut [f64] {
                <$t>::params_mut(self)
            }
        }
    )*};
}
parameterized!(CouplingFlow, ArModel, Autoencoder);

#[derive(Debug, Clone)]
pub struct Trained<M> {
    pub model: M,
    /// Mean per-sample log-likelihood (negated loss) of each epoch.
    pub curve: Vec<f64>,
    /// Copies of the model at the requested epochs, ascending.
    pub snapshots: Vec<(usize, M)>,
}

#[derive(Debug, Error)]
pub enum TrainError<M: std::fmt::Debug> {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("training set is empty")]
    Empty,
    #[error("loss became non-finite in epoch {epoch}")]
    Diverged {
        epoch: usize,
        /// Model at the end of the last epoch that finished finite.
        last_finite: Box<M>,
        curve: Vec<f64>,
    },
}

/// Generic loop: `loss_grad(model, sample, epoch, grads)` returns one sample's
/// loss and accumulates its gradient.
pub fn fit<M, F>(
    init: M,
    samples: usize,
    cfg: &TrainConfig,
    snapshot_epochs: &[usize],
    mut loss_grad: F,
) -> Result<Trained<M>, TrainError<M>>
where
    M: Parameterized + std::fmt::Debug,
    F: FnMut(&M, usize, usize, &mut [f64]) -> Result<f64, ModelError>,
{
    cfg.validate()?;
    if samples == 0 {
        return Err(TrainError::Empty);
    }
    let mut model = init;
    let mut last_finite = model.clone();
    let mut adam = Adam::new(model.params().len());
    let mut grads = vec![0.0; model.params().len()];
    let mut order: Vec<usize> = (0..samples).collect();
    let mut shuffle = rng::stream(cfg.seed, 0x5EED_0F_0D3E);
    let batch = cfg.batch_size.min(samples);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut snapshots = Vec::new();

    for epoch in 1..=cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        order.shuffle(&mut shuffle);
        let mut epoch_loss = 0.0;
        let mut diverged = false;
        for chunk in order.chunks(batch) {
            grads.fill(0.0);
            let mut loss = 0.0;
            for &i in chunk {
                match loss_grad(&model, i, epoch, &mut grads) {
                    Ok(l) => loss += l,
                    Err(ModelError::NonFinite { .. }) => loss = f64::NAN,
                    Err(e) => return Err(e.into()),
                }
            }
            let inv = 1.0 / chunk.len() as f64;
            let mut norm2 = 0.0;
            for g in &mut grads {
                *g *= inv;
                norm2 += *g * *g;
            }
            if !loss.is_finite() || !norm2.is_finite() {
                diverged = true;
                break;
            }
            let norm = norm2.sqrt();
            if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
                let s = cfg.grad_clip / norm;
                grads.iter_mut().for_each(|g| *g *= s);
            }
            adam.step(cfg, lr, model.params_mut(), &grads);
            epoch_loss += loss;
        }
        if diverged || !model.params().iter().all(|p| p.is_finite()) {
            return Err(TrainError::Diverged {
                epoch,
                last_finite: Box::new(last_finite),
                curve,
            });
        }
        curve.push(-epoch_loss / samples as f64);
        last_finite = model.clone();
        if snapshot_epochs.contains(&epoch) {
            snapshots.push((epoch, model.clone()));
        }
    }
    Ok(Trained {
        model,
        curve,
        snapshots,
    })
}

/// Stream id of the training dequantization noise for one (epoch, sample).
fn dequant_stream(epoch: usize, id: u64) -> u64 {
    rng::mix(epoch as u64) ^ id
}

/// Maximizes the mean flow log-likelihood on freshly dequantized inputs.
pub fn train_flow(
    init: CouplingFlow,
    ds: &Dataset,
    cfg: &TrainConfig,
    snapshot_epochs: &[usize],
) -> Result<Trained<CouplingFlow>, TrainError<CouplingFlow>> {
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    fit(init, ds.len(), cfg, snapshot_epochs, |flow, i, epoch, grads| {
        let id = ds.ids()[i];
        let mut r = rng::stream(cfg.seed, dequant_stream(epoch, id));
        let x = dequantize(ds.images()[i].pixels_q(), &mut r);
        let trace = flow.forward_trace(&x)?;
        // loss = -log N(z; 0, I) - logdet
        let nll = trace.z.iter().map(|v| 0.5 * v * v + half_log_2pi).sum::<f64>() - trace.logdet;
        flow.backward(&trace, &trace.z, -1.0, grads);
        Ok(nll)
    })
}

pub fn train_ar(
    init: ArModel,
    ds: &Dataset,
    cfg: &TrainConfig,
    snapshot_epochs: &[usize],
) -> Result<Trained<ArModel>, TrainError<ArModel>> {
    fit(init, ds.len(), cfg, snapshot_epochs, |model, i, _, grads| {
        model.accumulate_nll_grad(ds.images()[i].pixels_q(), grads)
    })
}

/// Trains on squared reconstruction error of the float pixels; the curve
/// holds negated mean losses.
pub fn train_autoencoder(
    init: Autoencoder,
    ds: &Dataset,
    cfg: &TrainConfig,
    snapshot_epochs: &[usize],
) -> Result<Trained<Autoencoder>, TrainError<Autoencoder>> {
    fit(init, ds.len(), cfg, snapshot_epochs, |ae, i, _, grads| {
        ae.accumulate_loss_grad(ds.images()[i].pixels_f(), grads)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Image;
    use crate::models::{ArSpec, FlowInit, FlowSpec, Mlp, MlpSpec};

    fn cfg(epochs: usize, batch: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            learning_rate: lr,
            epochs,
            batch_size: batch,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    fn gray(side: usize, n: usize, seed: u64) -> Dataset {
        crate::data::synth_complexity_graded(seed, n, side, 2).unwrap()
    }

    #[test]
    fn zero_epochs_returns_the_initialization() {
        let ds = gray(4, 4, 1);
        let init = CouplingFlow::random(FlowSpec::for_image(4, 4, 1), 3).unwrap();
        let out = train_flow(init.clone(), &ds, &cfg(0, 2, 1e-3), &[]).unwrap();
        assert_eq!(out.model, init);
        assert!(out.curve.is_empty());
    }

    #[test]
    fn training_is_seed_deterministic() {
        let ds = gray(4, 6, 2);
        let init = CouplingFlow::new(FlowSpec::for_image(4, 4, 1), 3, FlowInit::Zero).unwrap();
        let a = train_flow(init.clone(), &ds, &cfg(3, 4, 1e-2), &[1, 3]).unwrap();
        let b = train_flow(init, &ds, &cfg(3, 4, 1e-2), &[1, 3]).unwrap();
        assert_eq!(a.model.params(), b.model.params());
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.snapshots.iter().map(|s| s.0).collect::<Vec<_>>(), vec![1, 3]);
        assert_eq!(a.snapshots[1].1, a.model);
    }

    #[test]
    fn single_image_loss_strictly_decreases() {
        let ds = gray(4, 2, 5).subset(&[1]).unwrap();
        let init = CouplingFlow::new(FlowSpec::for_image(4, 4, 1), 0, FlowInit::Zero).unwrap();
        let out = train_flow(init, &ds, &cfg(10, 32, 1e-3), &[]).unwrap();
        assert!(out.curve.windows(2).all(|w| w[1] > w[0]), "{:?}", out.curve);
    }

    #[test]
    fn ar_learns_constant_images() {
        let img = Image::from_q(3, 3, 1, vec![0; 9]).unwrap();
        let ds = Dataset::with_sequential_ids("zeros", vec![img; 4]).unwrap();
        let mut spec = ArSpec::for_image(3, 3, 1);
        spec.hidden = 8;
        let out = train_ar(ArModel::new(spec, 0).unwrap(), &ds, &cfg(150, 4, 5e-2), &[]).unwrap();
        let x = vec![0u8; 9];
        for lp in out.model.conditionals(&x).unwrap() {
            assert!(lp.exp() > 0.99, "{}", lp.exp());
        }
    }

    #[test]
    fn batch_size_clamps_to_the_dataset() {
        let ds = gray(4, 2, 9);
        let mut spec = ArSpec::for_image(4, 4, 1);
        spec.hidden = 4;
        let out = train_ar(ArModel::new(spec, 0).unwrap(), &ds, &cfg(2, 1000, 1e-3), &[]).unwrap();
        assert_eq!(out.curve.len(), 2);
    }

    #[test]
    fn divergence_returns_the_last_finite_model() {
        let ds = gray(4, 2, 3);
        let init = CouplingFlow::new(FlowSpec::for_image(4, 4, 1), 0, FlowInit::Zero).unwrap();
        let mut calls = 0;
        let res = fit(init.clone(), ds.len(), &cfg(5, 2, 1e-3), &[], |_, _, _, grads| {
            calls += 1;
            grads[0] += 1.0;
            Ok(if calls > 4 { f64::INFINITY } else { 1.0 })
        });
        match res {
            Err(TrainError::Diverged { epoch, curve, last_finite }) => {
                assert_eq!(epoch, 3);
                assert_eq!(curve, vec![-1.0, -1.0]);
                assert_ne!(*last_finite, init);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let ds = gray(4, 2, 3);
        let init = CouplingFlow::new(FlowSpec::for_image(4, 4, 1), 0, FlowInit::Zero).unwrap();
        let mut c = cfg(1, 1, 0.0);
        assert!(matches!(train_flow(init.clone(), &ds, &c, &[]), Err(TrainError::Model(_))));
        c.learning_rate = 1e-3;
        c.batch_size = 0;
        assert!(matches!(train_flow(init, &ds, &c, &[]), Err(TrainError::Model(_))));
    }

    #[test]
    fn autoencoder_reduces_reconstruction_error() {
        let ds = gray(4, 16, 4);
        let spec = MlpSpec {
            input: 16,
            hidden: vec![8],
            output: 4,
        };
        let out = train_autoencoder(Autoencoder::new(Mlp::new(spec, 1).unwrap()), &ds, &cfg(30, 8, 1e-2), &[]).unwrap();
        assert!(out.curve.last().unwrap() > &out.curve[0]);
    }
}
