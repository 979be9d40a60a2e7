//! Synthetic grayscale images with a known complexity ordering.
//!
//! Each image is a random sum of 2-D sinusoids. Tier `k` of `levels` keeps
//! every frequency whose radius is at most `k / levels` of the largest grid
//! frequency, so tier 1 holds smooth gradients and the top tier is (for a flat
//! spectrum) white noise. Component amplitudes do not depend on the tier, so
//! pixel variance grows with the tier along with the spatial detail.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Image};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub seed: u64,
    pub n: usize,
    pub side: usize,
    pub levels: usize,
    /// Pixel standard deviation of a top-tier field before clamping.
    pub contrast: f64,
    /// Amplitude falloff exponent: component weight is `radius^-falloff`.
    pub falloff: f64,
    /// Per-image brightness offset drawn from `U(-jitter, jitter)`.
    pub brightness_jitter: f64,
    /// Generate every image at this tier instead of splitting evenly.
    #[serde(default)]
    pub only_tier: Option<usize>,
    /// Standard deviation of white noise added to every pixel of every tier,
    /// so low tiers are not confined to a low-dimensional subspace.
    #[serde(default)]
    pub noise_floor: f64,
    /// Rescale each tier's components to the same total variance, so tiers
    /// differ in spectral shape only and not in pixel variance.
    #[serde(default)]
    pub equal_variance: bool,
}

impl SynthParams {
    pub fn new(seed: u64, n: usize, side: usize, levels: usize) -> Self {
        Self {
            seed,
            n,
            side,
            levels,
            contrast: 0.2,
            falloff: 0.0,
            brightness_jitter: 0.1,
            only_tier: None,
            noise_floor: 0.0,
            equal_variance: false,
        }
    }
}

/// Flat-spectrum tiers with default contrast; see [`synth_with`].
pub fn synth_complexity_graded(
    seed: u64,
    n: usize,
    side: usize,
    levels: usize,
) -> Result<Dataset, DataError> {
    synth_with(&SynthParams::new(seed, n, side, levels))
}

struct Component {
    fu: f64,
    fv: f64,
    radius: f64,
    weight: f64,
}

fn components(side: usize, falloff: f64) -> Vec<Component> {
    let half = (side / 2) as i64;
    let mut out = Vec::new();
    for fu in 0..=half {
        for fv in (1 - half)..=half {
            if fu == 0 && fv <= 0 {
                continue;
            }
            let radius = ((fu * fu + fv * fv) as f64).sqrt();
            out.push(Component {
                fu: fu as f64,
                fv: fv as f64,
                radius,
                weight: radius.powf(-falloff),
            });
        }
    }
    out
}

/// Generates `n` images split evenly into `levels` contiguous tiers; the
/// 1-based tier index is stored as the label. Deterministic in `seed`.
pub fn synth_with(p: &SynthParams) -> Result<Dataset, DataError> {
    if p.levels < 2 {
        return Err(DataError::InvalidArgument(format!(
            "need at least 2 complexity levels, got {}",
            p.levels
        )));
    }
    if p.n < p.levels {
        return Err(DataError::InvalidArgument(format!(
            "n = {} is smaller than levels = {}",
            p.n, p.levels
        )));
    }
    if p.side < 2 {
        return Err(DataError::InvalidArgument(format!("side {} < 2", p.side)));
    }
    if p.only_tier.is_some_and(|t| t == 0 || t > p.levels) {
        return Err(DataError::InvalidArgument(format!(
            "tier {:?} outside 1..={}",
            p.only_tier, p.levels
        )));
    }
    if !(p.contrast >= 0.0 && p.falloff.is_finite() && p.brightness_jitter >= 0.0 && p.noise_floor >= 0.0) {
        return Err(DataError::InvalidArgument("invalid synthesis parameters".into()));
    }

    let comps = components(p.side, p.falloff);
    let max_radius = comps.iter().map(|c| c.radius).fold(0.0, f64::max);
    let power = |cutoff: f64| {
        comps
            .iter()
            .filter(|c| c.radius <= cutoff + 1e-9)
            .map(|c| c.weight * c.weight)
            .sum::<f64>()
    };
    let full = power(f64::INFINITY);

    let mut images = Vec::with_capacity(p.n);
    let mut tiers = Vec::with_capacity(p.n);
    for i in 0..p.n {
        let tier = p.only_tier.unwrap_or(i * p.levels / p.n + 1);
        let cutoff = (max_radius * tier as f64 / p.levels as f64).max(1.0);
        let scale = p.contrast / if p.equal_variance { power(cutoff) } else { full }.sqrt();
        let mut rng = rng::stream(p.seed, i as u64);
        let offset = if p.brightness_jitter > 0.0 {
            rng.gen_range(-p.brightness_jitter..p.brightness_jitter)
        } else {
            0.0
        };

        let active: Vec<(&Component, f64, f64)> = comps
            .iter()
            .filter(|c| c.radius <= cutoff + 1e-9)
            .map(|c| {
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                (c, a * scale * c.weight, b * scale * c.weight)
            })
            .collect();

        let mut px = vec![0.5 + offset; p.side * p.side];
        for (y, row) in px.chunks_exact_mut(p.side).enumerate() {
            for (x, v) in row.iter_mut().enumerate() {
                for (c, a, b) in &active {
                    let theta = 2.0 * PI * (c.fu * x as f64 + c.fv * y as f64) / p.side as f64;
                    *v += a * theta.cos() + b * theta.sin();
                }
                if p.noise_floor > 0.0 {
                    *v += p.noise_floor * rng.sample::<f64, _>(StandardNormal);
                }
                *v = v.clamp(0.0, 1.0);
            }
        }
        images.push(Image::from_f(p.side, p.side, 1, px)?);
        tiers.push(tier as u32);
    }
    Dataset::new(
        format!("synth-tiers-{}", p.levels),
        images,
        (0..p.n as u64).collect(),
        Some(tiers),
    )
}
