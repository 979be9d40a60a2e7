//! External complexity proxies, signed so that larger means simpler.

mod jpeg;

pub use jpeg::{jpeg_length, jpeg_length_with_quality, DEFAULT_QUALITY};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{to_grayscale, Dataset, Image};
use crate::estimators::{ProxyTag, Score, ScoreTable};

#[derive(Debug, Error, PartialEq)]
pub enum ComplexityError {
    #[error("image is {width}x{height}; total variation needs at least 2x2")]
    TooSmall { width: usize, height: usize },
    #[error("sample {id}: {source}")]
    Sample {
        id: u64,
        #[source]
        source: Box<ComplexityError>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComplexityScore {
    pub value: f64,
    pub proxy_tag: ProxyTag,
}

/// Mean absolute horizontal difference plus mean absolute vertical difference
/// of the `[0, 1]` grayscale image.
pub fn tv_gray(img: &Image) -> Result<f64, ComplexityError> {
    let (w, h) = (img.width(), img.height());
    if w < 2 || h < 2 {
        return Err(ComplexityError::TooSmall { width: w, height: h });
    }
    let gray = to_grayscale(img);
    let px = gray.pixels_f();
    let mut horizontal = 0.0;
    let mut vertical = 0.0;
    for y in 0..h {
        for x in 0..w {
            let v = px[y * w + x];
            if x + 1 < w {
                horizontal += (px[y * w + x + 1] - v).abs();
            }
            if y + 1 < h {
                vertical += (px[(y + 1) * w + x] - v).abs();
            }
        }
    }
    Ok(horizontal / (h * (w - 1)) as f64 + vertical / ((h - 1) * w) as f64)
}

/// `-ln(1 + TV(gray(img)))`.
pub fn grad_complexity(img: &Image) -> Result<ComplexityScore, ComplexityError> {
    Ok(ComplexityScore {
        value: -(1.0 + tv_gray(img)?).ln(),
        proxy_tag: ProxyTag::Gradient,
    })
}

/// Negative entropy-coded byte length under the built-in baseline codec.
pub fn jpeg_complexity(img: &Image) -> ComplexityScore {
    ComplexityScore {
        value: -(jpeg_length(img) as f64),
        proxy_tag: ProxyTag::Jpeg,
    }
}

pub fn complexity(img: &Image, proxy: ProxyTag) -> Result<ComplexityScore, ComplexityError> {
    match proxy {
        ProxyTag::Jpeg => Ok(jpeg_complexity(img)),
        ProxyTag::Gradient => grad_complexity(img),
    }
}

/// One proxy score per id.
pub fn complexity_table(ds: &Dataset, proxy: ProxyTag) -> Result<ScoreTable, ComplexityError> {
    let rows: Vec<(u64, Result<ComplexityScore, ComplexityError>)> = ds
        .ids()
        .par_iter()
        .zip(ds.images().par_iter())
        .map(|(&id, img)| (id, complexity(img, proxy)))
        .collect();
    let mut table = ScoreTable::new();
    for (id, score) in rows {
        let score = score.map_err(|e| ComplexityError::Sample {
            id,
            source: Box::new(e),
        })?;
        table.insert(id, Score::from(score));
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{rank_by_score, spearman, Ranking};
    use crate::data::synth_complexity_graded;

    fn img(w: usize, h: usize, px: &[f64]) -> Image {
        Image::from_f(w, h, 1, px.to_vec()).unwrap()
    }

    #[test]
    fn tv_hand_cases() {
        assert_eq!(tv_gray(&Image::constant(4, 3, 3, 0.7).unwrap()).unwrap(), 0.0);
        assert_eq!(tv_gray(&img(2, 2, &[0.0, 1.0, 0.0, 1.0])).unwrap(), 1.0);
        let checker: Vec<f64> = (0..16).map(|i| ((i % 4 + i / 4) % 2) as f64).collect();
        assert_eq!(tv_gray(&img(4, 4, &checker)).unwrap(), 2.0);
        assert_eq!(
            tv_gray(&img(3, 1, &[0.0, 0.0, 0.0])),
            Err(ComplexityError::TooSmall { width: 3, height: 1 })
        );
    }

    #[test]
    fn gradient_proxy_values() {
        let flat = Image::constant(3, 3, 1, 0.2).unwrap();
        assert_eq!(grad_complexity(&flat).unwrap().value, 0.0);
        let tv1 = img(2, 2, &[0.0, 1.0, 0.0, 1.0]);
        assert!((grad_complexity(&tv1).unwrap().value + std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn gradient_proxy_decreases_with_tv() {
        let mut state = 5u64;
        let mut next = || {
            state = crate::rng::mix(state);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..200 {
            let a = img(3, 3, &(0..9).map(|_| next()).collect::<Vec<_>>());
            let b = img(3, 3, &(0..9).map(|_| next()).collect::<Vec<_>>());
            let (ta, tb) = (tv_gray(&a).unwrap(), tv_gray(&b).unwrap());
            let (ca, cb) = (grad_complexity(&a).unwrap().value, grad_complexity(&b).unwrap().value);
            if ta < tb {
                assert!(ca > cb);
            } else if ta > tb {
                assert!(ca < cb);
            }
        }
    }

    #[test]
    fn constant_outscores_noise_on_both_proxies() {
        let flat = Image::constant(16, 16, 1, 0.5).unwrap();
        let mut state = 77u64;
        let noise = Image::from_q(
            16,
            16,
            1,
            (0..256)
                .map(|_| {
                    state = crate::rng::mix(state);
                    state as u8
                })
                .collect(),
        )
        .unwrap();
        for proxy in [ProxyTag::Jpeg, ProxyTag::Gradient] {
            assert!(complexity(&flat, proxy).unwrap().value > complexity(&noise, proxy).unwrap().value);
        }
    }

    fn tier_ranking(ds: &Dataset) -> Ranking {
        let mut t = ScoreTable::new();
        for (id, _) in ds.iter() {
            let tier = ds.label_of(id).unwrap();
            t.insert(id, Score::proxy(-(tier as f64), ProxyTag::Gradient));
        }
        rank_by_score(&t).unwrap()
    }

    #[test]
    fn both_proxies_rank_synthetic_tiers() {
        let ds = synth_complexity_graded(3, 200, 16, 5).unwrap();
        let truth = tier_ranking(&ds);
        for proxy in [ProxyTag::Jpeg, ProxyTag::Gradient] {
            let table = complexity_table(&ds, proxy).unwrap();
            let rho = spearman(&rank_by_score(&table).unwrap(), &truth).unwrap();
            assert!(rho > 0.9, "{proxy:?}: {rho}");
        }
    }

    #[test]
    fn table_is_order_independent_and_deterministic() {
        let ds = synth_complexity_graded(8, 12, 8, 3).unwrap();
        let mut ids = ds.ids().to_vec();
        ids.reverse();
        let shuffled = ds.subset(&ids).unwrap();
        let a = complexity_table(&ds, ProxyTag::Jpeg).unwrap();
        assert_eq!(a, complexity_table(&shuffled, ProxyTag::Jpeg).unwrap());
        assert_eq!(a, complexity_table(&ds, ProxyTag::Jpeg).unwrap());
        let single = ds.subset(&[3]).unwrap();
        assert_eq!(complexity_table(&single, ProxyTag::Gradient).unwrap().len(), 1);
    }

    #[test]
    fn per_sample_errors_carry_the_id() {
        let tiny = Image::constant(1, 4, 1, 0.0).unwrap();
        let ds = Dataset::new("t", vec![tiny], vec![42], None).unwrap();
        match complexity_table(&ds, ProxyTag::Gradient) {
            Err(ComplexityError::Sample { id: 42, .. }) => {}
            other => panic!("{other:?}"),
        }
    }
}
