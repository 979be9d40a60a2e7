use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AnalysisError, Ranking};

/// Average-rank vectors of both rankings aligned by id.
fn aligned(a: &Ranking, b: &Ranking) -> Result<(Vec<f64>, Vec<f64>), AnalysisError> {
    if !a.same_ids(b) {
        return Err(AnalysisError::IdMismatch);
    }
    if a.len() < 2 {
        return Err(AnalysisError::TooFew { n: a.len() });
    }
    Ok(a.ranks().zip(b.ranks()).map(|((_, x), (_, y))| (x, y)).unzip())
}

/// Pearson correlation of the two average-rank vectors.
pub fn spearman(a: &Ranking, b: &Ranking) -> Result<f64, AnalysisError> {
    let (x, y) = aligned(a, b)?;
    let n = x.len() as f64;
    // average ranks always have mean (N + 1) / 2
    let mean = (n + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (xi, yi) in x.iter().zip(&y) {
        let (dx, dy) = (xi - mean, yi - mean);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(AnalysisError::Undefined);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Merge sort of `v` counting inversions (pairs `i < j` with `v[i] > v[j]`).
fn sort_counting_swaps(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = sort_counting_swaps(&mut v[..mid], &mut buf[..mid]);
    swaps += sort_counting_swaps(&mut v[mid..], &mut buf[mid..]);
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    let k = k + mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

/// Pairs within runs of equal values of a sorted sequence.
fn tied_pairs<T: PartialEq>(sorted: &[T]) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// `(C - D) / sqrt((n0 - n1)(n0 - n2))` from integer pair counts.
pub(crate) fn tau_b(numerator: i64, untied_a: u64, untied_b: u64) -> Result<f64, AnalysisError> {
    if untied_a == 0 || untied_b == 0 {
        return Err(AnalysisError::Undefined);
    }
    Ok((numerator as f64 / ((untied_a as f64) * (untied_b as f64)).sqrt()).clamp(-1.0, 1.0))
}

/// Kendall tau-b in `O(N log N)` (Knight's algorithm).
pub fn kendall_tau(a: &Ranking, b: &Ranking) -> Result<f64, AnalysisError> {
    let (x, y) = aligned(a, b)?;
    let n = x.len() as u64;
    let n0 = n * (n - 1) / 2;
    let mut pairs: Vec<(f64, f64)> = x.into_iter().zip(y).collect();
    pairs.sort_by(|p, q| p.0.total_cmp(&q.0).then(p.1.total_cmp(&q.1)));
    let n1 = tied_pairs(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
    let n3 = tied_pairs(&pairs);
    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = vec![0.0; ys.len()];
    let swaps = sort_counting_swaps(&mut ys, &mut buf);
    let n2 = tied_pairs(&ys);
    let numerator = n0 as i64 - n1 as i64 - n2 as i64 + n3 as i64 - 2 * swaps as i64;
    tau_b(numerator, n0 - n1, n0 - n2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stat {
    Spearman,
    Kendall,
}

impl Stat {
    pub fn apply(self, a: &Ranking, b: &Ranking) -> Result<f64, AnalysisError> {
        match self {
            Stat::Spearman => spearman(a, b),
            Stat::Kendall => kendall_tau(a, b),
        }
    }
}

impl fmt::Display for Stat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stat::Spearman => "spearman",
            Stat::Kendall => "kendall",
        })
    }
}

impl FromStr for Stat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "spearman" => Ok(Stat::Spearman),
            "kendall" => Ok(Stat::Kendall),
            other => Err(format!("unknown statistic {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub labels: Vec<String>,
    pub stat: Stat,
    pub values: Vec<Vec<f64>>,
}

impl CorrelationMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i][j]
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Pairwise statistic over labeled rankings, labels kept in input order.
pub fn correlation_matrix(rankings: &[(String, Ranking)], stat: Stat) -> Result<CorrelationMatrix, AnalysisError> {
    let n = rankings.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..i).map(move |j| (i, j))).collect();
    let cells: Vec<Result<f64, AnalysisError>> = pairs
        .par_iter()
        .map(|&(i, j)| stat.apply(&rankings[i].1, &rankings[j].1))
        .collect();
    let mut values = vec![vec![0.0; n]; n];
    for (i, row) in values.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for (&(i, j), v) in pairs.iter().zip(cells) {
        let v = v?;
        values[i][j] = v;
        values[j][i] = v;
    }
    Ok(CorrelationMatrix {
        labels: rankings.iter().map(|(l, _)| l.clone()).collect(),
        stat,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ranking(scores: &[f64]) -> Ranking {
        Ranking::from_scores(scores.iter().enumerate().map(|(i, &s)| (i as u64, s))).unwrap()
    }

    #[test]
    fn spearman_cases() {
        let a = ranking(&[5.0, 4.0, 3.0, 2.0, 1.0]);
        let b = ranking(&[4.0, 5.0, 2.0, 3.0, 1.0]);
        assert_eq!(spearman(&a, &a).unwrap(), 1.0);
        assert_eq!(spearman(&a, &ranking(&[1.0, 2.0, 3.0, 4.0, 5.0])).unwrap(), -1.0);
        assert!((spearman(&a, &b).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(spearman(&a, &ranking(&[1.0; 5])), Err(AnalysisError::Undefined));
        assert_eq!(spearman(&ranking(&[1.0]), &ranking(&[2.0])), Err(AnalysisError::TooFew { n: 1 }));
        assert_eq!(spearman(&a, &ranking(&[1.0; 4])), Err(AnalysisError::IdMismatch));
    }

    #[test]
    fn kendall_cases() {
        let a = ranking(&[3.0, 2.0, 1.0]);
        assert_eq!(kendall_tau(&a, &a).unwrap(), 1.0);
        assert_eq!(kendall_tau(&a, &ranking(&[1.0, 2.0, 3.0])).unwrap(), -1.0);
        assert!((kendall_tau(&a, &ranking(&[3.0, 1.0, 2.0])).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn inversion_count_matches_quadratic() {
        let mut state = 9u64;
        for n in [0usize, 1, 2, 7, 64, 101] {
            let mut v: Vec<f64> = (0..n)
                .map(|_| {
                    state = crate::rng::mix(state);
                    (state % 13) as f64
                })
                .collect();
            let brute = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).filter(|&(i, j)| v[i] > v[j]).count();
            let mut buf = vec![0.0; n];
            assert_eq!(sort_counting_swaps(&mut v, &mut buf), brute as u64);
            assert!(v.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn matrix_shape_and_reversal() {
        let a = ranking(&[1.0, 3.0, 2.0, 5.0]);
        let rev = ranking(&[-1.0, -3.0, -2.0, -5.0]);
        let one = correlation_matrix(&[("a".into(), a.clone())], Stat::Spearman).unwrap();
        assert_eq!(one.values, vec![vec![1.0]]);
        let m = correlation_matrix(&[("a".into(), a), ("rev".into(), rev)], Stat::Kendall).unwrap();
        assert_eq!(m.get(0, 1), -1.0);
        assert_eq!(m.get(1, 0), -1.0);
        assert_eq!(m.labels, vec!["a", "rev"]);
        let json = serde_json::to_string(&m).unwrap();
        assert!(json.contains("\"stat\":\"kendall\""));
    }
}
