use std::collections::BTreeMap;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::estimators::ScoreTable;
use crate::rng;

/// Descending-score order of a score table with average ranks for ties.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    order: Vec<u64>,
    scores: Vec<f64>,
    rank_of: BTreeMap<u64, f64>,
}

/// Persisted form: ids in rank order and their scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingJson {
    pub ids: Vec<u64>,
    pub scores: Vec<f64>,
}

impl Ranking {
    /// Builds a ranking from `(id, score)` pairs; ids must be unique.
    pub fn from_scores(pairs: impl IntoIterator<Item = (u64, f64)>) -> Result<Self, AnalysisError> {
        let mut pairs: Vec<(u64, f64)> = pairs.into_iter().collect();
        if pairs.is_empty() {
            return Err(AnalysisError::Empty);
        }
        if let Some(&(id, _)) = pairs.iter().find(|(_, s)| s.is_nan()) {
            return Err(AnalysisError::NanScore { id });
        }
        pairs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        if pairs.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(AnalysisError::IdMismatch);
        }
        let mut rank_of = BTreeMap::new();
        let mut start = 0;
        while start < pairs.len() {
            let mut end = start + 1;
            while end < pairs.len() && pairs[end].1 == pairs[start].1 {
                end += 1;
            }
            // positions start+1 ..= end share their mean
            let avg = (start + 1 + end) as f64 / 2.0;
            for &(id, _) in &pairs[start..end] {
                rank_of.insert(id, avg);
            }
            start = end;
        }
        Ok(Self {
            order: pairs.iter().map(|p| p.0).collect(),
            scores: pairs.iter().map(|p| p.1).collect(),
            rank_of,
        })
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Ids from highest to lowest score; ties by ascending id.
    pub fn order(&self) -> &[u64] {
        &self.order
    }

    /// Scores aligned with [`Self::order`].
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn rank_of(&self, id: u64) -> Option<f64> {
        self.rank_of.get(&id).copied()
    }

    /// `(id, rank)` by ascending id.
    pub fn ranks(&self) -> impl Iterator<Item = (u64, f64)> + '_ {
        self.rank_of.iter().map(|(&id, &r)| (id, r))
    }

    pub fn same_ids(&self, other: &Ranking) -> bool {
        self.rank_of.len() == other.rank_of.len() && self.rank_of.keys().eq(other.rank_of.keys())
    }

    pub fn to_json(&self) -> RankingJson {
        RankingJson {
            ids: self.order.clone(),
            scores: self.scores.clone(),
        }
    }

    pub fn from_json(json: &RankingJson) -> Result<Self, AnalysisError> {
        if json.ids.len() != json.scores.len() {
            return Err(AnalysisError::IdMismatch);
        }
        Self::from_scores(json.ids.iter().copied().zip(json.scores.iter().copied()))
    }
}

/// Ranks the totals of `table`, highest first.
pub fn rank_by_score(table: &ScoreTable) -> Result<Ranking, AnalysisError> {
    Ranking::from_scores(table.iter().map(|(id, s)| (id, s.total)))
}

/// Splits the ranking into `bins` contiguous strata (the first `N % bins`
/// one longer) and draws `per_bin` ids from each without replacement, kept in
/// rank order.
pub fn stratified_sample(r: &Ranking, bins: usize, per_bin: usize, seed: u64) -> Result<Vec<Vec<u64>>, AnalysisError> {
    let n = r.len();
    if bins == 0 || bins > n {
        return Err(AnalysisError::Bins { bins, n });
    }
    let (base, extra) = (n / bins, n % bins);
    let mut out = Vec::with_capacity(bins);
    let mut start = 0;
    for b in 0..bins {
        let size = base + usize::from(b < extra);
        if per_bin > size {
            return Err(AnalysisError::StratumTooSmall { per_bin, size });
        }
        let mut picks = index::sample(&mut rng::stream(seed, b as u64), size, per_bin).into_vec();
        picks.sort_unstable();
        out.push(picks.into_iter().map(|i| r.order[start + i]).collect());
        start += size;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{ProxyTag, Score};
    use proptest::prelude::*;

    fn table(scores: &[(u64, f64)]) -> ScoreTable {
        scores.iter().map(|&(id, s)| (id, Score::proxy(s, ProxyTag::Jpeg))).collect()
    }

    #[test]
    fn small_example() {
        let r = rank_by_score(&table(&[(0, 3.0), (1, 1.0), (2, 2.0)])).unwrap();
        assert_eq!(r.order(), &[0, 2, 1]);
        assert_eq!(r.rank_of(0), Some(1.0));
        assert_eq!(r.rank_of(2), Some(2.0));
        assert_eq!(r.rank_of(1), Some(3.0));
    }

    #[test]
    fn ties_share_average_rank_and_order_by_id() {
        let r = rank_by_score(&table(&[(5, 1.0), (2, 1.0), (9, 1.0), (1, 1.0)])).unwrap();
        assert_eq!(r.order(), &[1, 2, 5, 9]);
        assert!(r.ranks().all(|(_, k)| k == 2.5));
    }

    #[test]
    fn nan_names_the_id() {
        assert_eq!(
            rank_by_score(&table(&[(0, 1.0), (7, f64::NAN)])),
            Err(AnalysisError::NanScore { id: 7 })
        );
        assert_eq!(rank_by_score(&ScoreTable::new()), Err(AnalysisError::Empty));
    }

    #[test]
    fn matches_brute_force_rank_oracle() {
        let mut state = 3u64;
        let pairs: Vec<(u64, f64)> = (0..1000)
            .map(|id| {
                state = rng::mix(state);
                (id, (state % 300) as f64 * 0.5)
            })
            .collect();
        let r = rank_by_score(&table(&pairs)).unwrap();
        for &(id, s) in &pairs {
            let above = pairs.iter().filter(|p| p.1 > s).count() as f64;
            let equal = pairs.iter().filter(|p| p.1 == s).count() as f64;
            assert_eq!(r.rank_of(id), Some(above + (equal + 1.0) / 2.0));
        }
        assert!(r.scores().windows(2).all(|w| w[0] >= w[1]));
    }

    proptest! {
        #[test]
        fn rank_sum_is_triangular(scores in prop::collection::vec(-5i32..5, 1..80)) {
            let t = table(&scores.iter().enumerate().map(|(i, &s)| (i as u64, f64::from(s))).collect::<Vec<_>>());
            let r = rank_by_score(&t).unwrap();
            let n = scores.len() as f64;
            prop_assert_eq!(r.ranks().map(|(_, k)| k).sum::<f64>(), n * (n + 1.0) / 2.0);
            prop_assert_eq!(Ranking::from_json(&r.to_json()).unwrap(), r);
        }
    }

    #[test]
    fn stratified_cases() {
        let r = Ranking::from_scores((0..10).map(|i| (i, -(i as f64)))).unwrap();
        let halves = stratified_sample(&r, 2, 5, 1).unwrap();
        assert_eq!(halves, vec![vec![0, 1, 2, 3, 4], vec![5, 6, 7, 8, 9]]);
        let full = stratified_sample(&r, 10, 1, 1).unwrap();
        assert_eq!(full.concat(), r.order());
        let a = stratified_sample(&r, 3, 2, 42).unwrap();
        assert_eq!(a, stratified_sample(&r, 3, 2, 42).unwrap());
        assert_eq!(a[0].len(), 2);
        assert!(a[0].iter().all(|&id| id < 4) && a[2].iter().all(|&id| id >= 7));
        assert_eq!(
            stratified_sample(&r, 3, 4, 1),
            Err(AnalysisError::StratumTooSmall { per_bin: 4, size: 4 - 1 })
        );
        assert!(stratified_sample(&r, 11, 1, 1).is_err());
    }
}
