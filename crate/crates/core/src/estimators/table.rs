use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{DensityScore, EstimatorError};
use crate::complexity::ComplexityScore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorTag {
    Flow,
    JacobianRect,
    Autoregressive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxyTag {
    Jpeg,
    Gradient,
}

/// What produced a row of a [`ScoreTable`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScoreTag {
    Estimator(EstimatorTag),
    Proxy(ProxyTag),
    /// Density score plus a complexity value, per id.
    Corrected,
}

impl ScoreTag {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreTag::Estimator(EstimatorTag::Flow) => "flow",
            ScoreTag::Estimator(EstimatorTag::JacobianRect) => "jacobian_rect",
            ScoreTag::Estimator(EstimatorTag::Autoregressive) => "autoregressive",
            ScoreTag::Proxy(ProxyTag::Jpeg) => "jpeg",
            ScoreTag::Proxy(ProxyTag::Gradient) => "gradient",
            ScoreTag::Corrected => "corrected",
        }
    }
}

impl fmt::Display for ScoreTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoreTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "flow" => ScoreTag::Estimator(EstimatorTag::Flow),
            "jacobian_rect" => ScoreTag::Estimator(EstimatorTag::JacobianRect),
            "autoregressive" => ScoreTag::Estimator(EstimatorTag::Autoregressive),
            "jpeg" => ScoreTag::Proxy(ProxyTag::Jpeg),
            "gradient" => ScoreTag::Proxy(ProxyTag::Gradient),
            "corrected" => ScoreTag::Corrected,
            other => return Err(format!("unknown score tag {other:?}")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub total: f64,
    pub latent_term: Option<f64>,
    pub jacobian_term: Option<f64>,
    pub tag: ScoreTag,
}

impl Score {
    pub fn proxy(value: f64, tag: ProxyTag) -> Self {
        Self {
            total: value,
            latent_term: None,
            jacobian_term: None,
            tag: ScoreTag::Proxy(tag),
        }
    }
}

impl From<DensityScore> for Score {
    fn from(d: DensityScore) -> Self {
        Self {
            total: d.total,
            latent_term: d.latent_term,
            jacobian_term: d.jacobian_term,
            tag: ScoreTag::Estimator(d.estimator_tag),
        }
    }
}

impl From<ComplexityScore> for Score {
    fn from(c: ComplexityScore) -> Self {
        Self::proxy(c.value, c.proxy_tag)
    }
}

/// Which column of a decomposed score to rank by.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Total,
    Latent,
    Jacobian,
}

/// Per-sample scores keyed by image id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreTable {
    rows: BTreeMap<u64, Score>,
}

pub const ESTIMATOR_HEADER: &str = "id,total,latent_term,jacobian_term,estimator_tag";
pub const PROXY_HEADER: &str = "id,total,latent_term,jacobian_term,proxy_tag";

impl ScoreTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: u64, score: Score) -> Option<Score> {
        self.rows.insert(id, score)
    }

    pub fn get(&self, id: u64) -> Option<&Score> {
        self.rows.get(&id)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rows in ascending id order.
    pub fn iter(&self) -> impl Iterator<Item = (u64, &Score)> + '_ {
        self.rows.iter().map(|(&id, s)| (id, s))
    }

    pub fn ids(&self) -> Vec<u64> {
        self.rows.keys().copied().collect()
    }

    pub fn totals(&self) -> Vec<f64> {
        self.rows.values().map(|s| s.total).collect()
    }

    pub fn mean_total(&self) -> Option<f64> {
        (!self.is_empty()).then(|| self.rows.values().map(|s| s.total).sum::<f64>() / self.len() as f64)
    }

    /// Table whose totals are one term of the decomposition. Rows without that
    /// term are dropped.
    pub fn term(&self, term: Term) -> ScoreTable {
        let rows = self
            .rows
            .iter()
            .filter_map(|(&id, s)| {
                let v = match term {
                    Term::Total => Some(s.total),
                    Term::Latent => s.latent_term,
                    Term::Jacobian => s.jacobian_term,
                }?;
                Some((
                    id,
                    Score {
                        total: v,
                        ..*s
                    },
                ))
            })
            .collect();
        ScoreTable { rows }
    }

    /// Applies `f` to every total, keeping the other columns.
    pub fn map_totals(&self, mut f: impl FnMut(f64) -> f64) -> ScoreTable {
        let rows = self
            .rows
            .iter()
            .map(|(&id, s)| (id, Score { total: f(s.total), ..*s }))
            .collect();
        ScoreTable { rows }
    }

    /// Per-id sum of this table's totals and `other`'s, with no rescaling.
    pub fn corrected_with(&self, other: &ScoreTable) -> Result<ScoreTable, EstimatorError> {
        if self.rows.len() != other.rows.len() {
            return Err(EstimatorError::IdMismatch);
        }
        let mut rows = BTreeMap::new();
        for (&id, s) in &self.rows {
            let o = other.rows.get(&id).ok_or(EstimatorError::IdMismatch)?;
            rows.insert(
                id,
                Score {
                    total: s.total + o.total,
                    latent_term: None,
                    jacobian_term: None,
                    tag: ScoreTag::Corrected,
                },
            );
        }
        Ok(ScoreTable { rows })
    }

    fn is_proxy_table(&self) -> bool {
        !self.rows.is_empty() && self.rows.values().all(|s| matches!(s.tag, ScoreTag::Proxy(_)))
    }

    /// CSV with shortest round-trip float rendering; absent terms are empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(if self.is_proxy_table() {
            PROXY_HEADER
        } else {
            ESTIMATOR_HEADER
        });
        out.push('\n');
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for (id, s) in &self.rows {
            out.push_str(&format!(
                "{id},{},{},{},{}\n",
                s.total,
                opt(s.latent_term),
                opt(s.jacobian_term),
                s.tag
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<ScoreTable, EstimatorError> {
        let bad = |line: usize, msg: String| EstimatorError::Csv { line, msg };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == ESTIMATOR_HEADER || h == PROXY_HEADER => {}
            Some((_, h)) => return Err(bad(1, format!("unexpected header {h:?}"))),
            None => return Err(bad(1, "empty file".into())),
        }
        let mut table = ScoreTable::new();
        for (i, line) in lines {
            let n = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(bad(n, format!("expected 5 fields, found {}", fields.len())));
            }
            let num = |s: &str| -> Result<f64, EstimatorError> {
                s.parse().map_err(|_| bad(n, format!("bad number {s:?}")))
            };
            let opt = |s: &str| -> Result<Option<f64>, EstimatorError> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    num(s).map(Some)
                }
            };
            let id: u64 = fields[0]
                .parse()
                .map_err(|_| bad(n, format!("bad id {:?}", fields[0])))?;
            let score = Score {
                total: num(fields[1])?,
                latent_term: opt(fields[2])?,
                jacobian_term: opt(fields[3])?,
                tag: fields[4].parse().map_err(|e| bad(n, e))?,
            };
            if table.insert(id, score).is_some() {
                return Err(bad(n, format!("duplicate id {id}")));
            }
        }
        Ok(table)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), EstimatorError> {
        std::fs::write(path, self.to_csv()).map_err(|e| EstimatorError::Io(path.display().to_string(), e))
    }

    pub fn read_csv(path: &Path) -> Result<ScoreTable, EstimatorError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EstimatorError::Io(path.display().to_string(), e))?;
        Self::from_csv(&text)
    }
}

impl FromIterator<(u64, Score)> for ScoreTable {
    fn from_iter<T: IntoIterator<Item = (u64, Score)>>(iter: T) -> Self {
        ScoreTable {
            rows: iter.into_iter().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tag_strategy() -> impl Strategy<Value = ScoreTag> {
        prop_oneof![
            Just(ScoreTag::Estimator(EstimatorTag::Flow)),
            Just(ScoreTag::Estimator(EstimatorTag::Autoregressive)),
            Just(ScoreTag::Proxy(ProxyTag::Jpeg)),
            Just(ScoreTag::Corrected),
        ]
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_exact(rows in prop::collection::btree_map(
            any::<u64>(),
            (-1e300f64..1e300, prop::option::of(-1e3f64..1e3), prop::option::of(any::<f64>().prop_filter("finite", |v| v.is_finite())), tag_strategy()),
            0..20)) {
            let table: ScoreTable = rows
                .into_iter()
                .map(|(id, (total, latent_term, jacobian_term, tag))| (id, Score { total, latent_term, jacobian_term, tag }))
                .collect();
            let back = ScoreTable::from_csv(&table.to_csv()).unwrap();
            prop_assert_eq!(back, table);
        }
    }

    #[test]
    fn header_follows_table_kind() {
        let mut proxy = ScoreTable::new();
        proxy.insert(0, Score::proxy(-3.0, ProxyTag::Jpeg));
        assert!(proxy.to_csv().starts_with(PROXY_HEADER));
        assert_eq!(proxy.to_csv(), format!("{PROXY_HEADER}\n0,-3,,,jpeg\n"));

        let mut est = ScoreTable::new();
        est.insert(
            5,
            Score {
                total: 0.1 + 0.2,
                latent_term: Some(0.1),
                jacobian_term: Some(0.2),
                tag: ScoreTag::Estimator(EstimatorTag::Flow),
            },
        );
        assert_eq!(
            est.to_csv(),
            format!("{ESTIMATOR_HEADER}\n5,0.30000000000000004,0.1,0.2,flow\n")
        );
    }

    #[test]
    fn malformed_csv_reports_line() {
        let text = format!("{ESTIMATOR_HEADER}\n1,2,,,flow\n2,x,,,flow\n");
        match ScoreTable::from_csv(&text) {
            Err(EstimatorError::Csv { line: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(ScoreTable::from_csv("a,b\n").is_err());
    }

    #[test]
    fn corrected_score_is_a_plain_sum() {
        let mut a = ScoreTable::new();
        let mut b = ScoreTable::new();
        for id in 0..4u64 {
            a.insert(id, Score::proxy(id as f64 * 1.5, ProxyTag::Gradient));
            b.insert(id, Score::proxy(-(id as f64), ProxyTag::Jpeg));
        }
        let c = a.corrected_with(&b).unwrap();
        for id in 0..4u64 {
            assert_eq!(c.get(id).unwrap().total, id as f64 * 1.5 - id as f64);
        }
        b.insert(9, Score::proxy(0.0, ProxyTag::Jpeg));
        assert!(a.corrected_with(&b).is_err());
    }
}
