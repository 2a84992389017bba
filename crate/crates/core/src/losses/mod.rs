//! Pairwise ranking losses with a margin and an uncertainty gap, plus the
//! L2 regression baseline.

mod train;

pub use train::{train_ranker, train_ranker_from, write_metrics_csv, StepMetrics, TrainConfig, TrainOutcome};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "l2")]
    L2,
    #[serde(rename = "linear", alias = "linear_rank")]
    LinearRank,
    #[serde(rename = "quadratic", alias = "quadratic_rank")]
    QuadraticRank,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::L2, LossKind::LinearRank, LossKind::QuadraticRank];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::L2 => "l2",
            LossKind::LinearRank => "linear",
            LossKind::QuadraticRank => "quadratic",
        }
    }

    pub fn is_ranking(self) -> bool {
        self != LossKind::L2
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(LossKind::L2),
            "linear" | "linear_rank" => Ok(LossKind::LinearRank),
            "quadratic" | "quadratic_rank" => Ok(LossKind::QuadraticRank),
            other => Err(Error::invalid(format!(
                "unknown loss `{other}` (expected l2, linear or quadratic)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    pub margin: f64,
    pub gap: f64,
}

impl LossConfig {
    pub fn new(kind: LossKind) -> Self {
        LossConfig {
            kind,
            margin: 0.3,
            gap: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::invalid(format!("margin must be > 0, got {}", self.margin)));
        }
        if !(self.gap >= 0.0 && self.gap.is_finite()) {
            return Err(Error::invalid(format!("gap must be >= 0, got {}", self.gap)));
        }
        Ok(())
    }
}

/// Two records of one task, oriented so the first performed better.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredPair {
    pub v_i: f64,
    pub p_i: f64,
    pub v_j: f64,
    pub p_j: f64,
}

impl ScoredPair {
    pub fn score_diff(&self) -> f64 {
        self.v_i - self.v_j
    }
}

/// Index pairs `(better, worse)` over all unordered pairs whose
/// performance differs by strictly more than `gap`. Each unordered pair
/// appears at most once, in ascending order of the smaller index.
pub fn pair_indices(perf: &[f64], gap: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for a in 0..perf.len() {
        for b in a + 1..perf.len() {
            let (i, j) = if perf[a] >= perf[b] { (a, b) } else { (b, a) };
            if perf[i] - perf[j] > gap {
                out.push((i, j));
            }
        }
    }
    out
}

/// `records` holds `(score, performance)` for records of a single task.
pub fn filter_pairs(records: &[(f64, f64)], gap: f64) -> Vec<ScoredPair> {
    let perf: Vec<f64> = records.iter().map(|r| r.1).collect();
    pair_indices(&perf, gap)
        .into_iter()
        .map(|(i, j)| ScoredPair {
            v_i: records[i].0,
            p_i: records[i].1,
            v_j: records[j].0,
            p_j: records[j].1,
        })
        .collect()
}

/// `max(0, m - (v_i - v_j))`.
pub fn linear_rank_loss(pair: &ScoredPair, margin: f64) -> f64 {
    (margin - pair.score_diff()).max(0.0)
}

/// `max(0, m - (v_i - v_j))² / m`.
pub fn quadratic_rank_loss(pair: &ScoredPair, margin: f64) -> Result<f64> {
    if margin == 0.0 {
        return Err(Error::invalid("quadratic ranking loss needs a nonzero margin"));
    }
    let h = (margin - pair.score_diff()).max(0.0);
    Ok(h * h / margin)
}

pub fn l2_loss(v: f64, p: f64) -> f64 {
    (v - p) * (v - p)
}

/// Per-score gradient of the summed ranking loss over `pairs`, written out
/// by hand. Only pairs with `v_i - v_j < m` contribute: `∓1` for the linear
/// loss and `∓(2/m)(m - d)` for the quadratic one.
pub fn closed_form_grads(
    scores: &[f64],
    pairs: &[(usize, usize)],
    margin: f64,
    kind: LossKind,
) -> Result<Vec<f64>> {
    if kind == LossKind::L2 {
        return Err(Error::invalid("closed_form_grads applies to ranking losses"));
    }
    if margin <= 0.0 {
        return Err(Error::invalid("margin must be > 0"));
    }
    let mut g = vec![0.0; scores.len()];
    for &(i, j) in pairs {
        if i >= scores.len() || j >= scores.len() {
            return Err(Error::shape("closed_form_grads", "pair index out of range"));
        }
        let d = scores[i] - scores[j];
        if d < margin {
            let w = match kind {
                LossKind::LinearRank => 1.0,
                _ => 2.0 / margin * (margin - d),
            };
            g[i] -= w;
            g[j] += w;
        }
    }
    Ok(g)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

/// Batch loss of an `n×1` score column against recorded performances.
/// Ranking kinds use every gap-passing pair in the batch; L2 uses every
/// record. Returns `None` when no pair survives the gap, together with
/// the number of terms otherwise.
pub fn batch_loss(
    tape: &mut Tape,
    scores: Var,
    perf: &[f64],
    cfg: &LossConfig,
    reduction: Reduction,
) -> Result<Option<(Var, usize)>> {
    cfg.validate()?;
    let shape = tape.value(scores).shape();
    if shape != (perf.len(), 1) {
        return Err(Error::shape(
            "batch_loss",
            format!("scores {shape:?} for {} performances", perf.len()),
        ));
    }
    let reduce = |tape: &mut Tape, x: Var| match reduction {
        Reduction::Sum => tape.sum(x),
        Reduction::Mean => tape.mean(x),
    };
    match cfg.kind {
        LossKind::L2 => {
            if perf.is_empty() {
                return Ok(None);
            }
            let target = tape.leaf(crate::numerics::Matrix::column_vector(perf.to_vec())?);
            let diff = tape.sub(scores, target)?;
            let sq = tape.square(diff);
            Ok(Some((reduce(tape, sq), perf.len())))
        }
        kind => {
            let pairs = pair_indices(perf, cfg.gap);
            if pairs.is_empty() {
                return Ok(None);
            }
            let d = tape.pair_diff(scores, &pairs)?;
            let neg = tape.scale(d, -1.0);
            let shortfall = tape.offset(neg, cfg.margin);
            let hinge = tape.relu(shortfall);
            let terms = if kind == LossKind::QuadraticRank {
                let sq = tape.square(hinge);
                tape.scale(sq, 1.0 / cfg.margin)
            } else {
                hinge
            };
            Ok(Some((reduce(tape, terms), pairs.len())))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;

    fn pair(d: f64) -> ScoredPair {
        ScoredPair {
            v_i: d,
            p_i: 0.9,
            v_j: 0.0,
            p_j: 0.1,
        }
    }

    #[test]
    fn filter_example() {
        let recs = [(0.0, 0.50), (0.0, 0.505), (0.0, 0.60)];
        let kept = filter_pairs(&recs, 0.01);
        let ps: Vec<(f64, f64)> = kept.iter().map(|p| (p.p_i, p.p_j)).collect();
        assert_eq!(ps, vec![(0.60, 0.50), (0.60, 0.505)]);
        assert!(filter_pairs(&[(0.0, 0.3); 4], 0.01).is_empty());
        let one = filter_pairs(&[(5.0, 0.1), (7.0, 0.2)], 0.0);
        assert_eq!(one.len(), 1);
        assert_eq!((one[0].p_i, one[0].v_i, one[0].p_j), (0.2, 7.0, 0.1));
    }

    #[test]
    fn gap_is_strict() {
        assert!(pair_indices(&[0.0, 0.5], 0.5).is_empty());
        assert_eq!(pair_indices(&[0.0, 0.5], 0.4999), vec![(1, 0)]);
    }

    #[test]
    fn hand_values() {
        assert_eq!(linear_rank_loss(&pair(0.7), 0.3), 0.0);
        assert_eq!(linear_rank_loss(&pair(0.0), 0.3), 0.3);
        assert!((linear_rank_loss(&pair(-0.1), 0.3) - 0.4).abs() < 1e-12);
        assert_eq!(quadratic_rank_loss(&pair(0.3), 0.3).unwrap(), 0.0);
        assert!((quadratic_rank_loss(&pair(0.0), 0.3).unwrap() - 0.3).abs() < 1e-12);
        assert!((quadratic_rank_loss(&pair(-0.1), 0.3).unwrap() - 0.16 / 0.3).abs() < 1e-12);
        assert!(quadratic_rank_loss(&pair(0.0), 0.0).is_err());
        assert_eq!(l2_loss(0.4, 0.4), 0.0);
        assert_eq!(l2_loss(0.0, 1.0), 1.0);
        assert!((l2_loss(0.2, 0.5) - 0.09).abs() < 1e-15);
    }

    #[test]
    fn closed_form_examples() {
        let g = closed_form_grads(&[1.0, 0.0], &[(0, 1)], 0.3, LossKind::LinearRank).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
        let g = closed_form_grads(&[0.1, 0.0], &[(0, 1)], 0.3, LossKind::LinearRank).unwrap();
        assert_eq!(g, vec![-1.0, 1.0]);
        let g = closed_form_grads(&[0.1, 0.0], &[(0, 1)], 0.3, LossKind::QuadraticRank).unwrap();
        assert!((g[0] + 2.0 / 0.3 * 0.2).abs() < 1e-12);
        assert!((g[1] - 2.0 / 0.3 * 0.2).abs() < 1e-12);
    }

    #[test]
    fn tape_loss_matches_pairwise_sum() {
        let scores = vec![0.2, -0.1, 0.05, 0.4];
        let perf = vec![0.9, 0.3, 0.5, 0.1];
        for kind in [LossKind::LinearRank, LossKind::QuadraticRank] {
            let cfg = LossConfig::new(kind);
            let mut tape = Tape::new();
            let v = tape.leaf(Matrix::column_vector(scores.clone()).unwrap());
            let (loss, n) = batch_loss(&mut tape, v, &perf, &cfg, Reduction::Mean).unwrap().unwrap();
            let recs: Vec<(f64, f64)> = scores.iter().copied().zip(perf.iter().copied()).collect();
            let pairs = filter_pairs(&recs, cfg.gap);
            assert_eq!(n, pairs.len());
            let want: f64 = pairs
                .iter()
                .map(|p| match kind {
                    LossKind::LinearRank => linear_rank_loss(p, cfg.margin),
                    _ => quadratic_rank_loss(p, cfg.margin).unwrap(),
                })
                .sum::<f64>()
                / n as f64;
            assert!((tape.scalar(loss) - want).abs() < 1e-14);
        }
    }

    #[test]
    fn no_pairs_is_none() {
        let mut tape = Tape::new();
        let v = tape.leaf(Matrix::column_vector(vec![0.0, 1.0]).unwrap());
        let cfg = LossConfig::new(LossKind::LinearRank);
        assert!(batch_loss(&mut tape, v, &[0.5, 0.505], &cfg, Reduction::Mean)
            .unwrap()
            .is_none());
    }

    #[test]
    fn loss_kind_parsing() {
        assert_eq!("linear".parse::<LossKind>().unwrap(), LossKind::LinearRank);
        assert_eq!("quadratic_rank".parse::<LossKind>().unwrap(), LossKind::QuadraticRank);
        assert!("l1".parse::<LossKind>().is_err());
    }
}
