//! Tracking metrics: joint goal accuracy, L2 error, expected calibration
//! error and reliability tables, plus their CSV forms.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::uncmath::Categorical;

pub const DEFAULT_BINS: usize = 10;

/// One evaluated turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnEvaluation {
    pub predicted: Vec<Categorical>,
    pub gold: Vec<usize>,
}

impl TurnEvaluation {
    pub fn new(predicted: Vec<Categorical>, gold: Vec<usize>) -> Result<Self> {
        if predicted.len() != gold.len() {
            return Err(Error::DimensionMismatch {
                expected: predicted.len(),
                got: gold.len(),
            });
        }
        for (p, &g) in predicted.iter().zip(&gold) {
            if g >= p.k() {
                return Err(Error::IndexOutOfRange {
                    index: g,
                    len: p.k(),
                });
            }
        }
        Ok(Self { predicted, gold })
    }

    /// Product of per-slot top probabilities.
    pub fn joint_confidence(&self) -> f64 {
        self.predicted.iter().map(Categorical::max_prob).product()
    }

    pub fn joint_correct(&self) -> bool {
        self.predicted
            .iter()
            .zip(&self.gold)
            .all(|(p, &g)| p.argmax() == g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L2Aggregation {
    /// Sum of per-slot norms, averaged over turns.
    #[default]
    SumOverSlots,
    /// Mean of per-slot norms, averaged over turns.
    MeanOverSlots,
}

fn non_empty(evals: &[TurnEvaluation]) -> Result<()> {
    if evals.is_empty() {
        Err(Error::EmptyInput("turn evaluations"))
    } else {
        Ok(())
    }
}

/// Percentage of turns whose every slot is predicted correctly.
pub fn joint_goal_accuracy(evals: &[TurnEvaluation]) -> Result<f64> {
    non_empty(evals)?;
    let correct = evals.iter().filter(|e| e.joint_correct()).count();
    Ok(100.0 * correct as f64 / evals.len() as f64)
}

pub fn l2_error(evals: &[TurnEvaluation], agg: L2Aggregation) -> Result<f64> {
    non_empty(evals)?;
    let mut total = 0.0;
    for e in evals {
        let norms: f64 = e
            .predicted
            .iter()
            .zip(&e.gold)
            .map(|(p, &g)| {
                p.probs()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| {
                        let d = x - if i == g { 1.0 } else { 0.0 };
                        d * d
                    })
                    .sum::<f64>()
                    .sqrt()
            })
            .sum();
        total += match agg {
            L2Aggregation::SumOverSlots => norms,
            L2Aggregation::MeanOverSlots => norms / e.predicted.len().max(1) as f64,
        };
    }
    Ok(total / evals.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    /// Mean joint confidence (0 for an empty bin).
    pub confidence: f64,
    /// Joint accuracy (0 for an empty bin).
    pub accuracy: f64,
    pub count: usize,
}

/// Equal-width bins over `[0, 1]`; confidence 1 falls in the last bin.
pub fn reliability_table(evals: &[TurnEvaluation], num_bins: usize) -> Result<Vec<ReliabilityBin>> {
    if num_bins == 0 {
        return Err(Error::Config("at least one bin is required".into()));
    }
    let mut sums = vec![(0.0f64, 0usize, 0usize); num_bins];
    for e in evals {
        let c = e.joint_confidence();
        let b = ((c * num_bins as f64) as usize).min(num_bins - 1);
        sums[b].0 += c;
        sums[b].1 += e.joint_correct() as usize;
        sums[b].2 += 1;
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .map(|(b, (conf, correct, n))| ReliabilityBin {
            lower: b as f64 / num_bins as f64,
            upper: (b + 1) as f64 / num_bins as f64,
            confidence: if n > 0 { conf / n as f64 } else { 0.0 },
            accuracy: if n > 0 {
                correct as f64 / n as f64
            } else {
                0.0
            },
            count: n,
        })
        .collect())
}

/// ECE (percent) recomposed from a reliability table.
pub fn ece_from_table(table: &[ReliabilityBin]) -> Result<f64> {
    let n: usize = table.iter().map(|b| b.count).sum();
    if n == 0 {
        return Err(Error::EmptyInput("reliability table"));
    }
    let total: f64 = table
        .iter()
        .map(|b| b.count as f64 / n as f64 * (b.accuracy - b.confidence).abs())
        .sum();
    Ok(100.0 * total)
}

pub fn ece(evals: &[TurnEvaluation], num_bins: usize) -> Result<f64> {
    non_empty(evals)?;
    ece_from_table(&reliability_table(evals, num_bins)?)
}

/// The three headline metrics for one model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub jga: f64,
    pub l2: f64,
    pub ece: f64,
}

pub fn summarize(
    evals: &[TurnEvaluation],
    num_bins: usize,
    agg: L2Aggregation,
) -> Result<MetricSummary> {
    Ok(MetricSummary {
        jga: joint_goal_accuracy(evals)?,
        l2: l2_error(evals, agg)?,
        ece: ece(evals, num_bins)?,
    })
}

/// `model,metric,value` rows, in input order.
pub fn metrics_csv(rows: &[(String, MetricSummary)]) -> String {
    let mut s = String::from("model,metric,value\n");
    for (model, m) in rows {
        for (name, v) in [("jga", m.jga), ("l2", m.l2), ("ece", m.ece)] {
            let _ = writeln!(s, "{model},{name},{v:.6}");
        }
    }
    s
}

pub fn reliability_csv(table: &[ReliabilityBin]) -> String {
    let mut s = String::from("bin,lower,upper,confidence,accuracy,count\n");
    for (i, b) in table.iter().enumerate() {
        let _ = writeln!(
            s,
            "{i},{:.4},{:.4},{:.6},{:.6},{}",
            b.lower, b.upper, b.confidence, b.accuracy, b.count
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cat(p: &[f64]) -> Categorical {
        Categorical::new(p.to_vec()).unwrap()
    }

    /// One-slot turn with confidence `c` on class 0; correct iff `ok`.
    fn turn(c: f64, ok: bool) -> TurnEvaluation {
        TurnEvaluation::new(vec![cat(&[c, 1.0 - c])], vec![if ok { 0 } else { 1 }]).unwrap()
    }

    #[test]
    fn ece_hand_binning() {
        let low = TurnEvaluation::new(vec![cat(&[0.3, 0.25, 0.25, 0.2])], vec![1]).unwrap();
        let evals = [turn(0.9, true), turn(0.8, false), low];
        let e = ece(&evals, 2).unwrap();
        let oracle = 2.0 / 3.0 * (0.5f64 - 0.85).abs() + 1.0 / 3.0 * (0.0f64 - 0.3).abs();
        assert!((e - 100.0 * oracle).abs() < 1e-9);
        assert!((e - 33.33).abs() < 0.01);
        let table = reliability_table(&evals, 2).unwrap();
        assert_eq!(ece_from_table(&table).unwrap().to_bits(), e.to_bits());
    }

    #[test]
    fn ece_and_jga_edge_cases() {
        let perfect = vec![turn(1.0, true); 4];
        assert_eq!(ece(&perfect, 10).unwrap(), 0.0);
        assert_eq!(joint_goal_accuracy(&perfect).unwrap(), 100.0);
        assert!(matches!(ece(&[], 10), Err(Error::EmptyInput(_))));
        assert!(matches!(
            joint_goal_accuracy(&[]),
            Err(Error::EmptyInput(_))
        ));
        let t = reliability_table(&perfect, 10).unwrap();
        assert_eq!(t.iter().map(|b| b.count).sum::<usize>(), 4);
        assert_eq!(t[9].count, 4);
        assert!(t[..9].iter().all(|b| b.count == 0 && b.confidence == 0.0));
    }

    #[test]
    fn l2_oracles() {
        let anti = TurnEvaluation::new(vec![cat(&[1.0, 0.0])], vec![1]).unwrap();
        assert!(
            (l2_error(&[anti], L2Aggregation::SumOverSlots).unwrap() - 2f64.sqrt()).abs() < 1e-12
        );
        let unif =
            TurnEvaluation::new(vec![cat(&[0.5, 0.5]), cat(&[0.5, 0.5])], vec![0, 1]).unwrap();
        let sum = l2_error(&[unif.clone()], L2Aggregation::SumOverSlots).unwrap();
        assert!((sum - 2.0 * 0.5f64.sqrt()).abs() < 1e-12);
        let mean = l2_error(&[unif], L2Aggregation::MeanOverSlots).unwrap();
        assert!((mean - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn joint_confidence_is_product_and_gold_checked() {
        let e = TurnEvaluation::new(vec![cat(&[0.6, 0.4]), cat(&[0.1, 0.9])], vec![0, 1]).unwrap();
        assert!((e.joint_confidence() - 0.54).abs() < 1e-12);
        assert!(e.joint_correct());
        assert!(TurnEvaluation::new(vec![cat(&[0.5, 0.5])], vec![2]).is_err());
        assert!(TurnEvaluation::new(vec![cat(&[0.5, 0.5])], vec![]).is_err());
    }

    #[test]
    fn csv_shapes() {
        let m = MetricSummary {
            jga: 30.0,
            l2: 1.5,
            ece: 2.25,
        };
        let csv = metrics_csv(&[("ensemble".into(), m)]);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.contains("ensemble,jga,30.000000"));
        let t = reliability_table(&[turn(0.95, true)], 2).unwrap();
        assert_eq!(reliability_csv(&t).lines().count(), 3);
    }
}
