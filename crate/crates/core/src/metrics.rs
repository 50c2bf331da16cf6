//! Group-fairness evaluation: equalized odds, demographic parity,
//! worst-group accuracy, and average accuracy.
//!
//! All metrics operate on integer counts with exact rational arithmetic and
//! convert to f64 once at the end, so results do not depend on float
//! summation order. With more than two sensitive groups, EO and DP report
//! the maximum over unordered group pairs.

use num_rational::Ratio;
use std::collections::BTreeSet;
use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct Prediction {
    pub predicted: usize,
    pub truth: usize,
    pub group: usize,
}

/// Nonempty set of (ŷ, y, group) triples.
#[derive(Clone, Debug)]
pub struct PredictionSet {
    items: Vec<Prediction>,
}

/// Whether EO aggregates the per-class recall gaps by mean (default) or sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EoAggregation {
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct FairnessReport {
    pub eo: f64,
    pub dp: f64,
    pub wga: f64,
    pub acc: f64,
    /// Accuracy per sensitive group, indexed by group value.
    pub per_group: Vec<(usize, f64)>,
}

impl fmt::Display for FairnessReport {
    /// One metric per line, key=value, in percentage points.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "eo={:.4}", self.eo * 100.0)?;
        writeln!(f, "dp={:.4}", self.dp * 100.0)?;
        writeln!(f, "wga={:.4}", self.wga * 100.0)?;
        writeln!(f, "acc={:.4}", self.acc * 100.0)?;
        for (g, a) in &self.per_group {
            writeln!(f, "acc_group{}={:.4}", g, a * 100.0)?;
        }
        Ok(())
    }
}

type R = Ratio<i64>;

impl PredictionSet {
    pub fn new(items: Vec<Prediction>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Contract("empty prediction set".into()));
        }
        Ok(PredictionSet { items })
    }

    pub fn from_slices(predicted: &[usize], truth: &[usize], group: &[usize]) -> Result<Self> {
        if predicted.len() != truth.len() || truth.len() != group.len() {
            return Err(Error::Shape("prediction slices differ in length".into()));
        }
        Self::new(
            predicted
                .iter()
                .zip(truth)
                .zip(group)
                .map(|((&p, &t), &g)| Prediction {
                    predicted: p,
                    truth: t,
                    group: g,
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn labels(&self) -> Vec<usize> {
        self.items
            .iter()
            .map(|p| p.truth)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    fn groups(&self) -> Vec<usize> {
        self.items
            .iter()
            .map(|p| p.group)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Recall of label `y` within group `g`.
    fn recall(&self, y: usize, g: usize) -> Result<R> {
        let total = self
            .items
            .iter()
            .filter(|p| p.truth == y && p.group == g)
            .count() as i64;
        if total == 0 {
            return Err(Error::UndefinedMetric(format!("(y={y}, group={g})")));
        }
        let hit = self
            .items
            .iter()
            .filter(|p| p.truth == y && p.group == g && p.predicted == y)
            .count() as i64;
        Ok(Ratio::new(hit, total))
    }

    fn positive_rate(&self, g: usize, positive: usize) -> Result<R> {
        let total = self.items.iter().filter(|p| p.group == g).count() as i64;
        if total == 0 {
            return Err(Error::UndefinedMetric(format!("(group={g})")));
        }
        let pos = self
            .items
            .iter()
            .filter(|p| p.group == g && p.predicted == positive)
            .count() as i64;
        Ok(Ratio::new(pos, total))
    }
}

fn abs(r: R) -> R {
    if r < Ratio::new(0, 1) {
        -r
    } else {
        r
    }
}

fn eo_pair(p: &PredictionSet, g0: usize, g1: usize, agg: EoAggregation) -> Result<R> {
    let labels = p.labels();
    let mut sum = Ratio::new(0, 1);
    for &y in &labels {
        sum += abs(p.recall(y, g1)? - p.recall(y, g0)?);
    }
    Ok(match agg {
        EoAggregation::Mean => sum / Ratio::new(labels.len() as i64, 1),
        EoAggregation::Sum => sum,
    })
}

fn eo_ratio(p: &PredictionSet, agg: EoAggregation) -> Result<R> {
    let groups = p.groups();
    if groups.len() < 2 {
        return Err(Error::UndefinedMetric("only one group present".into()));
    }
    let mut best = Ratio::new(0, 1);
    for i in 0..groups.len() {
        for j in i + 1..groups.len() {
            let v = eo_pair(p, groups[i], groups[j], agg)?;
            if v > best {
                best = v;
            }
        }
    }
    Ok(best)
}

/// Equalized odds: mean absolute per-class recall gap between two groups;
/// maximum over unordered pairs with more than two groups.
pub fn eo(p: &PredictionSet) -> Result<f64> {
    eo_with(p, EoAggregation::Mean)
}

pub fn eo_with(p: &PredictionSet, agg: EoAggregation) -> Result<f64> {
    eo_ratio(p, agg).map(to_f64)
}

fn dp_ratio(p: &PredictionSet, positive: usize) -> Result<R> {
    let groups = p.groups();
    if groups.len() < 2 {
        return Err(Error::UndefinedMetric("only one group present".into()));
    }
    let mut best = Ratio::new(0, 1);
    for i in 0..groups.len() {
        for j in i + 1..groups.len() {
            let v = abs(p.positive_rate(groups[j], positive)? - p.positive_rate(groups[i], positive)?);
            if v > best {
                best = v;
            }
        }
    }
    Ok(best)
}

/// Demographic parity: absolute positive-prediction-rate gap between two
/// groups; maximum over unordered pairs otherwise.
pub fn dp(p: &PredictionSet, positive: usize) -> Result<f64> {
    dp_ratio(p, positive).map(to_f64)
}

fn wga_ratio(p: &PredictionSet) -> Result<R> {
    let mut worst: Option<R> = None;
    for &y in &p.labels() {
        for &g in &p.groups() {
            let total = p
                .items
                .iter()
                .filter(|q| q.truth == y && q.group == g)
                .count() as i64;
            if total == 0 {
                return Err(Error::UndefinedMetric(format!("(y={y}, group={g})")));
            }
            let hit = p
                .items
                .iter()
                .filter(|q| q.truth == y && q.group == g && q.predicted == y)
                .count() as i64;
            let acc = Ratio::new(hit, total);
            worst = Some(match worst {
                None => acc,
                Some(w) if acc < w => acc,
                Some(w) => w,
            });
        }
    }
    Ok(worst.expect("nonempty set"))
}

/// Worst-group accuracy over label × group cells.
pub fn wga(p: &PredictionSet) -> Result<f64> {
    wga_ratio(p).map(to_f64)
}

fn acc_ratio(p: &PredictionSet) -> R {
    let hit = p.items.iter().filter(|q| q.predicted == q.truth).count() as i64;
    Ratio::new(hit, p.len() as i64)
}

pub fn accuracy(p: &PredictionSet) -> f64 {
    to_f64(acc_ratio(p))
}

fn to_f64(r: R) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Full report with the default EO aggregation.
pub fn report(p: &PredictionSet, positive: usize) -> Result<FairnessReport> {
    let per_group = p
        .groups()
        .into_iter()
        .map(|g| {
            let total = p.items.iter().filter(|q| q.group == g).count() as i64;
            let hit = p
                .items
                .iter()
                .filter(|q| q.group == g && q.predicted == q.truth)
                .count() as i64;
            (g, to_f64(Ratio::new(hit, total)))
        })
        .collect();
    Ok(FairnessReport {
        eo: eo(p)?,
        dp: dp(p, positive)?,
        wga: wga(p)?,
        acc: accuracy(p),
        per_group,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(pred: &[usize], truth: &[usize], group: &[usize]) -> PredictionSet {
        PredictionSet::from_slices(pred, truth, group).unwrap()
    }

    #[test]
    fn eo_perfect_classifier_is_zero() {
        let p = set(&[0, 1, 0, 1], &[0, 1, 0, 1], &[0, 0, 1, 1]);
        assert_eq!(eo(&p).unwrap(), 0.0);
    }

    #[test]
    fn eo_recall_gap_half() {
        // Group 1 recalls (1, 1); group 0 recalls (0.5, 0.5) -> EO 0.5.
        let pred = [0, 1, 0, 1, 1, 0, 0, 1, 0, 0, 1, 1];
        let truth = [0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1];
        let group = [0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1];
        // group 0: label 0 -> preds (0,1,1,0): recall 2/4; label 1 -> (0,1,0,1): 2/4.
        // group 1: perfect.
        let p = set(&pred, &truth, &group);
        assert_eq!(eo(&p).unwrap(), 0.5);
    }

    #[test]
    fn eo_identical_distributions_zero() {
        let p = set(&[0, 1, 1, 0, 1, 1], &[0, 1, 0, 0, 1, 0], &[0, 0, 0, 1, 1, 1]);
        assert_eq!(eo(&p).unwrap(), 0.0);
    }

    #[test]
    fn eo_sum_variant_doubles_binary_mean() {
        let pred = [0, 1, 1, 1];
        let truth = [0, 1, 0, 1];
        let group = [0, 0, 1, 1];
        let p = set(&pred, &truth, &group);
        let mean = eo_with(&p, EoAggregation::Mean).unwrap();
        let sum = eo_with(&p, EoAggregation::Sum).unwrap();
        assert_eq!(sum, 2.0 * mean);
    }

    #[test]
    fn eo_empty_cell_names_it() {
        let p = set(&[0, 1, 0], &[0, 1, 0], &[0, 0, 1]);
        match eo(&p) {
            Err(Error::UndefinedMetric(cell)) => assert!(cell.contains("y=1")),
            other => panic!("expected undefined metric, got {other:?}"),
        }
    }

    #[test]
    fn dp_examples() {
        // All positive in both groups -> 0.
        let p = set(&[1, 1, 1, 1], &[0, 1, 0, 1], &[0, 0, 1, 1]);
        assert_eq!(dp(&p, 1).unwrap(), 0.0);

        // Rates 0.8 vs 0.3 -> 0.5.
        let mut pred = vec![1; 8];
        pred.extend(vec![0; 2]); // group 0: 8/10 positive
        pred.extend(vec![1; 3]);
        pred.extend(vec![0; 7]); // group 1: 3/10 positive
        let truth = vec![0; 20];
        let mut group = vec![0; 10];
        group.extend(vec![1; 10]);
        let p = set(&pred, &truth, &group);
        assert_eq!(dp(&p, 1).unwrap(), 0.5);

        // Single group -> undefined.
        let p = set(&[1, 0], &[1, 0], &[0, 0]);
        assert!(matches!(dp(&p, 1), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn wga_examples() {
        // One cell entirely misclassified -> 0.
        let p = set(&[1, 1, 0, 1], &[0, 1, 0, 1], &[0, 0, 1, 1]);
        assert_eq!(wga(&p).unwrap(), 0.0);

        // Perfect classifier -> 1.
        let p = set(&[0, 1, 0, 1], &[0, 1, 0, 1], &[0, 0, 1, 1]);
        assert_eq!(wga(&p).unwrap(), 1.0);
    }

    #[test]
    fn wga_direct_min() {
        // Cells with accuracies 0.9, 0.7, 0.8, 0.6 -> 0.6.
        let mut pred = Vec::new();
        let mut truth = Vec::new();
        let mut group = Vec::new();
        let cells = [(0, 0, 9, 1), (0, 1, 7, 3), (1, 0, 8, 2), (1, 1, 6, 4)];
        for (y, g, hit, miss) in cells {
            for _ in 0..hit {
                pred.push(y);
                truth.push(y);
                group.push(g);
            }
            for _ in 0..miss {
                pred.push(1 - y);
                truth.push(y);
                group.push(g);
            }
        }
        let p = set(&pred, &truth, &group);
        assert_eq!(wga(&p).unwrap(), 0.6);
    }

    #[test]
    fn report_perfect_classifier() {
        let p = set(&[0, 1, 0, 1], &[0, 1, 0, 1], &[0, 0, 1, 1]);
        let r = report(&p, 1).unwrap();
        assert_eq!((r.eo, r.dp, r.wga, r.acc), (0.0, 0.0, 1.0, 1.0));
        assert!(r.wga <= r.acc);
    }

    #[test]
    fn four_group_max_pair() {
        // Three groups identical, one biased: the max pair dominates.
        let mut pred = Vec::new();
        let mut truth = Vec::new();
        let mut group = Vec::new();
        for g in 0..4usize {
            for y in 0..2usize {
                for i in 0..10 {
                    truth.push(y);
                    group.push(g);
                    // group 3 misclassifies label 1 entirely.
                    if g == 3 && y == 1 {
                        pred.push(0);
                    } else {
                        pred.push(if i < 8 { y } else { 1 - y });
                    }
                }
            }
        }
        let p = set(&pred, &truth, &group);
        // Pair (0,3): label-0 recall gap 0, label-1 gap 0.8 -> EO 0.4.
        assert_eq!(eo(&p).unwrap(), 0.4);
    }

    #[test]
    fn display_is_percent_key_value() {
        let p = set(&[0, 1, 0, 1], &[0, 1, 0, 1], &[0, 0, 1, 1]);
        let r = report(&p, 1).unwrap();
        let text = r.to_string();
        assert!(text.contains("eo=0.0000"));
        assert!(text.contains("acc=100.0000"));
        assert!(text.contains("acc_group0=100.0000"));
    }

    #[test]
    fn permutation_invariance() {
        let pred = [0, 1, 1, 0, 1, 0, 1, 1];
        let truth = [0, 1, 0, 0, 1, 1, 1, 0];
        let group = [0, 0, 1, 1, 0, 1, 0, 1];
        let p = set(&pred, &truth, &group);
        let r1 = report(&p, 1).unwrap();
        let rev_p = set(
            &pred.iter().rev().copied().collect::<Vec<_>>(),
            &truth.iter().rev().copied().collect::<Vec<_>>(),
            &group.iter().rev().copied().collect::<Vec<_>>(),
        );
        let r2 = report(&rev_p, 1).unwrap();
        assert_eq!((r1.eo, r1.dp, r1.wga, r1.acc), (r2.eo, r2.dp, r2.wga, r2.acc));
    }

    #[test]
    fn independence_implies_zero_eo_dp() {
        // Product construction: identical (ŷ, y) pattern in each group.
        let base_pred = [0, 1, 1, 0, 1];
        let base_truth = [0, 1, 0, 0, 1];
        let mut pred = Vec::new();
        let mut truth = Vec::new();
        let mut group = Vec::new();
        for g in 0..3 {
            pred.extend_from_slice(&base_pred);
            truth.extend_from_slice(&base_truth);
            group.extend(std::iter::repeat(g).take(base_pred.len()));
        }
        let p = set(&pred, &truth, &group);
        assert_eq!(eo(&p).unwrap(), 0.0);
        assert_eq!(dp(&p, 1).unwrap(), 0.0);
    }
}
