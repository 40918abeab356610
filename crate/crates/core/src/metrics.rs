//! Per-class recall and mean average precision over evaluated pairs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub scores: Vec<f64>,
    pub truth: usize,
    pub image: usize,
    pub pair: (usize, usize),
}

impl EvalRecord {
    /// Highest-scoring class; ties go to the lowest index.
    pub fn predicted(&self) -> usize {
        let mut best = 0;
        for (c, &s) in self.scores.iter().enumerate() {
            if s > self.scores[best] {
                best = c;
            }
        }
        best
    }
}

/// How average precision aggregates precision at positive ranks. Records
/// with equal scores form one rank group: every positive in the group sees
/// the precision at the group's end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ApConvention {
    /// Each positive contributes the precision at its own rank group.
    #[default]
    Hits,
    /// Each positive contributes the best precision at its rank group or any
    /// later one (the precision envelope).
    Interpolated,
}

fn validate(records: &[EvalRecord]) -> Result<usize> {
    let first = records
        .first()
        .ok_or_else(|| Error::data("no evaluation records"))?;
    let classes = first.scores.len();
    if classes == 0 {
        return Err(Error::data("evaluation records carry no class scores"));
    }
    for r in records {
        if r.scores.len() != classes {
            return Err(Error::data("records disagree on the number of classes"));
        }
        if r.truth >= classes {
            return Err(Error::data(format!("true class {} out of range", r.truth)));
        }
        if r.scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite score for image {} pair {:?}",
                r.image, r.pair
            )));
        }
    }
    Ok(classes)
}

/// Recall in percent per class; `None` for classes with no records.
pub fn per_class_recall(records: &[EvalRecord]) -> Result<Vec<Option<f64>>> {
    let classes = validate(records)?;
    let mut total = vec![0usize; classes];
    let mut hit = vec![0usize; classes];
    for r in records {
        total[r.truth] += 1;
        if r.predicted() == r.truth {
            hit[r.truth] += 1;
        }
    }
    Ok(total
        .iter()
        .zip(&hit)
        .map(|(&t, &h)| (t > 0).then(|| 100.0 * h as f64 / t as f64))
        .collect())
}

/// Fraction of records whose arg-max matches the truth.
pub fn pair_accuracy(records: &[EvalRecord]) -> Result<f64> {
    validate(records)?;
    let hits = records.iter().filter(|r| r.predicted() == r.truth).count();
    Ok(hits as f64 / records.len() as f64)
}

/// Average precision (fraction in `[0, 1]`) of class `class`; `None` without
/// positives.
pub fn average_precision(
    records: &[EvalRecord],
    class: usize,
    convention: ApConvention,
) -> Option<f64> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[b].scores[class].total_cmp(&records[a].scores[class]));
    let mut precisions = Vec::new();
    let (mut hits, mut start) = (0usize, 0usize);
    while start < order.len() {
        let score = records[order[start]].scores[class];
        let end = start
            + order[start..]
                .iter()
                .take_while(|&&k| records[k].scores[class] == score)
                .count();
        let positives = order[start..end]
            .iter()
            .filter(|&&k| records[k].truth == class)
            .count();
        hits += positives;
        let p = hits as f64 / end as f64;
        precisions.extend(std::iter::repeat_n(p, positives));
        start = end;
    }
    if precisions.is_empty() {
        return None;
    }
    if convention == ApConvention::Interpolated {
        let mut best = 0.0f64;
        for p in precisions.iter_mut().rev() {
            best = best.max(*p);
            *p = best;
        }
    }
    Some(precisions.iter().sum::<f64>() / precisions.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    /// Percent.
    pub map: f64,
    /// Percent per class; `None` for classes without positives.
    pub per_class: Vec<Option<f64>>,
}

/// Mean over classes with at least one positive of their AP, in percent.
pub fn mean_average_precision(
    records: &[EvalRecord],
    convention: ApConvention,
) -> Result<MapResult> {
    let classes = validate(records)?;
    let per_class: Vec<Option<f64>> = (0..classes)
        .map(|c| average_precision(records, c, convention).map(|ap| 100.0 * ap))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    for (c, ap) in per_class.iter().enumerate() {
        if ap.is_none() {
            log::warn!("class {c} has no positives and is excluded from mAP");
        }
    }
    if present.is_empty() {
        return Err(Error::data("no class has a positive record"));
    }
    Ok(MapResult {
        map: present.iter().sum::<f64>() / present.len() as f64,
        per_class,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pairs: usize,
    pub recall: Vec<Option<f64>>,
    pub map: f64,
    pub ap: Vec<Option<f64>>,
    pub accuracy: f64,
}

pub fn summarize(records: &[EvalRecord], convention: ApConvention) -> Result<MetricsReport> {
    let recall = per_class_recall(records)?;
    let m = mean_average_precision(records, convention)?;
    Ok(MetricsReport {
        pairs: records.len(),
        recall,
        map: m.map,
        ap: m.per_class,
        accuracy: pair_accuracy(records)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(scores: &[f64], truth: usize) -> EvalRecord {
        EvalRecord {
            scores: scores.to_vec(),
            truth,
            image: 0,
            pair: (0, 1),
        }
    }

    #[test]
    fn recall_hand_case() {
        let rs = vec![
            rec(&[1.0, 0.0], 0),
            rec(&[0.0, 1.0], 0),
            rec(&[0.0, 1.0], 1),
        ];
        assert_eq!(
            per_class_recall(&rs).unwrap(),
            vec![Some(50.0), Some(100.0)]
        );
    }

    #[test]
    fn recall_undefined_for_absent_class() {
        let rs = vec![rec(&[1.0, 0.0, 0.0], 0)];
        assert_eq!(
            per_class_recall(&rs).unwrap(),
            vec![Some(100.0), None, None]
        );
        assert!(per_class_recall(&[]).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(rec(&[0.5, 0.5, 0.2], 1).predicted(), 0);
    }

    #[test]
    fn ap_hand_case() {
        let rs = vec![rec(&[0.9], 0), rec(&[0.8], 1), rec(&[0.7], 0)];
        // single column: class 0 scores; the "1" truth is a negative
        let rs: Vec<_> = rs
            .into_iter()
            .map(|r| EvalRecord {
                scores: vec![r.scores[0], 0.0],
                ..r
            })
            .collect();
        for conv in [ApConvention::Hits, ApConvention::Interpolated] {
            let ap = average_precision(&rs, 0, conv).unwrap();
            assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn conventions_differ_when_precision_rises() {
        // labels by rank: 0, 1, 1 → hits-precisions 1/2, 2/3
        let rs = vec![
            rec(&[0.9, 0.0], 1),
            rec(&[0.8, 0.0], 0),
            rec(&[0.7, 0.0], 0),
        ];
        let hits = average_precision(&rs, 0, ApConvention::Hits).unwrap();
        let interp = average_precision(&rs, 0, ApConvention::Interpolated).unwrap();
        assert!((hits - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert!((interp - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn tied_scores_share_a_rank_group() {
        // a negative tied with a positive at the top: precision 1/2 for it
        let rs = vec![
            rec(&[0.9, 0.0], 1),
            rec(&[0.9, 0.0], 0),
            rec(&[0.5, 0.0], 0),
        ];
        let ap = average_precision(&rs, 0, ApConvention::Hits).unwrap();
        assert!((ap - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        let swapped = vec![rs[1].clone(), rs[0].clone(), rs[2].clone()];
        assert_eq!(average_precision(&swapped, 0, ApConvention::Hits), Some(ap));
    }

    #[test]
    fn separated_scores_give_full_map() {
        let rs = vec![
            rec(&[2.0, -1.0], 0),
            rec(&[-1.0, 3.0], 1),
            rec(&[1.0, 0.0], 0),
        ];
        let m = mean_average_precision(&rs, ApConvention::Hits).unwrap();
        assert_eq!(m.map, 100.0);
    }

    #[test]
    fn class_without_positives_is_excluded() {
        let rs = vec![rec(&[2.0, -1.0], 0), rec(&[1.0, 0.0], 0)];
        let m = mean_average_precision(&rs, ApConvention::Interpolated).unwrap();
        assert_eq!(m.per_class[1], None);
        assert_eq!(m.map, 100.0);
    }

    #[test]
    fn non_finite_scores_are_rejected() {
        let rs = vec![rec(&[f64::NAN, 0.0], 0)];
        assert!(matches!(
            summarize(&rs, ApConvention::Hits),
            Err(Error::Numeric(_))
        ));
    }
}
