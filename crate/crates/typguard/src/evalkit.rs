//! Detection metrics with OOD as the positive class and "higher score = more
//! anomalous". Everything here depends only on the ordering of the scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scores of in-distribution (safe) and out-of-distribution (harmful) inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledScores {
    pub id_scores: Vec<f64>,
    pub ood_scores: Vec<f64>,
}

impl LabeledScores {
    pub fn new(id_scores: Vec<f64>, ood_scores: Vec<f64>) -> Result<Self> {
        let s = LabeledScores { id_scores, ood_scores };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        if self.id_scores.is_empty() || self.ood_scores.is_empty() {
            return Err(Error::Metric(format!(
                "both classes need scores (n_id = {}, n_ood = {})",
                self.id_scores.len(),
                self.ood_scores.len()
            )));
        }
        if self.id_scores.iter().chain(&self.ood_scores).any(|s| !s.is_finite()) {
            return Err(Error::Metric("scores must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auroc: f64,
    pub fpr95: f64,
    pub auprc: f64,
    pub max_f1: f64,
    /// Score threshold attaining `max_f1` (flag when `score ≥ threshold`).
    pub threshold: f64,
    pub n_id: usize,
    pub n_ood: usize,
}

/// P(OOD score > ID score) + ½ P(tie), via midranks (Mann–Whitney U).
pub fn auroc(s: &LabeledScores) -> Result<f64> {
    s.validate()?;
    let (n_id, n_ood) = (s.id_scores.len(), s.ood_scores.len());
    let mut all: Vec<(f64, bool)> =
        s.id_scores.iter().map(|&x| (x, false)).chain(s.ood_scores.iter().map(|&x| (x, true))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum_ood = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // Ranks i+1..=j+1 share the midrank.
        let midrank = (i + j + 2) as f64 / 2.0;
        rank_sum_ood += midrank * all[i..=j].iter().filter(|x| x.1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_ood - (n_ood * (n_ood + 1)) as f64 / 2.0;
    Ok(u / (n_id as f64 * n_ood as f64))
}

/// Number of flagged OOD scores needed for 95% TPR: `⌈0.95 n⌉`.
fn tpr95_count(n_ood: usize) -> usize {
    (95 * n_ood).div_ceil(100)
}

/// FPR at the largest threshold that still flags ≥ 95% of OOD scores
/// (flag when `score ≥ t`).
pub fn fpr_at_95_tpr(s: &LabeledScores) -> Result<f64> {
    s.validate()?;
    let mut ood = s.ood_scores.clone();
    ood.sort_by(|a, b| b.total_cmp(a));
    let t = ood[tpr95_count(ood.len()).max(1) - 1];
    let fp = s.id_scores.iter().filter(|&&x| x >= t).count();
    Ok(fp as f64 / s.id_scores.len() as f64)
}

/// One operating point of the precision–recall curve per distinct score,
/// in decreasing threshold order: `(threshold, recall, precision)`.
fn pr_points(s: &LabeledScores) -> Vec<(f64, f64, f64)> {
    let mut all: Vec<(f64, bool)> =
        s.id_scores.iter().map(|&x| (x, false)).chain(s.ood_scores.iter().map(|&x| (x, true))).collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n_ood = s.ood_scores.len() as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut out = Vec::new();
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((t, tp as f64 / n_ood, tp as f64 / (tp + fp) as f64));
    }
    out
}

/// Trapezoidal area under precision–recall. The curve starts at recall 0
/// with the precision of the highest threshold.
pub fn auprc(s: &LabeledScores) -> Result<f64> {
    s.validate()?;
    let pts = pr_points(s);
    let (mut prev_r, mut prev_p) = (0.0, pts[0].2);
    let mut area = 0.0;
    for &(_, r, p) in &pts {
        area += (r - prev_r) * (p + prev_p) / 2.0;
        prev_r = r;
        prev_p = p;
    }
    Ok(area)
}

/// Best F1 over all score thresholds; ties go to the lower threshold.
pub fn max_f1(s: &LabeledScores) -> Result<(f64, f64)> {
    s.validate()?;
    let mut best = (f64::NEG_INFINITY, f64::NAN);
    // Thresholds arrive in decreasing order, so `>=` keeps the lowest on ties.
    for (t, r, p) in pr_points(s) {
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        if f1 >= best.0 {
            best = (f1, t);
        }
    }
    Ok(best)
}

pub fn evaluate(s: &LabeledScores) -> Result<EvalReport> {
    let (max_f1, threshold) = max_f1(s)?;
    Ok(EvalReport {
        auroc: auroc(s)?,
        fpr95: fpr_at_95_tpr(s)?,
        auprc: auprc(s)?,
        max_f1,
        threshold,
        n_id: s.id_scores.len(),
        n_ood: s.ood_scores.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ls(id: &[f64], ood: &[f64]) -> LabeledScores {
        LabeledScores::new(id.to_vec(), ood.to_vec()).unwrap()
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&ls(&[0.1, 0.2], &[0.8, 0.9])).unwrap(), 1.0);
        assert_eq!(auroc(&ls(&[0.4, 0.9], &[0.6, 0.1])).unwrap(), 0.25);
        assert_eq!(auroc(&ls(&[0.3, 0.3], &[0.3, 0.3, 0.3])).unwrap(), 0.5);
    }

    #[test]
    fn empty_class_is_a_metric_error() {
        assert!(matches!(LabeledScores::new(vec![], vec![1.0]), Err(Error::Metric(_))));
        let s = LabeledScores { id_scores: vec![0.1], ood_scores: vec![] };
        assert!(auroc(&s).is_err());
        assert!(fpr_at_95_tpr(&s).is_err());
        assert!(auprc(&s).is_err());
        assert!(max_f1(&s).is_err());
    }

    #[test]
    fn fpr95_examples() {
        assert_eq!(fpr_at_95_tpr(&ls(&[0.1; 10], &[0.9; 10])).unwrap(), 0.0);
        assert_eq!(fpr_at_95_tpr(&ls(&[0.9; 10], &[0.1; 10])).unwrap(), 1.0);

        let mut ood = vec![0.9; 96];
        ood.extend([0.2; 4]);
        let id: Vec<f64> = (0..50).map(|i| i as f64 / 100.0).collect();
        assert_eq!(fpr_at_95_tpr(&ls(&id, &ood)).unwrap(), 0.0);
        assert_eq!(tpr95_count(100), 95);
        assert_eq!(tpr95_count(20), 19);
        assert_eq!(tpr95_count(21), 20);
    }

    #[test]
    fn pr_examples() {
        let sep = ls(&[0.1, 0.2, 0.3], &[0.8, 0.9]);
        assert_eq!(auprc(&sep).unwrap(), 1.0);
        assert_eq!(max_f1(&sep).unwrap().0, 1.0);

        let ties = ls(&[0.5; 3], &[0.5; 2]);
        assert!((auprc(&ties).unwrap() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn three_point_toy_matches_enumeration() {
        // OOD {0.9, 0.4}, ID {0.6}
        let s = ls(&[0.6], &[0.9, 0.4]);
        // t=0.9: TP1 FP0 → R .5 P 1 ; t=0.6: TP1 FP1 → R .5 P .5 ; t=0.4: TP2 FP1 → R 1 P 2/3
        let expected_area = 0.5 * 1.0 + 0.0 + 0.5 * (0.5 + 2.0 / 3.0) / 2.0;
        assert!((auprc(&s).unwrap() - expected_area).abs() < 1e-15);
        // F1: t=.9 → 2/3 ; t=.6 → .5 ; t=.4 → 0.8
        let (f1, t) = max_f1(&s).unwrap();
        assert!((f1 - 0.8).abs() < 1e-15);
        assert_eq!(t, 0.4);
    }

    #[test]
    fn f1_ties_prefer_the_lower_threshold() {
        // t=0.9 → P1 R.5 F1 2/3 ; t=0.1 → P.5 R1 F1 2/3
        let s = ls(&[0.1, 0.1], &[0.9, 0.1]);
        let (f1, t) = max_f1(&s).unwrap();
        assert!((f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(t, 0.1);
    }

    #[test]
    fn report_json_keys() {
        let r = evaluate(&ls(&[0.1, 0.2], &[0.8, 0.9])).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        for key in ["auroc", "fpr95", "auprc", "max_f1", "threshold", "n_id", "n_ood"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }
}
