use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(100 − r)`-th percentile of `scores` with linear interpolation between
/// order statistics. Points strictly above it are flagged.
pub fn threshold_by_ratio(scores: &[f64], r: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Config("cannot threshold an empty score series".into()));
    }
    if !(r > 0.0 && r < 100.0) {
        return Err(Error::Config(format!("anomaly ratio must be in (0, 100), got {r}")));
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = (100.0 - r) / 100.0 * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Ok(s[lo] + (s[hi] - s[lo]) * frac)
}

pub fn flag(scores: &[f64], threshold: f64) -> Vec<u8> {
    scores.iter().map(|&s| u8::from(s > threshold)).collect()
}

/// Expands every detected labelled segment to the whole segment.
pub fn point_adjust(labels: &[u8], preds: &[u8]) -> Vec<u8> {
    assert_eq!(labels.len(), preds.len(), "point_adjust: length mismatch");
    let mut out = preds.to_vec();
    let mut i = 0;
    while i < labels.len() {
        if labels[i] == 0 {
            i += 1;
            continue;
        }
        let start = i;
        while i < labels.len() && labels[i] == 1 {
            i += 1;
        }
        if preds[start..i].iter().any(|&p| p == 1) {
            out[start..i].fill(1);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn count(labels: &[u8], preds: &[u8]) -> Self {
        assert_eq!(labels.len(), preds.len(), "confusion: length mismatch");
        let mut c = Confusion::default();
        for (&l, &p) in labels.iter().zip(preds) {
            match (l, p) {
                (1, 1) => c.tp += 1,
                (0, 1) => c.fp += 1,
                (1, 0) => c.fn_ += 1,
                _ => c.tn += 1,
            }
        }
        c
    }

    /// Precision, recall and F1; zero denominators give 0.
    pub fn prf1(&self) -> (f64, f64, f64) {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let p = ratio(self.tp, self.tp + self.fp);
        let r = ratio(self.tp, self.tp + self.fn_);
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        (p, r, f1)
    }
}

pub fn prf1(labels: &[u8], preds: &[u8]) -> (f64, f64, f64) {
    Confusion::count(labels, preds).prf1()
}

/// Groups of tied scores in descending order: `(positives, negatives)`.
fn tie_groups(scores: &[f64], labels: &[u8]) -> Vec<(usize, usize)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<(usize, usize)> = Vec::new();
    let mut last = None;
    for i in idx {
        let pos = labels[i] == 1;
        if last == Some(scores[i]) {
            let g = groups.last_mut().unwrap();
            if pos {
                g.0 += 1
            } else {
                g.1 += 1
            }
        } else {
            groups.push((usize::from(pos), usize::from(!pos)));
            last = Some(scores[i]);
        }
    }
    groups
}

fn check(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {s} is not finite")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    Ok((pos, labels.len() - pos))
}

/// Area under the ROC curve, trapezoidal over tie groups.
pub fn auc_roc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (p, n) = check(scores, labels)?;
    if p == 0 || n == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC-ROC needs both classes ({p} positives, {n} negatives)"
        )));
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    for (gp, gn) in tie_groups(scores, labels) {
        // trapezoid between (fp, tp) and (fp + gn, tp + gp), unnormalised
        area += gn as f64 * (tp as f64 + gp as f64 / 2.0);
        tp += gp;
        fp += gn;
    }
    debug_assert_eq!((tp, fp), (p, n));
    Ok(area / (p as f64 * n as f64))
}

/// Average precision: recall increments weighted by precision at each
/// distinct threshold.
pub fn auc_pr(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (p, _) = check(scores, labels)?;
    if p == 0 {
        return Err(Error::UndefinedMetric("AUC-PR needs at least one positive label".into()));
    }
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut area = 0.0;
    for (gp, gn) in tie_groups(scores, labels) {
        tp += gp;
        seen += gp + gn;
        area += gp as f64 / p as f64 * (tp as f64 / seen as f64);
    }
    Ok(area)
}

/// Best F1 over every distinct threshold (diagnostic only).
pub fn best_f1(scores: &[f64], labels: &[u8]) -> (f64, f64) {
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut best = (f64::INFINITY, 0.0);
    // flagging is strict, so threshold `sorted[i−1]` flags every score ≥ `sorted[i]`
    let cut = sorted.len().saturating_sub(1);
    for th in std::iter::once(f64::NEG_INFINITY).chain(sorted[..cut].iter().copied()) {
        let (_, _, f1) = prf1(labels, &flag(scores, th));
        if f1 > best.1 {
            best = (th, f1);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_threshold() {
        assert_eq!(threshold_by_ratio(&[1.0, 2.0, 3.0, 4.0], 50.0).unwrap(), 2.5);
        // the threshold approaches the maximum as r → 0⁺
        for r in [1e-3, 1e-6, 1e-9] {
            let th = threshold_by_ratio(&[1.0, 2.0, 3.0, 4.0], r).unwrap();
            assert!(th <= 4.0 && 4.0 - th <= 3.0 * r / 100.0 + 1e-15);
        }
        assert!(threshold_by_ratio(&[], 5.0).is_err());
        assert!(threshold_by_ratio(&[1.0], 0.0).is_err());
    }

    #[test]
    fn segment_expansion() {
        let b = |s: &str| s.bytes().map(|c| c - b'0').collect::<Vec<u8>>();
        assert_eq!(point_adjust(&b("0011100"), &b("0000100")), b("0011100"));
        assert_eq!(point_adjust(&b("0011100"), &b("0000000")), b("0000000"));
        assert_eq!(point_adjust(&b("0110011"), &b("0100001")), b("0110011"));
        // predictions outside segments are untouched
        assert_eq!(point_adjust(&b("0110000"), &b("1000010")), b("1000010"));
    }

    #[test]
    fn hand_counts() {
        let c = Confusion { tp: 8, fp: 2, tn: 0, fn_: 8 };
        let (p, r, f1) = c.prf1();
        assert_eq!(p, 0.8);
        assert_eq!(r, 0.5);
        assert!((f1 - 0.6153846153846154).abs() < 1e-12);
        assert_eq!(prf1(&[0, 1, 1], &[0, 0, 0]), (0.0, 0.0, 0.0));
        assert_eq!(prf1(&[0, 1, 1], &[0, 1, 1]), (1.0, 1.0, 1.0));
    }

    #[test]
    fn auc_edge_cases() {
        let labels = [0, 0, 1, 1, 0, 1];
        let perfect: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
        assert_eq!(auc_roc(&perfect, &labels).unwrap(), 1.0);
        assert_eq!(auc_pr(&perfect, &labels).unwrap(), 1.0);
        assert_eq!(auc_roc(&[3.0; 6], &labels).unwrap(), 0.5);
        assert_eq!(auc_pr(&[3.0; 6], &labels).unwrap(), 0.5);
        assert!(matches!(auc_roc(&[1.0, 2.0], &[0, 0]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(auc_pr(&[1.0, 2.0], &[0, 0]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn best_f1_dominates_ratio_threshold() {
        let scores = [0.1, 0.9, 0.3, 0.8, 0.2, 0.7, 0.4];
        let labels = [0, 1, 0, 1, 0, 0, 1];
        let (_, best) = best_f1(&scores, &labels);
        for r in [10.0, 30.0, 50.0] {
            let th = threshold_by_ratio(&scores, r).unwrap();
            assert!(prf1(&labels, &flag(&scores, th)).2 <= best);
        }
    }
}
