//! Pixel-level evaluation: threshold-sweep maximum F1 and rank-statistic AUC.
//!
//! Both metrics operate on one pooled score/label collection. Per-image
//! provenance is kept so AUC can optionally be averaged per image instead of
//! pooled.

use crate::error::{Error, Result};

/// Pooled per-pixel scores and binary labels with per-image provenance.
#[derive(Clone, Debug, Default)]
pub struct EvalPair {
    scores: Vec<f64>,
    labels: Vec<u8>,
    images: Vec<(String, usize, usize)>, // id, start, len
}

impl EvalPair {
    pub fn new() -> Self {
        EvalPair::default()
    }

    pub fn from_slices(scores: &[f64], labels: &[u8]) -> Result<Self> {
        let mut p = EvalPair::new();
        p.push_image("pooled", scores, labels)?;
        Ok(p)
    }

    pub fn push_image(&mut self, id: impl Into<String>, scores: &[f64], labels: &[u8]) -> Result<()> {
        if scores.len() != labels.len() {
            return Err(Error::config(format!(
                "scores and labels differ in length: {} vs {}",
                scores.len(),
                labels.len()
            )));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::config("labels must be 0 or 1".to_string()));
        }
        let start = self.scores.len();
        self.scores.extend_from_slice(scores);
        self.labels.extend_from_slice(labels);
        self.images.push((id.into(), start, scores.len()));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }

    pub fn image_count(&self) -> usize {
        self.images.len()
    }

    fn image_pair(&self, i: usize) -> EvalPair {
        let (id, start, len) = &self.images[i];
        EvalPair {
            scores: self.scores[*start..start + len].to_vec(),
            labels: self.labels[*start..start + len].to_vec(),
            images: vec![(id.clone(), 0, *len)],
        }
    }
}

/// Maximum F1 over all distinct score thresholds (positive iff score >= t),
/// ties in F1 broken toward the lower threshold. Returns (score, threshold).
pub fn f1_max(pairs: &EvalPair) -> Result<(f64, f64)> {
    let total_pos = pairs.positives();
    if total_pos == 0 {
        return Err(Error::UndefinedMetric(
            "f1_max needs at least one positive label".to_string(),
        ));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| {
        pairs.scores[b]
            .partial_cmp(&pairs.scores[a])
            .expect("scores must not be NaN")
            .then(a.cmp(&b))
    });

    let mut best_f1 = f64::NEG_INFINITY;
    let mut best_thr = f64::INFINITY;
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut i = 0;
    while i < order.len() {
        let thr = pairs.scores[order[i]];
        // absorb the whole tie group: threshold = thr admits all of them
        while i < order.len() && pairs.scores[order[i]] == thr {
            if pairs.labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let fnneg = total_pos as u64 - tp;
        let f1 = 2.0 * tp as f64 / (2 * tp + fp + fnneg) as f64;
        if f1 > best_f1 || (f1 == best_f1 && thr < best_thr) {
            best_f1 = f1;
            best_thr = thr;
        }
    }
    Ok((best_f1, best_thr))
}

/// F1 at one fixed threshold (positive iff score >= threshold).
pub fn f1_at_threshold(pairs: &EvalPair, threshold: f64) -> Result<f64> {
    let total_pos = pairs.positives();
    if total_pos == 0 {
        return Err(Error::UndefinedMetric(
            "f1 needs at least one positive label".to_string(),
        ));
    }
    let mut tp = 0u64;
    let mut fp = 0u64;
    for (s, &l) in pairs.scores.iter().zip(&pairs.labels) {
        if *s >= threshold {
            if l == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    let fnneg = total_pos as u64 - tp;
    Ok(2.0 * tp as f64 / ((2 * tp + fp + fnneg).max(1)) as f64)
}

/// Mann-Whitney AUC: fraction of (positive, negative) pairs where the
/// positive scores higher, ties counting one half.
pub fn auc(pairs: &EvalPair) -> Result<f64> {
    let np = pairs.positives();
    let nn = pairs.negatives();
    if np == 0 || nn == 0 {
        return Err(Error::UndefinedMetric(format!(
            "auc needs both classes; got {np} positives and {nn} negatives"
        )));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| {
        pairs.scores[a]
            .partial_cmp(&pairs.scores[b])
            .expect("scores must not be NaN")
            .then(a.cmp(&b))
    });

    // doubled rank sum of positives with average ranks in tie groups stays an
    // exact integer, so u2 below is exact in u128
    let mut rank2_pos: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let s = pairs.scores[order[i]];
        let start = i;
        let mut pos_in_group: u128 = 0;
        while i < order.len() && pairs.scores[order[i]] == s {
            if pairs.labels[order[i]] == 1 {
                pos_in_group += 1;
            }
            i += 1;
        }
        // doubled average rank of the group (1-based ranks)
        let rank2 = (start + 1) as u128 + i as u128;
        rank2_pos += pos_in_group * rank2;
    }
    let np128 = np as u128;
    let u2 = rank2_pos - np128 * (np128 + 1);
    Ok(u2 as f64 / (2 * np * nn) as f64)
}

/// AUC averaged over images that contain both classes.
pub fn auc_per_image_mean(pairs: &EvalPair) -> Result<f64> {
    let mut vals = Vec::new();
    for i in 0..pairs.image_count() {
        let p = pairs.image_pair(i);
        if p.positives() > 0 && p.negatives() > 0 {
            vals.push(auc(&p)?);
        }
    }
    if vals.is_empty() {
        return Err(Error::UndefinedMetric(
            "no image contains both classes".to_string(),
        ));
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(scores: &[f64], labels: &[u8]) -> EvalPair {
        EvalPair::from_slices(scores, labels).unwrap()
    }

    #[test]
    fn worked_four_pixel_example() {
        let p = pairs(&[0.9, 0.8, 0.4, 0.3], &[1, 0, 1, 0]);
        let (f1, thr) = f1_max(&p).unwrap();
        assert_eq!(f1, 0.8);
        assert_eq!(thr, 0.4);
        assert_eq!(auc(&p).unwrap(), 0.75);
    }

    #[test]
    fn perfect_separation() {
        let p = pairs(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]);
        assert_eq!(f1_max(&p).unwrap().0, 1.0);
        assert_eq!(auc(&p).unwrap(), 1.0);
    }

    #[test]
    fn all_positive_labels() {
        let p = pairs(&[0.9, 0.5, 0.1], &[1, 1, 1]);
        let (f1, thr) = f1_max(&p).unwrap();
        assert_eq!(f1, 1.0);
        assert_eq!(thr, 0.1);
        assert!(auc(&p).is_err());
    }

    #[test]
    fn all_tied_scores() {
        let p = pairs(&[0.5, 0.5, 0.5, 0.5], &[1, 0, 1, 0]);
        assert_eq!(auc(&p).unwrap(), 0.5);
    }

    #[test]
    fn no_positives_is_undefined() {
        let p = pairs(&[0.9, 0.1], &[0, 0]);
        assert!(matches!(f1_max(&p), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn f1_max_dominates_fixed_thresholds() {
        let p = pairs(&[0.9, 0.7, 0.6, 0.4, 0.2], &[1, 0, 1, 1, 0]);
        let (best, _) = f1_max(&p).unwrap();
        for t in [0.1, 0.2, 0.4, 0.6, 0.7, 0.9, 0.95] {
            assert!(best >= f1_at_threshold(&p, t).unwrap());
        }
    }

    #[test]
    fn per_image_mean_skips_single_class_images() {
        let mut p = EvalPair::new();
        p.push_image("a", &[0.9, 0.1], &[1, 0]).unwrap();
        p.push_image("b", &[0.3, 0.2], &[0, 0]).unwrap();
        p.push_image("c", &[0.2, 0.8], &[0, 1]).unwrap();
        assert_eq!(auc_per_image_mean(&p).unwrap(), 1.0);
    }
}
