//! Entropy of soft decisions and data-driven exit thresholds.
//!
//! A threshold curve is swept over the frames that reach an exit. `h_acc` is
//! the largest entropy at which the exiting subset is still at least
//! `acc_target` accurate, `h_exits` the smallest entropy at which at least
//! `exit_target` of the frames leave, and the operating threshold is their
//! mean. A frame exits when its entropy is `<=` the threshold, both while
//! partitioning training frames and while gating at inference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_ACC_TARGET: f64 = 0.95;
pub const DEFAULT_EXIT_TARGET: f64 = 0.25;

/// A class-probability vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftDecision(Vec<f64>);

impl SoftDecision {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidArgument("empty soft decision".into()));
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidArgument(format!("probability {p} outside [0, 1]")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!("probabilities sum to {sum}")));
        }
        Ok(Self(probs))
    }

    pub fn from_f32(probs: &[f32]) -> Result<Self> {
        Self::new(probs.iter().map(|&p| p as f64).collect())
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    /// MAP decision; ties go to the lowest class index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }
}

/// Shannon entropy in bits, with `0 * log2(0) = 0`.
pub fn entropy(sd: &SoftDecision) -> f64 {
    let h: f64 = sd.0.iter().filter(|&&z| z > 0.0).map(|&z| -z * z.log2()).sum();
    h.max(0.0)
}

/// The exit rule shared by training and inference.
#[inline]
pub fn exits(entropy: f64, threshold: f64) -> bool {
    entropy <= threshold
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCurve {
    /// Sorted unique entropies; each is a candidate threshold.
    pub thresholds: Vec<f64>,
    /// Fraction of frames with entropy `<=` the candidate.
    pub exit_fractions: Vec<f64>,
    /// Accuracy over that exiting subset.
    pub accuracies: Vec<f64>,
    pub num_frames: usize,
}

pub fn sweep_threshold_curve(entropies: &[f64], correct: &[bool]) -> Result<ThresholdCurve> {
    if entropies.is_empty() {
        return Err(Error::InvalidArgument("no frames reach this exit".into()));
    }
    if entropies.len() != correct.len() {
        return Err(Error::InvalidArgument(format!(
            "{} entropies vs {} correctness flags",
            entropies.len(),
            correct.len()
        )));
    }
    if entropies.iter().any(|h| !h.is_finite()) {
        return Err(Error::InvalidArgument("non-finite entropy".into()));
    }
    let mut order: Vec<usize> = (0..entropies.len()).collect();
    order.sort_by(|&a, &b| entropies[a].total_cmp(&entropies[b]));

    let n = entropies.len();
    let mut curve = ThresholdCurve {
        thresholds: Vec::new(),
        exit_fractions: Vec::new(),
        accuracies: Vec::new(),
        num_frames: n,
    };
    let (mut seen, mut hits) = (0usize, 0usize);
    for (pos, &i) in order.iter().enumerate() {
        seen += 1;
        hits += correct[i] as usize;
        let last_of_value = order.get(pos + 1).is_none_or(|&j| entropies[j] != entropies[i]);
        if last_of_value {
            curve.thresholds.push(entropies[i]);
            curve.exit_fractions.push(seen as f64 / n as f64);
            curve.accuracies.push(hits as f64 / seen as f64);
        }
    }
    Ok(curve)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExitCriterion {
    pub h_acc: f64,
    pub h_exits: f64,
    pub h_th: f64,
    pub acc_target: f64,
    pub exit_target: f64,
    /// False when no candidate reached `acc_target` and `h_acc` fell back to 0.
    pub acc_target_met: bool,
}

impl ExitCriterion {
    /// A criterion with a fixed threshold, bypassing selection.
    pub fn fixed(h_th: f64) -> Self {
        Self {
            h_acc: h_th,
            h_exits: h_th,
            h_th,
            acc_target: DEFAULT_ACC_TARGET,
            exit_target: DEFAULT_EXIT_TARGET,
            acc_target_met: true,
        }
    }
}

pub fn select_exit_threshold(
    curve: &ThresholdCurve,
    acc_target: f64,
    exit_target: f64,
) -> Result<ExitCriterion> {
    if curve.thresholds.is_empty() {
        return Err(Error::InvalidArgument("empty threshold curve".into()));
    }
    let h_acc = curve
        .thresholds
        .iter()
        .zip(&curve.accuracies)
        .rev()
        .find(|(_, &acc)| acc >= acc_target)
        .map(|(&t, _)| t);
    if h_acc.is_none() {
        log::warn!("no threshold reaches {acc_target} accuracy; h_acc set to 0");
    }
    let h_exits = curve
        .thresholds
        .iter()
        .zip(&curve.exit_fractions)
        .find(|(_, &f)| f >= exit_target)
        .map(|(&t, _)| t)
        .unwrap_or_else(|| {
            log::warn!("exit target {exit_target} never reached; using the largest entropy");
            *curve.thresholds.last().unwrap()
        });
    let acc_target_met = h_acc.is_some();
    let h_acc = h_acc.unwrap_or(0.0);
    Ok(ExitCriterion {
        h_acc,
        h_exits,
        h_th: (h_acc + h_exits) / 2.0,
        acc_target,
        exit_target,
        acc_target_met,
    })
}

/// Splits `items` into those that exit under `criterion` and the rest,
/// preserving order.
pub fn partition_frames<T: Clone>(
    items: &[T],
    entropies: &[f64],
    criterion: &ExitCriterion,
) -> (Vec<T>, Vec<T>) {
    assert_eq!(items.len(), entropies.len(), "items and entropies misaligned");
    let mut exiting = Vec::new();
    let mut remaining = Vec::new();
    for (item, &h) in items.iter().zip(entropies) {
        if exits(h, criterion.h_th) {
            exiting.push(item.clone());
        } else {
            remaining.push(item.clone());
        }
    }
    (exiting, remaining)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sd(p: &[f64]) -> SoftDecision {
        SoftDecision::new(p.to_vec()).unwrap()
    }

    #[test]
    fn entropy_reference_values() {
        assert_eq!(entropy(&sd(&[0.0, 0.0, 1.0, 0.0, 0.0, 0.0])), 0.0);
        let u = entropy(&sd(&[1.0 / 6.0; 6]));
        assert!((u - 6f64.log2()).abs() < 1e-9);
        assert!((u - 2.58496).abs() < 1e-5);
        let half = entropy(&sd(&[0.5, 0.5, 0.0, 0.0, 0.0, 0.0]));
        assert!((half - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_distributions_are_rejected() {
        assert!(SoftDecision::new(vec![0.5, 0.6]).is_err());
        assert!(SoftDecision::new(vec![-0.1, 1.1]).is_err());
        assert!(SoftDecision::new(vec![]).is_err());
    }

    #[test]
    fn curve_by_enumeration() {
        let c = sweep_threshold_curve(&[0.1, 0.2, 0.3], &[true, true, false]).unwrap();
        assert_eq!(c.thresholds, vec![0.1, 0.2, 0.3]);
        assert!((c.exit_fractions[1] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(c.accuracies[1], 1.0);
        assert_eq!(c.exit_fractions[2], 1.0);
        assert!((c.accuracies[2] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn duplicates_collapse() {
        let c = sweep_threshold_curve(&[0.5, 0.5, 0.2, 0.5], &[true, false, true, true]).unwrap();
        assert_eq!(c.thresholds, vec![0.2, 0.5]);
        assert_eq!(c.exit_fractions, vec![0.25, 1.0]);
        assert_eq!(c.accuracies, vec![1.0, 0.75]);
    }

    #[test]
    fn all_correct_means_perfect_accuracy() {
        let h: Vec<f64> = (0..20).map(|i| i as f64 * 0.1).collect();
        let c = sweep_threshold_curve(&h, &[true; 20]).unwrap();
        assert!(c.accuracies.iter().all(|&a| a == 1.0));
        let crit = select_exit_threshold(&c, 0.95, 0.25).unwrap();
        assert_eq!(crit.h_acc, *h.last().unwrap());
    }

    #[test]
    fn empty_and_misaligned_inputs() {
        assert!(sweep_threshold_curve(&[], &[]).is_err());
        assert!(sweep_threshold_curve(&[0.1], &[true, false]).is_err());
    }

    #[test]
    fn degenerate_accuracy_falls_back_to_zero() {
        let c = sweep_threshold_curve(&[0.1, 0.2], &[false, false]).unwrap();
        let crit = select_exit_threshold(&c, 0.95, 0.25).unwrap();
        assert_eq!(crit.h_acc, 0.0);
        assert!(!crit.acc_target_met);
        assert_eq!(crit.h_exits, 0.1);
        assert_eq!(crit.h_th, 0.05);
        assert!(crit.h_th.is_finite());
    }

    #[test]
    fn partition_boundaries() {
        let ids = [0, 1, 2, 3];
        let h = [0.3, 0.1, 2.0, 0.7];
        let (ex, rest) = partition_frames(&ids, &h, &ExitCriterion::fixed(0.05));
        assert!(ex.is_empty());
        assert_eq!(rest, ids);
        let (ex, rest) = partition_frames(&ids, &h, &ExitCriterion::fixed(6f64.log2()));
        assert_eq!(ex, ids);
        assert!(rest.is_empty());
        let (ex, rest) = partition_frames(&ids, &h, &ExitCriterion::fixed(0.3));
        assert_eq!(ex, vec![0, 1]);
        assert_eq!(rest, vec![2, 3]);
    }

    proptest! {
        #[test]
        fn entropy_is_permutation_invariant(raw in prop::collection::vec(0.0f64..1.0, 6), rot in 0usize..6) {
            let s: f64 = raw.iter().sum::<f64>() + 1e-9;
            let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let norm: f64 = p.iter().sum();
            let p: Vec<f64> = p.iter().map(|v| v / norm).collect();
            let mut q = p.clone();
            q.rotate_left(rot);
            let (a, b) = (entropy(&sd(&p)), entropy(&sd(&q)));
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!(a <= 6f64.log2() + 1e-12);
        }

        #[test]
        fn exit_fraction_monotone(h in prop::collection::vec(0.0f64..2.5, 1..60), seed in any::<u64>()) {
            let correct: Vec<bool> = h.iter().enumerate().map(|(i, _)| (seed >> (i % 64)) & 1 == 1).collect();
            let c = sweep_threshold_curve(&h, &correct).unwrap();
            prop_assert!(c.exit_fractions.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(c.thresholds.windows(2).all(|w| w[0] < w[1]));
            prop_assert_eq!(*c.exit_fractions.last().unwrap(), 1.0);
            let crit = select_exit_threshold(&c, 0.95, 0.25).unwrap();
            prop_assert_eq!(crit.h_th, (crit.h_acc + crit.h_exits) / 2.0);
        }

        #[test]
        fn partition_sizes_monotone(h in prop::collection::vec(0.0f64..2.5, 1..40), t1 in 0.0f64..2.6, t2 in 0.0f64..2.6) {
            let ids: Vec<usize> = (0..h.len()).collect();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let (a, ra) = partition_frames(&ids, &h, &ExitCriterion::fixed(lo));
            let (b, _) = partition_frames(&ids, &h, &ExitCriterion::fixed(hi));
            prop_assert!(a.len() <= b.len());
            prop_assert_eq!(a.len() + ra.len(), ids.len());
            let direct: Vec<usize> = ids.iter().copied().filter(|&i| h[i] <= lo).collect();
            prop_assert_eq!(a, direct);
        }
    }
}
