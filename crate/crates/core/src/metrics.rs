//! Confusion-matrix segmentation metrics.

use serde::{Deserialize, Serialize};

use crate::losses::LossParts;

/// `counts[truth][pred]` point counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.num_classes + pred] += 1;
    }

    pub fn add_all(&mut self, truth: &[usize], pred: &[usize]) {
        for (&t, &p) in truth.iter().zip(pred) {
            self.add(t, p);
        }
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn truth_count(&self, c: usize) -> u64 {
        (0..self.num_classes).map(|p| self.get(c, p)).sum()
    }

    fn pred_count(&self, c: usize) -> u64 {
        (0..self.num_classes).map(|t| self.get(t, c)).sum()
    }

    /// IoU per class; `None` for classes absent from the ground truth.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        (0..self.num_classes)
            .map(|c| {
                let gt = self.truth_count(c);
                if gt == 0 {
                    return None;
                }
                let tp = self.get(c, c);
                let union = gt + self.pred_count(c) - tp;
                Some(tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn class_accuracy(&self) -> Vec<Option<f64>> {
        (0..self.num_classes)
            .map(|c| {
                let gt = self.truth_count(c);
                (gt > 0).then(|| self.get(c, c) as f64 / gt as f64)
            })
            .collect()
    }

    pub fn overall_accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let diag: u64 = (0..self.num_classes).map(|c| self.get(c, c)).sum();
        diag as f64 / total as f64
    }
}

fn mean_present(v: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = v.iter().flatten().copied().collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub oa: f64,
    pub macc: f64,
    pub miou: f64,
    pub class_iou: Vec<Option<f64>>,
    /// Mean unweighted loss parts over the epoch's training steps.
    pub losses: LossParts,
}

impl EpochMetrics {
    pub fn from_confusion(epoch: usize, cm: &ConfusionMatrix, losses: LossParts) -> Self {
        let class_iou = cm.class_iou();
        Self {
            epoch,
            oa: cm.overall_accuracy(),
            macc: mean_present(&cm.class_accuracy()),
            miou: mean_present(&class_iou),
            class_iou,
            losses,
        }
    }

    pub fn csv_header(num_classes: usize) -> String {
        let mut h = String::from("epoch,OA,mAcc,mIoU");
        for c in 0..num_classes {
            h.push_str(&format!(",iou_class_{c}"));
        }
        h.push_str(",l_con,l_l1,l_l1_main,l_ce");
        h
    }

    /// One CSV row. Floats use Rust's shortest round-trip formatting.
    pub fn csv_row(&self) -> String {
        let mut r = format!("{},{},{},{}", self.epoch, self.oa, self.macc, self.miou);
        for iou in &self.class_iou {
            match iou {
                Some(v) => r.push_str(&format!(",{v}")),
                None => r.push_str(",nan"),
            }
        }
        let l = &self.losses;
        r.push_str(&format!(",{},{},{},{}", l.con, l.l1, l.l1_main, l.ce));
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_predictions() {
        let mut cm = ConfusionMatrix::new(3);
        cm.add_all(&[0, 1, 2, 2], &[0, 1, 2, 2]);
        let m = EpochMetrics::from_confusion(0, &cm, LossParts::default());
        assert_eq!((m.oa, m.macc, m.miou), (1.0, 1.0, 1.0));
    }

    #[test]
    fn all_zero_predictions_two_balanced_classes() {
        let mut cm = ConfusionMatrix::new(2);
        cm.add_all(&[0, 0, 1, 1], &[0, 0, 0, 0]);
        let m = EpochMetrics::from_confusion(0, &cm, LossParts::default());
        assert_eq!(m.oa, 0.5);
        assert_eq!(m.class_iou, vec![Some(0.5), Some(0.0)]);
        assert_eq!(m.miou, 0.25);
        assert_eq!(m.macc, 0.5);
    }

    #[test]
    fn absent_classes_are_excluded_from_means() {
        let mut cm = ConfusionMatrix::new(3);
        cm.add_all(&[0, 1], &[0, 2]);
        let m = EpochMetrics::from_confusion(0, &cm, LossParts::default());
        assert_eq!(m.class_iou, vec![Some(1.0), Some(0.0), None]);
        assert_eq!(m.miou, 0.5);
        assert!(m.csv_row().contains(",nan,"));
        assert_eq!(
            m.csv_row().split(',').count(),
            EpochMetrics::csv_header(3).split(',').count()
        );
    }

    #[test]
    fn random_predictions_match_recount() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = 5;
        let truth: Vec<usize> = (0..400).map(|_| rng.random_range(0..c)).collect();
        let pred: Vec<usize> = (0..400).map(|_| rng.random_range(0..c)).collect();
        let mut cm = ConfusionMatrix::new(c);
        cm.add_all(&truth, &pred);
        let m = EpochMetrics::from_confusion(0, &cm, LossParts::default());

        let correct = truth.iter().zip(&pred).filter(|(t, p)| t == p).count();
        assert!((m.oa - correct as f64 / 400.0).abs() < 1e-15);
        let mut ious = Vec::new();
        for k in 0..c {
            let tp = truth
                .iter()
                .zip(&pred)
                .filter(|&(&t, &p)| t == k && p == k)
                .count();
            let fp = truth
                .iter()
                .zip(&pred)
                .filter(|&(&t, &p)| t != k && p == k)
                .count();
            let fn_ = truth
                .iter()
                .zip(&pred)
                .filter(|&(&t, &p)| t == k && p != k)
                .count();
            ious.push(tp as f64 / (tp + fp + fn_) as f64);
        }
        for k in 0..c {
            assert!((m.class_iou[k].unwrap() - ious[k]).abs() < 1e-15);
        }
        assert!((m.miou - ious.iter().sum::<f64>() / c as f64).abs() < 1e-15);
    }

    #[test]
    fn merge_is_order_independent() {
        let mut a = ConfusionMatrix::new(2);
        a.add_all(&[0, 1], &[1, 1]);
        let mut b = ConfusionMatrix::new(2);
        b.add_all(&[1, 0, 0], &[0, 0, 0]);
        let mut ab = a.clone();
        ab.merge(&b);
        let mut ba = b.clone();
        ba.merge(&a);
        assert_eq!(ab, ba);
        assert_eq!(ab.total(), 5);
    }
}
