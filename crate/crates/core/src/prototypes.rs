//! Class prototypes and their exponential moving averages.
//!
//! A scene prototype is the mean of the unit-norm features of one class in
//! one scene. A [`PrototypeStore`] blends scene prototypes into a running
//! prototype per class, `P ← (1 − α) p + α P`, and leaves classes that do not
//! appear in a scene untouched.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::linalg::{self, Tensor2D};
use crate::SpgError;

/// Scene prototypes keyed by class id.
pub type SceneProtos = BTreeMap<usize, Vec<f64>>;

/// Scene prototypes below this norm are treated as absent.
pub const MIN_PROTO_NORM: f64 = 1e-8;

/// Per-class mean of the rows of `features`. Classes without rows are absent
/// from the output. The mean of unit vectors is generally not unit-norm.
pub fn scene_prototypes(features: &Tensor2D, labels: &[usize]) -> Result<SceneProtos, SpgError> {
    if features.rows() != labels.len() {
        return Err(SpgError::Validation(format!(
            "{} feature rows but {} labels",
            features.rows(),
            labels.len()
        )));
    }
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (row, &c) in features.iter_rows().zip(labels) {
        let entry = sums
            .entry(c)
            .or_insert_with(|| (vec![0.0; features.cols()], 0));
        for (s, v) in entry.0.iter_mut().zip(row) {
            *s += v;
        }
        entry.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(c, (sum, n))| (c, sum.into_iter().map(|s| s / n as f64).collect()))
        .collect())
}

/// Scene prototypes of the main branch: per class, the mean of the
/// L2-normalized features of correctly classified points only.
pub fn main_prototypes_from_correct(
    features: &Tensor2D,
    logits: &Tensor2D,
    labels: &[usize],
) -> Result<SceneProtos, SpgError> {
    if features.rows() != labels.len() || logits.rows() != labels.len() {
        return Err(SpgError::Validation(format!(
            "misaligned rows: {} features, {} logits, {} labels",
            features.rows(),
            logits.rows(),
            labels.len()
        )));
    }
    let mut keep = Vec::new();
    for (i, &y) in labels.iter().enumerate() {
        if linalg::argmax(logits.row(i)) == y {
            keep.push(i);
        }
    }
    let selected = features.select_rows(&keep);
    let normalized = linalg::l2_normalize_rows_fwd(&selected)?;
    let kept_labels: Vec<usize> = keep.iter().map(|&i| labels[i]).collect();
    scene_prototypes(&normalized, &kept_labels)
}

/// Running per-class prototypes with presence history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeStore {
    pub num_classes: usize,
    pub dim: usize,
    pub alpha: f64,
    pub renormalize: bool,
    pub prototypes: Vec<Option<Vec<f64>>>,
    /// Number of scenes in which each class updated its prototype.
    pub updates: Vec<u64>,
    /// Scene index of the latest update per class.
    pub last_seen: Vec<Option<u64>>,
}

impl PrototypeStore {
    pub fn new(
        num_classes: usize,
        dim: usize,
        alpha: f64,
        renormalize: bool,
    ) -> Result<Self, SpgError> {
        check_alpha(alpha)?;
        Ok(Self {
            num_classes,
            dim,
            alpha,
            renormalize,
            prototypes: vec![None; num_classes],
            updates: vec![0; num_classes],
            last_seen: vec![None; num_classes],
        })
    }

    pub fn get(&self, class: usize) -> Option<&[f64]> {
        self.prototypes.get(class)?.as_deref()
    }

    pub fn has(&self, class: usize) -> bool {
        self.get(class).is_some()
    }

    pub fn known_classes(&self) -> Vec<usize> {
        (0..self.num_classes).filter(|&c| self.has(c)).collect()
    }

    pub fn set_alpha(&mut self, alpha: f64) -> Result<(), SpgError> {
        check_alpha(alpha)?;
        self.alpha = alpha;
        Ok(())
    }

    /// Blends the scene prototypes of scene `t` into the store and returns
    /// the classes that were updated. Classes missing from `scene` keep their
    /// previous prototype.
    pub fn update(&mut self, scene: &SceneProtos, t: u64) -> Result<Vec<usize>, SpgError> {
        check_alpha(self.alpha)?;
        let mut updated = Vec::new();
        for (&c, p) in scene {
            if c >= self.num_classes {
                return Err(SpgError::Validation(format!(
                    "class {c} out of range for {} classes",
                    self.num_classes
                )));
            }
            if p.len() != self.dim {
                return Err(SpgError::Config(format!(
                    "prototype dimension {} does not match store dimension {}",
                    p.len(),
                    self.dim
                )));
            }
            if linalg::norm(p) < MIN_PROTO_NORM {
                continue;
            }
            let mut next: Vec<f64> = match &self.prototypes[c] {
                None => p.clone(),
                Some(prev) => p
                    .iter()
                    .zip(prev)
                    .map(|(pi, qi)| (1.0 - self.alpha) * pi + self.alpha * qi)
                    .collect(),
            };
            if self.renormalize {
                let n = linalg::norm(&next);
                if n < MIN_PROTO_NORM {
                    continue;
                }
                next.iter_mut().for_each(|v| *v /= n);
            }
            self.prototypes[c] = Some(next);
            self.updates[c] += 1;
            self.last_seen[c] = Some(t);
            updated.push(c);
        }
        Ok(updated)
    }
}

fn check_alpha(alpha: f64) -> Result<(), SpgError> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(SpgError::Parameter(format!(
            "smoothing factor must lie in [0, 1), got {alpha}"
        )));
    }
    Ok(())
}
