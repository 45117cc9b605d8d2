//! Loss kernels, each returning its value and the gradient w.r.t. its input.

use serde::{Deserialize, Serialize};

use crate::linalg::{self, Tensor2D};
use crate::prototypes::PrototypeStore;
use crate::SpgError;

/// Tolerance on `‖f‖ − 1` for features that must be unit-norm.
pub const UNIT_TOL: f64 = 1e-9;

/// Supervised contrastive loss over unit-norm features.
///
/// For every class with at least two members, each anchor `i` is contrasted
/// against its same-class positives `p` over a denominator that runs over
/// every other feature in the batch:
///
/// `L = Σ_c −1/(N_c − 1) Σ_{i∈c} Σ_{p∈c, p≠i} log( exp(f_i·f_p/τ) / Σ_{a≠i} exp(f_i·f_a/τ) )`
///
/// There is no overall `1/N`. Singleton classes contribute no anchor terms but
/// still appear in other anchors' denominators. Returns the loss and its
/// gradient w.r.t. the unit-norm features.
pub fn supcon_loss(
    features: &Tensor2D,
    labels: &[usize],
    tau: f64,
) -> Result<(f64, Tensor2D), SpgError> {
    if !(tau > 0.0) {
        return Err(SpgError::Parameter(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let n = features.rows();
    if labels.len() != n {
        return Err(SpgError::Validation(format!(
            "{n} feature rows but {} labels",
            labels.len()
        )));
    }
    for (i, row) in features.iter_rows().enumerate() {
        let norm = linalg::norm(row);
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(SpgError::Validation(format!(
                "feature {i} has norm {norm}, expected 1"
            )));
        }
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; num_classes];
    for &c in labels {
        counts[c] += 1;
    }

    let sims = linalg::matmul_nt(features, features)?;
    let mut loss = 0.0;
    // dL/dS where S = F Fᵀ / τ.
    let mut g = Tensor2D::zeros(n, n);
    for i in 0..n {
        let nc = counts[labels[i]];
        if nc < 2 {
            continue;
        }
        let coef = -1.0 / (nc as f64 - 1.0);
        let row = sims.row(i);
        let m = (0..n)
            .filter(|&a| a != i)
            .map(|a| row[a] / tau)
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..n)
            .filter(|&a| a != i)
            .map(|a| (row[a] / tau - m).exp())
            .sum();
        let lse = m + denom.ln();
        let mut pos_sum = 0.0;
        let grow = g.row_mut(i);
        for a in 0..n {
            if a == i {
                continue;
            }
            // −coef·(N_c − 1) = 1 times the softmax weight.
            grow[a] += (row[a] / tau - m).exp() / denom;
            if labels[a] == labels[i] {
                pos_sum += row[a] / tau;
                grow[a] += coef;
            }
        }
        loss += coef * (pos_sum - (nc as f64 - 1.0) * lse);
    }
    // dS_ij/dF: S_ij depends on f_i and f_j.
    let gsym = {
        let mut s = g.clone();
        s.add_scaled(&g.transpose(), 1.0)?;
        s
    };
    let mut grad = linalg::matmul_fwd(&gsym, features)?;
    grad.scale(1.0 / tau);
    Ok((loss, grad))
}

/// `0.5 x²` inside `|x| < 1`, `|x| − 0.5` outside.
pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Smooth-L1 summed over the coordinates of `a − b`.
pub fn smooth_l1_sum(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| smooth_l1(x - y)).sum()
}

fn guidance(
    features: &Tensor2D,
    labels: &[usize],
    store: &PrototypeStore,
    normalize: bool,
) -> Result<(f64, Tensor2D, usize), SpgError> {
    if labels.len() != features.rows() {
        return Err(SpgError::Validation(format!(
            "{} feature rows but {} labels",
            features.rows(),
            labels.len()
        )));
    }
    if features.cols() != store.dim {
        return Err(SpgError::Config(format!(
            "feature dimension {} does not match prototype dimension {}",
            features.cols(),
            store.dim
        )));
    }
    let mut grad = Tensor2D::zeros(features.rows(), features.cols());
    let mut total = 0.0;
    let mut participating = 0usize;
    let mut rows = Vec::new();
    for (i, &c) in labels.iter().enumerate() {
        let Some(target) = store.get(c) else { continue };
        let f = features.row(i);
        let unit;
        let x = if normalize {
            unit = linalg::l2_normalize_fwd(f)?;
            &unit[..]
        } else {
            f
        };
        total += smooth_l1_sum(x, target);
        let g: Vec<f64> = x
            .iter()
            .zip(target)
            .map(|(a, b)| smooth_l1_grad(a - b))
            .collect();
        let g = if normalize {
            linalg::l2_normalize_bwd(f, &g)?
        } else {
            g
        };
        grad.row_mut(i).copy_from_slice(&g);
        rows.push(i);
        participating += 1;
    }
    if participating == 0 {
        return Ok((0.0, grad, 0));
    }
    let k = 1.0 / participating as f64;
    for &i in &rows {
        grad.row_mut(i).iter_mut().for_each(|v| *v *= k);
    }
    Ok((total * k, grad, participating))
}

/// Pulls the L2-normalized main-branch features towards the auxiliary
/// prototypes of their classes. Points of classes the store has not seen are
/// skipped and excluded from the normalizing count. Prototypes are constant
/// targets. Returns the loss, its gradient w.r.t. the raw features and the
/// number of participating points.
pub fn guidance_main(
    features: &Tensor2D,
    labels: &[usize],
    aux_store: &PrototypeStore,
) -> Result<(f64, Tensor2D, usize), SpgError> {
    guidance(features, labels, aux_store, true)
}

/// Pulls the unit-norm auxiliary features towards the main-branch prototypes.
pub fn guidance_aux(
    features: &Tensor2D,
    labels: &[usize],
    main_store: &PrototypeStore,
) -> Result<(f64, Tensor2D, usize), SpgError> {
    guidance(features, labels, main_store, false)
}

fn check_logits(logits: &Tensor2D, labels: &[usize]) -> Result<(), SpgError> {
    if logits.rows() != labels.len() {
        return Err(SpgError::Validation(format!(
            "{} logit rows but {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= logits.cols()) {
        return Err(SpgError::Validation(format!(
            "label {y} out of range for {} classes",
            logits.cols()
        )));
    }
    Ok(())
}

/// Mean negative log-likelihood of the true class; gradient `(softmax − onehot)/N`.
pub fn cross_entropy(logits: &Tensor2D, labels: &[usize]) -> Result<(f64, Tensor2D), SpgError> {
    check_logits(logits, labels)?;
    let n = labels.len();
    if n == 0 {
        return Ok((0.0, Tensor2D::zeros(0, logits.cols())));
    }
    let logp = linalg::log_softmax_rows(logits);
    let mut grad = linalg::softmax_rows(logits);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        loss += -logp.get(i, y);
        let row = grad.row_mut(i);
        row[y] -= 1.0;
    }
    grad.scale(1.0 / n as f64);
    Ok((loss / n as f64, grad))
}

/// Focal loss `−(1 − p_t)^γ log p_t`, averaged over points.
pub fn focal_loss(
    logits: &Tensor2D,
    labels: &[usize],
    gamma: f64,
) -> Result<(f64, Tensor2D), SpgError> {
    if !(gamma >= 0.0) {
        return Err(SpgError::Parameter(format!(
            "focal gamma must be non-negative, got {gamma}"
        )));
    }
    check_logits(logits, labels)?;
    let n = labels.len();
    if n == 0 {
        return Ok((0.0, Tensor2D::zeros(0, logits.cols())));
    }
    let logp = linalg::log_softmax_rows(logits);
    let probs = linalg::softmax_rows(logits);
    let mut grad = Tensor2D::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let lp = logp.get(i, y);
        let pt = lp.exp();
        let q = 1.0 - pt;
        loss += -(q.powf(gamma)) * lp;
        // dL/dz_j = [γ q^(γ−1) p_t log p_t − q^γ] (δ_jy − p_j)
        let first = if gamma == 0.0 || q <= 0.0 {
            0.0
        } else {
            gamma * q.powf(gamma - 1.0) * pt * lp
        };
        let k = first - q.powf(gamma);
        for j in 0..logits.cols() {
            let delta = if j == y { 1.0 } else { 0.0 };
            grad.set(i, j, k * (delta - probs.get(i, j)));
        }
    }
    grad.scale(1.0 / n as f64);
    Ok((loss / n as f64, grad))
}

/// Class-weighted cross-entropy normalized by the total weight of the batch.
pub fn weighted_cross_entropy(
    logits: &Tensor2D,
    labels: &[usize],
    class_weights: &[f64],
) -> Result<(f64, Tensor2D), SpgError> {
    check_logits(logits, labels)?;
    if class_weights.len() != logits.cols() {
        return Err(SpgError::Config(format!(
            "{} class weights for {} classes",
            class_weights.len(),
            logits.cols()
        )));
    }
    if let Some(w) = class_weights.iter().find(|w| !(**w > 0.0)) {
        return Err(SpgError::Parameter(format!(
            "class weights must be positive, got {w}"
        )));
    }
    let n = labels.len();
    if n == 0 {
        return Ok((0.0, Tensor2D::zeros(0, logits.cols())));
    }
    let logp = linalg::log_softmax_rows(logits);
    let mut grad = linalg::softmax_rows(logits);
    let mut loss = 0.0;
    let mut wsum = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let w = class_weights[y];
        loss += w * -logp.get(i, y);
        wsum += w;
        let row = grad.row_mut(i);
        row[y] -= 1.0;
        row.iter_mut().for_each(|v| *v *= w);
    }
    grad.scale(1.0 / wsum);
    Ok((loss / wsum, grad))
}

/// Inverse class frequencies rescaled to mean 1. Unseen classes are counted
/// once so their weight stays finite.
pub fn inverse_frequency_weights(counts: &[usize]) -> Vec<f64> {
    let inv: Vec<f64> = counts.iter().map(|&c| 1.0 / c.max(1) as f64).collect();
    let mean = inv.iter().sum::<f64>() / inv.len().max(1) as f64;
    inv.into_iter().map(|w| w / mean).collect()
}

/// Loss weights `w1..w4` for contrastive, auxiliary guidance, main guidance
/// and classification terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub con: f64,
    pub l1: f64,
    pub l1_main: f64,
    pub ce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            con: 1.0,
            l1: 1.0,
            l1_main: 1.0,
            ce: 1.0,
        }
    }
}

/// Unweighted loss components of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub con: f64,
    pub l1: f64,
    pub l1_main: f64,
    pub ce: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub parts: LossParts,
    pub weights: LossWeights,
    pub total: f64,
}

/// Weighted sum `w1·L_con + w2·L_l1 + w3·L_l1′ + w4·L_ce′`. A non-finite
/// component is reported as a divergence naming that component.
pub fn total_loss(parts: LossParts, weights: LossWeights) -> Result<LossReport, SpgError> {
    for (name, v) in [
        ("l_con", parts.con),
        ("l_l1", parts.l1),
        ("l_l1_main", parts.l1_main),
        ("l_ce", parts.ce),
    ] {
        if !v.is_finite() {
            return Err(SpgError::Divergence {
                part: name.to_string(),
                step: None,
            });
        }
    }
    let total = weights.con * parts.con
        + weights.l1 * parts.l1
        + weights.l1_main * parts.l1_main
        + weights.ce * parts.ce;
    Ok(LossReport {
        parts,
        weights,
        total,
    })
}
