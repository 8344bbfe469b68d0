//! Classification and steering losses.
//!
//! The classification term is the cross-entropy of alignment scores divided
//! by the encoder temperature. The two steering terms are L1 distances that
//! keep prompted features near the frozen encoder's output: one over the
//! global image features of a batch, one over the description-guided text
//! features of every training class.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Result, SapError};

/// Loss components for one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ce: f64,
    pub l_steer_v: f64,
    pub l_steer_t: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_ce, self.l_steer_v, self.l_steer_t, self.total]
            .iter()
            .all(|x| x.is_finite())
    }
}

/// Mean negative log-likelihood of `labels` under `softmax(scores / tau)`.
pub fn classification_node(g: &mut Graph, scores: Var, labels: &[usize], tau: f64) -> Var {
    g.cross_entropy(scores, labels, tau)
}

/// `(1/B) sum_i |prompted_i - unprompted_i|_1` for `B x d` inputs.
pub fn visual_steering_node(g: &mut Graph, prompted: Var, unprompted: Var) -> Var {
    let b = g.shape(prompted).0 as f64;
    let diff = g.sub(prompted, unprompted);
    let l1 = g.sum_abs(diff);
    g.scale(l1, 1.0 / b)
}

/// Stacked per-class text features; the L1 distance summed over every
/// entry, divided by the number of classes.
pub fn text_steering_node(g: &mut Graph, prompted: Var, unprompted: Var, num_classes: usize) -> Var {
    let diff = g.sub(prompted, unprompted);
    let l1 = g.sum_abs(diff);
    g.scale(l1, 1.0 / num_classes as f64)
}

/// `l_ce + lambda1 * l_steer_v + lambda2 * l_steer_t` as a graph node.
pub fn total_node(g: &mut Graph, l_ce: Var, l_steer_v: Var, l_steer_t: Var, lambda1: f64, lambda2: f64) -> Var {
    let v = g.scale(l_steer_v, lambda1);
    let t = g.scale(l_steer_t, lambda2);
    let s = g.add(l_ce, v);
    g.add(s, t)
}

pub fn classification_loss(scores: &Array2<f64>, labels: &[usize], tau: f64) -> Result<f64> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(SapError::Invalid(format!("temperature must be positive, got {tau}")));
    }
    if scores.nrows() != labels.len() || scores.nrows() == 0 {
        return Err(SapError::Shape(format!(
            "{} score rows for {} labels",
            scores.nrows(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= scores.ncols()) {
        return Err(SapError::Invalid(format!("label {bad} outside {} classes", scores.ncols())));
    }
    if scores.iter().any(|x| !x.is_finite()) {
        return Err(SapError::Invalid("non-finite alignment score".into()));
    }
    let mut g = Graph::new();
    let s = g.constant(scores.clone());
    let l = classification_node(&mut g, s, labels, tau);
    Ok(g.scalar(l))
}

pub fn visual_steering_loss(prompted: &Array2<f64>, unprompted: &Array2<f64>) -> Result<f64> {
    if prompted.dim() != unprompted.dim() || prompted.nrows() == 0 {
        return Err(SapError::Shape(format!(
            "prompted {:?} vs unprompted {:?}",
            prompted.dim(),
            unprompted.dim()
        )));
    }
    let mut g = Graph::new();
    let p = g.constant(prompted.clone());
    let u = g.constant(unprompted.clone());
    let l = visual_steering_node(&mut g, p, u);
    Ok(g.scalar(l))
}

/// Per-class description text features, prompted and unprompted.
pub fn text_steering_loss(prompted: &[Array2<f64>], unprompted: &[Array2<f64>]) -> Result<f64> {
    if prompted.len() != unprompted.len() || prompted.is_empty() {
        return Err(SapError::Shape(format!(
            "{} prompted classes vs {} unprompted",
            prompted.len(),
            unprompted.len()
        )));
    }
    let mut width = None;
    for (p, u) in prompted.iter().zip(unprompted) {
        if p.dim() != u.dim() || *width.get_or_insert(p.ncols()) != p.ncols() {
            return Err(SapError::Shape(format!("class features {:?} vs {:?}", p.dim(), u.dim())));
        }
    }
    let stack = |parts: &[Array2<f64>]| {
        let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
        ndarray::concatenate(ndarray::Axis(0), &views).expect("widths checked")
    };
    let mut g = Graph::new();
    let p = g.constant(stack(prompted));
    let u = g.constant(stack(unprompted));
    let l = text_steering_node(&mut g, p, u, prompted.len());
    Ok(g.scalar(l))
}

pub fn total_loss(l_ce: f64, l_steer_v: f64, l_steer_t: f64, lambda1: f64, lambda2: f64) -> Result<LossBreakdown> {
    if lambda1 < 0.0 || lambda2 < 0.0 {
        return Err(SapError::Invalid(format!("negative loss weight ({lambda1}, {lambda2})")));
    }
    Ok(LossBreakdown {
        l_ce,
        l_steer_v,
        l_steer_t,
        total: l_ce + lambda1 * l_steer_v + lambda2 * l_steer_t,
        lambda1,
        lambda2,
    })
}
