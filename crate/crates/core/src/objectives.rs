//! Classification and combined training objectives.
//!
//! The classifier head scores an embedding against unit-normalized class
//! rows; the target class cosine gets an additive angular margin before
//! scaling, with the standard linear extension past the angle boundary.
//! The combined objective stacks the classification, adversarial, cycle,
//! and orthogonality terms under configurable weights.

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{ensure_finite, Error, Result};
use crate::params::{xavier, ParamSet};

/// Margin classifier over identity classes. Rows are normalized at every
/// use, not stored normalized.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub weights: Array2<f64>,
    pub margin: f64,
    pub scale: f64,
}

impl ClassifierHead {
    pub fn new(weights: Array2<f64>, margin: f64, scale: f64) -> Result<Self> {
        if weights.nrows() == 0 || weights.ncols() == 0 {
            return Err(Error::contract("classifier head needs classes and width"));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&margin) {
            return Err(Error::contract("margin: must lie in [0, pi/2)"));
        }
        if scale <= 0.0 {
            return Err(Error::contract("scale: must be positive"));
        }
        ensure_finite("classifier head", weights.iter().copied())?;
        Ok(ClassifierHead {
            weights,
            margin,
            scale,
        })
    }

    pub fn init<R: Rng>(
        num_classes: usize,
        dim: usize,
        margin: f64,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let w = xavier(rng, &[num_classes, dim], dim, num_classes)
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        ClassifierHead::new(w, margin, scale)
    }

    pub fn num_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn register(&self, ps: &mut ParamSet, prefix: &str) {
        ps.insert(&format!("{prefix}.w"), self.weights.clone().into_dyn());
    }

    pub fn from_params(ps: &ParamSet, prefix: &str, margin: f64, scale: f64) -> Result<Self> {
        let w = ps
            .try_get(&format!("{prefix}.w"))
            .ok_or_else(|| Error::contract(format!("missing parameter {prefix}.w")))?
            .clone()
            .into_dimensionality()
            .map_err(|_| Error::contract(format!("{prefix}.w is not a matrix")))?;
        ClassifierHead::new(w, margin, scale)
    }
}

/// Weights of the non-classification terms in the combined objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub beta: f64,
    pub gamma: f64,
    pub ortho_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta: 1.0,
            gamma: 0.5,
            ortho_weight: 0.1,
        }
    }
}

impl LossWeights {
    pub fn new(beta: f64, gamma: f64, ortho_weight: f64) -> Result<Self> {
        if beta < 0.0 || gamma < 0.0 || ortho_weight < 0.0 {
            return Err(Error::contract("loss weights must be non-negative"));
        }
        Ok(LossWeights {
            beta,
            gamma,
            ortho_weight,
        })
    }
}

fn unit(x: &Array1<f64>) -> Option<Array1<f64>> {
    let n = x.dot(x).sqrt();
    if n < 1e-12 {
        None
    } else {
        Some(x.mapv(|e| e / n))
    }
}

/// Margin-softmax cross-entropy of one embedding against the head.
pub fn aam_softmax_loss(emb: &Array1<f64>, label: usize, head: &ClassifierHead) -> Result<f64> {
    if label >= head.num_classes() {
        return Err(Error::contract(format!(
            "label {label} out of range for {} classes",
            head.num_classes()
        )));
    }
    if emb.len() != head.weights.ncols() {
        return Err(Error::contract(format!(
            "embedding length {} does not match head width {}",
            emb.len(),
            head.weights.ncols()
        )));
    }
    let e = unit(emb).ok_or_else(|| Error::contract("zero-norm embedding in classifier"))?;
    let mut logits = Vec::with_capacity(head.num_classes());
    for row in head.weights.rows() {
        let r = unit(&row.to_owned())
            .ok_or_else(|| Error::contract("zero-norm class row in classifier"))?;
        logits.push(e.dot(&r));
    }
    let cos_y = logits[label].clamp(-1.0, 1.0);
    let theta_y = cos_y.acos();
    logits[label] = if theta_y + head.margin <= std::f64::consts::PI {
        (theta_y + head.margin).cos()
    } else {
        cos_y - head.margin * head.margin.sin()
    };
    for l in logits.iter_mut() {
        *l *= head.scale;
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_denom = logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln() + max;
    Ok(log_denom - logits[label])
}

/// `l_aam + beta * l_adv + gamma * l_cycle + ortho_weight * l_ortho`.
pub fn total_loss(l_aam: f64, l_adv: f64, l_cycle: f64, l_ortho: f64, w: &LossWeights) -> f64 {
    l_aam + w.beta * l_adv + w.gamma * l_cycle + w.ortho_weight * l_ortho
}

/// Tape version of [`aam_softmax_loss`]. `emb` is a vector node, `head_w`
/// the weight-matrix leaf; margin and scale come from `head`.
pub fn aam_softmax_loss_graph(
    g: &mut Graph,
    emb: Var,
    label: usize,
    head_w: Var,
    margin: f64,
    scale: f64,
) -> Var {
    let e = g.normalize_vec(emb);
    let rows = g.normalize_rows(head_w);
    let cos = g.matvec(rows, e);
    let cos_y = g.select(cos, label);

    let cy = g.scalar_value(cos_y).clamp(-1.0, 1.0);
    let boundary_ok = cy.acos() + margin <= std::f64::consts::PI;
    let target = if boundary_ok {
        // cos(theta + m) = cos theta * cos m - sin theta * sin m
        let cos_part = g.scale(cos_y, margin.cos());
        let cy2 = g.mul(cos_y, cos_y);
        let neg = g.scale(cy2, -1.0);
        let one_minus = g.add_const(neg, 1.0);
        let sin_y = g.clamped_sqrt(one_minus);
        let sin_part = g.scale(sin_y, margin.sin());
        g.sub(cos_part, sin_part)
    } else {
        g.add_const(cos_y, -margin * margin.sin())
    };

    let delta = g.sub(target, cos_y);
    let with_margin = g.scatter_add(cos, label, delta);
    let logits = g.scale(with_margin, scale);
    let ls = g.log_softmax(logits);
    let picked = g.select(ls, label);
    g.neg(picked)
}
