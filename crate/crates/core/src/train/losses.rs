//! Point-sampled binary cross-entropy, dice overlap and class-presence
//! cross-entropy, plus their weighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Graph, Tensor, Unary, Var};
use crate::ontology::N_CLASSES;

/// Probability clamp inside the cross-entropy logarithms.
pub const BCE_EPS: f64 = 1e-7;
/// Denominator floor of the dice ratio.
pub const DICE_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub mask: f64,
    pub dice: f64,
    pub cls: f64,
    /// Per-class weights of the presence cross-entropy.
    pub class_weights: Vec<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            mask: 5.0,
            dice: 5.0,
            cls: 2.0,
            class_weights: vec![1.0; N_CLASSES],
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.mask, self.dice, self.cls];
        if all.iter().chain(&self.class_weights).any(|&w| !(w >= 0.0 && w.is_finite())) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if self.class_weights.len() != N_CLASSES {
            return Err(Error::Config(format!(
                "{} class weights for {N_CLASSES} classes",
                self.class_weights.len()
            )));
        }
        Ok(())
    }
}

fn check_len(g: &Graph, op: &'static str, p: Var, n: usize) -> Result<()> {
    if g.value(p).len() != n {
        return Err(Error::Shape {
            op,
            lhs: g.shape(p).to_vec(),
            rhs: vec![n],
        });
    }
    Ok(())
}

/// `−mean(y log p + (1−y) log(1−p))` with `p` clamped to `[ε, 1−ε]`.
pub fn bce_loss(g: &mut Graph, p: Var, y: &[f64]) -> Result<Var> {
    if y.is_empty() {
        return Err(Error::Config("bce_loss on an empty point set".into()));
    }
    check_len(g, "bce_loss", p, y.len())?;
    let shape = g.shape(p).to_vec();
    let pc = g.unary(p, Unary::Clamp(BCE_EPS, 1.0 - BCE_EPS));
    let lp = g.log(pc);
    let neg = g.scale(pc, -1.0);
    let q = g.add_scalar(neg, 1.0);
    let lq = g.log(q);
    let yt = g.input(Tensor::new(shape.clone(), y.to_vec())?);
    let ny = g.input(Tensor::new(shape, y.iter().map(|v| 1.0 - v).collect())?);
    let a = g.mul(yt, lp)?;
    let b = g.mul(ny, lq)?;
    let s = g.add(a, b)?;
    let m = g.mean_all(s);
    Ok(g.scale(m, -1.0))
}

/// Per-column dice losses `1 − 2Σpy / (Σp² + Σy² + ε)` of `p` against `y`
/// (both `n × m`), returned as a `1 × m` row.
pub fn dice_loss_cols(g: &mut Graph, p: Var, y: &Tensor) -> Result<Var> {
    if g.shape(p) != y.shape() {
        return Err(Error::Shape {
            op: "dice_loss",
            lhs: g.shape(p).to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    let yv = g.input(y.clone());
    let py = g.mul(p, yv)?;
    let num = g.sum_rows(py);
    let p2 = g.unary(p, Unary::Square);
    let sp2 = g.sum_rows(p2);
    let m = y.cols();
    let mut sy2 = vec![DICE_EPS; m];
    for r in 0..y.rows() {
        for (s, v) in sy2.iter_mut().zip(y.row(r)) {
            *s += v * v;
        }
    }
    let sy2 = g.input(Tensor::new(vec![1, m], sy2)?);
    let den = g.add(sp2, sy2)?;
    let inv = g.unary(den, Unary::Recip);
    let ratio = g.mul(num, inv)?;
    let neg = g.scale(ratio, -2.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// Dice loss of one mask.
pub fn dice_loss(g: &mut Graph, p: Var, y: &[f64]) -> Result<Var> {
    check_len(g, "dice_loss", p, y.len())?;
    let n = y.len();
    let pc = g.reshape(p, &[n, 1])?;
    let d = dice_loss_cols(g, pc, &Tensor::new(vec![n, 1], y.to_vec())?)?;
    g.reshape(d, &[1])
}

/// Weighted cross-entropy over a probability matrix: items in rows, classes
/// in columns. `−(1/n) Σ_j w_{t_j} log p_{j,t_j}`.
pub fn cls_loss(g: &mut Graph, probs: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
    let (n, m) = (g.value(probs).rows(), g.value(probs).cols());
    if targets.len() != n || weights.len() != m || targets.iter().any(|&t| t >= m) {
        return Err(Error::Shape {
            op: "cls_loss",
            lhs: g.shape(probs).to_vec(),
            rhs: vec![targets.len(), weights.len()],
        });
    }
    let idx: Vec<usize> = targets.iter().enumerate().map(|(j, &t)| j * m + t).collect();
    let p = g.gather(probs, idx, &[n])?;
    let p = g.unary(p, Unary::Clamp(BCE_EPS, 1.0));
    let lp = g.log(p);
    let w = g.input(Tensor::new(vec![n], targets.iter().map(|&t| weights[t]).collect())?);
    let s = g.mul(lp, w)?;
    let m = g.mean_all(s);
    Ok(g.scale(m, -1.0))
}

/// Per-class presence cross-entropy: every class token is one item with the
/// two outcomes {present, absent}, `p = sigmoid(logit)`. Averaged over
/// classes, class `c` weighted by `w_c`.
pub fn presence_loss(g: &mut Graph, logits: Var, present: &[bool], weights: &[f64]) -> Result<Var> {
    let n = present.len();
    check_len(g, "presence_loss", logits, n)?;
    if weights.len() != n {
        return Err(Error::Config(format!("{} weights for {n} classes", weights.len())));
    }
    let z = g.reshape(logits, &[n])?;
    let p = g.sigmoid(z);
    let pc = g.unary(p, Unary::Clamp(BCE_EPS, 1.0 - BCE_EPS));
    let lp = g.log(pc);
    let neg = g.scale(pc, -1.0);
    let q = g.add_scalar(neg, 1.0);
    let lq = g.log(q);
    let wy: Vec<f64> = (0..n).map(|c| if present[c] { weights[c] } else { 0.0 }).collect();
    let wn: Vec<f64> = (0..n).map(|c| if present[c] { 0.0 } else { weights[c] }).collect();
    let wy = g.input(Tensor::new(vec![n], wy)?);
    let wn = g.input(Tensor::new(vec![n], wn)?);
    let a = g.mul(wy, lp)?;
    let b = g.mul(wn, lq)?;
    let s = g.add(a, b)?;
    let m = g.mean_all(s);
    Ok(g.scale(m, -1.0))
}

/// `λ_mask·L_mask + λ_dice·L_dice + λ_cls·L_cls`.
pub fn total_loss(g: &mut Graph, mask: Var, dice: Var, cls: Var, w: &LossWeights) -> Result<Var> {
    let a = g.scale(mask, w.mask);
    let b = g.scale(dice, w.dice);
    let c = g.scale(cls, w.cls);
    let ab = g.add(a, b)?;
    g.add(ab, c)
}
