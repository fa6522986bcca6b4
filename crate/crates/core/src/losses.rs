//! Map-level losses and their analytic gradients.
//!
//! Every `*_grad` function returns the loss value together with the gradient
//! with respect to its first (prediction) argument. Maps are `f64`; the
//! network converts at the boundary.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Map = Array2<f64>;
pub type MapPair = [Map; 2];

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;
/// Smoothing term of the soft IoU ratio.
pub const IOU_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub lambda_c: f64,
    pub lambda_p: f64,
    pub lambda_d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.8,
            lambda_c: 0.5,
            lambda_p: 0.5,
            lambda_d: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        for (name, v) in [("lambda_c", self.lambda_c), ("lambda_p", self.lambda_p), ("lambda_d", self.lambda_d)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be a finite value >= 0")));
            }
        }
        Ok(())
    }
}

/// Denominator used by the overlap loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IouMode {
    /// `1 - (I + eps) / (|G| + |P| - I + eps)`
    #[default]
    Union,
    /// `1 - (2I + eps) / (|G| + |P| + eps)`
    Dice,
}

fn check_dims(what: &str, maps: &[&Map]) -> Result<()> {
    let first = maps[0].dim();
    if let Some(m) = maps.iter().find(|m| m.dim() != first) {
        return Err(Error::Dimension(format!("{what}: {:?} vs {:?}", first, m.dim())));
    }
    Ok(())
}

fn check_pairs(what: &str, a: &MapPair, b: &MapPair) -> Result<()> {
    check_dims(what, &[&a[0], &a[1], &b[0], &b[1]])
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Per-channel binary cross-entropy averaged over all `2mn` entries.
pub fn ce_loss(p: &MapPair, g: &MapPair) -> Result<f64> {
    ce_loss_grad(p, g).map(|(v, _)| v)
}

pub fn ce_loss_grad(p: &MapPair, g: &MapPair) -> Result<(f64, MapPair)> {
    check_pairs("ce_loss", p, g)?;
    let scale = 1.0 / (2 * p[0].len()) as f64;
    let mut total = 0.0;
    let grads = std::array::from_fn(|l| {
        let mut grad = Map::zeros(p[l].dim());
        Zip::from(&mut grad).and(&p[l]).and(&g[l]).for_each(|d, &pv, &gv| {
            let pc = clamp_prob(pv);
            total -= gv * pc.ln() + (1.0 - gv) * (1.0 - pc).ln();
            // The clamp is flat outside its range.
            if pv > PROB_CLAMP && pv < 1.0 - PROB_CLAMP {
                *d = scale * ((1.0 - gv) / (1.0 - pv) - gv / pv);
            }
        });
        grad
    });
    Ok((total * scale, grads))
}

/// Gradient of [`ce_loss`] with respect to the logits `z` of `p = sigmoid(z)`,
/// `(p - g) / 2mn`. Equal to the chain rule through [`ce_loss_grad`] wherever
/// the clamp is inactive, and nonzero where it is not.
pub fn ce_logit_grad(p: &MapPair, g: &MapPair) -> Result<MapPair> {
    check_pairs("ce_logit_grad", p, g)?;
    let scale = 1.0 / (2 * p[0].len()) as f64;
    Ok(std::array::from_fn(|l| (&p[l] - &g[l]) * scale))
}

pub fn iou_loss(p: &MapPair, g: &MapPair, mode: IouMode) -> Result<f64> {
    iou_loss_grad(p, g, mode).map(|(v, _)| v)
}

/// Soft IoU complement averaged over the two classes. A class whose target
/// and prediction are both empty contributes 0.
pub fn iou_loss_grad(p: &MapPair, g: &MapPair, mode: IouMode) -> Result<(f64, MapPair)> {
    check_pairs("iou_loss", p, g)?;
    let mut total = 0.0;
    let grads = std::array::from_fn(|l| {
        let inter: f64 = Zip::from(&p[l]).and(&g[l]).fold(0.0, |acc, &pv, &gv| acc + pv * gv);
        let sum = p[l].sum() + g[l].sum();
        let (num, den, dnum_dg, dden) = match mode {
            // d num/dP = G, d den/dP = 1 - G
            IouMode::Union => (inter + IOU_EPS, sum - inter + IOU_EPS, 1.0, None),
            // d num/dP = 2G, d den/dP = 1
            IouMode::Dice => (2.0 * inter + IOU_EPS, sum + IOU_EPS, 2.0, Some(1.0)),
        };
        total += 0.5 * (1.0 - num / den);
        g[l].mapv(|gv| {
            let dnum = dnum_dg * gv;
            let dden = dden.unwrap_or(1.0 - gv);
            -0.5 * (dnum * den - num * dden) / (den * den)
        })
    });
    Ok((total, grads))
}

/// `alpha * ce + (1 - alpha) * iou`, returned with the two components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MainLoss {
    pub total: f64,
    pub ce: f64,
    pub iou: f64,
}

pub fn main_loss(p: &MapPair, g: &MapPair, alpha: f64, mode: IouMode) -> Result<MainLoss> {
    main_loss_grad(p, g, alpha, mode).map(|(v, _)| v)
}

pub fn main_loss_grad(p: &MapPair, g: &MapPair, alpha: f64, mode: IouMode) -> Result<(MainLoss, MapPair)> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    let (ce, dce) = ce_loss_grad(p, g)?;
    let (iou, diou) = iou_loss_grad(p, g, mode)?;
    let grad = std::array::from_fn(|l| &dce[l] * alpha + &diou[l] * (1.0 - alpha));
    Ok((
        MainLoss {
            total: combine_main(ce, iou, alpha),
            ce,
            iou,
        },
        grad,
    ))
}

pub fn combine_main(ce: f64, iou: f64, alpha: f64) -> f64 {
    alpha * ce + (1.0 - alpha) * iou
}

/// Mean absolute difference over the `2mn` entries of two map pairs.
pub fn l1_map_loss(a: &MapPair, b: &MapPair) -> Result<f64> {
    l1_map_loss_grad(a, b).map(|(v, _)| v)
}

/// The gradient with respect to `b` is the negation of the returned one.
pub fn l1_map_loss_grad(a: &MapPair, b: &MapPair) -> Result<(f64, MapPair)> {
    check_pairs("l1_map_loss", a, b)?;
    let scale = 1.0 / (2 * a[0].len()) as f64;
    let mut total = 0.0;
    let grads = std::array::from_fn(|l| {
        Zip::from(&a[l]).and(&b[l]).map_collect(|&x, &y| {
            total += (x - y).abs();
            scale * sign(x - y)
        })
    });
    Ok((total * scale, grads))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Sum of absolute differences between the prior-head output and the prior
/// mask; divided by `mn` when `normalize` is set.
pub fn prior_loss(p_hat: &Map, g_hat: &Map, normalize: bool) -> Result<f64> {
    prior_loss_grad(p_hat, g_hat, normalize).map(|(v, _)| v)
}

pub fn prior_loss_grad(p_hat: &Map, g_hat: &Map, normalize: bool) -> Result<(f64, Map)> {
    check_dims("prior_loss", &[p_hat, g_hat])?;
    let scale = if normalize { 1.0 / p_hat.len() as f64 } else { 1.0 };
    let mut total = 0.0;
    let grad = Zip::from(p_hat).and(g_hat).map_collect(|&p, &g| {
        total += (p - g).abs();
        scale * sign(p - g)
    });
    Ok((total * scale, grad))
}

/// `l_m + lambda_c * l_c + lambda_p * l_p + lambda_d * l_d`.
pub fn total_loss(l_m: f64, l_c: f64, l_p: f64, l_d: f64, w: &LossWeights) -> Result<f64> {
    let parts = [l_m, l_c, l_p, l_d];
    if let Some(bad) = parts.iter().find(|v| !v.is_finite()) {
        return Err(Error::Config(format!("non-finite loss component {bad}")));
    }
    Ok(l_m + w.lambda_c * l_c + w.lambda_p * l_p + w.lambda_d * l_d)
}
