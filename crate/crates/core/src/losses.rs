//! Training objective: local squared correlation, displacement smoothness,
//! soft Dice and their weighted total.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::VectorField;
use crate::graph::{Graph, Var};
use crate::networks::ForwardOut;
use crate::ops::loss::{lncc_kernel, smoothness_kernel, soft_dice_kernel};
use crate::real::Real;
use crate::volume::{SegMask, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Affine similarity.
    pub lambda1: f64,
    /// Deformable similarity.
    pub lambda2: f64,
    /// Smoothness.
    pub lambda3: f64,
    /// Affine segmentation overlap.
    pub lambda4: f64,
    /// Deformable segmentation overlap.
    pub lambda5: f64,
    /// Correlation window width (odd).
    pub window: usize,
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.3,
            lambda2: 0.7,
            lambda3: 0.001,
            lambda4: 0.01,
            lambda5: 0.1,
            window: 9,
            epsilon: 1e-5,
        }
    }
}

impl LossWeights {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
            ("lambda5", self.lambda5),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                p.push(format!("{name} must be a finite nonnegative number, got {v}"));
            }
        }
        if self.window < 3 || self.window % 2 == 0 {
            p.push(format!("window must be odd and at least 3, got {}", self.window));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            p.push(format!("epsilon must be positive, got {}", self.epsilon));
        }
        p
    }
}

/// Unweighted loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub l_a: f64,
    pub l_d: f64,
    pub l_smooth: f64,
    pub l_a_seg: f64,
    pub l_d_seg: f64,
}

/// Loss terms together with their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_a: f64,
    pub l_d: f64,
    pub l_smooth: f64,
    pub l_a_seg: f64,
    pub l_d_seg: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// The weighted sum of the stored terms, evaluated in a fixed order.
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        w.lambda1 * self.l_a + w.lambda2 * self.l_d + w.lambda3 * self.l_smooth + w.lambda4 * self.l_a_seg + w.lambda5 * self.l_d_seg
    }
}

/// Weighted total. Without masks the segmentation terms are recorded as 0.
pub fn total_loss(parts: LossParts, weights: &LossWeights, masks_available: bool) -> Result<LossBreakdown> {
    for (term, v) in [
        ("l_a", parts.l_a),
        ("l_d", parts.l_d),
        ("l_smooth", parts.l_smooth),
        ("l_a_seg", parts.l_a_seg),
        ("l_d_seg", parts.l_d_seg),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss {
                term: term.into(),
                step: None,
            });
        }
    }
    let (l_a_seg, l_d_seg) = if masks_available {
        (parts.l_a_seg, parts.l_d_seg)
    } else {
        (0.0, 0.0)
    };
    let mut b = LossBreakdown {
        l_a: parts.l_a,
        l_d: parts.l_d,
        l_smooth: parts.l_smooth,
        l_a_seg,
        l_d_seg,
        total: 0.0,
    };
    b.total = b.recombine(weights);
    Ok(b)
}

fn check_dims(a: &Volume, b: &Volume) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::DimMismatch(format!("{} vs {}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Mean local squared correlation over `n`-wide windows, in `[0, 1]`.
pub fn lncc(f: &Volume, w: &Volume, n: usize, epsilon: f64) -> Result<f64> {
    check_dims(f, w)?;
    if n % 2 == 0 {
        return Err(Error::InvalidArgument(format!("window must be odd, got {n}")));
    }
    let to64 = |v: &Volume| v.data().iter().map(|&x| x as f64).collect::<Vec<_>>();
    Ok(lncc_kernel(&to64(f), &to64(w), f.dims(), n, epsilon, false).0)
}

/// `(-lncc(f, m_a), -lncc(f, m_d))`.
pub fn similarity_losses(f: &Volume, m_a: &Volume, m_d: &Volume, weights: &LossWeights) -> Result<(f64, f64)> {
    Ok((
        -lncc(f, m_a, weights.window, weights.epsilon)?,
        -lncc(f, m_d, weights.window, weights.epsilon)?,
    ))
}

/// Mean squared forward difference of a displacement, summed over axes.
pub fn smoothness(u: &VectorField) -> f64 {
    let d: Vec<f64> = u.data().iter().map(|&x| x as f64).collect();
    smoothness_kernel(&d, u.dims(), None, 1.0)
}

/// `1 - (2 sum f w + eps) / (sum f + sum w + eps)` for a soft mask `w`.
pub fn soft_dice_loss(f_seg: &SegMask, w_seg: &Volume, epsilon: f64) -> Result<f64> {
    if f_seg.dims() != w_seg.dims() {
        return Err(Error::DimMismatch(format!("{} vs {}", f_seg.dims(), w_seg.dims())));
    }
    let f: Vec<f64> = f_seg.data().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let w: Vec<f64> = w_seg.data().iter().map(|&x| x as f64).collect();
    Ok(soft_dice_kernel(&f, &w, epsilon).0)
}

/// Loss terms recorded on a graph.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_a: Var,
    pub l_d: Var,
    pub l_smooth: Var,
    pub l_a_seg: Option<Var>,
    pub l_d_seg: Option<Var>,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown<T: Real>(&self, g: &Graph<T>, weights: &LossWeights) -> Result<LossBreakdown> {
        let item = |v: Var| g.item(v).as_f64();
        let parts = LossParts {
            l_a: item(self.l_a),
            l_d: item(self.l_d),
            l_smooth: item(self.l_smooth),
            l_a_seg: self.l_a_seg.map(item).unwrap_or(0.0),
            l_d_seg: self.l_d_seg.map(item).unwrap_or(0.0),
        };
        total_loss(parts, weights, self.l_a_seg.is_some())
    }
}

/// Builds every loss term for a forward pass. `seg` holds the fixed and
/// moving masks as `[b, 1, ...]` constants; moving masks are warped linearly.
pub fn loss_graph<T: Real>(g: &Graph<T>, weights: &LossWeights, f: Var, out: &ForwardOut, seg: Option<(Var, Var)>) -> LossVars {
    let (n, eps) = (weights.window, weights.epsilon);
    let l_a = g.scale(g.lncc(f, out.m_a, n, eps), -1.0);
    let l_d = g.scale(g.lncc(f, out.m_d, n, eps), -1.0);
    let l_smooth = g.smoothness(out.phi);
    let mut terms = vec![(l_a, weights.lambda1), (l_d, weights.lambda2), (l_smooth, weights.lambda3)];
    let (mut l_a_seg, mut l_d_seg) = (None, None);
    if let Some((f_seg, m_seg)) = seg {
        let seg_a = g.warp_linear(m_seg, out.u_affine);
        let seg_d = g.warp_linear(seg_a, out.phi);
        let a = g.soft_dice(f_seg, seg_a, eps);
        let d = g.soft_dice(f_seg, seg_d, eps);
        terms.push((a, weights.lambda4));
        terms.push((d, weights.lambda5));
        l_a_seg = Some(a);
        l_d_seg = Some(d);
    }
    let total = g.lincomb(&terms);
    LossVars {
        l_a,
        l_d,
        l_smooth,
        l_a_seg,
        l_d_seg,
        total,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weighted_total_examples() {
        let p = LossParts {
            l_a: -0.8,
            l_d: -0.9,
            l_smooth: 10.0,
            l_a_seg: 0.2,
            l_d_seg: 0.1,
        };
        let w = LossWeights::default();
        assert!((total_loss(p, &w, true).unwrap().total + 0.848).abs() < 1e-12);
        assert!((total_loss(p, &w, false).unwrap().total + 0.86).abs() < 1e-12);
        assert_eq!(total_loss(LossParts::default(), &w, true).unwrap().total, 0.0);
    }

    #[test]
    fn non_finite_term_is_named() {
        let p = LossParts {
            l_smooth: f64::NAN,
            ..Default::default()
        };
        let err = total_loss(p, &LossWeights::default(), true).unwrap_err();
        assert!(err.to_string().contains("l_smooth"), "{err}");
    }
}
