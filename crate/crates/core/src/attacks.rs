//! `ℓ2`-bounded adversarial perturbations for the linear logistic model.
//!
//! For the logistic loss the inner maximization over `‖δ‖ ≤ ε` has the
//! unique closed-form solution `δ* = −εγ w/‖w‖`, which is also the FGM
//! direction. DeepFool looks for the smallest perturbation that crosses the
//! decision boundary instead.

use serde::{Deserialize, Serialize};

use crate::linalg::{dot, norm, norm_sq};
use crate::model::{classify, grad_x_logistic, split_weights, LabeledSample};
use crate::{Error, Result};

/// Norms below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Exact,
    Fgm,
    #[serde(rename = "deepfool")]
    DeepFool,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Exact => "exact",
            AttackKind::Fgm => "fgm",
            AttackKind::DeepFool => "deepfool",
        }
    }
}

impl std::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AttackKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "exact" => Ok(Self::Exact),
            "fgm" => Ok(Self::Fgm),
            "deepfool" => Ok(Self::DeepFool),
            other => Err(format!("unknown attack `{other}` (exact|fgm|deepfool)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub epsilon: f64,
    pub deepfool_overshoot: f64,
    pub deepfool_max_iters: usize,
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self {
            kind: AttackKind::Exact,
            epsilon: 0.0,
            deepfool_overshoot: 0.02,
            deepfool_max_iters: 50,
        }
    }
}

impl AttackSpec {
    pub fn new(kind: AttackKind, epsilon: f64) -> Result<Self> {
        let spec = Self {
            kind,
            epsilon,
            ..Self::default()
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn exact(epsilon: f64) -> Result<Self> {
        Self::new(AttackKind::Exact, epsilon)
    }

    pub fn with_epsilon(self, epsilon: f64) -> Self {
        Self { epsilon, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid("eps", format!("{} must be finite and nonnegative", self.epsilon)));
        }
        if !(self.deepfool_overshoot >= 0.0 && self.deepfool_overshoot.is_finite()) {
            return Err(Error::invalid(
                "overshoot",
                format!("{} must be finite and nonnegative", self.deepfool_overshoot),
            ));
        }
        if self.deepfool_max_iters == 0 {
            return Err(Error::invalid("max_iters", "must be at least 1"));
        }
        Ok(())
    }

    /// Perturbation of norm at most `epsilon` for sample `s` at weights `w`.
    ///
    /// DeepFool only attacks samples the model currently classifies
    /// correctly, and its minimal perturbation is clipped to the budget.
    pub fn perturb(&self, w: &[f64], s: &LabeledSample) -> Result<Vec<f64>> {
        split_weights(w, s.dim())?;
        match self.kind {
            AttackKind::Exact => Ok(exact_maximizer(w, s, self.epsilon)),
            AttackKind::Fgm => fgm(w, s, self.epsilon),
            AttackKind::DeepFool => {
                if self.epsilon == 0.0 || classify(w, &s.features)? != s.label {
                    return Ok(vec![0.0; s.dim()]);
                }
                match deepfool_binary(w, &s.features, self.deepfool_max_iters, self.deepfool_overshoot) {
                    Ok(delta) => Ok(clip_to_ball(&delta, self.epsilon)),
                    Err(Error::ZeroWeights) => Ok(vec![0.0; s.dim()]),
                    Err(e) => Err(e),
                }
            }
        }
    }
}

/// Closed-form maximizer `δ* = −εγ w/‖w‖` of the logistic loss over the
/// `ε`-ball; zero when `‖w‖ < 1e−12`, where the loss does not depend on `δ`.
///
/// Only the feature coefficients enter; an intercept is never perturbed.
///
/// # Panics
///
/// If `w` matches neither `s.dim()` nor `s.dim() + 1`.
pub fn exact_maximizer(w: &[f64], s: &LabeledSample, eps: f64) -> Vec<f64> {
    let coef = &w[..s.dim()];
    assert!(w.len() <= s.dim() + 1, "weight vector longer than features + intercept");
    let n = norm(coef);
    if n < ZERO_NORM {
        return vec![0.0; s.dim()];
    }
    let c = -eps * s.label.sign() / n;
    coef.iter().map(|wi| c * wi).collect()
}

/// Fast gradient method: `ε g/‖g‖` with `g = ∇_x Q(w; x, γ)`.
///
/// The gradient is rescaled by its largest entry before normalizing so the
/// direction survives a vanishing sigmoid factor; the result is zero only
/// when `g` is exactly zero (or its norm is below `1e−12` after rescaling).
pub fn fgm(w: &[f64], s: &LabeledSample, eps: f64) -> Result<Vec<f64>> {
    let zero = vec![0.0; s.dim()];
    let mut g = grad_x_logistic(w, s, &zero)?;
    let m = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if m == 0.0 {
        return Ok(zero);
    }
    g.iter_mut().for_each(|v| *v /= m);
    let n = norm(&g);
    if n < ZERO_NORM {
        return Ok(zero);
    }
    Ok(g.iter().map(|v| eps * v / n).collect())
}

/// DeepFool for the linear binary classifier `sign(wᵀx + b)`: accumulates
/// boundary projections `−f(x)·w/‖w‖²` until the overshot perturbation
/// changes the predicted class, or `max_iters` steps were taken. The
/// returned perturbation includes the `(1 + overshoot)` factor and is not
/// clipped.
pub fn deepfool_binary(w: &[f64], x: &[f64], max_iters: usize, overshoot: f64) -> Result<Vec<f64>> {
    deepfool_binary_traced(w, x, max_iters, overshoot).map(|(d, _)| d)
}

/// [`deepfool_binary`] that also reports how many steps were taken.
pub fn deepfool_binary_traced(
    w: &[f64],
    x: &[f64],
    max_iters: usize,
    overshoot: f64,
) -> Result<(Vec<f64>, usize)> {
    let (coef, bias) = split_weights(w, x.len())?;
    let wn2 = norm_sq(coef);
    if wn2.sqrt() < ZERO_NORM {
        return Err(Error::ZeroWeights);
    }
    let original = classify(w, x)?;
    let scale = 1.0 + overshoot;
    let mut total = vec![0.0; x.len()];
    let mut iterations = 0;
    let mut current: Vec<f64> = x.to_vec();
    while iterations < max_iters {
        let f = dot(coef, &current) + bias;
        let c = -f / wn2;
        for (t, wi) in total.iter_mut().zip(coef) {
            *t += c * wi;
        }
        iterations += 1;
        let candidate: Vec<f64> = x.iter().zip(&total).map(|(xi, t)| xi + scale * t).collect();
        if classify(w, &candidate)? != original {
            break;
        }
        current = x.iter().zip(&total).map(|(xi, t)| xi + t).collect();
    }
    Ok((total.iter().map(|t| scale * t).collect(), iterations))
}

/// Projects `delta` onto the `ε`-ball.
pub fn clip_to_ball(delta: &[f64], eps: f64) -> Vec<f64> {
    let n = norm(delta);
    if n <= eps {
        delta.to_vec()
    } else {
        delta.iter().map(|d| d * eps / n).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{logistic_loss, Label};

    fn sample(x: &[f64], y: Label) -> LabeledSample {
        LabeledSample::new(x.to_vec(), y).unwrap()
    }

    #[test]
    fn exact_maximizer_substitution() {
        let s = sample(&[0.3, 0.7], Label::Pos);
        assert_eq!(exact_maximizer(&[1.0, 0.0], &s, 0.5), vec![-0.5, 0.0]);
        let s = sample(&[0.3, 0.7], Label::Neg);
        assert_eq!(exact_maximizer(&[0.0, 2.0], &s, 0.5), vec![0.0, 0.5]);
    }

    #[test]
    fn exact_maximizer_zero_weights() {
        let s = sample(&[0.3, 0.7], Label::Pos);
        let d = exact_maximizer(&[0.0, 0.0], &s, 4.0);
        assert_eq!(d, vec![0.0, 0.0]);
        assert_eq!(
            logistic_loss(&[0.0, 0.0], &s, &d).unwrap(),
            logistic_loss(&[0.0, 0.0], &s, &[0.0, 0.0]).unwrap()
        );
    }

    #[test]
    fn exact_maximizer_skips_intercept() {
        let s = sample(&[1.0], Label::Pos);
        assert_eq!(exact_maximizer(&[2.0, 100.0], &s, 0.25), vec![-0.25]);
        assert_eq!(exact_maximizer(&[0.0, 100.0], &s, 0.25), vec![0.0]);
    }

    #[test]
    fn fgm_matches_exact_and_has_budget_norm() {
        let s = sample(&[0.2, -1.0, 0.4], Label::Neg);
        let w = [0.5, -0.3, 1.1];
        let d = fgm(&w, &s, 0.7).unwrap();
        let e = exact_maximizer(&w, &s, 0.7);
        for (a, b) in d.iter().zip(&e) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((norm(&d) - 0.7).abs() < 1e-12);
        assert_eq!(fgm(&[0.0; 3], &s, 0.7).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn fgm_survives_saturated_sigmoid() {
        // σ(−margin) ≈ e^{-60}: the raw gradient norm is far below 1e−12.
        let s = sample(&[60.0, 0.0], Label::Pos);
        let d = fgm(&[1.0, 0.0], &s, 0.3).unwrap();
        assert_eq!(d, exact_maximizer(&[1.0, 0.0], &s, 0.3));
    }

    #[test]
    fn deepfool_projects_onto_boundary() {
        let d = deepfool_binary(&[1.0, 0.0], &[2.0, 0.0], 50, 0.0).unwrap();
        assert_eq!(d, vec![-2.0, 0.0]);
        assert_eq!(dot(&[1.0, 0.0], &[2.0 + d[0], d[1]]), 0.0);
    }

    #[test]
    fn deepfool_on_boundary_is_zero() {
        let d = deepfool_binary(&[1.0, 1.0], &[1.0, -1.0], 10, 0.0).unwrap();
        assert_eq!(d, vec![0.0, 0.0]);
    }

    #[test]
    fn deepfool_overshoot_scaling() {
        let w = [3.0, -4.0];
        let x = [1.0, -2.0];
        let d = deepfool_binary(&w, &x, 50, 0.02).unwrap();
        let dist = dot(&w, &x).abs() / norm(&w);
        assert!((norm(&d) - 1.02 * dist).abs() < 1e-12);
    }

    #[test]
    fn deepfool_flips_in_one_step() {
        let w = [0.7, -0.2, 1.3, 0.25];
        let x = [0.4, 1.0, -0.3];
        let (d, iters) = deepfool_binary_traced(&w, &x, 50, 0.02).unwrap();
        assert_eq!(iters, 1);
        let moved: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + b).collect();
        assert_ne!(classify(&w, &x).unwrap(), classify(&w, &moved).unwrap());
    }

    #[test]
    fn deepfool_rejects_zero_weights() {
        assert!(matches!(deepfool_binary(&[0.0, 0.0], &[1.0, 1.0], 5, 0.02), Err(Error::ZeroWeights)));
    }

    #[test]
    fn clip_examples() {
        let c = clip_to_ball(&[3.0, 4.0], 2.5);
        assert!((norm(&c) - 2.5).abs() < 1e-15);
        assert_eq!(clip_to_ball(&[0.0, 0.0], 1.0), vec![0.0, 0.0]);
        assert_eq!(clip_to_ball(&[0.3, 0.4], 1.0), vec![0.3, 0.4]);
    }

    #[test]
    fn spec_validation() {
        assert!(AttackSpec::exact(-0.1).is_err());
        let s = AttackSpec { deepfool_max_iters: 0, ..Default::default() };
        assert!(s.validate().is_err());
        assert_eq!("deepfool".parse::<AttackKind>().unwrap(), AttackKind::DeepFool);
        assert!("pgd".parse::<AttackKind>().is_err());
    }

    #[test]
    fn deepfool_perturb_respects_budget_and_errors() {
        let spec = AttackSpec::new(AttackKind::DeepFool, 0.5).unwrap();
        let w = [1.0, 0.0];
        // correctly classified, far from boundary: clipped to the budget
        let s = sample(&[3.0, 0.0], Label::Pos);
        let d = spec.perturb(&w, &s).unwrap();
        assert!((norm(&d) - 0.5).abs() < 1e-12);
        // already misclassified: left alone
        let s = sample(&[3.0, 0.0], Label::Neg);
        assert_eq!(spec.perturb(&w, &s).unwrap(), vec![0.0, 0.0]);
        // close to the boundary: minimal crossing perturbation
        let s = sample(&[0.1, 0.0], Label::Pos);
        let d = spec.perturb(&w, &s).unwrap();
        assert!((d[0] + 0.102).abs() < 1e-12);
    }
}
