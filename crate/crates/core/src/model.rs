//! Robust logistic regression.
//!
//! The per-sample loss is `Q(w; x + δ, γ) = ln(1 + exp(−γ (x + δ)ᵀw))`,
//! optionally plus `(ρ/2)‖w‖²`. Weight vectors are plain slices; a weight
//! vector one entry longer than the feature vector carries a trailing
//! intercept, which is never perturbed.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attacks::exact_maximizer;
use crate::linalg::{axpy, check_len, dot, norm, norm_sq, sub};
use crate::rng::{self, Purpose};
use crate::{Error, Result};

/// Binary class label `γ ∈ {−1, +1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "i8", try_from = "i8")]
pub enum Label {
    Neg,
    Pos,
}

impl Label {
    pub fn sign(self) -> f64 {
        match self {
            Label::Neg => -1.0,
            Label::Pos => 1.0,
        }
    }

    pub fn flipped(self) -> Label {
        match self {
            Label::Neg => Label::Pos,
            Label::Pos => Label::Neg,
        }
    }
}

impl From<Label> for i8 {
    fn from(l: Label) -> i8 {
        l.sign() as i8
    }
}

impl TryFrom<i8> for Label {
    type Error = Error;

    fn try_from(v: i8) -> Result<Label> {
        match v {
            -1 => Ok(Label::Neg),
            1 => Ok(Label::Pos),
            other => Err(Error::invalid("label", format!("{other} is not ±1"))),
        }
    }
}

/// Feature vector plus binary label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub features: Vec<f64>,
    pub label: Label,
}

impl LabeledSample {
    pub fn new(features: Vec<f64>, label: Label) -> Result<Self> {
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid("features", format!("non-finite value at index {i}")));
        }
        Ok(Self { features, label })
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }
}

/// Splits `w` into feature coefficients and an optional trailing intercept.
pub fn split_weights(w: &[f64], dim: usize) -> Result<(&[f64], f64)> {
    if w.len() == dim {
        Ok((w, 0.0))
    } else if w.len() == dim + 1 {
        Ok((&w[..dim], w[dim]))
    } else {
        Err(Error::DimensionMismatch {
            expected: dim,
            got: w.len(),
        })
    }
}

/// `max(z, 0) + ln(1 + exp(−|z|))`, finite for every finite `z`.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `γ · (wᵀ(x + δ) + b)`.
pub fn margin(w: &[f64], s: &LabeledSample, delta: &[f64]) -> Result<f64> {
    let (coef, bias) = split_weights(w, s.dim())?;
    check_len(s.dim(), delta.len())?;
    let score: f64 = coef
        .iter()
        .zip(&s.features)
        .zip(delta)
        .map(|((w, x), d)| w * (x + d))
        .sum::<f64>()
        + bias;
    Ok(s.label.sign() * score)
}

pub fn logistic_loss(w: &[f64], s: &LabeledSample, delta: &[f64]) -> Result<f64> {
    Ok(softplus(-margin(w, s, delta)?))
}

/// `∇_w Q = −γ σ(−γ(x+δ)ᵀw) (x + δ)`; the intercept entry gets `−γσ(·)`.
pub fn grad_w_logistic(w: &[f64], s: &LabeledSample, delta: &[f64]) -> Result<Vec<f64>> {
    let c = -s.label.sign() * sigmoid(-margin(w, s, delta)?);
    let mut g: Vec<f64> = s.features.iter().zip(delta).map(|(x, d)| c * (x + d)).collect();
    if w.len() == s.dim() + 1 {
        g.push(c);
    }
    Ok(g)
}

/// `∇_x Q = −γ σ(−γ(x+δ)ᵀw) w` over the feature coordinates.
pub fn grad_x_logistic(w: &[f64], s: &LabeledSample, delta: &[f64]) -> Result<Vec<f64>> {
    let c = -s.label.sign() * sigmoid(-margin(w, s, delta)?);
    let (coef, _) = split_weights(w, s.dim())?;
    Ok(coef.iter().map(|wi| c * wi).collect())
}

/// Mean worst-case loss over `data` with budget `eps` (no regularizer).
pub fn robust_empirical_risk(w: &[f64], data: &[LabeledSample], eps: f64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(eps >= 0.0) {
        return Err(Error::invalid("eps", format!("{eps} must be nonnegative")));
    }
    let mut total = 0.0;
    for s in data {
        split_weights(w, s.dim())?;
        let delta = exact_maximizer(w, s, eps);
        total += logistic_loss(w, s, &delta)?;
    }
    Ok(total / data.len() as f64)
}

/// `sign(wᵀx + b)` with ties resolved to `+1`.
pub fn classify(w: &[f64], x: &[f64]) -> Result<Label> {
    let (coef, bias) = split_weights(w, x.len())?;
    Ok(if dot(coef, x) + bias >= 0.0 { Label::Pos } else { Label::Neg })
}

/// Worst-case logistic objective: budget `eps` and ridge weight `rho`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustLogistic {
    pub eps: f64,
    pub rho: f64,
}

impl RobustLogistic {
    pub fn new(eps: f64, rho: f64) -> Result<Self> {
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(Error::invalid("eps", format!("{eps} must be finite and nonnegative")));
        }
        if !(rho >= 0.0 && rho.is_finite()) {
            return Err(Error::invalid("rho", format!("{rho} must be finite and nonnegative")));
        }
        Ok(Self { eps, rho })
    }

    /// Danskin gradient of the regularized loss at one sample: the loss
    /// gradient at the worst-case perturbation, plus `ρw`.
    pub fn sample_gradient(&self, w: &[f64], s: &LabeledSample) -> Result<Vec<f64>> {
        split_weights(w, s.dim())?;
        let delta = exact_maximizer(w, s, self.eps);
        let mut g = grad_w_logistic(w, s, &delta)?;
        axpy(self.rho, w, &mut g);
        Ok(g)
    }

    /// Mean Danskin gradient over `samples`, plus `ρw`.
    pub fn mean_gradient<'a>(
        &self,
        w: &[f64],
        samples: impl IntoIterator<Item = &'a LabeledSample>,
    ) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; w.len()];
        let mut n = 0usize;
        for s in samples {
            split_weights(w, s.dim())?;
            let delta = exact_maximizer(w, s, self.eps);
            let g = grad_w_logistic(w, s, &delta)?;
            axpy(1.0, &g, &mut acc);
            n += 1;
        }
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let inv = 1.0 / n as f64;
        acc.iter_mut().for_each(|v| *v *= inv);
        axpy(self.rho, w, &mut acc);
        Ok(acc)
    }

    pub fn risk(&self, w: &[f64], data: &[LabeledSample]) -> Result<f64> {
        Ok(robust_empirical_risk(w, data, self.eps)? + 0.5 * self.rho * norm_sq(w))
    }

    pub fn gradient(&self, w: &[f64], data: &[LabeledSample]) -> Result<Vec<f64>> {
        self.mean_gradient(w, data)
    }
}

/// Monte-Carlo estimates of the constants in the convergence assumptions.
///
/// Every field is a lower bound on the corresponding supremum, observed
/// over probes drawn in a ball around the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalConstants {
    pub strong_convexity_nu: f64,
    /// Maximum of `lipschitz_parts`.
    pub lipschitz_l: f64,
    /// Observed ratios for: ∇_w vs w, ∇_w vs x, ∇_w vs y, ∇_x vs w, ∇_x vs x.
    pub lipschitz_parts: [f64; 5],
    pub disagreement_c2: f64,
    pub noise_beta2: f64,
    pub noise_sigma2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub probes: usize,
    pub seed: u64,
    /// Radius of the ball `w` is drawn from.
    pub radius: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            probes: 1000,
            seed: 0,
            radius: 3.0,
        }
    }
}

pub(crate) fn gaussian_vec(rng: &mut impl rand::Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Uniform draw from the `n`-ball of radius `r`.
pub(crate) fn ball_vec(rng: &mut impl rand::Rng, n: usize, r: f64) -> Vec<f64> {
    let mut v = gaussian_vec(rng, n);
    let nv = norm(&v);
    let scale = if nv > 0.0 { r * rng.random::<f64>().powf(1.0 / n as f64) / nv } else { 0.0 };
    v.iter_mut().for_each(|x| *x *= scale);
    v
}

/// Least-squares line `y = slope·x + intercept`, with `R²`.
pub(crate) fn fit_affine(points: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return (0.0, my, 0.0);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    (slope, intercept, r2)
}

/// Nonnegative least squares for the same two-parameter line.
pub(crate) fn fit_affine_nonneg(points: &[(f64, f64)]) -> (f64, f64) {
    let (slope, intercept, _) = fit_affine(points);
    if slope >= 0.0 && intercept >= 0.0 {
        return (slope, intercept);
    }
    let n = points.len() as f64;
    // Best fit on each boundary face, keep the lower residual.
    let c_only = (points.iter().map(|p| p.1).sum::<f64>() / n).max(0.0);
    let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
    let s_only = if sxx > 0.0 { (points.iter().map(|p| p.0 * p.1).sum::<f64>() / sxx).max(0.0) } else { 0.0 };
    let rss = |s: f64, c: f64| points.iter().map(|p| (p.1 - s * p.0 - c).powi(2)).sum::<f64>();
    if rss(0.0, c_only) <= rss(s_only, 0.0) {
        (0.0, c_only)
    } else {
        (s_only, 0.0)
    }
}

/// Exact conditional second moment `E‖s‖²` of single-sample gradient noise
/// at `w`, with samples drawn uniformly from `data`.
pub fn noise_second_moment(objective: &RobustLogistic, w: &[f64], data: &[LabeledSample]) -> Result<f64> {
    let mean = objective.mean_gradient(w, data)?;
    let mut total = 0.0;
    for s in data {
        let g = objective.sample_gradient(w, s)?;
        total += g.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total / data.len() as f64)
}

/// Estimates ν, L = max{L1..L5}, C² and the affine noise-moment constants
/// β², σ² of the regularized per-sample loss.
///
/// - ν̂ is the minimum of `2·(Q(w2) − Q(w1) − ∇Q(w1)ᵀΔ)/‖Δ‖²` over probe
///   pairs; half of the pairs move orthogonally to the sample, where the
///   logistic part is flat, so ν̂ approaches `ρ`.
/// - Each Lipschitz part is the largest observed difference ratio.
/// - Ĉ² is the largest squared gap between mean robust gradients of two
///   seeded halves of `data`, acting as two agents.
/// - β̂², σ̂² come from a nonnegative affine fit of `E‖s‖²` against
///   `‖reference − w‖²`.
pub fn estimate_constants(
    data: &[LabeledSample],
    objective: &RobustLogistic,
    reference: &[f64],
    cfg: &ProbeConfig,
) -> Result<EmpiricalConstants> {
    let first = data.first().ok_or(Error::EmptyDataset)?;
    let dim = first.dim();
    let wdim = reference.len();
    split_weights(reference, dim)?;
    if cfg.probes < 100 {
        return Err(Error::invalid("probes", format!("{} < 100", cfg.probes)));
    }
    let eps = objective.eps;
    let rho = objective.rho;
    let mut rng = rng::stream(cfg.seed, Purpose::Probe, 0);
    let pick = |rng: &mut rng::Rng| &data[rng.random_range(0..data.len())];

    let loss = |w: &[f64], s: &LabeledSample, d: &[f64]| -> Result<f64> {
        Ok(logistic_loss(w, s, d)? + 0.5 * rho * norm_sq(w))
    };
    let grad_w = |w: &[f64], s: &LabeledSample, d: &[f64]| -> Result<Vec<f64>> {
        let mut g = grad_w_logistic(w, s, d)?;
        axpy(rho, w, &mut g);
        Ok(g)
    };

    let mut nu = f64::INFINITY;
    let mut parts = [0.0f64; 5];
    let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
    for p in 0..cfg.probes {
        let s = pick(&mut rng);
        let delta = ball_vec(&mut rng, dim, eps);
        let w1 = ball_vec(&mut rng, wdim, cfg.radius);
        // Alternate between nearby and distant pairs to reach both the local
        // curvature and the global ratios.
        let step = if p % 2 == 0 { 1e-3 } else { cfg.radius };
        let mut dir = gaussian_vec(&mut rng, wdim);
        if p % 4 < 2 {
            // Orthogonal to the (perturbed) input, intercept included.
            let mut z: Vec<f64> = s.features.iter().zip(&delta).map(|(x, d)| x + d).collect();
            if wdim == dim + 1 {
                z.push(1.0);
            }
            let zz = norm_sq(&z);
            if zz > 0.0 {
                let c = dot(&dir, &z) / zz;
                axpy(-c, &z, &mut dir);
            }
        }
        let nd = norm(&dir);
        if nd == 0.0 {
            continue;
        }
        dir.iter_mut().for_each(|v| *v *= step / nd);
        let w2: Vec<f64> = w1.iter().zip(&dir).map(|(a, b)| a + b).collect();
        let dw = norm(&dir);

        let g1 = grad_w(&w1, s, &delta)?;
        let bregman = loss(&w2, s, &delta)? - loss(&w1, s, &delta)? - dot(&g1, &dir);
        nu = nu.min(2.0 * bregman / (dw * dw));

        let g2 = grad_w(&w2, s, &delta)?;
        parts[0] = parts[0].max(ratio(norm(&sub(&g2, &g1)), dw));
        let gx1 = grad_x_logistic(&w1, s, &delta)?;
        let gx2 = grad_x_logistic(&w2, s, &delta)?;
        parts[3] = parts[3].max(ratio(norm(&sub(&gx2, &gx1)), dw));

        // Input pairs around the same sample.
        let xstep = if p % 2 == 0 { 1e-3 } else { 1.0 };
        let mut dx = gaussian_vec(&mut rng, dim);
        let ndx = norm(&dx);
        dx.iter_mut().for_each(|v| *v *= xstep / ndx);
        let s2 = LabeledSample {
            features: s.features.iter().zip(&dx).map(|(a, b)| a + b).collect(),
            label: s.label,
        };
        let ga = grad_w(&w1, s, &delta)?;
        let gb = grad_w(&w1, &s2, &delta)?;
        parts[1] = parts[1].max(ratio(norm(&sub(&gb, &ga)), xstep));
        let gxa = grad_x_logistic(&w1, s, &delta)?;
        let gxb = grad_x_logistic(&w1, &s2, &delta)?;
        parts[4] = parts[4].max(ratio(norm(&sub(&gxb, &gxa)), xstep));

        let flipped = LabeledSample {
            features: s.features.clone(),
            label: s.label.flipped(),
        };
        let gf = grad_w(&w1, &flipped, &delta)?;
        parts[2] = parts[2].max(norm(&sub(&gf, &ga)) / 2.0);
    }
    let nu = nu.max(0.0);

    // Two seeded halves of the data play the two agents.
    let mut order: Vec<usize> = (0..data.len()).collect();
    {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
    }
    let (left, right) = order.split_at(data.len() / 2);
    let mut c2: f64 = 0.0;
    if !left.is_empty() && !right.is_empty() {
        for _ in 0..cfg.probes.min(200) {
            let w = ball_vec(&mut rng, wdim, cfg.radius);
            let ga = objective.mean_gradient(&w, left.iter().map(|&i| &data[i]))?;
            let gb = objective.mean_gradient(&w, right.iter().map(|&i| &data[i]))?;
            c2 = c2.max(norm_sq(&sub(&ga, &gb)));
        }
    }

    let mut points = Vec::new();
    let levels = 8;
    for i in 0..levels {
        let r = cfg.radius * i as f64 / (levels - 1) as f64;
        let mut dir = gaussian_vec(&mut rng, wdim);
        let nd = norm(&dir);
        dir.iter_mut().for_each(|v| *v *= r / nd);
        let w: Vec<f64> = reference.iter().zip(&dir).map(|(a, b)| a + b).collect();
        points.push((r * r, noise_second_moment(objective, &w, data)?));
    }
    let (beta2, sigma2) = fit_affine_nonneg(&points);

    Ok(EmpiricalConstants {
        strong_convexity_nu: nu,
        lipschitz_l: parts.iter().copied().fold(0.0, f64::max),
        lipschitz_parts: parts,
        disagreement_c2: c2,
        noise_beta2: beta2,
        noise_sigma2: sigma2,
    })
}
