//! Oracles and empirical checks: the centralized robust minimizer, MSD
//! curves, the affine-Lipschitz and gradient-noise suites, and robustness
//! sweeps.

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackKind, AttackSpec};
use crate::diffusion::{adversarial_error, RoundTrace};
use crate::linalg::{axpy, dist_sq, dot, norm, norm_sq, sub};
use crate::model::{ball_vec, fit_affine, gaussian_vec, split_weights, EmpiricalConstants, LabeledSample, RobustLogistic};
use crate::rng::{self, Purpose};
use crate::{Error, Result};

/// Inflation applied to estimated constants before checking inequalities.
pub const CONSTANT_INFLATION: f64 = 1.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iters: 200_000,
        }
    }
}

/// Full-batch gradient descent with Armijo backtracking on the regularized
/// robust risk, started from zero. Stops once the Danskin gradient norm
/// drops below `opts.tol`.
pub fn solve_robust_minimizer(
    data: &[LabeledSample],
    objective: &RobustLogistic,
    wdim: usize,
    opts: &SolverOptions,
) -> Result<Vec<f64>> {
    let first = data.first().ok_or(Error::EmptyDataset)?;
    split_weights(&vec![0.0; wdim], first.dim())?;
    if !(opts.tol > 0.0) {
        return Err(Error::invalid("tol", "must be positive"));
    }
    let mut w = vec![0.0; wdim];
    let mut f = objective.risk(&w, data)?;
    let mut g = objective.gradient(&w, data)?;
    let mut t = 1.0;
    for _ in 0..opts.max_iters {
        let gn2 = norm_sq(&g);
        if gn2.sqrt() < opts.tol {
            return Ok(w);
        }
        t *= 2.0;
        loop {
            let mut cand = w.clone();
            axpy(-t, &g, &mut cand);
            let fc = objective.risk(&cand, data)?;
            if fc <= f - 0.5 * t * gn2 {
                w = cand;
                f = fc;
                break;
            }
            t *= 0.5;
            if t < 1e-20 {
                // No decrease representable at this precision.
                return Err(Error::SolverNotConverged {
                    iterations: opts.max_iters,
                    grad_norm: gn2.sqrt(),
                });
            }
        }
        g = objective.gradient(&w, data)?;
    }
    let grad_norm = norm(&g);
    if grad_norm < opts.tol {
        Ok(w)
    } else {
        Err(Error::SolverNotConverged {
            iterations: opts.max_iters,
            grad_norm,
        })
    }
}

/// `‖w* − w_k‖²` per agent.
pub fn msd_per_agent(weights: &crate::linalg::Matrix, wstar: &[f64]) -> Vec<f64> {
    weights.iter_rows().map(|w| dist_sq(w, wstar)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub mu: f64,
    /// Mean of `per_iteration_msd` over the tail window.
    pub steady_state_msd: f64,
    /// Standard deviation of `per_iteration_msd` over the tail window.
    pub tail_std: f64,
    /// Number of logged rows in the tail window.
    pub tail_window: usize,
    pub seeds: Vec<u64>,
    pub iterations: Vec<u64>,
    /// Network MSD averaged over agents and seeds, one entry per logged row.
    pub per_iteration_msd: Vec<f64>,
}

/// Averages the MSD of several seeded runs and takes the mean over the last
/// `tail_fraction` of logged rows.
pub fn msd_curve(mu: f64, runs: &[(u64, Vec<RoundTrace>)], tail_fraction: f64) -> Result<ConvergenceReport> {
    if runs.len() < 3 {
        return Err(Error::invalid("seeds", format!("{} runs, need at least 3", runs.len())));
    }
    if !(tail_fraction > 0.0 && tail_fraction <= 1.0) {
        return Err(Error::invalid("tail_fraction", format!("{tail_fraction} not in (0, 1]")));
    }
    let rows = runs[0].1.len();
    if rows == 0 {
        return Err(Error::invalid("traces", "empty run"));
    }
    let iterations: Vec<u64> = runs[0].1.iter().map(|t| t.iteration).collect();
    let mut curve = vec![0.0; rows];
    for (_, traces) in runs {
        if traces.len() != rows || traces.iter().zip(&iterations).any(|(t, i)| t.iteration != *i) {
            return Err(Error::invalid("traces", "runs are logged at different iterations"));
        }
        for (c, t) in curve.iter_mut().zip(traces) {
            *c += t.msd().ok_or(Error::MissingOracle)?;
        }
    }
    let inv = 1.0 / runs.len() as f64;
    curve.iter_mut().for_each(|c| *c *= inv);
    let tail_window = ((rows as f64) * tail_fraction).round().max(1.0) as usize;
    if tail_window > rows {
        return Err(Error::invalid("tail_window", "larger than the run"));
    }
    let tail = &curve[rows - tail_window..];
    let mean = tail.iter().sum::<f64>() / tail_window as f64;
    let var = tail.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / tail_window as f64;
    Ok(ConvergenceReport {
        mu,
        steady_state_msd: mean,
        tail_std: var.sqrt(),
        tail_window,
        seeds: runs.iter().map(|(s, _)| *s).collect(),
        iterations,
        per_iteration_msd: curve,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzReport {
    pub pairs: usize,
    pub violations: usize,
    /// Largest `lhs / rhs` observed.
    pub max_ratio: f64,
    /// The inflated constant used on the right-hand side.
    pub l_hat: f64,
}

/// Checks `‖∇J(w2) − ∇J(w1)‖² ≤ 2L²‖w2 − w1‖² + 8L²ε²` on random pairs drawn
/// in the ball of radius `radius`, with `L = 1.05·L̂`.
pub fn verify_affine_lipschitz(
    data: &[LabeledSample],
    objective: &RobustLogistic,
    constants: &EmpiricalConstants,
    wdim: usize,
    pairs: usize,
    seed: u64,
    radius: f64,
) -> Result<LipschitzReport> {
    if pairs < 100 {
        return Err(Error::invalid("pairs", format!("{pairs} < 100")));
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let l = CONSTANT_INFLATION * constants.lipschitz_l;
    let eps = objective.eps;
    let mut rng = rng::stream(seed, Purpose::Probe, 1);
    let mut violations = 0;
    let mut max_ratio: f64 = 0.0;
    for p in 0..pairs {
        let w1 = ball_vec(&mut rng, wdim, radius);
        // Mix distant pairs with close ones, where the offset term dominates.
        let w2 = if p % 2 == 0 {
            ball_vec(&mut rng, wdim, radius)
        } else {
            let mut d = gaussian_vec(&mut rng, wdim);
            let n = norm(&d);
            d.iter_mut().for_each(|v| *v *= 1e-2 / n);
            w1.iter().zip(&d).map(|(a, b)| a + b).collect()
        };
        let lhs = norm_sq(&sub(&objective.gradient(&w2, data)?, &objective.gradient(&w1, data)?));
        let rhs = 2.0 * l * l * dist_sq(&w1, &w2) + 8.0 * l * l * eps * eps;
        if lhs > rhs {
            violations += 1;
        }
        if rhs > 0.0 {
            max_ratio = max_ratio.max(lhs / rhs);
        } else if lhs > 0.0 {
            max_ratio = f64::INFINITY;
        }
    }
    Ok(LipschitzReport {
        pairs,
        violations,
        max_ratio,
        l_hat: l,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseOptions {
    pub num_agents: usize,
    /// Stochastic gradients drawn per agent and probe point.
    pub draws: usize,
    /// `None`: every draw is the full-data gradient.
    pub batch: Option<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    /// Mean `|z|` per agent over all probes and coordinates.
    pub mean_z_scores: Vec<f64>,
    /// Largest `|z|` seen.
    pub max_abs_z: f64,
    /// Fraction of (agent, probe, coordinate) cells with `|z| < 4`.
    pub fraction_within: f64,
    /// `(‖w* − w‖², E‖s‖²)` per probe, averaged over agents.
    pub second_moments: Vec<(f64, f64)>,
    pub beta2_hat: f64,
    pub sigma2_hat: f64,
    pub fit_r2: f64,
    /// Every noise sample was exactly zero.
    pub exact_zero: bool,
}

/// Monte-Carlo check that the gradient noise `s = g − ∇J(w)` is centered,
/// and that its second moment grows at most affinely in `‖w* − w‖²`.
///
/// Each agent draws `draws` uniform samples (with replacement, from its own
/// stream) at every probe point. The fit is ordinary least squares.
pub fn verify_gradient_noise(
    data: &[LabeledSample],
    objective: &RobustLogistic,
    probes: &[Vec<f64>],
    wstar: &[f64],
    opts: &NoiseOptions,
) -> Result<NoiseReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if probes.is_empty() || opts.num_agents == 0 || opts.draws < 2 {
        return Err(Error::invalid("noise", "need probes, agents and at least two draws"));
    }
    let wdim = wstar.len();
    let mut z_cells = 0usize;
    let mut within = 0usize;
    let mut max_abs_z: f64 = 0.0;
    let mut mean_z = vec![0.0; opts.num_agents];
    let mut moments = vec![0.0; probes.len()];
    let mut exact_zero = true;
    let mut streams = crate::data::partition_streams(data.len(), opts.num_agents, crate::data::StreamMode::IidShuffle, opts.seed)?;
    for (p, w) in probes.iter().enumerate() {
        crate::linalg::check_len(wdim, w.len())?;
        let full = objective.gradient(w, data)?;
        for (k, stream) in streams.iter_mut().enumerate() {
            let mut sum = vec![0.0; wdim];
            let mut sum_sq = vec![0.0; wdim];
            let mut m2 = 0.0;
            for _ in 0..opts.draws {
                let g = match opts.batch {
                    None => objective.gradient(w, data)?,
                    Some(b) => {
                        let idx = stream.next_batch(b);
                        objective.mean_gradient(w, idx.iter().map(|&i| &data[i]))?
                    }
                };
                let s = sub(&g, &full);
                if s.iter().any(|v| *v != 0.0) {
                    exact_zero = false;
                }
                m2 += norm_sq(&s);
                for j in 0..wdim {
                    sum[j] += s[j];
                    sum_sq[j] += s[j] * s[j];
                }
            }
            let n = opts.draws as f64;
            moments[p] += m2 / n;
            for j in 0..wdim {
                let mean = sum[j] / n;
                let var = ((sum_sq[j] - n * mean * mean) / (n - 1.0)).max(0.0);
                let z = if var > 0.0 { mean / (var / n).sqrt() } else { 0.0 };
                mean_z[k] += z.abs();
                max_abs_z = max_abs_z.max(z.abs());
                z_cells += 1;
                if z.abs() < 4.0 {
                    within += 1;
                }
            }
        }
    }
    let per_agent_cells = (probes.len() * wdim) as f64;
    mean_z.iter_mut().for_each(|z| *z /= per_agent_cells);
    let second_moments: Vec<(f64, f64)> = probes
        .iter()
        .zip(&moments)
        .map(|(w, m)| (dist_sq(w, wstar), m / opts.num_agents as f64))
        .collect();
    let (beta2_hat, sigma2_hat, fit_r2) = if exact_zero {
        (0.0, 0.0, 1.0)
    } else {
        fit_affine(&second_moments)
    };
    Ok(NoiseReport {
        mean_z_scores: mean_z,
        max_abs_z,
        fraction_within: within as f64 / z_cells as f64,
        second_moments,
        beta2_hat,
        sigma2_hat,
        fit_r2,
        exact_zero,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub model: String,
    pub attack: AttackKind,
    pub eps: f64,
    pub error: f64,
}

/// One curve of a sweep: a named model attacked by one kind of attack.
#[derive(Debug, Clone, Copy)]
pub struct Curve<'a> {
    pub model: &'a str,
    pub weights: &'a [f64],
    pub attack: AttackSpec,
}

/// Error of every curve at every budget in `eps_grid`. DeepFool
/// perturbations are clipped to the budget.
pub fn robustness_sweep(curves: &[Curve<'_>], test: &[LabeledSample], eps_grid: &[f64]) -> Result<Vec<SweepRow>> {
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if eps_grid.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
        return Err(Error::invalid("eps_grid", "budgets must be finite and nonnegative"));
    }
    if eps_grid.windows(2).any(|p| p[1] < p[0]) {
        return Err(Error::invalid("eps_grid", "budgets must be ascending"));
    }
    let mut rows = Vec::with_capacity(curves.len() * eps_grid.len());
    for c in curves {
        for &eps in eps_grid {
            rows.push(SweepRow {
                model: c.model.to_string(),
                attack: c.attack.kind,
                eps,
                error: adversarial_error(c.weights, test, &c.attack.with_epsilon(eps))?,
            });
        }
    }
    Ok(rows)
}

/// Error under the exact attack from margins alone: the worst-case score
/// moves by `ε‖w‖` against the label.
pub fn exact_attack_error_closed_form(w: &[f64], test: &[LabeledSample], eps: f64) -> Result<f64> {
    let first = test.first().ok_or(Error::EmptyDataset)?;
    let (coef, bias) = split_weights(w, first.dim())?;
    let shift = if norm(coef) < crate::attacks::ZERO_NORM { 0.0 } else { eps * norm(coef) };
    let mut wrong = 0usize;
    for s in test {
        let score = dot(coef, &s.features) + bias - s.label.sign() * shift;
        let predicted_pos = score >= 0.0;
        if predicted_pos != (s.label.sign() > 0.0) {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / test.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::diffusion::RoundTrace;
    use crate::model::Label;

    fn trace(iteration: u64, msd: Vec<f64>) -> RoundTrace {
        RoundTrace {
            iteration,
            per_agent_loss: vec![0.0; msd.len()],
            msd_per_agent: Some(msd),
            disagreement: 0.0,
            adv_error: None,
            grad_noise_sample: None,
        }
    }

    #[test]
    fn symmetric_pair_minimizer() {
        let data = vec![
            LabeledSample::new(vec![1.0, 0.0], Label::Pos).unwrap(),
            LabeledSample::new(vec![-1.0, 0.0], Label::Neg).unwrap(),
        ];
        let obj = RobustLogistic::new(0.2, 0.1).unwrap();
        let w = solve_robust_minimizer(&data, &obj, 2, &SolverOptions::default()).unwrap();
        assert!(w[0] > 0.0);
        assert_eq!(w[1], 0.0);
        assert!(norm(&obj.gradient(&w, &data).unwrap()) < 1e-8);
    }

    #[test]
    fn solver_reports_failure() {
        let data = generate_synthetic(&SyntheticSpec { n_train: 50, n_test: 1, ..Default::default() }).unwrap().0;
        let obj = RobustLogistic::new(0.1, 0.1).unwrap();
        let err = solve_robust_minimizer(&data, &obj, 10, &SolverOptions { tol: 1e-8, max_iters: 2 }).unwrap_err();
        assert!(matches!(err, Error::SolverNotConverged { iterations: 2, .. }), "{err}");
    }

    #[test]
    fn msd_curve_constant_offsets() {
        let runs: Vec<(u64, Vec<RoundTrace>)> = (0..3)
            .map(|s| (s, (1..=10).map(|i| trace(i, vec![0.25, 0.25])).collect()))
            .collect();
        let r = msd_curve(0.01, &runs, 0.2).unwrap();
        assert_eq!(r.tail_window, 2);
        assert_eq!(r.steady_state_msd, 0.25);
        assert_eq!(r.tail_std, 0.0);
        assert_eq!(r.seeds, vec![0, 1, 2]);

        let zero: Vec<(u64, Vec<RoundTrace>)> = (0..3).map(|s| (s, vec![trace(1, vec![0.0])])).collect();
        assert_eq!(msd_curve(0.1, &zero, 0.2).unwrap().steady_state_msd, 0.0);

        let mut missing = runs.clone();
        missing[1].1[3].msd_per_agent = None;
        assert!(matches!(msd_curve(0.01, &missing, 0.2), Err(Error::MissingOracle)));
        assert!(msd_curve(0.01, &runs[..2], 0.2).is_err());
    }

    #[test]
    fn closed_form_matches_perturb_path() {
        let (_, test) = generate_synthetic(&SyntheticSpec { n_train: 10, n_test: 500, ..Default::default() }).unwrap();
        let w: Vec<f64> = (0..10).map(|i| 0.3 - 0.05 * i as f64).collect();
        let mut prev = 0.0;
        for eps in [0.0, 0.1, 0.3, 0.6, 1.0, 2.0] {
            let a = adversarial_error(&w, &test, &AttackSpec::exact(eps).unwrap()).unwrap();
            let b = exact_attack_error_closed_form(&w, &test, eps).unwrap();
            assert_eq!(a, b, "eps {eps}");
            assert!(a >= prev);
            prev = a;
        }
    }

    #[test]
    fn sweep_at_zero_budget_is_clean_error() {
        let (_, test) = generate_synthetic(&SyntheticSpec { n_train: 10, n_test: 300, ..Default::default() }).unwrap();
        let w = vec![0.2; 10];
        let curves: Vec<Curve> = [AttackKind::Exact, AttackKind::Fgm, AttackKind::DeepFool]
            .iter()
            .map(|&k| Curve { model: "m", weights: &w, attack: AttackSpec::new(k, 0.0).unwrap() })
            .collect();
        let rows = robustness_sweep(&curves, &test, &[0.0]).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.error == rows[0].error));
        assert!(robustness_sweep(&curves, &test, &[0.5, 0.1]).is_err());
        assert!(robustness_sweep(&curves, &[], &[0.1]).is_err());
    }

    #[test]
    fn full_batch_noise_is_exactly_zero() {
        let data = generate_synthetic(&SyntheticSpec { n_train: 40, n_test: 1, ..Default::default() }).unwrap().0;
        let obj = RobustLogistic::new(0.2, 0.1).unwrap();
        let probes = vec![vec![0.1; 10], vec![-0.3; 10]];
        let opts = NoiseOptions { num_agents: 2, draws: 5, batch: None, seed: 0 };
        let r = verify_gradient_noise(&data, &obj, &probes, &[0.0; 10], &opts).unwrap();
        assert!(r.exact_zero);
        assert!(r.mean_z_scores.iter().all(|z| *z == 0.0));
        assert_eq!(r.fraction_within, 1.0);
    }

    #[test]
    fn lipschitz_degenerate_cases() {
        let data = generate_synthetic(&SyntheticSpec { n_train: 60, n_test: 1, ..Default::default() }).unwrap().0;
        let obj = RobustLogistic::new(0.0, 0.0).unwrap();
        let consts = crate::model::estimate_constants(&data, &obj, &[0.0; 10], &crate::model::ProbeConfig { probes: 200, ..Default::default() }).unwrap();
        let r = verify_affine_lipschitz(&data, &obj, &consts, 10, 100, 1, 3.0).unwrap();
        assert_eq!(r.violations, 0);
        assert!(verify_affine_lipschitz(&data, &obj, &consts, 10, 10, 1, 3.0).is_err());
    }
}
