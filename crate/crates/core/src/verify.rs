//! Self-check suites run by `advdiff verify`.
//!
//! Each suite compares the library against an independent oracle (finite
//! differences, brute-force sampling, a dense SVD) and reports named checks.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::Rng as _;
use serde::Serialize;

use crate::analysis::{solve_robust_minimizer, verify_affine_lipschitz, verify_gradient_noise, NoiseOptions, SolverOptions};
use crate::attacks::{deepfool_binary_traced, exact_maximizer, fgm};
use crate::data::{generate_synthetic, SyntheticSpec};
use crate::linalg::{dot, max_abs, norm, sub, Matrix};
use crate::model::{
    estimate_constants, gaussian_vec, grad_w_logistic, grad_x_logistic, logistic_loss, Label, LabeledSample, ProbeConfig,
    RobustLogistic,
};
use crate::rng::{self, Purpose};
use crate::topology::{
    build_combination_matrix, generate_random_graph, second_largest_eigenvalue_modulus, CombinationMatrix, CombinationRule,
    PERRON_TOLERANCE,
};
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub suite: String,
    pub checks: Vec<Check>,
}

impl SuiteResult {
    fn new(suite: &str) -> Self {
        Self {
            suite: suite.to_string(),
            checks: Vec::new(),
        }
    }

    fn check(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        });
    }

    fn error(suite: &str, e: crate::Error) -> Self {
        let mut s = Self::new(suite);
        s.check("completed", false, e.to_string());
        s
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

/// Probe counts for every suite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    pub gradient_tuples: usize,
    pub maximizer_tuples: usize,
    pub feasible_samples: usize,
    pub max_matrix_size: usize,
    pub lipschitz_pairs: usize,
    pub noise_draws: usize,
    pub noise_agents: usize,
    pub train_samples: usize,
}

impl VerifyOptions {
    pub fn full() -> Self {
        Self {
            seed: 0,
            gradient_tuples: 1000,
            maximizer_tuples: 10_000,
            feasible_samples: 200,
            max_matrix_size: 50,
            lipschitz_pairs: 1000,
            noise_draws: 10_000,
            noise_agents: 4,
            train_samples: 2000,
        }
    }

    pub fn quick() -> Self {
        Self {
            seed: 0,
            gradient_tuples: 200,
            maximizer_tuples: 1000,
            feasible_samples: 100,
            max_matrix_size: 20,
            lipschitz_pairs: 200,
            noise_draws: 2000,
            noise_agents: 2,
            train_samples: 500,
        }
    }
}

/// Random `(w, s, δ)` with `‖δ‖ ≤ eps_max` in dimension 2..=10.
pub fn random_tuple(rng: &mut rng::Rng, eps_max: f64) -> (Vec<f64>, LabeledSample, Vec<f64>, f64) {
    let dim = rng.random_range(2..=10);
    let w = gaussian_vec(rng, dim);
    let x = gaussian_vec(rng, dim);
    let label = if rng.random::<bool>() { Label::Pos } else { Label::Neg };
    let eps = rng.random_range(0.0..=eps_max);
    let mut delta = gaussian_vec(rng, dim);
    let r = eps * rng.random::<f64>() / norm(&delta).max(f64::MIN_POSITIVE);
    delta.iter_mut().for_each(|v| *v *= r);
    (w, LabeledSample { features: x, label }, delta, eps)
}

/// Central difference of `f` at `v` along every coordinate.
pub fn central_difference(v: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = v.to_vec();
    (0..v.len())
        .map(|j| {
            let orig = p[j];
            p[j] = orig + h;
            let up = f(&p);
            p[j] = orig - h;
            let down = f(&p);
            p[j] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Relative error with a floor on the scale.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    norm(&sub(a, b)) / norm(a).max(norm(b)).max(1e-8)
}

type GradFn<'a> = &'a dyn Fn(&[f64], &LabeledSample, &[f64]) -> Result<Vec<f64>>;

/// Compares `grad_w` and `grad_x` with central differences of the loss.
/// The gradients are parameters so a faulty implementation can be checked.
pub fn gradient_suite(grad_w: GradFn<'_>, grad_x: GradFn<'_>, tuples: usize, seed: u64) -> SuiteResult {
    let mut suite = SuiteResult::new("gradients");
    let mut rng = rng::stream(seed, Purpose::Probe, 10);
    let h = 1e-6;
    let (mut worst_w, mut worst_x): (f64, f64) = (0.0, 0.0);
    for _ in 0..tuples {
        let (w, s, delta, _) = random_tuple(&mut rng, 1.0);
        let (Ok(gw), Ok(gx)) = (grad_w(&w, &s, &delta), grad_x(&w, &s, &delta)) else {
            suite.check("evaluation", false, "gradient returned an error");
            return suite;
        };
        let fw = central_difference(&w, h, |v| logistic_loss(v, &s, &delta).unwrap_or(f64::NAN));
        let fx = central_difference(&delta, h, |d| logistic_loss(&w, &s, d).unwrap_or(f64::NAN));
        worst_w = worst_w.max(relative_error(&gw, &fw));
        worst_x = worst_x.max(relative_error(&gx, &fx));
    }
    suite.check("grad_w finite differences", worst_w < 1e-6, format!("max relative error {worst_w:.2e} over {tuples} tuples"));
    suite.check("grad_x finite differences", worst_x < 1e-6, format!("max relative error {worst_x:.2e} over {tuples} tuples"));
    suite
}

/// Loss at the closed-form maximizer against sampled feasible perturbations.
pub fn maximizer_suite(tuples: usize, samples: usize, seed: u64) -> SuiteResult {
    let mut suite = SuiteResult::new("maximizer");
    let mut rng = rng::stream(seed, Purpose::Probe, 11);
    let mut violations = 0usize;
    let mut norm_errors = 0usize;
    for _ in 0..tuples {
        let (w, s, _, eps) = random_tuple(&mut rng, 2.0);
        let star = exact_maximizer(&w, &s, eps);
        let best = logistic_loss(&w, &s, &star).unwrap_or(f64::NAN);
        let n = norm(&star);
        if (n - eps).abs() > 1e-12 * eps.max(1.0) && n != 0.0 {
            norm_errors += 1;
        }
        for i in 0..samples {
            let mut d = gaussian_vec(&mut rng, s.dim());
            // Half on the sphere, half inside.
            let r = if i % 2 == 0 { eps } else { eps * rng.random::<f64>() };
            let scale = r / norm(&d);
            d.iter_mut().for_each(|v| *v *= scale);
            if logistic_loss(&w, &s, &d).unwrap_or(f64::INFINITY) > best {
                violations += 1;
            }
        }
    }
    suite.check(
        "closed form beats sampled perturbations",
        violations == 0,
        format!("{violations} violations over {tuples} tuples x {samples} samples"),
    );
    suite.check("maximizer norm is eps", norm_errors == 0, format!("{norm_errors} norm errors"));
    suite
}

pub fn fgm_suite(tuples: usize, seed: u64) -> SuiteResult {
    let mut suite = SuiteResult::new("fgm");
    let mut rng = rng::stream(seed, Purpose::Probe, 12);
    let mut worst: f64 = 0.0;
    let mut errors = 0;
    for _ in 0..tuples {
        let (w, s, _, eps) = random_tuple(&mut rng, 2.0);
        match fgm(&w, &s, eps) {
            Ok(f) => worst = worst.max(max_abs(&sub(&f, &exact_maximizer(&w, &s, eps)))),
            Err(_) => errors += 1,
        }
    }
    suite.check("fgm equals exact maximizer", worst <= 1e-12 && errors == 0, format!("max deviation {worst:.2e}"));
    suite
}

pub fn deepfool_suite(cases: usize, seed: u64) -> SuiteResult {
    let mut suite = SuiteResult::new("deepfool");
    let mut rng = rng::stream(seed, Purpose::Probe, 13);
    let (mut flips, mut one_step, mut worst_norm) = (0usize, 0usize, 0.0f64);
    for _ in 0..cases {
        let dim = rng.random_range(2..=10);
        let w = gaussian_vec(&mut rng, dim);
        let x = gaussian_vec(&mut rng, dim);
        let Ok((d, iters)) = deepfool_binary_traced(&w, &x, 50, 0.02) else {
            suite.check("evaluation", false, "deepfool returned an error");
            return suite;
        };
        let before = dot(&w, &x);
        let after = before + dot(&w, &d);
        if before == 0.0 || after.signum() != before.signum() {
            flips += 1;
        }
        if iters == 1 {
            one_step += 1;
        }
        let expect = 1.02 * before.abs() / norm(&w);
        worst_norm = worst_norm.max((norm(&d) - expect).abs() / expect.max(1e-12));
    }
    suite.check("flips the prediction", flips == cases, format!("{flips}/{cases}"));
    suite.check("single iteration", one_step == cases, format!("{one_step}/{cases}"));
    suite.check("norm is 1.02 x distance", worst_norm < 1e-12, format!("max relative deviation {worst_norm:.2e}"));
    suite
}

/// Perron vector from the null space of `A − I` via a dense SVD.
pub fn perron_oracle(a: &Matrix) -> Vec<f64> {
    let k = a.rows();
    let m = DMatrix::from_fn(k, k, |i, j| a[(i, j)] - if i == j { 1.0 } else { 0.0 });
    let svd = m.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let (idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
    let v: Vec<f64> = v_t.row(idx).iter().copied().collect();
    let sum: f64 = v.iter().sum();
    v.iter().map(|x| x / sum).collect()
}

/// Left-stochastic matrix with random positive weights on the graph pattern.
pub fn random_left_stochastic(cm: &CombinationMatrix, rng: &mut rng::Rng) -> Result<CombinationMatrix> {
    let k = cm.num_agents();
    let mut m = Matrix::zeros(k, k);
    for j in 0..k {
        let weights: Vec<(usize, f64)> = cm.column(j).iter().map(|&(i, _)| (i, rng.random_range(0.1..1.0))).collect();
        let total: f64 = weights.iter().map(|w| w.1).sum();
        for (i, w) in weights {
            m[(i, j)] = w / total;
        }
        // Absorb rounding so the column sums to one.
        let s: f64 = (0..k).map(|i| m[(i, j)]).sum();
        m[(j, j)] += 1.0 - s;
    }
    CombinationMatrix::from_entries(m)
}

pub fn stochastic_matrix_suite(max_size: usize, seed: u64) -> SuiteResult {
    let mut suite = SuiteResult::new("stochastic matrices");
    let mut rng = rng::stream(seed, Purpose::Probe, 14);
    let mut sizes: Vec<usize> = vec![1, 2, 3, 5, 10, 20, 35, 50];
    sizes.retain(|&k| k <= max_size);
    let (mut matrices, mut col_fail, mut sparsity_fail, mut perron_fail, mut oracle_fail, mut slem_fail, mut metro_fail) =
        (0, 0, 0, 0, 0, 0, 0);
    let mut worst_oracle: f64 = 0.0;
    for &k in &sizes {
        let p = if k <= 2 { 1.0 } else { (3.0 * (k as f64).ln() / k as f64).min(1.0) };
        let g = match generate_random_graph(k, p, seed.wrapping_add(k as u64)) {
            Ok(g) => g,
            Err(e) => return SuiteResult::error("stochastic matrices", e),
        };
        for rule in [CombinationRule::Metropolis, CombinationRule::UniformAveraging] {
            let cm = match build_combination_matrix(&g, rule) {
                Ok(c) => c,
                Err(e) => return SuiteResult::error("stochastic matrices", e),
            };
            let random = match random_left_stochastic(&cm, &mut rng) {
                Ok(c) => c,
                Err(e) => return SuiteResult::error("stochastic matrices", e),
            };
            if rule == CombinationRule::Metropolis && !(cm.is_symmetric(1e-12) && cm.is_doubly_stochastic(1e-12)) {
                metro_fail += 1;
            }
            for m in [&cm, &random] {
                matrices += 1;
                let a = m.entries();
                for j in 0..k {
                    let s: f64 = (0..k).map(|i| a[(i, j)]).sum();
                    if (s - 1.0).abs() > 1e-12 || (0..k).any(|i| a[(i, j)] < 0.0) {
                        col_fail += 1;
                    }
                }
                if !m.respects_graph(&g) || (0..k).any(|i| a[(i, i)] <= 0.0) {
                    sparsity_fail += 1;
                }
                let pi = m.perron();
                let api = a.mul_vec(pi);
                let resid = max_abs(&sub(&api, pi));
                let total: f64 = pi.iter().sum();
                if resid >= PERRON_TOLERANCE || (total - 1.0).abs() > 1e-12 || pi.iter().any(|&x| x <= 0.0) {
                    perron_fail += 1;
                }
                let dev = max_abs(&sub(pi, &perron_oracle(a)));
                worst_oracle = worst_oracle.max(dev);
                if dev > 1e-8 {
                    oracle_fail += 1;
                }
                if k > 1 && second_largest_eigenvalue_modulus(a) >= 1.0 - 1e-12 {
                    slem_fail += 1;
                }
            }
        }
    }
    suite.check("column sums and nonnegativity", col_fail == 0, format!("{col_fail} bad columns in {matrices} matrices"));
    suite.check("sparsity and self-loops", sparsity_fail == 0, format!("{sparsity_fail} failures"));
    suite.check("perron fixed point", perron_fail == 0, format!("{perron_fail} failures"));
    suite.check(
        "perron matches svd oracle",
        oracle_fail == 0,
        format!("max deviation {worst_oracle:.2e} up to K = {}", sizes.last().copied().unwrap_or(0)),
    );
    suite.check("second eigenvalue below one", slem_fail == 0, format!("{slem_fail} failures"));
    suite.check("metropolis symmetric", metro_fail == 0, format!("{metro_fail} failures"));
    suite
}

fn benchmark_data(samples: usize, seed: u64) -> Result<crate::data::Dataset> {
    Ok(generate_synthetic(&SyntheticSpec {
        n_train: samples,
        n_test: 1,
        seed,
        ..SyntheticSpec::default()
    })?
    .0)
}

pub fn affine_lipschitz_suite(opts: &VerifyOptions) -> SuiteResult {
    let run = || -> Result<SuiteResult> {
        let mut suite = SuiteResult::new("affine lipschitz");
        let data = benchmark_data(opts.train_samples, opts.seed)?;
        for (eps, rho) in [(0.3, 0.1), (0.0, 0.1), (1.0, 0.0)] {
            let obj = RobustLogistic::new(eps, rho)?;
            let consts = estimate_constants(&data, &obj, &vec![0.0; data.dim()], &ProbeConfig { probes: 1000, seed: opts.seed, radius: 3.0 })?;
            let r = verify_affine_lipschitz(&data, &obj, &consts, data.dim(), opts.lipschitz_pairs, opts.seed, 3.0)?;
            suite.check(
                &format!("eps {eps} rho {rho}"),
                r.violations == 0,
                format!("{} violations over {} pairs, max ratio {:.3}", r.violations, r.pairs, r.max_ratio),
            );
        }
        Ok(suite)
    };
    run().unwrap_or_else(|e| SuiteResult::error("affine lipschitz", e))
}

/// Five probe points along a random ray from `wstar`.
pub fn noise_probes(wstar: &[f64], seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng::stream(seed, Purpose::Probe, 15);
    let mut dir = gaussian_vec(&mut rng, wstar.len());
    let n = norm(&dir);
    dir.iter_mut().for_each(|v| *v /= n);
    [0.0, 0.5, 1.0, 2.0, 3.0]
        .iter()
        .map(|r| wstar.iter().zip(&dir).map(|(a, d)| a + r * d).collect())
        .collect()
}

pub fn gradient_noise_suite(opts: &VerifyOptions) -> SuiteResult {
    let run = || -> Result<SuiteResult> {
        let mut suite = SuiteResult::new("gradient noise");
        let data = benchmark_data(opts.train_samples, opts.seed)?;
        let obj = RobustLogistic::new(0.3, 0.1)?;
        let wstar = solve_robust_minimizer(&data, &obj, data.dim(), &SolverOptions::default())?;
        let probes = noise_probes(&wstar, opts.seed);
        let noise = NoiseOptions {
            num_agents: opts.noise_agents,
            draws: opts.noise_draws,
            batch: Some(1),
            seed: opts.seed,
        };
        let r = verify_gradient_noise(&data, &obj, &probes, &wstar, &noise)?;
        suite.check(
            "zero mean",
            r.fraction_within >= 0.99,
            format!("{:.1}% of coordinates with |z| < 4, max |z| {:.2}", 100.0 * r.fraction_within, r.max_abs_z),
        );
        suite.check(
            "affine second moment",
            r.beta2_hat >= 0.0 && r.sigma2_hat >= 0.0,
            format!("beta2 {:.4}, sigma2 {:.4}, r2 {:.3}", r.beta2_hat, r.sigma2_hat, r.fit_r2),
        );
        let full = verify_gradient_noise(&data, &obj, &probes[..2], &wstar, &NoiseOptions { batch: None, draws: 3, ..noise })?;
        suite.check("full batch is noiseless", full.exact_zero, "");
        Ok(suite)
    };
    run().unwrap_or_else(|e| SuiteResult::error("gradient noise", e))
}

pub fn run_all(opts: &VerifyOptions) -> Vec<SuiteResult> {
    let gw = |w: &[f64], s: &LabeledSample, d: &[f64]| grad_w_logistic(w, s, d);
    let gx = |w: &[f64], s: &LabeledSample, d: &[f64]| grad_x_logistic(w, s, d);
    vec![
        gradient_suite(&gw, &gx, opts.gradient_tuples, opts.seed),
        maximizer_suite(opts.maximizer_tuples, opts.feasible_samples, opts.seed),
        fgm_suite(opts.maximizer_tuples, opts.seed),
        deepfool_suite(opts.gradient_tuples, opts.seed),
        stochastic_matrix_suite(opts.max_matrix_size, opts.seed),
        affine_lipschitz_suite(opts),
        gradient_noise_suite(opts),
    ]
}

/// Pass/fail table, one line per check.
pub fn format_table(results: &[SuiteResult]) -> String {
    let mut s = String::new();
    for r in results {
        for c in &r.checks {
            let _ = writeln!(
                s,
                "{:<4} {:<20} {:<42} {}",
                if c.passed { "PASS" } else { "FAIL" },
                r.suite,
                c.name,
                c.detail
            );
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn injected_gradient_bug_is_caught() {
        let buggy = |w: &[f64], s: &LabeledSample, d: &[f64]| {
            let mut g = grad_w_logistic(w, s, d)?;
            g[0] *= 1.001;
            Ok(g)
        };
        let gx = |w: &[f64], s: &LabeledSample, d: &[f64]| grad_x_logistic(w, s, d);
        let r = gradient_suite(&buggy, &gx, 50, 0);
        assert!(!r.passed());
        let failed: Vec<&str> = r.failures().map(|c| c.name.as_str()).collect();
        assert_eq!(failed, vec!["grad_w finite differences"]);
    }

    #[test]
    fn perron_oracle_on_known_matrix() {
        let a = Matrix::from_rows(&[vec![0.5, 0.25], vec![0.5, 0.75]]).unwrap();
        let pi = perron_oracle(&a);
        assert!((pi[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((pi[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn quick_suites_pass() {
        let opts = VerifyOptions { gradient_tuples: 50, maximizer_tuples: 100, feasible_samples: 20, lipschitz_pairs: 100, noise_draws: 500, train_samples: 200, ..VerifyOptions::quick() };
        for r in run_all(&opts) {
            assert!(r.passed(), "{}", format_table(std::slice::from_ref(&r)));
        }
    }
}
