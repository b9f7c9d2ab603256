//! The adversarial adapt-then-combine diffusion engine.
//!
//! One round, for every agent `k` at once:
//!
//! ```text
//! x*_k = x_k + δ*_k(w_{k,n−1})                       (attack)
//! φ_k  = w_{k,n−1} − μ (∇_w Q(w_{k,n−1}; x*_k, γ_k) + ρ w_{k,n−1})   (adapt)
//! w_k  = Σ_l a_lk φ_l                                 (combine)
//! ```
//!
//! Combines read a snapshot of all `φ`, so the result does not depend on
//! the order in which agents are processed.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::attacks::AttackSpec;
use crate::data::{partition_streams, Dataset, StreamMode};
use crate::linalg::{all_finite, axpy, dist_sq, norm, Matrix};
use crate::model::{classify, grad_w_logistic, logistic_loss, LabeledSample, RobustLogistic};
use crate::rng::{self, Purpose};
use crate::topology::CombinationMatrix;
use crate::{Error, Result};

/// Half-width of the uniform initialization box.
pub const INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkState {
    weights: Matrix,
    intermediates: Matrix,
    iteration: u64,
}

impl NetworkState {
    /// State at iteration 0 with the given weights (`φ` starts equal to `w`).
    pub fn from_weights(weights: Matrix) -> Result<Self> {
        if weights.rows() == 0 || weights.cols() == 0 {
            return Err(Error::invalid("weights", "need at least one agent and one coordinate"));
        }
        if !weights.is_finite() {
            return Err(Error::invalid("weights", "non-finite entry"));
        }
        Ok(Self {
            intermediates: weights.clone(),
            weights,
            iteration: 0,
        })
    }

    /// Seeded uniform entries in `[−0.1, 0.1]`; with `identical` every agent
    /// starts from agent 0's draw.
    pub fn initialize(num_agents: usize, wdim: usize, seed: u64, identical: bool) -> Result<Self> {
        let mut weights = Matrix::zeros(num_agents, wdim);
        for k in 0..num_agents {
            let mut r = rng::stream(seed, Purpose::Init, if identical { 0 } else { k });
            for v in weights.row_mut(k) {
                *v = r.random_range(-INIT_SCALE..=INIT_SCALE);
            }
        }
        Self::from_weights(weights)
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn intermediates(&self) -> &Matrix {
        &self.intermediates
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn num_agents(&self) -> usize {
        self.weights.rows()
    }

    pub fn weight(&self, k: usize) -> &[f64] {
        self.weights.row(k)
    }

    /// `Σ_k π_k w_k`.
    pub fn centroid(&self, pi: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; self.weights.cols()];
        for (k, p) in pi.iter().enumerate() {
            axpy(*p, self.weights.row(k), &mut c);
        }
        c
    }

    /// `max_k ‖w_k − Σ π_l w_l‖`.
    pub fn disagreement(&self, pi: &[f64]) -> f64 {
        let c = self.centroid(pi);
        self.weights
            .iter_rows()
            .map(|w| dist_sq(w, &c).sqrt())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepParams {
    pub mu: f64,
    pub rho: f64,
    /// Perturbation applied to every training sample.
    pub attack: AttackSpec,
}

impl StepParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::invalid("mu", format!("{} must be positive", self.mu)));
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::invalid("rho", format!("{} must be finite and nonnegative", self.rho)));
        }
        self.attack.validate()
    }
}

/// Mean adversarial gradient over a batch plus `ρw`, and the mean
/// adversarial loss (without the ridge term).
pub fn adversarial_gradient<'a>(
    w: &[f64],
    batch: impl IntoIterator<Item = &'a LabeledSample>,
    params: &StepParams,
) -> Result<(Vec<f64>, f64)> {
    let mut g = vec![0.0; w.len()];
    let mut loss = 0.0;
    let mut n = 0usize;
    for s in batch {
        let delta = params.attack.perturb(w, s)?;
        axpy(1.0, &grad_w_logistic(w, s, &delta)?, &mut g);
        loss += logistic_loss(w, s, &delta)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let inv = 1.0 / n as f64;
    g.iter_mut().for_each(|v| *v *= inv);
    axpy(params.rho, w, &mut g);
    Ok((g, loss * inv))
}

/// Adapt step for one agent: `φ = w − μ g`. Returns `φ`, the gradient and the
/// batch loss.
pub fn adapt_agent(w: &[f64], batch: &[&LabeledSample], params: &StepParams) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let (g, loss) = adversarial_gradient(w, batch.iter().copied(), params)?;
    let mut phi = w.to_vec();
    axpy(-params.mu, &g, &mut phi);
    Ok((phi, g, loss))
}

/// `w_k = Σ_l a_lk φ_l` for every `k`.
pub fn combine(a: &CombinationMatrix, phi: &Matrix) -> Result<Matrix> {
    if a.num_agents() != phi.rows() {
        return Err(Error::DimensionMismatch {
            expected: a.num_agents(),
            got: phi.rows(),
        });
    }
    let mut out = Matrix::zeros(phi.rows(), phi.cols());
    for k in 0..phi.rows() {
        let row = out.row_mut(k);
        for &(l, alk) in a.column(k) {
            axpy(alk, phi.row(l), row);
        }
    }
    Ok(out)
}

/// What one round produced besides the new state.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub state: NetworkState,
    /// Row `k`: the stochastic gradient agent `k` used.
    pub gradients: Matrix,
    pub losses: Vec<f64>,
}

/// One synchronous round. `batches[k]` lists the samples agent `k` uses.
pub fn adversarial_atc_step(
    state: &NetworkState,
    a: &CombinationMatrix,
    batches: &[Vec<&LabeledSample>],
    params: &StepParams,
) -> Result<StepOutput> {
    let k_agents = state.num_agents();
    if a.num_agents() != k_agents {
        return Err(Error::DimensionMismatch {
            expected: k_agents,
            got: a.num_agents(),
        });
    }
    if batches.len() != k_agents {
        return Err(Error::DimensionMismatch {
            expected: k_agents,
            got: batches.len(),
        });
    }
    params.validate()?;
    let wdim = state.weights.cols();
    let mut phi = Matrix::zeros(k_agents, wdim);
    let mut gradients = Matrix::zeros(k_agents, wdim);
    let mut losses = Vec::with_capacity(k_agents);
    for (k, batch) in batches.iter().enumerate() {
        let (p, g, loss) = adapt_agent(state.weights.row(k), batch, params)?;
        if !all_finite(&p) || !loss.is_finite() {
            return Err(Error::NonFiniteGradient {
                agent: k,
                iteration: state.iteration + 1,
            });
        }
        phi.row_mut(k).copy_from_slice(&p);
        gradients.row_mut(k).copy_from_slice(&g);
        losses.push(loss);
    }
    let weights = combine(a, &phi)?;
    Ok(StepOutput {
        state: NetworkState {
            weights,
            intermediates: phi,
            iteration: state.iteration + 1,
        },
        gradients,
        losses,
    })
}

/// `s_k = g_k − ∇J(w_k)` with `oracle_grad` row `k` holding `∇J(w_k)`.
pub fn sample_gradient_noise(stochastic: &Matrix, oracle_grad: &Matrix) -> Result<Matrix> {
    if stochastic.rows() != oracle_grad.rows() || stochastic.cols() != oracle_grad.cols() {
        return Err(Error::DimensionMismatch {
            expected: stochastic.rows() * stochastic.cols(),
            got: oracle_grad.rows() * oracle_grad.cols(),
        });
    }
    let mut out = stochastic.clone();
    for k in 0..out.rows() {
        axpy(-1.0, oracle_grad.row(k), out.row_mut(k));
    }
    Ok(out)
}

/// Row `k`: the full-data robust gradient at `w_k`.
pub fn oracle_gradients(weights: &Matrix, data: &[LabeledSample], objective: &RobustLogistic) -> Result<Matrix> {
    let mut out = Matrix::zeros(weights.rows(), weights.cols());
    for k in 0..weights.rows() {
        let g = objective.gradient(weights.row(k), data)?;
        out.row_mut(k).copy_from_slice(&g);
    }
    Ok(out)
}

/// Fraction of `data` misclassified by `w` after `attack` perturbs each
/// sample.
pub fn adversarial_error(w: &[f64], data: &[LabeledSample], attack: &AttackSpec) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut wrong = 0usize;
    let mut x = Vec::new();
    for s in data {
        let delta = attack.perturb(w, s)?;
        x.clear();
        x.extend(s.features.iter().zip(&delta).map(|(a, b)| a + b));
        if classify(w, &x)? != s.label {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mu: f64,
    pub iters: u64,
    pub batch: usize,
    /// A trace row is emitted after every `log_stride`-th round.
    pub log_stride: u64,
    pub seed: u64,
    pub rho: f64,
    /// Training-time perturbation.
    pub attack: AttackSpec,
    pub intercept: bool,
    pub init_identical: bool,
    pub stream_mode: StreamMode,
    /// Record the gradient noise of every logged round against the
    /// full-data gradient.
    pub record_noise: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mu: 0.01,
            iters: 1000,
            batch: 1,
            log_stride: 1,
            seed: 0,
            rho: 0.0,
            attack: AttackSpec::default(),
            intercept: false,
            init_identical: false,
            stream_mode: StreamMode::IidShuffle,
            record_noise: false,
        }
    }
}

impl TrainConfig {
    pub fn step_params(&self) -> StepParams {
        StepParams {
            mu: self.mu,
            rho: self.rho,
            attack: self.attack,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.step_params().validate()?;
        if self.batch == 0 {
            return Err(Error::invalid("batch", "must be at least 1"));
        }
        if self.log_stride == 0 {
            return Err(Error::invalid("log_stride", "must be at least 1"));
        }
        Ok(())
    }

    pub fn weight_dim(&self, feature_dim: usize) -> usize {
        feature_dim + self.intercept as usize
    }
}

/// Held-out evaluation attached to a training run.
#[derive(Debug, Clone, Copy)]
pub struct Evaluation<'a> {
    pub data: &'a [LabeledSample],
    pub attack: AttackSpec,
}

/// Instrumentation emitted after a logged round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub iteration: u64,
    /// Mean adversarial loss each agent incurred on its batch this round.
    pub per_agent_loss: Vec<f64>,
    /// `‖w* − w_k‖²`, when an oracle is supplied.
    pub msd_per_agent: Option<Vec<f64>>,
    pub disagreement: f64,
    /// Network-average error on the evaluation set under its attack.
    pub adv_error: Option<f64>,
    pub grad_noise_sample: Option<Matrix>,
}

impl RoundTrace {
    pub fn avg_loss(&self) -> f64 {
        self.per_agent_loss.iter().sum::<f64>() / self.per_agent_loss.len() as f64
    }

    pub fn msd(&self) -> Option<f64> {
        self.msd_per_agent
            .as_ref()
            .map(|m| m.iter().sum::<f64>() / m.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub traces: Vec<RoundTrace>,
    pub state: NetworkState,
}

/// Runs `cfg.iters` rounds over `data`, logging every `cfg.log_stride`.
pub fn run_training(
    cfg: &TrainConfig,
    a: &CombinationMatrix,
    data: &Dataset,
    wstar: Option<&[f64]>,
    eval: Option<Evaluation<'_>>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let k_agents = a.num_agents();
    let wdim = cfg.weight_dim(data.dim());
    if let Some(ws) = wstar {
        crate::linalg::check_len(wdim, ws.len())?;
    }
    let objective = RobustLogistic::new(cfg.attack.epsilon, cfg.rho)?;
    let params = cfg.step_params();
    let mut streams = partition_streams(data.len(), k_agents, cfg.stream_mode, cfg.seed)?;
    let mut state = NetworkState::initialize(k_agents, wdim, cfg.seed, cfg.init_identical)?;
    let mut traces = Vec::with_capacity((cfg.iters / cfg.log_stride) as usize);
    let pi = a.perron();

    for _ in 0..cfg.iters {
        let batches: Vec<Vec<&LabeledSample>> = streams
            .iter_mut()
            .map(|st| st.next_batch(cfg.batch).into_iter().map(|i| &data[i]).collect())
            .collect();
        let prev = state;
        let out = adversarial_atc_step(&prev, a, &batches, &params)?;
        state = out.state;
        if state.iteration % cfg.log_stride != 0 {
            continue;
        }
        let msd_per_agent = wstar.map(|ws| state.weights.iter_rows().map(|w| dist_sq(w, ws)).collect());
        let adv_error = match eval {
            Some(ev) => {
                let mut total = 0.0;
                for w in state.weights.iter_rows() {
                    total += adversarial_error(w, ev.data, &ev.attack)?;
                }
                Some(total / k_agents as f64)
            }
            None => None,
        };
        let grad_noise_sample = if cfg.record_noise {
            let oracle = oracle_gradients(prev.weights(), data, &objective)?;
            Some(sample_gradient_noise(&out.gradients, &oracle)?)
        } else {
            None
        };
        traces.push(RoundTrace {
            iteration: state.iteration,
            per_agent_loss: out.losses,
            msd_per_agent,
            disagreement: state.disagreement(pi),
            adv_error,
            grad_noise_sample,
        });
    }
    Ok(TrainOutput { traces, state })
}

/// Largest `‖w_k‖`, handy for divergence diagnostics.
pub fn max_weight_norm(state: &NetworkState) -> f64 {
    state.weights.iter_rows().map(norm).fold(0.0, f64::max)
}
