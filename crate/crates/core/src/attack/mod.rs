//! Gradient inversion: optimize dummy images until their classifier
//! gradient matches a shared one.

pub mod optim;

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::flsim::SharedGradient;
use crate::losses::{LossWeights, Matching, Objective, RegReduction, TermBreakdown};
use crate::nn::{Arch, AutoEncoderParams, ClassifierParams};
use crate::tensor::Tensor;

use optim::{adam_step, AdamConfig, AdamState, Lbfgs};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    /// Cosine matching with TV and anomaly-score priors.
    GiPip,
    /// Cosine matching with TV only.
    Ig,
    /// Squared-error matching, no priors.
    Dlg,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gipip" => Ok(Method::GiPip),
            "ig" => Ok(Method::Ig),
            "dlg" => Ok(Method::Dlg),
            other => Err(Error::config(format!("unknown attack method {other:?} (gipip, ig, dlg)"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::GiPip => "gipip",
            Method::Ig => "ig",
            Method::Dlg => "dlg",
        })
    }
}

impl Method {
    pub fn matching(self) -> Matching {
        match self {
            Method::Dlg => Matching::Mse,
            _ => Matching::Cosine,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DlgOptimizer {
    Lbfgs,
    /// Adam instead of L-BFGS; reported as a deviation.
    Adam,
}

impl FromStr for DlgOptimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lbfgs" => Ok(DlgOptimizer::Lbfgs),
            "adam" => Ok(DlgOptimizer::Adam),
            other => Err(Error::config(format!("unknown dlg optimizer {other:?} (lbfgs, adam)"))),
        }
    }
}

impl fmt::Display for DlgOptimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DlgOptimizer::Lbfgs => "lbfgs",
            DlgOptimizer::Adam => "adam",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackConfig {
    pub method: Method,
    /// Adam step size; L-BFGS picks its own steps.
    pub learning_rate: f64,
    pub iterations: usize,
    pub weights: LossWeights,
    pub restarts: usize,
    pub seed: u64,
    pub clamp_to_unit_box: bool,
    pub record_every: usize,
    pub reduction: RegReduction,
    pub dlg_optimizer: DlgOptimizer,
}

pub const DEFAULT_LAMBDA_TV: f64 = 1e-2;
pub const DEFAULT_LAMBDA_AS: f64 = 1e-4;
pub const LBFGS_HISTORY: usize = 10;

impl AttackConfig {
    /// Defaults for `method`, with weights the method allows.
    pub fn for_method(method: Method) -> Self {
        let weights = match method {
            Method::GiPip => LossWeights { lambda_as: DEFAULT_LAMBDA_AS, lambda_tv: DEFAULT_LAMBDA_TV },
            Method::Ig => LossWeights { lambda_as: 0.0, lambda_tv: DEFAULT_LAMBDA_TV },
            Method::Dlg => LossWeights::ZERO,
        };
        AttackConfig {
            method,
            learning_rate: 0.1,
            iterations: 4000,
            weights,
            restarts: 1,
            seed: 0,
            clamp_to_unit_box: true,
            record_every: 50,
            reduction: RegReduction::Sum,
            dlg_optimizer: DlgOptimizer::Lbfgs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.restarts == 0 {
            return Err(Error::config("restarts must be at least 1"));
        }
        if self.record_every == 0 {
            return Err(Error::config("record_every must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        match self.method {
            Method::Ig if self.weights.lambda_as != 0.0 => {
                Err(Error::config("method ig requires lambda_as = 0"))
            }
            Method::Dlg if self.weights != LossWeights::ZERO => {
                Err(Error::config("method dlg requires lambda_as = lambda_tv = 0"))
            }
            _ => Ok(()),
        }
    }

    /// True when the run departs from the method's reference optimizer.
    pub fn deviations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.method == Method::Dlg && self.dlg_optimizer == DlgOptimizer::Adam {
            out.push("dlg optimized with adam instead of l-bfgs".to_string());
        }
        out
    }

    fn uses_lbfgs(&self) -> bool {
        self.method == Method::Dlg && self.dlg_optimizer == DlgOptimizer::Lbfgs
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceEntry {
    pub iteration: usize,
    pub terms: TermBreakdown,
}

/// Outcome of [`run_attack`]. Only the attack loop can build one.
#[derive(Clone, Debug)]
pub struct AttackResult {
    recovered: Tensor,
    trace: Vec<TraceEntry>,
    best_restart: usize,
    final_terms: TermBreakdown,
    restart_losses: Vec<f64>,
    stalled: bool,
    wall_time: Duration,
}

impl AttackResult {
    pub fn recovered(&self) -> &Tensor {
        &self.recovered
    }

    /// Term breakdown of the selected restart every `record_every` steps.
    pub fn trace(&self) -> &[TraceEntry] {
        &self.trace
    }

    pub fn best_restart(&self) -> usize {
        self.best_restart
    }

    pub fn final_terms(&self) -> TermBreakdown {
        self.final_terms
    }

    /// Final gradient-matching loss of every restart.
    pub fn restart_losses(&self) -> &[f64] {
        &self.restart_losses
    }

    /// The selected restart's line search gave up before the last step.
    pub fn stalled(&self) -> bool {
        self.stalled
    }

    pub fn wall_time(&self) -> Duration {
        self.wall_time
    }
}

/// I.i.d. standard normal tensor from a seeded generator.
pub fn init_dummy(shape: &[usize], seed: u64) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::new(shape.to_vec(), data)
}

/// Seed of restart `r`; restart 0 uses the configured seed itself.
pub fn restart_seed(seed: u64, r: usize) -> u64 {
    seed.wrapping_add((r as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

struct RestartOutcome {
    x: Tensor,
    trace: Vec<TraceEntry>,
    final_terms: TermBreakdown,
    stalled: bool,
}

fn numeric_failure(iteration: usize, trace: &[TraceEntry], terms: &TermBreakdown) -> Error {
    let tail: Vec<String> = trace
        .iter()
        .rev()
        .take(5)
        .rev()
        .map(|e| format!("{}:{:.6e}", e.iteration, e.terms.total))
        .collect();
    Error::Numeric {
        iteration,
        message: format!("non-finite objective {terms:?}; trace so far [{}]", tail.join(", ")),
    }
}

fn clamp_unit(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

fn run_adam(cfg: &AttackConfig, obj: &Objective<'_>, mut x: Tensor) -> Result<RestartOutcome> {
    let mut trace = Vec::with_capacity(cfg.iterations / cfg.record_every + 1);
    let mut state = AdamState::new(x.numel());
    let adam = AdamConfig::with_lr(cfg.learning_rate);
    for t in 0..cfg.iterations {
        let (terms, grad) = obj.value_and_grad(&x)?;
        if !terms.total.is_finite() {
            return Err(numeric_failure(t, &trace, &terms));
        }
        if t % cfg.record_every == 0 {
            trace.push(TraceEntry { iteration: t, terms });
        }
        adam_step(&mut state, x.data_mut(), grad.data(), &adam, t)?;
        if cfg.clamp_to_unit_box {
            clamp_unit(x.data_mut());
        }
    }
    let final_terms = obj.evaluate(&x)?;
    if !final_terms.total.is_finite() {
        return Err(numeric_failure(cfg.iterations, &trace, &final_terms));
    }
    if cfg.iterations % cfg.record_every == 0 {
        trace.push(TraceEntry { iteration: cfg.iterations, terms: final_terms });
    }
    Ok(RestartOutcome { x, trace, final_terms, stalled: false })
}

fn run_lbfgs(cfg: &AttackConfig, obj: &Objective<'_>, mut x: Tensor) -> Result<RestartOutcome> {
    let shape = x.shape().to_vec();
    let mut opt = Lbfgs::new(LBFGS_HISTORY);
    if cfg.clamp_to_unit_box {
        opt = opt.with_bounds(0.0, 1.0);
    }
    let mut trace = Vec::with_capacity(cfg.iterations / cfg.record_every + 1);
    let mut current = obj.evaluate(&x)?;
    let mut stalled = false;
    for t in 0..cfg.iterations {
        if !current.total.is_finite() {
            return Err(numeric_failure(t, &trace, &current));
        }
        if t % cfg.record_every == 0 {
            trace.push(TraceEntry { iteration: t, terms: current });
        }
        if stalled {
            continue;
        }
        let mut last = None;
        let mut eval = |flat: &[f64]| -> Result<optim::Evaluation> {
            let candidate = Tensor::new(shape.clone(), flat.to_vec())?;
            let (terms, grad) = obj.value_and_grad(&candidate)?;
            last = Some(terms);
            // non-finite candidates are rejected by the line search
            let loss = if terms.total.is_finite() { terms.total } else { f64::INFINITY };
            Ok((loss, grad.into_data()))
        };
        let step = opt.step(x.data_mut(), &mut eval)?;
        if step.stalled {
            stalled = true;
        } else if let Some(terms) = last {
            current = terms;
        }
    }
    if !current.total.is_finite() {
        return Err(numeric_failure(cfg.iterations, &trace, &current));
    }
    if cfg.iterations % cfg.record_every == 0 {
        trace.push(TraceEntry { iteration: cfg.iterations, terms: current });
    }
    Ok(RestartOutcome { x, trace, final_terms: current, stalled })
}

/// Runs every restart and keeps the one with the lowest final
/// gradient-matching loss (first one wins ties).
pub fn run_attack(
    cfg: &AttackConfig,
    shared: &SharedGradient,
    theta_g: &ClassifierParams,
    theta_a: Option<&AutoEncoderParams>,
) -> Result<AttackResult> {
    let started = Instant::now();
    cfg.validate()?;
    if shared.model_fingerprint() != theta_g.fingerprint() {
        return Err(Error::Contract("shared gradient was computed on a different global model".into()));
    }
    match (cfg.method, theta_a) {
        (Method::GiPip, None) => return Err(Error::Contract("method gipip needs an auto-encoder".into())),
        (Method::Ig | Method::Dlg, Some(_)) => {
            return Err(Error::Contract(format!("method {} takes no auto-encoder", cfg.method)))
        }
        _ => {}
    }
    let mut shape = vec![shared.batch_size()];
    shape.extend_from_slice(&theta_g.spec.input);
    if let Some(ae) = theta_a {
        ae.check_images(&shape)?;
    }
    let obj = Objective {
        target: shared.gradient(),
        classifier: theta_g,
        autoencoder: theta_a,
        labels: shared.labels(),
        weights: cfg.weights,
        matching: cfg.method.matching(),
        reduction: cfg.reduction,
    };

    let mut best: Option<(usize, RestartOutcome)> = None;
    let mut restart_losses = Vec::with_capacity(cfg.restarts);
    for r in 0..cfg.restarts {
        let x0 = init_dummy(&shape, restart_seed(cfg.seed, r))?;
        let out = if cfg.uses_lbfgs() { run_lbfgs(cfg, &obj, x0)? } else { run_adam(cfg, &obj, x0)? };
        let loss = out.final_terms.grad_matching;
        restart_losses.push(loss);
        if best.as_ref().map_or(true, |(_, b)| loss < b.final_terms.grad_matching) {
            best = Some((r, out));
        }
    }
    let (best_restart, out) = best.expect("at least one restart");
    Ok(AttackResult {
        recovered: out.x,
        trace: out.trace,
        best_restart,
        final_terms: out.final_terms,
        restart_losses,
        stalled: out.stalled,
        wall_time: started.elapsed(),
    })
}

fn dense_gradients<'a>(shared: &'a SharedGradient, theta_g: &ClassifierParams) -> Result<(&'a [f64], &'a [f64], usize)> {
    if theta_g.spec.arch != Arch::Dense1 {
        return Err(Error::arg("closed-form leak applies to dense1 models only"));
    }
    if shared.batch_size() != 1 {
        return Err(Error::arg(format!("closed-form leak needs batch size 1, got {}", shared.batch_size())));
    }
    let segs = shared.gradient().segments();
    if segs.len() != 2 || segs[0].shape.len() != 2 || segs[1].shape.len() != 1 {
        return Err(Error::arg("shared gradient does not have a dense1 layout"));
    }
    Ok((&segs[0].values, &segs[1].values, segs[0].shape[1]))
}

const LEAK_MIN_BIAS_GRAD: f64 = 1e-12;

/// Exact input of a single-layer dense model from its gradient:
/// `x = (dL/dW)[i, :] / (dL/db)[i]` for the row with the largest bias
/// gradient.
pub fn closed_form_dense_leak(shared: &SharedGradient, theta_g: &ClassifierParams) -> Result<Tensor> {
    let (gw, gb, d) = dense_gradients(shared, theta_g)?;
    let (i, &b) = gb
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .expect("at least one class");
    if b.abs() <= LEAK_MIN_BIAS_GRAD {
        return Err(Error::arg("every bias gradient is zero; the closed-form leak does not apply"));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(&theta_g.spec.input);
    Tensor::new(shape, gw[i * d..(i + 1) * d].iter().map(|v| v / b).collect())
}

/// The leak from every row with a usable bias gradient.
pub fn dense_leak_rows(shared: &SharedGradient, theta_g: &ClassifierParams) -> Result<Vec<Tensor>> {
    let (gw, gb, d) = dense_gradients(shared, theta_g)?;
    let mut shape = vec![1];
    shape.extend_from_slice(&theta_g.spec.input);
    gb.iter()
        .enumerate()
        .filter(|(_, b)| b.abs() > LEAK_MIN_BIAS_GRAD)
        .map(|(i, b)| Tensor::new(shape.clone(), gw[i * d..(i + 1) * d].iter().map(|v| v / b).collect()))
        .collect()
}
