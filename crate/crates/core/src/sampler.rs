//! Reverse diffusion driven by a refitted untrained generator.
//!
//! The chain lives in spectral coordinates `xbar = V^T x` of the degradation
//! operator, where measurement noise and diffusion noise decouple per
//! singular value. Initialisation perturbs `ybar = Sigma^+ U^T y` up to level
//! `t0`. Each step then
//!
//! 1. fits the carried generator to the current iterate (original coordinates),
//! 2. composes its estimate `x_pred`,
//! 3. samples the next iterate coordinate-wise from one of three Gaussians,
//!    selected by comparing the target noise level with `sigma_y / s_i`.
//!
//! Generator parameters and Adam moments carry over between steps.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::degradation::DegradationOperator;
use crate::error::{Error, Result};
use crate::schedule::DiffusionSchedule;
use crate::vs2m::{FitConfig, IterateFit, ModelConfig, ObservationFit, OptimizerState, Vs2mModel};

// keeps the sampler's noise stream apart from the generator init streams
const SAMPLER_STREAM: u64 = u64::MAX;

/// Coefficient `a_t` multiplying the generator output in the iterate loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SignalScale {
    /// `a_t = 1`: the iterate is `x_0` plus noise of level `sigma_t`.
    #[default]
    Unit,
    /// `a_t = sqrt(alpha_bar_t)` for the level of the iterate being fitted.
    SqrtAlphaBar,
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub schedule: DiffusionSchedule,
    /// Level the reverse chain starts from; `1 <= t0 < T`.
    pub t0: usize,
    pub eta: f64,
    pub eta_b: f64,
    /// Measurement noise std in the signed11 scale.
    pub sigma_y: f64,
    pub signal_scale: SignalScale,
    pub model: ModelConfig,
    pub fit: FitConfig,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn steps(&self) -> usize {
        self.schedule.steps()
    }

    pub fn validate(&self) -> Result<()> {
        let steps = self.steps();
        if !(self.t0 >= 1 && self.t0 < steps) {
            return Err(Error::Contract(format!(
                "t0 must satisfy 1 <= t0 < T = {steps}, got {}",
                self.t0
            )));
        }
        for (name, v) in [("eta", self.eta), ("eta_b", self.eta_b)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Contract(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        if !(self.sigma_y >= 0.0 && self.sigma_y.is_finite()) {
            return Err(Error::Contract(format!(
                "sigma_y must be >= 0, got {}",
                self.sigma_y
            )));
        }
        if self.model.rank == 0 {
            return Err(Error::Contract("endmember count R must be >= 1".into()));
        }
        self.fit.validate()
    }

    /// `sigma_{t0} >= sigma_y / s_i` for every positive singular value.
    pub fn check_feasible(&self, op: &DegradationOperator) -> Result<()> {
        let sigma_t0 = self.schedule.sigma(self.t0)?;
        // singulars are sorted, so the smallest positive one gives the largest ratio
        if let Some((idx, s)) = op
            .singulars()
            .iter()
            .enumerate()
            .filter(|(_, s)| **s > 0.0)
            .last()
        {
            let ratio = self.sigma_y / s;
            if sigma_t0 < ratio {
                return Err(Error::Infeasible {
                    index: idx + 1,
                    sigma_t0,
                    ratio,
                });
            }
        }
        Ok(())
    }

    /// Noise level of step `t`, with level 0 being clean.
    fn level(&self, t: usize) -> Result<f64> {
        if t == 0 {
            Ok(0.0)
        } else {
            self.schedule.sigma(t)
        }
    }

    fn signal_coefficient(&self, t: usize) -> Result<f64> {
        Ok(match self.signal_scale {
            SignalScale::Unit => 1.0,
            SignalScale::SqrtAlphaBar => self.schedule.alpha_bar(t)?.sqrt(),
        })
    }
}

/// Which branch of the per-coordinate transition applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TransitionCase {
    /// `s_i = 0`: no measurement; pull toward the previous iterate.
    Unobserved = 1,
    /// `sigma_t < sigma_y / s_i`: measurement noisier than the target level.
    NoisyMeasurement = 2,
    /// `sigma_t >= sigma_y / s_i`: blend the measurement in.
    CleanMeasurement = 3,
}

pub fn case_select(s: f64, sigma_t: f64, sigma_y: f64) -> TransitionCase {
    if s == 0.0 {
        TransitionCase::Unobserved
    } else if sigma_t < sigma_y / s {
        TransitionCase::NoisyMeasurement
    } else {
        TransitionCase::CleanMeasurement
    }
}

/// Inputs of one coordinate's transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordinateInputs {
    pub singular: f64,
    /// Current iterate coordinate (noise level `sigma_next`).
    pub xbar: f64,
    pub pred: f64,
    pub ybar: f64,
}

/// Transition levels and knobs shared by all coordinates of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionParams {
    /// Target level of the sample being drawn.
    pub sigma_t: f64,
    /// Level of the current iterate.
    pub sigma_next: f64,
    pub sigma_y: f64,
    pub eta: f64,
    pub eta_b: f64,
}

/// Case, mean and variance of the Gaussian the next coordinate is drawn from.
pub fn transition_moments(
    c: &CoordinateInputs,
    p: &TransitionParams,
) -> (TransitionCase, f64, f64) {
    let case = case_select(c.singular, p.sigma_t, p.sigma_y);
    let history = (1.0 - p.eta * p.eta).max(0.0).sqrt() * p.sigma_t;
    let (mean, var) = match case {
        TransitionCase::Unobserved => {
            let pull = if history == 0.0 {
                0.0
            } else {
                history * (c.xbar - c.pred) / p.sigma_next
            };
            (c.pred + pull, (p.eta * p.sigma_t).powi(2))
        }
        TransitionCase::NoisyMeasurement => {
            let meas = p.sigma_y / c.singular;
            (
                c.pred + history * (c.ybar - c.pred) / meas,
                (p.eta * p.sigma_t).powi(2),
            )
        }
        TransitionCase::CleanMeasurement => {
            let meas = p.sigma_y / c.singular;
            let var = p.sigma_t * p.sigma_t - meas * meas * p.eta_b * p.eta_b;
            (
                (1.0 - p.eta_b) * c.pred + p.eta_b * c.ybar,
                var.max(0.0),
            )
        }
    };
    (case, mean, var)
}

/// How often each transition branch was taken.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CaseCounts {
    pub unobserved: u64,
    pub noisy_measurement: u64,
    pub clean_measurement: u64,
}

impl CaseCounts {
    fn record(&mut self, case: TransitionCase) {
        match case {
            TransitionCase::Unobserved => self.unobserved += 1,
            TransitionCase::NoisyMeasurement => self.noisy_measurement += 1,
            TransitionCase::CleanMeasurement => self.clean_measurement += 1,
        }
    }

    pub fn all_exercised(&self) -> bool {
        self.unobserved > 0 && self.noisy_measurement > 0 && self.clean_measurement > 0
    }
}

#[derive(Debug, Clone)]
pub struct SamplerState {
    /// Level of the current iterate.
    pub t: usize,
    /// Current iterate in spectral coordinates.
    pub xbar: Vec<f64>,
    /// `Sigma^+ U^T y`.
    pub ybar: Vec<f64>,
    pub rng: ChaCha20Rng,
    pub model: Vs2mModel,
    pub optimizer: OptimizerState,
    pub counts: CaseCounts,
}

/// Draws the level-`t0` iterate: `N(ybar_i, sigma_t0^2 - sigma_y^2 / s_i^2)`
/// where `s_i > 0`, `N(0, sigma_t0^2)` elsewhere.
pub fn init_state(op: &DegradationOperator, y: &[f64], cfg: &SamplerConfig) -> Result<SamplerState> {
    cfg.validate()?;
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::Contract(format!("observation has a non-finite value at {i}")));
    }
    cfg.check_feasible(op)?;
    let ybar = op.sigma_pinv_ut(y)?;
    let sigma_t0 = cfg.schedule.sigma(cfg.t0)?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SAMPLER_STREAM);
    let xbar = op
        .singulars()
        .iter()
        .zip(&ybar)
        .map(|(s, yb)| {
            let eps: f64 = rng.sample(StandardNormal);
            if *s > 0.0 {
                let meas = cfg.sigma_y / s;
                let sd = (sigma_t0 * sigma_t0 - meas * meas).max(0.0).sqrt();
                yb + sd * eps
            } else {
                sigma_t0 * eps
            }
        })
        .collect();
    let model = Vs2mModel::init(op.dims(), &cfg.model, cfg.seed)?;
    let optimizer = OptimizerState::new(&model);
    Ok(SamplerState {
        t: cfg.t0,
        xbar,
        ybar,
        rng,
        model,
        optimizer,
        counts: CaseCounts::default(),
    })
}

/// Samples the iterate one level below `state.t` given the generator estimate.
pub fn reverse_step(
    state: &mut SamplerState,
    x_pred: &[f64],
    op: &DegradationOperator,
    cfg: &SamplerConfig,
) -> Result<()> {
    if state.t == 0 {
        return Err(Error::Step {
            step: 0,
            reason: "chain already at level 0".into(),
        });
    }
    if let Some(i) = x_pred.iter().position(|v| !v.is_finite()) {
        return Err(Error::Step {
            step: state.t - 1,
            reason: format!("non-finite generator estimate at index {i}"),
        });
    }
    let pred_bar = op.v_transform(x_pred)?;
    let params = TransitionParams {
        sigma_t: cfg.level(state.t - 1)?,
        sigma_next: cfg.level(state.t)?,
        sigma_y: cfg.sigma_y,
        eta: cfg.eta,
        eta_b: cfg.eta_b,
    };
    for (i, s) in op.singulars().iter().enumerate() {
        let inputs = CoordinateInputs {
            singular: *s,
            xbar: state.xbar[i],
            pred: pred_bar[i],
            ybar: state.ybar[i],
        };
        let (case, mean, var) = transition_moments(&inputs, &params);
        let eps: f64 = state.rng.sample(StandardNormal);
        state.xbar[i] = mean + var.sqrt() * eps;
        state.counts.record(case);
    }
    state.t -= 1;
    Ok(())
}

/// Progress of one reverse step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Level of the iterate produced by this step.
    pub t: usize,
    /// Fit loss before the last Adam update of the step.
    pub loss: f64,
    pub elapsed: Duration,
}

/// Stepwise driver of a restoration run.
pub struct Restoration<'a> {
    op: &'a DegradationOperator,
    cfg: &'a SamplerConfig,
    state: SamplerState,
    started: Instant,
}

impl<'a> Restoration<'a> {
    pub fn new(op: &'a DegradationOperator, y: &[f64], cfg: &'a SamplerConfig) -> Result<Self> {
        let state = init_state(op, y, cfg)?;
        Ok(Restoration {
            op,
            cfg,
            state,
            started: Instant::now(),
        })
    }

    pub fn state(&self) -> &SamplerState {
        &self.state
    }

    pub fn is_done(&self) -> bool {
        self.state.t <= 1
    }

    /// Fit to the current iterate, compose, and sample one level down.
    pub fn step(&mut self) -> Result<StepReport> {
        let t = self.state.t;
        let x_current = self.op.v_inverse(&self.state.xbar)?;
        let scale = self.cfg.signal_coefficient(t)?;
        let objective = IterateFit {
            target: &x_current,
            scale,
        };
        let report = self.state.model.fit(
            &objective,
            &self.cfg.fit,
            &mut self.state.optimizer,
            t - 1,
        )?;
        let x_pred = self.state.model.compose();
        reverse_step(&mut self.state, &x_pred, self.op, self.cfg)?;
        Ok(StepReport {
            t: self.state.t,
            loss: report.last_loss(),
            elapsed: self.started.elapsed(),
        })
    }

    /// Current iterate in original coordinates, clamped to `[-1, 1]`.
    pub fn output(&self) -> Result<Vec<f64>> {
        Ok(self
            .op
            .v_inverse(&self.state.xbar)?
            .into_iter()
            .map(|v| v.clamp(-1.0, 1.0))
            .collect())
    }

    pub fn into_state(self) -> SamplerState {
        self.state
    }
}

#[derive(Debug, Clone)]
pub struct RestoreOutput {
    /// Restored cube in vec order, signed11 scale, clamped to `[-1, 1]`.
    pub x0: Vec<f64>,
    pub counts: CaseCounts,
    pub losses: Vec<f64>,
}

/// Full reverse chain from `t0` down to level 1.
pub fn restore(
    y: &[f64],
    op: &DegradationOperator,
    cfg: &SamplerConfig,
    progress: &mut dyn FnMut(&StepReport),
) -> Result<RestoreOutput> {
    let mut run = Restoration::new(op, y, cfg)?;
    let mut losses = Vec::with_capacity(cfg.t0.saturating_sub(1));
    while !run.is_done() {
        let report = run.step()?;
        losses.push(report.loss);
        progress(&report);
    }
    let x0 = run.output()?;
    Ok(RestoreOutput {
        x0,
        counts: run.state.counts,
        losses,
    })
}

/// Ablation without the diffusion chain: fit `||y - H x||^2` directly for
/// `T * iters_per_step` Adam updates.
pub fn restore_no_diffusion(
    y: &[f64],
    op: &DegradationOperator,
    cfg: &SamplerConfig,
    progress: &mut dyn FnMut(&StepReport),
) -> Result<RestoreOutput> {
    let budget = cfg.steps() * cfg.fit.iters_per_step;
    restore_no_diffusion_with_budget(y, op, cfg, budget, progress)
}

/// As [`restore_no_diffusion`] with an explicit number of Adam updates.
pub fn restore_no_diffusion_with_budget(
    y: &[f64],
    op: &DegradationOperator,
    cfg: &SamplerConfig,
    total_iters: usize,
    progress: &mut dyn FnMut(&StepReport),
) -> Result<RestoreOutput> {
    cfg.validate()?;
    if y.len() != op.output_len() {
        return Err(Error::DimensionMismatch {
            context: "observation",
            expected: op.output_len(),
            got: y.len(),
        });
    }
    let started = Instant::now();
    let mut model = Vs2mModel::init(op.dims(), &cfg.model, cfg.seed)?;
    let mut optimizer = OptimizerState::new(&model);
    let objective = ObservationFit { op, observation: y };
    let chunk = cfg.fit.iters_per_step;
    let mut losses = Vec::new();
    let mut done = 0;
    let mut round = 0;
    while done < total_iters {
        let iters = chunk.min(total_iters - done);
        let report = model.fit_iters(&objective, &cfg.fit, &mut optimizer, round, iters)?;
        done += iters;
        round += 1;
        losses.push(report.last_loss());
        progress(&StepReport {
            t: total_iters - done,
            loss: report.last_loss(),
            elapsed: started.elapsed(),
        });
    }
    let x0 = model
        .compose()
        .into_iter()
        .map(|v| v.clamp(-1.0, 1.0))
        .collect();
    Ok(RestoreOutput {
        x0,
        counts: CaseCounts::default(),
        losses,
    })
}
