//! Pathwise sampling of the learned system and fixed-step rollouts with
//! passivity auditing.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::features::{FourierPrior, PathwiseFunction};
use crate::pipeline::{HamiltonianGp, TrainedModel};
use crate::registry::Registry;
use crate::seed;
use crate::sphs::{rhs_unchecked, GradientField, SphsStructure, SwitchingPolicy};

pub const DEFAULT_FEATURES: usize = 1024;

/// A pathwise posterior sample of `∇Ĥ`, one function per component.
#[derive(Debug, Clone)]
pub struct PathwiseGradient {
    pub seed: u64,
    pub feature_count: usize,
    components: Vec<PathwiseFunction>,
}

impl PathwiseGradient {
    pub fn component(&self, j: usize) -> &PathwiseFunction {
        &self.components[j]
    }
}

impl GradientField for PathwiseGradient {
    fn dim(&self) -> usize {
        self.components.len()
    }
    fn gradient(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.components.len(),
            self.components.iter().map(|c| c.eval(x)),
        )
    }
}

/// Matheron's rule: prior draw from random Fourier features plus the kernel-basis
/// correction `k(x, X) K⁻¹ (y − f_prior(X) − ε)` with `ε` drawn at the training noise.
pub fn sample_gradient_field(
    hgp: &HamiltonianGp,
    feature_count: usize,
    seed: u64,
) -> PathwiseGradient {
    let components = hgp
        .models
        .iter()
        .enumerate()
        .map(|(j, m)| {
            let mut rng = seed::rng(seed, "gradient-dim", j as u64);
            let prior = FourierPrior::sample(m.params(), feature_count, &mut rng);
            let n = m.len();
            let coeffs = if n == 0 {
                DVector::zeros(0)
            } else {
                let fx = prior.eval_rows(m.inputs());
                let resid = DVector::from_iterator(
                    n,
                    (0..n).map(|i| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        let eps = (m.noise()[i] + m.jitter()).sqrt() * z;
                        m.targets()[i] - fx[i] - eps
                    }),
                );
                m.solve(&resid)
            };
            PathwiseFunction::new(prior, m.params().clone(), m.inputs().clone(), coeffs)
        })
        .collect();
    PathwiseGradient {
        seed,
        feature_count,
        components,
    }
}

/// One fixed step of `ẋ = f(t, x)`.
pub trait Integrator: Send + Sync {
    fn name(&self) -> &'static str;
    fn step(
        &self,
        f: &dyn Fn(f64, &[f64]) -> DVector<f64>,
        t: f64,
        x: &[f64],
        dt: f64,
    ) -> DVector<f64>;
}

pub struct Euler;

impl Integrator for Euler {
    fn name(&self) -> &'static str {
        "euler"
    }
    fn step(
        &self,
        f: &dyn Fn(f64, &[f64]) -> DVector<f64>,
        t: f64,
        x: &[f64],
        dt: f64,
    ) -> DVector<f64> {
        DVector::from_column_slice(x) + dt * f(t, x)
    }
}

/// Classical fourth-order Runge–Kutta. The mode stays frozen within a step.
pub struct Rk4;

impl Integrator for Rk4 {
    fn name(&self) -> &'static str {
        "rk4"
    }
    fn step(
        &self,
        f: &dyn Fn(f64, &[f64]) -> DVector<f64>,
        t: f64,
        x: &[f64],
        dt: f64,
    ) -> DVector<f64> {
        let x0 = DVector::from_column_slice(x);
        let k1 = f(t, x);
        let x1 = &x0 + 0.5 * dt * &k1;
        let k2 = f(t + 0.5 * dt, x1.as_slice());
        let x2 = &x0 + 0.5 * dt * &k2;
        let k3 = f(t + 0.5 * dt, x2.as_slice());
        let x3 = &x0 + dt * &k3;
        let k4 = f(t + dt, x3.as_slice());
        x0 + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    }
}

pub fn integrator_registry() -> Registry<Arc<dyn Integrator>, ()> {
    let mut reg = Registry::new("integrator");
    reg.register("euler", |_: &()| Ok(Arc::new(Euler) as Arc<dyn Integrator>));
    reg.register("rk4", |_: &()| Ok(Arc::new(Rk4) as Arc<dyn Integrator>));
    reg
}

/// External input `u(t)`.
pub type InputSignal<'a> = &'a (dyn Fn(f64) -> Vec<f64> + Sync);

/// Simulation settings. Times in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub x0: Vec<f64>,
    pub t_span: [f64; 2],
    pub dt: f64,
    pub n_samples: usize,
    pub feature_count: usize,
    pub seed: u64,
    pub integrator: String,
    /// Multiplier on the step-halving estimate of the per-step energy error.
    pub budget_safety: f64,
    /// Fixed budget constant `c`; calibrated per rollout when absent.
    pub budget_constant: Option<f64>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            x0: vec![0.5, 1.5, 0.0],
            t_span: [0.0, 3.0],
            dt: 1e-3,
            n_samples: 3,
            feature_count: DEFAULT_FEATURES,
            seed: 0,
            integrator: "euler".into(),
            budget_safety: 2.0,
            budget_constant: None,
        }
    }
}

impl SimulationConfig {
    /// Number of steps; the rollout has one more row.
    pub fn n_steps(&self) -> Result<usize> {
        let span = self.t_span[1] - self.t_span[0];
        if !(self.dt > 0.0 && self.dt.is_finite()) || !(span > 0.0 && span.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "need dt > 0 and t_span[1] > t_span[0], got dt {} and span {:?}",
                self.dt, self.t_span
            )));
        }
        Ok((span / self.dt).round() as usize)
    }
}

/// One simulated trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub times: Vec<f64>,
    pub states: DMatrix<f64>,
    pub modes: Vec<usize>,
    /// Line integral of the gradient field along the path, anchored at 0.
    pub energy: Vec<f64>,
    /// `uᵀy` at each row.
    pub supply: Vec<f64>,
    /// Per-step energy error constant `c`, when calibrated.
    pub budget_constant: Option<f64>,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, k: usize) -> Vec<f64> {
        self.states.row(k).iter().copied().collect()
    }
}

fn eval_input(u: Option<InputSignal>, t: f64, m: usize) -> Vec<f64> {
    match u {
        Some(f) => f(t),
        None => vec![0.0; m],
    }
}

/// Fixed-step integration with the mode re-evaluated from the policy at every step.
#[allow(clippy::too_many_arguments)]
pub fn integrate(
    structure: &dyn SphsStructure,
    grad: &dyn GradientField,
    policy: &dyn SwitchingPolicy,
    x0: &[f64],
    u: Option<InputSignal>,
    t_span: [f64; 2],
    dt: f64,
    integrator: &dyn Integrator,
) -> Result<Rollout> {
    let n = structure.state_dim();
    let m = structure.input_dim();
    check_dim("x0", n, x0.len())?;
    check_dim("gradient field", n, grad.dim())?;
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("x0 must be finite".into()));
    }
    let cfg = SimulationConfig {
        t_span,
        dt,
        ..SimulationConfig::default()
    };
    let steps = cfg.n_steps()?;

    let mut times = Vec::with_capacity(steps + 1);
    let mut states = DMatrix::zeros(steps + 1, n);
    let mut modes = Vec::with_capacity(steps + 1);
    let mut energy = Vec::with_capacity(steps + 1);
    let mut supply = Vec::with_capacity(steps + 1);

    let mut x = x0.to_vec();
    let mut mode = 0;
    let mut h = 0.0;
    for k in 0..=steps {
        let t = t_span[0] + k as f64 * dt;
        mode = policy.mode(&x, mode);
        if mode == 0 || mode > structure.n_modes() {
            return Err(Error::InvalidMode {
                mode,
                n_modes: structure.n_modes(),
            });
        }
        let g = grad.gradient(&x);
        let uk = eval_input(u, t, m);
        check_dim("input signal", m, uk.len())?;
        let y = structure.port(&x).transpose() * &g;
        times.push(t);
        states.row_mut(k).copy_from_slice(&x);
        modes.push(mode);
        energy.push(h);
        supply.push(uk.iter().zip(y.iter()).map(|(a, b)| a * b).sum());
        if k == steps {
            break;
        }
        let frozen = mode;
        let f = |tt: f64, xx: &[f64]| -> DVector<f64> {
            let gg = grad.gradient(xx);
            rhs_unchecked(structure, &gg, frozen, xx, &eval_input(u, tt, m))
        };
        let next = integrator.step(&f, t, &x, dt);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                step: k + 1,
                last_finite: x,
            });
        }
        h += g
            .iter()
            .zip(next.iter().zip(&x))
            .map(|(gi, (a, b))| gi * (a - b))
            .sum::<f64>();
        x = next.as_slice().to_vec();
    }
    Ok(Rollout {
        times,
        states,
        modes,
        energy,
        supply,
        budget_constant: None,
    })
}

/// Estimates the per-step energy error constant `c` by comparing, from every
/// state of `rollout`, one step of size `dt` with two steps of size `dt/2`.
pub fn calibrate_budget(
    structure: &dyn SphsStructure,
    grad: &dyn GradientField,
    policy: &dyn SwitchingPolicy,
    rollout: &Rollout,
    u: Option<InputSignal>,
    integrator: &dyn Integrator,
) -> f64 {
    let m = structure.input_dim();
    let mut c: f64 = 0.0;
    for k in 0..rollout.len().saturating_sub(1) {
        let dt = rollout.times[k + 1] - rollout.times[k];
        let t = rollout.times[k];
        let x = rollout.state(k);
        let mode = rollout.modes[k];
        let f = |tt: f64, xx: &[f64]| -> DVector<f64> {
            let gg = grad.gradient(xx);
            rhs_unchecked(structure, &gg, mode, xx, &eval_input(u, tt, m))
        };
        let g0 = grad.gradient(&x);
        let full = integrator.step(&f, t, &x, dt);
        let half = integrator.step(&f, t, &x, 0.5 * dt);
        let mid_mode = policy.mode(half.as_slice(), mode);
        let f_mid = |tt: f64, xx: &[f64]| -> DVector<f64> {
            let gg = grad.gradient(xx);
            rhs_unchecked(structure, &gg, mid_mode, xx, &eval_input(u, tt, m))
        };
        let g_mid = grad.gradient(half.as_slice());
        let two = integrator.step(&f_mid, t + 0.5 * dt, half.as_slice(), 0.5 * dt);
        let x0 = DVector::from_column_slice(&x);
        let d_full = g0.dot(&(&full - &x0));
        let d_two = g0.dot(&(&half - &x0)) + g_mid.dot(&(&two - &half));
        let rate = (&full - &x0).norm_squared() / (dt * dt);
        c = c.max((d_full - d_two).abs() / (dt * dt * rate.max(1.0)));
    }
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub steps: usize,
    pub violations: usize,
    /// Largest `ΔĤ − supply·dt − ε` over all steps; positive means a violation.
    pub worst_margin: f64,
    pub worst_step: usize,
    pub budget_constant: f64,
    /// Steps whose mode differs from the previous one.
    pub switches: usize,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// Per-step tolerance `c·dt²·max(1, ‖rhs‖²)` plus a floating-point floor
/// relative to the energy scale.
pub fn step_budget(c: f64, dt: f64, rate_sq: f64, energy_scale: f64, grad_dx: f64) -> f64 {
    c * dt * dt * rate_sq.max(1.0) + 64.0 * f64::EPSILON * (energy_scale.max(1.0) + grad_dx)
}

/// Checks `ΔĤ_k ≤ supply_k·dt + ε_k` for every step. `fallback_c` is used when
/// the rollout carries no calibrated constant.
pub fn passivity_audit(rollout: &Rollout, fallback_c: Option<f64>) -> AuditReport {
    let c = rollout.budget_constant.or(fallback_c).unwrap_or(0.0);
    let mut report = AuditReport {
        steps: rollout.len().saturating_sub(1),
        violations: 0,
        worst_margin: f64::NEG_INFINITY,
        worst_step: 0,
        budget_constant: c,
        switches: 0,
    };
    for k in 0..report.steps {
        let dt = rollout.times[k + 1] - rollout.times[k];
        let dx = rollout.states.row(k + 1) - rollout.states.row(k);
        let rate_sq = dx.norm_squared() / (dt * dt);
        let dh = rollout.energy[k + 1] - rollout.energy[k];
        let scale = rollout.energy[k].abs().max(rollout.energy[k + 1].abs());
        let eps = step_budget(c, dt, rate_sq, scale, dh.abs());
        let margin = dh - rollout.supply[k] * dt - eps;
        if margin > 0.0 {
            report.violations += 1;
        }
        if margin > report.worst_margin {
            report.worst_margin = margin;
            report.worst_step = k;
        }
        if rollout.modes[k + 1] != rollout.modes[k] {
            report.switches += 1;
        }
    }
    report
}

/// Draws one gradient field and one switching policy per sample with derived
/// seeds and integrates each. Failed samples are reported in place.
pub fn rollout_ensemble(
    model: &TrainedModel,
    structure: &dyn SphsStructure,
    x0: &[f64],
    u: Option<InputSignal>,
    config: &SimulationConfig,
) -> Result<Vec<Result<Rollout>>> {
    if config.n_samples == 0 {
        return Err(Error::InvalidArgument(
            "n_samples must be at least 1".into(),
        ));
    }
    let integrator = integrator_registry().build(&config.integrator, &())?;
    config.n_steps()?;
    Ok((0..config.n_samples)
        .into_par_iter()
        .map(|i| {
            let s = seed::derive(config.seed, "rollout", i as u64);
            let grad = sample_gradient_field(
                &model.hamiltonian,
                config.feature_count,
                seed::derive(s, "gradient", 0),
            );
            let policy = model
                .classifier
                .sample_switching_policy(seed::derive(s, "policy", 0), config.feature_count);
            let mut ro = integrate(
                structure,
                &grad,
                &policy,
                x0,
                u,
                config.t_span,
                config.dt,
                integrator.as_ref(),
            )
            .map_err(|e| e.in_stage(format!("sample {i}")))?;
            ro.budget_constant = Some(match config.budget_constant {
                Some(c) => c,
                None => {
                    config.budget_safety
                        * calibrate_budget(structure, &grad, &policy, &ro, u, integrator.as_ref())
                }
            });
            Ok(ro)
        })
        .collect())
}

/// Largest normalized loop integral `|∮ ∇Ĥ·dl| / (π ρ²)` over circles of radius
/// `radius` in every coordinate plane around each point; zero for a conservative field.
pub fn non_conservativity(grad: &dyn GradientField, points: &[Vec<f64>], radius: f64) -> f64 {
    const SEGMENTS: usize = 64;
    let n = grad.dim();
    let mut worst: f64 = 0.0;
    for p in points {
        for a in 0..n {
            for b in a + 1..n {
                let mut loop_sum = 0.0;
                for s in 0..SEGMENTS {
                    let th0 = std::f64::consts::TAU * s as f64 / SEGMENTS as f64;
                    let th1 = std::f64::consts::TAU * (s + 1) as f64 / SEGMENTS as f64;
                    let mid = 0.5 * (th0 + th1);
                    let mut x = p.clone();
                    x[a] += radius * mid.cos();
                    x[b] += radius * mid.sin();
                    let g = grad.gradient(&x);
                    loop_sum += g[a] * radius * (th1.cos() - th0.cos())
                        + g[b] * radius * (th1.sin() - th0.sin());
                }
                worst = worst.max(loop_sum.abs() / (std::f64::consts::PI * radius * radius));
            }
        }
    }
    worst
}
