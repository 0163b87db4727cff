//! Hopper-robot benchmark: ground-truth plant, noisy dataset generation, and
//! evaluation metrics for a trained model.
//!
//! State is `(x1, x2, x3)`: spring length, body height, body momentum. The
//! contact variable `s ∈ {0, 1}` maps to mode ids `{1, 2}`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{TrainedModel, TrajectoryDataset};
use crate::seed;
use crate::simulate::{passivity_audit, rollout_ensemble, AuditReport, Rollout, SimulationConfig};
use crate::sphs::{GradientField, SphsStructure};

pub const FLIGHT: usize = 1;
pub const CONTACT: usize = 2;

/// Interconnection/dissipation split of the hopper's combined matrix
/// `[[(s−1)/d, 0, s], [0, 0, 1], [−s, −1, −s·d]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HopperStructure {
    damping: f64,
}

impl HopperStructure {
    pub fn new(damping: f64) -> Result<Self> {
        if !(damping.is_finite() && damping > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "hopper damping must be positive, got {damping}"
            )));
        }
        Ok(HopperStructure { damping })
    }

    fn contact(mode: usize) -> f64 {
        if mode == CONTACT {
            1.0
        } else {
            0.0
        }
    }
}

impl SphsStructure for HopperStructure {
    fn state_dim(&self) -> usize {
        3
    }
    fn input_dim(&self) -> usize {
        0
    }
    fn n_modes(&self) -> usize {
        2
    }
    fn interconnection(&self, mode: usize, _x: &[f64]) -> DMatrix<f64> {
        let s = Self::contact(mode);
        DMatrix::from_row_slice(3, 3, &[0.0, 0.0, s, 0.0, 0.0, 1.0, -s, -1.0, 0.0])
    }
    fn dissipation(&self, mode: usize, _x: &[f64]) -> DMatrix<f64> {
        let s = Self::contact(mode);
        DMatrix::from_diagonal(&DVector::from_vec(vec![
            (1.0 - s) / self.damping,
            0.0,
            s * self.damping,
        ]))
    }
    fn port(&self, _x: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(3, 0)
    }
}

/// Physical constants of the ground-truth plant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HopperParams {
    /// kg
    pub mass: f64,
    pub damping: f64,
    /// m/s²
    pub gravity: f64,
    /// Spring rest length, m.
    pub rest_length: f64,
    /// Linear spring stiffness, N/m.
    pub stiffness: f64,
    /// Cubic spring stiffness, N/m³.
    pub stiffness_cubic: f64,
}

impl Default for HopperParams {
    fn default() -> Self {
        HopperParams {
            mass: 1.0,
            damping: 2.0,
            gravity: 9.81,
            rest_length: 0.7,
            stiffness: 200.0,
            stiffness_cubic: 400.0,
        }
    }
}

impl HopperParams {
    pub fn structure(&self) -> Result<HopperStructure> {
        HopperStructure::new(self.damping)
    }

    /// `V'(x1)`.
    pub fn spring_force(&self, x1: f64) -> f64 {
        let e = x1 - self.rest_length;
        self.stiffness * e + self.stiffness_cubic * e * e * e
    }
}

/// `H(x) = x3²/(2m) + m·g·x2 + (k/2)(x1−r)² + (k_nl/4)(x1−r)⁴`.
#[derive(Debug, Clone, Copy)]
pub struct HopperHamiltonian(pub HopperParams);

impl GradientField for HopperHamiltonian {
    fn dim(&self) -> usize {
        3
    }
    fn gradient(&self, x: &[f64]) -> DVector<f64> {
        let p = &self.0;
        DVector::from_vec(vec![
            p.spring_force(x[0]),
            p.mass * p.gravity,
            x[2] / p.mass,
        ])
    }
    fn potential(&self, x: &[f64]) -> Option<f64> {
        let p = &self.0;
        let e = x[0] - p.rest_length;
        Some(
            x[2] * x[2] / (2.0 * p.mass)
                + p.mass * p.gravity * x[1]
                + 0.5 * p.stiffness * e * e
                + 0.25 * p.stiffness_cubic * e.powi(4),
        )
    }
}

/// Ground-truth contact logic with hysteresis: touchdown when the foot reaches
/// the ground, lift-off once the spring is back at rest length while moving up.
pub fn hopper_mode_logic(params: &HopperParams, x: &[f64], previous: usize) -> usize {
    if previous == CONTACT {
        if x[0] >= params.rest_length && x[2] > 0.0 {
            FLIGHT
        } else {
            CONTACT
        }
    } else if x[1] - x[0] <= 0.0 {
        CONTACT
    } else {
        FLIGHT
    }
}

/// Noiseless trajectory sampled on a regular grid.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub times: Vec<f64>,
    pub states: DMatrix<f64>,
    pub modes: Vec<usize>,
}

/// Integrates the plant with RK4 at `fine_dt`, applying the mode logic after
/// every step and snapping `x1 = x2` at touchdown. Samples every
/// `steps_per_sample` fine steps, `n_samples` samples starting at `t0`.
pub fn simulate_ground_truth(
    params: &HopperParams,
    x0: &[f64],
    t0: f64,
    fine_dt: f64,
    steps_per_sample: usize,
    n_samples: usize,
) -> Result<GroundTruth> {
    let structure = params.structure()?;
    let h = HopperHamiltonian(*params);
    let f = |mode: usize, x: &[f64]| -> [f64; 3] {
        let r = structure.combined(mode, x) * h.gradient(x);
        [r[0], r[1], r[2]]
    };
    let mut x = [x0[0], x0[1], x0[2]];
    let mut mode = hopper_mode_logic(params, &x, FLIGHT);
    if mode == CONTACT {
        x[0] = x[1];
    }
    let mut times = Vec::with_capacity(n_samples);
    let mut states = DMatrix::zeros(n_samples, 3);
    let mut modes = Vec::with_capacity(n_samples);
    let mut step = 0usize;
    for k in 0..n_samples {
        let target = k * steps_per_sample;
        while step < target {
            let k1 = f(mode, &x);
            let k2 = f(mode, &add(&x, &k1, 0.5 * fine_dt));
            let k3 = f(mode, &add(&x, &k2, 0.5 * fine_dt));
            let k4 = f(mode, &add(&x, &k3, fine_dt));
            for i in 0..3 {
                x[i] += fine_dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            let next = hopper_mode_logic(params, &x, mode);
            if next == CONTACT && mode == FLIGHT {
                x[0] = x[1];
            }
            mode = next;
            step += 1;
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    step,
                    last_finite: states.row(k.saturating_sub(1)).iter().copied().collect(),
                });
            }
        }
        times.push(t0 + (target as f64) * fine_dt);
        states.row_mut(k).copy_from_slice(&x);
        modes.push(mode);
    }
    Ok(GroundTruth {
        times,
        states,
        modes,
    })
}

fn add(x: &[f64; 3], k: &[f64; 3], h: f64) -> [f64; 3] {
    [x[0] + h * k[0], x[1] + h * k[1], x[2] + h * k[2]]
}

/// Dataset generation settings. Times in seconds; SNR in dB per state dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub n_traj: usize,
    pub t_span: [f64; 2],
    pub sample_dt: f64,
    /// `inf` leaves a dimension noiseless.
    pub snr_db: Vec<f64>,
    /// Ground-truth integration step, s.
    pub fine_dt: f64,
    pub seed: u64,
    pub hopper: HopperParams,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_traj: 20,
            t_span: [0.0, 5.0],
            sample_dt: 0.1,
            snr_db: vec![39.0, 34.0, 18.0],
            fine_dt: 1e-4,
            seed: 0,
            hopper: HopperParams::default(),
        }
    }
}

impl DatasetConfig {
    /// Samples per trajectory on the half-open span.
    pub fn samples_per_trajectory(&self) -> usize {
        ((self.t_span[1] - self.t_span[0]) / self.sample_dt - 1e-9).ceil() as usize
    }

    fn steps_per_sample(&self) -> Result<usize> {
        let r = self.sample_dt / self.fine_dt;
        let k = r.round();
        if k < 1.0 || (r - k).abs() > 1e-6 * r {
            return Err(Error::InvalidArgument(format!(
                "sample_dt {} must be an integer multiple of fine_dt {}",
                self.sample_dt, self.fine_dt
            )));
        }
        Ok(k as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_traj == 0 {
            return Err(Error::InvalidArgument("n_traj must be positive".into()));
        }
        if !(self.t_span[1] > self.t_span[0]) || !(self.sample_dt > 0.0) || !(self.fine_dt > 0.0) {
            return Err(Error::InvalidArgument(
                "need t_span[1] > t_span[0] and positive steps".into(),
            ));
        }
        if self.snr_db.len() != 3 {
            return Err(Error::Dimension {
                context: "snr_db",
                expected: 3,
                actual: self.snr_db.len(),
            });
        }
        self.steps_per_sample().map(|_| ())
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub dataset: TrajectoryDataset,
    pub clean_states: DMatrix<f64>,
    pub initial_states: Vec<[f64; 3]>,
    pub realized_snr_db: Vec<f64>,
}

/// Draws a flight-phase initial state uniformly from `[0,1]×[0,2]×[−1,1]`.
pub fn draw_flight_x0(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let x = [
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..2.0),
            rng.random_range(-1.0..1.0),
        ];
        if x[1] - x[0] > 0.0 {
            return x;
        }
    }
}

/// Simulates `n_traj` hopper runs and adds Gaussian noise at the requested SNR,
/// pooled over all trajectories per state dimension.
pub fn generate_dataset(config: &DatasetConfig) -> Result<GeneratedDataset> {
    config.validate()?;
    let per = config.samples_per_trajectory();
    let sps = config.steps_per_sample()?;
    let runs: Vec<Result<([f64; 3], GroundTruth)>> = (0..config.n_traj)
        .into_par_iter()
        .map(|k| {
            let mut rng = seed::rng(config.seed, "x0", k as u64);
            let x0 = draw_flight_x0(&mut rng);
            let gt = simulate_ground_truth(
                &config.hopper,
                &x0,
                config.t_span[0],
                config.fine_dt,
                sps,
                per,
            )?;
            Ok((x0, gt))
        })
        .collect();

    let total = per * config.n_traj;
    let mut times = Vec::with_capacity(total);
    let mut clean = DMatrix::zeros(total, 3);
    let mut modes = Vec::with_capacity(total);
    let mut ids = Vec::with_capacity(total);
    let mut initial_states = Vec::with_capacity(config.n_traj);
    for (k, run) in runs.into_iter().enumerate() {
        let (x0, gt) = run?;
        initial_states.push(x0);
        for i in 0..per {
            let row = k * per + i;
            times.push(gt.times[i]);
            clean.row_mut(row).copy_from(&gt.states.row(i));
            modes.push(gt.modes[i]);
            ids.push(k);
        }
    }

    let mut noisy = clean.clone();
    let mut realized = Vec::with_capacity(3);
    let mut rng = seed::rng(config.seed, "noise", 0);
    for j in 0..3 {
        let z: Vec<f64> = (0..total)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let snr = config.snr_db[j];
        if snr.is_infinite() && snr > 0.0 {
            realized.push(f64::INFINITY);
            continue;
        }
        let signal = clean.column(j).norm_squared() / total as f64;
        let z_power = z.iter().map(|v| v * v).sum::<f64>() / total as f64;
        let scale = (signal / 10f64.powf(snr / 10.0) / z_power).sqrt();
        let mut noise_power = 0.0;
        for (i, zi) in z.iter().enumerate() {
            let e = scale * zi;
            noisy[(i, j)] += e;
            noise_power += e * e;
        }
        noise_power /= total as f64;
        realized.push(10.0 * (signal / noise_power).log10());
    }

    let dataset = TrajectoryDataset::new(times, noisy, DMatrix::zeros(total, 0), modes, ids)?;
    Ok(GeneratedDataset {
        dataset,
        clean_states: clean,
        initial_states,
        realized_snr_db: realized,
    })
}

/// Evaluation settings. Times in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateConfig {
    pub test_x0: Vec<f64>,
    pub horizon: f64,
    pub simulation: SimulationConfig,
    pub hopper: HopperParams,
    pub min_accuracy: f64,
    pub max_mse: f64,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            test_x0: vec![0.5, 1.5, 0.0],
            horizon: 3.0,
            simulation: SimulationConfig {
                n_samples: 3,
                ..SimulationConfig::default()
            },
            hopper: HopperParams::default(),
            min_accuracy: 0.95,
            max_mse: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub classifier_accuracy: f64,
    pub trajectory_mse: f64,
    pub per_sample_mse: Vec<f64>,
    pub failed_samples: Vec<String>,
    pub audits: Vec<AuditReport>,
    pub passivity_violations: usize,
    pub accuracy_ok: bool,
    pub mse_ok: bool,
    pub passivity_ok: bool,
}

impl Metrics {
    pub fn all_ok(&self) -> bool {
        self.accuracy_ok && self.mse_ok && self.passivity_ok
    }
}

/// Evaluates a trained hopper model. Returns the metrics, the rollouts and the
/// elapsed wall-clock seconds.
pub fn evaluate(
    model: &TrainedModel,
    config: &EvaluateConfig,
) -> Result<(Metrics, Vec<Rollout>, f64)> {
    let start = Instant::now();
    let structure = model.build_structure()?;
    let sim = SimulationConfig {
        t_span: [0.0, config.horizon],
        ..config.simulation.clone()
    };
    let steps = sim.n_steps()?;
    let fine = 10;
    let truth = simulate_ground_truth(
        &config.hopper,
        &config.test_x0,
        0.0,
        sim.dt / fine as f64,
        fine,
        steps + 1,
    )?;
    let results = rollout_ensemble(model, structure.as_ref(), &config.test_x0, None, &sim)?;

    let mut rollouts = Vec::new();
    let mut failed = Vec::new();
    let mut per_sample = Vec::new();
    let mut audits = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(ro) => {
                let diff = &ro.states - &truth.states;
                per_sample.push(diff.norm_squared() / diff.len() as f64);
                audits.push(passivity_audit(&ro, sim.budget_constant));
                rollouts.push(ro);
            }
            Err(e) => failed.push(format!("sample {i}: {e}")),
        }
    }
    let mse = if per_sample.is_empty() || !failed.is_empty() {
        f64::INFINITY
    } else {
        per_sample.iter().sum::<f64>() / per_sample.len() as f64
    };
    let violations = audits.iter().map(|a| a.violations).sum();
    let accuracy = model.classifier.training_accuracy();
    let metrics = Metrics {
        classifier_accuracy: accuracy,
        trajectory_mse: mse,
        per_sample_mse: per_sample,
        failed_samples: failed,
        audits,
        passivity_violations: violations,
        accuracy_ok: accuracy >= config.min_accuracy,
        mse_ok: mse <= config.max_mse,
        passivity_ok: violations == 0,
    };
    Ok((metrics, rollouts, start.elapsed().as_secs_f64()))
}
