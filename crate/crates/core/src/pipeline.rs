//! Training: per-trajectory surrogate GPs over time, reconstruction of
//! Hamiltonian-gradient targets through the recoverable subspace of
//! `J_s − R_s`, heteroscedastic gradient GPs, and the switching classifier.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classification::{train_classifier, ClassifierConfig, SwitchingClassifier};
use crate::error::{check_dim, Error, Result};
use crate::kernel::KernelParams;
use crate::regression::{fit_optimized, GpModel, HyperOptConfig, NoiseForm};
use crate::seed;
use crate::sphs::{validate_structure, GradientField, SphsStructure};
use crate::structures::StructureDef;

/// Archive format version written into every [`TrainedModel`].
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Relative singular-value cutoff for the rank of `J_s − R_s`.
pub const RANK_TOL: f64 = 1e-8;

/// Observed trajectories, possibly several stacked and told apart by `trajectory_id`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub times: Vec<f64>,
    pub states: DMatrix<f64>,
    pub inputs: DMatrix<f64>,
    pub modes: Vec<usize>,
    pub trajectory_id: Vec<usize>,
}

impl TrajectoryDataset {
    pub fn new(
        times: Vec<f64>,
        states: DMatrix<f64>,
        inputs: DMatrix<f64>,
        modes: Vec<usize>,
        trajectory_id: Vec<usize>,
    ) -> Result<Self> {
        let n = times.len();
        check_dim("dataset states rows", n, states.nrows())?;
        check_dim("dataset inputs rows", n, inputs.nrows())?;
        check_dim("dataset modes", n, modes.len())?;
        check_dim("dataset trajectory ids", n, trajectory_id.len())?;
        if let Some(i) = modes.iter().position(|m| *m == 0) {
            return Err(Error::InvalidArgument(format!(
                "row {i}: mode ids start at 1"
            )));
        }
        let mut last: BTreeMap<usize, f64> = BTreeMap::new();
        for (i, (&t, &id)) in times.iter().zip(&trajectory_id).enumerate() {
            if !t.is_finite() {
                return Err(Error::InvalidArgument(format!("row {i}: non-finite time")));
            }
            if let Some(prev) = last.insert(id, t) {
                if t <= prev {
                    return Err(Error::InvalidArgument(format!(
                        "row {i}: time {t} not strictly increasing within trajectory {id}"
                    )));
                }
            }
        }
        Ok(TrajectoryDataset {
            times,
            states,
            inputs,
            modes,
            trajectory_id,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.states.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    /// Row indices of each trajectory, in order of first appearance.
    pub fn trajectories(&self) -> Vec<(usize, Vec<usize>)> {
        let mut order: Vec<usize> = Vec::new();
        let mut rows: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, id) in self.trajectory_id.iter().enumerate() {
            rows.entry(*id)
                .or_insert_with(|| {
                    order.push(*id);
                    Vec::new()
                })
                .push(i);
        }
        order
            .into_iter()
            .map(|id| (id, rows.remove(&id).unwrap_or_default()))
            .collect()
    }
}

/// Hyperparameters learned for one (trajectory, state dimension) surrogate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurrogateFit {
    pub trajectory_id: usize,
    pub dim: usize,
    pub params: KernelParams,
    pub noise_var: f64,
    pub nlml: f64,
    pub converged: bool,
}

/// Denoised states, derivative estimates and their variances, row-aligned with the dataset.
#[derive(Debug, Clone)]
pub struct SurrogateOutput {
    pub denoised: DMatrix<f64>,
    pub derivative: DMatrix<f64>,
    pub derivative_var: DMatrix<f64>,
    pub fits: Vec<SurrogateFit>,
}

/// Fits an independent time-GP with learned noise to every state dimension of every trajectory.
pub fn fit_surrogate(
    dataset: &TrajectoryDataset,
    config: &HyperOptConfig,
    seed: u64,
) -> Result<SurrogateOutput> {
    let n = dataset.state_dim();
    let trajs = dataset.trajectories();
    if let Some((id, rows)) = trajs.iter().find(|(_, r)| r.len() < 3) {
        return Err(Error::InvalidArgument(format!(
            "trajectory {id} has {} samples; at least 3 are required",
            rows.len()
        )));
    }
    let tasks: Vec<(usize, usize)> = (0..trajs.len())
        .flat_map(|k| (0..n).map(move |j| (k, j)))
        .collect();

    let results: Vec<Result<(SurrogateFit, Vec<(f64, f64, f64)>)>> = tasks
        .par_iter()
        .map(|&(k, j)| {
            let (id, rows) = &trajs[k];
            let t = DMatrix::from_iterator(rows.len(), 1, rows.iter().map(|&i| dataset.times[i]));
            let y =
                DVector::from_iterator(rows.len(), rows.iter().map(|&i| dataset.states[(i, j)]));
            // Zero-mean GP on centered data; the offset does not affect derivatives.
            let offset = y.mean();
            let y = y.add_scalar(-offset);
            // Keyed by trajectory id so stacking trajectories does not change any fit.
            let task_seed =
                seed::derive(seed::derive(seed, "surrogate", *id as u64), "dim", j as u64);
            let (model, fit) = fit_optimized(t, y, &NoiseForm::Learned, config, task_seed)
                .map_err(|e| {
                    e.in_stage(format!("surrogate trajectory {id} dimension {}", j + 1))
                })?;
            let est = rows
                .iter()
                .map(|&i| {
                    let ti = dataset.times[i];
                    let d = model.posterior_derivative(ti)?;
                    Ok((model.posterior_mean(&[ti]) + offset, d.mean, d.variance))
                })
                .collect::<Result<Vec<_>>>()?;
            let sf = SurrogateFit {
                trajectory_id: *id,
                dim: j,
                params: fit.params,
                noise_var: fit.noise_var.unwrap_or(0.0),
                nlml: fit.nlml,
                converged: fit.converged,
            };
            Ok((sf, est))
        })
        .collect();

    let rows_total = dataset.len();
    let mut out = SurrogateOutput {
        denoised: DMatrix::zeros(rows_total, n),
        derivative: DMatrix::zeros(rows_total, n),
        derivative_var: DMatrix::zeros(rows_total, n),
        fits: Vec::with_capacity(tasks.len()),
    };
    for (&(k, j), res) in tasks.iter().zip(results) {
        let (fit, est) = res?;
        for (&i, (m, dm, dv)) in trajs[k].1.iter().zip(est) {
            out.denoised[(i, j)] = m;
            out.derivative[(i, j)] = dm;
            out.derivative_var[(i, j)] = dv;
        }
        out.fits.push(fit);
    }
    Ok(out)
}

/// Training data for one component of `∇H`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradientTargets {
    pub indices: Vec<usize>,
    pub inputs: DMatrix<f64>,
    pub targets: DVector<f64>,
    pub noise: Vec<f64>,
}

impl GradientTargets {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HamiltonianTrainingSet {
    pub dims: Vec<GradientTargets>,
}

/// Per-sample result of inverting `J_s − R_s` on the recoverable subspace.
#[derive(Debug, Clone)]
pub struct Recovery {
    pub rank: usize,
    /// `Some(row)` for every recoverable dimension.
    pub rows: Vec<Option<DVector<f64>>>,
    /// Whether `b` passed the column-space consistency check (always true at full rank).
    pub consistent: bool,
}

/// Rows of the pseudo-inverse of `a` for the dimensions recoverable from `b`.
///
/// At full rank every row of `a⁻¹` is returned. Otherwise dimension `j` is kept
/// only if `e_j` lies in the row space of `a` and `b` lies in its column space,
/// the latter judged against the derivative variances `b_var`: the squared
/// out-of-range residual must not exceed nine times its expected value under
/// the variances, plus a round-off floor.
pub fn recover_rows(a: &DMatrix<f64>, b: &DVector<f64>, b_var: &DVector<f64>) -> Recovery {
    let n = a.nrows();
    let svd = a.clone().svd(true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(v)) => (u, v),
        _ => {
            return Recovery {
                rank: 0,
                rows: vec![None; n],
                consistent: false,
            }
        }
    };
    let smax = svd.singular_values.max();
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&k| smax > 0.0 && svd.singular_values[k] > RANK_TOL * smax)
        .collect();
    let rank = keep.len();
    let ur = DMatrix::from_fn(n, rank, |i, c| u[(i, keep[c])]);
    let vr = DMatrix::from_fn(n, rank, |i, c| vt[(keep[c], i)]);
    let inv_s = DMatrix::from_fn(rank, rank, |i, c| {
        if i == c {
            1.0 / svd.singular_values[keep[i]]
        } else {
            0.0
        }
    });
    let pinv = &vr * inv_s * ur.transpose();

    if rank == n {
        return Recovery {
            rank,
            rows: (0..n).map(|j| Some(pinv.row(j).transpose())).collect(),
            consistent: true,
        };
    }

    let proj_perp = DMatrix::identity(n, n) - &ur * ur.transpose();
    let resid = &proj_perp * b;
    let expected: f64 = (0..n)
        .map(|k| proj_perp.column(k).norm_squared() * b_var[k])
        .sum();
    let consistent = resid.norm_squared() <= 9.0 * expected + 1e-8 * (1.0 + b.norm_squared());

    let rows = (0..n)
        .map(|j| {
            let mut e = DVector::zeros(n);
            e[j] = 1.0;
            let in_span = (&e - &vr * (vr.transpose() * &e)).norm() <= RANK_TOL;
            (in_span && consistent).then(|| pinv.row(j).transpose())
        })
        .collect();
    Recovery {
        rank,
        rows,
        consistent,
    }
}

/// Builds per-dimension gradient targets `p^j·b_i` and propagated noise `Σ_k (p^j_k)² var_k`.
pub fn build_hamiltonian_dataset(
    structure: &dyn SphsStructure,
    surrogate: &SurrogateOutput,
    inputs: &DMatrix<f64>,
    modes: &[usize],
) -> Result<HamiltonianTrainingSet> {
    let n = structure.state_dim();
    let rows = surrogate.denoised.nrows();
    check_dim("surrogate state dimension", n, surrogate.denoised.ncols())?;
    check_dim("mode labels", rows, modes.len())?;
    check_dim("input rows", rows, inputs.nrows())?;
    check_dim("input dimension", structure.input_dim(), inputs.ncols())?;

    let mut idx: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut tgt: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut noise: Vec<Vec<f64>> = vec![Vec::new(); n];
    for i in 0..rows {
        let mode = modes[i];
        if mode == 0 || mode > structure.n_modes() {
            return Err(Error::InvalidMode {
                mode,
                n_modes: structure.n_modes(),
            });
        }
        let x: Vec<f64> = surrogate.denoised.row(i).iter().copied().collect();
        let a = structure.combined(mode, &x);
        let mut b = surrogate.derivative.row(i).transpose();
        if structure.input_dim() > 0 {
            b -= structure.port(&x) * inputs.row(i).transpose();
        }
        let var = surrogate.derivative_var.row(i).transpose();
        let rec = recover_rows(&a, &b, &var);
        for (j, row) in rec.rows.iter().enumerate() {
            if let Some(p) = row {
                idx[j].push(i);
                tgt[j].push(p.dot(&b));
                noise[j].push(p.iter().zip(var.iter()).map(|(pk, vk)| pk * pk * vk).sum());
            }
        }
    }

    let mut dims = Vec::with_capacity(n);
    for j in 0..n {
        if idx[j].is_empty() {
            return Err(Error::Unidentifiable(j + 1));
        }
        let inputs_j = DMatrix::from_fn(idx[j].len(), n, |r, c| surrogate.denoised[(idx[j][r], c)]);
        dims.push(GradientTargets {
            indices: std::mem::take(&mut idx[j]),
            inputs: inputs_j,
            targets: DVector::from_vec(std::mem::take(&mut tgt[j])),
            noise: std::mem::take(&mut noise[j]),
        });
    }
    Ok(HamiltonianTrainingSet { dims })
}

/// One GP per component of `∇Ĥ`; its posterior mean is itself a gradient field.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HamiltonianGp {
    pub models: Vec<GpModel>,
}

impl HamiltonianGp {
    /// Untrained prior: no data, unit signal and unit inverse squared lengthscales.
    pub fn prior(state_dim: usize) -> Result<Self> {
        let params = KernelParams::isotropic(1.0, 1.0, state_dim)?;
        let models = (0..state_dim)
            .map(|_| {
                GpModel::fit(
                    DMatrix::zeros(0, state_dim),
                    DVector::zeros(0),
                    &[],
                    params.clone(),
                )
            })
            .collect::<Result<_>>()?;
        Ok(HamiltonianGp { models })
    }
}

impl GradientField for HamiltonianGp {
    fn dim(&self) -> usize {
        self.models.len()
    }
    fn gradient(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.models.len(),
            self.models.iter().map(|m| m.posterior_mean(x)),
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradientFitReport {
    pub dim: usize,
    pub n_points: usize,
    pub params: KernelParams,
    pub nlml: f64,
    pub grad_norm: f64,
    pub converged: bool,
}

/// Fits each gradient component with its propagated heteroscedastic noise held fixed.
pub fn fit_hamiltonian_gp(
    hset: &HamiltonianTrainingSet,
    config: &HyperOptConfig,
    seed: u64,
) -> Result<(HamiltonianGp, Vec<GradientFitReport>)> {
    if let Some((j, _)) = hset.dims.iter().enumerate().find(|(_, d)| d.len() < 3) {
        return Err(Error::InvalidArgument(format!(
            "gradient dimension {} has fewer than 3 training points",
            j + 1
        )));
    }
    let fitted: Vec<Result<(GpModel, GradientFitReport)>> = hset
        .dims
        .par_iter()
        .enumerate()
        .map(|(j, d)| {
            let noise = NoiseForm::Fixed(d.noise.clone());
            let (model, fit) = fit_optimized(
                d.inputs.clone(),
                d.targets.clone(),
                &noise,
                config,
                seed::derive(seed, "hamiltonian", j as u64),
            )
            .map_err(|e| e.in_stage(format!("gradient dimension {}", j + 1)))?;
            let report = GradientFitReport {
                dim: j + 1,
                n_points: d.len(),
                params: fit.params,
                nlml: fit.nlml,
                grad_norm: fit.grad_norm,
                converged: fit.converged,
            };
            Ok((model, report))
        })
        .collect();
    let mut models = Vec::with_capacity(fitted.len());
    let mut reports = Vec::with_capacity(fitted.len());
    for r in fitted {
        let (m, rep) = r?;
        models.push(m);
        reports.push(rep);
    }
    Ok((HamiltonianGp { models }, reports))
}

/// `(x̄_i, s_i)` pairs for the switching classifier.
pub fn build_classifier_dataset(
    surrogate: &SurrogateOutput,
    modes: &[usize],
) -> (DMatrix<f64>, Vec<usize>) {
    (surrogate.denoised.clone(), modes.to_vec())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub surrogate: HyperOptConfig,
    pub hamiltonian: HyperOptConfig,
    pub classifier: ClassifierConfig,
    /// Skip learning `∇Ĥ` and keep the untrained prior.
    pub prior_only: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            surrogate: HyperOptConfig {
                restarts: 5,
                ..HyperOptConfig::default()
            },
            hamiltonian: HyperOptConfig {
                restarts: 2,
                max_iters: 200,
                grad_tol: 1e-3,
            },
            classifier: ClassifierConfig::default(),
            prior_only: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainDiagnostics {
    pub surrogate: Vec<SurrogateFit>,
    pub gradient: Vec<GradientFitReport>,
    pub classifier_accuracy: f64,
    pub classifier_log_evidence: Vec<f64>,
}

/// Everything needed to sample and simulate the learned system.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainedModel {
    pub format_version: u32,
    pub seed: u64,
    pub structure: StructureDef,
    pub config: TrainConfig,
    pub hamiltonian: HamiltonianGp,
    pub classifier: SwitchingClassifier,
    pub diagnostics: TrainDiagnostics,
}

impl TrainedModel {
    pub fn build_structure(&self) -> Result<Arc<dyn SphsStructure>> {
        self.structure.build()
    }
}

/// Runs the full training pipeline. Deterministic given `seed`.
pub fn train(
    dataset: &TrajectoryDataset,
    structure_def: &StructureDef,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainedModel> {
    let structure = structure_def.build().map_err(|e| e.in_stage("structure"))?;
    check_dim(
        "dataset state dimension",
        structure.state_dim(),
        dataset.state_dim(),
    )?;
    check_dim(
        "dataset input dimension",
        structure.input_dim(),
        dataset.input_dim(),
    )?;
    if let Some(&m) = dataset.modes.iter().find(|m| **m > structure.n_modes()) {
        return Err(Error::InvalidMode {
            mode: m,
            n_modes: structure.n_modes(),
        });
    }

    let surrogate = fit_surrogate(dataset, &config.surrogate, seed::derive(seed, "stage", 0))
        .map_err(|e| e.in_stage("surrogate"))?;
    log::info!("surrogate: {} time-GPs fitted", surrogate.fits.len());

    let samples: Vec<Vec<f64>> = (0..surrogate.denoised.nrows())
        .map(|i| surrogate.denoised.row(i).iter().copied().collect())
        .collect();
    let mut used_modes = dataset.modes.clone();
    used_modes.sort_unstable();
    used_modes.dedup();
    let report = validate_structure(structure.as_ref(), &samples, &used_modes);
    if !report.passed {
        return Err(Error::InvalidArgument(format!(
            "structure failed skew/PSD validation: {:?}",
            report.modes
        ))
        .in_stage("structure"));
    }

    let (hamiltonian, gradient) = if config.prior_only {
        (HamiltonianGp::prior(structure.state_dim())?, Vec::new())
    } else {
        let hset = build_hamiltonian_dataset(
            structure.as_ref(),
            &surrogate,
            &dataset.inputs,
            &dataset.modes,
        )
        .map_err(|e| e.in_stage("gradient targets"))?;
        for (j, d) in hset.dims.iter().enumerate() {
            log::info!("gradient dimension {}: {} training points", j + 1, d.len());
        }
        fit_hamiltonian_gp(&hset, &config.hamiltonian, seed::derive(seed, "stage", 1))
            .map_err(|e| e.in_stage("gradient GP"))?
    };

    let (cx, cy) = build_classifier_dataset(&surrogate, &dataset.modes);
    let classifier = train_classifier(
        &cx,
        &cy,
        structure.n_modes(),
        &config.classifier,
        seed::derive(seed, "stage", 2),
    )
    .map_err(|e| e.in_stage("classifier"))?;
    let accuracy = classifier.training_accuracy();
    log::info!("classifier training accuracy {accuracy:.4}");

    Ok(TrainedModel {
        format_version: MODEL_FORMAT_VERSION,
        seed,
        structure: structure_def.clone(),
        config: config.clone(),
        hamiltonian,
        diagnostics: TrainDiagnostics {
            surrogate: surrogate.fits,
            gradient,
            classifier_accuracy: accuracy,
            classifier_log_evidence: (1..=classifier.n_modes())
                .map(|m| classifier.class(m).log_evidence())
                .collect(),
        },
        classifier,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_rank_rows_invert() {
        let a = DMatrix::from_row_slice(3, 3, &[-0.5, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, -1.0, 0.0]);
        let b = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let rec = recover_rows(&a, &b, &DVector::zeros(3));
        assert_eq!(rec.rank, 3);
        for j in 0..3 {
            let p = rec.rows[j].as_ref().unwrap();
            let pa = p.transpose() * &a;
            for k in 0..3 {
                let e = if j == k { 1.0 } else { 0.0 };
                assert!((pa[k] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn singular_contact_matrix_keeps_momentum_only() {
        let a = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0, -1.0, -1.0, -2.0]);
        let grad = DVector::from_vec(vec![3.0, 9.81, 0.4]);
        let b = &a * &grad;
        let rec = recover_rows(&a, &b, &DVector::zeros(3));
        assert_eq!(rec.rank, 2);
        assert!(rec.rows[0].is_none() && rec.rows[1].is_none());
        assert!((rec.rows[2].as_ref().unwrap().dot(&b) - 0.4).abs() < 1e-12);

        let off = &b + DVector::from_vec(vec![0.5, -0.5, 0.0]);
        assert!(!recover_rows(&a, &off, &DVector::from_element(3, 1e-4)).consistent);
        assert!(recover_rows(&a, &off, &DVector::from_element(3, 1.0)).consistent);
    }

    #[test]
    fn dataset_rejects_time_reversal() {
        let r = TrajectoryDataset::new(
            vec![0.0, 0.1, 0.05],
            DMatrix::zeros(3, 1),
            DMatrix::zeros(3, 0),
            vec![1; 3],
            vec![0; 3],
        );
        assert!(r.is_err());
        let ok = TrajectoryDataset::new(
            vec![0.0, 0.0, 0.1],
            DMatrix::zeros(3, 1),
            DMatrix::zeros(3, 0),
            vec![1; 3],
            vec![0, 1, 0],
        )
        .unwrap();
        assert_eq!(ok.trajectories(), vec![(0, vec![0, 2]), (1, vec![1])]);
    }

    #[test]
    fn prior_gradient_is_zero_mean() {
        let h = HamiltonianGp::prior(2).unwrap();
        assert_eq!(h.gradient(&[0.3, 0.1]), DVector::zeros(2));
    }
}
