//! Exact GP regression: fitting, posterior and derivative-posterior queries,
//! the negative log marginal likelihood with its analytic gradient, and
//! multi-restart hyperparameter search.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::kernel::{broadcast_noise, gram, rows_of, se_kernel_d12, KernelParams};
use crate::linalg::{chol_solve, forward_solve, inverse_from_lower};
use crate::optim::{minimize, OptimOptions, StopReason};

/// Schur-complement round-off below this is clamped to zero.
pub const VARIANCE_CLAMP: f64 = -1e-9;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosteriorGaussian {
    pub mean: f64,
    pub variance: f64,
}

impl PosteriorGaussian {
    fn new(mean: f64, variance: f64) -> Self {
        let variance = if variance < 0.0 && variance >= VARIANCE_CLAMP {
            0.0
        } else {
            variance.max(0.0)
        };
        PosteriorGaussian { mean, variance }
    }
}

/// A fitted GP with its Gram factorization cached. Immutable once built.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(into = "GpModelData", try_from = "GpModelData")]
pub struct GpModel {
    inputs: DMatrix<f64>,
    targets: DVector<f64>,
    params: KernelParams,
    noise: Vec<f64>,
    jitter: f64,
    chol: DMatrix<f64>,
    alpha: DVector<f64>,
}

#[derive(Serialize, Deserialize)]
struct GpModelData {
    inputs: DMatrix<f64>,
    targets: DVector<f64>,
    params: KernelParams,
    noise: Vec<f64>,
}

impl From<GpModel> for GpModelData {
    fn from(m: GpModel) -> Self {
        GpModelData {
            inputs: m.inputs,
            targets: m.targets,
            params: m.params,
            noise: m.noise,
        }
    }
}

impl TryFrom<GpModelData> for GpModel {
    type Error = Error;
    fn try_from(d: GpModelData) -> Result<Self> {
        GpModel::fit(d.inputs, d.targets, &d.noise, d.params)
    }
}

impl GpModel {
    /// Fits a GP to `targets` observed at the rows of `inputs`.
    /// `noise` is either one variance per row or a single broadcast variance.
    pub fn fit(
        inputs: DMatrix<f64>,
        targets: DVector<f64>,
        noise: &[f64],
        params: KernelParams,
    ) -> Result<Self> {
        check_dim("fit targets", inputs.nrows(), targets.len())?;
        check_dim("fit inputs", params.input_dim(), inputs.ncols())?;
        if inputs.nrows() == 0 {
            // No data: the model is the prior.
            return Ok(GpModel {
                inputs,
                targets,
                params,
                noise: Vec::new(),
                jitter: 0.0,
                chol: DMatrix::zeros(0, 0),
                alpha: DVector::zeros(0),
            });
        }
        let noise = broadcast_noise(noise, inputs.nrows())?;
        let g = gram(&inputs, &params, &noise)?;
        let chol = g.lower();
        let alpha = chol_solve(&chol, &targets);
        Ok(GpModel {
            inputs,
            targets,
            params,
            noise,
            jitter: g.jitter,
            chol,
            alpha,
        })
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn targets(&self) -> &DVector<f64> {
        &self.targets
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn noise(&self) -> &[f64] {
        &self.noise
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Lower Cholesky factor of the jittered Gram matrix.
    pub fn cholesky(&self) -> &DMatrix<f64> {
        &self.chol
    }

    /// `K⁻¹ y`.
    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    /// Solves `K v = b` with the cached factor.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        chol_solve(&self.chol, b)
    }

    pub fn cross(&self, x: &[f64]) -> DVector<f64> {
        self.params.cross(&self.inputs, x)
    }

    pub fn posterior(&self, x: &[f64]) -> Result<PosteriorGaussian> {
        check_dim("posterior query", self.input_dim(), x.len())?;
        let k = self.cross(x);
        let v = forward_solve(&self.chol, &k);
        Ok(PosteriorGaussian::new(
            k.dot(&self.alpha),
            self.params.signal_var() - v.dot(&v),
        ))
    }

    pub fn posterior_mean(&self, x: &[f64]) -> f64 {
        self.cross(x).dot(&self.alpha)
    }

    /// Posterior of the time derivative of a scalar-input GP at `t`.
    pub fn posterior_derivative(&self, t: f64) -> Result<PosteriorGaussian> {
        check_dim("posterior_derivative input", 1, self.input_dim())?;
        let lambda = self.params.lengthscale_diag[0];
        let k1 = DVector::from_iterator(
            self.len(),
            self.inputs.column(0).iter().map(|ti| {
                let d = t - ti;
                -2.0 * lambda * d * self.params.eval(&[t], &[*ti])
            }),
        );
        let v = forward_solve(&self.chol, &k1);
        let prior = se_kernel_d12(t, t, &self.params)?;
        Ok(PosteriorGaussian::new(
            k1.dot(&self.alpha),
            prior - v.dot(&v),
        ))
    }
}

/// How observation noise enters the marginal likelihood.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NoiseForm {
    /// One homoscedastic variance, optimized alongside the kernel parameters.
    Learned,
    /// Known per-point (or broadcast) variances, held fixed.
    Fixed(Vec<f64>),
}

impl NoiseForm {
    pub fn n_params(&self, input_dim: usize) -> usize {
        1 + input_dim + usize::from(matches!(self, NoiseForm::Learned))
    }
}

/// Log-space box bounds `[ln σ_f, ln λ…, (ln σ_n²)]`.
pub fn log_bounds(input_dim: usize, noise: &NoiseForm) -> (Vec<f64>, Vec<f64>) {
    let mut lo = vec![1e-4f64.ln()];
    let mut hi = vec![1e4f64.ln()];
    lo.extend(std::iter::repeat_n(1e-6f64.ln(), input_dim));
    hi.extend(std::iter::repeat_n(1e6f64.ln(), input_dim));
    if matches!(noise, NoiseForm::Learned) {
        lo.push(1e-10f64.ln());
        hi.push(1e4f64.ln());
    }
    (lo, hi)
}

fn split_log_params(
    input_dim: usize,
    noise: &NoiseForm,
    n: usize,
    log_params: &[f64],
) -> Result<(KernelParams, Vec<f64>)> {
    check_dim(
        "nlml log_params",
        noise.n_params(input_dim),
        log_params.len(),
    )?;
    let params = KernelParams::from_log(&log_params[..1 + input_dim]);
    let noise = match noise {
        NoiseForm::Learned => vec![log_params[1 + input_dim].exp(); n],
        NoiseForm::Fixed(v) => broadcast_noise(v, n)?,
    };
    Ok((params, noise))
}

/// Negative log marginal likelihood (including `N/2·ln 2π`).
pub fn nlml_value(
    inputs: &DMatrix<f64>,
    targets: &DVector<f64>,
    noise: &NoiseForm,
    log_params: &[f64],
) -> Result<f64> {
    let n = inputs.nrows();
    let (params, nv) = split_log_params(inputs.ncols(), noise, n, log_params)?;
    let g = gram(inputs, &params, &nv)?;
    let l = g.lower();
    let z = forward_solve(&l, targets);
    Ok(0.5 * z.dot(&z) + 0.5 * g.log_det() + 0.5 * n as f64 * LN_2PI)
}

/// NLML and its gradient with respect to `log_params`.
pub fn nlml(
    inputs: &DMatrix<f64>,
    targets: &DVector<f64>,
    noise: &NoiseForm,
    log_params: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let n = inputs.nrows();
    let d = inputs.ncols();
    check_dim("nlml targets", n, targets.len())?;
    let (params, nv) = split_log_params(d, noise, n, log_params)?;
    let g = gram(inputs, &params, &nv)?;
    let l = g.lower();
    let alpha = chol_solve(&l, targets);
    let value = 0.5 * targets.dot(&alpha) + 0.5 * g.log_det() + 0.5 * n as f64 * LN_2PI;

    // W = K⁻¹ − α αᵀ; ∂NLML/∂θ = ½ tr(W ∂K/∂θ).
    let mut w = inverse_from_lower(&l);
    w.ger(-1.0, &alpha, &alpha, 1.0);

    let rows = rows_of(inputs);
    let lambda = &params.lengthscale_diag;
    let mut grad = vec![0.0; noise.n_params(d)];
    // σ_f enters the kernel and the jitter (both ∝ σ_f²).
    let mut g_sf = 0.0;
    let mut g_l = vec![0.0; d];
    for i in 0..n {
        for j in 0..i {
            let mut q = 0.0;
            for c in 0..d {
                let diff = rows[i][c] - rows[j][c];
                q += lambda[c] * diff * diff;
            }
            let kij = params.signal_var() * (-q).exp();
            let wij = w[(i, j)];
            // symmetric pair counted twice
            g_sf += 2.0 * wij * kij;
            for c in 0..d {
                let diff = rows[i][c] - rows[j][c];
                g_l[c] -= 2.0 * wij * kij * lambda[c] * diff * diff;
            }
        }
    }
    let mut diag_w = 0.0;
    let mut diag_noise_w = 0.0;
    for i in 0..n {
        diag_w += w[(i, i)];
        diag_noise_w += w[(i, i)] * nv[i];
    }
    g_sf += diag_w * (params.signal_var() + g.jitter);
    grad[0] = g_sf; // ½ · 2 · tr(W K_f)
    for c in 0..d {
        grad[1 + c] = 0.5 * g_l[c];
    }
    if matches!(noise, NoiseForm::Learned) {
        grad[1 + d] = 0.5 * diag_noise_w;
    }
    Ok((value, grad))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HyperOptConfig {
    pub restarts: usize,
    pub max_iters: usize,
    pub grad_tol: f64,
}

impl Default for HyperOptConfig {
    fn default() -> Self {
        HyperOptConfig {
            restarts: 3,
            max_iters: 500,
            grad_tol: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RestartReport {
    pub initial_log_params: Vec<f64>,
    pub final_nlml: Option<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
    pub note: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HyperFit {
    pub params: KernelParams,
    /// Learned homoscedastic noise variance (`None` for fixed noise).
    pub noise_var: Option<f64>,
    pub nlml: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub restarts: Vec<RestartReport>,
}

impl HyperFit {
    /// Noise vector to fit with, given the form the search ran under.
    pub fn noise_vector(&self, noise: &NoiseForm) -> Vec<f64> {
        match (noise, self.noise_var) {
            (NoiseForm::Learned, Some(v)) => vec![v],
            (NoiseForm::Fixed(v), _) => v.clone(),
            (NoiseForm::Learned, None) => unreachable!("learned noise always reports a variance"),
        }
    }
}

/// Initial log-parameters scaled to the data: `σ_f` around the target RMS,
/// `λ_d` spread over four decades relative to `1/var(X_d)`, and (when learned)
/// the noise variance between `1e-4` and `1e-1` of the target variance.
/// Every draw is clipped into the box bounds.
pub(crate) fn scaled_init(
    rng: &mut ChaCha8Rng,
    inputs: &DMatrix<f64>,
    targets: &DVector<f64>,
    noise: &NoiseForm,
    lower: &[f64],
    upper: &[f64],
) -> Vec<f64> {
    let n = targets.len().max(1) as f64;
    let rms = (targets.norm_squared() / n).sqrt();
    let mean = targets.sum() / n;
    let var = targets.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
    let mut uniform = |lo: f64, hi: f64| rng.random_range(lo.ln()..hi.ln());
    let mut x = vec![rms.max(1e-3).ln() + uniform(0.3, 3.0)];
    for d in 0..inputs.ncols() {
        let col = inputs.column(d);
        let m = col.sum() / n;
        let v = col.iter().map(|c| (c - m).powi(2)).sum::<f64>() / n;
        x.push(uniform(1e-2, 1e2) - v.max(1e-12).ln());
    }
    if matches!(noise, NoiseForm::Learned) {
        x.push(var.max(rms * rms).max(1e-12).ln() + uniform(1e-4, 1e-1));
    }
    x.iter()
        .zip(lower.iter().zip(upper))
        .map(|(v, (lo, hi))| v.clamp(*lo, *hi))
        .collect()
}

/// Draws `n` log-uniform initial values in `[1e-2, 1e1]`.
pub(crate) fn log_uniform_init(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let (lo, hi) = (1e-2f64.ln(), 1e1f64.ln());
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Multi-restart NLML minimization; returns the restart with the smallest final NLML.
pub fn optimize_hyperparams(
    inputs: &DMatrix<f64>,
    targets: &DVector<f64>,
    noise: &NoiseForm,
    config: &HyperOptConfig,
    seed: u64,
) -> Result<HyperFit> {
    if config.restarts == 0 {
        return Err(Error::InvalidArgument("restarts must be >= 1".into()));
    }
    check_dim("optimize targets", inputs.nrows(), targets.len())?;
    let d = inputs.ncols();
    let (lower, upper) = log_bounds(d, noise);
    let opts = OptimOptions {
        max_iters: config.max_iters,
        grad_tol: config.grad_tol,
        lower,
        upper,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::with_capacity(config.restarts);
    let mut best: Option<(f64, Vec<f64>, f64, usize, bool)> = None;

    for _ in 0..config.restarts {
        let x0 = scaled_init(&mut rng, inputs, targets, noise, &opts.lower, &opts.upper);
        let mut obj = |x: &[f64], want_grad: bool| -> Option<(f64, Option<Vec<f64>>)> {
            if want_grad {
                nlml(inputs, targets, noise, x)
                    .ok()
                    .map(|(v, g)| (v, Some(g)))
            } else {
                nlml_value(inputs, targets, noise, x)
                    .ok()
                    .map(|v| (v, None))
            }
        };
        match minimize(&mut obj, &x0, &opts) {
            Some(r) => {
                let note = match r.stop {
                    StopReason::GradientTolerance => "converged",
                    StopReason::IterationCap => "iteration cap reached",
                    StopReason::LineSearchFailed => "line search stalled",
                };
                log::debug!(
                    "restart: nlml {:.6} after {} iterations, |g| {:.3e} ({note})",
                    r.value,
                    r.iterations,
                    r.grad_norm
                );
                reports.push(RestartReport {
                    initial_log_params: x0,
                    final_nlml: Some(r.value),
                    iterations: r.iterations,
                    grad_norm: r.grad_norm,
                    converged: r.converged(),
                    note: note.into(),
                });
                if best.as_ref().is_none_or(|b| r.value < b.0) {
                    let converged = r.converged();
                    best = Some((r.value, r.x, r.grad_norm, r.iterations, converged));
                }
            }
            None => reports.push(RestartReport {
                initial_log_params: x0,
                final_nlml: None,
                iterations: 0,
                grad_norm: f64::NAN,
                converged: false,
                note: "initial point numerically infeasible".into(),
            }),
        }
    }

    let Some((value, x, grad_norm, iterations, converged)) = best else {
        return Err(Error::Optimization(
            reports
                .iter()
                .enumerate()
                .map(|(i, r)| format!("restart {i}: {}", r.note))
                .collect(),
        ));
    };
    Ok(HyperFit {
        params: KernelParams::from_log(&x[..1 + d]),
        noise_var: matches!(noise, NoiseForm::Learned).then(|| x[1 + d].exp()),
        nlml: value,
        grad_norm,
        iterations,
        converged,
        restarts: reports,
    })
}

/// Optimizes hyperparameters, then fits the model with them.
pub fn fit_optimized(
    inputs: DMatrix<f64>,
    targets: DVector<f64>,
    noise: &NoiseForm,
    config: &HyperOptConfig,
    seed: u64,
) -> Result<(GpModel, HyperFit)> {
    let hf = optimize_hyperparams(&inputs, &targets, noise, config, seed)?;
    let nv = hf.noise_vector(noise);
    let model = GpModel::fit(inputs, targets, &nv, hf.params.clone())?;
    Ok((model, hf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn col(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    #[test]
    fn scalar_fit() {
        let m = GpModel::fit(
            col(&[0.0]),
            DVector::from_vec(vec![5.0]),
            &[0.0],
            KernelParams::new(1.0, vec![1.0]).unwrap(),
        )
        .unwrap();
        assert_relative_eq!(m.alpha()[0], 5.0 / (1.0 + m.jitter()), max_relative = 1e-14);
    }

    #[test]
    fn duplicate_inputs_interpolate_between_targets() {
        let m = GpModel::fit(
            col(&[0.3, 0.3]),
            DVector::from_vec(vec![1.0, 3.0]),
            &[0.0],
            KernelParams::new(1.0, vec![1.0]).unwrap(),
        )
        .unwrap();
        let mu = m.posterior(&[0.3]).unwrap().mean;
        assert!(mu > 1.0 && mu < 3.0, "{mu}");
    }

    #[test]
    fn interpolates_training_points_without_noise() {
        let x = col(&[0.0, 0.7, 1.5, 2.2]);
        let y = DVector::from_vec(vec![0.1, -0.4, 0.9, 0.3]);
        let m = GpModel::fit(
            x,
            y.clone(),
            &[0.0],
            KernelParams::new(1.0, vec![2.0]).unwrap(),
        )
        .unwrap();
        for (i, t) in [0.0, 0.7, 1.5, 2.2].iter().enumerate() {
            let p = m.posterior(&[*t]).unwrap();
            assert!((p.mean - y[i]).abs() < 1e-5);
            assert!(p.variance <= 1e-6);
        }
    }

    #[test]
    fn reverts_to_prior_far_away() {
        let m = GpModel::fit(
            col(&[0.0, 1.0]),
            DVector::from_vec(vec![2.0, -1.0]),
            &[0.01],
            KernelParams::new(1.5, vec![1.0]).unwrap(),
        )
        .unwrap();
        let p = m.posterior(&[100.0]).unwrap();
        assert!(p.mean.abs() < 1e-12);
        assert_relative_eq!(p.variance, 2.25, max_relative = 1e-12);
    }

    #[test]
    fn single_zero_target_nlml() {
        let (v, _) = nlml(
            &col(&[0.0]),
            &DVector::from_vec(vec![0.0]),
            &NoiseForm::Fixed(vec![0.5]),
            &[0.0, 0.0],
        )
        .unwrap();
        let k = 1.0 + 0.5 + 1e-10;
        assert_relative_eq!(v, 0.5 * f64::ln(k) + 0.5 * LN_2PI, max_relative = 1e-12);
    }

    #[test]
    fn homoscedastic_equals_constant_fixed_noise() {
        let x = col(&[0.0, 0.4, 1.1, 1.9]);
        let y = DVector::from_vec(vec![0.2, 0.5, -0.3, 0.8]);
        let a = nlml(&x, &y, &NoiseForm::Learned, &[0.1, -0.2, 0.05f64.ln()]).unwrap();
        let b = nlml(&x, &y, &NoiseForm::Fixed(vec![0.05; 4]), &[0.1, -0.2]).unwrap();
        assert_relative_eq!(a.0, b.0, max_relative = 1e-12);
        assert_relative_eq!(a.1[0], b.1[0], max_relative = 1e-10);
        assert_relative_eq!(a.1[1], b.1[1], max_relative = 1e-10);
    }

    #[test]
    fn zero_restarts_rejected() {
        let cfg = HyperOptConfig {
            restarts: 0,
            ..Default::default()
        };
        assert!(optimize_hyperparams(
            &col(&[0.0]),
            &DVector::zeros(1),
            &NoiseForm::Learned,
            &cfg,
            0
        )
        .is_err());
    }

    #[test]
    fn serde_round_trip_rebuilds_cache() {
        let m = GpModel::fit(
            col(&[0.0, 0.5, 1.3]),
            DVector::from_vec(vec![1.0, 0.2, -0.7]),
            &[0.01, 0.02, 0.03],
            KernelParams::new(0.8, vec![1.7]).unwrap(),
        )
        .unwrap();
        let s = serde_json::to_string(&m).unwrap();
        let back: GpModel = serde_json::from_str(&s).unwrap();
        assert_eq!(back.alpha(), m.alpha());
        assert_eq!(back.cholesky(), m.cholesky());
    }
}
