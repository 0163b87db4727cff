//! GP classification of the switching policy.
//!
//! Each mode gets a binary one-vs-rest classifier with a logistic likelihood,
//! approximated by Laplace's method at the posterior mode. Predictions use the
//! probit approximation of the logistic-Gaussian integral; pathwise policy
//! samples use Matheron's rule on the Laplace-approximated latent posterior.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::features::{FourierPrior, PathwiseFunction};
use crate::kernel::{rows_of, KernelParams};
use crate::linalg::{backward_solve, chol_solve, forward_solve, lower_triangular_inverse};
use crate::optim::{minimize, OptimOptions};
use crate::regression::{log_bounds, log_uniform_init, NoiseForm};
use crate::seed;
use crate::sphs::SwitchingPolicy;

const NEWTON_TOL: f64 = 1e-8;
const NEWTON_MAX_ITERS: usize = 100;
/// Convergence requirement on the gradient of the Laplace objective.
pub const MODE_GRAD_TOL: f64 = 1e-6;

fn sigmoid(f: f64) -> f64 {
    if f >= 0.0 {
        1.0 / (1.0 + (-f).exp())
    } else {
        let e = f.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(z)` without overflow.
fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

struct LikelihoodTerms {
    loglik: f64,
    grad: DVector<f64>,
    w: DVector<f64>,
    third: DVector<f64>,
}

/// Logistic log-likelihood and its first three derivatives for `y ∈ {-1, +1}`.
fn likelihood_terms(f: &DVector<f64>, y: &DVector<f64>) -> LikelihoodTerms {
    let n = f.len();
    let mut loglik = 0.0;
    let mut grad = DVector::zeros(n);
    let mut w = DVector::zeros(n);
    let mut third = DVector::zeros(n);
    for i in 0..n {
        loglik += log_sigmoid(y[i] * f[i]);
        let pi = sigmoid(f[i]);
        let t = if y[i] > 0.0 { 1.0 } else { 0.0 };
        grad[i] = t - pi;
        w[i] = pi * (1.0 - pi);
        third[i] = -pi * (1.0 - pi) * (1.0 - 2.0 * pi);
    }
    LikelihoodTerms {
        loglik,
        grad,
        w,
        third,
    }
}

/// Laplace approximation at the posterior mode for one binary problem.
#[derive(Debug, Clone)]
pub(crate) struct LaplaceMode {
    pub f: DVector<f64>,
    pub a: DVector<f64>,
    pub grad: DVector<f64>,
    pub w_sqrt: DVector<f64>,
    pub third: DVector<f64>,
    /// Lower Cholesky factor of `B = I + W½ K W½`.
    pub l: DMatrix<f64>,
    pub log_evidence: f64,
    pub iterations: usize,
    pub objective_trace: Vec<f64>,
}

fn build_b_cholesky(k: &DMatrix<f64>, w_sqrt: &DVector<f64>) -> Result<DMatrix<f64>> {
    let n = k.nrows();
    let mut b = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in 0..n {
            b[(i, j)] = w_sqrt[i] * k[(i, j)] * w_sqrt[j];
        }
        b[(j, j)] += 1.0;
    }
    b.cholesky().map(|c| c.l()).ok_or(Error::Cholesky {
        size: n,
        max_jitter: 0.0,
        min_diag: 1.0,
        max_diag: f64::NAN,
    })
}

/// Newton iterations for the mode of `ln p(y|f) - ½ fᵀK⁻¹f`, optionally warm-started
/// from a previous `a = K⁻¹ f`.
pub(crate) fn laplace_mode(
    k: &DMatrix<f64>,
    y: &DVector<f64>,
    warm_a: Option<&DVector<f64>>,
) -> Result<LaplaceMode> {
    let n = k.nrows();
    let mut a = warm_a.cloned().unwrap_or_else(|| DVector::zeros(n));
    let mut f = k * &a;
    let objective = |a: &DVector<f64>, f: &DVector<f64>| -> f64 {
        -0.5 * a.dot(f) + likelihood_terms(f, y).loglik
    };
    let mut psi = objective(&a, &f);
    let mut trace = vec![psi];
    let mut iterations = 0;

    while iterations < NEWTON_MAX_ITERS {
        iterations += 1;
        let terms = likelihood_terms(&f, y);
        let w_sqrt = terms.w.map(f64::sqrt);
        let l = build_b_cholesky(k, &w_sqrt)?;
        let b = terms.w.component_mul(&f) + &terms.grad;
        let c = forward_solve(&l, &w_sqrt.component_mul(&(k * &b)));
        let a_newton = &b - w_sqrt.component_mul(&backward_solve(&l, &c));
        let step = a_newton - &a;

        // Damped step: the objective is concave along any line in `a`.
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let a_try = &a + t * &step;
            let f_try = k * &a_try;
            let psi_try = objective(&a_try, &f_try);
            if !psi_try.is_finite() {
                trace.push(psi_try);
                return Err(Error::NewtonDivergence(trace));
            }
            if psi_try >= psi - 1e-12 * psi.abs().max(1.0) {
                accepted = Some((a_try, f_try, psi_try));
                break;
            }
            t *= 0.5;
        }
        let Some((a_new, f_new, psi_new)) = accepted else {
            return Err(Error::NewtonDivergence(trace));
        };
        let df = (&f_new - &f).amax();
        a = a_new;
        f = f_new;
        psi = psi_new;
        trace.push(psi);
        if df <= NEWTON_TOL {
            break;
        }
    }

    let terms = likelihood_terms(&f, y);
    let w_sqrt = terms.w.map(f64::sqrt);
    let l = build_b_cholesky(k, &w_sqrt)?;
    let log_det_half: f64 = l.diagonal().iter().map(|d| d.ln()).sum();
    Ok(LaplaceMode {
        log_evidence: psi - log_det_half,
        grad: terms.grad,
        third: terms.third,
        f,
        a,
        w_sqrt,
        l,
        iterations,
        objective_trace: trace,
    })
}

/// Gradient of the Laplace log evidence with respect to `[ln σ_f, ln λ…]`.
pub(crate) fn log_evidence_gradient(
    inputs: &DMatrix<f64>,
    params: &KernelParams,
    k: &DMatrix<f64>,
    mode: &LaplaceMode,
) -> Vec<f64> {
    let n = k.nrows();
    let d = inputs.ncols();
    let ws = &mode.w_sqrt;
    let linv = lower_triangular_inverse(&mode.l);
    let binv = linv.transpose() * &linv;
    let mut r = binv;
    for j in 0..n {
        for i in 0..n {
            r[(i, j)] *= ws[i] * ws[j];
        }
    }
    let mut wk = k.clone();
    for j in 0..n {
        for i in 0..n {
            wk[(i, j)] *= ws[i];
        }
    }
    let c = &linv * wk;
    let s2 = DVector::from_iterator(
        n,
        (0..n).map(|i| {
            let cc = c.column(i).norm_squared();
            // d/df̂ of −½ ln|B| is +½ diag((K⁻¹ + W)⁻¹) ∂³ ln p, since W = −∂² ln p.
            0.5 * (k[(i, i)] - cc) * mode.third[i]
        }),
    );

    let rows = rows_of(inputs);
    let np = 1 + d;
    // Accumulate ½aᵀC_ja − ½tr(R C_j) and b_j = C_j ∇ for every parameter in one sweep.
    let mut s1 = vec![0.0; np];
    let mut bvecs = vec![DVector::<f64>::zeros(n); np];
    let a = &mode.a;
    let g = &mode.grad;
    let lambda = &params.lengthscale_diag;
    let mut dk = vec![0.0; np];
    for i in 0..n {
        for j in 0..n {
            let kij = k[(i, j)];
            dk[0] = 2.0 * kij;
            for cdim in 0..d {
                let diff = rows[i][cdim] - rows[j][cdim];
                dk[1 + cdim] = -lambda[cdim] * diff * diff * kij;
            }
            let aa = 0.5 * a[i] * a[j];
            let rr = 0.5 * r[(i, j)];
            for p in 0..np {
                s1[p] += (aa - rr) * dk[p];
                bvecs[p][i] += dk[p] * g[j];
            }
        }
    }
    (0..np)
        .map(|p| {
            let b = &bvecs[p];
            let s3 = b - k * (&r * b);
            s1[p] + s2.dot(&s3)
        })
        .collect()
}

/// One binary (±1) Laplace GP classifier.
#[derive(Debug, Clone)]
pub struct BinaryLaplace {
    inputs: DMatrix<f64>,
    labels: DVector<f64>,
    params: KernelParams,
    mode: LaplaceMode,
}

impl BinaryLaplace {
    /// Fits the Laplace approximation with fixed hyperparameters, starting from `f = 0`.
    pub fn fit(inputs: DMatrix<f64>, labels: DVector<f64>, params: KernelParams) -> Result<Self> {
        check_dim("classifier labels", inputs.nrows(), labels.len())?;
        check_dim("classifier inputs", params.input_dim(), inputs.ncols())?;
        let k = params.matrix(&inputs);
        let mode = laplace_mode(&k, &labels, None)?;
        Ok(BinaryLaplace {
            inputs,
            labels,
            params,
            mode,
        })
    }

    /// The same classifier with labels flipped; exact by symmetry of the logistic link.
    pub fn mirrored(&self) -> Self {
        let mut mode = self.mode.clone();
        mode.f = -&mode.f;
        mode.a = -&mode.a;
        mode.grad = -&mode.grad;
        mode.third = -&mode.third;
        BinaryLaplace {
            inputs: self.inputs.clone(),
            labels: -&self.labels,
            params: self.params.clone(),
            mode,
        }
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn log_evidence(&self) -> f64 {
        self.mode.log_evidence
    }

    pub fn newton_iterations(&self) -> usize {
        self.mode.iterations
    }

    pub fn objective_trace(&self) -> &[f64] {
        &self.mode.objective_trace
    }

    /// Latent posterior mode `f̂` at the training inputs.
    pub fn latent_mode(&self) -> &DVector<f64> {
        &self.mode.f
    }

    /// Max-norm of the gradient of the Laplace objective at the mode.
    pub fn mode_gradient_norm(&self) -> f64 {
        (&self.mode.grad - &self.mode.a).amax()
    }

    /// Mean and variance of the approximate latent posterior at `x`.
    pub fn latent(&self, x: &[f64]) -> (f64, f64) {
        let ks = self.params.cross(&self.inputs, x);
        let mean = ks.dot(&self.mode.grad);
        let v = forward_solve(&self.mode.l, &self.mode.w_sqrt.component_mul(&ks));
        let var = (self.params.signal_var() - v.dot(&v)).max(0.0);
        (mean, var)
    }

    /// Probit-approximated `p(y = +1 | x)`.
    pub fn probability(&self, x: &[f64]) -> f64 {
        let (mean, var) = self.latent(x);
        let kappa = 1.0 / (1.0 + std::f64::consts::PI * var / 8.0).sqrt();
        sigmoid(kappa * mean)
    }

    /// Pathwise sample of the latent function under the Laplace posterior.
    pub fn sample_latent(&self, feature_count: usize, rng: &mut ChaCha8Rng) -> PathwiseFunction {
        let prior = FourierPrior::sample(&self.params, feature_count, rng);
        let n = self.inputs.nrows();
        let ws = &self.mode.w_sqrt;
        let prior_at_x = DVector::from_vec(prior.eval_rows(&self.inputs));
        let e = DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)));
        // (K + W⁻¹)⁻¹ (z − f_prior(X) − ε) with z the Laplace pseudo-targets:
        // the z-part collapses to ∇ ln p(y|f̂) at the mode.
        let rhs = ws.component_mul(&prior_at_x) + e;
        let corr = ws.component_mul(&chol_solve(&self.mode.l, &rhs));
        let coeffs = &self.mode.grad - corr;
        PathwiseFunction::new(prior, self.params.clone(), self.inputs.clone(), coeffs)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    /// When false, `initial` hyperparameters are used as-is.
    pub optimize: bool,
    pub restarts: usize,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub initial: Option<KernelParams>,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            optimize: true,
            restarts: 2,
            max_iters: 100,
            grad_tol: 1e-3,
            initial: None,
        }
    }
}

/// Optimizes the Laplace evidence over kernel hyperparameters for one binary problem.
fn optimize_binary(
    inputs: &DMatrix<f64>,
    labels: &DVector<f64>,
    config: &ClassifierConfig,
    seed: u64,
) -> Result<KernelParams> {
    let d = inputs.ncols();
    let (lower, upper) = log_bounds(d, &NoiseForm::Fixed(vec![0.0]));
    let opts = OptimOptions {
        max_iters: config.max_iters,
        grad_tol: config.grad_tol,
        lower,
        upper,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut failures = Vec::new();
    for r in 0..config.restarts.max(1) {
        let x0 = match (&config.initial, r) {
            (Some(p), 0) => p.to_log(),
            _ => log_uniform_init(&mut rng, 1 + d),
        };
        let mut warm: Option<DVector<f64>> = None;
        let mut obj = |x: &[f64], want_grad: bool| -> Option<(f64, Option<Vec<f64>>)> {
            let params = KernelParams::from_log(x);
            let k = params.matrix(inputs);
            let mode = laplace_mode(&k, labels, warm.as_ref()).ok()?;
            warm = Some(mode.a.clone());
            let value = -mode.log_evidence;
            let grad = want_grad.then(|| {
                log_evidence_gradient(inputs, &params, &k, &mode)
                    .into_iter()
                    .map(|g| -g)
                    .collect()
            });
            Some((value, grad))
        };
        match minimize(&mut obj, &x0, &opts) {
            Some(res) => {
                log::debug!(
                    "classifier restart {r}: -log Z {:.6}, {} iterations, |g| {:.3e}",
                    res.value,
                    res.iterations,
                    res.grad_norm
                );
                if best.as_ref().is_none_or(|b| res.value < b.0) {
                    best = Some((res.value, res.x));
                }
            }
            None => failures.push(format!("restart {r}: initial point infeasible")),
        }
    }
    best.map(|(_, x)| KernelParams::from_log(&x))
        .ok_or(Error::Optimization(failures))
}

/// One-vs-rest Laplace GP classifier over modes `1..=n_modes`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(into = "ClassifierData", try_from = "ClassifierData")]
pub struct SwitchingClassifier {
    n_modes: usize,
    labels: Vec<usize>,
    classes: Vec<BinaryLaplace>,
    /// Two-mode problems train mode 1 and mirror it for mode 2.
    mirrored: bool,
}

#[derive(Serialize, Deserialize)]
struct ClassifierData {
    n_modes: usize,
    inputs: DMatrix<f64>,
    labels: Vec<usize>,
    params: Vec<KernelParams>,
    mirrored: bool,
}

impl From<SwitchingClassifier> for ClassifierData {
    fn from(c: SwitchingClassifier) -> Self {
        ClassifierData {
            n_modes: c.n_modes,
            inputs: c.classes[0].inputs.clone(),
            labels: c.labels,
            params: c.classes.iter().map(|b| b.params.clone()).collect(),
            mirrored: c.mirrored,
        }
    }
}

impl TryFrom<ClassifierData> for SwitchingClassifier {
    type Error = Error;
    fn try_from(d: ClassifierData) -> Result<Self> {
        SwitchingClassifier::assemble(d.inputs, d.labels, d.n_modes, d.params, d.mirrored)
    }
}

fn one_vs_rest(labels: &[usize], mode: usize) -> DVector<f64> {
    DVector::from_iterator(
        labels.len(),
        labels.iter().map(|l| if *l == mode { 1.0 } else { -1.0 }),
    )
}

impl SwitchingClassifier {
    fn assemble(
        inputs: DMatrix<f64>,
        labels: Vec<usize>,
        n_modes: usize,
        params: Vec<KernelParams>,
        mirrored: bool,
    ) -> Result<Self> {
        let mut classes = Vec::with_capacity(n_modes);
        if mirrored {
            let first = BinaryLaplace::fit(inputs, one_vs_rest(&labels, 1), params[0].clone())?;
            let second = first.mirrored();
            classes.push(first);
            classes.push(second);
        } else {
            for (c, p) in params.into_iter().enumerate() {
                classes.push(BinaryLaplace::fit(
                    inputs.clone(),
                    one_vs_rest(&labels, c + 1),
                    p,
                )?);
            }
        }
        Ok(SwitchingClassifier {
            n_modes,
            labels,
            classes,
            mirrored,
        })
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn input_dim(&self) -> usize {
        self.classes[0].inputs.ncols()
    }

    pub fn class(&self, mode: usize) -> &BinaryLaplace {
        &self.classes[mode - 1]
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.classes[0].inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Normalized mode probabilities, index `m - 1` for mode `m`.
    pub fn predict_mode_probability(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("predict_mode_probability", self.input_dim(), x.len())?;
        let raw: Vec<f64> = self.classes.iter().map(|c| c.probability(x)).collect();
        let total: f64 = raw.iter().sum();
        Ok(raw.iter().map(|p| p / total).collect())
    }

    /// Most probable mode; ties resolve to the lowest mode id.
    pub fn predict_mode(&self, x: &[f64]) -> Result<usize> {
        let p = self.predict_mode_probability(x)?;
        Ok(argmax_lowest(&p) + 1)
    }

    /// Fraction of training inputs whose predicted mode equals the label.
    pub fn training_accuracy(&self) -> f64 {
        let rows = rows_of(self.inputs());
        let hits = rows
            .iter()
            .zip(&self.labels)
            .filter(|(r, l)| self.predict_mode(r).ok() == Some(**l))
            .count();
        hits as f64 / self.labels.len() as f64
    }

    /// Draws a switching policy `x ↦ argmax_c f_c(x, ω)` from the approximate posterior.
    pub fn sample_switching_policy(&self, seed: u64, feature_count: usize) -> SampledPolicy {
        let latents = self
            .classes
            .iter()
            .enumerate()
            .map(|(c, class)| {
                let mut rng = seed::rng(seed, "policy-class", c as u64);
                class.sample_latent(feature_count, &mut rng)
            })
            .collect();
        SampledPolicy { latents }
    }
}

fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Trains the switching classifier on `(state, mode)` pairs.
pub fn train_classifier(
    states: &DMatrix<f64>,
    modes: &[usize],
    n_modes: usize,
    config: &ClassifierConfig,
    seed: u64,
) -> Result<SwitchingClassifier> {
    check_dim("train_classifier modes", states.nrows(), modes.len())?;
    if let Some(bad) = modes.iter().find(|m| **m == 0 || **m > n_modes) {
        return Err(Error::InvalidMode {
            mode: *bad,
            n_modes,
        });
    }
    let mut present: Vec<usize> = modes.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::DegenerateLabels(present));
    }

    let d = states.ncols();
    let default_params = || KernelParams::isotropic(1.0, 1.0, d);
    let mirrored = n_modes == 2;
    let trained = if mirrored { 1 } else { n_modes };
    // The same seed for every class keeps training equivariant under label permutation.
    let hyper_seed = seed::derive(seed, "classifier-hyper", 0);
    let mut params = Vec::with_capacity(trained);
    for c in 0..trained {
        let labels = one_vs_rest(modes, c + 1);
        let p = if config.optimize {
            optimize_binary(states, &labels, config, hyper_seed)
                .map_err(|e| e.in_stage(format!("classifier mode {}", c + 1)))?
        } else {
            match &config.initial {
                Some(p) => p.clone(),
                None => default_params()?,
            }
        };
        params.push(p);
    }
    SwitchingClassifier::assemble(states.clone(), modes.to_vec(), n_modes, params, mirrored)
}

/// A deterministic state-to-mode map drawn from the classifier posterior.
#[derive(Debug, Clone)]
pub struct SampledPolicy {
    latents: Vec<PathwiseFunction>,
}

impl SampledPolicy {
    pub fn latent_values(&self, x: &[f64]) -> Vec<f64> {
        self.latents.iter().map(|l| l.eval(x)).collect()
    }
}

impl SwitchingPolicy for SampledPolicy {
    fn mode(&self, x: &[f64], _previous: usize) -> usize {
        let v = self.latent_values(x);
        let best = argmax_lowest(&v);
        if v.iter()
            .enumerate()
            .any(|(i, u)| i != best && *u == v[best])
        {
            log::debug!(
                "switching policy tie at {x:?}; resolved to mode {}",
                best + 1
            );
        }
        best + 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clusters() -> (DMatrix<f64>, Vec<usize>) {
        let xs: Vec<f64> = (0..20)
            .map(|i| {
                if i < 10 {
                    -3.0 + 0.2 * i as f64
                } else {
                    1.2 + 0.2 * (i - 10) as f64
                }
            })
            .collect();
        let labels = (0..20).map(|i| if i < 10 { 1 } else { 2 }).collect();
        (DMatrix::from_column_slice(20, 1, &xs), labels)
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(800.0)).abs() < 1e-300);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_labels_rejected() {
        let x = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 2.0]);
        let err = train_classifier(&x, &[1, 1, 1], 2, &ClassifierConfig::default(), 0).unwrap_err();
        assert!(matches!(err, Error::DegenerateLabels(_)));
    }

    #[test]
    fn out_of_range_label_rejected() {
        let x = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        assert!(train_classifier(&x, &[1, 3], 2, &ClassifierConfig::default(), 0).is_err());
    }

    #[test]
    fn newton_increases_objective_and_converges() {
        let (x, labels) = clusters();
        let b = BinaryLaplace::fit(
            x,
            one_vs_rest(&labels, 1),
            KernelParams::new(2.0, vec![0.5]).unwrap(),
        )
        .unwrap();
        assert!(b.objective_trace().windows(2).all(|w| w[1] >= w[0] - 1e-12));
        assert!(b.mode_gradient_norm() <= MODE_GRAD_TOL);
    }

    #[test]
    fn evidence_gradient_matches_finite_differences() {
        let x = DMatrix::from_row_slice(
            8,
            2,
            &[
                0.1, 0.3, -0.4, 0.8, 0.9, -0.2, 1.5, 0.4, -1.1, -0.7, 0.6, 1.2, -0.3, -1.4, 1.1,
                0.9,
            ],
        );
        let y = DVector::from_vec(vec![1.0, -1.0, 1.0, 1.0, -1.0, -1.0, 1.0, -1.0]);
        let logp = [0.4f64, -0.3, 0.2];
        let ev = |lp: &[f64]| {
            let p = KernelParams::from_log(lp);
            laplace_mode(&p.matrix(&x), &y, None).unwrap().log_evidence
        };
        let p = KernelParams::from_log(&logp);
        let k = p.matrix(&x);
        let mode = laplace_mode(&k, &y, None).unwrap();
        let g = log_evidence_gradient(&x, &p, &k, &mode);
        for i in 0..3 {
            let h = 1e-5;
            let mut up = logp.to_vec();
            let mut dn = logp.to_vec();
            up[i] += h;
            dn[i] -= h;
            let fd = (ev(&up) - ev(&dn)) / (2.0 * h);
            assert!(
                (g[i] - fd).abs() <= 1e-5 * fd.abs().max(1e-2),
                "{i}: {} vs {fd}",
                g[i]
            );
        }
    }

    #[test]
    fn symmetric_pair_gives_half() {
        let x = DMatrix::from_column_slice(2, 1, &[-1.0, 1.0]);
        let cfg = ClassifierConfig {
            optimize: false,
            initial: Some(KernelParams::new(1.0, vec![0.5]).unwrap()),
            ..Default::default()
        };
        let clf = train_classifier(&x, &[1, 2], 2, &cfg, 0).unwrap();
        let p = clf.predict_mode_probability(&[0.0]).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-6 && (p[1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn separable_clusters_fully_classified() {
        let (x, labels) = clusters();
        let clf = train_classifier(&x, &labels, 2, &ClassifierConfig::default(), 3).unwrap();
        assert_eq!(clf.training_accuracy(), 1.0);
        assert!(clf.predict_mode_probability(&[-3.0]).unwrap()[0] > 0.5);
        assert!(clf.predict_mode_probability(&[3.0]).unwrap()[1] > 0.5);
        assert_eq!(clf.predict_mode(&[-0.5]).unwrap(), 1);
    }
}
