//! Random Fourier features for prior draws of squared-exponential GPs.
//!
//! For `k(x, x') = σ² exp(-(x-x')ᵀΛ(x-x'))` the spectral measure is
//! `N(0, 2Λ)`, so `f(x) = σ √(2/F) Σ wᵢ cos(ωᵢᵀx + bᵢ)` with `ω ~ N(0, 2Λ)`,
//! `b ~ U[0, 2π)`, `w ~ N(0, 1)` has covariance exactly `k` in expectation
//! over the feature draw.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::kernel::KernelParams;

#[derive(Debug, Clone)]
pub struct FourierPrior {
    omegas: DMatrix<f64>,
    phases: Vec<f64>,
    weights: Vec<f64>,
    scale: f64,
}

impl FourierPrior {
    pub fn sample(params: &KernelParams, feature_count: usize, rng: &mut ChaCha8Rng) -> Self {
        let n = params.input_dim();
        let f = feature_count.max(1);
        let std: Vec<f64> = params
            .lengthscale_diag
            .iter()
            .map(|l| (2.0 * l).sqrt())
            .collect();
        let mut omegas = DMatrix::zeros(f, n);
        let mut phases = Vec::with_capacity(f);
        let mut weights = Vec::with_capacity(f);
        for i in 0..f {
            for d in 0..n {
                let z: f64 = StandardNormal.sample(rng);
                omegas[(i, d)] = std[d] * z;
            }
            phases.push(rng.random_range(0.0..std::f64::consts::TAU));
            weights.push(StandardNormal.sample(rng));
        }
        FourierPrior {
            omegas,
            phases,
            weights,
            scale: params.signal_std * (2.0 / f as f64).sqrt(),
        }
    }

    pub fn feature_count(&self) -> usize {
        self.phases.len()
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let n = self.omegas.ncols();
        let mut acc = 0.0;
        for i in 0..self.phases.len() {
            let mut arg = self.phases[i];
            for d in 0..n {
                arg += self.omegas[(i, d)] * x[d];
            }
            acc += self.weights[i] * arg.cos();
        }
        self.scale * acc
    }

    pub fn eval_rows(&self, inputs: &DMatrix<f64>) -> Vec<f64> {
        crate::kernel::rows_of(inputs)
            .iter()
            .map(|r| self.eval(r))
            .collect()
    }
}

/// `x ↦ f_prior(x) + k(x, X)·v`, one pathwise posterior draw.
#[derive(Debug, Clone)]
pub struct PathwiseFunction {
    prior: FourierPrior,
    params: KernelParams,
    inputs: DMatrix<f64>,
    coeffs: DVector<f64>,
}

impl PathwiseFunction {
    pub(crate) fn new(
        prior: FourierPrior,
        params: KernelParams,
        inputs: DMatrix<f64>,
        coeffs: DVector<f64>,
    ) -> Self {
        PathwiseFunction {
            prior,
            params,
            inputs,
            coeffs,
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let update = if self.coeffs.is_empty() {
            0.0
        } else {
            self.params.cross(&self.inputs, x).dot(&self.coeffs)
        };
        self.prior.eval(x) + update
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn empirical_covariance_matches_kernel() {
        let p = KernelParams::new(1.3, vec![0.8, 2.0]).unwrap();
        let (a, b) = ([0.1, -0.2], [0.5, 0.1]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 4000;
        let (mut saa, mut sab) = (0.0, 0.0);
        for _ in 0..n {
            let f = FourierPrior::sample(&p, 64, &mut rng);
            let (fa, fb) = (f.eval(&a), f.eval(&b));
            saa += fa * fa;
            sab += fa * fb;
        }
        let kab = p.eval(&a, &b);
        assert!((saa / n as f64 - p.signal_var()).abs() < 0.1 * p.signal_var());
        assert!((sab / n as f64 - kab).abs() < 0.1 * p.signal_var());
    }
}
