//! Squared-exponential kernel, its input derivatives, and Gram assembly.
//!
//! The kernel is `k(x, x') = σ_f² · exp(-(x - x')ᵀ Λ (x - x'))` with
//! `Λ = diag(lengthscale_diag)`. The diagonal entries multiply the squared
//! distance directly, so a *larger* entry means *faster* decay (shorter
//! correlation length). This is the inverse of the more common
//! `exp(-½ (x - x')ᵀ L⁻² (x - x'))` convention.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// First jitter level, relative to `σ_f²`.
pub const JITTER_START: f64 = 1e-10;
/// Largest jitter level tried before giving up, relative to `σ_f²`.
pub const JITTER_MAX: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub signal_std: f64,
    /// Entries of `Λ`; one per input dimension.
    pub lengthscale_diag: Vec<f64>,
}

impl KernelParams {
    pub fn new(signal_std: f64, lengthscale_diag: Vec<f64>) -> Result<Self> {
        if !(signal_std > 0.0 && signal_std.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "signal_std must be positive, got {signal_std}"
            )));
        }
        if lengthscale_diag.is_empty() {
            return Err(Error::InvalidArgument("empty lengthscale_diag".into()));
        }
        if let Some(bad) = lengthscale_diag
            .iter()
            .find(|l| !(**l > 0.0 && l.is_finite()))
        {
            return Err(Error::InvalidArgument(format!(
                "lengthscale_diag entries must be positive, got {bad}"
            )));
        }
        Ok(KernelParams {
            signal_std,
            lengthscale_diag,
        })
    }

    /// Isotropic parameters for an `input_dim`-dimensional input.
    pub fn isotropic(signal_std: f64, lambda: f64, input_dim: usize) -> Result<Self> {
        Self::new(signal_std, vec![lambda; input_dim])
    }

    pub fn input_dim(&self) -> usize {
        self.lengthscale_diag.len()
    }

    pub fn signal_var(&self) -> f64 {
        self.signal_std * self.signal_std
    }

    /// Packs `[ln σ_f, ln λ_1, …, ln λ_n]`.
    pub fn to_log(&self) -> Vec<f64> {
        std::iter::once(self.signal_std.ln())
            .chain(self.lengthscale_diag.iter().map(|l| l.ln()))
            .collect()
    }

    pub fn from_log(log: &[f64]) -> Self {
        KernelParams {
            signal_std: log[0].exp(),
            lengthscale_diag: log[1..].iter().map(|l| l.exp()).collect(),
        }
    }

    /// Unchecked evaluation on raw slices.
    #[inline]
    pub(crate) fn eval(&self, x: &[f64], xp: &[f64]) -> f64 {
        let mut q = 0.0;
        for ((a, b), l) in x.iter().zip(xp).zip(&self.lengthscale_diag) {
            let d = a - b;
            q += l * d * d;
        }
        self.signal_var() * (-q).exp()
    }

    /// Row-vector of kernel values between `x` and every row of `inputs`.
    pub(crate) fn cross(&self, inputs: &DMatrix<f64>, x: &[f64]) -> DVector<f64> {
        let n = inputs.nrows();
        let d = inputs.ncols();
        let mut out = DVector::zeros(n);
        let mut row = vec![0.0; d];
        for i in 0..n {
            for (c, r) in row.iter_mut().enumerate() {
                *r = inputs[(i, c)];
            }
            out[i] = self.eval(&row, x);
        }
        out
    }

    /// Noise-free kernel matrix between all rows of `inputs`.
    pub(crate) fn matrix(&self, inputs: &DMatrix<f64>) -> DMatrix<f64> {
        let n = inputs.nrows();
        let rows = rows_of(inputs);
        let mut k = DMatrix::zeros(n, n);
        let var = self.signal_var();
        for i in 0..n {
            k[(i, i)] = var;
            for j in 0..i {
                let v = self.eval(&rows[i], &rows[j]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        k
    }
}

pub(crate) fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

pub fn se_kernel(x: &[f64], x_prime: &[f64], params: &KernelParams) -> Result<f64> {
    check_dim("se_kernel x", params.input_dim(), x.len())?;
    check_dim("se_kernel x'", params.input_dim(), x_prime.len())?;
    Ok(params.eval(x, x_prime))
}

fn scalar_lambda(params: &KernelParams) -> Result<f64> {
    check_dim("scalar kernel derivative", 1, params.input_dim())?;
    Ok(params.lengthscale_diag[0])
}

/// `∂k(z, t')/∂z` at `z = t`.
pub fn se_kernel_d1(t: f64, t_prime: f64, params: &KernelParams) -> Result<f64> {
    let lambda = scalar_lambda(params)?;
    let d = t - t_prime;
    Ok(-2.0 * lambda * d * params.eval(&[t], &[t_prime]))
}

/// `∂k(t, z)/∂z` at `z = t'`.
pub fn se_kernel_d2(t: f64, t_prime: f64, params: &KernelParams) -> Result<f64> {
    Ok(-se_kernel_d1(t, t_prime, params)?)
}

/// `∂²k(z, z')/∂z∂z'` at `(t, t')`.
pub fn se_kernel_d12(t: f64, t_prime: f64, params: &KernelParams) -> Result<f64> {
    let lambda = scalar_lambda(params)?;
    let d = t - t_prime;
    Ok(2.0 * lambda * (1.0 - 2.0 * lambda * d * d) * params.eval(&[t], &[t_prime]))
}

/// Kernel matrix plus diagonal noise plus jitter, with its Cholesky factor.
#[derive(Clone, Debug)]
pub struct GramMatrix {
    pub entries: DMatrix<f64>,
    pub jitter: f64,
    pub chol: Cholesky<f64, Dyn>,
}

impl GramMatrix {
    pub fn size(&self) -> usize {
        self.entries.nrows()
    }

    pub fn lower(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self
            .chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|d| d.ln())
            .sum::<f64>()
    }
}

/// Expands a noise vector of length `n` or `1` (broadcast) into a length-`n` vector.
pub(crate) fn broadcast_noise(noise: &[f64], n: usize) -> Result<Vec<f64>> {
    if noise.len() == 1 {
        Ok(vec![noise[0]; n])
    } else {
        check_dim("noise vector", n, noise.len())?;
        Ok(noise.to_vec())
    }
}

/// Factorizes `base + jitter·I`, escalating the jitter ×10 from
/// `JITTER_START·scale` to `JITTER_MAX·scale`.
pub fn cholesky_with_jitter(
    base: &DMatrix<f64>,
    scale: f64,
) -> Result<(DMatrix<f64>, f64, Cholesky<f64, Dyn>)> {
    let mut rel = JITTER_START;
    loop {
        let jitter = rel * scale;
        let mut m = base.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += jitter;
        }
        if let Some(ch) = m.clone().cholesky() {
            if ch
                .l_dirty()
                .diagonal()
                .iter()
                .all(|d| d.is_finite() && *d > 0.0)
            {
                return Ok((m, jitter, ch));
            }
        }
        if rel >= JITTER_MAX * (1.0 - 1e-12) {
            let diag = base.diagonal();
            return Err(Error::Cholesky {
                size: base.nrows(),
                max_jitter: jitter,
                min_diag: diag.min(),
                max_diag: diag.max(),
            });
        }
        rel *= 10.0;
    }
}

/// Assembles `K + diag(noise) + jitter·I` over the rows of `inputs`.
pub fn gram(
    inputs: &DMatrix<f64>,
    params: &KernelParams,
    noise_diag: &[f64],
) -> Result<GramMatrix> {
    if inputs.nrows() == 0 {
        return Err(Error::InvalidArgument("gram: empty input set".into()));
    }
    check_dim("gram inputs", params.input_dim(), inputs.ncols())?;
    let noise = broadcast_noise(noise_diag, inputs.nrows())?;
    if let Some(bad) = noise.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "negative noise variance {bad}"
        )));
    }
    let mut k = params.matrix(inputs);
    for (i, v) in noise.iter().enumerate() {
        k[(i, i)] += v;
    }
    let (entries, jitter, chol) = cholesky_with_jitter(&k, params.signal_var())?;
    Ok(GramMatrix {
        entries,
        jitter,
        chol,
    })
}
