//! Box-bounded quasi-Newton minimization with Armijo backtracking.

use nalgebra::{DMatrix, DVector};

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;
/// Largest coordinate change of a single trial step (parameters live in log space).
const MAX_STEP: f64 = 2.0;

#[derive(Debug, Clone)]
pub struct OptimOptions {
    pub max_iters: usize,
    pub grad_tol: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StopReason {
    GradientTolerance,
    IterationCap,
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub stop: StopReason,
    /// Objective value after every accepted step, starting with the initial point.
    pub trace: Vec<f64>,
}

impl OptimResult {
    pub fn converged(&self) -> bool {
        self.stop == StopReason::GradientTolerance
    }
}

/// Objective callback: returns `None` when the point is numerically infeasible
/// (treated as `+∞`). The gradient is only requested when `want_grad` is set.
pub trait Objective {
    fn eval(&mut self, x: &[f64], want_grad: bool) -> Option<(f64, Option<Vec<f64>>)>;
}

impl<F> Objective for F
where
    F: FnMut(&[f64], bool) -> Option<(f64, Option<Vec<f64>>)>,
{
    fn eval(&mut self, x: &[f64], want_grad: bool) -> Option<(f64, Option<Vec<f64>>)> {
        self(x, want_grad)
    }
}

fn projected_gradient(x: &[f64], g: &[f64], opts: &OptimOptions) -> Vec<f64> {
    x.iter()
        .zip(g)
        .enumerate()
        .map(|(i, (xi, gi))| {
            let at_lower = *xi <= opts.lower[i] && *gi > 0.0;
            let at_upper = *xi >= opts.upper[i] && *gi < 0.0;
            if at_lower || at_upper {
                0.0
            } else {
                *gi
            }
        })
        .collect()
}

fn clamp(x: &mut [f64], opts: &OptimOptions) {
    for (i, v) in x.iter_mut().enumerate() {
        *v = v.clamp(opts.lower[i], opts.upper[i]);
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn full_eval(obj: &mut impl Objective, x: &[f64]) -> Option<(f64, Vec<f64>)> {
    match obj.eval(x, true) {
        Some((f, Some(g))) if f.is_finite() && g.iter().all(|v| v.is_finite()) => Some((f, g)),
        _ => None,
    }
}

/// Minimizes `obj` from `x0`. Returns `None` if the starting point itself is infeasible.
pub fn minimize(obj: &mut impl Objective, x0: &[f64], opts: &OptimOptions) -> Option<OptimResult> {
    let n = x0.len();
    let mut x = x0.to_vec();
    clamp(&mut x, opts);
    let (mut f, mut g) = full_eval(obj, &x)?;
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut h_is_identity = true;
    let mut trace = vec![f];
    let mut iterations = 0;
    let stop;

    loop {
        let pg = projected_gradient(&x, &g, opts);
        if norm(&pg) <= opts.grad_tol {
            stop = StopReason::GradientTolerance;
            break;
        }
        if iterations >= opts.max_iters {
            stop = StopReason::IterationCap;
            break;
        }

        let accepted = loop {
            let active: Vec<bool> = pg
                .iter()
                .zip(&g)
                .map(|(p, g)| *p == 0.0 && *g != 0.0)
                .collect();
            let gv = DVector::from_vec(pg.clone());
            let mut d = -(&h * &gv);
            for i in 0..n {
                if active[i] {
                    d[i] = 0.0;
                }
            }
            if d.dot(&gv) >= 0.0 {
                d = -gv.clone();
            }
            let dmax = d.amax();
            let mut alpha = if dmax > MAX_STEP {
                MAX_STEP / dmax
            } else {
                1.0
            };
            let mut found = None;
            for _ in 0..MAX_BACKTRACKS {
                let mut trial: Vec<f64> =
                    x.iter().zip(d.iter()).map(|(a, b)| a + alpha * b).collect();
                clamp(&mut trial, opts);
                let decrease: f64 = g
                    .iter()
                    .zip(&trial)
                    .zip(&x)
                    .map(|((gi, t), xi)| gi * (t - xi))
                    .sum();
                if decrease < 0.0 {
                    if let Some((ft, _)) = obj.eval(&trial, false) {
                        if ft.is_finite() && ft <= f + ARMIJO_C1 * decrease {
                            found = Some(trial);
                            break;
                        }
                    }
                }
                alpha *= 0.5;
            }
            match found {
                Some(t) => break Some(t),
                None if !h_is_identity => {
                    h = DMatrix::identity(n, n);
                    h_is_identity = true;
                }
                None => break None,
            }
        };

        let Some(x_new) = accepted else {
            stop = StopReason::LineSearchFailed;
            break;
        };
        let Some((f_new, g_new)) = full_eval(obj, &x_new) else {
            stop = StopReason::LineSearchFailed;
            break;
        };
        let s = DVector::from_iterator(n, x_new.iter().zip(&x).map(|(a, b)| a - b));
        let y = DVector::from_iterator(n, g_new.iter().zip(&g).map(|(a, b)| a - b));
        let sy = s.dot(&y);
        if sy > 1e-10 * s.norm() * y.norm() {
            if h_is_identity {
                h *= sy / y.dot(&y);
            }
            let rho = 1.0 / sy;
            let eye = DMatrix::<f64>::identity(n, n);
            let left = &eye - rho * &s * y.transpose();
            let right = &eye - rho * &y * s.transpose();
            h = left * h * right + rho * &s * s.transpose();
            h_is_identity = false;
        }
        x = x_new;
        f = f_new;
        g = g_new;
        trace.push(f);
        iterations += 1;
    }

    let grad_norm = norm(&projected_gradient(&x, &g, opts));
    Some(OptimResult {
        x,
        value: f,
        grad_norm,
        iterations,
        stop,
        trace,
    })
}
