//! Switching port-Hamiltonian structure: `ẋ = [J_s(x) − R_s(x)]∇H(x) + G(x)u`,
//! `y = G(x)ᵀ∇H(x)`.
//!
//! Modes are 1-based throughout (`1..=n_modes`).

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Skew-symmetry / PSD tolerance used by [`validate_structure`].
pub const STRUCTURE_TOL: f64 = 1e-9;

/// Mode-indexed interconnection, dissipation and port matrices.
pub trait SphsStructure: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn n_modes(&self) -> usize;
    fn interconnection(&self, mode: usize, x: &[f64]) -> DMatrix<f64>;
    fn dissipation(&self, mode: usize, x: &[f64]) -> DMatrix<f64>;
    fn port(&self, x: &[f64]) -> DMatrix<f64>;

    /// `J_s(x) − R_s(x)`.
    fn combined(&self, mode: usize, x: &[f64]) -> DMatrix<f64> {
        self.interconnection(mode, x) - self.dissipation(mode, x)
    }
}

/// `∇H` (and optionally `H`) as a function of the state.
pub trait GradientField: Send + Sync {
    fn dim(&self) -> usize;
    fn gradient(&self, x: &[f64]) -> DVector<f64>;
    fn potential(&self, _x: &[f64]) -> Option<f64> {
        None
    }
}

/// State-to-mode map. `previous` lets hysteretic ground-truth logic see the current mode.
pub trait SwitchingPolicy: Send + Sync {
    fn mode(&self, x: &[f64], previous: usize) -> usize;
}

pub struct FixedMode(pub usize);

impl SwitchingPolicy for FixedMode {
    fn mode(&self, _x: &[f64], _previous: usize) -> usize {
        self.0
    }
}

/// Gradient field from closures.
pub struct FnField<G, P = fn(&[f64]) -> f64> {
    dim: usize,
    grad: G,
    potential: Option<P>,
}

impl<G> FnField<G>
where
    G: Fn(&[f64]) -> DVector<f64> + Send + Sync,
{
    pub fn new(dim: usize, grad: G) -> Self {
        FnField {
            dim,
            grad,
            potential: None,
        }
    }
}

impl<G, P> FnField<G, P>
where
    G: Fn(&[f64]) -> DVector<f64> + Send + Sync,
    P: Fn(&[f64]) -> f64 + Send + Sync,
{
    pub fn with_potential(dim: usize, grad: G, potential: P) -> Self {
        FnField {
            dim,
            grad,
            potential: Some(potential),
        }
    }
}

impl<G, P> GradientField for FnField<G, P>
where
    G: Fn(&[f64]) -> DVector<f64> + Send + Sync,
    P: Fn(&[f64]) -> f64 + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn gradient(&self, x: &[f64]) -> DVector<f64> {
        (self.grad)(x)
    }
    fn potential(&self, x: &[f64]) -> Option<f64> {
        self.potential.as_ref().map(|p| p(x))
    }
}

/// Port signals `(u, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PortSignal {
    pub u: DVector<f64>,
    pub y: DVector<f64>,
}

fn check_mode(structure: &dyn SphsStructure, mode: usize) -> Result<()> {
    if mode == 0 || mode > structure.n_modes() {
        Err(Error::InvalidMode {
            mode,
            n_modes: structure.n_modes(),
        })
    } else {
        Ok(())
    }
}

/// Right-hand side of the switching dynamics.
pub fn rhs(
    structure: &dyn SphsStructure,
    grad: &dyn GradientField,
    mode: usize,
    x: &[f64],
    u: &[f64],
) -> Result<DVector<f64>> {
    check_mode(structure, mode)?;
    check_dim("rhs state", structure.state_dim(), x.len())?;
    check_dim("rhs input", structure.input_dim(), u.len())?;
    Ok(rhs_unchecked(structure, &grad.gradient(x), mode, x, u))
}

pub(crate) fn rhs_unchecked(
    structure: &dyn SphsStructure,
    g: &DVector<f64>,
    mode: usize,
    x: &[f64],
    u: &[f64],
) -> DVector<f64> {
    let mut out = structure.combined(mode, x) * g;
    if !u.is_empty() {
        out += structure.port(x) * DVector::from_column_slice(u);
    }
    out
}

/// `y = G(x)ᵀ ∇H(x)`.
pub fn output_port(
    structure: &dyn SphsStructure,
    grad: &dyn GradientField,
    x: &[f64],
) -> DVector<f64> {
    structure.port(x).transpose() * grad.gradient(x)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeReport {
    pub mode: usize,
    /// `max |J + Jᵀ|` over samples.
    pub max_skew_violation: f64,
    /// `max |R − Rᵀ|` over samples.
    pub max_dissipation_asymmetry: f64,
    /// Smallest eigenvalue of the symmetric part of `R` over samples.
    pub min_dissipation_eigenvalue: f64,
}

impl ModeReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_skew_violation <= tol
            && self.max_dissipation_asymmetry <= tol
            && self.min_dissipation_eigenvalue >= -tol
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StructureReport {
    pub modes: Vec<ModeReport>,
    pub tolerance: f64,
    pub passed: bool,
}

/// Checks skew-symmetry of `J_s` and symmetric positive semidefiniteness of
/// `R_s` at every sample state for each listed mode.
pub fn validate_structure(
    structure: &dyn SphsStructure,
    sample_states: &[Vec<f64>],
    modes: &[usize],
) -> StructureReport {
    let n = structure.state_dim();
    let reports: Vec<ModeReport> = modes
        .iter()
        .map(|&mode| {
            let mut rep = ModeReport {
                mode,
                max_skew_violation: 0.0,
                max_dissipation_asymmetry: 0.0,
                min_dissipation_eigenvalue: f64::INFINITY,
            };
            if check_mode(structure, mode).is_err() {
                rep.max_skew_violation = f64::INFINITY;
                return rep;
            }
            for x in sample_states.iter().filter(|x| x.len() == n) {
                let j = structure.interconnection(mode, x);
                let r = structure.dissipation(mode, x);
                rep.max_skew_violation = rep.max_skew_violation.max((&j + j.transpose()).amax());
                rep.max_dissipation_asymmetry = rep
                    .max_dissipation_asymmetry
                    .max((&r - r.transpose()).amax());
                let sym = (&r + r.transpose()) * 0.5;
                let min_eig = SymmetricEigen::new(sym).eigenvalues.min();
                rep.min_dissipation_eigenvalue = rep.min_dissipation_eigenvalue.min(min_eig);
            }
            rep
        })
        .collect();
    let passed = !sample_states.is_empty() && reports.iter().all(|r| r.passed(STRUCTURE_TOL));
    StructureReport {
        modes: reports,
        tolerance: STRUCTURE_TOL,
        passed,
    }
}

/// `(Ḣ, uᵀy)` at `(mode, x, u)`; `Ḣ ≤ uᵀy` for a valid structure.
pub fn dissipation_rate(
    structure: &dyn SphsStructure,
    grad: &dyn GradientField,
    mode: usize,
    x: &[f64],
    u: &[f64],
) -> Result<(f64, f64)> {
    let g = grad.gradient(x);
    let f = rhs(structure, grad, mode, x, u)?;
    let y = structure.port(x).transpose() * &g;
    let supply = if u.is_empty() {
        0.0
    } else {
        DVector::from_column_slice(u).dot(&y)
    };
    Ok((g.dot(&f), supply))
}

/// Constant per-mode `J`, `R` and a shared constant `G`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstantStructure {
    pub j: Vec<DMatrix<f64>>,
    pub r: Vec<DMatrix<f64>>,
    pub g: DMatrix<f64>,
}

impl ConstantStructure {
    pub fn new(j: Vec<DMatrix<f64>>, r: Vec<DMatrix<f64>>, g: DMatrix<f64>) -> Result<Self> {
        if j.is_empty() || j.len() != r.len() {
            return Err(Error::InvalidArgument(format!(
                "need one J and one R per mode, got {} and {}",
                j.len(),
                r.len()
            )));
        }
        let n = g.nrows();
        for m in j.iter().chain(&r) {
            if m.nrows() != n || m.ncols() != n {
                return Err(Error::Dimension {
                    context: "constant structure matrix",
                    expected: n,
                    actual: m.nrows().max(m.ncols()),
                });
            }
        }
        Ok(ConstantStructure { j, r, g })
    }
}

impl SphsStructure for ConstantStructure {
    fn state_dim(&self) -> usize {
        self.g.nrows()
    }
    fn input_dim(&self) -> usize {
        self.g.ncols()
    }
    fn n_modes(&self) -> usize {
        self.j.len()
    }
    fn interconnection(&self, mode: usize, _x: &[f64]) -> DMatrix<f64> {
        self.j[mode - 1].clone()
    }
    fn dissipation(&self, mode: usize, _x: &[f64]) -> DMatrix<f64> {
        self.r[mode - 1].clone()
    }
    fn port(&self, _x: &[f64]) -> DMatrix<f64> {
        self.g.clone()
    }
}

/// Which columns of each subsystem's `G` are coupled and which stay external.
#[derive(Debug, Clone)]
pub struct PortSelection {
    pub connected_1: Vec<usize>,
    pub external_1: Vec<usize>,
    pub connected_2: Vec<usize>,
    pub external_2: Vec<usize>,
}

impl PortSelection {
    /// Couples the first `m_c` ports of both systems and exposes the rest.
    pub fn leading(m_c: usize, m1: usize, m2: usize) -> Self {
        PortSelection {
            connected_1: (0..m_c).collect(),
            external_1: (m_c..m1).collect(),
            connected_2: (0..m_c).collect(),
            external_2: (m_c..m2).collect(),
        }
    }
}

fn check_ports(conn: &[usize], ext: &[usize], m: usize) -> Result<()> {
    let mut seen = vec![false; m];
    for &p in conn.iter().chain(ext) {
        if p >= m {
            return Err(Error::InvalidArgument(format!(
                "port index {p} out of range 0..{m}"
            )));
        }
        if seen[p] {
            return Err(Error::OverlappingPorts(p));
        }
        seen[p] = true;
    }
    Ok(())
}

fn select_columns(m: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), cols.len(), |i, j| m[(i, cols[j])])
}

/// Negative-feedback interconnection `u₁ᶜ = −y₂ᶜ`, `u₂ᶜ = y₁ᶜ` of two systems.
///
/// The composed state is `(x, ξ)`, composed modes are encoded as
/// `(s₁ − 1)·n_{s,2} + s₂`, and the composed `G` stacks the external columns
/// block-diagonally.
pub struct Interconnected {
    first: Arc<dyn SphsStructure>,
    second: Arc<dyn SphsStructure>,
    ports: PortSelection,
}

impl Interconnected {
    pub fn new(
        first: Arc<dyn SphsStructure>,
        second: Arc<dyn SphsStructure>,
        ports: PortSelection,
    ) -> Result<Self> {
        check_ports(&ports.connected_1, &ports.external_1, first.input_dim())?;
        check_ports(&ports.connected_2, &ports.external_2, second.input_dim())?;
        if ports.connected_1.len() != ports.connected_2.len() {
            return Err(Error::Dimension {
                context: "connected port count",
                expected: ports.connected_1.len(),
                actual: ports.connected_2.len(),
            });
        }
        Ok(Interconnected {
            first,
            second,
            ports,
        })
    }

    pub fn encode_mode(&self, s1: usize, s2: usize) -> usize {
        (s1 - 1) * self.second.n_modes() + s2
    }

    pub fn decode_mode(&self, mode: usize) -> (usize, usize) {
        let n2 = self.second.n_modes();
        ((mode - 1) / n2 + 1, (mode - 1) % n2 + 1)
    }

    fn split<'a>(&self, z: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        z.split_at(self.first.state_dim())
    }

    fn coupling(&self, z: &[f64]) -> DMatrix<f64> {
        let (x, xi) = self.split(z);
        let g1c = select_columns(&self.first.port(x), &self.ports.connected_1);
        let g2c = select_columns(&self.second.port(xi), &self.ports.connected_2);
        g1c * g2c.transpose()
    }

    fn block(&self, a: DMatrix<f64>, b: DMatrix<f64>, off: Option<DMatrix<f64>>) -> DMatrix<f64> {
        let n1 = self.first.state_dim();
        let n2 = self.second.state_dim();
        let mut m = DMatrix::zeros(n1 + n2, n1 + n2);
        m.view_mut((0, 0), (n1, n1)).copy_from(&a);
        m.view_mut((n1, n1), (n2, n2)).copy_from(&b);
        if let Some(c) = off {
            m.view_mut((0, n1), (n1, n2)).copy_from(&(-&c));
            m.view_mut((n1, 0), (n2, n1)).copy_from(&c.transpose());
        }
        m
    }
}

impl SphsStructure for Interconnected {
    fn state_dim(&self) -> usize {
        self.first.state_dim() + self.second.state_dim()
    }
    fn input_dim(&self) -> usize {
        self.ports.external_1.len() + self.ports.external_2.len()
    }
    fn n_modes(&self) -> usize {
        self.first.n_modes() * self.second.n_modes()
    }
    fn interconnection(&self, mode: usize, z: &[f64]) -> DMatrix<f64> {
        let (s1, s2) = self.decode_mode(mode);
        let (x, xi) = self.split(z);
        self.block(
            self.first.interconnection(s1, x),
            self.second.interconnection(s2, xi),
            Some(self.coupling(z)),
        )
    }
    fn dissipation(&self, mode: usize, z: &[f64]) -> DMatrix<f64> {
        let (s1, s2) = self.decode_mode(mode);
        let (x, xi) = self.split(z);
        self.block(
            self.first.dissipation(s1, x),
            self.second.dissipation(s2, xi),
            None,
        )
    }
    fn port(&self, z: &[f64]) -> DMatrix<f64> {
        let (x, xi) = self.split(z);
        let g1 = select_columns(&self.first.port(x), &self.ports.external_1);
        let g2 = select_columns(&self.second.port(xi), &self.ports.external_2);
        let (n1, n2) = (self.first.state_dim(), self.second.state_dim());
        let mut g = DMatrix::zeros(n1 + n2, g1.ncols() + g2.ncols());
        g.view_mut((0, 0), (n1, g1.ncols())).copy_from(&g1);
        g.view_mut((n1, g1.ncols()), (n2, g2.ncols()))
            .copy_from(&g2);
        g
    }
}

/// `(∇ₓĤ₁, ∇_ξĤ₂)`.
pub struct ConcatField {
    pub first: Arc<dyn GradientField>,
    pub second: Arc<dyn GradientField>,
}

impl GradientField for ConcatField {
    fn dim(&self) -> usize {
        self.first.dim() + self.second.dim()
    }
    fn gradient(&self, z: &[f64]) -> DVector<f64> {
        let (x, xi) = z.split_at(self.first.dim());
        let a = self.first.gradient(x);
        let b = self.second.gradient(xi);
        DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
    }
    fn potential(&self, z: &[f64]) -> Option<f64> {
        let (x, xi) = z.split_at(self.first.dim());
        Some(self.first.potential(x)? + self.second.potential(xi)?)
    }
}

/// Pairs two subsystem policies into a composed mode id.
pub struct PairedPolicy {
    pub first: Arc<dyn SwitchingPolicy>,
    pub second: Arc<dyn SwitchingPolicy>,
    pub split: usize,
    pub n_modes_2: usize,
}

impl SwitchingPolicy for PairedPolicy {
    fn mode(&self, z: &[f64], previous: usize) -> usize {
        let (x, xi) = z.split_at(self.split);
        let (p1, p2) = if previous == 0 {
            (0, 0)
        } else {
            (
                (previous - 1) / self.n_modes_2 + 1,
                (previous - 1) % self.n_modes_2 + 1,
            )
        };
        let s1 = self.first.mode(x, p1);
        let s2 = self.second.mode(xi, p2);
        (s1 - 1) * self.n_modes_2 + s2
    }
}

/// Builds the interconnected structure, gradient field and policy of two systems.
pub fn interconnect(
    sys1: (Arc<dyn SphsStructure>, Arc<dyn GradientField>),
    sys2: (Arc<dyn SphsStructure>, Arc<dyn GradientField>),
    ports: PortSelection,
) -> Result<(Interconnected, ConcatField)> {
    let structure = Interconnected::new(sys1.0, sys2.0, ports)?;
    Ok((
        structure,
        ConcatField {
            first: sys1.1,
            second: sys2.1,
        },
    ))
}
