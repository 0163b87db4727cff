use nalgebra::{DMatrix, DVector};

/// Inverse of a lower-triangular matrix by column-wise forward substitution.
pub(crate) fn lower_triangular_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut x = DMatrix::zeros(n, n);
    let ls = l.as_slice();
    let xs = x.as_mut_slice();
    for j in 0..n {
        let col = &mut xs[j * n..(j + 1) * n];
        col[j] = 1.0;
        for k in j..n {
            let v = col[k] / ls[k * n + k];
            col[k] = v;
            if v != 0.0 {
                let lk = &ls[k * n..(k + 1) * n];
                for i in k + 1..n {
                    col[i] -= lk[i] * v;
                }
            }
        }
    }
    x
}

/// `A⁻¹` from the lower Cholesky factor `L` of `A`.
pub(crate) fn inverse_from_lower(l: &DMatrix<f64>) -> DMatrix<f64> {
    let linv = lower_triangular_inverse(l);
    linv.transpose() * &linv
}

/// Solves `L x = b` for lower-triangular `L`.
pub(crate) fn forward_solve(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    l.solve_lower_triangular(b)
        .expect("Cholesky factor has a positive diagonal")
}

/// Solves `Lᵀ x = b` for lower-triangular `L`.
pub(crate) fn backward_solve(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    l.tr_solve_lower_triangular(b)
        .expect("Cholesky factor has a positive diagonal")
}

/// Solves `L Lᵀ x = b`.
pub(crate) fn chol_solve(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    backward_solve(l, &forward_solve(l, b))
}
