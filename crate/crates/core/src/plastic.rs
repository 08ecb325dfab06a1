//! Per-element symmetric plastic strain, the optimization variable.
//!
//! Each element stores the upper triangle `[a00, a01, a02, a11, a12, a22]`
//! of a symmetric 3×3 matrix `A`. The rest shape is the force-free
//! configuration of the body when every element's rest metric is `A` applied
//! to its initial geometry.

use std::fmt::Write as _;

use nalgebra::{DVector, Matrix3, SymmetricEigen, Vector3};

use crate::elasticity::{
    element_state, pk1_differential, pk1_stress, scatter_columns, ElementPrecomp, MaterialParams,
};
use crate::equilibrium::{solve_static, EquilibriumSolution, ExternalLoad, SolverConfig};
use crate::error::{Error, Result};
use crate::mesh::rigid_align;
use crate::sparse::{CsrMatrix, TripletBuilder};

pub const DEFAULT_SIGMA_MIN: f64 = 0.05;
pub const DEFAULT_SIGMA_MAX: f64 = 20.0;

/// `(row, col)` of each stored coefficient.
pub const COEFF_INDEX: [(usize, usize); 6] = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)];

#[derive(Debug, Clone, PartialEq)]
pub struct PlasticField {
    coeffs: Vec<[f64; 6]>,
}

impl PlasticField {
    pub fn identity(num_elements: usize) -> Self {
        Self {
            coeffs: vec![[1.0, 0.0, 0.0, 1.0, 0.0, 1.0]; num_elements],
        }
    }

    pub fn from_coeffs(coeffs: Vec<[f64; 6]>) -> Self {
        Self { coeffs }
    }

    /// Symmetric part of each matrix.
    pub fn from_matrices(ms: &[Matrix3<f64>]) -> Self {
        let mut f = Self::identity(ms.len());
        for (t, m) in ms.iter().enumerate() {
            f.set_matrix(t, &((m + m.transpose()) * 0.5));
        }
        f
    }

    /// From a flat `6Z` vector.
    pub fn from_vector(v: &DVector<f64>) -> Result<Self> {
        if v.len() % 6 != 0 {
            return Err(Error::DimensionMismatch { expected: v.len() / 6 * 6, got: v.len() });
        }
        Ok(Self {
            coeffs: v.as_slice().chunks_exact(6).map(|c| c.try_into().unwrap()).collect(),
        })
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_iterator(6 * self.coeffs.len(), self.coeffs.iter().flatten().copied())
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn coeffs(&self) -> &[[f64; 6]] {
        &self.coeffs
    }

    pub fn matrix(&self, t: usize) -> Matrix3<f64> {
        let [a00, a01, a02, a11, a12, a22] = self.coeffs[t];
        Matrix3::new(a00, a01, a02, a01, a11, a12, a02, a12, a22)
    }

    /// Stores the upper triangle of `m`.
    pub fn set_matrix(&mut self, t: usize, m: &Matrix3<f64>) {
        self.coeffs[t] = COEFF_INDEX.map(|(r, c)| m[(r, c)]);
    }

    /// Clamps every element's eigenvalues to `[sigma_min, sigma_max]`.
    /// Elements already inside the bounds keep their coefficients bit-for-bit.
    pub fn project_eigenvalues(&self, sigma_min: f64, sigma_max: f64) -> Result<Self> {
        if !(sigma_min > 0.0 && sigma_min <= sigma_max) {
            return Err(Error::Invalid(format!("invalid eigenvalue bounds [{sigma_min}, {sigma_max}]")));
        }
        let mut out = self.clone();
        for t in 0..self.len() {
            let eig = SymmetricEigen::new(self.matrix(t));
            if eig.eigenvalues.iter().all(|&l| (sigma_min..=sigma_max).contains(&l)) {
                continue;
            }
            let clamped = eig.eigenvalues.map(|l| l.clamp(sigma_min, sigma_max));
            let m = eig.eigenvectors * Matrix3::from_diagonal(&clamped) * eig.eigenvectors.transpose();
            out.set_matrix(t, &m);
        }
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("plastic 1\n");
        let _ = writeln!(s, "{}", self.len());
        for c in &self.coeffs {
            let _ = writeln!(
                s,
                "{:.16e} {:.16e} {:.16e} {:.16e} {:.16e} {:.16e}",
                c[0], c[1], c[2], c[3], c[4], c[5]
            );
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let err = |line: usize, reason: &str| Error::Parse { line, reason: reason.to_string() };
        let (ln, header) = lines.next().ok_or_else(|| err(1, "empty file"))?;
        if header.split_whitespace().collect::<Vec<_>>() != ["plastic", "1"] {
            return Err(err(ln, "expected header `plastic 1`"));
        }
        let (ln, count) = lines.next().ok_or_else(|| err(ln + 1, "missing element count"))?;
        let z: usize = count.parse().map_err(|_| err(ln, "invalid element count"))?;
        let mut coeffs = Vec::with_capacity(z);
        let mut last = ln;
        for _ in 0..z {
            let (ln, l) = lines.next().ok_or_else(|| err(last + 1, "unexpected end of file"))?;
            last = ln;
            let vals: Vec<f64> = l
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| err(ln, "invalid coefficient"))?;
            let row: [f64; 6] = vals.try_into().map_err(|_| err(ln, "expected 6 coefficients"))?;
            coeffs.push(row);
        }
        if let Some((ln, _)) = lines.next() {
            return Err(err(ln, "unexpected content after coefficients"));
        }
        Ok(Self { coeffs })
    }
}

/// Symmetric basis matrix for stored coefficient `c`.
pub fn coeff_basis(c: usize) -> Matrix3<f64> {
    let (r, k) = COEFF_INDEX[c];
    let mut m = Matrix3::zeros();
    m[(r, k)] = 1.0;
    m[(k, r)] = 1.0;
    m
}

/// Force-free configuration for `field`, starting from the initial
/// positions `x_init`. Rigid motion is fixed by aligning the result to
/// `x_init` in the least-squares sense.
pub fn rest_shape(
    field: &PlasticField,
    x_init: &DVector<f64>,
    mat: &MaterialParams,
    pre: &ElementPrecomp,
) -> Result<EquilibriumSolution> {
    let tol = 1e-10 * mat.mu() * pre.total_volume().powf(2.0 / 3.0);
    let cfg = SolverConfig {
        tol_force: Some(tol),
        ..SolverConfig::default()
    };
    let load = ExternalLoad::zero_gravity();
    let mut sol = solve_static(pre, field, mat, &load, x_init, &cfg)?;
    if !sol.converged {
        return Err(Error::SolverDiverged(format!(
            "rest shape residual {:e} above {:e} after {} iterations",
            sol.residual_inf, tol, sol.iterations
        )));
    }
    sol.x_static = rigid_align(&sol.x_static, x_init, &[]);
    Ok(sol)
}

/// Jacobian of `f_net = f_int − f_ext` with respect to the `6Z` stored
/// coefficients, including the plastic volume factor and the gravity load
/// carried by the plastically scaled mass.
pub fn dforce_dfp(
    x: &DVector<f64>,
    field: &PlasticField,
    pre: &ElementPrecomp,
    mat: &MaterialParams,
    gravity: &Vector3<f64>,
) -> Result<CsrMatrix> {
    let z = pre.num_elements();
    let mut trip = TripletBuilder::with_capacity(pre.ndof(), 6 * z, 72 * z);
    for t in 0..z {
        let s = element_state(x, field, pre, t)?;
        let p = pk1_stress(&s.fe, mat);
        let dm_inv_t = pre.dm_inv[t].transpose();
        let a_inv_t = s.a_inv.transpose();
        for c in 0..6 {
            let da = coeff_basis(c);
            let da_inv = -s.a_inv * da * s.a_inv;
            let dvp = s.vp * (s.a_inv * da).trace();
            let dfe = s.f * da_inv;
            let dg = dvp * p * a_inv_t + s.vp * pk1_differential(&s.fe, &dfe, mat) * a_inv_t + s.vp * p * da_inv.transpose();
            let cols = scatter_columns(&(dg * dm_inv_t));
            let dweight = 0.25 * mat.density * dvp * gravity;
            for (local, &v) in pre.elements[t].iter().enumerate() {
                let col = cols[local] - dweight;
                for d in 0..3 {
                    if col[d] != 0.0 {
                        trip.push(3 * v + d, 6 * t + c, col[d]);
                    }
                }
            }
        }
    }
    Ok(trip.build())
}
