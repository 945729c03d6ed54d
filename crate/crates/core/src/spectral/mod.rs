//! Discretized transfer operators `P_s`, `P_s*`, their Perron data, the
//! tilted Markov kernel `Q_s`, boundary calibration and the drift/variance
//! of the tilted walk.
//!
//! On the grid the tilted kernel is the Doob transform of the discretized
//! `P_s`: from node `x_i` atom `j` is chosen with probability
//! `w_ij = μ_j e^{sσ_ij} r(y_ij) / (m r_i)` and the next node `k` with
//! probability `L_k(y_ij) r_k / r(y_ij)`. Off the grid, functions living on
//! the tilted side (`ℓ`, `V`) are therefore read through the `r`-weighted
//! interpolant `I(rφ)/I(r)`; this keeps `π_s ∝ r_s ν_s` exactly invariant.

mod calibrate;
pub mod grid;
mod kernel;
pub mod operator;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelSpec;

pub use calibrate::{
    boundary_data,
    big_m, calibrate_boundary, ell_alpha, sigma2_alpha, sigma2_poisson, BoundaryData, CalibrationMode,
    EllAlpha, Sigma2,
};
pub use grid::{DirectionGrid, GridKind, Stencil};
pub use kernel::{KernelScratch, TiltedKernel, OFF_GRID_TOL};
pub use operator::{AtomTable, SparseMatrix, DEFAULT_TOL, MAX_ITER};

use operator::{dominant_left, dominant_right, transfer_matrix};

/// Perron data of `P_s` (or `P_s*`) on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralData {
    pub s: f64,
    pub m_s: f64,
    /// Right eigenfunction at the nodes, `sup r = 1`.
    pub r: Vec<f64>,
    /// Left eigenmeasure, a probability vector.
    pub nu: Vec<f64>,
    /// Invariant law of the tilted kernel, `∝ r ν`.
    pub pi: Vec<f64>,
    pub residual: f64,
    /// Derivative of `log m` at `s` for the discretized operator, obtained as
    /// the `π_s`-average of the tilted cocycle.
    pub log_m_prime_exact: f64,
    /// Built from the transposed atoms.
    pub dual: bool,
    pub grid: DirectionGrid,
}

impl SpectralData {
    pub fn log_m(&self) -> f64 {
        self.m_s.ln()
    }

    /// `r_s` at an arbitrary direction.
    pub fn r_at(&self, x: &[f64]) -> f64 {
        self.grid.interp(&self.r, x)
    }

    /// An `r`-weighted read of a tilted-side grid function at `x`.
    pub fn tilted_at(&self, rphi: &[f64], x: &[f64]) -> f64 {
        let st = self.grid.stencil(x);
        st.eval(rphi) / st.eval(&self.r)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(SpectralFile::from(self)).expect("plain data serializes")
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let f: SpectralFile = serde_json::from_value(v.clone())?;
        f.try_into()
    }
}

#[derive(Serialize, Deserialize)]
struct SpectralFile {
    s: f64,
    m_s: f64,
    residual: f64,
    log_m_prime_exact: f64,
    dual: bool,
    grid: GridKind,
    nodes: Vec<Vec<f64>>,
    r: Vec<f64>,
    nu: Vec<f64>,
    pi: Vec<f64>,
}

impl From<&SpectralData> for SpectralFile {
    fn from(d: &SpectralData) -> Self {
        SpectralFile {
            s: d.s,
            m_s: d.m_s,
            residual: d.residual,
            log_m_prime_exact: d.log_m_prime_exact,
            dual: d.dual,
            grid: d.grid.kind(),
            nodes: (0..d.grid.len()).map(|i| d.grid.node(i).to_vec()).collect(),
            r: d.r.clone(),
            nu: d.nu.clone(),
            pi: d.pi.clone(),
        }
    }
}

impl TryFrom<SpectralFile> for SpectralData {
    type Error = Error;

    fn try_from(f: SpectralFile) -> Result<Self> {
        let grid = DirectionGrid::from_kind(f.grid)?;
        let n = grid.len();
        if f.r.len() != n || f.nu.len() != n || f.pi.len() != n {
            return Err(Error::config("spectral", format!("grid has {n} nodes but vectors differ in length")));
        }
        Ok(SpectralData {
            s: f.s,
            m_s: f.m_s,
            r: f.r,
            nu: f.nu,
            pi: f.pi,
            residual: f.residual,
            log_m_prime_exact: f.log_m_prime_exact,
            dual: f.dual,
            grid,
        })
    }
}

/// Right and left Perron vectors with a two-sided Rayleigh quotient for the
/// eigenvalue.
pub(crate) fn perron(a: &SparseMatrix, tol: f64) -> Result<(f64, Vec<f64>, Vec<f64>, f64)> {
    let (_, r, _) = dominant_right(a, tol, MAX_ITER)?;
    let (_, nu) = dominant_left(a, tol, MAX_ITER)?;
    let mut ar = vec![0.0; a.n];
    a.mul(&r, &mut ar);
    let num: f64 = nu.iter().zip(&ar).map(|(v, x)| v * x).sum();
    let den: f64 = nu.iter().zip(&r).map(|(v, x)| v * x).sum();
    let m = num / den;
    let residual = ar.iter().zip(&r).map(|(x, y)| (x - m * y).abs()).fold(0.0, f64::max) / m;
    Ok((m, r, nu, residual))
}

pub(crate) fn eigen_from_table(
    table: &AtomTable,
    grid: &DirectionGrid,
    s: f64,
    tol: f64,
    dual: bool,
) -> Result<SpectralData> {
    let a = transfer_matrix(table, s);
    let (m, r, nu, residual) = perron(&a, tol)?;
    if r.iter().any(|v| *v <= 0.0) {
        return Err(Error::math("right eigenfunction is not strictly positive"));
    }
    let z: f64 = r.iter().zip(&nu).map(|(a, b)| a * b).sum();
    let pi: Vec<f64> = r.iter().zip(&nu).map(|(a, b)| a * b / z).collect();
    let mut prime = 0.0;
    for i in 0..table.n_nodes {
        let mut acc = 0.0;
        for j in 0..table.n_atoms {
            let (sigma, st) = table.at(i, j);
            acc += table.mass[j] * (s * sigma).exp() * st.eval(&r) * sigma;
        }
        prime += pi[i] * acc / (m * r[i]);
    }
    Ok(SpectralData {
        s,
        m_s: m,
        r,
        nu,
        pi,
        residual,
        log_m_prime_exact: prime,
        dual,
        grid: grid.clone(),
    })
}

/// `(P_s φ)(x_i)` at every node.
pub fn apply_ps(spec: &ModelSpec, s: f64, phi: &[f64], grid: &DirectionGrid) -> Vec<f64> {
    let a = transfer_matrix(&AtomTable::new(spec, grid), s);
    let mut out = vec![0.0; grid.len()];
    a.mul(phi, &mut out);
    out
}

fn check_grid(spec: &ModelSpec, grid: &DirectionGrid) -> Result<()> {
    if spec.d != grid.d() {
        return Err(Error::Domain(format!(
            "model has dimension {} but the grid has dimension {}",
            spec.d,
            grid.d()
        )));
    }
    if spec.mean_offspring() <= 0.0 {
        return Err(Error::math("E N = 0: the transfer operator vanishes"));
    }
    Ok(())
}

/// Dominant eigen-triple of `P_s`.
pub fn dominant_eigen(spec: &ModelSpec, s: f64, grid: &DirectionGrid, tol: f64) -> Result<SpectralData> {
    check_grid(spec, grid)?;
    eigen_from_table(&AtomTable::new(spec, grid), grid, s, tol, false)
}

/// Dominant eigen-triple of `P_s*` (transposed atoms), cross-checked against
/// the primal eigenvalue. The two discretizations differ by interpolation
/// error, so the allowed gap is `2·tol·m` plus the observed change of both
/// eigenvalues under halving of the grid.
pub fn dominant_eigen_dual(spec: &ModelSpec, s: f64, grid: &DirectionGrid, tol: f64) -> Result<SpectralData> {
    check_grid(spec, grid)?;
    let dual_spec = spec.transposed();
    let dual = eigen_from_table(&AtomTable::new(&dual_spec, grid), grid, s, tol, true)?;
    let primal = eigen_from_table(&AtomTable::new(spec, grid), grid, s, tol, false)?;
    let gap = (dual.m_s - primal.m_s).abs();
    let mut allowed = 2.0 * tol * primal.m_s;
    if gap > allowed {
        let coarse = DirectionGrid::from_kind(match grid.kind() {
            GridKind::Segment { g } => GridKind::Segment { g: (g / 2).max(2) },
            GridKind::Triangle { k } => GridKind::Triangle { k: (k / 2).max(1) },
        })?;
        let pc = eigen_from_table(&AtomTable::new(spec, &coarse), &coarse, s, tol, false)?;
        let dc = eigen_from_table(&AtomTable::new(&dual_spec, &coarse), &coarse, s, tol, true)?;
        allowed += (pc.m_s - primal.m_s).abs() + (dc.m_s - dual.m_s).abs();
    }
    if gap > allowed {
        return Err(Error::math(format!(
            "primal/dual eigenvalue mismatch: {} vs {} (allowed gap {allowed:.3e})",
            primal.m_s, dual.m_s
        )));
    }
    Ok(dual)
}

#[cfg(test)]
mod tests;
