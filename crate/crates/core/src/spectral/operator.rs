//! Assembly of the discretized transfer operator and power iteration.

use crate::cone::act_in_place;
use crate::error::{Error, Result};
use crate::model::ModelSpec;

use super::grid::{DirectionGrid, Stencil};

pub const DEFAULT_TOL: f64 = 1e-12;
pub const MAX_ITER: usize = 100_000;

/// For every node `x_i` and atom `j`: the cocycle `σ(λA_j, x_i)`, the
/// interpolation stencil of `λA_j · x_i` and the intensity mass `E N q_j`.
/// Depends on `s` only through `exp(s σ)`, so one table serves all `s`.
#[derive(Clone, Debug)]
pub struct AtomTable {
    pub n_nodes: usize,
    pub n_atoms: usize,
    pub mass: Vec<f64>,
    pub sigma: Vec<f64>,
    pub stencil: Vec<Stencil>,
}

impl AtomTable {
    pub fn new(spec: &ModelSpec, grid: &DirectionGrid) -> Self {
        let atoms = spec.scaled_atoms();
        let mean = spec.mean_offspring();
        let n_nodes = grid.len();
        let n_atoms = atoms.len();
        let mut sigma = Vec::with_capacity(n_nodes * n_atoms);
        let mut stencil = Vec::with_capacity(n_nodes * n_atoms);
        let mut y = vec![0.0; spec.d];
        for i in 0..n_nodes {
            for a in &atoms {
                sigma.push(act_in_place(a, grid.node(i), &mut y));
                stencil.push(grid.stencil(&y));
            }
        }
        AtomTable {
            n_nodes,
            n_atoms,
            mass: spec.atoms.iter().map(|a| mean * a.weight).collect(),
            sigma,
            stencil,
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> (f64, &Stencil) {
        let k = i * self.n_atoms + j;
        (self.sigma[k], &self.stencil[k])
    }
}

/// Compressed sparse rows.
#[derive(Clone, Debug)]
pub struct SparseMatrix {
    pub n: usize,
    row_ptr: Vec<usize>,
    col: Vec<u32>,
    val: Vec<f64>,
}

impl SparseMatrix {
    /// `row(i, push)` is called once per row and pushes `(col, value)`.
    pub fn from_rows(n: usize, mut row: impl FnMut(usize, &mut dyn FnMut(usize, f64))) -> Self {
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col = Vec::new();
        let mut val = Vec::new();
        row_ptr.push(0);
        for i in 0..n {
            row(i, &mut |c, v| {
                if v != 0.0 {
                    col.push(c as u32);
                    val.push(v);
                }
            });
            row_ptr.push(col.len());
        }
        SparseMatrix { n, row_ptr, col, val }
    }

    /// `out = A v`.
    pub fn mul(&self, v: &[f64], out: &mut [f64]) {
        for i in 0..self.n {
            let mut s = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.val[k] * v[self.col[k] as usize];
            }
            out[i] = s;
        }
    }

    /// `out = Aᵀ v`.
    pub fn mul_t(&self, v: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for i in 0..self.n {
            let vi = v[i];
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                out[self.col[k] as usize] += self.val[k] * vi;
            }
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.val[self.row_ptr[i]..self.row_ptr[i + 1]].iter().sum())
            .collect()
    }
}

/// Matrix of `P_s` on the grid: row `i` is `Σ_j μ_j e^{sσ_ij} L(λA_j · x_i)`.
pub fn transfer_matrix(table: &AtomTable, s: f64) -> SparseMatrix {
    SparseMatrix::from_rows(table.n_nodes, |i, push| {
        for j in 0..table.n_atoms {
            let (sigma, st) = table.at(i, j);
            let c = table.mass[j] * (s * sigma).exp();
            for (k, w) in st.iter() {
                push(k, c * w);
            }
        }
    })
}

/// Right Perron vector: returns `(m, r, residual)` with `sup r = 1` and
/// residual `‖A r − m r‖_sup / m`.
pub fn dominant_right(a: &SparseMatrix, tol: f64, max_iter: usize) -> Result<(f64, Vec<f64>, f64)> {
    let n = a.n;
    let mut v = vec![1.0; n];
    let mut w = vec![0.0; n];
    let mut m_prev = f64::NAN;
    let mut last_change = f64::INFINITY;
    for _ in 0..max_iter {
        a.mul(&v, &mut w);
        let m = w.iter().copied().fold(0.0, f64::max);
        if !(m > 0.0 && m.is_finite()) {
            return Err(Error::math(format!("transfer operator lost positivity (growth {m})")));
        }
        // With sup v = 1 the growth ratio is sup(Av).
        let residual = w.iter().zip(&v).map(|(wi, vi)| (wi - m * vi).abs()).fold(0.0, f64::max) / m;
        last_change = (m - m_prev).abs() / m;
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / m;
        }
        if last_change < tol && residual < 100.0 * tol {
            a.mul(&v, &mut w);
            let m = w.iter().copied().fold(0.0, f64::max);
            let residual = w.iter().zip(&v).map(|(wi, vi)| (wi - m * vi).abs()).fold(0.0, f64::max) / m;
            return Ok((m, v, residual));
        }
        m_prev = m;
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        last_change,
    })
}

/// Left Perron vector normalized to a probability: returns `(m, ν)`.
pub fn dominant_left(a: &SparseMatrix, tol: f64, max_iter: usize) -> Result<(f64, Vec<f64>)> {
    let n = a.n;
    let mut v = vec![1.0 / n as f64; n];
    let mut w = vec![0.0; n];
    let mut m_prev = f64::NAN;
    let mut last_change = f64::INFINITY;
    for _ in 0..max_iter {
        a.mul_t(&v, &mut w);
        let m: f64 = w.iter().sum();
        if !(m > 0.0 && m.is_finite()) {
            return Err(Error::math(format!("adjoint iteration lost positivity (mass {m})")));
        }
        let moved: f64 = w.iter().zip(&v).map(|(wi, vi)| (wi / m - vi).abs()).sum();
        last_change = (m - m_prev).abs() / m;
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / m;
        }
        if last_change < tol && moved < 100.0 * tol {
            return Ok((m, v));
        }
        m_prev = m;
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        last_change,
    })
}
