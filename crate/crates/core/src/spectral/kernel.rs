//! The tilted Markov kernel evaluated at arbitrary directions, for Monte
//! Carlo.

use rand::RngExt;

use crate::cone::{act_in_place, PosMatrix};
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::rng::Rng;

use super::grid::DirectionGrid;
use super::SpectralData;

/// Raw off-grid weights may miss 1 by the interpolation error of `r`; a
/// larger gap means the spectral data does not belong to the model.
pub const OFF_GRID_TOL: f64 = 1e-3;

/// `Q_s(x, ·)`: atom `j` with probability `μ_j e^{sσ_j(x)} r(A_j·x)/(m r(x))`.
#[derive(Clone, Debug)]
pub struct TiltedKernel {
    pub d: usize,
    pub s: f64,
    pub m: f64,
    atoms: Vec<PosMatrix>,
    mass: Vec<f64>,
    r: Vec<f64>,
    grid: DirectionGrid,
}

/// Per-step buffers, one per worker.
#[derive(Clone, Debug)]
pub struct KernelScratch {
    pub ys: Vec<f64>,
    pub sigma: Vec<f64>,
    pub w: Vec<f64>,
}

impl TiltedKernel {
    /// Kernel of `data`; transposed atoms are used when `data.dual` is set.
    pub fn new(spec: &ModelSpec, data: &SpectralData) -> Self {
        let atoms = if data.dual {
            spec.scaled_atoms().iter().map(PosMatrix::transpose).collect()
        } else {
            spec.scaled_atoms()
        };
        let mean = spec.mean_offspring();
        TiltedKernel {
            d: spec.d,
            s: data.s,
            m: data.m_s,
            atoms,
            mass: spec.atoms.iter().map(|a| mean * a.weight).collect(),
            r: data.r.clone(),
            grid: data.grid.clone(),
        }
    }

    pub fn n_atoms(&self) -> usize {
        self.atoms.len()
    }

    pub fn atom(&self, j: usize) -> &PosMatrix {
        &self.atoms[j]
    }

    pub fn scratch(&self) -> KernelScratch {
        KernelScratch {
            ys: vec![0.0; self.atoms.len() * self.d],
            sigma: vec![0.0; self.atoms.len()],
            w: vec![0.0; self.atoms.len()],
        }
    }

    /// Fills images, cocycles and normalized weights at `x`; returns the raw
    /// weight sum, which is 1 up to interpolation error.
    pub fn weights(&self, x: &[f64], sc: &mut KernelScratch) -> Result<f64> {
        let rx = self.grid.interp(&self.r, x);
        let d = self.d;
        let mut total = 0.0;
        for (j, a) in self.atoms.iter().enumerate() {
            let y = &mut sc.ys[j * d..(j + 1) * d];
            let sigma = act_in_place(a, x, y);
            sc.sigma[j] = sigma;
            let w = self.mass[j] * (self.s * sigma).exp() * self.grid.interp(&self.r, y) / (self.m * rx);
            sc.w[j] = w;
            total += w;
        }
        if (total - 1.0).abs() > OFF_GRID_TOL {
            return Err(Error::Invariant(format!(
                "tilted kernel weights sum to {total} off the grid"
            )));
        }
        for w in sc.w.iter_mut() {
            *w /= total;
        }
        Ok(total)
    }

    /// One step from `x`: writes the next direction into `x` and returns
    /// `(atom, σ)`; the walk increment is `−σ`.
    pub fn step(&self, x: &mut [f64], rng: &mut Rng, sc: &mut KernelScratch) -> Result<(usize, f64)> {
        self.weights(x, sc)?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.atoms.len() - 1;
        for (j, w) in sc.w.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = j;
                break;
            }
        }
        x.copy_from_slice(&sc.ys[pick * self.d..(pick + 1) * self.d]);
        Ok((pick, sc.sigma[pick]))
    }
}
