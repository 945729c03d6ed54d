//! Boundary calibration, the drift correction `ℓ_α` and the variance `σ_α²`.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::model::{BoundaryValues, ModelSpec};

use super::grid::DirectionGrid;
use super::operator::{AtomTable, SparseMatrix};
use super::{check_grid, eigen_from_table, perron, SpectralData};

/// Step of the central difference for `(log m)'`.
pub const M_PRIME_STEP: f64 = 1e-4;
/// Step of the central second difference for `Λ''(0)`.
pub const LAMBDA_STEP: f64 = 1e-3;
/// Search interval and probe count for the boundary parameter.
pub const ALPHA_RANGE: (f64, f64) = (0.05, 8.0);
pub const ALPHA_PROBES: usize = 200;

/// `(log m(s), (log m)'(s))`, the derivative by central difference.
pub fn big_m(spec: &ModelSpec, s: f64, grid: &DirectionGrid) -> Result<(f64, f64)> {
    check_grid(spec, grid)?;
    let table = AtomTable::new(spec, grid);
    let tol = super::DEFAULT_TOL;
    let at = |t: f64| eigen_from_table(&table, grid, t, tol, false).map(|d| d.log_m());
    let m = at(s)?;
    let prime = (at(s + M_PRIME_STEP)? - at(s - M_PRIME_STEP)?) / (2.0 * M_PRIME_STEP);
    Ok((m, prime))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum CalibrationMode {
    /// Find α with `log m(α) = α (log m)'(α)` and rescale λ.
    SolveAlpha,
    /// Rescale both `E N` and λ so that the boundary sits at `alpha`.
    FixAlpha { alpha: f64 },
}

/// Everything downstream code needs about a calibrated model.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryData {
    pub alpha: f64,
    pub scale_lambda: f64,
    pub offspring_mean: f64,
    /// `log m(α)`.
    pub m_value: f64,
    /// `(log m)'(α)` by central difference.
    pub m_prime: f64,
    /// `(log m)'(α)` of the discretized operator, `π_α`-average of σ.
    pub m_prime_exact: f64,
    pub ell: Vec<f64>,
    /// `r_α ℓ_α` at the nodes.
    pub r_ell: Vec<f64>,
    pub pi_psi: f64,
    pub poisson_residual: f64,
    pub sigma2: f64,
    pub spectral: SpectralData,
    pub model_hash: String,
}

impl BoundaryData {
    pub fn r(&self, x: &[f64]) -> f64 {
        self.spectral.r_at(x)
    }

    /// `ℓ_α(x)` read through the `r`-weighted interpolant.
    pub fn ell_at(&self, x: &[f64]) -> f64 {
        self.spectral.tilted_at(&self.r_ell, x)
    }

    /// `(r_α(x), r_α(x) ℓ_α(x))` from one stencil.
    #[inline]
    pub fn r_and_r_ell(&self, x: &[f64]) -> (f64, f64) {
        let st = self.spectral.grid.stencil(x);
        (st.eval(&self.spectral.r), st.eval(&self.r_ell))
    }

    pub fn boundary_values(&self) -> BoundaryValues {
        BoundaryValues {
            alpha: self.alpha,
            log_m: self.m_value,
            log_m_prime: self.m_prime,
        }
    }

    pub fn grid(&self) -> &DirectionGrid {
        &self.spectral.grid
    }

    pub fn to_json(&self) -> Value {
        json!({
            "alpha": self.alpha,
            "scale_lambda": self.scale_lambda,
            "offspring_mean": self.offspring_mean,
            "M_value": self.m_value,
            "M_prime": self.m_prime,
            "M_prime_exact": self.m_prime_exact,
            "ell_alpha": self.ell,
            "pi_psi": self.pi_psi,
            "poisson_residual": self.poisson_residual,
            "sigma2_alpha": self.sigma2,
            "model_hash": self.model_hash,
            "spectral": self.spectral.to_json(),
        })
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        let num = |k: &str| {
            v.get(k)
                .and_then(Value::as_f64)
                .ok_or_else(|| Error::config(k, "expected a number"))
        };
        let spectral = SpectralData::from_json(
            v.get("spectral").ok_or_else(|| Error::config("spectral", "missing field"))?,
        )?;
        let ell: Vec<f64> = serde_json::from_value(
            v.get("ell_alpha").cloned().ok_or_else(|| Error::config("ell_alpha", "missing field"))?,
        )?;
        if ell.len() != spectral.grid.len() {
            return Err(Error::config("ell_alpha", "length does not match the grid"));
        }
        let r_ell = spectral.r.iter().zip(&ell).map(|(r, l)| r * l).collect();
        Ok(BoundaryData {
            alpha: num("alpha")?,
            scale_lambda: num("scale_lambda")?,
            offspring_mean: num("offspring_mean")?,
            m_value: num("M_value")?,
            m_prime: num("M_prime")?,
            m_prime_exact: num("M_prime_exact")?,
            ell,
            r_ell,
            pi_psi: num("pi_psi")?,
            poisson_residual: num("poisson_residual")?,
            sigma2: num("sigma2_alpha")?,
            spectral,
            model_hash: v
                .get("model_hash")
                .and_then(Value::as_str)
                .unwrap_or_default()
                .to_owned(),
        })
    }
}

/// `h(s) = log m(s) − s (log m)'(s)` with the exact discrete derivative.
fn tangent_gap(table: &AtomTable, grid: &DirectionGrid, s: f64, tol: f64) -> Result<f64> {
    let d = eigen_from_table(table, grid, s, tol, false)?;
    Ok(d.log_m() - s * d.log_m_prime_exact)
}

fn solve_alpha(table: &AtomTable, grid: &DirectionGrid, tol: f64) -> Result<f64> {
    let (lo, hi) = ALPHA_RANGE;
    let ratio = (hi / lo).powf(1.0 / (ALPHA_PROBES - 1) as f64);
    let mut a = lo;
    let mut ha = tangent_gap(table, grid, a, tol)?;
    if ha <= 0.0 {
        return Err(Error::math("no boundary parameter in range: h(s) <= 0 already at s = 0.05"));
    }
    for k in 1..ALPHA_PROBES {
        let b = lo * ratio.powi(k as i32);
        let hb = tangent_gap(table, grid, b, tol)?;
        if hb <= 0.0 {
            let (mut a, mut b) = (a, b);
            for _ in 0..200 {
                let mid = 0.5 * (a + b);
                if mid <= a || mid >= b {
                    break;
                }
                if tangent_gap(table, grid, mid, tol)? > 0.0 {
                    a = mid;
                } else {
                    b = mid;
                }
            }
            return Ok(0.5 * (a + b));
        }
        a = b;
        ha = hb;
    }
    Err(Error::math(format!(
        "no boundary parameter in range [{lo}, {hi}]: h stays positive (h(8) = {ha:.3e})"
    )))
}

/// Calibrate `spec` to the boundary case `m(α) = 1`, `m'(α) = 0`.
pub fn calibrate_boundary(
    spec: &ModelSpec,
    mode: CalibrationMode,
    grid: &DirectionGrid,
    tol: f64,
) -> Result<(ModelSpec, BoundaryData)> {
    check_grid(spec, grid)?;
    let table = AtomTable::new(spec, grid);
    let calibrated = match mode {
        CalibrationMode::SolveAlpha => {
            let alpha = solve_alpha(&table, grid, tol)?;
            let d = eigen_from_table(&table, grid, alpha, tol, false)?;
            let prime = d.log_m_prime_exact;
            let spec2 = if prime.abs() < 1e-15 {
                spec.clone()
            } else {
                spec.rescaled((-prime).exp())
            };
            (spec2, alpha)
        }
        CalibrationMode::FixAlpha { alpha } => {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(Error::config("alpha", format!("target {alpha} must be positive")));
            }
            // With one distinct matrix log m is linear in s, so the tangent
            // condition forces E N = 1 exactly; the grid would only see noise.
            let first = &spec.atoms[0].matrix;
            if spec.atoms.iter().all(|a| a.matrix == *first) {
                return Err(Error::math(
                    "calibrated model not supercritical: a single matrix gives E N = 1".to_string(),
                ));
            }
            let d = eigen_from_table(&table, grid, alpha, tol, false)?;
            let m_nu = d.log_m() - spec.mean_offspring().ln();
            let prime = d.log_m_prime_exact;
            let log_mean = -(m_nu - alpha * prime);
            let mean = log_mean.exp();
            if mean <= 1.0 + 1e-12 {
                return Err(Error::math(format!(
                    "calibrated model not supercritical: E N would be {mean}"
                )));
            }
            let mut spec2 = spec.rescaled((-prime).exp());
            spec2.offspring = spec.offspring.with_mean(mean)?;
            (spec2, alpha)
        }
    };
    let (spec2, alpha) = calibrated;
    if spec2.mean_offspring() <= 1.0 {
        return Err(Error::math(format!(
            "calibrated model not supercritical: E N = {}",
            spec2.mean_offspring()
        )));
    }
    let data = boundary_data(&spec2, alpha, grid, tol)?;
    Ok((spec2, data))
}

/// Boundary data of an already calibrated model at a known `alpha`.
pub fn boundary_data(spec: &ModelSpec, alpha: f64, grid: &DirectionGrid, tol: f64) -> Result<BoundaryData> {
    let table = AtomTable::new(spec, grid);
    let spectral = eigen_from_table(&table, grid, alpha, tol, false)?;
    let (m_value, m_prime) = big_m(spec, alpha, grid)?;
    if m_value.abs() > 1e-8 || m_prime.abs() > 1e-6 {
        return Err(Error::math(format!(
            "calibration failed: log m(alpha) = {m_value:.3e}, (log m)'(alpha) = {m_prime:.3e}"
        )));
    }
    let ell = ell_alpha(spec, &spectral, tol)?;
    let sigma2 = sigma2_alpha(spec, &spectral, tol)?;
    let r_ell = spectral.r.iter().zip(&ell.ell).map(|(r, l)| r * l).collect();
    Ok(BoundaryData {
        alpha,
        scale_lambda: spec.scale_lambda,
        offspring_mean: spec.mean_offspring(),
        m_value,
        m_prime,
        m_prime_exact: spectral.log_m_prime_exact,
        ell: ell.ell,
        r_ell,
        pi_psi: ell.pi_psi,
        poisson_residual: ell.poisson_residual,
        sigma2: sigma2.sigma2,
        spectral,
        model_hash: spec.hash(),
    })
}

/// Grid matrix of the tilted kernel `φ ↦ Σ_j w_j e^{−tσ_j} φ(A_j · x)` on
/// the Doob-transformed grid chain.
pub(crate) fn tilted_matrix(table: &AtomTable, data: &SpectralData, t: f64) -> SparseMatrix {
    let (s, m, r) = (data.s, data.m_s, &data.r);
    SparseMatrix::from_rows(table.n_nodes, |i, push| {
        for j in 0..table.n_atoms {
            let (sigma, st) = table.at(i, j);
            let c = table.mass[j] * ((s - t) * sigma).exp() / (m * r[i]);
            for (k, w) in st.iter() {
                push(k, c * w * r[k]);
            }
        }
    })
}

/// Result of the Poisson-equation solve for `ℓ_α`.
#[derive(Clone, Debug, PartialEq)]
pub struct EllAlpha {
    pub ell: Vec<f64>,
    pub psi: Vec<f64>,
    /// `π_α(ψ)`, the drift removed before summing the Neumann series.
    pub pi_psi: f64,
    /// `sup |ℓ − ψ − Q_α ℓ|` with the uncentred ψ.
    pub poisson_residual: f64,
    pub terms: usize,
}

fn table_for(spec: &ModelSpec, data: &SpectralData) -> AtomTable {
    if data.dual {
        AtomTable::new(&spec.transposed(), &data.grid)
    } else {
        AtomTable::new(spec, &data.grid)
    }
}

/// `ℓ_α = Σ_n Q_α^n ψ` with `ψ(x) = E_Q[S_1]`.
pub fn ell_alpha(spec: &ModelSpec, data: &SpectralData, tol: f64) -> Result<EllAlpha> {
    let table = table_for(spec, data);
    let n = table.n_nodes;
    let mut psi = vec![0.0; n];
    for (i, p) in psi.iter_mut().enumerate() {
        let mut total = 0.0;
        for j in 0..table.n_atoms {
            let (sigma, st) = table.at(i, j);
            let w = table.mass[j] * (data.s * sigma).exp() * st.eval(&data.r) / (data.m_s * data.r[i]);
            total += w;
            *p -= w * sigma;
        }
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::Invariant(format!(
                "tilted kernel weights sum to {total} at node {i}"
            )));
        }
    }
    let pi_psi: f64 = psi.iter().zip(&data.pi).map(|(a, b)| a * b).sum();
    if pi_psi.abs() > 1e-6 {
        return Err(Error::math(format!(
            "model not at boundary: pi_alpha(psi) = {pi_psi:.3e}"
        )));
    }
    let q = tilted_matrix(&table, data, 0.0);
    let mut term: Vec<f64> = psi.iter().map(|p| p - pi_psi).collect();
    let mut ell = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut terms = 0;
    loop {
        for (l, t) in ell.iter_mut().zip(&term) {
            *l += t;
        }
        terms += 1;
        let size = term.iter().fold(0.0f64, |a, t| a.max(t.abs()));
        if size < tol {
            break;
        }
        if terms >= super::MAX_ITER {
            return Err(Error::NoConvergence {
                iterations: terms,
                last_change: size,
            });
        }
        q.mul(&term, &mut next);
        std::mem::swap(&mut term, &mut next);
    }
    q.mul(&ell, &mut next);
    let poisson_residual = (0..n)
        .map(|i| (ell[i] - psi[i] - next[i]).abs())
        .fold(0.0, f64::max);
    Ok(EllAlpha {
        ell,
        psi,
        pi_psi,
        poisson_residual,
        terms,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sigma2 {
    pub sigma2: f64,
    /// `Λ'(0)`, zero at the boundary.
    pub lambda_prime: f64,
}

/// `σ_α² = Λ''(0)` where `Λ(t)` is the log Perron root of the tilted kernel
/// with an extra factor `e^{−tσ}`.
pub fn sigma2_alpha(spec: &ModelSpec, data: &SpectralData, tol: f64) -> Result<Sigma2> {
    let table = table_for(spec, data);
    let lambda = |t: f64| -> Result<f64> {
        let (m, ..) = perron(&tilted_matrix(&table, data, t), tol.min(1e-13))?;
        Ok(m.ln())
    };
    let h = LAMBDA_STEP;
    let (lp, l0, lm) = (lambda(h)?, lambda(0.0)?, lambda(-h)?);
    let sigma2 = (lp - 2.0 * l0 + lm) / (h * h);
    if sigma2 <= 1e-10 {
        return Err(Error::math(format!(
            "arithmetic/degenerate model: sigma^2 = {sigma2:.3e}"
        )));
    }
    Ok(Sigma2 {
        sigma2,
        lambda_prime: (lp - lm) / (2.0 * h),
    })
}

/// `σ_α² = Σ_i π_i E[(S_1 + ℓ(X_1) − ℓ(x_i))²]` on the grid chain, an
/// independent evaluation of the same quantity.
pub fn sigma2_poisson(spec: &ModelSpec, data: &SpectralData, ell: &[f64]) -> f64 {
    let table = table_for(spec, data);
    let mut total = 0.0;
    for i in 0..table.n_nodes {
        let mut acc = 0.0;
        for j in 0..table.n_atoms {
            let (sigma, st) = table.at(i, j);
            let c = table.mass[j] * (data.s * sigma).exp() / (data.m_s * data.r[i]);
            for (k, w) in st.iter() {
                acc += c * w * data.r[k] * (-sigma + ell[k] - ell[i]).powi(2);
            }
        }
        total += data.pi[i] * acc;
    }
    total
}
