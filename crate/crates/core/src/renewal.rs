//! The tilted walk and its dual as Markov random walks: stopping times,
//! ladder epochs, the harmonic function `V_α`, renewal measures and the
//! Green-function and Spitzer-type functionals.
//!
//! Positions here are relative (`S_0 = 0`) unless a start `b` is given.

use serde::{Deserialize, Serialize};

use crate::cone::{act_in_place, Direction, FkConstants, PosMatrix};
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::rng::{run_replicas, Rng, Streams};
use crate::spectral::{dominant_eigen_dual, BoundaryData, DirectionGrid, KernelScratch, TiltedKernel, DEFAULT_TOL};
use crate::stats::{wls_slope, Estimate};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Measure {
    #[serde(rename = "Q_alpha")]
    Primal,
    #[serde(rename = "Q_alpha_star")]
    Dual,
}

/// The walk under `Q^α` and under the dual `Q^{α,*}` (transposed atoms
/// with the dual eigenfunction).
#[derive(Clone, Debug)]
pub struct Walker {
    pub primal: TiltedKernel,
    pub dual: TiltedKernel,
    pub bd: BoundaryData,
    pub fk: FkConstants,
    pub sigma: f64,
    pub d: usize,
}

impl Walker {
    pub fn new(spec: &ModelSpec, bd: &BoundaryData) -> Result<Self> {
        if !(bd.sigma2 > 0.0) {
            return Err(Error::math("walk variance must be positive"));
        }
        let dual = dominant_eigen_dual(spec, bd.alpha, bd.grid(), DEFAULT_TOL)?;
        Ok(Walker {
            primal: TiltedKernel::new(spec, &bd.spectral),
            dual: TiltedKernel::new(spec, &dual),
            bd: bd.clone(),
            fk: spec.fk_constants(),
            sigma: bd.sigma2.sqrt(),
            d: spec.d,
        })
    }

    pub fn kernel(&self, m: Measure) -> &TiltedKernel {
        match m {
            Measure::Primal => &self.primal,
            Measure::Dual => &self.dual,
        }
    }

    /// `c_1 = c_0 + κ̄ + log d`.
    pub fn c1(&self) -> f64 {
        self.fk.c1
    }

    pub fn cursor(&self, m: Measure, x: &[f64]) -> Cursor<'_> {
        let k = self.kernel(m);
        Cursor {
            kernel: k,
            x: x.to_vec(),
            s: 0.0,
            n: 0,
            sc: k.scratch(),
        }
    }
}

/// A running walk with its own scratch space.
pub struct Cursor<'a> {
    kernel: &'a TiltedKernel,
    pub x: Vec<f64>,
    pub s: f64,
    pub n: usize,
    sc: KernelScratch,
}

impl Cursor<'_> {
    pub fn step(&mut self, rng: &mut Rng) -> Result<()> {
        let (_, sigma) = self.kernel.step(&mut self.x, rng, &mut self.sc)?;
        self.s -= sigma;
        self.n += 1;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WalkPath {
    pub states: Vec<(Vec<f64>, f64)>,
    pub origin: (Vec<f64>, f64),
    pub measure: Measure,
}

impl WalkPath {
    pub fn positions(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.1).collect()
    }
}

/// `steps` steps of the chosen walk from `(x0, b0)`; `states[0]` is the
/// origin.
pub fn walk(w: &Walker, m: Measure, x0: &Direction, b0: f64, steps: usize, rng: &mut Rng) -> Result<WalkPath> {
    let mut c = w.cursor(m, x0.coords());
    c.s = b0;
    let mut states = Vec::with_capacity(steps + 1);
    states.push((c.x.clone(), c.s));
    for _ in 0..steps {
        c.step(rng)?;
        states.push((c.x.clone(), c.s));
    }
    Ok(WalkPath {
        states,
        origin: (x0.coords().to_vec(), b0),
        measure: m,
    })
}

/// First passage times and ladder epochs of one position sequence
/// `S_0, …, S_n`, measured from `S_0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoppingTimes {
    /// First `k ≥ 1` with `y + S_k < 0`.
    pub tau_minus: Option<usize>,
    /// First `k ≥ 1` with `S_k − y > 0`.
    pub tau_plus: Option<usize>,
    /// Weakly ascending ladder epochs, starting with 0.
    pub ascending: Vec<usize>,
    /// Weakly descending ladder epochs, starting with 0.
    pub descending: Vec<usize>,
    /// `L_n = min_{k ≤ n} S_k`.
    pub running_min: Vec<f64>,
}

impl StoppingTimes {
    pub fn from_positions(s: &[f64], y: f64) -> Self {
        let s0 = s.first().copied().unwrap_or(0.0);
        let rel: Vec<f64> = s.iter().map(|v| v - s0).collect();
        let tau_minus = (1..rel.len()).find(|&k| y + rel[k] < 0.0);
        let tau_plus = (1..rel.len()).find(|&k| rel[k] - y > 0.0);
        let mut ascending = vec![0];
        let mut descending = vec![0];
        let mut running_min = Vec::with_capacity(rel.len());
        let mut lo = f64::INFINITY;
        for (k, v) in rel.iter().enumerate() {
            lo = lo.min(*v);
            running_min.push(lo);
            if k == 0 {
                continue;
            }
            if *v >= rel[*ascending.last().unwrap()] {
                ascending.push(k);
            }
            if *v <= rel[*descending.last().unwrap()] {
                descending.push(k);
            }
        }
        StoppingTimes {
            tau_minus,
            tau_plus,
            ascending,
            descending,
            running_min,
        }
    }
}

/// Outcome of the deterministic reversed-path comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReversedBoundReport {
    pub n: usize,
    pub paths: usize,
    pub max_gap: f64,
    pub bound: f64,
    pub violations: usize,
}

/// `|(S_n − S_k) − S*_{n,n−k}|` over all `k` for factors `g_1, …, g_n`
/// driving `X_0 = x`, with the reversed product applied to `x_star`.
pub fn reversed_gaps(factors: &[PosMatrix], x: &[f64], x_star: &[f64]) -> Vec<f64> {
    let n = factors.len();
    let d = x.len();
    // Forward: S_k = −Σ_{i≤k} σ(g_i, X_{i−1}).
    let mut s = vec![0.0; n + 1];
    let mut cur = x.to_vec();
    let mut next = vec![0.0; d];
    for (i, g) in factors.iter().enumerate() {
        s[i + 1] = s[i] - act_in_place(g, &cur, &mut next);
        std::mem::swap(&mut cur, &mut next);
    }
    // Backward: log ‖g*_{k+1}⋯g*_n x*‖ accumulated from j = n down.
    let mut log_norm = vec![0.0; n + 1];
    let mut y = x_star.to_vec();
    for j in (0..n).rev() {
        let gt = factors[j].transpose();
        log_norm[j] = log_norm[j + 1] + act_in_place(&gt, &y, &mut next);
        std::mem::swap(&mut y, &mut next);
    }
    (0..=n).map(|k| ((s[n] - s[k]) + log_norm[k]).abs()).collect()
}

/// Checks `|S_n − S_k − S*_{n,n−k}| ≤ κ̄ + log d` on tilted-chain factor
/// sequences with independent uniform starting directions for the reversal.
pub fn reversed_bound_check(
    w: &Walker,
    n: usize,
    replicas: usize,
    streams: Streams,
    threads: usize,
) -> Result<ReversedBoundReport> {
    let bound = w.fk.kappa_bar + (w.d as f64).ln();
    let gaps = run_replicas(streams, replicas, threads, |_, rng| {
        let x = uniform_direction(w.d, rng);
        let x_star = uniform_direction(w.d, rng);
        let mut c = w.cursor(Measure::Primal, &x);
        let mut factors = Vec::with_capacity(n);
        let mut sc = w.primal.scratch();
        for _ in 0..n {
            let (j, _) = w.primal.step(&mut c.x, rng, &mut sc)?;
            factors.push(w.primal.atom(j).clone());
        }
        Ok(reversed_gaps(&factors, &x, &x_star).into_iter().fold(0.0, f64::max))
    })?;
    let report = ReversedBoundReport {
        n,
        paths: replicas,
        max_gap: gaps.iter().copied().fold(0.0, f64::max),
        bound,
        violations: gaps.iter().filter(|g| **g > bound).count(),
    };
    if report.violations > 0 {
        return Err(Error::Invariant(format!(
            "reversed-path bound violated on {} paths: gap {} > {}",
            report.violations, report.max_gap, bound
        )));
    }
    Ok(report)
}

/// Uniform point of the simplex.
pub fn uniform_direction(d: usize, rng: &mut Rng) -> Vec<f64> {
    use rand::RngExt;
    let e: Vec<f64> = (0..d).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let total: f64 = e.iter().sum();
    e.iter().map(|v| v / total).collect()
}

/// `V̂_α(x, y)` with its convergence record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VPoint {
    pub x: Vec<f64>,
    pub y: f64,
    pub value: f64,
    pub se: f64,
    pub certified_error: f64,
    /// The last two schedule estimates agree within two combined SE.
    pub plateau: bool,
    /// `(n, estimate, se)` along the schedule.
    pub schedule: Vec<(usize, f64, f64)>,
}

pub const DEFAULT_V_SCHEDULE: [usize; 3] = [64, 256, 1024];

/// Estimates `V_α(x, y) = lim E_Q[(y + S_n); τ_y^- > n]` along `schedule`
/// and returns the plateau value.
///
/// Since `y + S_k + ℓ(X_k)` is a martingale, `V_α(x, y) = y + ℓ(x) + E[u]`
/// with `u = −(y + S_τ) − ℓ(X_τ)` read at the killing time. A path killed by
/// time `n` contributes its own `u`; a path still alive at `n` contributes
/// the predicted `u` of a late killing, see [`fill_value`]. The truncation
/// bias is then of smaller order than `Q(τ > n)`.
pub fn estimate_v_point(
    w: &Walker,
    x: &[f64],
    y: f64,
    schedule: &[usize],
    replicas: usize,
    streams: &Streams,
    threads: usize,
) -> Result<VPoint> {
    if schedule.is_empty() || schedule.windows(2).any(|p| p[0] >= p[1]) {
        return Err(Error::config("n_schedule", "must be nonempty and increasing"));
    }
    if y < 0.0 {
        return Err(Error::Domain(format!("V is tabulated for y >= 0, got {y}")));
    }
    let n_max = *schedule.last().unwrap();
    let base = y + w.bd.ell_at(x);
    // (killing time, u) or None when alive at n_max.
    let rows = run_replicas(streams.clone(), replicas, threads, |_, rng| {
        let mut c = w.cursor(Measure::Primal, x);
        while c.n < n_max {
            c.step(rng)?;
            if y + c.s < 0.0 {
                return Ok(Some((c.n, -(y + c.s) - w.bd.ell_at(&c.x))));
            }
        }
        Ok(None)
    })?;
    let killed: Vec<(usize, f64)> = rows.iter().flatten().copied().collect();
    let mut est = Vec::with_capacity(schedule.len());
    for &n in schedule {
        let (fill, fill_se) = fill_value(&killed, n);
        let z: Vec<f64> = rows
            .iter()
            .map(|r| match r {
                Some((t, u)) if *t <= n => base + u,
                _ => base + fill,
            })
            .collect();
        let alive = rows.iter().filter(|r| !matches!(r, Some((t, _)) if *t <= n)).count() as f64 / replicas as f64;
        let e = Estimate::from_samples(&z, streams.master());
        est.push(Estimate {
            se: e.se.hypot(alive * fill_se),
            ..e
        });
    }
    let last = est.len() - 1;
    let plateau = last == 0 || (est[last].value - est[last - 1].value).abs() <= 2.0 * est[last].se.hypot(est[last - 1].se);
    let delta = if last > 0 { (est[last].value - est[last - 1].value).abs() } else { 0.0 };
    Ok(VPoint {
        x: x.to_vec(),
        y,
        value: est[last].value,
        se: est[last].se,
        certified_error: delta + 2.0 * est[last].se,
        plateau,
        schedule: schedule.iter().zip(&est).map(|(n, e)| (*n, e.value, e.se)).collect(),
    })
}

/// Mean `u` for paths alive at `n`, with its standard error.
///
/// `E[u | τ = t]` settles like `t^{−1/2}`, and killing times beyond `n` have
/// density `√n t^{−3/2}/2`, so `E[τ^{−1/2} | τ > n] = 1/(2√n)`. The value
/// is read off a least-squares line of `u` against `t^{−1/2}` over the
/// paths killed in `(n/8, n]`.
fn fill_value(killed: &[(usize, f64)], n: usize) -> (f64, f64) {
    let pool: Vec<(f64, f64)> = killed
        .iter()
        .filter(|(t, _)| 8 * t > n && *t <= n)
        .map(|(t, u)| (1.0 / (*t as f64).sqrt(), *u))
        .collect();
    if pool.len() < 8 {
        let all: Vec<f64> = killed.iter().filter(|(t, _)| *t <= n).map(|k| k.1).collect();
        let e = Estimate::from_samples(&all, 0);
        return (e.value, e.se);
    }
    let m = pool.len() as f64;
    let mx = pool.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pool.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = pool.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pool.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let resid: f64 = pool.iter().map(|p| (p.1 - my - slope * (p.0 - mx)).powi(2)).sum::<f64>() / (m - 2.0);
    let x0 = 0.5 / (n as f64).sqrt();
    let value = my + slope * (x0 - mx);
    let se = (resid * (1.0 / m + (x0 - mx).powi(2) / sxx.max(1e-300))).sqrt();
    (value, se)
}

/// `V̂_α` on a coarse direction grid times a uniform `y`-grid on `[0, y_max]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VAlphaTable {
    pub grid: DirectionGrid,
    pub y: Vec<f64>,
    /// Row-major: `values[node * y.len() + k]`.
    pub values: Vec<f64>,
    pub se: Vec<f64>,
    pub certified_error: f64,
    /// Fitted `c′ ≤ V̂/(1 + y) ≤ c`.
    pub c_lower: f64,
    pub c_upper: f64,
    /// Largest one-step harmonicity residual over the table.
    pub harmonicity_residual: f64,
    /// Share of table points whose schedule estimates plateaued.
    pub plateau_fraction: f64,
    pub model_hash: String,
}

impl VAlphaTable {
    /// Interpolated `V̂(x, y)`: barycentric in `x`, linear in `y`,
    /// continued with slope 1 beyond `y_max`; zero for `y < 0`.
    pub fn eval(&self, x: &[f64], y: f64) -> f64 {
        if y < 0.0 {
            return 0.0;
        }
        let ny = self.y.len();
        let st = self.grid.stencil(x);
        let dy = if ny > 1 { self.y[1] - self.y[0] } else { 1.0 };
        let (k, t, extra) = if y >= self.y[ny - 1] {
            (ny - 1, 0.0, y - self.y[ny - 1])
        } else {
            let k = (y / dy).floor() as usize;
            (k, y / dy - k as f64, 0.0)
        };
        let mut v = 0.0;
        for (node, wgt) in st.iter() {
            let row = &self.values[node * ny..(node + 1) * ny];
            let a = row[k];
            let b = if t > 0.0 { row[k + 1] } else { a };
            v += wgt * (a + t * (b - a));
        }
        v + extra
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("table serializes")
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        Ok(serde_json::from_value(v.clone())?)
    }
}

/// Builds the `V̂_α` table with common random numbers across points, then
/// checks harmonicity by the exact one-step sum over atoms.
pub fn estimate_v(
    w: &Walker,
    grid: &DirectionGrid,
    y_max: f64,
    y_step: f64,
    schedule: &[usize],
    replicas: usize,
    streams: &Streams,
    threads: usize,
    model_hash: &str,
) -> Result<VAlphaTable> {
    if !(y_step > 0.0 && y_max >= 0.0) {
        return Err(Error::config("y_grid", "step must be positive and y_max nonnegative"));
    }
    let ny = (y_max / y_step).round() as usize + 1;
    let ys: Vec<f64> = (0..ny).map(|k| k as f64 * y_step).collect();
    let mut values = Vec::with_capacity(grid.len() * ny);
    let mut ses = Vec::with_capacity(grid.len() * ny);
    let mut cert: f64 = 0.0;
    let mut flat = 0;
    for i in 0..grid.len() {
        for &y in &ys {
            let p = estimate_v_point(w, grid.node(i), y, schedule, replicas, streams, threads)?;
            values.push(p.value);
            ses.push(p.se);
            cert = cert.max(p.certified_error);
            flat += usize::from(p.plateau);
        }
    }
    let ratios: Vec<f64> = values
        .iter()
        .enumerate()
        .map(|(idx, v)| v / (1.0 + ys[idx % ny]))
        .collect();
    let mut table = VAlphaTable {
        grid: grid.clone(),
        y: ys,
        values,
        se: ses,
        certified_error: cert,
        c_lower: ratios.iter().copied().fold(f64::INFINITY, f64::min),
        c_upper: ratios.iter().copied().fold(0.0, f64::max),
        harmonicity_residual: 0.0,
        plateau_fraction: flat as f64 / (grid.len() * ny) as f64,
        model_hash: model_hash.to_string(),
    };
    table.harmonicity_residual = harmonicity_residual(w, &table);
    Ok(table)
}

/// `max |Σ_j w_j(x) V̂(g_j·x, y − σ_j) 1{y − σ_j ≥ 0} − V̂(x, y)|` over
/// table points.
pub fn harmonicity_residual(w: &Walker, t: &VAlphaTable) -> f64 {
    let mut sc = w.primal.scratch();
    let d = w.d;
    let mut worst: f64 = 0.0;
    for i in 0..t.grid.len() {
        let x = t.grid.node(i);
        if w.primal.weights(x, &mut sc).is_err() {
            return f64::INFINITY;
        }
        for &y in &t.y {
            let mut next = 0.0;
            for j in 0..w.primal.n_atoms() {
                let y1 = y - sc.sigma[j];
                if y1 >= 0.0 {
                    next += sc.w[j] * t.eval(&sc.ys[j * d..(j + 1) * d], y1);
                }
            }
            worst = worst.max((next - t.eval(x, y)).abs());
        }
    }
    worst
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RenewalVariant {
    /// `Σ_{n < τ_y^-} 1_{[t,t+a]}(S_n)` under `Q^α`.
    KilledPrimal { y: f64 },
    /// `Σ_j 1_{[t,t+a]}(S*_{T_j^+})` over weakly ascending dual ladder epochs.
    LadderDualPlus,
    /// `Σ_j 1_{[t,t+a]}(S_{𝒯_j})` over weakly ascending primal ladder epochs.
    LadderPrimalT,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenewalEstimate {
    pub variant: RenewalVariant,
    pub t: f64,
    pub a: f64,
    pub estimate: Estimate,
    /// Estimated contribution of times beyond the horizon.
    pub tail_bound: f64,
}

/// `1/(√2 − 1)`: the `n^{−3/2}` tail beyond `H` relative to the mass on
/// `(H/2, H]`.
const TAIL_FACTOR: f64 = 2.414_213_562_373_095;

/// Renewal measures of all `windows` from one set of paths started at `x`.
/// Errors when some window's tail bound exceeds `max_tail` times its
/// estimate, suggesting a longer horizon.
#[allow(clippy::too_many_arguments)]
pub fn renewal_measure(
    w: &Walker,
    variant: &RenewalVariant,
    x: &[f64],
    windows: &[(f64, f64)],
    replicas: usize,
    horizon: usize,
    max_tail: f64,
    streams: &Streams,
    threads: usize,
) -> Result<Vec<RenewalEstimate>> {
    let nw = windows.len();
    let hits = |v: f64, out: &mut [f64]| {
        for (k, (t, a)) in windows.iter().enumerate() {
            if v >= *t && v <= t + a {
                out[k] += 1.0;
            }
        }
    };
    let top = windows.iter().map(|(t, a)| t + a).fold(f64::NEG_INFINITY, f64::max);
    // Per path: counts, counts in (H/2, H], and whether the path is still open.
    let rows = run_replicas(streams.clone(), replicas, threads, |_, rng| {
        let mut counts = vec![0.0; nw];
        let mut late = vec![0.0; nw];
        let mut record: f64 = 0.0;
        let open;
        match variant {
            RenewalVariant::KilledPrimal { y } => {
                let mut c = w.cursor(Measure::Primal, x);
                hits(0.0, &mut counts);
                loop {
                    if c.n >= horizon {
                        open = true;
                        break;
                    }
                    c.step(rng)?;
                    if y + c.s < 0.0 {
                        open = false;
                        break;
                    }
                    hits(c.s, &mut counts);
                    if 2 * c.n > horizon {
                        hits(c.s, &mut late);
                    }
                }
            }
            RenewalVariant::LadderDualPlus | RenewalVariant::LadderPrimalT => {
                let m = if matches!(variant, RenewalVariant::LadderDualPlus) { Measure::Dual } else { Measure::Primal };
                let mut c = w.cursor(m, x);
                hits(0.0, &mut counts);
                loop {
                    if record > top {
                        open = false;
                        break;
                    }
                    if c.n >= horizon {
                        open = true;
                        break;
                    }
                    c.step(rng)?;
                    if c.s >= record {
                        record = c.s;
                        hits(c.s, &mut counts);
                    }
                }
            }
        }
        Ok((counts, late, open, record))
    })?;
    let mut out = Vec::with_capacity(nw);
    for (k, (t, a)) in windows.iter().enumerate() {
        let samples: Vec<f64> = rows.iter().map(|r| r.0[k]).collect();
        let estimate = Estimate::from_samples(&samples, streams.master());
        let tail_bound = match variant {
            RenewalVariant::KilledPrimal { .. } => {
                let late = Estimate::from_samples(&rows.iter().map(|r| r.1[k]).collect::<Vec<_>>(), 0);
                TAIL_FACTOR * (late.value + 2.0 * late.se)
            }
            // A path still below the top of the window at the horizon can
            // add about as many ladder points as the busiest path saw, plus one.
            _ => {
                let max_count = samples.iter().copied().fold(0.0, f64::max);
                let open = rows.iter().filter(|r| r.2 && r.3 <= t + a).count() as f64 / replicas as f64;
                open * (1.0 + max_count)
            }
        };
        if tail_bound > max_tail * estimate.value {
            return Err(Error::math(format!(
                "horizon {horizon} insufficient for window [{t}, {}]: tail bound {tail_bound:.3e} vs estimate {:.3e}; try horizon {}",
                t + a,
                estimate.value,
                suggest_horizon(horizon, tail_bound, max_tail * estimate.value)
            )));
        }
        out.push(RenewalEstimate {
            variant: variant.clone(),
            t: *t,
            a: *a,
            estimate,
            tail_bound,
        });
    }
    Ok(out)
}

/// Tails decay like `H^{−1/2}`.
fn suggest_horizon(h: usize, tail: f64, target: f64) -> usize {
    let f = (tail / target.max(1e-300)).powi(2).min(1e6);
    ((h as f64) * f * 1.5).ceil() as usize
}

/// The killed renewal measure over a scan of window positions, with the
/// dual-ladder measure of the `c1`-widened windows alongside.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenewalScan {
    pub y: f64,
    pub a: f64,
    pub killed: Vec<RenewalEstimate>,
    pub ladder: Vec<RenewalEstimate>,
    /// `sup_t U_y([t, t+a]) / max(a, 1)` over the lower half of the scan.
    pub c_half: f64,
    /// The same over the whole scan.
    pub c_full: f64,
    /// `sup_t killed / ladder` over the lower half and over the whole scan.
    pub sandwich_half: f64,
    pub sandwich_full: f64,
    /// Allowed relative growth of a fitted constant.
    pub tolerance: f64,
    pub bound_stable: bool,
    /// The sandwich compares with killing at `−c1` or above, so it is only
    /// checked for `y <= c1`.
    pub sandwich_applies: bool,
    pub sandwich_holds: bool,
}

/// Scans `t_values` (increasing) with windows `[t, t + a]`, once per
/// killing level in `ys`. Both fitted constants must grow by at most
/// `tolerance` when the t-range doubles.
///
/// The killed measure enters the fit as `estimate + tail_bound`, an upper
/// bound. The ladder series is only truncated from below, so the sandwich
/// is checked against a lower bound of the dual measure, and that measure
/// does not depend on the killing level, so it is simulated once.
#[allow(clippy::too_many_arguments)]
pub fn renewal_scan(
    w: &Walker,
    x: &[f64],
    ys: &[f64],
    t_values: &[f64],
    a: f64,
    replicas: usize,
    horizons: (usize, usize),
    tolerance: f64,
    streams: &Streams,
    threads: usize,
) -> Result<Vec<RenewalScan>> {
    if t_values.len() < 2 || t_values.windows(2).any(|p| p[0] >= p[1]) {
        return Err(Error::config("t_values", "need at least two increasing window positions"));
    }
    let c1 = w.c1();
    let windows: Vec<(f64, f64)> = t_values.iter().map(|t| (*t, a)).collect();
    let wide: Vec<(f64, f64)> = t_values.iter().map(|t| (t - c1, a + 2.0 * c1)).collect();
    let ladder = renewal_measure(w, &RenewalVariant::LadderDualPlus, x, &wide, replicas, horizons.1, f64::INFINITY, &streams.derive("scan/ladder"), threads)?;
    let mid = t_values[0] + 0.5 * (t_values[t_values.len() - 1] - t_values[0]);
    let half = |k: usize| t_values[k] <= mid;
    let sup = |f: &dyn Fn(usize) -> f64, restrict: bool| {
        (0..t_values.len()).filter(|k| !restrict || half(*k)).map(f).fold(0.0, f64::max)
    };
    let mut out = Vec::with_capacity(ys.len());
    for (i, &y) in ys.iter().enumerate() {
        let killed = renewal_measure(w, &RenewalVariant::KilledPrimal { y }, x, &windows, replicas, horizons.0, f64::INFINITY, &streams.derive(&format!("scan/killed/{i}")), threads)?;
        let upper = |k: usize| killed[k].estimate.value + killed[k].tail_bound;
        let bound = |k: usize| upper(k) / a.max(1.0);
        let ratio = |k: usize| {
            let (u, l) = (upper(k), ladder[k].estimate.value);
            if u == 0.0 {
                0.0
            } else if l == 0.0 {
                f64::INFINITY
            } else {
                u / l
            }
        };
        let (c_half, c_full) = (sup(&bound, true), sup(&bound, false));
        let (sandwich_half, sandwich_full) = (sup(&ratio, true), sup(&ratio, false));
        out.push(RenewalScan {
            y,
            a,
            bound_stable: c_half > 0.0 && c_full <= (1.0 + tolerance) * c_half,
            sandwich_applies: y <= c1,
            sandwich_holds: sandwich_full.is_finite() && sandwich_full <= (1.0 + tolerance) * sandwich_half,
            killed,
            ladder: ladder.clone(),
            c_half,
            c_full,
            sandwich_half,
            sandwich_full,
            tolerance,
        });
    }
    Ok(out)
}

impl RenewalScan {
    /// Rows `variant,t,a,estimate,se,tail_bound`.
    pub fn csv(&self) -> String {
        let mut out = String::from("variant,t,a,estimate,se,tail_bound\n");
        for (name, rows) in [("killed_primal", &self.killed), ("ladder_dual_plus", &self.ladder)] {
            for r in rows.iter() {
                out.push_str(&format!("{name},{},{},{},{},{}\n", r.t, r.a, r.estimate.value, r.estimate.se, r.tail_bound));
            }
        }
        out
    }
}

/// Nonincreasing test functions for the Green functional.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GreenFn {
    Zero,
    /// `e^{−y}`
    Exp,
    /// `(1 + y)^{−3}`
    InverseCube,
}

impl GreenFn {
    pub fn eval(&self, y: f64) -> f64 {
        match self {
            GreenFn::Zero => 0.0,
            GreenFn::Exp => (-y).exp(),
            GreenFn::InverseCube => (1.0 + y).powi(-3),
        }
    }

    /// `∫_0^∞ y f(y) dy`.
    pub fn first_moment(&self) -> f64 {
        match self {
            GreenFn::Zero => 0.0,
            GreenFn::Exp => 1.0,
            GreenFn::InverseCube => 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GreenPoint {
    pub b: f64,
    pub value: f64,
    pub se: f64,
    /// `sup_y y f(y)` times the mean number of steps cut off at the horizon,
    /// divided by `b`.
    pub tail_bound: f64,
}

/// `F(b) = (1/b) Σ_{n ≤ H} E_Q[(b + S_n) f(b + S_n); τ_b^- > n]` for each `b`.
#[allow(clippy::too_many_arguments)]
pub fn green_functional(
    w: &Walker,
    f: GreenFn,
    x: &[f64],
    b_list: &[f64],
    horizon: usize,
    replicas: usize,
    streams: &Streams,
    threads: usize,
) -> Result<Vec<GreenPoint>> {
    if b_list.iter().any(|b| *b <= 0.0) {
        return Err(Error::config("b_list", "levels must be positive"));
    }
    let sup_yf = match f {
        GreenFn::Zero => 0.0,
        GreenFn::Exp => (-1f64).exp(),
        GreenFn::InverseCube => 4.0 / 27.0,
    };
    let mut out = Vec::new();
    for (k, &b) in b_list.iter().enumerate() {
        let rows = run_replicas(streams.derive(&format!("green/{k}")), replicas, threads, |_, rng| {
            let mut c = w.cursor(Measure::Primal, x);
            let mut total = b * f.eval(b);
            while c.n < horizon {
                c.step(rng)?;
                let level = b + c.s;
                if level < 0.0 {
                    return Ok((total, 0.0));
                }
                total += level * f.eval(level);
            }
            Ok((total, 1.0))
        })?;
        let vals: Vec<f64> = rows.iter().map(|r| r.0 / b).collect();
        let open = rows.iter().map(|r| r.1).sum::<f64>() / replicas as f64;
        let e = Estimate::from_samples(&vals, streams.master());
        out.push(GreenPoint {
            b,
            value: e.value,
            se: e.se,
            tail_bound: open * sup_yf * horizon as f64 / b,
        });
    }
    Ok(out)
}

/// `1_{[lo, hi]}` and its `c`-widening `1_{[lo − c, hi + c]}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Indicator {
    pub lo: f64,
    pub hi: f64,
}

impl Indicator {
    pub fn eval(&self, v: f64) -> f64 {
        f64::from(v >= self.lo && v <= self.hi)
    }

    pub fn widened(&self, c: f64) -> Indicator {
        Indicator {
            lo: self.lo - c,
            hi: self.hi + c,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpitzerTerm {
    pub phi: Indicator,
    pub h: Indicator,
    pub lhs: Estimate,
    pub dual_factor: Estimate,
    pub primal_factor: Estimate,
    pub ratio: f64,
}

/// `Σ_n E_Q[φ(L_n) h(S_n − L_n)]` against the product of
/// `Σ_n E_{Q*}[φ̃(S*_n); τ*_{c_1} > n]` and `Σ_n E_Q[h̃(S_n); τ^-_{c_1} > n]`.
pub fn spitzer_terms(
    w: &Walker,
    x: &[f64],
    pairs: &[(Indicator, Indicator)],
    horizon: usize,
    replicas: usize,
    streams: &Streams,
    threads: usize,
) -> Result<Vec<SpitzerTerm>> {
    let c1 = w.c1();
    let np = pairs.len();
    let primal = run_replicas(streams.derive("spitzer/primal"), replicas, threads, |_, rng| {
        let mut lhs = vec![0.0; np];
        let mut fac = vec![0.0; np];
        let mut c = w.cursor(Measure::Primal, x);
        let mut lo: f64 = 0.0;
        let mut alive = true;
        let phi_floor = pairs.iter().map(|p| p.0.lo).fold(f64::INFINITY, f64::min);
        loop {
            for (k, (phi, h)) in pairs.iter().enumerate() {
                lhs[k] += phi.eval(lo) * h.eval(c.s - lo);
                if alive {
                    fac[k] += h.widened(c1).eval(c.s);
                }
            }
            if c.n >= horizon || (!alive && lo < phi_floor) {
                break;
            }
            c.step(rng)?;
            lo = lo.min(c.s);
            if c1 + c.s < 0.0 {
                alive = false;
            }
        }
        Ok((lhs, fac))
    })?;
    let dual = run_replicas(streams.derive("spitzer/dual"), replicas, threads, |_, rng| {
        let mut fac = vec![0.0; np];
        let mut c = w.cursor(Measure::Dual, x);
        loop {
            for (k, (phi, _)) in pairs.iter().enumerate() {
                fac[k] += phi.widened(c1).eval(c.s);
            }
            if c.n >= horizon {
                break;
            }
            c.step(rng)?;
            if c.s - c1 > 0.0 {
                break;
            }
        }
        Ok(fac)
    })?;
    let seed = streams.master();
    Ok(pairs
        .iter()
        .enumerate()
        .map(|(k, (phi, h))| {
            let lhs = Estimate::from_samples(&primal.iter().map(|r| r.0[k]).collect::<Vec<_>>(), seed);
            let pf = Estimate::from_samples(&primal.iter().map(|r| r.1[k]).collect::<Vec<_>>(), seed);
            let df = Estimate::from_samples(&dual.iter().map(|r| r[k]).collect::<Vec<_>>(), seed);
            let rhs = df.value * pf.value;
            SpitzerTerm {
                phi: *phi,
                h: *h,
                ratio: if rhs > 0.0 { lhs.value / rhs } else if lhs.value > 0.0 { f64::INFINITY } else { 0.0 },
                lhs,
                dual_factor: df,
                primal_factor: pf,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpitzerReport {
    pub batteries: Vec<Vec<SpitzerTerm>>,
    /// Fitted on the first battery.
    pub c_hat: f64,
    /// Allowed growth of the constant on the other batteries.
    pub factor: f64,
    pub pass: bool,
}

/// Fits `Ĉ` on the first battery and requires `LHS ≤ factor · Ĉ · RHS` on
/// the remaining ones.
pub fn spitzer_bound_check(
    w: &Walker,
    x: &[f64],
    batteries: &[Vec<(Indicator, Indicator)>],
    factor: f64,
    horizon: usize,
    replicas: usize,
    streams: &Streams,
    threads: usize,
) -> Result<SpitzerReport> {
    let mut out = Vec::new();
    for (k, b) in batteries.iter().enumerate() {
        out.push(spitzer_terms(w, x, b, horizon, replicas, &streams.derive(&format!("battery/{k}")), threads)?);
    }
    let c_hat = out
        .first()
        .map(|b| b.iter().map(|t| t.ratio).fold(0.0, f64::max))
        .unwrap_or(0.0);
    let pass = c_hat.is_finite() && out.iter().skip(1).flatten().all(|t| t.ratio <= factor * c_hat);
    Ok(SpitzerReport {
        batteries: out,
        c_hat,
        factor,
        pass,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClltReport {
    /// `(n, Q(y + S_n ∈ [0, z], τ_y^- > n), se)`.
    pub window: Vec<(usize, f64, f64)>,
    pub slope: f64,
    pub slope_se: f64,
    /// `(n, √n Q(τ_y^- > n), se)`.
    pub survival: Vec<(usize, f64, f64)>,
    pub plateau_target: f64,
}

impl ClltReport {
    pub fn slope_within(&self, lo: f64, hi: f64) -> bool {
        self.slope.is_finite() && (lo..=hi).contains(&self.slope)
    }

    /// The survival point at the largest `n` lies within `rel` of the
    /// plateau target, plus `k` standard errors and the target's own error.
    pub fn plateau_within(&self, rel: f64, k: f64, target_err: f64) -> bool {
        self.survival.last().is_some_and(|(_, v, se)| {
            (v - self.plateau_target).abs() <= rel * self.plateau_target + k * se + target_err
        })
    }
}

/// Window and survival probabilities of the walk killed below `−y` at the
/// times in `n_list`, from one set of paths.
pub fn cllt_slope_check(
    w: &Walker,
    x: &[f64],
    y: f64,
    z: f64,
    v_hat: f64,
    n_list: &[usize],
    replicas: usize,
    streams: &Streams,
    threads: usize,
) -> Result<ClltReport> {
    let n_max = n_list.iter().copied().max().unwrap_or(0);
    let rows = run_replicas(streams.clone(), replicas, threads, |_, rng| {
        let mut c = w.cursor(Measure::Primal, x);
        let mut inside = vec![false; n_list.len()];
        let mut alive = vec![false; n_list.len()];
        let mut next = 0;
        while c.n < n_max {
            c.step(rng)?;
            if y + c.s < 0.0 {
                break;
            }
            while next < n_list.len() && n_list[next] == c.n {
                alive[next] = true;
                inside[next] = y + c.s <= z;
                next += 1;
            }
        }
        Ok((inside, alive))
    })?;
    let r = replicas as f64;
    let prob = |pick: &dyn Fn(&(Vec<bool>, Vec<bool>)) -> bool| {
        let p = rows.iter().filter(|row| pick(row)).count() as f64 / r;
        (p, (p * (1.0 - p) / r).sqrt())
    };
    let mut window = Vec::new();
    let mut survival = Vec::new();
    for (k, &n) in n_list.iter().enumerate() {
        let (p, se) = prob(&|row| row.0[k]);
        window.push((n, p, se));
        let (q, qse) = prob(&|row| row.1[k]);
        let sq = (n as f64).sqrt();
        survival.push((n, sq * q, sq * qse));
    }
    let usable: Vec<&(usize, f64, f64)> = window.iter().filter(|w| w.1 > 0.0).collect();
    if usable.len() < 2 || usable.len() < window.len() {
        return Err(Error::math(format!(
            "too few surviving paths in the window at n = {n_max}; rerun with more replicas"
        )));
    }
    let lx: Vec<f64> = usable.iter().map(|w| (w.0 as f64).ln()).collect();
    let ly: Vec<f64> = usable.iter().map(|w| w.1.ln()).collect();
    // Delta method: var(log p) = (se/p)².
    let wt: Vec<f64> = usable.iter().map(|w| (w.1 / w.2).powi(2)).collect();
    let (slope, slope_se, _) = wls_slope(&lx, &ly, &wt);
    Ok(ClltReport {
        window,
        slope,
        slope_se,
        survival,
        plateau_target: 2.0 * v_hat / (w.sigma * (2.0 * std::f64::consts::PI).sqrt()),
    })
}
