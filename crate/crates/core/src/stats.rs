//! Monte Carlo summaries and the handful of classical tests the
//! experiments rely on.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// A Monte Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
    pub replicas: usize,
    pub seed: u64,
}

impl Estimate {
    pub fn from_samples(samples: &[f64], seed: u64) -> Self {
        let n = samples.len();
        let mean = mean(samples);
        let se = if n > 1 {
            let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            f64::NAN
        };
        Estimate {
            value: mean,
            se,
            replicas: n,
            seed,
        }
    }

    /// `|self - target| <= k·se + slack`.
    pub fn within(&self, target: f64, k: f64, slack: f64) -> bool {
        (self.value - target).abs() <= k * self.se + slack
    }

    /// Number of standard errors separating the estimate from `target`.
    pub fn z(&self, target: f64) -> f64 {
        (self.value - target) / self.se
    }
}

/// `|a - b| <= k·sqrt(se_a² + se_b²)`.
pub fn agree(a: &Estimate, b: &Estimate, k: f64) -> bool {
    (a.value - b.value).abs() <= k * a.se.hypot(b.se)
}

/// Checks with fewer replicas than this are reported as inconclusive.
pub const MIN_REPLICAS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

/// Two estimates of the same quantity compared at `k` combined standard
/// errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub statistic: String,
    pub lhs: f64,
    pub rhs: f64,
    pub se: f64,
    pub pass: bool,
    pub verdict: Verdict,
}

impl CheckReport {
    pub fn compare(statistic: impl Into<String>, lhs: &Estimate, rhs: &Estimate, k: f64) -> Self {
        let se = combined_se(lhs, rhs);
        let pass = (lhs.value - rhs.value).abs() <= k * se;
        // An exact side has one replica; only sampled sides need the budget.
        let sampled = [lhs.replicas, rhs.replicas].into_iter().filter(|r| *r > 1).min();
        let verdict = if sampled.is_some_and(|r| r < MIN_REPLICAS) {
            Verdict::Inconclusive
        } else if pass {
            Verdict::Pass
        } else {
            Verdict::Fail
        };
        CheckReport {
            statistic: statistic.into(),
            lhs: lhs.value,
            rhs: rhs.value,
            se,
            pass,
            verdict,
        }
    }

    /// A deterministic comparison `|lhs − rhs| <= tol`.
    pub fn exact(statistic: impl Into<String>, lhs: f64, rhs: f64, tol: f64) -> Self {
        let pass = (lhs - rhs).abs() <= tol;
        CheckReport {
            statistic: statistic.into(),
            lhs,
            rhs,
            se: 0.0,
            pass,
            verdict: if pass { Verdict::Pass } else { Verdict::Fail },
        }
    }
}

/// Standard error of a difference; an exact side (one replica, NaN s.e.)
/// contributes nothing.
pub fn combined_se(a: &Estimate, b: &Estimate) -> f64 {
    let f = |e: &Estimate| if e.se.is_finite() { e.se } else { 0.0 };
    f(a).hypot(f(b))
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Linear-interpolated quantile of an unsorted sample.
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn median(xs: &[f64]) -> f64 {
    quantile(xs, 0.5)
}

pub fn iqr(xs: &[f64]) -> f64 {
    quantile(xs, 0.75) - quantile(xs, 0.25)
}

/// Asymptotic Kolmogorov tail `P(sup|B| > λ)`.
fn kolmogorov_tail(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-16 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

/// Result of a Kolmogorov–Smirnov test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Two-sample KS test with the Stephens small-sample correction.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> KsResult {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let ne = (n * m / (n + m)).sqrt();
    KsResult {
        statistic: d,
        p_value: kolmogorov_tail((ne + 0.12 + 0.11 / ne) * d),
    }
}

/// One-sample KS test against a continuous cdf.
pub fn ks_one_sample(xs: &[f64], cdf: impl Fn(f64) -> f64) -> KsResult {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut d: f64 = 0.0;
    for (i, x) in v.iter().enumerate() {
        let f = cdf(*x);
        d = d.max((f - i as f64 / n).abs()).max(((i + 1) as f64 / n - f).abs());
    }
    let ne = n.sqrt();
    KsResult {
        statistic: d,
        p_value: kolmogorov_tail((ne + 0.12 + 0.11 / ne) * d),
    }
}

/// Pearson chi-square goodness of fit. Cells with expected count below 5
/// are pooled into their neighbour.
pub fn chi_square_gof(observed: &[f64], expected: &[f64]) -> (f64, f64) {
    let mut obs = Vec::new();
    let mut exp = Vec::new();
    let (mut o_acc, mut e_acc) = (0.0, 0.0);
    for (o, e) in observed.iter().zip(expected) {
        o_acc += o;
        e_acc += e;
        if e_acc >= 5.0 {
            obs.push(o_acc);
            exp.push(e_acc);
            o_acc = 0.0;
            e_acc = 0.0;
        }
    }
    if e_acc > 0.0 {
        match (obs.last_mut(), exp.last_mut()) {
            (Some(o), Some(e)) => {
                *o += o_acc;
                *e += e_acc;
            }
            _ => {
                obs.push(o_acc);
                exp.push(e_acc);
            }
        }
    }
    let stat: f64 = obs.iter().zip(&exp).map(|(o, e)| (o - e).powi(2) / e).sum();
    let dof = obs.len().saturating_sub(1).max(1) as f64;
    let p = 1.0 - ChiSquared::new(dof).map(|c| c.cdf(stat)).unwrap_or(0.0);
    (stat, p)
}

/// Weighted least-squares line `y ≈ a + b x`; returns `(b, se_b, a)`.
pub fn wls_slope(x: &[f64], y: &[f64], w: &[f64]) -> (f64, f64, f64) {
    let sw: f64 = w.iter().sum();
    let mx = x.iter().zip(w).map(|(x, w)| x * w).sum::<f64>() / sw;
    let my = y.iter().zip(w).map(|(y, w)| y * w).sum::<f64>() / sw;
    let sxx: f64 = x.iter().zip(w).map(|(x, w)| w * (x - mx).powi(2)).sum();
    let sxy: f64 = x
        .iter()
        .zip(y)
        .zip(w)
        .map(|((x, y), w)| w * (x - mx) * (y - my))
        .sum();
    let b = sxy / sxx;
    // With inverse-variance weights the slope variance is 1/Sxx.
    (b, (1.0 / sxx).sqrt(), my - b * mx)
}
