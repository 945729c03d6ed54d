//! Reproduction laws: a random number of children, each carrying an
//! independent matrix drawn from a finite atom set and scaled by λ.

use rand::RngExt;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::cone::{fk_constants, FkConstants, PosMatrix};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Largest Poisson draw accepted before sampling errors out.
pub const POISSON_CAP: usize = 1_000_000;

const PROB_TOL: f64 = 1e-12;

/// Law of the number of children N.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OffspringLaw {
    Deterministic { n: u32 },
    FiniteSupport { support: Vec<(u32, f64)> },
    Poisson { mean: f64 },
}

impl OffspringLaw {
    pub fn mean(&self) -> f64 {
        match self {
            OffspringLaw::Deterministic { n } => *n as f64,
            OffspringLaw::FiniteSupport { support } => {
                support.iter().map(|(k, p)| *k as f64 * p).sum()
            }
            OffspringLaw::Poisson { mean } => *mean,
        }
    }

    /// Probability mass function as `(count, prob)` pairs. The Poisson tail
    /// is cut where the remaining mass drops below 1e-17.
    pub fn pmf(&self) -> Vec<(u32, f64)> {
        match self {
            OffspringLaw::Deterministic { n } => vec![(*n, 1.0)],
            OffspringLaw::FiniteSupport { support } => support.clone(),
            OffspringLaw::Poisson { mean } => {
                let mut out = Vec::new();
                let mut p = (-mean).exp();
                let mut acc = 0.0;
                let mut k = 0u32;
                loop {
                    out.push((k, p));
                    acc += p;
                    k += 1;
                    p *= mean / k as f64;
                    if (1.0 - acc < 1e-17 && k as f64 > *mean) || k > 10_000 {
                        break;
                    }
                }
                out
            }
        }
    }

    /// Largest possible count, `None` for Poisson.
    pub fn max_count(&self) -> Option<u32> {
        match self {
            OffspringLaw::Deterministic { n } => Some(*n),
            OffspringLaw::FiniteSupport { support } => support.iter().map(|(k, _)| *k).max(),
            OffspringLaw::Poisson { .. } => None,
        }
    }

    /// `P(N = 0)`.
    pub fn prob_zero(&self) -> f64 {
        match self {
            OffspringLaw::Deterministic { n } => (*n == 0) as u8 as f64,
            OffspringLaw::FiniteSupport { support } => {
                support.iter().filter(|(k, _)| *k == 0).map(|(_, p)| p).sum()
            }
            OffspringLaw::Poisson { mean } => (-mean).exp(),
        }
    }

    /// The same family moved to mean `target`: Poisson changes its mean,
    /// a finite support is exponentially tilted, a deterministic count is
    /// replaced by the two-point law on its floor and ceiling.
    pub fn with_mean(&self, target: f64) -> Result<OffspringLaw> {
        if !(target.is_finite() && target > 0.0) {
            return Err(Error::math(format!("offspring mean {target} is not positive")));
        }
        match self {
            OffspringLaw::Poisson { .. } => Ok(OffspringLaw::Poisson { mean: target }),
            OffspringLaw::Deterministic { .. } => {
                let lo = target.floor();
                let frac = target - lo;
                if frac < 1e-15 {
                    Ok(OffspringLaw::Deterministic { n: lo as u32 })
                } else {
                    Ok(OffspringLaw::FiniteSupport {
                        support: vec![(lo as u32, 1.0 - frac), (lo as u32 + 1, frac)],
                    })
                }
            }
            OffspringLaw::FiniteSupport { support } => {
                let support: Vec<(u32, f64)> =
                    support.iter().copied().filter(|(_, p)| *p > 0.0).collect();
                let lo = support.iter().map(|(k, _)| *k).min().unwrap_or(0) as f64;
                let hi = support.iter().map(|(k, _)| *k).max().unwrap_or(0) as f64;
                if target <= lo || target >= hi {
                    if (target - lo).abs() < 1e-15 || (target - hi).abs() < 1e-15 {
                        let k = target.round() as u32;
                        return Ok(OffspringLaw::Deterministic { n: k });
                    }
                    return Err(Error::math(format!(
                        "offspring mean {target} is outside the support range [{lo}, {hi}]"
                    )));
                }
                let tilted = |t: f64| -> (f64, Vec<(u32, f64)>) {
                    // Subtract the largest exponent before exponentiating.
                    let shift = support.iter().map(|(k, _)| t * *k as f64).fold(f64::MIN, f64::max);
                    let w: Vec<f64> = support
                        .iter()
                        .map(|(k, p)| p * (t * *k as f64 - shift).exp())
                        .collect();
                    let z: f64 = w.iter().sum();
                    let law: Vec<(u32, f64)> =
                        support.iter().zip(&w).map(|((k, _), w)| (*k, w / z)).collect();
                    let m = law.iter().map(|(k, p)| *k as f64 * p).sum();
                    (m, law)
                };
                let (mut a, mut b) = (-1.0, 1.0);
                while tilted(a).0 > target {
                    a *= 2.0;
                }
                while tilted(b).0 < target {
                    b *= 2.0;
                }
                for _ in 0..200 {
                    let mid = 0.5 * (a + b);
                    if tilted(mid).0 < target {
                        a = mid;
                    } else {
                        b = mid;
                    }
                }
                Ok(OffspringLaw::FiniteSupport {
                    support: tilted(0.5 * (a + b)).1,
                })
            }
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> Result<usize> {
        match self {
            OffspringLaw::Deterministic { n } => Ok(*n as usize),
            OffspringLaw::FiniteSupport { support } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (k, p) in support {
                    acc += p;
                    if u < acc {
                        return Ok(*k as usize);
                    }
                }
                Ok(support.last().map(|(k, _)| *k as usize).unwrap_or(0))
            }
            OffspringLaw::Poisson { mean } => {
                let n = Poisson::new(*mean)
                    .map_err(|e| Error::math(format!("poisson law: {e}")))?
                    .sample(rng) as usize;
                if n > POISSON_CAP {
                    Err(Error::Cap(format!("poisson draw {n} exceeds {POISSON_CAP}")))
                } else {
                    Ok(n)
                }
            }
        }
    }

    /// Draw from the size-biased law `P̃(N = n) = n P(N = n) / E N`.
    pub fn sample_size_biased(&self, rng: &mut Rng) -> Result<usize> {
        match self {
            OffspringLaw::Deterministic { n } => Ok(*n as usize),
            OffspringLaw::FiniteSupport { support } => {
                let mean = self.mean();
                let u: f64 = rng.random::<f64>() * mean;
                let mut acc = 0.0;
                let mut last = 0;
                for (k, p) in support {
                    if *k == 0 {
                        continue;
                    }
                    acc += *k as f64 * p;
                    last = *k as usize;
                    if u < acc {
                        return Ok(last);
                    }
                }
                Ok(last)
            }
            // The size-biased Poisson(m) law is 1 + Poisson(m).
            OffspringLaw::Poisson { .. } => Ok(1 + self.sample(rng)?),
        }
    }

    fn validate(&self, path: &str) -> Result<()> {
        match self {
            OffspringLaw::Deterministic { .. } => Ok(()),
            OffspringLaw::Poisson { mean } => {
                if mean.is_finite() && *mean > 0.0 {
                    Ok(())
                } else {
                    Err(Error::config(format!("{path}.mean"), "poisson mean must be positive"))
                }
            }
            OffspringLaw::FiniteSupport { support } => {
                if support.is_empty() {
                    return Err(Error::config(format!("{path}.support"), "support is empty"));
                }
                for (i, (_, p)) in support.iter().enumerate() {
                    if !(p.is_finite() && *p >= 0.0) {
                        return Err(Error::config(
                            format!("{path}.support[{i}].prob"),
                            format!("probability {p} is not in [0, 1]"),
                        ));
                    }
                }
                let total: f64 = support.iter().map(|(_, p)| p).sum();
                if (total - 1.0).abs() > PROB_TOL {
                    return Err(Error::config(
                        format!("{path}.support"),
                        format!("probabilities sum to {total}, not 1"),
                    ));
                }
                Ok(())
            }
        }
    }
}

/// A matrix with its selection probability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub matrix: PosMatrix,
    pub weight: f64,
}

/// Full description of a reproduction law.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub d: usize,
    pub offspring: OffspringLaw,
    pub atoms: Vec<Atom>,
    pub scale_lambda: f64,
    pub label: String,
}

/// The mean intensity measure of one generation: mass `E N · q_j` at `λ A_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct IntensityMeasure {
    pub atoms: Vec<(PosMatrix, f64)>,
}

impl IntensityMeasure {
    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|(_, m)| m).sum()
    }

    pub fn integrate(&self, f: impl Fn(&PosMatrix) -> f64) -> f64 {
        self.atoms.iter().map(|(g, m)| m * f(g)).sum()
    }
}

impl ModelSpec {
    pub fn new(
        offspring: OffspringLaw,
        atoms: Vec<(PosMatrix, f64)>,
        scale_lambda: f64,
        label: impl Into<String>,
    ) -> Result<Self> {
        let d = atoms.first().map(|(m, _)| m.d()).unwrap_or(0);
        let spec = ModelSpec {
            d,
            offspring,
            atoms: atoms
                .into_iter()
                .map(|(matrix, weight)| Atom { matrix, weight })
                .collect(),
            scale_lambda,
            label: label.into(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(Error::config("d", format!("dimension must be at least 2, got {}", self.d)));
        }
        self.offspring.validate("offspring")?;
        if self.atoms.is_empty() {
            return Err(Error::config("atoms", "at least one atom is required"));
        }
        for (j, a) in self.atoms.iter().enumerate() {
            if a.matrix.d() != self.d {
                return Err(Error::config(
                    format!("atoms[{j}].matrix"),
                    format!("matrix is {0}x{0}, model dimension is {1}", a.matrix.d(), self.d),
                ));
            }
            for r in 0..self.d {
                for c in 0..self.d {
                    if a.matrix.get(r, c) <= 0.0 {
                        return Err(Error::config(
                            format!("atoms[{j}].matrix[{r}][{c}]"),
                            "entries must be strictly positive (condition A1*)",
                        ));
                    }
                }
            }
            if !(a.weight.is_finite() && a.weight >= 0.0) {
                return Err(Error::config(
                    format!("atoms[{j}].weight"),
                    format!("weight {} is not a probability", a.weight),
                ));
            }
        }
        let total: f64 = self.atoms.iter().map(|a| a.weight).sum();
        if (total - 1.0).abs() > PROB_TOL {
            return Err(Error::config("atoms", format!("atom weights sum to {total}, not 1")));
        }
        if !(self.scale_lambda.is_finite() && self.scale_lambda > 0.0) {
            return Err(Error::config("scale_lambda", "scale must be a positive number"));
        }
        Ok(())
    }

    pub fn mean_offspring(&self) -> f64 {
        self.offspring.mean()
    }

    /// `λ A_j` for every atom.
    pub fn scaled_atoms(&self) -> Vec<PosMatrix> {
        self.atoms.iter().map(|a| a.matrix.scaled(self.scale_lambda)).collect()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.atoms.iter().map(|a| a.weight).collect()
    }

    pub fn fk_constants(&self) -> FkConstants {
        let atoms: Vec<PosMatrix> = self.atoms.iter().map(|a| a.matrix.clone()).collect();
        // Validation guarantees positive entries.
        fk_constants(&atoms, self.d).expect("validated atoms are positive")
    }

    pub fn intensity(&self) -> IntensityMeasure {
        let mean = self.mean_offspring();
        IntensityMeasure {
            atoms: self
                .scaled_atoms()
                .into_iter()
                .zip(self.atoms.iter())
                .map(|(g, a)| (g, mean * a.weight))
                .collect(),
        }
    }

    /// The same model with every atom multiplied by `factor` in addition.
    pub fn rescaled(&self, factor: f64) -> ModelSpec {
        ModelSpec {
            scale_lambda: self.scale_lambda * factor,
            ..self.clone()
        }
    }

    /// The model with its atoms transposed (the dual reproduction law).
    pub fn transposed(&self) -> ModelSpec {
        ModelSpec {
            atoms: self
                .atoms
                .iter()
                .map(|a| Atom {
                    matrix: a.matrix.transpose(),
                    weight: a.weight,
                })
                .collect(),
            label: format!("{} (transposed)", self.label),
            ..self.clone()
        }
    }

    pub fn sample_atom(&self, rng: &mut Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (j, a) in self.atoms.iter().enumerate() {
            acc += a.weight;
            if u < acc {
                return j;
            }
        }
        self.atoms.len() - 1
    }

    /// One generation: N children with i.i.d. scaled atoms.
    pub fn sample_generation(&self, rng: &mut Rng) -> Result<Vec<PosMatrix>> {
        let n = self.offspring.sample(rng)?;
        Ok((0..n)
            .map(|_| self.atoms[self.sample_atom(rng)].matrix.scaled(self.scale_lambda))
            .collect())
    }

    pub fn from_json_str(text: &str) -> Result<ModelSpec> {
        let v: Value = serde_json::from_str(text)?;
        Self::from_json(&v)
    }

    pub fn from_json(v: &Value) -> Result<ModelSpec> {
        let obj = v.as_object().ok_or_else(|| Error::config("$", "expected an object"))?;
        let d = obj
            .get("d")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::config("d", "expected a positive integer"))? as usize;
        let offspring = parse_offspring(obj.get("offspring").ok_or_else(|| {
            Error::config("offspring", "missing field")
        })?)?;
        let atoms_v = obj
            .get("atoms")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::config("atoms", "expected an array"))?;
        let mut atoms = Vec::with_capacity(atoms_v.len());
        for (j, a) in atoms_v.iter().enumerate() {
            let path = format!("atoms[{j}]");
            let rows = a
                .get("matrix")
                .and_then(Value::as_array)
                .ok_or_else(|| Error::config(format!("{path}.matrix"), "expected an array of rows"))?;
            if rows.len() != d {
                return Err(Error::config(
                    format!("{path}.matrix"),
                    format!("expected {d} rows, found {}", rows.len()),
                ));
            }
            let mut entries = Vec::with_capacity(d * d);
            for (r, row) in rows.iter().enumerate() {
                let row = row.as_array().filter(|x| x.len() == d).ok_or_else(|| {
                    Error::config(format!("{path}.matrix[{r}]"), format!("expected {d} numbers"))
                })?;
                for (c, x) in row.iter().enumerate() {
                    let x = x.as_f64().ok_or_else(|| {
                        Error::config(format!("{path}.matrix[{r}][{c}]"), "expected a number")
                    })?;
                    if !(x > 0.0 && x.is_finite()) {
                        return Err(Error::config(
                            format!("{path}.matrix[{r}][{c}]"),
                            format!("entry {x} must be strictly positive (condition A1*)"),
                        ));
                    }
                    entries.push(x);
                }
            }
            let matrix = PosMatrix::from_row_major(d, entries)
                .map_err(|e| Error::config(format!("{path}.matrix"), e.to_string()))?;
            let weight = a
                .get("weight")
                .and_then(Value::as_f64)
                .ok_or_else(|| Error::config(format!("{path}.weight"), "expected a number"))?;
            atoms.push(Atom { matrix, weight });
        }
        let scale_lambda = match obj.get("scale_lambda") {
            None => 1.0,
            Some(x) => x
                .as_f64()
                .ok_or_else(|| Error::config("scale_lambda", "expected a number"))?,
        };
        let label = match obj.get("label") {
            None => String::new(),
            Some(x) => x
                .as_str()
                .ok_or_else(|| Error::config("label", "expected a string"))?
                .to_owned(),
        };
        let spec = ModelSpec {
            d,
            offspring,
            atoms,
            scale_lambda,
            label,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> Value {
        let offspring = match &self.offspring {
            OffspringLaw::Deterministic { n } => json!({"kind": "deterministic", "n": n}),
            OffspringLaw::Poisson { mean } => json!({"kind": "poisson", "mean": mean}),
            OffspringLaw::FiniteSupport { support } => json!({
                "kind": "finite_support",
                "support": support.iter().map(|(k, p)| json!({"count": k, "prob": p})).collect::<Vec<_>>(),
            }),
        };
        json!({
            "d": self.d,
            "offspring": offspring,
            "atoms": self.atoms.iter().map(|a| json!({"matrix": a.matrix.rows(), "weight": a.weight})).collect::<Vec<_>>(),
            "scale_lambda": self.scale_lambda,
            "label": self.label,
        })
    }

    /// SHA-256 of the canonical JSON form, used to tag reports.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(self.to_json().to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn parse_offspring(v: &Value) -> Result<OffspringLaw> {
    let kind = v
        .get("kind")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::config("offspring.kind", "expected a string"))?;
    let law = match kind {
        "deterministic" => OffspringLaw::Deterministic {
            n: v.get("n").and_then(Value::as_u64).ok_or_else(|| {
                Error::config("offspring.n", "expected a nonnegative integer")
            })? as u32,
        },
        "poisson" => OffspringLaw::Poisson {
            mean: v
                .get("mean")
                .and_then(Value::as_f64)
                .ok_or_else(|| Error::config("offspring.mean", "expected a number"))?,
        },
        "finite_support" => {
            let items = v
                .get("support")
                .and_then(Value::as_array)
                .ok_or_else(|| Error::config("offspring.support", "expected an array"))?;
            let mut support = Vec::with_capacity(items.len());
            for (i, it) in items.iter().enumerate() {
                let count = it.get("count").and_then(Value::as_u64).ok_or_else(|| {
                    Error::config(format!("offspring.support[{i}].count"), "expected a nonnegative integer")
                })?;
                let prob = it.get("prob").and_then(Value::as_f64).ok_or_else(|| {
                    Error::config(format!("offspring.support[{i}].prob"), "expected a number")
                })?;
                support.push((count as u32, prob));
            }
            support.sort_by_key(|(k, _)| *k);
            OffspringLaw::FiniteSupport { support }
        }
        other => {
            return Err(Error::config(
                "offspring.kind",
                format!("unknown kind {other:?} (expected deterministic, finite_support or poisson)"),
            ))
        }
    };
    law.validate("offspring")?;
    Ok(law)
}

/// Status of one model condition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Holds,
    Fails,
    HeuristicPass,
    HeuristicFail,
    NotEvaluated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub status: Status,
    pub detail: String,
}

impl Condition {
    fn new(status: Status, detail: impl Into<String>) -> Self {
        Condition {
            status,
            detail: detail.into(),
        }
    }
}

/// Per-condition verdicts for a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub a1: Condition,
    pub a2: Condition,
    pub a3: Condition,
    pub a4: Condition,
    pub a5: Condition,
    /// Best margin δ in `−log ‖λ A_j‖ > κ̄ + δ`.
    pub a4_delta: f64,
}

/// Boundary values at the calibrated parameter, as computed by the spectral
/// solver.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryValues {
    pub alpha: f64,
    pub log_m: f64,
    pub log_m_prime: f64,
}

impl ModelSpec {
    pub fn check_conditions(&self, boundary: Option<BoundaryValues>) -> ConditionReport {
        let fk = self.fk_constants();
        let a1 = Condition::new(
            Status::Holds,
            format!("all atoms strictly positive, kappa = {:.6}", fk.kappa),
        );
        let a2 = arithmeticity_check(&self.scaled_atoms());

        let mean = self.mean_offspring();
        let a3 = match boundary {
            _ if mean <= 1.0 => Condition::new(Status::Fails, format!("E N = {mean} is not > 1")),
            None => Condition::new(Status::NotEvaluated, "no boundary data supplied"),
            Some(b) if b.log_m.abs() <= 1e-8 && b.log_m_prime.abs() <= 1e-8 => Condition::new(
                Status::Holds,
                format!(
                    "alpha = {:.10}, log m = {:.2e}, (log m)' = {:.2e}",
                    b.alpha, b.log_m, b.log_m_prime
                ),
            ),
            Some(b) => Condition::new(
                Status::Fails,
                format!(
                    "alpha = {:.10}, log m = {:.2e}, (log m)' = {:.2e}",
                    b.alpha, b.log_m, b.log_m_prime
                ),
            ),
        };

        let delta = self
            .scaled_atoms()
            .iter()
            .map(|g| -g.op_norm().ln())
            .fold(f64::MIN, f64::max)
            - fk.kappa_bar;
        let a4 = if delta > 0.0 {
            Condition::new(Status::Holds, format!("margin delta = {delta:.6}"))
        } else {
            Condition::new(
                Status::Fails,
                format!("no atom has -log||g|| above kappa_bar = {:.6} (shortfall {:.6})", fk.kappa_bar, -delta),
            )
        };
        let a5 = match self.offspring {
            OffspringLaw::Poisson { .. } => Condition::new(Status::Holds, "holds: light tail"),
            _ => Condition::new(Status::Holds, "holds: finite model"),
        };
        ConditionReport {
            a1,
            a2,
            a3,
            a4,
            a5,
            a4_delta: delta,
        }
    }
}

/// Is `x` within 1e-9 of a rational with denominator at most 64?
fn is_rational(x: f64) -> bool {
    for q in 1..=64u32 {
        let p = (x * q as f64).round();
        if (x - p / q as f64).abs() <= 1e-9 * x.abs().max(1.0) {
            return true;
        }
    }
    false
}

/// Heuristic non-arithmeticity check on log Perron roots of products of
/// length one to three.
fn arithmeticity_check(atoms: &[PosMatrix]) -> Condition {
    let mut roots = Vec::new();
    let mut words: Vec<PosMatrix> = atoms.to_vec();
    for len in 1..=3 {
        roots.extend(words.iter().map(|g| g.perron_root().ln()));
        if len < 3 {
            words = words
                .iter()
                .flat_map(|w| atoms.iter().map(move |a| a.mul(w)))
                .collect();
        }
    }
    let base = roots[0];
    let diffs: Vec<f64> = roots
        .iter()
        .map(|r| r - base)
        .filter(|d| d.abs() > 1e-9)
        .collect();
    let Some(reference) = diffs.iter().copied().min_by(|a, b| a.abs().total_cmp(&b.abs())) else {
        return Condition::new(Status::HeuristicFail, "all Perron roots coincide (lattice)");
    };
    if let Some(bad) = diffs.iter().find(|d| !is_rational(*d / reference)) {
        Condition::new(
            Status::HeuristicPass,
            format!(
                "log Perron roots are not on one lattice: {bad:.6} / {reference:.6} is irrational to 1e-9"
            ),
        )
    } else {
        Condition::new(
            Status::HeuristicFail,
            format!(
                "{} log Perron roots lie on a lattice of span {:.6} plus shift",
                roots.len(),
                reference.abs()
            ),
        )
    }
}
