//! Changes of measure: the tilted chain `Q^α`, the size-biased family law,
//! the spinal tree sampler under `P̂^h`, and verifiers of the many-to-one
//! formula and the spinal decomposition.

use std::sync::Arc;

use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::branching::{
    big_h, h_martingale, Caps, GenerationSnapshot, Harmonic, One, Particles, Sampler, TreeSim,
};
use crate::cone::{act_in_place, Direction, PosMatrix};
use crate::error::{Error, Result};
use crate::model::{ModelSpec, OffspringLaw};
use crate::renewal::VAlphaTable;
use crate::rng::{run_replicas, Rng, Streams};
use crate::spectral::{BoundaryData, KernelScratch, SpectralData, TiltedKernel};
use crate::stats::{CheckReport, Estimate};

/// Normalized kernel weights must sum to 1 this closely.
pub const WEIGHT_SUM_TOL: f64 = 1e-9;

/// Attempts before the rejection sampler gives up.
pub const REJECTION_LIMIT: usize = 1_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TiltedChainState {
    pub x: Vec<f64>,
    pub s: f64,
    pub step: usize,
}

impl TiltedChainState {
    pub fn new(x: &Direction, b: f64) -> Self {
        TiltedChainState {
            x: x.coords().to_vec(),
            s: b,
            step: 0,
        }
    }
}

/// One step of `Q^s`: `S ← S − σ(g, X)`, `X ← g·X` with `g` drawn from the
/// kernel weights. Returns the atom used.
pub fn tilted_step(
    state: &mut TiltedChainState,
    kernel: &TiltedKernel,
    sc: &mut KernelScratch,
    rng: &mut Rng,
) -> Result<usize> {
    let (atom, sigma) = kernel.step(&mut state.x, rng, sc)?;
    let total: f64 = sc.w.iter().sum();
    if (total - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::Invariant(format!("kernel weights sum to {total}")));
    }
    state.s -= sigma;
    state.step += 1;
    Ok(atom)
}

/// `(S_1, …, S_n)` of the tilted chain started at `(x, b)`.
pub fn tilted_path(kernel: &TiltedKernel, x: &Direction, b: f64, n: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    let mut st = TiltedChainState::new(x, b);
    let mut sc = kernel.scratch();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        tilted_step(&mut st, kernel, &mut sc, rng)?;
        out.push(st.s);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HarmonicKind {
    ConstantOne,
    VAlphaBeta { beta: f64 },
}

/// `h ≡ 1` on the line, or `V_α^β(x, y) = V̂_α(x, y + β)` on `[−β, ∞)`.
#[derive(Clone, Debug)]
pub struct HarmonicEvaluator {
    pub kind: HarmonicKind,
    table: Option<Arc<VAlphaTable>>,
}

impl HarmonicEvaluator {
    pub fn one() -> Self {
        HarmonicEvaluator {
            kind: HarmonicKind::ConstantOne,
            table: None,
        }
    }

    pub fn v_alpha_beta(table: Arc<VAlphaTable>, beta: f64) -> Self {
        HarmonicEvaluator {
            kind: HarmonicKind::VAlphaBeta { beta },
            table: Some(table),
        }
    }

    pub fn table(&self) -> Option<&VAlphaTable> {
        self.table.as_deref()
    }

    /// Relative slack the verifiers grant for an estimated `V̂`.
    pub fn certified_error(&self) -> f64 {
        self.table.as_ref().map_or(0.0, |t| t.certified_error)
    }
}

impl Harmonic for HarmonicEvaluator {
    fn h(&self, x: &[f64], y: f64) -> f64 {
        match (&self.kind, &self.table) {
            (HarmonicKind::VAlphaBeta { beta }, Some(t)) => t.eval(x, y + beta),
            _ => 1.0,
        }
    }

    fn lower(&self) -> f64 {
        match self.kind {
            HarmonicKind::ConstantOne => f64::NEG_INFINITY,
            HarmonicKind::VAlphaBeta { beta } => -beta,
        }
    }
}

/// A family drawn under the size-biased law, with the spine child marked.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasedFamily {
    /// `(X, S, atom)` of each child in birth order.
    pub children: Vec<(Vec<f64>, f64, usize)>,
    pub spine: usize,
}

/// `H_α` of the child of `(x, b)` through each atom, zero outside `B`.
fn child_weights(
    sampler: &Sampler,
    bd: &BoundaryData,
    h: &dyn Harmonic,
    x: &[f64],
    b: f64,
    ys: &mut [f64],
) -> (Vec<f64>, Vec<f64>) {
    let d = x.len();
    let lower = h.lower();
    let mut weights = Vec::with_capacity(sampler.atoms.len());
    let mut positions = Vec::with_capacity(sampler.atoms.len());
    for (j, g) in sampler.atoms.iter().enumerate() {
        let y = &mut ys[j * d..(j + 1) * d];
        let s = b - act_in_place(g, x, y);
        positions.push(s);
        weights.push(if s >= lower { big_h(bd, h, y, s) } else { 0.0 });
    }
    (weights, positions)
}

fn check_root(bd: &BoundaryData, h: &dyn Harmonic, x: &[f64], b: f64) -> Result<f64> {
    if b < h.lower() {
        return Err(Error::Domain(format!("start position {b} lies outside the region [{}, ∞)", h.lower())));
    }
    let hx = big_h(bd, h, x, b);
    if !(hx > 0.0 && hx.is_finite()) {
        return Err(Error::Domain(format!("H_alpha(x, b) = {hx} is not positive")));
    }
    Ok(hx)
}

fn pick(weights: &[f64], rng: &mut Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (j, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return j;
        }
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Exact size-biased family: a size-biased count, one child from the
/// `H`-biased atom law (the spine), the others from the original law, and
/// the spine placed at a uniform position.
pub fn sample_biased_generation(
    x: &[f64],
    b: f64,
    spec: &ModelSpec,
    bd: &BoundaryData,
    h: &dyn Harmonic,
    rng: &mut Rng,
) -> Result<BiasedFamily> {
    let sampler = Sampler::new(spec);
    biased_exact(&sampler, x, b, spec, bd, h, rng)
}

fn biased_exact(
    sampler: &Sampler,
    x: &[f64],
    b: f64,
    spec: &ModelSpec,
    bd: &BoundaryData,
    h: &dyn Harmonic,
    rng: &mut Rng,
) -> Result<BiasedFamily> {
    check_root(bd, h, x, b)?;
    let d = x.len();
    let mut ys = vec![0.0; sampler.atoms.len() * d];
    let (hw, pos) = child_weights(sampler, bd, h, x, b, &mut ys);
    let biased: Vec<f64> = hw.iter().zip(&spec.atoms).map(|(w, a)| w * a.weight).collect();
    if biased.iter().sum::<f64>() <= 0.0 {
        return Err(Error::math("no child of the spine can stay in the region"));
    }
    let n = spec.offspring.sample_size_biased(rng)?;
    let spine = rng.random_range(0..n);
    let mut children = Vec::with_capacity(n);
    for c in 0..n {
        let j = if c == spine { pick(&biased, rng) } else { sampler.atom(rng) };
        children.push((ys[j * d..(j + 1) * d].to_vec(), pos[j], j));
    }
    Ok(BiasedFamily { children, spine })
}

/// Rejection sampler for the same law: propose an ordinary family and
/// accept with probability `Σ H 1_B / (M H(x, b))`.
pub fn sample_biased_generation_rejection(
    x: &[f64],
    b: f64,
    spec: &ModelSpec,
    bd: &BoundaryData,
    h: &dyn Harmonic,
    rng: &mut Rng,
) -> Result<BiasedFamily> {
    let sampler = Sampler::new(spec);
    check_root(bd, h, x, b)?;
    let n_max = spec.offspring.max_count().ok_or_else(|| {
        Error::math("rejection bound is infinite for an offspring law with unbounded support")
    })? as f64;
    let d = x.len();
    let mut ys = vec![0.0; sampler.atoms.len() * d];
    let (hw, pos) = child_weights(&sampler, bd, h, x, b, &mut ys);
    let bound = n_max * hw.iter().copied().fold(0.0, f64::max);
    if bound <= 0.0 {
        return Err(Error::math("no child of the spine can stay in the region"));
    }
    for _ in 0..REJECTION_LIMIT {
        let n = spec.offspring.sample(rng)?;
        let atoms: Vec<usize> = (0..n).map(|_| sampler.atom(rng)).collect();
        let weights: Vec<f64> = atoms.iter().map(|j| hw[*j]).collect();
        let total: f64 = weights.iter().sum();
        if total > 0.0 && rng.random::<f64>() * bound < total {
            let spine = pick(&weights, rng);
            let children = atoms
                .iter()
                .map(|&j| (ys[j * d..(j + 1) * d].to_vec(), pos[j], j))
                .collect();
            return Ok(BiasedFamily { children, spine });
        }
    }
    Err(Error::math(format!(
        "rejection sampler accepted nothing in {REJECTION_LIMIT} proposals"
    )))
}

/// Exact law of `(N, atom counts)` under the size-biased family law, for
/// finite offspring support.
pub fn biased_configuration_law(
    x: &[f64],
    b: f64,
    spec: &ModelSpec,
    bd: &BoundaryData,
    h: &dyn Harmonic,
) -> Result<Vec<((usize, Vec<usize>), f64)>> {
    if matches!(spec.offspring, OffspringLaw::Poisson { .. }) {
        return Err(Error::math("configuration law needs finite offspring support"));
    }
    let sampler = Sampler::new(spec);
    check_root(bd, h, x, b)?;
    let k = sampler.atoms.len();
    let mut ys = vec![0.0; k * x.len()];
    let (hw, _) = child_weights(&sampler, bd, h, x, b, &mut ys);
    let q: Vec<f64> = spec.atoms.iter().map(|a| a.weight).collect();
    let mean_h: f64 = q.iter().zip(&hw).map(|(q, w)| q * w).sum();
    let norm = spec.mean_offspring() * mean_h;
    let mut out = Vec::new();
    for (n, p) in spec.offspring.pmf() {
        let n = n as usize;
        for counts in compositions(n, k) {
            let mut multinomial = (1..=n).map(|i| i as f64).product::<f64>();
            for (c, qj) in counts.iter().zip(&q) {
                multinomial *= qj.powi(*c as i32) / (1..=*c).map(|i| i as f64).product::<f64>();
            }
            let mass: f64 = counts.iter().zip(&hw).map(|(c, w)| *c as f64 * w).sum();
            let prob = p * multinomial * mass / norm;
            if prob > 0.0 {
                out.push(((n, counts), prob));
            }
        }
    }
    Ok(out)
}

/// All `k`-tuples of nonnegative integers summing to `n`.
fn compositions(n: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 1 {
        return vec![vec![n]];
    }
    let mut out = Vec::new();
    for first in 0..=n {
        for mut rest in compositions(n - first, k - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpineStep {
    pub k: usize,
    /// `w(k)`, 1-based within the family of size `count`.
    pub child_index: usize,
    pub count: usize,
    pub x: Vec<f64>,
    pub s: f64,
    pub siblings: Vec<(Vec<f64>, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpinePath {
    pub x0: Vec<f64>,
    pub b0: f64,
    pub steps: Vec<SpineStep>,
}

impl SpinePath {
    /// One JSON object per generation.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for step in &self.steps {
            out.push_str(&serde_json::to_string(step).expect("spine steps serialize"));
            out.push('\n');
        }
        out
    }

    pub fn positions(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.s).collect()
    }
}

/// Tree under `P̂^h_{x,b}`: the spine reproduces by the size-biased law and
/// every other particle by the original one. `visit` sees each generation
/// with the index of the spine particle in it.
#[allow(clippy::too_many_arguments)]
pub fn simulate_with_spine(
    x: &Direction,
    b: f64,
    spec: &ModelSpec,
    bd: &BoundaryData,
    h: &dyn Harmonic,
    depth: usize,
    caps: Caps,
    rng: &mut Rng,
    mut visit: impl FnMut(&GenerationSnapshot, usize) -> Result<()>,
) -> Result<SpinePath> {
    let sampler = Sampler::new(spec);
    check_root(bd, h, x.coords(), b)?;
    let sim = TreeSim::new(spec, x, b, 0, caps.clone())?;
    let mut snap = sim.current().clone();
    let mut next = Particles {
        d: spec.d,
        ..Default::default()
    };
    let mut spine = 0;
    let mut path = SpinePath {
        x0: x.coords().to_vec(),
        b0: b,
        steps: Vec::with_capacity(depth),
    };
    visit(&snap, spine)?;
    for k in 1..=depth {
        let parents = &snap.particles;
        next.x.clear();
        next.s.clear();
        next.min_s.clear();
        next.min_s_suffix.clear();
        next.parent.clear();
        next.atom.clear();
        let open = k >= caps.suffix_from;
        let mut new_spine = 0;
        for i in 0..parents.len() {
            if i == spine {
                let fam = biased_exact(&sampler, parents.x(i), parents.s[i], spec, bd, h, rng)?;
                new_spine = next.len() + fam.spine;
                let mut siblings = Vec::new();
                for (c, (cx, cs, j)) in fam.children.iter().enumerate() {
                    next.push_child(parents, i, &sampler.atoms[*j], *j, c as u32 + 1, open);
                    if c != fam.spine {
                        siblings.push((cx.clone(), *cs));
                    }
                }
                let (sx, ss, _) = &fam.children[fam.spine];
                path.steps.push(SpineStep {
                    k,
                    child_index: fam.spine + 1,
                    count: fam.children.len(),
                    x: sx.clone(),
                    s: *ss,
                    siblings,
                });
            } else {
                let count = spec.offspring.sample(rng)?;
                for c in 0..count {
                    let j = sampler.atom(rng);
                    next.push_child(parents, i, &sampler.atoms[j], j, c as u32 + 1, open);
                }
            }
            if next.len() > caps.max_particles {
                return Err(Error::Cap(format!(
                    "generation {k}: population exceeds the cap of {} particles",
                    caps.max_particles
                )));
            }
        }
        std::mem::swap(&mut snap.particles, &mut next);
        snap.n = k;
        spine = new_spine;
        visit(&snap, spine)?;
    }
    Ok(path)
}

/// A bounded path functional `f(X_n, S_n, min_{k≤n} S_k)`.
pub type PathFn<'a> = &'a (dyn Fn(&[f64], f64, f64) -> f64 + Sync);

/// Both sides of the many-to-one formula at `n = 1`, summed over atoms.
pub fn many_to_one_exact(spec: &ModelSpec, data: &SpectralData, x: &[f64], b: f64, f: PathFn<'_>) -> (f64, f64) {
    let kernel = TiltedKernel::new(spec, data);
    let d = x.len();
    let mut y = vec![0.0; d];
    let rx = data.r_at(x);
    let mut lhs = 0.0;
    let mut rhs = 0.0;
    for (j, (g, mass)) in spec.intensity().atoms.into_iter().enumerate() {
        debug_assert_eq!(&g, kernel.atom(j));
        let sigma = act_in_place(&g, x, &mut y);
        let s1 = b - sigma;
        let value = f(&y, s1, b.min(s1));
        lhs += mass * value;
        let ry = data.r_at(&y);
        let w = mass * (data.s * sigma).exp() * ry / (data.m_s * rx);
        rhs += w * value * (-data.s * sigma).exp() / ry;
    }
    (lhs, rx * data.m_s * rhs)
}

/// Monte Carlo check of `E_{x,b} Σ_{|u|=n} f(u) = r_s(x) m(s)^n
/// E_Q[f e^{s(S_n − S_0)} / r_s(X_n)]`.
#[allow(clippy::too_many_arguments)]
pub fn verify_many_to_one(
    spec: &ModelSpec,
    data: &SpectralData,
    x: &Direction,
    b: f64,
    n: usize,
    name: &str,
    f: PathFn<'_>,
    replicas: usize,
    streams: Streams,
    threads: usize,
) -> Result<CheckReport> {
    if n > 8 {
        return Err(Error::config("n", format!("{n} generations is beyond the verifier's range of 8")));
    }
    let lhs = run_replicas(streams.derive("many-to-one/tree"), replicas, threads, |_, rng| {
        let mut sim = TreeSim::new(spec, x, b, n, Caps::default())?;
        while sim.advance(rng)? {}
        let p = &sim.current().particles;
        Ok((0..p.len()).map(|i| f(p.x(i), p.s[i], p.min_s[i])).sum::<f64>())
    })?;
    let kernel = TiltedKernel::new(spec, data);
    let rx = data.r_at(x.coords());
    let scale = rx * data.m_s.powi(n as i32);
    let rhs = run_replicas(streams.derive("many-to-one/chain"), replicas, threads, |_, rng| {
        let mut st = TiltedChainState::new(x, b);
        let mut sc = kernel.scratch();
        let mut min_s = b;
        for _ in 0..n {
            tilted_step(&mut st, &kernel, &mut sc, rng)?;
            min_s = min_s.min(st.s);
        }
        Ok(scale * f(&st.x, st.s, min_s) * (data.s * (st.s - b)).exp() / data.r_at(&st.x))
    })?;
    Ok(CheckReport::compare(
        format!("many-to-one {name} n={n}"),
        &Estimate::from_samples(&lhs, streams.master()),
        &Estimate::from_samples(&rhs, streams.master()),
        3.0,
    ))
}

/// A test function of a factor sequence `(g_{u|1}, …, g_u)`.
pub type FactorFn<'a> = &'a (dyn Fn(&[&PosMatrix]) -> f64 + Sync);

/// `E Σ_{|u|=n} f(g_{u|1}, …, g_u)` by enumeration of `μ^{⊗n}`; the same
/// value holds for the reversed sequence.
pub fn exchangeability_exact(spec: &ModelSpec, n: usize, f: FactorFn<'_>) -> f64 {
    let atoms = spec.intensity().atoms;
    let k = atoms.len();
    let mut idx = vec![0usize; n];
    let mut total = 0.0;
    loop {
        let seq: Vec<&PosMatrix> = idx.iter().map(|j| &atoms[*j].0).collect();
        let mass: f64 = idx.iter().map(|j| atoms[*j].1).product();
        total += mass * f(&seq);
        let Some(pos) = idx.iter().rposition(|j| j + 1 < k) else {
            return total;
        };
        idx[pos] += 1;
        for j in idx.iter_mut().skip(pos + 1) {
            *j = 0;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExchangeabilityReport {
    pub n: usize,
    pub exact: f64,
    pub forward: CheckReport,
    pub reversed: CheckReport,
    pub forward_vs_reversed: CheckReport,
}

/// Sums `f` over generation `n` of simulated trees in ancestral order and
/// in reversed order, and compares both with the exact value.
#[allow(clippy::too_many_arguments)]
pub fn verify_exchangeability(
    spec: &ModelSpec,
    x: &Direction,
    n: usize,
    name: &str,
    f: FactorFn<'_>,
    replicas: usize,
    streams: Streams,
    threads: usize,
) -> Result<ExchangeabilityReport> {
    if n == 0 || n > 8 {
        return Err(Error::config("n", format!("{n} generations is outside the verifier's range 1..=8")));
    }
    let atoms = spec.scaled_atoms();
    let caps = Caps { track_paths: true, ..Caps::default() };
    let sums = run_replicas(streams, replicas, threads, |_, rng| {
        let mut sim = TreeSim::new(spec, x, 0.0, n, caps.clone())?;
        while sim.advance(rng)? {}
        let p = &sim.current().particles;
        let paths = p.atom_paths.as_ref().expect("paths are tracked");
        let mut fwd = 0.0;
        let mut rev = 0.0;
        for path in paths {
            let mut seq: Vec<&PosMatrix> = path.iter().map(|j| &atoms[*j as usize]).collect();
            fwd += f(&seq);
            seq.reverse();
            rev += f(&seq);
        }
        Ok((fwd, rev))
    })?;
    let seed = streams.master();
    let fwd = Estimate::from_samples(&sums.iter().map(|s| s.0).collect::<Vec<_>>(), seed);
    let rev = Estimate::from_samples(&sums.iter().map(|s| s.1).collect::<Vec<_>>(), seed);
    let exact = exchangeability_exact(spec, n, f);
    let point = Estimate { value: exact, se: 0.0, replicas: 1, seed };
    Ok(ExchangeabilityReport {
        n,
        exact,
        forward: CheckReport::compare(format!("exchangeability {name} forward n={n}"), &fwd, &point, 3.0),
        reversed: CheckReport::compare(format!("exchangeability {name} reversed n={n}"), &rev, &point, 3.0),
        forward_vs_reversed: CheckReport::compare(format!("exchangeability {name} n={n}"), &fwd, &rev, 3.0),
    })
}

/// A test statistic of a generation, optionally depending on a marked
/// particle (the spine, or the particle being weighted).
pub struct SpinalStatistic {
    pub name: &'static str,
    pub eval: fn(&GenerationSnapshot, usize, &BoundaryData) -> f64,
}

/// The fixed battery compared by [`verify_spinal_measure`].
pub fn spinal_battery() -> Vec<SpinalStatistic> {
    fn one(_: &GenerationSnapshot, _: usize, _: &BoundaryData) -> f64 {
        1.0
    }
    fn population(s: &GenerationSnapshot, _: usize, _: &BoundaryData) -> f64 {
        s.population() as f64
    }
    fn exp_mass(s: &GenerationSnapshot, _: usize, bd: &BoundaryData) -> f64 {
        s.particles.s.iter().map(|v| (-bd.alpha * v).exp()).sum()
    }
    fn min_position(s: &GenerationSnapshot, _: usize, _: &BoundaryData) -> f64 {
        s.min_s().tanh()
    }
    fn marked_stays_positive(s: &GenerationSnapshot, u: usize, _: &BoundaryData) -> f64 {
        f64::from(s.particles.min_s[u] >= 0.0)
    }
    fn marked_position(s: &GenerationSnapshot, u: usize, _: &BoundaryData) -> f64 {
        s.particles.s[u].tanh()
    }
    fn mean_first_coordinate(s: &GenerationSnapshot, _: usize, _: &BoundaryData) -> f64 {
        let p = &s.particles;
        (0..p.len()).map(|i| p.x(i)[0]).sum::<f64>() / p.len() as f64
    }
    fn at_least_three(s: &GenerationSnapshot, _: usize, _: &BoundaryData) -> f64 {
        f64::from(s.population() >= 3)
    }
    vec![
        SpinalStatistic { name: "one", eval: one },
        SpinalStatistic { name: "population", eval: population },
        SpinalStatistic { name: "sum exp(-alpha S)", eval: exp_mass },
        SpinalStatistic { name: "tanh(min S)", eval: min_position },
        SpinalStatistic { name: "spine path stays >= 0", eval: marked_stays_positive },
        SpinalStatistic { name: "tanh(S spine)", eval: marked_position },
        SpinalStatistic { name: "mean X_1", eval: mean_first_coordinate },
        SpinalStatistic { name: "population >= 3", eval: at_least_three },
    ]
}

/// Compares `Ê[T]` under the spinal sampler with the reweighted plain
/// estimate `E_{x,b}[Σ_u H_α(u) 1_B(u) T(u)] / H_α(x, b)` for the battery.
#[allow(clippy::too_many_arguments)]
pub fn verify_spinal_measure(
    spec: &ModelSpec,
    bd: &BoundaryData,
    x: &Direction,
    b: f64,
    h: &HarmonicEvaluator,
    n: usize,
    replicas: usize,
    streams: Streams,
    threads: usize,
) -> Result<Vec<CheckReport>> {
    if !(1..=6).contains(&n) {
        return Err(Error::config("n", format!("spinal measure check needs 1 <= n <= 6, got {n}")));
    }
    let battery = spinal_battery();
    let hx = check_root(bd, h, x.coords(), b)?;
    let lower = h.lower();
    let spinal = run_replicas(streams.derive("spinal/spine"), replicas, threads, |_, rng| {
        let mut values = Vec::new();
        simulate_with_spine(x, b, spec, bd, h, n, Caps::default(), rng, |snap, spine| {
            if snap.n == n {
                values = battery.iter().map(|t| (t.eval)(snap, spine, bd)).collect();
            }
            Ok(())
        })?;
        Ok(values)
    })?;
    let plain = run_replicas(streams.derive("spinal/plain"), replicas, threads, |_, rng| {
        let mut sim = TreeSim::new(spec, x, b, n, Caps::default())?;
        while sim.advance(rng)? {}
        let snap = sim.current();
        let p = &snap.particles;
        let mut values = vec![0.0; battery.len()];
        for u in 0..p.len() {
            if p.min_s[u] < lower {
                continue;
            }
            let w = big_h(bd, h, p.x(u), p.s[u]) / hx;
            for (v, t) in values.iter_mut().zip(&battery) {
                *v += w * (t.eval)(snap, u, bd);
            }
        }
        Ok(values)
    })?;
    let slack = h.certified_error();
    Ok(battery
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let l: Vec<f64> = spinal.iter().map(|v| v[k]).collect();
            let r: Vec<f64> = plain.iter().map(|v| v[k]).collect();
            let le = Estimate::from_samples(&l, streams.master());
            let mut re = Estimate::from_samples(&r, streams.master());
            // An estimated V̂ is harmonic only up to its certified error.
            re.se = re.se.hypot(slack * re.value.abs());
            CheckReport::compare(format!("spinal {} n={n}", t.name), &le, &re, 3.0)
        })
        .collect())
}

/// Plain-tree mean of `M_n^h / H_α(x, b)`; equals 1 for harmonic `h`.
pub fn h_martingale_mean(
    spec: &ModelSpec,
    bd: &BoundaryData,
    x: &Direction,
    b: f64,
    h: &HarmonicEvaluator,
    n: usize,
    replicas: usize,
    streams: Streams,
    threads: usize,
) -> Result<Estimate> {
    let hx = check_root(bd, h, x.coords(), b)?;
    let v = run_replicas(streams, replicas, threads, |_, rng| {
        let mut sim = TreeSim::new(spec, x, b, n, Caps::default())?;
        while sim.advance(rng)? {}
        Ok(h_martingale(sim.current(), bd, h) / hx)
    })?;
    Ok(Estimate::from_samples(&v, streams.master()))
}

/// Spine positions `S_{w|n}` at each of `ns` under `P̂` with `h ≡ 1`, paired
/// with the tilted-chain positions `S_n`, one path per replica.
pub fn spine_vs_chain(
    spec: &ModelSpec,
    bd: &BoundaryData,
    x: &Direction,
    b: f64,
    ns: &[usize],
    replicas: usize,
    streams: Streams,
    threads: usize,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let depth = ns.iter().copied().max().unwrap_or(0);
    let spine = run_replicas(streams.derive("spine-law/spine"), replicas, threads, |_, rng| {
        let path = simulate_with_spine(x, b, spec, bd, &One, depth, Caps::default(), rng, |_, _| Ok(()))?;
        Ok(ns.iter().map(|n| path.steps[n - 1].s).collect::<Vec<_>>())
    })?;
    let kernel = TiltedKernel::new(spec, &bd.spectral);
    let chain = run_replicas(streams.derive("spine-law/chain"), replicas, threads, |_, rng| {
        let p = tilted_path(&kernel, x, b, depth, rng)?;
        Ok(ns.iter().map(|n| p[n - 1]).collect::<Vec<_>>())
    })?;
    let col = |v: &[Vec<f64>], k: usize| v.iter().map(|r| r[k]).collect::<Vec<_>>();
    Ok((
        (0..ns.len()).map(|k| col(&spine, k)).collect(),
        (0..ns.len()).map(|k| col(&chain, k)).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{calibrate_boundary, CalibrationMode, DirectionGrid, DEFAULT_TOL};
    use crate::stats::{chi_square_gof, ks_two_sample};

    fn mat(rows: &[&[f64]]) -> PosMatrix {
        PosMatrix::new(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    fn calibrated(offspring: OffspringLaw) -> (ModelSpec, BoundaryData) {
        let spec = ModelSpec::new(
            offspring,
            vec![
                (mat(&[&[1.0, 0.8], &[0.9, 1.0]]), 0.5),
                (mat(&[&[0.3, 0.27], &[0.24, 0.3]]), 0.5),
            ],
            1.0,
            "",
        )
        .unwrap();
        calibrate_boundary(&spec, CalibrationMode::SolveAlpha, &DirectionGrid::new(2, Some(256)).unwrap(), DEFAULT_TOL)
            .unwrap()
    }

    /// Sampler tests only need the kernel, so a law with no boundary case of
    /// its own borrows a calibrated one.
    fn with_offspring(offspring: OffspringLaw) -> (ModelSpec, BoundaryData) {
        let (mut spec, bd) = calibrated(OffspringLaw::FiniteSupport { support: vec![(1, 0.9), (2, 0.1)] });
        spec.offspring = offspring;
        (spec, bd)
    }

    fn rank_one() -> (ModelSpec, BoundaryData) {
        let c = [(-1f64).exp() / 2.0, 1f64.exp() / 2.0];
        let spec = ModelSpec::new(
            OffspringLaw::FiniteSupport { support: vec![(1, 0.5), (2, 0.5)] },
            c.iter().map(|c| (PosMatrix::constant(2, *c), 0.5)).collect(),
            1.0,
            "",
        )
        .unwrap();
        calibrate_boundary(&spec, CalibrationMode::SolveAlpha, &DirectionGrid::new(2, Some(64)).unwrap(), DEFAULT_TOL)
            .unwrap()
    }

    fn x0() -> Direction {
        Direction::new(vec![0.4, 0.6]).unwrap()
    }

    #[test]
    fn rank_one_tilted_probabilities() {
        let (spec, bd) = rank_one();
        let kernel = TiltedKernel::new(&spec, &bd.spectral);
        let mut sc = kernel.scratch();
        kernel.weights(x0().coords(), &mut sc).unwrap();
        let c = [(-1f64).exp() / 2.0, 1f64.exp() / 2.0];
        let raw: Vec<f64> = c.iter().map(|c| (2.0 * c * spec.scale_lambda).powf(bd.alpha)).collect();
        let z: f64 = raw.iter().sum();
        for (w, r) in sc.w.iter().zip(&raw) {
            assert!((w - r / z).abs() < 1e-10);
        }
    }

    #[test]
    fn single_line_chain_is_deterministic() {
        let a = mat(&[&[2.0, 1.0], &[1.0, 1.0]]);
        let spec = ModelSpec::new(OffspringLaw::Deterministic { n: 1 }, vec![(a.clone(), 1.0)], 1.0, "").unwrap();
        let data = crate::spectral::dominant_eigen(&spec, 1.0, &DirectionGrid::new(2, Some(256)).unwrap(), DEFAULT_TOL)
            .unwrap();
        let kernel = TiltedKernel::new(&spec, &data);
        let mut st = TiltedChainState::new(&x0(), 0.0);
        let mut sc = kernel.scratch();
        let mut x = x0();
        let mut s = 0.0;
        let mut rng = Streams::new(1).stream(0);
        for _ in 0..10 {
            assert_eq!(tilted_step(&mut st, &kernel, &mut sc, &mut rng).unwrap(), 0);
            s -= crate::cone::cocycle(&a, &x).unwrap();
            x = crate::cone::act(&a, &x).unwrap();
            assert!((st.s - s).abs() < 1e-12);
        }
        assert_eq!(st.step, 10);
    }

    #[test]
    fn boundary_chain_has_no_drift() {
        let (spec, bd) = calibrated(OffspringLaw::FiniteSupport { support: vec![(1, 0.9), (2, 0.1)] });
        let kernel = TiltedKernel::new(&spec, &bd.spectral);
        let ends = run_replicas(Streams::new(2), 2000, 1, |_, rng| {
            Ok(*tilted_path(&kernel, &x0(), 0.0, 500, rng)?.last().unwrap() / 500.0)
        })
        .unwrap();
        let e = Estimate::from_samples(&ends, 2);
        assert!(e.within(0.0, 3.0, 0.0), "{e:?}");
    }

    #[test]
    fn one_child_spine_is_the_tilted_chain() {
        let (base, bd) = calibrated(OffspringLaw::FiniteSupport { support: vec![(1, 0.9), (2, 0.1)] });
        let spec = ModelSpec { offspring: OffspringLaw::Deterministic { n: 1 }, ..base.clone() };
        let mut rng = Streams::new(3).stream(0);
        let fam = sample_biased_generation(x0().coords(), 0.0, &spec, &bd, &One, &mut rng).unwrap();
        assert_eq!(fam.children.len(), 1);
        assert_eq!(fam.spine, 0);
        let kernel = TiltedKernel::new(&base, &bd.spectral);
        let mut sc = kernel.scratch();
        kernel.weights(x0().coords(), &mut sc).unwrap();
        let counts = run_replicas(Streams::new(4), 200000, 1, |_, rng| {
            Ok(sample_biased_generation(x0().coords(), 0.0, &spec, &bd, &One, rng)?.children[0].2)
        })
        .unwrap();
        let freq = counts.iter().filter(|j| **j == 0).count() as f64 / 200000.0;
        assert!((freq - sc.w[0]).abs() < 3.0 * (sc.w[0] * (1.0 - sc.w[0]) / 200000.0).sqrt() + 1e-9, "{freq} {:?}", sc.w);
    }

    #[test]
    fn biased_law_normalizes_and_matches_both_samplers() {
        let (spec, bd) = calibrated(OffspringLaw::FiniteSupport { support: vec![(1, 0.4), (2, 0.3), (3, 0.3)] });
        let x = x0();
        let law = biased_configuration_law(x.coords(), 0.3, &spec, &bd, &One).unwrap();
        let total: f64 = law.iter().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-6, "{total}");
        let draws = 200000;
        for exact in [true, false] {
            let keys = run_replicas(Streams::new(55).derive(if exact { "e" } else { "r" }), draws, 1, |_, rng| {
                let fam = if exact {
                    sample_biased_generation(x.coords(), 0.3, &spec, &bd, &One, rng)?
                } else {
                    sample_biased_generation_rejection(x.coords(), 0.3, &spec, &bd, &One, rng)?
                };
                let mut counts = vec![0; 2];
                for c in &fam.children {
                    counts[c.2] += 1;
                }
                Ok((fam.children.len(), counts))
            })
            .unwrap();
            let observed: Vec<f64> =
                law.iter().map(|(k, _)| keys.iter().filter(|d| *d == k).count() as f64).collect();
            let expected: Vec<f64> = law.iter().map(|(_, p)| p / total * draws as f64).collect();
            let (_, p) = chi_square_gof(&observed, &expected);
            assert!(p > 0.01, "exact={exact} p={p}");
        }
    }

    #[test]
    fn spine_position_is_uniform() {
        let (spec, bd) = with_offspring(OffspringLaw::Deterministic { n: 3 });
        let pos = run_replicas(Streams::new(6), 9000, 1, |_, rng| {
            Ok(sample_biased_generation(x0().coords(), 0.0, &spec, &bd, &One, rng)?.spine)
        })
        .unwrap();
        let observed: Vec<f64> = (0..3).map(|k| pos.iter().filter(|p| **p == k).count() as f64).collect();
        let (_, p) = chi_square_gof(&observed, &[3000.0; 3]);
        assert!(p > 0.01);
    }

    #[test]
    fn rejection_needs_bounded_offspring() {
        let (spec, bd) = calibrated(OffspringLaw::Poisson { mean: 1.5 });
        let mut rng = Streams::new(7).stream(0);
        let err = sample_biased_generation_rejection(x0().coords(), 0.0, &spec, &bd, &One, &mut rng).unwrap_err();
        assert!(err.to_string().contains("infinite"));
    }

    #[test]
    fn spinal_tree_structure() {
        let (spec, bd) = calibrated(OffspringLaw::FiniteSupport { support: vec![(1, 0.5), (2, 0.5)] });
        let mut rng = Streams::new(8).stream(0);
        let mut pops = Vec::new();
        let path = simulate_with_spine(&x0(), 0.0, &spec, &bd, &One, 6, Caps::default(), &mut rng, |snap, spine| {
            assert!(spine < snap.population());
            pops.push(snap.population());
            Ok(())
        })
        .unwrap();
        assert_eq!(path.steps.len(), 6);
        for st in &path.steps {
            assert!(st.child_index >= 1 && st.child_index <= st.count);
            assert_eq!(st.siblings.len(), st.count - 1);
        }
        assert_eq!(path.to_jsonl().lines().count(), 6);
        // Depth 1: the family is the whole first generation.
        assert_eq!(pops[1], path.steps[0].count);
    }

    #[test]
    fn exact_many_to_one_at_one_step() {
        let (spec, bd) = calibrated(OffspringLaw::Poisson { mean: 1.3 });
        for data in [&bd.spectral] {
            let f = |_: &[f64], s: f64, _: f64| f64::from(s >= 0.1) + s.sin();
            let (l, r) = many_to_one_exact(&spec, data, x0().coords(), 0.1, &f);
            assert!((l - r).abs() < 1e-12 * l.abs().max(1.0), "{l} {r}");
        }
    }

    #[test]
    fn many_to_one_two_steps() {
        let (spec, bd) = calibrated(OffspringLaw::FiniteSupport { support: vec![(1, 0.5), (2, 0.5)] });
        let one = |_: &[f64], _: f64, _: f64| 1.0;
        let rep = verify_many_to_one(&spec, &bd.spectral, &x0(), 0.0, 2, "one", &one, 20000, Streams::new(9), 1).unwrap();
        assert!(rep.pass, "{rep:?}");
    }

    #[test]
    fn spine_path_matches_tilted_chain() {
        let (spec, bd) = calibrated(OffspringLaw::FiniteSupport { support: vec![(1, 0.9), (2, 0.1)] });
        let (a, b) = spine_vs_chain(&spec, &bd, &x0(), 0.0, &[5, 20], 3000, Streams::new(10), 1).unwrap();
        for k in 0..2 {
            assert!(ks_two_sample(&a[k], &b[k]).p_value > 0.01);
        }
    }

    #[test]
    fn spinal_battery_agrees_with_reweighting() {
        let (spec, bd) = calibrated(OffspringLaw::FiniteSupport { support: vec![(0, 0.1), (1, 0.5), (2, 0.4)] });
        let reps = verify_spinal_measure(&spec, &bd, &x0(), 0.0, &HarmonicEvaluator::one(), 3, 20000, Streams::new(11), 1)
            .unwrap();
        assert_eq!(reps.len(), 8);
        for r in &reps {
            assert!(r.pass, "{r:?}");
        }
        assert_eq!(reps[0].lhs, 1.0);
    }

    #[test]
    fn exchangeability_enumeration_and_trees_agree() {
        let (spec, _) = calibrated(OffspringLaw::FiniteSupport { support: vec![(1, 0.5), (2, 0.5)] });
        let f = |g: &[&PosMatrix]| g[0].get(0, 0) * g[g.len() - 1].get(0, 1).powi(2) + g[1].get(1, 0);
        let atoms = spec.intensity().atoms;
        let mut by_hand = 0.0;
        for (a, p) in &atoms {
            for (b, q) in &atoms {
                by_hand += p * q * f(&[a, b]);
            }
        }
        assert!((exchangeability_exact(&spec, 2, &f) - by_hand).abs() < 1e-12);
        for n in [2, 3] {
            let rep = verify_exchangeability(&spec, &x0(), n, "poly", &f, 20000, Streams::new(20 + n as u64), 1).unwrap();
            for c in [&rep.forward, &rep.reversed, &rep.forward_vs_reversed] {
                assert_eq!(c.verdict, crate::stats::Verdict::Pass, "{c:?}");
            }
        }
    }
}
