//! Forward simulation of the branching random walk and the martingale
//! functionals evaluated on its generations.
//!
//! A particle `u` carries its direction `X_u`, position `S_u`, the minimum of
//! `S` along its ancestral line (root included) and the same minimum taken
//! only over generations `≥ k`. Children follow `S_child = S_parent − σ(g, X)`
//! and `X_child = g·X`.

use std::fmt::Write as _;

use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::cone::{act_in_place, Direction, PosMatrix};
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::rng::{run_replicas, Rng, Streams};
use crate::spectral::{BoundaryData, SpectralData};
use crate::stats::Estimate;

pub const DEFAULT_PARTICLE_CAP: usize = 2_000_000;

/// Drop particles whose weight `e^{−αS}(1 + S⁺)` falls below `eps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prune {
    pub alpha: f64,
    pub eps: f64,
}

impl Prune {
    pub fn weight(&self, s: f64) -> f64 {
        (-self.alpha * s).exp() * (1.0 + s.max(0.0))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Caps {
    pub max_particles: usize,
    pub prune: Option<Prune>,
    /// Keep Ulam-Harris labels and atom sequences. Only sensible for small
    /// depths.
    pub track_paths: bool,
    /// First generation counted by the suffix minimum.
    pub suffix_from: usize,
}

impl Default for Caps {
    fn default() -> Self {
        Caps {
            max_particles: DEFAULT_PARTICLE_CAP,
            prune: None,
            track_paths: false,
            suffix_from: 0,
        }
    }
}

/// One generation of particles, stored column-wise.
#[derive(Clone, Debug, Default)]
pub struct Particles {
    pub d: usize,
    pub x: Vec<f64>,
    pub s: Vec<f64>,
    pub min_s: Vec<f64>,
    pub min_s_suffix: Vec<f64>,
    /// Index of the parent in the previous generation.
    pub parent: Vec<u32>,
    /// Atom of the edge into the particle; `u32::MAX` at the root.
    pub atom: Vec<u32>,
    pub labels: Option<Vec<Vec<u32>>>,
    pub atom_paths: Option<Vec<Vec<u32>>>,
}

/// Borrowed view of one particle.
#[derive(Clone, Copy, Debug)]
pub struct ParticleRecord<'a> {
    pub label: Option<&'a [u32]>,
    pub x: &'a [f64],
    pub s: f64,
    pub min_s_prefix: f64,
    /// `+∞` until the suffix window opens.
    pub min_s_suffix_from_k: f64,
}

impl Particles {
    fn new(d: usize, track: bool) -> Self {
        Particles {
            d,
            labels: track.then(Vec::new),
            atom_paths: track.then(Vec::new),
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    pub fn record(&self, i: usize) -> ParticleRecord<'_> {
        ParticleRecord {
            label: self.labels.as_ref().map(|l| l[i].as_slice()),
            x: self.x(i),
            s: self.s[i],
            min_s_prefix: self.min_s[i],
            min_s_suffix_from_k: self.min_s_suffix[i],
        }
    }

    fn clear(&mut self) {
        self.x.clear();
        self.s.clear();
        self.min_s.clear();
        self.min_s_suffix.clear();
        self.parent.clear();
        self.atom.clear();
        if let Some(l) = self.labels.as_mut() {
            l.clear();
        }
        if let Some(a) = self.atom_paths.as_mut() {
            a.clear();
        }
    }

    fn push_root(&mut self, x0: &[f64], b0: f64, suffix_open: bool) {
        self.x.extend_from_slice(x0);
        self.s.push(b0);
        self.min_s.push(b0);
        self.min_s_suffix.push(if suffix_open { b0 } else { f64::INFINITY });
        self.parent.push(u32::MAX);
        self.atom.push(u32::MAX);
        if let Some(l) = self.labels.as_mut() {
            l.push(Vec::new());
        }
        if let Some(a) = self.atom_paths.as_mut() {
            a.push(Vec::new());
        }
    }

    /// Appends the child `g·X_i` of particle `i` of `from`, with child index
    /// `child` (1-based).
    pub(crate) fn push_child(
        &mut self,
        from: &Particles,
        i: usize,
        g: &PosMatrix,
        atom: usize,
        child: u32,
        suffix_open: bool,
    ) {
        let d = self.d;
        let start = self.x.len();
        self.x.resize(start + d, 0.0);
        let sigma = act_in_place(g, from.x(i), &mut self.x[start..start + d]);
        let s = from.s[i] - sigma;
        self.s.push(s);
        self.min_s.push(from.min_s[i].min(s));
        self.min_s_suffix.push(if suffix_open { from.min_s_suffix[i].min(s) } else { f64::INFINITY });
        self.parent.push(i as u32);
        self.atom.push(atom as u32);
        if let (Some(l), Some(pl)) = (self.labels.as_mut(), from.labels.as_ref()) {
            let mut label = pl[i].clone();
            label.push(child);
            l.push(label);
        }
        if let (Some(a), Some(pa)) = (self.atom_paths.as_mut(), from.atom_paths.as_ref()) {
            let mut path = pa[i].clone();
            path.push(atom as u32);
            a.push(path);
        }
    }

    fn pop(&mut self) {
        let n = self.s.len() - 1;
        self.x.truncate(n * self.d);
        self.s.truncate(n);
        self.min_s.truncate(n);
        self.min_s_suffix.truncate(n);
        self.parent.truncate(n);
        self.atom.truncate(n);
        if let Some(l) = self.labels.as_mut() {
            l.truncate(n);
        }
        if let Some(a) = self.atom_paths.as_mut() {
            a.truncate(n);
        }
    }
}

#[derive(Clone, Debug)]
pub struct GenerationSnapshot {
    pub n: usize,
    pub particles: Particles,
    /// Particles removed by pruning so far, and their summed weight.
    pub pruned_count: u64,
    pub pruned_mass: f64,
}

impl GenerationSnapshot {
    pub fn survived(&self) -> bool {
        !self.particles.is_empty()
    }

    pub fn population(&self) -> usize {
        self.particles.len()
    }

    pub fn min_s(&self) -> f64 {
        self.particles.s.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Sampling tables shared by the forward simulators.
#[derive(Clone, Debug)]
pub(crate) struct Sampler {
    pub atoms: Vec<PosMatrix>,
    cumulative: Vec<f64>,
}

impl Sampler {
    pub fn new(spec: &ModelSpec) -> Self {
        let mut acc = 0.0;
        let cumulative = spec
            .atoms
            .iter()
            .map(|a| {
                acc += a.weight;
                acc
            })
            .collect();
        Sampler {
            atoms: spec.scaled_atoms(),
            cumulative,
        }
    }

    pub fn atom(&self, rng: &mut Rng) -> usize {
        let u: f64 = rng.random::<f64>() * self.cumulative[self.cumulative.len() - 1];
        self.cumulative.iter().position(|c| u < *c).unwrap_or(self.atoms.len() - 1)
    }
}

/// Breadth-first simulation under `P_{x,b}`, one generation at a time.
/// Only the current generation is held in memory.
pub struct TreeSim<'a> {
    spec: &'a ModelSpec,
    sampler: Sampler,
    caps: Caps,
    depth: usize,
    current: GenerationSnapshot,
    next: Particles,
}

impl<'a> TreeSim<'a> {
    pub fn new(spec: &'a ModelSpec, x0: &Direction, b0: f64, depth: usize, caps: Caps) -> Result<Self> {
        if x0.d() != spec.d {
            return Err(Error::Domain(format!(
                "start direction has dimension {}, model has {}",
                x0.d(),
                spec.d
            )));
        }
        let mut root = Particles::new(spec.d, caps.track_paths);
        root.push_root(x0.coords(), b0, caps.suffix_from == 0);
        Ok(TreeSim {
            spec,
            sampler: Sampler::new(spec),
            next: Particles::new(spec.d, caps.track_paths),
            caps,
            depth,
            current: GenerationSnapshot {
                n: 0,
                particles: root,
                pruned_count: 0,
                pruned_mass: 0.0,
            },
        })
    }

    pub fn current(&self) -> &GenerationSnapshot {
        &self.current
    }

    /// Moves to the next generation; `Ok(false)` once `depth` is reached.
    pub fn advance(&mut self, rng: &mut Rng) -> Result<bool> {
        if self.current.n >= self.depth {
            return Ok(false);
        }
        let n_next = self.current.n + 1;
        let open = n_next >= self.caps.suffix_from;
        let parents = &self.current.particles;
        self.next.clear();
        for i in 0..parents.len() {
            let count = self.spec.offspring.sample(rng)?;
            if self.next.len() + count > self.caps.max_particles {
                return Err(Error::Cap(format!(
                    "generation {n_next}: population exceeds the cap of {} particles",
                    self.caps.max_particles
                )));
            }
            for c in 0..count {
                let j = self.sampler.atom(rng);
                self.next.push_child(parents, i, &self.sampler.atoms[j], j, c as u32 + 1, open);
                if let Some(p) = self.caps.prune {
                    let w = p.weight(*self.next.s.last().unwrap());
                    if w < p.eps {
                        self.current.pruned_count += 1;
                        self.current.pruned_mass += w;
                        self.next.pop();
                    }
                }
            }
        }
        std::mem::swap(&mut self.current.particles, &mut self.next);
        self.current.n = n_next;
        Ok(true)
    }
}

/// Runs the tree to `depth`, showing every generation (including the root)
/// to `visit`.
pub fn simulate_tree(
    spec: &ModelSpec,
    x0: &Direction,
    b0: f64,
    depth: usize,
    caps: Caps,
    rng: &mut Rng,
    mut visit: impl FnMut(&GenerationSnapshot) -> Result<()>,
) -> Result<()> {
    let mut sim = TreeSim::new(spec, x0, b0, depth, caps)?;
    visit(sim.current())?;
    while sim.advance(rng)? {
        visit(sim.current())?;
    }
    Ok(())
}

/// `W_n(s) = m(s)^{−n} Σ_{|u|=n} e^{−sS_u} r_s(X_u)`.
pub fn additive_martingale(snap: &GenerationSnapshot, data: &SpectralData) -> f64 {
    let p = &snap.particles;
    let total: f64 = (0..p.len())
        .map(|i| (-data.s * p.s[i]).exp() * data.r_at(p.x(i)))
        .sum();
    total / data.m_s.powi(snap.n as i32)
}

/// `D_n = Σ_{|u|=n} (S_u + ℓ_α(X_u)) e^{−αS_u} r_α(X_u)`.
pub fn derivative_martingale(snap: &GenerationSnapshot, bd: &BoundaryData) -> f64 {
    let p = &snap.particles;
    (0..p.len())
        .map(|i| {
            let (r, r_ell) = bd.r_and_r_ell(p.x(i));
            (p.s[i] * r + r_ell) * (-bd.alpha * p.s[i]).exp()
        })
        .sum()
}

/// `(W̃_n, W̃̃_{n,k})`: the boundary additive martingale restricted to
/// particles whose ancestral positions stayed `≥ 0`, over the whole line and
/// over generations `≥ k` respectively.
pub fn truncated_martingales(snap: &GenerationSnapshot, bd: &BoundaryData) -> (f64, f64) {
    let p = &snap.particles;
    let mut wt = 0.0;
    let mut wtt = 0.0;
    for i in 0..p.len() {
        let term = (-bd.alpha * p.s[i]).exp() * bd.r(p.x(i));
        if p.min_s[i] >= 0.0 {
            wt += term;
        }
        if p.min_s_suffix[i] >= 0.0 {
            wtt += term;
        }
    }
    (wt, wtt)
}

/// A positive function `h(x, y)` harmonic for the tilted walk killed on
/// leaving `[lower, ∞)`.
pub trait Harmonic: Sync {
    fn h(&self, x: &[f64], y: f64) -> f64;
    fn lower(&self) -> f64;
}

/// `h ≡ 1` on the whole line.
#[derive(Clone, Copy, Debug, Default)]
pub struct One;

impl Harmonic for One {
    fn h(&self, _: &[f64], _: f64) -> f64 {
        1.0
    }
    fn lower(&self) -> f64 {
        f64::NEG_INFINITY
    }
}

/// `H_α(x, s) = r_α(x) h(x, s) e^{−αs}`.
pub fn big_h(bd: &BoundaryData, h: &dyn Harmonic, x: &[f64], s: f64) -> f64 {
    bd.r(x) * h.h(x, s) * (-bd.alpha * s).exp()
}

/// `M_n^h = Σ_{|u|=n} H_α(X_u, S_u) 1{S_{u|k} ≥ lower, 0 ≤ k ≤ n}`.
pub fn h_martingale(snap: &GenerationSnapshot, bd: &BoundaryData, h: &dyn Harmonic) -> f64 {
    let p = &snap.particles;
    let lower = h.lower();
    (0..p.len())
        .filter(|&i| p.min_s[i] >= lower)
        .map(|i| big_h(bd, h, p.x(i), p.s[i]))
        .sum()
}

/// Which functionals to record along a tree.
#[derive(Clone, Copy)]
pub struct Functionals<'a> {
    /// Eigen-data for each `W_n(s)`.
    pub additive: &'a [SpectralData],
    pub boundary: Option<&'a BoundaryData>,
    pub harmonic: Option<&'a dyn Harmonic>,
    /// Generations to record; every generation when `None`.
    pub at: Option<&'a [usize]>,
}

impl<'a> Functionals<'a> {
    pub fn new(additive: &'a [SpectralData], boundary: Option<&'a BoundaryData>) -> Self {
        Functionals {
            additive,
            boundary,
            harmonic: None,
            at: None,
        }
    }

    fn wants(&self, n: usize) -> bool {
        self.at.is_none_or(|at| at.contains(&n))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub n: usize,
    pub population: usize,
    pub w: Vec<f64>,
    pub d: Option<f64>,
    pub m_h: Option<f64>,
    pub w_tilde: Option<f64>,
    pub w_tilde_tilde: Option<f64>,
    pub min_s: f64,
    pub pruned_mass: f64,
}

/// Per-generation values of the requested functionals for one tree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MartingaleSeries {
    pub s_values: Vec<f64>,
    pub k: usize,
    pub rows: Vec<SeriesRow>,
}

impl MartingaleSeries {
    /// The recorded row of generation `n`.
    pub fn row(&self, n: usize) -> Option<&SeriesRow> {
        self.rows.iter().find(|r| r.n == n)
    }

    /// `(name, value)` pairs of the `i`-th recorded row, in a fixed order.
    pub fn named(&self, i: usize) -> Vec<(String, f64)> {
        let row = &self.rows[i];
        let mut out: Vec<(String, f64)> = self
            .s_values
            .iter()
            .zip(&row.w)
            .map(|(s, w)| (format!("W({s})"), *w))
            .collect();
        let opt = [
            ("D".to_string(), row.d),
            ("M_h".to_string(), row.m_h),
            ("W_tilde".to_string(), row.w_tilde),
            (format!("W_tilde_tilde_{}", self.k), row.w_tilde_tilde),
        ];
        for (name, v) in opt {
            if let Some(v) = v {
                out.push((name, v));
            }
        }
        out
    }

    /// Alive at the last recorded generation.
    pub fn survived(&self) -> bool {
        self.rows.last().is_some_and(|r| r.population > 0)
    }
}

/// Records the requested functionals at every generation `0..=depth`.
pub fn simulate_series(
    spec: &ModelSpec,
    x0: &Direction,
    b0: f64,
    depth: usize,
    funcs: Functionals<'_>,
    caps: Caps,
    rng: &mut Rng,
) -> Result<MartingaleSeries> {
    let k = caps.suffix_from;
    let mut rows = Vec::with_capacity(depth + 1);
    simulate_tree(spec, x0, b0, depth, caps, rng, |snap| {
        if !funcs.wants(snap.n) {
            return Ok(());
        }
        let (w_tilde, w_tilde_tilde) = match funcs.boundary {
            Some(bd) => {
                let (a, b) = truncated_martingales(snap, bd);
                (Some(a), Some(b))
            }
            None => (None, None),
        };
        rows.push(SeriesRow {
            n: snap.n,
            population: snap.population(),
            w: funcs.additive.iter().map(|d| additive_martingale(snap, d)).collect(),
            d: funcs.boundary.map(|bd| derivative_martingale(snap, bd)),
            m_h: match (funcs.boundary, funcs.harmonic) {
                (Some(bd), Some(h)) => Some(h_martingale(snap, bd, h)),
                _ => None,
            },
            w_tilde,
            w_tilde_tilde,
            min_s: snap.min_s(),
            pruned_mass: snap.pruned_mass,
        });
        Ok(())
    })?;
    Ok(MartingaleSeries {
        s_values: funcs.additive.iter().map(|d| d.s).collect(),
        k,
        rows,
    })
}

/// Independent trees, one rng stream per replica.
#[allow(clippy::too_many_arguments)]
pub fn run_series(
    spec: &ModelSpec,
    x0: &Direction,
    b0: f64,
    depth: usize,
    funcs: Functionals<'_>,
    caps: &Caps,
    streams: Streams,
    replicas: usize,
    threads: usize,
) -> Result<Vec<MartingaleSeries>> {
    if spec.mean_offspring() < 1.0 {
        return Err(Error::config(
            "offspring",
            format!("E N = {} < 1: the tree dies out almost surely", spec.mean_offspring()),
        ));
    }
    run_replicas(streams, replicas, threads, |_, rng| {
        simulate_series(spec, x0, b0, depth, funcs, caps.clone(), rng)
    })
}

/// Mean and standard error of one functional at one depth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub n: usize,
    pub name: String,
    pub mean: f64,
    pub se: f64,
    pub replicas: usize,
}

pub fn summarize(series: &[MartingaleSeries], seed: u64) -> Vec<SummaryRow> {
    let Some(first) = series.first() else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for i in 0..first.rows.len() {
        let n = first.rows[i].n;
        let names = first.named(i);
        for (k, (name, _)) in names.iter().enumerate() {
            let xs: Vec<f64> = series.iter().map(|s| s.named(i)[k].1).collect();
            let e = Estimate::from_samples(&xs, seed);
            out.push(SummaryRow {
                n,
                name: name.clone(),
                mean: e.value,
                se: e.se,
                replicas: e.replicas,
            });
        }
        let pops: Vec<f64> = series.iter().map(|s| s.rows[i].population as f64).collect();
        let e = Estimate::from_samples(&pops, seed);
        out.push(SummaryRow {
            n,
            name: "population".into(),
            mean: e.value,
            se: e.se,
            replicas: e.replicas,
        });
    }
    out
}

/// One row per (replica, generation, functional).
pub fn series_csv(series: &[MartingaleSeries]) -> String {
    let mut out = String::from("replica,n,name,value,population\n");
    for (rep, s) in series.iter().enumerate() {
        for (i, row) in s.rows.iter().enumerate() {
            for (name, v) in s.named(i) {
                let _ = writeln!(out, "{rep},{},{name},{v},{}", row.n, row.population);
            }
        }
    }
    out
}
