//! Positive-cone primitives: 1-norms, the projective action `g·x = gx/‖gx‖`,
//! the norm cocycle `σ(g, x) = log ‖gx‖` and the Furstenberg–Kesten constants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for a direction to count as lying on the 1-norm sphere.
pub const DIRECTION_TOL: f64 = 1e-12;

/// Floor applied to κ when every atom has equal entries.
pub const KAPPA_FLOOR: f64 = 1.0 + 1e-9;

/// A nonnegative, allowable d×d matrix stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct PosMatrix {
    d: usize,
    entries: Vec<f64>,
}

impl PosMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let d = rows.len();
        if d < 2 {
            return Err(Error::Domain(format!("dimension must be at least 2, got {d}")));
        }
        let mut entries = Vec::with_capacity(d * d);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != d {
                return Err(Error::Domain(format!(
                    "row {i} has {} entries, expected {d}",
                    row.len()
                )));
            }
            entries.extend(row);
        }
        Self::from_row_major(d, entries)
    }

    pub fn from_row_major(d: usize, entries: Vec<f64>) -> Result<Self> {
        if d < 2 || entries.len() != d * d {
            return Err(Error::Domain(format!(
                "expected {d}x{d} entries, got {}",
                entries.len()
            )));
        }
        if let Some(k) = entries.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Domain(format!(
                "entry ({}, {}) = {} is not a finite nonnegative number",
                k / d,
                k % d,
                entries[k]
            )));
        }
        let m = PosMatrix { d, entries };
        for i in 0..d {
            if (0..d).all(|j| m.get(i, j) == 0.0) {
                return Err(Error::Domain(format!("row {i} is zero; matrix is not allowable")));
            }
            if (0..d).all(|j| m.get(j, i) == 0.0) {
                return Err(Error::Domain(format!("column {i} is zero; matrix is not allowable")));
            }
        }
        Ok(m)
    }

    pub fn identity(d: usize) -> Self {
        let mut entries = vec![0.0; d * d];
        for i in 0..d {
            entries[i * d + i] = 1.0;
        }
        PosMatrix { d, entries }
    }

    /// `c` times the all-ones matrix.
    pub fn constant(d: usize, c: f64) -> Self {
        PosMatrix {
            d,
            entries: vec![c; d * d],
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.d + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.entries.chunks(self.d).map(<[f64]>::to_vec).collect()
    }

    pub fn is_strictly_positive(&self) -> bool {
        self.entries.iter().all(|&v| v > 0.0)
    }

    pub fn transpose(&self) -> Self {
        let d = self.d;
        let mut entries = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                entries[j * d + i] = self.get(i, j);
            }
        }
        PosMatrix { d, entries }
    }

    pub fn scaled(&self, c: f64) -> Self {
        PosMatrix {
            d: self.d,
            entries: self.entries.iter().map(|v| v * c).collect(),
        }
    }

    /// Matrix product `self · rhs`.
    pub fn mul(&self, rhs: &PosMatrix) -> Self {
        let d = self.d;
        assert_eq!(d, rhs.d, "dimension mismatch");
        let mut entries = vec![0.0; d * d];
        for i in 0..d {
            for k in 0..d {
                let a = self.get(i, k);
                for j in 0..d {
                    entries[i * d + j] += a * rhs.get(k, j);
                }
            }
        }
        PosMatrix { d, entries }
    }

    /// `out = self · x`.
    #[inline]
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        let d = self.d;
        for (i, o) in out.iter_mut().enumerate().take(d) {
            let row = &self.entries[i * d..(i + 1) * d];
            *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }

    fn column_sums(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.d).map(move |j| (0..self.d).map(|i| self.get(i, j)).sum())
    }

    /// Operator norm for the 1-norm on the cone: the largest column sum.
    pub fn op_norm(&self) -> f64 {
        self.column_sums().fold(f64::MIN, f64::max)
    }

    /// Smallest column sum, `inf ‖gv‖/‖v‖` over the cone.
    pub fn iota(&self) -> f64 {
        self.column_sums().fold(f64::MAX, f64::min)
    }

    /// Largest entry over smallest entry; infinite when an entry vanishes.
    pub fn entry_ratio(&self) -> f64 {
        let max = self.entries.iter().copied().fold(f64::MIN, f64::max);
        let min = self.entries.iter().copied().fold(f64::MAX, f64::min);
        if min > 0.0 {
            max / min
        } else {
            f64::INFINITY
        }
    }

    /// Perron root by power iteration on the cone.
    pub fn perron_root(&self) -> f64 {
        let d = self.d;
        let mut x = vec![1.0 / d as f64; d];
        let mut y = vec![0.0; d];
        let mut root = 0.0;
        for _ in 0..100_000 {
            let next = act_in_place(self, &x, &mut y).exp();
            std::mem::swap(&mut x, &mut y);
            // Both the norm ratio and the direction have to settle; for
            // matrices with a nontrivial Jordan-free spectrum this is fast.
            let moved: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).sum();
            if (next - root).abs() <= 1e-15 * next && moved <= 1e-15 {
                return next;
            }
            root = next;
        }
        root
    }
}

impl TryFrom<Vec<Vec<f64>>> for PosMatrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        PosMatrix::new(rows)
    }
}

impl From<PosMatrix> for Vec<Vec<f64>> {
    fn from(m: PosMatrix) -> Self {
        m.rows()
    }
}

/// A point of the simplex `{x ≥ 0 : Σ x_i = 1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Direction(Vec<f64>);

impl Direction {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.len() < 2 {
            return Err(Error::Domain("a direction needs at least two coordinates".into()));
        }
        if coords.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::Domain(format!("direction {coords:?} leaves the cone")));
        }
        let sum: f64 = coords.iter().sum();
        if (sum - 1.0).abs() > DIRECTION_TOL {
            return Err(Error::Domain(format!("direction {coords:?} sums to {sum}, not 1")));
        }
        Ok(Direction(coords))
    }

    /// Rescale a nonzero cone vector onto the simplex.
    pub fn normalize(v: &[f64]) -> Result<Self> {
        let s = norm1(v);
        if v.iter().any(|c| *c < 0.0) || !(s > 0.0 && s.is_finite()) {
            return Err(Error::Domain(format!("{v:?} is not a nonzero cone vector")));
        }
        Ok(Direction(v.iter().map(|c| c / s).collect()))
    }

    /// The barycentre `(1/d, …, 1/d)`.
    pub fn uniform(d: usize) -> Self {
        Direction(vec![1.0 / d as f64; d])
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn d(&self) -> usize {
        self.0.len()
    }
}

pub fn norm1(v: &[f64]) -> f64 {
    v.iter().map(|c| c.abs()).sum()
}

fn ensure_allowable(g: &PosMatrix) -> Result<()> {
    // Constructors enforce allowability; a zero column sum can only appear
    // through underflow of a scaled matrix.
    if g.iota() > 0.0 {
        Ok(())
    } else {
        Err(Error::Domain("matrix has a vanishing column".into()))
    }
}

pub fn op_norm(g: &PosMatrix) -> Result<f64> {
    ensure_allowable(g)?;
    Ok(g.op_norm())
}

pub fn iota(g: &PosMatrix) -> Result<f64> {
    ensure_allowable(g)?;
    Ok(g.iota())
}

/// Projective action `g·x`.
pub fn act(g: &PosMatrix, x: &Direction) -> Result<Direction> {
    check_dims(g, x)?;
    let mut out = vec![0.0; g.d()];
    let sigma = act_in_place(g, x.coords(), &mut out);
    if !sigma.is_finite() {
        return Err(Error::Invariant("gx vanished for an allowable g".into()));
    }
    Ok(Direction(out))
}

/// Norm cocycle `σ(g, x) = log ‖gx‖`.
pub fn cocycle(g: &PosMatrix, x: &Direction) -> Result<f64> {
    check_dims(g, x)?;
    let mut out = vec![0.0; g.d()];
    g.apply(x.coords(), &mut out);
    Ok(norm1(&out).ln())
}

fn check_dims(g: &PosMatrix, x: &Direction) -> Result<()> {
    if g.d() != x.d() {
        return Err(Error::Domain(format!(
            "matrix of dimension {} applied to direction of dimension {}",
            g.d(),
            x.d()
        )));
    }
    ensure_allowable(g)
}

/// Writes `g·x` into `out` and returns `σ(g, x)`. The hot path of every
/// simulator; `x` is assumed to be a valid direction.
#[inline]
pub fn act_in_place(g: &PosMatrix, x: &[f64], out: &mut [f64]) -> f64 {
    g.apply(x, out);
    let s: f64 = out.iter().sum();
    let inv = 1.0 / s;
    for o in out.iter_mut() {
        *o *= inv;
    }
    s.ln()
}

/// Hilbert projective distance between two interior directions.
pub fn hilbert_distance(x: &[f64], y: &[f64]) -> f64 {
    let mut hi = f64::MIN;
    let mut lo = f64::MAX;
    for (a, b) in x.iter().zip(y) {
        let r = a / b;
        hi = hi.max(r);
        lo = lo.min(r);
    }
    (hi / lo).ln()
}

/// Constants controlling norm comparability and cocycle oscillation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FkConstants {
    pub kappa: f64,
    pub kappa_bar: f64,
    pub c0: f64,
    pub c1: f64,
}

impl FkConstants {
    pub fn from_kappa(kappa: f64, d: usize) -> Self {
        let kappa = kappa.max(KAPPA_FLOOR);
        let kappa_bar = 2.0 * kappa.ln();
        // Column sums of a positive matrix differ by at most the largest
        // within-row entry ratio, so log ‖gx‖ oscillates by at most log κ.
        let c0 = kappa.ln();
        FkConstants {
            kappa,
            kappa_bar,
            c0,
            c1: c0 + kappa_bar + (d as f64).ln(),
        }
    }
}

/// κ is the largest entry ratio over the atoms, `κ̄ = 2 log κ`, `c0 = log κ`.
pub fn fk_constants(atoms: &[PosMatrix], d: usize) -> Result<FkConstants> {
    let mut kappa: f64 = 1.0;
    for (j, a) in atoms.iter().enumerate() {
        if a.d() != d {
            return Err(Error::Domain(format!("atom {j} has dimension {}, expected {d}", a.d())));
        }
        if !a.is_strictly_positive() {
            return Err(Error::Domain(format!(
                "condition A1* violated: atom {j} has a zero entry"
            )));
        }
        kappa = kappa.max(a.entry_ratio());
    }
    Ok(FkConstants::from_kappa(kappa, d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> PosMatrix {
        PosMatrix::new(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    fn dir(c: &[f64]) -> Direction {
        Direction::new(c.to_vec()).unwrap()
    }

    #[test]
    fn norms_of_small_matrices() {
        let g = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(op_norm(&g).unwrap(), 6.0);
        assert_eq!(iota(&g).unwrap(), 4.0);
        assert_eq!(op_norm(&PosMatrix::identity(2)).unwrap(), 1.0);
        assert_eq!(iota(&PosMatrix::identity(2)).unwrap(), 1.0);
        assert_eq!(op_norm(&PosMatrix::constant(2, 0.7)).unwrap(), 1.4);
    }

    #[test]
    fn action_and_cocycle_examples() {
        let g = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let e1 = dir(&[1.0, 0.0]);
        assert_eq!(act(&g, &e1).unwrap().coords(), &[0.25, 0.75]);
        assert_abs_diff_eq!(cocycle(&g, &e1).unwrap(), 4f64.ln(), epsilon = 1e-15);

        let x = dir(&[0.3, 0.7]);
        assert_eq!(act(&PosMatrix::identity(2), &x).unwrap(), x);
        assert_eq!(cocycle(&PosMatrix::identity(2), &x).unwrap(), 0.0);

        let j = PosMatrix::constant(2, 1.0);
        assert_eq!(act(&j, &x).unwrap().coords(), &[0.5, 0.5]);
        assert_abs_diff_eq!(
            cocycle(&PosMatrix::constant(2, 2.0), &x).unwrap(),
            4f64.ln(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn fk_constants_examples() {
        let fk = fk_constants(&[m(&[&[1.0, 2.0], &[2.0, 4.0]])], 2).unwrap();
        assert_abs_diff_eq!(fk.kappa, 4.0);
        assert_abs_diff_eq!(fk.kappa_bar, 2.0 * 4f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(fk.c1, 3.0 * 4f64.ln() + 2f64.ln(), epsilon = 1e-14);

        let flat = fk_constants(&[PosMatrix::constant(2, 1.0)], 2).unwrap();
        assert_eq!(flat.kappa, KAPPA_FLOOR);
        assert!(flat.c0 > 0.0 && flat.c0 < 1e-8);

        let err = fk_constants(&[m(&[&[1.0, 0.0], &[0.0, 1.0]])], 2).unwrap_err();
        assert!(err.to_string().contains("A1* violated"));
    }

    #[test]
    fn rejects_non_allowable_and_bad_directions() {
        assert!(PosMatrix::new(vec![vec![1.0, 1.0], vec![0.0, 0.0]]).is_err());
        assert!(PosMatrix::new(vec![vec![1.0, 0.0], vec![1.0, 0.0]]).is_err());
        assert!(PosMatrix::new(vec![vec![1.0, -1.0], vec![1.0, 1.0]]).is_err());
        assert!(Direction::new(vec![0.5, 0.6]).is_err());
        assert!(Direction::new(vec![1.5, -0.5]).is_err());
    }

    #[test]
    fn perron_root_of_known_matrix() {
        // [[2,1],[1,1]] has eigenvalues (3 ± √5)/2.
        let g = m(&[&[2.0, 1.0], &[1.0, 1.0]]);
        assert_abs_diff_eq!(g.perron_root(), (3.0 + 5f64.sqrt()) / 2.0, epsilon = 1e-13);
    }

    fn positive_matrix(d: usize) -> impl Strategy<Value = PosMatrix> {
        prop::collection::vec(0.05f64..5.0, d * d)
            .prop_map(move |e| PosMatrix::from_row_major(d, e).unwrap())
    }

    fn direction(d: usize) -> impl Strategy<Value = Direction> {
        prop::collection::vec(0.0f64..1.0, d).prop_filter_map("zero vector", |v| {
            Direction::normalize(&v).ok()
        })
    }

    fn interior_direction(d: usize) -> impl Strategy<Value = Direction> {
        prop::collection::vec(0.01f64..1.0, d).prop_map(|v| Direction::normalize(&v).unwrap())
    }

    proptest! {
        #[test]
        fn cocycle_identity((g2, g1, x) in (2usize..6).prop_flat_map(|d| (positive_matrix(d), positive_matrix(d), direction(d)))) {
            let lhs = cocycle(&g2.mul(&g1), &x).unwrap();
            let rhs = cocycle(&g2, &act(&g1, &x).unwrap()).unwrap() + cocycle(&g1, &x).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-10);
        }

        #[test]
        fn norm_comparability((g, x) in (2usize..6).prop_flat_map(|d| (positive_matrix(d), direction(d)))) {
            let fk = fk_constants(std::slice::from_ref(&g), g.d()).unwrap();
            let v = cocycle(&g, &x).unwrap().exp();
            prop_assert!(v <= g.op_norm() * (1.0 + 1e-12));
            prop_assert!(v >= g.op_norm() / fk.kappa * (1.0 - 1e-12));
            prop_assert!(v >= g.op_norm() / fk.kappa.powi(2) * (1.0 - 1e-12));
            prop_assert!(g.iota() >= g.op_norm() / fk.kappa.powi(2) * (1.0 - 1e-12));
        }

        #[test]
        fn cocycle_oscillation_is_bounded_by_c0((g, x, y) in (2usize..6).prop_flat_map(|d| (positive_matrix(d), direction(d), direction(d)))) {
            let fk = fk_constants(std::slice::from_ref(&g), g.d()).unwrap();
            let gap = (cocycle(&g, &x).unwrap() - cocycle(&g, &y).unwrap()).abs();
            prop_assert!(gap <= fk.c0 + 1e-12);
        }

        #[test]
        fn action_stays_on_the_simplex((g, x) in (2usize..9).prop_flat_map(|d| (positive_matrix(d), direction(d)))) {
            let y = act(&g, &x).unwrap();
            prop_assert!((y.coords().iter().sum::<f64>() - 1.0).abs() < DIRECTION_TOL);
        }

        #[test]
        fn projective_contraction_in_the_plane(g in positive_matrix(2), x in interior_direction(2), y in interior_direction(2)) {
            // On d = 2 the Hilbert distance is the log cross-ratio
            // |log (x1 y2)/(x2 y1)|; positive matrices never increase it.
            let cross = |a: &[f64], b: &[f64]| ((a[0] * b[1]) / (a[1] * b[0])).ln().abs();
            let (gx, gy) = (act(&g, &x).unwrap(), act(&g, &y).unwrap());
            let before = cross(x.coords(), y.coords());
            let after = cross(gx.coords(), gy.coords());
            prop_assert!(after <= before + 1e-12);
            prop_assert!((hilbert_distance(x.coords(), y.coords()) - before).abs() < 1e-12);
        }

        #[test]
        fn long_products_do_not_drift(g in positive_matrix(3), x in direction(3)) {
            let g = g.scaled(1.0 / g.op_norm());
            let mut cur = x.coords().to_vec();
            let mut next = vec![0.0; 3];
            for _ in 0..10_000 {
                act_in_place(&g, &cur, &mut next);
                std::mem::swap(&mut cur, &mut next);
            }
            prop_assert!((cur.iter().sum::<f64>() - 1.0).abs() < DIRECTION_TOL);
        }
    }
}
