//! Discretization of the simplex: cell-centred nodes on the segment for
//! d = 2 and a barycentric triangle mesh for d = 3, both with
//! piecewise-linear interpolation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SEGMENT_NODES: usize = 512;
pub const DEFAULT_TRIANGLE_DIVISIONS: usize = 64;

/// Interpolation weights of a point: up to three nodes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stencil {
    pub idx: [u32; 3],
    pub w: [f64; 3],
    pub len: u8,
}

impl Stencil {
    #[inline]
    pub fn eval(&self, values: &[f64]) -> f64 {
        let mut s = 0.0;
        for k in 0..self.len as usize {
            s += self.w[k] * values[self.idx[k] as usize];
        }
        s
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.len as usize).map(move |k| (self.idx[k] as usize, self.w[k]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GridKind {
    /// `g` nodes at `t_i = (i + 1/2)/g`, direction `(t_i, 1 − t_i)`.
    Segment { g: usize },
    /// Nodes `(i/k, j/k, 1 − (i+j)/k)` for `i + j ≤ k`.
    Triangle { k: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "GridKind", try_from = "GridKind")]
pub struct DirectionGrid {
    kind: GridKind,
    d: usize,
    nodes: Vec<f64>,
    /// Start index of each `i`-row of the triangle mesh.
    row_start: Vec<usize>,
}

impl DirectionGrid {
    /// The default grid for dimension `d`, or one with resolution `size`
    /// (nodes for d = 2, divisions per edge for d = 3).
    pub fn new(d: usize, size: Option<usize>) -> Result<Self> {
        match d {
            2 => Self::from_kind(GridKind::Segment {
                g: size.unwrap_or(DEFAULT_SEGMENT_NODES),
            }),
            3 => Self::from_kind(GridKind::Triangle {
                k: size.unwrap_or(DEFAULT_TRIANGLE_DIVISIONS),
            }),
            _ => Err(Error::Domain(format!(
                "spectral computations support d = 2 or 3, got d = {d}"
            ))),
        }
    }

    pub fn from_kind(kind: GridKind) -> Result<Self> {
        match kind {
            GridKind::Segment { g } => {
                if g < 2 {
                    return Err(Error::Domain("a segment grid needs at least 2 nodes".into()));
                }
                let mut nodes = Vec::with_capacity(2 * g);
                for i in 0..g {
                    let t = (i as f64 + 0.5) / g as f64;
                    nodes.extend([t, 1.0 - t]);
                }
                Ok(DirectionGrid {
                    kind,
                    d: 2,
                    nodes,
                    row_start: Vec::new(),
                })
            }
            GridKind::Triangle { k } => {
                if k < 1 {
                    return Err(Error::Domain("a triangle mesh needs at least 1 division".into()));
                }
                let mut nodes = Vec::new();
                let mut row_start = Vec::with_capacity(k + 1);
                for i in 0..=k {
                    row_start.push(nodes.len() / 3);
                    for j in 0..=(k - i) {
                        let (a, b) = (i as f64 / k as f64, j as f64 / k as f64);
                        nodes.extend([a, b, ((k - i - j) as f64 / k as f64).max(0.0)]);
                    }
                }
                Ok(DirectionGrid {
                    kind,
                    d: 3,
                    nodes,
                    row_start,
                })
            }
        }
    }

    pub fn kind(&self) -> GridKind {
        self.kind
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Resolution parameter (`g` or `k`).
    pub fn size(&self) -> usize {
        match self.kind {
            GridKind::Segment { g } => g,
            GridKind::Triangle { k } => k,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.nodes[i * self.d..(i + 1) * self.d]
    }

    #[inline]
    pub fn stencil(&self, x: &[f64]) -> Stencil {
        match self.kind {
            GridKind::Segment { g } => {
                let u = (x[0] * g as f64 - 0.5).clamp(0.0, (g - 1) as f64);
                let i = (u.floor() as usize).min(g - 2);
                let f = u - i as f64;
                Stencil {
                    idx: [i as u32, i as u32 + 1, 0],
                    w: [1.0 - f, f, 0.0],
                    len: 2,
                }
            }
            GridKind::Triangle { k } => self.triangle_stencil(k, x),
        }
    }

    fn triangle_stencil(&self, k: usize, x: &[f64]) -> Stencil {
        let kf = k as f64;
        let u = (x[0] * kf).clamp(0.0, kf);
        let v = (x[1] * kf).clamp(0.0, kf - u);
        let mut i = u.floor() as usize;
        let mut j = v.floor() as usize;
        let (mut fu, mut fv) = (u - i as f64, v - j as f64);
        if i + j >= k {
            if i > 0 {
                i -= 1;
                fu += 1.0;
            } else {
                j -= 1;
                fv += 1.0;
            }
        }
        let at = |a: usize, b: usize| (self.row_start[a] + b) as u32;
        if fu + fv <= 1.0 {
            Stencil {
                idx: [at(i, j), at(i + 1, j), at(i, j + 1)],
                w: [(1.0 - fu - fv).max(0.0), fu, fv],
                len: 3,
            }
        } else {
            Stencil {
                idx: [at(i + 1, j + 1), at(i + 1, j), at(i, j + 1)],
                w: [fu + fv - 1.0, 1.0 - fv, 1.0 - fu],
                len: 3,
            }
        }
    }

    /// Piecewise-linear interpolant of node values at `x`.
    #[inline]
    pub fn interp(&self, values: &[f64], x: &[f64]) -> f64 {
        self.stencil(x).eval(values)
    }

    /// Sample `f` at every node.
    pub fn tabulate(&self, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        (0..self.len()).map(|i| f(self.node(i))).collect()
    }
}

impl From<DirectionGrid> for GridKind {
    fn from(g: DirectionGrid) -> Self {
        g.kind
    }
}

impl TryFrom<GridKind> for DirectionGrid {
    type Error = Error;

    fn try_from(kind: GridKind) -> Result<Self> {
        DirectionGrid::from_kind(kind)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn segment_nodes_are_cell_centres() {
        let g = DirectionGrid::new(2, Some(4)).unwrap();
        assert_eq!(g.len(), 4);
        assert_eq!(g.node(0), &[0.125, 0.875]);
        assert_eq!(g.node(3), &[0.875, 0.125]);
    }

    #[test]
    fn triangle_mesh_node_count() {
        let g = DirectionGrid::new(3, Some(8)).unwrap();
        assert_eq!(g.len(), 9 * 10 / 2);
        for i in 0..g.len() {
            assert!((g.node(i).iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn interpolation_reproduces_nodes_and_linear_functions() {
        for grid in [DirectionGrid::new(2, Some(16)).unwrap(), DirectionGrid::new(3, Some(8)).unwrap()] {
            let lin = |x: &[f64]| 0.3 + 2.0 * x[0] - x[1];
            let vals = grid.tabulate(lin);
            for i in 0..grid.len() {
                assert!((grid.interp(&vals, grid.node(i)) - vals[i]).abs() < 1e-14);
            }
            let x = if grid.d() == 2 { vec![0.37, 0.63] } else { vec![0.21, 0.33, 0.46] };
            assert!((grid.interp(&vals, &x) - lin(&x)).abs() < 1e-13);
        }
    }

    #[test]
    fn rejects_unsupported_dimension() {
        assert!(DirectionGrid::new(4, None).is_err());
    }

    fn simplex_point(d: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, d).prop_filter_map("zero", |v| {
            let s: f64 = v.iter().sum();
            (s > 0.0).then(|| v.iter().map(|c| c / s).collect())
        })
    }

    proptest! {
        #[test]
        fn weights_are_a_probability_vector(x in simplex_point(2), y in simplex_point(3)) {
            for (grid, p) in [(DirectionGrid::new(2, Some(32)).unwrap(), x), (DirectionGrid::new(3, Some(12)).unwrap(), y)] {
                let st = grid.stencil(&p);
                let total: f64 = st.iter().map(|(_, w)| w).sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
                prop_assert!(st.iter().all(|(i, w)| w >= 0.0 && i < grid.len()));
            }
        }

        #[test]
        fn triangle_mesh_is_exact_on_affine_functions(y in simplex_point(3)) {
            let grid = DirectionGrid::new(3, Some(10)).unwrap();
            let f = |x: &[f64]| 1.0 - 0.5 * x[0] + 3.0 * x[2];
            let vals = grid.tabulate(f);
            prop_assert!((grid.interp(&vals, &y) - f(&y)).abs() < 1e-12);
        }
    }
}
