//! Uniform cell-centered grids with staggered faces.
//!
//! Cells are flattened row-major with x fastest: cell `(i, j)` has index
//! `i + nx * j`. Face arrays include the boundary faces, which are pinned to
//! zero (no-flux). Interior faces are the "edges" joining two neighboring
//! cells; they are the only flux unknowns the optimization sees.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    dim: usize,
    nx: usize,
    ny: usize,
    xmin: f64,
    xmax: f64,
    ymin: f64,
    ymax: f64,
    dx: f64,
    dy: f64,
}

/// An interior face joining cell `lo` to cell `hi = lo + e_axis`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub lo: usize,
    pub hi: usize,
    pub axis: Axis,
    /// Distance between the two cell centers.
    pub spacing: f64,
    /// Index into the full face array of `axis` (boundary faces included).
    pub face: usize,
}

impl Grid {
    pub fn new_1d(nx: usize, xmin: f64, xmax: f64) -> Result<Self> {
        if nx == 0 {
            return Err(Error::InvalidGrid("nx must be positive".into()));
        }
        if !(xmax > xmin) || !xmin.is_finite() || !xmax.is_finite() {
            return Err(Error::InvalidGrid(format!("bad x bounds [{xmin}, {xmax}]")));
        }
        let dx = (xmax - xmin) / nx as f64;
        Ok(Self {
            dim: 1,
            nx,
            ny: 1,
            xmin,
            xmax,
            ymin: 0.0,
            ymax: 1.0,
            dx,
            dy: 1.0,
        })
    }

    pub fn new_2d(nx: usize, ny: usize, x: (f64, f64), y: (f64, f64)) -> Result<Self> {
        let mut g = Self::new_1d(nx, x.0, x.1)?;
        if ny == 0 {
            return Err(Error::InvalidGrid("ny must be positive".into()));
        }
        if !(y.1 > y.0) || !y.0.is_finite() || !y.1.is_finite() {
            return Err(Error::InvalidGrid(format!("bad y bounds [{}, {}]", y.0, y.1)));
        }
        g.dim = 2;
        g.ny = ny;
        g.ymin = y.0;
        g.ymax = y.1;
        g.dy = (y.1 - y.0) / ny as f64;
        Ok(g)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn nx(&self) -> usize {
        self.nx
    }
    /// Cell count along y; 1 for a 1D grid.
    pub fn ny(&self) -> usize {
        self.ny
    }
    pub fn dx(&self) -> f64 {
        self.dx
    }
    /// Cell width along y; only meaningful in 2D.
    pub fn dy(&self) -> f64 {
        self.dy
    }
    pub fn x_bounds(&self) -> (f64, f64) {
        (self.xmin, self.xmax)
    }
    pub fn y_bounds(&self) -> (f64, f64) {
        (self.ymin, self.ymax)
    }

    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    /// Volume of one cell: `dx` in 1D, `dx * dy` in 2D.
    pub fn cell_volume(&self) -> f64 {
        if self.dim == 1 {
            self.dx
        } else {
            self.dx * self.dy
        }
    }

    /// Domain measure.
    pub fn volume(&self) -> f64 {
        self.cell_volume() * self.n_cells() as f64
    }

    pub fn cell_index(&self, i: usize, j: usize) -> usize {
        i + self.nx * j
    }

    pub fn cell_coords(&self, c: usize) -> (usize, usize) {
        (c % self.nx, c / self.nx)
    }

    pub fn n_x_faces(&self) -> usize {
        (self.nx + 1) * self.ny
    }

    pub fn n_y_faces(&self) -> usize {
        if self.dim == 1 {
            0
        } else {
            self.nx * (self.ny + 1)
        }
    }

    pub fn n_interior_faces(&self) -> usize {
        let x = (self.nx - 1) * self.ny;
        if self.dim == 1 {
            x
        } else {
            x + self.nx * (self.ny - 1)
        }
    }

    /// Center of cell `c`. The second coordinate is 0 on 1D grids.
    pub fn cell_center(&self, c: usize) -> [f64; 2] {
        let (i, j) = self.cell_coords(c);
        let x = self.xmin + (i as f64 + 0.5) * self.dx;
        if self.dim == 1 {
            [x, 0.0]
        } else {
            [x, self.ymin + (j as f64 + 0.5) * self.dy]
        }
    }

    pub fn cell_centers(&self) -> Vec<[f64; 2]> {
        (0..self.n_cells()).map(|c| self.cell_center(c)).collect()
    }

    /// Interior faces: all x-edges (row by row) followed by all y-edges.
    /// This order is the canonical layout of the flux block of the state.
    pub fn edges(&self) -> Vec<Edge> {
        let mut out = Vec::with_capacity(self.n_interior_faces());
        for j in 0..self.ny {
            for i in 0..self.nx - 1 {
                out.push(Edge {
                    lo: self.cell_index(i, j),
                    hi: self.cell_index(i + 1, j),
                    axis: Axis::X,
                    spacing: self.dx,
                    face: (i + 1) + (self.nx + 1) * j,
                });
            }
        }
        if self.dim == 2 {
            for j in 0..self.ny - 1 {
                for i in 0..self.nx {
                    out.push(Edge {
                        lo: self.cell_index(i, j),
                        hi: self.cell_index(i, j + 1),
                        axis: Axis::Y,
                        spacing: self.dy,
                        face: i + self.nx * (j + 1),
                    });
                }
            }
        }
        out
    }

    /// Discrete divergence of a face flux with zero boundary faces.
    pub fn divergence(&self, m: &FluxField) -> Vec<f64> {
        let mut out = vec![0.0; self.n_cells()];
        for j in 0..self.ny {
            for i in 0..self.nx {
                let c = self.cell_index(i, j);
                let west = m.x[i + (self.nx + 1) * j];
                let east = m.x[i + 1 + (self.nx + 1) * j];
                let mut d = (east - west) / self.dx;
                if self.dim == 2 {
                    let south = m.y[i + self.nx * j];
                    let north = m.y[i + self.nx * (j + 1)];
                    d += (north - south) / self.dy;
                }
                out[c] = d;
            }
        }
        out
    }

    /// Arithmetic mean of the two cells adjacent to each interior face, in
    /// [`Grid::edges`] order.
    pub fn face_average(&self, rho: &DensityField) -> Vec<f64> {
        self.edges()
            .iter()
            .map(|e| 0.5 * (rho.values[e.lo] + rho.values[e.hi]))
            .collect()
    }

    /// Fill-reducing elimination order for the KKT system of a JKO step.
    ///
    /// KKT unknowns are `[rho (n_cells) ; m (interior faces) ; y (n_cells)]`.
    /// Cells are ordered by geometric nested dissection (natural order in
    /// 1D). Each cell contributes its density, then the faces it is the first
    /// neighbor of, then its continuity multiplier, so every multiplier is
    /// eliminated after its own density.
    pub fn kkt_ordering(&self) -> Vec<usize> {
        let n_cells = self.n_cells();
        let edges = self.edges();
        let n_state = n_cells + edges.len();
        let mut cells = Vec::with_capacity(n_cells);
        if self.dim == 1 {
            cells.extend(0..n_cells);
        } else {
            self.dissect(0, self.nx, 0, self.ny, &mut cells);
        }
        let mut pos = vec![0usize; n_cells];
        for (k, &c) in cells.iter().enumerate() {
            pos[c] = k;
        }
        let mut owned: Vec<Vec<usize>> = vec![Vec::new(); n_cells];
        for (k, e) in edges.iter().enumerate() {
            let owner = if pos[e.lo] <= pos[e.hi] { e.lo } else { e.hi };
            owned[owner].push(n_cells + k);
        }
        let mut order = Vec::with_capacity(n_state + n_cells);
        for &c in &cells {
            order.push(c);
            order.extend_from_slice(&owned[c]);
            order.push(n_state + c);
        }
        order
    }

    fn dissect(&self, i0: usize, i1: usize, j0: usize, j1: usize, out: &mut Vec<usize>) {
        let w = i1 - i0;
        let h = j1 - j0;
        if w * h <= 16 || w <= 2 && h <= 2 {
            for j in j0..j1 {
                for i in i0..i1 {
                    out.push(self.cell_index(i, j));
                }
            }
            return;
        }
        if w >= h {
            let mid = i0 + w / 2;
            self.dissect(i0, mid, j0, j1, out);
            self.dissect(mid + 1, i1, j0, j1, out);
            for j in j0..j1 {
                out.push(self.cell_index(mid, j));
            }
        } else {
            let mid = j0 + h / 2;
            self.dissect(i0, i1, j0, mid, out);
            self.dissect(i0, i1, mid + 1, j1, out);
            for i in i0..i1 {
                out.push(self.cell_index(i, mid));
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityField {
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl DensityField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_cells() {
            return Err(Error::DimensionMismatch {
                expected: grid.n_cells(),
                got: values.len(),
            });
        }
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::InvalidParameter(format!("negative or NaN density {v}")));
        }
        Ok(Self { grid, values })
    }

    /// Sample `f` at the cell centers.
    pub fn from_fn(grid: Grid, f: impl Fn([f64; 2]) -> f64) -> Result<Self> {
        let values = grid.cell_centers().into_iter().map(f).collect();
        Self::new(grid, values)
    }

    pub fn constant(grid: Grid, value: f64) -> Result<Self> {
        Self::new(grid, vec![value; grid.n_cells()])
    }

    /// Discrete mass `sum rho_j * vol`.
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_volume()
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Rescale so that the discrete mass equals `target`.
    pub fn normalize_to(&mut self, target: f64) {
        let m = self.mass();
        if m > 0.0 {
            let s = target / m;
            self.values.iter_mut().for_each(|v| *v *= s);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluxField {
    pub grid: Grid,
    /// x-face values, `(nx + 1) * ny`, index `i + (nx + 1) * j`.
    pub x: Vec<f64>,
    /// y-face values, `nx * (ny + 1)`, index `i + nx * j`; empty in 1D.
    pub y: Vec<f64>,
}

impl FluxField {
    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            x: vec![0.0; grid.n_x_faces()],
            y: vec![0.0; grid.n_y_faces()],
        }
    }

    /// Build from interior-face values in [`Grid::edges`] order.
    pub fn from_interior(grid: Grid, values: &[f64]) -> Result<Self> {
        let edges = grid.edges();
        if values.len() != edges.len() {
            return Err(Error::DimensionMismatch {
                expected: edges.len(),
                got: values.len(),
            });
        }
        let mut f = Self::zeros(grid);
        for (e, &v) in edges.iter().zip(values) {
            match e.axis {
                Axis::X => f.x[e.face] = v,
                Axis::Y => f.y[e.face] = v,
            }
        }
        Ok(f)
    }

    /// Interior-face values in [`Grid::edges`] order.
    pub fn interior(&self) -> Vec<f64> {
        self.grid
            .edges()
            .iter()
            .map(|e| match e.axis {
                Axis::X => self.x[e.face],
                Axis::Y => self.y[e.face],
            })
            .collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.x.iter().chain(&self.y).fold(0.0, |a, v| a.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn divergence_two_cells() {
        let g = Grid::new_1d(2, 0.0, 2.0).unwrap();
        let m = FluxField::from_interior(g, &[0.5]).unwrap();
        assert_eq!(g.divergence(&m), vec![0.5, -0.5]);
        assert_eq!(g.divergence(&FluxField::zeros(g)), vec![0.0, 0.0]);
    }

    #[test]
    fn face_average_examples() {
        let g = Grid::new_1d(2, 0.0, 2.0).unwrap();
        let r = DensityField::new(g, vec![1.0, 3.0]).unwrap();
        assert_eq!(g.face_average(&r), vec![2.0]);
        let r = DensityField::new(g, vec![1.0, std::f64::consts::E]).unwrap();
        assert!((g.face_average(&r)[0] - 1.859_140_914_229_522_5).abs() < 1e-15);
        let g2 = Grid::new_2d(3, 4, (0.0, 1.0), (0.0, 2.0)).unwrap();
        let r = DensityField::constant(g2, 0.7).unwrap();
        assert!(g2.face_average(&r).iter().all(|&v| v == 0.7));
    }

    #[test]
    fn centers() {
        let g = Grid::new_1d(2, 0.0, 2.0).unwrap();
        assert_eq!(g.cell_centers(), vec![[0.5, 0.0], [1.5, 0.0]]);
        let g = Grid::new_1d(1, -1.0, 1.0).unwrap();
        assert_eq!(g.cell_centers(), vec![[0.0, 0.0]]);
        let g = Grid::new_2d(2, 1, (0.0, 2.0), (0.0, 1.0)).unwrap();
        assert_eq!(g.cell_centers(), vec![[0.5, 0.5], [1.5, 0.5]]);
    }

    #[test]
    fn counts() {
        let g = Grid::new_2d(4, 3, (0.0, 1.0), (0.0, 1.0)).unwrap();
        assert_eq!(g.n_x_faces(), 15);
        assert_eq!(g.n_y_faces(), 16);
        assert_eq!(g.n_interior_faces(), 3 * 3 + 4 * 2);
        assert_eq!(g.edges().len(), g.n_interior_faces());
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(Grid::new_1d(0, 0.0, 1.0).is_err());
        assert!(Grid::new_1d(3, 1.0, 1.0).is_err());
        assert!(Grid::new_2d(3, 0, (0.0, 1.0), (0.0, 1.0)).is_err());
        let g = Grid::new_1d(3, 0.0, 1.0).unwrap();
        assert!(DensityField::new(g, vec![1.0, 2.0]).is_err());
        assert!(DensityField::new(g, vec![1.0, -2.0, 1.0]).is_err());
    }

    #[test]
    fn kkt_ordering_is_permutation() {
        for g in [
            Grid::new_1d(7, 0.0, 1.0).unwrap(),
            Grid::new_2d(13, 9, (0.0, 1.0), (0.0, 1.0)).unwrap(),
        ] {
            let n = 2 * g.n_cells() + g.n_interior_faces();
            let mut ord = g.kkt_ordering();
            assert_eq!(ord.len(), n);
            ord.sort_unstable();
            assert!(ord.iter().enumerate().all(|(k, &v)| k == v));
        }
    }

    fn flux_strategy() -> impl Strategy<Value = (Grid, Vec<f64>, Vec<f64>)> {
        (1usize..6, 1usize..6).prop_flat_map(|(nx, ny)| {
            let g = Grid::new_2d(nx, ny, (0.0, 1.3), (-0.5, 0.5)).unwrap();
            let n = g.n_interior_faces();
            (
                Just(g),
                proptest::collection::vec(-10.0..10.0f64, n),
                proptest::collection::vec(-10.0..10.0f64, n),
            )
        })
    }

    proptest! {
        #[test]
        fn divergence_sums_to_zero((g, a, _b) in flux_strategy()) {
            let m = FluxField::from_interior(g, &a).unwrap();
            let s: f64 = g.divergence(&m).iter().sum();
            let scale = m.max_abs().max(1.0) * g.n_cells() as f64 / g.dx().min(g.dy());
            prop_assert!(s.abs() <= 1e-12 * scale);
        }

        #[test]
        fn divergence_is_linear((g, a, b) in flux_strategy(), al in -3.0..3.0f64, be in -3.0..3.0f64) {
            let ma = FluxField::from_interior(g, &a).unwrap();
            let mb = FluxField::from_interior(g, &b).unwrap();
            let comb: Vec<f64> = a.iter().zip(&b).map(|(x, y)| al * x + be * y).collect();
            let mc = FluxField::from_interior(g, &comb).unwrap();
            let (da, db, dc) = (g.divergence(&ma), g.divergence(&mb), g.divergence(&mc));
            for k in 0..dc.len() {
                let expect = al * da[k] + be * db[k];
                prop_assert!((dc[k] - expect).abs() <= 1e-9 * (1.0 + expect.abs()));
            }
        }

        #[test]
        fn x_only_flux_matches_rowwise_1d(nx in 1usize..7, ny in 1usize..5, seed in proptest::collection::vec(-5.0..5.0f64, 64)) {
            let g2 = Grid::new_2d(nx, ny, (0.0, 2.0), (0.0, 1.0)).unwrap();
            let g1 = Grid::new_1d(nx, 0.0, 2.0).unwrap();
            let mut m2 = FluxField::zeros(g2);
            for j in 0..ny {
                for i in 1..nx {
                    m2.x[i + (nx + 1) * j] = seed[(i + 7 * j) % seed.len()];
                }
            }
            let d2 = g2.divergence(&m2);
            for j in 0..ny {
                let mut m1 = FluxField::zeros(g1);
                m1.x.copy_from_slice(&m2.x[(nx + 1) * j..(nx + 1) * (j + 1)]);
                let d1 = g1.divergence(&m1);
                prop_assert_eq!(&d2[nx * j..nx * (j + 1)], &d1[..]);
            }
        }
    }
}
