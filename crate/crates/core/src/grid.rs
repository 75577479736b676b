//! Channel grid, station layouts and grid-to-grid projections.
//!
//! The channel is periodic in `x` and bounded by walls at `y = 0` and
//! `y = Ly`. Cells are indexed `(i, j)` with `i` zonal and `j` meridional;
//! storage is row-major (`j * nx + i`).
//!
//! Staggered locations:
//! - x-face `(i, j)` sits at `(i dx, (j + 1/2) dy)`, between cells `i - 1`
//!   and `i`; `nx * ny` of them, wrapping in `i`.
//! - y-face `(i, j)` sits at `((i + 1/2) dx, j dy)`, between cells `j - 1`
//!   and `j`; `nx * (ny + 1)` of them, rows `0` and `ny` lie on the walls.
//! - node `(i, j)` sits at `(i dx, j dy)`; same count and layout as y-faces.

use crate::error::{QgError, Result};
use crate::field::{CellVelocity, LayeredField, LAYERS};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
    pub dx: f64,
    pub dy: f64,
}

impl Grid {
    pub fn new(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<Self> {
        if nx < 4 || ny < 4 {
            return Err(QgError::InvalidGrid(format!("need at least 4x4 cells, got {nx}x{ny}")));
        }
        if !(lx > 0.0 && ly > 0.0 && lx.is_finite() && ly.is_finite()) {
            return Err(QgError::InvalidGrid(format!(
                "domain lengths must be positive, got {lx} x {ly}"
            )));
        }
        Ok(Self {
            nx,
            ny,
            lx,
            ly,
            dx: lx / nx as f64,
            dy: ly / ny as f64,
        })
    }

    #[inline]
    pub fn cells(&self) -> usize {
        self.nx * self.ny
    }

    /// Number of y-faces (and nodes): one extra row for the north wall.
    #[inline]
    pub fn y_faces(&self) -> usize {
        self.nx * (self.ny + 1)
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    /// Periodic zonal index.
    #[inline]
    pub fn wrap(&self, i: isize) -> usize {
        i.rem_euclid(self.nx as isize) as usize
    }

    #[inline]
    pub fn cell_area(&self) -> f64 {
        self.dx * self.dy
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        ((i as f64 + 0.5) * self.dx, (j as f64 + 0.5) * self.dy)
    }

    /// Same physical domain with the cell counts divided by `(rx, ry)`.
    pub fn coarsened(&self, rx: usize, ry: usize) -> Result<Grid> {
        if rx == 0 || ry == 0 || !self.nx.is_multiple_of(rx) || !self.ny.is_multiple_of(ry) {
            return Err(QgError::GridMismatch(format!(
                "{}x{} is not divisible by {rx}x{ry}",
                self.nx, self.ny
            )));
        }
        Grid::new(self.nx / rx, self.ny / ry, self.lx, self.ly)
    }

    /// Same physical domain with the cell counts multiplied by `factor`.
    pub fn refined(&self, factor: usize) -> Result<Grid> {
        Grid::new(self.nx * factor, self.ny * factor, self.lx, self.ly)
    }

    /// Integer refinement ratio of `fine` over `self`, when both grids cover
    /// the same domain and the cell counts divide.
    pub fn ratio_to(&self, fine: &Grid) -> Result<(usize, usize)> {
        let same_domain = (self.lx - fine.lx).abs() <= 1e-9 * self.lx && (self.ly - fine.ly).abs() <= 1e-9 * self.ly;
        if !same_domain || !fine.nx.is_multiple_of(self.nx) || !fine.ny.is_multiple_of(self.ny) {
            return Err(QgError::GridMismatch(format!(
                "fine grid {}x{} does not refine coarse grid {}x{} over the same domain",
                fine.nx, fine.ny, self.nx, self.ny
            )));
        }
        Ok((fine.nx / self.nx, fine.ny / self.ny))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Station {
    pub i: usize,
    pub j: usize,
    pub x: f64,
    pub y: f64,
}

/// Weather-station locations on a signal grid.
#[derive(Clone, Debug, PartialEq)]
pub struct StationSet {
    pub grid: Grid,
    pub stations: Vec<Station>,
    /// Layout tag, e.g. `"4x4"` (rows x cols).
    pub layout: String,
}

impl StationSet {
    pub fn len(&self) -> usize {
        self.stations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stations.is_empty()
    }

    /// Builds a station set from explicit cell indices.
    pub fn from_cells(grid: Grid, cells: &[(usize, usize)], layout: &str) -> Result<Self> {
        let mut stations = Vec::with_capacity(cells.len());
        for &(i, j) in cells {
            if i >= grid.nx || j >= grid.ny {
                return Err(QgError::InvalidParameter(format!(
                    "station cell ({i}, {j}) outside {}x{} grid",
                    grid.nx, grid.ny
                )));
            }
            if stations.iter().any(|s: &Station| s.i == i && s.j == j) {
                return Err(QgError::InvalidParameter(format!(
                    "duplicate station at cell ({i}, {j})"
                )));
            }
            let (x, y) = grid.cell_center(i, j);
            stations.push(Station { i, j, x, y });
        }
        Ok(Self {
            grid,
            stations,
            layout: layout.to_string(),
        })
    }
}

/// Stations at the nodes of a `rows x cols` equidistant lattice; `rows`
/// counts along `y`, `cols` along `x`. Lattice node `(k, l)` sits at
/// `((k+1) Lx/(cols+1), (l+1) Ly/(rows+1))` and is snapped to the cell that
/// contains it, so no station touches a wall.
pub fn make_equidistant_stations(grid: &Grid, rows: usize, cols: usize) -> Result<StationSet> {
    if rows == 0 || cols == 0 || rows > grid.ny || cols > grid.nx {
        return Err(QgError::InvalidParameter(format!(
            "station lattice {rows}x{cols} does not fit a {}x{} grid",
            grid.nx, grid.ny
        )));
    }
    let mut cells = Vec::with_capacity(rows * cols);
    for l in 0..rows {
        let j = ((l + 1) * grid.ny) / (rows + 1);
        for k in 0..cols {
            let i = ((k + 1) * grid.nx) / (cols + 1);
            cells.push((i.min(grid.nx - 1), j.min(grid.ny - 1)));
        }
    }
    StationSet::from_cells(*grid, &cells, &format!("{rows}x{cols}"))
}

/// Block average of a fine field onto a coarse grid covering the same domain.
pub fn coarse_grain(fine: &LayeredField, coarse_grid: &Grid) -> Result<LayeredField> {
    let fg = fine.grid();
    let (rx, ry) = coarse_grid.ratio_to(fg)?;
    let norm = 1.0 / (rx * ry) as f64;
    let mut out = LayeredField::zeros(*coarse_grid);
    for layer in 0..LAYERS {
        let src = fine.layer(layer);
        let dst = out.layer_mut(layer);
        for fj in 0..fg.ny {
            let cj = fj / ry;
            let row = &src[fj * fg.nx..(fj + 1) * fg.nx];
            for (fi, v) in row.iter().enumerate() {
                dst[cj * coarse_grid.nx + fi / rx] += v;
            }
        }
        dst.iter_mut().for_each(|v| *v *= norm);
    }
    Ok(out)
}

/// Piecewise-constant refinement: every fine cell takes its coarse parent's value.
pub fn refine_constant(coarse: &LayeredField, fine_grid: &Grid) -> Result<LayeredField> {
    let cg = coarse.grid();
    let (rx, ry) = cg.ratio_to(fine_grid)?;
    Ok(LayeredField::from_fn(*fine_grid, |layer, i, j| {
        coarse.get(layer, i / rx, j / ry)
    }))
}

/// Layer-1 cell velocity `(u, v)` at each station (no observation noise).
pub fn sample_at_stations(velocity: &CellVelocity, stations: &StationSet) -> Result<Vec<[f64; 2]>> {
    let g = velocity.u.grid();
    if g.nx != stations.grid.nx || g.ny != stations.grid.ny {
        return Err(QgError::GridMismatch(format!(
            "stations defined on {}x{}, field on {}x{}",
            stations.grid.nx, stations.grid.ny, g.nx, g.ny
        )));
    }
    stations
        .stations
        .iter()
        .map(|s| {
            if s.i >= g.nx || s.j >= g.ny {
                return Err(QgError::InvalidParameter(format!(
                    "station ({}, {}) outside grid",
                    s.i, s.j
                )));
            }
            Ok([velocity.u.get(0, s.i, s.j), velocity.v.get(0, s.i, s.j)])
        })
        .collect()
}
