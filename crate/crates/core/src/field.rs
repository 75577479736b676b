//! Layered cell-centred fields and staggered face fields.

use crate::grid::Grid;

/// The model has exactly two layers.
pub const LAYERS: usize = 2;

/// Two layers of cell-centred values, layer-outermost, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LayeredField {
    grid: Grid,
    data: Vec<f64>,
}

impl LayeredField {
    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            data: vec![0.0; LAYERS * grid.cells()],
        }
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(LAYERS * grid.cells());
        for layer in 0..LAYERS {
            for j in 0..grid.ny {
                for i in 0..grid.nx {
                    data.push(f(layer, i, j));
                }
            }
        }
        Self { grid, data }
    }

    /// Wraps raw layer-outermost data; `None` when the length is wrong.
    pub fn from_vec(grid: Grid, data: Vec<f64>) -> Option<Self> {
        (data.len() == LAYERS * grid.cells()).then_some(Self { grid, data })
    }

    #[inline]
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn layer(&self, layer: usize) -> &[f64] {
        let n = self.grid.cells();
        &self.data[layer * n..(layer + 1) * n]
    }

    #[inline]
    pub fn layer_mut(&mut self, layer: usize) -> &mut [f64] {
        let n = self.grid.cells();
        &mut self.data[layer * n..(layer + 1) * n]
    }

    #[inline]
    pub fn get(&self, layer: usize, i: usize, j: usize) -> f64 {
        self.data[layer * self.grid.cells() + j * self.grid.nx + i]
    }

    #[inline]
    pub fn set(&mut self, layer: usize, i: usize, j: usize, value: f64) {
        let n = self.grid.cells();
        self.data[layer * n + j * self.grid.nx + i] = value;
    }

    /// Domain integral of one layer.
    pub fn integral(&self, layer: usize) -> f64 {
        self.layer(layer).iter().sum::<f64>() * self.grid.cell_area()
    }

    /// Domain integral of the squared field of one layer.
    pub fn integral_sq(&self, layer: usize) -> f64 {
        self.layer(layer).iter().map(|v| v * v).sum::<f64>() * self.grid.cell_area()
    }

    /// Domain integral of the absolute value of one layer.
    pub fn integral_abs(&self, layer: usize) -> f64 {
        self.layer(layer).iter().map(|v| v.abs()).sum::<f64>() * self.grid.cell_area()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &LayeredField) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (s, o) in self.data.iter_mut().zip(&other.data) {
            *s += a * o;
        }
    }

    pub fn scale(&mut self, a: f64) {
        self.data.iter_mut().for_each(|v| *v *= a);
    }

    /// Largest pointwise absolute difference.
    pub fn max_abs_diff(&self, other: &LayeredField) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Root-mean-square pointwise difference over both layers.
    pub fn rms_diff(&self, other: &LayeredField) -> f64 {
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum();
        (s / self.data.len() as f64).sqrt()
    }
}

/// Values on the staggered faces for both layers: `x` holds the x-face
/// values (`nx * ny` per layer), `y` the y-face values (`nx * (ny + 1)`
/// per layer, wall rows included).
///
/// The same container carries face PV `q` and face velocities (`u` on
/// x-faces, `v` on y-faces).
#[derive(Clone, Debug, PartialEq)]
pub struct FaceField {
    grid: Grid,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl FaceField {
    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            x: vec![0.0; LAYERS * grid.cells()],
            y: vec![0.0; LAYERS * grid.y_faces()],
        }
    }

    #[inline]
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    #[inline]
    pub fn x_layer(&self, layer: usize) -> &[f64] {
        let n = self.grid.cells();
        &self.x[layer * n..(layer + 1) * n]
    }

    #[inline]
    pub fn x_layer_mut(&mut self, layer: usize) -> &mut [f64] {
        let n = self.grid.cells();
        &mut self.x[layer * n..(layer + 1) * n]
    }

    #[inline]
    pub fn y_layer(&self, layer: usize) -> &[f64] {
        let n = self.grid.y_faces();
        &self.y[layer * n..(layer + 1) * n]
    }

    #[inline]
    pub fn y_layer_mut(&mut self, layer: usize) -> &mut [f64] {
        let n = self.grid.y_faces();
        &mut self.y[layer * n..(layer + 1) * n]
    }

    /// x-face value with periodic wrapping of the zonal index.
    #[inline]
    pub fn x_at(&self, layer: usize, i: isize, j: usize) -> f64 {
        let g = &self.grid;
        self.x[layer * g.cells() + j * g.nx + g.wrap(i)]
    }

    #[inline]
    pub fn y_at(&self, layer: usize, i: usize, j: usize) -> f64 {
        let g = &self.grid;
        self.y[layer * g.y_faces() + j * g.nx + i]
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(&self.y).all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.x.iter().chain(&self.y).fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// `self = a * self + b * other`, face by face.
    pub fn combine(&mut self, a: f64, b: f64, other: &FaceField) {
        for (s, o) in self.x.iter_mut().zip(&other.x) {
            *s = a * *s + b * o;
        }
        for (s, o) in self.y.iter_mut().zip(&other.y) {
            *s = a * *s + b * o;
        }
    }

    pub fn axpy(&mut self, a: f64, other: &FaceField) {
        self.combine(1.0, a, other);
    }

    pub fn scale(&mut self, a: f64) {
        self.x.iter_mut().chain(self.y.iter_mut()).for_each(|v| *v *= a);
    }

    /// Cell-centred average of a face velocity field.
    pub fn cell_velocity(&self) -> CellVelocity {
        let g = self.grid;
        let u = LayeredField::from_fn(g, |l, i, j| {
            0.5 * (self.x_at(l, i as isize, j) + self.x_at(l, i as isize + 1, j))
        });
        let v = LayeredField::from_fn(g, |l, i, j| 0.5 * (self.y_at(l, i, j) + self.y_at(l, i, j + 1)));
        CellVelocity { u, v }
    }

    /// Face values from cell centres: interior faces take the mean of the
    /// two adjacent cells, wall faces extrapolate linearly from the two
    /// nearest rows.
    pub fn interpolate(cells: &LayeredField) -> Self {
        let g = *cells.grid();
        let mut out = Self::zeros(g);
        for l in 0..LAYERS {
            let c = cells.layer(l);
            let xs = out.x_layer_mut(l);
            for j in 0..g.ny {
                for i in 0..g.nx {
                    let left = c[j * g.nx + g.wrap(i as isize - 1)];
                    xs[j * g.nx + i] = 0.5 * (left + c[j * g.nx + i]);
                }
            }
            let ys = out.y_layer_mut(l);
            for j in 0..=g.ny {
                for i in 0..g.nx {
                    ys[j * g.nx + i] = if j == 0 {
                        1.5 * c[i] - 0.5 * c[g.nx + i]
                    } else if j == g.ny {
                        1.5 * c[(g.ny - 1) * g.nx + i] - 0.5 * c[(g.ny - 2) * g.nx + i]
                    } else {
                        0.5 * (c[(j - 1) * g.nx + i] + c[j * g.nx + i])
                    };
                }
            }
        }
        out
    }
}

/// Cell-centred velocity components for both layers.
#[derive(Clone, Debug, PartialEq)]
pub struct CellVelocity {
    pub u: LayeredField,
    pub v: LayeredField,
}

impl CellVelocity {
    /// Layer-1 `(u, v)` pairs over every cell, row-major.
    pub fn layer_one_pairs(&self) -> Vec<[f64; 2]> {
        self.u
            .layer(0)
            .iter()
            .zip(self.v.layer(0))
            .map(|(&u, &v)| [u, v])
            .collect()
    }
}
