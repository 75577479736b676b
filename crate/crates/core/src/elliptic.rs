//! Inversion of the coupled two-layer PV / stream-function relation
//!
//! ```text
//! q1 = Δψ1 + s1 (ψ2 − ψ1)
//! q2 = Δψ2 + s2 (ψ1 − ψ2)
//! ```
//!
//! in the periodic channel, with ψ constant along both walls in each layer
//! and the mass constraint ∬(ψ1 − ψ2) held at a prescribed value.
//!
//! The 2x2 layer coupling is diagonalised into a barotropic mode
//! (eigenvalue 0) and a baroclinic mode (eigenvalue −(s1 + s2)). Each mode
//! is solved with an FFT in `x` and a tridiagonal sweep in `y`. The
//! barotropic wall value is the gauge and is pinned to zero; the
//! baroclinic wall value is fixed by superposing the homogeneous response
//! to unit wall data so that the mass constraint holds exactly.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{QgError, Result};
use crate::field::{FaceField, LayeredField, LAYERS};
use crate::grid::Grid;

/// Layer coupling coefficients, in m⁻².
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stratification {
    pub s1: f64,
    pub s2: f64,
}

impl Stratification {
    pub fn new(s1: f64, s2: f64) -> Result<Self> {
        if !(s1 > 0.0 && s2 > 0.0 && s1.is_finite() && s2.is_finite()) {
            return Err(QgError::InvalidParameter(format!(
                "stratification parameters must be positive, got s1={s1}, s2={s2}"
            )));
        }
        Ok(Self { s1, s2 })
    }

    /// From values quoted in km⁻².
    pub fn from_per_km2(s1: f64, s2: f64) -> Result<Self> {
        Self::new(s1 * 1e-6, s2 * 1e-6)
    }

    /// The coupling matrix `[[−s1, s1], [s2, −s2]]`.
    pub fn coupling_matrix(&self) -> [[f64; 2]; 2] {
        [[-self.s1, self.s1], [self.s2, -self.s2]]
    }

    /// Eigenvalues of the coupling matrix: barotropic, baroclinic.
    pub fn mode_eigenvalues(&self) -> [f64; 2] {
        [0.0, -(self.s1 + self.s2)]
    }
}

/// Thomas factorisation of a symmetric tridiagonal matrix with constant
/// off-diagonal.
#[derive(Clone, Debug, PartialEq)]
struct Tridiagonal {
    off: f64,
    upper: Vec<f64>,
    inv_pivot: Vec<f64>,
}

impl Tridiagonal {
    fn factor(diag: &[f64], off: f64) -> Result<Self> {
        let n = diag.len();
        let mut upper = vec![0.0; n];
        let mut inv_pivot = vec![0.0; n];
        let mut prev_upper = 0.0;
        for j in 0..n {
            let pivot = diag[j] - off * prev_upper;
            if pivot.abs() < f64::EPSILON * diag[j].abs().max(off.abs()) {
                return Err(QgError::SingularConstraint(pivot));
            }
            inv_pivot[j] = 1.0 / pivot;
            upper[j] = off * inv_pivot[j];
            prev_upper = upper[j];
        }
        Ok(Self { off, upper, inv_pivot })
    }

    /// Solves in place over a strided column of a row-major buffer.
    fn solve_strided<T>(&self, buf: &mut [T], start: usize, stride: usize)
    where
        T: Copy + std::ops::Sub<Output = T> + std::ops::Mul<f64, Output = T>,
    {
        let n = self.upper.len();
        let mut prev = buf[start] * self.inv_pivot[0];
        buf[start] = prev;
        for j in 1..n {
            let k = start + j * stride;
            prev = (buf[k] - prev * self.off) * self.inv_pivot[j];
            buf[k] = prev;
        }
        for j in (0..n - 1).rev() {
            let k = start + j * stride;
            buf[k] = buf[k] - buf[k + stride] * self.upper[j];
        }
    }
}

/// Stream function with its per-layer wall values.
#[derive(Clone, Debug, PartialEq)]
pub struct Inversion {
    pub psi: LayeredField,
    pub walls: [f64; 2],
}

impl Inversion {
    pub fn zeros(grid: Grid) -> Self {
        Self {
            psi: LayeredField::zeros(grid),
            walls: [0.0; 2],
        }
    }

    /// ∬(ψ1 − ψ2) dA.
    pub fn mass(&self) -> f64 {
        mass_functional(&self.psi)
    }
}

/// ∬(ψ1 − ψ2) dA.
pub fn mass_functional(psi: &LayeredField) -> f64 {
    psi.integral(0) - psi.integral(1)
}

/// Precomputed transforms and factorisations for one grid and
/// stratification.
pub struct EllipticWorkspace {
    grid: Grid,
    strat: Stratification,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    /// `factors[mode][m]`: mode 0 barotropic, 1 baroclinic; `m` zonal wavenumber.
    factors: [Vec<Tridiagonal>; 2],
    /// Baroclinic response to unit wall values with no interior source
    /// (depends on `y` only).
    wall_response: Vec<f64>,
    wall_response_integral: f64,
}

impl std::fmt::Debug for EllipticWorkspace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EllipticWorkspace")
            .field("grid", &self.grid)
            .field("strat", &self.strat)
            .finish_non_exhaustive()
    }
}

impl EllipticWorkspace {
    pub fn new(grid: Grid, strat: Stratification) -> Result<Self> {
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(grid.nx);
        let inv = planner.plan_fft_inverse(grid.nx);
        let off = 1.0 / (grid.dy * grid.dy);
        let eig = strat.mode_eigenvalues();
        let mut factors: [Vec<Tridiagonal>; 2] = [Vec::new(), Vec::new()];
        for (mode, lambda) in eig.iter().enumerate() {
            factors[mode] = (0..grid.nx)
                .map(|m| {
                    let diag = Self::diagonal(&grid, m, *lambda);
                    Tridiagonal::factor(&diag, off)
                })
                .collect::<Result<_>>()?;
        }

        // Unit wall values enter the boundary rows through the ghost cells
        // ψ_ghost = 2c − ψ_edge, i.e. a source of −2c/dy² on those rows.
        let mut wall_response = vec![0.0; grid.ny];
        wall_response[0] = -2.0 * off;
        wall_response[grid.ny - 1] -= 2.0 * off;
        factors[1][0].solve_strided(&mut wall_response, 0, 1);
        let wall_response_integral = wall_response.iter().sum::<f64>() * grid.nx as f64 * grid.cell_area();
        if !(wall_response_integral.abs() > 0.0) || !wall_response_integral.is_finite() {
            return Err(QgError::SingularConstraint(wall_response_integral));
        }

        Ok(Self {
            grid,
            strat,
            fwd,
            inv,
            factors,
            wall_response,
            wall_response_integral,
        })
    }

    fn diagonal(grid: &Grid, m: usize, lambda: f64) -> Vec<f64> {
        let s = (std::f64::consts::PI * m as f64 / grid.nx as f64).sin();
        let kx = -4.0 * s * s / (grid.dx * grid.dx);
        let off = 1.0 / (grid.dy * grid.dy);
        let mut diag = vec![-2.0 * off + kx + lambda; grid.ny];
        diag[0] = -3.0 * off + kx + lambda;
        diag[grid.ny - 1] = -3.0 * off + kx + lambda;
        diag
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn stratification(&self) -> &Stratification {
        &self.strat
    }

    pub fn mode_eigenvalues(&self) -> [f64; 2] {
        self.strat.mode_eigenvalues()
    }

    /// Baroclinic response to unit wall values (per row).
    pub fn wall_response(&self) -> &[f64] {
        &self.wall_response
    }

    /// Factorisation entries of one mode/wavenumber: `(upper, 1/pivot)`.
    pub fn factorization(&self, mode: usize, m: usize) -> (&[f64], &[f64]) {
        let t = &self.factors[mode][m];
        (&t.upper, &t.inv_pivot)
    }

    /// Solves `(Δ + λ_mode) φ = rhs` with zero wall values, in place.
    fn solve_mode(&self, mode: usize, field: &mut [f64]) {
        let g = &self.grid;
        let mut buf: Vec<Complex64> = field.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.fwd.process(&mut buf);
        for m in 0..g.nx {
            self.factors[mode][m].solve_strided(&mut buf, m, g.nx);
        }
        self.inv.process(&mut buf);
        let norm = 1.0 / g.nx as f64;
        for (f, c) in field.iter_mut().zip(&buf) {
            *f = c.re * norm;
        }
    }

    /// Solves for ψ given q and the target value of ∬(ψ1 − ψ2).
    pub fn invert(&self, q: &LayeredField, mass_target: f64) -> Result<Inversion> {
        if q.grid() != &self.grid {
            return Err(QgError::GridMismatch(
                "PV field and elliptic workspace use different grids".into(),
            ));
        }
        if !q.is_finite() {
            return Err(QgError::NonFinite("PV field passed to the elliptic solver"));
        }
        let g = self.grid;
        let Stratification { s1, s2 } = self.strat;
        let total = s1 + s2;
        let (q1, q2) = (q.layer(0), q.layer(1));

        let mut bt: Vec<f64> = q1.iter().zip(q2).map(|(a, b)| (s2 * a + s1 * b) / total).collect();
        let mut bc: Vec<f64> = q1.iter().zip(q2).map(|(a, b)| a - b).collect();
        self.solve_mode(0, &mut bt);
        self.solve_mode(1, &mut bc);

        let bc_integral = bc.iter().sum::<f64>() * g.cell_area();
        let wall_bc = (mass_target - bc_integral) / self.wall_response_integral;
        for j in 0..g.ny {
            let h = wall_bc * self.wall_response[j];
            for v in &mut bc[j * g.nx..(j + 1) * g.nx] {
                *v += h;
            }
        }

        let mut psi = LayeredField::zeros(g);
        {
            let data = psi.data_mut();
            let (p1, p2) = data.split_at_mut(g.cells());
            for k in 0..g.cells() {
                p1[k] = bt[k] + s1 / total * bc[k];
                p2[k] = bt[k] - s2 / total * bc[k];
            }
        }
        let walls = [s1 / total * wall_bc, -s2 / total * wall_bc];
        Ok(Inversion { psi, walls })
    }
}

/// Five-point Laplacian of one layer, periodic in x, with the supplied
/// ghost values below row 0 and above row `ny − 1`.
fn laplacian_with_ghosts(
    grid: &Grid,
    f: &[f64],
    south: impl Fn(usize) -> f64,
    north: impl Fn(usize) -> f64,
    out: &mut [f64],
) {
    let (nx, ny) = (grid.nx, grid.ny);
    let idx2 = 1.0 / (grid.dx * grid.dx);
    let idy2 = 1.0 / (grid.dy * grid.dy);
    for j in 0..ny {
        for i in 0..nx {
            let c = f[j * nx + i];
            let w = f[j * nx + (i + nx - 1) % nx];
            let e = f[j * nx + (i + 1) % nx];
            let s = if j == 0 { south(i) } else { f[(j - 1) * nx + i] };
            let n = if j == ny - 1 { north(i) } else { f[(j + 1) * nx + i] };
            out[j * nx + i] = (w - 2.0 * c + e) * idx2 + (s - 2.0 * c + n) * idy2;
        }
    }
}

/// Laplacian of a layer whose wall value is `wall` (ghost `2c − ψ_edge`).
pub fn laplacian_layer(grid: &Grid, psi: &[f64], wall: f64, out: &mut [f64]) {
    let top = (grid.ny - 1) * grid.nx;
    laplacian_with_ghosts(grid, psi, |i| 2.0 * wall - psi[i], |i| 2.0 * wall - psi[top + i], out);
}

/// The discrete forward operator: PV from a stream function and its wall values.
pub fn apply_pv_operator(inv: &Inversion, strat: &Stratification) -> LayeredField {
    let g = *inv.psi.grid();
    let mut q = LayeredField::zeros(g);
    for l in 0..LAYERS {
        let mut lap = vec![0.0; g.cells()];
        laplacian_layer(&g, inv.psi.layer(l), inv.walls[l], &mut lap);
        let (own, other) = (inv.psi.layer(l), inv.psi.layer(1 - l));
        let s = if l == 0 { strat.s1 } else { strat.s2 };
        for (k, out) in q.layer_mut(l).iter_mut().enumerate() {
            *out = lap[k] + s * (other[k] - own[k]);
        }
    }
    q
}

/// Stream function at cell corners: interior nodes average the four
/// surrounding cells, wall nodes take the wall value.
pub fn node_values(grid: &Grid, psi: &[f64], wall: f64) -> Vec<f64> {
    let nx = grid.nx;
    let mut nodes = vec![wall; grid.y_faces()];
    for j in 1..grid.ny {
        for i in 0..nx {
            let il = (i + nx - 1) % nx;
            nodes[j * nx + i] =
                0.25 * (psi[j * nx + i] + psi[j * nx + il] + psi[(j - 1) * nx + i] + psi[(j - 1) * nx + il]);
        }
    }
    nodes
}

/// Face velocities `u = Δ_y[ψ_node]` on x-faces and `v = −Δ_x[ψ_node]` on
/// y-faces. The background flow enters through `ψ → −U y + ψ`, which adds
/// `−U` to `u` in each layer. Wall-normal `v` vanishes because ψ is
/// constant along the walls.
pub fn velocities_from_psi(inv: &Inversion, background_u: [f64; 2]) -> FaceField {
    let g = *inv.psi.grid();
    let nx = g.nx;
    let mut vel = FaceField::zeros(g);
    for l in 0..LAYERS {
        let nodes = node_values(&g, inv.psi.layer(l), inv.walls[l]);
        let u = vel.x_layer_mut(l);
        for j in 0..g.ny {
            for i in 0..nx {
                u[j * nx + i] = (nodes[(j + 1) * nx + i] - nodes[j * nx + i]) / g.dy - background_u[l];
            }
        }
        let v = vel.y_layer_mut(l);
        for j in 0..=g.ny {
            for i in 0..nx {
                v[j * nx + i] = -(nodes[j * nx + (i + 1) % nx] - nodes[j * nx + i]) / g.dx;
            }
        }
    }
    vel
}

/// Viscous and frictional tendency `ν Δ²ψ − δ_{2l} μ Δψ`.
///
/// Δ²ψ is the Laplacian of ζ = Δψ. At the walls ζ takes the no-slip wall
/// vorticity `8 (ψ_edge − c) / dy²` through the ghost `2 ζ_w − ζ_edge`.
pub fn viscous_tendency(inv: &Inversion, nu: f64, mu: f64) -> LayeredField {
    let g = *inv.psi.grid();
    let mut out = LayeredField::zeros(g);
    if nu == 0.0 && mu == 0.0 {
        return out;
    }
    let top = (g.ny - 1) * g.nx;
    let idy2 = 1.0 / (g.dy * g.dy);
    for l in 0..LAYERS {
        let psi = inv.psi.layer(l);
        let c = inv.walls[l];
        let mut zeta = vec![0.0; g.cells()];
        laplacian_layer(&g, psi, c, &mut zeta);
        let mut bilap = vec![0.0; g.cells()];
        if nu != 0.0 {
            laplacian_with_ghosts(
                &g,
                &zeta,
                |i| 2.0 * 8.0 * (psi[i] - c) * idy2 - zeta[i],
                |i| 2.0 * 8.0 * (psi[top + i] - c) * idy2 - zeta[top + i],
                &mut bilap,
            );
        }
        let friction = if l == 1 { mu } else { 0.0 };
        for (k, o) in out.layer_mut(l).iter_mut().enumerate() {
            *o = nu * bilap[k] - friction * zeta[k];
        }
    }
    out
}
