//! Transport noise: the ξ basis, Brownian increment streams and the
//! stochastic CABARET step.
//!
//! Each mode `k` carries a divergence-free face velocity pair `(ξᵘ_k, ξᵛ_k)`
//! per layer. Over a step the noise displaces the flow by `Σ ξ_k ΔW_k`, so
//! ξ has units of m s^-1/2 and ΔW of s^1/2.

use std::f64::consts::PI;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::cabaret::{
    advective_divergence, beta_term, CorrectorInputs, Model, ModelState, SourceStaging, TransportNoise,
};
use crate::error::{QgError, Result};
use crate::field::{FaceField, LayeredField, LAYERS};
use crate::grid::Grid;
use crate::snapshot::{Snapshot, SnapshotKind};

/// Tolerance of the divergence check applied to loaded bases.
pub const DIVERGENCE_TOLERANCE: f64 = 1e-8;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Counter-based Gaussian stream: the draws for a given step depend only
/// on `(seed, step)`, never on how many draws were made before.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NoiseStream {
    seed: u64,
}

impl NoiseStream {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// An independent stream derived from this one.
    pub fn fork(&self, tag: u64) -> Self {
        Self {
            seed: splitmix64(self.seed ^ splitmix64(tag.wrapping_add(0x5851_f42d_4c95_7f2d))),
        }
    }

    fn rng(&self, step: u64) -> ChaCha12Rng {
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed);
        rng.set_stream(step);
        rng
    }

    /// `count` standard normal draws for `step`.
    pub fn normals(&self, step: u64, count: usize) -> Vec<f64> {
        let mut rng = self.rng(step);
        (0..count).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    /// Brownian increments `ΔW_k ~ N(0, dt)` for `step`.
    pub fn increments(&self, step: u64, count: usize, dt: f64) -> Vec<f64> {
        let s = dt.sqrt();
        self.normals(step, count).into_iter().map(|z| z * s).collect()
    }

    /// Uniform draws on `[0, 1)` for `step`.
    pub fn uniforms(&self, step: u64, count: usize) -> Vec<f64> {
        use rand::Rng;
        let mut rng = self.rng(step);
        (0..count).map(|_| rng.random::<f64>()).collect()
    }
}

/// Splits every coarse increment into two fine increments by Brownian-bridge
/// sampling, so both levels follow the same path.
pub fn bridge_refine(coarse: &[Vec<f64>], dt_coarse: f64, stream: &NoiseStream) -> Vec<Vec<f64>> {
    let s = (dt_coarse / 4.0).sqrt();
    let mut fine = Vec::with_capacity(2 * coarse.len());
    for (n, dw) in coarse.iter().enumerate() {
        let z = stream.normals(n as u64, dw.len());
        let a: Vec<f64> = dw.iter().zip(&z).map(|(w, z)| 0.5 * w + s * z).collect();
        let b: Vec<f64> = dw.iter().zip(&a).map(|(w, a)| w - a).collect();
        fine.push(a);
        fine.push(b);
    }
    fine
}

/// One divergence-free face velocity field per noise mode.
#[derive(Clone, Debug, PartialEq)]
pub struct XiBasis {
    grid: Grid,
    modes: Vec<FaceField>,
}

/// Parameters of the synthetic ξ generator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct XiSpec {
    pub modes: usize,
    /// Peak speed of the leading mode (m s^-1/2).
    pub amplitude: f64,
    /// Decay exponent of the amplitude with mode number.
    pub spectrum: f64,
    /// Layer-2 pattern relative to layer 1.
    pub layer_ratio: f64,
    pub seed: u64,
}

/// Face velocities of a node stream function: `ξᵘ = Δ_y ζ`, `ξᵛ = −Δ_x ζ`.
fn faces_from_nodes(grid: &Grid, nodes: &[f64], layer: usize, out: &mut FaceField) {
    let nx = grid.nx;
    let u = out.x_layer_mut(layer);
    for j in 0..grid.ny {
        for i in 0..nx {
            u[j * nx + i] = (nodes[(j + 1) * nx + i] - nodes[j * nx + i]) / grid.dy;
        }
    }
    let v = out.y_layer_mut(layer);
    for j in 0..=grid.ny {
        for i in 0..nx {
            v[j * nx + i] = -(nodes[j * nx + (i + 1) % nx] - nodes[j * nx + i]) / grid.dx;
        }
    }
}

/// Trigonometric modes `(m, n, cos?)` in order of increasing wavenumber.
fn mode_catalogue(grid: &Grid) -> Vec<(usize, usize, bool)> {
    let mmax = (grid.nx - 1) / 2;
    let nmax = grid.ny - 1;
    let mut out = Vec::with_capacity(2 * mmax * nmax);
    for m in 1..=mmax {
        for n in 1..=nmax {
            out.push((m, n, false));
            out.push((m, n, true));
        }
    }
    out.sort_by_key(|&(m, n, c)| (m * m + n * n, m, n, c));
    out
}

/// Synthesises `K` low-wavenumber modes
/// `ζ_k = ± a_k/κ_k · {sin, cos}(2πm x/Lx) · sin(nπ y/Ly)` with
/// `a_k = amplitude · (|(m,n)|/√2)^(−spectrum)`, evaluated at cell corners.
/// The seed picks the sign of every mode.
pub fn synthesize_xi(grid: &Grid, spec: &XiSpec) -> Result<XiBasis> {
    if spec.modes == 0 {
        return Err(QgError::InvalidParameter("at least one noise mode is required".into()));
    }
    let catalogue = mode_catalogue(grid);
    if spec.modes > catalogue.len() {
        return Err(QgError::TooManyModes {
            requested: spec.modes,
            available: catalogue.len(),
        });
    }
    let stream = NoiseStream::new(spec.seed);
    let signs = stream.uniforms(0, spec.modes);
    let nx = grid.nx;
    let mut modes = Vec::with_capacity(spec.modes);
    for (k, &(m, n, cosine)) in catalogue.iter().take(spec.modes).enumerate() {
        let kx = 2.0 * PI * m as f64 / grid.lx;
        let ky = PI * n as f64 / grid.ly;
        let kappa = (kx * kx + ky * ky).sqrt();
        let rel = (((m * m + n * n) as f64) / 2.0).sqrt();
        let sign = if signs[k] < 0.5 { -1.0 } else { 1.0 };
        let a = sign * spec.amplitude * rel.powf(-spec.spectrum) / kappa;
        let mut nodes = vec![0.0; grid.y_faces()];
        // rows 0 and ny stay exactly zero so the wall-normal component vanishes
        for j in 1..grid.ny {
            let sy = (ky * j as f64 * grid.dy).sin();
            for i in 0..nx {
                let phase = kx * i as f64 * grid.dx;
                let sx = if cosine { phase.cos() } else { phase.sin() };
                nodes[j * nx + i] = a * sx * sy;
            }
        }
        let mut field = FaceField::zeros(*grid);
        faces_from_nodes(grid, &nodes, 0, &mut field);
        nodes.iter_mut().for_each(|z| *z *= spec.layer_ratio);
        faces_from_nodes(grid, &nodes, 1, &mut field);
        modes.push(field);
    }
    Ok(XiBasis { grid: *grid, modes })
}

impl XiBasis {
    /// Validates and wraps externally supplied mode fields.
    pub fn new(grid: Grid, modes: Vec<FaceField>) -> Result<Self> {
        if modes.iter().any(|m| m.grid() != &grid) {
            return Err(QgError::GridMismatch("noise mode on a different grid".into()));
        }
        let basis = Self { grid, modes };
        basis.check_divergence(DIVERGENCE_TOLERANCE)?;
        Ok(basis)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn modes(&self) -> &[FaceField] {
        &self.modes
    }

    pub fn mode(&self, k: usize) -> &FaceField {
        &self.modes[k]
    }

    /// `Σ_k w_k ξ_k`.
    pub fn combine(&self, weights: &[f64]) -> Result<FaceField> {
        if weights.len() != self.modes.len() {
            return Err(QgError::Dimension {
                what: "noise weights",
                expected: self.modes.len(),
                got: weights.len(),
            });
        }
        let mut out = FaceField::zeros(self.grid);
        for (m, w) in self.modes.iter().zip(weights) {
            if *w != 0.0 {
                out.axpy(*w, m);
            }
        }
        Ok(out)
    }

    /// Largest face value over all modes.
    pub fn max_speed(&self) -> f64 {
        self.modes.iter().map(FaceField::max_abs).fold(0.0, f64::max)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for m in &mut out.modes {
            m.scale(factor);
        }
        out
    }

    /// Largest net cell outflow (wall-normal flow counted as outflow),
    /// relative to the largest gross face flux of the basis.
    pub fn divergence_residual(&self) -> f64 {
        let g = &self.grid;
        let mut worst_net: f64 = 0.0;
        let mut worst_gross: f64 = 0.0;
        for m in &self.modes {
            for l in 0..LAYERS {
                for j in 0..g.ny {
                    for i in 0..g.nx {
                        let fw = m.x_at(l, i as isize, j) * g.dy;
                        let fe = m.x_at(l, i as isize + 1, j) * g.dy;
                        let fs = m.y_at(l, i, j) * g.dx;
                        let fn_ = m.y_at(l, i, j + 1) * g.dx;
                        let mut net = fe - fw + fn_ - fs;
                        if j == 0 {
                            net = net.abs().max(fs.abs());
                        }
                        if j == g.ny - 1 {
                            net = net.abs().max(fn_.abs());
                        }
                        worst_net = worst_net.max(net.abs());
                        worst_gross = worst_gross.max(fw.abs() + fe.abs() + fs.abs() + fn_.abs());
                    }
                }
            }
        }
        if worst_gross == 0.0 {
            0.0
        } else {
            worst_net / worst_gross
        }
    }

    pub fn check_divergence(&self, tolerance: f64) -> Result<()> {
        let found = self.divergence_residual();
        if !(found <= tolerance) {
            return Err(QgError::Divergence { found, tolerance });
        }
        Ok(())
    }

    pub fn to_snapshot(&self) -> Snapshot {
        let mut values = Vec::with_capacity(self.modes.len() * LAYERS * 2 * self.grid.y_faces());
        for m in &self.modes {
            for l in 0..LAYERS {
                values.extend_from_slice(m.x_layer(l));
                values.extend_from_slice(m.y_layer(l));
            }
        }
        Snapshot {
            nx: self.grid.nx as u32,
            ny: self.grid.ny as u32,
            layers: LAYERS as u32,
            kind: SnapshotKind::XiBasis,
            modes: self.modes.len() as u32,
            aux: 0.0,
            values,
        }
    }

    pub fn from_snapshot(snap: Snapshot, grid: Grid) -> Result<Self> {
        if snap.kind != SnapshotKind::XiBasis {
            return Err(QgError::Format {
                offset: 16,
                message: format!("expected a noise basis, found {:?}", snap.kind),
            });
        }
        if snap.nx as usize != grid.nx || snap.ny as usize != grid.ny {
            return Err(QgError::GridMismatch(format!(
                "noise basis is {}x{}, grid is {}x{}",
                snap.nx, snap.ny, grid.nx, grid.ny
            )));
        }
        let (nxf, nyf) = (grid.cells(), grid.y_faces());
        let mut values = snap.values.iter().copied();
        let mut modes = Vec::with_capacity(snap.modes as usize);
        for _ in 0..snap.modes {
            let mut f = FaceField::zeros(grid);
            for l in 0..LAYERS {
                f.x_layer_mut(l)
                    .iter_mut()
                    .zip(values.by_ref().take(nxf))
                    .for_each(|(d, s)| *d = s);
                f.y_layer_mut(l)
                    .iter_mut()
                    .zip(values.by_ref().take(nyf))
                    .for_each(|(d, s)| *d = s);
            }
            if !f.is_finite() {
                return Err(QgError::NonFinite("noise basis file"));
            }
            modes.push(f);
        }
        Self::new(grid, modes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_snapshot().write(path)
    }

    /// Reads and validates a basis; a failed divergence check is an error.
    pub fn load(path: &Path, grid: Grid) -> Result<Self> {
        Self::from_snapshot(Snapshot::read(path)?, grid)
    }
}

/// Coefficients of the two-level extrapolation applied to the noise β-term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BetaExtrapolation {
    /// `3 Rⁿ − Rⁿ⁻¹`.
    #[default]
    Verbatim,
    /// `(3/2) Rⁿ − (1/2) Rⁿ⁻¹`, matching the deterministic β-term.
    Consistent,
}

impl BetaExtrapolation {
    /// Net weight `a − b`: ξ is time-independent, so `Rⁿ = Rⁿ⁻¹`.
    pub fn net_factor(self) -> f64 {
        match self {
            Self::Verbatim => 3.0 - 1.0,
            Self::Consistent => 1.5 - 0.5,
        }
    }
}

/// Aggregates the noise of one step. `lambda`, when present, shifts the
/// corrector increments to `ΔW_k + λ_k δt`.
pub fn transport_noise(
    xi: &XiBasis,
    dw: &[f64],
    lambda: Option<&[f64]>,
    dt: f64,
    beta: BetaExtrapolation,
) -> Result<TransportNoise> {
    let xi_dw = xi.combine(dw)?;
    let xi_dw_corrector = match lambda {
        None => xi_dw.clone(),
        Some(l) => {
            if l.len() != dw.len() {
                return Err(QgError::Dimension {
                    what: "nudging drift",
                    expected: dw.len(),
                    got: l.len(),
                });
            }
            let shifted: Vec<f64> = dw.iter().zip(l).map(|(w, l)| w + l * dt).collect();
            xi.combine(&shifted)?
        }
    };
    Ok(TransportNoise {
        xi_dw,
        xi_dw_corrector,
        beta_factor: beta.net_factor(),
    })
}

/// One stochastic step driven by the increments `dw`.
pub fn stoch_step(
    model: &Model,
    state: &mut ModelState,
    xi: &XiBasis,
    dw: &[f64],
    lambda: Option<&[f64]>,
    beta: BetaExtrapolation,
) -> Result<()> {
    if xi.grid() != model.grid() {
        return Err(QgError::GridMismatch("noise basis and model grids differ".into()));
    }
    let noise = transport_noise(xi, dw, lambda, model.params().dt, beta)?;
    model.step_with(state, Some(&noise))
}

/// A step stopped before its corrector: the new centre PV is
/// `base + Σ_k directions_k · c_k` with `c_k = ΔW_k + λ_k δt`.
#[derive(Clone, Debug)]
pub struct AffineStep {
    pub inputs: CorrectorInputs,
    pub base: LayeredField,
    pub directions: Vec<LayeredField>,
}

impl AffineStep {
    pub fn evaluate(&self, coeffs: &[f64]) -> LayeredField {
        let mut q = self.base.clone();
        for (d, c) in self.directions.iter().zip(coeffs) {
            q.axpy(*c, d);
        }
        q
    }
}

/// Per-mode corrector tendency `(G_k(faces) + G_{k,β}) / 2`.
fn mode_direction(model: &Model, faces: &FaceField, xi_k: &FaceField, beta: BetaExtrapolation) -> LayeredField {
    let mut d = advective_divergence(faces, xi_k);
    d.axpy(beta.net_factor(), &beta_term(xi_k, model.beta_eff()));
    d.scale(0.5);
    d
}

pub fn affine_step(
    model: &Model,
    state: &ModelState,
    xi: &XiBasis,
    dw: &[f64],
    beta: BetaExtrapolation,
) -> Result<AffineStep> {
    let noise = transport_noise(xi, dw, None, model.params().dt, beta)?;
    let inputs = model.prepare_corrector(state, Some(&noise))?;
    let base = model.corrector(&inputs, None);
    let directions = xi
        .modes()
        .iter()
        .map(|m| mode_direction(model, &inputs.faces, m, beta))
        .collect();
    Ok(AffineStep {
        inputs,
        base,
        directions,
    })
}

/// Agreement of the scheme with its Heun (predictor / averaged corrector)
/// reading, and the size of the terms of the one-step expansion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeunReport {
    /// Largest difference between the scheme and the Heun form, relative to max|qⁿ⁺¹|.
    pub max_rel_diff: f64,
    /// max|Δt F(qⁿ)|.
    pub order_dt: f64,
    /// max|Σ_k G_k(qⁿ) ΔW_k|.
    pub order_dw: f64,
    /// max|½ Σ_{k1,k2} G_{k1}(G_{k2}(qⁿ)) ΔW_{k1} ΔW_{k2}|.
    pub quadratic: f64,
}

/// Re-derives one stochastic step as `q* = qⁿ + ½T(qⁿ)`,
/// `qⁿ⁺¹ = q* + ½T(q*)` with `T = Δt F + Σ_k G_k ΔW_k`, plus the β and
/// viscous sources, evaluating every mode separately, and compares with
/// [`stoch_step`]. The second stage reads the scheme's own upwinded faces.
pub fn heun_form_check(
    model: &Model,
    state: &ModelState,
    xi: &XiBasis,
    dw: &[f64],
    beta: BetaExtrapolation,
) -> Result<HeunReport> {
    let g = *model.grid();
    if g.nx > 32 || g.ny > 16 {
        return Err(QgError::InvalidGrid(
            "the Heun-form check is meant for grids up to 32x16".into(),
        ));
    }
    let p = *model.params();
    let dt = p.dt;

    let mut scheme = state.clone();
    stoch_step(model, &mut scheme, xi, dw, None, beta)?;

    // Tendency over one step from a face state: Δt F + Σ_k G_k ΔW_k.
    let tendency = |faces: &FaceField, vel: &FaceField| -> (LayeredField, LayeredField, LayeredField) {
        let mut det = advective_divergence(faces, vel);
        det.scale(dt);
        let mut sto = LayeredField::zeros(g);
        for (m, w) in xi.modes().iter().zip(dw) {
            sto.axpy(*w, &advective_divergence(faces, m));
        }
        let mut total = det.clone();
        total.axpy(1.0, &sto);
        (total, det, sto)
    };
    let mut beta_noise = LayeredField::zeros(g);
    for (m, w) in xi.modes().iter().zip(dw) {
        beta_noise.axpy(w * beta.net_factor(), &beta_term(m, model.beta_eff()));
    }
    let r_n = beta_term(&state.vel, model.beta_eff());

    let mut sources = r_n;
    sources.scale(1.5);
    sources.axpy(-0.5, &state.prev_beta_r);
    let first_share = match p.staging {
        SourceStaging::Split => 0.5,
        SourceStaging::Predictor => 1.0,
    };

    let (t_n, det_n, sto_n) = tendency(&state.q_faces, &state.vel);
    let mut q_star = state.q.clone();
    q_star.axpy(0.5, &t_n);
    q_star.axpy(first_share * dt, &sources);
    q_star.axpy(0.5, &beta_noise);
    let inv = model.invert(&q_star, state.mass_target)?;
    let visc = crate::elliptic::viscous_tendency(&inv, p.nu, p.mu);
    q_star.axpy(first_share * dt, &visc);
    sources.axpy(1.0, &visc);

    // The second stage reads the scheme's upwinded faces and extrapolated velocities.
    let noise = transport_noise(xi, dw, None, dt, beta)?;
    let inputs = model.prepare_corrector(state, Some(&noise))?;
    let (t_star, _, _) = tendency(&inputs.faces, &inputs.vel_new);
    let mut heun = q_star;
    heun.axpy(0.5, &t_star);
    heun.axpy(0.5, &beta_noise);
    heun.axpy((1.0 - first_share) * dt, &sources);

    let scale = scheme.q.max_abs().max(f64::MIN_POSITIVE);
    let max_rel_diff = heun.max_abs_diff(&scheme.q) / scale;

    let inner = FaceField::interpolate(&sto_n);
    let mut quad = LayeredField::zeros(g);
    for (m, w) in xi.modes().iter().zip(dw) {
        quad.axpy(0.5 * w, &advective_divergence(&inner, m));
    }
    Ok(HeunReport {
        max_rel_diff,
        order_dt: det_n.max_abs(),
        order_dw: sto_n.max_abs(),
        quadratic: quad.max_abs(),
    })
}
