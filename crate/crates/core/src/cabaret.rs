//! CABARET predictor / extrapolator / corrector step for the two-layer
//! system, with β-term, lateral viscosity and bottom friction.
//!
//! The same machinery runs the stochastic step: transport noise enters
//! as an extra face velocity `Ξ/Δt` during advection, upwinding and
//! limiting, plus the matching β contribution.

use crate::elliptic::{velocities_from_psi, viscous_tendency, EllipticWorkspace, Inversion, Stratification};
use crate::error::{QgError, Result};
use crate::field::{FaceField, LayeredField, LAYERS};
use crate::grid::Grid;

/// Physical and numerical parameters of the deterministic dynamics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelParams {
    /// Planetary vorticity gradient β (m⁻¹ s⁻¹).
    pub beta: f64,
    /// Lateral eddy viscosity ν (m² s⁻¹).
    pub nu: f64,
    /// Bottom friction μ (s⁻¹), applied to the lower layer.
    pub mu: f64,
    /// Background zonal velocities U per layer (m s⁻¹).
    pub background_u: [f64; 2],
    /// Time step (s).
    pub dt: f64,
    /// Largest admissible Courant number, checked every step.
    pub courant_limit: f64,
    /// How the β, viscous and friction sources are split between the
    /// predictor and the corrector.
    pub staging: SourceStaging,
}

/// Placement of the non-advective sources within a step. Both variants
/// add the same `Δt (F_β + F_visc)` to the centres over a full step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SourceStaging {
    /// Half of the sources in the predictor and half in the corrector, so
    /// `q^{n+1/2}` (used for upwinding and the half-step inversion) is a
    /// genuine half-level value. Second order in time.
    #[default]
    Split,
    /// All of the sources in the predictor. The half-level state then
    /// carries a full-step source, which lowers the order to about 3/2.
    Predictor,
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(QgError::InvalidParameter(what.to_string()));
        if !(self.nu >= 0.0) {
            return bad("viscosity must be non-negative");
        }
        if !(self.mu >= 0.0) {
            return bad("bottom friction must be non-negative");
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("time step must be positive");
        }
        if !(self.courant_limit > 0.0) {
            return bad("Courant limit must be positive");
        }
        if !self.beta.is_finite() || !self.background_u.iter().all(|u| u.is_finite()) {
            return bad("beta and background velocities must be finite");
        }
        Ok(())
    }
}

/// Prognostic state and the history the three-level extrapolations need.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    /// PV anomaly at cell centres.
    pub q: LayeredField,
    /// PV anomaly on x- and y-faces.
    pub q_faces: FaceField,
    /// Face velocities at the current level (u on x-faces, v on y-faces).
    pub vel: FaceField,
    /// Face velocities of the previous half level.
    pub vel_half_prev: FaceField,
    /// β-term `R` of the previous level.
    pub prev_beta_r: LayeredField,
    /// Prescribed value of ∬(ψ1 − ψ2).
    pub mass_target: f64,
    pub time: f64,
    pub step_index: u64,
}

impl ModelState {
    pub fn grid(&self) -> &Grid {
        self.q.grid()
    }

    pub fn is_finite(&self) -> bool {
        self.q.is_finite()
            && self.q_faces.is_finite()
            && self.vel.is_finite()
            && self.vel_half_prev.is_finite()
            && self.prev_beta_r.is_finite()
    }
}

/// Half-step quantities produced by the predictor.
#[derive(Clone, Debug)]
pub struct HalfStep {
    pub q_half: LayeredField,
    /// `F_β + F_visc` still to be applied by the corrector (over Δt/2),
    /// when sources are split.
    pub deferred: Option<LayeredField>,
    pub inversion: Inversion,
    pub vel_half: FaceField,
    pub beta_r: LayeredField,
}

/// Transport noise of one step, aggregated over modes.
#[derive(Clone, Debug)]
pub struct TransportNoise {
    /// `Σ ξ_k ΔW_k`, used in the predictor and for upwinding.
    pub xi_dw: FaceField,
    /// `Σ ξ_k (ΔW_k + λ_k δt)`, used in the corrector.
    pub xi_dw_corrector: FaceField,
    /// Net weight `a − b` of the `a Rⁿ − b Rⁿ⁻¹` β extrapolation applied to
    /// the (time-independent) noise β-term.
    pub beta_factor: f64,
}

/// Everything the corrector needs, exposed so that the nudged step can
/// treat the final state as an affine function of the corrector increments.
#[derive(Clone, Debug)]
pub struct CorrectorInputs {
    pub half: HalfStep,
    pub faces: FaceField,
    pub vel_new: FaceField,
}

/// A grid, its elliptic workspace and the model parameters. Immutable and
/// shared read-only between particles.
#[derive(Debug)]
pub struct Model {
    params: ModelParams,
    elliptic: EllipticWorkspace,
    beta_eff: [f64; 2],
}

/// `F = −(Δ_x[u q] + Δ_y[v q])`. Wall-normal fluxes are zero.
pub fn advective_divergence(q_faces: &FaceField, vel: &FaceField) -> LayeredField {
    let g = *q_faces.grid();
    let (nx, ny) = (g.nx, g.ny);
    let mut out = LayeredField::zeros(g);
    for l in 0..LAYERS {
        let (qx, qy) = (q_faces.x_layer(l), q_faces.y_layer(l));
        let (u, v) = (vel.x_layer(l), vel.y_layer(l));
        let f = out.layer_mut(l);
        for j in 0..ny {
            for i in 0..nx {
                let w = j * nx + i;
                let e = j * nx + (i + 1) % nx;
                let dxf = (u[e] * qx[e] - u[w] * qx[w]) / g.dx;
                let south = if j == 0 { 0.0 } else { v[w] * qy[w] };
                let north = if j == ny - 1 { 0.0 } else { v[w + nx] * qy[w + nx] };
                f[w] = -(dxf + (north - south) / g.dy);
            }
        }
    }
    out
}

/// β-term `R = −(β_eff/2)(v_south + v_north)` per cell.
pub fn beta_term(vel: &FaceField, beta_eff: [f64; 2]) -> LayeredField {
    let g = *vel.grid();
    let nx = g.nx;
    let mut out = LayeredField::zeros(g);
    for l in 0..LAYERS {
        let v = vel.y_layer(l);
        let r = out.layer_mut(l);
        for (k, rk) in r.iter_mut().enumerate() {
            *rk = -0.5 * beta_eff[l] * (v[k] + v[k + nx]);
        }
    }
    out
}

/// Clamps a candidate face value into `[min(neigh) + dt·Q, max(neigh) + dt·Q]`.
pub fn clip_minmax(candidate: f64, neigh: [f64; 3], q_source: f64, dt: f64) -> f64 {
    let lo = neigh[0].min(neigh[1]).min(neigh[2]) + dt * q_source;
    let hi = neigh[0].max(neigh[1]).max(neigh[2]) + dt * q_source;
    candidate.max(lo).min(hi)
}

/// Largest face Courant number `|u|Δt/Δx`, `|v|Δt/Δy`.
pub fn courant_number(vel: &FaceField, dt: f64) -> f64 {
    let g = vel.grid();
    let mut c: f64 = 0.0;
    for l in 0..LAYERS {
        for u in vel.x_layer(l) {
            c = c.max(u.abs() * dt / g.dx);
        }
        for v in vel.y_layer(l) {
            c = c.max(v.abs() * dt / g.dy);
        }
    }
    c
}

/// Upwinds new face values by the `2·centre − opposite face` rule and
/// limits them.
///
/// `adv_new` selects the upwind direction; `adv_half` enters the source
/// estimate of the limiter bounds. Wall faces are extrapolated one-sidedly
/// from the two nearest interior cells.
pub fn upwind_and_limit(
    q_n: &LayeredField,
    q_faces_n: &FaceField,
    q_half: &LayeredField,
    adv_half: &FaceField,
    adv_new: &FaceField,
    dt: f64,
) -> FaceField {
    let g = *q_n.grid();
    let (nx, ny) = (g.nx, g.ny);
    let half_dt = 0.5 * dt;
    let mut out = FaceField::zeros(g);
    for l in 0..LAYERS {
        let qn = q_n.layer(l);
        let qh = q_half.layer(l);
        let (fx, fy) = (q_faces_n.x_layer(l), q_faces_n.y_layer(l));
        let (uh, vh) = (adv_half.x_layer(l), adv_half.y_layer(l));
        let (un, vn) = (adv_new.x_layer(l), adv_new.y_layer(l));

        // x-faces: face i sits between cells i−1 and i
        let ox = out.x_layer_mut(l);
        for j in 0..ny {
            let row = j * nx;
            for i in 0..nx {
                let c = if un[row + i] >= 0.0 { (i + nx - 1) % nx } else { i };
                let (left, right) = (row + c, row + (c + 1) % nx);
                let opposite = if un[row + i] >= 0.0 { left } else { right };
                let cell = row + c;
                let cand = 2.0 * qh[cell] - fx[opposite];
                let source =
                    (qh[cell] - qn[cell]) / half_dt + 0.5 * (uh[left] + uh[right]) * (fx[right] - fx[left]) / g.dx;
                ox[row + i] = clip_minmax(cand, [fx[left], qn[cell], fx[right]], source, dt);
            }
        }

        // y-faces: face j sits between cells j−1 and j; rows 0 and ny are walls
        let oy = out.y_layer_mut(l);
        for j in 0..=ny {
            for i in 0..nx {
                let cj = if j == 0 {
                    0
                } else if j == ny || vn[j * nx + i] >= 0.0 {
                    j - 1
                } else {
                    j
                };
                let (south, north) = (cj * nx + i, (cj + 1) * nx + i);
                let opposite = if j == cj { north } else { south };
                let cell = cj * nx + i;
                if j == 0 || j == ny {
                    // No characteristic reaches a wall face and no flux
                    // crosses it, so it keeps no memory and is not limited:
                    // extrapolate the two nearest centres to the new time
                    // level and then to the wall.
                    let inner = if j == 0 { nx + i } else { (ny - 2) * nx + i };
                    let x0 = 2.0 * qh[cell] - qn[cell];
                    let x1 = 2.0 * qh[inner] - qn[inner];
                    oy[j * nx + i] = 1.5 * x0 - 0.5 * x1;
                    continue;
                }
                let cand = 2.0 * qh[cell] - fy[opposite];
                let source =
                    (qh[cell] - qn[cell]) / half_dt + 0.5 * (vh[south] + vh[north]) * (fy[north] - fy[south]) / g.dy;
                oy[j * nx + i] = clip_minmax(cand, [fy[south], qn[cell], fy[north]], source, dt);
            }
        }
    }
    out
}

impl Model {
    pub fn new(grid: Grid, strat: Stratification, params: ModelParams) -> Result<Self> {
        params.validate()?;
        let elliptic = EllipticWorkspace::new(grid, strat)?;
        let [u1, u2] = params.background_u;
        let beta_eff = [params.beta + strat.s1 * (u1 - u2), params.beta + strat.s2 * (u2 - u1)];
        Ok(Self {
            params,
            elliptic,
            beta_eff,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn grid(&self) -> &Grid {
        self.elliptic.grid()
    }

    pub fn elliptic(&self) -> &EllipticWorkspace {
        &self.elliptic
    }

    /// β plus the PV gradient of the sheared background flow, per layer.
    pub fn beta_eff(&self) -> [f64; 2] {
        self.beta_eff
    }

    /// Starts a trajectory from centre PV; faces are interpolated from the
    /// centres and the history is seeded with the initial values.
    pub fn init_state(&self, q: LayeredField, mass_target: f64) -> Result<ModelState> {
        if q.grid() != self.grid() {
            return Err(QgError::GridMismatch("initial PV is on a different grid".into()));
        }
        let inv = self.elliptic.invert(&q, mass_target)?;
        let vel = velocities_from_psi(&inv, self.params.background_u);
        let prev_beta_r = beta_term(&vel, self.beta_eff);
        Ok(ModelState {
            q_faces: FaceField::interpolate(&q),
            q,
            vel_half_prev: vel.clone(),
            vel,
            prev_beta_r,
            mass_target,
            time: 0.0,
            step_index: 0,
        })
    }

    /// Solves for the stream function of a PV field.
    pub fn invert(&self, q: &LayeredField, mass_target: f64) -> Result<Inversion> {
        self.elliptic.invert(q, mass_target)
    }

    /// Face velocities diagnosed from centre PV (including the background flow).
    pub fn diagnostic_velocity(&self, q: &LayeredField, mass_target: f64) -> Result<FaceField> {
        let inv = self.elliptic.invert(q, mass_target)?;
        Ok(velocities_from_psi(&inv, self.params.background_u))
    }

    fn advecting(&self, vel: &FaceField, noise: Option<&FaceField>) -> FaceField {
        let mut adv = vel.clone();
        if let Some(xi) = noise {
            adv.axpy(1.0 / self.params.dt, xi);
        }
        adv
    }

    /// `q^{n+1/2} = qⁿ + (Δt/2)F + c Δt F_β + c Δt F_visc` with `c = 1/2`
    /// (split sources) or `c = 1`. ψ is solved from the state before the
    /// viscous term is added; `F_β = (3/2)Rⁿ − (1/2)Rⁿ⁻¹`.
    pub fn predictor(&self, state: &ModelState, noise: Option<&TransportNoise>) -> Result<HalfStep> {
        let dt = self.params.dt;
        let adv = self.advecting(&state.vel, noise.map(|n| &n.xi_dw));
        let f = advective_divergence(&state.q_faces, &adv);
        let beta_r = beta_term(&state.vel, self.beta_eff);

        let source_dt = match self.params.staging {
            SourceStaging::Split => 0.5 * dt,
            SourceStaging::Predictor => dt,
        };
        let mut sources = beta_r.clone();
        sources.scale(1.5);
        sources.axpy(-0.5, &state.prev_beta_r);

        let mut q_half = state.q.clone();
        q_half.axpy(0.5 * dt, &f);
        q_half.axpy(source_dt, &sources);
        if let Some(n) = noise {
            q_half.axpy(0.5 * n.beta_factor, &beta_term(&n.xi_dw, self.beta_eff));
        }

        let inversion = self.elliptic.invert(&q_half, state.mass_target)?;
        if self.params.nu != 0.0 || self.params.mu != 0.0 {
            let visc = viscous_tendency(&inversion, self.params.nu, self.params.mu);
            q_half.axpy(source_dt, &visc);
            sources.axpy(1.0, &visc);
        }
        let deferred = match self.params.staging {
            SourceStaging::Split => Some(sources),
            SourceStaging::Predictor => None,
        };
        let vel_half = velocities_from_psi(&inversion, self.params.background_u);
        Ok(HalfStep {
            q_half,
            deferred,
            inversion,
            vel_half,
            beta_r,
        })
    }

    /// Extrapolates face velocities to the new level and upwinds/limits face PV.
    pub fn extrapolator(
        &self,
        state: &ModelState,
        half: &HalfStep,
        noise: Option<&TransportNoise>,
    ) -> (FaceField, FaceField) {
        let mut vel_new = half.vel_half.clone();
        vel_new.combine(1.5, -0.5, &state.vel_half_prev);
        let xi = noise.map(|n| &n.xi_dw);
        let adv_new = self.advecting(&vel_new, xi);
        let adv_half = self.advecting(&half.vel_half, xi);
        let faces = upwind_and_limit(
            &state.q,
            &state.q_faces,
            &half.q_half,
            &adv_half,
            &adv_new,
            self.params.dt,
        );
        (faces, vel_new)
    }

    /// `q^{n+1} = q^{n+1/2} + (Δt/2)F(new faces, u^{n+1})`, plus the
    /// deferred half of the sources and the noise terms.
    pub fn corrector(&self, inputs: &CorrectorInputs, noise: Option<&TransportNoise>) -> LayeredField {
        let dt = self.params.dt;
        let adv = self.advecting(&inputs.vel_new, noise.map(|n| &n.xi_dw_corrector));
        let f = advective_divergence(&inputs.faces, &adv);
        let mut q = inputs.half.q_half.clone();
        q.axpy(0.5 * dt, &f);
        if let Some(src) = &inputs.half.deferred {
            q.axpy(0.5 * dt, src);
        }
        if let Some(n) = noise {
            q.axpy(0.5 * n.beta_factor, &beta_term(&n.xi_dw_corrector, self.beta_eff));
        }
        q
    }

    fn check_courant(&self, state: &ModelState, noise: Option<&TransportNoise>) -> Result<()> {
        let adv = self.advecting(&state.vel, noise.map(|n| &n.xi_dw));
        let c = courant_number(&adv, self.params.dt);
        if !(c <= self.params.courant_limit) {
            return Err(QgError::Cfl {
                step: state.step_index,
                courant: c,
                limit: self.params.courant_limit,
            });
        }
        Ok(())
    }

    /// Runs predictor and extrapolator; the corrector is left to the caller.
    pub fn prepare_corrector(&self, state: &ModelState, noise: Option<&TransportNoise>) -> Result<CorrectorInputs> {
        if !state.is_finite() {
            return Err(QgError::NonFinite("model state before step"));
        }
        self.check_courant(state, noise)?;
        let half = self.predictor(state, noise)?;
        let (faces, vel_new) = self.extrapolator(state, &half, noise);
        Ok(CorrectorInputs { half, faces, vel_new })
    }

    /// Installs the new level and advances the stored history.
    pub fn commit(&self, state: &mut ModelState, inputs: CorrectorInputs, q_new: LayeredField) -> Result<()> {
        if !q_new.is_finite() {
            return Err(QgError::NonFinite("PV after corrector"));
        }
        let CorrectorInputs { half, faces, vel_new } = inputs;
        state.q = q_new;
        state.q_faces = faces;
        state.vel = vel_new;
        state.vel_half_prev = half.vel_half;
        state.prev_beta_r = half.beta_r;
        state.time += self.params.dt;
        state.step_index += 1;
        Ok(())
    }

    /// One step, with optional transport noise.
    pub fn step_with(&self, state: &mut ModelState, noise: Option<&TransportNoise>) -> Result<()> {
        let inputs = self.prepare_corrector(state, noise)?;
        let q_new = self.corrector(&inputs, noise);
        self.commit(state, inputs, q_new)
    }

    /// One deterministic step.
    pub fn step(&self, state: &mut ModelState) -> Result<()> {
        self.step_with(state, None)
    }

    /// Domain integrals of q and q² summed over layers.
    pub fn casimirs(state: &ModelState) -> (f64, f64) {
        let q = &state.q;
        (q.integral(0) + q.integral(1), q.integral_sq(0) + q.integral_sq(1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(nx: usize, ny: usize) -> (Model, Grid) {
        let g = Grid::new(nx, ny, 1.0e6, 5.0e5).unwrap();
        let params = ModelParams {
            beta: 0.0,
            nu: 0.0,
            mu: 0.0,
            background_u: [0.0, 0.0],
            dt: 600.0,
            courant_limit: 1.0,
            staging: SourceStaging::Split,
        };
        let s = Stratification::from_per_km2(4.22e-3, 1.41e-3).unwrap();
        (Model::new(g, s, params).unwrap(), g)
    }

    #[test]
    fn clip_examples() {
        assert_eq!(clip_minmax(2.5, [1.0, 2.0, 3.0], 0.0, 1.0), 2.5);
        assert_eq!(clip_minmax(5.0, [1.0, 2.0, 3.0], 0.0, 1.0), 3.0);
        assert_eq!(clip_minmax(-1.0, [1.0, 2.0, 3.0], 0.0, 1.0), 1.0);
        // bounds shift by dt·Q
        assert_eq!(clip_minmax(5.0, [1.0, 2.0, 3.0], 0.5, 2.0), 4.0);
    }

    #[test]
    fn zero_velocity_gives_zero_divergence() {
        let g = Grid::new(6, 4, 6.0, 4.0).unwrap();
        let mut faces = FaceField::zeros(g);
        faces.x_layer_mut(0).iter_mut().for_each(|v| *v = 3.0);
        let f = advective_divergence(&faces, &FaceField::zeros(g));
        assert_eq!(f.max_abs(), 0.0);
    }

    #[test]
    fn hand_computed_fluxes_on_four_by_four() {
        let g = Grid::new(4, 4, 4.0, 8.0).unwrap(); // dx = 1, dy = 2
        let mut q = FaceField::zeros(g);
        let mut vel = FaceField::zeros(g);
        // layer 0: x-face values q = i + 1, u = 2 on every face in row 1
        for i in 0..4 {
            q.x_layer_mut(0)[4 + i] = (i + 1) as f64;
            vel.x_layer_mut(0)[4 + i] = 2.0;
        }
        // y-face between rows 1 and 2 at column 3: v = 0.5, q = 4
        vel.y_layer_mut(0)[2 * 4 + 3] = 0.5;
        q.y_layer_mut(0)[2 * 4 + 3] = 4.0;
        let f = advective_divergence(&q, &vel);
        // cell (i,1): −(2(q_{i+1}) − 2 q_i)/1; wrap for i = 3: −(2·1 − 2·4) = 6
        assert_eq!(f.get(0, 0, 1), -2.0);
        assert_eq!(f.get(0, 1, 1), -2.0);
        assert_eq!(f.get(0, 2, 1), -2.0);
        // plus the outgoing north flux 0.5·4/2 = 1
        assert_eq!(f.get(0, 3, 1), 6.0 - 1.0);
        // incoming flux into (3,2)
        assert_eq!(f.get(0, 3, 2), 1.0);
        assert_eq!(f.get(1, 3, 2), 0.0);
        let total: f64 = f.layer(0).iter().sum();
        assert!(total.abs() < 1e-14);
    }

    #[test]
    fn zero_state_stays_zero() {
        let (m, g) = setup(16, 8);
        let mut s = m.init_state(LayeredField::zeros(g), 0.0).unwrap();
        for _ in 0..3 {
            m.step(&mut s).unwrap();
        }
        assert_eq!(s.q.max_abs(), 0.0);
        assert_eq!(s.step_index, 3);
        assert_eq!(s.time, 1800.0);
    }

    #[test]
    fn cfl_violation_is_reported() {
        let g = Grid::new(16, 8, 1.0e6, 5.0e5).unwrap();
        let params = ModelParams {
            beta: 0.0,
            nu: 0.0,
            mu: 0.0,
            background_u: [100.0, 0.0],
            dt: 1.0e4,
            courant_limit: 1.0,
            staging: SourceStaging::Split,
        };
        let s = Stratification::from_per_km2(4.22e-3, 1.41e-3).unwrap();
        let m = Model::new(g, s, params).unwrap();
        let mut st = m.init_state(LayeredField::zeros(g), 0.0).unwrap();
        match m.step(&mut st) {
            Err(QgError::Cfl { courant, .. }) => assert!((courant - 16.0).abs() < 1e-9),
            other => panic!("expected CFL error, got {other:?}"),
        }
    }

    #[test]
    fn parameter_validation() {
        let p = ModelParams {
            beta: 0.0,
            nu: -1.0,
            mu: 0.0,
            background_u: [0.0, 0.0],
            dt: 1.0,
            courant_limit: 1.0,
            staging: SourceStaging::Split,
        };
        assert!(p.validate().is_err());
        assert!(ModelParams { nu: 0.0, dt: 0.0, ..p }.validate().is_err());
    }
}
