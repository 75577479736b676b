#![allow(dead_code)]

use std::f64::consts::PI;

use qgda_core::cabaret::{Model, ModelParams, ModelState, SourceStaging};
use qgda_core::elliptic::Stratification;
use qgda_core::stochastic::NoiseStream;
use qgda_core::{Grid, LayeredField};

pub const LX: f64 = 3.84e6;
pub const LY: f64 = 1.92e6;

pub fn strat() -> Stratification {
    Stratification::from_per_km2(4.22e-3, 1.41e-3).unwrap()
}

pub fn physical(dt: f64) -> ModelParams {
    ModelParams {
        beta: 2.0e-11,
        nu: 3.125,
        mu: 4.0e-8,
        background_u: [0.06, 0.0],
        dt,
        courant_limit: 1.0,
        staging: SourceStaging::Split,
    }
}

pub fn unforced(dt: f64) -> ModelParams {
    ModelParams {
        beta: 0.0,
        nu: 0.0,
        mu: 0.0,
        background_u: [0.0, 0.0],
        ..physical(dt)
    }
}

pub fn model(nx: usize, ny: usize, params: ModelParams) -> Model {
    Model::new(Grid::new(nx, ny, LX, LY).unwrap(), strat(), params).unwrap()
}

/// A few random large-scale modes per layer.
pub fn smooth_pv(grid: &Grid, seed: u64, amplitude: f64) -> LayeredField {
    let u = NoiseStream::new(seed).uniforms(0, 2 * 6 * 2);
    LayeredField::from_fn(*grid, |l, i, j| {
        let (x, y) = grid.cell_center(i, j);
        (0..6)
            .map(|k| {
                let a = u[l * 12 + 2 * k] - 0.5;
                let phase = 2.0 * PI * u[l * 12 + 2 * k + 1];
                let m = (k % 3 + 1) as f64;
                let n = (k / 2 + 1) as f64;
                a * (2.0 * PI * m * x / grid.lx + phase).cos() * (n * PI * y / grid.ly).sin()
            })
            .sum::<f64>()
            * amplitude
    })
}

/// A smooth state whose largest face speed is `speed`.
pub fn smooth_state(model: &Model, seed: u64, speed: f64) -> ModelState {
    let q = smooth_pv(model.grid(), seed, 1.0);
    let vel = model.diagnostic_velocity(&q, 0.0).unwrap();
    let bg = model.params().background_u;
    let mut rel = vel.clone();
    for (l, b) in bg.iter().enumerate() {
        rel.x_layer_mut(l).iter_mut().for_each(|u| *u += b);
    }
    let scale = speed / rel.max_abs();
    let mut q = q;
    q.scale(scale);
    model.init_state(q, 0.0).unwrap()
}
