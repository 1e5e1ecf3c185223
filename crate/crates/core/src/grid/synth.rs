//! Deterministic synthetic reanalysis: seeded advection–diffusion with a
//! periodic forcing, producing smooth fields with learnable dynamics.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{make_grid, Dataset, NormalizationStats, Splits, StateTensor, VariableSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub n_lat: usize,
    pub n_lon: usize,
    pub channels: usize,
    pub steps: usize,
    pub seed: u64,
    /// Forcing period in steps (40 steps = 10 days at 6 h).
    pub period: usize,
    /// Largest zonal speed in cells per step; channel speeds span half to all of it.
    pub zonal_wind: f64,
    /// Peak meridional speed in cells per step.
    pub meridional_wind: f64,
    pub diffusion: f64,
    /// Linear relaxation towards zero per step.
    pub damping: f64,
    pub forcing: f64,
    /// Fractions of steps in the train and validation splits.
    pub train_fraction: f64,
    pub valid_fraction: f64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            n_lat: 33,
            n_lon: 64,
            channels: 8,
            steps: 600,
            seed: 0,
            period: 40,
            zonal_wind: 0.6,
            meridional_wind: 0.15,
            diffusion: 0.02,
            damping: 0.002,
            forcing: 0.04,
            train_fraction: 400.0 / 600.0,
            valid_fraction: 80.0 / 600.0,
        }
    }
}

impl GeneratorParams {
    fn validate(&self) -> Result<()> {
        if self.steps < 3 {
            return Err(Error::config("generator needs at least 3 steps"));
        }
        if self.period == 0 {
            return Err(Error::config("forcing period must be positive"));
        }
        let courant = self.zonal_wind.abs() + self.meridional_wind.abs() + 4.0 * self.diffusion;
        if courant > 1.0 || self.diffusion < 0.0 || !(0.0..1.0).contains(&self.damping) {
            return Err(Error::config(format!(
                "unstable generator settings (|u|+|v|+4k = {courant})"
            )));
        }
        if !(self.train_fraction >= 0.0
            && self.valid_fraction >= 0.0
            && self.train_fraction + self.valid_fraction <= 1.0)
        {
            return Err(Error::config("split fractions must be within [0, 1]"));
        }
        Ok(())
    }

    pub fn splits(&self) -> Splits {
        let train_end = (self.steps as f64 * self.train_fraction).round() as usize;
        let valid_end = ((self.steps as f64 * (self.train_fraction + self.valid_fraction)).round()
            as usize)
            .clamp(train_end, self.steps);
        Splits {
            train_end,
            valid_end,
        }
    }

    /// Zonal speed of channel `c` in cells per step.
    pub fn zonal_speed(&self, c: usize) -> f64 {
        let frac = if self.channels > 1 {
            c as f64 / (self.channels - 1) as f64
        } else {
            1.0
        };
        self.zonal_wind * (0.5 + 0.5 * frac)
    }

    /// Meridional speed at cell `(i, j)`; vanishes at the poles.
    pub fn meridional_speed(&self, i: usize, j: usize) -> f64 {
        let lat_shape = (PI * i as f64 / (self.n_lat - 1).max(1) as f64).sin();
        self.meridional_wind * (2.0 * PI * j as f64 / self.n_lon as f64).sin() * lat_shape
    }
}

/// Physical offset and scale of a channel, so variables have realistic and
/// very different magnitudes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelProfile {
    pub offset: f64,
    pub scale: f64,
}

impl ChannelProfile {
    pub fn for_channel(name: &str) -> Self {
        let (offset, scale) = match name {
            "t2m" => (288.0, 3.0),
            "u10" | "v10" => (0.0, 5.0),
            "msl" => (101_325.0, 800.0),
            n if n.starts_with('z') => {
                let level: f64 = n[1..].parse().unwrap_or(500.0);
                // rough geopotential of the pressure level
                (9.81 * 29.3 * 288.0 * (1000.0 / level).ln(), 5000.0)
            }
            n if n.starts_with('t') => (250.0, 3.0),
            n if n.starts_with('r') => (50.0, 20.0),
            _ => (0.0, 5.0),
        };
        Self { offset, scale }
    }
}

/// Smooth fixed spatial pattern modulated by the seasonal forcing.
fn forcing_pattern(params: &GeneratorParams, lat: f64, c: usize, j: usize) -> f64 {
    let phase = 0.7 * c as f64;
    lat.to_radians().sin() * (1.0 + 0.3 * (2.0 * PI * j as f64 / params.n_lon as f64 + phase).cos())
}

/// One explicit step of `q_t + u q_x + v q_y = k ∇²q - r q + F(t)` on a
/// `[C,H,W]` field in model units: first-order upwind advection, five-point
/// diffusion, periodic in longitude and replicated at the pole rows.
pub fn advection_diffusion_step(
    params: &GeneratorParams,
    latitudes: &[f64],
    q: &Tensor<f64>,
    t: usize,
) -> Result<Tensor<f64>> {
    let (c, h, w) = q.dims3()?;
    if h != params.n_lat || w != params.n_lon || latitudes.len() != h {
        return Err(Error::shape("field does not match generator grid"));
    }
    let season = params.forcing * (2.0 * PI * t as f64 / params.period as f64).sin();
    let src = q.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        let u = params.zonal_speed(ch);
        let base = ch * h * w;
        let at = |i: usize, j: usize| src[base + i * w + j];
        for i in 0..h {
            let north = i.saturating_sub(1);
            let south = (i + 1).min(h - 1);
            for j in 0..w {
                let west = (j + w - 1) % w;
                let east = (j + 1) % w;
                let x = at(i, j);
                let dx = if u >= 0.0 { x - at(i, west) } else { at(i, east) - x };
                let v = params.meridional_speed(i, j);
                let dy = if v >= 0.0 { x - at(north, j) } else { at(south, j) - x };
                let lap = at(i, west) + at(i, east) + at(north, j) + at(south, j) - 4.0 * x;
                let forcing = season * forcing_pattern(params, latitudes[i], ch, j);
                out[base + i * w + j] =
                    x - u * dx - v * dy + params.diffusion * lap - params.damping * x + forcing;
            }
        }
    }
    Tensor::new(q.shape().to_vec(), out)
}

/// Sum of a few low-wavenumber modes with random phases and amplitudes.
fn initial_field(params: &GeneratorParams, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let (c, h, w) = (params.channels, params.n_lat, params.n_lon);
    let mut data = vec![0.0; c * h * w];
    for ch in 0..c {
        for _ in 0..6 {
            let m = rng.gen_range(1..=4) as f64;
            let n = rng.gen_range(0..=3) as f64;
            let amp = rng.gen_range(0.3..1.0) / (1.0 + 0.5 * m);
            let phi = rng.gen_range(0.0..2.0 * PI);
            let psi = rng.gen_range(0.0..2.0 * PI);
            for i in 0..h {
                let y = (PI * n * i as f64 / (h - 1).max(1) as f64 + psi).cos();
                for j in 0..w {
                    let x = (2.0 * PI * m * j as f64 / w as f64 + phi).cos();
                    data[(ch * h + i) * w + j] += amp * x * y;
                }
            }
        }
    }
    Tensor::new(vec![c, h, w], data).expect("consistent shape")
}

/// Generate a normalized dataset; statistics come from the train split.
pub fn generate_synthetic(params: &GeneratorParams) -> Result<Dataset> {
    params.validate()?;
    let grid = make_grid(params.n_lat, params.n_lon)?;
    let variables = VariableSet::with_channels(params.channels)?;
    let profiles: Vec<ChannelProfile> = variables
        .channel_names()
        .iter()
        .map(|n| ChannelProfile::for_channel(n))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut q = initial_field(params, &mut rng);
    let plane = params.n_lat * params.n_lon;
    let mut physical = Vec::with_capacity(params.steps);
    for t in 0..params.steps {
        if t > 0 {
            q = advection_diffusion_step(params, &grid.latitudes, &q, t - 1)?;
        }
        physical.push(Tensor::from_fn(q.shape().to_vec(), |k| {
            let p = profiles[k / plane];
            p.offset + p.scale * q.data()[k]
        }));
    }

    let splits = params.splits();
    let stats_range = if splits.train_end > 0 {
        0..splits.train_end
    } else {
        0..params.steps
    };
    let stats = NormalizationStats::from_fields(&physical[stats_range])?;
    let states = physical
        .iter()
        .enumerate()
        .map(|(k, p)| {
            Ok(StateTensor {
                time_index: k as u64,
                values: stats.normalize(p)?.cast(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ds = Dataset::new(grid, variables, states, stats, splits)?;
    ds.seed = Some(params.seed);
    ds.generator = Some(params.clone());
    Ok(ds)
}
