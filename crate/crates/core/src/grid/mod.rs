//! Grid geometry, variable catalog, normalization, climatology and datasets.

pub mod pygr;
mod synth;

use std::collections::HashSet;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use synth::{advection_diffusion_step, generate_synthetic, ChannelProfile, GeneratorParams};

/// Latitude/longitude geometry with area weights normalized to unit mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n_lat: usize,
    pub n_lon: usize,
    /// Degrees, one per row, north to south.
    pub latitudes: Vec<f64>,
    /// One weight per latitude row; the mean over all cells is 1.
    pub weights: Vec<f64>,
}

fn normalize_unit_mean(raw: Vec<f64>) -> Vec<f64> {
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    raw.into_iter().map(|w| w / mean).collect()
}

/// Equiangular grid including both poles. Row weights are the area of each
/// latitude band (difference of sines of the cell edges), which keeps the
/// pole rows nonzero.
pub fn make_grid(n_lat: usize, n_lon: usize) -> Result<GridSpec> {
    if n_lat < 2 || n_lon < 2 {
        return Err(Error::config(format!(
            "grid needs at least 2x2 points, got {n_lat}x{n_lon}"
        )));
    }
    let step = 180.0 / (n_lat - 1) as f64;
    let latitudes: Vec<f64> = (0..n_lat).map(|i| 90.0 - step * i as f64).collect();
    let raw = latitudes
        .iter()
        .map(|&lat| {
            let top = (lat + step / 2.0).min(90.0).to_radians();
            let bottom = (lat - step / 2.0).max(-90.0).to_radians();
            top.sin() - bottom.sin()
        })
        .collect();
    Ok(GridSpec {
        n_lat,
        n_lon,
        latitudes,
        weights: normalize_unit_mean(raw),
    })
}

impl GridSpec {
    /// Arbitrary (non-polar) latitude rows weighted by `cos(latitude)`.
    pub fn from_latitudes(latitudes: Vec<f64>, n_lon: usize) -> Result<Self> {
        if latitudes.is_empty() || n_lon == 0 {
            return Err(Error::config("grid needs at least one row and column"));
        }
        if let Some(lat) = latitudes.iter().find(|l| !(l.abs() < 90.0)) {
            return Err(Error::config(format!(
                "latitude {lat} has no cosine weight; use make_grid for polar rows"
            )));
        }
        let raw = latitudes.iter().map(|l| l.to_radians().cos()).collect();
        Ok(Self {
            n_lat: latitudes.len(),
            n_lon,
            latitudes,
            weights: normalize_unit_mean(raw),
        })
    }

    /// Rebuild a grid from stored latitudes: the equiangular polar layout if
    /// they match it exactly, cosine weighting otherwise.
    pub fn from_stored_latitudes(latitudes: Vec<f64>, n_lon: usize) -> Result<Self> {
        if latitudes.len() >= 2 && n_lon >= 2 {
            let g = make_grid(latitudes.len(), n_lon)?;
            if g.latitudes == latitudes {
                return Ok(g);
            }
        }
        Self::from_latitudes(latitudes, n_lon)
    }

    pub fn mean_weight(&self) -> f64 {
        self.weights.iter().sum::<f64>() / self.n_lat as f64
    }

    pub fn weights_as<T: crate::Real>(&self) -> Vec<T> {
        self.weights.iter().map(|&w| T::lit(w)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtmosphericVariable {
    pub name: String,
    pub levels: Vec<u32>,
}

/// Channel catalog: atmospheric variables at pressure levels, then surface variables.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableSet {
    pub atmospheric: Vec<AtmosphericVariable>,
    pub surface: Vec<String>,
}

impl VariableSet {
    pub fn new(atmospheric: Vec<AtmosphericVariable>, surface: Vec<String>) -> Result<Self> {
        let set = Self { atmospheric, surface };
        let names = set.channel_names();
        if names.is_empty() {
            return Err(Error::config("variable set has no channels"));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n) {
                return Err(Error::config(format!("duplicate channel {n}")));
            }
        }
        Ok(set)
    }

    /// One geopotential analog on 4 levels plus 4 surface analogs.
    pub fn desk() -> Self {
        Self::new(
            vec![AtmosphericVariable {
                name: "z".into(),
                levels: vec![850, 700, 500, 250],
            }],
            ["t2m", "u10", "v10", "msl"].map(String::from).to_vec(),
        )
        .expect("static catalog")
    }

    /// Desk-style catalog with `channels` channels: four surface analogs and
    /// the remainder as geopotential levels.
    pub fn with_channels(channels: usize) -> Result<Self> {
        const LEVELS: [u32; 13] = [1000, 925, 850, 700, 600, 500, 400, 300, 250, 200, 150, 100, 50];
        const SURFACE: [&str; 4] = ["t2m", "u10", "v10", "msl"];
        if channels == 8 {
            return Ok(Self::desk());
        }
        if channels == 0 || channels > 4 + LEVELS.len() {
            return Err(Error::config(format!(
                "supported channel counts are 1..={}",
                4 + LEVELS.len()
            )));
        }
        let n_surface = channels.min(4);
        let n_levels = channels - n_surface;
        let atmospheric = if n_levels > 0 {
            // spread levels evenly through the column
            let levels = (0..n_levels)
                .map(|k| LEVELS[k * (LEVELS.len() - 1) / n_levels.max(2).saturating_sub(1).max(1)])
                .collect::<Vec<_>>();
            vec![AtmosphericVariable {
                name: "z".into(),
                levels,
            }]
        } else {
            vec![]
        };
        Self::new(
            atmospheric,
            SURFACE[..n_surface].iter().map(|s| s.to_string()).collect(),
        )
    }

    /// The five pressure-level variables on 13 levels plus four surface variables.
    pub fn era5() -> Self {
        let levels = vec![50, 100, 150, 200, 250, 300, 400, 500, 600, 700, 850, 925, 1000];
        Self::new(
            ["z", "r", "t", "u", "v"]
                .iter()
                .map(|n| AtmosphericVariable {
                    name: n.to_string(),
                    levels: levels.clone(),
                })
                .collect(),
            ["t2m", "u10", "v10", "msl"].map(String::from).to_vec(),
        )
        .expect("static catalog")
    }

    pub fn n_channels(&self) -> usize {
        self.atmospheric.iter().map(|v| v.levels.len()).sum::<usize>() + self.surface.len()
    }

    /// Names in channel order, e.g. `z500`, `t2m`.
    pub fn channel_names(&self) -> Vec<String> {
        self.atmospheric
            .iter()
            .flat_map(|v| v.levels.iter().map(move |l| format!("{}{l}", v.name)))
            .chain(self.surface.iter().cloned())
            .collect()
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channel_names().iter().position(|n| n == name)
    }

    /// Channel indices of the surface variables.
    pub fn surface_channels(&self) -> Range<usize> {
        let n = self.n_channels();
        n - self.surface.len()..n
    }
}

/// Per-channel mean and standard deviation in physical units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationStats {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::config("mean and std lengths differ"));
        }
        if let Some(i) = std.iter().position(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::config(format!("channel {i} has non-positive std {}", std[i])));
        }
        Ok(Self { mean, std })
    }

    /// Statistics over `[C,H,W]` fields in physical units.
    pub fn from_fields<'a>(fields: impl IntoIterator<Item = &'a Tensor<f64>>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        let fields: Vec<&Tensor<f64>> = fields.into_iter().collect();
        for f in &fields {
            let (c, _, _) = f.dims3()?;
            if sum.is_empty() {
                sum = vec![0.0; c];
                sq = vec![0.0; c];
            }
            for ch in 0..c {
                sum[ch] += f.channel(ch).iter().sum::<f64>();
            }
            count += f.len() / c;
        }
        if count == 0 {
            return Err(Error::Data("no fields to compute statistics from".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        for f in &fields {
            for (ch, m) in mean.iter().enumerate() {
                sq[ch] += f.channel(ch).iter().map(|v| (v - m).powi(2)).sum::<f64>();
            }
        }
        let std = sq.iter().map(|s| (s / count as f64).sqrt()).collect();
        Self::new(mean, std)
    }

    pub fn normalize(&self, physical: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.apply(physical, |v, m, s| (v - m) / s)
    }

    pub fn denormalize(&self, normalized: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.apply(normalized, |v, m, s| v * s + m)
    }

    fn apply(&self, t: &Tensor<f64>, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor<f64>> {
        let (c, h, w) = t.dims3()?;
        if c != self.mean.len() {
            return Err(Error::shape(format!(
                "{c} channels but statistics for {}",
                self.mean.len()
            )));
        }
        let plane = h * w;
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = i / plane;
                f(v, self.mean[ch], self.std[ch])
            })
            .collect();
        Tensor::new(vec![c, h, w], data)
    }
}

/// One atmospheric state in normalized units.
#[derive(Clone, Debug, PartialEq)]
pub struct StateTensor {
    /// 6-hour steps since the dataset origin.
    pub time_index: u64,
    pub values: Tensor<f32>,
}

/// The model input `(X^{t-1}, X^t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct StatePair {
    pub prev: Tensor<f32>,
    pub curr: Tensor<f32>,
}

/// Per-phase mean fields; the phase of time index `t` is `t mod period`.
#[derive(Clone, Debug, PartialEq)]
pub struct Climatology {
    pub period: usize,
    pub means: Vec<Tensor<f64>>,
}

impl Climatology {
    pub fn at(&self, time_index: u64) -> &Tensor<f64> {
        &self.means[(time_index % self.period as u64) as usize]
    }
}

/// Dataset positions `[0, train_end)`, `[train_end, valid_end)`, `[valid_end, len)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train_end: usize,
    pub valid_end: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// Metadata written next to a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub variables: VariableSet,
    pub stats: NormalizationStats,
    pub splits: Splits,
    pub time_origin: u64,
    pub seed: Option<u64>,
    pub generator: Option<GeneratorParams>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub grid: GridSpec,
    pub variables: VariableSet,
    pub states: Vec<StateTensor>,
    pub stats: NormalizationStats,
    pub splits: Splits,
    pub seed: Option<u64>,
    pub generator: Option<GeneratorParams>,
}

impl Dataset {
    pub fn new(
        grid: GridSpec,
        variables: VariableSet,
        states: Vec<StateTensor>,
        stats: NormalizationStats,
        splits: Splits,
    ) -> Result<Self> {
        if states.len() < 3 {
            return Err(Error::Data(format!(
                "dataset needs at least 3 states, got {}",
                states.len()
            )));
        }
        let shape = [variables.n_channels(), grid.n_lat, grid.n_lon];
        for (k, s) in states.iter().enumerate() {
            if s.values.shape() != shape {
                return Err(Error::shape(format!(
                    "state {k} has shape {:?}, expected {shape:?}",
                    s.values.shape()
                )));
            }
            if k > 0 && s.time_index != states[k - 1].time_index + 1 {
                return Err(Error::Data(format!("time index gap before state {k}")));
            }
            if !s.values.is_finite() {
                return Err(Error::Data(format!("state {k} has non-finite values")));
            }
        }
        if stats.mean.len() != shape[0] {
            return Err(Error::Data("statistics do not match channel count".into()));
        }
        if !(splits.train_end <= splits.valid_end && splits.valid_end <= states.len()) {
            return Err(Error::Data(format!("invalid splits {splits:?}")));
        }
        Ok(Self {
            grid,
            variables,
            states,
            stats,
            splits,
            seed: None,
            generator: None,
        })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn time_origin(&self) -> u64 {
        self.states[0].time_index
    }

    pub fn split_range(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => 0..self.splits.train_end,
            Split::Valid => self.splits.train_end..self.splits.valid_end,
            Split::Test => self.splits.valid_end..self.states.len(),
        }
    }

    /// Position of a time index in `states`.
    pub fn position(&self, time_index: u64) -> Result<usize> {
        let origin = self.time_origin();
        if time_index < origin || time_index - origin >= self.len() as u64 {
            return Err(Error::Range(format!(
                "time index {time_index} outside dataset [{origin}, {})",
                origin + self.len() as u64
            )));
        }
        Ok((time_index - origin) as usize)
    }

    /// The pair `(X^{t-1}, X^t)` at position `t` and targets `X^{t+1..=t+len}`.
    pub fn sample_pair(&self, t: usize, len: usize) -> Result<(StatePair, Vec<Tensor<f32>>)> {
        if t < 1 || t + len >= self.len() {
            return Err(Error::Range(format!(
                "cannot take pair at {t} with {len} targets from {} states",
                self.len()
            )));
        }
        let pair = StatePair {
            prev: self.states[t - 1].values.clone(),
            curr: self.states[t].values.clone(),
        };
        let targets = (t + 1..=t + len).map(|k| self.states[k].values.clone()).collect();
        Ok((pair, targets))
    }

    /// Per-phase means over the states at `positions`.
    pub fn build_climatology(&self, positions: Range<usize>, period: usize) -> Result<Climatology> {
        if period == 0 {
            return Err(Error::config("climatology period must be at least 1"));
        }
        let shape = self.states[0].values.shape().to_vec();
        let mut sums = vec![vec![0.0f64; self.states[0].values.len()]; period];
        let mut counts = vec![0usize; period];
        for s in &self.states[positions] {
            let phase = (s.time_index % period as u64) as usize;
            counts[phase] += 1;
            for (acc, &v) in sums[phase].iter_mut().zip(s.values.data()) {
                *acc += v as f64;
            }
        }
        if let Some(p) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Data(format!("climatology phase {p} has no states")));
        }
        let means = sums
            .into_iter()
            .zip(counts)
            .map(|(s, n)| Tensor::new(shape.clone(), s.into_iter().map(|v| v / n as f64).collect()))
            .collect::<Result<_>>()?;
        Ok(Climatology { period, means })
    }

    pub fn sidecar(&self) -> DatasetSidecar {
        DatasetSidecar {
            variables: self.variables.clone(),
            stats: self.stats.clone(),
            splits: self.splits,
            time_origin: self.time_origin(),
            seed: self.seed,
            generator: self.generator.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = pygr::GridFile {
            channel_names: self.variables.channel_names(),
            latitudes: self.grid.latitudes.clone(),
            n_lon: self.grid.n_lon,
            steps: self.states.iter().map(|s| s.values.clone()).collect(),
        };
        file.write(path)?;
        pygr::write_sidecar(path, &self.sidecar())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = pygr::GridFile::read(path)?;
        let side: DatasetSidecar = pygr::read_sidecar(path)?;
        if side.variables.channel_names() != file.channel_names {
            return Err(Error::Data("sidecar variables do not match file channels".into()));
        }
        let grid = GridSpec::from_stored_latitudes(file.latitudes, file.n_lon)?;
        let states = file
            .steps
            .into_iter()
            .enumerate()
            .map(|(k, values)| StateTensor {
                time_index: side.time_origin + k as u64,
                values,
            })
            .collect();
        let mut ds = Self::new(grid, side.variables, states, side.stats, side.splits)?;
        ds.seed = side.seed;
        ds.generator = side.generator;
        Ok(ds)
    }
}
