//! The forecasting network: patch embedding, four stages of large-kernel
//! attention blocks, multi-stage concatenation with a skip, and a merge head
//! that adds its output to the current state.

mod checkpoint;
mod forward;

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, VariableSet};
use crate::seed::rng_for;
use crate::tensor::{Real, Tape, Tensor, Var};

pub use checkpoint::{checkpoint_hash, load_checkpoint, save_checkpoint, Checkpoint};
pub use forward::{forward, predict, Mode};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LkaMode {
    /// One K×K depthwise convolution.
    Direct,
    /// Depthwise, dilated depthwise, pointwise.
    Decomposed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MergeMode {
    #[serde(rename = "resize")]
    Resize,
    #[serde(rename = "pixelshuffle+resize")]
    PixelShuffleResize,
}

impl MergeMode {
    pub fn label(self) -> &'static str {
        match self {
            MergeMode::Resize => "resize",
            MergeMode::PixelShuffleResize => "pixelshuffle+resize",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        match s {
            "resize" => Some(MergeMode::Resize),
            "pixelshuffle+resize" => Some(MergeMode::PixelShuffleResize),
            _ => None,
        }
    }
}

/// Kernel sizes and dilation of the decomposed attention for kernel `K`:
/// a `dw`×`dw` depthwise conv followed by a `dilated`×`dilated` depthwise conv
/// with the given dilation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LkaGeometry {
    pub dw: usize,
    pub dilated: usize,
    pub dilation: usize,
}

impl LkaGeometry {
    pub fn for_kernel(k: usize) -> Self {
        let dw = (k / 2) | 1;
        let dilation = k.div_ceil(3).max(1);
        let dilated = k.div_ceil(dilation) | 1;
        Self { dw, dilated, dilation }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub blocks: [usize; 4],
    pub kernel: usize,
    pub lka_mode: LkaMode,
    pub patch: usize,
    pub merge: MergeMode,
    pub droppath_rate: f64,
    pub variables: VariableSet,
    pub grid: GridSpec,
}

impl ModelConfig {
    /// Embed 64, (2,2,2,2) blocks, K5 decomposed, patch 4, pixel-shuffle merge.
    pub fn desk(variables: VariableSet, grid: GridSpec) -> Self {
        Self {
            embed_dim: 64,
            blocks: [2, 2, 2, 2],
            kernel: 5,
            lka_mode: LkaMode::Decomposed,
            patch: 4,
            merge: MergeMode::PixelShuffleResize,
            droppath_rate: 0.0,
            variables,
            grid,
        }
    }

    pub fn channels(&self) -> usize {
        self.variables.n_channels()
    }

    pub fn total_blocks(&self) -> usize {
        self.blocks.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w, p) = (self.grid.n_lat, self.grid.n_lon, self.patch);
        if self.embed_dim == 0 {
            return Err(Error::config("embed_dim must be positive"));
        }
        if self.kernel.is_multiple_of(2) || self.kernel == 0 {
            return Err(Error::config(format!("kernel size {} must be odd", self.kernel)));
        }
        if p == 0 {
            return Err(Error::config("patch must be at least 1"));
        }
        if w % p != 0 {
            return Err(Error::config(format!(
                "grid width {w} is not divisible by patch {p}"
            )));
        }
        if h < p {
            return Err(Error::config(format!("grid height {h} is smaller than patch {p}")));
        }
        if !(0.0..1.0).contains(&self.droppath_rate) {
            return Err(Error::config("droppath_rate must be in [0, 1)"));
        }
        if self.grid.weights.len() != h {
            return Err(Error::config("grid weights do not match grid height"));
        }
        Ok(())
    }

    /// `(embed_dim, ⌊H/p⌋, W/p)`.
    pub fn latent_shape(&self) -> [usize; 3] {
        [
            self.embed_dim,
            self.grid.n_lat / self.patch,
            self.grid.n_lon / self.patch,
        ]
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [self.channels(), self.grid.n_lat, self.grid.n_lon]
    }

    /// Drop probability of global block `index` (linear from 0 to the rate).
    pub fn droppath_for(&self, index: usize) -> f64 {
        let n = self.total_blocks();
        if n <= 1 {
            return 0.0;
        }
        self.droppath_rate * index as f64 / (n - 1) as f64
    }

    /// Every parameter path with its shape, in architectural order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let e = self.embed_dim;
        let c = self.channels();
        let p = self.patch;
        let mut out = Vec::new();
        let pointwise = |out: &mut Vec<(String, Vec<usize>)>, name: &str, cout: usize, cin: usize| {
            out.push((format!("{name}.weight"), vec![cout, cin]));
            out.push((format!("{name}.bias"), vec![cout]));
        };
        pointwise(&mut out, "embed", e, 2 * c * p * p);
        let geo = LkaGeometry::for_kernel(self.kernel);
        for (s, &n) in self.blocks.iter().enumerate() {
            for b in 0..n {
                let pre = format!("stages.{s}.blocks.{b}");
                pointwise(&mut out, &format!("{pre}.proj_in"), e, e);
                match self.lka_mode {
                    LkaMode::Direct => {
                        out.push((format!("{pre}.lka.dw"), vec![e, self.kernel, self.kernel]));
                    }
                    LkaMode::Decomposed => {
                        out.push((format!("{pre}.lka.dw"), vec![e, geo.dw, geo.dw]));
                        out.push((
                            format!("{pre}.lka.dw_dilated"),
                            vec![e, geo.dilated, geo.dilated],
                        ));
                    }
                }
                pointwise(&mut out, &format!("{pre}.lka.pw"), e, e);
                pointwise(&mut out, &format!("{pre}.proj_out"), e, e);
            }
            out.push((format!("stages.{s}.norm.gamma"), vec![e]));
            out.push((format!("stages.{s}.norm.beta"), vec![e]));
        }
        pointwise(&mut out, "fuse", e, 5 * e);
        let merge_out = match self.merge {
            MergeMode::Resize => c,
            MergeMode::PixelShuffleResize => c * p * p,
        };
        pointwise(&mut out, "merge", merge_out, e);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Named model parameters in architectural order.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters<T: Real = f32> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Real> Parameters<T> {
    pub fn from_map(tensors: IndexMap<String, Tensor<T>>) -> Self {
        Self { tensors }
    }

    pub fn get(&self, path: &str) -> Option<&Tensor<T>> {
        self.tensors.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn n_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> Parameters<U> {
        Parameters {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Check paths and shapes against a configuration, and that values are finite.
    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        let want = config.parameter_shapes();
        if want.len() != self.tensors.len() {
            return Err(Error::config(format!(
                "config expects {} parameter tensors, found {}",
                want.len(),
                self.tensors.len()
            )));
        }
        for ((path, shape), (have_path, t)) in want.iter().zip(&self.tensors) {
            if path != have_path || shape.as_slice() != t.shape() {
                return Err(Error::config(format!(
                    "parameter {have_path} {:?} does not match {path} {shape:?}",
                    t.shape()
                )));
            }
            if let Some(i) = t.first_non_finite() {
                return Err(Error::numeric(path.clone(), format!("non-finite value at {i}")));
            }
        }
        Ok(())
    }

    /// Put every parameter on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> BoundParameters {
        BoundParameters {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), requires_grad)))
                .collect(),
        }
    }
}

impl<T: Real> Parameters<T> {
    /// As [`Parameters::bind`] but moves the tensors onto the tape.
    pub fn bind_owned(self, tape: &mut Tape<T>, requires_grad: bool) -> BoundParameters {
        BoundParameters {
            vars: self
                .tensors
                .into_iter()
                .map(|(k, v)| (k, tape.leaf(v, requires_grad)))
                .collect(),
        }
    }
}

/// Tape handles of a parameter set, in the same order.
#[derive(Clone, Debug)]
pub struct BoundParameters {
    vars: IndexMap<String, Var>,
}

impl BoundParameters {
    pub fn var(&self, path: &str) -> Result<Var> {
        self.vars
            .get(path)
            .copied()
            .ok_or_else(|| Error::config(format!("missing parameter {path}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

pub(crate) fn truncated_normal(rng: &mut impl Rng, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Truncated-normal weights (std 0.02, cut at 2σ), zero biases, unit
/// layer-norm gains and a zero merge head, so the untrained model is persistence.
pub fn init_parameters(config: &ModelConfig, seed: u64) -> Result<Parameters> {
    config.validate()?;
    let mut rng = rng_for(seed, &[0x1417]);
    let tensors = config
        .parameter_shapes()
        .into_iter()
        .map(|(path, shape)| {
            let t = if path.starts_with("merge.") || path.ends_with(".bias") || path.ends_with(".beta") {
                Tensor::zeros(shape)
            } else if path.ends_with(".gamma") {
                Tensor::ones(shape)
            } else {
                Tensor::from_fn(shape, |_| truncated_normal(&mut rng, INIT_STD) as f32)
            };
            (path, t)
        })
        .collect();
    Ok(Parameters { tensors })
}

/// Parameters with every entry drawn at unit-activation scale (weights
/// `N(0, 1/fan_in)`, nonzero biases and merge head). Used where gradients must
/// reach every parameter, e.g. finite-difference checks.
pub fn randomized_parameters<T: Real>(config: &ModelConfig, seed: u64) -> Result<Parameters<T>> {
    config.validate()?;
    let mut rng = rng_for(seed, &[0x7a4d]);
    let tensors = config
        .parameter_shapes()
        .into_iter()
        .map(|(path, shape)| {
            let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
            let (center, std) = if path.ends_with(".gamma") {
                (1.0, 0.1)
            } else if shape.len() == 1 {
                (0.0, 0.1)
            } else {
                (0.0, (1.0 / fan_in as f64).sqrt())
            };
            let t = Tensor::from_fn(shape, |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                T::lit(center + std * z)
            });
            (path, t)
        })
        .collect();
    Ok(Parameters { tensors })
}
