//! Autoregressive rollout and the Short→Medium cascade, plus forecast files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::pygr::{self, GridFile};
use crate::grid::{GridSpec, NormalizationStats, StatePair, VariableSet};
use crate::model::{predict, ModelConfig, Parameters};
use crate::tensor::Tensor;

pub const HOURS_PER_STEP: u32 = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelId {
    Short,
    Medium,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForecastStep {
    pub lead_hours: u32,
    pub model: ModelId,
    pub state: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForecastRun {
    pub init_time: u64,
    pub init: StatePair,
    pub steps: Vec<ForecastStep>,
}

impl ForecastRun {
    pub fn states(&self) -> impl Iterator<Item = &Tensor<f32>> {
        self.steps.iter().map(|s| &s.state)
    }

    pub fn handoff(&self) -> Option<usize> {
        self.steps.iter().position(|s| s.model == ModelId::Medium)
    }
}

/// Continue `steps` from `history = (X̂^{k-1}, X̂^k)`, appending to `out`.
fn extend(
    config: &ModelConfig,
    params: &Parameters,
    mut history: StatePair,
    steps: usize,
    model: ModelId,
    out: &mut Vec<ForecastStep>,
) -> Result<()> {
    for _ in 0..steps {
        let k = out.len() + 1;
        let next = predict(config, params, &history)
            .map_err(|e| e.within(&format!("forecast step {k}")))?;
        out.push(ForecastStep {
            lead_hours: HOURS_PER_STEP * k as u32,
            model,
            state: next.clone(),
        });
        history = StatePair {
            prev: history.curr,
            curr: next,
        };
    }
    Ok(())
}

/// Step k is predicted from `(X̂^{t+k-2}, X̂^{t+k-1})`, where the first two are the true pair.
pub fn rollout(
    config: &ModelConfig,
    params: &Parameters,
    pair: &StatePair,
    init_time: u64,
    steps: usize,
) -> Result<ForecastRun> {
    if steps == 0 {
        return Err(Error::Usage("forecast needs at least one step".into()));
    }
    let mut out = Vec::with_capacity(steps);
    extend(config, params, pair.clone(), steps, ModelId::Short, &mut out)?;
    Ok(ForecastRun {
        init_time,
        init: pair.clone(),
        steps: out,
    })
}

/// Steps `1..=handoff` from Short, the rest from Medium continuing from
/// Short's last two states.
#[allow(clippy::too_many_arguments)]
pub fn cascade_rollout(
    short_config: &ModelConfig,
    short: &Parameters,
    medium_config: &ModelConfig,
    medium: &Parameters,
    pair: &StatePair,
    init_time: u64,
    steps: usize,
    handoff: usize,
) -> Result<ForecastRun> {
    if !(2 <= handoff && handoff < steps) {
        return Err(Error::Range(format!(
            "handoff {handoff} must satisfy 2 <= S < T = {steps}"
        )));
    }
    let mut run = rollout(short_config, short, pair, init_time, handoff)?;
    let history = handoff_pair(pair, &run.steps);
    extend(
        medium_config,
        medium,
        history,
        steps - handoff,
        ModelId::Medium,
        &mut run.steps,
    )?;
    Ok(run)
}

/// `(X̂^{S-1}, X̂^S)` after `S = steps.len()` steps, with `X̂^0 = X^t`.
pub fn handoff_pair(init: &StatePair, steps: &[ForecastStep]) -> StatePair {
    let s = steps.len();
    let at = |k: usize| {
        if k == 0 {
            init.curr.clone()
        } else {
            steps[k - 1].state.clone()
        }
    };
    if s == 0 {
        return init.clone();
    }
    StatePair {
        prev: at(s - 1),
        curr: at(s),
    }
}

/// Sidecar of a forecast file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastMeta {
    pub variables: VariableSet,
    pub stats: NormalizationStats,
    pub init_times: Vec<u64>,
    pub steps: usize,
    pub lead_hours: Vec<u32>,
    pub models: Vec<ModelId>,
    pub handoff: Option<usize>,
    /// SHA-256 of the Short (and Medium) checkpoints.
    pub short_checkpoint: String,
    pub medium_checkpoint: Option<String>,
}

/// Forecasts from one or more initializations with identical step layout.
/// The PYGR payload holds the runs one after another.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastFile {
    pub grid: GridSpec,
    pub meta: ForecastMeta,
    /// `runs[i][k]` is step k+1 from `meta.init_times[i]`.
    pub runs: Vec<Vec<Tensor<f32>>>,
}

impl ForecastFile {
    #[allow(clippy::too_many_arguments)]
    pub fn from_runs(
        grid: GridSpec,
        variables: VariableSet,
        stats: NormalizationStats,
        runs: &[ForecastRun],
        short_checkpoint: String,
        medium_checkpoint: Option<String>,
    ) -> Result<Self> {
        let first = runs
            .first()
            .ok_or_else(|| Error::Usage("no forecast runs to write".into()))?;
        let lead_hours: Vec<u32> = first.steps.iter().map(|s| s.lead_hours).collect();
        let models: Vec<ModelId> = first.steps.iter().map(|s| s.model).collect();
        for r in runs {
            if r.steps.iter().map(|s| s.lead_hours).ne(lead_hours.iter().copied())
                || r.steps.iter().map(|s| s.model).ne(models.iter().copied())
            {
                return Err(Error::Usage("forecast runs have different step layouts".into()));
            }
        }
        Ok(Self {
            grid,
            meta: ForecastMeta {
                variables,
                stats,
                init_times: runs.iter().map(|r| r.init_time).collect(),
                steps: lead_hours.len(),
                lead_hours,
                handoff: first.handoff(),
                models,
                short_checkpoint,
                medium_checkpoint,
            },
            runs: runs
                .iter()
                .map(|r| r.states().cloned().collect())
                .collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        GridFile {
            channel_names: self.meta.variables.channel_names(),
            latitudes: self.grid.latitudes.clone(),
            n_lon: self.grid.n_lon,
            steps: self.runs.iter().flatten().cloned().collect(),
        }
        .write(path)?;
        pygr::write_sidecar(path, &self.meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = GridFile::read(path)?;
        let meta: ForecastMeta = pygr::read_sidecar(path)?;
        if meta.variables.channel_names() != file.channel_names {
            return Err(Error::Data("forecast sidecar does not match its channels".into()));
        }
        let n = meta.init_times.len();
        if meta.steps == 0 || file.steps.len() != n * meta.steps || meta.lead_hours.len() != meta.steps {
            return Err(Error::Data(format!(
                "forecast file holds {} states, sidecar implies {} x {}",
                file.steps.len(),
                n,
                meta.steps
            )));
        }
        let grid = GridSpec::from_stored_latitudes(file.latitudes, file.n_lon)?;
        let runs = file
            .steps
            .chunks(meta.steps)
            .map(|c| c.to_vec())
            .collect();
        Ok(Self { grid, meta, runs })
    }
}
