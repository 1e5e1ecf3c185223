//! Losses, AdamW, single-step pre-training, dynamic-step fine-tuning with
//! simulated workers, and the cascade's Medium fine-tuning.

mod optim;

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecast::{handoff_pair, rollout};
use crate::grid::{Dataset, GridSpec, Split, StatePair};
use crate::model::{forward, Mode, ModelConfig, Parameters};
use crate::seed::{derive_seed, rng_for};
use crate::tensor::{Real, Tape, Tensor, Var};

pub use optim::{adamw_step, AdamWConfig, OptimizerState};

/// Latitude-weighted mean absolute error over channels and grid.
pub fn loss_mae<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var, grid: &GridSpec) -> Result<Var> {
    tape.weighted_abs_mean(pred, target, &grid.weights_as::<T>())
}

/// Latitude-weighted squared error averaged over channels, grid and steps.
pub fn loss_mse_multistep<T: Real>(
    tape: &mut Tape<T>,
    preds: &[Var],
    targets: &[Var],
    grid: &GridSpec,
) -> Result<Var> {
    multistep(tape, preds, targets, grid, LossKind::Mse)
}

fn multistep<T: Real>(
    tape: &mut Tape<T>,
    preds: &[Var],
    targets: &[Var],
    grid: &GridSpec,
    kind: LossKind,
) -> Result<Var> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let rows = grid.weights_as::<T>();
    let mut total: Option<Var> = None;
    for (&p, &t) in preds.iter().zip(targets) {
        let l = match kind {
            LossKind::Mae => tape.weighted_abs_mean(p, t, &rows)?,
            LossKind::Mse => tape.weighted_sq_mean(p, t, &rows)?,
        };
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    let total = total.expect("nonempty");
    if preds.len() == 1 {
        return Ok(total);
    }
    tape.scale(total, T::lit(1.0 / preds.len() as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mae,
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub iterations: usize,
    pub batch_size: usize,
    /// Largest autoregressive step count M.
    pub max_steps: usize,
    pub workers: usize,
    pub seed: u64,
    pub loss: LossKind,
}

impl TrainConfig {
    /// Single-step pre-training: AdamW(0.9, 0.95), lr 1e-3, decay 0.1, MAE.
    pub fn pretrain() -> Self {
        Self {
            lr: 1e-3,
            betas: (0.9, 0.95),
            weight_decay: 0.1,
            iterations: 2000,
            batch_size: 4,
            max_steps: 1,
            workers: 1,
            seed: 0,
            loss: LossKind::Mae,
        }
    }

    /// Dynamic-step fine-tuning with M = 6 and 4 workers, MSE.
    pub fn finetune() -> Self {
        Self {
            lr: 1e-4,
            max_steps: 6,
            workers: 4,
            iterations: 500,
            batch_size: 1,
            loss: LossKind::Mse,
            ..Self::pretrain()
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adamw().validate()?;
        if self.max_steps == 0 || self.workers == 0 || self.batch_size == 0 {
            return Err(Error::config("max_steps, workers and batch_size must be at least 1"));
        }
        Ok(())
    }
}

/// One row of the loss trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub wall_ms: u64,
    pub loss: f64,
    /// Autoregressive steps used by each worker (or sample).
    pub steps: Vec<usize>,
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from("iteration,wall_ms,loss,steps\n");
    for r in rows {
        let steps: Vec<String> = r.steps.iter().map(|k| k.to_string()).collect();
        let _ = writeln!(s, "{},{},{:e},{}", r.iteration, r.wall_ms, r.loss, steps.join(";"));
    }
    s
}

pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    std::fs::write(path, trace_csv(rows))?;
    Ok(())
}

/// Called after every iteration with the trace row and current parameters.
pub type Hook<'a> = &'a mut dyn FnMut(&TraceRow, &Parameters) -> Result<()>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Workers run on the current rayon pool.
    Parallel,
}

/// Loss and gradients (in parameter order) of one rollout of `targets.len()`
/// steps from `pair`, with gradients flowing through every step.
pub fn rollout_gradients(
    config: &ModelConfig,
    params: &Parameters,
    pair: &StatePair,
    targets: &[Tensor<f32>],
    loss: LossKind,
    seed: u64,
) -> Result<(f64, Vec<Tensor<f32>>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let mut prev = tape.leaf(pair.prev.clone(), false);
    let mut curr = tape.leaf(pair.curr.clone(), false);
    let mut preds = Vec::with_capacity(targets.len());
    let mut target_vars = Vec::with_capacity(targets.len());
    for (k, t) in targets.iter().enumerate() {
        let mode = Mode::Train {
            seed: derive_seed(seed, &[k as u64]),
        };
        let next = forward(&mut tape, config, &bound, prev, curr, mode)?;
        preds.push(next);
        target_vars.push(tape.leaf(t.clone(), false));
        prev = curr;
        curr = next;
    }
    let l = multistep(&mut tape, &preds, &target_vars, &config.grid, loss)?;
    let value = tape.value(l).data()[0] as f64;
    let mut grads = tape.backward(l)?;
    let out = bound
        .iter()
        .map(|(_, &v)| {
            grads
                .take(v)
                .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape().to_vec()))
        })
        .collect();
    Ok((value, out))
}

/// Mean of gradient sets, summed in the given order.
fn mean_gradients(sets: Vec<Vec<Tensor<f32>>>) -> Vec<Tensor<f32>> {
    let n = sets.len() as f32;
    let mut iter = sets.into_iter();
    let mut acc = iter.next().expect("at least one gradient set");
    for set in iter {
        for (a, g) in acc.iter_mut().zip(set) {
            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                *x += *y;
            }
        }
    }
    for a in &mut acc {
        for x in a.data_mut() {
            *x /= n;
        }
    }
    acc
}

fn check_loss(loss: f64, iteration: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::numeric(
            format!("iteration {iteration}"),
            format!("loss is {loss}"),
        ));
    }
    Ok(())
}

fn elapsed_ms(start: &Instant) -> u64 {
    start.elapsed().as_millis() as u64
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub params: Parameters,
    pub trace: Vec<TraceRow>,
}

/// Positions `t` in the train split with `t-1` and `t+k` also inside it.
fn start_range(dataset: &Dataset, k: usize) -> Result<Range<usize>> {
    let train = dataset.split_range(Split::Train);
    if train.end < k + 2 {
        return Err(Error::Data(format!(
            "train split of {} states is too short for {k}-step samples",
            train.len()
        )));
    }
    Ok(1..train.end - k)
}

/// Single-step pre-training with the latitude-weighted loss. Batch gradients
/// are the mean of per-sample gradients accumulated in sample order.
pub fn pretrain_single_step(
    dataset: &Dataset,
    config: &ModelConfig,
    init: Parameters,
    train: &TrainConfig,
    hook: Option<Hook>,
) -> Result<TrainOutcome> {
    train.validate()?;
    config.validate()?;
    init.check(config)?;
    let starts = start_range(dataset, 1)?;
    let mut params = init;
    let mut state = OptimizerState::new(&params);
    let mut trace = Vec::with_capacity(train.iterations);
    let mut hook = hook;
    let clock = Instant::now();
    for it in 0..train.iterations {
        let mut rng = rng_for(train.seed, &[it as u64, 1]);
        let mut sets = Vec::with_capacity(train.batch_size);
        let mut loss = 0.0;
        for b in 0..train.batch_size {
            let t = rng.gen_range(starts.clone());
            let (pair, targets) = dataset.sample_pair(t, 1)?;
            let seed = derive_seed(train.seed, &[it as u64, b as u64, 2]);
            let (l, g) = rollout_gradients(config, &params, &pair, &targets, train.loss, seed)
                .map_err(|e| e.within(&format!("iteration {it}")))?;
            loss += l;
            sets.push(g);
        }
        loss /= train.batch_size as f64;
        check_loss(loss, it)?;
        let grads = mean_gradients(sets);
        adamw_step(&mut params, &grads, &mut state, &train.adamw())
            .map_err(|e| e.within(&format!("iteration {it}")))?;
        let row = TraceRow {
            iteration: it,
            wall_ms: elapsed_ms(&clock),
            loss,
            steps: vec![1; train.batch_size],
        };
        if let Some(h) = hook.as_mut() {
            h(&row, &params)?;
        }
        trace.push(row);
    }
    Ok(TrainOutcome { params, trace })
}

/// Where fine-tuning samples come from: true pairs, or Short's handoff pairs.
enum Source<'a> {
    Truth(&'a Dataset),
    Handoff(&'a HandoffSet, &'a Dataset),
}

impl Source<'_> {
    fn starts(&self, k: usize) -> Result<Range<usize>> {
        match self {
            Source::Truth(ds) => start_range(ds, k),
            Source::Handoff(h, ds) => {
                let train_end = ds.split_range(Split::Train).end;
                let end = train_end.saturating_sub(h.handoff + k).min(h.pairs.len());
                if end <= 1 {
                    return Err(Error::Data(format!(
                        "train split too short for handoff {} plus {k} target steps",
                        h.handoff
                    )));
                }
                Ok(1..end)
            }
        }
    }

    fn sample(&self, t: usize, k: usize) -> Result<(StatePair, Vec<Tensor<f32>>)> {
        match self {
            Source::Truth(ds) => ds.sample_pair(t, k),
            Source::Handoff(h, ds) => {
                let pair = h.pairs[t]
                    .clone()
                    .ok_or_else(|| Error::Range(format!("no handoff pair at position {t}")))?;
                let s = h.handoff;
                let targets = (t + s + 1..=t + s + k)
                    .map(|p| ds.states[p].values.clone())
                    .collect();
                Ok((pair, targets))
            }
        }
    }
}

/// Each worker draws `k` uniformly from `2..=M` and a start from its own
/// stream, rolls out `k` steps and returns its loss and gradients.
fn finetune_loop(
    source: &Source,
    config: &ModelConfig,
    init: Parameters,
    train: &TrainConfig,
    execution: Execution,
    hook: Option<Hook>,
) -> Result<TrainOutcome> {
    train.validate()?;
    config.validate()?;
    init.check(config)?;
    if train.max_steps < 2 {
        return Err(Error::config("fine-tuning needs max_steps M >= 2"));
    }
    source.starts(train.max_steps)?;
    let mut params = init;
    let mut state = OptimizerState::new(&params);
    let mut trace = Vec::with_capacity(train.iterations);
    let mut hook = hook;
    let clock = Instant::now();
    for it in 0..train.iterations {
        let worker = |w: usize| -> Result<(usize, f64, Vec<Tensor<f32>>)> {
            let mut rng = rng_for(train.seed, &[it as u64, w as u64, 3]);
            let k = rng.gen_range(2..=train.max_steps);
            let t = rng.gen_range(source.starts(k)?);
            let (pair, targets) = source.sample(t, k)?;
            let seed = derive_seed(train.seed, &[it as u64, w as u64, 4]);
            let (l, g) = rollout_gradients(config, &params, &pair, &targets, train.loss, seed)
                .map_err(|e| e.within(&format!("iteration {it} worker {w}")))?;
            Ok((k, l, g))
        };
        let results: Vec<_> = match execution {
            Execution::Sequential => (0..train.workers).map(worker).collect::<Result<_>>()?,
            Execution::Parallel => (0..train.workers)
                .into_par_iter()
                .map(worker)
                .collect::<Result<_>>()?,
        };
        let steps: Vec<usize> = results.iter().map(|r| r.0).collect();
        let loss = results.iter().map(|r| r.1).sum::<f64>() / train.workers as f64;
        check_loss(loss, it)?;
        let grads = mean_gradients(results.into_iter().map(|r| r.2).collect());
        adamw_step(&mut params, &grads, &mut state, &train.adamw())
            .map_err(|e| e.within(&format!("iteration {it}")))?;
        let row = TraceRow {
            iteration: it,
            wall_ms: elapsed_ms(&clock),
            loss,
            steps,
        };
        if let Some(h) = hook.as_mut() {
            h(&row, &params)?;
        }
        trace.push(row);
    }
    Ok(TrainOutcome { params, trace })
}

/// Dynamic-step autoregressive fine-tuning on true input pairs.
pub fn finetune_dynamic_steps(
    dataset: &Dataset,
    config: &ModelConfig,
    init: Parameters,
    train: &TrainConfig,
    execution: Execution,
    hook: Option<Hook>,
) -> Result<TrainOutcome> {
    finetune_loop(&Source::Truth(dataset), config, init, train, execution, hook)
}

/// Short's handoff pairs `(X̂^{S-1}, X̂^S)` indexed by the start position of
/// the rollout; `None` where the rollout would leave the train split.
#[derive(Clone, Debug, PartialEq)]
pub struct HandoffSet {
    pub handoff: usize,
    pub pairs: Vec<Option<StatePair>>,
}

pub fn build_handoff_set(
    dataset: &Dataset,
    config: &ModelConfig,
    short: &Parameters,
    handoff: usize,
    min_targets: usize,
) -> Result<HandoffSet> {
    if handoff == 0 {
        return Err(Error::Range("handoff step must be at least 1".into()));
    }
    let train_end = dataset.split_range(Split::Train).end;
    let end = train_end.saturating_sub(handoff + min_targets);
    if end <= 1 {
        return Err(Error::Data(format!(
            "train split too short for handoff {handoff} plus {min_targets} targets"
        )));
    }
    let starts: Vec<usize> = (1..end).collect();
    let pairs: Vec<StatePair> = starts
        .par_iter()
        .map(|&t| {
            let (pair, _) = dataset.sample_pair(t, 0)?;
            let time = dataset.states[t].time_index;
            let run = rollout(config, short, &pair, time, handoff)?;
            Ok(handoff_pair(&pair, &run.steps))
        })
        .collect::<Result<_>>()?;
    let mut all = vec![None; end];
    for (t, p) in starts.into_iter().zip(pairs) {
        all[t] = Some(p);
    }
    Ok(HandoffSet {
        handoff,
        pairs: all,
    })
}

/// Medium fine-tuning: initialized from Short and trained on Short's handoff
/// pairs with true targets beyond the handoff step.
pub fn finetune_cascade_medium(
    dataset: &Dataset,
    config: &ModelConfig,
    short: &Parameters,
    handoff: usize,
    train: &TrainConfig,
    execution: Execution,
    hook: Option<Hook>,
) -> Result<TrainOutcome> {
    let set = build_handoff_set(dataset, config, short, handoff, train.max_steps)?;
    finetune_loop(
        &Source::Handoff(&set, dataset),
        config,
        short.clone(),
        train,
        execution,
        hook,
    )
}
