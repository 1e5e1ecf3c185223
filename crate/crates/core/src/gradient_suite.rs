//! Finite-difference checks of every differentiable op and of the whole
//! model, in f64.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::model::{
    forward, init_parameters, randomized_parameters, truncated_normal, Mode, ModelConfig, Parameters, INIT_STD,
};
use crate::seed::rng_for;
use crate::tensor::{
    finite_difference_check, finite_difference_check_at, project, relative_error, GradCheckReport, RELATIVE_FLOOR,
};
use crate::tensor::{Tape, Tensor, Var};
use crate::training::{loss_mae, loss_mse_multistep};

pub const DEFAULT_STEP: f64 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_SEED: u64 = 1;

/// Cap on model-check draws, as a multiple of the requested sample count.
pub const MAX_DRAW_FACTOR: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Where the worst error occurred, e.g. a parameter path and flat index.
    pub worst: String,
    /// Coordinates whose gradient magnitude fell under [`RELATIVE_FLOOR`] and
    /// were therefore compared absolutely.
    pub below_floor: usize,
    pub seconds: f64,
}

impl CheckOutcome {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

fn normal(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = rng_for(seed, &[0x9c]);
    Tensor::from_fn(shape.to_vec(), |_| rng.sample(StandardNormal))
}

fn run<F>(out: &mut Vec<CheckOutcome>, name: &str, x: &Tensor<f64>, h: f64, f: F) -> Result<()>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let start = Instant::now();
    let r = finite_difference_check(f, x, h)?;
    out.push(outcome(name, &r, start));
    Ok(())
}

fn outcome(name: &str, r: &GradCheckReport, start: Instant) -> CheckOutcome {
    CheckOutcome {
        name: name.to_string(),
        checked: r.checked,
        max_rel_error: r.max_rel_error,
        worst: format!("index {}", r.worst_index),
        below_floor: r.below_floor,
        seconds: start.elapsed().as_secs_f64(),
    }
}

const GELU_STATIONARY: f64 = -0.7518;

pub const PRIMITIVE_SHAPES: [[usize; 3]; 3] = [[3, 6, 8], [4, 4, 6], [5, 8, 4]];

/// Every primitive against central differences at each of
/// [`PRIMITIVE_SHAPES`], each as `Σ op(x) ⊙ r` for a random `r`, with respect
/// to each differentiable input.
pub fn primitives(seed: u64, h: f64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for (k, shape) in PRIMITIVE_SHAPES.iter().enumerate() {
        primitives_at(&mut out, *shape, seed + 100 * k as u64, h)?;
    }
    Ok(out)
}

fn primitives_at(all: &mut Vec<CheckOutcome>, [c, hh, w]: [usize; 3], seed: u64, h: f64) -> Result<()> {
    let mut out = Vec::new();
    let x = normal(&[c, hh, w], seed);
    let r = normal(&[c, hh, w], seed + 1);

    for (k, d) in [(3, 1), (5, 1), (3, 2), (3, 3)] {
        let kernel = normal(&[c, k, k], seed + 2);
        let name = format!("conv2d_depthwise k{k} d{d}");
        run(&mut out, &format!("{name} / input"), &x, h, |t, v| {
            let kv = t.constant(kernel.clone());
            let o = t.conv2d_depthwise(v, kv, d)?;
            project(t, o, &r)
        })?;
        run(&mut out, &format!("{name} / kernel"), &kernel, h, |t, kv| {
            let xv = t.constant(x.clone());
            let o = t.conv2d_depthwise(xv, kv, d)?;
            project(t, o, &r)
        })?;
    }

    let wt = normal(&[4, c], seed + 3);
    let b = normal(&[4], seed + 4);
    let r4 = normal(&[4, hh, w], seed + 5);
    run(&mut out, "conv2d_pointwise / input", &x, h, |t, v| {
        let (wv, bv) = (t.constant(wt.clone()), t.constant(b.clone()));
        let o = t.conv2d_pointwise(v, wv, bv)?;
        project(t, o, &r4)
    })?;
    run(&mut out, "conv2d_pointwise / weight", &wt, h, |t, wv| {
        let (xv, bv) = (t.constant(x.clone()), t.constant(b.clone()));
        let o = t.conv2d_pointwise(xv, wv, bv)?;
        project(t, o, &r4)
    })?;
    run(&mut out, "conv2d_pointwise / bias", &b, h, |t, bv| {
        let (xv, wv) = (t.constant(x.clone()), t.constant(wt.clone()));
        let o = t.conv2d_pointwise(xv, wv, bv)?;
        project(t, o, &r4)
    })?;

    // The layer-norm Jacobian annihilates span{1, x̂}: at C = 3 a pixel's
    // gradient is r projected onto one direction and often nearly cancels,
    // leaving the h² term to dominate. The model normalizes over the
    // embedding width, so probe at C + 5.
    let cl = c + 5;
    let xl = normal(&[cl, hh, w], seed + 16);
    let rl = normal(&[cl, hh, w], seed + 17);
    let gamma = normal(&[cl], seed + 6).map(|v| 1.0 + 0.2 * v);
    let beta = normal(&[cl], seed + 7);
    let eps = crate::model::LAYER_NORM_EPS;
    run(&mut out, "layer_norm / input", &xl, h, |t, v| {
        let (g, b) = (t.constant(gamma.clone()), t.constant(beta.clone()));
        let o = t.layer_norm(v, g, b, eps)?;
        project(t, o, &rl)
    })?;
    run(&mut out, "layer_norm / gamma", &gamma, h, |t, g| {
        let (xv, b) = (t.constant(xl.clone()), t.constant(beta.clone()));
        let o = t.layer_norm(xv, g, b, eps)?;
        project(t, o, &rl)
    })?;
    run(&mut out, "layer_norm / beta", &beta, h, |t, b| {
        let (xv, g) = (t.constant(xl.clone()), t.constant(gamma.clone()));
        let o = t.layer_norm(xv, g, b, eps)?;
        project(t, o, &rl)
    })?;

    let y = normal(&[c, hh, w], seed + 8);
    // Relative error is ill-posed where gelu' vanishes (x ≈ -0.7518).
    let gelu_in = x.map(|v| {
        let v = 2.0 * v;
        if (v - GELU_STATIONARY).abs() < 0.25 {
            v + 0.5f64.copysign(v - GELU_STATIONARY)
        } else {
            v
        }
    });
    run(&mut out, "gelu", &gelu_in, h, |t, v| {
        let o = t.gelu(v)?;
        project(t, o, &r)
    })?;
    run(&mut out, "hadamard", &x, h, |t, v| {
        let yv = t.constant(y.clone());
        let o = t.hadamard(v, yv)?;
        project(t, o, &r)
    })?;
    run(&mut out, "add / sub / scale", &x, h, |t, v| {
        let yv = t.constant(y.clone());
        let a = t.add(v, yv)?;
        let s = t.scale(a, 0.37)?;
        let o = t.sub(s, v)?;
        project(t, o, &r)
    })?;
    run(&mut out, "sum / mean", &x, h, |t, v| {
        let s = t.sum(v)?;
        let m = t.mean(v)?;
        let sq = t.hadamard(s, m)?;
        t.sum(sq)
    })?;

    let xs = normal(&[4 * c, hh / 2, w / 2], seed + 9);
    let rs = normal(&[c, hh, w], seed + 10);
    run(&mut out, "pixel_shuffle", &xs, h, |t, v| {
        let o = t.pixel_shuffle(v, 2)?;
        project(t, o, &rs)
    })?;
    run(&mut out, "pixel_unshuffle", &normal(&[c, hh, w], seed + 11), h, |t, v| {
        let o = t.pixel_unshuffle(v, 2)?;
        project(t, o, &xs)
    })?;
    run(&mut out, "crop_rows", &x, h, |t, v| {
        let o = t.crop_rows(v, hh - 2)?;
        project(t, o, &normal(&[c, hh - 2, w], seed + 12))
    })?;
    for (h2, w2) in [(hh + 3, w + 5), (hh / 2, w / 2 + 1)] {
        let rr = normal(&[c, h2, w2], seed + 13);
        run(&mut out, &format!("resize_bilinear {hh}x{w} -> {h2}x{w2}"), &x, h, |t, v| {
            let o = t.resize_bilinear(v, h2, w2)?;
            project(t, o, &rr)
        })?;
    }
    let other = normal(&[2, hh, w], seed + 14);
    let rc = normal(&[c + 2, hh, w], seed + 15);
    run(&mut out, "concat_channels", &x, h, |t, v| {
        let ov = t.constant(other.clone());
        let o = t.concat_channels(&[ov, v])?;
        project(t, o, &rc)
    })?;

    let grid = crate::grid::make_grid(hh, w)?;
    // residuals kept away from the |.| kink
    let target = x.zip_map(&y, |a, b| a + b.signum() * (0.5 + b.abs())).unwrap();
    run(&mut out, "loss_mae", &x, h, |t, v| {
        let tv = t.constant(target.clone());
        loss_mae(t, v, tv, &grid)
    })?;
    run(&mut out, "loss_mse (2 steps)", &x, h, |t, v| {
        let second = t.scale(v, -0.6)?;
        let (a, b) = (t.constant(y.clone()), t.constant(target.clone()));
        loss_mse_multistep(t, &[v, second], &[a, b], &grid)
    })?;
    for o in &mut out {
        o.name = format!("{} @{c}x{hh}x{w}", o.name);
    }
    all.append(&mut out);
    Ok(())
}

/// Where in parameter space the model check is taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParameterPoint {
    /// The training initialization, with the zero-initialized tensors (merge
    /// head, biases, betas) also drawn from the init distribution so every
    /// parameter has a live gradient path.
    Init,
    /// Unit-activation-scale weights; strongly nonlinear, so central
    /// differences need a smaller step to reach the same accuracy.
    Randomized,
}

pub fn parameters_at(config: &ModelConfig, point: ParameterPoint, seed: u64) -> Result<Parameters<f64>> {
    match point {
        ParameterPoint::Randomized => randomized_parameters(config, seed),
        ParameterPoint::Init => {
            let mut p = init_parameters(config, seed)?.cast::<f64>();
            let mut rng = rng_for(seed, &[0x5c]);
            for (_, t) in p.iter_mut() {
                if t.data().iter().all(|&v| v == 0.0) {
                    for v in t.data_mut() {
                        *v = truncated_normal(&mut rng, INIT_STD);
                    }
                }
            }
            Ok(p)
        }
    }
}

/// Random normalized inputs for the model at `config`'s grid.
fn model_inputs(config: &ModelConfig, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    let shape = [config.channels(), config.grid.n_lat, config.grid.n_lon];
    (normal(&shape, seed + 20), normal(&shape, seed + 21))
}

/// Sample coordinates: `per_tensor` from every parameter tensor first, then
/// the remaining elements in uniform random order.
fn sample_coordinates(params: &Parameters<f64>, per_tensor: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = rng_for(seed, &[0x5a]);
    let mut picks = Vec::new();
    let mut rest = Vec::new();
    for (k, (_, t)) in params.iter().enumerate() {
        let mut idx: Vec<usize> = (0..t.len()).collect();
        idx.shuffle(&mut rng);
        picks.extend(idx.iter().take(per_tensor).map(|&i| (k, i)));
        rest.extend(idx.into_iter().skip(per_tensor).map(|i| (k, i)));
    }
    rest.shuffle(&mut rng);
    picks.extend(rest);
    picks
}

/// Analytic parameter gradients against central differences through the
/// full model. The loss is an MAE against a target shifted from the initial
/// prediction by at least 0.5 everywhere, so no `|.|` kink is crossed.
///
/// Near initialization most single-parameter gradients are tiny, and below
/// `RELATIVE_FLOOR` the comparison degrades to an absolute one. Draws
/// therefore continue until `samples` coordinates with a gradient above the
/// floor have been compared (or `MAX_DRAW_FACTOR * samples` in total); every
/// drawn coordinate counts toward the worst error.
pub fn model(
    config: &ModelConfig,
    point: ParameterPoint,
    seed: u64,
    samples: usize,
    h: f64,
) -> Result<CheckOutcome> {
    let start = Instant::now();
    let params = parameters_at(config, point, seed)?;
    let (prev, curr) = model_inputs(config, seed);
    let eval = |p: &Parameters<f64>, tape: &mut Tape<f64>, bind_grad: bool| -> Result<(Var, Vec<Var>)> {
        let bound = p.bind(tape, bind_grad);
        let pv = tape.constant(prev.clone());
        let cv = tape.constant(curr.clone());
        let out = forward(tape, config, &bound, pv, cv, Mode::Eval)?;
        Ok((out, bound.iter().map(|(_, v)| *v).collect()))
    };

    let mut tape = Tape::new();
    let (pred, _) = eval(&params, &mut tape, false)?;
    let pred0 = tape.value(pred).clone();
    let shift = normal(pred0.shape(), seed + 22);
    let target = pred0.zip_map(&shift, |p, s| p + s.signum() * (0.5 + s.abs())).unwrap();

    let loss_of = |p: &Parameters<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let (out, _) = eval(p, &mut tape, false)?;
        let t = tape.constant(target.clone());
        let l = loss_mae(&mut tape, out, t, &config.grid)?;
        Ok(tape.value(l).data()[0])
    };

    let mut tape = Tape::new();
    let (out, vars) = eval(&params, &mut tape, true)?;
    let t = tape.constant(target.clone());
    let l = loss_mae(&mut tape, out, t, &config.grid)?;
    let grads = tape.backward(l)?;
    let paths: Vec<String> = params.iter().map(|(p, _)| p.clone()).collect();

    let per_tensor = (samples / params.len().max(1)).clamp(1, 3);
    let coords = sample_coordinates(&params, per_tensor, seed);
    let mut worst = (0.0, String::new());
    let mut checked = 0;
    let mut below_floor = 0;
    let mut work = params.clone();
    for &(k, i) in &coords {
        if checked >= samples.max(per_tensor * params.len()) && checked - below_floor >= samples {
            break;
        }
        if checked >= MAX_DRAW_FACTOR * samples.max(1) {
            break;
        }
        let path = &paths[k];
        let analytic = grads.get(vars[k]).map_or(0.0, |g| g.data()[i]);
        let x0 = params.get(path).expect("path").data()[i];
        work.get_mut(path).expect("path").data_mut()[i] = x0 + h;
        let plus = loss_of(&work)?;
        work.get_mut(path).expect("path").data_mut()[i] = x0 - h;
        let minus = loss_of(&work)?;
        work.get_mut(path).expect("path").data_mut()[i] = x0;
        let numeric = (plus - minus) / (2.0 * h);
        let err = relative_error(analytic, numeric);
        if analytic.abs().max(numeric.abs()) < RELATIVE_FLOOR {
            below_floor += 1;
        }
        if err > worst.0 || worst.1.is_empty() {
            worst = (err, format!("{path}[{i}] analytic {analytic:e} numeric {numeric:e}"));
        }
        checked += 1;
    }
    Ok(CheckOutcome {
        name: "full model".into(),
        checked,
        max_rel_error: worst.0,
        worst: worst.1,
        below_floor,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Gradient of a two-step MSE rollout with respect to the initial state,
/// exercising backpropagation through the autoregressive chain.
pub fn rollout(
    config: &ModelConfig,
    point: ParameterPoint,
    seed: u64,
    samples: usize,
    h: f64,
) -> Result<CheckOutcome> {
    let start = Instant::now();
    let params = parameters_at(config, point, seed)?;
    let (prev, curr) = model_inputs(config, seed);
    let targets = [normal(curr.shape(), seed + 23), normal(curr.shape(), seed + 24)];
    let f = |t: &mut Tape<f64>, cv: Var| -> Result<Var> {
        let bound = params.bind(t, false);
        let pv = t.constant(prev.clone());
        let x1 = forward(t, config, &bound, pv, cv, Mode::Eval)?;
        let x2 = forward(t, config, &bound, cv, x1, Mode::Eval)?;
        let tv: Vec<Var> = targets.iter().map(|x| t.constant(x.clone())).collect();
        loss_mse_multistep(t, &[x1, x2], &tv, &config.grid)
    };
    let mut rng = rng_for(seed, &[0x5b]);
    let mut idx: Vec<usize> = (0..curr.len()).collect();
    idx.shuffle(&mut rng);
    idx.truncate(samples);
    let r = finite_difference_check_at(f, &curr, h, &idx)?;
    Ok(outcome("two-step rollout / initial state", &r, start))
}
