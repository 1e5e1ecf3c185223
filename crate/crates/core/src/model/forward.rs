use rand::Rng;

use super::{BoundParameters, LkaGeometry, LkaMode, MergeMode, ModelConfig, Parameters, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::grid::StatePair;
use crate::seed::rng_for;
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// DropPath active; decisions derive from `seed` and the block index.
    Train { seed: u64 },
}

fn pointwise<T: Real>(tape: &mut Tape<T>, p: &BoundParameters, name: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{name}.weight"))?;
    let b = p.var(&format!("{name}.bias"))?;
    tape.conv2d_pointwise(x, w, b)
}

fn lka_block<T: Real>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    p: &BoundParameters,
    prefix: &str,
    x: Var,
    keep: Option<f64>,
) -> Result<Var> {
    // the whole branch is dropped: residual identity
    let Some(keep) = keep else {
        return Ok(x);
    };
    let u = pointwise(tape, p, &format!("{prefix}.proj_in"), x)?;
    let u = tape.gelu(u)?;
    let dw = p.var(&format!("{prefix}.lka.dw"))?;
    let attn = match config.lka_mode {
        LkaMode::Direct => tape.conv2d_depthwise(u, dw, 1)?,
        LkaMode::Decomposed => {
            let geo = LkaGeometry::for_kernel(config.kernel);
            let a = tape.conv2d_depthwise(u, dw, 1)?;
            let dwd = p.var(&format!("{prefix}.lka.dw_dilated"))?;
            tape.conv2d_depthwise(a, dwd, geo.dilation)?
        }
    };
    let attn = pointwise(tape, p, &format!("{prefix}.lka.pw"), attn)?;
    let gated = tape.hadamard(attn, u)?;
    let mut branch = pointwise(tape, p, &format!("{prefix}.proj_out"), gated)?;
    if keep < 1.0 {
        branch = tape.scale(branch, T::lit(1.0 / keep))?;
    }
    tape.add(x, branch)
}

/// One forward step `(X^{t-1}, X^t) -> X̂^{t+1}` recorded on `tape`.
pub fn forward<T: Real>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    params: &BoundParameters,
    prev: Var,
    curr: Var,
    mode: Mode,
) -> Result<Var> {
    let [c, h, w] = config.output_shape();
    for v in [prev, curr] {
        if tape.value(v).shape() != [c, h, w] {
            return Err(Error::config(format!(
                "model expects [{c},{h},{w}] states, got {:?}",
                tape.value(v).shape()
            )));
        }
    }
    let p = config.patch;
    let [_, hl, _] = config.latent_shape();

    let x = tape.concat_channels(&[prev, curr])?;
    let x = tape.crop_rows(x, hl * p)?;
    let x = tape.pixel_unshuffle(x, p)?;
    let embed = pointwise(tape, params, "embed", x).map_err(|e| e.within("embed"))?;

    let mut features = Vec::with_capacity(5);
    let mut x = embed;
    let mut index = 0;
    for (s, &n) in config.blocks.iter().enumerate() {
        for b in 0..n {
            let prefix = format!("stages.{s}.blocks.{b}");
            let keep = match mode {
                Mode::Eval => Some(1.0),
                Mode::Train { seed } => {
                    let drop = config.droppath_for(index);
                    if drop > 0.0 && rng_for(seed, &[index as u64]).gen::<f64>() < drop {
                        None
                    } else {
                        Some(1.0 - drop)
                    }
                }
            };
            x = lka_block(tape, config, params, &prefix, x, keep).map_err(|e| e.within(&prefix))?;
            index += 1;
        }
        let g = params.var(&format!("stages.{s}.norm.gamma"))?;
        let bt = params.var(&format!("stages.{s}.norm.beta"))?;
        let normed = tape
            .layer_norm(x, g, bt, T::lit(LAYER_NORM_EPS))
            .map_err(|e| e.within(&format!("stages.{s}.norm")))?;
        features.push(normed);
    }
    features.push(embed);
    let cat = tape.concat_channels(&features)?;
    let fused = pointwise(tape, params, "fuse", cat).map_err(|e| e.within("fuse"))?;
    let merged = pointwise(tape, params, "merge", fused).map_err(|e| e.within("merge"))?;
    let up = match config.merge {
        MergeMode::Resize => merged,
        MergeMode::PixelShuffleResize => tape.pixel_shuffle(merged, p)?,
    };
    let up = tape.resize_bilinear(up, h, w).map_err(|e| e.within("merge"))?;
    tape.add(curr, up).map_err(|e| e.within("residual"))
}

/// Eval-mode prediction outside any training graph.
pub fn predict<T: Real>(
    config: &ModelConfig,
    params: &Parameters<T>,
    pair: &StatePair,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let prev = tape.leaf(pair.prev.cast(), false);
    let curr = tape.leaf(pair.curr.cast(), false);
    let out = forward(&mut tape, config, &bound, prev, curr, Mode::Eval)?;
    Ok(tape.value(out).clone())
}
