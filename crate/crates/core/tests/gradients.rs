use puyun_core::gradient_suite::{self, ParameterPoint, DEFAULT_SEED, DEFAULT_STEP, DEFAULT_TOLERANCE};
use puyun_core::grid::{make_grid, VariableSet};
use puyun_core::model::{LkaMode, MergeMode, ModelConfig};

#[test]
fn every_primitive_passes() {
    let out = gradient_suite::primitives(DEFAULT_SEED, DEFAULT_STEP).unwrap();
    assert!(out.len() >= 3 * 25);
    for o in &out {
        assert!(o.passed(DEFAULT_TOLERANCE), "{o:?}");
    }
}

fn small(merge: MergeMode, lka_mode: LkaMode) -> ModelConfig {
    ModelConfig {
        embed_dim: 8,
        blocks: [1, 1, 1, 1],
        kernel: 7,
        lka_mode,
        patch: 2,
        merge,
        droppath_rate: 0.0,
        ..ModelConfig::desk(VariableSet::with_channels(3).unwrap(), make_grid(11, 16).unwrap())
    }
}

#[test]
fn small_models_pass_in_every_mode() {
    for merge in [MergeMode::Resize, MergeMode::PixelShuffleResize] {
        for mode in [LkaMode::Direct, LkaMode::Decomposed] {
            let cfg = small(merge, mode);
            let o = gradient_suite::model(&cfg, ParameterPoint::Randomized, 3, 120, DEFAULT_STEP).unwrap();
            assert!(o.passed(DEFAULT_TOLERANCE), "{merge:?} {mode:?}: {o:?}");
            assert!(o.checked - o.below_floor >= 120, "{o:?}");
        }
    }
}

#[test]
fn rollout_chain_passes() {
    let o = gradient_suite::rollout(
        &small(MergeMode::PixelShuffleResize, LkaMode::Decomposed),
        ParameterPoint::Randomized,
        4,
        40,
        DEFAULT_STEP,
    )
        .unwrap();
    assert!(o.passed(DEFAULT_TOLERANCE), "{o:?}");
}

#[test]
fn desk_model_passes() {
    let cfg = ModelConfig::desk(VariableSet::desk(), make_grid(33, 64).unwrap());
    let o = gradient_suite::model(&cfg, ParameterPoint::Init, 1, 200, DEFAULT_STEP).unwrap();
    assert!(o.passed(DEFAULT_TOLERANCE), "{o:?}");
    assert!(o.checked - o.below_floor >= 200, "{o:?}");
}

// At unit-activation scale the desk model is nonlinear enough that the
// h = 1e-3 difference carries ~1e-4 of truncation error; a smaller step
// must close the gap if the analytic gradient is right.
#[test]
fn desk_model_converges_at_rough_point() {
    let cfg = ModelConfig::desk(VariableSet::desk(), make_grid(33, 64).unwrap());
    let o = gradient_suite::model(&cfg, ParameterPoint::Randomized, 2, 200, 1e-4).unwrap();
    assert!(o.passed(DEFAULT_TOLERANCE), "{o:?}");
    assert!(o.checked - o.below_floor >= 200, "{o:?}");
    assert!(o.below_floor < 20, "{o:?}");
}

// At h = 1e-3 a nonlinear, coupled op (layer norm) fails the per-coordinate
// 1e-4 bound on a few percent of random draws, wherever one coordinate of
// Jᵀr nearly vanishes while the h² term does not. Shrinking h must close
// that gap on every draw if the analytic gradients are right.
#[test]
fn primitives_converge_across_seeds() {
    for seed in 0..40 {
        for o in gradient_suite::primitives(seed, 1e-4).unwrap() {
            assert!(o.passed(DEFAULT_TOLERANCE), "seed {seed}: {o:?}");
        }
    }
}
