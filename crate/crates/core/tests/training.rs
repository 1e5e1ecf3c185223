use puyun_core::grid::{generate_synthetic, make_grid, Dataset, GeneratorParams, GridSpec};
use puyun_core::model::{init_parameters, LkaMode, MergeMode, ModelConfig, Parameters};
use puyun_core::training::{
    adamw_step, build_handoff_set, finetune_cascade_medium, finetune_dynamic_steps, loss_mae,
    loss_mse_multistep, pretrain_single_step, AdamWConfig, Execution, OptimizerState,
    TrainConfig,
};
use puyun_core::forecast::rollout;
use puyun_core::{Error, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mae_value(pred: &Tensor<f64>, target: &Tensor<f64>, grid: &GridSpec) -> f64 {
    let mut t = Tape::new();
    let p = t.leaf(pred.clone(), false);
    let q = t.leaf(target.clone(), false);
    let l = loss_mae(&mut t, p, q, grid).unwrap();
    t.value(l).data()[0]
}

#[test]
fn mae_hand_cases() {
    let g = GridSpec::from_latitudes(vec![0.0], 2).unwrap();
    let p = Tensor::new(vec![1, 1, 2], vec![3.0, -1.0]).unwrap();
    let z = Tensor::zeros(vec![1, 1, 2]);
    assert_eq!(mae_value(&p, &z, &g), 2.0);
    assert_eq!(mae_value(&p, &p, &g), 0.0);

    let g = GridSpec::from_latitudes(vec![0.0, 60.0], 1).unwrap();
    let p = Tensor::new(vec![1, 2, 1], vec![3.0, 0.0]).unwrap();
    let z = Tensor::zeros(vec![1, 2, 1]);
    assert!((mae_value(&p, &z, &g) - 2.0).abs() < 1e-15);
}

fn random_field(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<f64> {
    Tensor::from_fn(vec![c, h, w], |_| rng.gen_range(-3.0..3.0))
}

fn random_grid(rng: &mut ChaCha8Rng) -> GridSpec {
    let h = rng.gen_range(1..6);
    let lats = (0..h).map(|_| rng.gen_range(-89.0..89.0)).collect();
    GridSpec::from_latitudes(lats, rng.gen_range(1..6)).unwrap()
}

#[test]
fn losses_match_loop_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let g = random_grid(&mut rng);
        let (c, h, w) = (rng.gen_range(1..4), g.n_lat, g.n_lon);
        let steps = rng.gen_range(1..4);
        let preds: Vec<_> = (0..steps).map(|_| random_field(&mut rng, c, h, w)).collect();
        let targets: Vec<_> = (0..steps).map(|_| random_field(&mut rng, c, h, w)).collect();

        let mut abs = 0.0;
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let k = (ch * h + i) * w + j;
                    abs += g.weights[i] * (preds[0].data()[k] - targets[0].data()[k]).abs();
                }
            }
        }
        abs /= (c * h * w) as f64;
        let got = mae_value(&preds[0], &targets[0], &g);
        assert!((got - abs).abs() <= 1e-10 * abs.abs(), "{got} vs {abs}");

        let mut sq = 0.0;
        for s in 0..steps {
            let mut step = 0.0;
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let k = (ch * h + i) * w + j;
                        step += g.weights[i] * (preds[s].data()[k] - targets[s].data()[k]).powi(2);
                    }
                }
            }
            sq += step / (c * h * w) as f64;
        }
        sq /= steps as f64;
        let mut t = Tape::new();
        let pv: Vec<_> = preds.iter().map(|p| t.leaf(p.clone(), false)).collect();
        let tv: Vec<_> = targets.iter().map(|p| t.leaf(p.clone(), false)).collect();
        let l = loss_mse_multistep(&mut t, &pv, &tv, &g).unwrap();
        let got = t.value(l).data()[0];
        assert!((got - sq).abs() <= 1e-10 * sq.abs(), "{got} vs {sq}");
    }
}

#[test]
fn mae_gradient_is_weighted_sign() {
    let g = make_grid(5, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pred = random_field(&mut rng, 2, 5, 4);
    let target = random_field(&mut rng, 2, 5, 4);
    let mut t = Tape::new();
    let p = t.leaf(pred.clone(), true);
    let q = t.leaf(target.clone(), false);
    let l = loss_mae(&mut t, p, q, &g).unwrap();
    let grads = t.backward(l).unwrap();
    let gp = grads.get(p).unwrap();
    for (k, &v) in gp.data().iter().enumerate() {
        let i = (k / 4) % 5;
        let sign = (pred.data()[k] - target.data()[k]).signum();
        let want = g.weights[i] * sign / 40.0;
        assert!((v - want).abs() <= 1e-15 * want.abs(), "{v} vs {want}");
    }
}

#[test]
fn multistep_mse_cases() {
    let g = GridSpec::from_latitudes(vec![10.0, -10.0], 3).unwrap();
    let z = Tensor::zeros(vec![1, 2, 3]);
    let eval = |preds: Vec<Tensor<f64>>| {
        let mut t = Tape::new();
        let pv: Vec<_> = preds.into_iter().map(|p| t.leaf(p, false)).collect();
        let tv: Vec<_> = pv.iter().map(|_| t.leaf(z.clone(), false)).collect();
        let l = loss_mse_multistep(&mut t, &pv, &tv, &g).unwrap();
        t.value(l).data()[0]
    };
    assert_eq!(eval(vec![z.clone()]), 0.0);
    assert!((eval(vec![Tensor::full(vec![1, 2, 3], 0.5)]) - 0.25).abs() < 1e-15);
    let two = eval(vec![Tensor::full(vec![1, 2, 3], 1.0), Tensor::full(vec![1, 2, 3], 3f64.sqrt())]);
    assert!((two - 2.0).abs() < 1e-14);

    let mut t: Tape<f64> = Tape::new();
    let a = t.leaf(z.clone(), false);
    assert!(matches!(loss_mse_multistep(&mut t, &[a, a], &[a], &g), Err(Error::Shape(_))));
    assert!(matches!(loss_mse_multistep(&mut t, &[], &[], &g), Err(Error::Shape(_))));
}

fn scalar_params(v: f64) -> Parameters<f64> {
    let mut m = indexmap::IndexMap::new();
    m.insert("w".to_string(), Tensor::new(vec![1, 1], vec![v]).unwrap());
    Parameters::from_map(m)
}

#[test]
fn adamw_first_step_and_zero_gradients() {
    let cfg = AdamWConfig {
        lr: 0.1,
        beta1: 0.9,
        beta2: 0.95,
        eps: 1e-8,
        weight_decay: 0.0,
    };
    let mut p = scalar_params(0.0);
    let mut s = OptimizerState::new(&p);
    adamw_step(&mut p, &[Tensor::new(vec![1, 1], vec![1.0]).unwrap()], &mut s, &cfg).unwrap();
    let w = p.get("w").unwrap().data()[0];
    assert!((w + 0.1).abs() < 1e-8, "{w}");

    let mut p = scalar_params(0.7);
    let mut s = OptimizerState::new(&p);
    for _ in 0..5 {
        adamw_step(&mut p, &[Tensor::zeros(vec![1, 1])], &mut s, &cfg).unwrap();
    }
    assert_eq!(p.get("w").unwrap().data()[0], 0.7);
    assert!(adamw_step(&mut p, &[], &mut s, &cfg).is_err());
}

/// Independent scalar AdamW recurrence.
fn oracle(mut p: f64, grads: &[f64], cfg: &AdamWConfig) -> f64 {
    let (mut m, mut v) = (0.0, 0.0);
    for (t, &g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        p -= cfg.lr * cfg.weight_decay * p;
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
        let mh = m / (1.0 - cfg.beta1.powi(t));
        let vh = v / (1.0 - cfg.beta2.powi(t));
        p -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
    }
    p
}

#[test]
fn adamw_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for wd in [0.0, 0.1] {
        let cfg = AdamWConfig {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: wd,
        };
        let grads: Vec<f64> = (0..100).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut p = scalar_params(0.3);
        let mut s = OptimizerState::new(&p);
        for &g in &grads {
            adamw_step(&mut p, &[Tensor::new(vec![1, 1], vec![g]).unwrap()], &mut s, &cfg).unwrap();
        }
        let want = oracle(0.3, &grads, &cfg);
        let got = p.get("w").unwrap().data()[0];
        assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{got} vs {want}");
        assert_eq!(s.step, 100);
    }
}

#[test]
fn adamw_update_sign_survives_loss_scaling() {
    let cfg = AdamWConfig {
        lr: 1e-3,
        beta1: 0.9,
        beta2: 0.95,
        eps: 1e-8,
        weight_decay: 0.0,
    };
    for scale in [1e-3, 1.0, 1e3] {
        let mut p = scalar_params(1.0);
        let mut s = OptimizerState::new(&p);
        adamw_step(&mut p, &[Tensor::new(vec![1, 1], vec![0.5 * scale]).unwrap()], &mut s, &cfg).unwrap();
        assert!((s.m[0].data()[0] - 0.05 * scale).abs() < 1e-15 * scale.max(1.0));
        assert!(p.get("w").unwrap().data()[0] < 1.0);
    }
}

#[test]
fn decay_skips_vectors() {
    let cfg = AdamWConfig {
        lr: 0.1,
        beta1: 0.9,
        beta2: 0.95,
        eps: 1e-8,
        weight_decay: 0.5,
    };
    let mut m = indexmap::IndexMap::new();
    m.insert("w".to_string(), Tensor::new(vec![1, 1], vec![1.0f64]).unwrap());
    m.insert("b".to_string(), Tensor::new(vec![1], vec![1.0f64]).unwrap());
    let mut p = Parameters::from_map(m);
    let mut s = OptimizerState::new(&p);
    adamw_step(&mut p, &[Tensor::zeros(vec![1, 1]), Tensor::zeros(vec![1])], &mut s, &cfg).unwrap();
    assert!((p.get("w").unwrap().data()[0] - 0.95).abs() < 1e-15);
    assert_eq!(p.get("b").unwrap().data()[0], 1.0);
}

fn tiny_setup() -> (Dataset, ModelConfig) {
    let ds = generate_synthetic(&GeneratorParams {
        n_lat: 9,
        n_lon: 16,
        channels: 4,
        steps: 80,
        seed: 1,
        train_fraction: 0.75,
        valid_fraction: 0.0,
        ..GeneratorParams::default()
    })
    .unwrap();
    let cfg = ModelConfig {
        embed_dim: 8,
        blocks: [1, 1, 1, 1],
        kernel: 5,
        lka_mode: LkaMode::Decomposed,
        patch: 4,
        merge: MergeMode::PixelShuffleResize,
        droppath_rate: 0.1,
        variables: ds.variables.clone(),
        grid: ds.grid.clone(),
    };
    (ds, cfg)
}

fn quick(iterations: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        iterations,
        lr,
        batch_size: 2,
        ..TrainConfig::pretrain()
    }
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let (ds, cfg) = tiny_setup();
    let init = init_parameters(&cfg, 1).unwrap();
    let mut tc = quick(5, 0.0);
    tc.weight_decay = 0.1;
    let out = pretrain_single_step(&ds, &cfg, init.clone(), &tc, None).unwrap();
    assert_eq!(out.params, init);
    assert_eq!(out.trace.len(), 5);
}

#[test]
fn pretraining_is_deterministic_and_learns() {
    let (ds, cfg) = tiny_setup();
    let init = init_parameters(&cfg, 1).unwrap();
    let tc = quick(200, 2e-3);
    let a = pretrain_single_step(&ds, &cfg, init.clone(), &tc, None).unwrap();
    let b = pretrain_single_step(&ds, &cfg, init, &tc, None).unwrap();
    assert_eq!(a.params, b.params);
    let la: Vec<f64> = a.trace.iter().map(|r| r.loss).collect();
    let lb: Vec<f64> = b.trace.iter().map(|r| r.loss).collect();
    assert_eq!(la, lb);
    let first: f64 = la[..50].iter().sum();
    let last: f64 = la[150..].iter().sum();
    assert!(last < first, "{last} vs {first}");
}

#[test]
fn hook_sees_every_iteration() {
    let (ds, cfg) = tiny_setup();
    let mut seen = Vec::new();
    let mut hook = |row: &puyun_core::training::TraceRow, _: &Parameters| {
        seen.push(row.iteration);
        Ok(())
    };
    pretrain_single_step(&ds, &cfg, init_parameters(&cfg, 0).unwrap(), &quick(3, 1e-3), Some(&mut hook))
        .unwrap();
    assert_eq!(seen, vec![0, 1, 2]);
}

fn ft(iterations: usize, m: usize, workers: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        max_steps: m,
        workers,
        lr: 1e-3,
        ..TrainConfig::finetune()
    }
}

#[test]
fn fixed_two_step_rollouts_when_m_is_two() {
    let (ds, cfg) = tiny_setup();
    let out = finetune_dynamic_steps(&ds, &cfg, init_parameters(&cfg, 0).unwrap(), &ft(4, 2, 1), Execution::Sequential, None)
        .unwrap();
    assert!(out.trace.iter().all(|r| r.steps == vec![2]));
    let err = finetune_dynamic_steps(&ds, &cfg, init_parameters(&cfg, 0).unwrap(), &ft(1, 1, 1), Execution::Sequential, None);
    assert!(matches!(err, Err(Error::Config(_))));
    let err = finetune_dynamic_steps(&ds, &cfg, init_parameters(&cfg, 0).unwrap(), &ft(1, 80, 1), Execution::Sequential, None);
    assert!(matches!(err, Err(Error::Data(_))));
}

#[test]
fn parallel_workers_match_sequential_bitwise() {
    let (ds, cfg) = tiny_setup();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let init = init_parameters(&cfg, 3).unwrap();
    let tc = ft(6, 4, 4);
    let seq = finetune_dynamic_steps(&ds, &cfg, init.clone(), &tc, Execution::Sequential, None).unwrap();
    let par = pool
        .install(|| finetune_dynamic_steps(&ds, &cfg, init, &tc, Execution::Parallel, None))
        .unwrap();
    assert_eq!(seq.params, par.params);
    let steps: Vec<_> = seq.trace.iter().map(|r| r.steps.clone()).collect();
    assert_eq!(steps, par.trace.iter().map(|r| r.steps.clone()).collect::<Vec<_>>());
    assert!(steps.iter().flatten().all(|&k| (2..=4).contains(&k)));
}

#[test]
fn handoff_pairs_are_short_rollouts() {
    let (ds, cfg) = tiny_setup();
    let short = pretrain_single_step(&ds, &cfg, init_parameters(&cfg, 0).unwrap(), &quick(20, 1e-3), None)
        .unwrap()
        .params;
    let set = build_handoff_set(&ds, &cfg, &short, 3, 2).unwrap();
    for t in [1, 10, set.pairs.len() - 1] {
        let (pair, _) = ds.sample_pair(t, 0).unwrap();
        let run = rollout(&cfg, &short, &pair, 0, 3).unwrap();
        let got = set.pairs[t].as_ref().unwrap();
        assert_eq!(got.prev, run.steps[1].state);
        assert_eq!(got.curr, run.steps[2].state);
    }
    assert!(set.pairs[0].is_none());

    let s1 = build_handoff_set(&ds, &cfg, &short, 1, 2).unwrap();
    let (pair, _) = ds.sample_pair(5, 0).unwrap();
    assert_eq!(s1.pairs[5].as_ref().unwrap().prev, pair.curr);

    let medium = finetune_cascade_medium(&ds, &cfg, &short, 3, &ft(3, 3, 2), Execution::Sequential, None).unwrap();
    assert_ne!(medium.params, short);
}
