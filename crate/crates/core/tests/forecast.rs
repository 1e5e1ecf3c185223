use puyun_core::forecast::{cascade_rollout, rollout, ForecastFile, ModelId};
use puyun_core::grid::{generate_synthetic, Dataset, GeneratorParams, StatePair};
use puyun_core::model::{init_parameters, predict, randomized_parameters, LkaMode, MergeMode, ModelConfig, Parameters};
use puyun_core::Error;

fn setup() -> (Dataset, ModelConfig, Parameters, Parameters) {
    let ds = generate_synthetic(&GeneratorParams {
        n_lat: 9,
        n_lon: 16,
        channels: 3,
        steps: 40,
        seed: 5,
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
        droppath_rate: 0.0,
        variables: ds.variables.clone(),
        grid: ds.grid.clone(),
    };
    // Small random weights keep the rollout non-trivial but bounded.
    let scaled = |seed| {
        let mut p = randomized_parameters::<f32>(&cfg, seed).unwrap();
        for (_, t) in p.iter_mut() {
            for v in t.data_mut() {
                *v *= 0.3;
            }
        }
        p
    };
    let (a, b) = (scaled(1), scaled(2));
    (ds, cfg, a, b)
}

fn pair(ds: &Dataset, t: usize) -> StatePair {
    ds.sample_pair(t, 0).unwrap().0
}

#[test]
fn one_step_equals_forward() {
    let (ds, cfg, p, _) = setup();
    let init = pair(&ds, 10);
    let run = rollout(&cfg, &p, &init, 10, 1).unwrap();
    assert_eq!(run.steps.len(), 1);
    assert_eq!(run.steps[0].state, predict(&cfg, &p, &init).unwrap());
    assert_eq!(run.steps[0].lead_hours, 6);
    assert!(matches!(rollout(&cfg, &p, &init, 10, 0), Err(Error::Usage(_))));
}

#[test]
fn three_steps_chain_manually() {
    let (ds, cfg, p, _) = setup();
    let init = pair(&ds, 10);
    let run = rollout(&cfg, &p, &init, 10, 3).unwrap();
    let x1 = predict(&cfg, &p, &init).unwrap();
    let x2 = predict(&cfg, &p, &StatePair { prev: init.curr.clone(), curr: x1.clone() }).unwrap();
    let x3 = predict(&cfg, &p, &StatePair { prev: x1.clone(), curr: x2.clone() }).unwrap();
    let got: Vec<_> = run.states().cloned().collect();
    assert_eq!(got, vec![x1, x2, x3]);
    assert_eq!(run.steps.iter().map(|s| s.lead_hours).collect::<Vec<_>>(), vec![6, 12, 18]);
    assert_eq!(run.handoff(), None);
}

#[test]
fn zero_merge_rollout_is_persistence() {
    let (ds, cfg, _, _) = setup();
    let p = init_parameters(&cfg, 0).unwrap();
    let init = pair(&ds, 10);
    let run = rollout(&cfg, &p, &init, 10, 4).unwrap();
    assert!(run.states().all(|s| *s == init.curr));
}

#[test]
fn cascade_prefix_matches_short_rollout() {
    let (ds, cfg, short, medium) = setup();
    let init = pair(&ds, 10);
    let plain = rollout(&cfg, &short, &init, 10, 6).unwrap();
    let run = cascade_rollout(&cfg, &short, &cfg, &medium, &init, 10, 6, 3).unwrap();
    assert_eq!(run.steps[..3], plain.steps[..3]);
    assert_eq!(run.handoff(), Some(3));
    assert!(run.steps[3..].iter().all(|s| s.model == ModelId::Medium));
    let x4 = predict(
        &cfg,
        &medium,
        &StatePair { prev: plain.steps[1].state.clone(), curr: plain.steps[2].state.clone() },
    )
    .unwrap();
    assert_eq!(run.steps[3].state, x4);
    assert_ne!(run.steps[5].state, plain.steps[5].state);
}

#[test]
fn cascade_with_identical_models_is_plain_rollout() {
    let (ds, cfg, short, _) = setup();
    let init = pair(&ds, 10);
    let plain = rollout(&cfg, &short, &init, 10, 5).unwrap();
    let run = cascade_rollout(&cfg, &short, &cfg, &short, &init, 10, 5, 2).unwrap();
    assert!(run.states().eq(plain.states()));

    let last = cascade_rollout(&cfg, &short, &cfg, &short, &init, 10, 5, 4).unwrap();
    assert_eq!(last.steps.iter().filter(|s| s.model == ModelId::Medium).count(), 1);
}

#[test]
fn handoff_bounds() {
    let (ds, cfg, short, medium) = setup();
    let init = pair(&ds, 10);
    for s in [0, 1, 5, 6] {
        let r = cascade_rollout(&cfg, &short, &cfg, &medium, &init, 10, 5, s);
        assert!(matches!(r, Err(Error::Range(_))), "S = {s}");
    }
}

#[test]
fn forecast_file_round_trip() {
    let (ds, cfg, short, medium) = setup();
    let runs: Vec<_> = [8, 12]
        .iter()
        .map(|&t| {
            let time = ds.states[t].time_index;
            cascade_rollout(&cfg, &short, &cfg, &medium, &pair(&ds, t), time, 4, 2).unwrap()
        })
        .collect();
    let file = ForecastFile::from_runs(
        ds.grid.clone(),
        ds.variables.clone(),
        ds.stats.clone(),
        &runs,
        "aa".into(),
        Some("bb".into()),
    )
    .unwrap();
    assert_eq!(file.meta.handoff, Some(2));
    assert_eq!(file.meta.lead_hours, vec![6, 12, 18, 24]);

    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.pygr");
    let b = dir.path().join("b.pygr");
    file.save(&a).unwrap();
    let back = ForecastFile::load(&a).unwrap();
    assert_eq!(back, file);
    back.save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(
        std::fs::read(dir.path().join("a.pygr.json")).unwrap(),
        std::fs::read(dir.path().join("b.pygr.json")).unwrap()
    );

    let mixed = [runs[0].clone(), rollout(&cfg, &short, &pair(&ds, 9), 9, 4).unwrap()];
    let err = ForecastFile::from_runs(ds.grid.clone(), ds.variables.clone(), ds.stats.clone(), &mixed, "aa".into(), None);
    assert!(matches!(err, Err(Error::Usage(_))));
}

#[test]
fn non_finite_state_names_the_step() {
    let (ds, cfg, short, _) = setup();
    let mut init = pair(&ds, 10);
    init.curr.data_mut()[0] = f32::NAN;
    let err = rollout(&cfg, &short, &init, 10, 3).unwrap_err().to_string();
    assert!(err.contains("forecast step 1"), "{err}");
}
