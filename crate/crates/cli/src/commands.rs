use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use puyun_core::evaluation::{self, Baseline, EvalReport};
use puyun_core::forecast::{cascade_rollout, rollout, ForecastFile, ForecastRun};
use puyun_core::gradient_suite::{self, CheckOutcome, ParameterPoint, DEFAULT_SEED, DEFAULT_STEP, DEFAULT_TOLERANCE};
use puyun_core::grid::{generate_synthetic, make_grid, Climatology, Dataset, GeneratorParams, Split, VariableSet};
use puyun_core::model::{
    checkpoint_hash, init_parameters, load_checkpoint, save_checkpoint, Checkpoint, LkaMode, MergeMode, ModelConfig,
    Parameters,
};
use puyun_core::training::{
    finetune_cascade_medium, finetune_dynamic_steps, pretrain_single_step, write_trace_csv, Execution, TraceRow,
    TrainConfig, TrainOutcome,
};

use crate::ablation::{self, AblationSpec, TABLE};
use crate::args::*;
use crate::config::{required, resolve};
use crate::error::{usage, CliError, CliResult};

pub const DEFAULT_CLIMATOLOGY_PERIOD: usize = 40;

pub fn run(command: Command) -> CliResult<()> {
    match command {
        Command::GenData(a) => gen_data(&resolve(&a, a.config.as_deref())?),
        Command::Train(a) => train(&resolve(&a, a.config.as_deref())?),
        Command::Finetune(a) => finetune(&resolve(&a, a.config.as_deref())?),
        Command::CascadeFinetune(a) => cascade_finetune(&resolve(&a, a.config.as_deref())?),
        Command::Forecast(a) => forecast(&resolve(&a, a.config.as_deref())?),
        Command::Evaluate(a) => evaluate(&resolve(&a, a.config.as_deref())?),
        Command::Ablate(a) => ablate(&resolve(&a, a.config.as_deref())?),
        Command::Gradcheck(a) => gradcheck(&resolve(&a, a.config.as_deref())?),
    }
}

/// `"33x64"` → `(33, 64)`.
pub fn parse_grid(s: &str) -> CliResult<(usize, usize)> {
    let bad = || usage(format!("grid {s:?} must look like HxW, e.g. 33x64"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let h = h.trim().parse().map_err(|_| bad())?;
    let w = w.trim().parse().map_err(|_| bad())?;
    Ok((h, w))
}

pub fn parse_blocks(s: &str) -> CliResult<[usize; 4]> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| usage(format!("blocks {s:?} must be four integers a,b,c,d")))?;
    parts
        .try_into()
        .map_err(|_| usage(format!("blocks {s:?} must be four integers a,b,c,d")))
}

pub fn parse_lka_mode(s: &str) -> CliResult<LkaMode> {
    match s {
        "direct" => Ok(LkaMode::Direct),
        "decomposed" => Ok(LkaMode::Decomposed),
        _ => Err(usage(format!("lka mode {s:?} must be direct or decomposed"))),
    }
}

fn parse_execution(s: Option<&str>) -> CliResult<Execution> {
    match s.unwrap_or("parallel") {
        "sequential" => Ok(Execution::Sequential),
        "parallel" => Ok(Execution::Parallel),
        other => Err(usage(format!("execution {other:?} must be sequential or parallel"))),
    }
}

fn parse_split(s: &str) -> CliResult<Split> {
    match s {
        "train" => Ok(Split::Train),
        "valid" => Ok(Split::Valid),
        "test" => Ok(Split::Test),
        other => Err(usage(format!("split {other:?} must be train, valid or test"))),
    }
}

/// Desk model, optionally replaced by an ablation row, then per-flag overrides.
pub fn model_config(
    args: &ModelArgs,
    variables: VariableSet,
    grid: puyun_core::grid::GridSpec,
) -> CliResult<ModelConfig> {
    let mut cfg = ModelConfig::desk(variables, grid);
    if let Some(arch) = &args.arch {
        let spec = ablation::parse_ablation(arch, &AblationSpec::BASE)?;
        cfg.embed_dim = spec.embed_dim;
        cfg.blocks = spec.blocks;
        cfg.kernel = spec.kernel;
        cfg.merge = spec.merge;
    }
    if let Some(e) = args.embed_dim {
        cfg.embed_dim = e;
    }
    if let Some(b) = &args.blocks {
        cfg.blocks = parse_blocks(b)?;
    }
    if let Some(k) = args.kernel {
        cfg.kernel = k;
    }
    if let Some(m) = &args.merge {
        cfg.merge = MergeMode::from_label(m)
            .ok_or_else(|| usage(format!("merge {m:?} must be resize or pixelshuffle+resize")))?;
    }
    if let Some(m) = &args.lka_mode {
        cfg.lka_mode = parse_lka_mode(m)?;
    }
    if let Some(p) = args.patch {
        cfg.patch = p;
    }
    if let Some(d) = args.droppath {
        cfg.droppath_rate = d;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(puyun_core::Error::from)?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(puyun_core::Error::from)?;
    Ok(())
}

fn load_dataset(path: &Path) -> CliResult<Dataset> {
    Ok(Dataset::load(path)?)
}

fn gen_data(a: &GenDataArgs) -> CliResult<()> {
    let out = required(&a.out, "out")?;
    let defaults = GeneratorParams::default();
    let (n_lat, n_lon) = match &a.grid {
        Some(g) => parse_grid(g)?,
        None => (defaults.n_lat, defaults.n_lon),
    };
    let params = GeneratorParams {
        n_lat,
        n_lon,
        channels: a.channels.unwrap_or(defaults.channels),
        steps: a.steps.unwrap_or(defaults.steps),
        seed: a.seed.unwrap_or(defaults.seed),
        period: a.period.unwrap_or(defaults.period),
        ..defaults
    };
    let ds = generate_synthetic(&params)?;
    ensure_parent(&out)?;
    ds.save(&out)?;
    eprintln!(
        "wrote {} states of {}x{}x{} to {} (train {}, valid {}, test {})",
        ds.len(),
        params.channels,
        n_lat,
        n_lon,
        out.display(),
        ds.split_range(Split::Train).len(),
        ds.split_range(Split::Valid).len(),
        ds.split_range(Split::Test).len(),
    );
    Ok(())
}

/// Writes the checkpoint every `every` iterations and logs progress.
fn progress_hook<'a>(
    config: ModelConfig,
    seed: u64,
    out: &'a Path,
    every: Option<usize>,
    total: usize,
) -> impl FnMut(&TraceRow, &Parameters) -> puyun_core::Result<()> + 'a {
    let log_every = (total / 20).max(1);
    move |row, params| {
        let done = row.iteration + 1;
        if done % log_every == 0 || done == total {
            eprintln!("iteration {done}/{total} loss {:.6} ({} ms)", row.loss, row.wall_ms);
        }
        if let Some(n) = every.filter(|&n| n > 0) {
            if done % n == 0 && done < total {
                save_checkpoint(
                    out,
                    &Checkpoint {
                        config: config.clone(),
                        params: params.clone(),
                        seed,
                    },
                )?;
            }
        }
        Ok(())
    }
}

fn finish_training(
    out: &Path,
    trace: Option<&PathBuf>,
    config: ModelConfig,
    seed: u64,
    outcome: TrainOutcome,
) -> CliResult<()> {
    save_checkpoint(
        out,
        &Checkpoint {
            config,
            params: outcome.params,
            seed,
        },
    )?;
    if let Some(t) = trace {
        ensure_parent(t)?;
        write_trace_csv(t, &outcome.trace)?;
    }
    eprintln!("wrote {} ({})", out.display(), checkpoint_hash(out)?);
    Ok(())
}

fn train(a: &TrainArgs) -> CliResult<()> {
    let ds = load_dataset(&required(&a.data, "data")?)?;
    let out = required(&a.out, "out")?;
    let config = model_config(&a.model, ds.variables.clone(), ds.grid.clone())?;
    let mut tc = TrainConfig::pretrain();
    tc.iterations = a.iters.unwrap_or(tc.iterations);
    tc.lr = a.lr.unwrap_or(tc.lr);
    tc.weight_decay = a.weight_decay.unwrap_or(tc.weight_decay);
    tc.batch_size = a.batch_size.unwrap_or(tc.batch_size);
    tc.seed = a.seed.unwrap_or(tc.seed);
    let init = init_parameters(&config, tc.seed)?;
    eprintln!("{} parameters", config.parameter_count());
    ensure_parent(&out)?;
    let mut hook = progress_hook(config.clone(), tc.seed, &out, a.checkpoint_every, tc.iterations);
    let outcome = pretrain_single_step(&ds, &config, init, &tc, Some(&mut hook))?;
    finish_training(&out, a.trace.as_ref(), config, tc.seed, outcome)
}

fn finetune_config(
    iters: Option<usize>,
    lr: Option<f64>,
    weight_decay: Option<f64>,
    workers: Option<usize>,
    seed: Option<u64>,
    max_steps: usize,
) -> TrainConfig {
    let mut tc = TrainConfig::finetune();
    tc.iterations = iters.unwrap_or(tc.iterations);
    tc.lr = lr.unwrap_or(tc.lr);
    tc.weight_decay = weight_decay.unwrap_or(tc.weight_decay);
    tc.workers = workers.unwrap_or(tc.workers);
    tc.seed = seed.unwrap_or(tc.seed);
    tc.max_steps = max_steps;
    tc
}

fn finetune(a: &FinetuneArgs) -> CliResult<()> {
    let ds = load_dataset(&required(&a.data, "data")?)?;
    let out = required(&a.out, "out")?;
    let ckpt = load_checkpoint(&required(&a.ckpt, "ckpt")?)?;
    check_matches(&ckpt.config, &ds)?;
    let tc = finetune_config(
        a.iters,
        a.lr,
        a.weight_decay,
        a.workers,
        a.seed,
        a.max_steps.unwrap_or(TrainConfig::finetune().max_steps),
    );
    let execution = parse_execution(a.execution.as_deref())?;
    ensure_parent(&out)?;
    let mut hook = progress_hook(ckpt.config.clone(), tc.seed, &out, a.checkpoint_every, tc.iterations);
    let outcome = finetune_dynamic_steps(&ds, &ckpt.config, ckpt.params, &tc, execution, Some(&mut hook))?;
    finish_training(&out, a.trace.as_ref(), ckpt.config, tc.seed, outcome)
}

fn cascade_finetune(a: &CascadeArgs) -> CliResult<()> {
    let ds = load_dataset(&required(&a.data, "data")?)?;
    let out = required(&a.out, "out")?;
    let short = load_checkpoint(&required(&a.short_ckpt, "short-ckpt")?)?;
    check_matches(&short.config, &ds)?;
    let handoff = required(&a.handoff, "handoff")?;
    let tc = finetune_config(
        a.iters,
        a.lr,
        a.weight_decay,
        a.workers,
        a.seed,
        a.max_steps.unwrap_or(handoff),
    );
    let execution = parse_execution(a.execution.as_deref())?;
    ensure_parent(&out)?;
    let mut hook = progress_hook(short.config.clone(), tc.seed, &out, a.checkpoint_every, tc.iterations);
    let outcome = finetune_cascade_medium(
        &ds,
        &short.config,
        &short.params,
        handoff,
        &tc,
        execution,
        Some(&mut hook),
    )?;
    finish_training(&out, a.trace.as_ref(), short.config, tc.seed, outcome)
}

fn check_matches(config: &ModelConfig, ds: &Dataset) -> CliResult<()> {
    if config.variables.channel_names() != ds.variables.channel_names() || config.grid != ds.grid {
        return Err(puyun_core::Error::Data("checkpoint does not match the dataset's grid or variables".into()).into());
    }
    Ok(())
}

/// Time indices of every `stride`-th position of `split` that has a previous
/// state and `steps` truth states after it.
pub fn init_times(ds: &Dataset, split: Split, stride: usize, steps: usize) -> CliResult<Vec<u64>> {
    if stride == 0 {
        return Err(usage("stride must be at least 1"));
    }
    let r = ds.split_range(split);
    let times: Vec<u64> = r
        .filter(|&p| p >= 1 && p + steps < ds.len())
        .step_by(stride)
        .map(|p| ds.states[p].time_index)
        .collect();
    if times.is_empty() {
        return Err(
            puyun_core::Error::Range(format!("no init in the split has {steps} steps of truth after it")).into(),
        );
    }
    Ok(times)
}

/// Forecast runs from each init time, Short only or the Short→Medium cascade.
pub fn forecast_runs(
    ds: &Dataset,
    short: &Checkpoint,
    medium: Option<(&Checkpoint, usize)>,
    times: &[u64],
    steps: usize,
) -> CliResult<Vec<ForecastRun>> {
    if steps == 0 {
        return Err(usage("--steps must be at least 1"));
    }
    let runs = times
        .par_iter()
        .map(|&t| {
            let p = ds.position(t)?;
            let (pair, _) = ds.sample_pair(p, 0)?;
            match medium {
                None => rollout(&short.config, &short.params, &pair, t, steps),
                Some((m, s)) => cascade_rollout(&short.config, &short.params, &m.config, &m.params, &pair, t, steps, s),
            }
        })
        .collect::<puyun_core::Result<Vec<_>>>()?;
    Ok(runs)
}

fn forecast(a: &ForecastArgs) -> CliResult<()> {
    let steps = required(&a.steps, "steps")?;
    if steps == 0 {
        return Err(usage("--steps must be at least 1"));
    }
    let out = required(&a.out, "out")?;
    let ds = load_dataset(&required(&a.data, "data")?)?;
    let short_path = required(&a.ckpt, "ckpt")?;
    let short = load_checkpoint(&short_path)?;
    check_matches(&short.config, &ds)?;
    let medium = match (&a.medium_ckpt, a.handoff) {
        (Some(p), Some(s)) => {
            let m = load_checkpoint(p)?;
            check_matches(&m.config, &ds)?;
            Some((m, s, checkpoint_hash(p)?))
        }
        (None, None) => None,
        _ => return Err(usage("--medium-ckpt and --handoff go together")),
    };
    let times = if !a.init_time.is_empty() {
        if a.split.is_some() {
            return Err(usage("give either --init-time or --split, not both"));
        }
        a.init_time.clone()
    } else {
        let split = parse_split(a.split.as_deref().unwrap_or("test"))?;
        init_times(&ds, split, a.stride.unwrap_or(1), steps)?
    };
    let runs = forecast_runs(&ds, &short, medium.as_ref().map(|(m, s, _)| (m, *s)), &times, steps)?;
    let file = ForecastFile::from_runs(
        ds.grid.clone(),
        ds.variables.clone(),
        ds.stats.clone(),
        &runs,
        checkpoint_hash(&short_path)?,
        medium.map(|(_, _, h)| h),
    )?;
    ensure_parent(&out)?;
    file.save(&out)?;
    eprintln!("wrote {} inits x {steps} steps to {}", runs.len(), out.display());
    Ok(())
}

/// Per-phase climatology over the train split.
pub fn train_climatology(ds: &Dataset, period: Option<usize>) -> CliResult<Climatology> {
    let period = period
        .or(ds.generator.as_ref().map(|g| g.period))
        .unwrap_or(DEFAULT_CLIMATOLOGY_PERIOD);
    Ok(ds.build_climatology(ds.split_range(Split::Train), period)?)
}

fn parse_baselines(s: Option<&str>) -> CliResult<Vec<Baseline>> {
    let s = s.unwrap_or("persistence,climatology");
    if s == "none" {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|b| match b.trim() {
            "persistence" => Ok(Baseline::Persistence),
            "climatology" => Ok(Baseline::Climatology),
            other => Err(usage(format!("unknown baseline {other:?}"))),
        })
        .collect()
}

fn evaluate(a: &EvaluateArgs) -> CliResult<()> {
    if a.forecast.is_empty() {
        return Err(usage("missing required --forecast"));
    }
    let truth = load_dataset(&required(&a.truth, "truth")?)?;
    let mut files = Vec::with_capacity(a.forecast.len());
    for f in &a.forecast {
        let (name, path) = match f.split_once('=') {
            Some((n, p)) => (n.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(f);
                let name = p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| f.clone());
                (name, p)
            }
        };
        files.push((name, ForecastFile::load(&path)?));
    }
    let clim = train_climatology(&truth, a.climatology)?;
    let report = evaluation::evaluate(&truth, &files, &clim, &parse_baselines(a.baselines.as_deref())?)?;
    let csv = evaluation::report_csv(&report);
    match &a.out {
        Some(p) => write_text(p, &csv)?,
        None => print!("{csv}"),
    }
    if let Some(p) = &a.summary {
        write_text(p, &evaluation::summary_csv(&report))?;
    }
    eprint!("{}", overview(&report, &truth.variables));
    Ok(())
}

/// Surface channels (all channels if there are none) at up to four leads.
fn overview(report: &EvalReport, variables: &VariableSet) -> String {
    let vars: Vec<&str> = if variables.surface.is_empty() {
        report.variables.iter().map(String::as_str).collect()
    } else {
        variables.surface.iter().map(String::as_str).collect()
    };
    let n = report.lead_hours.len();
    let mut leads: Vec<u32> = [0, n / 4, n / 2, n.saturating_sub(1)]
        .into_iter()
        .filter(|&k| k < n)
        .map(|k| report.lead_hours[k])
        .collect();
    leads.dedup();
    evaluation::summary_text(report, &vars, &leads)
}

/// One ablation row after desk scaling, trained and scored at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub spec: String,
    pub scaled: AblationSpec,
    pub parameters: usize,
    /// Latitude-weighted 1-step RMSE per channel, physical units.
    pub rmse: Vec<f64>,
}

pub struct AblationSettings {
    pub iterations: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub embed_divisor: usize,
    pub block_divisor: usize,
    pub patch: usize,
    pub lka_mode: LkaMode,
    pub stride: usize,
}

impl Default for AblationSettings {
    fn default() -> Self {
        let tc = TrainConfig::pretrain();
        Self {
            iterations: 300,
            lr: tc.lr,
            batch_size: tc.batch_size,
            seed: 0,
            embed_divisor: 12,
            block_divisor: 6,
            patch: 4,
            lka_mode: LkaMode::Decomposed,
            stride: 4,
        }
    }
}

/// Train every row from the same seed and score it on the test split, in input order.
pub fn run_ablation(ds: &Dataset, specs: &[String], s: &AblationSettings) -> CliResult<Vec<AblationRow>> {
    let parsed = specs
        .iter()
        .map(|x| ablation::parse_ablation(x, &AblationSpec::BASE))
        .collect::<Result<Vec<_>, _>>()?;
    let times = init_times(ds, Split::Test, s.stride, 1)?;
    let clim = train_climatology(ds, None)?;
    let mut rows = Vec::with_capacity(specs.len());
    for (text, spec) in specs.iter().zip(parsed) {
        let scaled = spec.scaled(s.embed_divisor, s.block_divisor);
        let config = scaled.model_config(ds.variables.clone(), ds.grid.clone(), s.patch, s.lka_mode, 0.0);
        let tc = TrainConfig {
            iterations: s.iterations,
            lr: s.lr,
            batch_size: s.batch_size,
            seed: s.seed,
            ..TrainConfig::pretrain()
        };
        let start = Instant::now();
        let init = init_parameters(&config, s.seed)?;
        let trained = pretrain_single_step(ds, &config, init, &tc, None)?;
        let short = Checkpoint {
            config,
            params: trained.params,
            seed: s.seed,
        };
        let runs = forecast_runs(ds, &short, None, &times, 1)?;
        let file = ForecastFile::from_runs(
            ds.grid.clone(),
            ds.variables.clone(),
            ds.stats.clone(),
            &runs,
            String::new(),
            None,
        )?;
        let report = evaluation::evaluate(ds, &[(text.clone(), file)], &clim, &[])?;
        eprintln!(
            "{text}: trained as {} in {:.1}s",
            scaled.render(&AblationSpec::BASE),
            start.elapsed().as_secs_f64()
        );
        rows.push(AblationRow {
            spec: text.clone(),
            scaled,
            parameters: short.config.parameter_count(),
            rmse: report.models[0].rmse[0].clone(),
        });
    }
    Ok(rows)
}

pub fn ablation_table(variables: &[String], rows: &[AblationRow]) -> String {
    let mut s = String::from("spec,desk_spec,parameters");
    for v in variables {
        s += &format!(",{v}");
    }
    s += ",mean\n";
    for r in rows {
        let mean = r.rmse.iter().sum::<f64>() / r.rmse.len() as f64;
        s += &format!(
            "\"{}\",\"{}\",{}",
            r.spec,
            r.scaled.render(&AblationSpec::BASE),
            r.parameters
        );
        for v in &r.rmse {
            s += &format!(",{}", evaluation::format_g(*v));
        }
        s += &format!(",{}\n", evaluation::format_g(mean));
    }
    s
}

fn ablate(a: &AblateArgs) -> CliResult<()> {
    let ds = load_dataset(&required(&a.data, "data")?)?;
    let specs: Vec<String> = match &a.specs {
        Some(list) => list
            .split(';')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect(),
        None => TABLE.iter().map(|s| s.to_string()).collect(),
    };
    if specs.is_empty() {
        return Err(usage("--specs holds no rows"));
    }
    let d = AblationSettings::default();
    let settings = AblationSettings {
        iterations: a.iters.unwrap_or(d.iterations),
        lr: a.lr.unwrap_or(d.lr),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        seed: a.seed.unwrap_or(d.seed),
        embed_divisor: a.embed_divisor.unwrap_or(d.embed_divisor),
        block_divisor: a.block_divisor.unwrap_or(d.block_divisor),
        patch: a.patch.unwrap_or(d.patch),
        lka_mode: a
            .lka_mode
            .as_deref()
            .map(parse_lka_mode)
            .transpose()?
            .unwrap_or(d.lka_mode),
        stride: a.stride.unwrap_or(d.stride),
    };
    let rows = run_ablation(&ds, &specs, &settings)?;
    let table = ablation_table(&ds.variables.channel_names(), &rows);
    match &a.out {
        Some(p) => write_text(p, &table)?,
        None => print!("{table}"),
    }
    Ok(())
}

fn parse_point(s: Option<&str>) -> CliResult<ParameterPoint> {
    match s.unwrap_or("init") {
        "init" => Ok(ParameterPoint::Init),
        "randomized" => Ok(ParameterPoint::Randomized),
        other => Err(usage(format!("point {other:?} must be init or randomized"))),
    }
}

fn report_line(o: &CheckOutcome, tol: f64) -> String {
    format!(
        "{} {:<34} checked {:>5}  max rel {:.3e}  below floor {:>4}  {:.2}s  worst {}",
        if o.passed(tol) { "PASS" } else { "FAIL" },
        o.name,
        o.checked,
        o.max_rel_error,
        o.below_floor,
        o.seconds,
        o.worst
    )
}

fn gradcheck(a: &GradcheckArgs) -> CliResult<()> {
    let (h, w) = parse_grid(a.grid.as_deref().unwrap_or("33x64"))?;
    let variables = match a.channels {
        None => VariableSet::desk(),
        Some(c) => VariableSet::with_channels(c)?,
    };
    let config = model_config(&a.model, variables, make_grid(h, w)?)?;
    let tol = a.tol.unwrap_or(DEFAULT_TOLERANCE);
    let step = a.step.unwrap_or(DEFAULT_STEP);
    let seed = a.seed.unwrap_or(DEFAULT_SEED);
    let point = parse_point(a.point.as_deref())?;
    let samples = a.samples.unwrap_or(200);
    let start = Instant::now();
    let mut outcomes = gradient_suite::primitives(seed, step)?;
    outcomes.push(gradient_suite::model(&config, point, seed, samples, step)?);
    let mut failed = Vec::new();
    for o in &outcomes {
        println!("{}", report_line(o, tol));
        if !o.passed(tol) {
            failed.push(o.name.clone());
        }
    }
    let model = outcomes.last().expect("model outcome");
    let above = model.checked - model.below_floor;
    if above < samples {
        println!("FAIL full model coverage: {above} of {samples} sampled gradients above the relative floor");
        failed.push("full model coverage".into());
    }
    println!(
        "{} checks, {} failed, tolerance {tol:e}, step {step:e}, {:.1}s",
        outcomes.len(),
        failed.len(),
        start.elapsed().as_secs_f64()
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::GradCheck(failed.join(", ")))
    }
}
