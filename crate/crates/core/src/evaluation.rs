//! Latitude-weighted RMSE and ACC over sets of initializations, baselines,
//! and report emission.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::forecast::{ForecastFile, HOURS_PER_STEP};
use crate::grid::{Climatology, Dataset, GridSpec};
use crate::tensor::Tensor;

fn check_aligned(preds: &[&Tensor<f64>], truths: &[&Tensor<f64>], grid: &GridSpec) -> Result<usize> {
    if preds.is_empty() {
        return Err(Error::Usage("metric needs at least one initialization".into()));
    }
    if preds.len() != truths.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} truths",
            preds.len(),
            truths.len()
        )));
    }
    let shape = preds[0].shape();
    for t in preds.iter().chain(truths) {
        if t.shape() != shape {
            return Err(Error::shape(format!("{:?} vs {shape:?}", t.shape())));
        }
    }
    let (c, h, w) = preds[0].dims3()?;
    if (h, w) != (grid.n_lat, grid.n_lon) {
        return Err(Error::shape("fields do not match the grid"));
    }
    Ok(c)
}

/// Per channel: mean over inits of `sqrt(mean_ij a_i (p - t)^2)`.
///
/// Each row's squared errors are summed in ascending order, which makes the
/// result independent of longitude order (rotations are bitwise invariant).
pub fn rmse(preds: &[&Tensor<f64>], truths: &[&Tensor<f64>], grid: &GridSpec) -> Result<Vec<f64>> {
    let c = check_aligned(preds, truths, grid)?;
    let (h, w) = (grid.n_lat, grid.n_lon);
    let mut out = vec![0.0; c];
    let mut row = vec![0.0f64; w];
    for (p, t) in preds.iter().zip(truths) {
        for (ch, acc) in out.iter_mut().enumerate() {
            let (pc, tc) = (p.channel(ch), t.channel(ch));
            let mut s = 0.0;
            for i in 0..h {
                for (j, r) in row.iter_mut().enumerate() {
                    *r = (pc[i * w + j] - tc[i * w + j]).powi(2);
                }
                row.sort_unstable_by(f64::total_cmp);
                s += grid.weights[i] * row.iter().sum::<f64>();
            }
            *acc += (s / (h * w) as f64).sqrt();
        }
    }
    Ok(out.into_iter().map(|v| v / preds.len() as f64).collect())
}

/// Per channel: mean over inits of the cosine similarity of the anomalies
/// `a_i (x - m)`. A cell is `None` when any init has a zero anomaly norm.
pub fn acc(
    preds: &[&Tensor<f64>],
    truths: &[&Tensor<f64>],
    climatology: &[&Tensor<f64>],
    grid: &GridSpec,
) -> Result<Vec<Option<f64>>> {
    let c = check_aligned(preds, truths, grid)?;
    if climatology.len() != preds.len() || climatology.iter().any(|m| m.shape() != preds[0].shape()) {
        return Err(Error::shape("climatology does not match predictions"));
    }
    let (h, w) = (grid.n_lat, grid.n_lon);
    let mut out: Vec<Option<f64>> = vec![Some(0.0); c];
    for ((p, t), m) in preds.iter().zip(truths).zip(climatology) {
        for (ch, cell) in out.iter_mut().enumerate() {
            let (pc, tc, mc) = (p.channel(ch), t.channel(ch), m.channel(ch));
            let (mut dot, mut pp, mut tt) = (0.0, 0.0, 0.0);
            for i in 0..h {
                let a = grid.weights[i];
                for j in 0..w {
                    let k = i * w + j;
                    let xp = a * (pc[k] - mc[k]);
                    let xt = a * (tc[k] - mc[k]);
                    dot += xp * xt;
                    pp += xp * xp;
                    tt += xt * xt;
                }
            }
            *cell = match *cell {
                Some(acc) if pp > 0.0 && tt > 0.0 => Some(acc + dot / (pp * tt).sqrt()),
                _ => None,
            };
        }
    }
    Ok(out
        .into_iter()
        .map(|v| v.map(|s| (s / preds.len() as f64).clamp(-1.0, 1.0)))
        .collect())
}

/// Scores of one model: `rmse[lead][channel]`, `acc[lead][channel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelScores {
    pub name: String,
    pub rmse: Vec<Vec<f64>>,
    pub acc: Vec<Vec<Option<f64>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub variables: Vec<String>,
    pub lead_hours: Vec<u32>,
    pub init_times: Vec<u64>,
    pub models: Vec<ModelScores>,
}

/// Physical-unit forecasts and truths for one lead, gathered over inits.
struct LeadFields {
    preds: Vec<Tensor<f64>>,
    truths: Vec<Tensor<f64>>,
    clims: Vec<Tensor<f64>>,
}

fn score(
    name: &str,
    leads: usize,
    grid: &GridSpec,
    mut fields: impl FnMut(usize) -> Result<LeadFields>,
) -> Result<ModelScores> {
    let mut out = ModelScores {
        name: name.to_string(),
        rmse: Vec::with_capacity(leads),
        acc: Vec::with_capacity(leads),
    };
    for k in 0..leads {
        let f = fields(k)?;
        let p: Vec<&Tensor<f64>> = f.preds.iter().collect();
        let t: Vec<&Tensor<f64>> = f.truths.iter().collect();
        let m: Vec<&Tensor<f64>> = f.clims.iter().collect();
        out.rmse.push(rmse(&p, &t, grid)?);
        out.acc.push(acc(&p, &t, &m, grid)?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    Persistence,
    Climatology,
}

/// Evaluate forecast files against `truth`. All files must share init times
/// and leads. Baselines are appended after the models, in the given order.
pub fn evaluate(
    truth: &Dataset,
    forecasts: &[(String, ForecastFile)],
    climatology: &Climatology,
    baselines: &[Baseline],
) -> Result<EvalReport> {
    let variables = truth.variables.channel_names();
    let (init_times, steps) = match forecasts.first() {
        Some((_, f)) => (f.meta.init_times.clone(), f.meta.steps),
        None => (Vec::new(), 0),
    };
    for (name, f) in forecasts {
        if f.meta.init_times != init_times || f.meta.steps != steps {
            return Err(Error::Usage(format!(
                "forecast {name} has different init times or length"
            )));
        }
        if f.meta.variables.channel_names() != variables || f.grid != truth.grid {
            return Err(Error::Data(format!("forecast {name} does not match the truth dataset")));
        }
    }
    let positions = init_times
        .iter()
        .map(|&t| {
            let p = truth.position(t)?;
            if p + steps >= truth.len() {
                return Err(Error::Range(format!(
                    "truth does not cover {steps} steps after init {t}"
                )));
            }
            Ok(p)
        })
        .collect::<Result<Vec<_>>>()?;
    let physical = |t: &Tensor<f32>| truth.stats.denormalize(&t.cast());
    let truth_at = |k: usize| -> Result<(Vec<Tensor<f64>>, Vec<Tensor<f64>>)> {
        let mut truths = Vec::with_capacity(positions.len());
        let mut clims = Vec::with_capacity(positions.len());
        for &p in &positions {
            let s = &truth.states[p + k + 1];
            truths.push(physical(&s.values)?);
            clims.push(truth.stats.denormalize(climatology.at(s.time_index))?);
        }
        Ok((truths, clims))
    };

    let mut models = Vec::new();
    for (name, f) in forecasts {
        models.push(score(name, steps, &truth.grid, |k| {
            let (truths, clims) = truth_at(k)?;
            let preds = f.runs.iter().map(|r| physical(&r[k])).collect::<Result<_>>()?;
            Ok(LeadFields { preds, truths, clims })
        })?);
    }
    if !positions.is_empty() {
        for b in baselines {
            let scores = match b {
                Baseline::Persistence => score("persistence", steps, &truth.grid, |k| {
                    let (truths, clims) = truth_at(k)?;
                    let preds = positions
                        .iter()
                        .map(|&p| physical(&truth.states[p].values))
                        .collect::<Result<_>>()?;
                    Ok(LeadFields { preds, truths, clims })
                })?,
                Baseline::Climatology => score("climatology", steps, &truth.grid, |k| {
                    let (truths, clims) = truth_at(k)?;
                    Ok(LeadFields {
                        preds: clims.clone(),
                        truths,
                        clims,
                    })
                })?,
            };
            models.push(scores);
        }
    }
    Ok(EvalReport {
        variables,
        lead_hours: (1..=steps as u32).map(|k| k * HOURS_PER_STEP).collect(),
        init_times,
        models,
    })
}

/// `%g`-style formatting with 6 significant digits.
pub fn format_g(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if !(-4..6).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim(mantissa), exp.abs())
    } else {
        trim(&format!("{v:.*}", (5 - exp) as usize))
    }
}

pub const CSV_HEADER: &str = "model,variable,lead_hours,rmse,acc";

/// Long CSV: one row per (model, variable, lead), models in report order,
/// variables in channel order, leads ascending. Undefined ACC is empty.
pub fn report_csv(report: &EvalReport) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for m in &report.models {
        for (c, var) in report.variables.iter().enumerate() {
            for (k, lead) in report.lead_hours.iter().enumerate() {
                let acc = m.acc[k][c].map(format_g).unwrap_or_default();
                let _ = writeln!(s, "{},{var},{lead},{},{acc}", m.name, format_g(m.rmse[k][c]));
            }
        }
    }
    s
}

/// Wide table: one row per model, one RMSE column per (variable, lead).
pub fn summary_csv(report: &EvalReport) -> String {
    let mut s = String::from("model");
    for var in &report.variables {
        for lead in &report.lead_hours {
            let _ = write!(s, ",{var}@{lead}h");
        }
    }
    s.push('\n');
    for m in &report.models {
        s.push_str(&m.name);
        for c in 0..report.variables.len() {
            for k in 0..report.lead_hours.len() {
                let _ = write!(s, ",{}", format_g(m.rmse[k][c]));
            }
        }
        s.push('\n');
    }
    s
}

/// Aligned text table of RMSE / ACC for selected variables at selected leads.
pub fn summary_text(report: &EvalReport, variables: &[&str], leads: &[u32]) -> String {
    let cols: Vec<(usize, usize, String)> = variables
        .iter()
        .filter_map(|v| report.variables.iter().position(|x| x == v).map(|c| (c, *v)))
        .flat_map(|(c, v)| {
            leads.iter().filter_map(move |l| {
                report
                    .lead_hours
                    .iter()
                    .position(|x| x == l)
                    .map(|k| (c, k, format!("{v}@{l}h")))
            })
        })
        .collect();
    let name_w = report
        .models
        .iter()
        .map(|m| m.name.len())
        .chain(["model".len()])
        .max()
        .unwrap_or(5);
    let mut s = format!("{:<name_w$}", "model");
    for (_, _, label) in &cols {
        let _ = write!(s, "  {label:>18}");
    }
    s.push('\n');
    for m in &report.models {
        let _ = write!(s, "{:<name_w$}", m.name);
        for &(c, k, _) in &cols {
            let acc = m.acc[k][c].map(format_g).unwrap_or_else(|| "-".into());
            let _ = write!(s, "  {:>18}", format!("{}/{acc}", format_g(m.rmse[k][c])));
        }
        s.push('\n');
    }
    s
}
