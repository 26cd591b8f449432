use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::env::{EnvConfig, EpisodeResult, Observation};
use super::throws::{reachable, ThrowSpec};
use super::Env;
use crate::dynamics::RobotModel;
use crate::error::{Error, Result};
use crate::replan::StepLog;

/// A controller queried at every control tick.
pub trait Policy: Send {
    fn name(&self) -> &str;
    fn reset(&mut self, model: &RobotModel, throw: &ThrowSpec, seed: u64) -> Result<()>;
    fn control(&mut self, model: &RobotModel, obs: &Observation) -> Result<Vec<f64>>;
    /// Policy-rate log of the last episode, if the policy keeps one.
    fn step_log(&self) -> Vec<StepLog> {
        Vec::new()
    }
    /// Set when the policy judged the episode unreachable.
    fn excluded(&self) -> Option<String> {
        None
    }
}

pub fn run_episode(model: &RobotModel, cfg: &EnvConfig, throw: &ThrowSpec, policy: &mut dyn Policy, seed: u64) -> Result<EpisodeResult> {
    let mut env = Env::reset(model, cfg, throw)?;
    policy.reset(model, throw, seed)?;
    for _ in 0..cfg.ticks() {
        if env.done() {
            break;
        }
        let obs = env.observe();
        let tau = policy.control(model, &obs)?;
        env.step(&tau)?;
    }
    let mut r = env.result();
    r.excluded = policy.excluded();
    r.steps = policy.step_log();
    if r.excluded.is_some() {
        r.success = false;
    }
    Ok(r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub method: String,
    #[serde(rename = "box")]
    pub box_name: String,
    pub episode: usize,
    pub success: bool,
    pub energy_j: f64,
    pub peak_torque: f64,
    pub excluded_reason: String,
}

/// Runs one episode per throw on up to `jobs` workers; episode `i` gets
/// seed `seed + i`. Errors inside an episode count as failures.
pub fn evaluate<F>(method: &str, model: &RobotModel, cfg: &EnvConfig, throws: &[ThrowSpec], make: F, seed: u64, jobs: usize) -> Result<(Vec<EpisodeRow>, Vec<EpisodeResult>)>
where
    F: Fn() -> Result<Box<dyn Policy>> + Sync,
{
    let run = |i: usize| -> Result<(EpisodeRow, EpisodeResult)> {
        let throw = &throws[i];
        let mut row = EpisodeRow {
            method: method.to_string(),
            box_name: throw.profile.name.clone(),
            episode: i,
            success: false,
            energy_j: 0.0,
            peak_torque: 0.0,
            excluded_reason: String::new(),
        };
        if !reachable(model, throw) {
            row.excluded_reason = "thrown outside the reachable workspace".into();
            let r = EpisodeResult { success: false, energy: 0.0, peak_torque: 0.0, peak_force: 0.0, excluded: Some(row.excluded_reason.clone()), log: vec![], steps: vec![] };
            return Ok((row, r));
        }
        let mut policy = make()?;
        let r = match run_episode(model, cfg, throw, policy.as_mut(), seed.wrapping_add(i as u64)) {
            Ok(r) => r,
            Err(Error::BlowUp { .. } | Error::Planning(_) | Error::Solver { .. } | Error::Model(_)) => {
                EpisodeResult { success: false, energy: 0.0, peak_torque: 0.0, peak_force: 0.0, excluded: None, log: vec![], steps: vec![] }
            }
            Err(e) => return Err(e),
        };
        row.success = r.success;
        row.energy_j = r.energy;
        row.peak_torque = r.peak_torque;
        row.excluded_reason = r.excluded.clone().unwrap_or_default();
        Ok((row, r))
    };
    let out: Vec<Result<(EpisodeRow, EpisodeResult)>> = if jobs <= 1 {
        (0..throws.len()).map(run).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build().map_err(|e| Error::Contract(e.to_string()))?;
        pool.install(|| (0..throws.len()).into_par_iter().map(run).collect())
    };
    let mut rows = Vec::with_capacity(out.len());
    let mut results = Vec::with_capacity(out.len());
    for o in out {
        let (r, e) = o?;
        rows.push(r);
        results.push(e);
    }
    Ok((rows, results))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub box_name: String,
    pub successes: usize,
    pub trials: usize,
    pub excluded: usize,
    pub mean_energy: f64,
}

/// One row per (method, box) in first-appearance order; mean energy over
/// the non-excluded episodes.
pub fn summarize(rows: &[EpisodeRow]) -> Vec<SummaryRow> {
    let mut out: Vec<SummaryRow> = Vec::new();
    for r in rows {
        let i = match out.iter().position(|s| s.method == r.method && s.box_name == r.box_name) {
            Some(i) => i,
            None => {
                out.push(SummaryRow { method: r.method.clone(), box_name: r.box_name.clone(), successes: 0, trials: 0, excluded: 0, mean_energy: 0.0 });
                out.len() - 1
            }
        };
        let s = &mut out[i];
        if !r.excluded_reason.is_empty() {
            s.excluded += 1;
            continue;
        }
        s.trials += 1;
        s.successes += r.success as usize;
        s.mean_energy += r.energy_j;
    }
    for s in &mut out {
        if s.trials > 0 {
            s.mean_energy /= s.trials as f64;
        }
    }
    out
}

pub fn write_results(path: &Path, rows: &[EpisodeRow]) -> Result<()> {
    let mut s = String::from("method,box,episode,success,energy_J,peak_torque,excluded_reason\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{:.6},{:.6},{}", r.method, r.box_name, r.episode, r.success, r.energy_j, r.peak_torque, r.excluded_reason.replace(',', ";"));
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<EpisodeRow>> {
    let text = std::fs::read_to_string(path)?;
    let bad = |line: usize, msg: &str| Error::Parse { file: path.display().to_string(), msg: format!("line {line}: {msg}") };
    let mut lines = text.lines();
    if lines.next() != Some("method,box,episode,success,energy_J,peak_torque,excluded_reason") {
        return Err(bad(1, "unexpected header"));
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.splitn(7, ',').collect();
            if f.len() != 7 {
                return Err(bad(i + 2, "expected 7 fields"));
            }
            Ok(EpisodeRow {
                method: f[0].to_string(),
                box_name: f[1].to_string(),
                episode: f[2].parse().map_err(|_| bad(i + 2, "episode"))?,
                success: f[3].parse().map_err(|_| bad(i + 2, "success"))?,
                energy_j: f[4].parse().map_err(|_| bad(i + 2, "energy"))?,
                peak_torque: f[5].parse().map_err(|_| bad(i + 2, "peak torque"))?,
                excluded_reason: f[6].to_string(),
            })
        })
        .collect()
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from("method,box,success,trials,excluded,mean_energy_J\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{:.6}", r.method, r.box_name, r.successes, r.trials, r.excluded, r.mean_energy);
    }
    s
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    std::fs::write(path, summary_csv(rows))?;
    Ok(())
}
