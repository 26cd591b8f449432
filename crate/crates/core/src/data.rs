//! Torque-labeled trajectories and their JSON Lines dataset format.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajMeta {
    pub schema: u32,
    pub source: String,
    pub robot: String,
    pub dof: usize,
    pub box_mass: f64,
    pub box_size: [f64; 2],
    #[serde(default)]
    pub clamped: usize,
    #[serde(default)]
    pub skipped: usize,
}

/// Per step `t`: `obs = [box_x, box_z, contact, q_{t-1}, q̇_{t-1}, τ_{t-1}]`
/// and `act = [q_t, q̇_t, τ_t]`. At `t = 0` the previous state replicates the
/// first action.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledTrajectory {
    pub obs: Vec<Vec<f64>>,
    pub act: Vec<Vec<f64>>,
    pub dt: f64,
    pub meta: TrajMeta,
}

pub fn obs_dim(dof: usize) -> usize {
    3 + 3 * dof
}

pub fn act_dim(dof: usize) -> usize {
    3 * dof
}

impl LabeledTrajectory {
    /// Builds observations from per-step box positions, contact flags, and
    /// actions so the o/a layout invariant holds by construction.
    pub fn assemble(box_pos: &[[f64; 2]], contact: &[bool], act: Vec<Vec<f64>>, dt: f64, meta: TrajMeta) -> Self {
        let obs = (0..act.len())
            .map(|t| {
                let prev = if t == 0 { &act[0] } else { &act[t - 1] };
                let mut o = vec![box_pos[t][0], box_pos[t][1], if contact[t] { 1.0 } else { 0.0 }];
                o.extend_from_slice(prev);
                o
            })
            .collect();
        Self { obs, act, dt, meta }
    }

    pub fn len(&self) -> usize {
        self.act.len()
    }

    pub fn is_empty(&self) -> bool {
        self.act.is_empty()
    }

    pub fn dof(&self) -> usize {
        self.meta.dof
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.meta.dof;
        if self.obs.len() != self.act.len() {
            return Err(Error::Validation(format!("{}: {} observations vs {} actions", self.meta.source, self.obs.len(), self.act.len())));
        }
        for (t, (o, a)) in self.obs.iter().zip(&self.act).enumerate() {
            if o.len() != obs_dim(n) || a.len() != act_dim(n) {
                return Err(Error::Validation(format!("{}: step {t} has wrong widths", self.meta.source)));
            }
            if !o.iter().chain(a).all(|v| v.is_finite()) {
                return Err(Error::Validation(format!("{}: step {t} is not finite", self.meta.source)));
            }
            if t + 1 < self.len() && self.obs[t + 1][3..] != a[..] {
                return Err(Error::Validation(format!("{}: action {t} differs from observation {}", self.meta.source, t + 1)));
            }
        }
        Ok(())
    }

    pub fn box_pos(&self, t: usize) -> [f64; 2] {
        [self.obs[t][0], self.obs[t][1]]
    }

    pub fn contact(&self, t: usize) -> bool {
        self.obs[t][2] > 0.5
    }

    /// `(q, q̇, τ)` of action `t`.
    pub fn split_act(&self, t: usize) -> (&[f64], &[f64], &[f64]) {
        let n = self.meta.dof;
        let a = &self.act[t];
        (&a[..n], &a[n..2 * n], &a[2 * n..])
    }
}

pub fn write_dataset<W: Write>(w: &mut W, trajs: &[LabeledTrajectory]) -> Result<()> {
    for t in trajs {
        serde_json::to_writer(&mut *w, t)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_dataset(path: &Path, trajs: &[LabeledTrajectory]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_dataset(&mut w, trajs)?;
    w.flush()?;
    Ok(())
}

pub fn read_dataset<R: BufRead>(r: R, source: &str) -> Result<Vec<LabeledTrajectory>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: LabeledTrajectory = serde_json::from_str(&line).map_err(|e| Error::Parse { file: source.to_string(), msg: format!("line {}: {e}", i + 1) })?;
        if t.meta.schema != SCHEMA {
            return Err(Error::Parse { file: source.to_string(), msg: format!("line {}: unsupported schema {}", i + 1, t.meta.schema) });
        }
        t.validate()?;
        out.push(t);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<LabeledTrajectory>> {
    let f = std::fs::File::open(path)?;
    read_dataset(std::io::BufReader::new(f), &path.display().to_string())
}
