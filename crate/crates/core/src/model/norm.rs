use serde::{Deserialize, Serialize};

use crate::data::LabeledTrajectory;
use crate::error::{Error, Result};

/// Per-dimension z-scoring of observations and actions, fitted on a
/// training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub obs_mean: Vec<f64>,
    pub obs_std: Vec<f64>,
    pub act_mean: Vec<f64>,
    pub act_std: Vec<f64>,
}

fn moments(rows: &[&Vec<f64>], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len().max(1) as f64;
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; dim];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    // constant dimensions (e.g. a contact flag never set) pass through unscaled
    let std = var.iter().map(|v| if v.sqrt() > 1e-8 { v.sqrt() } else { 1.0 }).collect();
    (mean, std)
}

impl Normalizer {
    pub fn identity(obs_dim: usize, act_dim: usize) -> Self {
        Self { obs_mean: vec![0.0; obs_dim], obs_std: vec![1.0; obs_dim], act_mean: vec![0.0; act_dim], act_std: vec![1.0; act_dim] }
    }

    pub fn fit(data: &[LabeledTrajectory]) -> Result<Self> {
        let first = data.first().ok_or_else(|| Error::Contract("cannot fit normalization on an empty dataset".into()))?;
        let (od, ad) = (first.obs[0].len(), first.act[0].len());
        let obs: Vec<&Vec<f64>> = data.iter().flat_map(|t| &t.obs).collect();
        let act: Vec<&Vec<f64>> = data.iter().flat_map(|t| &t.act).collect();
        if obs.iter().any(|r| r.len() != od) || act.iter().any(|r| r.len() != ad) {
            return Err(Error::Contract("dataset mixes observation or action widths".into()));
        }
        let (obs_mean, obs_std) = moments(&obs, od);
        let (act_mean, act_std) = moments(&act, ad);
        Ok(Self { obs_mean, obs_std, act_mean, act_std })
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_mean.len()
    }

    pub fn act_dim(&self) -> usize {
        self.act_mean.len()
    }

    pub fn obs(&self, o: &[f64]) -> Vec<f64> {
        o.iter().zip(&self.obs_mean).zip(&self.obs_std).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn act(&self, a: &[f64]) -> Vec<f64> {
        a.iter().zip(&self.act_mean).zip(&self.act_std).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn act_inverse(&self, a: &[f64]) -> Vec<f64> {
        a.iter().zip(&self.act_mean).zip(&self.act_std).map(|((v, m), s)| v * s + m).collect()
    }
}
