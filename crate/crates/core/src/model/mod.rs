//! Causal transformer decoder over (observation, action) steps, conditioned
//! on a latent plan through cross-attention, with a unit-variance Gaussian
//! action head in normalized units.

mod norm;
mod params;

use std::ops::Range;
use std::path::{Path, PathBuf};

use lap_numgrad::{AttnMask, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use norm::Normalizer;
pub use params::{Block, Cross, ModelConfig, ModelParams};

use crate::data::LabeledTrajectory;
use crate::error::{Error, Result};

/// `½ log 2π`
pub const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

const LN_EPS: f64 = 1e-5;

/// The last `≤ K` (o, a) pairs before the current step, in raw units.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContextWindow {
    /// absolute step index of the oldest pair
    pub start: usize,
    pub obs: Vec<Vec<f64>>,
    pub act: Vec<Vec<f64>>,
}

impl ContextWindow {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    /// Step index of the observation that follows the window.
    pub fn next_step(&self) -> usize {
        self.start + self.obs.len()
    }

    /// Appends a pair, dropping the oldest beyond `k`.
    pub fn push(&mut self, o: Vec<f64>, a: Vec<f64>, k: usize) {
        self.obs.push(o);
        self.act.push(a);
        while self.obs.len() > k {
            self.obs.remove(0);
            self.act.remove(0);
            self.start += 1;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    Deterministic,
    Stochastic,
}

/// Normalized rows, row-major. `act` may hold fewer rows than `obs`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormTraj {
    /// absolute step index of row 0
    pub t0: usize,
    pub obs: Vec<f64>,
    pub act: Vec<f64>,
    pub obs_dim: usize,
    pub act_dim: usize,
}

impl NormTraj {
    pub fn len(&self) -> usize {
        self.obs.len() / self.obs_dim
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn act_rows(&self) -> usize {
        self.act.len() / self.act_dim
    }
}

struct CrossVars {
    ln: [Var; 2],
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
}

struct BlockVars {
    ln1: [Var; 2],
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    cross: Option<CrossVars>,
    ln3: [Var; 2],
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

/// Parameters recorded on a tape.
pub struct ParamVars {
    w_obs: Var,
    b_obs: Var,
    w_act: Var,
    b_act: Var,
    start: Var,
    pos: Var,
    kind: Var,
    blocks: Vec<BlockVars>,
    ln_f: [Var; 2],
    w_head: Var,
    b_head: Var,
    all: Vec<Var>,
}

impl ParamVars {
    /// Assembles handles recorded in [`ModelParams::named`] order.
    pub fn from_vars(cfg: &ModelConfig, vars: &[Var]) -> Result<Self> {
        let mut it = vars.iter().copied();
        let mut next = || it.next().ok_or_else(|| Error::Contract("too few parameter handles".into()));
        let (w_obs, b_obs, w_act, b_act) = (next()?, next()?, next()?, next()?);
        let (start, pos, kind) = (next()?, next()?, next()?);
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for b in 0..cfg.blocks {
            let ln1 = [next()?, next()?];
            let (wq, wk, wv, wo) = (next()?, next()?, next()?, next()?);
            let cross = if cfg.has_cross(b) {
                Some(CrossVars { ln: [next()?, next()?], wq: next()?, wk: next()?, wv: next()?, wo: next()? })
            } else {
                None
            };
            let ln3 = [next()?, next()?];
            let (w1, b1, w2, b2) = (next()?, next()?, next()?, next()?);
            blocks.push(BlockVars { ln1, wq, wk, wv, wo, cross, ln3, w1, b1, w2, b2 });
        }
        let ln_f = [next()?, next()?];
        let (w_head, b_head) = (next()?, next()?);
        if next().is_ok() {
            return Err(Error::Contract("too many parameter handles".into()));
        }
        Ok(Self { w_obs, b_obs, w_act, b_act, start, pos, kind, blocks, ln_f, w_head, b_head, all: vars.to_vec() })
    }

    /// Tape handles in [`ModelParams::named`] order.
    pub fn all(&self) -> &[Var] {
        &self.all
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    schema: u32,
    config: ModelConfig,
    normalizer: Normalizer,
    parameters: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub cfg: ModelConfig,
    pub params: ModelParams,
    pub norm: Normalizer,
}

impl Decoder {
    pub fn new(cfg: ModelConfig, norm: Normalizer, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if norm.obs_dim() != cfg.obs_dim || norm.act_dim() != cfg.act_dim {
            return Err(Error::Model(format!(
                "normalizer widths ({}, {}) do not match the config ({}, {})",
                norm.obs_dim(),
                norm.act_dim(),
                cfg.obs_dim,
                cfg.act_dim
            )));
        }
        let params = ModelParams::init(&cfg, seed)?;
        Ok(Self { cfg, params, norm })
    }

    pub fn z_zeros(&self) -> Tensor {
        Tensor::zeros(&self.cfg.z_shape())
    }

    fn check_z(&self, z: &Tensor) -> Result<()> {
        if z.shape() != self.cfg.z_shape() {
            return Err(Error::Contract(format!("latent plan has shape {:?}, expected {:?}", z.shape(), self.cfg.z_shape())));
        }
        Ok(())
    }

    fn check_rows(&self, obs: &[Vec<f64>], act: &[Vec<f64>]) -> Result<()> {
        if obs.iter().any(|o| o.len() != self.cfg.obs_dim) || act.iter().any(|a| a.len() != self.cfg.act_dim) {
            return Err(Error::Contract(format!("rows must have widths {} (obs) and {} (act)", self.cfg.obs_dim, self.cfg.act_dim)));
        }
        Ok(())
    }

    pub fn normalize_rows(&self, t0: usize, obs: &[Vec<f64>], act: &[Vec<f64>]) -> Result<NormTraj> {
        self.check_rows(obs, act)?;
        Ok(NormTraj {
            t0,
            obs: obs.iter().flat_map(|o| self.norm.obs(o)).collect(),
            act: act.iter().flat_map(|a| self.norm.act(a)).collect(),
            obs_dim: self.cfg.obs_dim,
            act_dim: self.cfg.act_dim,
        })
    }

    pub fn normalize(&self, traj: &LabeledTrajectory) -> Result<NormTraj> {
        if traj.is_empty() {
            return Err(Error::Contract("empty trajectory".into()));
        }
        self.normalize_rows(0, &traj.obs, &traj.act)
    }

    /// Records the parameters on `tape`; `trainable = false` freezes them.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> Result<ParamVars> {
        let vars = self
            .params
            .named()
            .into_iter()
            .map(|(_, t)| if trainable { tape.leaf(t) } else { tape.frozen(t) })
            .collect::<lap_numgrad::Result<Vec<_>>>()?;
        ParamVars::from_vars(&self.cfg, &vars)
    }

    /// Per-block attention reach in tokens. The reaches sum to `2K`, so the
    /// output at step `t` sees exactly `o_{t-K..=t}` and `a_{t-K..t}`.
    pub fn windows(&self) -> Vec<usize> {
        let (span, l) = (2 * self.cfg.context, self.cfg.blocks);
        (0..l).map(|i| span / l + usize::from(i < span % l)).collect()
    }

    /// Normalized action means for the steps in `targets` (row indices of
    /// `data`) as a `[targets.len(), act_dim]` matrix.
    ///
    /// Steps are laid out as interleaved tokens `o_j, a_j` after a start
    /// token that sits before absolute step 0; attention in every block is
    /// causal and limited to that block's window.
    pub fn means(&self, tape: &mut Tape<'_>, pv: &ParamVars, data: &NormTraj, targets: Range<usize>, z: Var) -> Result<Var> {
        if targets.is_empty() || targets.end > data.len() {
            return Err(Error::Contract(format!("target steps {targets:?} outside {} observations", data.len())));
        }
        if data.act_rows() + 1 < targets.end {
            return Err(Error::Contract(format!("steps up to {} need {} actions, have {}", targets.end, targets.end - 1, data.act_rows())));
        }
        if tape.shape(z) != self.cfg.z_shape() {
            return Err(Error::Contract(format!("latent plan has shape {:?}, expected {:?}", tape.shape(z), self.cfg.z_shape())));
        }
        let (od, ad, h) = (data.obs_dim, data.act_dim, self.cfg.hidden);
        let lo = targets.start.saturating_sub(self.cfg.context);
        let n_o = targets.end - lo;
        let n_a = n_o - 1;
        let pos_idx: Vec<usize> = (lo..targets.end).map(|j| (data.t0 + j).min(self.cfg.max_steps - 1)).collect();
        let pos = tape.gather_rows(pv.pos, &pos_idx)?;

        let obs = tape.constant(&[n_o, od], data.obs[lo * od..targets.end * od].to_vec())?;
        let e = tape.matmul(obs, pv.w_obs)?;
        let e = tape.add(e, pv.b_obs)?;
        let e = tape.add(e, pos)?;
        let k0 = tape.slice_rows(pv.kind, 0, 1)?;
        let k0 = tape.reshape(k0, &[h])?;
        let e_obs = tape.add(e, k0)?;
        let mut table = tape.concat_rows(pv.start, e_obs)?;
        if n_a > 0 {
            let act = tape.constant(&[n_a, ad], data.act[lo * ad..(lo + n_a) * ad].to_vec())?;
            let e = tape.matmul(act, pv.w_act)?;
            let e = tape.add(e, pv.b_act)?;
            let p = tape.slice_rows(pos, 0, n_a)?;
            let e = tape.add(e, p)?;
            let k1 = tape.slice_rows(pv.kind, 1, 2)?;
            let k1 = tape.reshape(k1, &[h])?;
            let e_act = tape.add(e, k1)?;
            table = tape.concat_rows(table, e_act)?;
        }

        let mut idx = Vec::with_capacity(2 * n_o);
        if data.t0 + lo == 0 {
            idx.push(0);
        }
        let mut out_rows = Vec::with_capacity(targets.len());
        for j in lo..targets.end {
            if j >= targets.start {
                out_rows.push(idx.len());
            }
            idx.push(1 + (j - lo));
            if j + 1 < targets.end {
                idx.push(1 + n_o + (j - lo));
            }
        }
        let mut x = tape.gather_rows(table, &idx)?;

        let heads = self.cfg.heads;
        for (b, w) in pv.blocks.iter().zip(self.windows()) {
            let y = tape.layer_norm(x, b.ln1[0], b.ln1[1], LN_EPS)?;
            let (q, kk, v) = (tape.matmul(y, b.wq)?, tape.matmul(y, b.wk)?, tape.matmul(y, b.wv)?);
            let a = tape.attention(q, kk, v, heads, AttnMask::Causal { window: Some(w) })?;
            let a = tape.matmul(a, b.wo)?;
            x = tape.add(x, a)?;
            if let Some(c) = &b.cross {
                let y = tape.layer_norm(x, c.ln[0], c.ln[1], LN_EPS)?;
                let q = tape.matmul(y, c.wq)?;
                let (kz, vz) = (tape.matmul(z, c.wk)?, tape.matmul(z, c.wv)?);
                let a = tape.attention(q, kz, vz, heads, AttnMask::None)?;
                let a = tape.matmul(a, c.wo)?;
                x = tape.add(x, a)?;
            }
            let y = tape.layer_norm(x, b.ln3[0], b.ln3[1], LN_EPS)?;
            let f = tape.matmul(y, b.w1)?;
            let f = tape.add(f, b.b1)?;
            let f = tape.gelu(f)?;
            let f = tape.matmul(f, b.w2)?;
            let f = tape.add(f, b.b2)?;
            x = tape.add(x, f)?;
        }
        let x = tape.gather_rows(x, &out_rows)?;
        let x = tape.layer_norm(x, pv.ln_f[0], pv.ln_f[1], LN_EPS)?;
        let m = tape.matmul(x, pv.w_head)?;
        Ok(tape.add(m, pv.b_head)?)
    }

    /// `Σ_t log N(ã_t | mean_t, I)` over `targets`, normalizer included.
    pub fn log_lik_var(&self, tape: &mut Tape<'_>, pv: &ParamVars, data: &NormTraj, targets: Range<usize>, z: Var) -> Result<Var> {
        if data.act_rows() < targets.end {
            return Err(Error::Contract(format!("no action targets beyond row {}", data.act_rows())));
        }
        let ad = data.act_dim;
        let m = self.means(tape, pv, data, targets.clone(), z)?;
        let y = tape.constant(&[targets.len(), ad], data.act[targets.start * ad..targets.end * ad].to_vec())?;
        let se = tape.sq_err(m, y)?;
        let ll = tape.scale(se, -0.5)?;
        Ok(tape.add_scalar(ll, -((targets.len() * ad) as f64) * HALF_LOG_2PI)?)
    }

    pub fn log_likelihood(&self, traj: &LabeledTrajectory, z: &Tensor) -> Result<f64> {
        self.check_z(z)?;
        let data = self.normalize(traj)?;
        let mut tape = Tape::new();
        let pv = self.bind(&mut tape, false)?;
        let zv = tape.frozen(z)?;
        let ll = self.log_lik_var(&mut tape, &pv, &data, 0..data.len(), zv)?;
        Ok(tape.item(ll))
    }

    /// Teacher-forced action means for every step, in raw units.
    pub fn teacher_forced(&self, traj: &LabeledTrajectory, z: &Tensor) -> Result<Vec<Vec<f64>>> {
        self.check_z(z)?;
        let data = self.normalize(traj)?;
        let mut tape = Tape::new();
        let pv = self.bind(&mut tape, false)?;
        let zv = tape.frozen(z)?;
        let m = self.means(&mut tape, &pv, &data, 0..data.len(), zv)?;
        Ok(tape.value(m).chunks(self.cfg.act_dim).map(|r| self.norm.act_inverse(r)).collect())
    }

    fn step_mean_normalized(&self, ctx: &ContextWindow, o_t: &[f64], z: &Tensor) -> Result<Vec<f64>> {
        if ctx.len() > self.cfg.context {
            return Err(Error::Contract(format!("context holds {} pairs, limit is {}", ctx.len(), self.cfg.context)));
        }
        if ctx.obs.len() != ctx.act.len() {
            return Err(Error::Contract("context observation and action counts differ".into()));
        }
        self.check_z(z)?;
        let mut obs = ctx.obs.clone();
        obs.push(o_t.to_vec());
        let data = self.normalize_rows(ctx.start, &obs, &ctx.act)?;
        let mut tape = Tape::new();
        let pv = self.bind(&mut tape, false)?;
        let zv = tape.frozen(z)?;
        let n = ctx.len();
        let m = self.means(&mut tape, &pv, &data, n..n + 1, zv)?;
        Ok(tape.value(m).to_vec())
    }

    /// Mean of the action distribution at the step after `ctx`, raw units.
    pub fn decode_step(&self, ctx: &ContextWindow, o_t: &[f64], z: &Tensor) -> Result<Vec<f64>> {
        Ok(self.norm.act_inverse(&self.step_mean_normalized(ctx, o_t, z)?))
    }

    pub fn sample_action<R: Rng>(&self, ctx: &ContextWindow, o_t: &[f64], z: &Tensor, mode: SampleMode, rng: &mut R) -> Result<Vec<f64>> {
        let mut m = self.step_mean_normalized(ctx, o_t, z)?;
        if mode == SampleMode::Stochastic {
            for v in &mut m {
                *v += rng.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(self.norm.act_inverse(&m))
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        path.with_extension("json")
    }

    /// Writes the tensor container at `path` and the JSON sidecar next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let named = self.params.named();
        let refs: Vec<(&str, &Tensor)> = named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        lap_numgrad::save_checkpoint(path, &refs)?;
        let side = Sidecar { schema: crate::data::SCHEMA, config: self.cfg.clone(), normalizer: self.norm.clone(), parameters: self.params.count() };
        std::fs::write(Self::sidecar_path(path), serde_json::to_string_pretty(&side)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side_path = Self::sidecar_path(path);
        let text = std::fs::read_to_string(&side_path)?;
        let side: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Parse { file: side_path.display().to_string(), msg: e.to_string() })?;
        if side.schema != crate::data::SCHEMA {
            return Err(Error::Checkpoint(format!("unsupported sidecar schema {}", side.schema)));
        }
        side.config.validate()?;
        let records = lap_numgrad::load_checkpoint(path)?;
        let params = ModelParams::from_named(&side.config, records)?;
        Ok(Self { cfg: side.config, params, norm: side.normalizer })
    }
}
