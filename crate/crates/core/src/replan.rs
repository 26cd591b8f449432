//! Test-time planning as latent inference: an initial plan from the first
//! observation, then a warm-started Bayesian update of the posterior every
//! `Δ` steps with the previous posterior as the prior.

use std::io::Write;
use std::ops::Range;
use std::path::Path;
use std::time::Instant;

use lap_numgrad::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ContextWindow, Decoder, NormTraj, SampleMode};
use crate::vb::{elbo, optimize_local, reparam_sample, LatentModel, LatentPosterior, LocalConfig, LocalResult};

#[derive(Clone, Debug, PartialEq)]
pub struct PlannerConfig {
    /// replanning horizon Δ in policy steps
    pub delta: usize,
    pub t_local: usize,
    pub t_replan: usize,
    pub lr: f64,
    /// added to σ² of the previous posterior before each update
    pub inflation: f64,
    /// overwrite each emitted action with the realized one carried by the
    /// next observation before it is used as evidence
    pub realized_actions: bool,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self { delta: 10, t_local: 16, t_replan: 1, lr: 1e-3, inflation: 0.0, realized_actions: true }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delta == 0 || self.t_local == 0 || self.t_replan == 0 {
            return Err(Error::Contract("delta, t_local and t_replan must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.inflation >= 0.0) {
            return Err(Error::Contract("learning rate and inflation must be nonnegative".into()));
        }
        Ok(())
    }
}

/// `q` with `σ² + extra` per coordinate.
pub fn inflate(q: &LatentPosterior, extra: f64) -> LatentPosterior {
    if extra == 0.0 {
        return q.clone();
    }
    let mut out = q.clone();
    out.log_sigma.data_mut().iter_mut().for_each(|l| *l = 0.5 * ((2.0 * *l).exp() + extra).ln());
    out
}

/// One incremental update: warm-starts at `prev` and ascends
/// `E_q[log p(x_segment | history, z)] − KL(q ‖ prev)`. `segment` indexes rows
/// of `data`; everything before it is history.
pub fn replan_update<M: LatentModel>(
    model: &M,
    prev: &LatentPosterior,
    data: &NormTraj,
    segment: Range<usize>,
    cfg: &LocalConfig,
    inflation: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LocalResult> {
    if segment.is_empty() {
        return Err(Error::Contract("replanning needs a nonempty segment".into()));
    }
    let prior = inflate(prev, inflation);
    optimize_local(model, data, segment, &prior, &prior, cfg, rng, "plan").map_err(|e| match e {
        Error::Training(msg) => Error::Planning(msg),
        e => e,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub schema: u32,
    pub t: usize,
    pub o: Vec<f64>,
    pub a: Vec<f64>,
    pub z_hash: String,
    pub mu_mean: f64,
    pub mu_norm: f64,
    pub sigma_mean: f64,
    /// wall time of the update run before this step, if any
    pub replan_ms: Option<f64>,
}

pub fn z_hash(z: &Tensor) -> String {
    let mut h = Sha256::new();
    for v in z.data() {
        h.update(v.to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

#[derive(Clone, Debug)]
pub struct PlannerState {
    pub cfg: PlannerConfig,
    pub post: LatentPosterior,
    pub z: Tensor,
    /// raw observations and actions so far; `act` lags `obs` by at most one
    pub obs: Vec<Vec<f64>>,
    pub act: Vec<Vec<f64>>,
    /// end of the evidence already absorbed into `post`
    pub absorbed: usize,
    pub initial_trace: Vec<f64>,
    pub log: Vec<StepLog>,
    rng: ChaCha8Rng,
}

/// Initial plan from an observed prefix: `t_local` ascent steps on
/// `log p(prefix | z) − KL(q ‖ prior)`, then `z₀ ~ q`. With observations only
/// (no actions yet) there is no likelihood evidence and `q` stays at the prior.
/// A trailing unlabeled observation is not kept; pass it to [`PlannerState::act`].
pub fn initial_plan(dec: &Decoder, cfg: &PlannerConfig, obs: &[Vec<f64>], act: &[Vec<f64>], seed: u64) -> Result<PlannerState> {
    cfg.validate()?;
    if obs.is_empty() || act.len() > obs.len() {
        return Err(Error::Contract("initial plan needs at least one observation and no more actions than observations".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prior = LatentPosterior::prior(dec.cfg.z_shape());
    let (post, trace) = if act.is_empty() {
        (prior, vec![0.0])
    } else {
        let data = dec.normalize_rows(0, obs, act)?;
        let local = LocalConfig { steps: cfg.t_local, lr: cfg.lr, antithetic: false, resample: false };
        let res = optimize_local(dec, &data, 0..act.len(), &prior, &prior, &local, &mut rng, "initial plan").map_err(|e| match e {
            Error::Training(msg) => Error::Planning(msg),
            e => e,
        })?;
        (res.post, res.trace)
    };
    let z = reparam_sample(&post, &mut rng);
    Ok(PlannerState { cfg: cfg.clone(), post, z, obs: obs[..act.len()].to_vec(), act: act.to_vec(), absorbed: act.len(), initial_trace: trace, log: Vec::new(), rng })
}

impl PlannerState {
    /// Index of the next step to act on.
    pub fn t(&self) -> usize {
        self.obs.len()
    }

    fn update(&mut self, dec: &Decoder, end: usize) -> Result<()> {
        let seg = self.absorbed..end;
        let h = seg.start.saturating_sub(dec.cfg.context);
        let data = dec.normalize_rows(h, &self.obs[h..end], &self.act[h..end])?;
        let local = LocalConfig { steps: self.cfg.t_replan, lr: self.cfg.lr, antithetic: false, resample: false };
        let res = replan_update(dec, &self.post, &data, seg.start - h..end - h, &local, self.cfg.inflation, &mut self.rng)?;
        self.post = res.post;
        self.z = reparam_sample(&self.post, &mut self.rng);
        self.absorbed = end;
        Ok(())
    }

    /// Acts on `o_t`. When `t` is a positive multiple of Δ, the steps since the
    /// last update are absorbed first.
    pub fn act(&mut self, dec: &Decoder, o_t: &[f64], mode: SampleMode) -> Result<Vec<f64>> {
        let t = self.t();
        let (od, ad) = (dec.cfg.obs_dim, dec.cfg.act_dim);
        if o_t.len() != od {
            return Err(Error::Contract(format!("observation has {} values, expected {od}", o_t.len())));
        }
        if t > 0 && self.cfg.realized_actions && od >= ad {
            self.act[t - 1] = o_t[od - ad..].to_vec();
        }
        let mut replan_ms = None;
        if t > 0 && t % self.cfg.delta == 0 && self.absorbed < t {
            let start = Instant::now();
            self.update(dec, t)?;
            replan_ms = Some(start.elapsed().as_secs_f64() * 1e3);
        }
        let k = dec.cfg.context.min(t);
        let ctx = ContextWindow { start: t - k, obs: self.obs[t - k..].to_vec(), act: self.act[t - k..].to_vec() };
        let a = dec.sample_action(&ctx, o_t, &self.z, mode, &mut self.rng)?;
        self.obs.push(o_t.to_vec());
        self.act.push(a.clone());
        let mu = self.post.mu.data();
        let sigma = self.post.sigma();
        self.log.push(StepLog {
            schema: crate::data::SCHEMA,
            t,
            o: o_t.to_vec(),
            a: a.clone(),
            z_hash: z_hash(&self.z),
            mu_mean: mu.iter().sum::<f64>() / mu.len() as f64,
            mu_norm: mu.iter().map(|v| v * v).sum::<f64>().sqrt(),
            sigma_mean: sigma.iter().sum::<f64>() / sigma.len() as f64,
            replan_ms,
        });
        Ok(a)
    }

    /// Absorbs any steps left since the last update (a shorter final segment).
    pub fn finish(&mut self, dec: &Decoder) -> Result<()> {
        let end = self.act.len();
        if self.absorbed < end {
            self.update(dec, end)?;
        }
        Ok(())
    }

    pub fn write_log(&self, path: &Path) -> Result<()> {
        write_step_log(path, &self.log)
    }
}

pub fn write_step_log(path: &Path, log: &[StepLog]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in log {
        writeln!(f, "{}", serde_json::to_string(s)?)?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_step_log(path: &Path) -> Result<Vec<StepLog>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        if !line.trim().is_empty() {
            let s: StepLog = serde_json::from_str(line).map_err(|e| Error::Parse { file: path.display().to_string(), msg: format!("byte {}: {e}", offset + e.column().saturating_sub(1)) })?;
            if s.schema != crate::data::SCHEMA {
                return Err(Error::Validation(format!("{}: step log schema {}, expected {}", path.display(), s.schema, crate::data::SCHEMA)));
            }
            out.push(s);
        }
        offset += line.len();
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyReport {
    pub post_seq: LatentPosterior,
    pub post_batch: LatentPosterior,
    pub distance: f64,
    pub cosine: f64,
    pub elbo_seq: f64,
    pub elbo_batch: f64,
    /// `|elbo_seq − elbo_batch| / |elbo_batch|`
    pub elbo_gap: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyConfig {
    pub delta: usize,
    pub t_replan: usize,
    pub t_batch: usize,
    pub lr: f64,
    pub elbo_samples: usize,
    pub seed: u64,
    /// fresh ε at every ascent step instead of one per window
    pub resample: bool,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        Self { delta: 10, t_replan: 1, t_batch: 16, lr: 1e-3, elbo_samples: 16, seed: 0, resample: true }
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.iter().map(|v| v * v).sum::<f64>().sqrt(), b.iter().map(|v| v * v).sum::<f64>().sqrt());
    match (na > 0.0, nb > 0.0) {
        (true, true) => a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb),
        (false, false) => 1.0,
        _ => 0.0,
    }
}

/// Sequential replanning over windows of Δ (each warm-started, KL to the
/// previous posterior, the first against the prior) versus batch inference
/// on the whole trajectory, both from the prior with the same seed.
pub fn consistency_check<M: LatentModel>(model: &M, data: &NormTraj, cfg: &ConsistencyConfig) -> Result<ConsistencyReport> {
    if cfg.delta == 0 || data.is_empty() {
        return Err(Error::Contract("consistency check needs Δ ≥ 1 and a nonempty trajectory".into()));
    }
    let n = data.act_rows().min(data.len());
    let prior = LatentPosterior::prior(model.z_shape());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut seq = prior.clone();
    let mut s = 0;
    let step = LocalConfig { steps: cfg.t_replan, lr: cfg.lr, antithetic: false, resample: cfg.resample };
    while s < n {
        let e = (s + cfg.delta).min(n);
        seq = replan_update(model, &seq, data, s..e, &step, 0.0, &mut rng)?.post;
        s = e;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let local = LocalConfig { steps: cfg.t_batch, lr: cfg.lr, antithetic: false, resample: cfg.resample };
    let batch = optimize_local(model, data, 0..n, &prior, &prior, &local, &mut rng, "batch")?.post;
    let full = NormTraj { obs: data.obs[..n * data.obs_dim].to_vec(), act: data.act[..n * data.act_dim].to_vec(), ..data.clone() };
    let elbo_seq = elbo(model, &full, &seq, &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 1), cfg.elbo_samples)?.elbo;
    let elbo_batch = elbo(model, &full, &batch, &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 1), cfg.elbo_samples)?.elbo;
    let distance = seq.mu.data().iter().zip(batch.mu.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    Ok(ConsistencyReport {
        distance,
        cosine: cosine(seq.mu.data(), batch.mu.data()),
        elbo_seq,
        elbo_batch,
        elbo_gap: (elbo_seq - elbo_batch).abs() / elbo_batch.abs().max(f64::MIN_POSITIVE),
        post_seq: seq,
        post_batch: batch,
    })
}
