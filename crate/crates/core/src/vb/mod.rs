//! Variational Bayes over per-trajectory latent plans: diagonal Gaussian
//! posteriors fitted by a few local ascent steps, alternating with global
//! decoder updates.

mod train;

use std::ops::Range;

use lap_numgrad::{adamw_step, AdamWConfig, AdamWState, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use train::{model_path, read_posteriors, resume, train, write_posteriors, EpochLog, TrainConfig, TrainOutput};

use crate::error::{Error, Result};
use crate::model::{Decoder, NormTraj};

/// A likelihood `p(x | z)` over normalized trajectory rows.
pub trait LatentModel: Sync {
    fn z_shape(&self) -> [usize; 2];

    /// `log p(a_targets | context, z)` on `tape`, with the model's own
    /// parameters frozen.
    fn log_lik<'a>(&'a self, tape: &mut Tape<'a>, data: &NormTraj, targets: Range<usize>, z: Var) -> Result<Var>;
}

impl LatentModel for Decoder {
    fn z_shape(&self) -> [usize; 2] {
        self.cfg.z_shape()
    }

    fn log_lik<'a>(&'a self, tape: &mut Tape<'a>, data: &NormTraj, targets: Range<usize>, z: Var) -> Result<Var> {
        let pv = self.bind(tape, false)?;
        self.log_lik_var(tape, &pv, data, targets, z)
    }
}

/// Diagonal Gaussian `N(μ, diag σ²)` over a latent plan, `σ = exp(log σ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPosterior {
    pub mu: Tensor,
    pub log_sigma: Tensor,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct PosteriorRecord {
    pub shape: [usize; 2],
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
}

impl LatentPosterior {
    /// The standard normal prior.
    pub fn prior(shape: [usize; 2]) -> Self {
        Self { mu: Tensor::zeros(&shape), log_sigma: Tensor::zeros(&shape) }
    }

    /// Prior-shaped posterior with `μ ~ N(0, std²)`; `std = 0` gives the prior.
    pub fn init<R: Rng>(shape: [usize; 2], std: f64, rng: &mut R) -> Self {
        let mut p = Self::prior(shape);
        if std > 0.0 {
            let d = Normal::new(0.0, std).expect("positive std");
            p.mu.data_mut().iter_mut().for_each(|v| *v = d.sample(rng));
        }
        p
    }

    pub fn new(shape: [usize; 2], mu: Vec<f64>, log_sigma: Vec<f64>) -> Result<Self> {
        let p = Self { mu: Tensor::new(&shape, mu)?, log_sigma: Tensor::new(&shape, log_sigma)? };
        if !(p.mu.is_finite() && p.log_sigma.is_finite()) {
            return Err(Error::Contract("posterior parameters must be finite".into()));
        }
        Ok(p)
    }

    pub fn shape(&self) -> [usize; 2] {
        let s = self.mu.shape();
        [s[0], s[1]]
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.log_sigma.data().iter().map(|v| v.exp()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.mu.is_finite() && self.log_sigma.is_finite()
    }

    /// SHA-256 over the little-endian bytes of μ then log σ.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for v in self.mu.data().iter().chain(self.log_sigma.data()) {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub(crate) fn record(&self) -> PosteriorRecord {
        PosteriorRecord { shape: self.shape(), mu: self.mu.data().to_vec(), log_sigma: self.log_sigma.data().to_vec() }
    }

    pub(crate) fn from_record(r: PosteriorRecord) -> Result<Self> {
        Self::new(r.shape, r.mu, r.log_sigma)
    }
}

fn check_shapes(a: &LatentPosterior, b: &LatentPosterior) -> Result<()> {
    if a.mu.shape() != b.mu.shape() || a.log_sigma.shape() != a.mu.shape() || b.log_sigma.shape() != b.mu.shape() {
        return Err(Error::Contract(format!("posterior shapes {:?} and {:?} differ", a.mu.shape(), b.mu.shape())));
    }
    Ok(())
}

/// `KL(a ‖ b) = Σ log(σ_b/σ_a) + (σ_a² + (μ_a − μ_b)²)/(2σ_b²) − ½`.
pub fn kl_diag_gaussians(a: &LatentPosterior, b: &LatentPosterior) -> Result<f64> {
    check_shapes(a, b)?;
    let mut kl = 0.0;
    for i in 0..a.mu.numel() {
        let (ma, la) = (a.mu.data()[i], a.log_sigma.data()[i]);
        let (mb, lb) = (b.mu.data()[i], b.log_sigma.data()[i]);
        let d = ma - mb;
        kl += lb - la + ((2.0 * la).exp() + d * d) / (2.0 * (2.0 * lb).exp()) - 0.5;
    }
    Ok(kl)
}

/// [`kl_diag_gaussians`] on a tape, differentiable in the first argument.
pub fn kl_var(tape: &mut Tape<'_>, mu: Var, log_sigma: Var, b: &LatentPosterior) -> Result<Var> {
    let shape = tape.shape(mu).to_vec();
    if shape != b.mu.shape() || tape.shape(log_sigma) != shape.as_slice() {
        return Err(Error::Contract(format!("posterior shapes {shape:?} and {:?} differ", b.mu.shape())));
    }
    let n = b.mu.numel();
    let inv = tape.constant(&shape, b.log_sigma.data().iter().map(|l| 0.5 * (-2.0 * l).exp()).collect())?;
    let mb = tape.constant(&shape, b.mu.data().to_vec())?;
    let var_a = tape.scale(log_sigma, 2.0)?;
    let var_a = tape.exp(var_a)?;
    let d = tape.sub(mu, mb)?;
    let d2 = tape.square(d)?;
    let num = tape.add(var_a, d2)?;
    let q = tape.mul(num, inv)?;
    let q = tape.sub(q, log_sigma)?;
    let s = tape.sum(q)?;
    let c = b.log_sigma.data().iter().sum::<f64>() - 0.5 * n as f64;
    Ok(tape.add_scalar(s, c)?)
}

pub fn standard_normal<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// `z = μ + σ ⊙ ε` for a given `ε`.
pub fn reparam_with(post: &LatentPosterior, eps: &[f64]) -> Result<Tensor> {
    if eps.len() != post.mu.numel() {
        return Err(Error::Contract(format!("{} noise values for {} latents", eps.len(), post.mu.numel())));
    }
    let z = post.mu.data().iter().zip(post.log_sigma.data()).zip(eps).map(|((m, l), e)| m + l.exp() * e).collect();
    Ok(Tensor::new(post.mu.shape(), z)?)
}

pub fn reparam_sample<R: Rng>(post: &LatentPosterior, rng: &mut R) -> Tensor {
    let eps = standard_normal(post.mu.numel(), rng);
    reparam_with(post, &eps).expect("noise sized from the posterior")
}

/// `z = μ + exp(log σ) ⊙ ε` on a tape.
pub fn reparam_var(tape: &mut Tape<'_>, mu: Var, log_sigma: Var, eps: &[f64]) -> Result<Var> {
    let shape = tape.shape(mu).to_vec();
    let e = tape.constant(&shape, eps.to_vec())?;
    let s = tape.exp(log_sigma)?;
    let s = tape.mul(s, e)?;
    Ok(tape.add(mu, s)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboEstimate {
    pub elbo: f64,
    pub log_lik: f64,
    pub kl: f64,
}

/// Monte-Carlo `E_q[log p(x_targets | z)] − KL(q ‖ prior)`.
pub fn elbo_against<M: LatentModel, R: Rng>(model: &M, data: &NormTraj, targets: Range<usize>, post: &LatentPosterior, prior: &LatentPosterior, rng: &mut R, n_samples: usize) -> Result<ElboEstimate> {
    if n_samples == 0 {
        return Err(Error::Contract("at least one sample is needed".into()));
    }
    let kl = kl_diag_gaussians(post, prior)?;
    let mut ll = 0.0;
    for _ in 0..n_samples {
        let z = reparam_sample(post, rng);
        let mut tape = Tape::new();
        let zv = tape.frozen(&z)?;
        let v = model.log_lik(&mut tape, data, targets.clone(), zv)?;
        ll += tape.item(v);
    }
    let log_lik = ll / n_samples as f64;
    Ok(ElboEstimate { elbo: log_lik - kl, log_lik, kl })
}

/// [`elbo_against`] over the whole trajectory with the standard normal prior.
pub fn elbo<M: LatentModel, R: Rng>(model: &M, data: &NormTraj, post: &LatentPosterior, rng: &mut R, n_samples: usize) -> Result<ElboEstimate> {
    elbo_against(model, data, 0..data.len(), post, &LatentPosterior::prior(model.z_shape()), rng, n_samples)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalConfig {
    pub steps: usize,
    pub lr: f64,
    /// evaluate each step at `μ ± σ ⊙ ε` and average
    pub antithetic: bool,
    /// draw fresh noise every step instead of once per call
    pub resample: bool,
}

impl Default for LocalConfig {
    fn default() -> Self {
        Self { steps: 16, lr: 1e-3, antithetic: false, resample: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalResult {
    pub post: LatentPosterior,
    /// objective before each step and after the last one (`steps + 1` values)
    pub trace: Vec<f64>,
    pub last: ElboEstimate,
}

fn objective<'a, M: LatentModel>(model: &'a M, tape: &mut Tape<'a>, data: &NormTraj, targets: &Range<usize>, mu: Var, ls: Var, prior: &LatentPosterior, eps: &[f64], antithetic: bool) -> Result<(Var, Var, Var)> {
    let z = reparam_var(tape, mu, ls, eps)?;
    let mut ll = model.log_lik(tape, data, targets.clone(), z)?;
    if antithetic {
        let neg: Vec<f64> = eps.iter().map(|e| -e).collect();
        let z2 = reparam_var(tape, mu, ls, &neg)?;
        let ll2 = model.log_lik(tape, data, targets.clone(), z2)?;
        let s = tape.add(ll, ll2)?;
        ll = tape.scale(s, 0.5)?;
    }
    let kl = kl_var(tape, mu, ls, prior)?;
    let obj = tape.sub(ll, kl)?;
    Ok((obj, ll, kl))
}

/// Ascends `E_q[log p(x_targets | z)] − KL(q ‖ prior)` in (μ, log σ) with
/// AdamW, model frozen. Unless `cfg.resample` is set, one noise draw is
/// shared by every step of the call.
#[allow(clippy::too_many_arguments)]
pub fn optimize_local<M: LatentModel, R: Rng>(
    model: &M,
    data: &NormTraj,
    targets: Range<usize>,
    init: &LatentPosterior,
    prior: &LatentPosterior,
    cfg: &LocalConfig,
    rng: &mut R,
    name: &str,
) -> Result<LocalResult> {
    if cfg.steps == 0 {
        return Err(Error::Contract("local optimization needs at least one step".into()));
    }
    if !(cfg.lr >= 0.0) {
        return Err(Error::Contract(format!("learning rate must be nonnegative, got {}", cfg.lr)));
    }
    if init.shape() != model.z_shape() {
        return Err(Error::Contract(format!("posterior shape {:?} does not match the model's {:?}", init.shape(), model.z_shape())));
    }
    check_shapes(init, prior)?;
    let mut eps = standard_normal(init.mu.numel(), rng);
    let adam_cfg = AdamWConfig::default().with_weight_decay(0.0);
    let mut post = init.clone();
    post.mu.set_requires_grad(true);
    post.log_sigma.set_requires_grad(true);
    let mut state = AdamWState::for_params(&[&post.mu, &post.log_sigma]);
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    let nonfinite = |v: f64| Error::Training(format!("non-finite elbo ({v}) on trajectory {name}"));
    let mut last = ElboEstimate { elbo: 0.0, log_lik: 0.0, kl: 0.0 };
    for step in 0..=cfg.steps {
        if cfg.resample && step > 0 {
            eps = standard_normal(init.mu.numel(), rng);
        }
        let (val, grads) = {
            let mut tape = Tape::new();
            let mu = tape.leaf(&post.mu)?;
            let ls = tape.leaf(&post.log_sigma)?;
            let (obj, ll, kl) = objective(model, &mut tape, data, &targets, mu, ls, prior, &eps, cfg.antithetic).map_err(|e| match e {
                Error::Grad(lap_numgrad::Error::NonFinite { .. }) => nonfinite(f64::NAN),
                e => e,
            })?;
            let val = tape.item(obj);
            last = ElboEstimate { elbo: val, log_lik: tape.item(ll), kl: tape.item(kl) };
            if step == cfg.steps || cfg.lr == 0.0 {
                (val, None)
            } else {
                let g = tape.backward(obj)?;
                let gm: Vec<f64> = g.get_or_zeros(mu, post.mu.numel()).iter().map(|v| -v).collect();
                let gs: Vec<f64> = g.get_or_zeros(ls, post.mu.numel()).iter().map(|v| -v).collect();
                (val, Some((gm, gs)))
            }
        };
        if !val.is_finite() {
            return Err(nonfinite(val));
        }
        trace.push(val);
        if let Some((gm, gs)) = grads {
            adamw_step(&mut [&mut post.mu, &mut post.log_sigma], &[&gm, &gs], &mut state, cfg.lr, &adam_cfg)?;
        }
    }
    post.mu.set_requires_grad(false);
    post.log_sigma.set_requires_grad(false);
    Ok(LocalResult { post, trace, last })
}
