use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use lap_numgrad::{adamw_step, AdamWConfig, AdamWState, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{optimize_local, reparam_sample, LatentPosterior, LocalConfig, PosteriorRecord};
use crate::data::{LabeledTrajectory, SCHEMA};
use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::model::{Decoder, NormTraj};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub t_local: usize,
    pub local_lr: f64,
    pub global_lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weight_decay: f64,
    /// re-draw every local posterior before each of its optimizations
    pub reinit_local: bool,
    /// std of the random μ initialization; 0 starts at the prior
    pub init_std: f64,
    /// train with `z ≡ 0` and no local inference
    pub fixed_z: bool,
    pub jobs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            t_local: 16,
            local_lr: 1e-3,
            global_lr: 2e-4,
            batch: 12,
            epochs: 100,
            seed: 0,
            weight_decay: 0.01,
            reinit_local: false,
            init_std: 0.0,
            fixed_z: false,
            jobs: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_local == 0 || self.batch == 0 || self.jobs == 0 {
            return Err(Error::Contract("t_local, batch and jobs must be at least 1".into()));
        }
        if !(self.local_lr > 0.0 && self.global_lr > 0.0) {
            return Err(Error::Contract("learning rates must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.init_std >= 0.0) {
            return Err(Error::Contract("weight decay and init std must be nonnegative".into()));
        }
        Ok(())
    }

    /// Overrides defaults with any keys present in `kv`.
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let mut c = Self::default();
        c.apply_kv(kv)?;
        Ok(c)
    }

    pub fn apply_kv(&mut self, kv: &KvFile) -> Result<()> {
        self.t_local = kv.get_or("t_local", self.t_local)?;
        self.local_lr = kv.get_or("local_lr", self.local_lr)?;
        self.global_lr = kv.get_or("global_lr", self.global_lr)?;
        self.batch = kv.get_or("batch", self.batch)?;
        self.epochs = kv.get_or("epochs", self.epochs)?;
        self.seed = kv.get_or("seed", self.seed)?;
        self.weight_decay = kv.get_or("weight_decay", self.weight_decay)?;
        self.reinit_local = kv.get_or("reinit_local", self.reinit_local)?;
        self.init_std = kv.get_or("init_std", self.init_std)?;
        self.fixed_z = kv.get_or("fixed_z", self.fixed_z)?;
        self.jobs = kv.get_or("jobs", self.jobs)?;
        self.validate()
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::default();
        kv.set("t_local", self.t_local);
        kv.set("local_lr", self.local_lr);
        kv.set("global_lr", self.global_lr);
        kv.set("batch", self.batch);
        kv.set("epochs", self.epochs);
        kv.set("seed", self.seed);
        kv.set("weight_decay", self.weight_decay);
        kv.set("reinit_local", self.reinit_local);
        kv.set("init_std", self.init_std);
        kv.set("fixed_z", self.fixed_z);
        kv.set("jobs", self.jobs);
        kv
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub elbo: f64,
    pub kl: f64,
    pub nll: f64,
    /// mean ‖Δμ‖ of the local posteriors over the epoch
    pub mu_drift: f64,
    pub wall_s: f64,
}

impl EpochLog {
    pub const HEADER: &'static str = "epoch,elbo,kl,nll,mu_drift,wall_s";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{},{:.3}", self.epoch, self.elbo, self.kl, self.nll, self.mu_drift, self.wall_s)
    }
}

#[derive(Debug)]
pub struct TrainOutput {
    pub decoder: Decoder,
    pub posteriors: Vec<LatentPosterior>,
    pub log: Vec<EpochLog>,
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    schema: u32,
    epoch: usize,
    adam_step: u64,
    fixed_z: bool,
    posteriors: Vec<PosteriorRecord>,
}

const MODEL_FILE: &str = "model.ckpt";
const OPTIM_FILE: &str = "optim.ckpt";
const STATE_FILE: &str = "state.json";
const LOG_FILE: &str = "train_log.csv";
const POSTERIOR_FILE: &str = "posteriors.json";

pub fn model_path(dir: &Path) -> PathBuf {
    dir.join(MODEL_FILE)
}

/// Seed for one trajectory's stream in one phase of one epoch. Keyed by the
/// trajectory's content rather than its index, so equal trajectories draw
/// equal noise wherever they sit in the dataset.
fn stream_seed(seed: u64, epoch: usize, phase: u8, content: &[u8; 32]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((epoch as u64).to_le_bytes());
    h.update([phase]);
    h.update(content);
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn content_digest(t: &NormTraj) -> [u8; 32] {
    let mut h = Sha256::new();
    for v in t.obs.iter().chain(&t.act) {
        h.update(v.to_le_bytes());
    }
    h.finalize().into()
}

fn digest_all(posts: &[LatentPosterior]) -> String {
    let mut h = Sha256::new();
    for p in posts {
        h.update(p.digest());
    }
    hex::encode(h.finalize())
}

pub fn write_posteriors(path: &Path, posts: &[LatentPosterior]) -> Result<()> {
    let recs: Vec<PosteriorRecord> = posts.iter().map(|p| p.record()).collect();
    write_atomic(path, (serde_json::to_string(&recs)? + "\n").as_bytes())
}

pub fn read_posteriors(path: &Path) -> Result<Vec<LatentPosterior>> {
    let text = fs::read_to_string(path)?;
    let recs: Vec<PosteriorRecord> = serde_json::from_str(&text).map_err(|e| Error::Parse { file: path.display().to_string(), msg: e.to_string() })?;
    recs.into_iter().map(LatentPosterior::from_record).collect()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Run {
    decoder: Decoder,
    posteriors: Vec<LatentPosterior>,
    adam: AdamWState,
    epoch: usize,
    log: Vec<EpochLog>,
}

/// Alternating variational training from a freshly initialized decoder.
/// With `out` set, the full training state is written there after every epoch.
pub fn train(decoder: Decoder, data: &[LabeledTrajectory], cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainOutput> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Contract("training needs at least one trajectory".into()));
    }
    let shape = decoder.cfg.z_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_1a7e);
    let posteriors = (0..data.len()).map(|_| LatentPosterior::init(shape, cfg.init_std, &mut rng)).collect();
    let tensors: Vec<&Tensor> = decoder.params.named().into_iter().map(|(_, t)| t).collect();
    let adam = AdamWState::for_params(&tensors);
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(LOG_FILE), format!("{}\n", EpochLog::HEADER))?;
    }
    run(Run { decoder, posteriors, adam, epoch: 0, log: Vec::new() }, data, cfg, out)
}

/// Continues a run saved by [`train`] in `dir` up to `cfg.epochs` total epochs.
pub fn resume(dir: &Path, data: &[LabeledTrajectory], cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let decoder = Decoder::load(&model_path(dir))?;
    let state_path = dir.join(STATE_FILE);
    let text = fs::read_to_string(&state_path)?;
    let st: StateFile = serde_json::from_str(&text).map_err(|e| Error::Parse { file: state_path.display().to_string(), msg: e.to_string() })?;
    if st.schema != SCHEMA || st.fixed_z != cfg.fixed_z || st.posteriors.len() != data.len() {
        return Err(Error::Checkpoint("training state does not match this dataset and config".into()));
    }
    let posteriors = st.posteriors.into_iter().map(LatentPosterior::from_record).collect::<Result<Vec<_>>>()?;
    let moments = lap_numgrad::load_checkpoint(&dir.join(OPTIM_FILE))?;
    let n = decoder.params.named().len();
    if moments.len() != 2 * n {
        return Err(Error::Checkpoint(format!("optimizer state has {} tensors, expected {}", moments.len(), 2 * n)));
    }
    let mut adam = AdamWState { step: st.adam_step, m: Vec::with_capacity(n), v: Vec::with_capacity(n) };
    for (i, (_, t)) in moments.into_iter().enumerate() {
        if i < n {
            adam.m.push(t.into_data());
        } else {
            adam.v.push(t.into_data());
        }
    }
    run(Run { decoder, posteriors, adam, epoch: st.epoch, log: Vec::new() }, data, cfg, Some(dir))
}

fn save_state(dir: &Path, r: &Run, cfg: &TrainConfig) -> Result<()> {
    r.decoder.save(&model_path(dir))?;
    let names: Vec<String> = (0..r.adam.m.len()).map(|i| format!("m.{i}")).chain((0..r.adam.v.len()).map(|i| format!("v.{i}"))).collect();
    let tensors: Vec<Tensor> = r.adam.m.iter().chain(&r.adam.v).map(|d| Tensor::vector(d.clone())).collect();
    let refs: Vec<(&str, &Tensor)> = names.iter().map(|s| s.as_str()).zip(&tensors).collect();
    let tmp = dir.join("optim.tmp");
    lap_numgrad::save_checkpoint(&tmp, &refs)?;
    fs::rename(&tmp, dir.join(OPTIM_FILE))?;
    let st = StateFile { schema: SCHEMA, epoch: r.epoch, adam_step: r.adam.step, fixed_z: cfg.fixed_z, posteriors: r.posteriors.iter().map(|p| p.record()).collect() };
    write_atomic(&dir.join(STATE_FILE), (serde_json::to_string(&st)? + "\n").as_bytes())?;
    write_posteriors(&dir.join(POSTERIOR_FILE), &r.posteriors)?;
    let mut f = fs::OpenOptions::new().create(true).append(true).open(dir.join(LOG_FILE))?;
    if let Some(last) = r.log.last() {
        writeln!(f, "{}", last.csv_row())?;
    }
    Ok(())
}

struct LocalOut {
    post: LatentPosterior,
    elbo: f64,
    kl: f64,
    nll: f64,
}

fn run(mut r: Run, data: &[LabeledTrajectory], cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainOutput> {
    let norm: Vec<NormTraj> = data.iter().map(|t| r.decoder.normalize(t)).collect::<Result<_>>()?;
    let keys: Vec<[u8; 32]> = norm.iter().map(content_digest).collect();
    let names: Vec<String> = data.iter().enumerate().map(|(i, t)| format!("#{i} ({})", t.meta.source)).collect();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.jobs).build().map_err(|e| Error::Contract(e.to_string()))?;
    let local_cfg = LocalConfig { steps: cfg.t_local, lr: cfg.local_lr, antithetic: false, resample: false };
    let adam_cfg = AdamWConfig::default().with_weight_decay(cfg.weight_decay);
    let shape = r.decoder.cfg.z_shape();
    r.decoder.params.set_requires_grad(true);

    while r.epoch < cfg.epochs {
        let start = Instant::now();
        let epoch = r.epoch;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)));
        let (mut sum_elbo, mut sum_kl, mut sum_nll, mut sum_drift) = (0.0, 0.0, 0.0, 0.0);

        for batch in order.chunks(cfg.batch) {
            // (a) local inference, θ read-only
            if !cfg.fixed_z {
                let dec = &r.decoder;
                let posts = &r.posteriors;
                let results: Vec<Result<LocalOut>> = pool.install(|| {
                    batch
                        .par_iter()
                        .map(|&i| {
                            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, epoch, 0, &keys[i]));
                            let init = if cfg.reinit_local { LatentPosterior::init(shape, cfg.init_std, &mut rng) } else { posts[i].clone() };
                            let res = optimize_local(dec, &norm[i], 0..norm[i].len(), &init, &LatentPosterior::prior(shape), &local_cfg, &mut rng, &names[i])?;
                            Ok(LocalOut { post: res.post, elbo: res.last.elbo, kl: res.last.kl, nll: -res.last.log_lik })
                        })
                        .collect()
                });
                for (&i, res) in batch.iter().zip(results) {
                    let lo = res?;
                    let d: f64 = lo.post.mu.data().iter().zip(r.posteriors[i].mu.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                    sum_drift += d;
                    sum_elbo += lo.elbo;
                    sum_kl += lo.kl;
                    sum_nll += lo.nll;
                    r.posteriors[i] = lo.post;
                }
            }

            // (b) one global step on the batch-mean likelihood, posteriors fixed
            let before = digest_all(&r.posteriors);
            let dec = &r.decoder;
            let posts = &r.posteriors;
            let grads: Vec<Result<(Vec<Vec<f64>>, f64)>> = pool.install(|| {
                batch
                    .par_iter()
                    .map(|&i| {
                        let z = if cfg.fixed_z {
                            dec.z_zeros()
                        } else {
                            reparam_sample(&posts[i], &mut ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, epoch, 1, &keys[i])))
                        };
                        let mut tape = Tape::new();
                        let pv = dec.bind(&mut tape, true)?;
                        let zv = tape.frozen(&z)?;
                        let ll = dec.log_lik_var(&mut tape, &pv, &norm[i], 0..norm[i].len(), zv).map_err(|e| match e {
                            Error::Grad(lap_numgrad::Error::NonFinite { .. }) => Error::Training(format!("non-finite likelihood on trajectory {}", names[i])),
                            e => e,
                        })?;
                        let v = tape.item(ll);
                        let g = tape.backward(ll)?;
                        let sizes: Vec<usize> = dec.params.named().iter().map(|(_, t)| t.numel()).collect();
                        Ok((pv.all().iter().zip(sizes).map(|(&var, n)| g.get_or_zeros(var, n)).collect(), v))
                    })
                    .collect()
            });
            let mut total: Option<Vec<Vec<f64>>> = None;
            for res in grads {
                let (g, ll) = res?;
                if cfg.fixed_z {
                    sum_elbo += ll;
                    sum_nll -= ll;
                }
                match &mut total {
                    None => total = Some(g),
                    Some(t) => t.iter_mut().zip(&g).for_each(|(a, b)| a.iter_mut().zip(b).for_each(|(x, y)| *x += y)),
                }
            }
            let scale = -1.0 / batch.len() as f64;
            let total: Vec<Vec<f64>> = total.expect("nonempty batch").into_iter().map(|g| g.into_iter().map(|v| v * scale).collect()).collect();
            if total.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Training(format!("non-finite decoder gradient in epoch {epoch}")));
            }
            let refs: Vec<&[f64]> = total.iter().map(|g| g.as_slice()).collect();
            adamw_step(&mut r.decoder.params.tensors_mut(), &refs, &mut r.adam, cfg.global_lr, &adam_cfg)?;
            if digest_all(&r.posteriors) != before {
                return Err(Error::Training("local posteriors changed during the global step".into()));
            }
        }

        let n = data.len() as f64;
        r.epoch += 1;
        r.log.push(EpochLog { epoch: r.epoch, elbo: sum_elbo / n, kl: sum_kl / n, nll: sum_nll / n, mu_drift: sum_drift / n, wall_s: start.elapsed().as_secs_f64() });
        if let Some(dir) = out {
            save_state(dir, &r, cfg)?;
        }
    }
    r.decoder.params.set_requires_grad(false);
    Ok(TrainOutput { decoder: r.decoder, posteriors: r.posteriors, log: r.log })
}
