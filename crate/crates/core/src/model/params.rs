use lap_numgrad::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::KvFile;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub hidden: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ff: usize,
    pub z_tokens: usize,
    pub z_dim: usize,
    /// number of past (o, a) pairs the decoder sees
    pub context: usize,
    /// positional embeddings cover steps `0..max_steps`; later steps reuse the last
    pub max_steps: usize,
    /// cross-attention to z in every block, or only in the first
    pub cross_every_block: bool,
}

impl ModelConfig {
    pub fn for_dims(obs_dim: usize, act_dim: usize) -> Self {
        Self {
            obs_dim,
            act_dim,
            hidden: 64,
            heads: 8,
            blocks: 3,
            ff: 256,
            z_tokens: 16,
            z_dim: 64,
            context: 10,
            max_steps: 128,
            cross_every_block: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Model(m));
        if self.obs_dim == 0 || self.act_dim == 0 {
            return bad("observation and action widths must be positive".into());
        }
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return bad(format!("hidden size {} not divisible into {} heads", self.hidden, self.heads));
        }
        if self.blocks == 0 || self.ff == 0 || self.z_tokens == 0 || self.z_dim == 0 || self.max_steps == 0 {
            return bad("blocks, ff, latent shape and max_steps must be positive".into());
        }
        Ok(())
    }

    /// Overrides sizes with any keys present in `kv`; widths are fixed by the data.
    pub fn apply_kv(&mut self, kv: &KvFile) -> Result<()> {
        self.hidden = kv.get_or("hidden", self.hidden)?;
        self.heads = kv.get_or("heads", self.heads)?;
        self.blocks = kv.get_or("blocks", self.blocks)?;
        self.ff = kv.get_or("ff", self.ff)?;
        self.z_tokens = kv.get_or("z_tokens", self.z_tokens)?;
        self.z_dim = kv.get_or("z_dim", self.z_dim)?;
        self.context = kv.get_or("context", self.context)?;
        self.max_steps = kv.get_or("max_steps", self.max_steps)?;
        self.cross_every_block = kv.get_or("cross_every_block", self.cross_every_block)?;
        self.validate()
    }

    pub fn z_shape(&self) -> [usize; 2] {
        [self.z_tokens, self.z_dim]
    }

    pub fn has_cross(&self, block: usize) -> bool {
        self.cross_every_block || block == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1: [Tensor; 2],
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub cross: Option<Cross>,
    pub ln3: [Tensor; 2],
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cross {
    pub ln: [Tensor; 2],
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub w_obs: Tensor,
    pub b_obs: Tensor,
    pub w_act: Tensor,
    pub b_act: Tensor,
    pub start: Tensor,
    pub pos: Tensor,
    /// rows: observation token, action token
    pub kind: Tensor,
    pub blocks: Vec<Block>,
    pub ln_f: [Tensor; 2],
    pub w_head: Tensor,
    pub b_head: Tensor,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let d = Normal::new(0.0, std).unwrap();
        Tensor::new(shape, (0..n).map(|_| d.sample(&mut self.rng)).collect()).unwrap()
    }

    fn linear(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        self.normal(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
    }
}

fn ln(h: usize) -> [Tensor; 2] {
    [Tensor::filled(&[h], 1.0), Tensor::zeros(&[h])]
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = Init { rng: ChaCha8Rng::seed_from_u64(seed) };
        let h = cfg.hidden;
        // residual branches start scaled down so the stack begins near identity
        let out_scale = 1.0 / (2.0 * cfg.blocks as f64).sqrt();
        let blocks = (0..cfg.blocks)
            .map(|b| {
                let mut wo = r.linear(h, h);
                let mut w2 = r.linear(cfg.ff, h);
                wo.data_mut().iter_mut().chain(w2.data_mut()).for_each(|v| *v *= out_scale);
                let cross = cfg.has_cross(b).then(|| {
                    let mut co = r.linear(h, h);
                    co.data_mut().iter_mut().for_each(|v| *v *= out_scale);
                    Cross { ln: ln(h), wq: r.linear(h, h), wk: r.linear(cfg.z_dim, h), wv: r.linear(cfg.z_dim, h), wo: co }
                });
                Block {
                    ln1: ln(h),
                    wq: r.linear(h, h),
                    wk: r.linear(h, h),
                    wv: r.linear(h, h),
                    wo,
                    cross,
                    ln3: ln(h),
                    w1: r.linear(h, cfg.ff),
                    b1: Tensor::zeros(&[cfg.ff]),
                    w2,
                    b2: Tensor::zeros(&[h]),
                }
            })
            .collect();
        Ok(Self {
            w_obs: r.linear(cfg.obs_dim, h),
            b_obs: Tensor::zeros(&[h]),
            w_act: r.linear(cfg.act_dim, h),
            b_act: Tensor::zeros(&[h]),
            start: r.normal(&[1, h], 0.02),
            pos: r.normal(&[cfg.max_steps, h], 0.02),
            kind: r.normal(&[2, h], 0.02),
            blocks,
            ln_f: ln(h),
            w_head: r.normal(&[h, cfg.act_dim], 0.1 / (h as f64).sqrt()),
            b_head: Tensor::zeros(&[cfg.act_dim]),
        })
    }

    /// Every tensor with a stable name, in checkpoint order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("embed.obs.w".into(), &self.w_obs),
            ("embed.obs.b".into(), &self.b_obs),
            ("embed.act.w".into(), &self.w_act),
            ("embed.act.b".into(), &self.b_act),
            ("embed.start".into(), &self.start),
            ("embed.pos".into(), &self.pos),
            ("embed.kind".into(), &self.kind),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |s: &str| format!("block{i}.{s}");
            out.extend([(p("ln1.g"), &b.ln1[0]), (p("ln1.b"), &b.ln1[1]), (p("self.wq"), &b.wq), (p("self.wk"), &b.wk), (p("self.wv"), &b.wv), (p("self.wo"), &b.wo)]);
            if let Some(c) = &b.cross {
                out.extend([(p("ln2.g"), &c.ln[0]), (p("ln2.b"), &c.ln[1]), (p("cross.wq"), &c.wq), (p("cross.wk"), &c.wk), (p("cross.wv"), &c.wv), (p("cross.wo"), &c.wo)]);
            }
            out.extend([(p("ln3.g"), &b.ln3[0]), (p("ln3.b"), &b.ln3[1]), (p("ff.w1"), &b.w1), (p("ff.b1"), &b.b1), (p("ff.w2"), &b.w2), (p("ff.b2"), &b.b2)]);
        }
        out.extend([("ln_f.g".into(), &self.ln_f[0]), ("ln_f.b".into(), &self.ln_f[1]), ("head.w".into(), &self.w_head), ("head.b".into(), &self.b_head)]);
        out
    }

    /// Mutable tensors in the same order as [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.w_obs, &mut self.b_obs, &mut self.w_act, &mut self.b_act, &mut self.start, &mut self.pos, &mut self.kind];
        for b in &mut self.blocks {
            let [g1, b1] = &mut b.ln1;
            out.extend([g1, b1, &mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo]);
            if let Some(c) = &mut b.cross {
                let [g, bb] = &mut c.ln;
                out.extend([g, bb, &mut c.wq, &mut c.wk, &mut c.wv, &mut c.wo]);
            }
            let [g3, b3] = &mut b.ln3;
            out.extend([g3, b3, &mut b.w1, &mut b.b1, &mut b.w2, &mut b.b2]);
        }
        let [gf, bf] = &mut self.ln_f;
        out.extend([gf, bf, &mut self.w_head, &mut self.b_head]);
        out
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.tensors_mut().into_iter().for_each(|t| t.set_requires_grad(on));
    }

    pub fn count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Rebuilds parameters from checkpoint records, checking every name and shape.
    pub fn from_named(cfg: &ModelConfig, records: Vec<(String, Tensor)>) -> Result<Self> {
        let mut p = Self::init(cfg, 0)?;
        let expected: Vec<(String, Vec<usize>)> = p.named().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        if records.len() != expected.len() {
            return Err(Error::Checkpoint(format!("expected {} tensors, found {}", expected.len(), records.len())));
        }
        for ((slot, (name, shape)), (rn, rt)) in p.tensors_mut().into_iter().zip(expected).zip(records) {
            if rn != name || rt.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!("tensor {rn} {:?} does not match {name} {shape:?}", rt.shape())));
            }
            if !rt.is_finite() {
                return Err(Error::Checkpoint(format!("tensor {rn} holds non-finite values")));
            }
            *slot = rt;
        }
        Ok(p)
    }
}
