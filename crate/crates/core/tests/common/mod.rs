#![allow(dead_code)]

use std::ops::Range;

use lap_core::model::{NormTraj, HALF_LOG_2PI};
use lap_core::vb::LatentModel;
use lap_numgrad::{Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// `x_t ~ N(z A, I)` for every row, `z` of shape `[1, k]`.
pub struct LinGauss {
    pub a: Tensor,
}

impl LatentModel for LinGauss {
    fn z_shape(&self) -> [usize; 2] {
        [1, self.a.shape()[0]]
    }

    fn log_lik<'a>(&'a self, tape: &mut Tape<'a>, data: &NormTraj, targets: Range<usize>, z: Var) -> lap_core::Result<Var> {
        let d = data.act_dim;
        let a = tape.frozen(&self.a)?;
        let m = tape.matmul(z, a)?;
        let m = tape.gather_rows(m, &vec![0; targets.len()])?;
        let x = tape.constant(&[targets.len(), d], data.act[targets.start * d..targets.end * d].to_vec())?;
        let se = tape.sq_err(m, x)?;
        let ll = tape.scale(se, -0.5)?;
        Ok(tape.add_scalar(ll, -((targets.len() * d) as f64) * HALF_LOG_2PI)?)
    }
}

pub fn lin_gauss_data(rng: &mut ChaCha8Rng, t: usize, d: usize) -> NormTraj {
    NormTraj { t0: 0, obs: vec![0.0; t], act: (0..t * d).map(|_| rng.gen_range(-0.3..0.5)).collect(), obs_dim: 1, act_dim: d }
}
