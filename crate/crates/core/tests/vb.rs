mod common;

use lap_core::data::{LabeledTrajectory, TrajMeta};
use lap_core::dynamics::RobotModel;
use lap_core::kv::KvFile;
use lap_core::model::*;
use lap_core::regen::{regenerate, RegenConfig};
use lap_core::sim::{synth_demos, DemoConfig};
use lap_core::vb::*;
use lap_core::Error;
use common::{lin_gauss_data, LinGauss};
use lap_numgrad::{grad_check, Tape, Tensor};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn post(shape: [usize; 2], mu: f64, log_sigma: f64) -> LatentPosterior {
    let n = shape[0] * shape[1];
    LatentPosterior::new(shape, vec![mu; n], vec![log_sigma; n]).unwrap()
}

fn meta(source: &str) -> TrajMeta {
    TrajMeta { schema: 1, source: source.into(), robot: "r".into(), dof: 1, box_mass: 0.5, box_size: [0.3, 0.1], clamped: 0, skipped: 0 }
}

fn random_traj(rng: &mut ChaCha8Rng, t: usize, od: usize, ad: usize, source: &str) -> LabeledTrajectory {
    let row = |rng: &mut ChaCha8Rng, n| (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect::<Vec<f64>>();
    LabeledTrajectory { obs: (0..t).map(|_| row(rng, od)).collect(), act: (0..t).map(|_| row(rng, ad)).collect(), dt: 1.0 / 30.0, meta: meta(source) }
}

fn tiny_cfg(od: usize, ad: usize, z: [usize; 2]) -> ModelConfig {
    ModelConfig { hidden: 8, heads: 2, blocks: 2, ff: 16, z_tokens: z[0], z_dim: z[1], context: 3, max_steps: 32, ..ModelConfig::for_dims(od, ad) }
}

#[test]
fn kl_closed_form_examples() {
    let s = [2, 3];
    assert_eq!(kl_diag_gaussians(&post(s, 0.0, 0.0), &post(s, 0.0, 0.0)).unwrap(), 0.0);
    assert!((kl_diag_gaussians(&post(s, 1.0, 0.0), &post(s, 0.0, 0.0)).unwrap() - 3.0).abs() < 1e-12);
    let e = std::f64::consts::E;
    let k = kl_diag_gaussians(&post([1, 1], 0.0, 0.5), &post([1, 1], 0.0, 0.0)).unwrap();
    assert!((k - 0.5 * (e - 2.0)).abs() < 1e-12);
    assert!((k - 0.35914).abs() < 1e-5);

    // Monte Carlo: E_q[log q(x) − log p(x)] with q = N(0, e)
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 1_000_000;
    let sd = e.sqrt();
    let mut acc = 0.0;
    for _ in 0..n {
        let x: f64 = sd * rng.sample::<f64, _>(rand_distr::StandardNormal);
        acc += -0.5 * x * x / e - 0.5 * e.ln() + 0.5 * x * x;
    }
    assert!((acc / n as f64 - k).abs() < 3e-3, "mc {}", acc / n as f64);
}

#[test]
fn kl_rejects_mismatched_shapes() {
    assert!(matches!(kl_diag_gaussians(&post([1, 2], 0.0, 0.0), &post([2, 1], 0.0, 0.0)), Err(Error::Contract(_))));
    assert!(LatentPosterior::new([1, 2], vec![0.0, f64::NAN], vec![0.0, 0.0]).is_err());
}

#[test]
fn kl_on_tape_matches_closed_form_and_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = [2, 3];
    let draw = |rng: &mut ChaCha8Rng| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    let a = LatentPosterior::new(s, draw(&mut rng), draw(&mut rng)).unwrap();
    let b = LatentPosterior::new(s, draw(&mut rng), draw(&mut rng)).unwrap();
    let mut tape = Tape::new();
    let (m, l) = (tape.frozen(&a.mu).unwrap(), tape.frozen(&a.log_sigma).unwrap());
    let k = kl_var(&mut tape, m, l, &b).unwrap();
    assert!((tape.item(k) - kl_diag_gaussians(&a, &b).unwrap()).abs() < 1e-12);

    let point = [a.mu.clone(), a.log_sigma.clone()];
    let err = grad_check(
        |tape, v| {
            let k = kl_var(tape, v[0], v[1], &b).map_err(|e| lap_numgrad::Error::Contract(e.to_string()))?;
            Ok(k)
        },
        &point,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

proptest! {
    #[test]
    fn kl_is_nonnegative_and_zero_on_equality(mu in prop::collection::vec(-3.0..3.0f64, 4), ls in prop::collection::vec(-2.0..2.0f64, 4), dm in prop::collection::vec(-1.0..1.0f64, 4), dl in prop::collection::vec(-1.0..1.0f64, 4)) {
        let a = LatentPosterior::new([2, 2], mu.clone(), ls.clone()).unwrap();
        let b = LatentPosterior::new([2, 2], mu.iter().zip(&dm).map(|(x, y)| x + y).collect(), ls.iter().zip(&dl).map(|(x, y)| x + y).collect()).unwrap();
        prop_assert!(kl_diag_gaussians(&a, &b).unwrap() >= 0.0);
        prop_assert!(kl_diag_gaussians(&a, &a).unwrap().abs() < 1e-12);
    }
}

#[test]
fn reparameterization() {
    let p = LatentPosterior::new([1, 3], vec![0.5, -1.0, 2.0], vec![0.0, -1.0, 0.3]).unwrap();
    assert_eq!(reparam_with(&p, &[0.0; 3]).unwrap().data(), p.mu.data());
    let sharp = LatentPosterior::new([1, 3], p.mu.data().to_vec(), vec![-40.0; 3]).unwrap();
    let z = reparam_with(&sharp, &[3.0, -3.0, 1.0]).unwrap();
    assert!(z.data().iter().zip(p.mu.data()).all(|(a, b)| (a - b).abs() < 1e-15));
    assert!(matches!(reparam_with(&p, &[0.0; 2]), Err(Error::Contract(_))));

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 100_000;
    let (mut s, mut s2) = ([0.0; 3], [0.0; 3]);
    for _ in 0..n {
        let z = reparam_sample(&p, &mut rng);
        for i in 0..3 {
            s[i] += z.data()[i];
            s2[i] += z.data()[i] * z.data()[i];
        }
    }
    for i in 0..3 {
        let mean = s[i] / n as f64;
        let var = s2[i] / n as f64 - mean * mean;
        let want = (2.0 * p.log_sigma.data()[i]).exp();
        assert!((var / want - 1.0).abs() < 0.05, "dim {i}: {var} vs {want}");
    }
}

#[test]
fn reparam_gradient_reaches_both_parameters() {
    let p = LatentPosterior::new([1, 2], vec![0.3, -0.2], vec![0.1, -0.4]).unwrap();
    let eps = [0.7, -1.3];
    let err = grad_check(
        |tape, v| {
            let z = reparam_var(tape, v[0], v[1], &eps).map_err(|e| lap_numgrad::Error::Contract(e.to_string()))?;
            let sq = tape.square(z)?;
            tape.sum(sq)
        },
        &[p.mu.clone(), p.log_sigma.clone()],
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-6);
}

#[test]
fn elbo_with_prior_posterior_is_expected_likelihood() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let data = lin_gauss_data(&mut rng, 5, 2);
    let m = LinGauss { a: Tensor::new(&[2, 2], vec![1.0, 0.5, -0.3, 0.8]).unwrap() };
    let q = LatentPosterior::prior([1, 2]);
    let e1 = elbo(&m, &data, &q, &mut ChaCha8Rng::seed_from_u64(9), 4).unwrap();
    assert_eq!(e1.kl, 0.0);
    assert_eq!(e1.elbo, e1.log_lik);
    let e2 = elbo(&m, &data, &q, &mut ChaCha8Rng::seed_from_u64(9), 4).unwrap();
    assert_eq!(e1, e2);
    assert!(matches!(elbo(&m, &data, &q, &mut rng, 0), Err(Error::Contract(_))));
}

fn log_normal_pdf(z: &[f64], mu: &[f64], log_sigma: &[f64]) -> f64 {
    z.iter().zip(mu).zip(log_sigma).map(|((z, m), l)| -0.5 * ((z - m) / l.exp()).powi(2) - l - HALF_LOG_2PI).sum()
}

#[test]
fn elbo_is_below_importance_sampled_evidence() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let dec = Decoder::new(tiny_cfg(2, 1, [1, 2]), Normalizer::identity(2, 1), 8).unwrap();
    let traj = random_traj(&mut rng, 3, 2, 1, "is");
    let data = dec.normalize(&traj).unwrap();
    let prior = LatentPosterior::prior([1, 2]);
    let cfg = LocalConfig { steps: 100, lr: 0.05, antithetic: false, resample: false };
    let q = optimize_local(&dec, &data, 0..3, &prior, &prior, &cfg, &mut rng, "is").unwrap().post;

    let n = 10_000;
    let est = elbo(&dec, &data, &q, &mut rng, n).unwrap();
    let mut w = Vec::with_capacity(n);
    for _ in 0..n {
        let z = reparam_sample(&q, &mut rng);
        let ll = dec.log_likelihood(&traj, &z).unwrap();
        w.push(ll + log_normal_pdf(z.data(), &[0.0; 2], &[0.0; 2]) - log_normal_pdf(z.data(), q.mu.data(), q.log_sigma.data()));
    }
    let mx = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = mx + (w.iter().map(|v| (v - mx).exp()).sum::<f64>() / n as f64).ln();
    assert!(est.elbo <= log_z + 1e-3, "elbo {} vs log evidence {}", est.elbo, log_z);
}

#[test]
fn zero_learning_rate_is_a_fixed_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let data = lin_gauss_data(&mut rng, 4, 2);
    let m = LinGauss { a: Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap() };
    let init = LatentPosterior::new([1, 2], vec![0.2, -0.1], vec![-0.5, 0.3]).unwrap();
    let prior = LatentPosterior::prior([1, 2]);
    let res = optimize_local(&m, &data, 0..4, &init, &prior, &LocalConfig { steps: 5, lr: 0.0, antithetic: false, resample: false }, &mut rng, "z").unwrap();
    assert_eq!(res.post, init);
    assert_eq!(res.trace.len(), 6);
    assert!(matches!(optimize_local(&m, &data, 0..4, &init, &prior, &LocalConfig { steps: 0, lr: 1e-3, antithetic: false, resample: false }, &mut rng, "z"), Err(Error::Contract(_))));
}

#[test]
fn local_inference_recovers_conjugate_posterior_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (t, k, d) = (6, 2, 3);
    let a = vec![0.8, -0.2, 0.4, 0.1, 0.6, -0.5];
    let data = lin_gauss_data(&mut rng, t, d);
    let m = LinGauss { a: Tensor::new(&[k, d], a.clone()).unwrap() };

    // posterior precision I + T A Aᵀ, mean P⁻¹ A Σ x_t
    let am = DMatrix::from_row_slice(k, d, &a);
    let prec = DMatrix::identity(k, k) + (t as f64) * &am * am.transpose();
    let mut sx = DVector::zeros(d);
    for r in 0..t {
        for j in 0..d {
            sx[j] += data.act[r * d + j];
        }
    }
    let mean = prec.clone().cholesky().unwrap().solve(&(&am * sx));

    let prior = LatentPosterior::prior([1, k]);
    let cfg = LocalConfig { steps: 200, lr: 0.02, antithetic: true, resample: false };
    let res = optimize_local(&m, &data, 0..t, &prior, &prior, &cfg, &mut rng, "lin").unwrap();
    for i in 0..k {
        assert!((res.post.mu.data()[i] - mean[i]).abs() < 1e-3, "dim {i}: {} vs {}", res.post.mu.data()[i], mean[i]);
    }
}

#[test]
fn small_step_ascends_the_objective() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let dec = Decoder::new(tiny_cfg(3, 2, [2, 4]), Normalizer::identity(3, 2), 1).unwrap();
    let data = dec.normalize(&random_traj(&mut rng, 6, 3, 2, "a")).unwrap();
    let init = LatentPosterior::init([2, 4], 0.3, &mut rng);
    let prior = LatentPosterior::prior([2, 4]);
    for seed in 0..5 {
        let res = optimize_local(&dec, &data, 0..6, &init, &prior, &LocalConfig { steps: 1, lr: 1e-6, antithetic: false, resample: false }, &mut ChaCha8Rng::seed_from_u64(seed), "a").unwrap();
        assert!(res.trace[1] > res.trace[0], "{:?}", res.trace);
    }
}

#[test]
fn non_finite_objective_names_the_trajectory() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let data = lin_gauss_data(&mut rng, 3, 2);
    let m = LinGauss { a: Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap() };
    let init = LatentPosterior::new([1, 2], vec![0.0, 0.0], vec![800.0, 0.0]).unwrap();
    let err = optimize_local(&m, &data, 0..3, &init, &LatentPosterior::prior([1, 2]), &LocalConfig::default(), &mut rng, "demo_042").unwrap_err();
    match err {
        Error::Training(msg) => assert!(msg.contains("demo_042"), "{msg}"),
        e => panic!("unexpected {e:?}"),
    }
}

fn synthetic_dataset(n: usize, seed: u64) -> Vec<LabeledTrajectory> {
    let m = RobotModel::builtin("robot_a").unwrap();
    let demos = synth_demos(n, &m, &DemoConfig::default(), seed).unwrap();
    demos.iter().enumerate().map(|(i, d)| regenerate(&d.trace, &m, &RegenConfig::default(), &format!("demo_{i}")).unwrap().0).collect()
}

#[test]
fn local_trace_mostly_non_decreasing_on_synthetic_data() {
    let data = synthetic_dataset(6, 21);
    let od = data[0].obs[0].len();
    let ad = data[0].act[0].len();
    let cfg = ModelConfig { hidden: 16, heads: 2, blocks: 2, ff: 32, z_tokens: 4, z_dim: 8, context: 10, max_steps: 128, ..ModelConfig::for_dims(od, ad) };
    let dec = Decoder::new(cfg, Normalizer::fit(&data).unwrap(), 2).unwrap();
    let prior = LatentPosterior::prior(dec.cfg.z_shape());
    let (mut up, mut total) = (0, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for t in &data {
        let nt = dec.normalize(t).unwrap();
        let res = optimize_local(&dec, &nt, 0..nt.len(), &prior, &prior, &LocalConfig::default(), &mut rng, &t.meta.source).unwrap();
        for w in res.trace.windows(2) {
            total += 1;
            up += usize::from(w[1] >= w[0]);
        }
        assert!(res.trace.last().unwrap() >= &res.trace[0]);
    }
    assert!(up as f64 >= 0.95 * total as f64, "{up}/{total}");
}

fn tiny_decoder(data: &[LabeledTrajectory], seed: u64) -> Decoder {
    let od = data[0].obs[0].len();
    let ad = data[0].act[0].len();
    Decoder::new(tiny_cfg(od, ad, [2, 4]), Normalizer::fit(data).unwrap(), seed).unwrap()
}

#[test]
fn overfits_a_single_trajectory() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let data = vec![random_traj(&mut rng, 10, 3, 2, "one")];
    let dec = tiny_decoder(&data, 1);
    let ceiling = -((10 * 2) as f64) * HALF_LOG_2PI;
    let cfg = TrainConfig { epochs: 200, global_lr: 1e-2, local_lr: 1e-2, seed: 3, ..TrainConfig::default() };
    let out = train(dec, &data, &cfg, None).unwrap();
    let first = out.log[..5].iter().map(|l| l.elbo).sum::<f64>() / 5.0;
    let last = out.log[195..].iter().map(|l| l.elbo).sum::<f64>() / 5.0;
    assert!(last - first >= 0.5 * (ceiling - first), "first {first}, last {last}, ceiling {ceiling}");
}

#[test]
fn identical_trajectories_get_matching_posteriors() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let t = random_traj(&mut rng, 8, 3, 2, "twin");
    let other = random_traj(&mut rng, 8, 3, 2, "other");
    let data = vec![t.clone(), other, t];
    let cfg = TrainConfig { epochs: 30, batch: 1, seed: 5, ..TrainConfig::default() };
    let out = train(tiny_decoder(&data, 2), &data, &cfg, None).unwrap();
    let (a, b) = (&out.posteriors[0], &out.posteriors[2]);
    assert!(a.mu.data().iter().zip(b.mu.data()).all(|(x, y)| (x - y).abs() < 1e-2));
    assert_ne!(out.posteriors[0], out.posteriors[1]);
}

fn read(path: &std::path::Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn training_is_deterministic_and_resumable() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let data: Vec<_> = (0..5).map(|i| random_traj(&mut rng, 7, 3, 2, &format!("t{i}"))).collect();
    let cfg = TrainConfig { epochs: 4, batch: 2, t_local: 3, seed: 9, ..TrainConfig::default() };
    let dirs: Vec<_> = (0..4).map(|_| tempfile::tempdir().unwrap()).collect();
    train(tiny_decoder(&data, 4), &data, &cfg, Some(dirs[0].path())).unwrap();
    train(tiny_decoder(&data, 4), &data, &cfg, Some(dirs[1].path())).unwrap();
    train(tiny_decoder(&data, 4), &data, &TrainConfig { jobs: 3, ..cfg.clone() }, Some(dirs[2].path())).unwrap();
    train(tiny_decoder(&data, 4), &data, &TrainConfig { epochs: 2, ..cfg.clone() }, Some(dirs[3].path())).unwrap();
    resume(dirs[3].path(), &data, &cfg).unwrap();
    for name in ["model.ckpt", "model.json", "optim.ckpt", "state.json", "posteriors.json"] {
        let want = read(&dirs[0].path().join(name));
        for d in &dirs[1..] {
            assert_eq!(want, read(&d.path().join(name)), "{name}");
        }
    }
    let log = std::fs::read_to_string(dirs[3].path().join("train_log.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), EpochLog::HEADER);
    assert_eq!(log.lines().count(), 5);
    let loaded = read_posteriors(&dirs[0].path().join("posteriors.json")).unwrap();
    assert_eq!(loaded.len(), 5);
    assert!(Decoder::load(&model_path(dirs[0].path())).is_ok());
}

#[test]
fn unwritable_checkpoint_location_is_a_filesystem_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let data = vec![random_traj(&mut rng, 5, 3, 2, "x")];
    let f = tempfile::NamedTempFile::new().unwrap();
    let bad = f.path().join("sub");
    let err = train(tiny_decoder(&data, 1), &data, &TrainConfig { epochs: 1, ..TrainConfig::default() }, Some(&bad)).unwrap_err();
    assert!(matches!(err, Error::Io(_)), "{err:?}");
}

#[test]
fn fixed_latent_training_skips_inference() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let data: Vec<_> = (0..3).map(|i| random_traj(&mut rng, 6, 3, 2, &format!("b{i}"))).collect();
    let out = train(tiny_decoder(&data, 1), &data, &TrainConfig { epochs: 3, fixed_z: true, ..TrainConfig::default() }, None).unwrap();
    let prior = LatentPosterior::prior([2, 4]);
    assert!(out.posteriors.iter().all(|p| *p == prior));
    assert!(out.log.iter().all(|l| l.kl == 0.0 && (l.elbo + l.nll).abs() < 1e-9));
}

#[test]
fn empty_dataset_and_bad_config_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let data = vec![random_traj(&mut rng, 5, 3, 2, "x")];
    assert!(matches!(train(tiny_decoder(&data, 1), &[], &TrainConfig::default(), None), Err(Error::Contract(_))));
    assert!(matches!(train(tiny_decoder(&data, 1), &data, &TrainConfig { t_local: 0, ..TrainConfig::default() }, None), Err(Error::Contract(_))));
    assert!(matches!(train(tiny_decoder(&data, 1), &data, &TrainConfig { global_lr: 0.0, ..TrainConfig::default() }, None), Err(Error::Contract(_))));
}

#[test]
fn default_config_and_kv_round_trip() {
    let d = TrainConfig::default();
    assert_eq!((d.batch, d.t_local, d.local_lr, d.global_lr), (12, 16, 1e-3, 2e-4));
    assert!(!d.reinit_local);
    let kv = KvFile::parse("cfg", &d.to_kv().to_text()).unwrap();
    assert_eq!(TrainConfig::from_kv(&kv).unwrap(), d);
    let kv = KvFile::parse("cfg", "epochs = 7\nbatch = 3 # small\n").unwrap();
    let c = TrainConfig::from_kv(&kv).unwrap();
    assert_eq!((c.epochs, c.batch, c.t_local), (7, 3, 16));
}
