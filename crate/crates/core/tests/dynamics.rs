use lap_core::dynamics::*;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_model(rng: &mut ChaCha8Rng, n: usize) -> RobotModel {
    let masses: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..3.0)).collect();
    let lengths: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..0.6)).collect();
    let mut m = RobotModel::uniform(&masses, &lengths, 9.81);
    for l in &mut m.links {
        l.com = rng.gen_range(0.0..=l.length);
        l.inertia = rng.gen_range(0.0..0.05);
    }
    m
}

fn rvec(rng: &mut ChaCha8Rng, n: usize, s: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-s..s)).collect()
}

#[test]
fn inertia_symmetric_positive_definite() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..1000 {
        let n = 1 + i % 3;
        let m = random_model(&mut rng, n);
        let q = rvec(&mut rng, n, 3.2);
        let mm = inertia_matrix(&m, &q);
        assert!((&mm - mm.transpose()).amax() < 1e-12);
        let eig = mm.clone().symmetric_eigen().eigenvalues;
        assert!(eig.min() > 0.0, "min eigenvalue {}", eig.min());
    }
}

#[test]
fn massless_second_link_reduces_to_single() {
    let mut two = RobotModel::uniform(&[1.3, 1e-300], &[0.5, 0.4], 9.81);
    two.links[1].inertia = 0.0;
    let one = RobotModel::uniform(&[1.3], &[0.5], 9.81);
    for q in [0.0, 0.7, -1.9] {
        let m2 = inertia_matrix(&two, &[q, 0.4]);
        let m1 = inertia_matrix(&one, &[q]);
        assert!((m2[(0, 0)] - m1[(0, 0)]).abs() < 1e-12);
    }
}

#[test]
fn mdot_minus_2c_is_skew() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-6;
    for i in 0..200 {
        let n = 2 + i % 2;
        let m = random_model(&mut rng, n);
        let q = rvec(&mut rng, n, 3.0);
        let qd = rvec(&mut rng, n, 4.0);
        let qp: Vec<f64> = q.iter().zip(&qd).map(|(a, b)| a + h * b).collect();
        let qm: Vec<f64> = q.iter().zip(&qd).map(|(a, b)| a - h * b).collect();
        let mdot = (inertia_matrix(&m, &qp) - inertia_matrix(&m, &qm)) / (2.0 * h);
        let c = coriolis_matrix(&m, &q, &qd);
        let s = &mdot - 2.0 * c;
        let skew_err = (&s + s.transpose()).amax();
        assert!(skew_err < 1e-9, "skew error {skew_err:e}");
    }
}

#[test]
fn coriolis_vanishes_at_rest() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = random_model(&mut rng, 3);
    let c = coriolis_matrix(&m, &[0.3, -0.2, 1.0], &[0.0; 3]);
    assert_eq!(c.amax(), 0.0);
}

#[test]
fn gravity_is_potential_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = 1e-6;
    for i in 0..300 {
        let n = 1 + i % 3;
        let m = random_model(&mut rng, n);
        let q = rvec(&mut rng, n, 3.0);
        let g = gravity_vector(&m, &q);
        for k in 0..n {
            let mut a = q.clone();
            let mut b = q.clone();
            a[k] += h;
            b[k] -= h;
            let fd = (potential_energy(&m, &a) - potential_energy(&m, &b)) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-8, "{} vs {}", fd, g[k]);
        }
    }
    let mut z = random_model(&mut rng, 3);
    z.gravity = 0.0;
    assert_eq!(gravity_vector(&z, &[0.1, 0.2, 0.3]), vec![0.0; 3]);
}

#[test]
fn jacobian_matches_wrist_velocity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = 1e-6;
    for i in 0..200 {
        let n = 1 + i % 3;
        let m = random_model(&mut rng, n);
        let q = rvec(&mut rng, n, 3.0);
        let qd = rvec(&mut rng, n, 2.0);
        let qp: Vec<f64> = q.iter().zip(&qd).map(|(a, b)| a + h * b).collect();
        let qm: Vec<f64> = q.iter().zip(&qd).map(|(a, b)| a - h * b).collect();
        let (a, b) = (wrist_position(&m, &qp), wrist_position(&m, &qm));
        let fd = [(a[0] - b[0]) / (2.0 * h), (a[1] - b[1]) / (2.0 * h)];
        let v = wrist_velocity(&m, &q, &qd);
        let scale = fd[0].hypot(fd[1]).max(1e-3);
        assert!(((v[0] - fd[0]).hypot(v[1] - fd[1])) / scale < 1e-6);
    }
    let zero = RobotModel::uniform(&[1.0, 1.0], &[0.0, 0.0], 9.81);
    assert_eq!(jacobian(&zero, &[0.3, 0.1]).amax(), 0.0);
}

#[test]
fn inverse_forward_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for i in 0..1000 {
        let n = 2 + i % 2;
        let m = random_model(&mut rng, n);
        let q = rvec(&mut rng, n, 3.0);
        let qd = rvec(&mut rng, n, 5.0);
        let tau = rvec(&mut rng, n, 20.0);
        let w = ExternalWrench::at_wrist([rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)]);
        let qdd = forward_dynamics(&m, &q, &qd, &tau, &w).unwrap();
        let back = inverse_dynamics(&m, &JointState { q, qd, qdd }, &w);
        for (a, b) in back.iter().zip(&tau) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }
}

#[test]
fn static_and_inertial_special_cases() {
    let m = RobotModel::builtin("robot_a").unwrap();
    let q = [0.2, 0.9, -0.4];
    let s = JointState::at_rest(&q);
    assert_eq!(inverse_dynamics(&m, &s, &ExternalWrench::default()), gravity_vector(&m, &q));
    let qdd = forward_dynamics(&m, &q, &[0.0; 3], &gravity_vector(&m, &q), &ExternalWrench::default()).unwrap();
    assert!(qdd.iter().all(|a| a.abs() < 1e-10));

    let mut zg = m.clone();
    zg.gravity = 0.0;
    let acc = [1.0, -2.0, 0.5];
    let st = JointState { q: q.to_vec(), qd: vec![0.0; 3], qdd: acc.to_vec() };
    let tau = inverse_dynamics(&zg, &st, &ExternalWrench::default());
    let expect = inertia_matrix(&zg, &q) * nalgebra::DVector::from_column_slice(&acc);
    for k in 0..3 {
        assert!((tau[k] - expect[k]).abs() < 1e-12);
    }

    let single = RobotModel::uniform(&[1.0], &[1.0], 9.81);
    let a = forward_dynamics(&single, &[std::f64::consts::FRAC_PI_2], &[0.0], &[0.0], &ExternalWrench::default()).unwrap();
    assert!(a[0].abs() < 1e-12);
}

#[test]
fn wrench_at_wrist_equals_default_point() {
    let m = RobotModel::builtin("robot_b").unwrap();
    let q = [0.1, 0.5, 0.4];
    let s = JointState::at_rest(&q);
    let tip = wrist_position(&m, &q);
    let a = inverse_dynamics(&m, &s, &ExternalWrench::at_wrist([1.0, 3.0]));
    let b = inverse_dynamics(&m, &s, &ExternalWrench { force: [1.0, 3.0], point: Some(tip) });
    assert_eq!(a, b);
}

#[test]
fn unforced_two_link_conserves_energy() {
    let m = RobotModel::uniform(&[1.0, 0.8], &[0.5, 0.4], 9.81);
    let mut q = vec![0.4, -0.3];
    let mut qd = vec![0.0, 0.0];
    let e0 = kinetic_energy(&m, &q, &qd) + potential_energy(&m, &q);
    let dt = 1e-4;
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let qdd = forward_dynamics(&m, &q, &qd, &[0.0, 0.0], &ExternalWrench::default()).unwrap();
        for k in 0..2 {
            qd[k] += dt * qdd[k];
            q[k] += dt * qd[k];
        }
        let e = kinetic_energy(&m, &q, &qd) + potential_energy(&m, &q);
        worst = worst.max((e - e0).abs());
    }
    assert!(worst < 0.01 * e0.abs(), "drift {worst} vs {e0}");
}

#[test]
fn singular_inertia_is_model_error() {
    let mut m = RobotModel::uniform(&[1.0, 1.0], &[0.0, 0.0], 9.81);
    for l in &mut m.links {
        l.inertia = 0.0;
    }
    let r = forward_dynamics(&m, &[0.0, 0.0], &[0.0, 0.0], &[1.0, 0.0], &ExternalWrench::default());
    assert!(matches!(r, Err(lap_core::Error::Model(_))));
    let _ = DMatrix::<f64>::zeros(1, 1);
}

proptest! {
    #[test]
    fn ballistic_without_gravity_is_linear(x in -5.0f64..5.0, z in -5.0f64..5.0, vx in -5.0f64..5.0, vz in -5.0f64..5.0, dt in 0.0f64..0.1) {
        let b = BoxState { pos: [x, z], vel: [vx, vz], half: [0.1, 0.1], mass: 0.5, contact: false };
        let s = ballistic_step(&b, dt, 0.0);
        prop_assert!((s.pos[0] - (x + vx * dt)).abs() < 1e-12);
        prop_assert!((s.pos[1] - (z + vz * dt)).abs() < 1e-12);
        prop_assert_eq!(s.vel, b.vel);
    }
}
