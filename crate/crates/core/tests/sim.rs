use lap_core::dynamics::{forward_dynamics, gravity_vector, inverse_dynamics, wrist_position, ExternalWrench, JointState, RobotModel};
use lap_core::sim::*;
use lap_core::Error;

fn robot_a() -> RobotModel {
    RobotModel::builtin("robot_a").unwrap()
}

fn nominal_throw(model: &RobotModel) -> ThrowSpec {
    sample_throws(model, &ThrowConfig { aim_noise: 0.0, ..Default::default() }, &BoxProfile::builtin("A").unwrap(), 1, 4)[0].clone()
}

/// Env with the box placed at rest on the wrist point of the ready pose.
fn resting(model: &RobotModel, cfg: &EnvConfig) -> Env {
    let mut env = Env::reset(model, cfg, &nominal_throw(model)).unwrap();
    let tip = wrist_position(model, &model.ready);
    let b = &mut env.state.box_state;
    b.pos = [tip[0], tip[1] + b.half[1] - b.mass * model.gravity / cfg.stiffness];
    b.vel = [0.0, 0.0];
    env
}

/// Computed torque around the ready pose with the contact load fed forward.
fn hold_ready(m: &RobotModel, obs: &Observation) -> Vec<f64> {
    let qdd = (0..3).map(|i| 400.0 * (m.ready[i] - obs.q[i]) - 40.0 * obs.qd[i]).collect();
    let s = JointState { q: obs.q.clone(), qd: obs.qd.clone(), qdd };
    inverse_dynamics(m, &s, &ExternalWrench::at_wrist(obs.force))
}

#[test]
fn ready_pose_and_reset() {
    let m = robot_a();
    m.validate().unwrap();
    for (i, q) in m.ready.iter().enumerate() {
        assert!(*q >= m.joints[i].lower && *q <= m.joints[i].upper);
    }
    let t = nominal_throw(&m);
    let a = Env::reset(&m, &EnvConfig::default(), &t).unwrap();
    let b = Env::reset(&m, &EnvConfig::default(), &t).unwrap();
    assert_eq!(a.state, b.state);
    assert_eq!(a.state.time, 0.0);
    assert_eq!(a.state.box_state.pos, t.release);

    let mut inside = t.clone();
    inside.release = [0.3, m.base_height];
    assert!(matches!(Env::reset(&m, &EnvConfig::default(), &inside), Err(Error::Validation(_))));
}

/// Brute-force sweep at a finer step than the library uses.
fn reachable_oracle(m: &RobotModel, t: &ThrowSpec) -> bool {
    let (l1, l2, l3) = (m.links[0].length, m.links[1].length, m.links[2].length);
    let q2 = m.joints[1].upper.min(std::f64::consts::PI);
    let r_min = (l1 * l1 + l2 * l2 + 2.0 * l1 * l2 * q2.cos()).sqrt();
    let r_max = l1 + l2 + l3;
    let h = t.profile.half()[1];
    (0..30_000).map(|k| k as f64 * 1e-4).any(|s| {
        let z = t.release[1] - h + t.velocity[1] * s - 0.5 * m.gravity * s * s;
        let x = t.release[0] + t.velocity[0] * s;
        let z_before = t.release[1] - h + t.velocity[1] * (s - 1e-4).max(0.0) - 0.5 * m.gravity * (s - 1e-4).max(0.0).powi(2);
        let d = x.hypot(z - m.base_height);
        z_before >= 0.0 && z >= 0.0 && d >= r_min && d <= r_max
    })
}

#[test]
fn default_throws_are_mostly_reachable() {
    let m = robot_a();
    let mut hits = 0;
    let mut total = 0;
    for (i, p) in BoxProfile::all().iter().enumerate() {
        let n = if i == 0 { 334 } else { 333 };
        for t in sample_throws(&m, &ThrowConfig::default(), p, n, 100 + i as u64) {
            let r = reachable_oracle(&m, &t);
            hits += r as usize;
            total += 1;
        }
    }
    assert_eq!(total, 1000);
    assert!(hits >= 950, "{hits}/1000 reachable");
}

#[test]
fn throw_file_round_trip() {
    let m = robot_a();
    let throws = sample_throws(&m, &ThrowConfig::default(), &BoxProfile::builtin("B").unwrap(), 5, 1);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("throws.json");
    save_throws(&p, &throws).unwrap();
    assert_eq!(load_throws(&p).unwrap(), throws);
    std::fs::write(&p, serde_json::to_string(&throws).unwrap()).unwrap();
    assert_eq!(load_throws(&p).unwrap(), throws);
}

#[test]
fn gravity_compensation_holds_the_arm() {
    let m = robot_a();
    let mut env = Env::reset(&m, &EnvConfig::default(), &nominal_throw(&m)).unwrap();
    let q0 = env.state.joint.q.clone();
    for _ in 0..20 {
        let tau = gravity_vector(&m, &env.state.joint.q);
        env.step(&tau).unwrap();
    }
    assert!(env.state.box_state.contact == false);
    for i in 0..3 {
        assert!((env.state.joint.q[i] - q0[i]).abs() < 1e-9);
        assert!(env.state.joint.qd[i].abs() < 1e-9);
    }
}

#[test]
fn resting_box_loads_its_weight() {
    let m = robot_a();
    let cfg = EnvConfig::default();
    let mut env = resting(&m, &cfg);
    for _ in 0..150 {
        let obs = env.observe();
        env.step(&hold_ready(&m, &obs)).unwrap();
    }
    let w = env.state.box_state.mass * m.gravity;
    let f = env.state.contact.force;
    assert!((f[1] - w).abs() < 0.02 * w, "normal {} vs weight {w}", f[1]);
    assert!(env.state.box_state.contact);
}

#[test]
fn model_based_holds_a_resting_box() {
    let m = robot_a();
    let cfg = EnvConfig::default();
    let mut env = resting(&m, &cfg);
    let mut policy = ModelBasedPolicy::new(ModelBasedConfig::default());
    policy.reset(&m, &nominal_throw(&m), 0).unwrap();
    let start = env.state.joint.q.clone();
    for _ in 0..cfg.ticks() {
        let tau = policy.control(&m, &env.observe()).unwrap();
        env.step(&tau).unwrap();
    }
    let r = env.result();
    assert!(r.success);
    let target = policy.target().map(|t| t.to_vec());
    let q = &env.state.joint.q;
    let reference = target.unwrap_or(start);
    for i in 0..3 {
        assert!((q[i] - reference[i]).abs() < 0.02);
    }
}

#[test]
fn impact_impulse_matches_momentum_change() {
    let m = robot_a();
    let cfg = EnvConfig { control_dt: 1e-3, ..Default::default() };
    let mut env = resting(&m, &cfg);
    env.state.box_state.pos[1] += 0.3;
    let mass = env.state.box_state.mass;
    let (mut impulse, mut v_before, mut v_after, mut started, mut ended) = (0.0, 0.0, 0.0, false, false);
    for _ in 0..600 {
        let vz = env.state.box_state.vel[1];
        env.step(&hold_ready(&m, &env.observe())).unwrap();
        let f = env.state.contact.force[1];
        if f != 0.0 && !started {
            started = true;
            v_before = vz;
        }
        if started && !ended {
            impulse += (f - mass * m.gravity) * cfg.physics_dt;
            v_after = env.state.box_state.vel[1];
            if env.state.joint.qd.iter().all(|v| v.abs() < 1e-3) && env.state.box_state.vel[1].abs() < 1e-3 {
                ended = true;
            }
        }
    }
    assert!(started && v_before < -1.0);
    let dp = mass * (v_after - v_before);
    assert!((impulse - dp).abs() < 0.05 * dp.abs(), "impulse {impulse} vs Δp {dp}");
}

#[test]
fn contact_forces_are_equal_and_opposite() {
    let m = robot_a();
    let cfg = EnvConfig { control_dt: 1e-3, ..Default::default() };
    let mut env = resting(&m, &cfg);
    env.state.box_state.vel = [0.4, -1.5];
    for _ in 0..200 {
        let q = env.state.joint.q.clone();
        let qd = env.state.joint.qd.clone();
        let b = env.state.box_state.clone();
        let tau = gravity_vector(&m, &q);
        env.step(&tau).unwrap();
        let c = contact_force(wrist_position(&m, &q), lap_core::dynamics::wrist_velocity(&m, &q, &qd), &b, &cfg);
        // box: m Δv = dt (F − m g ẑ)
        let dv = [env.state.box_state.vel[0] - b.vel[0], env.state.box_state.vel[1] - b.vel[1]];
        assert!((b.mass * dv[0] - cfg.physics_dt * c.force[0]).abs() < 1e-12);
        assert!((b.mass * dv[1] - cfg.physics_dt * (c.force[1] - b.mass * m.gravity)).abs() < 1e-12);
        // arm: M q̈ = τ − C q̇ − G − JᵀF, so the arm feels −F
        let qdd_free = forward_dynamics(&m, &q, &qd, &tau, &ExternalWrench::default()).unwrap();
        let qdd_neg = forward_dynamics(&m, &q, &qd, &tau, &ExternalWrench::at_wrist([-c.force[0], -c.force[1]])).unwrap();
        for i in 0..3 {
            let mid = 0.5 * (env.state.joint.qdd[i] + qdd_neg[i]);
            assert!((mid - qdd_free[i]).abs() < 1e-9 * (1.0 + qdd_free[i].abs()));
        }
    }
}

#[test]
fn energy_conserved_without_contact_or_torque() {
    let mut m = robot_a();
    for j in &mut m.joints {
        j.lower = -100.0;
        j.upper = 100.0;
    }
    m.ready = vec![0.3, -0.4, 0.2];
    let cfg = EnvConfig { contact_enabled: false, ..Default::default() };
    let t = ThrowSpec { release: [3.0, 30.0], velocity: [-1.0, 0.5], profile: BoxProfile::builtin("A").unwrap() };
    let mut env = Env::reset(&m, &cfg, &t).unwrap();
    let e0 = env.mechanical_energy();
    let arm0 = lap_core::dynamics::potential_energy(&m, &env.state.joint.q);
    for _ in 0..100 {
        env.step(&[0.0; 3]).unwrap();
    }
    let e1 = env.mechanical_energy();
    assert!((e1 - e0).abs() < 0.01 * e0.abs(), "{e0} -> {e1}");
    let s = &env.state.joint;
    let arm1 = lap_core::dynamics::potential_energy(&m, &s.q) + lap_core::dynamics::kinetic_energy(&m, &s.q, &s.qd);
    assert!((arm1 - arm0).abs() < 0.01 * arm0.abs().max(1.0), "arm {arm0} -> {arm1}");
    assert_eq!(env.state.energy, 0.0);
}

#[test]
fn energy_metric() {
    assert_eq!(energy(&vec![vec![0.0, 0.0]; 5], &vec![vec![0.0, 0.0]; 5], 0.01), 0.0);
    let tau = vec![vec![1.0]; 200];
    let qd = vec![vec![1.0]; 200];
    assert!((energy(&tau, &qd, 0.01) - 2.0).abs() < 1e-12);
    let rev: Vec<Vec<f64>> = qd.iter().map(|v| vec![-v[0]]).collect();
    assert_eq!(energy(&tau, &qd, 0.01), energy(&tau, &rev, 0.01));
}

#[test]
fn episode_time_and_energy_are_monotone() {
    let m = robot_a();
    let t = nominal_throw(&m);
    let mut p = ModelBasedPolicy::new(ModelBasedConfig::default());
    let r = run_episode(&m, &EnvConfig::default(), &t, &mut p, 0).unwrap();
    assert!(r.log.windows(2).all(|w| w[1].t > w[0].t && w[1].energy >= w[0].energy));
    assert!(r.log[0].energy >= 0.0);
    assert_eq!(r.energy, r.log.last().unwrap().energy);
    if r.success {
        assert!(r.log.iter().any(|s| s.contact));
    }
}

fn record(t: f64, contact: bool, box_vel: [f64; 2], z: f64) -> StepRecord {
    StepRecord { t, q: robot_a().ready.clone(), qd: vec![0.0; 3], tau: vec![0.0; 3], box_pos: [0.5, z], box_vel, contact, force: [0.0; 2], energy: 0.0 }
}

#[test]
fn catch_criterion() {
    let m = robot_a();
    let cfg = EnvConfig::default();
    let never: Vec<_> = (0..200).map(|k| record(k as f64 * 0.01, false, [0.0; 2], 1.0)).collect();
    assert!(!is_caught(&m, &cfg, &never, false));
    let bounce: Vec<_> = (0..200).map(|k| record(k as f64 * 0.01, (100..104).contains(&k), [0.0; 2], 1.0)).collect();
    assert!(!is_caught(&m, &cfg, &bounce, false));
    let held: Vec<_> = (0..200).map(|k| record(k as f64 * 0.01, k >= 100, [0.0; 2], 1.0)).collect();
    assert!(is_caught(&m, &cfg, &held, false));
    assert!(!is_caught(&m, &cfg, &held, true));
    let short: Vec<_> = (0..200).map(|k| record(k as f64 * 0.01, k >= 175, [0.0; 2], 1.0)).collect();
    assert!(!is_caught(&m, &cfg, &short, false));
    let sliding: Vec<_> = (0..200).map(|k| record(k as f64 * 0.01, k >= 100, [0.2, 0.0], 1.0)).collect();
    assert!(!is_caught(&m, &cfg, &sliding, false));
    assert!(!is_caught(&m, &cfg, &[], false));
}

#[test]
fn model_based_catches_nominal_throws() {
    let m = robot_a();
    let throws = sample_throws(&m, &ThrowConfig::default(), &BoxProfile::builtin("A").unwrap(), 30, 7);
    let (rows, _) = evaluate("model-based", &m, &EnvConfig::default(), &throws, || Ok(Box::new(ModelBasedPolicy::new(ModelBasedConfig::default())) as Box<dyn Policy>), 0, 1).unwrap();
    let s = &summarize(&rows)[0];
    assert!(s.trials >= 28);
    assert!(s.successes + 2 >= s.trials, "{}/{} (excluded {})", s.successes, s.trials, s.excluded);
}

#[test]
fn demonstrator_is_gentler_than_model_based() {
    let m = robot_a();
    let demos = synth_demos(12, &m, &DemoConfig::default(), 21).unwrap();
    let throws: Vec<ThrowSpec> = demos.iter().map(|d| d.truth.throw.clone()).collect();
    let (rows, _) = evaluate("model-based", &m, &EnvConfig::default(), &throws, || Ok(Box::new(ModelBasedPolicy::new(ModelBasedConfig::default())) as Box<dyn Policy>), 0, 1).unwrap();
    let mut demo = 0.0;
    let mut mb = 0.0;
    let mut n = 0;
    for (d, r) in demos.iter().zip(&rows) {
        if r.excluded_reason.is_empty() {
            demo += d.truth.energy;
            mb += r.energy_j;
            n += 1;
        }
    }
    assert!(n >= 8);
    assert!(demo < mb, "demo {demo} vs model-based {mb}");
}

#[test]
fn zero_demos_is_a_contract_error() {
    assert!(matches!(synth_demos(0, &robot_a(), &DemoConfig::default(), 1), Err(Error::Contract(_))));
}

/// Re-integrates the demonstrator's torques with explicit Euler at the
/// frame rate and the box force from its second difference.
#[test]
fn demo_torques_reproduce_the_motion() {
    let m = robot_a();
    for d in synth_demos(4, &m, &DemoConfig::default(), 9).unwrap() {
        let t = &d.truth;
        let mass = t.throw.profile.mass;
        let mut q = t.q[0].clone();
        let mut qd = t.qd[0].clone();
        for k in 0..t.q.len() - 2 {
            let w = if t.contact[k] {
                let a: Vec<f64> = (0..2).map(|i| (t.box_pos[k + 2][i] - 2.0 * t.box_pos[k + 1][i] + t.box_pos[k][i]) / (t.dt * t.dt)).collect();
                ExternalWrench::at_wrist([mass * a[0], mass * (a[1] + m.gravity)])
            } else {
                ExternalWrench::default()
            };
            let qdd = forward_dynamics(&m, &q, &qd, &t.tau[k], &w).unwrap();
            for i in 0..3 {
                q[i] += t.dt * qd[i];
                qd[i] += t.dt * qdd[i];
            }
            for i in 0..3 {
                assert!((q[i] - t.q[k + 1][i]).abs() < 1e-6, "k {k} joint {i}");
            }
        }
        let e = energy(&t.tau, &t.qd, t.dt);
        assert!((e - t.energy).abs() < 1e-9);
    }
}

#[test]
fn summary_shape_and_determinism() {
    let m = robot_a();
    let mut rows = Vec::new();
    for (i, p) in BoxProfile::all().iter().enumerate() {
        let throws = sample_throws(&m, &ThrowConfig::default(), p, 3, i as u64);
        for method in ["model-based", "stiff"] {
            let (r, _) = evaluate(method, &m, &EnvConfig::default(), &throws, || Ok(Box::new(ModelBasedPolicy::new(ModelBasedConfig::default())) as Box<dyn Policy>), 5, 2).unwrap();
            rows.extend(r);
        }
    }
    let summary = summarize(&rows);
    assert_eq!(summary.len(), 2 * 3);
    let csv = summary_csv(&summary);
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.starts_with("method,box,success,trials,excluded,mean_energy_J\n"));

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("results.csv");
    write_results(&p, &rows).unwrap();
    let back = read_results(&p).unwrap();
    assert_eq!(back.len(), rows.len());
    assert_eq!(summary_csv(&summarize(&back)), csv);

    let throws = sample_throws(&m, &ThrowConfig::default(), &BoxProfile::builtin("C").unwrap(), 4, 3);
    let make = || Ok(Box::new(ModelBasedPolicy::new(ModelBasedConfig::default())) as Box<dyn Policy>);
    let (a, ra) = evaluate("mb", &m, &EnvConfig::default(), &throws, make, 1, 1).unwrap();
    let (b, rb) = evaluate("mb", &m, &EnvConfig::default(), &throws, make, 1, 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
}
