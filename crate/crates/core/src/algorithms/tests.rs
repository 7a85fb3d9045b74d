use super::*;
use crate::losses::QuadraticLoss;
use nalgebra::DMatrix;
use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ctx(round: usize, device: usize) -> SolveContext {
    SolveContext { seed: 5, round, device }
}

fn pv(v: &[f64]) -> ParamVector {
    ParamVector::from_vec(v.to_vec())
}

fn scalar(center: f64, s: f64) -> LocalObjective {
    LocalObjective::quadratic(QuadraticLoss::isotropic(pv(&[center]), s).unwrap())
}

fn random_quadratic(rng: &mut ChaCha8Rng, d: usize) -> LocalObjective {
    let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    let s = &a * a.transpose() + DMatrix::identity(d, d) * 0.3;
    let c = ParamVector::from_vec((0..d).map(|_| rng.random_range(-2.0..2.0)).collect());
    LocalObjective::quadratic(QuadraticLoss::new(c, s, 0.0).unwrap())
}

fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> ParamVector {
    ParamVector::from_vec((0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn exact() -> LocalSolverConfig {
    LocalSolverConfig::closed_form()
}

#[test]
fn feddyn_device_scalar_example() {
    let obj = scalar(1.0, 1.0);
    let state = DeviceState::new(&pv(&[0.0]));
    let out = feddyn_device_update(&state, &pv(&[0.0]), &obj, 1.0, &exact(), &ctx(1, 0)).unwrap();
    assert!((out.theta_k[0] - 0.5).abs() < 1e-15);
    assert!((out.grad_cache[0] + 0.5).abs() < 1e-15);
    assert_eq!(out.last_active_round, 1);
}

#[test]
fn feddyn_device_consensus_is_fixed() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let obj = random_quadratic(&mut rng, 5);
    let s = random_vec(&mut rng, 5);
    let mut state = DeviceState::new(&s);
    state.grad_cache = obj.gradient(&s).unwrap();
    let out = feddyn_device_update(&state, &s, &obj, 0.7, &exact(), &ctx(1, 0)).unwrap();
    assert!(out.theta_k.max_abs_diff(&s) < 1e-12);
}

#[test]
fn feddyn_device_large_alpha_stays_close() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let obj = random_quadratic(&mut rng, 6);
    let s = random_vec(&mut rng, 6);
    let state = DeviceState::new(&s);
    let alpha = 1e6;
    let out = feddyn_device_update(&state, &s, &obj, alpha, &exact(), &ctx(1, 0)).unwrap();
    let bound = obj.gradient(&s).unwrap().norm() / alpha;
    let moved = out.theta_k.sub(&s).norm();
    assert!(moved <= bound * (1.0 + 1e-9), "{moved} > {bound}");
    assert!(moved > 0.0);
}

#[test]
fn feddyn_server_consensus_is_fixed() {
    let server = ServerState::new(pv(&[0.3, -1.0]));
    let theta = server.theta.clone();
    let next = feddyn_server_update(&server, &[&theta, &theta, &theta], 3, 0.1);
    assert!(next.theta.max_abs_diff(&server.theta) < 1e-15);
    assert_eq!(next.h, server.h);
    assert_eq!(next.round, 1);
}

#[test]
fn feddyn_server_two_device_example() {
    let old = pv(&[1.0, 2.0]);
    let v = pv(&[0.5, -1.0]);
    let server = ServerState::new(old.clone());
    let returned = old.add(&v);
    let next = feddyn_server_update(&server, &[&returned], 2, 1.0);
    assert_eq!(next.h, v.scaled(-0.5));
    assert_eq!(next.theta, old.add(&v).add(&v.scaled(0.5)));
}

#[test]
fn feddyn_server_empty_round_is_noop() {
    let server = ServerState::new(pv(&[1.0]));
    let next = feddyn_server_update(&server, &[], 4, 1.0);
    assert_eq!(next.theta, server.theta);
    assert_eq!(next.h, server.h);
}

#[test]
fn feddyn_h_tracks_mean_cached_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let m = 6;
    let objs: Vec<_> = (0..m).map(|_| random_quadratic(&mut rng, 3)).collect();
    let alpha = 0.5;
    let mut server = ServerState::new(ParamVector::zeros(3));
    let mut devices = vec![DeviceState::new(&server.theta); m];
    for round in 1..=20 {
        let active: Vec<usize> = (0..m).filter(|_| rng.random_bool(0.4)).collect();
        let mut updates = Vec::new();
        for &k in &active {
            let u = feddyn_device_update(&devices[k], &server.theta, &objs[k], alpha, &exact(), &ctx(round, k)).unwrap();
            updates.push(u.theta_k.clone());
            devices[k] = u;
        }
        let refs: Vec<&ParamVector> = updates.iter().collect();
        server = feddyn_server_update(&server, &refs, m, alpha);
        let mean_cache = ParamVector::mean(devices.iter().map(|d| &d.grad_cache)).unwrap();
        let direct = ParamVector::mean(
            devices
                .iter()
                .zip(&objs)
                .filter(|(d, _)| d.last_active_round > 0)
                .map(|(d, o)| o.gradient(&d.theta_k).unwrap())
                .chain(devices.iter().filter(|d| d.last_active_round == 0).map(|_| ParamVector::zeros(3)))
                .collect::<Vec<_>>()
                .iter(),
        )
        .unwrap();
        assert!(server.h.max_abs_diff(&mean_cache) < 1e-10);
        assert!(server.h.max_abs_diff(&direct) < 1e-10);
    }
}

#[test]
fn onestep_scalar_example() {
    let obj = scalar(1.0, 1.0);
    let state = DeviceState::new(&pv(&[0.0]));
    let out = feddyn_onestep_device_update(&state, &pv(&[0.0]), &obj, 2.0, &ctx(1, 0)).unwrap();
    assert!((out.theta_k[0] - 0.5).abs() < 1e-15);
    assert!((out.h_k[0] + 1.0).abs() < 1e-15);
    assert_eq!(out.h_k, obj.gradient(&pv(&[0.0])).unwrap());
}

#[test]
fn onestep_zero_net_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let obj = random_quadratic(&mut rng, 4);
    let s = random_vec(&mut rng, 4);
    let mut state = DeviceState::new(&s);
    state.h_k = obj.gradient(&s).unwrap();
    let out = feddyn_onestep_device_update(&state, &s, &obj, 3.0, &ctx(1, 0)).unwrap();
    assert_eq!(out.theta_k, s);
}

#[test]
fn fedavg_single_full_step() {
    let obj = scalar(2.0, 3.0);
    let s = pv(&[0.5]);
    let solver = LocalSolverConfig::sgd(0.1, 1, 50);
    let out = fedavg_device_update(&DeviceState::new(&s), &s, &obj, &solver, &ctx(1, 0)).unwrap();
    let expected = 0.5 - 0.1 * 3.0 * (0.5 - 2.0);
    assert!((out.theta_k[0] - expected).abs() < 1e-15);
}

#[test]
fn fedprox_examples() {
    let obj = scalar(1.0, 1.0);
    let s = pv(&[0.0]);
    let state = DeviceState::new(&s);
    let prox = fedprox_device_update(&state, &s, &obj, 1.0, &exact(), &ctx(1, 0)).unwrap();
    assert!((prox.theta_k[0] - 0.5).abs() < 1e-15);

    let sgd = LocalSolverConfig::sgd(0.2, 3, 10);
    let a = fedprox_device_update(&state, &s, &obj, 0.0, &sgd, &ctx(2, 1)).unwrap();
    let b = fedavg_device_update(&state, &s, &obj, &sgd, &ctx(2, 1)).unwrap();
    assert_eq!(a, b);

    let mu = 1e9;
    let tight = fedprox_device_update(&state, &s, &obj, mu, &exact(), &ctx(1, 0)).unwrap();
    assert!(tight.theta_k.sub(&s).norm() <= obj.gradient(&s).unwrap().norm() / mu);
}

#[test]
fn scaffold_without_corrections_is_plain_sgd() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let obj = random_quadratic(&mut rng, 3);
    let s = random_vec(&mut rng, 3);
    let solver = LocalSolverConfig {
        steps: Some(7),
        ..LocalSolverConfig::sgd(0.05, 1, 10)
    };
    let state = DeviceState::new(&s);
    let sc = scaffold_device_update(&state, &s, &ParamVector::zeros(3), &obj, &solver, &ctx(1, 0)).unwrap();
    let avg = fedavg_device_update(&state, &s, &obj, &solver, &ctx(1, 0)).unwrap();
    assert_eq!(sc.state.theta_k, avg.theta_k);
}

#[test]
fn scaffold_one_step_control_is_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let obj = random_quadratic(&mut rng, 4);
    let s = random_vec(&mut rng, 4);
    let c = random_vec(&mut rng, 4);
    let mut state = DeviceState::new(&s);
    state.h_k = random_vec(&mut rng, 4);
    let lr = 0.03;
    let solver = LocalSolverConfig {
        steps: Some(1),
        ..LocalSolverConfig::sgd(lr, 1, 10)
    };
    let out = scaffold_device_update(&state, &s, &c, &obj, &solver, &ctx(1, 0)).unwrap();
    let g = obj.gradient(&s).unwrap();
    let mut expected = s.clone();
    expected.axpy(-lr, &g.sub(&state.h_k).add(&c));
    assert!(out.state.theta_k.max_abs_diff(&expected) < 1e-14);
    assert!(out.state.h_k.max_abs_diff(&g) < 1e-12);
    assert_eq!(out.delta_c.unwrap(), out.state.h_k.sub(&state.h_k));
}

#[test]
fn scaffold_server_control_is_mean_of_device_controls() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let m = 5;
    let objs: Vec<_> = (0..m).map(|_| random_quadratic(&mut rng, 3)).collect();
    let strategy = Scaffold {
        solver: LocalSolverConfig {
            steps: Some(4),
            ..LocalSolverConfig::sgd(0.05, 1, 10)
        },
    };
    let mut server = ServerState::new(ParamVector::zeros(3));
    let mut devices = vec![DeviceState::new(&server.theta); m];
    for round in 1..=3 {
        let updates: Vec<DeviceUpdate> = (0..m)
            .map(|k| strategy.device_update(&devices[k], &server, &objs[k], &ctx(round, k)).unwrap())
            .collect();
        let refs: Vec<&DeviceUpdate> = updates.iter().collect();
        server = strategy.server_update(&server, &refs, m);
        for (k, u) in updates.into_iter().enumerate() {
            devices[k] = u.state;
        }
        let mean_c = ParamVector::mean(devices.iter().map(|d| &d.h_k)).unwrap();
        assert!(server.h.max_abs_diff(&mean_c) < 1e-12);
    }
}

#[test]
fn comm_units_and_config_validation() {
    assert_eq!(AlgorithmKind::Scaffold.comm_units_per_round(), 2.0);
    for k in [AlgorithmKind::FedDyn, AlgorithmKind::FedDynOneStep, AlgorithmKind::FedAvg, AlgorithmKind::FedProx] {
        assert_eq!(k.comm_units_per_round(), 1.0);
    }
    let bad = AlgorithmConfig::new(AlgorithmKind::FedDyn, exact()).with_alpha(0.0);
    assert!(bad.validate().is_err());
    let fine = AlgorithmConfig::new(AlgorithmKind::FedAvg, exact()).with_alpha(0.0);
    assert!(fine.validate().is_ok());
    assert!(AlgorithmConfig::new(AlgorithmKind::Scaffold, exact()).validate().is_err());
    for k in AlgorithmKind::ALL {
        assert_eq!(k.name().parse::<AlgorithmKind>().unwrap(), k);
        let json = serde_json::to_string(&k).unwrap();
        assert_eq!(json, format!("\"{}\"", k.name()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn onestep_equals_single_gradient_step_feddyn(seed in any::<u64>(), alpha in 0.5f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let obj = random_quadratic(&mut rng, 4);
        let s = random_vec(&mut rng, 4);
        let mut state = DeviceState::new(&s);
        state.h_k = random_vec(&mut rng, 4);
        let one = feddyn_onestep_device_update(&state, &s, &obj, alpha, &ctx(1, 0)).unwrap();

        let mut dyn_state = state.clone();
        dyn_state.grad_cache = state.h_k.clone();
        let solver = LocalSolverConfig {
            gd_step: Some(1.0 / alpha),
            ..LocalSolverConfig::full_gd(1e-300, 1)
        };
        let full = feddyn_device_update(&dyn_state, &s, &obj, alpha, &solver, &ctx(1, 0)).unwrap();
        prop_assert!(one.theta_k.max_abs_diff(&full.theta_k) < 1e-12);
        prop_assert!(one.h_k.max_abs_diff(&full.grad_cache) < 1e-12);
    }

    #[test]
    fn feddyn_exact_cache_is_gradient(seed in any::<u64>(), alpha in 0.01f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let obj = random_quadratic(&mut rng, 5);
        let mut state = DeviceState::new(&ParamVector::zeros(5));
        let mut s = random_vec(&mut rng, 5);
        for round in 1..=4 {
            state = feddyn_device_update(&state, &s, &obj, alpha, &exact(), &ctx(round, 0)).unwrap();
            let g = obj.gradient(&state.theta_k).unwrap();
            prop_assert!(state.grad_cache.max_abs_diff(&g) < 1e-10 * (1.0 + g.norm()));
            s = random_vec(&mut rng, 5);
        }
    }
}
