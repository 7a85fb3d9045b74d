use super::*;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_shard(rng: &mut ChaCha8Rng, n: usize, p: usize, classes: usize) -> DataShard {
    let features = (0..n * p).map(|_| rng.random_range(-2.0..2.0)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    DataShard::new(features, p, labels).unwrap()
}

fn random_params(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> ParamVector {
    ParamVector::from_vec((0..d).map(|_| rng.random_range(-scale..scale)).collect())
}

/// Scalar-by-scalar softmax cross-entropy, written independently of the
/// model code: explicit loops, no shared helpers.
fn reference_logistic_loss(params: &[f64], shard: &DataShard, classes: usize, wd: f64) -> f64 {
    let p = shard.num_features();
    let mut total = 0.0;
    for i in 0..shard.len() {
        let x = shard.row(i);
        let mut z = vec![0.0; classes];
        for c in 0..classes {
            let mut s = params[classes * p + c];
            for j in 0..p {
                s += params[c * p + j] * x[j];
            }
            z[c] = s;
        }
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        total += -(z[shard.label(i)].exp() / denom).ln();
    }
    let reg: f64 = params.iter().map(|v| v * v).sum();
    total / shard.len() as f64 + 0.5 * wd * reg
}

#[test]
fn quadratic_is_zero_at_its_minimizer() {
    let q = QuadraticLoss::isotropic(ParamVector::zeros(3), 1.0).unwrap();
    let model = LossModel::Quadratic(q);
    let v = model.loss_value(&ParamVector::zeros(3), &DataShard::empty(0)).unwrap();
    assert_eq!(v, 0.0);
}

#[test]
fn quadratic_gradient_is_theta_minus_center() {
    let q = QuadraticLoss::isotropic(ParamVector::from_vec(vec![1.0, 2.0]), 1.0).unwrap();
    let model = LossModel::Quadratic(q);
    let g = model.loss_gradient(&ParamVector::zeros(2), &DataShard::empty(0)).unwrap();
    assert_eq!(g.as_slice(), &[-1.0, -2.0]);
}

#[test]
fn logistic_uniform_softmax_gives_ln2() {
    let model = LossModel::Logistic(LogisticModel::new(1, 2, 0.0));
    let shard = DataShard::new(vec![0.7], 1, vec![1]).unwrap();
    let v = model.loss_value(&ParamVector::zeros(model.dim()), &shard).unwrap();
    assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn logistic_matches_scalar_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = LossModel::Logistic(LogisticModel::new(2, 3, 1e-4));
    let shard = random_shard(&mut rng, 5, 2, 3);
    let params = random_params(&mut rng, model.dim(), 1.0);
    let got = model.loss_value(&params, &shard).unwrap();
    let want = reference_logistic_loss(params.as_slice(), &shard, 3, 1e-4);
    assert!((got - want).abs() < 1e-13, "{got} vs {want}");
}

#[test]
fn dimension_formulas() {
    assert_eq!(LogisticModel::new(30, 5, 0.0).dim(), 155);
    assert_eq!(MlpModel::new(3, 4, 2, 0.0).dim(), 4 * 3 + 4 + 2 * 4 + 2);
}

#[test]
fn duplicated_shard_gives_identical_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = LossModel::Logistic(LogisticModel::new(4, 3, 1e-4));
    let shard = random_shard(&mut rng, 6, 4, 3);
    let doubled_rows: Vec<usize> = (0..6).flat_map(|i| [i, i]).collect();
    let doubled = shard.select(&doubled_rows);
    let params = random_params(&mut rng, model.dim(), 0.5);
    let a = model.loss_gradient(&params, &shard).unwrap();
    let b = model.loss_gradient(&params, &doubled).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-15);
}

#[test]
fn mlp_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = LossModel::Mlp(MlpModel::new(3, 4, 2, 1e-4));
    let shard = random_shard(&mut rng, 8, 3, 2);
    let params = model.init_params(9);
    let err = fd_gradient_check(&model, &params, &shard, 1e-6).unwrap();
    assert!(err <= 1e-5, "max relative error {err}");
}

#[test]
fn fd_check_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let s = {
        let a = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose()
    };
    let quad = LossModel::Quadratic(
        QuadraticLoss::new(random_params(&mut rng, 4, 1.0), s, 0.0).unwrap(),
    );
    let theta = random_params(&mut rng, 4, 1.0);
    assert!(fd_gradient_check(&quad, &theta, &DataShard::empty(0), 1e-4).unwrap() <= 1e-9);

    let logistic = LossModel::Logistic(LogisticModel::new(3, 4, 1e-4));
    let shard = random_shard(&mut rng, 10, 3, 4);
    let theta = random_params(&mut rng, logistic.dim(), 1.0);
    assert!(fd_gradient_check(&logistic, &theta, &shard, 1e-6).unwrap() <= 1e-5);

    assert!(fd_gradient_check(&logistic, &theta, &shard, 0.0).is_err());
}

#[test]
fn error_paths() {
    let logistic = LossModel::Logistic(LogisticModel::new(2, 3, 0.0));
    let shard = DataShard::new(vec![0.0, 1.0], 2, vec![1]).unwrap();
    assert!(matches!(
        logistic.loss_value(&ParamVector::zeros(4), &shard),
        Err(FedError::DimensionMismatch { expected: 9, got: 4 })
    ));
    assert!(matches!(
        logistic.loss_value(&ParamVector::zeros(9), &DataShard::empty(2)),
        Err(FedError::EmptyShard(_))
    ));
    let bad = DataShard::new(vec![0.0, 1.0], 2, vec![3]).unwrap();
    assert!(matches!(
        logistic.loss_gradient(&ParamVector::zeros(9), &bad),
        Err(FedError::LabelOutOfRange { label: 3, classes: 3 })
    ));
    assert!(DataShard::new(vec![0.0; 3], 2, vec![0]).is_err());
    assert!(DataShard::new(vec![f64::NAN, 0.0], 2, vec![0]).is_err());
}

#[test]
fn argmax_breaks_ties_toward_smallest_index() {
    assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    assert_eq!(argmax(&[0.0, 0.0]), 0);
}

#[test]
fn eigen_bounds_match_dense_eigensolver() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..5 {
        let a = DMatrix::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0));
        let s = &a * a.transpose() + DMatrix::identity(6, 6) * 0.1;
        let (lo, hi) = symmetric_eigen_bounds(&s);
        let eig = s.clone().symmetric_eigen().eigenvalues;
        assert!((hi - eig.max()).abs() < 1e-6 * eig.max(), "{hi} vs {}", eig.max());
        assert!((lo - eig.min()).abs() < 1e-6 * eig.max(), "{lo} vs {}", eig.min());
    }
}

#[test]
fn quadratic_rejects_indefinite_scale() {
    let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
    assert!(QuadraticLoss::new(ParamVector::zeros(2), s, 0.0).is_err());
}

#[test]
fn mlp_init_is_seeded_and_bounded() {
    let m = LossModel::Mlp(MlpModel::new(9, 4, 3, 0.0));
    let a = m.init_params(1);
    assert_eq!(a, m.init_params(1));
    assert_ne!(a, m.init_params(2));
    assert!(a.as_slice()[..36].iter().all(|v| v.abs() < 1.0 / 3.0));
}

fn model_of_kind(kind: u8, rng: &mut ChaCha8Rng) -> (LossModel, DataShard) {
    match kind {
        0 => {
            let a = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
            let q = QuadraticLoss::new(random_params(rng, 3, 1.0), &a * a.transpose(), 0.01).unwrap();
            (LossModel::Quadratic(q), DataShard::empty(0))
        }
        1 => (LossModel::Logistic(LogisticModel::new(3, 3, 1e-4)), random_shard(rng, 7, 3, 3)),
        _ => (LossModel::Mlp(MlpModel::new(3, 5, 3, 1e-4)), random_shard(rng, 7, 3, 3)),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn first_order_taylor_error_shrinks(kind in 0u8..3, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (model, shard) = model_of_kind(kind, &mut rng);
        let theta = if kind == 2 { model.init_params(seed) } else { random_params(&mut rng, model.dim(), 1.0) };
        let dir = random_params(&mut rng, model.dim(), 1.0);
        let grad = model.loss_gradient(&theta, &shard).unwrap();
        let slope = grad.dot(&dir);
        let base = model.loss_value(&theta, &shard).unwrap();
        let err = |t: f64| {
            let mut moved = theta.clone();
            moved.axpy(t, &dir);
            (model.loss_value(&moved, &shard).unwrap() - base - t * slope).abs()
        };
        let (e4, e5) = (err(1e-4), err(1e-5));
        // Second-order remainder: error drops ~100x per decade unless already at roundoff.
        prop_assert!(e5 <= e4 * 0.2 + 1e-13, "e4={e4:e} e5={e5:e}");
        prop_assert!(e4 <= 1e-4 * slope.abs() + 1e-6);
    }

    #[test]
    fn quadratic_gradient_is_lipschitz(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
        let wd = rng.random_range(0.0..0.5);
        let q = QuadraticLoss::new(random_params(&mut rng, 4, 1.0), &a * a.transpose(), wd).unwrap();
        let l = q.smoothness();
        let x = random_params(&mut rng, 4, 3.0);
        let y = random_params(&mut rng, 4, 3.0);
        let lhs = q.gradient(&x).sub(&q.gradient(&y)).norm();
        prop_assert!(lhs <= l * x.sub(&y).norm() * (1.0 + 1e-9) + 1e-12);
    }

    #[test]
    fn weight_decay_only_gradient_is_exact(seed in 0u64..1000, wd in 0.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = QuadraticLoss::new(ParamVector::zeros(5), DMatrix::zeros(5, 5), wd).unwrap();
        let theta = random_params(&mut rng, 5, 10.0);
        let g = LossModel::Quadratic(q).loss_gradient(&theta, &DataShard::empty(0)).unwrap();
        prop_assert_eq!(g, theta.scaled(wd));
    }

    #[test]
    fn logistic_gradient_is_label_permutation_equivariant(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, classes) = (3, 4);
        let model = LossModel::Logistic(LogisticModel::new(p, classes, 1e-4));
        let shard = random_shard(&mut rng, 9, p, classes);
        let theta = random_params(&mut rng, model.dim(), 1.0);
        // perm maps old class -> new class
        let perm = [2usize, 0, 3, 1];
        let relabeled = DataShard::new(
            shard.features().to_vec(), p, shard.labels().iter().map(|&y| perm[y]).collect(),
        ).unwrap();
        let mut permuted = vec![0.0; model.dim()];
        for c in 0..classes {
            let n = perm[c];
            permuted[n * p..(n + 1) * p].copy_from_slice(&theta.as_slice()[c * p..(c + 1) * p]);
            permuted[classes * p + n] = theta[classes * p + c];
        }
        let g = model.loss_gradient(&theta, &shard).unwrap();
        let gp = model.loss_gradient(&ParamVector::from_vec(permuted), &relabeled).unwrap();
        for c in 0..classes {
            let n = perm[c];
            for j in 0..p {
                prop_assert!((g[c * p + j] - gp[n * p + j]).abs() < 1e-14);
            }
            prop_assert!((g[classes * p + c] - gp[classes * p + n]).abs() < 1e-14);
        }
    }
}
