use approx::assert_abs_diff_eq;
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdpd::likelihood::{g_traces, GOperator, Likelihood, Mask};
use sdpd::oracle::{dense_check, fd_gradient, random_instance, random_theta, DenseModel};
use sdpd::panel::{Dims, ParamVector};

fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / (1.0 + y.abs()))
        .fold(0.0, f64::max)
}

#[test]
fn score_matches_finite_differences() {
    let dims = Dims::new(1, 1, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..20 {
        let (data, seq) = random_instance(6, 4, dims, seed).unwrap();
        let lik = Likelihood::new(&data, &seq).unwrap();
        let theta = random_theta(dims, &mut rng);
        let nt = data.nt() as f64;
        let fd = fd_gradient(
            |x| lik.loglik(&ParamVector::unpack(x, dims)?),
            &theta.pack(),
            1e-6,
        )
        .unwrap()
            / nt;
        let an = lik.score(&theta).unwrap();
        let err = rel_err(&an, &fd);
        assert!(err < 1e-6, "seed {seed}: {err:e}\n{an}\n{fd}");
    }
}

#[test]
fn score_matches_finite_differences_multivariate() {
    let dims = Dims::new(2, 2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for seed in 0..5 {
        let (data, seq) = random_instance(5, 3, dims, 100 + seed).unwrap();
        let lik = Likelihood::new(&data, &seq).unwrap();
        let theta = random_theta(dims, &mut rng);
        let fd = fd_gradient(|x| lik.loglik(&ParamVector::unpack(x, dims)?), &theta.pack(), 1e-6).unwrap()
            / data.nt() as f64;
        let err = rel_err(&lik.score(&theta).unwrap(), &fd);
        assert!(err < 1e-6, "seed {seed}: {err:e}");
    }
}

#[test]
fn blockwise_equals_dense() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for (n, t) in [(2, 2), (3, 3), (4, 3), (5, 4), (8, 4), (16, 4), (21, 3), (32, 2)] {
        for dims in [Dims::new(1, 1, 1), Dims::new(2, 1, 2)] {
            let (data, seq) = random_instance(n, t, dims, (n * 10 + t) as u64).unwrap();
            let mut theta = random_theta(dims, &mut rng);
            let rep = dense_check(&data, &seq, &theta).unwrap();
            assert!(rep.log_det < 1e-10 && rep.masked_traces < 1e-10 && rep.loglik < 1e-10, "{n}x{t}: {rep:?}");
            assert!(rep.score < 1e-6, "{n}x{t}: {rep:?}");
            theta.delta.fill(0.0);
            let rep = dense_check(&data, &seq, &theta).unwrap();
            assert!(rep.information < 1e-10, "{n}x{t}: {rep:?}");
        }
    }
}

#[test]
fn null_point_traces_have_closed_forms() {
    let dims = Dims::new(1, 1, 1);
    for (n, t) in [(2, 2), (4, 3), (6, 4)] {
        let (_, seq) = random_instance(n, t, dims, 3).unwrap();
        let tr = g_traces([0.0; 3], &seq).unwrap();
        let (nf, tf) = (n as f64, t as f64);
        assert_abs_diff_eq!(tr.get(GOperator::G2, Mask::TimeMean), (tf - 1.0) * (nf - 1.0) / tf, epsilon = 1e-12);
        assert_abs_diff_eq!(tr.get(GOperator::G1, Mask::UnitMean), tf, epsilon = 1e-12);
        assert_abs_diff_eq!(tr.get(GOperator::G1, Mask::Identity), 0.0, epsilon = 1e-12);
        // row-normalized W: tr(W_1L J_L) = -(T - 1)
        assert_abs_diff_eq!(tr.get(GOperator::G1, Mask::Within), -(tf - 1.0), epsilon = 1e-12);
        let dense = DenseModel::new(&seq, [0.0; 3]).unwrap();
        assert_abs_diff_eq!(dense.g[1].clone(), dense.w2.clone(), epsilon = 0.0);
        assert_abs_diff_eq!((&dense.w1 * &dense.j).trace(), -(tf - 1.0), epsilon = 1e-12);
    }
}
