use sdpd::montecarlo::{run_cell, simulate_panel, write_results_csv, McConfig};
use sdpd::score_tests::TestName;

fn config(delta0: f64, reps: usize) -> McConfig {
    McConfig {
        n: 36,
        periods: 10,
        reps,
        lambda0: 0.05,
        delta0,
        seed: 23,
        tests: vec![TestName::RsRobust],
        ..McConfig::default()
    }
}

#[test]
fn disturbance_correlation_matches_delta() {
    for delta0 in [0.0, 0.3, 0.7] {
        let cfg = McConfig {
            n: 100,
            periods: 20,
            ..config(delta0, 1)
        };
        let sim = simulate_panel(&cfg, 0).unwrap();
        let m = (cfg.n * cfg.periods) as f64;
        let (v, e) = (&sim.v, &sim.eps);
        let (mv, me) = (v.mean(), e.mean());
        let cov = v.iter().zip(e.iter()).map(|(a, b)| (a - mv) * (b - me)).sum::<f64>() / m;
        let sd = |x: &nalgebra::DMatrix<f64>, mu: f64| (x.iter().map(|a| (a - mu).powi(2)).sum::<f64>() / m).sqrt();
        let corr = cov / (sd(v, mv) * sd(e, me));
        assert!((corr - delta0).abs() < 3.0 / m.sqrt(), "delta0 {delta0}: corr {corr}");
    }
}

#[test]
fn power_increases_with_endogeneity() {
    let rates: Vec<f64> = [0.0, 0.1, 0.2]
        .iter()
        .map(|&d| run_cell(&config(d, 100)).unwrap().get(TestName::RsRobust).unwrap().rejection_rate)
        .collect();
    assert!(rates[0] < rates[1] && rates[1] < rates[2], "{rates:?}");
    assert!(rates[2] > 0.9, "{rates:?}");
}

#[test]
fn robust_test_is_calibrated_under_the_null() {
    let cfg = McConfig {
        lambda0: 0.0,
        ..config(0.0, 400)
    };
    let res = run_cell(&cfg).unwrap();
    let s = res.get(TestName::RsRobust).unwrap();
    assert!(s.is_valid());
    assert!((0.02..=0.08).contains(&s.rejection_rate), "{}", s.rejection_rate);
}

#[test]
fn cell_results_do_not_depend_on_scheduling() {
    let cfg = config(0.1, 16);
    let a = run_cell(&cfg).unwrap();
    let b = rayon::ThreadPoolBuilder::new()
        .num_threads(3)
        .build()
        .unwrap()
        .install(|| run_cell(&cfg).unwrap());
    let sa = a.get(TestName::RsRobust).unwrap();
    let sb = b.get(TestName::RsRobust).unwrap();
    assert_eq!(sa.statistics, sb.statistics);

    let strip = |r: &sdpd::montecarlo::McResult| {
        let mut buf = Vec::new();
        write_results_csv(std::slice::from_ref(r), &mut buf).unwrap();
        String::from_utf8(buf)
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(&a), strip(&b));
}
