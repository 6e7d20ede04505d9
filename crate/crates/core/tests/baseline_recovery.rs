use symode::baseline::{coefficient_error, expand_polynomial, run_baseline, BaselineConfig};
use symode::datagen::{build_corpus, CorpusConfig, CountSpec};
use symode::eval::{accuracy, reconstruction_score, stlsq_fit, StlsqConfig, Task};
use symode::exec::Exec;
use symode::exprtree::{Expr, OdeSystem, UnaryOp};
use symode::integrate::{solve, SolverConfig};

fn dense_corpus(dim: usize, count: usize, seed: u64) -> Vec<symode::datagen::SystemRecord> {
    let mut cfg = CorpusConfig::mixed_polynomial(count * 3, seed);
    cfg.dims = CountSpec::Fixed(dim);
    cfg.instances = CountSpec::Fixed(4);
    cfg.points = 1000;
    let (recs, _) = build_corpus(&cfg, Exec::default()).unwrap();
    // keep systems whose every coefficient clears the threshold
    recs.into_iter()
        .filter(|r| {
            r.system.equations().iter().all(|e| expand_polynomial(e, dim).is_some_and(|p| p.values().all(|c| c.abs() >= 0.1)))
        })
        .take(count)
        .collect()
}

#[test]
fn recovers_clean_low_dimensional_polynomials() {
    let mut recs = dense_corpus(1, 25, 40);
    recs.extend(dense_corpus(2, 25, 41));
    assert_eq!(recs.len(), 50);
    let cfg = BaselineConfig { instance_counts: vec![4], sigmas: vec![0.0], ..BaselineConfig::default() };
    let (_, rows) = run_baseline(&recs, &cfg, Exec::default());
    let recon: Vec<_> = rows.iter().filter(|r| r.task == Task::Reconstruction).collect();
    let acc = accuracy(&recon).unwrap();
    assert!(acc >= 0.95, "accuracy {acc}");
}

#[test]
fn exact_library_system_gives_small_coefficient_error() {
    // dx/dt = -0.5 x + y, dy/dt = -x - 0.3 y
    let sys = OdeSystem::new(vec![
        Expr::add(Expr::mul(Expr::Const(-0.5), Expr::var(0)), Expr::var(1)),
        Expr::add(Expr::mul(Expr::Const(-1.0), Expr::var(0)), Expr::mul(Expr::Const(-0.3), Expr::var(1))),
    ])
    .unwrap();
    let grid: Vec<f64> = (0..2001).map(|i| i as f64 * 0.005).collect();
    let trajs: Vec<_> = [[1.0, 0.0], [0.0, 1.0], [-0.7, 0.4]]
        .iter()
        .map(|x0| solve(&sys, x0, &grid, &SolverConfig::default()).unwrap())
        .collect();
    let fit = stlsq_fit(&trajs, &StlsqConfig::default()).unwrap();
    let err = coefficient_error(&fit.system, &sys).unwrap();
    assert!(err < 1e-3, "{err}\n{}", fit.system.render());
}

#[test]
fn out_of_library_system_fails_without_crashing() {
    // dx/dt = sin(3 y), dy/dt = -x
    let sys = OdeSystem::new(vec![
        Expr::unary(UnaryOp::Sin, Expr::mul(Expr::Const(3.0), Expr::var(1))),
        Expr::mul(Expr::Const(-1.0), Expr::var(0)),
    ])
    .unwrap();
    let grid: Vec<f64> = (0..100).map(|i| i as f64 * 0.1).collect();
    let x0s = [[1.5, 0.0], [0.0, 1.2], [-1.0, 0.8], [0.5, -1.4]];
    let trajs: Vec<_> = x0s.iter().map(|x0| solve(&sys, x0, &grid, &SolverConfig::default()).unwrap()).collect();
    let fit = stlsq_fit(&trajs, &StlsqConfig::default()).unwrap();
    assert_eq!(fit.system.dim(), 2);
    assert!(coefficient_error(&fit.system, &sys).is_none());
    let rec = symode::datagen::SystemRecord {
        id: 0,
        system: sys,
        instances: trajs,
        sigma: 0.0,
        generator: symode::datagen::Generator::Tree,
        seed: 0,
    };
    let out = reconstruction_score(&rec, &fit.system, &SolverConfig::default());
    assert!(out.r2.iter().flatten().all(|v| v.is_finite()));
    assert!(!out.pass);
}
