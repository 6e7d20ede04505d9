//! Fast invariant checks runnable from the binary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use symode::autograd::Graph;
use symode::datagen::{build_corpus, enumerate_monomials, CorpusConfig, CountSpec};
use symode::eval::{accuracy, evaluate_predictions, Task};
use symode::exec::Exec;
use symode::exprtree::{Expr, OdeSystem};
use symode::infer::{rms_scale, PredictionLine};
use symode::integrate::{amplitude_ok, default_grid, solve, SolverConfig, Trajectory};
use symode::model::{AggregatorKind, Model, ModelConfig};
use symode::tokenizer::{encode_trajectory, round_trip, BOS, NUMERIC_VOCAB};
use symode::train::{cosine_schedule, noam_schedule, CosineConfig, NoamConfig};

fn binom(n: u64, k: u64) -> u64 {
    (1..=k).fold(1, |acc, i| acc * (n + 1 - i) / i)
}

fn codec() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ok = (0..10_000).all(|_| {
        let v = 10f64.powf(rng.random_range(-50.0..50.0)) * if rng.random::<bool>() { 1.0 } else { -1.0 };
        round_trip(v).is_ok_and(|r| ((r - v) / v).abs() <= 5e-4)
    });
    ok && round_trip(0.0) == Ok(0.0)
}

fn integrator() -> bool {
    let grid = default_grid();
    let decay = OdeSystem::new(vec![Expr::mul(Expr::Const(-1.0), Expr::var(0))]).unwrap();
    let Ok(tr) = solve(&decay, &[1.0], &grid, &SolverConfig::default()) else { return false };
    let close = grid.iter().zip(tr.states()).all(|(t, x)| (x - (-(t - grid[0])).exp()).abs() <= 1e-2);
    let growth = OdeSystem::new(vec![Expr::var(0)]).unwrap();
    let rejected = solve(&growth, &[1.0], &grid, &SolverConfig::default()).map_or(true, |t| !amplitude_ok(&t));
    close && rejected
}

fn schedules() -> bool {
    let c = CosineConfig::default();
    let n = NoamConfig::default();
    (cosine_schedule(1000, &c) - 2e-4).abs() < 1e-15 && (noam_schedule(8000, &n) - n.lr_max / 2.0).abs() < 1e-15
}

fn rescaling() -> bool {
    let t = |x: f64| Trajectory::new(vec![0.0, 1.0], vec![x, x], 1).unwrap();
    let (s, r) = rms_scale(&[t(3.0), t(4.0)]);
    let rms = ((s[0].initial()[0].powi(2) + s[1].initial()[0].powi(2)) / 2.0).sqrt();
    (r - 12.5f64.sqrt()).abs() < 1e-12 && (rms - 1.0).abs() < 1e-12
}

fn permutation() -> bool {
    let grid: Vec<f64> = (0..8).map(|i| i as f64).collect();
    let traj = |a: f64| Trajectory::new(grid.clone(), grid.iter().map(|t| a * (0.3 * t).sin()).collect(), 1).unwrap();
    let toks: Vec<Vec<usize>> = [0.5, -1.2, 2.0].iter().map(|&a| encode_trajectory(&traj(a)).unwrap()).collect();
    AggregatorKind::ALL.iter().all(|&agg| {
        let m = Model::<f32>::new(ModelConfig::toy(agg), 3).unwrap();
        let logits = |order: &[usize]| {
            let inst: Vec<Vec<usize>> = order.iter().map(|&i| toks[i].clone()).collect();
            let mut g = Graph::new(m.params());
            let mem = m.encode_system(&mut g, &inst, 1).unwrap();
            let l = m.decode_logits(&mut g, mem, &[BOS]).unwrap();
            g.value(l).clone()
        };
        logits(&[0, 1, 2]).max_abs_diff(&logits(&[2, 0, 1])) <= 1e-5
    })
}

fn truth_eval(exec: Exec) -> bool {
    let mut cfg = CorpusConfig::mixed_polynomial(20, 11);
    cfg.instances = CountSpec::Fixed(2);
    let Ok((recs, _)) = build_corpus(&cfg, exec) else { return false };
    let preds: Vec<PredictionLine> = recs
        .iter()
        .map(|r| PredictionLine {
            id: r.id,
            instances: r.instances.len(),
            sigma: 0.0,
            expressions: Some(symode::corpus::system_to_strings(&r.system)),
            infix: None,
            tokens: Vec::new(),
            r: 1.0,
            scores: Vec::new(),
            error: None,
        })
        .collect();
    let Ok(rows) = evaluate_predictions("truth", &recs, &preds, 1, &SolverConfig::default(), exec) else { return false };
    [Task::Reconstruction, Task::Generalization].iter().all(|t| {
        let sel: Vec<_> = rows.iter().filter(|r| r.task == *t).collect();
        accuracy(&sel).is_ok_and(|a| a >= 0.95)
    })
}

/// Prints one line per check; true iff all pass.
pub fn run(exec: Exec) -> bool {
    let checks: Vec<(&str, Box<dyn Fn() -> bool>)> = vec![
        ("numeric vocabulary size", Box::new(|| NUMERIC_VOCAB == 10_203)),
        ("float codec round trip", Box::new(codec)),
        (
            "monomial counts",
            Box::new(|| (1..=4).all(|d| (1..=3).all(|o| enumerate_monomials(d, o).len() as u64 == binom(d as u64 + o as u64, d as u64)))),
        ),
        ("integrator and amplitude filter", Box::new(integrator)),
        ("learning-rate schedules", Box::new(schedules)),
        ("rms rescaling", Box::new(rescaling)),
        ("aggregator permutation invariance", Box::new(permutation)),
        ("ground-truth scoring", Box::new(move || truth_eval(exec))),
    ];
    let mut all = true;
    for (name, f) in checks {
        let ok = f();
        all &= ok;
        println!("{} {name}", if ok { "ok  " } else { "FAIL" });
    }
    all
}
