use symode::autograd::{Graph, Tensor};
use symode::integrate::Trajectory;
use symode::model::{AggregatorKind, Model, ModelConfig};
use symode::tokenizer::{encode_trajectory, BOS, NUMERIC_VOCAB};

fn instance_tokens(amps: &[f64]) -> Vec<Vec<usize>> {
    let grid: Vec<f64> = (0..10).map(|i| 0.5 * i as f64).collect();
    amps.iter()
        .map(|&a| {
            let states = grid.iter().flat_map(|t| [a * (0.7 * t).cos(), a * (0.2 * t).sin() + 0.1]).collect();
            encode_trajectory(&Trajectory::new(grid.clone(), states, 2).unwrap()).unwrap()
        })
        .collect()
}

fn logits(m: &Model<f64>, inst: &[Vec<usize>], target: &[usize]) -> Tensor<f64> {
    let mut g = Graph::new(m.params());
    let mem = m.encode_system(&mut g, inst, 2).unwrap();
    let l = m.decode_logits(&mut g, mem, target).unwrap();
    g.value(l).clone()
}

#[test]
fn every_aggregator_ignores_instance_order() {
    let toks = instance_tokens(&[0.4, -1.1, 2.3, 0.9]);
    let target = [BOS, 5, 17, NUMERIC_VOCAB + 3];
    for agg in AggregatorKind::ALL {
        let m = Model::<f64>::new(ModelConfig::toy(agg), 21).unwrap();
        let base = logits(&m, &toks, &target);
        for perm in [[3, 2, 1, 0], [1, 3, 0, 2]] {
            let p: Vec<Vec<usize>> = perm.iter().map(|&i| toks[i].clone()).collect();
            let d = base.max_abs_diff(&logits(&m, &p, &target));
            assert!(d < 1e-9, "{}: {d}", agg.name());
        }
    }
}

#[test]
fn aggregators_depend_on_instance_content() {
    let a = instance_tokens(&[0.4, -1.1]);
    let b = instance_tokens(&[0.4, 3.0]);
    for agg in AggregatorKind::ALL {
        let m = Model::<f64>::new(ModelConfig::toy(agg), 2).unwrap();
        assert!(logits(&m, &a, &[BOS]).max_abs_diff(&logits(&m, &b, &[BOS])) > 1e-6, "{}", agg.name());
    }
}

#[test]
fn decoder_is_causal() {
    let toks = instance_tokens(&[1.0, 0.5]);
    let m = Model::<f64>::new(ModelConfig::toy(AggregatorKind::Mean), 8).unwrap();
    let a = logits(&m, &toks, &[BOS, 10, 20, 30, 40]);
    let b = logits(&m, &toks, &[BOS, 10, 20, 99, 7]);
    for r in 0..3 {
        let d = a.row(r).iter().zip(b.row(r)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(d < 1e-12, "row {r} sees the future: {d}");
    }
    let d3 = a.row(3).iter().zip(b.row(3)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(d3 > 1e-9);
}

#[test]
fn instance_count_is_free() {
    let toks = instance_tokens(&[0.4, -1.1, 2.3, 0.9]);
    for agg in AggregatorKind::ALL {
        let m = Model::<f64>::new(ModelConfig::toy(agg), 4).unwrap();
        for n in 1..=4 {
            let l = logits(&m, &toks[..n], &[BOS, 3]);
            assert_eq!(l.rows(), 2);
            assert!(l.data().iter().all(|v| v.is_finite()));
        }
    }
}
