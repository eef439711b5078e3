use ccdb::model::{weighted_sample, WeightedSampler};
use ccdb::reweight::ClassWeightState;
use ndarray::Array1;

fn state() -> ClassWeightState<f64> {
    let members = vec![vec![0, 2, 4], vec![1, 3]];
    let logits = vec![
        Array1::from(vec![0.0, 1.0, -1.0]),
        Array1::from(vec![0.5, -0.5]),
    ];
    ClassWeightState::from_parts(members, logits).unwrap()
}

#[test]
fn draw_frequencies_match_weights_over_classes() {
    let st = state();
    let n = 200_000;
    let draws = weighted_sample(&st, n, 7).unwrap();
    let mut counts = [0usize; 5];
    for i in draws {
        counts[i] += 1;
    }
    let k = st.num_classes() as f64;
    for (i, &w) in st.sample_weights().iter().enumerate() {
        let expected = w / k;
        let observed = counts[i] as f64 / n as f64;
        let sd = (expected * (1.0 - expected) / n as f64).sqrt();
        assert!(
            (observed - expected).abs() < 5.0 * sd,
            "sample {i}: {observed} vs {expected}"
        );
    }
}

#[test]
fn sampler_is_deterministic_given_seed() {
    let st = state();
    let a = WeightedSampler::new(&st, 11).unwrap().draw_batch(500);
    let b = WeightedSampler::new(&st, 11).unwrap().draw_batch(500);
    let c = WeightedSampler::new(&st, 12).unwrap().draw_batch(500);
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn one_hot_class_weights_draw_a_single_member() {
    let members = vec![vec![0, 1, 2], vec![3]];
    let logits = vec![
        Array1::from(vec![-40.0, 40.0, -40.0]),
        Array1::from(vec![0.0]),
    ];
    let st = ClassWeightState::from_parts(members, logits).unwrap();
    let draws = weighted_sample(&st, 2000, 3).unwrap();
    assert!(draws.iter().all(|&i| i == 1 || i == 3));
}
