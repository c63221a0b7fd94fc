mod common;

use common::oracle::{gradient_check, naive_forward, random_instance};
use fedplant_core::model::{
    deserialize_params, forward, init_params, loss_gradient, mse_loss, serialize_params, sgd_step, Activation,
    Gradient, ModelArchitecture, ParameterVector,
};
use proptest::prelude::*;

#[test]
fn gradient_matches_finite_differences_on_100_random_nets() {
    let worst = (0..100u64)
        .map(|seed| gradient_check(&random_instance(seed)))
        .fold(0.0, f64::max);
    assert!(worst < 1e-5, "max relative error {worst:e}");
}

#[test]
fn forward_agrees_with_naive_evaluation() {
    for seed in 0..50u64 {
        let inst = random_instance(1000 + seed);
        for x in &inst.xs {
            let lib = forward(&inst.params, &inst.arch, x).unwrap();
            let naive = naive_forward(inst.params.values(), &inst.arch, x);
            for (a, b) in lib.iter().zip(&naive) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "seed {seed}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn sgd_with_small_step_never_increases_batch_loss() {
    for seed in 0..50u64 {
        let inst = random_instance(5000 + seed);
        let (before, grad) = loss_gradient(&inst.params, &inst.arch, &inst.xs, &inst.ys).unwrap();
        let next = sgd_step(&inst.params, &grad, 1e-4).unwrap();
        let (after, _) = loss_gradient(&next, &inst.arch, &inst.xs, &inst.ys).unwrap();
        assert!(after <= before, "seed {seed}: {before} -> {after}");
    }
}

#[test]
fn hand_computed_examples() {
    let linear = ModelArchitecture::new(1, vec![], 1, Activation::Relu).unwrap();
    assert_eq!(init_params(&linear, 3).len(), 2);
    let mlp = ModelArchitecture::new(5, vec![8], 2, Activation::Relu).unwrap();
    assert_eq!(init_params(&mlp, 3).len(), 66);

    let p = ParameterVector::new(vec![2.0, 1.0], &linear).unwrap();
    assert_eq!(forward(&p, &linear, &[3.0]).unwrap(), vec![7.0]);

    assert_eq!(mse_loss(&[vec![3.0]], &[vec![1.0]]).unwrap(), 4.0);
    assert_eq!(
        mse_loss(&[vec![1.0, 2.0], vec![0.0, 0.0]], &[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap(),
        4.0
    );

    let p = ParameterVector::new(vec![1.0, 0.0], &linear).unwrap();
    let (loss, grad) = loss_gradient(&p, &linear, &[vec![1.0]], &[vec![0.0]]).unwrap();
    assert_eq!(loss, 1.0);
    assert_eq!(grad.values(), &[2.0, 2.0]);

    let two = ModelArchitecture::new(2, vec![], 1, Activation::Relu).unwrap();
    let p = ParameterVector::new(vec![1.0, 1.0, 0.0], &two).unwrap();
    let g = Gradient::new(vec![2.0, -2.0, 0.0]).unwrap();
    assert_eq!(sgd_step(&p, &g, 0.5).unwrap().values(), &[0.0, 2.0, 0.0]);

    let bytes = serialize_params(&ParameterVector::new(vec![1.0, -2.0], &linear).unwrap());
    let mut expected = vec![2, 0, 0, 0];
    expected.extend_from_slice(&[0, 0, 0, 0, 0, 0, 0xF0, 0x3F]);
    expected.extend_from_slice(&[0, 0, 0, 0, 0, 0, 0, 0xC0]);
    assert_eq!(bytes, expected);
}

proptest! {
    #[test]
    fn init_and_gradient_are_pure(seed in any::<u64>()) {
        let inst = random_instance(seed);
        prop_assert_eq!(init_params(&inst.arch, seed), init_params(&inst.arch, seed));
        let a = loss_gradient(&inst.params, &inst.arch, &inst.xs, &inst.ys).unwrap();
        let b = loss_gradient(&inst.params, &inst.arch, &inst.xs, &inst.ys).unwrap();
        prop_assert_eq!(a.0.to_bits(), b.0.to_bits());
        prop_assert_eq!(a.1, b.1);
    }

    #[test]
    fn serialization_round_trips_bit_exactly(
        hidden in prop::collection::vec(1usize..6, 0..3),
        bits in prop::collection::vec(any::<u64>(), 1..400),
    ) {
        let arch = ModelArchitecture::new(3, hidden, 2, Activation::Tanh).unwrap();
        let q = arch.parameter_count();
        let values: Vec<f64> = (0..q)
            .map(|i| f64::from_bits(bits[i % bits.len()]))
            .map(|v| if v.is_finite() { v } else { 0.5 })
            .collect();
        let params = ParameterVector::new(values.clone(), &arch).unwrap();
        let bytes = serialize_params(&params);
        prop_assert_eq!(bytes.len(), 4 + 8 * q);
        let back = deserialize_params(&bytes, &arch).unwrap();
        let same = back.values().iter().zip(&values).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same);
        prop_assert!(deserialize_params(&bytes[..bytes.len() - 1], &arch).is_err());
    }

    #[test]
    fn two_equal_steps_move_twice_as_far(
        start in prop::collection::vec(-4.0f64..4.0, 3),
        g in prop::collection::vec(-4.0f64..4.0, 3),
        eta in 0.0f64..1.0,
    ) {
        let arch = ModelArchitecture::new(2, vec![], 1, Activation::Relu).unwrap();
        let p = ParameterVector::new(start.clone(), &arch).unwrap();
        let grad = Gradient::new(g.clone()).unwrap();
        let twice = sgd_step(&sgd_step(&p, &grad, eta).unwrap(), &grad, eta).unwrap();
        for ((t, s), gi) in twice.values().iter().zip(&start).zip(&g) {
            prop_assert!((t - (s - 2.0 * eta * gi)).abs() <= 1e-12);
        }
        prop_assert_eq!(sgd_step(&p, &Gradient::new(vec![0.0; 3]).unwrap(), eta).unwrap(), p);
    }
}
