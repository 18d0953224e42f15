mod common;

use proptest::prelude::*;
use qflow_core::flow::{cfm_loss, empty_states, interp_batch, interp_path, FlowPolicy, StepPlan};
use qflow_core::nets::{Activation, FourierEmbed};
use qflow_core::rng::{normal_matrix, stream};
use qflow_core::{Tape, Tensor};

#[test]
fn euler_rotation_is_first_order() {
    let x0 = [1.0, 0.0];
    for n in [25, 50, 100] {
        let ratio = common::rotation_error(n, x0) / common::rotation_error(2 * n, x0);
        assert!((1.7..=2.3).contains(&ratio), "n={n}: ratio {ratio}");
    }
    let e = common::rotation_error(200, x0);
    assert!(e < 5e-3, "error at 200 steps: {e}");
}

#[test]
fn rotation_exact_matches_closed_form() {
    let t = 0.7f64;
    let e = common::rotation_exact([0.3, -1.2], t);
    let c = [0.3 * t.cos() + 1.2 * t.sin(), 0.3 * t.sin() - 1.2 * t.cos()];
    assert!((e[0] - c[0]).abs() < 1e-14 && (e[1] - c[1]).abs() < 1e-14);
}

fn random_policy(seed: u64, n_steps: usize) -> FlowPolicy {
    let embed = FourierEmbed::new(8).unwrap();
    let mut rng = stream(seed, "policy");
    FlowPolicy::new(2, 0, &[16, 16], Activation::Gelu, embed, n_steps, &mut rng).unwrap()
}

#[test]
fn split_integration_on_grid_is_bit_exact() {
    let n_steps = 20;
    let p = random_policy(3, n_steps);
    let mut rng = stream(3, "x0");
    let x0 = normal_matrix(&mut rng, 16, 2);
    let s = empty_states(16);
    let full = p.flow_map(&x0, 0.0, &s).unwrap();
    for k in [1, 7, 10, 19] {
        let mid = k as f64 / n_steps as f64;
        let xm = p.integrate(&x0, &[0.0; 16], &[mid; 16], &s).unwrap();
        let end = p.flow_map(&xm, mid, &s).unwrap();
        assert_eq!(end, full, "split at {k}/{n_steps}");
    }
}

#[test]
fn per_row_start_times_match_single_row_rollouts() {
    let p = random_policy(4, 10);
    let mut rng = stream(4, "x0");
    let x = normal_matrix(&mut rng, 4, 2);
    let taus = [0.0, 0.3, 0.55, 1.0];
    let batch = p.flow_map_rows(&x, &taus, &empty_states(4)).unwrap();
    for (i, &t) in taus.iter().enumerate() {
        let row = x.gather_rows(&[i]);
        let single = p.flow_map(&row, t, &empty_states(1)).unwrap();
        assert_eq!(single.row(0), batch.row(i));
    }
    assert_eq!(batch.row(3), x.row(3));
}

#[test]
fn zero_field_samples_are_standard_normal() {
    let p = common::linear_policy([[0.0; 2]; 2], [0.0; 2], 10);
    let n = 20_000;
    let mut rng = stream(5, "samples");
    let a = p.sample_actions(&empty_states(n), &mut rng).unwrap();
    for c in 0..2 {
        let col: Vec<f64> = (0..n).map(|i| a.get(i, c)).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // 5 standard errors
        assert!(mean.abs() < 5.0 / (n as f64).sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 5.0 * (2.0 / n as f64).sqrt(), "var {var}");
    }
}

#[test]
fn cfm_loss_of_constant_field_matches_expectation() {
    // v ≡ b and fixed x1: E||b − (x1 − x0)||² = ||b − x1||² + d
    let b = [0.4, -0.3];
    let x1 = [1.0, 0.5];
    let p = common::linear_policy([[0.0; 2]; 2], b, 10);
    let n = 40_000;
    let target = Tensor::matrix(n, 2, x1.iter().copied().cycle().take(2 * n).collect());
    let mut tape = Tape::new();
    let vars = p.net().on_tape(&mut tape, true);
    let mut rng = stream(6, "draw");
    let (loss, draw) = cfm_loss(&p, &mut tape, &vars, &empty_states(n), &target, &mut rng).unwrap();
    let c2 = (b[0] - x1[0]).powi(2) + (b[1] - x1[1]).powi(2);
    let expect = c2 + 2.0;
    let sd = ((4.0 * c2 + 4.0) / n as f64).sqrt();
    let got = tape.value(loss).item();
    assert!((got - expect).abs() < 5.0 * sd, "loss {got} vs {expect}");
    assert_eq!(draw.tau.len(), n);
}

#[test]
fn step_plan_rejects_bad_intervals() {
    assert!(StepPlan::new(0.5, 0.2, 10).is_err());
    assert!(StepPlan::new(0.0, 1.5, 10).is_err());
    assert!(StepPlan::new(0.0, 1.0, 0).is_err());
    assert_eq!(StepPlan::new(0.4, 0.4, 10).unwrap().steps(), 0);
}

fn point() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, 2)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn interp_is_on_the_segment(x0 in point(), x1 in point(), tau in 0.0f64..=1.0) {
        let (p, u) = interp_path(&x0, &x1, tau);
        for c in 0..2 {
            prop_assert_eq!(u[c], x1[c] - x0[c]);
            let expect = (1.0 - tau) * x0[c] + tau * x1[c];
            prop_assert!((p[c] - expect).abs() < 1e-12);
        }
        prop_assert_eq!(interp_path(&x0, &x1, 0.0).0, x0.clone());
        prop_assert_eq!(interp_path(&x0, &x1, 1.0).0, x1.clone());
    }

    #[test]
    fn interp_batch_matches_rows(xs in prop::collection::vec((point(), point(), 0.0f64..=1.0), 1..8)) {
        let n = xs.len();
        let x0 = Tensor::matrix(n, 2, xs.iter().flat_map(|r| r.0.clone()).collect());
        let x1 = Tensor::matrix(n, 2, xs.iter().flat_map(|r| r.1.clone()).collect());
        let taus: Vec<f64> = xs.iter().map(|r| r.2).collect();
        let (xt, u) = interp_batch(&x0, &x1, &taus).unwrap();
        for (i, r) in xs.iter().enumerate() {
            let (p, v) = interp_path(&r.0, &r.1, r.2);
            prop_assert_eq!(xt.row(i), &p[..]);
            prop_assert_eq!(u.row(i), &v[..]);
        }
    }

    #[test]
    fn step_plan_covers_the_interval(a in 0.0f64..1.0, len in 0.0f64..1.0, n in 1usize..200) {
        let b = (a + len).min(1.0);
        let plan = StepPlan::new(a, b, n).unwrap();
        let covered = plan.steps() as f64 * plan.step_size();
        prop_assert!((covered - (b - a)).abs() < 1e-9);
        if plan.steps() > 0 {
            prop_assert!((plan.time(0) - a).abs() < 1e-9);
        }
    }
}
