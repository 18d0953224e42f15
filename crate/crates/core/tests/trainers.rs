use qflow_core::flow::{cfm_loss, empty_states, CfmDraw};
use qflow_core::nets::{FourierEmbed, Layer, Mlp, MlpSpec};
use qflow_core::rng::{normal_matrix, stream, uniform_vec};
use qflow_core::trainers::*;
use qflow_core::value::Batch;
use qflow_core::{Activation, DatasetName, Method, OfflineDataset2D, Tape, Tensor, TrainConfig};

const EMBED: usize = 4;

/// Config whose policy, critic and intermediate value are single affine maps.
fn linear_cfg(method: Method, flow_steps: usize) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.method = method;
    cfg.network.policy_hidden = vec![];
    cfg.network.value_hidden = vec![];
    cfg.network.time_embed_dim = EMBED;
    cfg.network.flow_steps = flow_steps;
    cfg.network.ensemble_size = 1;
    cfg.network.inter_value_ensemble = 1;
    cfg.train.batch_size = 8;
    cfg
}

fn small_cfg(method: Method) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.method = method;
    cfg.network.policy_hidden = vec![24, 24];
    cfg.network.value_hidden = vec![24, 24];
    cfg.network.time_embed_dim = 8;
    cfg.network.flow_steps = 6;
    cfg.train.batch_size = 32;
    cfg
}

fn draw(b: usize, seed: u64) -> (Tensor, CfmDraw) {
    let mut rng = stream(seed, "test/draw");
    let x1 = normal_matrix(&mut rng, b, 2);
    let d = CfmDraw::sample(&x1, &mut rng).unwrap();
    (x1, d)
}

fn input_row(x: &[f64], tau: f64) -> Vec<f64> {
    let mut r = x.to_vec();
    r.extend(FourierEmbed::new(EMBED).unwrap().embed(tau).unwrap());
    r
}

/// `r·W + b` for a single-layer net.
fn affine(net: &Mlp, row: &[f64]) -> Vec<f64> {
    let l = &net.layers()[0];
    let out = l.weight.cols();
    (0..out)
        .map(|j| l.bias.data()[j] + row.iter().enumerate().map(|(k, v)| v * l.weight.get(k, j)).sum::<f64>())
        .collect()
}

/// Hand gradient of `w_bc · mean ||v(x_τ, τ) − target||²` for a linear field.
fn matching_grad(st: &TrainState, d: &CfmDraw, target: &Tensor, wbc: f64) -> (Vec<f64>, Vec<f64>) {
    let b = d.tau.len() as f64;
    let n_in = 2 + EMBED;
    let (mut gw, mut gb) = (vec![0.0; n_in * 2], vec![0.0; 2]);
    for i in 0..d.tau.len() {
        let inp = input_row(d.x_tau.row(i), d.tau[i]);
        let v = affine(st.policy.net(), &inp);
        for j in 0..2 {
            let r = v[j] - target.get(i, j);
            gb[j] += wbc * 2.0 * r / b;
            for k in 0..n_in {
                gw[k * 2 + j] += wbc * 2.0 * inp[k] * r / b;
            }
        }
    }
    (gw, gb)
}

fn assert_close(got: &[f64], want: &[f64], what: &str) {
    assert_eq!(got.len(), want.len());
    for (k, (g, w)) in got.iter().zip(want).enumerate() {
        assert!(
            (g - w).abs() <= 1e-10 * (1.0 + w.abs()),
            "{what}[{k}]: {g} vs {w}"
        );
    }
}

#[test]
fn fbrac_gradient_matches_hand_chain_rule() {
    let alpha = 0.7;
    let cfg = linear_cfg(Method::Fbrac, 1);
    let st = TrainState::new(&cfg, 0, 2).unwrap();
    let (_, d) = draw(8, 1);
    let s = empty_states(8);
    let mut tape = Tape::new();
    let (loss, vars) = fbrac_loss(&st, &mut tape, &s, &d, (1.0, alpha)).unwrap();
    let g = vars.grads(&tape.backward(loss).unwrap()).unwrap();

    let (mut gw, mut gb) = matching_grad(&st, &d, &d.u, alpha);
    let wc = &st.critic.members()[0].layers()[0].weight;
    let b = 8.0;
    let mut q_mean = 0.0;
    for i in 0..8 {
        let inp0 = input_row(d.x0.row(i), 0.0);
        let v0 = affine(st.policy.net(), &inp0);
        let a: Vec<f64> = (0..2).map(|j| d.x0.get(i, j) + v0[j]).collect();
        q_mean += affine(&st.critic.members()[0], &a)[0] / b;
        for j in 0..2 {
            gb[j] -= wc.get(j, 0) / b;
            for (k, x) in inp0.iter().enumerate() {
                gw[k * 2 + j] -= x * wc.get(j, 0) / b;
            }
        }
    }
    assert_close(g[0].data(), &gw, "dW");
    assert_close(g[1].data(), &gb, "db");

    let mut cfm = 0.0;
    for i in 0..8 {
        let v = affine(st.policy.net(), &input_row(d.x_tau.row(i), d.tau[i]));
        cfm += (0..2).map(|j| (v[j] - d.u.get(i, j)).powi(2)).sum::<f64>() / b;
    }
    let expect = alpha * cfm - q_mean;
    assert!((tape.value(loss).item() - expect).abs() < 1e-12);
}

#[test]
fn ivm_gradient_matches_hand_chain_rule_with_per_row_tau() {
    let alpha = 1.3;
    let cfg = linear_cfg(Method::IvmBptt, 1);
    let st = TrainState::new(&cfg, 0, 2).unwrap();
    let (_, d) = draw(8, 2);
    let s = empty_states(8);
    let mut tape = Tape::new();
    let (loss, vars) = ivm_bptt_loss(&st, &mut tape, &s, &d, (1.0, alpha)).unwrap();
    let g = vars.grads(&tape.backward(loss).unwrap()).unwrap();

    // one Euler step of size τ_i: x = x0 + τ_i v(x0, 0)
    let (mut gw, mut gb) = matching_grad(&st, &d, &d.u, alpha);
    let wv = &st.inter_value.as_ref().unwrap().members()[0].layers()[0].weight;
    for i in 0..8 {
        let inp0 = input_row(d.x0.row(i), 0.0);
        let t = d.tau[i];
        for j in 0..2 {
            gb[j] -= t * wv.get(j, 0) / 8.0;
            for (k, x) in inp0.iter().enumerate() {
                gw[k * 2 + j] -= t * x * wv.get(j, 0) / 8.0;
            }
        }
    }
    assert_close(g[0].data(), &gw, "dW");
    assert_close(g[1].data(), &gb, "db");
}

#[test]
fn ivm_at_tau_zero_reduces_to_cfm() {
    let cfg = linear_cfg(Method::IvmBptt, 5);
    let st = TrainState::new(&cfg, 0, 2).unwrap();
    let mut rng = stream(3, "tau0");
    let x0 = normal_matrix(&mut rng, 8, 2);
    let x1 = normal_matrix(&mut rng, 8, 2);
    let d = CfmDraw::from_parts(x0, &x1, vec![0.0; 8]).unwrap();
    let s = empty_states(8);
    let grads = |w: (f64, f64)| {
        let mut tape = Tape::new();
        let (loss, vars) = ivm_bptt_loss(&st, &mut tape, &s, &d, w).unwrap();
        vars.grads(&tape.backward(loss).unwrap()).unwrap()
    };
    let (with_v, cfm_only) = (grads((1.0, 0.5)), grads((0.0, 0.5)));
    assert_eq!(with_v, cfm_only);
}

#[test]
fn qflow_target_is_detached_guidance() {
    let cfg = linear_cfg(Method::Qflow, 4);
    let st = TrainState::new(&cfg, 0, 2).unwrap();
    let (_, d) = draw(8, 4);
    let s = empty_states(8);
    let inv_lambda = 1.0 / 0.3;
    let target = qflow_target(&st, &s, &d, inv_lambda).unwrap();
    // linear V: ∇_x V is the x-block of its weight, whatever (x, τ)
    let wv = &st.inter_value.as_ref().unwrap().members()[0].layers()[0].weight;
    for i in 0..8 {
        for j in 0..2 {
            assert_eq!(target.get(i, j), d.u.get(i, j) + inv_lambda * wv.get(j, 0));
        }
    }
    let mut tape = Tape::new();
    let (loss, vars) = policy_matching_loss(&st, &mut tape, &s, &d, &target, None).unwrap();
    let g = vars.grads(&tape.backward(loss).unwrap()).unwrap();
    let (gw, gb) = matching_grad(&st, &d, &target, 1.0);
    assert_close(g[0].data(), &gw, "dW");
    assert_close(g[1].data(), &gb, "db");
}

#[test]
fn halving_lambda_doubles_pure_guidance() {
    let cfg = small_cfg(Method::Qflow);
    let st = TrainState::new(&cfg, 0, 2).unwrap();
    let mut rng = stream(5, "x");
    let x0 = normal_matrix(&mut rng, 16, 2);
    // x1 = x0 makes the conditional velocity zero
    let d = CfmDraw::from_parts(x0.clone(), &x0, uniform_vec(&mut rng, 16)).unwrap();
    let s = empty_states(16);
    let lambda = 0.7;
    let t1 = qflow_target(&st, &s, &d, 1.0 / lambda).unwrap();
    let t2 = qflow_target(&st, &s, &d, 1.0 / (lambda / 2.0)).unwrap();
    for (a, b) in t1.data().iter().zip(t2.data()) {
        assert_eq!(2.0 * a, *b);
    }
    let o1 = outer_guidance_target(&st, &s, &d, 1.0 / lambda).unwrap();
    let o2 = outer_guidance_target(&st, &s, &d, 1.0 / (lambda / 2.0)).unwrap();
    for (a, b) in o1.data().iter().zip(o2.data()) {
        assert_eq!(2.0 * a, *b);
    }
}

fn swiss(n: usize) -> OfflineDataset2D {
    OfflineDataset2D::generate(DatasetName::SwissRoll, n, None, 0).unwrap()
}

fn next_batch(ds: &OfflineDataset2D, cfg: &TrainConfig, rngs: &mut Streams) -> Batch {
    ds.batch(&sample_indices(ds.len(), cfg.train.batch_size, &mut rngs.batch))
}

#[test]
fn every_method_runs_its_updates_in_order() {
    use Update::*;
    let ds = swiss(300);
    let expected = [
        (Method::Qflow, vec![Critic, InterValue, Policy, Targets]),
        (Method::IvmBptt, vec![Critic, InterValue, Policy, Targets]),
        (Method::Fbrac, vec![Critic, Policy, Targets]),
        (Method::Fql, vec![Critic, Policy, OneStep, Targets]),
        (Method::Fawac, vec![Critic, Policy, Targets]),
        (Method::Rejection, vec![Critic, Policy, Targets]),
        (Method::OuterGuidance, vec![Critic, Policy, Targets]),
    ];
    for (method, rl) in expected {
        let cfg = small_cfg(method);
        let mut st = TrainState::new(&cfg, 0, 2).unwrap();
        let mut rngs = Streams::new(0);
        st.trace = Some(Vec::new());
        let b = next_batch(&ds, &cfg, &mut rngs);
        bc_step(&mut st, &b, &cfg, &mut rngs).unwrap();
        let mut bc = vec![Critic];
        if method.uses_inter_value() {
            bc.push(InterValue);
        }
        bc.push(Policy);
        if method == Method::Fql {
            bc.push(OneStep);
        }
        bc.push(Targets);
        assert_eq!(st.trace.as_deref(), Some(&bc[..]), "{method} bc");
        st.trace = Some(Vec::new());
        rl_step(&mut st, &b, &cfg, &mut rngs).unwrap();
        assert_eq!(st.trace.as_deref(), Some(&rl[..]), "{method} rl");
    }
}

#[test]
fn qflow_step_uses_the_post_update_value() {
    let ds = swiss(300);
    let mut cfg = small_cfg(Method::Qflow);
    cfg.train.lambda = 0.3;
    let mut st = TrainState::new(&cfg, 0, 2).unwrap();
    let mut rngs = Streams::new(7);
    for _ in 0..5 {
        let b = next_batch(&ds, &cfg, &mut rngs);
        bc_step(&mut st, &b, &cfg, &mut rngs).unwrap();
    }
    let b = next_batch(&ds, &cfg, &mut rngs);
    let (mut manual, mut mrngs) = (st.clone(), rngs.clone());
    qflow_step(&mut st, &b, &cfg, &mut rngs).unwrap();

    critic_update(&mut manual, &b, &mut mrngs.next_actions).unwrap();
    let d = CfmDraw::sample(&b.a, &mut mrngs.draws).unwrap();
    let stale = manual.clone();
    inter_value_update(&mut manual, &b.s, &d).unwrap();
    let g = manual.inter_value.as_ref().unwrap().grad_wrt_x(&d.x_tau, &d.tau, &b.s).unwrap();
    let target = d.u.zip_map(&g, |u, g| u + cfg.inv_lambda() * g).unwrap();
    let mut with_stale = manual.clone();
    matching_update(&mut manual, &b.s, &d, &target, None, None).unwrap();
    target_update(&mut manual, cfg.train.eta).unwrap();
    manual.step += 1;
    assert_eq!(manual, st);

    let stale_target = qflow_target(&stale, &b.s, &d, cfg.inv_lambda()).unwrap();
    matching_update(&mut with_stale, &b.s, &d, &stale_target, None, None).unwrap();
    assert_ne!(with_stale.policy, st.policy);
}

#[test]
fn critic_trajectories_coincide_across_methods_during_bc() {
    let ds = swiss(300);
    let run = |method: Method| {
        let cfg = small_cfg(method);
        let mut st = TrainState::new(&cfg, 0, 2).unwrap();
        let mut rngs = Streams::new(11);
        let losses: Vec<f64> = (0..15)
            .map(|_| {
                let b = next_batch(&ds, &cfg, &mut rngs);
                bc_step(&mut st, &b, &cfg, &mut rngs).unwrap().loss_critic
            })
            .collect();
        (losses, st)
    };
    let (base_losses, base) = run(Method::Qflow);
    for method in Method::ALL {
        let (losses, st) = run(method);
        assert_eq!(losses, base_losses, "{method}");
        assert_eq!(st.critic, base.critic, "{method}");
        assert_eq!(st.policy, base.policy, "{method}");
    }
}

#[test]
fn switching_after_bc_matches_a_direct_run() {
    let ds = swiss(300);
    let cfg_q = small_cfg(Method::Qflow);
    let mut cfg_f = small_cfg(Method::Fbrac);
    cfg_f.train.alpha = 0.3;
    let bc = |cfg: &TrainConfig| {
        let mut st = TrainState::new(cfg, 0, 2).unwrap();
        let mut rngs = Streams::new(2);
        for _ in 0..10 {
            let b = next_batch(&ds, cfg, &mut rngs);
            bc_step(&mut st, &b, cfg, &mut rngs).unwrap();
        }
        (st, rngs)
    };
    let (q, mut q_rngs) = bc(&cfg_q);
    let (mut direct, mut f_rngs) = bc(&cfg_f);
    let mut switched = q.switch_method(&cfg_f).unwrap();
    assert_eq!(switched, direct);
    let b = next_batch(&ds, &cfg_f, &mut q_rngs);
    let b2 = next_batch(&ds, &cfg_f, &mut f_rngs);
    assert_eq!(b, b2);
    let m1 = rl_step(&mut switched, &b, &cfg_f, &mut q_rngs).unwrap();
    let m2 = rl_step(&mut direct, &b2, &cfg_f, &mut f_rngs).unwrap();
    assert_eq!((m1.loss_policy, m1.grad_norm_policy), (m2.loss_policy, m2.grad_norm_policy));
    assert_eq!(switched, direct);
}

#[test]
fn infinite_lambda_qflow_loss_is_cfm_bit_for_bit() {
    let cfg = small_cfg(Method::Qflow);
    let st = TrainState::new(&cfg, 0, 2).unwrap();
    let (x1, _) = draw(32, 8);
    let s = empty_states(32);
    let mut rng = stream(8, "same");
    let mut tape = Tape::new();
    let vars = st.policy.net().on_tape(&mut tape, true);
    let (cfm, d) = cfm_loss(&st.policy, &mut tape, &vars, &s, &x1, &mut rng).unwrap();
    let target = qflow_target(&st, &s, &d, 0.0).unwrap();
    let mut tape2 = Tape::new();
    let (q, _) = policy_matching_loss(&st, &mut tape2, &s, &d, &target, None).unwrap();
    assert_eq!(tape.value(cfm).item().to_bits(), tape2.value(q).item().to_bits());
}

/// Policy after one RL step of `method`, starting from the same state and streams.
fn policy_after_step(method: Method, tweak: impl Fn(&mut TrainConfig)) -> (TrainState, StepMetrics) {
    let ds = swiss(300);
    let mut cfg = small_cfg(method);
    tweak(&mut cfg);
    let mut st = TrainState::new(&cfg, 0, 2).unwrap();
    let mut rngs = Streams::new(9);
    let mut m = None;
    for _ in 0..3 {
        let b = next_batch(&ds, &cfg, &mut rngs);
        m = Some(rl_step(&mut st, &b, &cfg, &mut rngs).unwrap());
    }
    (st, m.unwrap())
}

#[test]
fn reductions_to_plain_cfm() {
    let (cfm, cfm_m) = policy_after_step(Method::Rejection, |_| {});
    let (q, q_m) = policy_after_step(Method::Qflow, |c| c.train.lambda = f64::INFINITY);
    let (f, f_m) = policy_after_step(Method::Fbrac, |c| c.train.alpha = f64::INFINITY);
    let (w, w_m) = policy_after_step(Method::Fawac, |c| c.train.beta = 0.0);
    for (name, st, m) in [("qflow", q, q_m), ("fbrac", f, f_m), ("fawac", w, w_m)] {
        assert_eq!(st.policy, cfm.policy, "{name}");
        assert_eq!(st.policy_opt, cfm.policy_opt, "{name}");
        assert_eq!(st.critic, cfm.critic, "{name}");
        assert_eq!(m.loss_policy.to_bits(), cfm_m.loss_policy.to_bits(), "{name}");
    }
}

#[test]
fn zero_beta_weights_are_exactly_one() {
    let cfg = small_cfg(Method::Fawac);
    let st = TrainState::new(&cfg, 0, 2).unwrap();
    let (x1, _) = draw(64, 10);
    let w = fawac_weights(&st.critic, &empty_states(64), &x1, 0.0).unwrap();
    assert!(w.iter().all(|&v| v == 1.0));
    let w = fawac_weights(&st.critic, &empty_states(64), &x1, 1e6).unwrap();
    assert!(w.iter().all(|&v| (0.0..=100.0).contains(&v)));
}

#[test]
fn polyak_with_unit_rate_copies_online_weights() {
    let ds = swiss(300);
    let cfg = small_cfg(Method::Qflow);
    let mut st = TrainState::new(&cfg, 0, 2).unwrap();
    let mut rngs = Streams::new(1);
    let b = next_batch(&ds, &cfg, &mut rngs);
    critic_update(&mut st, &b, &mut rngs.next_actions).unwrap();
    assert_ne!(st.critic.targets(), st.critic.members());
    target_update(&mut st, 1.0).unwrap();
    assert_eq!(st.critic.targets(), st.critic.members());
    let before = st.critic.targets().to_vec();
    critic_update(&mut st, &b, &mut rngs.next_actions).unwrap();
    target_update(&mut st, 0.0).unwrap();
    assert_eq!(st.critic.targets(), &before[..]);
}

#[test]
fn one_step_actor_equal_to_flow_map_has_zero_distillation_loss() {
    let cfg = linear_cfg(Method::Fql, 5);
    let mut st = TrainState::new(&cfg, 0, 2).unwrap();
    // zero field: Ψ(x0) = x0; identity one-step actor: μ(x0) = x0
    for p in st.policy.net_mut().params_mut() {
        p.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let id = Layer {
        weight: Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]),
        bias: Tensor::from_parts(vec![2], vec![0.0, 0.0]),
    };
    st.one_step = Some(Mlp::from_layers(MlpSpec::new(2, &[], 2, Activation::Relu), vec![id]).unwrap());
    let x0 = normal_matrix(&mut stream(1, "x0"), 32, 2);
    let (loss, norm) = one_step_update(&mut st, &empty_states(32), &x0, (0.0, 1.0), None).unwrap();
    assert_eq!((loss, norm), (0.0, 0.0));
}

#[test]
fn distilled_actor_tracks_the_flow_map() {
    let ds = OfflineDataset2D::generate(DatasetName::Moons, 1000, None, 3).unwrap();
    let mut cfg = small_cfg(Method::Fql);
    cfg.network.policy_hidden = vec![64, 64];
    cfg.train.batch_size = 128;
    cfg.train.lr = 1e-3;
    let mut st = TrainState::new(&cfg, 0, 2).unwrap();
    let mut rngs = Streams::new(3);
    for _ in 0..1500 {
        let b = next_batch(&ds, &cfg, &mut rngs);
        bc_step(&mut st, &b, &cfg, &mut rngs).unwrap();
    }
    let n = 1000;
    let s = empty_states(n);
    let x0 = normal_matrix(&mut stream(3, "eval"), n, 2);
    let flow = st.policy.flow_map(&x0, 0.0, &s).unwrap();
    let mu = st.one_step_actions(&x0, &s).unwrap();
    let mse = (0..n)
        .map(|i| (0..2).map(|j| (mu.get(i, j) - flow.get(i, j)).powi(2)).sum::<f64>())
        .sum::<f64>()
        / n as f64;
    assert!(mse < 0.05, "distillation mse {mse}");
}

#[test]
fn more_rejection_candidates_score_higher() {
    let cfg = small_cfg(Method::Rejection);
    let st = TrainState::new(&cfg, 0, 2).unwrap();
    let s = empty_states(500);
    let mean_q = |n: usize| {
        let a = rejection_policy(&st, &s, n, &mut stream(4, "cands")).unwrap();
        st.critic.q_value(&s, &a, false).unwrap().iter().sum::<f64>() / 500.0
    };
    let (one, many) = (mean_q(1), mean_q(32));
    assert!(many >= one, "N=32 {many} < N=1 {one}");
}

#[test]
fn advantage_weighting_concentrates_on_the_rewarded_mode() {
    let ds = OfflineDataset2D::generate(DatasetName::EightGaussians, 2000, None, 5).unwrap();
    let spec = ds.reward_spec().clone();
    let mut cfg = small_cfg(Method::Fawac);
    cfg.network.policy_hidden = vec![64, 64];
    cfg.network.value_hidden = vec![64, 64];
    cfg.network.flow_steps = 10;
    cfg.train.batch_size = 128;
    cfg.train.lr = 1e-3;
    cfg.train.beta = 10.0;
    let mut st = TrainState::new(&cfg, 0, 2).unwrap();
    let mut rngs = Streams::new(5);
    for _ in 0..2500 {
        let mut b = next_batch(&ds, &cfg, &mut rngs);
        // one-hot reward on the last mode
        for i in 0..b.len() {
            let p = [b.a.get(i, 0), b.a.get(i, 1)];
            b.r[i] = if spec.region(p) == 7 { 1.0 } else { 0.0 };
        }
        fawac_step(&mut st, &b, &cfg, &mut rngs).unwrap();
    }
    let n = 2000;
    let a = st.policy.sample_actions(&empty_states(n), &mut stream(5, "eval")).unwrap();
    let top = (0..n).filter(|&i| spec.region([a.get(i, 0), a.get(i, 1)]) == 7).count();
    let frac = top as f64 / n as f64;
    assert!(frac >= 0.6, "top-mode share {frac}");
}
