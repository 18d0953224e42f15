//! Independent oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use qflow_core::autodiff::{Tape, Tensor, Var};
use qflow_core::flow::FlowPolicy;
use qflow_core::nets::{Activation, FourierEmbed, Layer, Mlp, MlpSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Builder = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

/// A scalar function of several tensors, recorded on a fresh tape per call.
pub struct GradCase {
    pub name: String,
    pub leaves: Vec<Tensor>,
    pub build: Builder,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Largest `|a − f| / max(|a|, |f|)` over entries that miss the absolute floor.
    pub worst_rel: f64,
    pub worst_abs: f64,
    pub checked: usize,
    pub failures: usize,
}

pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_ABS_TOL: f64 = 1e-7;

fn eval(case: &GradCase, leaves: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|l| tape.leaf(l.clone())).collect();
    let out = (case.build)(&mut tape, &vars);
    tape.value(out).item()
}

/// Central finite differences (step `h`) against reverse-mode gradients.
pub fn check_gradients(case: &GradCase, h: f64) -> GradCheck {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case.leaves.iter().map(|l| tape.leaf(l.clone())).collect();
    let out = (case.build)(&mut tape, &vars);
    let grads = tape.backward(out).expect("scalar root");
    let mut report = GradCheck {
        worst_rel: 0.0,
        worst_abs: 0.0,
        checked: 0,
        failures: 0,
    };
    for (li, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).expect("leaf gradient");
        for k in 0..case.leaves[li].len() {
            let mut plus = case.leaves.clone();
            plus[li].data_mut()[k] += h;
            let mut minus = case.leaves.clone();
            minus[li].data_mut()[k] -= h;
            let fd = (eval(case, &plus) - eval(case, &minus)) / (2.0 * h);
            let a = analytic.data()[k];
            let diff = (a - fd).abs();
            report.checked += 1;
            report.worst_abs = report.worst_abs.max(diff);
            if diff <= FD_ABS_TOL {
                continue;
            }
            let rel = diff / a.abs().max(fd.abs());
            report.worst_rel = report.worst_rel.max(rel);
            if rel >= FD_REL_TOL {
                report.failures += 1;
            }
        }
    }
    report
}

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect();
    Tensor::matrix(rows, cols, data)
}

/// Random small network or op composition number `i`.
pub fn random_case(i: u64) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ i);
    match i % 4 {
        0 | 1 => {
            let act = if rng.random_bool(0.5) { Activation::Gelu } else { Activation::Relu };
            let depth = rng.random_range(0..3);
            let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(1..6)).collect();
            let input = rng.random_range(1..5);
            let output = rng.random_range(1..4);
            let rows = rng.random_range(1..5);
            let spec = MlpSpec::new(input, &hidden, output, act);
            let net = Mlp::init(spec.clone(), i).expect("valid spec");
            let mut leaves = vec![rand_tensor(&mut rng, rows, input)];
            // zero biases would put dead-unit pre-activations exactly on the ReLU kink
            for t in net.params() {
                let mut t = t.clone();
                if t.shape().len() == 1 {
                    for v in t.data_mut() {
                        *v = rng.random_range(-0.5..0.5);
                    }
                }
                leaves.push(t);
            }
            let coef = rand_tensor(&mut rng, rows, output);
            let build: Builder = Box::new(move |tape, vars| {
                let mut x = vars[0];
                let n_layers = vars[1..].len() / 2;
                for l in 0..n_layers {
                    let w = vars[1 + 2 * l];
                    let b = vars[2 + 2 * l];
                    let z = tape.matmul(x, w).expect("matmul");
                    let rows = tape.value(z).rows();
                    let bb = tape.broadcast(b, rows).expect("broadcast");
                    let z = tape.add(z, bb).expect("add");
                    x = if l + 1 < n_layers {
                        match spec.activation {
                            Activation::Relu => tape.relu(z),
                            Activation::Gelu => tape.gelu(z),
                        }
                    } else {
                        z
                    };
                }
                let c = tape.constant(coef.clone());
                let y = tape.mul(x, c).expect("mul");
                let sq = tape.square(y);
                let s = tape.sum(y);
                let m = tape.mean(sq);
                tape.add(s, m).expect("add")
            });
            GradCase {
                name: format!("mlp{hidden:?}/{act:?}"),
                leaves,
                build,
            }
        }
        2 => {
            let rows = rng.random_range(1..5);
            let (ca, cb) = (rng.random_range(1..4), rng.random_range(1..4));
            let leaves = vec![
                rand_tensor(&mut rng, rows, ca),
                rand_tensor(&mut rng, rows, cb),
                rand_tensor(&mut rng, 1, ca + cb),
            ];
            let k = rng.random_range(-2.0..2.0);
            let build: Builder = Box::new(move |tape, v| {
                let cat = tape.concat(&[v[0], v[1]]).expect("concat");
                let b = tape.broadcast(v[2], rows).expect("broadcast");
                let p = tape.mul(cat, b).expect("mul");
                let g = tape.gelu(p);
                let d = tape.sub(g, cat).expect("sub");
                let sq = tape.square(d);
                let r = tape.sum_rows(sq).expect("sum_rows");
                let r = tape.scale(r, k);
                tape.mean(r)
            });
            GradCase {
                name: "concat/broadcast/gelu/sum_rows".into(),
                leaves,
                build,
            }
        }
        _ => {
            let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
            let bias: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let leaves = vec![
                rand_tensor(&mut rng, m, k),
                rand_tensor(&mut rng, k, n),
                Tensor::from_parts(vec![n], bias),
                Tensor::scalar(rng.random_range(-1.0..1.0)),
            ];
            let build: Builder = Box::new(move |tape, v| {
                let p = tape.matmul(v[0], v[1]).expect("matmul");
                let b = tape.broadcast(v[2], m).expect("broadcast bias");
                let q = tape.add(p, b).expect("add");
                let r = tape.relu(q);
                let qq = tape.mul(q, r).expect("mul");
                let sub = tape.sub(qq, p).expect("sub");
                let rows = tape.sum_rows(sub).expect("sum_rows");
                let s = tape.broadcast(v[3], m).expect("broadcast scalar");
                let t = tape.mul(rows, s).expect("mul");
                tape.sum(t)
            });
            GradCase {
                name: "matmul/relu/mul".into(),
                leaves,
                build,
            }
        }
    }
}

/// Policy whose field is the rotation `v(x) = [−x₂, x₁]`, independent of τ.
pub fn rotation_policy(n_steps: usize) -> FlowPolicy {
    linear_policy([[0.0, -1.0], [1.0, 0.0]], [0.0, 0.0], n_steps)
}

/// Policy whose field is `v(x) = A x + b`.
pub fn linear_policy(a: [[f64; 2]; 2], b: [f64; 2], n_steps: usize) -> FlowPolicy {
    let embed = FourierEmbed::new(2).unwrap();
    let spec = MlpSpec::new(4, &[], 2, Activation::Relu);
    // row input [x1, x2, sin, cos] times W[4, 2]
    let w = vec![a[0][0], a[1][0], a[0][1], a[1][1], 0.0, 0.0, 0.0, 0.0];
    let layer = Layer {
        weight: Tensor::matrix(4, 2, w),
        bias: Tensor::from_parts(vec![2], b.to_vec()),
    };
    let net = Mlp::from_layers(spec, vec![layer]).unwrap();
    FlowPolicy::from_net(net, embed, 2, 0, n_steps).unwrap()
}

/// `exp(A t) x0` for the rotation generator: rotation by angle `t`.
pub fn rotation_exact(x0: [f64; 2], t: f64) -> [f64; 2] {
    // matrix exponential of [[0, −t], [t, 0]] via its power series
    let mut term = [[1.0, 0.0], [0.0, 1.0]];
    let mut sum = term;
    let gen = [[0.0, -t], [t, 0.0]];
    for k in 1..60 {
        let mut next = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                next[i][j] = (term[i][0] * gen[0][j] + term[i][1] * gen[1][j]) / k as f64;
            }
        }
        term = next;
        for i in 0..2 {
            for j in 0..2 {
                sum[i][j] += term[i][j];
            }
        }
    }
    [
        sum[0][0] * x0[0] + sum[0][1] * x0[1],
        sum[1][0] * x0[0] + sum[1][1] * x0[1],
    ]
}

/// Full-scan nearest neighbour: `(distance, index)`, first index on ties.
pub fn brute_nearest(points: &[[f64; 2]], q: [f64; 2]) -> (f64, usize) {
    let mut best = (f64::INFINITY, 0);
    for (i, p) in points.iter().enumerate() {
        let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
        if d < best.0 {
            best = (d, i);
        }
    }
    best
}

/// Endpoint error of the rotation flow with `n` Euler steps from `x0`.
pub fn rotation_error(n: usize, x0: [f64; 2]) -> f64 {
    let p = rotation_policy(n);
    let x = Tensor::matrix(1, 2, x0.to_vec());
    let y = p
        .flow_map(&x, 0.0, &qflow_core::flow::empty_states(1))
        .expect("finite rollout");
    let e = rotation_exact(x0, 1.0);
    ((y.get(0, 0) - e[0]).powi(2) + (y.get(0, 1) - e[1]).powi(2)).sqrt()
}
