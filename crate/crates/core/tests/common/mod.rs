//! Independent oracles shared by the integration suites: a dense unitary-product circuit
//! simulator and central finite differences over tapes and the full network. Each sweep
//! returns its worst observed deviation so callers can apply their own tolerance.

#![allow(dead_code)]

pub mod fixtures;

use std::f64::consts::PI;

use num_complex::Complex64 as C;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qdiff::autodiff::{Tape, Var};
use qdiff::diffusion::Denoiser;
use qdiff::quantum::{
    circuit_jacobian, circuit_layer, parameter_shift_grad, run_circuit, Ansatz, CircuitConfig,
    QuantumWeights, StateVector,
};
use qdiff::unet::{BottleneckKind, UNet, UNetConfig};
use qdiff::{GradSet, ParamSet, Tensor};

type Matrix = Vec<Vec<C>>;

fn identity(dim: usize) -> Matrix {
    (0..dim)
        .map(|i| {
            (0..dim)
                .map(|j| {
                    if i == j {
                        C::new(1.0, 0.0)
                    } else {
                        C::new(0.0, 0.0)
                    }
                })
                .collect()
        })
        .collect()
}

fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let n = a.len();
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| (0..n).map(|k| a[i][k] * b[k][j]).sum())
                .collect()
        })
        .collect()
}

/// Embed a 2×2 gate acting on qubit `q` (bit `q` of the basis index) into `2^n` dimensions.
fn single(n: usize, q: usize, g: [[C; 2]; 2]) -> Matrix {
    let dim = 1 << n;
    let mut m = vec![vec![C::new(0.0, 0.0); dim]; dim];
    for (row, m_row) in m.iter_mut().enumerate() {
        for (col, entry) in m_row.iter_mut().enumerate() {
            if (row ^ col) & !(1 << q) == 0 {
                *entry = g[(row >> q) & 1][(col >> q) & 1];
            }
        }
    }
    m
}

fn ry(theta: f64) -> [[C; 2]; 2] {
    let (s, c) = (theta / 2.0).sin_cos();
    [
        [C::new(c, 0.0), C::new(-s, 0.0)],
        [C::new(s, 0.0), C::new(c, 0.0)],
    ]
}

fn rz(theta: f64) -> [[C; 2]; 2] {
    [
        [C::from_polar(1.0, -theta / 2.0), C::new(0.0, 0.0)],
        [C::new(0.0, 0.0), C::from_polar(1.0, theta / 2.0)],
    ]
}

fn cnot(n: usize, control: usize, target: usize) -> Matrix {
    let dim = 1 << n;
    let mut m = vec![vec![C::new(0.0, 0.0); dim]; dim];
    for col in 0..dim {
        let row = if col >> control & 1 == 1 {
            col ^ (1 << target)
        } else {
            col
        };
        m[row][col] = C::new(1.0, 0.0);
    }
    m
}

/// ⟨Z_i⟩ of the circuit built as an explicit product of dense gate matrices.
pub fn dense_circuit(cfg: &CircuitConfig, inputs: &[f64], weights: &[f64]) -> Vec<f64> {
    let n = cfg.n_qubits;
    let mut u = identity(1 << n);
    let mut push = |g: Matrix| u = matmul(&g, &u);
    for (q, &x) in inputs.iter().enumerate() {
        push(single(n, q, ry(x)));
    }
    for l in 0..cfg.n_layers {
        for q in 0..n {
            let w = weights[l * n + q];
            let g = match cfg.ansatz {
                Ansatz::PaperLiteral => rz(w),
                Ansatz::RyVariational => ry(w),
            };
            push(single(n, q, g));
        }
        for q in 0..n.saturating_sub(1) {
            push(cnot(n, q, q + 1));
        }
    }
    let psi: Vec<C> = u.iter().map(|row| row[0]).collect();
    (0..n)
        .map(|q| {
            psi.iter()
                .enumerate()
                .map(|(k, a)| {
                    if k >> q & 1 == 0 {
                        a.norm_sqr()
                    } else {
                        -a.norm_sqr()
                    }
                })
                .sum()
        })
        .collect()
}

pub fn random_case(rng: &mut ChaCha8Rng, cfg: &CircuitConfig) -> (Vec<f64>, QuantumWeights) {
    let inputs = (0..cfg.n_qubits)
        .map(|_| rng.random_range(-PI..PI))
        .collect();
    let weights = (0..cfg.weight_count())
        .map(|_| rng.random_range(-2.0 * PI..2.0 * PI))
        .collect();
    (
        inputs,
        QuantumWeights::new(cfg.n_layers, cfg.n_qubits, weights).unwrap(),
    )
}

pub fn circuit(n: usize, l: usize, ansatz: Ansatz) -> CircuitConfig {
    CircuitConfig {
        n_qubits: n,
        n_layers: l,
        ansatz,
    }
}

/// Largest `|simulator − dense|` over `draws` random circuits with 1 to 4 qubits, 0 to 3
/// layers and both ansätze.
pub fn dense_oracle_sweep(draws: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for draw in 0..draws {
        let ansatz = if draw % 2 == 0 {
            Ansatz::RyVariational
        } else {
            Ansatz::PaperLiteral
        };
        let c = circuit(1 + draw % 4, draw % 4, ansatz);
        let (x, w) = random_case(&mut rng, &c);
        let got = run_circuit(&c, &x, &w).unwrap();
        for (g, e) in got.iter().zip(dense_circuit(&c, &x, w.as_slice())) {
            worst = worst.max((g - e).abs());
        }
    }
    worst
}

/// `|‖ψ‖² − 1|` after a long random gate sequence on 16 qubits.
pub fn sixteen_qubit_norm_drift(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = StateVector::zero_state(16).unwrap();
    for _ in 0..200 {
        let q = rng.random_range(0..16);
        match rng.random_range(0..3) {
            0 => s.apply_ry(q, rng.random_range(-PI..PI)).unwrap(),
            1 => s.apply_rz(q, rng.random_range(-PI..PI)).unwrap(),
            _ => s
                .apply_cnot(q, (q + 1 + rng.random_range(0..15)) % 16)
                .unwrap(),
        }
    }
    s.apply_cnot_chain();
    (s.norm_sqr() - 1.0).abs()
}

/// `Σ_j u_j ⟨Z_j⟩`.
fn weighted_output(c: &CircuitConfig, x: &[f64], w: &[f64], u: &[f64]) -> f64 {
    let qw = QuantumWeights::new(c.n_layers, c.n_qubits, w.to_vec()).unwrap();
    run_circuit(c, x, &qw)
        .unwrap()
        .iter()
        .zip(u)
        .map(|(a, b)| a * b)
        .sum()
}

/// Central difference of `weighted_output` in input `p` (`weight = false`) or weight `p`.
fn circuit_fd(
    c: &CircuitConfig,
    x: &[f64],
    w: &[f64],
    u: &[f64],
    weight: bool,
    p: usize,
    h: f64,
) -> f64 {
    let (mut xa, mut xb, mut wa, mut wb) = (x.to_vec(), x.to_vec(), w.to_vec(), w.to_vec());
    if weight {
        wa[p] += h;
        wb[p] -= h;
    } else {
        xa[p] += h;
        xb[p] -= h;
    }
    (weighted_output(c, &xa, &wa, u) - weighted_output(c, &xb, &wb, u)) / (2.0 * h)
}

/// Largest `|shift − FD|` over `cases` random circuits of size `n × l`, checking the listed
/// input and weight indices (all of them when `None`).
pub fn shift_vs_fd(
    n: usize,
    l: usize,
    cases: usize,
    inputs: Option<&[usize]>,
    weights: Option<&[usize]>,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = circuit(n, l, Ansatz::RyVariational);
    let all_x: Vec<usize> = (0..n).collect();
    let all_w: Vec<usize> = (0..n * l).collect();
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (x, w) = random_case(&mut rng, &c);
        let u: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (gx, gw) = parameter_shift_grad(&c, &x, &w, &u).unwrap();
        for &p in inputs.unwrap_or(&all_x) {
            worst = worst.max((gx[p] - circuit_fd(&c, &x, w.as_slice(), &u, false, p, 1e-6)).abs());
        }
        for &p in weights.unwrap_or(&all_w) {
            worst = worst.max((gw[p] - circuit_fd(&c, &x, w.as_slice(), &u, true, p, 1e-6)).abs());
        }
    }
    worst
}

/// Largest weight derivative of the literal RZ+CNOT circuit over `configs` random
/// configurations of 1 to 6 qubits and 1 to 3 layers.
pub fn literal_weight_gradient(configs: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for k in 0..configs {
        let c = circuit(1 + k % 6, 1 + k % 3, Ansatz::PaperLiteral);
        let (x, w) = random_case(&mut rng, &c);
        let jac = circuit_jacobian(&c, &x, &w, false, true).unwrap();
        for row in &jac.weights {
            worst = row.iter().fold(worst, |m, v| m.max(v.abs()));
        }
    }
    worst
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Worst relative error between tape gradients and central differences (step 1e-6) for every
/// input of `build(tape, inputs) → output` under `mse(output, target)` with a random target.
pub fn fd_check(inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let run = |values: &[Tensor], target: Option<&Tensor>| -> (f64, Tensor, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.param(v.clone())).collect();
        let out = build(&mut tape, &vars);
        let target = target.cloned().unwrap_or_else(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            random(&mut rng, tape.value(out).shape())
        });
        let t = tape.constant(target.clone());
        let loss = tape.mse_loss(out, t).unwrap();
        let value = tape.value(loss).item().unwrap();
        tape.backward(loss).unwrap();
        let grads = vars
            .iter()
            .map(|&v| tape.grad(v).expect("input gradient").to_vec())
            .collect();
        (value, target, grads)
    };
    let (_, target, analytic) = run(&inputs, None);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        for p in 0..input.numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[p] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[p] -= h;
            let fd = (run(&plus, Some(&target)).0 - run(&minus, Some(&target)).0) / (2.0 * h);
            worst = worst.max(relative_error(fd, analytic[i][p]));
        }
    }
    worst
}

/// Finite-difference checks of every differentiable primitive, with their worst errors.
pub fn primitive_checks() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let r = &mut rng;

    let inputs = vec![random(r, &[3, 4]), random(r, &[4, 5]), random(r, &[5])];
    out.push((
        "linear".into(),
        fd_check(inputs, |t, v| t.linear(v[0], v[1], v[2]).unwrap()),
    ));

    for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
        let inputs = vec![
            random(r, &[2, 2, 5, 6]),
            random(r, &[3, 2, 3, 3]),
            random(r, &[3]),
        ];
        let e = fd_check(inputs, |t, v| {
            t.conv2d(v[0], v[1], v[2], stride, pad).unwrap()
        });
        out.push((format!("conv2d s{stride} p{pad}"), e));
    }
    for (k, stride, pad) in [(4, 2, 1), (3, 1, 1), (3, 2, 0)] {
        let inputs = vec![
            random(r, &[2, 3, 3, 4]),
            random(r, &[3, 2, k, k]),
            random(r, &[2]),
        ];
        let e = fd_check(inputs, |t, v| {
            t.conv_transpose2d(v[0], v[1], v[2], stride, pad).unwrap()
        });
        out.push((format!("conv_transpose2d k{k} s{stride} p{pad}"), e));
    }

    // ReLU inputs kept away from the kink.
    let x = Tensor::from_fn(&[2, 7], |i| {
        let v: f64 = r.random_range(0.05..1.0);
        if i % 2 == 0 {
            v
        } else {
            -v
        }
    });
    out.push(("relu".into(), fd_check(vec![x], |t, v| t.relu(v[0]))));
    out.push((
        "silu".into(),
        fd_check(vec![random(r, &[2, 3, 2, 2])], |t, v| t.silu(v[0])),
    ));
    out.push((
        "global_avg_pool".into(),
        fd_check(vec![random(r, &[2, 3, 4, 5])], |t, v| {
            t.global_avg_pool(v[0]).unwrap()
        }),
    ));
    out.push((
        "broadcast_mul_channelwise".into(),
        fd_check(
            vec![random(r, &[2, 3, 2, 2]), random(r, &[2, 3])],
            |t, v| t.broadcast_mul_channelwise(v[0], v[1]).unwrap(),
        ),
    ));
    out.push((
        "broadcast_add_channelwise".into(),
        fd_check(
            vec![random(r, &[2, 3, 2, 2]), random(r, &[2, 3])],
            |t, v| t.broadcast_add_channelwise(v[0], v[1]).unwrap(),
        ),
    ));
    out.push((
        "add".into(),
        fd_check(vec![random(r, &[3, 4]), random(r, &[3, 4])], |t, v| {
            t.add(v[0], v[1]).unwrap()
        }),
    ));
    out.push((
        "concat_channels".into(),
        fd_check(
            vec![random(r, &[2, 1, 2, 3]), random(r, &[2, 2, 2, 3])],
            |t, v| t.concat_channels(v[0], v[1]).unwrap(),
        ),
    ));
    out.push((
        "sum".into(),
        fd_check(vec![random(r, &[3, 2])], |t, v| t.sum(v[0])),
    ));
    out.push((
        "mse_loss".into(),
        fd_check(vec![random(r, &[2, 5]), random(r, &[2, 5])], |t, v| {
            let l = t.mse_loss(v[0], v[1]).unwrap();
            let c = t.constant(Tensor::scalar(0.25));
            t.add(l, c).unwrap()
        }),
    ));
    let cfg = circuit(3, 2, Ansatz::RyVariational);
    out.push((
        "circuit_layer".into(),
        fd_check(vec![random(r, &[2, 3]), random(r, &[2, 3])], move |t, v| {
            circuit_layer(t, &cfg, v[0], v[1], 1).unwrap()
        }),
    ));
    out.push((
        "composite".into(),
        fd_check(
            vec![
                random(r, &[1, 2, 4, 4]),
                random(r, &[2, 2, 3, 3]),
                random(r, &[2]),
            ],
            |t, v| {
                let a = t.conv2d(v[0], v[1], v[2], 1, 1).unwrap();
                let a = t.silu(a);
                let b = t.add(a, v[0]).unwrap();
                let p = t.global_avg_pool(b).unwrap();
                t.broadcast_mul_channelwise(b, p).unwrap()
            },
        ),
    ));
    out
}

/// Loss of the full network for fixed inputs; gradients only when `backward` is set.
fn unet_loss(
    config: UNetConfig,
    params: &ParamSet,
    x: &Tensor,
    eps: &Tensor,
    steps: &[usize],
    backward: bool,
) -> (f64, GradSet) {
    let model = UNet::from_params(config, params.clone()).unwrap();
    let mut tape = Tape::new();
    let bound = if backward {
        params.bind(&mut tape)
    } else {
        params.bind_frozen(&mut tape)
    };
    let xv = tape.constant(x.clone());
    let target = tape.constant(eps.clone());
    let pred = model.predict(&mut tape, &bound, xv, steps).unwrap();
    let loss = tape.mse_loss(pred, target).unwrap();
    let value = tape.value(loss).item().unwrap();
    if !backward {
        return (value, GradSet::default());
    }
    tape.backward(loss).unwrap();
    (value, bound.grads(&tape))
}

/// Worst relative error over 20 spot parameters of the full network: every quantum tensor plus
/// a seeded draw over the rest. Step 1e-5.
pub fn unet_fd_check(kind: BottleneckKind, skip: bool) -> f64 {
    let mut cfg = UNetConfig::new(1, kind, Ansatz::RyVariational);
    cfg.skip_connections = skip;
    let params = UNet::new(cfg, 13).unwrap().params().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = random(&mut rng, &[2, 1, 28, 28]);
    let eps = random(&mut rng, &[2, 1, 28, 28]);
    let steps = [3, 150];
    let (_, grads) = unet_loss(cfg, &params, &x, &eps, &steps, true);

    let names: Vec<String> = params.names().map(str::to_owned).collect();
    let mut spots: Vec<(String, usize)> = Vec::new();
    for n in names.iter().filter(|n| n.starts_with("mid.quantum")) {
        spots.push((
            n.clone(),
            rng.random_range(0..params.get(n).unwrap().numel()),
        ));
    }
    while spots.len() < 20 {
        let n = &names[rng.random_range(0..names.len())];
        spots.push((
            n.clone(),
            rng.random_range(0..params.get(n).unwrap().numel()),
        ));
    }

    let h = 1e-5;
    let mut worst = 0.0f64;
    for (name, idx) in &spots {
        let mut plus = params.clone();
        plus.get_mut(name).unwrap().data_mut()[*idx] += h;
        let mut minus = params.clone();
        minus.get_mut(name).unwrap().data_mut()[*idx] -= h;
        let fd = (unet_loss(cfg, &plus, &x, &eps, &steps, false).0
            - unet_loss(cfg, &minus, &x, &eps, &steps, false).0)
            / (2.0 * h);
        worst = worst.max(relative_error(fd, grads[name][*idx]));
    }
    worst
}
