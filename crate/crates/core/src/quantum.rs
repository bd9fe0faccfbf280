//! Exact statevector simulation of the variational bottleneck circuit.
//!
//! Qubit `i` is bit `i` of the basis-state index. The circuit is
//!
//! ```text
//! RY(x_i) on every qubit                       (angle encoding)
//! repeat L times:
//!     R(w_{l,i}) on every qubit                (RZ for the literal ansatz, RY for the trainable one)
//!     CNOT(0→1), CNOT(1→2), …, CNOT(n−2→n−1)   (linear entangling chain)
//! read out ⟨Z_i⟩ for every qubit
//! ```
//!
//! Gradients of every rotation angle come from the two-term parameter-shift rule.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Function, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const HALF_PI: f64 = std::f64::consts::FRAC_PI_2;

/// Largest register the simulator will allocate (2^24 amplitudes, 256 MiB).
pub const MAX_QUBITS: usize = 24;

/// Which rotation carries the trainable weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ansatz {
    /// Trainable RZ rotations. Every weight is unobservable in the Z-basis readout.
    PaperLiteral,
    /// Trainable RY rotations.
    RyVariational,
}

impl std::str::FromStr for Ansatz {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper_literal" => Ok(Self::PaperLiteral),
            "ry_variational" => Ok(Self::RyVariational),
            other => Err(Error::contract(format!("unknown ansatz {other:?}"))),
        }
    }
}

impl std::fmt::Display for Ansatz {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::PaperLiteral => "paper_literal",
            Self::RyVariational => "ry_variational",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CircuitConfig {
    pub n_qubits: usize,
    pub n_layers: usize,
    pub ansatz: Ansatz,
}

impl CircuitConfig {
    /// 16 qubits, 3 variational layers.
    pub fn bottleneck(ansatz: Ansatz) -> Self {
        Self {
            n_qubits: 16,
            n_layers: 3,
            ansatz,
        }
    }

    pub fn weight_count(&self) -> usize {
        self.n_layers * self.n_qubits
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_qubits == 0 || self.n_qubits > MAX_QUBITS {
            return Err(Error::contract(format!(
                "n_qubits must be in 1..={MAX_QUBITS}, got {}",
                self.n_qubits
            )));
        }
        Ok(())
    }

    fn check(&self, inputs: &[f64], weights: &QuantumWeights) -> Result<()> {
        self.validate()?;
        if inputs.len() != self.n_qubits {
            return Err(Error::contract(format!(
                "circuit has {} qubits but {} input angles were given",
                self.n_qubits,
                inputs.len()
            )));
        }
        if weights.layers != self.n_layers || weights.qubits != self.n_qubits {
            return Err(Error::contract(format!(
                "weights are {}×{} but the circuit is {}×{}",
                weights.layers, weights.qubits, self.n_layers, self.n_qubits
            )));
        }
        if inputs.iter().chain(&weights.values).any(|v| !v.is_finite()) {
            return Err(Error::contract("non-finite rotation angle"));
        }
        Ok(())
    }
}

/// Rotation angles `w[l][i]` in radians, stored row-major by layer.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantumWeights {
    layers: usize,
    qubits: usize,
    values: Vec<f64>,
}

impl QuantumWeights {
    pub fn new(layers: usize, qubits: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != layers * qubits {
            return Err(Error::contract(format!(
                "{layers}×{qubits} weight grid needs {} values, got {}",
                layers * qubits,
                values.len()
            )));
        }
        Ok(Self {
            layers,
            qubits,
            values,
        })
    }

    pub fn zeros(cfg: &CircuitConfig) -> Self {
        Self {
            layers: cfg.n_layers,
            qubits: cfg.n_qubits,
            values: vec![0.0; cfg.weight_count()],
        }
    }

    pub fn get(&self, layer: usize, qubit: usize) -> f64 {
        self.values[layer * self.qubits + qubit]
    }

    pub fn layer(&self, layer: usize) -> &[f64] {
        &self.values[layer * self.qubits..(layer + 1) * self.qubits]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

/// Basis index reached from `b` by the CNOT chain `0→1, 1→2, …`: bit `i` becomes the XOR of bits
/// `0..=i`.
#[inline]
fn chain_image(b: usize, mask: usize) -> usize {
    let mut x = b;
    x ^= x << 1;
    x ^= x << 2;
    x ^= x << 4;
    x ^= x << 8;
    x ^= x << 16;
    x & mask
}

/// `2^n` complex amplitudes held as separate real and imaginary arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    n_qubits: usize,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl StateVector {
    /// `|0…0⟩`.
    pub fn zero_state(n_qubits: usize) -> Result<Self> {
        if n_qubits == 0 || n_qubits > MAX_QUBITS {
            return Err(Error::contract(format!(
                "n_qubits must be in 1..={MAX_QUBITS}"
            )));
        }
        let dim = 1usize << n_qubits;
        let mut re = vec![0.0; dim];
        re[0] = 1.0;
        Ok(Self {
            n_qubits,
            re,
            im: vec![0.0; dim],
        })
    }

    /// Tensor product of single-qubit states; `factors[i] = (amp0, amp1)` for qubit `i`.
    fn product(factors: &[[(f64, f64); 2]]) -> Self {
        let n = factors.len();
        let dim = 1usize << n;
        let mut re = Vec::with_capacity(dim);
        let mut im = Vec::with_capacity(dim);
        re.push(1.0);
        im.push(0.0);
        for [(a0r, a0i), (a1r, a1i)] in factors {
            let len = re.len();
            for j in 0..len {
                let (r, i) = (re[j], im[j]);
                re.push(r * a1r - i * a1i);
                im.push(r * a1i + i * a1r);
                re[j] = r * a0r - i * a0i;
                im[j] = r * a0i + i * a0r;
            }
        }
        Self {
            n_qubits: n,
            re,
            im,
        }
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn dim(&self) -> usize {
        self.re.len()
    }

    pub fn amplitude(&self, index: usize) -> (f64, f64) {
        (self.re[index], self.im[index])
    }

    pub fn norm_sqr(&self) -> f64 {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(r, i)| r * r + i * i)
            .sum()
    }

    fn check_qubit(&self, q: usize) -> Result<()> {
        if q >= self.n_qubits {
            return Err(Error::contract(format!(
                "qubit {q} out of range for a {}-qubit register",
                self.n_qubits
            )));
        }
        Ok(())
    }

    /// `[[cos θ/2, −sin θ/2], [sin θ/2, cos θ/2]]` on qubit `q`.
    pub fn apply_ry(&mut self, q: usize, theta: f64) -> Result<()> {
        self.check_qubit(q)?;
        self.ry_unchecked(q, theta);
        Ok(())
    }

    fn ry_unchecked(&mut self, q: usize, theta: f64) {
        let (s, c) = (theta / 2.0).sin_cos();
        let stride = 1usize << q;
        for part in [&mut self.re, &mut self.im] {
            for block in part.chunks_exact_mut(2 * stride) {
                let (lo, hi) = block.split_at_mut(stride);
                for (a0, a1) in lo.iter_mut().zip(hi.iter_mut()) {
                    let (x0, x1) = (*a0, *a1);
                    *a0 = c * x0 - s * x1;
                    *a1 = s * x0 + c * x1;
                }
            }
        }
    }

    /// `diag(e^{−iθ/2}, e^{iθ/2})` on qubit `q`.
    pub fn apply_rz(&mut self, q: usize, theta: f64) -> Result<()> {
        self.check_qubit(q)?;
        self.rz_unchecked(q, theta);
        Ok(())
    }

    fn rz_unchecked(&mut self, q: usize, theta: f64) {
        let (s, c) = (theta / 2.0).sin_cos();
        let stride = 1usize << q;
        for (rb, ib) in self
            .re
            .chunks_exact_mut(2 * stride)
            .zip(self.im.chunks_exact_mut(2 * stride))
        {
            for (k, (r, i)) in rb.iter_mut().zip(ib.iter_mut()).enumerate() {
                // e^{∓iθ/2} = c ∓ i·s
                let sign = if k < stride { -s } else { s };
                let (x, y) = (*r, *i);
                *r = c * x - sign * y;
                *i = c * y + sign * x;
            }
        }
    }

    /// All RZ rotations of one layer in a single pass; `angles[i]` acts on qubit `i`.
    fn rz_layer(&mut self, angles: &[f64]) {
        let n = self.n_qubits;
        let lo_bits = n.div_ceil(2);
        let phase_table = |range: std::ops::Range<usize>| -> Vec<(f64, f64)> {
            let bits = range.len();
            (0..1usize << bits)
                .map(|k| {
                    let phase: f64 = range
                        .clone()
                        .enumerate()
                        .map(|(j, q)| {
                            if k >> j & 1 == 1 {
                                angles[q] / 2.0
                            } else {
                                -angles[q] / 2.0
                            }
                        })
                        .sum();
                    let (s, c) = phase.sin_cos();
                    (c, s)
                })
                .collect()
        };
        let lo = phase_table(0..lo_bits);
        let hi = phase_table(lo_bits..n);
        let lo_mask = (1usize << lo_bits) - 1;
        for (b, (r, i)) in self.re.iter_mut().zip(self.im.iter_mut()).enumerate() {
            let (lc, ls) = lo[b & lo_mask];
            let (hc, hs) = hi[b >> lo_bits];
            let (c, s) = (lc * hc - ls * hs, lc * hs + ls * hc);
            let (x, y) = (*r, *i);
            *r = c * x - s * y;
            *i = c * y + s * x;
        }
    }

    /// Flip `target` wherever `control` is set.
    pub fn apply_cnot(&mut self, control: usize, target: usize) -> Result<()> {
        self.check_qubit(control)?;
        self.check_qubit(target)?;
        if control == target {
            return Err(Error::contract(format!(
                "CNOT control and target are both {control}"
            )));
        }
        let (cm, tm) = (1usize << control, 1usize << target);
        for b in 0..self.dim() {
            if b & cm != 0 && b & tm == 0 {
                self.re.swap(b, b | tm);
                self.im.swap(b, b | tm);
            }
        }
        Ok(())
    }

    /// `CNOT(0→1), CNOT(1→2), …, CNOT(n−2→n−1)` as one basis permutation.
    pub fn apply_cnot_chain(&mut self) {
        let mask = self.dim() - 1;
        let mut re = vec![0.0; self.dim()];
        let mut im = vec![0.0; self.dim()];
        for b in 0..self.dim() {
            let d = chain_image(b, mask);
            re[d] = self.re[b];
            im[d] = self.im[b];
        }
        self.re = re;
        self.im = im;
    }

    /// `⟨Z_i⟩` for every qubit.
    pub fn z_expectations(&self) -> Vec<f64> {
        self.expectations(false)
    }

    /// Marginal Z expectations; with `chain_pending` the readout is taken as if the CNOT chain
    /// had been applied first (a basis permutation never changes probabilities, only labels).
    fn expectations(&self, chain_pending: bool) -> Vec<f64> {
        let n = self.n_qubits;
        let lo_bits = n.div_ceil(2);
        let lo_mask = (1usize << lo_bits) - 1;
        let mask = self.dim() - 1;
        let mut lo = vec![0.0; 1 << lo_bits];
        let mut hi = vec![0.0; 1 << (n - lo_bits)];
        for (b, (r, i)) in self.re.iter().zip(&self.im).enumerate() {
            let p = r * r + i * i;
            let m = if chain_pending {
                chain_image(b, mask)
            } else {
                b
            };
            lo[m & lo_mask] += p;
            hi[m >> lo_bits] += p;
        }
        let marginal = |table: &[f64], bit: usize| -> f64 {
            table
                .iter()
                .enumerate()
                .map(|(k, &p)| if k >> bit & 1 == 1 { -p } else { p })
                .sum()
        };
        (0..n)
            .map(|q| {
                if q < lo_bits {
                    marginal(&lo, q)
                } else {
                    marginal(&hi, q - lo_bits)
                }
            })
            .collect()
    }

    fn rotation_layer(&mut self, ansatz: Ansatz, angles: &[f64]) {
        match ansatz {
            Ansatz::PaperLiteral => self.rz_layer(angles),
            Ansatz::RyVariational => {
                for (q, &a) in angles.iter().enumerate() {
                    self.ry_unchecked(q, a);
                }
            }
        }
    }

    fn rotate(&mut self, ansatz: Ansatz, q: usize, angle: f64) {
        match ansatz {
            Ansatz::PaperLiteral => self.rz_unchecked(q, angle),
            Ansatz::RyVariational => self.ry_unchecked(q, angle),
        }
    }
}

/// Per-qubit state after the encoding rotation and (if present) the first weight rotation.
/// Both act on the same qubit before any entangling gate, so the register is still a product
/// state at that point.
fn first_layer_factor(cfg: &CircuitConfig, x: f64, w0: Option<f64>) -> [(f64, f64); 2] {
    match (cfg.ansatz, w0) {
        (_, None) => {
            let (s, c) = (x / 2.0).sin_cos();
            [(c, 0.0), (s, 0.0)]
        }
        (Ansatz::RyVariational, Some(w)) => {
            let (s, c) = ((x + w) / 2.0).sin_cos();
            [(c, 0.0), (s, 0.0)]
        }
        (Ansatz::PaperLiteral, Some(w)) => {
            let (s, c) = (x / 2.0).sin_cos();
            let (ps, pc) = (w / 2.0).sin_cos();
            [(c * pc, -c * ps), (s * pc, s * ps)]
        }
    }
}

struct Evaluator<'a> {
    cfg: &'a CircuitConfig,
    inputs: &'a [f64],
    weights: &'a QuantumWeights,
}

impl Evaluator<'_> {
    fn factors(&self, shift: Option<(usize, f64, f64)>) -> Vec<[(f64, f64); 2]> {
        (0..self.cfg.n_qubits)
            .map(|q| {
                let mut x = self.inputs[q];
                let mut w0 = (self.cfg.n_layers > 0).then(|| self.weights.get(0, q));
                if let Some((sq, dx, dw)) = shift {
                    if sq == q {
                        x += dx;
                        w0 = w0.map(|w| w + dw);
                    }
                }
                first_layer_factor(self.cfg, x, w0)
            })
            .collect()
    }

    /// Run layers `from..L` on a state that has had layers `..from` applied except for the
    /// final CNOT chain of layer `from − 1`, then read out.
    fn finish(&self, mut state: StateVector, from: usize) -> Vec<f64> {
        let layers = self.cfg.n_layers;
        if layers == 0 {
            return state.expectations(false);
        }
        for l in from..layers {
            state.apply_cnot_chain();
            state.rotation_layer(self.cfg.ansatz, self.weights.layer(l));
        }
        state.expectations(true)
    }

    fn run(&self) -> Vec<f64> {
        self.finish(StateVector::product(&self.factors(None)), 1)
    }

    fn shifted_first_layer(&self, qubit: usize, dx: f64, dw: f64) -> Vec<f64> {
        self.finish(
            StateVector::product(&self.factors(Some((qubit, dx, dw)))),
            1,
        )
    }
}

/// Pauli-Z expectations of every qubit after the full circuit.
pub fn run_circuit(
    cfg: &CircuitConfig,
    inputs: &[f64],
    weights: &QuantumWeights,
) -> Result<Vec<f64>> {
    cfg.check(inputs, weights)?;
    Ok(Evaluator {
        cfg,
        inputs,
        weights,
    }
    .run())
}

/// Full Jacobian of the readout with respect to every rotation angle.
#[derive(Debug, Clone, PartialEq)]
pub struct CircuitJacobian {
    /// `inputs[p][j] = ∂⟨Z_j⟩/∂x_p`
    pub inputs: Vec<Vec<f64>>,
    /// `weights[l·n + i][j] = ∂⟨Z_j⟩/∂w_{l,i}`
    pub weights: Vec<Vec<f64>>,
}

fn shift_difference(plus: Vec<f64>, minus: Vec<f64>) -> Vec<f64> {
    plus.iter()
        .zip(&minus)
        .map(|(p, m)| (p - m) / 2.0)
        .collect()
}

/// Parameter-shift Jacobian: `∂⟨Z_j⟩/∂φ = (⟨Z_j⟩(φ + π/2) − ⟨Z_j⟩(φ − π/2)) / 2` for every
/// encoding angle (when `want_inputs`) and every weight (when `want_weights`).
pub fn circuit_jacobian(
    cfg: &CircuitConfig,
    inputs: &[f64],
    weights: &QuantumWeights,
    want_inputs: bool,
    want_weights: bool,
) -> Result<CircuitJacobian> {
    cfg.check(inputs, weights)?;
    let ev = Evaluator {
        cfg,
        inputs,
        weights,
    };
    let n = cfg.n_qubits;
    let mut jac = CircuitJacobian {
        inputs: Vec::new(),
        weights: Vec::new(),
    };
    if want_inputs {
        jac.inputs = (0..n)
            .map(|q| {
                shift_difference(
                    ev.shifted_first_layer(q, HALF_PI, 0.0),
                    ev.shifted_first_layer(q, -HALF_PI, 0.0),
                )
            })
            .collect();
    }
    if want_weights && cfg.n_layers > 0 {
        jac.weights.reserve(cfg.weight_count());
        for q in 0..n {
            jac.weights.push(shift_difference(
                ev.shifted_first_layer(q, 0.0, HALF_PI),
                ev.shifted_first_layer(q, 0.0, -HALF_PI),
            ));
        }
        // Rotations within a layer act on distinct qubits and commute, so shifting w_{l,i} is
        // the unshifted layer followed by an extra ±π/2 rotation on qubit i.
        let mut layer_state = StateVector::product(&ev.factors(None));
        for l in 1..cfg.n_layers {
            layer_state.apply_cnot_chain();
            layer_state.rotation_layer(cfg.ansatz, weights.layer(l));
            for q in 0..n {
                let mut readouts = [HALF_PI, -HALF_PI].map(|d| {
                    let mut s = layer_state.clone();
                    s.rotate(cfg.ansatz, q, d);
                    ev.finish(s, l + 1)
                });
                let minus = std::mem::take(&mut readouts[1]);
                let plus = std::mem::take(&mut readouts[0]);
                jac.weights.push(shift_difference(plus, minus));
            }
        }
    }
    Ok(jac)
}

/// Upstream-contracted parameter-shift gradients `(d_inputs, d_weights)`.
pub fn parameter_shift_grad(
    cfg: &CircuitConfig,
    inputs: &[f64],
    weights: &QuantumWeights,
    upstream: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if upstream.len() != cfg.n_qubits {
        return Err(Error::contract(format!(
            "upstream gradient has {} entries for {} outputs",
            upstream.len(),
            cfg.n_qubits
        )));
    }
    let jac = circuit_jacobian(cfg, inputs, weights, true, true)?;
    let contract = |rows: &[Vec<f64>]| -> Vec<f64> {
        rows.iter()
            .map(|r| r.iter().zip(upstream).map(|(a, b)| a * b).sum())
            .collect()
    };
    let d_weights = if cfg.n_layers == 0 {
        Vec::new()
    } else {
        contract(&jac.weights)
    };
    Ok((contract(&jac.inputs), d_weights))
}

/// The circuit as a tape primitive over a batch: angles `N×n`, weights `L×n` → `N×n`.
struct CircuitFn {
    cfg: CircuitConfig,
    workers: usize,
}

impl CircuitFn {
    fn sample_grads(
        &self,
        angles: &[f64],
        weights: &QuantumWeights,
        g: &[f64],
        needs: &[bool],
    ) -> (Vec<f64>, Vec<f64>) {
        let jac = circuit_jacobian(&self.cfg, angles, weights, needs[0], needs[1])
            .expect("angles and weights were validated by the forward pass");
        let contract = |rows: &[Vec<f64>]| -> Vec<f64> {
            rows.iter()
                .map(|r| r.iter().zip(g).map(|(a, b)| a * b).sum())
                .collect()
        };
        (contract(&jac.inputs), contract(&jac.weights))
    }
}

impl Function for CircuitFn {
    fn name(&self) -> &'static str {
        "quantum_circuit"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad_out: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let n = self.cfg.n_qubits;
        let weights = QuantumWeights::new(self.cfg.n_layers, n, inputs[1].data().to_vec())
            .expect("weight shape validated by the forward pass");
        let angles = inputs[0].data();
        let samples = angles.len() / n;

        // Per-sample gradients land in fixed slots and are reduced in sample order, so the
        // result does not depend on the worker count.
        let mut per_sample: Vec<(Vec<f64>, Vec<f64>)> = vec![Default::default(); samples];
        let workers = self.workers.clamp(1, samples.max(1));
        if workers == 1 {
            for (s, slot) in per_sample.iter_mut().enumerate() {
                *slot = self.sample_grads(
                    &angles[s * n..(s + 1) * n],
                    &weights,
                    &grad_out[s * n..(s + 1) * n],
                    needs,
                );
            }
        } else {
            let chunk = samples.div_ceil(workers);
            std::thread::scope(|scope| {
                for (c, slots) in per_sample.chunks_mut(chunk).enumerate() {
                    let weights = &weights;
                    scope.spawn(move || {
                        for (k, slot) in slots.iter_mut().enumerate() {
                            let s = c * chunk + k;
                            *slot = self.sample_grads(
                                &angles[s * n..(s + 1) * n],
                                weights,
                                &grad_out[s * n..(s + 1) * n],
                                needs,
                            );
                        }
                    });
                }
            });
        }

        let d_angles = needs[0].then(|| {
            per_sample
                .iter()
                .flat_map(|(a, _)| a.iter().copied())
                .collect()
        });
        let d_weights = needs[1].then(|| {
            let mut acc = vec![0.0; self.cfg.weight_count()];
            for (_, w) in &per_sample {
                acc.iter_mut().zip(w).for_each(|(a, b)| *a += b);
            }
            acc
        });
        vec![d_angles, d_weights]
    }
}

/// Record the circuit on `tape` for every row of `angles` (`N×n`) with shared `weights` (`L×n`).
pub fn circuit_layer(
    tape: &mut Tape,
    cfg: &CircuitConfig,
    angles: Var,
    weights: Var,
    workers: usize,
) -> Result<Var> {
    let av = tape.value(angles);
    let n = cfg.n_qubits;
    if av.shape().len() != 2 || av.shape()[1] != n {
        return Err(Error::contract(format!(
            "circuit input must be N×{n}, got {:?}",
            av.shape()
        )));
    }
    let qw = QuantumWeights::new(cfg.n_layers, n, tape.value(weights).data().to_vec())?;
    let mut out = Vec::with_capacity(av.numel());
    for row in av.data().chunks(n) {
        out.extend(run_circuit(cfg, row, &qw)?);
    }
    let value = Tensor::new(av.shape(), out)?;
    Ok(tape.custom(
        &[angles, weights],
        value,
        Box::new(CircuitFn { cfg: *cfg, workers }),
    ))
}

/// Tape handles of the quantum attention parameters.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    /// `C×n`
    pub proj_in_w: Var,
    pub proj_in_b: Var,
    /// `L×n`
    pub weights: Var,
    /// `n×C`
    pub proj_out_w: Var,
    pub proj_out_b: Var,
}

/// Channel gate computed by the circuit:
/// `x ⊙ proj_out(circuit(proj_in(GAP(x))))`, broadcast over the spatial plane.
pub fn quantum_attention(
    tape: &mut Tape,
    cfg: &CircuitConfig,
    x: Var,
    vars: &AttentionVars,
    workers: usize,
) -> Result<Var> {
    let channels = tape
        .value(vars.proj_in_w)
        .shape()
        .first()
        .copied()
        .unwrap_or(0);
    let xs = tape.value(x).shape();
    if xs.len() != 4 || xs[1] != channels {
        return Err(Error::contract(format!(
            "quantum attention expects N×{channels}×H×W input, got {xs:?}"
        )));
    }
    let pooled = tape.global_avg_pool(x)?;
    let angles = tape.linear(pooled, vars.proj_in_w, vars.proj_in_b)?;
    let z = circuit_layer(tape, cfg, angles, vars.weights, workers)?;
    let gate = tape.linear(z, vars.proj_out_w, vars.proj_out_b)?;
    tape.broadcast_mul_channelwise(x, gate)
}
