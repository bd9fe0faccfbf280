//! Lightweight U-Net noise predictor with a pluggable bottleneck.
//!
//! ```text
//! x ─ conv3×3 (C→32) ─ conv3×3/2 (32→64) ─ conv3×3/2 (64→128)        28 → 28 → 14 → 7
//!     + time projection (channelwise)
//!     residual block: h + conv3×3(silu(conv3×3(h)))
//!     [quantum] h ⊙ proj_out(circuit(proj_in(GAP(h))))
//!   ─ convT4×4/2 (128→64) ─ convT4×4/2 (64→32) ─ conv3×3 (32→C)       7 → 14 → 28 → 28
//! ```
//!
//! SiLU follows every encoder/decoder convolution. With `skip_connections` (the default) the
//! decoder stages also see the matching encoder activations by channel concatenation, so the
//! decoder input widths become 64+64 and 32+32. Without them the 28×28 output is decoded from
//! the 7×7 bottleneck alone.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::IMAGE_SIDE;
use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamSet};
use crate::quantum::{quantum_attention, Ansatz, AttentionVars, CircuitConfig};
use crate::rng::named;
use crate::tensor::Tensor;

pub const ENC_CHANNELS: [usize; 3] = [32, 64, 128];
pub const BOTTLENECK_WIDTH: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BottleneckKind {
    Classical,
    Quantum,
}

impl std::str::FromStr for BottleneckKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classical" => Ok(Self::Classical),
            "quantum" => Ok(Self::Quantum),
            other => Err(Error::contract(format!("unknown model variant {other:?}"))),
        }
    }
}

impl std::fmt::Display for BottleneckKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Classical => "classical",
            Self::Quantum => "quantum",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub time_embed_dim: usize,
    pub bottleneck: BottleneckKind,
    /// Used only by the quantum bottleneck.
    pub circuit: CircuitConfig,
    pub skip_connections: bool,
}

impl UNetConfig {
    pub fn new(in_channels: usize, bottleneck: BottleneckKind, ansatz: Ansatz) -> Self {
        Self {
            in_channels,
            time_embed_dim: 128,
            bottleneck,
            circuit: CircuitConfig::bottleneck(ansatz),
            skip_connections: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.in_channels, 1 | 3) {
            return Err(Error::contract(format!(
                "in_channels must be 1 or 3, got {}",
                self.in_channels
            )));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::contract(format!(
                "time embedding width must be even and ≥ 2, got {}",
                self.time_embed_dim
            )));
        }
        if self.bottleneck == BottleneckKind::Quantum {
            self.circuit.validate()?;
        }
        Ok(())
    }
}

/// How a parameter is initialised.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// `U(−√(6/fan_in), √(6/fan_in))`
    Kaiming {
        fan_in: usize,
    },
    Zeros,
    /// `U(−π, π)`
    Angle,
}

/// Every parameter of a configuration: name, shape and initialiser.
fn layout(cfg: &UNetConfig) -> Vec<(String, Vec<usize>, Init)> {
    let [c1, c2, c3] = ENC_CHANNELS;
    let c = cfg.in_channels;
    let d = cfg.time_embed_dim;
    let mut out = Vec::new();
    let mut conv = |name: &str, shape: [usize; 4], fan_in: usize| {
        out.push((
            format!("{name}.weight"),
            shape.to_vec(),
            Init::Kaiming { fan_in },
        ));
        let bias = if name.starts_with("dec") {
            shape[1]
        } else {
            shape[0]
        };
        out.push((format!("{name}.bias"), vec![bias], Init::Zeros));
    };
    conv("enc1", [c1, c, 3, 3], c * 9);
    conv("enc2", [c2, c1, 3, 3], c1 * 9);
    conv("enc3", [c3, c2, 3, 3], c2 * 9);
    conv("mid.res.conv1", [c3, c3, 3, 3], c3 * 9);
    conv("mid.res.conv2", [c3, c3, 3, 3], c3 * 9);
    let (d1_in, d2_in, out_in) = if cfg.skip_connections {
        (c3, c2 + c2, c1 + c1)
    } else {
        (c3, c2, c1)
    };
    conv("dec1", [d1_in, c2, 4, 4], d1_in * 16);
    conv("dec2", [d2_in, c1, 4, 4], d2_in * 16);
    conv("out", [c, out_in, 3, 3], out_in * 9);

    let mut linear = |name: &str, i: usize, o: usize| {
        out.push((
            format!("{name}.weight"),
            vec![i, o],
            Init::Kaiming { fan_in: i },
        ));
        out.push((format!("{name}.bias"), vec![o], Init::Zeros));
    };
    linear("time.embed", d, BOTTLENECK_WIDTH);
    linear("time.proj", BOTTLENECK_WIDTH, BOTTLENECK_WIDTH);
    if cfg.bottleneck == BottleneckKind::Quantum {
        let n = cfg.circuit.n_qubits;
        linear("mid.quantum.proj_in", BOTTLENECK_WIDTH, n);
        linear("mid.quantum.proj_out", n, BOTTLENECK_WIDTH);
        out.push((
            "mid.quantum.weights".to_owned(),
            vec![cfg.circuit.n_layers, n],
            Init::Angle,
        ));
    }
    out
}

/// `γ(t)`: `out[2k] = sin(t·ω_k)`, `out[2k+1] = cos(t·ω_k)`, `ω_k = 10000^(−2k/d)` for
/// `k = 0..d/2`.
pub fn timestep_embedding(t: usize, d: usize) -> Result<Vec<f64>> {
    if d < 2 || d % 2 != 0 {
        return Err(Error::contract(format!(
            "embedding width must be even and ≥ 2, got {d}"
        )));
    }
    let mut out = Vec::with_capacity(d);
    for k in 0..d / 2 {
        let omega = 10000f64.powf(-2.0 * k as f64 / d as f64);
        let (s, c) = (t as f64 * omega).sin_cos();
        out.push(s);
        out.push(c);
    }
    Ok(out)
}

/// The noise-prediction network and its parameters.
#[derive(Debug, Clone)]
pub struct UNet {
    config: UNetConfig,
    params: ParamSet,
    /// Threads used for parameter-shift evaluation in the quantum bottleneck.
    pub workers: usize,
}

impl UNet {
    /// Fresh parameters. Each tensor is drawn from its own stream keyed by `(seed, name)`, so
    /// the classical and quantum variants built from one seed share every common weight.
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        for (name, shape, init) in layout(&config) {
            let mut rng = named(seed, &name);
            let tensor = match init {
                Init::Zeros => Tensor::zeros(&shape),
                Init::Kaiming { fan_in } => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    Tensor::from_fn(&shape, |_| rng.random_range(-bound..bound))
                }
                Init::Angle => {
                    let pi = std::f64::consts::PI;
                    Tensor::from_fn(&shape, |_| rng.random_range(-pi..pi))
                }
            };
            params.insert(name, tensor)?;
        }
        Ok(Self {
            config,
            params,
            workers: 1,
        })
    }

    /// Wrap stored parameters, checking they match the configuration exactly.
    pub fn from_params(config: UNetConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != params.len() {
            return Err(Error::contract(format!(
                "configuration needs {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape, _) in &expected {
            let got = params.get(name)?;
            if got.shape() != shape.as_slice() {
                return Err(Error::contract(format!(
                    "parameter {name:?} has shape {:?}, expected {shape:?}",
                    got.shape()
                )));
            }
        }
        Ok(Self {
            config,
            params,
            workers: 1,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn into_params(self) -> ParamSet {
        self.params
    }

    /// `Linear(γ(t))` for every sample: `N×128`.
    pub fn embed_time(&self, tape: &mut Tape, p: &BoundParams, t: &[usize]) -> Result<Var> {
        let d = self.config.time_embed_dim;
        let mut gamma = Vec::with_capacity(t.len() * d);
        for &step in t {
            gamma.extend(timestep_embedding(step, d)?);
        }
        let g = tape.constant(Tensor::new(&[t.len(), d], gamma)?);
        tape.linear(g, p.var("time.embed.weight")?, p.var("time.embed.bias")?)
    }

    fn conv(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        name: &str,
        x: Var,
        stride: usize,
    ) -> Result<Var> {
        tape.conv2d(
            x,
            p.var(&format!("{name}.weight"))?,
            p.var(&format!("{name}.bias"))?,
            stride,
            1,
        )
    }

    fn up(&self, tape: &mut Tape, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
        tape.conv_transpose2d(
            x,
            p.var(&format!("{name}.weight"))?,
            p.var(&format!("{name}.bias"))?,
            2,
            1,
        )
    }

    /// Full forward pass, `N×C×28×28 → N×C×28×28`.
    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, x: Var, t: &[usize]) -> Result<Var> {
        let shape = tape.value(x).shape();
        let expect = [self.config.in_channels, IMAGE_SIDE, IMAGE_SIDE];
        if shape.len() != 4 || shape[1..] != expect {
            return Err(Error::contract(format!(
                "U-Net expects N×{}×28×28 input, got {shape:?}",
                self.config.in_channels
            )));
        }
        if shape[0] != t.len() {
            return Err(Error::contract(format!(
                "{} timesteps for a batch of {}",
                t.len(),
                shape[0]
            )));
        }

        let h1 = self.conv(tape, p, "enc1", x, 1)?;
        let h1 = tape.silu(h1);
        let h2 = self.conv(tape, p, "enc2", h1, 2)?;
        let h2 = tape.silu(h2);
        let h3 = self.conv(tape, p, "enc3", h2, 2)?;
        let h3 = tape.silu(h3);

        let temb = self.embed_time(tape, p, t)?;
        let tproj = tape.linear(temb, p.var("time.proj.weight")?, p.var("time.proj.bias")?)?;
        let b = tape.broadcast_add_channelwise(h3, tproj)?;

        let r = self.conv(tape, p, "mid.res.conv1", b, 1)?;
        let r = tape.silu(r);
        let r = self.conv(tape, p, "mid.res.conv2", r, 1)?;
        let mut b = tape.add(b, r)?;

        if self.config.bottleneck == BottleneckKind::Quantum {
            let vars = AttentionVars {
                proj_in_w: p.var("mid.quantum.proj_in.weight")?,
                proj_in_b: p.var("mid.quantum.proj_in.bias")?,
                weights: p.var("mid.quantum.weights")?,
                proj_out_w: p.var("mid.quantum.proj_out.weight")?,
                proj_out_b: p.var("mid.quantum.proj_out.bias")?,
            };
            b = quantum_attention(tape, &self.config.circuit, b, &vars, self.workers)?;
        }

        let mut d = self.up(tape, p, "dec1", b)?;
        d = tape.silu(d);
        if self.config.skip_connections {
            d = tape.concat_channels(d, h2)?;
        }
        d = self.up(tape, p, "dec2", d)?;
        d = tape.silu(d);
        if self.config.skip_connections {
            d = tape.concat_channels(d, h1)?;
        }
        self.conv(tape, p, "out", d, 1)
    }
}

impl Denoiser for UNet {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn image_shape(&self) -> [usize; 3] {
        [self.config.in_channels, IMAGE_SIDE, IMAGE_SIDE]
    }

    fn predict(&self, tape: &mut Tape, params: &BoundParams, x: Var, t: &[usize]) -> Result<Var> {
        self.forward(tape, params, x, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_at_zero_alternates() {
        let e = timestep_embedding(0, 8).unwrap();
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn embedding_first_pair_is_sin_cos_t() {
        let e = timestep_embedding(37, 128).unwrap();
        assert_eq!((e[0], e[1]), (f64::sin(37.0), f64::cos(37.0)));
    }

    #[test]
    fn embedding_pairs_on_unit_circle() {
        for t in [0, 1, 17, 999] {
            let e = timestep_embedding(t, 128).unwrap();
            assert!(e.iter().all(|v| v.abs() <= 1.0));
            for pair in e.chunks(2) {
                assert!((pair[0] * pair[0] + pair[1] * pair[1] - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn embedding_rejects_odd_width() {
        assert!(timestep_embedding(3, 7).is_err());
        assert!(timestep_embedding(3, 0).is_err());
    }

    #[test]
    fn shared_weights_identical_across_variants() {
        let c = UNet::new(
            UNetConfig::new(1, BottleneckKind::Classical, Ansatz::RyVariational),
            11,
        )
        .unwrap();
        let q = UNet::new(
            UNetConfig::new(1, BottleneckKind::Quantum, Ansatz::RyVariational),
            11,
        )
        .unwrap();
        for (name, t) in c.params().iter() {
            assert_eq!(q.params().get(name).unwrap(), t, "{name}");
        }
    }

    #[test]
    fn from_params_rejects_foreign_layout() {
        let c = UNet::new(
            UNetConfig::new(1, BottleneckKind::Classical, Ansatz::RyVariational),
            1,
        )
        .unwrap();
        let qcfg = UNetConfig::new(1, BottleneckKind::Quantum, Ansatz::RyVariational);
        assert!(UNet::from_params(qcfg, c.params().clone()).is_err());
        let rgb = UNetConfig::new(3, BottleneckKind::Classical, Ansatz::RyVariational);
        assert!(UNet::from_params(rgb, c.params().clone()).is_err());
    }
}
