//! Feedforward feature extractor with named tap points.
//!
//! The extractor is a stack of dense layers. Every layer output (plus the
//! reserved name `"input"`) is a tap: the forward pass records the activation
//! there, and the suffix of the network can be re-entered at any tap with a
//! perturbed activation. That re-entry is what the multi-layer cross-gradient
//! augmentation is built on.

use crate::error::{Error, Result};
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone)]
pub struct DenseLayer {
    /// (in_dim x out_dim)
    pub weight: Tensor,
    /// (1 x out_dim)
    pub bias: Tensor,
    pub activation: Activation,
}

/// Dense feature extractor; the final layer output is the embedding.
#[derive(Debug, Clone)]
pub struct LayeredNet {
    input_dim: usize,
    layers: Vec<DenseLayer>,
}

/// Reserved tap name for the raw input.
pub const INPUT_TAP: &str = "input";

/// Names of a subset of taps selected for augmentation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TapSet(Vec<String>);

impl TapSet {
    /// Validate the given names against a network.
    pub fn new(names: Vec<String>, net: &LayeredNet) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Config("tap set must be nonempty".into()));
        }
        let mut seen = Vec::new();
        for n in &names {
            if !net.tap_names().iter().any(|t| t == n) {
                return Err(Error::UnknownTap(n.clone()));
            }
            if seen.contains(n) {
                return Err(Error::Config(format!("duplicate tap name: {n}")));
            }
            seen.push(n.clone());
        }
        Ok(TapSet(names))
    }

    /// Default for the experiments: the input and the last layer output.
    pub fn input_and_last(net: &LayeredNet) -> Self {
        TapSet(vec![INPUT_TAP.to_string(), net.last_tap_name()])
    }

    /// Every tap except the final layer output.
    pub fn all_but_last(net: &LayeredNet) -> Self {
        let mut names = net.tap_names();
        names.pop();
        TapSet(names)
    }

    pub fn names(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Activations captured at every tap during one forward pass, as tape nodes.
#[derive(Debug, Clone)]
pub struct TapActivations {
    entries: Vec<(String, ValueId)>,
}

impl TapActivations {
    pub fn get(&self, name: &str) -> Result<ValueId> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .ok_or_else(|| Error::UnknownTap(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }
}

/// Handle to one forward pass of the network on a tape: the registered
/// parameter leaves, the embedding output, and the tap activations.
pub struct NetForward {
    pub weight_ids: Vec<ValueId>,
    pub bias_ids: Vec<ValueId>,
    pub output: ValueId,
    pub taps: TapActivations,
}

impl LayeredNet {
    /// Random initialization: weights uniform in ±sqrt(6/(fan_in+fan_out)),
    /// biases zero. Deterministic under the seed.
    pub fn init(dims: &[usize], activations: &[Activation], seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config(format!(
                "need at least input and one layer dim, got {:?}",
                dims
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("zero-dimension layer in {:?}", dims)));
        }
        if activations.len() != dims.len() - 1 {
            return Err(Error::Config(format!(
                "{} activations for {} layers",
                activations.len(),
                dims.len() - 1
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (l, w) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            layers.push(DenseLayer {
                weight: Tensor::new(vec![fan_in, fan_out], data)?,
                bias: Tensor::zeros(vec![1, fan_out]),
                activation: activations[l],
            });
        }
        Ok(LayeredNet { input_dim: dims[0], layers })
    }

    /// Standard experiment architecture: relu hidden layers, identity on the
    /// final (embedding) layer.
    pub fn init_mlp(input_dim: usize, hidden_dims: &[usize], seed: u64) -> Result<Self> {
        if hidden_dims.is_empty() {
            return Err(Error::Config("hidden_dims must be nonempty".into()));
        }
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden_dims);
        let mut acts = vec![Activation::Relu; hidden_dims.len() - 1];
        acts.push(Activation::Identity);
        Self::init(&dims, &acts, seed)
    }

    pub fn from_layers(input_dim: usize, layers: Vec<DenseLayer>) -> Result<Self> {
        let mut prev = input_dim;
        for (i, l) in layers.iter().enumerate() {
            if l.weight.rows() != prev || l.bias.cols() != l.weight.cols() || l.bias.rows() != 1 {
                return Err(Error::ShapeMismatch {
                    op: "from-layers",
                    detail: format!("layer {i}: weight {:?}, bias {:?}, expected input {prev}", l.weight.shape(), l.bias.shape()),
                });
            }
            prev = l.weight.cols();
        }
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        Ok(LayeredNet { input_dim, layers })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Output (embedding) dimension.
    pub fn embedding_dim(&self) -> usize {
        self.layers.last().unwrap().weight.cols()
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    /// All tap names in forward order: "input", "layer1", ..., "layerK".
    pub fn tap_names(&self) -> Vec<String> {
        let mut names = vec![INPUT_TAP.to_string()];
        names.extend((1..=self.layers.len()).map(|i| format!("layer{i}")));
        names
    }

    pub fn last_tap_name(&self) -> String {
        format!("layer{}", self.layers.len())
    }

    /// Index of the first layer strictly after the tap, or an error for an
    /// unknown name.
    fn suffix_start(&self, tap: &str) -> Result<usize> {
        if tap == INPUT_TAP {
            return Ok(0);
        }
        if let Some(idx) = tap.strip_prefix("layer").and_then(|s| s.parse::<usize>().ok()) {
            if idx >= 1 && idx <= self.layers.len() {
                return Ok(idx);
            }
        }
        Err(Error::UnknownTap(tap.to_string()))
    }

    /// Output dimension of the named tap.
    pub fn tap_dim(&self, tap: &str) -> Result<usize> {
        let start = self.suffix_start(tap)?;
        Ok(if start == 0 {
            self.input_dim
        } else {
            self.layers[start - 1].weight.cols()
        })
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if !x.is_matrix() || x.cols() != self.input_dim {
            return Err(Error::ShapeMismatch {
                op: "forward",
                detail: format!("input {:?}, layer 0 expects {} columns", x.shape(), self.input_dim),
            });
        }
        Ok(())
    }

    /// Run layers `start..` on the tape from activation `h`, reusing already
    /// registered parameter leaves.
    fn run_suffix(
        &self,
        tape: &mut Tape,
        weight_ids: &[ValueId],
        bias_ids: &[ValueId],
        mut h: ValueId,
        start: usize,
        mut on_layer_out: impl FnMut(usize, ValueId),
    ) -> Result<ValueId> {
        for (l, layer) in self.layers.iter().enumerate().skip(start) {
            let rows = tape.value(h).rows();
            if tape.value(h).cols() != layer.weight.rows() {
                return Err(Error::ShapeMismatch {
                    op: "forward",
                    detail: format!(
                        "layer {l}: activation {:?} vs weight {:?}",
                        tape.value(h).shape(),
                        layer.weight.shape()
                    ),
                });
            }
            let z = tape.matmul(h, weight_ids[l])?;
            // Bias broadcast over rows via a ones-column matmul; keeps the op
            // catalog restricted to scalar broadcasting.
            let ones = tape.leaf(Tensor::ones(vec![rows, 1]))?;
            let bias_rows = tape.matmul(ones, bias_ids[l])?;
            let pre = tape.add(z, bias_rows)?;
            h = match layer.activation {
                Activation::Relu => tape.relu(pre)?,
                Activation::Identity => pre,
            };
            on_layer_out(l, h);
        }
        Ok(h)
    }

    /// Register all parameters as leaves on the tape.
    fn register(&self, tape: &mut Tape) -> Result<(Vec<ValueId>, Vec<ValueId>)> {
        let mut weight_ids = Vec::with_capacity(self.layers.len());
        let mut bias_ids = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            weight_ids.push(tape.leaf(layer.weight.clone())?);
            bias_ids.push(tape.leaf(layer.bias.clone())?);
        }
        Ok((weight_ids, bias_ids))
    }

    /// Full forward pass recording every tap activation.
    pub fn forward_with_taps(&self, tape: &mut Tape, x: &Tensor) -> Result<NetForward> {
        self.check_input(x)?;
        let (weight_ids, bias_ids) = self.register(tape)?;
        let x_id = tape.leaf(x.clone())?;
        let mut entries = vec![(INPUT_TAP.to_string(), x_id)];
        let output = self.run_suffix(tape, &weight_ids, &bias_ids, x_id, 0, |l, id| {
            entries.push((format!("layer{}", l + 1), id));
        })?;
        Ok(NetForward {
            weight_ids,
            bias_ids,
            output,
            taps: TapActivations { entries },
        })
    }

    /// Re-enter the network strictly after `tap` with activation `q` (an
    /// existing tape value, typically a fresh leaf holding a perturbed
    /// activation). Reuses the parameter leaves of `reg`, so suffix-layer
    /// gradients from losses on the result accumulate onto the same
    /// parameters as the main pass. Whether gradients also flow into prefix
    /// layers is up to the caller: pass a fresh leaf to cut them off, or a
    /// connected node to keep them.
    pub fn forward_from_tap(
        &self,
        tape: &mut Tape,
        reg: &NetForward,
        tap: &str,
        q: ValueId,
    ) -> Result<ValueId> {
        let start = self.suffix_start(tap)?;
        let expect = self.tap_dim(tap)?;
        let got = tape.value(q);
        if !got.is_matrix() || got.cols() != expect {
            return Err(Error::ShapeMismatch {
                op: "forward-from-tap",
                detail: format!("tap {tap}: activation {:?}, expected {} columns", got.shape(), expect),
            });
        }
        self.run_suffix(tape, &reg.weight_ids, &reg.bias_ids, q, start, |_, _| {})
    }

    /// Plain inference without a tape.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let fwd = self.forward_with_taps(&mut tape, x)?;
        Ok(tape.value(fwd.output).clone())
    }
}
