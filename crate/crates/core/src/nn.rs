//! Dense layers, multilayer perceptrons and plain SGD updates.

use std::fmt;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, softmax_rows, GradientSet, Matrix, Tape, Var};
use crate::error::{IdianError, Result};

/// The eight component networks of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NetId {
    /// Inner imputation network wrapped by the masked imputation rule.
    Imputer,
    SourceEncoder,
    TargetEncoder,
    SourceDecoder,
    TargetDecoder,
    /// Common feature extractor shared by both domains.
    Shared,
    Discriminator,
    Classifier,
}

impl NetId {
    pub const ALL: [NetId; 8] = [
        NetId::Imputer,
        NetId::SourceEncoder,
        NetId::TargetEncoder,
        NetId::SourceDecoder,
        NetId::TargetDecoder,
        NetId::Shared,
        NetId::Discriminator,
        NetId::Classifier,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NetId::Imputer => "imputer",
            NetId::SourceEncoder => "source_encoder",
            NetId::TargetEncoder => "target_encoder",
            NetId::SourceDecoder => "source_decoder",
            NetId::TargetDecoder => "target_decoder",
            NetId::Shared => "shared",
            NetId::Discriminator => "discriminator",
            NetId::Classifier => "classifier",
        }
    }
}

impl fmt::Display for NetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamKind {
    Weights,
    Bias,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamKey {
    pub net: NetId,
    pub layer: usize,
    pub kind: ParamKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Softmax,
    Identity,
}

impl Activation {
    fn apply(self, z: Matrix) -> Matrix {
        match self {
            Activation::Relu => z.mapv(|x| if x > 0.0 { x } else { 0.0 }),
            Activation::Sigmoid => z.mapv(sigmoid),
            Activation::Softmax => softmax_rows(&z),
            Activation::Identity => z,
        }
    }

    fn record(self, tape: &mut Tape, z: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(z),
            Activation::Sigmoid => tape.sigmoid(z),
            Activation::Softmax => tape.softmax(z),
            Activation::Identity => z,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Descend,
    Ascend,
}

/// One fully connected layer `y = act(x W + b)`; `weights` is `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weights: Matrix,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: Matrix, bias: Array1<f64>, activation: Activation) -> Result<Self> {
        if weights.ncols() != bias.len() {
            return Err(IdianError::config(format!(
                "layer weights have {} outputs but bias has {}",
                weights.ncols(),
                bias.len()
            )));
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    /// Uniform init in ±sqrt(6/(in+out)), zero bias.
    pub fn init<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = Array2::from_shape_simple_fn((in_dim, out_dim), || {
            rng.random_range(-limit..=limit)
        });
        Self {
            weights,
            bias: Array1::zeros(out_dim),
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.ncols()
    }

    fn forward(&self, x: &Matrix) -> Matrix {
        let z = x.dot(&self.weights) + &self.bias;
        self.activation.apply(z)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
}

impl Mlp {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(IdianError::config("an MLP needs at least one layer"));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(IdianError::config(format!(
                    "layer {k} outputs {} but layer {} expects {}",
                    pair[0].out_dim(),
                    k + 1,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Builds `dims.len() - 1` layers with `activations[k]` on layer `k`.
    pub fn random<R: Rng + ?Sized>(
        dims: &[usize],
        activations: &[Activation],
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 {
            return Err(IdianError::config(
                "need one activation per consecutive pair of dims",
            ));
        }
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(d, act)| DenseLayer::init(d[0], d[1], *act, rng))
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Layer dims, input first.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.in_dim())
            .chain(self.layers.iter().map(DenseLayer::out_dim))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Inference without recording a tape.
    pub fn forward(&self, input: &Matrix) -> Result<Matrix> {
        if input.ncols() != self.in_dim() {
            return Err(IdianError::config(format!(
                "input has {} columns, network expects {}",
                input.ncols(),
                self.in_dim()
            )));
        }
        let mut x = self.layers[0].forward(input);
        for layer in &self.layers[1..] {
            x = layer.forward(&x);
        }
        Ok(x)
    }

    /// Registers this network's parameters on `tape` under `net`.
    pub fn bind(&self, tape: &mut Tape, net: NetId) -> BoundMlp {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(k, layer)| {
                let w = tape.param(
                    ParamKey {
                        net,
                        layer: k,
                        kind: ParamKind::Weights,
                    },
                    layer.weights.clone(),
                );
                let b = tape.param(
                    ParamKey {
                        net,
                        layer: k,
                        kind: ParamKind::Bias,
                    },
                    layer.bias.clone().insert_axis(Axis(0)),
                );
                (w, b, layer.activation)
            })
            .collect();
        BoundMlp {
            in_dim: self.in_dim(),
            layers,
        }
    }

    /// Applies `p ← p ∓ rate·g` for every layer of `net` present in `grads`.
    /// Layers absent from `grads` are left untouched.
    pub fn sgd_step(
        &mut self,
        net: NetId,
        grads: &GradientSet,
        rate: f64,
        direction: Direction,
    ) -> Result<()> {
        let signed = match direction {
            Direction::Descend => -rate,
            Direction::Ascend => rate,
        };
        // Validate every shape before mutating anything.
        for (k, layer) in self.layers.iter().enumerate() {
            for kind in [ParamKind::Weights, ParamKind::Bias] {
                let key = ParamKey {
                    net,
                    layer: k,
                    kind,
                };
                if let Some(g) = grads.get(&key) {
                    let expected = match kind {
                        ParamKind::Weights => layer.weights.dim(),
                        ParamKind::Bias => (1, layer.bias.len()),
                    };
                    if g.dim() != expected {
                        return Err(IdianError::config(format!(
                            "gradient for {net} layer {k} {kind:?} has shape {:?}, expected {expected:?}",
                            g.dim()
                        )));
                    }
                }
            }
        }
        for (k, layer) in self.layers.iter_mut().enumerate() {
            let wkey = ParamKey {
                net,
                layer: k,
                kind: ParamKind::Weights,
            };
            if let Some(g) = grads.get(&wkey) {
                layer.weights.scaled_add(signed, g);
            }
            let bkey = ParamKey {
                net,
                layer: k,
                kind: ParamKind::Bias,
            };
            if let Some(g) = grads.get(&bkey) {
                layer.bias.scaled_add(signed, &g.row(0));
            }
        }
        Ok(())
    }
}

/// An [`Mlp`] whose parameters live on a tape.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    in_dim: usize,
    layers: Vec<(Var, Var, Activation)>,
}

impl BoundMlp {
    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        let cols = tape.value(input).ncols();
        if cols != self.in_dim {
            return Err(IdianError::config(format!(
                "input has {cols} columns, network expects {}",
                self.in_dim
            )));
        }
        let mut x = input;
        for &(w, b, act) in &self.layers {
            let z = tape.matmul(x, w)?;
            let z = tape.add_bias(z, b)?;
            x = act.record(tape, z);
        }
        Ok(x)
    }
}
