//! Multi-layer perceptrons for the base prediction model and the adaptation
//! model, and the personalization loss that ties them together.
//!
//! The prediction model maps features `X[B, d]` to logits `Z[B, C]`. The
//! adaptation model reads each logit row on its own and emits one scalar per
//! sample; the personalization loss is the Euclidean norm of those scalars
//! over the batch.

use std::io::{Read, Write};

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::tensor::{ops, Graph, Tensor};

/// Layer widths from input to output. Hidden layers use ReLU, the output
/// layer is linear.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MlpSpec {
    widths: Vec<usize>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("invalid layer widths {widths:?}")));
        }
        Ok(Self { widths })
    }

    /// `input -> hidden.. -> output`.
    pub fn with_hidden(input: usize, hidden: &[usize], output: usize) -> Result<Self> {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input);
        widths.extend_from_slice(hidden);
        widths.push(output);
        Self::new(widths)
    }

    /// Default adaptation network for `n_classes` logits: three hidden layers of 32.
    pub fn adaptation_default(n_classes: usize) -> Result<Self> {
        Self::with_hidden(n_classes, &[32, 32, 32], 1)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input(&self) -> usize {
        self.widths[0]
    }

    pub fn output(&self) -> usize {
        *self.widths.last().expect("at least two widths")
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Shapes of `[W0, b0, W1, b1, ..]`, with `Wi: [in, out]`.
    pub fn tensor_shapes(&self) -> Vec<Vec<usize>> {
        self.widths
            .windows(2)
            .flat_map(|w| [vec![w[0], w[1]], vec![w[1]]])
            .collect()
    }
}

/// Parameters of one MLP, stored as `[W0, b0, W1, b1, ..]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    spec: MlpSpec,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(spec: &MlpSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = spec
            .tensor_shapes()
            .into_iter()
            .map(|shape| {
                if let [fan_in, fan_out] = shape[..] {
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
                    let data = (0..fan_in * fan_out)
                        .map(|_| dist.sample(&mut rng))
                        .collect();
                    Tensor::new(shape, data)
                } else {
                    Tensor::zeros(&shape)
                }
            })
            .collect();
        Self {
            spec: spec.clone(),
            tensors,
        }
    }

    pub fn zeros(spec: &MlpSpec) -> Self {
        let tensors = spec
            .tensor_shapes()
            .iter()
            .map(|s| Tensor::zeros(s))
            .collect();
        Self {
            spec: spec.clone(),
            tensors,
        }
    }

    pub fn from_tensors(spec: &MlpSpec, tensors: Vec<Tensor>) -> Result<Self> {
        let shapes = spec.tensor_shapes();
        if shapes.len() != tensors.len()
            || shapes
                .iter()
                .zip(&tensors)
                .any(|(s, t)| s[..] != *t.shape())
        {
            return Err(Error::Shape {
                op: "ModelParams::from_tensors",
                shapes: tensors.iter().map(|t| t.shape().to_vec()).collect(),
            });
        }
        Ok(Self {
            spec: spec.clone(),
            tensors: tensors.iter().map(Tensor::detach).collect(),
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Fresh graph leaves holding these values.
    pub fn attach(&self, graph: &Graph) -> Vec<Tensor> {
        self.tensors.iter().map(|t| graph.leaf(t)).collect()
    }

    /// `self - rate * grads`, coordinate-wise.
    pub fn sgd_step(&self, grads: &[Tensor], rate: f64) -> Self {
        assert_eq!(grads.len(), self.tensors.len());
        Self {
            spec: self.spec.clone(),
            tensors: self
                .tensors
                .iter()
                .zip(grads)
                .map(|(p, g)| p.sgd_step(g, rate))
                .collect(),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn from_flat(spec: &MlpSpec, values: &[f64]) -> Result<Self> {
        if values.len() != spec.param_count() {
            return Err(Error::Format(format!(
                "expected {} parameters, found {}",
                spec.param_count(),
                values.len()
            )));
        }
        let mut offset = 0;
        let tensors = spec
            .tensor_shapes()
            .into_iter()
            .map(|shape| {
                let n: usize = shape.iter().product();
                let t = Tensor::new(shape, values[offset..offset + n].to_vec());
                offset += n;
                t
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            tensors,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// `FTMP` v1: width count, widths (u64), then every parameter as f64, all little-endian.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        io::write_magic(w, b"FTMP", 1)?;
        io::write_u32(w, self.spec.widths.len() as u32)?;
        for &width in &self.spec.widths {
            io::write_u64(w, width as u64)?;
        }
        io::write_f64s(w, &self.flat())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        io::read_magic(r, b"FTMP", 1)?;
        let n = io::read_u32(r)? as usize;
        if n > 64 {
            return Err(Error::Format(format!("{n} layer widths")));
        }
        let widths = (0..n)
            .map(|_| io::read_len(r, "layer width"))
            .collect::<Result<Vec<_>>>()?;
        let spec = MlpSpec::new(widths).map_err(|e| Error::Format(e.to_string()))?;
        let values = io::read_f64s(r, spec.param_count())?;
        Self::from_flat(&spec, &values)
    }
}

/// Runs an MLP given its `[W0, b0, ..]` tensors (attached or not).
pub fn mlp_forward(layers: &[Tensor], x: &Tensor) -> Result<Tensor> {
    if layers.is_empty() || !layers.len().is_multiple_of(2) {
        return Err(Error::Shape {
            op: "mlp_forward",
            shapes: layers.iter().map(|t| t.shape().to_vec()).collect(),
        });
    }
    let n_layers = layers.len() / 2;
    let mut h = x.clone();
    for (i, pair) in layers.chunks_exact(2).enumerate() {
        h = ops::add_row(&ops::matmul(&h, &pair[0])?, &pair[1])?;
        if i + 1 < n_layers {
            h = ops::relu(&h);
        }
    }
    Ok(h)
}

/// Logits `Z = f(X; psi)`.
pub fn forward_prediction(psi: &[Tensor], x: &Tensor) -> Result<Tensor> {
    mlp_forward(psi, x)
}

/// One scalar per logit row: `g(Z; phi)` as a `[B]` tensor.
pub fn forward_adaptation(phi: &[Tensor], z: &Tensor) -> Result<Tensor> {
    let out = mlp_forward(phi, z)?;
    match out.shape() {
        [b, 1] => ops::reshape(&out, &[*b]),
        other => Err(Error::Shape {
            op: "forward_adaptation",
            shapes: vec![other.to_vec()],
        }),
    }
}

/// `||g(Z; phi)||_2` over the batch.
pub fn personalization_loss(phi: &[Tensor], z: &Tensor) -> Result<Tensor> {
    Ok(ops::l2_norm(&forward_adaptation(phi, z)?))
}
