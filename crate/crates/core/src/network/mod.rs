//! CapsNet and G-CapsNet models: convolutional stem, PrimaryCaps, routed
//! DigitCaps and a fully connected reconstruction decoder.
//!
//! Parameters live in a [`Model`] as plain tensors. Each forward pass binds
//! them to a fresh [`Tape`], as trainable leaves or as constants.

mod checkpoint;
mod train;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::capsule_ops::{check_one_hot, predict, squash, CapsError, CapsLayerSpec};
use crate::data_io::DataError;
use crate::routing::{route, route_fused, RoutingConfig, RoutingTrace};
use crate::tensor::{conv_output_size, Tape, Tensor, TensorError, Var};

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, CHECKPOINT_MAGIC};
pub use train::{evaluate, seeds, Adam, Evaluation, MaskSource, StepStats, TrainConfig, Trainer};

/// Standard deviation of the Gaussian routing-weight initialization.
pub const ROUTING_WEIGHT_STD: f64 = 0.1;

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Caps(#[from] CapsError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid architecture: {0}")]
    Geometry(String),
    #[error("input of shape {actual:?} does not match architecture input {expected:?}")]
    Input { expected: Vec<usize>, actual: Vec<usize> },
    #[error("non-finite values in {tensor} at step {step}")]
    NonFinite { tensor: String, step: u64 },
    #[error("cannot evaluate on an empty dataset")]
    EmptyDataset,
    #[error("{0} requires a grouped routing configuration (alg3 or alg4)")]
    NotGrouped(&'static str),
    #[error("{path}: bad checkpoint magic")]
    BadMagic { path: String },
    #[error("{path}: corrupt checkpoint: {reason}")]
    Corrupt { path: String, reason: String },
    #[error("checkpoint manifest mismatch for `{key}`: expected {expected}, found {found}")]
    ManifestMismatch { key: String, expected: String, found: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Layer geometry. Convolutions are unpadded; the stem has stride 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ArchConfig {
    /// `(channels, height, width)`
    pub input: (usize, usize, usize),
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub primary_types: usize,
    pub primary_dim: usize,
    pub primary_kernel: usize,
    pub primary_stride: usize,
    pub num_classes: usize,
    pub digit_dim: usize,
    pub decoder_hidden: (usize, usize),
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            input: (1, 28, 28),
            stem_channels: 256,
            stem_kernel: 9,
            primary_types: 32,
            primary_dim: 8,
            primary_kernel: 9,
            primary_stride: 2,
            num_classes: 10,
            digit_dim: 16,
            decoder_hidden: (512, 1024),
        }
    }
}

impl ArchConfig {
    /// The default geometry with a 32-channel stem. Capsule counts, type
    /// structure and decoder are unchanged; the narrower stem makes a CPU
    /// epoch over a few thousand images take seconds instead of minutes.
    pub fn desk() -> Self {
        ArchConfig {
            stem_channels: 32,
            ..Self::default()
        }
    }

    pub fn with_input(mut self, channels: usize, height: usize, width: usize) -> Self {
        self.input = (channels, height, width);
        self
    }

    /// Spatial size of the stem output.
    pub fn stem_hw(&self) -> Result<(usize, usize), NetError> {
        let (_, h, w) = self.input;
        let out = |size| conv_output_size(size, self.stem_kernel, 1, 0);
        match (out(h), out(w)) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(NetError::Geometry(format!(
                "{h}x{w} input is smaller than the {k}x{k} stem kernel",
                k = self.stem_kernel
            ))),
        }
    }

    /// Spatial size of the PrimaryCaps grid.
    pub fn primary_grid(&self) -> Result<(usize, usize), NetError> {
        let (sh, sw) = self.stem_hw()?;
        let out = |size| conv_output_size(size, self.primary_kernel, self.primary_stride, 0);
        match (out(sh), out(sw)) {
            (Some(gh), Some(gw)) => Ok((gh, gw)),
            _ => Err(NetError::Geometry(format!(
                "{sh}x{sw} stem output is smaller than the {k}x{k} primary kernel",
                k = self.primary_kernel
            ))),
        }
    }

    pub fn caps_per_type(&self) -> Result<usize, NetError> {
        let (gh, gw) = self.primary_grid()?;
        Ok(gh * gw)
    }

    pub fn num_lower(&self) -> Result<usize, NetError> {
        Ok(self.primary_types * self.caps_per_type()?)
    }

    pub fn pixels(&self) -> usize {
        let (c, h, w) = self.input;
        c * h * w
    }

    pub fn caps_spec(&self) -> Result<CapsLayerSpec, NetError> {
        Ok(CapsLayerSpec::new(
            self.num_lower()?,
            self.num_classes,
            self.primary_dim,
            self.digit_dim,
            self.primary_types,
            self.caps_per_type()?,
        )?)
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let sizes = [
            self.input.0,
            self.stem_channels,
            self.stem_kernel,
            self.primary_types,
            self.primary_dim,
            self.primary_kernel,
            self.primary_stride,
            self.num_classes,
            self.digit_dim,
            self.decoder_hidden.0,
            self.decoder_hidden.1,
        ];
        if sizes.contains(&0) {
            return Err(NetError::Geometry(format!("all sizes must be positive: {self:?}")));
        }
        self.caps_spec().map(|_| ())
    }

    /// Names and shapes of all parameters, in storage order.
    pub fn parameter_shapes(&self) -> Result<Vec<(&'static str, Vec<usize>)>, NetError> {
        self.validate()?;
        let (c, _, _) = self.input;
        let (s, k, pk) = (self.stem_channels, self.stem_kernel, self.primary_kernel);
        let primary_out = self.primary_types * self.primary_dim;
        let (h1, h2) = self.decoder_hidden;
        let flat_digits = self.num_classes * self.digit_dim;
        Ok(vec![
            ("stem.weight", vec![s, c, k, k]),
            ("stem.bias", vec![s]),
            ("primary.weight", vec![primary_out, s, pk, pk]),
            ("primary.bias", vec![primary_out]),
            (
                "digit.weight",
                vec![self.num_lower()?, self.num_classes, self.digit_dim, self.primary_dim],
            ),
            ("decoder.fc1.weight", vec![flat_digits, h1]),
            ("decoder.fc1.bias", vec![h1]),
            ("decoder.fc2.weight", vec![h1, h2]),
            ("decoder.fc2.bias", vec![h2]),
            ("decoder.fc3.weight", vec![h2, self.pixels()]),
            ("decoder.fc3.bias", vec![self.pixels()]),
        ])
    }

    pub fn parameter_count(&self) -> Result<usize, NetError> {
        Ok(self
            .parameter_shapes()?
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum())
    }
}

// Indices into `Model::params`, matching `ArchConfig::parameter_shapes`.
const STEM_W: usize = 0;
const STEM_B: usize = 1;
const PRIMARY_W: usize = 2;
const PRIMARY_B: usize = 3;
const DIGIT_W: usize = 4;
const FC1_W: usize = 5;
const FC3_W: usize = 9;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub arch: ArchConfig,
    pub routing: RoutingConfig,
    params: Vec<Param>,
}

/// Values from one forward pass.
pub struct Forward<'t> {
    /// `[batch, num_classes]`
    pub lengths: Var<'t>,
    /// `[batch, num_classes, digit_dim]`
    pub digit_caps: Var<'t>,
    /// `[batch, types, num_classes, digit_dim]` in grouped modes.
    pub per_type: Option<Var<'t>>,
    pub trace: Option<RoutingTrace>,
}

/// Detached results of an inference pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub lengths: Tensor,
    pub digit_caps: Tensor,
    pub per_type: Option<Tensor>,
}

impl Inference {
    pub fn predictions(&self) -> Vec<usize> {
        argmax_rows(&self.lengths)
    }
}

/// Index of the largest entry of each row of a `[rows, cols]` tensor; ties go
/// to the lowest index.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let cols = t.shape()[1];
    t.data()
        .chunks(cols)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
                .0
        })
        .collect()
}

impl Model {
    /// Seeded initialization: He-normal conv and hidden decoder weights,
    /// Glorot-normal output layer, Gaussian routing weights, zero biases.
    pub fn new(arch: ArchConfig, routing: RoutingConfig, seed: u64) -> Result<Self, NetError> {
        let shapes = arch.parameter_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = shapes
            .into_iter()
            .enumerate()
            .map(|(index, (name, shape))| {
                let value = if name.ends_with(".bias") {
                    Tensor::zeros(&shape)
                } else {
                    let std = match index {
                        DIGIT_W => ROUTING_WEIGHT_STD,
                        STEM_W | PRIMARY_W => (2.0 / shape[1..].iter().product::<usize>() as f64).sqrt(),
                        FC3_W => (2.0 / (shape[0] + shape[1]) as f64).sqrt(),
                        _ => (2.0 / shape[0] as f64).sqrt(),
                    };
                    Tensor::randn(&shape, std, &mut rng)
                };
                Param {
                    name: name.to_string(),
                    value,
                }
            })
            .collect();
        Ok(Model { arch, routing, params })
    }

    pub(crate) fn from_params(arch: ArchConfig, routing: RoutingConfig, params: Vec<Param>) -> Self {
        Model { arch, routing, params }
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Registers every parameter on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), trainable))
            .collect()
    }

    fn check_input(&self, shape: &[usize]) -> Result<(), NetError> {
        let (c, h, w) = self.arch.input;
        if shape.len() != 4 || shape[1..] != [c, h, w] {
            return Err(NetError::Input {
                expected: vec![0, c, h, w],
                actual: shape.to_vec(),
            });
        }
        Ok(())
    }

    /// PrimaryCaps `[batch, num_lower, primary_dim]`, flattened in
    /// (type, row, col) order so each type is one contiguous block.
    pub fn primary_caps<'t>(&self, params: &[Var<'t>], images: Var<'t>) -> Result<Var<'t>, NetError> {
        let shape = images.shape();
        self.check_input(&shape)?;
        let batch = shape[0];
        let a = &self.arch;
        let stem = images
            .conv2d(params[STEM_W], 1, 0)?
            .add(params[STEM_B].reshape(&[1, a.stem_channels, 1, 1])?)?
            .relu();
        let channels = a.primary_types * a.primary_dim;
        let primary = stem
            .conv2d(params[PRIMARY_W], a.primary_stride, 0)?
            .add(params[PRIMARY_B].reshape(&[1, channels, 1, 1])?)?;
        let (gh, gw) = a.primary_grid()?;
        let caps = primary
            .reshape(&[batch, a.primary_types, a.primary_dim, gh, gw])?
            .permute(&[0, 1, 3, 4, 2])?
            .reshape(&[batch, a.primary_types * gh * gw, a.primary_dim])?;
        Ok(squash(caps, -1)?)
    }

    pub fn forward<'t>(&self, params: &[Var<'t>], images: Var<'t>, capture_trace: bool) -> Result<Forward<'t>, NetError> {
        let u = self.primary_caps(params, images)?;
        let u_hat = predict(u, params[DIGIT_W])?;
        let spec = self.arch.caps_spec()?;
        let routed = if capture_trace {
            route(&u_hat, &spec, &self.routing, true)?
        } else {
            route_fused(&u_hat, &spec, &self.routing)?
        };
        Ok(Forward {
            lengths: routed.v.l2_norm(-1, false)?,
            digit_caps: routed.v,
            per_type: routed.per_type,
            trace: routed.trace,
        })
    }

    /// Masks every capsule except the one selected by the one-hot `mask`
    /// `[batch, num_classes]` and decodes the result to `[batch, pixels]`.
    pub fn decode<'t>(&self, params: &[Var<'t>], digit_caps: Var<'t>, mask: &Tensor) -> Result<Var<'t>, NetError> {
        check_one_hot(mask)?;
        let (j, d) = (self.arch.num_classes, self.arch.digit_dim);
        let batch = mask.shape()[0];
        let expected = [batch, j, d];
        if digit_caps.shape() != expected {
            return Err(CapsError::Shape {
                op: "decode",
                expected: expected.to_vec(),
                actual: digit_caps.shape(),
            }
            .into());
        }
        let tape = digit_caps.tape();
        let mask = tape.constant(mask.clone().reshaped(&[batch, j, 1])?);
        let mut h = digit_caps.mul(mask)?.reshape(&[batch, j * d])?;
        for layer in 0..3 {
            let (w, b) = (params[FC1_W + 2 * layer], params[FC1_W + 2 * layer + 1]);
            h = h.matmul(w)?.add(b)?;
            h = if layer < 2 { h.relu() } else { h.sigmoid() };
        }
        Ok(h)
    }

    /// Forward pass without gradient tracking.
    pub fn infer(&self, images: &Tensor) -> Result<Inference, NetError> {
        let tape = Tape::new();
        let params = self.bind(&tape, false);
        let out = self.forward(&params, tape.constant(images.clone()), false)?;
        Ok(Inference {
            lengths: (*out.lengths.value()).clone(),
            digit_caps: (*out.digit_caps.value()).clone(),
            per_type: out.per_type.map(|p| (*p.value()).clone()),
        })
    }

    /// Decodes `[batch, num_classes, digit_dim]` capsules without gradient
    /// tracking.
    pub fn reconstruct(&self, digit_caps: &Tensor, mask: &Tensor) -> Result<Tensor, NetError> {
        let tape = Tape::new();
        let params = self.bind(&tape, false);
        let out = self.decode(&params, tape.constant(digit_caps.clone()), mask)?;
        let value = (*out.value()).clone();
        Ok(value)
    }
}

impl fmt::Display for ArchConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (c, h, w) = self.input;
        write!(
            f,
            "{c}x{h}x{w} -> conv{k} {s} -> primary {t}x{d} -> digits {j}x{dd}",
            k = self.stem_kernel,
            s = self.stem_channels,
            t = self.primary_types,
            d = self.primary_dim,
            j = self.num_classes,
            dd = self.digit_dim
        )
    }
}
