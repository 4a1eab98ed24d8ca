//! Shared fixtures for the integration and acceptance targets.
#![allow(dead_code)]

use gcapsnet::capsule_ops::{
    agreement_update, coupling_from_logits, margin_loss, predict, reconstruction_loss, squash, weighted_sum,
    weighted_sum_by_type, AxisMode, CapsError, CapsLayerSpec, LogitMatrix, PredictionTensor, TypePartition,
};
use gcapsnet::network::{ArchConfig, Model, NetError};
use gcapsnet::routing::{route, route_fused, RoutingConfig};
use gcapsnet::tensor::gradcheck::check_gradients;
use gcapsnet::tensor::{Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Unwraps capsule errors for closures that must return tensor errors.
pub fn caps<T>(r: Result<T, CapsError>) -> Result<T, TensorError> {
    r.map_err(|e| match e {
        CapsError::Tensor(t) => t,
        other => panic!("{other}"),
    })
}

pub fn net<T>(r: Result<T, NetError>) -> Result<T, TensorError> {
    r.map_err(|e| match e {
        NetError::Tensor(t) | NetError::Caps(CapsError::Tensor(t)) => t,
        other => panic!("{other}"),
    })
}

pub type Scalar = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, TensorError>>;

pub struct GradCase {
    pub name: String,
    pub inputs: Vec<Tensor>,
    pub f: Scalar,
}

/// `sum(out * probe)` with a fixed random probe, so every output element
/// contributes a distinct weight.
fn probed(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn dot<'t>(tape: &'t Tape, out: Var<'t>, probe: &Tensor) -> Result<Var<'t>, TensorError> {
    Ok(out.mul(tape.constant(probe.clone()))?.sum_all())
}

macro_rules! case {
    ($cases:ident, $name:expr, $inputs:expr, $probe:expr, |$tape:ident, $v:ident| $body:expr) => {{
        let probe: Tensor = $probe;
        $cases.push(GradCase {
            name: $name.to_string(),
            inputs: $inputs,
            f: Box::new(move |$tape: &Tape, $v: &[Var]| {
                let out: Var = $body;
                dot($tape, out, &probe)
            }),
        });
    }};
}

/// One instance of every differentiable op, drawn from `seed`.
pub fn gradient_cases(seed: u64) -> Vec<GradCase> {
    let mut r = rng(seed);
    let r = &mut r;
    let mut cases: Vec<GradCase> = Vec::new();
    let n = |shape: &[usize], r: &mut ChaCha8Rng| Tensor::randn(shape, 1.0, r);
    let pos = |shape: &[usize], r: &mut ChaCha8Rng| Tensor::uniform(shape, 0.5, 2.0, r);

    case!(cases, "add", vec![n(&[3, 4], r), n(&[4], r)], n(&[3, 4], r), |_t, v| v[0].add(v[1])?);
    case!(cases, "sub", vec![n(&[2, 3, 4], r), n(&[3, 1], r)], n(&[2, 3, 4], r), |_t, v| v[0].sub(v[1])?);
    case!(cases, "mul", vec![n(&[2, 3], r), n(&[2, 1], r)], n(&[2, 3], r), |_t, v| v[0].mul(v[1])?);
    case!(cases, "div", vec![n(&[3, 2], r), pos(&[2], r)], n(&[3, 2], r), |_t, v| v[0].div(v[1])?);
    case!(cases, "neg_scale_shift", vec![n(&[5], r)], n(&[5], r), |_t, v| v[0].neg().scale(1.7).add_scalar(0.3));
    case!(cases, "exp", vec![n(&[4, 2], r)], n(&[4, 2], r), |_t, v| v[0].exp());
    case!(cases, "ln", vec![pos(&[6], r)], n(&[6], r), |_t, v| v[0].ln());
    case!(cases, "sqrt", vec![pos(&[6], r)], n(&[6], r), |_t, v| v[0].sqrt());
    case!(cases, "square", vec![n(&[3, 3], r)], n(&[3, 3], r), |_t, v| v[0].square());
    case!(cases, "relu", vec![n(&[10], r)], n(&[10], r), |_t, v| v[0].relu());
    case!(cases, "sigmoid", vec![n(&[2, 5], r)], n(&[2, 5], r), |_t, v| v[0].sigmoid());
    case!(cases, "matmul", vec![n(&[2, 3, 4], r), n(&[4, 5], r)], n(&[2, 3, 5], r), |_t, v| v[0].matmul(v[1])?);
    case!(cases, "sum", vec![n(&[3, 4, 2], r)], n(&[3, 2], r), |_t, v| v[0].sum(1, false)?);
    case!(cases, "mean", vec![n(&[3, 4], r)], n(&[3, 1], r), |_t, v| v[0].mean(-1, true)?);
    case!(cases, "max", vec![n(&[4, 5], r)], n(&[5], r), |_t, v| v[0].max(0, false)?);
    case!(cases, "softmax", vec![n(&[3, 5], r)], n(&[3, 5], r), |_t, v| v[0].softmax(1)?);
    case!(cases, "l2_norm", vec![n(&[4, 3], r)], n(&[4], r), |_t, v| v[0].l2_norm(-1, false)?);
    case!(cases, "reshape_permute", vec![n(&[2, 3, 4], r)], n(&[4, 2, 3], r), |_t, v| v[0]
        .reshape(&[6, 4])?
        .reshape(&[2, 3, 4])?
        .permute(&[2, 0, 1])?);
    case!(cases, "narrow", vec![n(&[3, 6], r)], n(&[3, 2], r), |_t, v| v[0].narrow(1, 3, 2)?);
    case!(cases, "conv2d", vec![n(&[2, 2, 7, 6], r), n(&[3, 2, 3, 3], r)], n(&[2, 3, 4, 3], r), |_t, v| v[0]
        .conv2d(v[1], 2, 1)?);
    case!(cases, "squash", vec![n(&[3, 2, 4], r)], n(&[3, 2, 4], r), |_t, v| caps(squash(v[0], -1))?);
    case!(cases, "predict", vec![n(&[2, 3, 4], r), n(&[3, 2, 5, 4], r)], n(&[2, 2, 3, 5], r), |_t, v| caps(
        predict(v[0], v[1])
    )?
    .upper_major());
    let partition = TypePartition::new(2, 3, 6).unwrap();
    for (label, mode, part) in [
        ("coupling_upper_per_lower", AxisMode::UpperPerLower, None),
        ("coupling_lower_per_upper", AxisMode::LowerPerUpper, None),
        ("coupling_lower_per_upper_grouped", AxisMode::LowerPerUpper, Some(partition.clone())),
    ] {
        case!(cases, label, vec![n(&[2, 6, 3], r)], n(&[2, 6, 3], r), |_t, v| caps(coupling_from_logits(
            &LogitMatrix(v[0]),
            mode,
            part.as_ref()
        ))?
        .c);
    }
    {
        let part = partition.clone();
        case!(cases, "weighted_sum", vec![n(&[2, 6, 3], r), n(&[2, 3, 6, 4], r)], n(&[2, 3, 4], r), |_t, v| {
            let c = caps(coupling_from_logits(&LogitMatrix(v[0]), AxisMode::UpperPerLower, None))?;
            let _ = &part;
            caps(weighted_sum(&c, &PredictionTensor::from_upper_major(v[1]), None))?
        });
    }
    {
        let part = partition.clone();
        case!(cases, "weighted_sum_subset", vec![n(&[2, 6, 3], r), n(&[2, 3, 6, 4], r)], n(&[2, 3, 4], r), |_t, v| {
            let c = caps(coupling_from_logits(&LogitMatrix(v[0]), AxisMode::LowerPerUpper, Some(&part)))?;
            caps(weighted_sum(&c, &PredictionTensor::from_upper_major(v[1]), Some(3..6)))?
        });
    }
    {
        let part = partition.clone();
        case!(cases, "weighted_sum_by_type", vec![n(&[2, 6, 3], r), n(&[2, 3, 6, 4], r)], n(&[2, 2, 3, 4], r), |_t, v| {
            let c = caps(coupling_from_logits(&LogitMatrix(v[0]), AxisMode::LowerPerUpper, Some(&part)))?;
            caps(weighted_sum_by_type(&c, &PredictionTensor::from_upper_major(v[1]), &part))?
        });
    }
    case!(cases, "agreement_update", vec![n(&[2, 6, 3], r), n(&[2, 3, 6, 4], r), n(&[2, 3, 4], r)], n(&[2, 6, 3], r), |_t, v| caps(
        agreement_update(&LogitMatrix(v[0]), &PredictionTensor::from_upper_major(v[1]), v[2])
    )?
    .0);

    // losses are already scalar; the probe is a unit weight
    let labels = {
        let mut t = Tensor::zeros(&[3, 4]);
        for b in 0..3 {
            t.set(&[b, r.random_range(0..4)], 1.0);
        }
        t
    };
    case!(cases, "margin_loss", vec![Tensor::uniform(&[3, 4], 0.0, 1.0, r)], Tensor::scalar(1.0), |_t, v| caps(
        margin_loss(v[0], &labels)
    )?);
    case!(cases, "reconstruction_loss", vec![Tensor::uniform(&[2, 9], 0.0, 1.0, r), Tensor::uniform(&[2, 9], 0.0, 1.0, r)], Tensor::scalar(1.0), |_t, v| caps(
        reconstruction_loss(v[0], v[1])
    )?);

    let spec = CapsLayerSpec::new(6, 2, 4, 3, 2, 3).unwrap();
    for config in RoutingConfig::all() {
        case!(cases, format!("route_fused_{config}"), vec![n(&[2, 2, 6, 3], r)], n(&[2, 2, 3], r), |_t, v| caps(
            route_fused(&PredictionTensor::from_upper_major(v[0]), &spec, &config)
        )?
        .v);
    }
    cases
}

/// `num_lower = 6` (two types of three), `num_upper = 2`, capsule dims
/// 4 -> 3, followed by routing and the margin loss on output lengths.
pub fn routing_pass_case(seed: u64, config: RoutingConfig, fused: bool) -> GradCase {
    let mut r = rng(seed);
    let spec = CapsLayerSpec::new(6, 2, 4, 3, 2, 3).unwrap();
    let u = Tensor::randn(&[2, 6, 4], 0.7, &mut r);
    let w = Tensor::randn(&[6, 2, 3, 4], 0.7, &mut r);
    let mut labels = Tensor::zeros(&[2, 2]);
    labels.set(&[0, 0], 1.0);
    labels.set(&[1, 1], 1.0);
    let probe = Tensor::randn(&[2, 2, 3], 1.0, &mut r);
    GradCase {
        name: format!("routing_pass_{config}_r{}", config.iterations),
        inputs: vec![u, w],
        f: Box::new(move |tape: &Tape, v: &[Var]| {
            let primary = caps(squash(v[0], -1))?;
            let pred = caps(predict(primary, v[1]))?;
            let out = if fused {
                caps(route_fused(&pred, &spec, &config))?.v
            } else {
                caps(route(&pred, &spec, &config, false))?.v
            };
            let lengths = out.l2_norm(-1, false)?;
            let loss = caps(margin_loss(lengths, &labels))?;
            loss.add(out.mul(tape.constant(probe.clone()))?.sum_all())
        }),
    }
}

/// A whole network whose PrimaryCaps layer has 6 capsules (2 types on a
/// 1x3 grid) routed to 2 classes.
pub fn tiny_network_arch() -> ArchConfig {
    ArchConfig {
        input: (1, 5, 9),
        stem_channels: 2,
        stem_kernel: 3,
        primary_types: 2,
        primary_dim: 4,
        primary_kernel: 3,
        primary_stride: 2,
        num_classes: 2,
        digit_dim: 3,
        decoder_hidden: (4, 5),
    }
}

/// Margin plus scaled reconstruction loss of the tiny network as a function
/// of all of its parameters.
pub fn network_pass_case(seed: u64, config: RoutingConfig, trace_path: bool) -> GradCase {
    let arch = tiny_network_arch();
    let model = Model::new(arch, config, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    let images = Tensor::uniform(&[2, 1, 5, 9], 0.0, 1.0, &mut r);
    let mut labels = Tensor::zeros(&[2, 2]);
    labels.set(&[0, 1], 1.0);
    labels.set(&[1, 0], 1.0);
    // biases away from zero keep every ReLU clear of its kink, where central
    // differences are meaningless
    let inputs = model
        .params()
        .iter()
        .map(|p| {
            if p.name.ends_with(".bias") {
                Tensor::uniform(p.value.shape(), 0.2, 0.6, &mut r)
            } else {
                p.value.clone()
            }
        })
        .collect();
    GradCase {
        name: format!("network_{config}"),
        inputs,
        f: Box::new(move |tape: &Tape, v: &[Var]| {
            let x = tape.constant(images.clone());
            let out = net(model.forward(v, x, trace_path))?;
            let margin = caps(margin_loss(out.lengths, &labels))?;
            let decoded = net(model.decode(v, out.digit_caps, &labels))?;
            let recon = caps(reconstruction_loss(decoded, x.reshape(&[2, 45])?))?;
            margin.add(recon.scale(0.0005))
        }),
    }
}

pub fn max_rel_error(case: &GradCase) -> f64 {
    check_gradients(&case.inputs, &*case.f).unwrap().max_rel_error
}

/// Random upper-major predictions `[batch, num_upper, num_lower, dim_upper]`
/// for a small grouped layer.
pub fn random_instance(r: &mut ChaCha8Rng) -> (CapsLayerSpec, Tensor) {
    let types = r.random_range(1..=3);
    let per_type = r.random_range(1..=4);
    let upper = r.random_range(1..=4);
    let dim = r.random_range(1..=4);
    let spec = CapsLayerSpec::new(types * per_type, upper, 2, dim, types, per_type).unwrap();
    let batch = r.random_range(1..=2);
    let scale = r.random_range(0.2..2.0);
    (spec, Tensor::randn(&[batch, upper, types * per_type, dim], scale, r))
}

/// Reorders the lower-capsule axis of upper-major predictions.
pub fn permute_lower(u: &Tensor, order: &[usize]) -> Tensor {
    let s = u.shape().to_vec();
    let (b, j, n, d) = (s[0], s[1], s[2], s[3]);
    let mut out = Tensor::zeros(&s);
    for bb in 0..b {
        for jj in 0..j {
            for (dst, &src) in order.iter().enumerate() {
                for k in 0..d {
                    out.set(&[bb, jj, dst, k], u.at(&[bb, jj, src, k]));
                }
            }
        }
    }
    let _ = n;
    out
}
