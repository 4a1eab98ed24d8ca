//! Dynamic routing-by-agreement in four variants.
//!
//! A [`RoutingConfig`] picks the softmax axis and whether lower capsules are
//! routed per type:
//!
//! | axis \ grouping  | `Ungrouped` | `ByType` |
//! |------------------|-------------|----------|
//! | `UpperPerLower`  | Alg. 1 (`b`)  | Alg. 3 (`o`)  |
//! | `LowerPerUpper`  | Alg. 2 (`bc`) | Alg. 4 (`oc`) |
//!
//! In the grouped variants each type `m` produces its own upper capsules
//! `v_jm = squash(s_jm)`, the layer output is `v_j = squash(sum_m v_jm)`, and
//! a single logit matrix is updated against `v_j` for every lower capsule.
//! Routing stays on the tape, so gradients flow through every iteration.

mod fused;

use std::fmt;
use std::str::FromStr;

use crate::capsule_ops::{
    agreement_update, coupling_from_logits, squash, weighted_sum, weighted_sum_by_type, AxisMode, CapsError,
    CapsLayerSpec, LogitMatrix, PredictionTensor, TypePartition,
};
use crate::tensor::{Tensor, Var};

pub use fused::route_fused;

pub const DEFAULT_ITERATIONS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Grouping {
    Ungrouped,
    ByType,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RoutingConfig {
    pub softmax_axis: AxisMode,
    pub grouping: Grouping,
    pub iterations: usize,
}

impl RoutingConfig {
    pub fn new(softmax_axis: AxisMode, grouping: Grouping, iterations: usize) -> Self {
        RoutingConfig {
            softmax_axis,
            grouping,
            iterations,
        }
    }

    pub fn alg1() -> Self {
        Self::new(AxisMode::UpperPerLower, Grouping::Ungrouped, DEFAULT_ITERATIONS)
    }

    pub fn alg2() -> Self {
        Self::new(AxisMode::LowerPerUpper, Grouping::Ungrouped, DEFAULT_ITERATIONS)
    }

    pub fn alg3() -> Self {
        Self::new(AxisMode::UpperPerLower, Grouping::ByType, DEFAULT_ITERATIONS)
    }

    pub fn alg4() -> Self {
        Self::new(AxisMode::LowerPerUpper, Grouping::ByType, DEFAULT_ITERATIONS)
    }

    pub fn all() -> [RoutingConfig; 4] {
        [Self::alg1(), Self::alg2(), Self::alg3(), Self::alg4()]
    }

    pub fn with_iterations(mut self, iterations: usize) -> Self {
        self.iterations = iterations;
        self
    }

    /// `1..=4`, following the algorithm numbering above.
    pub fn algorithm(&self) -> u8 {
        match (self.softmax_axis, self.grouping) {
            (AxisMode::UpperPerLower, Grouping::Ungrouped) => 1,
            (AxisMode::LowerPerUpper, Grouping::Ungrouped) => 2,
            (AxisMode::UpperPerLower, Grouping::ByType) => 3,
            (AxisMode::LowerPerUpper, Grouping::ByType) => 4,
        }
    }

    /// Curve label: `b`, `bc`, `o` or `oc`.
    pub fn label(&self) -> &'static str {
        match self.algorithm() {
            1 => "b",
            2 => "bc",
            3 => "o",
            _ => "oc",
        }
    }

    /// Model name used in result tables.
    pub fn model_name(&self) -> &'static str {
        match self.algorithm() {
            1 => "CapsNet",
            2 => "CapsNet-c",
            3 => "OurNet",
            _ => "OurNet-c",
        }
    }

    pub fn is_grouped(&self) -> bool {
        self.grouping == Grouping::ByType
    }

    /// Partition used to normalize couplings, if normalization is per group.
    fn normalization_partition(&self, spec: &CapsLayerSpec) -> Result<Option<TypePartition>, CapsError> {
        match (self.softmax_axis, self.grouping) {
            (AxisMode::LowerPerUpper, Grouping::ByType) => spec.partition().map(Some),
            _ => Ok(None),
        }
    }

    /// Size of one softmax normalization group.
    pub fn normalization_group_size(&self, spec: &CapsLayerSpec) -> usize {
        match (self.softmax_axis, self.grouping) {
            (AxisMode::UpperPerLower, _) => spec.num_upper,
            (AxisMode::LowerPerUpper, Grouping::Ungrouped) => spec.num_lower,
            (AxisMode::LowerPerUpper, Grouping::ByType) => spec.caps_per_type,
        }
    }

    /// Every coupling coefficient at zero logits: `1 / group size`.
    pub fn initial_coupling(&self, spec: &CapsLayerSpec) -> f64 {
        1.0 / self.normalization_group_size(spec) as f64
    }
}

impl fmt::Display for RoutingConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "alg{}", self.algorithm())
    }
}

impl FromStr for RoutingConfig {
    type Err = String;

    /// Accepts `alg1`..`alg4` or the curve labels `b`, `bc`, `o`, `oc`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "alg1" | "b" => Ok(Self::alg1()),
            "alg2" | "bc" => Ok(Self::alg2()),
            "alg3" | "o" => Ok(Self::alg3()),
            "alg4" | "oc" => Ok(Self::alg4()),
            other => Err(format!("unknown routing '{other}' (expected alg1..alg4 or b/bc/o/oc)")),
        }
    }
}

/// Values of one routing iteration. Logits are the ones the couplings were
/// computed from.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationSnapshot {
    /// `[batch, num_lower, num_upper]`
    pub logits: Tensor,
    /// `[batch, num_lower, num_upper]`
    pub couplings: Tensor,
    /// Per-type outputs `v_jm`, `[batch, num_types, num_upper, dim_upper]`
    /// (grouped modes only).
    pub per_type: Option<Tensor>,
    /// `[batch, num_upper, dim_upper]`
    pub output: Tensor,
    /// `(mean, max)` of `|c_t - c_{t-1}|`; `None` for the first iteration.
    pub coupling_change: Option<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingTrace {
    pub config: RoutingConfig,
    /// Closed-form coupling at zero logits.
    pub initial_coupling: f64,
    pub snapshots: Vec<IterationSnapshot>,
}

pub struct RoutingOutput<'t> {
    /// `[batch, num_upper, dim_upper]`
    pub v: Var<'t>,
    /// Final-iteration `v_jm`, `[batch, num_types, num_upper, dim_upper]`.
    pub per_type: Option<Var<'t>>,
    pub trace: Option<RoutingTrace>,
}

fn coupling_change(prev: &Tensor, next: &Tensor) -> (f64, f64) {
    let (sum, max) = prev
        .data()
        .iter()
        .zip(next.data())
        .map(|(a, b)| (a - b).abs())
        .fold((0.0, 0.0f64), |(s, m), d| (s + d, m.max(d)));
    (sum / prev.len() as f64, max)
}

/// Routes predictions to the upper layer.
pub fn route<'t>(
    u_hat: &PredictionTensor<'t>,
    spec: &CapsLayerSpec,
    config: &RoutingConfig,
    capture_trace: bool,
) -> Result<RoutingOutput<'t>, CapsError> {
    if config.iterations == 0 {
        return Err(CapsError::NoIterations);
    }
    spec.validate()?;
    u_hat.check_spec(spec)?;
    let partition = spec.partition()?;
    let norm_partition = config.normalization_partition(spec)?;
    let (batch, n, j, _) = u_hat.dims();
    let tape = u_hat.upper_major().tape();

    let mut logits = LogitMatrix::zeros(tape, batch, n, j);
    let mut snapshots = Vec::new();
    let mut result = None;
    for iteration in 0..config.iterations {
        let c = coupling_from_logits(&logits, config.softmax_axis, norm_partition.as_ref())?;
        let (v, per_type) = match config.grouping {
            Grouping::Ungrouped => (squash(weighted_sum(&c, u_hat, None)?, -1)?, None),
            Grouping::ByType => {
                let v_m = squash(weighted_sum_by_type(&c, u_hat, &partition)?, -1)?;
                (squash(v_m.sum(1, false)?, -1)?, Some(v_m))
            }
        };
        if capture_trace {
            let couplings = (*c.c.value()).clone();
            let change = snapshots
                .last()
                .map(|prev: &IterationSnapshot| coupling_change(&prev.couplings, &couplings));
            snapshots.push(IterationSnapshot {
                logits: (*logits.0.value()).clone(),
                couplings,
                per_type: per_type.map(|p: Var| (*p.value()).clone()),
                output: (*v.value()).clone(),
                coupling_change: change,
            });
        }
        if iteration + 1 < config.iterations {
            logits = agreement_update(&logits, u_hat, v)?;
        } else {
            result = Some((v, per_type));
        }
    }
    let (v, per_type) = result.expect("at least one iteration");
    Ok(RoutingOutput {
        v,
        per_type,
        trace: capture_trace.then(|| RoutingTrace {
            config: *config,
            initial_coupling: config.initial_coupling(spec),
            snapshots,
        }),
    })
}

fn squash_slice(s: &[f64]) -> Vec<f64> {
    let norm_sq: f64 = s.iter().map(|x| x * x).sum();
    let norm = norm_sq.sqrt();
    let scale = norm_sq / (1.0 + norm_sq) / (norm + crate::capsule_ops::SQUASH_EPSILON);
    s.iter().map(|x| x * scale).collect()
}

/// Straight nested-loop routing over a plain `[batch, num_lower, num_upper,
/// dim_upper]` tensor. Intended as a test oracle for small instances.
pub fn route_reference(u_hat: &Tensor, spec: &CapsLayerSpec, config: &RoutingConfig) -> Result<Tensor, CapsError> {
    if config.iterations == 0 {
        return Err(CapsError::NoIterations);
    }
    spec.validate()?;
    let shape = u_hat.shape();
    if shape.len() != 4 || shape[1..] != [spec.num_lower, spec.num_upper, spec.dim_upper] {
        return Err(CapsError::Shape {
            op: "route_reference",
            expected: vec![shape.first().copied().unwrap_or(0), spec.num_lower, spec.num_upper, spec.dim_upper],
            actual: shape.to_vec(),
        });
    }
    if !u_hat.all_finite() {
        return Err(CapsError::NonFinite { op: "route_reference" });
    }
    let (batch, n, j, d) = (shape[0], shape[1], shape[2], shape[3]);
    let types = spec.num_types;
    let per_type = spec.caps_per_type;
    let grouped = config.is_grouped();
    let pred = |b: usize, i: usize, jj: usize, k: usize| u_hat.data()[((b * n + i) * j + jj) * d + k];

    let mut out = vec![0.0; batch * j * d];
    for b in 0..batch {
        let mut logits = vec![vec![0.0; j]; n];
        let mut v = vec![vec![0.0; d]; j];
        for _ in 0..config.iterations {
            // couplings
            let mut c = vec![vec![0.0; j]; n];
            match config.softmax_axis {
                AxisMode::UpperPerLower => {
                    for i in 0..n {
                        let peak = logits[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let total: f64 = logits[i].iter().map(|x| (x - peak).exp()).sum();
                        for jj in 0..j {
                            c[i][jj] = (logits[i][jj] - peak).exp() / total;
                        }
                    }
                }
                AxisMode::LowerPerUpper => {
                    let group_len = if grouped { per_type } else { n };
                    for start in (0..n).step_by(group_len) {
                        for jj in 0..j {
                            let mut peak = f64::NEG_INFINITY;
                            for i in start..start + group_len {
                                peak = peak.max(logits[i][jj]);
                            }
                            let mut total = 0.0;
                            for i in start..start + group_len {
                                total += (logits[i][jj] - peak).exp();
                            }
                            for i in start..start + group_len {
                                c[i][jj] = (logits[i][jj] - peak).exp() / total;
                            }
                        }
                    }
                }
            }
            // outputs
            if grouped {
                let mut combined = vec![vec![0.0; d]; j];
                for t in 0..types {
                    for jj in 0..j {
                        let mut s = vec![0.0; d];
                        for i in t * per_type..(t + 1) * per_type {
                            for k in 0..d {
                                s[k] += c[i][jj] * pred(b, i, jj, k);
                            }
                        }
                        let v_m = squash_slice(&s);
                        for k in 0..d {
                            combined[jj][k] += v_m[k];
                        }
                    }
                }
                for jj in 0..j {
                    v[jj] = squash_slice(&combined[jj]);
                }
            } else {
                for jj in 0..j {
                    let mut s = vec![0.0; d];
                    for i in 0..n {
                        for k in 0..d {
                            s[k] += c[i][jj] * pred(b, i, jj, k);
                        }
                    }
                    v[jj] = squash_slice(&s);
                }
            }
            // agreement
            for i in 0..n {
                for jj in 0..j {
                    let mut dot = 0.0;
                    for k in 0..d {
                        dot += pred(b, i, jj, k) * v[jj][k];
                    }
                    logits[i][jj] += dot;
                }
            }
        }
        for jj in 0..j {
            for k in 0..d {
                out[(b * j + jj) * d + k] = v[jj][k];
            }
        }
    }
    Ok(Tensor::new(&[batch, j, d], out)?)
}

/// Coupling-change statistics for one routing iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct RateOfChangeRow {
    /// Iteration index `t >= 1`; the change is `c_t - c_{t-1}`.
    pub iteration: usize,
    pub initial_coupling: f64,
    pub mean_abs_change: f64,
    pub max_abs_change: f64,
    /// `mean_abs_change / initial_coupling`
    pub mean_relative_change: f64,
}

pub fn rate_of_change_report(trace: &RoutingTrace) -> Result<Vec<RateOfChangeRow>, CapsError> {
    if trace.snapshots.len() < 2 {
        return Err(CapsError::TraceTooShort(trace.snapshots.len()));
    }
    Ok(trace
        .snapshots
        .iter()
        .enumerate()
        .filter_map(|(t, snap)| {
            snap.coupling_change.map(|(mean, max)| RateOfChangeRow {
                iteration: t,
                initial_coupling: trace.initial_coupling,
                mean_abs_change: mean,
                max_abs_change: max,
                mean_relative_change: mean / trace.initial_coupling,
            })
        })
        .collect())
}

impl RoutingTrace {
    /// Mean over iterations of the mean absolute coupling change.
    pub fn mean_coupling_change(&self) -> Option<f64> {
        let changes: Vec<f64> = self
            .snapshots
            .iter()
            .filter_map(|s| s.coupling_change.map(|(mean, _)| mean))
            .collect();
        (!changes.is_empty()).then(|| changes.iter().sum::<f64>() / changes.len() as f64)
    }

    /// Mean absolute coupling change at the last iteration.
    pub fn final_coupling_change(&self) -> Option<f64> {
        self.snapshots.last().and_then(|s| s.coupling_change.map(|(mean, _)| mean))
    }
}
